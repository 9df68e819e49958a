//! Discrete-time simulation of the physical environment: a motor-driven
//! conveyor belt that carries chassis from Station A to Station B, and a
//! spot-welding robotic arm with a linear heating / exponential cooling model.
//!
//! All mutation goes through [`Plant::step`] and [`Plant::load_object`], which
//! return new [`PlantState`] values. States are plain data and can be shared
//! across threads freely.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ActuatorId, AssetId, SensorId};

/// Numerical slack used when comparing accumulated floating point quantities.
pub const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SensorType {
    Velocity,
    ObjectDetection,
    Current,
    Pressure,
    Temperature,
}

impl fmt::Display for SensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SensorType::Velocity => "Velocity",
            SensorType::ObjectDetection => "ObjectDetection",
            SensorType::Current => "Current",
            SensorType::Pressure => "Pressure",
            SensorType::Temperature => "Temperature",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActuatorKind {
    Conveyor,
    WeldingArm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorBinding {
    pub sensor_id: SensorId,
    pub sensor_type: SensorType,
    pub asset_id: AssetId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorBinding {
    pub actuator_id: ActuatorId,
    pub kind: ActuatorKind,
    pub asset_id: AssetId,
}

/// Belt geometry in belt-length units measured from Station A.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeltGeometry {
    pub belt_length: f64,
    pub object_length: f64,
    /// Inclusive `[lo, hi]` window of the Station-A proximity sensor.
    pub detection_window: (f64, f64),
    pub station_b_position: f64,
}

impl Default for BeltGeometry {
    fn default() -> Self {
        Self {
            belt_length: 20.0,
            object_length: 1.0,
            detection_window: (0.0, 0.5),
            station_b_position: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub dt: f64,
    pub geometry: BeltGeometry,
    /// Ambient ("room") temperature a workpiece starts at and cools back to.
    pub init_temp: f64,
    /// Heating gain: each welding tick adds `k_heat * C * P * dt`.
    pub k_heat: f64,
    /// Cooling rate for `init + (T - init) * exp(-k_cool * dt)`.
    pub k_cool: f64,
    /// Weld task duration in seconds.
    pub weld_duration: f64,
    /// Standard deviation of additive Gaussian sensor noise; 0 disables it.
    #[serde(default)]
    pub sensor_noise_std: f64,
    pub sensors: Vec<SensorBinding>,
    pub actuators: Vec<ActuatorBinding>,
}

impl PlantConfig {
    /// Reference assembly line: conveyor on PLC1, welding arm on PLC2,
    /// Sensor1..Sensor5 as velocity, object detection, current, pressure and
    /// temperature.
    pub fn reference() -> Self {
        let s = |id: &str, t, a: &str| SensorBinding {
            sensor_id: id.into(),
            sensor_type: t,
            asset_id: a.into(),
        };
        Self {
            dt: 0.1,
            geometry: BeltGeometry::default(),
            init_temp: 25.0,
            k_heat: 0.3,
            k_cool: 0.5,
            weld_duration: 2.0,
            sensor_noise_std: 0.0,
            sensors: vec![
                s("Sensor1", SensorType::Velocity, "PLC1"),
                s("Sensor2", SensorType::ObjectDetection, "PLC1"),
                s("Sensor3", SensorType::Current, "PLC2"),
                s("Sensor4", SensorType::Pressure, "PLC2"),
                s("Sensor5", SensorType::Temperature, "PLC2"),
            ],
            actuators: vec![
                ActuatorBinding {
                    actuator_id: "conveyor".into(),
                    kind: ActuatorKind::Conveyor,
                    asset_id: "PLC1".into(),
                },
                ActuatorBinding {
                    actuator_id: "arm".into(),
                    kind: ActuatorKind::WeldingArm,
                    asset_id: "PLC2".into(),
                },
            ],
        }
    }

    /// Number of ticks a weld lasts, at least one.
    pub fn weld_ticks(&self, dt: f64) -> u32 {
        ((self.weld_duration / dt).round() as u32).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Idle,
    Done,
    Welding,
}

impl TaskStatus {
    /// Numeric status code: idle=0, done=1, welding=2.
    pub fn code(self) -> u8 {
        match self {
            TaskStatus::Idle => 0,
            TaskStatus::Done => 1,
            TaskStatus::Welding => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetStatus {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectOnBelt {
    pub object_id: u64,
    pub position: f64,
    pub loaded_at: f64,
    pub welded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    /// Powered; this is the arm's asset status.
    pub enabled: bool,
    pub current: f64,
    pub pressure: f64,
    pub object_temp: f64,
    pub task_status: TaskStatus,
    pub weld_started_at: Option<f64>,
    pub weld_ticks_remaining: u32,
    pub objects_welded: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub tick: u64,
    pub time: f64,
    pub motor_on: bool,
    pub velocity_setpoint: f64,
    pub velocity: f64,
    /// Sorted by ascending position.
    pub belt_objects: Vec<ObjectOnBelt>,
    pub next_object_id: u64,
    pub arm: ArmState,
    pub rng_seed: u64,
    /// Values held by active `SensorStuck` faults.
    pub latched: BTreeMap<SensorId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub sensor_id: SensorId,
    pub sensor_type: SensorType,
    pub value: f64,
    pub timestamp: f64,
    pub asset_id: AssetId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    SensorOffset,
    SensorStuck,
    ActuatorOverride,
    /// Not a plant effect; carried so fault schedules can describe attempts
    /// to tamper with the rule set. The plant ignores it.
    RuleTamperAttempt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub kind: FaultKind,
    /// Sensor id for sensor faults; actuator id for `ActuatorOverride`
    /// (conveyor: velocity, welding arm: weld current).
    pub target: String,
    pub magnitude: f64,
    /// Inclusive `[start_tick, end_tick]`.
    pub active_window: (u64, u64),
}

impl FaultInjection {
    pub fn sensor_offset(sensor: &str, magnitude: f64, window: (u64, u64)) -> Self {
        Self {
            kind: FaultKind::SensorOffset,
            target: sensor.to_owned(),
            magnitude,
            active_window: window,
        }
    }

    pub fn is_active(&self, tick: u64) -> bool {
        self.active_window.0 <= tick && tick <= self.active_window.1
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        if self.active_window.0 > self.active_window.1 {
            return Err(PlantError::InvalidFault("empty active window".into()));
        }
        if !self.magnitude.is_finite() {
            return Err(PlantError::InvalidFault("non-finite magnitude".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action", content = "value")]
pub enum ActuatorAction {
    Power(bool),
    Velocity(f64),
    Current(f64),
    Pressure(f64),
    StartWeld,
    AbortWeld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorCommand {
    pub actuator: ActuatorId,
    #[serde(flatten)]
    pub action: ActuatorAction,
}

impl ActuatorCommand {
    pub fn new(actuator: &str, action: ActuatorAction) -> Self {
        Self {
            actuator: actuator.into(),
            action,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("unknown actuator {0}")]
    UnknownActuator(ActuatorId),
    #[error("unknown sensor {0}")]
    UnknownSensor(SensorId),
    #[error("non-finite setpoint for {0}")]
    NonFiniteCommand(ActuatorId),
    #[error("negative setpoint {value} for {actuator}")]
    NegativeSetpoint { actuator: ActuatorId, value: f64 },
    #[error("actuator {actuator} does not support {action}")]
    UnsupportedAction {
        actuator: ActuatorId,
        action: &'static str,
    },
    #[error("arm is not ready to weld ({0})")]
    ArmNotReady(&'static str),
    #[error("loading slot at Station A is occupied")]
    SlotOccupied,
    #[error("time step must be positive and finite, got {0}")]
    InvalidTimestep(f64),
    #[error("invalid fault: {0}")]
    InvalidFault(String),
    #[error("invalid plant configuration: {0}")]
    InvalidConfig(String),
}

/// A validated plant model. Stateless; states are passed in and returned.
#[derive(Debug, Clone)]
pub struct Plant {
    config: PlantConfig,
}

impl Plant {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn new(config: PlantConfig) -> Result<Self, PlantError> {
        let bad = |m: &str| Err(PlantError::InvalidConfig(m.to_owned()));
        if !(config.dt.is_finite() && config.dt > 0.0) {
            return bad("dt must be positive");
        }
        let g = &config.geometry;
        if !(g.belt_length > 0.0 && g.object_length > 0.0 && g.object_length <= g.belt_length) {
            return bad("belt geometry");
        }
        if !(g.detection_window.0 <= g.detection_window.1) {
            return bad("detection window");
        }
        for v in [
            config.init_temp,
            config.k_heat,
            config.k_cool,
            config.weld_duration,
        ] {
            if !v.is_finite() {
                return bad("non-finite thermal parameter");
            }
        }
        if config.k_heat < 0.0 || config.k_cool < 0.0 || config.weld_duration <= 0.0 {
            return bad("thermal parameters must be non-negative and weld duration positive");
        }
        if !(config.sensor_noise_std >= 0.0 && config.sensor_noise_std.is_finite()) {
            return bad("sensor noise");
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &config.sensors {
            if !seen.insert(s.sensor_id.as_str()) {
                return bad("duplicate sensor id");
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &config.actuators {
            if !seen.insert(a.actuator_id.as_str()) {
                return bad("duplicate actuator id");
            }
        }
        Ok(Self { config })
    }

    pub fn reference() -> Self {
        Self::new(PlantConfig::reference()).expect("reference config is valid")
    }

    pub fn config(&self) -> &PlantConfig {
        &self.config
    }

    /// Initial conditions: motor off, V = 0, empty belt, arm idle at ambient
    /// temperature with C = P = 0.
    pub fn initial_state(&self, rng_seed: u64) -> PlantState {
        PlantState {
            tick: 0,
            time: 0.0,
            motor_on: false,
            velocity_setpoint: 0.0,
            velocity: 0.0,
            belt_objects: Vec::new(),
            next_object_id: 1,
            arm: ArmState {
                enabled: false,
                current: 0.0,
                pressure: 0.0,
                object_temp: self.config.init_temp,
                task_status: TaskStatus::Idle,
                weld_started_at: None,
                weld_ticks_remaining: 0,
                objects_welded: 0,
            },
            rng_seed,
            latched: BTreeMap::new(),
        }
    }

    pub fn sensor(&self, id: &str) -> Option<&SensorBinding> {
        self.config.sensors.iter().find(|s| s.sensor_id == id)
    }

    pub fn sensor_of_type(&self, t: SensorType) -> Option<&SensorBinding> {
        self.config.sensors.iter().find(|s| s.sensor_type == t)
    }

    pub fn actuator(&self, id: &str) -> Option<&ActuatorBinding> {
        self.config.actuators.iter().find(|a| a.actuator_id == id)
    }

    pub fn actuator_of_kind(&self, kind: ActuatorKind) -> Option<&ActuatorBinding> {
        self.config.actuators.iter().find(|a| a.kind == kind)
    }

    /// Advances the plant by one tick of length `dt`.
    pub fn step(
        &self,
        state: &PlantState,
        commands: &[ActuatorCommand],
        faults: &[FaultInjection],
        dt: f64,
    ) -> Result<PlantState, PlantError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(PlantError::InvalidTimestep(dt));
        }
        for f in faults {
            f.validate()?;
        }
        let mut next = state.clone();
        for cmd in commands {
            self.apply_command(&mut next, state.time, cmd, dt)?;
        }

        next.tick = state.tick + 1;
        next.time = next.tick as f64 * dt;

        let mut velocity_sp = next.velocity_setpoint;
        let mut current = next.arm.current;
        for f in faults
            .iter()
            .filter(|f| f.kind == FaultKind::ActuatorOverride && f.is_active(next.tick))
        {
            match self.actuator(&f.target).map(|a| a.kind) {
                Some(ActuatorKind::Conveyor) => velocity_sp = f.magnitude.max(0.0),
                Some(ActuatorKind::WeldingArm) => current = f.magnitude.max(0.0),
                None => return Err(PlantError::UnknownActuator(f.target.as_str().into())),
            }
        }

        // Belt kinematics.
        next.velocity = if next.motor_on { velocity_sp } else { 0.0 };
        if next.velocity > 0.0 {
            let len = self.config.geometry.belt_length;
            for o in &mut next.belt_objects {
                o.position += next.velocity * dt;
            }
            next.belt_objects.retain(|o| o.position <= len + EPS);
            for o in &mut next.belt_objects {
                o.position = o.position.min(len);
            }
        }

        // Arm thermal dynamics.
        let arm = &mut next.arm;
        if arm.task_status == TaskStatus::Welding {
            arm.object_temp += self.config.k_heat * current * arm.pressure * dt;
            arm.weld_ticks_remaining = arm.weld_ticks_remaining.saturating_sub(1);
            if arm.weld_ticks_remaining == 0 {
                arm.task_status = TaskStatus::Done;
                arm.objects_welded += 1;
            }
        } else {
            let init = self.config.init_temp;
            arm.object_temp = init + (arm.object_temp - init) * (-self.config.k_cool * dt).exp();
        }

        // Stuck sensors hold the last value read before the fault window.
        let mut latched = BTreeMap::new();
        for f in faults
            .iter()
            .filter(|f| f.kind == FaultKind::SensorStuck && f.is_active(next.tick))
        {
            let binding = self
                .sensor(&f.target)
                .ok_or_else(|| PlantError::UnknownSensor(f.target.as_str().into()))?;
            let held = match state.latched.get(binding.sensor_id.as_str()) {
                Some(v) => *v,
                None => self.visible_value(state, binding, &[]),
            };
            latched.insert(binding.sensor_id.clone(), held);
        }
        next.latched = latched;
        Ok(next)
    }

    fn apply_command(
        &self,
        next: &mut PlantState,
        now: f64,
        cmd: &ActuatorCommand,
        dt: f64,
    ) -> Result<(), PlantError> {
        let binding = self
            .actuator(cmd.actuator.as_str())
            .ok_or_else(|| PlantError::UnknownActuator(cmd.actuator.clone()))?;
        let setpoint = |v: f64| -> Result<f64, PlantError> {
            if !v.is_finite() {
                Err(PlantError::NonFiniteCommand(cmd.actuator.clone()))
            } else if v < 0.0 {
                Err(PlantError::NegativeSetpoint {
                    actuator: cmd.actuator.clone(),
                    value: v,
                })
            } else {
                Ok(v)
            }
        };
        let unsupported = |action| PlantError::UnsupportedAction {
            actuator: cmd.actuator.clone(),
            action,
        };
        match (binding.kind, cmd.action) {
            (ActuatorKind::Conveyor, ActuatorAction::Power(on)) => next.motor_on = on,
            (ActuatorKind::Conveyor, ActuatorAction::Velocity(v)) => {
                next.velocity_setpoint = setpoint(v)?
            }
            (ActuatorKind::WeldingArm, ActuatorAction::Power(on)) => {
                next.arm.enabled = on;
                if !on && next.arm.task_status == TaskStatus::Welding {
                    next.arm.task_status = TaskStatus::Idle;
                    next.arm.weld_ticks_remaining = 0;
                }
            }
            (ActuatorKind::WeldingArm, ActuatorAction::Current(v)) => {
                next.arm.current = setpoint(v)?
            }
            (ActuatorKind::WeldingArm, ActuatorAction::Pressure(v)) => {
                next.arm.pressure = setpoint(v)?
            }
            (ActuatorKind::WeldingArm, ActuatorAction::StartWeld) => {
                if !next.arm.enabled {
                    return Err(PlantError::ArmNotReady("arm is powered off"));
                }
                if next.arm.task_status == TaskStatus::Welding {
                    return Err(PlantError::ArmNotReady("weld already in progress"));
                }
                // A fresh workpiece enters the fixture at ambient temperature.
                next.arm.task_status = TaskStatus::Welding;
                next.arm.object_temp = self.config.init_temp;
                next.arm.weld_started_at = Some(now);
                next.arm.weld_ticks_remaining = self.config.weld_ticks(dt);
                let g = &self.config.geometry;
                if let Some(o) = next.belt_objects.iter_mut().find(|o| {
                    !o.welded && (o.position - g.station_b_position).abs() <= g.object_length
                }) {
                    o.welded = true;
                }
            }
            (ActuatorKind::WeldingArm, ActuatorAction::AbortWeld) => {
                if next.arm.task_status == TaskStatus::Welding {
                    next.arm.task_status = TaskStatus::Idle;
                    next.arm.weld_ticks_remaining = 0;
                }
            }
            (ActuatorKind::Conveyor, a) => return Err(unsupported(action_name(a))),
            (ActuatorKind::WeldingArm, a) => return Err(unsupported(action_name(a))),
        }
        Ok(())
    }

    /// Places a new chassis at Station A (position 0).
    pub fn load_object(&self, state: &PlantState) -> Result<PlantState, PlantError> {
        let len = self.config.geometry.object_length;
        if state.belt_objects.iter().any(|o| o.position < len - EPS) {
            tracing::debug!(tick = state.tick, "load rejected: slot occupied");
            return Err(PlantError::SlotOccupied);
        }
        let mut next = state.clone();
        next.belt_objects.insert(
            0,
            ObjectOnBelt {
                object_id: state.next_object_id,
                position: 0.0,
                loaded_at: state.time,
                welded: false,
            },
        );
        next.next_object_id += 1;
        Ok(next)
    }

    /// Sensor-visible reading: truthful value plus noise, with active faults
    /// applied.
    pub fn read_sensor(
        &self,
        state: &PlantState,
        sensor_id: &str,
        faults: &[FaultInjection],
    ) -> Result<SensorReading, PlantError> {
        let binding = self
            .sensor(sensor_id)
            .ok_or_else(|| PlantError::UnknownSensor(sensor_id.into()))?;
        Ok(SensorReading {
            sensor_id: binding.sensor_id.clone(),
            sensor_type: binding.sensor_type,
            value: self.visible_value(state, binding, faults),
            timestamp: state.time,
            asset_id: binding.asset_id.clone(),
        })
    }

    /// All registered sensors, in registration order.
    pub fn read_all(&self, state: &PlantState, faults: &[FaultInjection]) -> Vec<SensorReading> {
        self.config
            .sensors
            .iter()
            .map(|b| SensorReading {
                sensor_id: b.sensor_id.clone(),
                sensor_type: b.sensor_type,
                value: self.visible_value(state, b, faults),
                timestamp: state.time,
                asset_id: b.asset_id.clone(),
            })
            .collect()
    }

    fn visible_value(
        &self,
        state: &PlantState,
        binding: &SensorBinding,
        faults: &[FaultInjection],
    ) -> f64 {
        let mut value = self.truthful_value(state, binding.sensor_type);
        if self.config.sensor_noise_std > 0.0 && binding.sensor_type != SensorType::ObjectDetection
        {
            value += self.noise(state, binding);
        }
        if let Some(held) = state.latched.get(binding.sensor_id.as_str()) {
            if faults.iter().any(|f| {
                f.kind == FaultKind::SensorStuck
                    && f.target == binding.sensor_id.as_str()
                    && f.is_active(state.tick)
            }) {
                value = *held;
            }
        }
        for f in faults.iter().filter(|f| {
            f.kind == FaultKind::SensorOffset
                && f.target == binding.sensor_id.as_str()
                && f.is_active(state.tick)
        }) {
            value += f.magnitude;
        }
        value
    }

    pub fn truthful_value(&self, state: &PlantState, t: SensorType) -> f64 {
        match t {
            SensorType::Velocity => state.velocity,
            SensorType::ObjectDetection => {
                let (lo, hi) = self.config.geometry.detection_window;
                let hit = state
                    .belt_objects
                    .iter()
                    .any(|o| !o.welded && o.position >= lo - EPS && o.position <= hi + EPS);
                if hit {
                    1.0
                } else {
                    0.0
                }
            }
            SensorType::Current => state.arm.current,
            SensorType::Pressure => state.arm.pressure,
            SensorType::Temperature => state.arm.object_temp,
        }
    }

    fn noise(&self, state: &PlantState, binding: &SensorBinding) -> f64 {
        let idx = self
            .config
            .sensors
            .iter()
            .position(|s| s.sensor_id == binding.sensor_id)
            .unwrap_or(0) as u64;
        let seed = state
            .rng_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(state.tick.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            .wrapping_add(idx);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Normal::new(0.0, self.config.sensor_noise_std)
            .expect("validated std")
            .sample(&mut rng)
    }

    /// Current status of every asset that owns a sensor or actuator. An asset
    /// with actuators is on iff any of them is powered; one without is on.
    pub fn asset_statuses(&self, state: &PlantState) -> BTreeMap<AssetId, AssetStatus> {
        let mut out = BTreeMap::new();
        for s in &self.config.sensors {
            out.insert(s.asset_id.clone(), AssetStatus::On);
        }
        let mut powered: BTreeMap<AssetId, bool> = BTreeMap::new();
        for a in &self.config.actuators {
            let on = match a.kind {
                ActuatorKind::Conveyor => state.motor_on,
                ActuatorKind::WeldingArm => state.arm.enabled,
            };
            *powered.entry(a.asset_id.clone()).or_default() |= on;
        }
        for (asset, on) in powered {
            out.insert(
                asset,
                if on {
                    AssetStatus::On
                } else {
                    AssetStatus::Off
                },
            );
        }
        out
    }

    /// Snapshot of `state` as one trace line.
    pub fn record(&self, state: &PlantState, faults: &[FaultInjection]) -> TraceRecord {
        TraceRecord {
            tick: state.tick,
            time: state.time,
            motor_on: state.motor_on,
            velocity: state.velocity,
            objects: state
                .belt_objects
                .iter()
                .map(|o| ObjectRecord {
                    id: o.object_id,
                    position: o.position,
                    welded: o.welded,
                })
                .collect(),
            arm: ArmRecord {
                enabled: state.arm.enabled,
                current: state.arm.current,
                pressure: state.arm.pressure,
                object_temp: state.arm.object_temp,
                task_status: state.arm.task_status,
                weld_started_at: state.arm.weld_started_at,
                objects_welded: state.arm.objects_welded,
            },
            assets: self.asset_statuses(state),
            readings: self.read_all(state, faults),
        }
    }

    /// Replays an input schedule for `ticks` steps from `initial`, returning
    /// the trace (initial record included) and the final state.
    pub fn run(
        &self,
        initial: &PlantState,
        schedule: &InputSchedule,
        faults: &[FaultInjection],
        ticks: u64,
    ) -> Result<(PlantTrace, PlantState), PlantError> {
        let dt = self.config.dt;
        let mut state = initial.clone();
        let mut records = vec![self.record(&state, faults)];
        for _ in 0..ticks {
            let input = schedule.at(state.tick);
            if input.is_some_and(|i| i.load) {
                state = self.load_object(&state)?;
            }
            let cmds = input.map(|i| i.commands.as_slice()).unwrap_or(&[]);
            state = self.step(&state, cmds, faults, dt)?;
            records.push(self.record(&state, faults));
        }
        Ok((PlantTrace { records }, state))
    }
}

fn action_name(a: ActuatorAction) -> &'static str {
    match a {
        ActuatorAction::Power(_) => "power",
        ActuatorAction::Velocity(_) => "velocity",
        ActuatorAction::Current(_) => "current",
        ActuatorAction::Pressure(_) => "pressure",
        ActuatorAction::StartWeld => "start_weld",
        ActuatorAction::AbortWeld => "abort_weld",
    }
}

/// Inputs applied at one tick: an optional load at Station A (before the
/// step) and actuator commands for the step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScheduledInput {
    pub tick: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub load: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub commands: Vec<ActuatorCommand>,
}

/// A replayable schedule of plant inputs, sorted by tick.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InputSchedule {
    pub inputs: Vec<ScheduledInput>,
}

impl InputSchedule {
    pub fn at(&self, tick: u64) -> Option<&ScheduledInput> {
        self.inputs
            .binary_search_by_key(&tick, |i| i.tick)
            .ok()
            .map(|i| &self.inputs[i])
    }

    /// Adds inputs for `tick`, merging with any existing entry.
    pub fn push(&mut self, tick: u64, load: bool, commands: Vec<ActuatorCommand>) {
        match self.inputs.binary_search_by_key(&tick, |i| i.tick) {
            Ok(i) => {
                self.inputs[i].load |= load;
                self.inputs[i].commands.extend(commands);
            }
            Err(i) => self.inputs.insert(
                i,
                ScheduledInput {
                    tick,
                    load,
                    commands,
                },
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: u64,
    pub position: f64,
    pub welded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub enabled: bool,
    pub current: f64,
    pub pressure: f64,
    pub object_temp: f64,
    pub task_status: TaskStatus,
    pub weld_started_at: Option<f64>,
    pub objects_welded: u64,
}

/// One line of the plant trace export. Field order is the canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub tick: u64,
    pub time: f64,
    pub motor_on: bool,
    pub velocity: f64,
    pub objects: Vec<ObjectRecord>,
    pub arm: ArmRecord,
    pub assets: BTreeMap<AssetId, AssetStatus>,
    pub readings: Vec<SensorReading>,
}

impl TraceRecord {
    pub fn reading(&self, sensor_id: &str) -> Option<&SensorReading> {
        self.readings.iter().find(|r| r.sensor_id == sensor_id)
    }
}

#[derive(Debug, Error)]
pub enum TraceParseError {
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: tick {tick} does not follow {prev}")]
    NonMonotonic { line: usize, tick: u64, prev: u64 },
}

/// Newline-delimited plant trace, one record per tick.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantTrace {
    pub records: Vec<TraceRecord>,
}

impl PlantTrace {
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self, TraceParseError> {
        let mut records: Vec<TraceRecord> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord =
                serde_json::from_str(line).map_err(|source| TraceParseError::Line {
                    line: i + 1,
                    source,
                })?;
            if let Some(prev) = records.last() {
                if rec.tick <= prev.tick {
                    return Err(TraceParseError::NonMonotonic {
                        line: i + 1,
                        tick: rec.tick,
                        prev: prev.tick,
                    });
                }
            }
            records.push(rec);
        }
        Ok(Self { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plant_with_dt(dt: f64) -> Plant {
        let mut cfg = PlantConfig::reference();
        cfg.dt = dt;
        Plant::new(cfg).unwrap()
    }

    fn on(v: f64) -> Vec<ActuatorCommand> {
        vec![
            ActuatorCommand::new("conveyor", ActuatorAction::Power(true)),
            ActuatorCommand::new("conveyor", ActuatorAction::Velocity(v)),
        ]
    }

    #[test]
    fn motor_on_advances_position() {
        let p = plant_with_dt(1.0);
        let mut s = p.initial_state(0);
        s.belt_objects.push(ObjectOnBelt {
            object_id: 1,
            position: 4.0,
            loaded_at: 0.0,
            welded: false,
        });
        let s = p.step(&s, &on(2.0), &[], 1.0).unwrap();
        assert_eq!(s.belt_objects[0].position, 6.0);
        assert_eq!(s.tick, 1);
    }

    #[test]
    fn motor_off_freezes_belt() {
        let p = plant_with_dt(1.0);
        let mut s = p.initial_state(0);
        s.belt_objects.push(ObjectOnBelt {
            object_id: 1,
            position: 4.0,
            loaded_at: 0.0,
            welded: false,
        });
        let cmds = vec![ActuatorCommand::new(
            "conveyor",
            ActuatorAction::Velocity(3.0),
        )];
        let s = p.step(&s, &cmds, &[], 1.0).unwrap();
        assert_eq!(s.belt_objects[0].position, 4.0);
        assert_eq!(s.velocity, 0.0);
        assert_eq!(s.velocity_setpoint, 3.0);
    }

    #[test]
    fn command_errors() {
        let p = Plant::reference();
        let s = p.initial_state(0);
        let bad = [ActuatorCommand::new("pump", ActuatorAction::Power(true))];
        assert!(matches!(
            p.step(&s, &bad, &[], 0.1),
            Err(PlantError::UnknownActuator(_))
        ));
        let nan = [ActuatorCommand::new(
            "conveyor",
            ActuatorAction::Velocity(f64::NAN),
        )];
        assert!(matches!(
            p.step(&s, &nan, &[], 0.1),
            Err(PlantError::NonFiniteCommand(_))
        ));
        let inf = [ActuatorCommand::new(
            "arm",
            ActuatorAction::Current(f64::INFINITY),
        )];
        assert!(matches!(
            p.step(&s, &inf, &[], 0.1),
            Err(PlantError::NonFiniteCommand(_))
        ));
        let weld_on_belt = [ActuatorCommand::new("conveyor", ActuatorAction::StartWeld)];
        assert!(matches!(
            p.step(&s, &weld_on_belt, &[], 0.1),
            Err(PlantError::UnsupportedAction { .. })
        ));
        assert!(matches!(
            p.step(&s, &[], &[], 0.0),
            Err(PlantError::InvalidTimestep(_))
        ));
        let weld_unpowered = [ActuatorCommand::new("arm", ActuatorAction::StartWeld)];
        assert!(matches!(
            p.step(&s, &weld_unpowered, &[], 0.1),
            Err(PlantError::ArmNotReady(_))
        ));
    }

    #[test]
    fn detection_window() {
        let p = Plant::reference();
        let mut s = p.initial_state(0);
        let r = p.read_sensor(&s, "Sensor2", &[]).unwrap();
        assert_eq!(r.value, 0.0);
        s.belt_objects.push(ObjectOnBelt {
            object_id: 1,
            position: 0.1,
            loaded_at: 0.0,
            welded: false,
        });
        assert_eq!(p.read_sensor(&s, "Sensor2", &[]).unwrap().value, 1.0);
        assert!(matches!(
            p.read_sensor(&s, "Sensor9", &[]),
            Err(PlantError::UnknownSensor(_))
        ));
    }

    #[test]
    fn additive_offset_fault() {
        let p = Plant::reference();
        let mut s = p.initial_state(0);
        s.arm.object_temp = 40.0;
        let f = FaultInjection::sensor_offset("Sensor5", 15.0, (0, 10));
        assert_eq!(p.read_sensor(&s, "Sensor5", &[f]).unwrap().value, 55.0);
    }

    #[test]
    fn stuck_sensor_holds_pre_fault_value() {
        let p = plant_with_dt(1.0);
        let stuck = FaultInjection {
            kind: FaultKind::SensorStuck,
            target: "Sensor1".into(),
            magnitude: 0.0,
            active_window: (2, 4),
        };
        let faults = [stuck];
        let s1 = p.step(&p.initial_state(0), &on(2.0), &faults, 1.0).unwrap();
        assert_eq!(p.read_sensor(&s1, "Sensor1", &faults).unwrap().value, 2.0);
        let s2 = p.step(&s1, &on(3.0), &faults, 1.0).unwrap();
        assert_eq!(s2.velocity, 3.0);
        assert_eq!(p.read_sensor(&s2, "Sensor1", &faults).unwrap().value, 2.0);
        let s3 = p.step(&s2, &on(4.0), &faults, 1.0).unwrap();
        assert_eq!(p.read_sensor(&s3, "Sensor1", &faults).unwrap().value, 2.0);
        let s5 = p
            .step(&p.step(&s3, &[], &faults, 1.0).unwrap(), &[], &faults, 1.0)
            .unwrap();
        assert_eq!(s5.tick, 5);
        assert_eq!(p.read_sensor(&s5, "Sensor1", &faults).unwrap().value, 4.0);
    }

    #[test]
    fn actuator_override_drives_physics() {
        let p = plant_with_dt(1.0);
        let f = FaultInjection {
            kind: FaultKind::ActuatorOverride,
            target: "conveyor".into(),
            magnitude: 7.0,
            active_window: (1, 1),
        };
        let s = p.step(&p.initial_state(0), &on(2.0), &[f], 1.0).unwrap();
        assert_eq!(s.velocity, 7.0);
        assert_eq!(s.velocity_setpoint, 2.0);
    }

    #[test]
    fn load_object_slot_rules() {
        let p = Plant::reference();
        let s = p.initial_state(0);
        let s = p.load_object(&s).unwrap();
        assert_eq!(s.belt_objects.len(), 1);
        assert_eq!(s.belt_objects[0].position, 0.0);
        let mut occupied = s.clone();
        occupied.belt_objects[0].position = 0.2;
        assert_eq!(p.load_object(&occupied), Err(PlantError::SlotOccupied));
    }

    #[test]
    fn load_advance_load_spacing() {
        // Kinematic oracle: one step at V moves the first object V*dt, which
        // becomes the spacing once the second object is loaded at 0.
        let p = plant_with_dt(0.5);
        let mut s = p.step(&p.initial_state(0), &on(3.0), &[], 0.5).unwrap();
        s = p.load_object(&s).unwrap();
        s = p.step(&s, &[], &[], 0.5).unwrap();
        assert!(s.belt_objects[0].position >= 1.0);
        s = p.load_object(&s).unwrap();
        assert_eq!(s.belt_objects.len(), 2);
        let spacing = s.belt_objects[1].position - s.belt_objects[0].position;
        assert!((spacing - 3.0 * 0.5).abs() < 1e-12);
        let ids: Vec<_> = s.belt_objects.iter().map(|o| o.object_id).collect();
        assert_eq!(ids, vec![2, 1]);
    }

    #[test]
    fn weld_heats_then_cools() {
        let p = Plant::reference();
        let cfg = p.config().clone();
        let (c, pr) = (100.0, 3.0);
        let mut s = p.initial_state(0);
        let start = vec![
            ActuatorCommand::new("arm", ActuatorAction::Power(true)),
            ActuatorCommand::new("arm", ActuatorAction::Current(c)),
            ActuatorCommand::new("arm", ActuatorAction::Pressure(pr)),
            ActuatorCommand::new("arm", ActuatorAction::StartWeld),
        ];
        s = p.step(&s, &start, &[], cfg.dt).unwrap();
        let mut prev = s.arm.object_temp;
        while s.arm.task_status == TaskStatus::Welding {
            s = p.step(&s, &[], &[], cfg.dt).unwrap();
            assert!(s.arm.object_temp >= prev);
            prev = s.arm.object_temp;
        }
        assert_eq!(s.arm.task_status, TaskStatus::Done);
        assert_eq!(s.arm.objects_welded, 1);
        // Closed form: init + k_heat * C * P * d.
        let oracle = cfg.init_temp + cfg.k_heat * c * pr * cfg.weld_duration;
        assert!((s.arm.object_temp - oracle).abs() <= cfg.k_heat * c * pr * cfg.dt);
        let started = s.arm.weld_started_at.unwrap();
        assert!((s.time - started - cfg.weld_duration).abs() < 1e-9);
        for _ in 0..200 {
            let n = p.step(&s, &[], &[], cfg.dt).unwrap();
            assert!(n.arm.object_temp <= s.arm.object_temp);
            assert!(n.arm.object_temp >= cfg.init_temp);
            s = n;
        }
        assert!((s.arm.object_temp - cfg.init_temp) < 1.0);
    }

    #[test]
    fn trace_roundtrip_and_order() {
        let p = Plant::reference();
        let mut sched = InputSchedule::default();
        sched.push(0, false, on(2.0));
        sched.push(1, true, vec![]);
        let (trace, _) = p.run(&p.initial_state(3), &sched, &[], 5).unwrap();
        let text = trace.to_ndjson();
        assert_eq!(text.lines().count(), 6);
        let first = text.lines().next().unwrap();
        assert!(first.starts_with(
            "{\"tick\":0,\"time\":0.0,\"motor_on\":false,\"velocity\":0.0,\"objects\":[]"
        ));
        assert_eq!(PlantTrace::from_ndjson(&text).unwrap(), trace);
    }

    #[test]
    fn trace_parse_rejects_unknown_fields() {
        let p = Plant::reference();
        let (trace, _) = p
            .run(&p.initial_state(0), &InputSchedule::default(), &[], 1)
            .unwrap();
        let line = trace.to_ndjson().lines().next().unwrap().to_owned();
        let bad = line.replacen("{", "{\"extra\":1,", 1);
        assert!(PlantTrace::from_ndjson(&bad).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let mut cfg = PlantConfig::reference();
        cfg.sensor_noise_std = 0.5;
        let p = Plant::new(cfg).unwrap();
        let a = p.read_sensor(&p.initial_state(1), "Sensor5", &[]).unwrap();
        let b = p.read_sensor(&p.initial_state(1), "Sensor5", &[]).unwrap();
        let c = p.read_sensor(&p.initial_state(2), "Sensor5", &[]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.value, c.value);
    }
}
