//! Virtual environment: twin generation from engineering knowledge,
//! simulation runs for the conveyor and the welding arm, replication of a
//! recorded plant trace, and the tune-and-rerun loop.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{json_digest, sha256, Digest};
use crate::icm::{
    consistency_check, validate_spec, CalibrationRecord, DomainKnowledge, EngineeringKnowledge,
    IcmError, ProvenanceBuilder, ValidationReport,
};
use crate::ids::{AssetId, RuleId, SensorId};
use crate::ledger::{
    EntryKind, EntryPayload, IncidentRecord, LedgerError, LedgerHandle, LedgerQuery, SpecRecord,
};
use crate::plant::{
    ActuatorAction, ActuatorBinding, ActuatorCommand, ActuatorKind, AssetStatus, BeltGeometry,
    FaultInjection, InputSchedule, Plant, PlantConfig, PlantError, PlantState, PlantTrace,
    SensorBinding, SensorType, TaskStatus, TraceRecord, EPS,
};
use crate::rbac::Principal;
use crate::rules::{
    evaluate, RuleBook, RuleError, RulePredicate, SignalRegistry, TelemetrySnapshot, Verdict,
};

/// Inclusive `[min, max]` interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.min <= v && v <= self.max
    }

    pub fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }

    /// `n` evenly spaced points from min to max (just `min` when n is 1).
    pub fn grid(&self, n: usize) -> Vec<f64> {
        match n {
            0 => vec![],
            1 => vec![self.min],
            _ => (0..n)
                .map(|i| self.min + (self.max - self.min) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

fn default_init_temp() -> f64 {
    25.0
}

/// Process-specific settings ε and model constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinConfig {
    pub tau_v: Bounds,
    pub tau_o: Bounds,
    pub tau_c: Bounds,
    pub tau_p: Bounds,
    pub tau_t: Bounds,
    /// Inter-load delay at Station A and weld duration at Station B.
    pub d: f64,
    pub k_heat: f64,
    pub k_cool: f64,
    pub a_max_capacity: u64,
    pub dt: f64,
    pub max_ticks: u64,
    #[serde(default = "default_init_temp")]
    pub init_temp: f64,
    #[serde(default)]
    pub geometry: BeltGeometry,
    #[serde(default)]
    pub seed: u64,
}

impl TwinConfig {
    pub fn reference() -> Self {
        Self {
            tau_v: Bounds::new(1.0, 5.0),
            tau_o: Bounds::new(0.0, 10.0),
            tau_c: Bounds::new(80.0, 120.0),
            tau_p: Bounds::new(2.0, 4.0),
            tau_t: Bounds::new(20.0, 400.0),
            d: 2.0,
            k_heat: 0.3,
            k_cool: 0.5,
            a_max_capacity: 5,
            dt: 0.1,
            max_ticks: 500,
            init_temp: 25.0,
            geometry: BeltGeometry::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TwinError> {
        let bad = |m: String| Err(TwinError::ConfigInvalid(m));
        for (name, b) in self.bounds() {
            if !b.is_valid() {
                return bad(format!("{name} must satisfy min <= max with finite values"));
            }
        }
        if !(self.d.is_finite() && self.d > 0.0) {
            return bad("d must be positive".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be positive".into());
        }
        if self.a_max_capacity < 1 {
            return bad("a_max_capacity must be at least 1".into());
        }
        if !(self.k_heat.is_finite()
            && self.k_heat >= 0.0
            && self.k_cool.is_finite()
            && self.k_cool >= 0.0)
        {
            return bad("k_heat and k_cool must be non-negative".into());
        }
        if self.max_ticks == 0 {
            return bad("max_ticks must be at least 1".into());
        }
        Ok(())
    }

    pub fn bounds(&self) -> [(&'static str, Bounds); 5] {
        [
            ("tau_v", self.tau_v),
            ("tau_o", self.tau_o),
            ("tau_c", self.tau_c),
            ("tau_p", self.tau_p),
            ("tau_t", self.tau_t),
        ]
    }

    /// Ticks between loads: the smallest whole number of ticks covering d.
    pub fn load_interval_ticks(&self) -> u64 {
        ((self.d / self.dt) - EPS).ceil().max(1.0) as u64
    }

    /// Closed-form peak workpiece temperature for a full weld.
    pub fn peak_temp(&self, current: f64, pressure: f64) -> f64 {
        self.init_temp + self.k_heat * current * pressure * self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

impl Severity {
    pub fn code(self) -> u8 {
        match self {
            Severity::Info => 0,
            Severity::Warning => 1,
            Severity::Critical => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Severity::Info,
            1 => Severity::Warning,
            2 => Severity::Critical,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    None,
    SchedulingService,
    CalibrationService,
    Shutdown,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::None => "none",
            Action::SchedulingService => "scheduling_service",
            Action::CalibrationService => "calibration_service",
            Action::Shutdown => "shutdown",
        }
    }
}

/// The rule an incident cites.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ViolatedRule {
    Rule {
        rule_id: RuleId,
        version: u32,
    },
    /// A simulation setting whose rule has not been stored yet.
    Setting {
        name: String,
    },
    NoMatchingRule,
}

impl fmt::Display for ViolatedRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolatedRule::Rule { rule_id, version } => write!(f, "{rule_id}@v{version}"),
            ViolatedRule::Setting { name } => write!(f, "setting:{name}"),
            ViolatedRule::NoMatchingRule => f.write_str("no-matching-rule"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentKind {
    SetpointOutOfBounds,
    CountExceeded,
    CountBelowMinimum,
    TemperatureBreach,
    VelocityBreach,
    ConsistencyFailure,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub incident_id: String,
    pub run_id: String,
    /// Per-run sequence number, starting at 1.
    pub seq: u64,
    pub tick: u64,
    pub kind: IncidentKind,
    pub violated_rule: ViolatedRule,
    pub actor_ids: Vec<String>,
    pub observed: BTreeMap<String, f64>,
    pub severity: Severity,
    pub action_taken: Action,
}

impl Incident {
    pub fn to_record(&self, trace_digest: Option<Digest>) -> IncidentRecord {
        IncidentRecord {
            incident_id: self.incident_id.clone(),
            run_id: self.run_id.clone(),
            tick: self.tick,
            violated_rule: self.violated_rule.clone(),
            actor_ids: self.actor_ids.clone(),
            severity: self.severity,
            action_taken: self.action_taken.as_str().to_owned(),
            observed_digest: json_digest(&self.observed),
            trace_digest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Simulation,
    Replication,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Optimal,
    Incident,
    CapacityReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConveyorInputs {
    /// Velocity setpoint V.
    pub velocity: f64,
    /// Ticks at which a chassis load is requested; served in order, no
    /// sooner than d after the previous load.
    #[serde(default)]
    pub loads: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmInputs {
    pub current: f64,
    pub pressure: f64,
    /// Objects to weld, one after another.
    pub objects: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum RunInputs {
    Conveyor(ConveyorInputs),
    Arm(ArmInputs),
    Replication {
        calibration: Vec<CalibrationRecord>,
        trace_digest: Digest,
    },
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tick: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Setpoint {
        name: String,
        value: f64,
        accepted: bool,
        via: String,
    },
    Load {
        object_id: u64,
    },
    Detection {
        o_count: u64,
    },
    WeldStart {
        object: u64,
    },
    WeldComplete {
        o_count: u64,
        peak_temp: f64,
    },
    WeldAbort {
        temp: f64,
    },
    EquipmentHealthCheck {
        o_count: u64,
    },
    Incident {
        incident_id: String,
        kind: IncidentKind,
        violated_rule: String,
    },
    ServiceCall {
        service: Action,
        sensor: String,
        proposal: Option<f64>,
    },
    RuleWritten {
        rule_id: RuleId,
        version: u32,
    },
    Shutdown {
        asset: String,
    },
}

impl fmt::Display for TraceEvent {
    /// `tick=<n> <event> key=value...`, keys in a fixed order per event.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tick={} ", self.tick)?;
        match &self.event {
            Event::Setpoint {
                name,
                value,
                accepted,
                via,
            } => write!(
                f,
                "setpoint name={name} value={value} accepted={accepted} via={via}"
            ),
            Event::Load { object_id } => write!(f, "load object={object_id}"),
            Event::Detection { o_count } => write!(f, "detection o_count={o_count}"),
            Event::WeldStart { object } => write!(f, "weld_start object={object}"),
            Event::WeldComplete { o_count, peak_temp } => {
                write!(f, "weld_complete o_count={o_count} peak_temp={peak_temp}")
            }
            Event::WeldAbort { temp } => write!(f, "weld_abort temp={temp}"),
            Event::EquipmentHealthCheck { o_count } => {
                write!(f, "equipment_health_check o_count={o_count}")
            }
            Event::Incident {
                incident_id,
                kind,
                violated_rule,
            } => write!(
                f,
                "incident id={incident_id} kind={} rule={violated_rule}",
                serde_json::to_value(kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default()
            ),
            Event::ServiceCall {
                service,
                sensor,
                proposal,
            } => {
                write!(
                    f,
                    "service_call service={} sensor={sensor}",
                    service.as_str()
                )?;
                if let Some(p) = proposal {
                    write!(f, " proposal={p}")?;
                }
                Ok(())
            }
            Event::RuleWritten { rule_id, version } => {
                write!(f, "rule_written rule={rule_id} version={version}")
            }
            Event::Shutdown { asset } => write!(f, "shutdown asset={asset}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_run: Option<String>,
    pub mode: RunMode,
    pub config: TwinConfig,
    pub inputs: RunInputs,
    pub trace: Vec<TraceEvent>,
    pub incidents: Vec<Incident>,
    pub o_count: u64,
    pub task_status: u8,
    /// Highest workpiece temperature seen while welding.
    pub peak_temp: f64,
    pub rules_written: Vec<RuleId>,
    pub pe_settings: BTreeMap<String, f64>,
    pub outcome: Outcome,
    pub ticks: u64,
    pub trace_digest: Digest,
}

impl RunReport {
    /// The run log, one event per line.
    pub fn log_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    pub fn health_events(&self) -> usize {
        self.trace
            .iter()
            .filter(|e| matches!(e.event, Event::EquipmentHealthCheck { .. }))
            .count()
    }
}

/// A finished run: the report plus the plant trace it covers (the VE trace
/// for simulations, the replayed PE trace for replication).
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub report: RunReport,
    pub trace: PlantTrace,
}

/// Receives ticks and incidents while a run executes.
pub trait RunObserver {
    fn on_tick(&mut self, _run_id: &str, _record: &TraceRecord) {}
    fn on_incident(&mut self, _incident: &Incident) {}
}

#[derive(Debug, Default)]
pub struct NoopObserver;

impl RunObserver for NoopObserver {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwinError {
    #[error("invalid specification: {} finding(s)", .0.findings.len())]
    InvalidSpec(ValidationReport),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("no calibration for sensor {0}")]
    CalibrationGap(SensorId),
    #[error("trace parse error: {0}")]
    TraceParse(String),
    #[error("run {0} had no incident; nothing to tune")]
    NotTunable(String),
    #[error("twin has no {0} sensor")]
    MissingSensor(SensorType),
    #[error("twin has no {0:?} actuator")]
    MissingActuator(ActuatorKind),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Icm(#[from] IcmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Plc,
    Hmi,
    Device,
    Sensor,
}

/// A virtual PLC, HMI or sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub id: String,
    pub kind: EndpointKind,
    /// Owning asset, for sensors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<AssetId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_logic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Route {
    pub from: String,
    pub to: String,
}

/// Shutdown policy: this many critical incidents on one asset within the
/// window switches the asset off for the rest of the run.
pub const SHUTDOWN_CRITICAL_COUNT: usize = 3;
pub const SHUTDOWN_WINDOW_TICKS: u64 = 10;

const HISTORY_DEPTH: usize = 64;

/// Entity id under which the twin writes rules, provenance and incidents.
pub const TWIN_ENTITY: &str = "twin";

/// A generated virtual environment bound to a ledger.
#[derive(Debug)]
pub struct TwinInstance {
    ek: EngineeringKnowledge,
    dk: Vec<DomainKnowledge>,
    endpoints: Vec<Endpoint>,
    routes: Vec<Route>,
    sensors: Vec<SensorBinding>,
    actuators: Vec<ActuatorBinding>,
    calibration: BTreeMap<SensorId, CalibrationRecord>,
    bound_rules: Vec<RuleId>,
    warnings: Vec<String>,
    rules: RuleBook,
    principal: Principal,
    run_seq: AtomicU64,
}

/// Builds a twin from EK: one endpoint per device and sensor, routes from
/// the topology plus sensor-to-owner links, and calibration and rules bound
/// from the ledger.
pub fn generate_twin(
    ek: &EngineeringKnowledge,
    dk: &[DomainKnowledge],
    ledger: LedgerHandle,
) -> Result<TwinInstance, TwinError> {
    let report = validate_spec(ek);
    if !report.is_empty() {
        return Err(TwinError::InvalidSpec(report));
    }
    let mut endpoints = Vec::new();
    let mut actuators = Vec::new();
    for d in &ek.devices {
        let kind = match d.device_type.to_ascii_uppercase().as_str() {
            "PLC" => EndpointKind::Plc,
            "HMI" => EndpointKind::Hmi,
            _ => EndpointKind::Device,
        };
        let logic = d.control_logic().map(str::to_owned);
        match logic.as_deref() {
            Some("conveyor") => actuators.push(ActuatorBinding {
                actuator_id: "conveyor".into(),
                kind: ActuatorKind::Conveyor,
                asset_id: d.asset_id.clone(),
            }),
            Some("welding_arm") => actuators.push(ActuatorBinding {
                actuator_id: "arm".into(),
                kind: ActuatorKind::WeldingArm,
                asset_id: d.asset_id.clone(),
            }),
            _ => {}
        }
        endpoints.push(Endpoint {
            id: d.asset_id.to_string(),
            kind,
            owner: None,
            control_logic: logic,
        });
    }
    let mut routes: BTreeSet<Route> = ek
        .topology
        .iter()
        .map(|l| Route {
            from: l.from.clone(),
            to: l.to.clone(),
        })
        .collect();
    let mut sensors = Vec::new();
    for s in &ek.sensors {
        endpoints.push(Endpoint {
            id: s.sensor_id.to_string(),
            kind: EndpointKind::Sensor,
            owner: Some(s.asset_id.clone()),
            control_logic: None,
        });
        routes.insert(Route {
            from: s.sensor_id.to_string(),
            to: s.asset_id.to_string(),
        });
        sensors.push(SensorBinding {
            sensor_id: s.sensor_id.clone(),
            sensor_type: s.sensor_type,
            asset_id: s.asset_id.clone(),
        });
    }

    let mut calibration = BTreeMap::new();
    for hit in ledger.query(&LedgerQuery {
        kind: Some(EntryKind::SpecEntry),
        ..Default::default()
    }) {
        if let EntryPayload::SpecEntry(SpecRecord::Calibration(c)) = hit.payload {
            calibration.insert(c.sensor_id.clone(), c);
        }
    }
    let registry = SignalRegistry::from_ek(ek);
    let rules = RuleBook::new(ledger, registry);
    let bound_rules: Vec<RuleId> = rules
        .rules()
        .into_iter()
        .filter(|r| {
            r.association
                .iter()
                .any(|a| ek.sensor(a).is_some() || ek.device(a).is_some())
        })
        .map(|r| r.rule_id)
        .collect();
    let mut warnings = Vec::new();
    if bound_rules.is_empty() {
        warnings.push(
            "ledger holds no rules for this specification; twin starts with zero bound rules"
                .to_owned(),
        );
    }
    if calibration.is_empty() {
        warnings.push("ledger holds no calibration records".to_owned());
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    Ok(TwinInstance {
        ek: ek.clone(),
        dk: dk.to_vec(),
        endpoints,
        routes: routes.into_iter().collect(),
        sensors,
        actuators,
        calibration,
        bound_rules,
        warnings,
        rules,
        principal: Principal::system(TWIN_ENTITY),
        run_seq: AtomicU64::new(0),
    })
}

/// Mutable state of one run.
struct RunCtx<'a> {
    twin: &'a TwinInstance,
    run_id: String,
    events: Vec<TraceEvent>,
    incidents: Vec<Incident>,
    rules_written: Vec<RuleId>,
    observer: &'a mut dyn RunObserver,
}

impl<'a> RunCtx<'a> {
    fn event(&mut self, tick: u64, event: Event) {
        self.events.push(TraceEvent { tick, event });
    }

    #[allow(clippy::too_many_arguments)]
    fn raise(
        &mut self,
        tick: u64,
        kind: IncidentKind,
        violated_rule: ViolatedRule,
        actor_ids: Vec<String>,
        observed: BTreeMap<String, f64>,
        severity: Severity,
        action_taken: Action,
        trace_digest: Option<Digest>,
    ) -> Result<(), TwinError> {
        let seq = self.incidents.len() as u64 + 1;
        let incident = Incident {
            incident_id: format!("{}/inc-{seq}", self.run_id),
            run_id: self.run_id.clone(),
            seq,
            tick,
            kind,
            violated_rule,
            actor_ids,
            observed,
            severity,
            action_taken,
        };
        self.twin.rules.ledger().append(
            &[EntryPayload::IncidentEntry(
                incident.to_record(trace_digest),
            )],
            &self.twin.principal,
        )?;
        tracing::info!(incident = %incident.incident_id, tick, ?kind, "incident");
        self.event(
            tick,
            Event::Incident {
                incident_id: incident.incident_id.clone(),
                kind,
                violated_rule: incident.violated_rule.to_string(),
            },
        );
        self.observer.on_incident(&incident);
        self.incidents.push(incident);
        Ok(())
    }

    fn note_rule(&mut self, tick: u64, id: RuleId) {
        let version = self.twin.rules.get(id).map_or(0, |r| r.version);
        if !self.rules_written.contains(&id) {
            self.rules_written.push(id);
        }
        self.event(
            tick,
            Event::RuleWritten {
                rule_id: id,
                version,
            },
        );
    }
}

fn trace_digest(trace: &PlantTrace) -> Digest {
    sha256(trace.to_ndjson().as_bytes())
}

fn observed1(key: &str, v: f64) -> BTreeMap<String, f64> {
    BTreeMap::from([(key.to_owned(), v)])
}

impl TwinInstance {
    pub fn ek(&self) -> &EngineeringKnowledge {
        &self.ek
    }

    pub fn domain_knowledge(&self) -> &[DomainKnowledge] {
        &self.dk
    }

    pub fn endpoints(&self) -> &[Endpoint] {
        &self.endpoints
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    pub fn has_route(&self, from: &str, to: &str) -> bool {
        self.routes.iter().any(|r| r.from == from && r.to == to)
    }

    pub fn calibration(&self) -> &BTreeMap<SensorId, CalibrationRecord> {
        &self.calibration
    }

    pub fn bound_rules(&self) -> &[RuleId] {
        &self.bound_rules
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn rules(&self) -> &RuleBook {
        &self.rules
    }

    pub fn principal(&self) -> &Principal {
        &self.principal
    }

    /// Number of runs started on this twin.
    pub fn runs_started(&self) -> u64 {
        self.run_seq.load(Ordering::SeqCst)
    }

    /// Continues run numbering after `started` runs, so a regenerated twin
    /// does not reuse run ids.
    pub fn resume_run_numbering(self, started: u64) -> Self {
        self.run_seq.store(started, Ordering::SeqCst);
        self
    }

    pub fn sensor_bindings(&self) -> &[SensorBinding] {
        &self.sensors
    }

    /// Plant model for `config`, using the twin's sensor and actuator
    /// bindings.
    pub fn plant(&self, config: &TwinConfig) -> Result<Plant, TwinError> {
        Ok(Plant::new(PlantConfig {
            dt: config.dt,
            geometry: config.geometry,
            init_temp: config.init_temp,
            k_heat: config.k_heat,
            k_cool: config.k_cool,
            weld_duration: config.d,
            sensor_noise_std: 0.0,
            sensors: self.sensors.clone(),
            actuators: self.actuators.clone(),
        })?)
    }

    fn sensor_of(&self, t: SensorType) -> Result<&SensorBinding, TwinError> {
        self.sensors
            .iter()
            .find(|s| s.sensor_type == t)
            .ok_or(TwinError::MissingSensor(t))
    }

    fn actuator_of(&self, k: ActuatorKind) -> Result<&ActuatorBinding, TwinError> {
        self.actuators
            .iter()
            .find(|a| a.kind == k)
            .ok_or(TwinError::MissingActuator(k))
    }

    /// The HMI a setpoint for `asset` travels from, if the topology has one.
    fn hmi_for(&self, asset: &str) -> String {
        self.endpoints
            .iter()
            .find(|e| e.kind == EndpointKind::Hmi && self.has_route(&e.id, asset))
            .map_or_else(|| "local".to_owned(), |e| e.id.clone())
    }

    fn next_run_id(&self) -> String {
        format!("run-{}", self.run_seq.fetch_add(1, Ordering::SeqCst) + 1)
    }

    fn cite_bounds(&self, sensor: &str, setting: &str) -> ViolatedRule {
        match self.rules.bounds_rule_for(sensor) {
            Some(r) => ViolatedRule::Rule {
                rule_id: r.rule_id,
                version: r.version,
            },
            None => ViolatedRule::Setting {
                name: setting.to_owned(),
            },
        }
    }

    fn count_rule(&self, counter: &str) -> Option<crate::rules::Rule> {
        self.rules
            .rules()
            .into_iter()
            .find(|r| matches!(&r.description, RulePredicate::CountAtMost { counter: c, .. } if c == counter))
    }

    fn cite_count(&self, counter: &str, setting: &str) -> ViolatedRule {
        match self.count_rule(counter) {
            Some(r) => ViolatedRule::Rule {
                rule_id: r.rule_id,
                version: r.version,
            },
            None => ViolatedRule::Setting {
                name: setting.to_owned(),
            },
        }
    }

    fn upsert_count_rule(&self, counter: &str, n: u64, subject: &str) -> Result<RuleId, TwinError> {
        let existing = self.count_rule(counter).map(|r| r.rule_id);
        Ok(self.rules.upsert_rule(
            &self.principal,
            RulePredicate::CountAtMost {
                counter: counter.to_owned(),
                n,
            },
            BTreeSet::from([subject.to_owned()]),
            existing,
        )?)
    }

    /// Process provenance for rules generated under `settings`.
    fn record_provenance(
        &self,
        rules: &[(RuleId, &SensorBinding)],
        settings: &BTreeMap<String, f64>,
    ) -> Result<(), TwinError> {
        let builder = ProvenanceBuilder::new(&self.ek);
        let mut payloads = Vec::new();
        for (id, sensor) in rules {
            let Some(rule) = self.rules.get(*id) else {
                continue;
            };
            let rec = builder.process(
                &self.principal,
                rule.rule_id,
                &rule.description.canonical_text(),
                &rule.author,
                sensor.asset_id.as_str(),
                sensor.sensor_id.as_str(),
                settings,
                rule.updated_at,
            )?;
            payloads.push(EntryPayload::ProvenanceEntry(rec));
        }
        if !payloads.is_empty() {
            self.rules.ledger().append(&payloads, &self.principal)?;
        }
        Ok(())
    }

    /// Conveyor simulation: velocity guard, paced loading, object counting,
    /// and rule generation on an incident-free run.
    pub fn run_conveyor_sim(
        &self,
        config: &TwinConfig,
        inputs: &ConveyorInputs,
        observer: &mut dyn RunObserver,
    ) -> Result<Run, TwinError> {
        config.validate()?;
        if !inputs.velocity.is_finite() {
            return Err(TwinError::ConfigInvalid(
                "velocity setpoint must be finite".into(),
            ));
        }
        let plant = self.plant(config)?;
        let conveyor = self.actuator_of(ActuatorKind::Conveyor)?.clone();
        let v_sensor = self.sensor_of(SensorType::Velocity)?.clone();
        let det_sensor = self.sensor_of(SensorType::ObjectDetection)?.clone();
        let run_id = self.next_run_id();
        let mut ctx = RunCtx {
            twin: self,
            run_id: run_id.clone(),
            events: Vec::new(),
            incidents: Vec::new(),
            rules_written: Vec::new(),
            observer,
        };

        let mut state = plant.initial_state(config.seed);
        let mut records = vec![plant.record(&state, &[])];
        let via = self.hmi_for(conveyor.asset_id.as_str());
        let v = inputs.velocity;
        let accepted = config.tau_v.contains(v);
        ctx.event(
            0,
            Event::Setpoint {
                name: "V".into(),
                value: v,
                accepted,
                via,
            },
        );
        let mut first_cmds = Vec::new();
        if accepted {
            first_cmds.push(ActuatorCommand::new(
                conveyor.actuator_id.as_str(),
                ActuatorAction::Power(true),
            ));
            first_cmds.push(ActuatorCommand::new(
                conveyor.actuator_id.as_str(),
                ActuatorAction::Velocity(v),
            ));
        } else {
            ctx.raise(
                0,
                IncidentKind::SetpointOutOfBounds,
                self.cite_bounds(v_sensor.sensor_id.as_str(), "tau_v"),
                vec![
                    conveyor.asset_id.to_string(),
                    v_sensor.sensor_id.to_string(),
                ],
                observed1(v_sensor.sensor_id.as_str(), v),
                Severity::Warning,
                Action::None,
                None,
            )?;
        }

        let mut loads = inputs.loads.clone();
        loads.sort_unstable();
        let interval = config.load_interval_ticks();
        let mut next_req = 0usize;
        let mut pending = 0u64;
        let mut last_load: Option<u64> = None;
        let mut o_count = 0u64;
        let mut prev_detect = false;
        let mut count_exceeded = false;
        let mut velocity_breach = false;

        for t in 0..config.max_ticks {
            while next_req < loads.len() && loads[next_req] <= t {
                pending += 1;
                next_req += 1;
            }
            if pending > 0 && state.motor_on && last_load.is_none_or(|l| t - l >= interval) {
                match plant.load_object(&state) {
                    Ok(s) => {
                        state = s;
                        pending -= 1;
                        last_load = Some(t);
                        ctx.event(
                            t,
                            Event::Load {
                                object_id: state.next_object_id - 1,
                            },
                        );
                    }
                    Err(PlantError::SlotOccupied) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            let detected = plant
                .read_sensor(&state, det_sensor.sensor_id.as_str(), &[])?
                .value
                >= 0.5;
            if detected && !prev_detect {
                o_count += 1;
                ctx.event(t, Event::Detection { o_count });
                if o_count as f64 > config.tau_o.max && !count_exceeded {
                    count_exceeded = true;
                    ctx.raise(
                        t,
                        IncidentKind::CountExceeded,
                        self.cite_count("o_count", "tau_o"),
                        vec![
                            conveyor.asset_id.to_string(),
                            det_sensor.sensor_id.to_string(),
                        ],
                        observed1("o_count", o_count as f64),
                        Severity::Info,
                        Action::None,
                        None,
                    )?;
                }
            }
            prev_detect = detected;

            let cmds = if t == 0 { first_cmds.as_slice() } else { &[] };
            state = plant.step(&state, cmds, &[], config.dt)?;
            let rec = plant.record(&state, &[]);
            ctx.observer.on_tick(&run_id, &rec);
            records.push(rec);

            if state.motor_on && !config.tau_v.contains(state.velocity) && !velocity_breach {
                velocity_breach = true;
                ctx.raise(
                    state.tick,
                    IncidentKind::VelocityBreach,
                    self.cite_bounds(v_sensor.sensor_id.as_str(), "tau_v"),
                    vec![
                        conveyor.asset_id.to_string(),
                        v_sensor.sensor_id.to_string(),
                    ],
                    observed1(v_sensor.sensor_id.as_str(), state.velocity),
                    Severity::Warning,
                    Action::None,
                    None,
                )?;
            }
            let done = next_req == loads.len() && pending == 0 && state.belt_objects.is_empty();
            if done && (state.motor_on || loads.is_empty()) && t + 1 >= interval {
                break;
            }
        }
        let last_tick = state.tick;
        if (o_count as f64) < config.tau_o.min {
            ctx.raise(
                last_tick,
                IncidentKind::CountBelowMinimum,
                ViolatedRule::Setting {
                    name: "tau_o".into(),
                },
                vec![
                    conveyor.asset_id.to_string(),
                    det_sensor.sensor_id.to_string(),
                ],
                observed1("o_count", o_count as f64),
                Severity::Info,
                Action::None,
                None,
            )?;
        }

        let trace = PlantTrace { records };
        let mut pe_settings = BTreeMap::new();
        let outcome = if ctx.incidents.is_empty() {
            pe_settings.insert("V".to_owned(), v);
            pe_settings.insert("d".to_owned(), config.d);
            let vr = self.rules.upsert_bounds_rule(
                &self.principal,
                v_sensor.sensor_id.as_str(),
                config.tau_v.min,
                config.tau_v.max,
            )?;
            ctx.note_rule(last_tick, vr);
            let cr = self.upsert_count_rule(
                "o_count",
                config.tau_o.max.floor() as u64,
                det_sensor.sensor_id.as_str(),
            )?;
            ctx.note_rule(last_tick, cr);
            self.record_provenance(&[(vr, &v_sensor), (cr, &det_sensor)], &pe_settings)?;
            Outcome::Optimal
        } else {
            Outcome::Incident
        };
        let report = RunReport {
            run_id,
            parent_run: None,
            mode: RunMode::Simulation,
            config: config.clone(),
            inputs: RunInputs::Conveyor(inputs.clone()),
            trace: ctx.events,
            incidents: ctx.incidents,
            o_count,
            task_status: 0,
            peak_temp: config.init_temp,
            rules_written: ctx.rules_written,
            pe_settings,
            outcome,
            ticks: last_tick,
            trace_digest: trace_digest(&trace),
        };
        Ok(Run { report, trace })
    }

    /// Welding-arm simulation: current/pressure guards, timed welds with a
    /// per-tick temperature check, the capacity health check, and a
    /// cool-down tail up to `max_ticks`.
    pub fn run_arm_sim(
        &self,
        config: &TwinConfig,
        inputs: &ArmInputs,
        observer: &mut dyn RunObserver,
    ) -> Result<Run, TwinError> {
        config.validate()?;
        if !(inputs.current.is_finite() && inputs.pressure.is_finite()) {
            return Err(TwinError::ConfigInvalid(
                "current and pressure setpoints must be finite".into(),
            ));
        }
        let plant = self.plant(config)?;
        let arm = self.actuator_of(ActuatorKind::WeldingArm)?.clone();
        let c_sensor = self.sensor_of(SensorType::Current)?.clone();
        let p_sensor = self.sensor_of(SensorType::Pressure)?.clone();
        let t_sensor = self.sensor_of(SensorType::Temperature)?.clone();
        let run_id = self.next_run_id();
        let mut ctx = RunCtx {
            twin: self,
            run_id: run_id.clone(),
            events: Vec::new(),
            incidents: Vec::new(),
            rules_written: Vec::new(),
            observer,
        };
        let arm_id = arm.actuator_id.as_str();
        let via = self.hmi_for(arm.asset_id.as_str());

        let mut state = plant.initial_state(config.seed);
        let mut records = vec![plant.record(&state, &[])];
        let mut cmds = vec![ActuatorCommand::new(arm_id, ActuatorAction::Power(true))];
        let mut welding_allowed = true;
        for (name, value, bounds, sensor, setting, action) in [
            (
                "C",
                inputs.current,
                config.tau_c,
                &c_sensor,
                "tau_c",
                ActuatorAction::Current(inputs.current),
            ),
            (
                "P",
                inputs.pressure,
                config.tau_p,
                &p_sensor,
                "tau_p",
                ActuatorAction::Pressure(inputs.pressure),
            ),
        ] {
            let accepted = bounds.contains(value);
            ctx.event(
                0,
                Event::Setpoint {
                    name: name.into(),
                    value,
                    accepted,
                    via: via.clone(),
                },
            );
            if accepted {
                cmds.push(ActuatorCommand::new(arm_id, action));
            } else {
                welding_allowed = false;
                ctx.raise(
                    0,
                    IncidentKind::SetpointOutOfBounds,
                    self.cite_bounds(sensor.sensor_id.as_str(), setting),
                    vec![arm.asset_id.to_string(), sensor.sensor_id.to_string()],
                    observed1(sensor.sensor_id.as_str(), value),
                    Severity::Warning,
                    Action::None,
                    None,
                )?;
            }
        }

        let mut requested = 0u64;
        let mut o_count = 0u64;
        let mut capacity_reached = false;
        let mut breach_open = false;
        let mut peak = config.init_temp;
        let mut weld_peak = config.init_temp;
        let mut any_done = false;

        for t in 0..config.max_ticks {
            let idle = state.arm.task_status != TaskStatus::Welding;
            if welding_allowed && idle && requested < inputs.objects && !capacity_reached {
                if o_count >= config.a_max_capacity {
                    capacity_reached = true;
                    ctx.event(t, Event::EquipmentHealthCheck { o_count });
                    tracing::info!(o_count, "equipment health check requested");
                } else {
                    requested += 1;
                    weld_peak = config.init_temp;
                    cmds.push(ActuatorCommand::new(arm_id, ActuatorAction::StartWeld));
                    ctx.event(t, Event::WeldStart { object: requested });
                }
            }
            let was_welding = state.arm.task_status == TaskStatus::Welding
                || cmds.iter().any(|c| c.action == ActuatorAction::StartWeld);
            let welded_before = state.arm.objects_welded;
            state = plant.step(&state, &cmds, &[], config.dt)?;
            cmds.clear();
            let rec = plant.record(&state, &[]);
            ctx.observer.on_tick(&run_id, &rec);
            records.push(rec);

            let temp = plant
                .read_sensor(&state, t_sensor.sensor_id.as_str(), &[])?
                .value;
            if was_welding {
                peak = peak.max(temp);
                weld_peak = weld_peak.max(temp);
            }
            if !config.tau_t.contains(temp) {
                if !breach_open {
                    breach_open = true;
                    ctx.raise(
                        state.tick,
                        IncidentKind::TemperatureBreach,
                        self.cite_bounds(t_sensor.sensor_id.as_str(), "tau_t"),
                        vec![arm.asset_id.to_string(), t_sensor.sensor_id.to_string()],
                        observed1(t_sensor.sensor_id.as_str(), temp),
                        Severity::Warning,
                        Action::None,
                        None,
                    )?;
                }
                if state.arm.task_status == TaskStatus::Welding {
                    cmds.push(ActuatorCommand::new(arm_id, ActuatorAction::AbortWeld));
                    ctx.event(state.tick, Event::WeldAbort { temp });
                }
            } else {
                breach_open = false;
            }
            if state.arm.objects_welded > welded_before {
                o_count = state.arm.objects_welded;
                any_done = true;
                ctx.event(
                    state.tick,
                    Event::WeldComplete {
                        o_count,
                        peak_temp: weld_peak,
                    },
                );
            }
        }
        let last_tick = state.tick;
        let trace = PlantTrace { records };
        let mut pe_settings = BTreeMap::new();
        let outcome = if !ctx.incidents.is_empty() {
            Outcome::Incident
        } else if capacity_reached {
            Outcome::CapacityReached
        } else {
            pe_settings.insert("C".to_owned(), inputs.current);
            pe_settings.insert("P".to_owned(), inputs.pressure);
            pe_settings.insert("d".to_owned(), config.d);
            let mut written = Vec::new();
            for (sensor, b) in [
                (&c_sensor, config.tau_c),
                (&p_sensor, config.tau_p),
                (&t_sensor, config.tau_t),
            ] {
                let id = self.rules.upsert_bounds_rule(
                    &self.principal,
                    sensor.sensor_id.as_str(),
                    b.min,
                    b.max,
                )?;
                ctx.note_rule(last_tick, id);
                written.push((id, sensor));
            }
            let cap = self.upsert_count_rule(
                "objects_welded",
                config.a_max_capacity,
                arm.asset_id.as_str(),
            )?;
            ctx.note_rule(last_tick, cap);
            written.push((cap, &t_sensor));
            self.record_provenance(&written, &pe_settings)?;
            Outcome::Optimal
        };
        let report = RunReport {
            run_id,
            parent_run: None,
            mode: RunMode::Simulation,
            config: config.clone(),
            inputs: RunInputs::Arm(inputs.clone()),
            trace: ctx.events,
            incidents: ctx.incidents,
            o_count,
            task_status: u8::from(any_done),
            peak_temp: peak,
            rules_written: ctx.rules_written,
            pe_settings,
            outcome,
            ticks: last_tick,
            trace_digest: trace_digest(&trace),
        };
        Ok(Run { report, trace })
    }

    /// Replication: consistency check of every reading whose asset is on;
    /// failures invoke the rule set and then the calibration service (a rule
    /// flags the reading) or the scheduling service (no rule does).
    pub fn replicate(
        &self,
        pe_trace: &PlantTrace,
        calibration: &[CalibrationRecord],
        config: &TwinConfig,
        observer: &mut dyn RunObserver,
    ) -> Result<Run, TwinError> {
        let cal: BTreeMap<&str, &CalibrationRecord> = calibration
            .iter()
            .map(|c| (c.sensor_id.as_str(), c))
            .collect();
        for rec in &pe_trace.records {
            for r in &rec.readings {
                if !cal.contains_key(r.sensor_id.as_str()) {
                    return Err(TwinError::CalibrationGap(r.sensor_id.clone()));
                }
            }
        }
        let run_id = self.next_run_id();
        let mut ctx = RunCtx {
            twin: self,
            run_id: run_id.clone(),
            events: Vec::new(),
            incidents: Vec::new(),
            rules_written: Vec::new(),
            observer,
        };
        let mut open: BTreeSet<SensorId> = BTreeSet::new();
        let mut suppressed: BTreeSet<SensorId> = BTreeSet::new();
        let mut shut: BTreeSet<AssetId> = BTreeSet::new();
        let mut critical: BTreeMap<AssetId, VecDeque<u64>> = BTreeMap::new();
        let mut history: BTreeMap<SensorId, VecDeque<f64>> = BTreeMap::new();

        for rec in &pe_trace.records {
            ctx.observer.on_tick(&run_id, rec);
            let snapshot = snapshot_of(rec, &history);
            for reading in &rec.readings {
                let sid = &reading.sensor_id;
                let asset_on = rec.assets.get(&reading.asset_id) == Some(&AssetStatus::On);
                if !asset_on || shut.contains(&reading.asset_id) || suppressed.contains(sid) {
                    continue;
                }
                let c = cal[sid.as_str()];
                if consistency_check(reading, c)? {
                    open.remove(sid);
                    continue;
                }
                if !open.insert(sid.clone()) {
                    continue;
                }
                let record_digest = json_digest(rec);
                let observed: BTreeMap<String, f64> = rec
                    .readings
                    .iter()
                    .map(|r| (r.sensor_id.to_string(), r.value))
                    .collect();
                let actors = vec![reading.asset_id.to_string(), sid.to_string()];

                // Invoke S&S: the first rule about this sensor that flags the
                // snapshot.
                let violation = self
                    .rules
                    .rules()
                    .into_iter()
                    .filter(|r| {
                        r.association.contains(sid.as_str())
                            || r.description.sensors().contains(sid)
                    })
                    .find_map(|r| match evaluate(&r, &snapshot) {
                        Ok(Verdict::Violation(v)) => Some(v),
                        _ => None,
                    });
                match violation {
                    Some(v) => {
                        let proposal = Bounds::new(c.tau_min, c.tau_max).clamp(reading.value);
                        ctx.event(
                            rec.tick,
                            Event::ServiceCall {
                                service: Action::CalibrationService,
                                sensor: sid.to_string(),
                                proposal: Some(proposal),
                            },
                        );
                        ctx.raise(
                            rec.tick,
                            IncidentKind::ConsistencyFailure,
                            ViolatedRule::Rule {
                                rule_id: v.rule_id,
                                version: v.version,
                            },
                            actors,
                            observed,
                            Severity::Warning,
                            Action::CalibrationService,
                            Some(record_digest),
                        )?;
                        let current = self
                            .rules
                            .get(v.rule_id)
                            .ok_or(RuleError::UnknownRule(v.rule_id))?;
                        let description = if current.is_bounds_rule_for(sid.as_str()) {
                            RulePredicate::in_bounds(sid.as_str(), c.tau_min, c.tau_max)
                        } else {
                            current.description.clone()
                        };
                        let id = self.rules.upsert_rule(
                            &self.principal,
                            description,
                            current.association.clone(),
                            Some(v.rule_id),
                        )?;
                        ctx.note_rule(rec.tick, id);
                    }
                    None => {
                        ctx.event(
                            rec.tick,
                            Event::ServiceCall {
                                service: Action::SchedulingService,
                                sensor: sid.to_string(),
                                proposal: None,
                            },
                        );
                        ctx.raise(
                            rec.tick,
                            IncidentKind::ConsistencyFailure,
                            ViolatedRule::NoMatchingRule,
                            actors,
                            observed,
                            Severity::Critical,
                            Action::SchedulingService,
                            Some(record_digest),
                        )?;
                        suppressed.insert(sid.clone());
                        let id = self.rules.upsert_bounds_rule(
                            &self.principal,
                            sid.as_str(),
                            c.tau_min,
                            c.tau_max,
                        )?;
                        ctx.note_rule(rec.tick, id);

                        let window = critical.entry(reading.asset_id.clone()).or_default();
                        window.push_back(rec.tick);
                        while window
                            .front()
                            .is_some_and(|&t0| rec.tick - t0 >= SHUTDOWN_WINDOW_TICKS)
                        {
                            window.pop_front();
                        }
                        if window.len() >= SHUTDOWN_CRITICAL_COUNT {
                            shut.insert(reading.asset_id.clone());
                            ctx.event(
                                rec.tick,
                                Event::Shutdown {
                                    asset: reading.asset_id.to_string(),
                                },
                            );
                            ctx.raise(
                                rec.tick,
                                IncidentKind::Shutdown,
                                ViolatedRule::NoMatchingRule,
                                vec![reading.asset_id.to_string()],
                                observed1("critical_incidents", window.len() as f64),
                                Severity::Critical,
                                Action::Shutdown,
                                Some(record_digest),
                            )?;
                        }
                    }
                }
            }
            for r in &rec.readings {
                let h = history.entry(r.sensor_id.clone()).or_default();
                h.push_back(r.value);
                if h.len() > HISTORY_DEPTH {
                    h.pop_front();
                }
            }
        }

        let last = pe_trace.records.last();
        let digest = trace_digest(pe_trace);
        let outcome = if ctx.incidents.is_empty() {
            Outcome::Optimal
        } else {
            Outcome::Incident
        };
        let peak_temp = pe_trace
            .records
            .iter()
            .filter(|r| r.arm.task_status != TaskStatus::Idle)
            .map(|r| r.arm.object_temp)
            .fold(config.init_temp, f64::max);
        let report = RunReport {
            run_id,
            parent_run: None,
            mode: RunMode::Replication,
            config: config.clone(),
            inputs: RunInputs::Replication {
                calibration: calibration.to_vec(),
                trace_digest: digest,
            },
            trace: ctx.events,
            incidents: ctx.incidents,
            o_count: last.map_or(0, |r| r.arm.objects_welded),
            task_status: u8::from(last.is_some_and(|r| r.arm.task_status == TaskStatus::Done)),
            peak_temp,
            rules_written: ctx.rules_written,
            pe_settings: BTreeMap::new(),
            outcome,
            ticks: last.map_or(0, |r| r.tick),
            trace_digest: digest,
        };
        Ok(Run {
            report,
            trace: pe_trace.clone(),
        })
    }

    /// Parses an NDJSON plant trace and replicates it.
    pub fn replicate_ndjson(
        &self,
        ndjson: &str,
        calibration: &[CalibrationRecord],
        config: &TwinConfig,
        observer: &mut dyn RunObserver,
    ) -> Result<Run, TwinError> {
        let trace =
            PlantTrace::from_ndjson(ndjson).map_err(|e| TwinError::TraceParse(e.to_string()))?;
        self.replicate(&trace, calibration, config, observer)
    }

    /// Reruns an incident run's mode and inputs under `new_config`,
    /// recording the lineage.
    pub fn tune_and_rerun(
        &self,
        previous: &Run,
        new_config: &TwinConfig,
        observer: &mut dyn RunObserver,
    ) -> Result<Run, TwinError> {
        if previous.report.outcome != Outcome::Incident {
            return Err(TwinError::NotTunable(previous.report.run_id.clone()));
        }
        new_config.validate()?;
        let mut run = match &previous.report.inputs {
            RunInputs::Conveyor(i) => self.run_conveyor_sim(new_config, i, observer)?,
            RunInputs::Arm(i) => self.run_arm_sim(new_config, i, observer)?,
            RunInputs::Replication { calibration, .. } => {
                self.replicate(&previous.trace, calibration, new_config, observer)?
            }
        };
        run.report.parent_run = Some(previous.report.run_id.clone());
        Ok(run)
    }
}

/// Snapshot for rule evaluation from one trace record.
fn snapshot_of(
    rec: &TraceRecord,
    history: &BTreeMap<SensorId, VecDeque<f64>>,
) -> TelemetrySnapshot {
    TelemetrySnapshot {
        tick: rec.tick,
        sensors: rec
            .readings
            .iter()
            .map(|r| (r.sensor_id.clone(), r.value))
            .collect(),
        history: history
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().copied().collect()))
            .collect(),
        assets: rec.assets.clone(),
        counters: BTreeMap::from([
            ("o_count".to_owned(), rec.arm.objects_welded),
            ("objects_on_belt".to_owned(), rec.objects.len() as u64),
            ("objects_welded".to_owned(), rec.arm.objects_welded),
        ]),
        action: None,
    }
}

/// Setpoints for the closed-loop reference line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSetpoints {
    pub velocity: f64,
    pub current: f64,
    pub pressure: f64,
}

impl Default for LineSetpoints {
    fn default() -> Self {
        Self {
            velocity: 2.0,
            current: 100.0,
            pressure: 3.0,
        }
    }
}

/// Runs the physical line under its PLC logic: loads every d, welds each
/// chassis as it reaches Station B. Returns the plant trace and the inputs
/// that were applied, so the run can be replayed with [`Plant::run`].
pub fn operate_line(
    plant: &Plant,
    config: &TwinConfig,
    setpoints: LineSetpoints,
    faults: &[FaultInjection],
    ticks: u64,
) -> Result<(PlantTrace, InputSchedule), PlantError> {
    let conveyor = plant
        .actuator_of_kind(ActuatorKind::Conveyor)
        .ok_or_else(|| PlantError::InvalidConfig("no conveyor".into()))?
        .actuator_id
        .clone();
    let arm = plant
        .actuator_of_kind(ActuatorKind::WeldingArm)
        .ok_or_else(|| PlantError::InvalidConfig("no welding arm".into()))?
        .actuator_id
        .clone();
    let geom = plant.config().geometry;
    let interval = config.load_interval_ticks();
    let mut schedule = InputSchedule::default();
    let mut state: PlantState = plant.initial_state(config.seed);
    let mut records = vec![plant.record(&state, faults)];
    let mut last_load: Option<u64> = None;
    for t in 0..ticks {
        let mut load = false;
        let mut cmds = Vec::new();
        if t == 0 {
            cmds.extend([
                ActuatorCommand::new(conveyor.as_str(), ActuatorAction::Power(true)),
                ActuatorCommand::new(
                    conveyor.as_str(),
                    ActuatorAction::Velocity(setpoints.velocity),
                ),
                ActuatorCommand::new(arm.as_str(), ActuatorAction::Power(true)),
                ActuatorCommand::new(arm.as_str(), ActuatorAction::Current(setpoints.current)),
                ActuatorCommand::new(arm.as_str(), ActuatorAction::Pressure(setpoints.pressure)),
            ]);
        }
        if state.motor_on && last_load.is_none_or(|l| t - l >= interval) {
            if let Ok(s) = plant.load_object(&state) {
                state = s;
                load = true;
                last_load = Some(t);
            }
        }
        let at_station = state.belt_objects.iter().any(|o| {
            !o.welded && (o.position - geom.station_b_position).abs() <= geom.object_length
        });
        if state.arm.enabled && state.arm.task_status != TaskStatus::Welding && at_station {
            cmds.push(ActuatorCommand::new(
                arm.as_str(),
                ActuatorAction::StartWeld,
            ));
        }
        state = plant.step(&state, &cmds, faults, config.dt)?;
        records.push(plant.record(&state, faults));
        if load || !cmds.is_empty() {
            schedule.push(t, load, cmds);
        }
    }
    Ok((PlantTrace { records }, schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icm::SpecFile;
    use crate::ledger::Ledger;
    use crate::rbac::Role;
    use crate::time::LogicalClock;
    use std::sync::Arc;

    fn twin() -> TwinInstance {
        let spec = SpecFile::reference();
        let ledger = Ledger::new(
            crate::canonical::HashAlgorithm::Sha256,
            Box::new(crate::ledger::Ed25519Authority::from_seed(1)),
            Arc::new(LogicalClock::default()),
        )
        .into_handle();
        generate_twin(&spec.engineering(), &spec.domain_knowledge, ledger).unwrap()
    }

    #[test]
    fn reference_twin_shape() {
        let t = twin();
        assert_eq!(t.endpoints().len(), 9);
        assert!(t.has_route("HMI1", "PLC1"));
        assert!(t.has_route("PLC1", "PLC2"));
        assert!(t.has_route("Sensor5", "PLC2"));
        assert!(t.bound_rules().is_empty());
        assert!(!t.warnings().is_empty());
    }

    #[test]
    fn conveyor_spacing_example() {
        let t = twin();
        let mut cfg = TwinConfig::reference();
        cfg.d = 3.0;
        cfg.dt = 1.0;
        cfg.max_ticks = 100;
        let run = t
            .run_conveyor_sim(
                &cfg,
                &ConveyorInputs {
                    velocity: 2.0,
                    loads: vec![0, 0, 0],
                },
                &mut NoopObserver,
            )
            .unwrap();
        assert_eq!(run.report.o_count, 3);
        assert_eq!(run.report.outcome, Outcome::Optimal);
        let rec = run
            .trace
            .records
            .iter()
            .find(|r| r.objects.len() == 3)
            .unwrap();
        let pos: Vec<f64> = rec.objects.iter().map(|o| o.position).collect();
        assert!((pos[1] - pos[0] - 6.0).abs() < 1e-9 && (pos[2] - pos[1] - 6.0).abs() < 1e-9);
        assert_eq!(run.report.rules_written.len(), 2);
    }

    #[test]
    fn conveyor_rejects_out_of_bounds_velocity() {
        let t = twin();
        let mut cfg = TwinConfig::reference();
        cfg.max_ticks = 20;
        let run = t
            .run_conveyor_sim(
                &cfg,
                &ConveyorInputs {
                    velocity: 9.0,
                    loads: vec![1],
                },
                &mut NoopObserver,
            )
            .unwrap();
        assert_eq!(run.report.outcome, Outcome::Incident);
        assert_eq!(
            run.report.incidents[0].kind,
            IncidentKind::SetpointOutOfBounds
        );
        assert!(run.trace.records.iter().all(|r| r.velocity == 0.0));
    }

    #[test]
    fn arm_nominal_and_capacity() {
        let t = twin();
        let cfg = TwinConfig::reference();
        let five = t
            .run_arm_sim(
                &cfg,
                &ArmInputs {
                    current: 100.0,
                    pressure: 3.0,
                    objects: 5,
                },
                &mut NoopObserver,
            )
            .unwrap();
        assert_eq!(five.report.o_count, 5);
        assert_eq!(five.report.health_events(), 0);
        assert_eq!(five.report.outcome, Outcome::Optimal);
        assert!((five.report.peak_temp - cfg.peak_temp(100.0, 3.0)).abs() < 1e-6);

        let six = t
            .run_arm_sim(
                &cfg,
                &ArmInputs {
                    current: 100.0,
                    pressure: 3.0,
                    objects: 6,
                },
                &mut NoopObserver,
            )
            .unwrap();
        assert_eq!(six.report.health_events(), 1);
        assert_eq!(six.report.outcome, Outcome::CapacityReached);
        assert_eq!(six.report.o_count, 5);
    }

    #[test]
    fn tune_requires_incident() {
        let t = twin();
        let mut cfg = TwinConfig::reference();
        cfg.k_heat = 3.0;
        let bad = t
            .run_arm_sim(
                &cfg,
                &ArmInputs {
                    current: 100.0,
                    pressure: 3.0,
                    objects: 1,
                },
                &mut NoopObserver,
            )
            .unwrap();
        assert_eq!(bad.report.outcome, Outcome::Incident);
        let mut tuned = cfg.clone();
        tuned.tau_t.max = 2000.0;
        let good = t.tune_and_rerun(&bad, &tuned, &mut NoopObserver).unwrap();
        assert_eq!(good.report.outcome, Outcome::Optimal);
        assert_eq!(
            good.report.parent_run.as_deref(),
            Some(bad.report.run_id.as_str())
        );
        assert!(!good.report.rules_written.is_empty());
        assert!(matches!(
            t.tune_and_rerun(&good, &tuned, &mut NoopObserver),
            Err(TwinError::NotTunable(_))
        ));
    }

    #[test]
    fn replication_branches() {
        let t = twin();
        let cfg = TwinConfig::reference();
        let spec = SpecFile::reference();
        let plant = t.plant(&cfg).unwrap();
        let (clean, _) = operate_line(&plant, &cfg, LineSetpoints::default(), &[], 300).unwrap();
        let run = t
            .replicate(&clean, &spec.calibration, &cfg, &mut NoopObserver)
            .unwrap();
        assert!(
            run.report.incidents.is_empty(),
            "{:?}",
            run.report.incidents
        );

        let fault = FaultInjection::sensor_offset("Sensor5", 500.0, (150, 300));
        let (faulty, _) =
            operate_line(&plant, &cfg, LineSetpoints::default(), &[fault], 300).unwrap();
        let run = t
            .replicate(&faulty, &spec.calibration, &cfg, &mut NoopObserver)
            .unwrap();
        let first = &run.report.incidents[0];
        assert_eq!(first.tick, 150);
        assert_eq!(first.action_taken, Action::SchedulingService);
        assert_eq!(first.violated_rule, ViolatedRule::NoMatchingRule);

        // The scheduling path created a Sensor5 rule; the same fault now
        // takes the calibration path.
        let run = t
            .replicate(&faulty, &spec.calibration, &cfg, &mut NoopObserver)
            .unwrap();
        assert_eq!(
            run.report.incidents[0].action_taken,
            Action::CalibrationService
        );
        let analyst = Principal::with_role("a", Role::SecurityAnalyst);
        assert!(t
            .rules()
            .upsert_rule(
                &analyst,
                RulePredicate::True,
                BTreeSet::from(["Sensor5".to_owned()]),
                None
            )
            .is_ok());
    }
}
