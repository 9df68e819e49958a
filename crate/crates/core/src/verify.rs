//! Properties P1–P3 over plant traces, and an exhaustive bounded explorer
//! over discretized inputs that returns the same sat/unsat verdicts.
//!
//! P1: every weld lasts d (within one tick). P2: the workpiece temperature
//! stays within τ_t while welding. P3: the belt velocity stays within τ_v
//! while the motor runs.

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::{
    ActuatorAction, ActuatorCommand, InputSchedule, Plant, PlantConfig, PlantError, PlantState,
    PlantTrace, ScheduledInput, TaskStatus, TraceRecord,
};
use crate::twin::{Bounds, TwinConfig};

pub const DEFAULT_K: u64 = 50;
pub const DEFAULT_GRID: usize = 5;
pub const DEFAULT_STATE_BUDGET: u64 = 20_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PropertyId {
    #[serde(rename = "P1")]
    P1Time,
    #[serde(rename = "P2")]
    P2Temperature,
    #[serde(rename = "P3")]
    P3Velocity,
}

impl PropertyId {
    pub const ALL: [PropertyId; 3] = [
        PropertyId::P1Time,
        PropertyId::P2Temperature,
        PropertyId::P3Velocity,
    ];
}

impl fmt::Display for PropertyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PropertyId::P1Time => "P1",
            PropertyId::P2Temperature => "P2",
            PropertyId::P3Velocity => "P3",
        })
    }
}

impl std::str::FromStr for PropertyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "P1" | "P1_TIME" => Ok(PropertyId::P1Time),
            "P2" | "P2_TEMPERATURE" => Ok(PropertyId::P2Temperature),
            "P3" | "P3_VELOCITY" => Ok(PropertyId::P3Velocity),
            _ => Err(format!("unknown property {s:?} (expected P1, P2 or P3)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id")]
pub enum PropertySpec {
    #[serde(rename = "P1")]
    Time { d: f64 },
    #[serde(rename = "P2")]
    Temperature { tau_t: Bounds },
    #[serde(rename = "P3")]
    Velocity { tau_v: Bounds },
}

impl PropertySpec {
    /// The property with parameters taken from `config`.
    pub fn from_config(id: PropertyId, config: &TwinConfig) -> Self {
        match id {
            PropertyId::P1Time => PropertySpec::Time { d: config.d },
            PropertyId::P2Temperature => PropertySpec::Temperature {
                tau_t: config.tau_t,
            },
            PropertyId::P3Velocity => PropertySpec::Velocity {
                tau_v: config.tau_v,
            },
        }
    }

    pub fn id(&self) -> PropertyId {
        match self {
            PropertySpec::Time { .. } => PropertyId::P1Time,
            PropertySpec::Temperature { .. } => PropertyId::P2Temperature,
            PropertySpec::Velocity { .. } => PropertyId::P3Velocity,
        }
    }

    /// Checks the step `prev -> cur`; returns a description of the
    /// violation at `cur`, if any. `dt` is the tick length.
    fn violation(
        &self,
        prev: Option<&TraceRecord>,
        cur: &TraceRecord,
        dt: f64,
    ) -> Result<Option<String>, VerifyError> {
        match self {
            PropertySpec::Time { d } => {
                let finished = cur.arm.task_status == TaskStatus::Done
                    && prev.is_some_and(|p| p.arm.task_status == TaskStatus::Welding);
                if !finished {
                    return Ok(None);
                }
                let start = cur
                    .arm
                    .weld_started_at
                    .ok_or(VerifyError::MissingSignal("arm.weld_started_at"))?;
                let duration = cur.time - start;
                Ok(((duration - d).abs() > dt + 1e-9)
                    .then(|| format!("weld lasted {duration} s, expected {d} s")))
            }
            PropertySpec::Temperature { tau_t } => {
                let welding = cur.arm.task_status == TaskStatus::Welding
                    || (cur.arm.task_status == TaskStatus::Done
                        && prev.is_some_and(|p| p.arm.task_status == TaskStatus::Welding));
                let temp = cur.arm.object_temp;
                Ok((welding && !tau_t.contains(temp)).then(|| {
                    format!(
                        "weld temperature {temp} outside [{}, {}]",
                        tau_t.min, tau_t.max
                    )
                }))
            }
            PropertySpec::Velocity { tau_v } => {
                let v = cur.velocity;
                Ok((cur.motor_on && !tau_v.contains(v)).then(|| {
                    format!(
                        "velocity {v} outside [{}, {}] with motor on",
                        tau_v.min, tau_v.max
                    )
                }))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictResult {
    Unsat,
    Sat,
}

/// A violating execution: the inputs that drive the plant there and the
/// states visited, ending at the violating tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub tick: u64,
    pub reason: String,
    pub schedule: InputSchedule,
    pub states: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub property: PropertySpec,
    pub result: VerdictResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<Counterexample>,
    pub explored_states: u64,
    pub bound_k: u64,
    /// Wall-clock time, informational only.
    #[serde(default)]
    pub elapsed_ms: u64,
}

impl Verdict {
    pub fn is_sat(&self) -> bool {
        self.result == VerdictResult::Sat
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("trace lacks signal {0}")]
    MissingSignal(&'static str),
    #[error("state budget of {budget} exceeded after {explored} states")]
    BudgetExceeded { budget: u64, explored: u64 },
    #[error("bound k must be at least 1")]
    InvalidBound,
    #[error(transparent)]
    Plant(#[from] PlantError),
}

fn trace_dt(trace: &PlantTrace) -> f64 {
    match trace.records.as_slice() {
        [a, b, ..] => b.time - a.time,
        _ => 0.0,
    }
}

/// Checks `prop` over a recorded trace; a sat verdict points at the first
/// violating tick.
pub fn check_trace(trace: &PlantTrace, prop: &PropertySpec) -> Result<Verdict, VerifyError> {
    let dt = trace_dt(trace);
    let mut prev = None;
    for (i, rec) in trace.records.iter().enumerate() {
        if let Some(reason) = prop.violation(prev, rec, dt)? {
            return Ok(Verdict {
                property: *prop,
                result: VerdictResult::Sat,
                counterexample: Some(Counterexample {
                    tick: rec.tick,
                    reason,
                    schedule: InputSchedule::default(),
                    states: trace.records[..=i].to_vec(),
                }),
                explored_states: i as u64 + 1,
                bound_k: trace.records.len().saturating_sub(1) as u64,
                elapsed_ms: 0,
            });
        }
        prev = Some(rec);
    }
    Ok(Verdict {
        property: *prop,
        result: VerdictResult::Unsat,
        counterexample: None,
        explored_states: trace.records.len() as u64,
        bound_k: trace.records.len().saturating_sub(1) as u64,
        elapsed_ms: 0,
    })
}

/// Which part of the line a property is explored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubModel {
    /// Velocity setpoint chosen once, then {skip, load} on every eligible tick.
    Conveyor,
    /// Current and pressure chosen once, then {idle, start_weld} on every
    /// tick the arm is free.
    Arm,
}

impl SubModel {
    pub fn for_property(id: PropertyId) -> Self {
        match id {
            PropertyId::P3Velocity => SubModel::Conveyor,
            PropertyId::P1Time | PropertyId::P2Temperature => SubModel::Arm,
        }
    }
}

/// The model the explorer runs: plant constants and setpoint domains from
/// `config`, discretized to `grid` points per interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreModel {
    pub config: TwinConfig,
    pub grid: usize,
    pub state_budget: u64,
}

impl ExploreModel {
    pub fn new(config: TwinConfig) -> Self {
        Self {
            config,
            grid: DEFAULT_GRID,
            state_budget: DEFAULT_STATE_BUDGET,
        }
    }

    pub fn plant(&self) -> Result<Plant, PlantError> {
        let mut pc = PlantConfig::reference();
        pc.dt = self.config.dt;
        pc.geometry = self.config.geometry;
        pc.init_temp = self.config.init_temp;
        pc.k_heat = self.config.k_heat;
        pc.k_cool = self.config.k_cool;
        pc.weld_duration = self.config.d;
        Plant::new(pc)
    }

    /// Tick-0 commands for each initial setpoint choice, in enumeration order.
    pub fn initial_choices(&self, sub: SubModel) -> Vec<Vec<ActuatorCommand>> {
        let cfg = &self.config;
        match sub {
            SubModel::Conveyor => cfg
                .tau_v
                .grid(self.grid)
                .into_iter()
                .map(|v| {
                    vec![
                        ActuatorCommand::new("conveyor", ActuatorAction::Power(true)),
                        ActuatorCommand::new("conveyor", ActuatorAction::Velocity(v)),
                    ]
                })
                .collect(),
            SubModel::Arm => {
                let mut out = Vec::new();
                for c in cfg.tau_c.grid(self.grid) {
                    for p in cfg.tau_p.grid(self.grid) {
                        out.push(vec![
                            ActuatorCommand::new("arm", ActuatorAction::Power(true)),
                            ActuatorCommand::new("arm", ActuatorAction::Current(c)),
                            ActuatorCommand::new("arm", ActuatorAction::Pressure(p)),
                        ]);
                    }
                }
                out
            }
        }
    }
}

/// Search node: plant state plus the bookkeeping the input rules need.
#[derive(Clone)]
struct Node {
    state: PlantState,
    last_load: Option<u64>,
}

fn push_f64(key: &mut Vec<u8>, v: f64) {
    key.extend_from_slice(&v.to_bits().to_be_bytes());
}

fn node_key(n: &Node) -> Vec<u8> {
    let s = &n.state;
    let mut k = Vec::with_capacity(96 + 24 * s.belt_objects.len());
    k.extend_from_slice(&s.tick.to_be_bytes());
    k.push(u8::from(s.motor_on));
    push_f64(&mut k, s.velocity_setpoint);
    push_f64(&mut k, s.velocity);
    for o in &s.belt_objects {
        push_f64(&mut k, o.position);
        k.push(u8::from(o.welded));
    }
    k.push(0xff);
    k.extend_from_slice(&s.next_object_id.to_be_bytes());
    let a = &s.arm;
    k.push(u8::from(a.enabled));
    push_f64(&mut k, a.current);
    push_f64(&mut k, a.pressure);
    push_f64(&mut k, a.object_temp);
    k.push(a.task_status.code());
    push_f64(&mut k, a.weld_started_at.unwrap_or(-1.0));
    k.extend_from_slice(&a.weld_ticks_remaining.to_be_bytes());
    k.extend_from_slice(&a.objects_welded.to_be_bytes());
    k.extend_from_slice(&n.last_load.map_or(u64::MAX, |t| t).to_be_bytes());
    k
}

/// Per-tick choice. `0` is always "do nothing".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Choice {
    Nothing,
    Load,
    StartWeld,
}

struct Search<'a> {
    model: &'a ExploreModel,
    plant: Plant,
    sub: SubModel,
    prop: PropertySpec,
    k: u64,
    visited: HashSet<Vec<u8>>,
    explored: u64,
    global: &'a AtomicU64,
    interval: u64,
    /// Choices along the current path, tick by tick.
    path: Vec<Choice>,
    records: Vec<TraceRecord>,
}

struct Found {
    tick: u64,
    reason: String,
    path: Vec<Choice>,
    records: Vec<TraceRecord>,
}

impl<'a> Search<'a> {
    fn choices(&self, n: &Node) -> Result<Vec<Choice>, PlantError> {
        let s = &n.state;
        let mut out = vec![Choice::Nothing];
        match self.sub {
            SubModel::Conveyor => {
                let paced = n.last_load.is_none_or(|l| s.tick - l >= self.interval);
                // The motor is switched on by the tick-0 commands, so loads
                // become possible from tick 1.
                if s.motor_on && paced && self.plant.load_object(s).is_ok() {
                    out.push(Choice::Load);
                }
            }
            SubModel::Arm => {
                let free = s.arm.task_status != TaskStatus::Welding;
                let powered = s.arm.enabled || s.tick == 0;
                if free && powered && s.arm.objects_welded < self.model.config.a_max_capacity {
                    out.push(Choice::StartWeld);
                }
            }
        }
        Ok(out)
    }

    fn apply(
        &self,
        n: &Node,
        choice: Choice,
        initial: &[ActuatorCommand],
    ) -> Result<Node, PlantError> {
        let mut state = n.state.clone();
        let mut last_load = n.last_load;
        let mut cmds: Vec<ActuatorCommand> = if state.tick == 0 {
            initial.to_vec()
        } else {
            Vec::new()
        };
        match choice {
            Choice::Nothing => {}
            Choice::Load => {
                state = self.plant.load_object(&state)?;
                last_load = Some(state.tick);
            }
            Choice::StartWeld => cmds.push(ActuatorCommand::new("arm", ActuatorAction::StartWeld)),
        }
        let state = self.plant.step(&state, &cmds, &[], self.model.config.dt)?;
        Ok(Node { state, last_load })
    }

    fn dfs(&mut self, n: &Node, initial: &[ActuatorCommand]) -> Result<Option<Found>, VerifyError> {
        if n.state.tick >= self.k {
            return Ok(None);
        }
        for choice in self.choices(n)? {
            let next = self.apply(n, choice, initial)?;
            if !self.visited.insert(node_key(&next)) {
                continue;
            }
            self.explored += 1;
            let total = self.global.fetch_add(1, Ordering::Relaxed) + 1;
            if total > self.model.state_budget {
                return Err(VerifyError::BudgetExceeded {
                    budget: self.model.state_budget,
                    explored: total,
                });
            }
            let rec = self.plant.record(&next.state, &[]);
            self.path.push(choice);
            let violation = self
                .prop
                .violation(self.records.last(), &rec, self.model.config.dt)?;
            self.records.push(rec);
            if let Some(reason) = violation {
                return Ok(Some(Found {
                    tick: next.state.tick,
                    reason,
                    path: self.path.clone(),
                    records: self.records.clone(),
                }));
            }
            if let Some(f) = self.dfs(&next, initial)? {
                return Ok(Some(f));
            }
            self.path.pop();
            self.records.pop();
        }
        Ok(None)
    }
}

fn schedule_of(initial: &[ActuatorCommand], path: &[Choice]) -> InputSchedule {
    let mut inputs = Vec::new();
    for (t, c) in path.iter().enumerate() {
        let mut cmds = if t == 0 { initial.to_vec() } else { Vec::new() };
        let load = *c == Choice::Load;
        if *c == Choice::StartWeld {
            cmds.push(ActuatorCommand::new("arm", ActuatorAction::StartWeld));
        }
        if load || !cmds.is_empty() {
            inputs.push(ScheduledInput {
                tick: t as u64,
                load,
                commands: cmds,
            });
        }
    }
    InputSchedule { inputs }
}

/// Enumerates every execution of length ≤ k over the discretized inputs
/// from the initial state; sat carries the lexicographically first
/// violating path (initial choice index, then per-tick choices with
/// "do nothing" first).
pub fn bounded_explore(
    model: &ExploreModel,
    k: u64,
    prop: &PropertySpec,
) -> Result<Verdict, VerifyError> {
    if k == 0 {
        return Err(VerifyError::InvalidBound);
    }
    let started = Instant::now();
    let plant = model.plant()?;
    let sub = SubModel::for_property(prop.id());
    let initials = model.initial_choices(sub);
    let global = AtomicU64::new(0);
    let interval = model.config.load_interval_ticks();

    let results: Vec<Result<(u64, Option<Found>), VerifyError>> = initials
        .par_iter()
        .map(|initial| {
            let root = Node {
                state: plant.initial_state(model.config.seed),
                last_load: None,
            };
            let mut search = Search {
                model,
                plant: plant.clone(),
                sub,
                prop: *prop,
                k,
                visited: HashSet::new(),
                explored: 1,
                global: &global,
                interval,
                path: Vec::new(),
                records: vec![plant.record(&root.state, &[])],
            };
            let found = search.dfs(&root, initial)?;
            Ok((search.explored, found))
        })
        .collect();

    let mut explored = 0;
    let mut first: Option<(usize, Found)> = None;
    for (i, r) in results.into_iter().enumerate() {
        let (n, found) = r?;
        explored += n;
        if first.is_none() {
            if let Some(f) = found {
                first = Some((i, f));
            }
        }
    }
    let counterexample = first.map(|(i, f)| Counterexample {
        tick: f.tick,
        reason: f.reason,
        schedule: schedule_of(&initials[i], &f.path),
        states: f.records,
    });
    Ok(Verdict {
        property: *prop,
        result: if counterexample.is_some() {
            VerdictResult::Sat
        } else {
            VerdictResult::Unsat
        },
        counterexample,
        explored_states: explored,
        bound_k: k,
        elapsed_ms: started.elapsed().as_millis() as u64,
    })
}

/// Replays a counterexample schedule through the plant stepper up to its
/// violating tick.
pub fn replay(model: &ExploreModel, cx: &Counterexample) -> Result<PlantTrace, VerifyError> {
    let plant = model.plant()?;
    let (trace, _) = plant.run(
        &plant.initial_state(model.config.seed),
        &cx.schedule,
        &[],
        cx.tick,
    )?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(config: TwinConfig) -> ExploreModel {
        let mut m = ExploreModel::new(config);
        m.grid = 2;
        m
    }

    #[test]
    fn nominal_is_unsat_on_small_grid() {
        let cfg = TwinConfig::reference();
        let m = small(cfg.clone());
        for id in PropertyId::ALL {
            let v = bounded_explore(&m, 30, &PropertySpec::from_config(id, &cfg)).unwrap();
            assert_eq!(v.result, VerdictResult::Unsat, "{id}");
            assert!(v.explored_states > 1);
        }
    }

    #[test]
    fn inflated_heating_breaks_p2_and_replays() {
        let nominal = TwinConfig::reference();
        let mut cfg = nominal.clone();
        cfg.k_heat *= 10.0;
        let m = small(cfg);
        let prop = PropertySpec::from_config(PropertyId::P2Temperature, &nominal);
        let v = bounded_explore(&m, 30, &prop).unwrap();
        assert!(v.is_sat());
        let cx = v.counterexample.unwrap();
        let trace = replay(&m, &cx).unwrap();
        let rv = check_trace(&trace, &prop).unwrap();
        assert!(rv.is_sat());
        assert_eq!(rv.counterexample.unwrap().tick, cx.tick);
    }

    #[test]
    fn bound_one_with_no_inputs_is_unsat() {
        let cfg = TwinConfig::reference();
        let m = small(cfg.clone());
        for id in PropertyId::ALL {
            assert!(
                !bounded_explore(&m, 1, &PropertySpec::from_config(id, &cfg))
                    .unwrap()
                    .is_sat()
            );
        }
        assert_eq!(
            bounded_explore(&m, 0, &PropertySpec::Time { d: 2.0 }),
            Err(VerifyError::InvalidBound)
        );
    }

    #[test]
    fn budget_is_reported() {
        let cfg = TwinConfig::reference();
        let mut m = small(cfg.clone());
        m.state_budget = 10;
        assert!(matches!(
            bounded_explore(&m, 40, &PropertySpec::from_config(PropertyId::P1Time, &cfg)),
            Err(VerifyError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn long_weld_trace_is_p1_sat() {
        let cfg = TwinConfig::reference();
        let m = small(cfg.clone());
        let plant = m.plant().unwrap();
        let mut sched = InputSchedule::default();
        sched.push(
            0,
            false,
            vec![
                ActuatorCommand::new("arm", ActuatorAction::Power(true)),
                ActuatorCommand::new("arm", ActuatorAction::Current(100.0)),
                ActuatorCommand::new("arm", ActuatorAction::Pressure(3.0)),
                ActuatorCommand::new("arm", ActuatorAction::StartWeld),
            ],
        );
        let (mut trace, _) = plant.run(&plant.initial_state(0), &sched, &[], 30).unwrap();
        let prop = PropertySpec::from_config(PropertyId::P1Time, &cfg);
        assert!(!check_trace(&trace, &prop).unwrap().is_sat());
        // Start the weld two ticks earlier than recorded.
        for r in &mut trace.records {
            if let Some(s) = r.arm.weld_started_at.as_mut() {
                *s -= 2.0 * cfg.dt;
            }
        }
        let v = check_trace(&trace, &prop).unwrap();
        assert!(v.is_sat());
        assert_eq!(v.counterexample.unwrap().tick, 20);
    }
}
