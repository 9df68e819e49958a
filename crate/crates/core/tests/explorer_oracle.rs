//! The explorer against plain enumeration: every input sequence of length
//! k is simulated without any state sharing, and each property is checked
//! by a direct restatement over the full trace.

use tts_core::plant::{
    ActuatorAction, ActuatorCommand, InputSchedule, PlantState, TaskStatus, TraceRecord,
};
use tts_core::twin::{Bounds, TwinConfig};
use tts_core::verify::{bounded_explore, ExploreModel, PropertyId, PropertySpec, SubModel};
use tts_core::Plant;

#[derive(Clone, Copy, Debug, PartialEq)]
enum In {
    Wait,
    Act,
}

fn first_violation(records: &[TraceRecord], prop: &PropertySpec, dt: f64) -> Option<u64> {
    for w in 0..records.len() {
        let cur = &records[w];
        let prev = w.checked_sub(1).map(|i| &records[i]);
        let bad = match prop {
            PropertySpec::Time { d } => {
                let done_now = cur.arm.task_status == TaskStatus::Done
                    && prev.is_some_and(|p| p.arm.task_status == TaskStatus::Welding);
                done_now && ((cur.time - cur.arm.weld_started_at.unwrap()) - d).abs() > dt + 1e-9
            }
            PropertySpec::Temperature { tau_t } => {
                let hot = cur.arm.task_status == TaskStatus::Welding
                    || (cur.arm.task_status == TaskStatus::Done
                        && prev.is_some_and(|p| p.arm.task_status == TaskStatus::Welding));
                hot && !(tau_t.min <= cur.arm.object_temp && cur.arm.object_temp <= tau_t.max)
            }
            PropertySpec::Velocity { tau_v } => {
                cur.motor_on && !(tau_v.min <= cur.velocity && cur.velocity <= tau_v.max)
            }
        };
        if bad {
            return Some(cur.tick);
        }
    }
    None
}

struct Enum<'a> {
    plant: &'a Plant,
    cfg: &'a TwinConfig,
    sub: SubModel,
    k: u64,
    prop: PropertySpec,
    leaves: u64,
}

impl Enum<'_> {
    /// Depth-first over inputs, "wait" first. Returns the first violating
    /// path and tick.
    fn run(
        &mut self,
        state: &PlantState,
        last_load: Option<u64>,
        initial: &[ActuatorCommand],
        path: &mut Vec<In>,
        records: &mut Vec<TraceRecord>,
    ) -> Option<(Vec<In>, u64)> {
        if state.tick == self.k {
            self.leaves += 1;
            return first_violation(records, &self.prop, self.cfg.dt)
                .map(|t| (path[..t as usize].to_vec(), t));
        }
        let act_ok = match self.sub {
            SubModel::Conveyor => {
                state.motor_on
                    && last_load.is_none_or(|l| state.tick - l >= self.cfg.load_interval_ticks())
                    && self.plant.load_object(state).is_ok()
            }
            SubModel::Arm => {
                state.arm.task_status != TaskStatus::Welding
                    && (state.arm.enabled || state.tick == 0)
                    && state.arm.objects_welded < self.cfg.a_max_capacity
            }
        };
        let options: &[In] = if act_ok {
            &[In::Wait, In::Act]
        } else {
            &[In::Wait]
        };
        for &opt in options {
            let mut s = state.clone();
            let mut cmds = if s.tick == 0 {
                initial.to_vec()
            } else {
                vec![]
            };
            let mut ll = last_load;
            if opt == In::Act {
                match self.sub {
                    SubModel::Conveyor => {
                        s = self.plant.load_object(&s).unwrap();
                        ll = Some(s.tick);
                    }
                    SubModel::Arm => {
                        cmds.push(ActuatorCommand::new("arm", ActuatorAction::StartWeld))
                    }
                }
            }
            let next = self.plant.step(&s, &cmds, &[], self.cfg.dt).unwrap();
            path.push(opt);
            records.push(self.plant.record(&next, &[]));
            let found = self.run(&next, ll, initial, path, records);
            path.pop();
            records.pop();
            if found.is_some() {
                return found;
            }
        }
        None
    }
}

fn schedule_len(s: &InputSchedule) -> usize {
    s.inputs
        .iter()
        .filter(|i| {
            i.load
                || i.commands
                    .iter()
                    .any(|c| c.action == ActuatorAction::StartWeld)
        })
        .count()
}

fn check(cfg: TwinConfig, prop: PropertySpec, k: u64) -> bool {
    let mut model = ExploreModel::new(cfg.clone());
    model.grid = 2;
    let verdict = bounded_explore(&model, k, &prop).unwrap();
    let plant = model.plant().unwrap();
    let sub = SubModel::for_property(prop.id());
    let mut oracle = None;
    let mut e = Enum {
        plant: &plant,
        cfg: &cfg,
        sub,
        k,
        prop,
        leaves: 0,
    };
    for initial in model.initial_choices(sub) {
        let root = plant.initial_state(cfg.seed);
        let mut records = vec![plant.record(&root, &[])];
        if let Some(f) = e.run(&root, None, &initial, &mut vec![], &mut records) {
            oracle = Some(f);
            break;
        }
    }
    assert_eq!(verdict.is_sat(), oracle.is_some(), "{prop:?} k={k}");
    if let (Some(cx), Some((path, tick))) = (&verdict.counterexample, &oracle) {
        assert_eq!(cx.tick, *tick);
        let acts = path.iter().filter(|p| **p == In::Act).count();
        assert_eq!(schedule_len(&cx.schedule), acts, "{prop:?}");
    }
    verdict.is_sat()
}

#[test]
fn nominal_agrees() {
    let cfg = TwinConfig::reference();
    for id in PropertyId::ALL {
        assert!(!check(cfg.clone(), PropertySpec::from_config(id, &cfg), 24));
    }
}

#[test]
fn overheating_agrees() {
    let mut cfg = TwinConfig::reference();
    cfg.k_heat *= 10.0;
    assert!(check(
        cfg.clone(),
        PropertySpec::from_config(PropertyId::P2Temperature, &cfg),
        16
    ));
}

#[test]
fn wide_velocity_agrees() {
    let nominal = TwinConfig::reference();
    let mut cfg = nominal.clone();
    cfg.tau_v = Bounds::new(1.0, 8.0);
    assert!(check(
        cfg,
        PropertySpec::from_config(PropertyId::P3Velocity, &nominal),
        8
    ));
}

#[test]
fn short_weld_deadline_agrees() {
    let cfg = TwinConfig::reference();
    assert!(check(cfg, PropertySpec::Time { d: 1.0 }, 24));
}

#[test]
fn tight_temperature_agrees_at_several_bounds() {
    let mut cfg = TwinConfig::reference();
    cfg.tau_t.max = 150.0;
    for k in [5, 15, 21] {
        check(
            cfg.clone(),
            PropertySpec::from_config(PropertyId::P2Temperature, &cfg),
            k,
        );
    }
}
