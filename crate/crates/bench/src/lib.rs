//! Fixtures shared by the benchmarks.

use std::collections::BTreeSet;
use std::sync::Arc;

use tts_core::ledger::{EntryPayload, SpecRecord};
use tts_core::plant::{ActuatorAction, ActuatorCommand, PlantState};
use tts_core::rules::{RuleBook, SignalRegistry, TelemetrySnapshot};
use tts_core::{
    CalibrationRecord, Ledger, LedgerHandle, LogicalClock, Plant, Principal, Role, Rule,
    RulePredicate, SpecFile,
};

pub fn analyst() -> Principal {
    Principal::with_role("E-bench", Role::SecurityAnalyst)
}

/// A plant with the conveyor running, the arm mid-weld and three objects on
/// the belt.
pub fn busy_plant() -> (Plant, PlantState) {
    let plant = Plant::reference();
    let dt = plant.config().dt;
    let mut s = plant.initial_state(0);
    for _ in 0..3 {
        s = plant.load_object(&s).expect("belt has room");
        s = plant
            .step(
                &s,
                &[
                    ActuatorCommand::new("conveyor", ActuatorAction::Power(true)),
                    ActuatorCommand::new("conveyor", ActuatorAction::Velocity(2.0)),
                    ActuatorCommand::new("arm", ActuatorAction::Power(true)),
                ],
                &[],
                dt,
            )
            .expect("reference plant steps");
        for _ in 0..20 {
            s = plant.step(&s, &[], &[], dt).expect("reference plant steps");
        }
    }
    s = plant
        .step(
            &s,
            &[ActuatorCommand::new("arm", ActuatorAction::StartWeld)],
            &[],
            dt,
        )
        .expect("reference plant steps");
    (plant, s)
}

/// A nested rule over every atom kind, and a snapshot that satisfies it.
pub fn nested_rule() -> (Rule, TelemetrySnapshot) {
    let text = "(AND (IN_BOUNDS Sensor5 20.0 400.0) (OR (STATUS PLC1 ON) (NOT (COUNT_AT_MOST o_count 3))) \
                (RATE_AT_MOST Sensor1 0.5 4) (COUNT_AT_MOST objects_welded 5))";
    let book = RuleBook::new(
        Ledger::with_seed(1).into_handle(),
        SignalRegistry::from_ek(&SpecFile::reference().engineering()),
    );
    let id = book
        .upsert_rule(
            &analyst(),
            RulePredicate::parse(text).expect("fixture parses"),
            BTreeSet::from(["Sensor5".to_owned()]),
            None,
        )
        .expect("fixture is valid");
    let snap = TelemetrySnapshot {
        sensors: [("Sensor5".into(), 120.0), ("Sensor1".into(), 2.0)].into(),
        history: [("Sensor1".into(), vec![2.0, 2.0, 2.1, 2.0])].into(),
        assets: [("PLC1".into(), tts_core::plant::AssetStatus::On)].into(),
        counters: [("o_count".into(), 2), ("objects_welded".into(), 2)].into(),
        ..Default::default()
    };
    (book.get(id).expect("rule stored"), snap)
}

pub fn calibration_payload(i: usize) -> Vec<EntryPayload> {
    let lo = i as f64;
    vec![EntryPayload::SpecEntry(SpecRecord::Calibration(
        CalibrationRecord::new("Sensor1", lo, lo + 5.0).expect("valid bounds"),
    ))]
}

/// A ledger holding `n` single-entry blocks.
pub fn ledger_with(n: usize) -> LedgerHandle {
    let ledger = Ledger::new(
        Default::default(),
        Box::new(tts_core::ledger::Ed25519Authority::from_seed(9)),
        Arc::new(LogicalClock::default()),
    )
    .into_handle();
    let who = analyst();
    for i in 0..n {
        ledger
            .append(&calibration_payload(i), &who)
            .expect("analyst may append");
    }
    ledger
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_usable() {
        let (_, s) = busy_plant();
        assert_eq!(s.belt_objects.len(), 3);
        let (rule, snap) = nested_rule();
        assert!(tts_core::rules::evaluate(&rule, &snap).unwrap().is_pass());
        assert!(ledger_with(4).verify_chain().is_intact());
    }
}
