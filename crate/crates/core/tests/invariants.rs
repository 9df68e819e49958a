use std::sync::Arc;

use proptest::prelude::*;
use tts_core::canonical::Canonical;
use tts_core::icm::{ProvenanceBuilder, ProvenanceRecord};
use tts_core::ledger::{EntryPayload, SpecRecord};
use tts_core::plant::{ActuatorAction, ActuatorCommand, AssetStatus, SensorType};
use tts_core::rbac::role_allows;
use tts_core::rules::{evaluate, RuleBook, SignalRegistry, TelemetrySnapshot};
use tts_core::{
    consistency_check, CalibrationRecord, Ledger, LogicalClock, Plant, Principal, Role,
    RulePredicate, SensorReading, SpecFile,
};

fn reading(value: f64) -> SensorReading {
    SensorReading {
        sensor_id: "S".into(),
        sensor_type: SensorType::Temperature,
        value,
        timestamp: 0.0,
        asset_id: "A".into(),
    }
}

/// (value, lo, hi) with the value often exactly on a bound.
fn cc_triple() -> impl Strategy<Value = (f64, f64, f64)> {
    (-1e6f64..1e6, -1e6f64..1e6, -1e6f64..1e6, 0u8..4).prop_map(|(a, b, v, pick)| {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let value = match pick {
            0 => lo,
            1 => hi,
            _ => v,
        };
        (value, lo, hi)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn cc_is_inclusive_bounds((value, lo, hi) in cc_triple()) {
        let cal = CalibrationRecord::new("S", lo, hi).unwrap();
        let direct = lo <= value && value <= hi;
        prop_assert_eq!(consistency_check(&reading(value), &cal).unwrap(), direct);
    }
}

fn atom() -> impl Strategy<Value = RulePredicate> {
    let sensor = prop::sample::select(vec!["Sensor1", "Sensor3", "Sensor5"]);
    prop_oneof![
        Just(RulePredicate::True),
        (sensor.clone(), -1e3f64..1e3, 0f64..1e3).prop_map(|(s, lo, w)| RulePredicate::in_bounds(
            s,
            lo,
            lo + w
        )),
        (prop::sample::select(vec!["PLC1", "PLC2"]), any::<bool>()).prop_map(|(a, on)| {
            RulePredicate::status(
                a,
                if on {
                    AssetStatus::On
                } else {
                    AssetStatus::Off
                },
            )
        }),
        (
            prop::sample::select(vec!["o_count", "objects_welded"]),
            0u64..100
        )
            .prop_map(|(c, n)| RulePredicate::CountAtMost {
                counter: c.into(),
                n
            }),
        (sensor, 0f64..50.0, 1u32..10).prop_map(|(s, d, w)| RulePredicate::RateAtMost {
            sensor: s.into(),
            delta: d,
            window: w,
        }),
        (prop::sample::select(Role::ALL.to_vec())).prop_map(|r| RulePredicate::RoleRequired {
            action: "upsert_rule".into(),
            role: r,
        }),
    ]
}

fn predicate() -> impl Strategy<Value = RulePredicate> {
    atom().prop_recursive(4, 24, 3, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 1..4).prop_map(RulePredicate::And),
            prop::collection::vec(inner.clone(), 1..4).prop_map(RulePredicate::Or),
            inner.prop_map(|p| RulePredicate::Not(Box::new(p))),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn predicate_text_round_trip(p in predicate()) {
        let text = p.canonical_text();
        let back = RulePredicate::parse(&text).unwrap();
        prop_assert_eq!(back.canonical_text(), text);
    }

    #[test]
    fn in_bounds_rule_matches_direct_check(lo in -100f64..100.0, w in 0f64..100.0, v in -300f64..300.0) {
        let ledger = Ledger::with_seed(1).into_handle();
        let spec = SpecFile::reference();
        let book = RuleBook::new(ledger.clone(), SignalRegistry::from_ek(&spec.engineering()));
        let analyst = Principal::with_role("E-a", Role::SecurityAnalyst);
        let id = book
            .upsert_rule(&analyst, RulePredicate::in_bounds("Sensor5", lo, lo + w), ["Sensor5".to_owned()].into(), None)
            .unwrap();
        let snap = TelemetrySnapshot {
            sensors: [("Sensor5".into(), v)].into(),
            ..Default::default()
        };
        let verdict = evaluate(&book.get(id).unwrap(), &snap).unwrap();
        prop_assert_eq!(verdict.is_pass(), lo <= v && v <= lo + w);
    }

    #[test]
    fn provenance_canonical_round_trip(asset in 0usize..2, secs in 0u64..1_000_000, settings in prop::collection::vec(-1e3f64..1e3, 0..4)) {
        let spec = SpecFile::reference();
        let ek = spec.engineering();
        let b = ProvenanceBuilder::new(&ek);
        let author = Principal::with_role("E-a", Role::SecurityAnalyst);
        let (a, s) = [("PLC1", "Sensor1"), ("PLC2", "Sensor5")][asset];
        let records = [
            b.engineering(&author, a, s, secs).unwrap(),
            b.process(&author, tts_core::RuleId(1), "TRUE", author.entity_id(), a, s, &settings, secs).unwrap(),
            b.domain(&author, &spec.domain_knowledge[0], secs).unwrap(),
        ];
        for r in records {
            let bytes = r.to_canonical_bytes();
            let back = ProvenanceRecord::from_canonical_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_canonical_bytes(), bytes);
            prop_assert_eq!(&back, &r);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ledger_is_append_only(ops in prop::collection::vec((prop::sample::select(Role::ALL.to_vec()), 0f64..10.0), 1..12)) {
        let ledger = Ledger::new(
            Default::default(),
            Box::new(tts_core::ledger::Ed25519Authority::from_seed(3)),
            Arc::new(LogicalClock::default()),
        );
        let mut seen: Vec<tts_core::ledger::Block> = Vec::new();
        for (role, v) in ops {
            let before = ledger.len();
            let who = Principal::with_role("E-x", role);
            let cal = CalibrationRecord::new("Sensor1", v, v + 1.0).unwrap();
            let res = ledger.append(&[EntryPayload::SpecEntry(SpecRecord::Calibration(cal))], &who);
            let allowed = role_allows(role, tts_core::Permission::AppendLedger)
                && role_allows(role, tts_core::Permission::UploadSpec);
            prop_assert_eq!(res.is_ok(), allowed);
            prop_assert_eq!(ledger.len(), before + u64::from(allowed));
            let blocks = ledger.blocks();
            prop_assert_eq!(&blocks[..seen.len()], &seen[..]);
            seen = blocks;
            prop_assert!(ledger.verify_chain().is_intact());
        }
    }

    #[test]
    fn belt_moves_v_dt_per_tick(v in 1f64..5.0, ticks in 1u64..60) {
        let plant = Plant::reference();
        let dt = plant.config().dt;
        let mut state = plant.initial_state(0);
        state = plant.load_object(&state).unwrap();
        let x0 = state.belt_objects[0].position;
        state = plant
            .step(
                &state,
                &[
                    ActuatorCommand::new("conveyor", ActuatorAction::Power(true)),
                    ActuatorCommand::new("conveyor", ActuatorAction::Velocity(v)),
                ],
                &[],
                dt,
            )
            .unwrap();
        for _ in 1..ticks {
            state = plant.step(&state, &[], &[], dt).unwrap();
        }
        let expected = x0 + v * dt * ticks as f64;
        if let Some(o) = state.belt_objects.first() {
            prop_assert!((o.position - expected).abs() < 1e-9 * ticks as f64 + 1e-9, "{} vs {}", o.position, expected);
        } else {
            // Object ran off the end of the belt.
            prop_assert!(expected >= plant.config().geometry.belt_length - v * dt);
        }
    }
}
