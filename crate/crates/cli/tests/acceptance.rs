#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines reach stdout uncaptured.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tts_core::ledger::{verify_export, Ed25519Authority};
use tts_core::plant::{FaultInjection, SensorType, TaskStatus};
use tts_core::rules::{RuleBook, SignalRegistry};
use tts_core::twin::{
    operate_line, Action, ArmInputs, ConveyorInputs, LineSetpoints, NoopObserver, Outcome,
    ViolatedRule,
};
use tts_core::verify::{bounded_explore, replay, ExploreModel, PropertyId, PropertySpec};
use tts_core::{
    consistency_check, generate_twin, CalibrationRecord, ChainStatus, HashAlgorithm, Ledger,
    LogicalClock, Principal, Role, RulePredicate, SensorReading, SpecFile, TwinConfig,
    TwinInstance,
};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn twin() -> TwinInstance {
    let spec = SpecFile::reference();
    let ledger = Ledger::new(
        HashAlgorithm::Sha256,
        Box::new(Ed25519Authority::from_seed(1)),
        Arc::new(LogicalClock::default()),
    )
    .into_handle();
    generate_twin(&spec.engineering(), &spec.domain_knowledge, ledger).unwrap()
}

fn analyst() -> Principal {
    Principal::with_role("E-analyst", Role::SecurityAnalyst)
}

fn cc_conformance() -> Check {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    let (mut n, mut on_lo, mut on_hi) = (0u32, 0u32, 0u32);
    for i in 0..12_000u32 {
        let a: f64 = rng.gen_range(-1e6..1e6);
        let b: f64 = rng.gen_range(-1e6..1e6);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let value = match i % 4 {
            0 => lo,
            1 => hi,
            _ => rng.gen_range(-1.5e6..1.5e6),
        };
        let cal = CalibrationRecord::new("S", lo, hi).map_err(|e| e.to_string())?;
        let reading = SensorReading {
            sensor_id: "S".into(),
            sensor_type: SensorType::Temperature,
            value,
            timestamp: 0.0,
            asset_id: "A".into(),
        };
        let got = consistency_check(&reading, &cal).map_err(|e| e.to_string())?;
        ensure!(
            got == (lo <= value && value <= hi),
            "value={value} lo={lo} hi={hi} got {got}"
        );
        n += 1;
        on_lo += u32::from(value == lo);
        on_hi += u32::from(value == hi);
    }
    let took = started.elapsed();
    ensure!(took < Duration::from_secs(5), "took {took:?}");
    Ok(format!(
        "{n} triples, {on_lo} at lo, {on_hi} at hi, {took:.2?}"
    ))
}

fn replication_fidelity() -> Check {
    let cfg = TwinConfig::reference();
    let cal = SpecFile::reference().calibration;
    let activation = 250;
    let fault = FaultInjection::sensor_offset("Sensor5", 500.0, (activation, 499));
    let mut clean_runs = BTreeSet::new();
    let mut fault_runs = BTreeSet::new();
    let mut first_tick = 0;
    for _ in 0..10 {
        let t = twin();
        let plant = t.plant(&cfg).map_err(|e| e.to_string())?;
        let (clean, _) = operate_line(&plant, &cfg, LineSetpoints::default(), &[], 500)
            .map_err(|e| e.to_string())?;
        let (faulty, _) = operate_line(
            &plant,
            &cfg,
            LineSetpoints::default(),
            std::slice::from_ref(&fault),
            500,
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            clean.records.len() == 501,
            "clean trace has {} records",
            clean.records.len()
        );
        let a = t
            .replicate(&clean, &cal, &cfg, &mut NoopObserver)
            .map_err(|e| e.to_string())?;
        ensure!(
            a.report.incidents.is_empty(),
            "clean trace raised {} incidents",
            a.report.incidents.len()
        );
        let b = t
            .replicate(&faulty, &cal, &cfg, &mut NoopObserver)
            .map_err(|e| e.to_string())?;
        let first = b
            .report
            .incidents
            .first()
            .ok_or("fault raised no incident")?;
        ensure!(
            first.tick.abs_diff(activation) <= 1,
            "first incident at {} vs activation {activation}",
            first.tick
        );
        first_tick = first.tick;
        clean_runs.insert(serde_json::to_string(&a.report).unwrap() + &a.trace.to_ndjson());
        fault_runs.insert(serde_json::to_string(&b.report).unwrap() + &b.trace.to_ndjson());
    }
    ensure!(
        clean_runs.len() == 1 && fault_runs.len() == 1,
        "runs differ across repeats"
    );
    Ok(format!("clean 0 incidents; fault first incident at tick {first_tick} (active {activation}); 10/10 identical"))
}

fn service_branches() -> Check {
    let t = twin();
    let cfg = TwinConfig::reference();
    let cal = SpecFile::reference().calibration;
    let s5 = cal
        .iter()
        .find(|c| c.sensor_id.as_str() == "Sensor5")
        .ok_or("no Sensor5 calibration")?;
    let plant = t.plant(&cfg).map_err(|e| e.to_string())?;
    let fault = FaultInjection::sensor_offset("Sensor5", 500.0, (100, 299));
    let (faulty, _) = operate_line(&plant, &cfg, LineSetpoints::default(), &[fault], 300)
        .map_err(|e| e.to_string())?;

    let id = t
        .rules()
        .upsert_bounds_rule(&analyst(), "Sensor5", s5.tau_min, s5.tau_max)
        .map_err(|e| e.to_string())?;
    let with_rule = t
        .replicate(&faulty, &cal, &cfg, &mut NoopObserver)
        .map_err(|e| e.to_string())?;
    let first = with_rule
        .report
        .incidents
        .first()
        .ok_or("no incident with rule present")?;
    ensure!(
        first.action_taken == Action::CalibrationService,
        "with rule: {:?}",
        first.action_taken
    );
    ensure!(
        matches!(first.violated_rule, ViolatedRule::Rule { rule_id, .. } if rule_id == id),
        "with rule: {}",
        first.violated_rule
    );

    t.rules()
        .deactivate(&analyst(), id)
        .map_err(|e| e.to_string())?;
    let without = t
        .replicate(&faulty, &cal, &cfg, &mut NoopObserver)
        .map_err(|e| e.to_string())?;
    let first = without
        .report
        .incidents
        .first()
        .ok_or("no incident with rule removed")?;
    ensure!(
        first.action_taken == Action::SchedulingService,
        "without rule: {:?}",
        first.action_taken
    );
    ensure!(
        first.violated_rule == ViolatedRule::NoMatchingRule,
        "without rule: {}",
        first.violated_rule
    );
    Ok(format!(
        "with {id}: {} / {}; removed: {} / {}",
        with_rule.report.incidents[0].violated_rule,
        with_rule.report.incidents[0].action_taken.as_str(),
        first.violated_rule,
        first.action_taken.as_str()
    ))
}

fn rule_lifecycle() -> Check {
    let ledger = Ledger::with_seed(5).into_handle();
    let spec = SpecFile::reference();
    let book = RuleBook::new(ledger.clone(), SignalRegistry::from_ek(&spec.engineering()));
    let s5 = || BTreeSet::from(["Sensor5".to_owned()]);

    let id = book
        .upsert_rule(
            &analyst(),
            RulePredicate::in_bounds("Sensor5", 0.0, 10.0),
            s5(),
            None,
        )
        .map_err(|e| e.to_string())?;
    book.upsert_rule(
        &analyst(),
        RulePredicate::in_bounds("Sensor5", 0.0, 20.0),
        s5(),
        Some(id),
    )
    .map_err(|e| e.to_string())?;
    let versions: Vec<u32> = book.history(id).iter().map(|r| r.version).collect();
    ensure!(versions == [1, 2], "history {versions:?}");

    let before = ledger.len();
    let operator = Principal::with_role("E-operator", Role::PlantOperator);
    for existing in [None, Some(id)] {
        let denied = book.upsert_rule(&operator, RulePredicate::True, s5(), existing);
        ensure!(denied.is_err(), "operator upsert accepted");
        ensure!(ledger.len() == before, "chain grew on a denied upsert");
    }
    for (i, sensor) in ["Sensor1", "Sensor3", "Sensor4"].into_iter().enumerate() {
        book.upsert_rule(
            &analyst(),
            RulePredicate::in_bounds(sensor, 0.0, 10.0 + i as f64),
            BTreeSet::from([sensor.to_owned()]),
            None,
        )
        .map_err(|e| e.to_string())?;
    }
    ensure!(
        ledger.verify_chain().is_intact(),
        "fresh chain: {}",
        ledger.verify_chain()
    );

    let bytes = ledger.export();
    let blocks = ledger.blocks();
    let mut ends = Vec::new();
    let framed: usize = blocks
        .iter()
        .map(|b| 4 + tts_core::Canonical::to_canonical_bytes(b).len())
        .sum();
    let mut end = bytes.len() - framed;
    let header = end;
    for b in &blocks {
        end += 4 + tts_core::Canonical::to_canonical_bytes(b).len();
        ends.push(end);
    }
    let (_, status) = verify_export(&bytes, None).map_err(|e| e.to_string())?;
    ensure!(status.is_intact(), "export: {status}");

    let mut rng = StdRng::seed_from_u64(7);
    let mut detected = 0;
    for _ in 0..100 {
        let pos = rng.gen_range(header..bytes.len());
        let flip = rng.gen_range(1..=255u8);
        let mut bad = bytes.clone();
        bad[pos] ^= flip;
        let want = ends.iter().position(|&e| pos < e).unwrap() as u64;
        match verify_export(&bad, None) {
            Ok((_, ChainStatus::Broken { index, .. })) if index == want => detected += 1,
            other => {
                return Err(format!(
                    "byte {pos} (block {want}) ^ {flip:#04x}: {other:?}"
                ))
            }
        }
    }
    Ok(format!(
        "denied upsert kept {before} blocks; history {versions:?}; {} blocks intact; {detected}/100 tampers located",
        blocks.len()
    ))
}

fn arm_capacity() -> Check {
    let t = twin();
    let cfg = TwinConfig::reference();
    ensure!(cfg.a_max_capacity == 5, "a_max {}", cfg.a_max_capacity);
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
        .map_err(|e| e.to_string())?;
    ensure!(
        five.report.health_events() == 0,
        "health event after {} welds",
        five.report.o_count
    );
    let run = t
        .run_arm_sim(
            &cfg,
            &ArmInputs {
                current: 100.0,
                pressure: 3.0,
                objects: 8,
            },
            &mut NoopObserver,
        )
        .map_err(|e| e.to_string())?;
    ensure!(
        run.report.health_events() == 1,
        "{} health events",
        run.report.health_events()
    );
    let log = run.report.log_lines();
    let completes = log.lines().filter(|l| l.contains("weld_complete")).count();
    let health_at = log
        .lines()
        .position(|l| l.contains("equipment_health_check"))
        .unwrap();
    let before = log
        .lines()
        .take(health_at)
        .filter(|l| l.contains("weld_complete"))
        .count();
    ensure!(
        before == 5 && completes == 5,
        "{before} welds before the event, {completes} total"
    );
    ensure!(
        run.report.outcome == Outcome::CapacityReached,
        "outcome {:?}",
        run.report.outcome
    );
    Ok(format!(
        "one health event after weld 5, none with 5 objects; {completes} welds with 8 requested"
    ))
}

fn thermal_oracle() -> Check {
    let t = twin();
    let base = TwinConfig::reference();
    let mut tight = base.clone();
    tight.tau_t.max = 200.0;
    let (mut agree, mut breaches, mut worst) = (0, 0, 0.0f64);
    for c in base.tau_c.grid(5) {
        for p in base.tau_p.grid(4) {
            let oracle = base.init_temp + base.k_heat * c * p * base.d;
            let tol = base.k_heat * c * p * base.dt;
            let run = t
                .run_arm_sim(
                    &base,
                    &ArmInputs {
                        current: c,
                        pressure: p,
                        objects: 1,
                    },
                    &mut NoopObserver,
                )
                .map_err(|e| e.to_string())?;
            let err = (run.report.peak_temp - oracle).abs();
            ensure!(
                err <= tol + 1e-9,
                "C={c} P={p}: peak {} vs oracle {oracle}",
                run.report.peak_temp
            );
            worst = worst.max(err);

            let run = t
                .run_arm_sim(
                    &tight,
                    &ArmInputs {
                        current: c,
                        pressure: p,
                        objects: 1,
                    },
                    &mut NoopObserver,
                )
                .map_err(|e| e.to_string())?;
            let sim_breach = run.report.outcome == Outcome::Incident;
            let oracle_breach = oracle > tight.tau_t.max;
            ensure!(
                sim_breach == oracle_breach,
                "C={c} P={p}: sim breach {sim_breach}, oracle {oracle_breach}"
            );
            agree += 1;
            breaches += usize::from(oracle_breach);
        }
    }
    Ok(format!(
        "{agree}/20 agree ({breaches} breach at tau_t.max=200); worst peak error {worst:.2e}"
    ))
}

fn spacing() -> Check {
    let t = twin();
    let mut rng = StdRng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mut cfg = TwinConfig::reference();
        let v = rng.gen_range(cfg.tau_v.min..=cfg.tau_v.max);
        cfg.d = rng.gen_range(0.5..2.0);
        let run = t
            .run_conveyor_sim(
                &cfg,
                &ConveyorInputs {
                    velocity: v,
                    loads: vec![0, 0, 0],
                },
                &mut NoopObserver,
            )
            .map_err(|e| e.to_string())?;
        let mut min = f64::INFINITY;
        for rec in &run.trace.records {
            let mut pos: Vec<f64> = rec.objects.iter().map(|o| o.position).collect();
            pos.sort_by(f64::total_cmp);
            for w in pos.windows(2) {
                min = min.min(w[1] - w[0]);
            }
        }
        ensure!(
            min.is_finite(),
            "V={v} d={}: never two objects on the belt",
            cfg.d
        );
        let err = (min - v * cfg.d).abs();
        ensure!(
            err <= cfg.dt * v + 1e-9,
            "V={v} d={}: spacing {min} vs {}",
            cfg.d,
            v * cfg.d
        );
        worst = worst.max(err / (cfg.dt * v));
    }
    Ok(format!(
        "10/10 draws within dt*V (worst {:.0}% of the quantum)",
        worst * 100.0
    ))
}

fn verdicts() -> Check {
    let started = Instant::now();
    let nominal = TwinConfig::reference();
    let mut line = Vec::new();
    for id in PropertyId::ALL {
        let v = bounded_explore(
            &ExploreModel::new(nominal.clone()),
            50,
            &PropertySpec::from_config(id, &nominal),
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            !v.is_sat(),
            "nominal {id} sat: {:?}",
            v.counterexample.map(|c| c.reason)
        );
        line.push(format!("{id} unsat"));
    }

    let mut hot = nominal.clone();
    hot.k_heat *= 10.0;
    let model = ExploreModel::new(hot.clone());
    let prop = PropertySpec::from_config(PropertyId::P2Temperature, &nominal);
    let v = bounded_explore(&model, 50, &prop).map_err(|e| e.to_string())?;
    let cx = v.counterexample.ok_or("k_heat x10: P2 unsat")?;
    let trace = replay(&model, &cx).map_err(|e| e.to_string())?;
    let breach = trace
        .records
        .iter()
        .find(|r| {
            r.arm.task_status == TaskStatus::Welding && !nominal.tau_t.contains(r.arm.object_temp)
        })
        .ok_or("P2 counterexample does not replay to a breach")?;
    line.push(format!(
        "k_heat x10: P2 sat, replay reaches {:.1} at tick {}",
        breach.arm.object_temp, breach.tick
    ));

    let mut wide = nominal.clone();
    wide.tau_v.max = 8.0;
    wide.tau_v.min = 0.5;
    let v = bounded_explore(
        &ExploreModel::new(wide),
        50,
        &PropertySpec::from_config(PropertyId::P3Velocity, &nominal),
    )
    .map_err(|e| e.to_string())?;
    ensure!(v.is_sat(), "widened tau_v: P3 unsat");
    line.push("widened tau_v: P3 sat".into());

    let took = started.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    line.push(format!("{took:.2?}"));
    Ok(line.join("; "))
}

fn demo_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tts"))
        .args(["demo", "--seed", "42", "--out"])
        .arg(dir)
        .env_remove("TTS_K")
        .env_remove("TTS_GRID")
        .env_remove("TTS_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.code() == Some(0),
        "demo exit {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&p).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(files)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = demo_files(&tmp.path().join("a"))?;
    let b = demo_files(&tmp.path().join("b"))?;
    ensure!(a.keys().eq(b.keys()), "file sets differ");
    for (name, bytes) in &a {
        ensure!(b[name] == *bytes, "{name} differs");
    }
    let traces = a.keys().filter(|k| k.ends_with(".ndjson")).count();
    let reports = a.keys().filter(|k| k.ends_with("report.json")).count();
    ensure!(traces > 0 && reports > 0, "demo wrote no traces or reports");
    Ok(format!(
        "{} files identical ({traces} traces, {reports} reports)",
        a.len()
    ))
}

fn main() {
    let checks: [(&str, fn() -> Check); 9] = [
        ("consistency-check conformance", cc_conformance),
        ("replication fidelity", replication_fidelity),
        ("replication service branches", service_branches),
        ("rule lifecycle and tamper detection", rule_lifecycle),
        ("arm capacity", arm_capacity),
        ("thermal oracle agreement", thermal_oracle),
        ("object spacing", spacing),
        ("verification verdicts", verdicts),
        ("demo determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut stdout = std::io::stdout();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(stdout, "{tag} {name}: {detail}");
    }
    if failed > 0 {
        let _ = writeln!(stdout, "{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
