use std::path::Path;
use std::process::{Command, Output};

use tts_core::ledger::{verify_export, BlockSigner};
use tts_core::TwinConfig;

fn tts(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tts"))
        .args(args)
        .current_dir(dir)
        .env_remove("TTS_CONFIG")
        .env_remove("TTS_SEED")
        .env_remove("TTS_SPEC")
        .env_remove("TTS_TWIN")
        .env_remove("TTS_K")
        .env_remove("TTS_GRID")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn demo_chain(dir: &Path) -> Vec<u8> {
    let o = tts(&["demo", "--out", "d", "--k", "6", "--grid", "2"], dir);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    std::fs::read(dir.join("d/ledger/chain.bin")).unwrap()
}

#[test]
fn validate_reference_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, tts_core::SpecFile::reference().to_json()).unwrap();
    let o = tts(&["validate-spec", "spec.json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("ok"));
}

#[test]
fn dangling_reference_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value =
        serde_json::from_str(&tts_core::SpecFile::reference().to_json()).unwrap();
    v["sensors"][0]["asset_id"] = "PLC404".into();
    std::fs::write(dir.path().join("bad.json"), v.to_string()).unwrap();
    let o = tts(&["validate-spec", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
}

#[test]
fn missing_file_and_bad_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        tts(&["validate-spec", "nope.json"], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(tts(&["verify", "P9"], dir.path()).status.code(), Some(2));
    assert_eq!(tts(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn verify_all_nominal_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let o = tts(
        &[
            "--json", "verify", "all", "--k", "8", "--grid", "2", "--out", "v",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 3);
    for p in ["P1", "P2", "P3"] {
        assert!(dir.path().join(format!("v/{p}.json")).exists());
    }
}

#[test]
fn arm_breach_exits_with_findings() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TwinConfig::reference();
    cfg.tau_t.max = 200.0;
    std::fs::write(
        dir.path().join("twin.json"),
        serde_json::to_string(&cfg).unwrap(),
    )
    .unwrap();
    let o = tts(
        &[
            "--twin",
            "twin.json",
            "run-sim",
            "--out",
            "o",
            "arm",
            "--current",
            "120",
            "--pressure",
            "4",
            "--objects",
            "3",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    let run = std::fs::read_dir(dir.path().join("o"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let incidents: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("incidents.json")).unwrap()).unwrap();
    assert!(!incidents.as_array().unwrap().is_empty());
    assert!(run.join("run.log").exists() && run.join("trace.ndjson").exists());
}

#[test]
fn conveyor_run_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let o = tts(
        &[
            "run-sim",
            "--out",
            "o",
            "conveyor",
            "--velocity",
            "2",
            "--loads",
            "0,20,40",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("Optimal"));
}

#[test]
fn tampered_chain_exits_3_naming_the_block() {
    let dir = tempfile::tempdir().unwrap();
    let mut chain = demo_chain(dir.path());
    std::fs::write(dir.path().join("good.bin"), &chain).unwrap();
    let o = tts(&["ledger", "verify", "good.bin"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("intact"));

    let (_, status) = verify_export(&chain, None).unwrap();
    let last = match status {
        tts_core::ChainStatus::Intact { blocks } => blocks - 1,
        s => panic!("{s}"),
    };
    let n = chain.len();
    chain[n - 10] ^= 0x01;
    std::fs::write(dir.path().join("bad.bin"), &chain).unwrap();
    let o = tts(&["ledger", "verify", "bad.bin"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(
        stdout(&o).contains(&format!("broken at {last}")),
        "{}",
        stdout(&o)
    );
}

#[test]
fn wrong_trusted_key_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let chain = demo_chain(dir.path());
    std::fs::write(dir.path().join("c.bin"), &chain).unwrap();
    let other = hex::encode(
        tts_core::ledger::Ed25519Authority::from_seed(999)
            .verifying_key()
            .as_bytes(),
    );
    let o = tts(
        &["ledger", "verify", "c.bin", "--pubkey", &other],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn ledger_query_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let chain = demo_chain(dir.path());
    std::fs::write(dir.path().join("c.bin"), &chain).unwrap();
    let o = tts(
        &["--json", "ledger", "query", "c.bin", "--rule", "R-5"],
        dir.path(),
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let hits: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(!hits.as_array().unwrap().is_empty());
    let o = tts(
        &["ledger", "export", "c.bin", "--out", "c.json"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("c.json")).unwrap()).unwrap();
    assert!(doc["blocks"].as_array().unwrap().len() > 1);
}
