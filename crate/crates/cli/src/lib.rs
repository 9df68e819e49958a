//! `tts` command-line front end and HTTP server.
//!
//! Every subcommand drives the same [`tts_core::Api`] the server exposes.

pub mod config;
pub mod server;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tts_core::demo::{run_demo, DemoOptions};
use tts_core::ledger::{query_blocks, read_export, verifying_key_from_hex, EntryKind};
use tts_core::service::{ApiRequest, ApiResponse, SimScenario};
use tts_core::twin::{ArmInputs, ConveyorInputs, Outcome, RunReport};
use tts_core::{
    Api, ApiError, CalibrationRecord, LedgerQuery, LogicalClock, PropertyId, RuleId, Verdict,
};

use crate::config::{load_spec, Overrides, Settings};

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    /// Incidents raised or a property violated.
    Findings = 1,
    Usage = 2,
    LedgerBroken = 3,
    Internal = 4,
}

#[derive(Debug, Parser)]
#[command(name = "tts", version, about = "Digital-twin security platform")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "TTS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[arg(long, global = true, env = "TTS_SEED")]
    pub seed: Option<u64>,
    /// Specification file (JSON); the bundled reference line by default.
    #[arg(long, global = true, env = "TTS_SPEC")]
    pub spec: Option<PathBuf>,
    /// TwinConfig file (TOML, or JSON by extension).
    #[arg(long, global = true, env = "TTS_TWIN")]
    pub twin: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a specification file for reference and structure errors.
    ValidateSpec { file: PathBuf },
    /// Run a virtual-environment simulation.
    RunSim {
        #[command(subcommand)]
        scenario: SimCmd,
        #[arg(long, default_value = "tts-out")]
        out: PathBuf,
    },
    /// Replicate a recorded plant trace (NDJSON) through the twin.
    Replicate {
        trace: PathBuf,
        /// Calibration records (JSON array); the spec's by default.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long, default_value = "tts-out")]
        out: PathBuf,
    },
    /// Bounded verification of the safety properties.
    Verify {
        property: PropertyArg,
        #[command(flatten)]
        bounds: VerifyBounds,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect exported chain files.
    Ledger {
        #[command(subcommand)]
        cmd: LedgerCmd,
    },
    /// Reference-scenario walkthrough writing reports, traces, verdicts and
    /// the chain export.
    Demo {
        #[arg(long, default_value = "demo-out")]
        out: PathBuf,
        #[command(flatten)]
        bounds: VerifyBounds,
    },
    /// Serve the HTTP API and stream.
    Serve {
        #[arg(long, env = "TTS_ADDR")]
        addr: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct VerifyBounds {
    /// Exploration depth in ticks.
    #[arg(long, env = "TTS_K")]
    pub k: Option<u64>,
    /// Setpoint grid points per τ interval.
    #[arg(long, env = "TTS_GRID")]
    pub grid: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum SimCmd {
    Conveyor {
        #[arg(long, default_value_t = 2.0)]
        velocity: f64,
        /// Ticks at which loads are requested.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        loads: Vec<u64>,
    },
    Arm {
        #[arg(long, default_value_t = 100.0)]
        current: f64,
        #[arg(long, default_value_t = 3.0)]
        pressure: f64,
        #[arg(long, default_value_t = 1)]
        objects: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PropertyArg {
    #[value(name = "P1")]
    P1,
    #[value(name = "P2")]
    P2,
    #[value(name = "P3")]
    P3,
    All,
}

#[derive(Debug, Subcommand)]
pub enum LedgerCmd {
    /// Verify a chain file; exit 3 naming the first broken block.
    Verify {
        chain: PathBuf,
        /// Trusted authority key (hex); the file's own key otherwise.
        #[arg(long, env = "TTS_PUBKEY")]
        pubkey: Option<String>,
    },
    /// List entries matching a filter.
    Query {
        chain: PathBuf,
        #[arg(long)]
        kind: Option<EntryKind>,
        #[arg(long)]
        rule: Option<RuleId>,
        #[arg(long)]
        asset: Option<String>,
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
    },
    /// Dump a chain file's blocks as JSON.
    Export {
        chain: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Output sink honoring `--json`.
pub struct Out<'a> {
    json: bool,
    w: &'a mut dyn Write,
}

impl Out<'_> {
    fn emit(&mut self, value: &impl Serialize, text: impl FnOnce() -> String) -> Result<()> {
        if self.json {
            serde_json::to_writer_pretty(&mut *self.w, value)?;
            writeln!(self.w)?;
        } else {
            writeln!(self.w, "{}", text())?;
        }
        Ok(())
    }
}

fn exit_for(e: &anyhow::Error) -> Exit {
    if let Some(api) = e.downcast_ref::<ApiError>() {
        return match api.code() {
            "internal" => Exit::Internal,
            _ => Exit::Usage,
        };
    }
    if e.downcast_ref::<std::io::Error>()
        .is_some_and(|io| io.kind() != std::io::ErrorKind::NotFound)
    {
        return Exit::Internal;
    }
    Exit::Usage
}

/// Runs a parsed command line, writing results to `w` and diagnostics to
/// stderr.
pub fn run(cli: Cli, w: &mut dyn Write) -> Exit {
    let json = cli.json;
    let mut out = Out { json, w };
    match dispatch(cli, &mut out) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_for(&e);
            if json {
                let _ = writeln!(
                    out.w,
                    "{}",
                    serde_json::json!({"error": format!("{e:#}"), "exit": code as i32})
                );
            }
            eprintln!("error: {e:#}");
            code
        }
    }
}

fn dispatch(cli: Cli, out: &mut Out<'_>) -> Result<Exit> {
    let bounds = match &cli.command {
        Command::Verify { bounds, .. } | Command::Demo { bounds, .. } => (bounds.k, bounds.grid),
        _ => (None, None),
    };
    let addr = match &cli.command {
        Command::Serve { addr } => addr.clone(),
        _ => None,
    };
    let settings = Settings::resolve(
        cli.config.as_deref(),
        Overrides {
            seed: cli.seed,
            spec: cli.spec.clone(),
            twin: cli.twin.clone(),
            addr,
            k: bounds.0,
            grid: bounds.1,
        },
    )?;
    match cli.command {
        Command::ValidateSpec { file } => validate_spec(&file, out),
        Command::RunSim { scenario, out: dir } => run_sim(&settings, scenario, &dir, out),
        Command::Replicate {
            trace,
            calibration,
            out: dir,
        } => replicate(&settings, &trace, calibration.as_deref(), &dir, out),
        Command::Verify {
            property, out: dir, ..
        } => verify(&settings, property, dir.as_deref(), out),
        Command::Ledger { cmd } => ledger(cmd, out),
        Command::Demo { out: dir, .. } => demo(&settings, &dir, out),
        Command::Serve { .. } => {
            server::serve_blocking(settings)?;
            Ok(Exit::Ok)
        }
    }
}

/// A local service with the spec uploaded, plus an analyst session.
pub fn local_api(settings: &Settings) -> Result<(Api, String)> {
    let api = Api::new(
        settings.service.clone(),
        settings.spec.clone(),
        Arc::new(LogicalClock::new(0, 1)),
    )?;
    let session = api.login("analyst-token").or_else(|_| {
        let grant = settings
            .service
            .tokens
            .iter()
            .find(|g| g.roles.contains(&tts_core::Role::SecurityAnalyst))
            .context("config grants no SecurityAnalyst token")?;
        api.login(&grant.token).map_err(anyhow::Error::from)
    })?;
    let session = session.session_id;
    api.handle(
        &session,
        ApiRequest::UploadSpec {
            spec: settings.spec.clone(),
        },
    )?;
    Ok((api, session))
}

fn validate_spec(file: &Path, out: &mut Out<'_>) -> Result<Exit> {
    let spec = load_spec(file)?;
    let report = tts_core::icm::validate_spec(&spec.engineering());
    out.emit(&report, || {
        if report.is_empty() {
            format!("{}: ok", file.display())
        } else {
            report
                .findings
                .iter()
                .map(|f| format!("{:?}: {}", f.code, f.message))
                .collect::<Vec<_>>()
                .join("\n")
        }
    })?;
    Ok(if report.is_empty() {
        Exit::Ok
    } else {
        Exit::Usage
    })
}

fn write_run(dir: &Path, report: &RunReport, trace_ndjson: &str) -> Result<()> {
    let dir = dir.join(&report.run_id);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    fs::write(dir.join("run.log"), report.log_lines())?;
    fs::write(dir.join("trace.ndjson"), trace_ndjson)?;
    if !report.incidents.is_empty() {
        fs::write(
            dir.join("incidents.json"),
            serde_json::to_vec_pretty(&report.incidents)?,
        )?;
    }
    Ok(())
}

fn report_text(r: &RunReport, dir: &Path) -> String {
    let mut s = format!(
        "{} outcome={:?} ticks={} o_count={} incidents={} rules_written={}",
        r.run_id,
        r.outcome,
        r.ticks,
        r.o_count,
        r.incidents.len(),
        r.rules_written.len()
    );
    for i in &r.incidents {
        s.push_str(&format!(
            "\n  tick={} {:?} rule={} action={} actors={}",
            i.tick,
            i.kind,
            i.violated_rule,
            i.action_taken.as_str(),
            i.actor_ids.join(",")
        ));
    }
    s.push_str(&format!("\n  written to {}", dir.join(&r.run_id).display()));
    s
}

fn finish_run(api: &Api, report: RunReport, dir: &Path, out: &mut Out<'_>) -> Result<Exit> {
    let trace = api.run(&report.run_id)?.trace.to_ndjson();
    write_run(dir, &report, &trace)?;
    out.emit(&report, || report_text(&report, dir))?;
    Ok(
        if report.incidents.is_empty() && report.outcome != Outcome::Incident {
            Exit::Ok
        } else {
            Exit::Findings
        },
    )
}

fn expect_run(resp: ApiResponse) -> Result<RunReport> {
    match resp {
        ApiResponse::Run(r) => Ok(*r),
        other => anyhow::bail!("unexpected response {other:?}"),
    }
}

fn run_sim(settings: &Settings, cmd: SimCmd, dir: &Path, out: &mut Out<'_>) -> Result<Exit> {
    let (api, s) = local_api(settings)?;
    let scenario = match cmd {
        SimCmd::Conveyor { velocity, loads } => {
            SimScenario::Conveyor(ConveyorInputs { velocity, loads })
        }
        SimCmd::Arm {
            current,
            pressure,
            objects,
        } => SimScenario::Arm(ArmInputs {
            current,
            pressure,
            objects,
        }),
    };
    let report = expect_run(api.handle(
        &s,
        ApiRequest::RunSim {
            scenario,
            config: None,
        },
    )?)?;
    finish_run(&api, report, dir, out)
}

fn replicate(
    settings: &Settings,
    trace: &Path,
    calibration: Option<&Path>,
    dir: &Path,
    out: &mut Out<'_>,
) -> Result<Exit> {
    let (api, s) = local_api(settings)?;
    let ndjson =
        fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display()))?;
    let calibration: Option<Vec<CalibrationRecord>> = match calibration {
        Some(p) => Some(serde_json::from_str(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?),
        None => None,
    };
    let report = expect_run(api.handle(
        &s,
        ApiRequest::Replicate {
            trace_ndjson: ndjson,
            calibration,
            config: None,
        },
    )?)?;
    finish_run(&api, report, dir, out)
}

fn verify(
    settings: &Settings,
    property: PropertyArg,
    dir: Option<&Path>,
    out: &mut Out<'_>,
) -> Result<Exit> {
    let (api, s) = local_api(settings)?;
    let property = match property {
        PropertyArg::P1 => Some(PropertyId::P1Time),
        PropertyArg::P2 => Some(PropertyId::P2Temperature),
        PropertyArg::P3 => Some(PropertyId::P3Velocity),
        PropertyArg::All => None,
    };
    let verdicts: Vec<Verdict> = match api.handle(
        &s,
        ApiRequest::Verify {
            property,
            k: settings.k,
            grid: settings.grid,
            config: None,
        },
    )? {
        ApiResponse::Verdicts(v) => v,
        other => anyhow::bail!("unexpected response {other:?}"),
    };
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        for v in &verdicts {
            fs::write(
                dir.join(format!("{}.json", v.property.id())),
                serde_json::to_vec_pretty(v)?,
            )?;
        }
    }
    out.emit(&verdicts, || {
        verdicts
            .iter()
            .map(|v| {
                let mut s = format!(
                    "{} {} k={} states={} {}ms",
                    v.property.id(),
                    format!("{:?}", v.result).to_lowercase(),
                    v.bound_k,
                    v.explored_states,
                    v.elapsed_ms
                );
                if let Some(cx) = &v.counterexample {
                    s.push_str(&format!(" counterexample tick={}: {}", cx.tick, cx.reason));
                }
                s
            })
            .collect::<Vec<_>>()
            .join("\n")
    })?;
    Ok(if verdicts.iter().any(Verdict::is_sat) {
        Exit::Findings
    } else {
        Exit::Ok
    })
}

fn ledger(cmd: LedgerCmd, out: &mut Out<'_>) -> Result<Exit> {
    let read = |p: &Path| fs::read(p).with_context(|| format!("reading {}", p.display()));
    match cmd {
        LedgerCmd::Verify { chain, pubkey } => {
            let bytes = read(&chain)?;
            let key = pubkey.as_deref().map(verifying_key_from_hex).transpose()?;
            match tts_core::ledger::verify_export(&bytes, key.as_ref()) {
                Ok((_, status)) => {
                    out.emit(&status, || format!("{}: {status}", chain.display()))?;
                    Ok(if status.is_intact() {
                        Exit::Ok
                    } else {
                        Exit::LedgerBroken
                    })
                }
                Err(e) => {
                    let v = serde_json::json!({"status": "unreadable", "error": e.to_string()});
                    out.emit(&v, || format!("{}: {e}", chain.display()))?;
                    Ok(Exit::LedgerBroken)
                }
            }
        }
        LedgerCmd::Query {
            chain,
            kind,
            rule,
            asset,
            from,
            to,
        } => {
            let bytes = read(&chain)?;
            let (_, blocks, status) = read_export(&bytes, None)?;
            let hits = query_blocks(
                &blocks,
                &LedgerQuery {
                    kind,
                    rule_id: rule,
                    asset_id: asset,
                    from,
                    to,
                },
            );
            out.emit(&hits, || {
                let mut lines: Vec<String> = hits
                    .iter()
                    .map(|h| {
                        format!(
                            "block={} ts={} author={} {:?} {}",
                            h.block_index,
                            h.timestamp,
                            h.author,
                            h.payload.kind(),
                            h.payload_digest.to_hex()
                        )
                    })
                    .collect();
                lines.push(format!("{} hit(s); chain {status}", hits.len()));
                lines.join("\n")
            })?;
            Ok(if status.is_intact() {
                Exit::Ok
            } else {
                Exit::LedgerBroken
            })
        }
        LedgerCmd::Export { chain, out: dest } => {
            let bytes = read(&chain)?;
            let (header, blocks, status) = read_export(&bytes, None)?;
            let doc = serde_json::json!({
                "hash": header.hash,
                "public_key": hex::encode(header.key.as_bytes()),
                "status": status,
                "blocks": blocks,
            });
            let text = serde_json::to_string_pretty(&doc)?;
            match dest {
                Some(p) => {
                    fs::write(&p, &text)?;
                    out.emit(&status, || {
                        format!(
                            "{} blocks written to {}; chain {status}",
                            blocks.len(),
                            p.display()
                        )
                    })?;
                }
                None => writeln!(out.w, "{text}")?,
            }
            Ok(if status.is_intact() {
                Exit::Ok
            } else {
                Exit::LedgerBroken
            })
        }
    }
}

fn demo(settings: &Settings, dir: &Path, out: &mut Out<'_>) -> Result<Exit> {
    let mut opts = DemoOptions {
        seed: settings.seed,
        ..Default::default()
    };
    if let Some(k) = settings.k {
        opts.k = k;
    }
    if let Some(g) = settings.grid {
        opts.grid = g;
    }
    let result = run_demo(&opts)?;
    for (rel, bytes) in &result.files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    let s = &result.summary;
    out.emit(s, || {
        let mut lines: Vec<String> = s
            .runs
            .iter()
            .map(|r| {
                format!(
                    "{:<16} {} {:?} incidents={}",
                    r.step, r.run_id, r.outcome, r.incidents
                )
            })
            .collect();
        for (p, v) in &s.verdicts {
            lines.push(format!("verify {p}: {v}"));
        }
        lines.push(format!("chain: {}", s.chain));
        lines.push(format!("written to {}", dir.display()));
        lines.join("\n")
    })?;
    Ok(if s.unexpected_incidents > 0 || s.any_sat {
        Exit::Findings
    } else if !s.chain.is_intact() {
        Exit::LedgerBroken
    } else {
        Exit::Ok
    })
}
