//! The reference-scenario walkthrough: spec upload, conveyor and arm runs,
//! a breach tuned away, replication of a clean and a faulty plant trace,
//! verification, and the chain export. Everything runs through [`Api`] on
//! a logical clock, so the same seed gives byte-identical output.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::icm::SpecFile;
use crate::ledger::ChainStatus;
use crate::plant::FaultInjection;
use crate::service::{Api, ApiError, ApiRequest, ApiResponse, ServiceConfig, SimScenario};
use crate::time::LogicalClock;
use crate::twin::{operate_line, ArmInputs, ConveyorInputs, LineSetpoints, Outcome, RunReport};
use crate::verify::{Verdict, DEFAULT_GRID, DEFAULT_K};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoOptions {
    pub seed: u64,
    pub k: u64,
    pub grid: usize,
    /// Length of the recorded plant traces.
    pub pe_ticks: u64,
    /// Tick at which the Sensor5 offset fault switches on.
    pub fault_tick: u64,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            k: DEFAULT_K,
            grid: DEFAULT_GRID,
            pe_ticks: 500,
            fault_tick: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub seed: u64,
    pub runs: Vec<DemoRun>,
    pub verdicts: Vec<(String, String)>,
    pub chain: ChainStatus,
    pub chain_blocks: u64,
    /// Incidents in runs that were expected to be clean.
    pub unexpected_incidents: usize,
    pub any_sat: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRun {
    pub step: String,
    pub run_id: String,
    pub outcome: Outcome,
    pub incidents: usize,
}

/// Demo output: relative file path to contents, plus the summary.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoOutput {
    pub files: BTreeMap<String, Vec<u8>>,
    pub summary: DemoSummary,
}

fn run_of(resp: ApiResponse) -> Result<RunReport, ApiError> {
    match resp {
        ApiResponse::Run(r) => Ok(*r),
        other => Err(ApiError::BadRequest(format!(
            "unexpected response {other:?}"
        ))),
    }
}

fn json(v: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

#[derive(Default)]
struct Collector {
    files: BTreeMap<String, Vec<u8>>,
    runs: Vec<DemoRun>,
    unexpected: usize,
}

impl Collector {
    fn record(
        &mut self,
        step: &str,
        report: &RunReport,
        clean: bool,
        api: &Api,
    ) -> Result<(), ApiError> {
        let dir = format!("runs/{}", report.run_id);
        self.files
            .insert(format!("{dir}/report.json"), json(report));
        self.files
            .insert(format!("{dir}/run.log"), report.log_lines().into_bytes());
        let trace = api.run(&report.run_id)?.trace.to_ndjson();
        self.files
            .insert(format!("{dir}/trace.ndjson"), trace.into_bytes());
        if clean {
            self.unexpected += report.incidents.len();
        }
        self.runs.push(DemoRun {
            step: step.to_owned(),
            run_id: report.run_id.clone(),
            outcome: report.outcome,
            incidents: report.incidents.len(),
        });
        Ok(())
    }
}

pub fn run_demo(opts: &DemoOptions) -> Result<DemoOutput, ApiError> {
    let mut service = ServiceConfig::default().with_demo_tokens();
    service.ledger_seed = opts.seed;
    service.twin.seed = opts.seed;
    let base = service.twin.clone();
    let api = Api::new(
        service,
        SpecFile::reference(),
        Arc::new(LogicalClock::new(1_700_000_000_000, 1)),
    )?;
    let analyst = api.login("analyst-token")?.session_id;
    let mut out = Collector::default();

    api.handle(
        &analyst,
        ApiRequest::UploadSpec {
            spec: SpecFile::reference(),
        },
    )?;

    let conveyor = SimScenario::Conveyor(ConveyorInputs {
        velocity: 2.0,
        loads: (0..5).map(|i| i * 20).collect(),
    });
    let r = run_of(api.handle(
        &analyst,
        ApiRequest::RunSim {
            scenario: conveyor,
            config: None,
        },
    )?)?;
    out.record("conveyor", &r, true, &api)?;

    // A tight temperature limit makes C=120, P=4 breach; the analyst widens
    // it again and reruns.
    let mut tight = base.clone();
    tight.tau_t.max = 200.0;
    let arm = SimScenario::Arm(ArmInputs {
        current: 120.0,
        pressure: 4.0,
        objects: 3,
    });
    let breach = run_of(api.handle(
        &analyst,
        ApiRequest::RunSim {
            scenario: arm,
            config: Some(tight),
        },
    )?)?;
    out.record("arm-breach", &breach, false, &api)?;
    let tuned = run_of(api.handle(
        &analyst,
        ApiRequest::Tune {
            run_id: breach.run_id.clone(),
            config: base.clone(),
        },
    )?)?;
    out.record("arm-tuned", &tuned, true, &api)?;

    let twin = api.twin();
    let plant = twin.plant(&base)?;
    let (clean, _) = operate_line(&plant, &base, LineSetpoints::default(), &[], opts.pe_ticks)
        .map_err(crate::twin::TwinError::from)?;
    let fault = FaultInjection::sensor_offset("Sensor5", 500.0, (opts.fault_tick, opts.pe_ticks));
    let (faulty, _) = operate_line(
        &plant,
        &base,
        LineSetpoints::default(),
        &[fault],
        opts.pe_ticks,
    )
    .map_err(crate::twin::TwinError::from)?;
    let clean_nd = clean.to_ndjson();
    let faulty_nd = faulty.to_ndjson();
    out.files
        .insert("pe/clean.ndjson".into(), clean_nd.clone().into_bytes());
    out.files.insert(
        "pe/sensor5_offset.ndjson".into(),
        faulty_nd.clone().into_bytes(),
    );

    for (step, nd, is_clean) in [
        ("replicate-clean", clean_nd, true),
        ("replicate-fault", faulty_nd, false),
    ] {
        let r = run_of(api.handle(
            &analyst,
            ApiRequest::Replicate {
                trace_ndjson: nd,
                calibration: None,
                config: None,
            },
        )?)?;
        out.record(step, &r, is_clean, &api)?;
    }

    let verdicts: Vec<Verdict> = match api.handle(
        &analyst,
        ApiRequest::Verify {
            property: None,
            k: Some(opts.k),
            grid: Some(opts.grid),
            config: None,
        },
    )? {
        ApiResponse::Verdicts(v) => v,
        other => {
            return Err(ApiError::BadRequest(format!(
                "unexpected response {other:?}"
            )))
        }
    };
    let mut verdict_lines = Vec::new();
    for v in &verdicts {
        let id = v.property.id();
        // Wall-clock time would make the output differ between runs.
        let v = Verdict {
            elapsed_ms: 0,
            ..v.clone()
        };
        out.files.insert(format!("verdicts/{id}.json"), json(&v));
        verdict_lines.push((id.to_string(), format!("{:?}", v.result).to_lowercase()));
    }

    let chain = api.ledger().verify_chain();
    out.files
        .insert("ledger/chain.bin".into(), api.ledger().export());
    let summary = DemoSummary {
        seed: opts.seed,
        runs: out.runs,
        verdicts: verdict_lines,
        chain,
        chain_blocks: api.ledger().len(),
        unexpected_incidents: out.unexpected,
        any_sat: verdicts.iter().any(Verdict::is_sat),
    };
    out.files.insert("summary.json".into(), json(&summary));
    Ok(DemoOutput {
        files: out.files,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_demo_is_deterministic() {
        let opts = DemoOptions {
            k: 12,
            grid: 2,
            pe_ticks: 120,
            fault_tick: 60,
            ..Default::default()
        };
        let a = run_demo(&opts).unwrap();
        let b = run_demo(&opts).unwrap();
        assert_eq!(a.files, b.files);
        assert!(a.summary.chain.is_intact());
        assert_eq!(a.summary.unexpected_incidents, 0, "{:?}", a.summary.runs);
        let fault = a
            .summary
            .runs
            .iter()
            .find(|r| r.step == "replicate-fault")
            .unwrap();
        assert!(fault.incidents > 0);
        assert!(!a.summary.any_sat);
    }
}
