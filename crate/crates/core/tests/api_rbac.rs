use std::sync::Arc;

use tts_core::plant::FaultInjection;
use tts_core::rbac::role_allows;
use tts_core::service::{PlantCommand, SetpointName, SimScenario};
use tts_core::twin::ConveyorInputs;
use tts_core::{
    Api, ApiError, ApiOp, ApiRequest, LedgerQuery, LogicalClock, Role, RuleId, ServiceConfig,
    SpecFile, TwinConfig,
};

fn sample(op: ApiOp) -> ApiRequest {
    let spec = SpecFile::reference();
    match op {
        ApiOp::ValidateSpec => ApiRequest::ValidateSpec { spec },
        ApiOp::UploadSpec => ApiRequest::UploadSpec { spec },
        ApiOp::UploadCalibration => ApiRequest::UploadCalibration {
            calibration: spec.calibration.clone(),
        },
        ApiOp::PlantControl => ApiRequest::PlantControl {
            command: PlantCommand::Start,
        },
        ApiOp::Setpoint => ApiRequest::Setpoint {
            name: SetpointName::V,
            value: 2.0,
        },
        ApiOp::LoadObject => ApiRequest::LoadObject,
        ApiOp::InjectFault => ApiRequest::InjectFault {
            fault: FaultInjection::sensor_offset("Sensor5", 1.0, (0, 1)),
        },
        ApiOp::ClearFaults => ApiRequest::ClearFaults,
        ApiOp::PlantStatus => ApiRequest::PlantStatus,
        ApiOp::RunSim => ApiRequest::RunSim {
            scenario: SimScenario::Conveyor(ConveyorInputs {
                velocity: 2.0,
                loads: vec![0],
            }),
            config: None,
        },
        ApiOp::Replicate => ApiRequest::Replicate {
            trace_ndjson: String::new(),
            calibration: None,
            config: None,
        },
        ApiOp::Tune => ApiRequest::Tune {
            run_id: "run-404".into(),
            config: TwinConfig::reference(),
        },
        ApiOp::GetRun => ApiRequest::GetRun {
            run_id: "run-404".into(),
        },
        ApiOp::ListRuns => ApiRequest::ListRuns,
        ApiOp::RunTrace => ApiRequest::RunTrace {
            run_id: "run-404".into(),
        },
        ApiOp::UpsertRule => ApiRequest::UpsertRule {
            predicate: "(IN_BOUNDS Sensor5 0.0 10.0)".into(),
            association: vec!["Sensor5".into()],
            rule_id: None,
        },
        ApiOp::ListRules => ApiRequest::ListRules,
        ApiOp::RuleHistory => ApiRequest::RuleHistory { rule_id: RuleId(1) },
        ApiOp::LedgerQuery => ApiRequest::LedgerQuery {
            query: LedgerQuery::default(),
        },
        ApiOp::LedgerVerify => ApiRequest::LedgerVerify,
        ApiOp::LedgerExport => ApiRequest::LedgerExport,
        ApiOp::LedgerBlocks => ApiRequest::LedgerBlocks {
            from: 0,
            limit: None,
        },
        ApiOp::LedgerVerifyExport => ApiRequest::LedgerVerifyExport {
            chain_hex: "00".into(),
        },
        ApiOp::Verify => ApiRequest::Verify {
            property: None,
            k: Some(3),
            grid: Some(2),
            config: None,
        },
        ApiOp::Telemetry => ApiRequest::Telemetry {
            after: 0,
            limit: None,
        },
        ApiOp::Incidents => ApiRequest::Incidents {
            after: 0,
            limit: None,
        },
    }
}

fn token(role: Role) -> &'static str {
    match role {
        Role::SecurityAnalyst => "analyst-token",
        Role::PlantOperator => "operator-token",
        Role::Auditor => "auditor-token",
        Role::System => "system-token",
    }
}

#[test]
fn every_role_op_pair_is_decided_by_the_matrix() {
    for role in Role::ALL {
        // Fresh service per role so one role's writes cannot affect another.
        let api = Api::new(
            ServiceConfig::default().with_demo_tokens(),
            SpecFile::reference(),
            Arc::new(LogicalClock::new(0, 1)),
        )
        .unwrap();
        let s = api.login(token(role)).unwrap().session_id;
        for op in ApiOp::ALL {
            let req = sample(op);
            assert_eq!(req.op(), op);
            let before = api.ledger().len();
            let res = api.handle(&s, req);
            let denied = matches!(res, Err(ApiError::Unauthorized(_)));
            let allowed = role_allows(role, op.permission());
            assert_eq!(denied, !allowed, "{role:?} {op:?}: {res:?}");
            if denied {
                assert_eq!(
                    api.ledger().len(),
                    before,
                    "{role:?} {op:?} wrote on denial"
                );
            }
        }
    }
}

#[test]
fn sample_requests_cover_every_op() {
    let ops: Vec<ApiOp> = ApiOp::ALL.iter().map(|&op| sample(op).op()).collect();
    assert_eq!(ops, ApiOp::ALL.to_vec());
}

#[test]
fn read_only_ops_leave_the_chain_alone() {
    let api = Api::new(
        ServiceConfig::default().with_demo_tokens(),
        SpecFile::reference(),
        Arc::new(LogicalClock::new(0, 1)),
    )
    .unwrap();
    let s = api.login("analyst-token").unwrap().session_id;
    for op in ApiOp::ALL.into_iter().filter(|op| !op.is_mutating()) {
        let before = api.ledger().len();
        let _ = api.handle(&s, sample(op));
        assert_eq!(api.ledger().len(), before, "{op:?}");
    }
}
