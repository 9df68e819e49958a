//! Control-plane API: sessions, the live plant, twin runs, rules, ledger
//! and verification behind one role-checked surface.
//!
//! Every request goes through [`Api::handle`], which authorizes the
//! session against [`ApiOp::permission`] before touching any state. The
//! HTTP server and the CLI are thin clients of this type.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{json_digest, sha256, HashAlgorithm};
use crate::icm::{
    consistency_check, validate_spec, CalibrationRecord, IcmError, KnowledgeStore,
    ProvenanceBuilder, SpecFile, ValidationReport,
};
use crate::ids::RuleId;
use crate::ledger::{
    verify_export, Block, BlockRef, ChainFileError, ChainStatus, Ed25519Authority, EntryPayload,
    Ledger, LedgerError, LedgerHandle, LedgerHit, LedgerQuery, SpecRecord,
};
use crate::plant::{
    ActuatorAction, ActuatorCommand, ActuatorKind, AssetStatus, FaultInjection, Plant, PlantState,
    TraceRecord,
};
use crate::rbac::{Permission, Principal, Role, Unauthorized};
use crate::rules::{Rule, RuleError, RulePredicate};
use crate::time::{Clock, Millis};
use crate::twin::{
    generate_twin, Action, ArmInputs, ConveyorInputs, Incident, IncidentKind, Outcome, Run,
    RunObserver, RunReport, Severity, TwinConfig, TwinError, TwinInstance, ViolatedRule,
};
use crate::verify::{
    bounded_explore, ExploreModel, PropertyId, PropertySpec, Verdict, VerifyError, DEFAULT_GRID,
    DEFAULT_K,
};

/// Entity id for incidents and records the service writes on its own.
pub const SERVICE_ENTITY: &str = "service";
/// Run id under which live-plant incidents are numbered.
pub const LIVE_RUN: &str = "live";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenGrant {
    pub token: String,
    pub entity_id: String,
    pub roles: Vec<Role>,
}

fn default_ttl() -> u64 {
    8 * 3600 * 1000
}

fn default_capacity() -> usize {
    1024
}

fn default_step_rate() -> f64 {
    10.0
}

fn default_ledger_seed() -> u64 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default)]
    pub tokens: Vec<TokenGrant>,
    #[serde(default = "default_ttl")]
    pub session_ttl_ms: u64,
    /// Telemetry messages kept for late subscribers; oldest dropped first.
    #[serde(default = "default_capacity")]
    pub telemetry_capacity: usize,
    #[serde(default = "default_ledger_seed")]
    pub ledger_seed: u64,
    #[serde(default)]
    pub hash: HashAlgorithm,
    #[serde(default = "TwinConfig::reference")]
    pub twin: TwinConfig,
    #[serde(default = "default_step_rate")]
    pub step_rate_hz: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            tokens: Vec::new(),
            session_ttl_ms: default_ttl(),
            telemetry_capacity: default_capacity(),
            ledger_seed: default_ledger_seed(),
            hash: HashAlgorithm::default(),
            twin: TwinConfig::reference(),
            step_rate_hz: default_step_rate(),
        }
    }
}

impl ServiceConfig {
    /// One token per human role plus a system token, for demos and tests.
    pub fn with_demo_tokens(mut self) -> Self {
        self.tokens = vec![
            grant("analyst-token", "E-analyst", Role::SecurityAnalyst),
            grant("operator-token", "E-operator", Role::PlantOperator),
            grant("auditor-token", "E-auditor", Role::Auditor),
            grant("system-token", "E-system", Role::System),
        ];
        self
    }
}

fn grant(token: &str, entity: &str, role: Role) -> TokenGrant {
    TokenGrant {
        token: token.into(),
        entity_id: entity.into(),
        roles: vec![role],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionContext {
    pub principal: Principal,
    pub session_id: String,
    pub issued_at: Millis,
    pub expiry: Millis,
}

/// Every operation the API exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiOp {
    ValidateSpec,
    UploadSpec,
    UploadCalibration,
    PlantControl,
    Setpoint,
    LoadObject,
    InjectFault,
    ClearFaults,
    PlantStatus,
    RunSim,
    Replicate,
    Tune,
    GetRun,
    ListRuns,
    RunTrace,
    UpsertRule,
    ListRules,
    RuleHistory,
    LedgerQuery,
    LedgerVerify,
    LedgerExport,
    LedgerBlocks,
    LedgerVerifyExport,
    Verify,
    Telemetry,
    Incidents,
}

impl ApiOp {
    pub const ALL: [ApiOp; 26] = [
        ApiOp::ValidateSpec,
        ApiOp::UploadSpec,
        ApiOp::UploadCalibration,
        ApiOp::PlantControl,
        ApiOp::Setpoint,
        ApiOp::LoadObject,
        ApiOp::InjectFault,
        ApiOp::ClearFaults,
        ApiOp::PlantStatus,
        ApiOp::RunSim,
        ApiOp::Replicate,
        ApiOp::Tune,
        ApiOp::GetRun,
        ApiOp::ListRuns,
        ApiOp::RunTrace,
        ApiOp::UpsertRule,
        ApiOp::ListRules,
        ApiOp::RuleHistory,
        ApiOp::LedgerQuery,
        ApiOp::LedgerVerify,
        ApiOp::LedgerExport,
        ApiOp::LedgerBlocks,
        ApiOp::LedgerVerifyExport,
        ApiOp::Verify,
        ApiOp::Telemetry,
        ApiOp::Incidents,
    ];

    pub fn permission(self) -> Permission {
        use ApiOp::*;
        match self {
            ValidateSpec => Permission::ValidateSpec,
            UploadSpec => Permission::UploadSpec,
            UploadCalibration => Permission::UploadCalibration,
            PlantControl | LoadObject => Permission::ControlPlant,
            Setpoint => Permission::IssueSetpoint,
            InjectFault | ClearFaults => Permission::InjectFault,
            PlantStatus | Telemetry => Permission::ReadTelemetry,
            RunSim => Permission::RunSimulation,
            Replicate => Permission::Replicate,
            Tune => Permission::TuneRun,
            GetRun | ListRuns | RunTrace => Permission::ReadRuns,
            UpsertRule => Permission::UpsertRule,
            ListRules | RuleHistory => Permission::ReadRules,
            LedgerQuery | LedgerExport | LedgerBlocks => Permission::QueryLedger,
            LedgerVerify | LedgerVerifyExport => Permission::VerifyLedger,
            Verify => Permission::RunVerification,
            Incidents => Permission::ReadIncidents,
        }
    }

    /// Whether the operation changes service, plant or ledger state.
    pub fn is_mutating(self) -> bool {
        use ApiOp::*;
        matches!(
            self,
            UploadSpec
                | UploadCalibration
                | PlantControl
                | Setpoint
                | LoadObject
                | InjectFault
                | ClearFaults
                | RunSim
                | Replicate
                | Tune
                | UpsertRule
                | Verify
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "value", rename_all = "snake_case")]
pub enum PlantCommand {
    Start,
    Stop,
    StepRate(f64),
}

/// Setpoint names: V (belt velocity), C (weld current), P (weld pressure).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetpointName {
    V,
    C,
    P,
}

impl SetpointName {
    fn setting(self) -> &'static str {
        match self {
            SetpointName::V => "tau_v",
            SetpointName::C => "tau_c",
            SetpointName::P => "tau_p",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum SimScenario {
    Conveyor(ConveyorInputs),
    Arm(ArmInputs),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ApiRequest {
    ValidateSpec {
        spec: SpecFile,
    },
    UploadSpec {
        spec: SpecFile,
    },
    UploadCalibration {
        calibration: Vec<CalibrationRecord>,
    },
    PlantControl {
        #[serde(flatten)]
        command: PlantCommand,
    },
    Setpoint {
        name: SetpointName,
        value: f64,
    },
    LoadObject,
    InjectFault {
        fault: FaultInjection,
    },
    ClearFaults,
    PlantStatus,
    RunSim {
        #[serde(flatten)]
        scenario: SimScenario,
        #[serde(default)]
        config: Option<TwinConfig>,
    },
    Replicate {
        trace_ndjson: String,
        #[serde(default)]
        calibration: Option<Vec<CalibrationRecord>>,
        #[serde(default)]
        config: Option<TwinConfig>,
    },
    Tune {
        run_id: String,
        config: TwinConfig,
    },
    GetRun {
        run_id: String,
    },
    ListRuns,
    RunTrace {
        run_id: String,
    },
    UpsertRule {
        predicate: String,
        association: Vec<String>,
        #[serde(default)]
        rule_id: Option<RuleId>,
    },
    ListRules,
    RuleHistory {
        rule_id: RuleId,
    },
    LedgerQuery {
        #[serde(flatten)]
        query: LedgerQuery,
    },
    LedgerVerify,
    LedgerExport,
    LedgerBlocks {
        #[serde(default)]
        from: u64,
        #[serde(default)]
        limit: Option<u64>,
    },
    LedgerVerifyExport {
        /// Hex-encoded chain file.
        chain_hex: String,
    },
    Verify {
        #[serde(default)]
        property: Option<PropertyId>,
        #[serde(default)]
        k: Option<u64>,
        #[serde(default)]
        grid: Option<usize>,
        #[serde(default)]
        config: Option<TwinConfig>,
    },
    Telemetry {
        #[serde(default)]
        after: u64,
        #[serde(default)]
        limit: Option<usize>,
    },
    Incidents {
        #[serde(default)]
        after: u64,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl ApiRequest {
    pub fn op(&self) -> ApiOp {
        match self {
            ApiRequest::ValidateSpec { .. } => ApiOp::ValidateSpec,
            ApiRequest::UploadSpec { .. } => ApiOp::UploadSpec,
            ApiRequest::UploadCalibration { .. } => ApiOp::UploadCalibration,
            ApiRequest::PlantControl { .. } => ApiOp::PlantControl,
            ApiRequest::Setpoint { .. } => ApiOp::Setpoint,
            ApiRequest::LoadObject => ApiOp::LoadObject,
            ApiRequest::InjectFault { .. } => ApiOp::InjectFault,
            ApiRequest::ClearFaults => ApiOp::ClearFaults,
            ApiRequest::PlantStatus => ApiOp::PlantStatus,
            ApiRequest::RunSim { .. } => ApiOp::RunSim,
            ApiRequest::Replicate { .. } => ApiOp::Replicate,
            ApiRequest::Tune { .. } => ApiOp::Tune,
            ApiRequest::GetRun { .. } => ApiOp::GetRun,
            ApiRequest::ListRuns => ApiOp::ListRuns,
            ApiRequest::RunTrace { .. } => ApiOp::RunTrace,
            ApiRequest::UpsertRule { .. } => ApiOp::UpsertRule,
            ApiRequest::ListRules => ApiOp::ListRules,
            ApiRequest::RuleHistory { .. } => ApiOp::RuleHistory,
            ApiRequest::LedgerQuery { .. } => ApiOp::LedgerQuery,
            ApiRequest::LedgerVerify => ApiOp::LedgerVerify,
            ApiRequest::LedgerExport => ApiOp::LedgerExport,
            ApiRequest::LedgerBlocks { .. } => ApiOp::LedgerBlocks,
            ApiRequest::LedgerVerifyExport { .. } => ApiOp::LedgerVerifyExport,
            ApiRequest::Verify { .. } => ApiOp::Verify,
            ApiRequest::Telemetry { .. } => ApiOp::Telemetry,
            ApiRequest::Incidents { .. } => ApiOp::Incidents,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecUpload {
    pub block: BlockRef,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointAck {
    pub name: SetpointName,
    pub value: f64,
    /// First tick whose telemetry reflects the setpoint.
    pub effective_tick: u64,
    pub issued_by: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantStatus {
    pub running: bool,
    pub step_rate_hz: f64,
    pub tick: u64,
    pub motor_on: bool,
    pub velocity_setpoint: f64,
    pub current: f64,
    pub pressure: f64,
    pub objects_on_belt: usize,
    pub objects_welded: u64,
    pub faults: Vec<FaultInjection>,
    pub config: TwinConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_run: Option<String>,
    pub outcome: Outcome,
    pub incidents: usize,
    pub ticks: u64,
}

impl From<&RunReport> for RunSummary {
    fn from(r: &RunReport) -> Self {
        Self {
            run_id: r.run_id.clone(),
            parent_run: r.parent_run.clone(),
            outcome: r.outcome,
            incidents: r.incidents.len(),
            ticks: r.ticks,
        }
    }
}

/// One telemetry message; `seq` is global and strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMessage {
    pub seq: u64,
    pub record: TraceRecord,
    pub velocity_setpoint: f64,
    pub current: f64,
    pub pressure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentMessage {
    pub seq: u64,
    pub incident: Incident,
}

/// A page of a stream. `first_available` tells a subscriber whether
/// messages it has not seen were dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamPage<T> {
    pub first_available: u64,
    pub latest: u64,
    pub messages: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body", rename_all = "snake_case")]
pub enum ApiResponse {
    Validation(ValidationReport),
    SpecUploaded(SpecUpload),
    Block(BlockRef),
    Plant(PlantStatus),
    Setpoint(SetpointAck),
    Run(Box<RunReport>),
    Runs(Vec<RunSummary>),
    Trace { run_id: String, ndjson: String },
    Rule(Rule),
    Rules(Vec<Rule>),
    Hits(Vec<LedgerHit>),
    Chain(ChainStatus),
    Export { chain_hex: String },
    Blocks(Vec<Block>),
    Verdicts(Vec<Verdict>),
    Telemetry(StreamPage<TelemetryMessage>),
    Incidents(StreamPage<IncidentMessage>),
    Ok,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApiError {
    #[error("unknown session or token")]
    Unauthenticated,
    #[error("session expired")]
    Expired,
    #[error(transparent)]
    Unauthorized(#[from] Unauthorized),
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("invalid specification")]
    InvalidSpec(ValidationReport),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    ChainFile(#[from] ChainFileError),
}

impl From<IcmError> for ApiError {
    fn from(e: IcmError) -> Self {
        match e {
            IcmError::Unauthorized(u) => ApiError::Unauthorized(u),
            other => ApiError::ValidationFailed(other.to_string()),
        }
    }
}

impl ApiError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Unauthenticated => "unauthenticated",
            ApiError::Expired => "expired",
            ApiError::Unauthorized(_) => "unauthorized",
            ApiError::ValidationFailed(_) | ApiError::InvalidSpec(_) => "validation_failed",
            ApiError::NotFound(_) => "not_found",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Twin(TwinError::InvalidSpec(_) | TwinError::ConfigInvalid(_)) => {
                "validation_failed"
            }
            ApiError::Twin(
                TwinError::NotTunable(_) | TwinError::TraceParse(_) | TwinError::CalibrationGap(_),
            ) => "bad_request",
            ApiError::Twin(TwinError::Rule(RuleError::Unauthorized(_)))
            | ApiError::Rule(RuleError::Unauthorized(_))
            | ApiError::Ledger(LedgerError::Unauthorized(_)) => "unauthorized",
            ApiError::Rule(RuleError::UnknownRule(_)) => "not_found",
            ApiError::Rule(_) => "validation_failed",
            ApiError::Verify(VerifyError::InvalidBound) => "bad_request",
            ApiError::ChainFile(_) => "bad_request",
            ApiError::Twin(_) | ApiError::Verify(_) | ApiError::Ledger(_) => "internal",
        }
    }
}

struct LivePlant {
    plant: Plant,
    state: PlantState,
    config: TwinConfig,
    pending: Vec<ActuatorCommand>,
    pending_load: bool,
    faults: Vec<FaultInjection>,
    running: bool,
    step_rate_hz: f64,
    incident_seq: u64,
    /// Sensors currently failing the consistency check.
    failing: BTreeMap<String, bool>,
}

impl LivePlant {
    fn new(twin: &TwinInstance, config: &TwinConfig, step_rate_hz: f64) -> Result<Self, TwinError> {
        let plant = twin.plant(config)?;
        let state = plant.initial_state(config.seed);
        Ok(Self {
            plant,
            state,
            config: config.clone(),
            pending: Vec::new(),
            pending_load: false,
            faults: Vec::new(),
            running: false,
            step_rate_hz,
            incident_seq: 0,
            failing: BTreeMap::new(),
        })
    }

    fn status(&self) -> PlantStatus {
        PlantStatus {
            running: self.running,
            step_rate_hz: self.step_rate_hz,
            tick: self.state.tick,
            motor_on: self.state.motor_on,
            velocity_setpoint: self.state.velocity_setpoint,
            current: self.state.arm.current,
            pressure: self.state.arm.pressure,
            objects_on_belt: self.state.belt_objects.len(),
            objects_welded: self.state.arm.objects_welded,
            faults: self.faults.clone(),
            config: self.config.clone(),
        }
    }

    fn actuator(&self, kind: ActuatorKind) -> Result<String, ApiError> {
        self.plant
            .actuator_of_kind(kind)
            .map(|a| a.actuator_id.to_string())
            .ok_or_else(|| ApiError::NotFound(format!("{kind:?} actuator")))
    }

    #[allow(clippy::too_many_arguments)]
    fn next_incident(
        &mut self,
        tick: u64,
        kind: IncidentKind,
        rule: ViolatedRule,
        actors: Vec<String>,
        observed: BTreeMap<String, f64>,
        severity: Severity,
        action: Action,
    ) -> Incident {
        self.incident_seq += 1;
        let seq = self.incident_seq;
        Incident {
            incident_id: format!("{LIVE_RUN}/inc-{seq}"),
            run_id: LIVE_RUN.into(),
            seq,
            tick,
            kind,
            violated_rule: rule,
            actor_ids: actors,
            observed,
            severity,
            action_taken: action,
        }
    }
}

struct Streams {
    telemetry: VecDeque<TelemetryMessage>,
    telemetry_seq: u64,
    capacity: usize,
    incidents: Vec<IncidentMessage>,
}

impl Streams {
    fn push_telemetry(&mut self, mut msg: TelemetryMessage) {
        self.telemetry_seq += 1;
        msg.seq = self.telemetry_seq;
        if self.telemetry.len() == self.capacity {
            self.telemetry.pop_front();
        }
        self.telemetry.push_back(msg);
    }

    fn push_incident(&mut self, incident: Incident) {
        let seq = self.incidents.len() as u64 + 1;
        self.incidents.push(IncidentMessage { seq, incident });
    }
}

/// Feeds run incidents into the incident stream as they happen.
struct StreamObserver<'a> {
    streams: &'a Mutex<Streams>,
}

impl RunObserver for StreamObserver<'_> {
    fn on_incident(&mut self, incident: &Incident) {
        self.streams.lock().push_incident(incident.clone());
    }
}

/// The service state shared by all sessions.
pub struct Api {
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
    ledger: LedgerHandle,
    knowledge: KnowledgeStore,
    twin: RwLock<Arc<TwinInstance>>,
    tokens: BTreeMap<String, Principal>,
    sessions: RwLock<BTreeMap<String, SessionContext>>,
    session_seq: Mutex<u64>,
    runs: RwLock<Vec<Arc<Run>>>,
    live: Mutex<LivePlant>,
    streams: Mutex<Streams>,
    principal: Principal,
}

impl std::fmt::Debug for Api {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Api")
            .field("ledger_len", &self.ledger.len())
            .field("runs", &self.runs.read().len())
            .finish_non_exhaustive()
    }
}

impl Api {
    /// Starts a service with an empty ledger, generating the twin from
    /// `spec` (which is not anchored; upload it to record it on the chain).
    pub fn new(
        config: ServiceConfig,
        spec: SpecFile,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ApiError> {
        let ledger = Ledger::new(
            config.hash,
            Box::new(Ed25519Authority::from_seed(config.ledger_seed)),
            clock.clone(),
        )
        .into_handle();
        Self::with_ledger(config, spec, clock, ledger)
    }

    pub fn with_ledger(
        config: ServiceConfig,
        spec: SpecFile,
        clock: Arc<dyn Clock>,
        ledger: LedgerHandle,
    ) -> Result<Self, ApiError> {
        config.twin.validate()?;
        if config.telemetry_capacity == 0 {
            return Err(ApiError::BadRequest(
                "telemetry_capacity must be at least 1".into(),
            ));
        }
        if !(config.step_rate_hz.is_finite() && config.step_rate_hz > 0.0) {
            return Err(ApiError::BadRequest("step_rate_hz must be positive".into()));
        }
        let mut tokens = BTreeMap::new();
        for g in &config.tokens {
            let p = Principal::new(&g.entity_id, g.roles.iter().copied())
                .map_err(ApiError::BadRequest)?;
            tokens.insert(g.token.clone(), p);
        }
        let twin = generate_twin(&spec.engineering(), &spec.domain_knowledge, ledger.clone())?;
        let live = LivePlant::new(&twin, &config.twin, config.step_rate_hz)?;
        Ok(Self {
            clock,
            ledger,
            knowledge: KnowledgeStore::new(spec),
            twin: RwLock::new(Arc::new(twin)),
            tokens,
            sessions: RwLock::new(BTreeMap::new()),
            session_seq: Mutex::new(0),
            runs: RwLock::new(Vec::new()),
            live: Mutex::new(live),
            streams: Mutex::new(Streams {
                telemetry: VecDeque::new(),
                telemetry_seq: 0,
                capacity: config.telemetry_capacity,
                incidents: Vec::new(),
            }),
            principal: Principal::system(SERVICE_ENTITY),
            config,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn ledger(&self) -> &LedgerHandle {
        &self.ledger
    }

    pub fn twin(&self) -> Arc<TwinInstance> {
        self.twin.read().clone()
    }

    pub fn spec(&self) -> Arc<SpecFile> {
        self.knowledge.snapshot()
    }

    pub fn step_rate_hz(&self) -> f64 {
        self.live.lock().step_rate_hz
    }

    /// Exchanges a static token for a session.
    pub fn login(&self, token: &str) -> Result<SessionContext, ApiError> {
        let principal = self
            .tokens
            .get(token)
            .cloned()
            .ok_or(ApiError::Unauthenticated)?;
        let now = self.clock.now();
        let n = {
            let mut seq = self.session_seq.lock();
            *seq += 1;
            *seq
        };
        let mut seed = token.as_bytes().to_vec();
        seed.extend_from_slice(&n.to_be_bytes());
        seed.extend_from_slice(&now.to_be_bytes());
        let ctx = SessionContext {
            principal,
            session_id: sha256(&seed).to_hex()[..32].to_owned(),
            issued_at: now,
            expiry: now.saturating_add(self.config.session_ttl_ms),
        };
        self.sessions
            .write()
            .insert(ctx.session_id.clone(), ctx.clone());
        Ok(ctx)
    }

    pub fn logout(&self, session_id: &str) -> bool {
        self.sessions.write().remove(session_id).is_some()
    }

    /// Resolves a session and checks it may perform `op`.
    pub fn authorize(&self, session_id: &str, op: ApiOp) -> Result<SessionContext, ApiError> {
        let ctx = self
            .sessions
            .read()
            .get(session_id)
            .cloned()
            .ok_or(ApiError::Unauthenticated)?;
        if self.clock.now() >= ctx.expiry {
            self.sessions.write().remove(session_id);
            return Err(ApiError::Expired);
        }
        ctx.principal.require(op.permission())?;
        Ok(ctx)
    }

    pub fn handle(&self, session_id: &str, req: ApiRequest) -> Result<ApiResponse, ApiError> {
        let ctx = self.authorize(session_id, req.op())?;
        let p = &ctx.principal;
        Ok(match req {
            ApiRequest::ValidateSpec { spec } => {
                ApiResponse::Validation(validate_spec(&spec.engineering()))
            }
            ApiRequest::UploadSpec { spec } => {
                ApiResponse::SpecUploaded(self.upload_spec(p, spec)?)
            }
            ApiRequest::UploadCalibration { calibration } => {
                ApiResponse::Block(self.upload_calibration(p, calibration)?)
            }
            ApiRequest::PlantControl { command } => {
                ApiResponse::Plant(self.plant_control(command)?)
            }
            ApiRequest::Setpoint { name, value } => {
                ApiResponse::Setpoint(self.setpoint(p, name, value)?)
            }
            ApiRequest::LoadObject => {
                self.live.lock().pending_load = true;
                ApiResponse::Ok
            }
            ApiRequest::InjectFault { fault } => {
                fault
                    .validate()
                    .map_err(|e| ApiError::ValidationFailed(e.to_string()))?;
                self.live.lock().faults.push(fault);
                ApiResponse::Ok
            }
            ApiRequest::ClearFaults => {
                self.live.lock().faults.clear();
                ApiResponse::Ok
            }
            ApiRequest::PlantStatus => ApiResponse::Plant(self.live.lock().status()),
            ApiRequest::RunSim { scenario, config } => {
                ApiResponse::Run(Box::new(self.run_sim(&scenario, config)?.report.clone()))
            }
            ApiRequest::Replicate {
                trace_ndjson,
                calibration,
                config,
            } => ApiResponse::Run(Box::new(
                self.replicate(&trace_ndjson, calibration, config)?
                    .report
                    .clone(),
            )),
            ApiRequest::Tune { run_id, config } => {
                ApiResponse::Run(Box::new(self.tune(&run_id, &config)?.report.clone()))
            }
            ApiRequest::GetRun { run_id } => {
                ApiResponse::Run(Box::new(self.run(&run_id)?.report.clone()))
            }
            ApiRequest::ListRuns => ApiResponse::Runs(
                self.runs
                    .read()
                    .iter()
                    .map(|r| RunSummary::from(&r.report))
                    .collect(),
            ),
            ApiRequest::RunTrace { run_id } => {
                let run = self.run(&run_id)?;
                ApiResponse::Trace {
                    run_id,
                    ndjson: run.trace.to_ndjson(),
                }
            }
            ApiRequest::UpsertRule {
                predicate,
                association,
                rule_id,
            } => ApiResponse::Rule(self.upsert_rule(p, &predicate, association, rule_id)?),
            ApiRequest::ListRules => ApiResponse::Rules(self.ledger.current_rules()),
            ApiRequest::RuleHistory { rule_id } => {
                let h = self.ledger.rule_history(rule_id);
                if h.is_empty() {
                    return Err(ApiError::NotFound(rule_id.to_string()));
                }
                ApiResponse::Rules(h)
            }
            ApiRequest::LedgerQuery { query } => ApiResponse::Hits(self.ledger.query(&query)),
            ApiRequest::LedgerVerify => ApiResponse::Chain(self.ledger.verify_chain()),
            ApiRequest::LedgerExport => ApiResponse::Export {
                chain_hex: hex::encode(self.ledger.export()),
            },
            ApiRequest::LedgerBlocks { from, limit } => {
                let blocks = self.ledger.blocks();
                let limit = limit.unwrap_or(u64::MAX);
                ApiResponse::Blocks(
                    blocks
                        .into_iter()
                        .filter(|b| b.index >= from)
                        .take(limit.min(usize::MAX as u64) as usize)
                        .collect(),
                )
            }
            ApiRequest::LedgerVerifyExport { chain_hex } => {
                let bytes = hex::decode(chain_hex.trim())
                    .map_err(|e| ApiError::BadRequest(e.to_string()))?;
                let (_, status) = verify_export(&bytes, Some(&self.ledger.verifying_key()))?;
                ApiResponse::Chain(status)
            }
            ApiRequest::Verify {
                property,
                k,
                grid,
                config,
            } => ApiResponse::Verdicts(self.verify(property, k, grid, config)?),
            ApiRequest::Telemetry { after, limit } => {
                ApiResponse::Telemetry(self.telemetry_since(after, limit))
            }
            ApiRequest::Incidents { after, limit } => {
                ApiResponse::Incidents(self.incidents_since(after, limit))
            }
        })
    }

    fn upload_spec(&self, author: &Principal, spec: SpecFile) -> Result<SpecUpload, ApiError> {
        let ek = spec.engineering();
        let report = validate_spec(&ek);
        if !report.is_empty() {
            return Err(ApiError::InvalidSpec(report));
        }
        for c in &spec.calibration {
            if ek.sensor(c.sensor_id.as_str()).is_none() {
                return Err(ApiError::ValidationFailed(format!(
                    "calibration for unknown sensor {}",
                    c.sensor_id
                )));
            }
        }
        let now = self.clock.now();
        let builder = ProvenanceBuilder::new(&ek);
        let mut payloads = vec![EntryPayload::SpecEntry(SpecRecord::Engineering {
            digest: json_digest(&ek),
            assets: ek.devices.iter().map(|d| d.asset_id.clone()).collect(),
            sensors: ek.sensors.iter().map(|s| s.sensor_id.clone()).collect(),
        })];
        for s in &ek.sensors {
            let rec =
                builder.engineering(author, s.asset_id.as_str(), s.sensor_id.as_str(), now)?;
            payloads.push(EntryPayload::ProvenanceEntry(rec));
        }
        for dk in &spec.domain_knowledge {
            payloads.push(EntryPayload::SpecEntry(SpecRecord::Domain {
                asset_id: dk.asset_id.clone(),
                digest: json_digest(&dk.history),
            }));
            payloads.push(EntryPayload::ProvenanceEntry(
                builder.domain(author, dk, now)?,
            ));
        }
        for c in &spec.calibration {
            payloads.push(EntryPayload::SpecEntry(SpecRecord::Calibration(c.clone())));
        }
        let block = self.ledger.append(&payloads, author)?;
        self.knowledge.update(|s| *s = spec);
        let warnings = self.regenerate()?;
        Ok(SpecUpload { block, warnings })
    }

    fn upload_calibration(
        &self,
        author: &Principal,
        cal: Vec<CalibrationRecord>,
    ) -> Result<BlockRef, ApiError> {
        if cal.is_empty() {
            return Err(ApiError::BadRequest("no calibration records".into()));
        }
        let spec = self.knowledge.snapshot();
        for c in &cal {
            c.validate()?;
            if spec.sensors.iter().all(|s| s.sensor_id != c.sensor_id) {
                return Err(ApiError::ValidationFailed(format!(
                    "unknown sensor {}",
                    c.sensor_id
                )));
            }
        }
        let payloads: Vec<_> = cal
            .iter()
            .map(|c| EntryPayload::SpecEntry(SpecRecord::Calibration(c.clone())))
            .collect();
        let block = self.ledger.append(&payloads, author)?;
        self.knowledge.update(|s| {
            for c in cal {
                s.calibration.retain(|x| x.sensor_id != c.sensor_id);
                s.calibration.push(c);
            }
        });
        self.regenerate()?;
        Ok(block)
    }

    /// Rebuilds the twin from the current knowledge and ledger. Run
    /// numbering continues and the live plant keeps its state.
    fn regenerate(&self) -> Result<Vec<String>, ApiError> {
        let spec = self.knowledge.snapshot();
        let mut guard = self.twin.write();
        let started = guard.runs_started();
        let twin = generate_twin(
            &spec.engineering(),
            &spec.domain_knowledge,
            self.ledger.clone(),
        )?
        .resume_run_numbering(started);
        let warnings = twin.warnings().to_vec();
        let plant = twin.plant(&self.config.twin)?;
        {
            let mut live = self.live.lock();
            live.plant = plant;
        }
        *guard = Arc::new(twin);
        Ok(warnings)
    }

    fn plant_control(&self, command: PlantCommand) -> Result<PlantStatus, ApiError> {
        let mut live = self.live.lock();
        match command {
            PlantCommand::Start => {
                let conveyor = live.actuator(ActuatorKind::Conveyor)?;
                let arm = live.actuator(ActuatorKind::WeldingArm)?;
                live.running = true;
                live.pending
                    .push(ActuatorCommand::new(&conveyor, ActuatorAction::Power(true)));
                live.pending
                    .push(ActuatorCommand::new(&arm, ActuatorAction::Power(true)));
            }
            PlantCommand::Stop => {
                let conveyor = live.actuator(ActuatorKind::Conveyor)?;
                let arm = live.actuator(ActuatorKind::WeldingArm)?;
                live.pending.push(ActuatorCommand::new(
                    &conveyor,
                    ActuatorAction::Power(false),
                ));
                live.pending
                    .push(ActuatorCommand::new(&arm, ActuatorAction::Power(false)));
                live.running = false;
                // The power-down still has to be applied.
                Self::step_live(&mut live, &self.twin(), &self.streams, 1)?;
            }
            PlantCommand::StepRate(hz) => {
                if !(hz.is_finite() && hz > 0.0 && hz <= 1000.0) {
                    return Err(ApiError::ValidationFailed(
                        "step rate must be in (0, 1000] Hz".into(),
                    ));
                }
                live.step_rate_hz = hz;
            }
        }
        Ok(live.status())
    }

    /// Queues a setpoint for the next tick. Values outside the setting's τ
    /// are rejected and raise a live incident naming the caller.
    fn setpoint(
        &self,
        author: &Principal,
        name: SetpointName,
        value: f64,
    ) -> Result<SetpointAck, ApiError> {
        let mut live = self.live.lock();
        let bounds = match name {
            SetpointName::V => live.config.tau_v,
            SetpointName::C => live.config.tau_c,
            SetpointName::P => live.config.tau_p,
        };
        let (kind, action) = match name {
            SetpointName::V => (ActuatorKind::Conveyor, ActuatorAction::Velocity(value)),
            SetpointName::C => (ActuatorKind::WeldingArm, ActuatorAction::Current(value)),
            SetpointName::P => (ActuatorKind::WeldingArm, ActuatorAction::Pressure(value)),
        };
        let actuator = live.actuator(kind)?;
        if !value.is_finite() || !bounds.contains(value) {
            let asset = live
                .plant
                .actuator(&actuator)
                .map(|a| a.asset_id.to_string())
                .unwrap_or_default();
            let tick = live.state.tick;
            let incident = live.next_incident(
                tick,
                IncidentKind::SetpointOutOfBounds,
                ViolatedRule::Setting {
                    name: name.setting().into(),
                },
                vec![author.entity_id().to_string(), asset],
                BTreeMap::from([
                    (format!("{name:?}"), value),
                    ("min".into(), bounds.min),
                    ("max".into(), bounds.max),
                ]),
                Severity::Warning,
                Action::None,
            );
            drop(live);
            self.record_live_incident(incident)?;
            return Err(ApiError::ValidationFailed(format!(
                "{name:?}={value} outside [{}, {}]",
                bounds.min, bounds.max
            )));
        }
        live.pending.push(ActuatorCommand::new(&actuator, action));
        Ok(SetpointAck {
            name,
            value,
            effective_tick: live.state.tick + 1,
            issued_by: author.entity_id().to_string(),
        })
    }

    fn record_live_incident(&self, incident: Incident) -> Result<(), ApiError> {
        self.ledger.append(
            &[EntryPayload::IncidentEntry(incident.to_record(None))],
            &self.principal,
        )?;
        self.streams.lock().push_incident(incident);
        Ok(())
    }

    /// Advances the live plant by `n` ticks if it is running. Each tick
    /// publishes one telemetry message and runs the consistency check on
    /// readings from powered assets. Returns the ticks actually stepped.
    pub fn tick(&self, n: u64) -> Result<u64, ApiError> {
        let mut live = self.live.lock();
        if !live.running {
            return Ok(0);
        }
        let twin = self.twin();
        let incidents = Self::step_live(&mut live, &twin, &self.streams, n)?;
        drop(live);
        for i in incidents {
            self.record_live_incident(i)?;
        }
        Ok(n)
    }

    fn step_live(
        live: &mut LivePlant,
        twin: &TwinInstance,
        streams: &Mutex<Streams>,
        n: u64,
    ) -> Result<Vec<Incident>, ApiError> {
        let mut raised = Vec::new();
        for _ in 0..n {
            if std::mem::take(&mut live.pending_load) {
                if let Ok(s) = live.plant.load_object(&live.state) {
                    live.state = s;
                }
            }
            let cmds = std::mem::take(&mut live.pending);
            live.state = live
                .plant
                .step(&live.state, &cmds, &live.faults, live.config.dt)
                .map_err(TwinError::from)?;
            let record = live.plant.record(&live.state, &live.faults);
            for r in &record.readings {
                let Some(cal) = twin.calibration().get(&r.sensor_id) else {
                    continue;
                };
                let on = record.assets.get(&r.asset_id) == Some(&AssetStatus::On);
                let ok = !on || consistency_check(r, cal).unwrap_or(false);
                let was_failing = live
                    .failing
                    .insert(r.sensor_id.to_string(), !ok)
                    .unwrap_or(false);
                if !ok && !was_failing {
                    let rule = twin
                        .rules()
                        .bounds_rule_for(r.sensor_id.as_str())
                        .map(|r| ViolatedRule::Rule {
                            rule_id: r.rule_id,
                            version: r.version,
                        })
                        .unwrap_or(ViolatedRule::NoMatchingRule);
                    let action = match rule {
                        ViolatedRule::NoMatchingRule => Action::SchedulingService,
                        _ => Action::CalibrationService,
                    };
                    let tick = record.tick;
                    let inc = live.next_incident(
                        tick,
                        IncidentKind::ConsistencyFailure,
                        rule,
                        vec![r.asset_id.to_string(), r.sensor_id.to_string()],
                        BTreeMap::from([
                            (r.sensor_id.to_string(), r.value),
                            ("tau_min".into(), cal.tau_min),
                            ("tau_max".into(), cal.tau_max),
                        ]),
                        Severity::Warning,
                        action,
                    );
                    raised.push(inc);
                }
            }
            streams.lock().push_telemetry(TelemetryMessage {
                seq: 0,
                velocity_setpoint: live.state.velocity_setpoint,
                current: live.state.arm.current,
                pressure: live.state.arm.pressure,
                record,
            });
        }
        Ok(raised)
    }

    fn config_or_default(&self, config: Option<TwinConfig>) -> TwinConfig {
        config.unwrap_or_else(|| self.config.twin.clone())
    }

    fn store(&self, run: Run) -> Arc<Run> {
        let run = Arc::new(run);
        self.runs.write().push(run.clone());
        run
    }

    pub fn run_sim(
        &self,
        scenario: &SimScenario,
        config: Option<TwinConfig>,
    ) -> Result<Arc<Run>, ApiError> {
        let cfg = self.config_or_default(config);
        let twin = self.twin();
        let mut obs = StreamObserver {
            streams: &self.streams,
        };
        let run = match scenario {
            SimScenario::Conveyor(i) => twin.run_conveyor_sim(&cfg, i, &mut obs)?,
            SimScenario::Arm(i) => twin.run_arm_sim(&cfg, i, &mut obs)?,
        };
        Ok(self.store(run))
    }

    /// Replicates an uploaded NDJSON trace. Calibration defaults to the
    /// records bound to the twin, then to the uploaded spec's.
    pub fn replicate(
        &self,
        trace_ndjson: &str,
        calibration: Option<Vec<CalibrationRecord>>,
        config: Option<TwinConfig>,
    ) -> Result<Arc<Run>, ApiError> {
        let cfg = self.config_or_default(config);
        let twin = self.twin();
        let cal = match calibration {
            Some(c) => c,
            None if !twin.calibration().is_empty() => {
                twin.calibration().values().cloned().collect()
            }
            None => self.knowledge.snapshot().calibration.clone(),
        };
        let mut obs = StreamObserver {
            streams: &self.streams,
        };
        let run = twin.replicate_ndjson(trace_ndjson, &cal, &cfg, &mut obs)?;
        Ok(self.store(run))
    }

    pub fn tune(&self, run_id: &str, config: &TwinConfig) -> Result<Arc<Run>, ApiError> {
        let prev = self.run(run_id)?;
        let twin = self.twin();
        let mut obs = StreamObserver {
            streams: &self.streams,
        };
        let run = twin.tune_and_rerun(&prev, config, &mut obs)?;
        Ok(self.store(run))
    }

    pub fn run(&self, run_id: &str) -> Result<Arc<Run>, ApiError> {
        self.runs
            .read()
            .iter()
            .find(|r| r.report.run_id == run_id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(run_id.to_owned()))
    }

    fn upsert_rule(
        &self,
        author: &Principal,
        predicate: &str,
        association: Vec<String>,
        existing: Option<RuleId>,
    ) -> Result<Rule, ApiError> {
        let pred = RulePredicate::parse(predicate)?;
        let twin = self.twin();
        let id =
            twin.rules()
                .upsert_rule(author, pred, association.into_iter().collect(), existing)?;
        self.regenerate()?;
        self.ledger
            .current_rule(id)
            .ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    pub fn verify(
        &self,
        property: Option<PropertyId>,
        k: Option<u64>,
        grid: Option<usize>,
        config: Option<TwinConfig>,
    ) -> Result<Vec<Verdict>, ApiError> {
        let cfg = self.config_or_default(config);
        cfg.validate()?;
        let mut model = ExploreModel::new(cfg);
        model.grid = grid.unwrap_or(DEFAULT_GRID);
        if model.grid == 0 {
            return Err(ApiError::BadRequest("grid must be at least 1".into()));
        }
        let k = k.unwrap_or(DEFAULT_K);
        let props: Vec<PropertyId> = match property {
            Some(p) => vec![p],
            None => PropertyId::ALL.to_vec(),
        };
        props
            .into_iter()
            .map(|id| {
                let spec = PropertySpec::from_config(id, &model.config);
                bounded_explore(&model, k, &spec).map_err(ApiError::from)
            })
            .collect()
    }

    pub fn telemetry_since(
        &self,
        after: u64,
        limit: Option<usize>,
    ) -> StreamPage<TelemetryMessage> {
        let s = self.streams.lock();
        StreamPage {
            first_available: s.telemetry.front().map_or(s.telemetry_seq + 1, |m| m.seq),
            latest: s.telemetry_seq,
            messages: s
                .telemetry
                .iter()
                .filter(|m| m.seq > after)
                .take(limit.unwrap_or(usize::MAX))
                .cloned()
                .collect(),
        }
    }

    pub fn incidents_since(&self, after: u64, limit: Option<usize>) -> StreamPage<IncidentMessage> {
        let s = self.streams.lock();
        let start = (after as usize).min(s.incidents.len());
        StreamPage {
            first_available: 1,
            latest: s.incidents.len() as u64,
            messages: s.incidents[start..]
                .iter()
                .take(limit.unwrap_or(usize::MAX))
                .cloned()
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::LogicalClock;

    fn api() -> Api {
        Api::new(
            ServiceConfig::default().with_demo_tokens(),
            SpecFile::reference(),
            Arc::new(LogicalClock::default()),
        )
        .unwrap()
    }

    fn session(api: &Api, token: &str) -> String {
        api.login(token).unwrap().session_id
    }

    #[test]
    fn operator_setpoint_is_echoed_next_tick() {
        let api = api();
        let op = session(&api, "operator-token");
        api.handle(
            &op,
            ApiRequest::PlantControl {
                command: PlantCommand::Start,
            },
        )
        .unwrap();
        let ack = api
            .handle(
                &op,
                ApiRequest::Setpoint {
                    name: SetpointName::V,
                    value: 3.0,
                },
            )
            .unwrap();
        let ApiResponse::Setpoint(ack) = ack else {
            panic!()
        };
        assert_eq!(ack.issued_by, "E-operator");
        api.tick(1).unwrap();
        let page = api.telemetry_since(0, None);
        let last = page.messages.last().unwrap();
        assert_eq!(last.record.tick, ack.effective_tick);
        assert_eq!(last.velocity_setpoint, 3.0);
    }

    #[test]
    fn out_of_bounds_setpoint_raises_incident() {
        let api = api();
        let op = session(&api, "operator-token");
        let err = api
            .handle(
                &op,
                ApiRequest::Setpoint {
                    name: SetpointName::V,
                    value: 9.0,
                },
            )
            .unwrap_err();
        assert_eq!(err.code(), "validation_failed");
        let inc = api.incidents_since(0, None);
        assert_eq!(inc.messages.len(), 1);
        assert_eq!(
            inc.messages[0].incident.kind,
            IncidentKind::SetpointOutOfBounds
        );
        assert!(inc.messages[0]
            .incident
            .actor_ids
            .contains(&"E-operator".to_owned()));
    }

    #[test]
    fn operator_cannot_upsert_rules() {
        let api = api();
        let op = session(&api, "operator-token");
        let before = api.ledger().len();
        let err = api
            .handle(
                &op,
                ApiRequest::UpsertRule {
                    predicate: "(IN_BOUNDS Sensor1 1.0 5.0)".into(),
                    association: vec!["Sensor1".into()],
                    rule_id: None,
                },
            )
            .unwrap_err();
        assert_eq!(err.code(), "unauthorized");
        assert_eq!(api.ledger().len(), before);
    }

    #[test]
    fn expired_session_rejected() {
        let mut cfg = ServiceConfig::default().with_demo_tokens();
        cfg.session_ttl_ms = 2;
        let api = Api::new(
            cfg,
            SpecFile::reference(),
            Arc::new(LogicalClock::default()),
        )
        .unwrap();
        let s = session(&api, "auditor-token");
        let _ = api.handle(&s, ApiRequest::ListRules);
        assert_eq!(
            api.handle(&s, ApiRequest::ListRules).unwrap_err(),
            ApiError::Expired
        );
    }

    #[test]
    fn unknown_token_and_session() {
        let api = api();
        assert_eq!(api.login("nope").unwrap_err(), ApiError::Unauthenticated);
        assert_eq!(
            api.handle("nope", ApiRequest::ListRuns).unwrap_err(),
            ApiError::Unauthenticated
        );
    }

    #[test]
    fn run_numbering_survives_regeneration() {
        let api = api();
        let a = session(&api, "analyst-token");
        let conv = SimScenario::Conveyor(ConveyorInputs {
            velocity: 2.0,
            loads: vec![0],
        });
        let r1 = api.run_sim(&conv, None).unwrap();
        api.handle(
            &a,
            ApiRequest::UploadSpec {
                spec: SpecFile::reference(),
            },
        )
        .unwrap();
        let r2 = api.run_sim(&conv, None).unwrap();
        assert_ne!(r1.report.run_id, r2.report.run_id);
    }

    #[test]
    fn telemetry_drops_oldest() {
        let mut cfg = ServiceConfig::default().with_demo_tokens();
        cfg.telemetry_capacity = 4;
        let api = Api::new(
            cfg,
            SpecFile::reference(),
            Arc::new(LogicalClock::default()),
        )
        .unwrap();
        let op = session(&api, "operator-token");
        api.handle(
            &op,
            ApiRequest::PlantControl {
                command: PlantCommand::Start,
            },
        )
        .unwrap();
        api.tick(10).unwrap();
        let page = api.telemetry_since(0, None);
        assert_eq!(page.messages.len(), 4);
        assert_eq!(page.first_available, 7);
        assert_eq!(page.latest, 10);
        let seqs: Vec<u64> = page.messages.iter().map(|m| m.seq).collect();
        assert_eq!(seqs, vec![7, 8, 9, 10]);
    }

    #[test]
    fn request_json_shape() {
        let req: ApiRequest =
            serde_json::from_str(r#"{"op":"setpoint","name":"V","value":2.5}"#).unwrap();
        assert_eq!(req.op(), ApiOp::Setpoint);
        let req: ApiRequest =
            serde_json::from_str(r#"{"op":"plant_control","command":"step_rate","value":20.0}"#)
                .unwrap();
        assert_eq!(
            req,
            ApiRequest::PlantControl {
                command: PlantCommand::StepRate(20.0)
            }
        );
    }
}
