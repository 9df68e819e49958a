//! Digital-twin security platform core: plant simulator, integrity checks,
//! rules, ledger, twin runtime, bounded verification and the service API.

pub mod canonical;
pub mod demo;
pub mod icm;
pub mod ids;
pub mod ledger;
pub mod plant;
pub mod rbac;
pub mod rules;
pub mod service;
pub mod time;
pub mod twin;
pub mod verify;

pub use canonical::{Canonical, Digest, HashAlgorithm};
pub use icm::{
    consistency_check, CalibrationRecord, EngineeringKnowledge, SpecFile, ValidationReport,
};
pub use ids::{AssetId, EntityId, RuleId, SensorId};
pub use ledger::{ChainStatus, Ledger, LedgerHandle, LedgerQuery};
pub use plant::{
    FaultInjection, Plant, PlantConfig, PlantState, PlantTrace, SensorReading, TraceRecord,
};
pub use rbac::{Permission, Principal, Role};
pub use rules::{Rule, RulePredicate};
pub use service::{Api, ApiError, ApiOp, ApiRequest, ApiResponse, ServiceConfig, SessionContext};
pub use time::{Clock, LogicalClock, SystemClock};
pub use twin::{generate_twin, Incident, Run, RunReport, TwinConfig, TwinInstance};
pub use verify::{PropertyId, Verdict};
