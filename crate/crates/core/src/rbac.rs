//! Principals, roles and the role/permission matrix.
//!
//! The matrix is plain data ([`PERMISSION_MATRIX`]) so the service layer and
//! tests can iterate it.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::EntityId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    SecurityAnalyst,
    PlantOperator,
    Auditor,
    System,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::SecurityAnalyst,
        Role::PlantOperator,
        Role::Auditor,
        Role::System,
    ];
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.to_string() == s)
            .ok_or_else(|| format!("unknown role {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permission {
    UpsertRule,
    WriteProvenance,
    AppendLedger,
    UploadSpec,
    UploadCalibration,
    ValidateSpec,
    ControlPlant,
    IssueSetpoint,
    InjectFault,
    RunSimulation,
    Replicate,
    TuneRun,
    RunVerification,
    ReadRuns,
    ReadRules,
    QueryLedger,
    VerifyLedger,
    ReadTelemetry,
    ReadIncidents,
}

impl Permission {
    pub fn as_str(self) -> &'static str {
        match self {
            Permission::UpsertRule => "upsert_rule",
            Permission::WriteProvenance => "write_provenance",
            Permission::AppendLedger => "append_ledger",
            Permission::UploadSpec => "upload_spec",
            Permission::UploadCalibration => "upload_calibration",
            Permission::ValidateSpec => "validate_spec",
            Permission::ControlPlant => "control_plant",
            Permission::IssueSetpoint => "issue_setpoint",
            Permission::InjectFault => "inject_fault",
            Permission::RunSimulation => "run_simulation",
            Permission::Replicate => "replicate",
            Permission::TuneRun => "tune_run",
            Permission::RunVerification => "run_verification",
            Permission::ReadRuns => "read_runs",
            Permission::ReadRules => "read_rules",
            Permission::QueryLedger => "query_ledger",
            Permission::VerifyLedger => "verify_ledger",
            Permission::ReadTelemetry => "read_telemetry",
            Permission::ReadIncidents => "read_incidents",
        }
    }
}

use Role::{Auditor as AU, PlantOperator as OP, SecurityAnalyst as SA, System as SY};

/// Which roles hold each permission.
pub const PERMISSION_MATRIX: &[(Permission, &[Role])] = &[
    (Permission::UpsertRule, &[SA, SY]),
    (Permission::WriteProvenance, &[SA, SY]),
    (Permission::AppendLedger, &[SA, SY]),
    (Permission::UploadSpec, &[SA, SY]),
    (Permission::UploadCalibration, &[SA, SY]),
    (Permission::ValidateSpec, &[SA, OP, AU, SY]),
    (Permission::ControlPlant, &[OP, SY]),
    (Permission::IssueSetpoint, &[OP, SY]),
    (Permission::InjectFault, &[SA, SY]),
    (Permission::RunSimulation, &[SA, SY]),
    (Permission::Replicate, &[SA, SY]),
    (Permission::TuneRun, &[SA, SY]),
    (Permission::RunVerification, &[SA, SY]),
    (Permission::ReadRuns, &[SA, OP, AU, SY]),
    (Permission::ReadRules, &[SA, OP, AU, SY]),
    (Permission::QueryLedger, &[SA, AU, SY]),
    (Permission::VerifyLedger, &[SA, AU, SY]),
    (Permission::ReadTelemetry, &[SA, OP, AU, SY]),
    (Permission::ReadIncidents, &[SA, OP, AU, SY]),
];

pub fn role_allows(role: Role, permission: Permission) -> bool {
    PERMISSION_MATRIX
        .iter()
        .find(|(p, _)| *p == permission)
        .is_some_and(|(_, roles)| roles.contains(&role))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{entity} is not authorized to {permission}")]
pub struct Unauthorized {
    pub entity: EntityId,
    pub permission: &'static str,
}

/// An accountable entity (E_ID) with a non-empty role set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PrincipalRepr", into = "PrincipalRepr")]
pub struct Principal {
    entity_id: EntityId,
    roles: BTreeSet<Role>,
}

#[derive(Serialize, Deserialize)]
struct PrincipalRepr {
    entity_id: EntityId,
    roles: BTreeSet<Role>,
}

impl TryFrom<PrincipalRepr> for Principal {
    type Error = String;

    fn try_from(r: PrincipalRepr) -> Result<Self, Self::Error> {
        Principal::new(r.entity_id.as_str(), r.roles)
    }
}

impl From<Principal> for PrincipalRepr {
    fn from(p: Principal) -> Self {
        Self {
            entity_id: p.entity_id,
            roles: p.roles,
        }
    }
}

impl Principal {
    pub fn new(entity: &str, roles: impl IntoIterator<Item = Role>) -> Result<Self, String> {
        let roles: BTreeSet<Role> = roles.into_iter().collect();
        if roles.is_empty() {
            return Err(format!("principal {entity} has no roles"));
        }
        if !crate::ids::is_valid_ident(entity) {
            return Err(format!("invalid entity id {entity:?}"));
        }
        Ok(Self {
            entity_id: entity.into(),
            roles,
        })
    }

    /// Single-role principal; panics on an invalid id, so only for literals.
    pub fn with_role(entity: &str, role: Role) -> Self {
        Self::new(entity, [role]).expect("valid principal literal")
    }

    pub fn system(entity: &str) -> Self {
        Self::with_role(entity, Role::System)
    }

    pub fn entity_id(&self) -> &EntityId {
        &self.entity_id
    }

    pub fn roles(&self) -> &BTreeSet<Role> {
        &self.roles
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }

    pub fn can(&self, permission: Permission) -> bool {
        self.roles.iter().any(|r| role_allows(*r, permission))
    }

    pub fn require(&self, permission: Permission) -> Result<(), Unauthorized> {
        if self.can(permission) {
            Ok(())
        } else {
            Err(Unauthorized {
                entity: self.entity_id.clone(),
                permission: permission.as_str(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writer_roles() {
        assert!(role_allows(Role::SecurityAnalyst, Permission::UpsertRule));
        assert!(role_allows(Role::System, Permission::UpsertRule));
        assert!(!role_allows(Role::PlantOperator, Permission::UpsertRule));
        assert!(!role_allows(Role::Auditor, Permission::UpsertRule));
        assert!(role_allows(Role::PlantOperator, Permission::IssueSetpoint));
        assert!(!role_allows(Role::PlantOperator, Permission::InjectFault));
        assert!(!role_allows(Role::Auditor, Permission::AppendLedger));
    }

    #[test]
    fn every_permission_has_a_row() {
        let perms: BTreeSet<_> = PERMISSION_MATRIX.iter().map(|(p, _)| *p).collect();
        assert_eq!(perms.len(), PERMISSION_MATRIX.len());
        assert!(PERMISSION_MATRIX.iter().all(|(_, r)| !r.is_empty()));
    }

    #[test]
    fn principal_requires_roles() {
        assert!(Principal::new("e1", []).is_err());
        let p: Result<Principal, _> = serde_json::from_str(r#"{"entity_id":"e1","roles":[]}"#);
        assert!(p.is_err());
        let p: Principal =
            serde_json::from_str(r#"{"entity_id":"e1","roles":["Auditor"]}"#).unwrap();
        assert!(p.require(Permission::QueryLedger).is_ok());
        assert!(p.require(Permission::UpsertRule).is_err());
    }
}
