//! Integrity checking mechanisms: engineering knowledge (EK), domain
//! knowledge (DK), calibration bounds, the bounds consistency check and the
//! four provenance record kinds.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{json_digest, Canonical, DecodeError, Decoder, Digest, Encoder};
use crate::ids::{AssetId, EntityId, ProcessId, RuleId, SensorId};
use crate::plant::{AssetStatus, SensorReading, SensorType};
use crate::rbac::{Permission, Principal, Unauthorized};
use crate::time::Millis;

/// A configuration value in χ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Float(x) => write!(f, "{x:?}"),
            Scalar::Text(s) => f.write_str(s),
        }
    }
}

/// Configuration settings χ: a flat map with sorted keys.
pub type Config = BTreeMap<String, Scalar>;

fn encode_config(enc: &mut Encoder, cfg: &Config) {
    enc.len(cfg.len());
    for (k, v) in cfg {
        enc.str(k);
        match v {
            Scalar::Bool(b) => enc.u8(0).bool(*b),
            Scalar::Int(i) => enc.u8(1).i64(*i),
            Scalar::Float(x) => enc.u8(2).f64(*x),
            Scalar::Text(s) => enc.u8(3).str(s),
        };
    }
}

fn decode_config(dec: &mut Decoder<'_>) -> Result<Config, DecodeError> {
    let n = dec.count(6)?;
    let mut out = Config::new();
    let mut last: Option<String> = None;
    for _ in 0..n {
        let k = dec.str()?;
        if last.as_ref().is_some_and(|l| *l >= k) {
            return Err(DecodeError::Invalid("config key order"));
        }
        let v = match dec.u8()? {
            0 => Scalar::Bool(dec.bool()?),
            1 => Scalar::Int(dec.i64()?),
            2 => Scalar::Float(dec.f64()?),
            3 => Scalar::Text(dec.str()?),
            tag => {
                return Err(DecodeError::UnknownTag {
                    what: "scalar",
                    tag,
                })
            }
        };
        last = Some(k.clone());
        out.insert(k, v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub asset_id: AssetId,
    pub name: String,
    pub device_type: String,
    #[serde(default)]
    pub make: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub standards: Vec<String>,
    /// χ: logical address, channel list, control-logic id and the like.
    #[serde(default)]
    pub config: Config,
}

impl DeviceSpec {
    /// The control-logic id in χ, which names the actuator a PLC drives.
    pub fn control_logic(&self) -> Option<&str> {
        match self.config.get("control_logic") {
            Some(Scalar::Text(s)) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub sensor_id: SensorId,
    pub sensor_type: SensorType,
    pub asset_id: AssetId,
    #[serde(default)]
    pub units: String,
    #[serde(default)]
    pub config: Config,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub process_id: ProcessId,
    /// Ordered station / asset ids.
    pub steps: Vec<String>,
    #[serde(default)]
    pub constraints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineeringKnowledge {
    pub devices: Vec<DeviceSpec>,
    pub sensors: Vec<SensorSpec>,
    pub topology: Vec<Link>,
    #[serde(default)]
    pub processes: Vec<ProcessSpec>,
}

impl EngineeringKnowledge {
    pub fn device(&self, id: &str) -> Option<&DeviceSpec> {
        self.devices.iter().find(|d| d.asset_id == id)
    }

    pub fn sensor(&self, id: &str) -> Option<&SensorSpec> {
        self.sensors.iter().find(|s| s.sensor_id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FindingCode {
    DupId,
    DanglingLink,
    OrphanSensor,
    Disconnected,
    UnknownStep,
    InvalidId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub code: FindingCode,
    pub subject: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn codes(&self) -> Vec<FindingCode> {
        self.findings.iter().map(|f| f.code).collect()
    }
}

/// Lists every violated EK invariant. An empty report means the spec is
/// well-formed.
pub fn validate_spec(ek: &EngineeringKnowledge) -> ValidationReport {
    let mut findings = Vec::new();
    let mut push = |code, subject: &str, message: String| {
        findings.push(Finding {
            code,
            subject: subject.to_owned(),
            message,
        })
    };

    let mut ids: BTreeSet<&str> = BTreeSet::new();
    let all_ids = ek
        .devices
        .iter()
        .map(|d| d.asset_id.as_str())
        .chain(ek.sensors.iter().map(|s| s.sensor_id.as_str()));
    for id in all_ids {
        if !crate::ids::is_valid_ident(id) {
            push(
                FindingCode::InvalidId,
                id,
                format!("{id:?} is not a valid identifier"),
            );
        }
        if !ids.insert(id) {
            push(
                FindingCode::DupId,
                id,
                format!("identifier {id} is declared more than once"),
            );
        }
    }

    let devices: BTreeSet<&str> = ek.devices.iter().map(|d| d.asset_id.as_str()).collect();
    for s in &ek.sensors {
        if !devices.contains(s.asset_id.as_str()) {
            push(
                FindingCode::OrphanSensor,
                s.sensor_id.as_str(),
                format!(
                    "sensor {} is owned by undeclared asset {}",
                    s.sensor_id, s.asset_id
                ),
            );
        }
    }

    let mut adjacency: BTreeMap<&str, Vec<&str>> =
        devices.iter().map(|d| (*d, Vec::new())).collect();
    for link in &ek.topology {
        let mut ok = true;
        for end in [&link.from, &link.to] {
            if !devices.contains(end.as_str()) {
                ok = false;
                push(
                    FindingCode::DanglingLink,
                    end,
                    format!(
                        "link {} -> {} references undeclared device {}",
                        link.from, link.to, end
                    ),
                );
            }
        }
        if ok {
            adjacency
                .get_mut(link.from.as_str())
                .unwrap()
                .push(&link.to);
            adjacency
                .get_mut(link.to.as_str())
                .unwrap()
                .push(&link.from);
        }
    }

    if let Some(start) = devices.iter().next() {
        let mut seen: BTreeSet<&str> = BTreeSet::from([*start]);
        let mut queue = VecDeque::from([*start]);
        while let Some(d) = queue.pop_front() {
            for n in &adjacency[d] {
                if seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        for d in devices.difference(&seen) {
            push(
                FindingCode::Disconnected,
                d,
                format!("device {d} is not reachable from {start} in the topology"),
            );
        }
    }

    for p in &ek.processes {
        for step in &p.steps {
            if !ids.contains(step.as_str()) {
                push(
                    FindingCode::UnknownStep,
                    step,
                    format!(
                        "process {} references undeclared asset {}",
                        p.process_id, step
                    ),
                );
            }
        }
    }

    ValidationReport { findings }
}

/// C&V bounds for one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    pub sensor_id: SensorId,
    pub tau_min: f64,
    pub tau_max: f64,
    #[serde(default)]
    pub calibrated_at: Millis,
    #[serde(default)]
    pub standard_ref: String,
}

impl CalibrationRecord {
    pub fn new(sensor: &str, tau_min: f64, tau_max: f64) -> Result<Self, IcmError> {
        let rec = Self {
            sensor_id: sensor.into(),
            tau_min,
            tau_max,
            calibrated_at: 0,
            standard_ref: String::new(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), IcmError> {
        if !(self.tau_min.is_finite() && self.tau_max.is_finite()) || self.tau_min > self.tau_max {
            return Err(IcmError::InvalidBounds {
                sensor: self.sensor_id.clone(),
                lo: self.tau_min,
                hi: self.tau_max,
            });
        }
        Ok(())
    }
}

impl Canonical for CalibrationRecord {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(self.sensor_id.as_str())
            .f64(self.tau_min)
            .f64(self.tau_max)
            .u64(self.calibrated_at)
            .str(&self.standard_ref);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            sensor_id: dec.str()?.into(),
            tau_min: dec.f64()?,
            tau_max: dec.f64()?,
            calibrated_at: dec.u64()?,
            standard_ref: dec.str()?,
        })
    }
}

/// The bounds consistency check: `tau_min <= value <= tau_max`, both bounds
/// inclusive.
pub fn consistency_check(
    reading: &SensorReading,
    cal: &CalibrationRecord,
) -> Result<bool, IcmError> {
    if reading.sensor_id != cal.sensor_id {
        return Err(IcmError::SensorMismatch {
            reading: reading.sensor_id.clone(),
            calibration: cal.sensor_id.clone(),
        });
    }
    Ok(cal.tau_min <= reading.value && reading.value <= cal.tau_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeSource {
    Engineer,
    SupplyChain,
    Soc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryEntry {
    pub timestamp: Millis,
    /// A^h_ω snapshot.
    pub status: Config,
    /// χ in force at the time.
    #[serde(default)]
    pub config: Config,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainKnowledge {
    pub asset_id: AssetId,
    pub history: Vec<HistoryEntry>,
    pub source: KnowledgeSource,
}

impl DomainKnowledge {
    pub fn validate(&self) -> Result<(), IcmError> {
        if self
            .history
            .windows(2)
            .any(|w| w[1].timestamp < w[0].timestamp)
        {
            return Err(IcmError::HistoryOrder(self.asset_id.clone()));
        }
        Ok(())
    }
}

/// Specification file: EK plus calibration and domain knowledge. Unknown
/// top-level keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    pub devices: Vec<DeviceSpec>,
    pub sensors: Vec<SensorSpec>,
    pub topology: Vec<Link>,
    #[serde(default)]
    pub processes: Vec<ProcessSpec>,
    #[serde(default)]
    pub calibration: Vec<CalibrationRecord>,
    #[serde(default)]
    pub domain_knowledge: Vec<DomainKnowledge>,
}

const REFERENCE_SPEC: &str = include_str!("../data/reference_spec.json");

impl SpecFile {
    pub fn from_json(text: &str) -> Result<Self, IcmError> {
        let spec: SpecFile =
            serde_json::from_str(text).map_err(|e| IcmError::SpecParse(e.to_string()))?;
        for c in &spec.calibration {
            c.validate()?;
        }
        for dk in &spec.domain_knowledge {
            dk.validate()?;
        }
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// The reference assembly-line scenario: PLC1/HMI1 run the conveyor,
    /// PLC2/HMI2 the welding arm, with Sensor1..Sensor5.
    pub fn reference() -> Self {
        Self::from_json(REFERENCE_SPEC).expect("bundled reference spec parses")
    }

    pub fn engineering(&self) -> EngineeringKnowledge {
        EngineeringKnowledge {
            devices: self.devices.clone(),
            sensors: self.sensors.clone(),
            topology: self.topology.clone(),
            processes: self.processes.clone(),
        }
    }

    pub fn calibration_for(&self, sensor: &str) -> Option<&CalibrationRecord> {
        self.calibration.iter().find(|c| c.sensor_id == sensor)
    }
}

/// Read-mostly knowledge store. Writers replace the whole snapshot under a
/// lock; readers hold `Arc` snapshots.
#[derive(Debug, Default)]
pub struct KnowledgeStore {
    inner: RwLock<Arc<SpecFile>>,
}

impl KnowledgeStore {
    pub fn new(spec: SpecFile) -> Self {
        Self {
            inner: RwLock::new(Arc::new(spec)),
        }
    }

    pub fn snapshot(&self) -> Arc<SpecFile> {
        self.inner.read().clone()
    }

    pub fn update(&self, f: impl FnOnce(&mut SpecFile)) -> Arc<SpecFile> {
        let mut guard = self.inner.write();
        let mut next = (**guard).clone();
        f(&mut next);
        *guard = Arc::new(next);
        guard.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProvenanceKind {
    Process,
    EK,
    CV,
    DK,
}

/// Payload of a provenance record. Each variant holds exactly the tuple of
/// its kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum ProvenancePayload {
    /// Who generated or updated a rule, for which asset and sensor, under
    /// which process settings ε.
    Process {
        rule_id: RuleId,
        rule_digest: Digest,
        entity_id: EntityId,
        asset_id: AssetId,
        sensor_id: SensorId,
        settings_digest: Digest,
    },
    /// What configuration χ is defined for a sensor affixed to an asset.
    EK {
        asset_id: AssetId,
        sensor_id: SensorId,
        config: Config,
    },
    /// Which thresholds apply given the asset status and a sensor sample.
    CV {
        asset_id: AssetId,
        asset_status: AssetStatus,
        sensor_id: SensorId,
        reading_digest: Digest,
        tau: (f64, f64),
    },
    /// How an asset behaved under χ.
    DK {
        asset_id: AssetId,
        history_digest: Digest,
        config: Config,
    },
}

impl ProvenancePayload {
    pub fn kind(&self) -> ProvenanceKind {
        match self {
            ProvenancePayload::Process { .. } => ProvenanceKind::Process,
            ProvenancePayload::EK { .. } => ProvenanceKind::EK,
            ProvenancePayload::CV { .. } => ProvenanceKind::CV,
            ProvenancePayload::DK { .. } => ProvenanceKind::DK,
        }
    }

    pub fn asset_id(&self) -> &AssetId {
        match self {
            ProvenancePayload::Process { asset_id, .. }
            | ProvenancePayload::EK { asset_id, .. }
            | ProvenancePayload::CV { asset_id, .. }
            | ProvenancePayload::DK { asset_id, .. } => asset_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceRecord {
    pub payload: ProvenancePayload,
    pub created_at: Millis,
    pub author: EntityId,
}

impl ProvenanceRecord {
    pub fn kind(&self) -> ProvenanceKind {
        self.payload.kind()
    }
}

impl Canonical for ProvenanceRecord {
    fn encode(&self, enc: &mut Encoder) {
        match &self.payload {
            ProvenancePayload::Process {
                rule_id,
                rule_digest,
                entity_id,
                asset_id,
                sensor_id,
                settings_digest,
            } => {
                enc.u8(0)
                    .u64(rule_id.0)
                    .digest(rule_digest)
                    .str(entity_id.as_str())
                    .str(asset_id.as_str())
                    .str(sensor_id.as_str())
                    .digest(settings_digest);
            }
            ProvenancePayload::EK {
                asset_id,
                sensor_id,
                config,
            } => {
                enc.u8(1).str(asset_id.as_str()).str(sensor_id.as_str());
                encode_config(enc, config);
            }
            ProvenancePayload::CV {
                asset_id,
                asset_status,
                sensor_id,
                reading_digest,
                tau,
            } => {
                enc.u8(2)
                    .str(asset_id.as_str())
                    .bool(*asset_status == AssetStatus::On)
                    .str(sensor_id.as_str())
                    .digest(reading_digest)
                    .f64(tau.0)
                    .f64(tau.1);
            }
            ProvenancePayload::DK {
                asset_id,
                history_digest,
                config,
            } => {
                enc.u8(3).str(asset_id.as_str()).digest(history_digest);
                encode_config(enc, config);
            }
        }
        enc.u64(self.created_at).str(self.author.as_str());
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let payload = match dec.u8()? {
            0 => ProvenancePayload::Process {
                rule_id: RuleId(dec.u64()?),
                rule_digest: dec.digest()?,
                entity_id: dec.str()?.into(),
                asset_id: dec.str()?.into(),
                sensor_id: dec.str()?.into(),
                settings_digest: dec.digest()?,
            },
            1 => ProvenancePayload::EK {
                asset_id: dec.str()?.into(),
                sensor_id: dec.str()?.into(),
                config: decode_config(dec)?,
            },
            2 => ProvenancePayload::CV {
                asset_id: dec.str()?.into(),
                asset_status: if dec.bool()? {
                    AssetStatus::On
                } else {
                    AssetStatus::Off
                },
                sensor_id: dec.str()?.into(),
                reading_digest: dec.digest()?,
                tau: (dec.f64()?, dec.f64()?),
            },
            3 => ProvenancePayload::DK {
                asset_id: dec.str()?.into(),
                history_digest: dec.digest()?,
                config: decode_config(dec)?,
            },
            tag => {
                return Err(DecodeError::UnknownTag {
                    what: "provenance kind",
                    tag,
                })
            }
        };
        Ok(Self {
            payload,
            created_at: dec.u64()?,
            author: dec.str()?.into(),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcmError {
    #[error("reading from {reading} checked against calibration for {calibration}")]
    SensorMismatch {
        reading: SensorId,
        calibration: SensorId,
    },
    #[error("invalid bounds for {sensor}: [{lo}, {hi}]")]
    InvalidBounds { sensor: SensorId, lo: f64, hi: f64 },
    #[error("unknown reference {0}")]
    UnknownReference(String),
    #[error(transparent)]
    Unauthorized(#[from] Unauthorized),
    #[error("domain knowledge history for {0} is not time ordered")]
    HistoryOrder(AssetId),
    #[error("specification parse error: {0}")]
    SpecParse(String),
}

/// Builds provenance records, checking references against EK and the
/// author's right to write provenance.
#[derive(Debug, Clone, Copy)]
pub struct ProvenanceBuilder<'a> {
    ek: &'a EngineeringKnowledge,
}

impl<'a> ProvenanceBuilder<'a> {
    pub fn new(ek: &'a EngineeringKnowledge) -> Self {
        Self { ek }
    }

    fn check(&self, author: &Principal, asset: &str, sensor: Option<&str>) -> Result<(), IcmError> {
        author.require(Permission::WriteProvenance)?;
        if self.ek.device(asset).is_none() {
            return Err(IcmError::UnknownReference(asset.to_owned()));
        }
        if let Some(s) = sensor {
            if self.ek.sensor(s).is_none() {
                return Err(IcmError::UnknownReference(s.to_owned()));
            }
        }
        Ok(())
    }

    /// Process provenance: `{R_ID, R_D, E_ID, A_ID, S_ID}` under settings ε.
    /// The rule description and ε are carried as digests.
    #[allow(clippy::too_many_arguments)]
    pub fn process(
        &self,
        author: &Principal,
        rule_id: RuleId,
        rule_text: &str,
        rule_author: &EntityId,
        asset: &str,
        sensor: &str,
        settings: &impl Serialize,
        now: Millis,
    ) -> Result<ProvenanceRecord, IcmError> {
        self.check(author, asset, Some(sensor))?;
        Ok(ProvenanceRecord {
            payload: ProvenancePayload::Process {
                rule_id,
                rule_digest: crate::canonical::sha256(rule_text.as_bytes()),
                entity_id: rule_author.clone(),
                asset_id: asset.into(),
                sensor_id: sensor.into(),
                settings_digest: json_digest(settings),
            },
            created_at: now,
            author: author.entity_id().clone(),
        })
    }

    /// EK provenance `{A_ID, S_ID, χ}`; χ is the sensor's configuration.
    pub fn engineering(
        &self,
        author: &Principal,
        asset: &str,
        sensor: &str,
        now: Millis,
    ) -> Result<ProvenanceRecord, IcmError> {
        self.check(author, asset, Some(sensor))?;
        let s = self.ek.sensor(sensor).expect("checked");
        if s.asset_id != asset {
            return Err(IcmError::UnknownReference(format!("{sensor} on {asset}")));
        }
        let mut config = self.ek.device(asset).expect("checked").config.clone();
        config.extend(s.config.clone());
        Ok(ProvenanceRecord {
            payload: ProvenancePayload::EK {
                asset_id: asset.into(),
                sensor_id: sensor.into(),
                config,
            },
            created_at: now,
            author: author.entity_id().clone(),
        })
    }

    /// C&V provenance `{A_ID, A^c_ω, S_ID, D_{s,t}, τ}`.
    pub fn calibration(
        &self,
        author: &Principal,
        asset_status: AssetStatus,
        reading: &SensorReading,
        cal: &CalibrationRecord,
        now: Millis,
    ) -> Result<ProvenanceRecord, IcmError> {
        self.check(
            author,
            reading.asset_id.as_str(),
            Some(reading.sensor_id.as_str()),
        )?;
        if reading.sensor_id != cal.sensor_id {
            return Err(IcmError::SensorMismatch {
                reading: reading.sensor_id.clone(),
                calibration: cal.sensor_id.clone(),
            });
        }
        Ok(ProvenanceRecord {
            payload: ProvenancePayload::CV {
                asset_id: reading.asset_id.clone(),
                asset_status,
                sensor_id: reading.sensor_id.clone(),
                reading_digest: json_digest(reading),
                tau: (cal.tau_min, cal.tau_max),
            },
            created_at: now,
            author: author.entity_id().clone(),
        })
    }

    /// DK provenance `{A_ID, A^h_ω, χ}`; χ is the configuration in force at
    /// the latest history entry.
    pub fn domain(
        &self,
        author: &Principal,
        dk: &DomainKnowledge,
        now: Millis,
    ) -> Result<ProvenanceRecord, IcmError> {
        self.check(author, dk.asset_id.as_str(), None)?;
        dk.validate()?;
        let config = dk
            .history
            .last()
            .map(|h| h.config.clone())
            .unwrap_or_default();
        Ok(ProvenanceRecord {
            payload: ProvenancePayload::DK {
                asset_id: dk.asset_id.clone(),
                history_digest: json_digest(&dk.history),
                config,
            },
            created_at: now,
            author: author.entity_id().clone(),
        })
    }
}
