//! Permissioned, append-only, signed hash chain for rules, provenance,
//! specification snapshots and incident records.
//!
//! Block body: `index u64 | prev_hash | timestamp u64 | entries | author`.
//! A block's hash covers the body; its Ed25519 signature is over the same
//! body bytes. Timestamps are milliseconds.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

pub use ed25519_dalek::VerifyingKey;
use ed25519_dalek::{Signature, Signer as _, SigningKey};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{Canonical, DecodeError, Decoder, Digest, Encoder, HashAlgorithm};
use crate::icm::{CalibrationRecord, ProvenancePayload, ProvenanceRecord};
use crate::ids::{AssetId, EntityId, RuleId, SensorId};
use crate::rbac::{Permission, Principal, Unauthorized};
use crate::rules::{Rule, RuleError};
use crate::time::{Clock, Millis, SystemClock};
use crate::twin::{Severity, ViolatedRule};

pub const CHAIN_MAGIC: &[u8; 8] = b"TTSCHAIN";
pub const CHAIN_FORMAT_VERSION: u8 = 1;
pub const SIG_ED25519: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntryKind {
    RuleEntry,
    ProvenanceEntry,
    SpecEntry,
    IncidentEntry,
}

impl EntryKind {
    pub fn code(self) -> u8 {
        match self {
            EntryKind::RuleEntry => 1,
            EntryKind::ProvenanceEntry => 2,
            EntryKind::SpecEntry => 3,
            EntryKind::IncidentEntry => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => EntryKind::RuleEntry,
            2 => EntryKind::ProvenanceEntry,
            3 => EntryKind::SpecEntry,
            4 => EntryKind::IncidentEntry,
            _ => return None,
        })
    }

    /// Permission, besides `AppendLedger`, needed to append this kind.
    pub fn permission(self) -> Permission {
        match self {
            EntryKind::RuleEntry => Permission::UpsertRule,
            EntryKind::ProvenanceEntry => Permission::WriteProvenance,
            EntryKind::SpecEntry => Permission::UploadSpec,
            EntryKind::IncidentEntry => Permission::AppendLedger,
        }
    }
}

impl std::str::FromStr for EntryKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rule" | "ruleentry" => Ok(EntryKind::RuleEntry),
            "provenance" | "provenanceentry" => Ok(EntryKind::ProvenanceEntry),
            "spec" | "specentry" => Ok(EntryKind::SpecEntry),
            "incident" | "incidententry" => Ok(EntryKind::IncidentEntry),
            _ => Err(format!("unknown entry kind {s:?}")),
        }
    }
}

/// Specification data on the chain: calibration verbatim, bulky EK and DK
/// documents by digest only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "spec", rename_all = "snake_case")]
pub enum SpecRecord {
    Calibration(CalibrationRecord),
    Engineering {
        digest: Digest,
        assets: Vec<AssetId>,
        sensors: Vec<SensorId>,
    },
    Domain {
        asset_id: AssetId,
        digest: Digest,
    },
}

impl Canonical for SpecRecord {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            SpecRecord::Calibration(c) => {
                enc.u8(0);
                c.encode(enc);
            }
            SpecRecord::Engineering {
                digest,
                assets,
                sensors,
            } => {
                enc.u8(1).digest(digest).len(assets.len());
                for a in assets {
                    enc.str(a.as_str());
                }
                enc.len(sensors.len());
                for s in sensors {
                    enc.str(s.as_str());
                }
            }
            SpecRecord::Domain { asset_id, digest } => {
                enc.u8(2).str(asset_id.as_str()).digest(digest);
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(SpecRecord::Calibration(CalibrationRecord::decode(dec)?)),
            1 => {
                let digest = dec.digest()?;
                let n = dec.count(4)?;
                let assets = (0..n)
                    .map(|_| dec.str().map(AssetId::from))
                    .collect::<Result<_, _>>()?;
                let n = dec.count(4)?;
                let sensors = (0..n)
                    .map(|_| dec.str().map(SensorId::from))
                    .collect::<Result<_, _>>()?;
                Ok(SpecRecord::Engineering {
                    digest,
                    assets,
                    sensors,
                })
            }
            2 => Ok(SpecRecord::Domain {
                asset_id: dec.str()?.into(),
                digest: dec.digest()?,
            }),
            tag => Err(DecodeError::UnknownTag {
                what: "spec record",
                tag,
            }),
        }
    }
}

/// Incident as anchored on the chain. Observed values and trace segments
/// are referenced by digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub incident_id: String,
    pub run_id: String,
    pub tick: u64,
    pub violated_rule: ViolatedRule,
    pub actor_ids: Vec<String>,
    pub severity: Severity,
    pub action_taken: String,
    pub observed_digest: Digest,
    pub trace_digest: Option<Digest>,
}

impl Canonical for IncidentRecord {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.incident_id).str(&self.run_id).u64(self.tick);
        match &self.violated_rule {
            ViolatedRule::NoMatchingRule => {
                enc.u8(0);
            }
            ViolatedRule::Rule { rule_id, version } => {
                enc.u8(1).u64(rule_id.0).u32(*version);
            }
            ViolatedRule::Setting { name } => {
                enc.u8(2).str(name);
            }
        }
        enc.len(self.actor_ids.len());
        for a in &self.actor_ids {
            enc.str(a);
        }
        enc.u8(self.severity.code())
            .str(&self.action_taken)
            .digest(&self.observed_digest);
        match &self.trace_digest {
            Some(d) => {
                enc.u8(1).digest(d);
            }
            None => {
                enc.u8(0);
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let incident_id = dec.str()?;
        let run_id = dec.str()?;
        let tick = dec.u64()?;
        let violated_rule = match dec.u8()? {
            0 => ViolatedRule::NoMatchingRule,
            1 => ViolatedRule::Rule {
                rule_id: RuleId(dec.u64()?),
                version: dec.u32()?,
            },
            2 => ViolatedRule::Setting { name: dec.str()? },
            tag => {
                return Err(DecodeError::UnknownTag {
                    what: "violated rule",
                    tag,
                })
            }
        };
        let n = dec.count(4)?;
        let actor_ids = (0..n).map(|_| dec.str()).collect::<Result<_, _>>()?;
        let sev = dec.u8()?;
        let severity = Severity::from_code(sev).ok_or(DecodeError::UnknownTag {
            what: "severity",
            tag: sev,
        })?;
        let action_taken = dec.str()?;
        let observed_digest = dec.digest()?;
        let trace_digest = match dec.u8()? {
            0 => None,
            1 => Some(dec.digest()?),
            tag => {
                return Err(DecodeError::UnknownTag {
                    what: "trace digest",
                    tag,
                })
            }
        };
        Ok(Self {
            incident_id,
            run_id,
            tick,
            violated_rule,
            actor_ids,
            severity,
            action_taken,
            observed_digest,
            trace_digest,
        })
    }
}

/// Decoded entry payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "record")]
pub enum EntryPayload {
    RuleEntry(Rule),
    ProvenanceEntry(ProvenanceRecord),
    SpecEntry(SpecRecord),
    IncidentEntry(IncidentRecord),
}

impl EntryPayload {
    pub fn kind(&self) -> EntryKind {
        match self {
            EntryPayload::RuleEntry(_) => EntryKind::RuleEntry,
            EntryPayload::ProvenanceEntry(_) => EntryKind::ProvenanceEntry,
            EntryPayload::SpecEntry(_) => EntryKind::SpecEntry,
            EntryPayload::IncidentEntry(_) => EntryKind::IncidentEntry,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            EntryPayload::RuleEntry(r) => r.to_canonical_bytes(),
            EntryPayload::ProvenanceEntry(p) => p.to_canonical_bytes(),
            EntryPayload::SpecEntry(s) => s.to_canonical_bytes(),
            EntryPayload::IncidentEntry(i) => i.to_canonical_bytes(),
        }
    }

    pub fn from_bytes(kind: EntryKind, bytes: &[u8]) -> Result<Self, DecodeError> {
        Ok(match kind {
            EntryKind::RuleEntry => EntryPayload::RuleEntry(Rule::from_canonical_bytes(bytes)?),
            EntryKind::ProvenanceEntry => {
                EntryPayload::ProvenanceEntry(ProvenanceRecord::from_canonical_bytes(bytes)?)
            }
            EntryKind::SpecEntry => {
                EntryPayload::SpecEntry(SpecRecord::from_canonical_bytes(bytes)?)
            }
            EntryKind::IncidentEntry => {
                EntryPayload::IncidentEntry(IncidentRecord::from_canonical_bytes(bytes)?)
            }
        })
    }

    /// Rule ids the entry is about.
    pub fn rule_ids(&self) -> Vec<RuleId> {
        match self {
            EntryPayload::RuleEntry(r) => vec![r.rule_id],
            EntryPayload::ProvenanceEntry(ProvenanceRecord {
                payload: ProvenancePayload::Process { rule_id, .. },
                ..
            }) => vec![*rule_id],
            EntryPayload::IncidentEntry(IncidentRecord {
                violated_rule: ViolatedRule::Rule { rule_id, .. },
                ..
            }) => vec![*rule_id],
            _ => vec![],
        }
    }

    /// Asset or sensor ids the entry is about.
    pub fn subject_ids(&self) -> Vec<String> {
        match self {
            EntryPayload::RuleEntry(r) => r.association.iter().cloned().collect(),
            EntryPayload::ProvenanceEntry(p) => {
                let mut v = vec![p.payload.asset_id().to_string()];
                match &p.payload {
                    ProvenancePayload::Process { sensor_id, .. }
                    | ProvenancePayload::EK { sensor_id, .. }
                    | ProvenancePayload::CV { sensor_id, .. } => v.push(sensor_id.to_string()),
                    ProvenancePayload::DK { .. } => {}
                }
                v
            }
            EntryPayload::SpecEntry(SpecRecord::Calibration(c)) => vec![c.sensor_id.to_string()],
            EntryPayload::SpecEntry(SpecRecord::Engineering {
                assets, sensors, ..
            }) => assets
                .iter()
                .map(|a| a.to_string())
                .chain(sensors.iter().map(|s| s.to_string()))
                .collect(),
            EntryPayload::SpecEntry(SpecRecord::Domain { asset_id, .. }) => {
                vec![asset_id.to_string()]
            }
            EntryPayload::IncidentEntry(i) => i.actor_ids.clone(),
        }
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub kind: EntryKind,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub payload_digest: Digest,
}

impl Entry {
    pub fn new(payload: &EntryPayload, hash: HashAlgorithm) -> Self {
        let bytes = payload.to_bytes();
        Self {
            kind: payload.kind(),
            payload_digest: hash.digest(&bytes),
            payload: bytes,
        }
    }

    pub fn decode_payload(&self) -> Result<EntryPayload, DecodeError> {
        EntryPayload::from_bytes(self.kind, &self.payload)
    }

    fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.kind.code())
            .bytes(&self.payload)
            .digest(&self.payload_digest);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let code = dec.u8()?;
        let kind = EntryKind::from_code(code).ok_or(DecodeError::UnknownTag {
            what: "entry kind",
            tag: code,
        })?;
        Ok(Self {
            kind,
            payload: dec.bytes()?.to_vec(),
            payload_digest: dec.digest()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Digest,
    pub timestamp: Millis,
    pub entries: Vec<Entry>,
    pub author: EntityId,
    #[serde(with = "hex_bytes")]
    pub signature: Vec<u8>,
    pub hash: Digest,
}

impl Block {
    pub fn body_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u64(self.index)
            .digest(&self.prev_hash)
            .u64(self.timestamp)
            .len(self.entries.len());
        for e in &self.entries {
            e.encode(&mut enc);
        }
        enc.str(self.author.as_str());
        enc.finish()
    }

    pub fn compute_hash(&self, hash: HashAlgorithm) -> Digest {
        hash.digest(&self.body_bytes())
    }
}

impl Canonical for Block {
    fn encode(&self, enc: &mut Encoder) {
        enc.raw(&self.body_bytes())
            .digest(&self.hash)
            .bytes(&self.signature);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let index = dec.u64()?;
        let prev_hash = dec.digest()?;
        let timestamp = dec.u64()?;
        let n = dec.count(1 + 4 + 32)?;
        let entries = (0..n)
            .map(|_| Entry::decode(dec))
            .collect::<Result<_, _>>()?;
        let author = dec.str()?.into();
        let hash = dec.digest()?;
        let signature = dec.bytes()?.to_vec();
        Ok(Self {
            index,
            prev_hash,
            timestamp,
            entries,
            author,
            signature,
            hash,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakReason {
    Malformed,
    IndexMismatch,
    EmptyBlock,
    PayloadDigestMismatch,
    SchemaMismatch,
    HashMismatch,
    SignatureInvalid,
    LinkageMismatch,
    TimestampRegression,
}

impl fmt::Display for BreakReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BreakReason::Malformed => "malformed block",
            BreakReason::IndexMismatch => "index mismatch",
            BreakReason::EmptyBlock => "empty block",
            BreakReason::PayloadDigestMismatch => "payload_digest mismatch",
            BreakReason::SchemaMismatch => "payload does not match entry kind",
            BreakReason::HashMismatch => "block hash mismatch",
            BreakReason::SignatureInvalid => "signature invalid",
            BreakReason::LinkageMismatch => "linkage mismatch",
            BreakReason::TimestampRegression => "timestamp regression",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ChainStatus {
    Intact { blocks: u64 },
    Broken { index: u64, reason: BreakReason },
}

impl ChainStatus {
    pub fn is_intact(&self) -> bool {
        matches!(self, ChainStatus::Intact { .. })
    }
}

impl fmt::Display for ChainStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainStatus::Intact { blocks } => write!(f, "intact ({blocks} blocks)"),
            ChainStatus::Broken { index, reason } => write!(f, "broken at {index}: {reason}"),
        }
    }
}

/// Checks one block against its predecessor.
fn check_block(
    i: u64,
    block: &Block,
    prev: Option<&Block>,
    hash: HashAlgorithm,
    key: &VerifyingKey,
) -> Result<(), BreakReason> {
    if block.index != i {
        return Err(BreakReason::IndexMismatch);
    }
    if block.entries.is_empty() {
        return Err(BreakReason::EmptyBlock);
    }
    for e in &block.entries {
        if hash.digest(&e.payload) != e.payload_digest {
            return Err(BreakReason::PayloadDigestMismatch);
        }
        if e.decode_payload().is_err() {
            return Err(BreakReason::SchemaMismatch);
        }
    }
    let body = block.body_bytes();
    if hash.digest(&body) != block.hash {
        return Err(BreakReason::HashMismatch);
    }
    let sig = Signature::from_slice(&block.signature).map_err(|_| BreakReason::SignatureInvalid)?;
    key.verify_strict(&body, &sig)
        .map_err(|_| BreakReason::SignatureInvalid)?;
    let expected_prev = prev.map(|p| p.hash).unwrap_or(Digest::ZERO);
    if block.prev_hash != expected_prev {
        return Err(BreakReason::LinkageMismatch);
    }
    if prev.is_some_and(|p| block.timestamp < p.timestamp) {
        return Err(BreakReason::TimestampRegression);
    }
    Ok(())
}

/// Verifies a block sequence, reporting the first violating index.
pub fn verify_blocks(blocks: &[Block], hash: HashAlgorithm, key: &VerifyingKey) -> ChainStatus {
    for (i, b) in blocks.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| &blocks[j]);
        if let Err(reason) = check_block(i as u64, b, prev, hash, key) {
            return ChainStatus::Broken {
                index: i as u64,
                reason,
            };
        }
    }
    ChainStatus::Intact {
        blocks: blocks.len() as u64,
    }
}

/// Signs block bodies on behalf of the chain authority.
pub trait BlockSigner: Send + Sync {
    fn scheme(&self) -> u8;
    fn verifying_key(&self) -> VerifyingKey;
    fn sign(&self, body: &[u8]) -> Vec<u8>;
}

/// Single Ed25519 authority key.
pub struct Ed25519Authority {
    key: SigningKey,
}

impl Ed25519Authority {
    pub fn from_secret(secret: [u8; 32]) -> Self {
        Self {
            key: SigningKey::from_bytes(&secret),
        }
    }

    /// Deterministic key derived from a seed; for demos and tests.
    pub fn from_seed(seed: u64) -> Self {
        let d = crate::canonical::sha256(
            &[b"tts-ledger-authority".as_slice(), &seed.to_be_bytes()].concat(),
        );
        Self::from_secret(d.0)
    }
}

impl BlockSigner for Ed25519Authority {
    fn scheme(&self) -> u8 {
        SIG_ED25519
    }

    fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    fn sign(&self, body: &[u8]) -> Vec<u8> {
        self.key.sign(body).to_bytes().to_vec()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error(transparent)]
    Unauthorized(#[from] Unauthorized),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainFileError {
    #[error("not a chain file (bad magic)")]
    BadMagic,
    #[error("unsupported chain format version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown hash algorithm code {0}")]
    UnknownHash(u8),
    #[error("unsupported signature scheme {0}")]
    UnknownScheme(u8),
    #[error("bad public key in header")]
    BadKey,
    #[error("chain public key does not match the trusted key")]
    KeyMismatch,
    #[error("chain {0}")]
    Broken(ChainStatus),
}

/// Parses a hex-encoded Ed25519 public key.
pub fn verifying_key_from_hex(s: &str) -> Result<VerifyingKey, ChainFileError> {
    let raw: [u8; 32] = hex::decode(s.trim())
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or(ChainFileError::BadKey)?;
    VerifyingKey::from_bytes(&raw).map_err(|_| ChainFileError::BadKey)
}

/// Header fields of a chain file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainHeader {
    pub hash: HashAlgorithm,
    pub key: VerifyingKey,
}

fn write_header(enc: &mut Encoder, hash: HashAlgorithm, key: &VerifyingKey) {
    enc.raw(CHAIN_MAGIC)
        .u8(CHAIN_FORMAT_VERSION)
        .u8(hash.code())
        .u8(SIG_ED25519)
        .bytes(key.as_bytes());
}

fn read_header(dec: &mut Decoder<'_>) -> Result<ChainHeader, ChainFileError> {
    if dec.take(CHAIN_MAGIC.len()).ok() != Some(CHAIN_MAGIC.as_slice()) {
        return Err(ChainFileError::BadMagic);
    }
    let version = dec.u8().map_err(|_| ChainFileError::BadMagic)?;
    if version != CHAIN_FORMAT_VERSION {
        return Err(ChainFileError::UnsupportedVersion(version));
    }
    let code = dec.u8().map_err(|_| ChainFileError::BadMagic)?;
    let hash = HashAlgorithm::from_code(code).ok_or(ChainFileError::UnknownHash(code))?;
    let scheme = dec.u8().map_err(|_| ChainFileError::BadMagic)?;
    if scheme != SIG_ED25519 {
        return Err(ChainFileError::UnknownScheme(scheme));
    }
    let raw: [u8; 32] = dec
        .bytes()
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or(ChainFileError::BadKey)?;
    let key = VerifyingKey::from_bytes(&raw).map_err(|_| ChainFileError::BadKey)?;
    Ok(ChainHeader { hash, key })
}

/// Parses and verifies an exported chain. Each block is framed by a u32
/// length; a frame that does not decode is reported as malformed at its
/// index.
pub fn verify_export(
    bytes: &[u8],
    trusted: Option<&VerifyingKey>,
) -> Result<(ChainHeader, ChainStatus), ChainFileError> {
    let (header, blocks, err) = parse_export(bytes, trusted)?;
    let status = verify_blocks(&blocks, header.hash, &header.key);
    let status = match (status, err) {
        (ChainStatus::Intact { .. }, Some(index)) => ChainStatus::Broken {
            index,
            reason: BreakReason::Malformed,
        },
        (s, _) => s,
    };
    Ok((header, status))
}

/// Matching entries of `blocks`, in order.
pub fn query_blocks<'a>(
    blocks: impl IntoIterator<Item = &'a Block>,
    q: &LedgerQuery,
) -> Vec<LedgerHit> {
    let mut out = Vec::new();
    for b in blocks {
        if q.from.is_some_and(|t| b.timestamp < t) || q.to.is_some_and(|t| b.timestamp > t) {
            continue;
        }
        for e in &b.entries {
            if q.kind.is_some_and(|k| k != e.kind) {
                continue;
            }
            let Ok(payload) = e.decode_payload() else {
                continue;
            };
            if q.rule_id
                .is_some_and(|id| !payload.rule_ids().contains(&id))
            {
                continue;
            }
            if let Some(a) = &q.asset_id {
                if !payload.subject_ids().iter().any(|s| s == a) {
                    continue;
                }
            }
            out.push(LedgerHit {
                block_index: b.index,
                timestamp: b.timestamp,
                author: b.author.clone(),
                payload_digest: e.payload_digest,
                payload,
            });
        }
    }
    out
}

/// Parses an exported chain without judging it: the header, every block
/// that decodes, and the verification status.
pub fn read_export(
    bytes: &[u8],
    trusted: Option<&VerifyingKey>,
) -> Result<(ChainHeader, Vec<Block>, ChainStatus), ChainFileError> {
    let (header, blocks, _) = parse_export(bytes, trusted)?;
    let (_, status) = verify_export(bytes, trusted)?;
    Ok((header, blocks, status))
}

/// Returns the header, the blocks decoded before the first bad frame, and
/// that frame's index if any.
fn parse_export(
    bytes: &[u8],
    trusted: Option<&VerifyingKey>,
) -> Result<(ChainHeader, Vec<Block>, Option<u64>), ChainFileError> {
    let mut dec = Decoder::new(bytes);
    let header = read_header(&mut dec)?;
    if trusted.is_some_and(|k| *k != header.key) {
        return Err(ChainFileError::KeyMismatch);
    }
    let mut blocks = Vec::new();
    while !dec.is_empty() {
        let frame = dec
            .u32()
            .ok()
            .and_then(|n| dec.take(n as usize).ok())
            .and_then(|f| Block::from_canonical_bytes(f).ok());
        match frame {
            Some(b) => blocks.push(b),
            None => return Ok((header, blocks.clone(), Some(blocks.len() as u64))),
        }
    }
    Ok((header, blocks, None))
}

/// Query filter; `None` fields match everything. Time bounds are inclusive
/// and apply to the block timestamp.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerQuery {
    #[serde(default)]
    pub kind: Option<EntryKind>,
    #[serde(default)]
    pub rule_id: Option<RuleId>,
    #[serde(default)]
    pub asset_id: Option<String>,
    #[serde(default)]
    pub from: Option<Millis>,
    #[serde(default)]
    pub to: Option<Millis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerHit {
    pub block_index: u64,
    pub timestamp: Millis,
    pub author: EntityId,
    pub payload_digest: Digest,
    pub payload: EntryPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRef {
    pub index: u64,
    pub hash: Digest,
}

#[derive(Default)]
struct ChainState {
    blocks: Vec<Arc<Block>>,
    rules: BTreeMap<RuleId, Rule>,
    entry_count: u64,
}

impl ChainState {
    fn index_block(&mut self, block: &Block) {
        self.entry_count += block.entries.len() as u64;
        for e in &block.entries {
            if let Ok(EntryPayload::RuleEntry(r)) = e.decode_payload() {
                self.rules.insert(r.rule_id, r);
            }
        }
    }
}

pub type LedgerHandle = Arc<Ledger>;

/// The chain plus its authority key. Appends are serialized under the write
/// lock; readers clone committed blocks.
pub struct Ledger {
    hash: HashAlgorithm,
    signer: Box<dyn BlockSigner>,
    clock: Arc<dyn Clock>,
    state: RwLock<ChainState>,
}

impl fmt::Debug for Ledger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let st = self.state.read();
        f.debug_struct("Ledger")
            .field("hash", &self.hash)
            .field("blocks", &st.blocks.len())
            .field("entries", &st.entry_count)
            .finish()
    }
}

impl Ledger {
    pub fn new(hash: HashAlgorithm, signer: Box<dyn BlockSigner>, clock: Arc<dyn Clock>) -> Self {
        Self {
            hash,
            signer,
            clock,
            state: RwLock::new(ChainState::default()),
        }
    }

    /// SHA-256, system clock, authority key from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self::new(
            HashAlgorithm::Sha256,
            Box::new(Ed25519Authority::from_seed(seed)),
            Arc::new(SystemClock),
        )
    }

    pub fn into_handle(self) -> LedgerHandle {
        Arc::new(self)
    }

    pub fn hash_algorithm(&self) -> HashAlgorithm {
        self.hash
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signer.verifying_key()
    }

    pub fn len(&self) -> u64 {
        self.state.read().blocks.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry_count(&self) -> u64 {
        self.state.read().entry_count
    }

    pub fn blocks(&self) -> Vec<Block> {
        self.state
            .read()
            .blocks
            .iter()
            .map(|b| (**b).clone())
            .collect()
    }

    pub fn block(&self, index: u64) -> Option<Block> {
        self.state
            .read()
            .blocks
            .get(index as usize)
            .map(|b| (**b).clone())
    }

    fn authorize(
        author: &Principal,
        kinds: impl IntoIterator<Item = EntryKind>,
    ) -> Result<(), Unauthorized> {
        author.require(Permission::AppendLedger)?;
        for k in kinds {
            author.require(k.permission())?;
        }
        Ok(())
    }

    fn seal(
        &self,
        st: &mut ChainState,
        entries: Vec<Entry>,
        author: &Principal,
        now: Millis,
    ) -> BlockRef {
        let prev = st.blocks.last();
        let mut block = Block {
            index: st.blocks.len() as u64,
            prev_hash: prev.map(|b| b.hash).unwrap_or(Digest::ZERO),
            timestamp: now,
            entries,
            author: author.entity_id().clone(),
            signature: Vec::new(),
            hash: Digest::ZERO,
        };
        let body = block.body_bytes();
        block.hash = self.hash.digest(&body);
        block.signature = self.signer.sign(&body);
        let r = BlockRef {
            index: block.index,
            hash: block.hash,
        };
        st.index_block(&block);
        st.blocks.push(Arc::new(block));
        r
    }

    fn timestamp(&self, st: &ChainState) -> Millis {
        let now = self.clock.now();
        st.blocks.last().map_or(now, |b| now.max(b.timestamp))
    }

    /// Appends one block holding `payloads`.
    pub fn append(
        &self,
        payloads: &[EntryPayload],
        author: &Principal,
    ) -> Result<BlockRef, LedgerError> {
        if payloads.is_empty() {
            return Err(LedgerError::EmptyBatch);
        }
        Self::authorize(author, payloads.iter().map(|p| p.kind()))?;
        let entries = payloads.iter().map(|p| Entry::new(p, self.hash)).collect();
        let mut st = self.state.write();
        let now = self.timestamp(&st);
        Ok(self.seal(&mut st, entries, author, now))
    }

    /// Builds a rule from the current rule index and commits it in one
    /// block, atomically with respect to other appends. `build` receives the
    /// current rules, the next free id, and the block timestamp.
    pub fn commit_rule(
        &self,
        author: &Principal,
        build: impl FnOnce(&BTreeMap<RuleId, Rule>, RuleId, Millis) -> Result<Rule, RuleError>,
    ) -> Result<Rule, RuleError> {
        Self::authorize(author, [EntryKind::RuleEntry]).map_err(LedgerError::from)?;
        let mut st = self.state.write();
        let now = self.timestamp(&st);
        let next = RuleId(st.rules.keys().next_back().map_or(1, |id| id.0 + 1));
        let rule = build(&st.rules, next, now)?;
        let entry = Entry::new(&EntryPayload::RuleEntry(rule.clone()), self.hash);
        self.seal(&mut st, vec![entry], author, now);
        Ok(rule)
    }

    pub fn current_rule(&self, id: RuleId) -> Option<Rule> {
        self.state.read().rules.get(&id).cloned()
    }

    pub fn current_rules(&self) -> Vec<Rule> {
        self.state.read().rules.values().cloned().collect()
    }

    /// All stored versions of a rule in chain order.
    pub fn rule_history(&self, id: RuleId) -> Vec<Rule> {
        self.query(&LedgerQuery {
            kind: Some(EntryKind::RuleEntry),
            rule_id: Some(id),
            ..Default::default()
        })
        .into_iter()
        .filter_map(|h| match h.payload {
            EntryPayload::RuleEntry(r) => Some(r),
            _ => None,
        })
        .collect()
    }

    /// Matching entries in chain order.
    pub fn query(&self, q: &LedgerQuery) -> Vec<LedgerHit> {
        let blocks: Vec<Arc<Block>> = self.state.read().blocks.clone();
        query_blocks(blocks.iter().map(|b| &**b), q)
    }

    pub fn verify_chain(&self) -> ChainStatus {
        let blocks = self.blocks();
        verify_blocks(&blocks, self.hash, &self.verifying_key())
    }

    /// Chain file: magic, version, hash code, signature scheme, public key,
    /// then length-framed canonical blocks.
    pub fn export(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        write_header(&mut enc, self.hash, &self.verifying_key());
        for b in self.state.read().blocks.iter() {
            let bytes = b.to_canonical_bytes();
            enc.u32(bytes.len() as u32).raw(&bytes);
        }
        enc.finish()
    }

    /// Loads an exported chain for further appends. The chain must verify
    /// and its key must match `signer`.
    pub fn import(
        bytes: &[u8],
        signer: Box<dyn BlockSigner>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ChainFileError> {
        let key = signer.verifying_key();
        let (header, blocks, bad) = parse_export(bytes, Some(&key))?;
        if let Some(index) = bad {
            return Err(ChainFileError::Broken(ChainStatus::Broken {
                index,
                reason: BreakReason::Malformed,
            }));
        }
        let status = verify_blocks(&blocks, header.hash, &header.key);
        if !status.is_intact() {
            return Err(ChainFileError::Broken(status));
        }
        let mut st = ChainState::default();
        for b in blocks {
            st.index_block(&b);
            st.blocks.push(Arc::new(b));
        }
        Ok(Self {
            hash: header.hash,
            signer,
            clock,
            state: RwLock::new(st),
        })
    }
}
