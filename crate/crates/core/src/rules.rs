//! Safety & security rules: a closed predicate language with a canonical
//! prefix text form, a pure evaluator, and the RBAC-gated create/update
//! lifecycle whose every write lands on the ledger before returning.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{Canonical, DecodeError, Decoder, Encoder};
use crate::icm::{CalibrationRecord, EngineeringKnowledge};
use crate::ids::{is_valid_ident, AssetId, EntityId, RuleId, SensorId};
use crate::ledger::{LedgerError, LedgerHandle};
use crate::plant::AssetStatus;
use crate::rbac::{Permission, Principal, Role, Unauthorized};
use crate::time::Millis;

pub const MAX_DEPTH: usize = 16;

/// Counters a rule may reference besides EK sensors and assets.
pub const STANDARD_COUNTERS: [&str; 3] = ["o_count", "objects_on_belt", "objects_welded"];

/// R_D: an expression tree over threshold, status, count, rate and role atoms.
#[derive(Debug, Clone, PartialEq)]
pub enum RulePredicate {
    /// Constant pass; used to deactivate a rule.
    True,
    SensorInBounds {
        sensor: SensorId,
        lo: f64,
        hi: f64,
    },
    AssetStatusIs {
        asset: AssetId,
        status: AssetStatus,
    },
    CountAtMost {
        counter: String,
        n: u64,
    },
    /// `|value(now) - value(now - window)| <= delta`, window in ticks.
    RateAtMost {
        sensor: SensorId,
        delta: f64,
        window: u32,
    },
    RoleRequired {
        action: String,
        role: Role,
    },
    And(Vec<RulePredicate>),
    Or(Vec<RulePredicate>),
    Not(Box<RulePredicate>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AtomKind {
    True,
    SensorInBounds,
    AssetStatusIs,
    CountAtMost,
    RateAtMost,
    RoleRequired,
}

impl RulePredicate {
    pub fn in_bounds(sensor: &str, lo: f64, hi: f64) -> Self {
        RulePredicate::SensorInBounds {
            sensor: sensor.into(),
            lo,
            hi,
        }
    }

    pub fn status(asset: &str, status: AssetStatus) -> Self {
        RulePredicate::AssetStatusIs {
            asset: asset.into(),
            status,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            RulePredicate::And(xs) | RulePredicate::Or(xs) => {
                1 + xs.iter().map(|x| x.depth()).max().unwrap_or(0)
            }
            RulePredicate::Not(x) => 1 + x.depth(),
            _ => 1,
        }
    }

    fn atom_kind(&self) -> Option<AtomKind> {
        Some(match self {
            RulePredicate::True => AtomKind::True,
            RulePredicate::SensorInBounds { .. } => AtomKind::SensorInBounds,
            RulePredicate::AssetStatusIs { .. } => AtomKind::AssetStatusIs,
            RulePredicate::CountAtMost { .. } => AtomKind::CountAtMost,
            RulePredicate::RateAtMost { .. } => AtomKind::RateAtMost,
            RulePredicate::RoleRequired { .. } => AtomKind::RoleRequired,
            _ => return None,
        })
    }

    /// Sensor ids referenced anywhere in the tree.
    pub fn sensors(&self) -> BTreeSet<SensorId> {
        let mut out = BTreeSet::new();
        self.visit(&mut |p| match p {
            RulePredicate::SensorInBounds { sensor, .. }
            | RulePredicate::RateAtMost { sensor, .. } => {
                out.insert(sensor.clone());
            }
            _ => {}
        });
        out
    }

    fn visit(&self, f: &mut impl FnMut(&RulePredicate)) {
        f(self);
        match self {
            RulePredicate::And(xs) | RulePredicate::Or(xs) => xs.iter().for_each(|x| x.visit(f)),
            RulePredicate::Not(x) => x.visit(f),
            _ => {}
        }
    }

    /// Checks the structural invariants and that every id is registered.
    pub fn validate(&self, registry: &SignalRegistry) -> Result<(), RuleError> {
        if self.depth() > MAX_DEPTH {
            return Err(RuleError::MalformedPredicate(format!(
                "depth {} exceeds {MAX_DEPTH}",
                self.depth()
            )));
        }
        let mut problem: Option<String> = None;
        self.visit(&mut |p| {
            if problem.is_some() {
                return;
            }
            problem = match p {
                RulePredicate::SensorInBounds { sensor, lo, hi } => {
                    if !registry.sensors.contains(sensor) {
                        Some(format!("unknown sensor {sensor}"))
                    } else if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                        Some(format!("invalid bounds [{lo}, {hi}] for {sensor}"))
                    } else {
                        None
                    }
                }
                RulePredicate::AssetStatusIs { asset, .. } => {
                    (!registry.assets.contains(asset)).then(|| format!("unknown asset {asset}"))
                }
                RulePredicate::CountAtMost { counter, .. } => {
                    (!registry.counters.contains(counter))
                        .then(|| format!("unknown counter {counter}"))
                }
                RulePredicate::RateAtMost {
                    sensor,
                    delta,
                    window,
                } => {
                    if !registry.sensors.contains(sensor) {
                        Some(format!("unknown sensor {sensor}"))
                    } else if !(delta.is_finite() && *delta >= 0.0) || *window == 0 {
                        Some(format!("invalid rate parameters for {sensor}"))
                    } else {
                        None
                    }
                }
                RulePredicate::RoleRequired { action, .. } => {
                    (!is_valid_ident(action)).then(|| format!("invalid action {action:?}"))
                }
                RulePredicate::And(xs) | RulePredicate::Or(xs) => {
                    xs.is_empty().then(|| "empty AND/OR".to_owned())
                }
                RulePredicate::True | RulePredicate::Not(_) => None,
            };
        });
        match problem {
            Some(p) => Err(RuleError::MalformedPredicate(p)),
            None => Ok(()),
        }
    }

    /// Canonical prefix text: operands of AND/OR sorted by their own
    /// canonical text.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        self.write_canonical(&mut out);
        out
    }

    fn write_canonical(&self, out: &mut String) {
        match self {
            RulePredicate::True => out.push_str("TRUE"),
            RulePredicate::SensorInBounds { sensor, lo, hi } => {
                let _ = write!(out, "(IN_BOUNDS {sensor} {lo:?} {hi:?})");
            }
            RulePredicate::AssetStatusIs { asset, status } => {
                let s = match status {
                    AssetStatus::On => "ON",
                    AssetStatus::Off => "OFF",
                };
                let _ = write!(out, "(STATUS {asset} {s})");
            }
            RulePredicate::CountAtMost { counter, n } => {
                let _ = write!(out, "(COUNT_AT_MOST {counter} {n})");
            }
            RulePredicate::RateAtMost {
                sensor,
                delta,
                window,
            } => {
                let _ = write!(out, "(RATE_AT_MOST {sensor} {delta:?} {window})");
            }
            RulePredicate::RoleRequired { action, role } => {
                let _ = write!(out, "(ROLE_REQUIRED {action} {role})");
            }
            RulePredicate::And(xs) | RulePredicate::Or(xs) => {
                let op = if matches!(self, RulePredicate::And(_)) {
                    "AND"
                } else {
                    "OR"
                };
                let mut parts: Vec<String> = xs.iter().map(|x| x.canonical_text()).collect();
                parts.sort();
                let _ = write!(out, "({op} {})", parts.join(" "));
            }
            RulePredicate::Not(x) => {
                out.push_str("(NOT ");
                x.write_canonical(out);
                out.push(')');
            }
        }
    }

    /// Parses the prefix text form (canonical or not).
    pub fn parse(text: &str) -> Result<Self, RuleError> {
        let tokens = tokenize(text);
        let mut pos = 0;
        let p = parse_expr(&tokens, &mut pos, 1)?;
        if pos != tokens.len() {
            return Err(RuleError::MalformedPredicate(format!(
                "unexpected trailing token {:?}",
                tokens[pos]
            )));
        }
        Ok(p)
    }
}

impl fmt::Display for RulePredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

impl Serialize for RulePredicate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.canonical_text())
    }
}

impl<'de> Deserialize<'de> for RulePredicate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        RulePredicate::parse(&s).map_err(serde::de::Error::custom)
    }
}

fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        match c {
            '(' | ')' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(c.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

fn parse_expr(
    tokens: &[String],
    pos: &mut usize,
    depth: usize,
) -> Result<RulePredicate, RuleError> {
    let bad = |m: String| RuleError::MalformedPredicate(m);
    if depth > MAX_DEPTH {
        return Err(bad(format!("depth exceeds {MAX_DEPTH}")));
    }
    let tok = tokens
        .get(*pos)
        .ok_or_else(|| bad("unexpected end of text".into()))?;
    *pos += 1;
    if tok == "TRUE" {
        return Ok(RulePredicate::True);
    }
    if tok != "(" {
        return Err(bad(format!("expected '(' but found {tok:?}")));
    }
    let op = tokens
        .get(*pos)
        .ok_or_else(|| bad("missing operator".into()))?
        .clone();
    *pos += 1;
    let mut word = |what: &str| -> Result<String, RuleError> {
        match tokens.get(*pos) {
            Some(t) if t != "(" && t != ")" => {
                *pos += 1;
                Ok(t.clone())
            }
            _ => Err(bad(format!("expected {what} after {op}"))),
        }
    };
    let num = |s: String| -> Result<f64, RuleError> {
        s.parse::<f64>()
            .map_err(|_| RuleError::MalformedPredicate(format!("bad number {s:?}")))
    };
    let ident = |s: String| -> Result<String, RuleError> {
        if is_valid_ident(&s) {
            Ok(s)
        } else {
            Err(RuleError::MalformedPredicate(format!(
                "bad identifier {s:?}"
            )))
        }
    };
    let node = match op.as_str() {
        "IN_BOUNDS" => RulePredicate::SensorInBounds {
            sensor: ident(word("sensor")?)?.into(),
            lo: num(word("lower bound")?)?,
            hi: num(word("upper bound")?)?,
        },
        "STATUS" => {
            let asset = ident(word("asset")?)?;
            let status = match word("status")?.as_str() {
                "ON" => AssetStatus::On,
                "OFF" => AssetStatus::Off,
                s => return Err(bad(format!("bad status {s:?}"))),
            };
            RulePredicate::AssetStatusIs {
                asset: asset.into(),
                status,
            }
        }
        "COUNT_AT_MOST" => {
            let counter = ident(word("counter")?)?;
            let n = word("count")?;
            RulePredicate::CountAtMost {
                counter,
                n: n.parse().map_err(|_| bad(format!("bad count {n:?}")))?,
            }
        }
        "RATE_AT_MOST" => {
            let sensor = ident(word("sensor")?)?;
            let delta = num(word("delta")?)?;
            let w = word("window")?;
            RulePredicate::RateAtMost {
                sensor: sensor.into(),
                delta,
                window: w.parse().map_err(|_| bad(format!("bad window {w:?}")))?,
            }
        }
        "ROLE_REQUIRED" => RulePredicate::RoleRequired {
            action: ident(word("action")?)?,
            role: word("role")?.parse().map_err(bad)?,
        },
        "AND" | "OR" => {
            let mut xs = Vec::new();
            while tokens.get(*pos).is_some_and(|t| t != ")") {
                xs.push(parse_expr(tokens, pos, depth + 1)?);
            }
            if xs.is_empty() {
                return Err(bad(format!("{op} needs at least one operand")));
            }
            if op == "AND" {
                RulePredicate::And(xs)
            } else {
                RulePredicate::Or(xs)
            }
        }
        "NOT" => RulePredicate::Not(Box::new(parse_expr(tokens, pos, depth + 1)?)),
        other => return Err(bad(format!("unknown operator {other:?}"))),
    };
    match tokens.get(*pos) {
        Some(t) if t == ")" => {
            *pos += 1;
            Ok(node)
        }
        _ => Err(bad(format!("missing ')' after {op}"))),
    }
}

/// Ids a predicate may reference.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SignalRegistry {
    pub sensors: BTreeSet<SensorId>,
    pub assets: BTreeSet<AssetId>,
    pub counters: BTreeSet<String>,
}

impl SignalRegistry {
    pub fn from_ek(ek: &EngineeringKnowledge) -> Self {
        Self {
            sensors: ek.sensors.iter().map(|s| s.sensor_id.clone()).collect(),
            assets: ek.devices.iter().map(|d| d.asset_id.clone()).collect(),
            counters: STANDARD_COUNTERS.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.sensors.contains(id) || self.assets.contains(id)
    }
}

/// The action being attempted, for `RoleRequired` atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionContext {
    pub action: String,
    pub roles: BTreeSet<Role>,
}

/// Values a rule is evaluated against.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TelemetrySnapshot {
    pub tick: u64,
    pub sensors: BTreeMap<SensorId, f64>,
    /// Earlier samples per sensor, oldest first, excluding the current one.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub history: BTreeMap<SensorId, Vec<f64>>,
    pub assets: BTreeMap<AssetId, AssetStatus>,
    pub counters: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionContext>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Observed {
    Number(f64),
    Status(AssetStatus),
    Count(u64),
    Roles(BTreeSet<Role>),
    None,
}

/// One atom's contribution to a verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomFailure {
    pub kind: AtomKind,
    /// Canonical text of the atom.
    pub atom: String,
    /// The sensor, asset, counter or action the atom is about.
    pub subject: String,
    pub observed: Observed,
    /// True when the failing atom sits under an odd number of NOTs.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub negated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: RuleId,
    pub version: u32,
    pub failures: Vec<AtomFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Violation(Violation),
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

/// Evaluates `rule` against `snapshot`. Pure.
pub fn evaluate(rule: &Rule, snapshot: &TelemetrySnapshot) -> Result<Verdict, RuleError> {
    let (holds, explanation) = eval_node(&rule.description, snapshot)?;
    if holds {
        Ok(Verdict::Pass)
    } else {
        Ok(Verdict::Violation(Violation {
            rule_id: rule.rule_id,
            version: rule.version,
            failures: explanation,
        }))
    }
}

/// Returns whether `p` holds and the atom observations that decide it.
fn eval_node(
    p: &RulePredicate,
    snap: &TelemetrySnapshot,
) -> Result<(bool, Vec<AtomFailure>), RuleError> {
    let missing = |id: &str| RuleError::MissingSignal(id.to_owned());
    let atom = |subject: &str, observed: Observed| AtomFailure {
        kind: p.atom_kind().expect("atom"),
        atom: p.canonical_text(),
        subject: subject.to_owned(),
        observed,
        negated: false,
    };
    Ok(match p {
        RulePredicate::True => (true, vec![atom("", Observed::None)]),
        RulePredicate::SensorInBounds { sensor, lo, hi } => {
            let v = *snap
                .sensors
                .get(sensor)
                .ok_or_else(|| missing(sensor.as_str()))?;
            (
                *lo <= v && v <= *hi,
                vec![atom(sensor.as_str(), Observed::Number(v))],
            )
        }
        RulePredicate::AssetStatusIs { asset, status } => {
            let s = *snap
                .assets
                .get(asset)
                .ok_or_else(|| missing(asset.as_str()))?;
            (
                s == *status,
                vec![atom(asset.as_str(), Observed::Status(s))],
            )
        }
        RulePredicate::CountAtMost { counter, n } => {
            let c = *snap.counters.get(counter).ok_or_else(|| missing(counter))?;
            (c <= *n, vec![atom(counter, Observed::Count(c))])
        }
        RulePredicate::RateAtMost {
            sensor,
            delta,
            window,
        } => {
            let now = *snap
                .sensors
                .get(sensor)
                .ok_or_else(|| missing(sensor.as_str()))?;
            let past = snap.history.get(sensor).and_then(|h| {
                let w = *window as usize;
                if h.len() >= w {
                    h.get(h.len() - w).copied()
                } else {
                    h.first().copied()
                }
            });
            let change = past.map(|p| (now - p).abs()).unwrap_or(0.0);
            (
                change <= *delta,
                vec![atom(sensor.as_str(), Observed::Number(change))],
            )
        }
        RulePredicate::RoleRequired { action, role } => match &snap.action {
            Some(ctx) if ctx.action == *action => (
                ctx.roles.contains(role),
                vec![atom(action, Observed::Roles(ctx.roles.clone()))],
            ),
            _ => (true, vec![atom(action, Observed::None)]),
        },
        RulePredicate::And(xs) => {
            let mut holding = Vec::new();
            let mut failing = Vec::new();
            for x in xs {
                let (h, mut e) = eval_node(x, snap)?;
                if h {
                    holding.append(&mut e);
                } else {
                    failing.append(&mut e);
                }
            }
            if failing.is_empty() {
                (true, holding)
            } else {
                (false, failing)
            }
        }
        RulePredicate::Or(xs) => {
            let mut holding = Vec::new();
            let mut failing = Vec::new();
            for x in xs {
                let (h, mut e) = eval_node(x, snap)?;
                if h {
                    holding.append(&mut e);
                } else {
                    failing.append(&mut e);
                }
            }
            if holding.is_empty() {
                (false, failing)
            } else {
                (true, holding)
            }
        }
        RulePredicate::Not(x) => {
            let (h, mut e) = eval_node(x, snap)?;
            for f in &mut e {
                f.negated = !f.negated;
            }
            (!h, e)
        }
    })
}

/// An S&S rule as stored on the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub rule_id: RuleId,
    pub description: RulePredicate,
    pub association: BTreeSet<String>,
    pub author: EntityId,
    pub version: u32,
    pub created_at: Millis,
    pub updated_at: Millis,
}

impl Rule {
    /// True for rules created by [`RuleBook::derive_threshold_rules`] and
    /// similar helpers: a single bounds atom on the associated sensor.
    pub fn is_bounds_rule_for(&self, sensor: &str) -> bool {
        self.association.len() == 1
            && self.association.contains(sensor)
            && matches!(&self.description, RulePredicate::SensorInBounds { sensor: s, .. } if s == sensor)
    }
}

impl Canonical for Rule {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.rule_id.0)
            .u32(self.version)
            .str(&self.description.canonical_text())
            .len(self.association.len());
        for a in &self.association {
            enc.str(a);
        }
        enc.str(self.author.as_str())
            .u64(self.created_at)
            .u64(self.updated_at);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let rule_id = RuleId(dec.u64()?);
        let version = dec.u32()?;
        let text = dec.str()?;
        let description =
            RulePredicate::parse(&text).map_err(|_| DecodeError::Invalid("rule predicate"))?;
        let n = dec.count(4)?;
        let mut association = BTreeSet::new();
        for _ in 0..n {
            association.insert(dec.str()?);
        }
        Ok(Self {
            rule_id,
            description,
            association,
            author: dec.str()?.into(),
            version,
            created_at: dec.u64()?,
            updated_at: dec.u64()?,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error(transparent)]
    Unauthorized(#[from] Unauthorized),
    #[error("unknown rule {0}")]
    UnknownRule(RuleId),
    #[error("malformed predicate: {0}")]
    MalformedPredicate(String),
    #[error("rule association is empty or references unknown ids: {0}")]
    BadAssociation(String),
    #[error("snapshot lacks signal {0}")]
    MissingSignal(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Create/update front end over the ledger's rule index. Writes are
/// serialized by the ledger appender; the ledger entry is committed before
/// the rule id is returned.
#[derive(Debug, Clone)]
pub struct RuleBook {
    ledger: LedgerHandle,
    registry: SignalRegistry,
}

impl RuleBook {
    pub fn new(ledger: LedgerHandle, registry: SignalRegistry) -> Self {
        Self { ledger, registry }
    }

    pub fn registry(&self) -> &SignalRegistry {
        &self.registry
    }

    pub fn ledger(&self) -> &LedgerHandle {
        &self.ledger
    }

    /// Creates a rule (fresh id, version 1) when `existing` is `None`,
    /// otherwise replaces the description of `existing` and bumps its version.
    pub fn upsert_rule(
        &self,
        principal: &Principal,
        description: RulePredicate,
        association: BTreeSet<String>,
        existing: Option<RuleId>,
    ) -> Result<RuleId, RuleError> {
        principal.require(Permission::UpsertRule)?;
        description.validate(&self.registry)?;
        if association.is_empty() {
            return Err(RuleError::BadAssociation("empty".into()));
        }
        if let Some(bad) = association.iter().find(|a| !self.registry.contains_id(a)) {
            return Err(RuleError::BadAssociation(bad.clone()));
        }
        let author = principal.entity_id().clone();
        let rule = self
            .ledger
            .commit_rule(principal, |current, next_id, now| match existing {
                None => Ok(Rule {
                    rule_id: next_id,
                    description,
                    association,
                    author,
                    version: 1,
                    created_at: now,
                    updated_at: now,
                }),
                Some(id) => {
                    let prev = current.get(&id).ok_or(RuleError::UnknownRule(id))?;
                    Ok(Rule {
                        rule_id: id,
                        description,
                        association,
                        author,
                        version: prev.version + 1,
                        created_at: prev.created_at,
                        updated_at: now,
                    })
                }
            })?;
        tracing::info!(rule = %rule.rule_id, version = rule.version, "rule stored");
        Ok(rule.rule_id)
    }

    pub fn get(&self, id: RuleId) -> Option<Rule> {
        self.ledger.current_rule(id)
    }

    pub fn rules(&self) -> Vec<Rule> {
        self.ledger.current_rules()
    }

    pub fn history(&self, id: RuleId) -> Vec<Rule> {
        self.ledger.rule_history(id)
    }

    /// The bounds rule currently associated with exactly `sensor`, if any.
    pub fn bounds_rule_for(&self, sensor: &str) -> Option<Rule> {
        self.rules()
            .into_iter()
            .find(|r| r.is_bounds_rule_for(sensor))
    }

    /// Creates or refreshes the bounds rule for `sensor`.
    pub fn upsert_bounds_rule(
        &self,
        principal: &Principal,
        sensor: &str,
        lo: f64,
        hi: f64,
    ) -> Result<RuleId, RuleError> {
        let existing = self.bounds_rule_for(sensor).map(|r| r.rule_id);
        self.upsert_rule(
            principal,
            RulePredicate::in_bounds(sensor, lo, hi),
            BTreeSet::from([sensor.to_owned()]),
            existing,
        )
    }

    /// One `SensorInBounds` rule per calibration record. Re-running updates
    /// the existing rules (matched by sensor association) instead of adding
    /// new ones.
    pub fn derive_threshold_rules(
        &self,
        calibration: &[CalibrationRecord],
        author: &Principal,
    ) -> Result<Vec<RuleId>, RuleError> {
        author.require(Permission::UpsertRule)?;
        calibration
            .iter()
            .map(|c| self.upsert_bounds_rule(author, c.sensor_id.as_str(), c.tau_min, c.tau_max))
            .collect()
    }

    /// Deactivates a rule by storing a new version whose predicate is `TRUE`.
    pub fn deactivate(&self, principal: &Principal, id: RuleId) -> Result<RuleId, RuleError> {
        let current = self.get(id).ok_or(RuleError::UnknownRule(id))?;
        self.upsert_rule(
            principal,
            RulePredicate::True,
            current.association,
            Some(id),
        )
    }
}
