//! Settings resolution: flags, then `TTS_*` environment variables (both
//! handled by clap), then the TOML config file, then defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tts_core::service::ServiceConfig;
use tts_core::{SpecFile, TwinConfig};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

/// `[cli]` table of the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliSection {
    pub seed: Option<u64>,
    pub spec: Option<PathBuf>,
    pub twin: Option<PathBuf>,
    pub addr: Option<String>,
    pub k: Option<u64>,
    pub grid: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub cli: CliSection,
    #[serde(default)]
    pub service: Option<ServiceConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Values given on the command line or through the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub spec: Option<PathBuf>,
    pub twin: Option<PathBuf>,
    pub addr: Option<String>,
    pub k: Option<u64>,
    pub grid: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub spec: SpecFile,
    pub service: ServiceConfig,
    pub addr: String,
    pub k: Option<u64>,
    pub grid: Option<usize>,
}

/// Reads a TwinConfig from TOML or JSON (chosen by extension).
pub fn load_twin_config(path: &Path) -> Result<TwinConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: TwinConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_spec(path: &Path) -> Result<SpecFile> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SpecFile::from_json(&text)?)
}

impl Settings {
    pub fn resolve(file: Option<&Path>, o: Overrides) -> Result<Self> {
        let file = match file {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let seed = o.seed.or(file.cli.seed).unwrap_or(DEFAULT_SEED);
        let spec = match o.spec.as_ref().or(file.cli.spec.as_ref()) {
            Some(p) => load_spec(p)?,
            None => SpecFile::reference(),
        };
        let mut service = file.service.unwrap_or_default();
        if service.tokens.is_empty() {
            service = ServiceConfig {
                tokens: ServiceConfig::default().with_demo_tokens().tokens,
                ..service
            };
        }
        if let Some(p) = o.twin.as_ref().or(file.cli.twin.as_ref()) {
            service.twin = load_twin_config(p)?;
        }
        service.twin.seed = seed;
        service.ledger_seed = seed;
        Ok(Self {
            seed,
            spec,
            service,
            addr: o
                .addr
                .or(file.cli.addr)
                .unwrap_or_else(|| DEFAULT_ADDR.to_owned()),
            k: o.k.or(file.cli.k),
            grid: o.grid.or(file.cli.grid),
        })
    }
}
