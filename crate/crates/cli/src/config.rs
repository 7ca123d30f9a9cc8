//! Flat `key = value` scenario files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error so typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use thiserror::Error;
use trustplane::attestation_agent::LocalEndpoint;
use trustplane::enrollment::Tamper;
use trustplane::root_of_trust::parse_selection;
use trustplane::sdn_harness::bench::{self, DEFAULT_CUTOFF_MS, DEFAULT_COUNT_PER_SIZE, DEFAULT_KEYGEN_ITERATIONS, DEFAULT_RATE_PPS};
use trustplane::Digest;

const KEYS: [&str; 15] = [
    "seed",
    "ca.addr",
    "ca.admin_addr",
    "ca.root_seed",
    "agent.endpoint",
    "agent.pcr_selection",
    "known_good",
    "tamper",
    "bench.sizes",
    "bench.rate",
    "bench.count",
    "bench.cutoff_ms",
    "bench.trace_ecalls",
    "bench.keygen_iterations",
    "bench.out",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("{key}: {reason}")]
    Value { key: String, reason: String },
}

fn value_err(key: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub sizes: Vec<usize>,
    pub rate_pps: u32,
    pub count: usize,
    pub cutoff_ms: f64,
    pub trace_ecalls: bool,
    /// Fresh enrollments timed for the key generation and attestation tables.
    pub keygen_iterations: usize,
    pub out: Option<PathBuf>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            sizes: bench::default_sizes(),
            rate_pps: DEFAULT_RATE_PPS,
            count: DEFAULT_COUNT_PER_SIZE,
            cutoff_ms: DEFAULT_CUTOFF_MS,
            trace_ecalls: true,
            keygen_iterations: DEFAULT_KEYGEN_ITERATIONS,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: Option<String>,
    pub ca_addr: Option<SocketAddr>,
    pub ca_admin_addr: Option<SocketAddr>,
    /// 32-byte root key seed.
    pub ca_root_seed: Option<[u8; 32]>,
    pub agent_endpoint: Option<LocalEndpoint>,
    pub pcr_selection: Vec<usize>,
    pub known_good: Option<PathBuf>,
    pub tamper: Tamper,
    pub bench: BenchSettings,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: None,
            ca_addr: None,
            ca_admin_addr: None,
            ca_root_seed: None,
            agent_endpoint: None,
            pcr_selection: vec![10],
            known_good: None,
            tamper: Tamper::None,
            bench: BenchSettings::default(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(value_err(key, format!("expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| value_err(key, e))
}

/// A 64-digit hex string is used as is; anything else is hashed.
pub fn root_seed(v: &str) -> [u8; 32] {
    match hex::decode(v) {
        Ok(b) if b.len() == 32 => b.try_into().expect("32 bytes"),
        _ => Digest::of(v.as_bytes()).0,
    }
}

pub fn parse_selection_list(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    let sel = v
        .split(',')
        .map(|s| parse_num::<usize>(key, s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    parse_selection(&sel).map_err(|e| value_err(key, e))?;
    Ok(sel)
}

impl ScenarioConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<ScenarioConfig, ConfigError> {
        let mut pairs = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    reason: "expected key = value".into(),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    reason: format!("unknown key {k:?}"),
                });
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    reason: format!("duplicate key {k:?}"),
                });
            }
        }
        let mut c = ScenarioConfig::default();
        for (k, v) in &pairs {
            let k = k.as_str();
            match k {
                "seed" => c.seed = Some(v.clone()),
                "ca.addr" => c.ca_addr = Some(parse_num(k, v)?),
                "ca.admin_addr" => c.ca_admin_addr = Some(parse_num(k, v)?),
                "ca.root_seed" => c.ca_root_seed = Some(root_seed(v)),
                "agent.endpoint" => c.agent_endpoint = Some(v.parse().map_err(|e| value_err(k, e))?),
                "agent.pcr_selection" => c.pcr_selection = parse_selection_list(k, v)?,
                "known_good" => {
                    let p = base_dir.join(v);
                    if !p.is_file() {
                        return Err(value_err(k, format!("{} does not exist", p.display())));
                    }
                    c.known_good = Some(p);
                }
                "tamper" => c.tamper = v.parse().map_err(|e| value_err(k, e))?,
                "bench.sizes" => c.bench.sizes = bench::parse_sizes(v).map_err(|e| value_err(k, e))?,
                "bench.rate" => c.bench.rate_pps = parse_num(k, v)?,
                "bench.count" => c.bench.count = parse_num(k, v)?,
                "bench.cutoff_ms" => c.bench.cutoff_ms = parse_num(k, v)?,
                "bench.trace_ecalls" => c.bench.trace_ecalls = parse_bool(k, v)?,
                "bench.keygen_iterations" => c.bench.keygen_iterations = parse_num(k, v)?,
                "bench.out" => c.bench.out = Some(base_dir.join(v)),
                _ => unreachable!("key list checked above"),
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        ScenarioConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Seed from the file, else from `TRUSTPLANE_SEED`.
    pub fn effective_seed(&self) -> Option<String> {
        self.seed.clone().or_else(|| {
            std::env::var(trustplane::rng::SEED_ENV)
                .ok()
                .filter(|s| !s.is_empty())
        })
    }
}
