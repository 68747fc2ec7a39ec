//! Experiment configuration: one TOML file with nested sections.
//!
//! Relative paths inside a config resolve against the config file's
//! directory. Every field except `[trace]` has a default; see
//! `configs/example.toml` for the documented full set.

use crate::cost::{self, HardwareProfile};
use crate::pool::PoolConfig;
use crate::sim::{PolicyConfig, PolicyKind, SimConfig, SimError};
use crate::workload::{self, ContentModel, TraceRecord, TraceSpec};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("unknown key `{key}`; valid keys: {}", valid.join(", "))]
    UnknownKey { key: String, valid: Vec<String> },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSection {
    /// Profile file; the built-in A100 / 7B profile when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<PathBuf>,
    /// Fixed per-batch overhead of the latency fit, seconds.
    #[serde(default = "default_latency_overhead")]
    pub latency_overhead: f64,
}

fn default_latency_overhead() -> f64 {
    1e-3
}

impl Default for HardwareSection {
    fn default() -> Self {
        Self {
            profile: None,
            latency_overhead: default_latency_overhead(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub chunk_size: u64,
    pub slo_multiplier: f64,
    pub max_active: usize,
    pub pin_budget: f64,
    pub admission_retries: u32,
    pub decode_batch_cap: usize,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        let d = SimConfig::new(PolicyConfig::new(PolicyKind::Pooled), PoolConfig::new(1, 1, 1));
        Self {
            chunk_size: d.chunk_size,
            slo_multiplier: d.slo_multiplier,
            max_active: d.max_active,
            pin_budget: d.pin_budget,
            admission_retries: d.admission_retries,
            decode_batch_cap: d.decode_batch_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSection {
    pub n_instances: usize,
    /// Tokens per segment; derived from the hardware profile when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment_size: Option<u32>,
    pub slot_capacity: usize,
    pub overload_delta: f64,
    pub load_half_life: f64,
    pub heavy_hitter_factor: f64,
    /// Permit segments below the compute/communication break-even size.
    pub allow_small_segments: bool,
}

impl Default for PoolSection {
    fn default() -> Self {
        let d = PoolConfig::new(8, 0, 4096);
        Self {
            n_instances: d.n_instances,
            segment_size: None,
            slot_capacity: d.slot_capacity,
            overload_delta: d.overload_delta,
            load_half_life: d.load_half_life,
            heavy_hitter_factor: d.heavy_hitter_factor,
            allow_small_segments: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Access-CV window, simulated seconds.
    pub cv_window: f64,
    /// Ascending session rates for the P90 goodput search; empty disables it.
    /// Needs a generated trace.
    pub goodput_rates: Vec<f64>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            cv_window: 10.0,
            goodput_rates: Vec::new(),
        }
    }
}

/// Exactly one of `path` and `spec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<TraceSpec>,
    /// Content model for trace files; generated traces use their spec's values.
    #[serde(default = "default_content")]
    pub content: ContentModel,
}

fn default_content() -> ContentModel {
    ContentModel::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Check pool invariants after every step and report violations.
    #[serde(default)]
    pub check_invariants: bool,
    #[serde(default)]
    pub hardware: HardwareSection,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub pool: PoolSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    pub trace: TraceSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A parsed config together with the directory relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

pub fn parse(text: &str, origin: &Path) -> Result<ExperimentConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn to_toml(config: &ExperimentConfig) -> String {
    toml::to_string(config).expect("config serializes")
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            config: parse(&text, path)?,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn profile(&self) -> Result<HardwareProfile, ConfigError> {
        let Some(rel) = &self.config.hardware.profile else {
            return Ok(HardwareProfile::a100_llama7b());
        };
        let path = self.resolve(rel);
        let text = fs::read_to_string(&path).map_err(|source| ConfigError::Read {
            path: path.clone(),
            source,
        })?;
        let profile: HardwareProfile = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path,
            message: e.to_string(),
        })?;
        profile
            .validate()
            .map_err(|e| invalid("hardware.profile", e.to_string()))?;
        Ok(profile)
    }

    /// Full check: every section, referenced files, and the derived simulator config.
    pub fn validate(&self) -> Result<SimConfig, ConfigError> {
        let c = &self.config;
        match (&c.trace.path, &c.trace.spec) {
            (Some(p), None) => {
                let path = self.resolve(p);
                if !path.is_file() {
                    return Err(invalid("trace.path", format!("{} does not exist", path.display())));
                }
            }
            (None, Some(spec)) => spec.validate().map_err(|e| invalid("trace.spec", e.to_string()))?,
            _ => return Err(invalid("trace", "set exactly one of `path` and `spec`")),
        }
        let m = &c.metrics;
        if m.goodput_rates.windows(2).any(|w| !(w[0] < w[1])) || m.goodput_rates.iter().any(|r| !(*r >= 0.0)) {
            return Err(invalid(
                "metrics.goodput_rates",
                "must be non-negative and strictly ascending",
            ));
        }
        if !m.goodput_rates.is_empty() && c.trace.spec.is_none() {
            return Err(invalid("metrics.goodput_rates", "needs a generated trace (trace.spec)"));
        }
        let sim = self.sim_config()?;
        let min = cost::min_segment_size(&sim.profile).ceil() as u32;
        if sim.pool.segment_size < min && !c.pool.allow_small_segments {
            return Err(invalid(
                "pool.segment_size",
                format!(
                    "{} is below the break-even size {min}; set pool.allow_small_segments = true to permit it",
                    sim.pool.segment_size
                ),
            ));
        }
        sim.validate()?;
        Ok(sim)
    }

    /// The simulator config, without cross-section checks.
    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let c = &self.config;
        let profile = self.profile()?;
        let p = &c.pool;
        let pool = PoolConfig {
            n_instances: p.n_instances,
            segment_size: p.segment_size.unwrap_or_else(|| cost::default_segment_size(&profile)),
            slot_capacity: p.slot_capacity,
            overload_delta: p.overload_delta,
            load_half_life: p.load_half_life,
            heavy_hitter_factor: p.heavy_hitter_factor,
        };
        let mut sim = SimConfig::new(c.policy.clone(), pool);
        let s = &c.scheduler;
        sim.profile = profile;
        sim.chunk_size = s.chunk_size;
        sim.slo_multiplier = s.slo_multiplier;
        sim.max_active = s.max_active;
        sim.pin_budget = s.pin_budget;
        sim.admission_retries = s.admission_retries;
        sim.decode_batch_cap = s.decode_batch_cap;
        sim.latency_overhead = c.hardware.latency_overhead;
        sim.content = match &c.trace.spec {
            Some(spec) => spec.content(),
            None => c.trace.content,
        };
        sim.access_window = c.metrics.cv_window;
        sim.seed = c.seed;
        sim.check_invariants = c.check_invariants;
        Ok(sim)
    }

    /// Load or generate the configured trace.
    pub fn trace(&self) -> Result<Vec<TraceRecord>, ConfigError> {
        match (&self.config.trace.path, &self.config.trace.spec) {
            (Some(p), _) => workload::load(&self.resolve(p)).map_err(|e| invalid("trace.path", e.to_string())),
            (None, Some(spec)) => workload::generate(spec).map_err(|e| invalid("trace.spec", e.to_string())),
            (None, None) => Err(invalid("trace", "set exactly one of `path` and `spec`")),
        }
    }
}

fn leaf_keys(value: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaf_keys(v, &key, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Optional keys that are absent from a config until set.
const OPTIONAL_KEYS: [&str; 6] = [
    "hardware.profile",
    "policy.pd_split.decode",
    "policy.pd_split.prefill",
    "pool.segment_size",
    "trace.path",
    "trace.spec.sessions",
];

/// Dotted paths of every settable value, sorted.
pub fn valid_keys(config: &ExperimentConfig) -> Vec<String> {
    let value = toml::Value::try_from(config).expect("config serializes");
    let mut keys = Vec::new();
    leaf_keys(&value, "", &mut keys);
    for k in OPTIONAL_KEYS {
        let under_spec = k.starts_with("trace.spec.");
        if !keys.iter().any(|x| x == k) && (!under_spec || config.trace.spec.is_some()) {
            keys.push(k.to_string());
        }
    }
    keys.sort();
    keys
}

/// Parse a sweep value: a TOML literal, or a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// A copy of `config` with the dotted `key` set to `raw`.
pub fn with_override(config: &ExperimentConfig, key: &str, raw: &str) -> Result<ExperimentConfig, ConfigError> {
    let valid = valid_keys(config);
    if !valid.iter().any(|k| k == key) {
        return Err(ConfigError::UnknownKey {
            key: key.to_string(),
            valid,
        });
    }
    let mut root = toml::Value::try_from(config).expect("config serializes");
    let mut slot = &mut root;
    for part in key.split('.') {
        let table = slot.as_table_mut().expect("valid keys pass through tables");
        slot = table
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let mut value = parse_value(raw);
    if let (toml::Value::Float(_), toml::Value::Integer(i)) = (&*slot, &value) {
        value = toml::Value::Float(*i as f64);
    }
    *slot = value;
    root.try_into()
        .map_err(|e: toml::de::Error| invalid(key, format!("value `{raw}`: {}", e.message())))
}
