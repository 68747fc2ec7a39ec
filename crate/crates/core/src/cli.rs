//! Command implementations behind the `lakesim` binary.

use crate::config::{self, ConfigError, ExperimentConfig, LoadedConfig};
use crate::metrics::{self, Summary, CSV_HEADER};
use crate::sim::{self, SimConfig};
use crate::workload::{self, TraceRecord, TraceSpec};
use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

/// Environment variable that overrides the configured output directory.
/// `--out` still takes precedence.
pub const OUT_DIR_ENV: &str = "LAKESIM_OUT_DIR";

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const TRACE_FILE: &str = "trace.jsonl";

/// Flags shared by `run`, `sweep` and `validate`.
#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: PathBuf,
    /// Replaces the configured trace source.
    pub trace: Option<PathBuf>,
    /// Replaces the experiment seed and, for generated traces, the trace seed.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Everything a run needs, validated.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub loaded: LoadedConfig,
    pub sim: SimConfig,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub summary: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p90_goodput: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub csv: String,
    pub out_dir: PathBuf,
}

fn out_dir(flag: Option<&Path>, loaded: &LoadedConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => loaded.resolve(&loaded.config.out_dir),
    }
}

fn apply_overrides(loaded: &mut LoadedConfig, args: &RunArgs) -> Result<()> {
    let c = &mut loaded.config;
    if let Some(seed) = args.seed {
        c.seed = seed;
        if let Some(spec) = &mut c.trace.spec {
            spec.seed = seed;
        }
    }
    if let Some(t) = &args.trace {
        let abs = std::path::absolute(t).with_context(|| format!("resolving {}", t.display()))?;
        c.trace.path = Some(abs);
        c.trace.spec = None;
    }
    Ok(())
}

fn prepare_loaded(mut loaded: LoadedConfig, args: &RunArgs) -> Result<Prepared> {
    apply_overrides(&mut loaded, args)?;
    let sim = loaded.validate().context("config validation failed")?;
    let out_dir = out_dir(args.out.as_deref(), &loaded);
    Ok(Prepared { loaded, sim, out_dir })
}

pub fn prepare(args: &RunArgs) -> Result<Prepared> {
    prepare_loaded(LoadedConfig::load(&args.config)?, args)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn headline(s: &RunSummary) -> String {
    let mut line = format!(
        "hit_rate={} mean_access_cv={:.4} slo_attainment={}",
        opt(s.summary.hit_rate),
        s.summary.mean_access_cv,
        opt(s.summary.slo_attainment)
    );
    if let Some(g) = s.p90_goodput {
        line.push_str(&format!(" p90_goodput={g}"));
    }
    line
}

/// Largest configured rate with at least 90% attainment. A rate that yields
/// no requests counts as attained.
fn goodput(p: &Prepared) -> Result<Option<f64>> {
    let rates = &p.loaded.config.metrics.goodput_rates;
    let Some(base) = &p.loaded.config.trace.spec else {
        return Ok(None);
    };
    if rates.is_empty() {
        return Ok(None);
    }
    let mut failure = None;
    let found = metrics::p90_goodput(
        |rate| {
            let spec = TraceSpec {
                rate_lambda: rate,
                ..base.clone()
            };
            let attained = workload::generate(&spec)
                .map_err(anyhow::Error::from)
                .and_then(|trace| Ok(sim::run(&p.sim, &trace)?))
                .map(|report| metrics::slo_attainment(&report, p.sim.slo_multiplier).unwrap_or(1.0));
            attained.unwrap_or_else(|e| {
                failure.get_or_insert(e);
                0.0
            })
        },
        rates,
    );
    match failure {
        Some(e) => Err(e.context("goodput search")),
        None => Ok(found),
    }
}

/// Simulate and write `metrics.csv` and `summary.toml` into the output directory.
pub fn execute(p: &Prepared) -> Result<RunOutcome> {
    let trace: Vec<TraceRecord> = p.loaded.trace()?;
    let report = sim::run(&p.sim, &trace)?;
    let window = p.loaded.config.metrics.cv_window;
    let csv = metrics::to_csv(&report, window, p.sim.slo_multiplier);
    let summary = RunSummary {
        summary: metrics::summarize(&report, window, p.sim.slo_multiplier),
        p90_goodput: goodput(p)?,
    };
    fs::create_dir_all(&p.out_dir).with_context(|| format!("creating {}", p.out_dir.display()))?;
    let csv_path = p.out_dir.join(METRICS_FILE);
    fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
    let summary_path = p.out_dir.join(SUMMARY_FILE);
    let text = toml::to_string(&summary).context("serializing summary")?;
    fs::write(&summary_path, text).with_context(|| format!("writing {}", summary_path.display()))?;
    Ok(RunOutcome {
        summary,
        csv,
        out_dir: p.out_dir.clone(),
    })
}

pub fn cmd_run(args: &RunArgs) -> Result<RunOutcome> {
    let p = prepare(args)?;
    let outcome = execute(&p)?;
    println!("{}", headline(&outcome.summary));
    println!("wrote {}", outcome.out_dir.display());
    Ok(outcome)
}

/// Parse a trace spec file: a bare spec, or an experiment config with `[trace.spec]`.
pub fn load_spec(path: &Path) -> Result<TraceSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    match toml::from_str::<TraceSpec>(&text) {
        Ok(spec) => Ok(spec),
        Err(bare) => match config::parse(&text, path) {
            Ok(ExperimentConfig {
                trace: config::TraceSection { spec: Some(spec), .. },
                ..
            }) => Ok(spec),
            _ => Err(anyhow!("{}: {}", path.display(), bare.message())),
        },
    }
}

pub struct GenTraceArgs {
    pub config: PathBuf,
    /// Output file; `trace.jsonl` in the output directory when absent.
    pub trace: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn cmd_gen_trace(args: &GenTraceArgs) -> Result<Vec<TraceRecord>> {
    let mut spec = load_spec(&args.config)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let path = match (&args.trace, &args.out) {
        (Some(t), _) => t.clone(),
        (None, Some(dir)) => dir.join(TRACE_FILE),
        (None, None) => match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v).join(TRACE_FILE),
            _ => bail!("no output path: pass --trace or --out"),
        },
    };
    let trace = workload::generate(&spec)?;
    workload::save(&trace, &path).with_context(|| format!("writing {}", path.display()))?;
    let s = workload::summarize(&trace);
    println!("records={} sessions={}", s.records, s.sessions);
    println!(
        "mean_turns={:.3} mean_input_len={:.1} mean_output_len={:.1} mean_session_len={:.1} mean_session_interarrival={:.4}",
        s.mean_turns, s.mean_input_len, s.mean_output_len, s.mean_session_len, s.mean_session_interarrival
    );
    println!("wrote {}", path.display());
    Ok(trace)
}

pub fn cmd_validate(args: &RunArgs) -> Result<Prepared> {
    let p = prepare(args)?;
    let trace = p.loaded.trace()?;
    sim::Simulator::new(p.sim.clone(), &trace)?;
    println!(
        "ok: {} instances, segment_size {}, {} requests",
        p.sim.pool.n_instances,
        p.sim.pool.segment_size,
        trace.len()
    );
    Ok(p)
}

pub struct SweepArgs {
    pub run: RunArgs,
    pub param: String,
    pub values: Vec<String>,
    /// Worker threads; logical core count when absent.
    pub jobs: Option<usize>,
}

/// Split a `--values` list; empty items are rejected.
pub fn parse_values(list: &str) -> Result<Vec<String>> {
    let values: Vec<String> = list.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        bail!("--values must be a non-empty comma-separated list");
    }
    Ok(values)
}

fn dir_name(key: &str, value: &str) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || "._-".contains(c) {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    };
    format!("{}={}", clean(key), clean(value))
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub values: Vec<String>,
    pub runs: Vec<RunOutcome>,
    pub merged: String,
}

/// One run per value, in parallel; `sweep.csv` prefixes every metrics row
/// with the swept value, in the order the values were given.
pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepOutcome> {
    if args.values.is_empty() {
        bail!("--values must list at least one value");
    }
    let base = LoadedConfig::load(&args.run.config)?;
    let root = out_dir(args.run.out.as_deref(), &base);
    let mut plans = Vec::with_capacity(args.values.len());
    for value in &args.values {
        let config = config::with_override(&base.config, &args.param, value).map_err(|e| match e {
            ConfigError::UnknownKey { .. } => anyhow!(e),
            other => anyhow!(other).context(format!("{} = {value}", args.param)),
        })?;
        let loaded = LoadedConfig {
            config,
            base_dir: base.base_dir.clone(),
        };
        let run = RunArgs {
            out: Some(root.join(dir_name(&args.param, value))),
            ..args.run.clone()
        };
        let p = prepare_loaded(loaded, &run).with_context(|| format!("{} = {value}", args.param))?;
        plans.push(p);
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = args.jobs {
        if j == 0 {
            bail!("--jobs must be >= 1");
        }
        builder = builder.num_threads(j);
    }
    let workers = builder.build().context("building worker pool")?;
    let runs: Vec<RunOutcome> = workers.install(|| {
        plans
            .par_iter()
            .zip(args.values.par_iter())
            .map(|(p, v)| execute(p).with_context(|| format!("{} = {v}", args.param)))
            .collect::<Result<_>>()
    })?;

    let mut merged = format!("{},{CSV_HEADER}\n", args.param);
    for (value, run) in args.values.iter().zip(&runs) {
        for line in run.csv.lines().skip(1) {
            merged.push_str(value);
            merged.push(',');
            merged.push_str(line);
            merged.push('\n');
        }
        println!("{}={value}: {}", args.param, headline(&run.summary));
    }
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let path = root.join(SWEEP_FILE);
    fs::write(&path, &merged).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(SweepOutcome {
        values: args.values.clone(),
        runs,
        merged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_lists() {
        assert_eq!(parse_values("1, 2,3").unwrap(), ["1", "2", "3"]);
        assert!(parse_values("").is_err());
        assert!(parse_values("1,,2").is_err());
    }

    #[test]
    fn sweep_dirs_are_path_safe() {
        assert_eq!(dir_name("pool.slot_capacity", "128"), "pool.slot_capacity=128");
        assert_eq!(dir_name("trace.path", "a/b c"), "trace.path=a_b_c");
    }
}
