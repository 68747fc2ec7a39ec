//! Evaluation metrics over a finished simulation.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
}

/// Outcome of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub session_id: u64,
    pub turn_index: u32,
    pub input_len: u64,
    pub output_len: u64,
    pub hit_tokens: u64,
    /// Seconds from release to the end of prefill; `None` when dropped first.
    pub ttft: Option<f64>,
    /// Batch-size-1 prefill time of the whole prompt.
    pub ttft_ref: f64,
    /// Per-token gaps after prefill.
    pub tbt: Vec<f64>,
    /// Batch-size-1 decode time of each generated token.
    pub tbt_ref: Vec<f64>,
    pub dropped: bool,
}

impl RequestRecord {
    /// Every input and output token latency is under `multiplier` times its
    /// reference.
    pub fn meets_slo(&self, multiplier: f64) -> bool {
        let Some(ttft) = self.ttft else { return false };
        if self.dropped || ttft >= multiplier * self.ttft_ref {
            return false;
        }
        self.tbt.iter().zip(&self.tbt_ref).all(|(t, r)| *t < multiplier * r)
    }

    pub fn input_token_latency(&self) -> Option<f64> {
        self.ttft.map(|t| t / self.input_len.max(1) as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub hit_tokens: u64,
    pub cacheable_tokens: u64,
    pub comm_bytes: f64,
    pub recompute_tokens: u64,
    pub drops: u64,
    pub evictions: u64,
    pub replications: u64,
    pub iterations: u64,
    /// Simulated seconds at the end of the run.
    pub makespan: f64,
    pub invariant_violations: u64,
    /// Largest heavy-hitter set used by a rebalance.
    pub max_heavy_keys: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_instances: usize,
    /// Width of an access window, simulated seconds.
    pub window: f64,
    /// `access[w][i]`: accesses served by instance `i` during window `w`.
    pub access: Vec<Vec<u64>>,
    pub requests: Vec<RequestRecord>,
    pub totals: Totals,
}

impl MetricsReport {
    pub fn new(n_instances: usize, window: f64) -> Self {
        Self {
            n_instances,
            window,
            ..Self::default()
        }
    }

    /// Add accesses observed at simulated time `at`.
    pub fn record_access(&mut self, at: f64, counts: &[u64]) {
        if counts.iter().all(|&c| c == 0) {
            return;
        }
        let w = (at / self.window).floor().max(0.0) as usize;
        if self.access.len() <= w {
            self.access.resize(w + 1, vec![0; self.n_instances]);
        }
        for (slot, c) in self.access[w].iter_mut().zip(counts) {
            *slot += c;
        }
    }
}

pub fn hit_rate(report: &MetricsReport) -> Result<f64, MetricError> {
    let t = &report.totals;
    if t.cacheable_tokens == 0 {
        return Err(MetricError::Undefined("hit rate with zero cacheable tokens"));
    }
    Ok(t.hit_tokens as f64 / t.cacheable_tokens as f64)
}

/// Population standard deviation over mean; 0 when every count is 0.
pub fn cv(counts: &[u64]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccessCv {
    /// (window start, CV) per window.
    pub windows: Vec<(f64, f64)>,
    /// Mean over windows that saw any access; 0 when none did.
    pub mean: f64,
}

/// Per-window CV, re-binned to `window` seconds (a multiple of the report's
/// recording window).
pub fn access_cv(report: &MetricsReport, window: f64) -> AccessCv {
    let factor = ((window / report.window).round() as usize).max(1);
    let mut windows = Vec::new();
    let mut active = Vec::new();
    for (w, chunk) in report.access.chunks(factor).enumerate() {
        let mut sum = vec![0u64; report.n_instances];
        for counts in chunk {
            for (s, c) in sum.iter_mut().zip(counts) {
                *s += c;
            }
        }
        let value = cv(&sum);
        if sum.iter().any(|&c| c > 0) {
            active.push(value);
        }
        windows.push((w as f64 * factor as f64 * report.window, value));
    }
    let mean = if active.is_empty() {
        0.0
    } else {
        active.iter().sum::<f64>() / active.len() as f64
    };
    AccessCv { windows, mean }
}

pub fn slo_attainment(report: &MetricsReport, multiplier: f64) -> Result<f64, MetricError> {
    if report.requests.is_empty() {
        return Err(MetricError::Undefined("SLO attainment of an empty report"));
    }
    let met = report.requests.iter().filter(|r| r.meets_slo(multiplier)).count();
    Ok(met as f64 / report.requests.len() as f64)
}

/// Largest rate in ascending `rates` whose attainment is at least 0.9,
/// assuming attainment does not increase with rate.
pub fn p90_goodput<F>(mut attainment_at: F, rates: &[f64]) -> Option<f64>
where
    F: FnMut(f64) -> f64,
{
    // Invariant: rates[..lo] pass, rates[hi..] fail.
    let (mut lo, mut hi) = (0usize, rates.len());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if attainment_at(rates[mid]) >= 0.9 {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo.checked_sub(1).map(|i| rates[i])
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Headline numbers of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: usize,
    pub completed: usize,
    pub dropped: u64,
    pub hit_rate: Option<f64>,
    pub mean_access_cv: f64,
    pub slo_attainment: Option<f64>,
    pub mean_input_token_latency: Option<f64>,
    pub mean_output_token_latency: Option<f64>,
    pub comm_bytes: f64,
    pub recompute_tokens: u64,
    pub evictions: u64,
    pub replications: u64,
    pub iterations: u64,
    pub makespan: f64,
}

pub fn summarize(report: &MetricsReport, cv_window: f64, slo_multiplier: f64) -> Summary {
    Summary {
        requests: report.requests.len(),
        completed: report.requests.iter().filter(|r| !r.dropped).count(),
        dropped: report.totals.drops,
        hit_rate: hit_rate(report).ok(),
        mean_access_cv: access_cv(report, cv_window).mean,
        slo_attainment: slo_attainment(report, slo_multiplier).ok(),
        mean_input_token_latency: mean(report.requests.iter().filter_map(RequestRecord::input_token_latency)),
        mean_output_token_latency: mean(report.requests.iter().flat_map(|r| r.tbt.iter().copied())),
        comm_bytes: report.totals.comm_bytes,
        recompute_tokens: report.totals.recompute_tokens,
        evictions: report.totals.evictions,
        replications: report.totals.replications,
        iterations: report.totals.iterations,
        makespan: report.totals.makespan,
    }
}

pub const CSV_HEADER: &str = "metric,scope,window_start,value";

/// Long-format CSV: `metric,scope,window_start,value`. Scopes are `cluster`,
/// `instance:<i>` or `request:<id>`; `window_start` is empty for
/// non-windowed rows. Rows appear in a fixed order: cluster totals, then
/// per-window access counts and CV, then per-request rows by request id.
pub fn to_csv(report: &MetricsReport, cv_window: f64, slo_multiplier: f64) -> String {
    let s = summarize(report, cv_window, slo_multiplier);
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    let mut row = |metric: &str, scope: &str, window: Option<f64>, value: String| {
        let w = window.map(|w| w.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{metric},{scope},{w},{value}");
    };
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    row("requests", "cluster", None, s.requests.to_string());
    row("completed", "cluster", None, s.completed.to_string());
    row("dropped", "cluster", None, s.dropped.to_string());
    row("hit_tokens", "cluster", None, report.totals.hit_tokens.to_string());
    row(
        "cacheable_tokens",
        "cluster",
        None,
        report.totals.cacheable_tokens.to_string(),
    );
    row("hit_rate", "cluster", None, opt(s.hit_rate));
    row("mean_access_cv", "cluster", None, s.mean_access_cv.to_string());
    row("slo_attainment", "cluster", None, opt(s.slo_attainment));
    row(
        "mean_input_token_latency",
        "cluster",
        None,
        opt(s.mean_input_token_latency),
    );
    row(
        "mean_output_token_latency",
        "cluster",
        None,
        opt(s.mean_output_token_latency),
    );
    row("comm_bytes", "cluster", None, s.comm_bytes.to_string());
    row("recompute_tokens", "cluster", None, s.recompute_tokens.to_string());
    row("evictions", "cluster", None, s.evictions.to_string());
    row("replications", "cluster", None, s.replications.to_string());
    row("iterations", "cluster", None, s.iterations.to_string());
    row("makespan", "cluster", None, s.makespan.to_string());

    for (w, counts) in report.access.iter().enumerate() {
        let start = w as f64 * report.window;
        for (i, c) in counts.iter().enumerate() {
            row("accesses", &format!("instance:{i}"), Some(start), c.to_string());
        }
    }
    for (start, value) in access_cv(report, cv_window).windows {
        row("access_cv", "cluster", Some(start), value.to_string());
    }
    let mut requests: Vec<&RequestRecord> = report.requests.iter().collect();
    requests.sort_by_key(|r| r.request_id);
    for r in requests {
        let scope = format!("request:{}", r.request_id);
        row("ttft", &scope, None, opt(r.ttft));
        row("input_token_latency", &scope, None, opt(r.input_token_latency()));
        row("hit_tokens", &scope, None, r.hit_tokens.to_string());
        row(
            "slo_met",
            &scope,
            None,
            u8::from(r.meets_slo(slo_multiplier)).to_string(),
        );
    }
    out
}
