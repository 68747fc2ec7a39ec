//! Analytical cost formulas: roofline constants, the segment-size threshold,
//! communication volumes, the pool's cache-load fraction and the quadratic
//! batch latency model used by the scheduler.
//!
//! Unit convention: the per-token "4d" terms are bytes, i.e. `2 * d * bytes_per_elem`
//! (one key row plus one value row, or one query row out plus one partial output
//! row back). With 2-byte elements this is exactly `4d`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("cache load {0} leaves no capacity (must be < 1)")]
    InfeasibleLoad(f64),
    #[error("latency fit needs at least 3 points, got {0}")]
    NotEnoughPoints(usize),
}

/// Per-instance hardware and model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    /// Hidden dimension in elements.
    pub hidden_dim: u64,
    pub layers: u32,
    /// Peak FLOP/s of one instance.
    pub flops: f64,
    /// Memory bandwidth, bytes/s.
    pub mem_bandwidth: f64,
    /// Network bandwidth, bytes/s.
    pub net_bandwidth: f64,
    /// One-way network latency, seconds.
    pub net_latency: f64,
    pub bytes_per_elem: u32,
}

impl HardwareProfile {
    /// The calibration profile: a 7B-class model on an A100 node with NVLink.
    pub fn a100_llama7b() -> Self {
        Self {
            hidden_dim: 4096,
            layers: 32,
            flops: 312e12,
            mem_bandwidth: 2.039e12,
            net_bandwidth: 400e9,
            net_latency: 2.3e-6,
            bytes_per_elem: 2,
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let positive = [
            ("hidden_dim", self.hidden_dim as f64),
            ("layers", self.layers as f64),
            ("flops", self.flops),
            ("mem_bandwidth", self.mem_bandwidth),
            ("net_bandwidth", self.net_bandwidth),
            ("net_latency", self.net_latency),
            ("bytes_per_elem", self.bytes_per_elem as f64),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CostError::InvalidInput(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Bytes of one token's key+value rows in one layer (the "4d" term).
    pub fn token_row_bytes(&self) -> f64 {
        2.0 * self.hidden_dim as f64 * self.bytes_per_elem as f64
    }
}

/// Shape of one request's work in one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestShape {
    /// Tokens already cached that the input attends to.
    pub prefix_len: u64,
    /// Tokens processed in this iteration (1 for decode).
    pub input_len: u64,
}

impl RequestShape {
    pub fn new(prefix_len: u64, input_len: u64) -> Self {
        Self { prefix_len, input_len }
    }
}

/// Seconds per cached token a segment saves when its attention runs remotely.
pub fn k_comp(profile: &HardwareProfile) -> f64 {
    let d = profile.hidden_dim as f64;
    let compute = 4.0 * d / profile.flops;
    let memory = profile.token_row_bytes() / profile.mem_bandwidth;
    compute.max(memory)
}

/// Round-trip time of one remote segment query: query out, partial output and
/// normalizer back.
pub fn comm_time(profile: &HardwareProfile) -> f64 {
    2.0 * profile.net_latency + profile.token_row_bytes() / profile.net_bandwidth
}

/// Smallest segment size (tokens, real-valued) whose remote attention saves at
/// least as much compute time as the query round-trip costs.
pub fn min_segment_size(profile: &HardwareProfile) -> f64 {
    let k = k_comp(profile);
    2.0 * profile.net_latency / k + profile.token_row_bytes() / (k * profile.net_bandwidth)
}

/// Default segment size: the threshold rounded up to a multiple of 64 tokens.
pub fn default_segment_size(profile: &HardwareProfile) -> u32 {
    let c = min_segment_size(profile).ceil() as u32;
    c.div_ceil(64).max(1) * 64
}

/// Bytes per layer to ship `tokens` query rows to `n_remote` instances and
/// collect their partial outputs.
pub fn query_comm_volume(profile: &HardwareProfile, tokens: u64, n_remote: u64) -> f64 {
    2.0 * profile.hidden_dim as f64 * tokens as f64 * n_remote as f64 * profile.bytes_per_elem as f64
}

/// Bytes per layer to store the KV of `new_tokens` on another instance.
pub fn kv_put_volume(profile: &HardwareProfile, new_tokens: u64) -> f64 {
    profile.token_row_bytes() * new_tokens as f64
}

/// Quadratic batch latency model:
/// `T = (a * sum((prefix + input) * input) + b * sum(input) + c) / (dop * (1 - L))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Seconds per token pair of attention work.
    pub a: f64,
    /// Seconds per processed token.
    pub b: f64,
    /// Fixed seconds per batch.
    pub c: f64,
    #[serde(default)]
    pub calibration: Calibration,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub source: String,
    pub points: usize,
    /// Largest relative residual over the fitted points.
    pub max_rel_error: f64,
}

/// One measured (or synthesized) batch timing used for fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingPoint {
    pub batch: Vec<RequestShape>,
    pub seconds: f64,
}

/// Exact integer sums of the model's features, so a batch's latency does not
/// depend on the order its requests are summed in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchFeatures {
    /// Sum of (prefix + input) * input.
    pub attention_pairs: u128,
    /// Sum of input.
    pub tokens: u128,
}

impl BatchFeatures {
    pub fn of(batch: &[RequestShape]) -> Self {
        let mut f = Self::default();
        for r in batch {
            f.add(r);
        }
        f
    }

    pub fn add(&mut self, r: &RequestShape) {
        self.attention_pairs += (r.prefix_len + r.input_len) as u128 * r.input_len as u128;
        self.tokens += r.input_len as u128;
    }
}

fn features(batch: &[RequestShape]) -> [f64; 3] {
    let f = BatchFeatures::of(batch);
    [f.attention_pairs as f64, f.tokens as f64, 1.0]
}

impl LatencyModel {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self {
            a,
            b,
            c,
            calibration: Calibration {
                source: "explicit".into(),
                ..Default::default()
            },
        }
    }

    /// Latency of a batch at DoP 1 with no pool load.
    pub fn raw(&self, batch: &[RequestShape]) -> f64 {
        self.raw_features(&BatchFeatures::of(batch))
    }

    pub fn raw_features(&self, f: &BatchFeatures) -> f64 {
        self.a * f.attention_pairs as f64 + self.b * f.tokens as f64 + self.c
    }

    /// Relative least-squares fit of `a, b, c` (negative coefficients clamp to 0).
    pub fn fit(points: &[TimingPoint], source: &str) -> Result<Self, CostError> {
        if points.len() < 3 {
            return Err(CostError::NotEnoughPoints(points.len()));
        }
        // Column scaling keeps the normal problem well conditioned: the quadratic
        // feature spans ~1e9 while the constant is 1.
        let rows: Vec<[f64; 3]> = points.iter().map(|p| features(&p.batch)).collect();
        let mut scale = [0.0f64; 3];
        for r in &rows {
            for k in 0..3 {
                scale[k] = scale[k].max(r[k].abs());
            }
        }
        for s in &mut scale {
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        let mut design = DMatrix::<f64>::zeros(points.len(), 3);
        let mut target = DVector::<f64>::zeros(points.len());
        for (i, (p, r)) in points.iter().zip(&rows).enumerate() {
            if !(p.seconds > 0.0) {
                return Err(CostError::InvalidInput(format!(
                    "timing point {i} has non-positive duration {}",
                    p.seconds
                )));
            }
            for k in 0..3 {
                design[(i, k)] = r[k] / scale[k] / p.seconds;
            }
            target[i] = 1.0;
        }
        let svd = design.svd(true, true);
        let sol = svd
            .solve(&target, 1e-14)
            .map_err(|e| CostError::InvalidInput(e.to_string()))?;
        let mut model = Self::new(
            (sol[0] / scale[0]).max(0.0),
            (sol[1] / scale[1]).max(0.0),
            (sol[2] / scale[2]).max(0.0),
        );
        let max_rel_error = points
            .iter()
            .map(|p| (model.raw(&p.batch) - p.seconds).abs() / p.seconds)
            .fold(0.0, f64::max);
        model.calibration = Calibration {
            source: source.to_string(),
            points: points.len(),
            max_rel_error,
        };
        Ok(model)
    }

    /// Fit against synthetic roofline timings of prefill-sized batches.
    pub fn calibrate(profile: &HardwareProfile, overhead: f64) -> Self {
        let points = roofline_points(profile, overhead, 50, 0);
        Self::fit(&points, "roofline").expect("roofline calibration points are well formed")
    }
}

/// Roofline time of one batch: linear layers and attention are each bounded by
/// compute or memory traffic, summed over layers, plus a fixed overhead.
pub fn roofline_batch_time(profile: &HardwareProfile, batch: &[RequestShape], overhead: f64) -> f64 {
    let d = profile.hidden_dim as f64;
    let bpe = profile.bytes_per_elem as f64;
    let tokens: f64 = batch.iter().map(|r| r.input_len as f64).sum();
    let attn_pairs: f64 = batch
        .iter()
        .map(|r| (r.prefix_len + r.input_len) as f64 * r.input_len as f64)
        .sum();
    let ctx: f64 = batch.iter().map(|r| (r.prefix_len + r.input_len) as f64).sum();
    let linear = (24.0 * d * d * tokens / profile.flops).max(12.0 * d * d * bpe / profile.mem_bandwidth);
    let attention = (4.0 * d * attn_pairs / profile.flops).max(profile.token_row_bytes() * ctx / profile.mem_bandwidth);
    profile.layers as f64 * (linear + attention) + overhead
}

/// Deterministic synthetic timing points: batches of 1..=4 prefill chunks with
/// 256..=4096 new tokens over prefixes up to 64K. `offset` shifts the grid so
/// held-out points differ from fitted ones.
pub fn roofline_points(profile: &HardwareProfile, overhead: f64, count: usize, offset: usize) -> Vec<TimingPoint> {
    (0..count)
        .map(|i| {
            let k = i + offset;
            let n_reqs = 1 + k % 4;
            let batch: Vec<RequestShape> = (0..n_reqs)
                .map(|j| {
                    let m = (k * 7 + j * 13) as u64;
                    RequestShape::new((m * 4099) % 65_536, 256 + (m * 577) % 3841)
                })
                .collect();
            let seconds = roofline_batch_time(profile, &batch, overhead);
            TimingPoint { batch, seconds }
        })
        .collect()
}

/// Scheduler latency estimate for a batch sharded over `dop` instances while
/// the pool consumes fraction `load` of each instance.
pub fn estimate_batch_latency(
    batch: &[RequestShape],
    dop: u32,
    load: f64,
    model: &LatencyModel,
) -> Result<f64, CostError> {
    if dop == 0 {
        return Err(CostError::InvalidInput("dop must be >= 1".into()));
    }
    scaled_latency(model.raw(batch), dop, load)
}

/// Same as [`estimate_batch_latency`] over precomputed features.
pub fn estimate_features_latency(
    features: &BatchFeatures,
    dop: u32,
    load: f64,
    model: &LatencyModel,
) -> Result<f64, CostError> {
    if dop == 0 {
        return Err(CostError::InvalidInput("dop must be >= 1".into()));
    }
    scaled_latency(model.raw_features(features), dop, load)
}

fn scaled_latency(raw: f64, dop: u32, load: f64) -> Result<f64, CostError> {
    if !(0.0..1.0).contains(&load) {
        return Err(CostError::InfeasibleLoad(load));
    }
    Ok(raw / (dop as f64 * (1.0 - load)))
}

/// Self-attention share of a batch's latency: the quadratic term over its own
/// input tokens. Communication up to this budget is hidden.
pub fn self_attention_time(batch: &[RequestShape], dop: u32, load: f64, model: &LatencyModel) -> f64 {
    let own: f64 = batch.iter().map(|r| (r.input_len as f64).powi(2)).sum();
    model.a * own / (dop.max(1) as f64 * (1.0 - load.clamp(0.0, 0.999_999)))
}

/// Time to run `reqs` if the work split perfectly over `n` instances.
pub fn ideal_time(reqs: &[RequestShape], n: u32, model: &LatencyModel) -> Result<f64, CostError> {
    if n == 0 {
        return Err(CostError::InvalidInput("n must be >= 1".into()));
    }
    if reqs.is_empty() {
        return Ok(0.0);
    }
    Ok(model.raw(reqs) / n as f64)
}

/// Fraction of instance resources the pool consumes serving `reqs`' prefix
/// attention over a window of `ideal` seconds.
pub fn cache_load(reqs: &[RequestShape], n: u32, profile: &HardwareProfile, ideal: f64) -> Result<f64, CostError> {
    if reqs.is_empty() {
        return Ok(0.0);
    }
    if n == 0 {
        return Err(CostError::InvalidInput("n must be >= 1".into()));
    }
    if !(ideal > 0.0) {
        return Err(CostError::InvalidInput(format!(
            "ideal time must be positive for a non-empty request set, got {ideal}"
        )));
    }
    let d = profile.hidden_dim as f64;
    let row = profile.token_row_bytes();
    let mut mem = 0.0;
    let mut flop = 0.0;
    for r in reqs {
        mem += row * (r.prefix_len + r.input_len) as f64;
        flop += 2.0 * d * r.prefix_len as f64 * r.input_len as f64;
    }
    let n = n as f64;
    let mem_frac = mem / (mem + n * profile.mem_bandwidth * ideal);
    let flop_frac = flop / (flop + n * profile.flops * ideal);
    Ok(mem_frac.max(flop_frac))
}
