//! Segment-wise partial attention with exact merging.
//!
//! A query can attend to each cached segment independently; the partial
//! outputs carry a running max and a softmax normalizer so that any set of
//! partials folds into the dense attention result.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no keys attended: normalizer is zero")]
    Empty,
}

/// Un-normalized attention state over some subset of keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPartial {
    /// Sum of `exp(logit - running_max) * v` over attended keys.
    pub output: Vec<f64>,
    pub running_max: f64,
    /// Sum of `exp(logit - running_max)`.
    pub normalizer: f64,
}

impl AttentionPartial {
    /// The identity for [`merge`].
    pub fn empty(dim: usize) -> Self {
        Self {
            output: vec![0.0; dim],
            running_max: f64::NEG_INFINITY,
            normalizer: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.normalizer == 0.0
    }

    pub fn dim(&self) -> usize {
        self.output.len()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attend `query` to one segment of keys/values (`keys[i]`, `values[i]` are rows).
pub fn attend_segment(
    query: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
) -> Result<AttentionPartial, AttentionError> {
    let d = query.len();
    if keys.is_empty() {
        return Err(AttentionError::DimensionMismatch("segment has no keys".into()));
    }
    if keys.len() != values.len() {
        return Err(AttentionError::DimensionMismatch(format!(
            "{} keys but {} values",
            keys.len(),
            values.len()
        )));
    }
    if let Some((i, _)) = keys.iter().enumerate().find(|(_, k)| k.len() != d) {
        return Err(AttentionError::DimensionMismatch(format!(
            "key row {i} has length {}, query has {d}",
            keys[i].len()
        )));
    }
    let dv = values[0].len();
    if let Some((i, _)) = values.iter().enumerate().find(|(_, v)| v.len() != dv) {
        return Err(AttentionError::DimensionMismatch(format!(
            "value row {i} has length {}, expected {dv}",
            values[i].len()
        )));
    }

    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = keys.iter().map(|k| dot(query, k) * scale).collect();
    let running_max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut output = vec![0.0; dv];
    let mut normalizer = 0.0;
    for (logit, v) in logits.iter().zip(values) {
        let w = (logit - running_max).exp();
        normalizer += w;
        for (o, x) in output.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(AttentionPartial {
        output,
        running_max,
        normalizer,
    })
}

/// Combine two partials over disjoint key sets.
pub fn merge(p1: &AttentionPartial, p2: &AttentionPartial) -> AttentionPartial {
    debug_assert_eq!(p1.dim(), p2.dim());
    if p1.is_empty() {
        return p2.clone();
    }
    if p2.is_empty() {
        return p1.clone();
    }
    let m = p1.running_max.max(p2.running_max);
    let s1 = (p1.running_max - m).exp();
    let s2 = (p2.running_max - m).exp();
    AttentionPartial {
        output: p1.output.iter().zip(&p2.output).map(|(a, b)| a * s1 + b * s2).collect(),
        running_max: m,
        normalizer: p1.normalizer * s1 + p2.normalizer * s2,
    }
}

pub fn finalize(p: &AttentionPartial) -> Result<Vec<f64>, AttentionError> {
    if p.normalizer == 0.0 {
        return Err(AttentionError::Empty);
    }
    Ok(p.output.iter().map(|o| o / p.normalizer).collect())
}

/// Attend to consecutive segments given by `bounds` (exclusive end offsets)
/// and fold the partials left to right.
pub fn attend_segmented(
    query: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    bounds: &[usize],
) -> Result<AttentionPartial, AttentionError> {
    let dv = values.first().map_or(0, Vec::len);
    let mut acc = AttentionPartial::empty(dv);
    let mut start = 0;
    for &end in bounds {
        if end <= start || end > keys.len() {
            return Err(AttentionError::DimensionMismatch(format!(
                "bad segment bound {end} after {start}"
            )));
        }
        let part = attend_segment(query, &keys[start..end], &values[start..end])?;
        acc = merge(&acc, &part);
        start = end;
    }
    Ok(acc)
}
