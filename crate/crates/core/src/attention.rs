//! Exact and partial (block-level) attention for a single query vector.
//!
//! The exact path is the double-precision oracle. The partial path produces
//! per-block softmax statistics in the rescaled form `(max, exp_sum, out)`,
//! which [`SoftmaxAccumulator`] merges in any order. Attention mass is always
//! carried in the log domain (`log_as = max + ln(exp_sum)`) so that coverage
//! arithmetic stays finite for arbitrarily large scores.
//!
//! Precision: keys, values, and finalized outputs are stored as `f32`.
//! Scores, softmax statistics, and the weighted value sums are accumulated in
//! `f64`, so outputs that nearly cancel keep their relative accuracy.

use std::ops::Deref;

use crate::error::{PsaError, Result};
use crate::metadata::KVBlock;

/// A query, key, or value row of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadVector(Vec<f32>);

impl HeadVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PsaError::NonFinite("head vector"));
        }
        Ok(HeadVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl Deref for HeadVector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl TryFrom<Vec<f32>> for HeadVector {
    type Error = PsaError;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        HeadVector::new(values)
    }
}

/// The conventional `1/sqrt(d)` softmax temperature.
pub fn default_scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(PsaError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Streaming double-precision softmax over `(key, value)` rows.
fn exact_over_rows<'a>(
    q: &[f32],
    rows: impl Iterator<Item = (&'a [f32], &'a [f32])>,
    scale: f64,
) -> Result<Vec<f64>> {
    let mut max = f64::NEG_INFINITY;
    let mut denom = 0.0f64;
    let mut out: Vec<f64> = Vec::new();
    let mut seen = false;

    for (k, v) in rows {
        check_dim(q.len(), k.len())?;
        if !seen {
            out = vec![0.0; v.len()];
            seen = true;
        }
        check_dim(out.len(), v.len())?;
        let s = dot(q, k) * scale;
        if s > max {
            let shrink = (max - s).exp();
            denom *= shrink;
            out.iter_mut().for_each(|o| *o *= shrink);
            max = s;
        }
        let w = (s - max).exp();
        denom += w;
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w * f64::from(x);
        }
    }

    if !seen {
        return Err(PsaError::EmptyContext);
    }
    out.iter_mut().for_each(|o| *o /= denom);
    Ok(out)
}

/// Full softmax attention of `q` over all keys and values, in double precision.
pub fn exact_attention(
    q: &HeadVector,
    keys: &[HeadVector],
    values: &[HeadVector],
    scale: f64,
) -> Result<Vec<f64>> {
    if keys.len() != values.len() {
        return Err(PsaError::LengthMismatch {
            keys: keys.len(),
            values: values.len(),
        });
    }
    exact_over_rows(
        q,
        keys.iter().zip(values).map(|(k, v)| (k.as_slice(), v.as_slice())),
        scale,
    )
}

/// Exact attention over the union of all tokens in `blocks`.
pub fn exact_attention_blocks<'a, I>(q: &[f32], blocks: I, scale: f64) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a KVBlock>,
{
    exact_over_rows(q, blocks.into_iter().flat_map(|b| b.rows()), scale)
}

/// Softmax statistics of one block for one query.
///
/// `exp(log_as)` is the block's attention score: the sum over its tokens of
/// `exp(q . k * scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBlockResult {
    pub out_unnorm: Vec<f64>,
    pub max_score: f64,
    pub exp_sum: f64,
    pub log_as: f64,
}

/// Log of the block's attention score without touching the values.
pub fn block_log_as(q: &[f32], block: &KVBlock, scale: f64) -> Result<f64> {
    check_dim(block.dim(), q.len())?;
    if block.n_tokens() == 0 {
        return Err(PsaError::EmptyBlock);
    }
    let scores: Vec<f64> = block.key_rows().map(|k| dot(q, k) * scale).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok(max + sum.ln())
}

pub fn block_partial_attention(
    q: &[f32],
    block: &KVBlock,
    scale: f64,
) -> Result<ScoredBlockResult> {
    check_dim(block.dim(), q.len())?;
    if block.n_tokens() == 0 {
        return Err(PsaError::EmptyBlock);
    }
    let scores: Vec<f64> = block.key_rows().map(|k| dot(q, k) * scale).collect();
    let max_score = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut out_unnorm = vec![0.0f64; block.dim()];
    let mut exp_sum = 0.0f64;
    for (s, v) in scores.iter().zip(block.value_rows()) {
        let w = (s - max_score).exp();
        exp_sum += w;
        for (o, &x) in out_unnorm.iter_mut().zip(v) {
            *o += w * f64::from(x);
        }
    }

    Ok(ScoredBlockResult {
        out_unnorm,
        max_score,
        exp_sum,
        log_as: max_score + exp_sum.ln(),
    })
}

/// Running softmax state over any number of merged blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxAccumulator {
    pub out_unnorm: Vec<f64>,
    pub max_score: f64,
    pub exp_sum: f64,
    pub log_as_acc: f64,
}

impl SoftmaxAccumulator {
    pub fn new(d: usize) -> Self {
        SoftmaxAccumulator {
            out_unnorm: vec![0.0; d],
            max_score: f64::NEG_INFINITY,
            exp_sum: 0.0,
            log_as_acc: f64::NEG_INFINITY,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.exp_sum == 0.0
    }

    pub fn merge(&mut self, part: &ScoredBlockResult) {
        self.absorb(&part.out_unnorm, part.max_score, part.exp_sum);
    }

    /// Merges another accumulator, e.g. for tree-shaped reductions.
    pub fn merge_accumulator(&mut self, other: &SoftmaxAccumulator) {
        if other.is_empty() {
            return;
        }
        self.absorb(&other.out_unnorm, other.max_score, other.exp_sum);
    }

    fn absorb(&mut self, out: &[f64], max_score: f64, exp_sum: f64) {
        if self.is_empty() {
            self.out_unnorm.clear();
            self.out_unnorm.extend_from_slice(out);
            self.max_score = max_score;
            self.exp_sum = exp_sum;
            self.log_as_acc = max_score + exp_sum.ln();
            return;
        }
        let m = self.max_score.max(max_score);
        let a = (self.max_score - m).exp();
        let b = (max_score - m).exp();
        for (o, &x) in self.out_unnorm.iter_mut().zip(out) {
            *o = *o * a + x * b;
        }
        self.exp_sum = self.exp_sum * a + exp_sum * b;
        self.max_score = m;
        self.log_as_acc = m + self.exp_sum.ln();
    }

    pub fn finalize(&self) -> Result<HeadVector> {
        if self.is_empty() {
            return Err(PsaError::NoBlocksProcessed);
        }
        let out = self
            .out_unnorm
            .iter()
            .map(|&o| (o / self.exp_sum) as f32)
            .collect();
        HeadVector::new(out)
    }
}

/// Functional form of [`SoftmaxAccumulator::merge`].
pub fn merge_partial(mut acc: SoftmaxAccumulator, part: &ScoredBlockResult) -> SoftmaxAccumulator {
    acc.merge(part);
    acc
}

pub fn finalize(acc: &SoftmaxAccumulator) -> Result<HeadVector> {
    acc.finalize()
}

/// `max_i |approx_i - exact_i| / max_i |exact_i|`.
pub fn max_relative_error(approx: &[f32], exact: &[f64]) -> f64 {
    let scale = exact.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let err = approx
        .iter()
        .zip(exact)
        .fold(0.0f64, |m, (&a, &e)| m.max((f64::from(a) - e).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}
