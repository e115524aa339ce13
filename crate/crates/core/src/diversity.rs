//! Token diversity of a teacher's output.
//!
//! Per sample, the off-diagonal pairwise cosines are min-max normalized to
//! `[0, 1]` and averaged into `sim_n`; a corpus scores `1 − mean(sim_n)`.
//! All arithmetic is `f64` regardless of the input element type.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Spread of off-diagonal cosines at or below which a sample counts as constant.
pub const DEGENERATE_SPREAD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub n: usize,
    pub k: usize,
    pub diver: f64,
    pub per_sample: Vec<f64>,
}

/// Squared norms; `sqrt(q_i · q_j)` then equals `q_i` exactly for identical rows.
fn squared_norms<T: Scalar>(y: &Tensor<T>) -> Result<(usize, Vec<f64>)> {
    let (k, _) = y.dims2()?;
    if k < 2 {
        return Err(Error::Metric(format!("need at least 2 tokens, got {k}")));
    }
    if !y.is_finite() {
        return Err(Error::Numeric("tokens are not finite".into()));
    }
    let sq = (0..k)
        .map(|i| {
            let n: f64 = y.row(i).iter().map(|v| v.as_f64() * v.as_f64()).sum();
            if n == 0.0 {
                Err(Error::Metric(format!("token {i} has zero norm; cosine undefined")))
            } else {
                Ok(n)
            }
        })
        .collect::<Result<_>>()?;
    Ok((k, sq))
}

/// `C[i][j] = ⟨y_i, y_j⟩ / (‖y_i‖ ‖y_j‖)`, clamped to `[−1, 1]`, `[K × K]`.
pub fn pairwise_cosine<T: Scalar>(y: &Tensor<T>) -> Result<Tensor<f64>> {
    let (k, sq) = squared_norms(y)?;
    let mut c = vec![0.0; k * k];
    for i in 0..k {
        c[i * k + i] = 1.0;
        for j in 0..i {
            let dot: f64 = y
                .row(i)
                .iter()
                .zip(y.row(j))
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum();
            let v = (dot / (sq[i] * sq[j]).sqrt()).clamp(-1.0, 1.0);
            c[i * k + j] = v;
            c[j * k + i] = v;
        }
    }
    Tensor::new(vec![k, k], c)
}

/// Mean min-max-normalized off-diagonal cosine of one sample.
///
/// When every off-diagonal cosine is the same value the normalization is
/// undefined; that shared cosine, clamped to `[0, 1]`, is returned instead.
pub fn sample_similarity<T: Scalar>(y: &Tensor<T>) -> Result<f64> {
    let c = pairwise_cosine(y)?;
    let k = c.shape()[0];
    let off = || (0..k).flat_map(move |i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)));
    let (lo, hi) = off().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (i, j)| {
        let v = c.data()[i * k + j];
        (lo.min(v), hi.max(v))
    });
    if hi - lo <= DEGENERATE_SPREAD {
        return Ok(lo.clamp(0.0, 1.0));
    }
    let total: f64 = off().map(|(i, j)| (c.data()[i * k + j] - lo) / (hi - lo)).sum();
    Ok(total / (k * (k - 1)) as f64)
}

/// Scores a corpus of equally sized samples. Samples are scored in
/// parallel and reduced in input order.
pub fn corpus_diversity<'a, T: Scalar>(samples: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<DiversityReport> {
    let samples: Vec<&Tensor<T>> = samples.into_iter().collect();
    let Some(first) = samples.first() else {
        return Err(Error::Metric("empty corpus".into()));
    };
    let k = first.dims2()?.0;
    if let Some(bad) = samples.iter().position(|s| s.shape().first() != Some(&k)) {
        return Err(Error::Dimension(format!(
            "sample {bad} has shape {:?}, expected {k} tokens",
            samples[bad].shape()
        )));
    }
    let per_sample = samples
        .par_iter()
        .map(|s| sample_similarity(s))
        .collect::<Result<Vec<f64>>>()?;
    let mut total = 0.0;
    for s in &per_sample {
        total += s;
    }
    Ok(DiversityReport {
        n: per_sample.len(),
        k,
        diver: 1.0 - total / per_sample.len() as f64,
        per_sample,
    })
}
