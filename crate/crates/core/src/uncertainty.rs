//! Monte-Carlo-dropout predictive distributions and their entropy.

use murmur_autodiff::StreamKey;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::ClassLabel;
use crate::error::{invalid, Result};
use crate::features::FeatureMap;
use crate::model::{Mode, ModelState};
use crate::N_CLASSES;

/// Forward passes per prediction unless configured otherwise.
pub const DEFAULT_MC_PASSES: usize = 30;

/// Class probabilities over (absent, present, unknown).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(pub [f64; N_CLASSES]);

impl ProbVector {
    /// Checks non-negativity and unit sum (±1e-6).
    pub fn new(p: [f64; N_CLASSES]) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&v| v.is_nan() || v < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("{p:?} is not a probability vector")));
        }
        Ok(Self(p))
    }

    /// `softmax(z / t)`.
    pub fn from_logits(z: &[f64; N_CLASSES], t: f64) -> Self {
        let max = z.iter().map(|v| v / t).fold(f64::NEG_INFINITY, f64::max);
        let e = z.map(|v| (v / t - max).exp());
        let s: f64 = e.iter().sum();
        Self(e.map(|v| v / s))
    }

    /// Most probable class; ties go to the lower index.
    pub fn argmax(&self) -> ClassLabel {
        let mut best = 0;
        for k in 1..N_CLASSES {
            if self.0[k] > self.0[best] {
                best = k;
            }
        }
        ClassLabel::from_index(best).expect("class index in range")
    }

    /// Probability of the predicted class.
    pub fn confidence(&self) -> f64 {
        self.0[self.argmax().index()]
    }
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(p: &ProbVector) -> f64 {
    -p.0.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Outcome of `n_passes` stochastic forward passes over one segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub mean: ProbVector,
    pub entropy: f64,
    pub n_passes: usize,
    /// Logits of every pass, in pass order, when requested.
    pub per_pass: Option<Vec<[f64; N_CLASSES]>>,
}

impl McResult {
    /// Mean probabilities after dividing every pass's logits by `t`.
    pub fn rescaled(&self, t: f64) -> Result<ProbVector> {
        let passes = self
            .per_pass
            .as_ref()
            .ok_or_else(|| invalid("temperature rescaling needs per-pass logits"))?;
        let probs: Vec<[f64; N_CLASSES]> = passes
            .iter()
            .map(|z| ProbVector::from_logits(z, t).0)
            .collect();
        mean_of_passes(&probs)
    }
}

/// Element-wise mean of per-pass probability rows, summed in pass order.
pub fn mean_of_passes(rows: &[[f64; N_CLASSES]]) -> Result<ProbVector> {
    if rows.is_empty() {
        return Err(invalid("no passes to average"));
    }
    let mut acc = [0.0; N_CLASSES];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    Ok(ProbVector(acc.map(|v| v / rows.len() as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McOptions {
    pub passes: usize,
    pub keep_passes: bool,
    /// Segments per forward pass.
    pub chunk: usize,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            passes: DEFAULT_MC_PASSES,
            keep_passes: true,
            chunk: 32,
        }
    }
}

/// MC prediction for one segment; pass `n` draws its masks from `key.index(n)`.
pub fn mc_predict(
    model: &ModelState<f32>,
    map: &FeatureMap,
    key: StreamKey,
    opts: &McOptions,
) -> Result<McResult> {
    Ok(mc_predict_batch(model, &[map], &[key], opts)?.remove(0))
}

/// MC prediction for many segments, one key per segment.
///
/// Passes run in parallel; results are gathered by pass index before
/// averaging, so the output does not depend on scheduling or chunking.
pub fn mc_predict_batch(
    model: &ModelState<f32>,
    maps: &[&FeatureMap],
    keys: &[StreamKey],
    opts: &McOptions,
) -> Result<Vec<McResult>> {
    if opts.passes == 0 {
        return Err(invalid("at least one MC pass is required"));
    }
    if maps.len() != keys.len() {
        return Err(invalid(format!(
            "{} segments but {} keys",
            maps.len(),
            keys.len()
        )));
    }
    let n_classes = model.config.n_classes;
    if n_classes != N_CLASSES {
        return Err(invalid(format!(
            "model predicts {n_classes} classes, expected {N_CLASSES}"
        )));
    }
    let mut logits: Vec<Vec<[f64; N_CLASSES]>> = vec![Vec::with_capacity(opts.passes); maps.len()];
    for (chunk_idx, (map_chunk, key_chunk)) in maps
        .chunks(opts.chunk.max(1))
        .zip(keys.chunks(opts.chunk.max(1)))
        .enumerate()
    {
        let per_pass: Vec<Vec<[f64; N_CLASSES]>> = (0..opts.passes)
            .into_par_iter()
            .map(|n| {
                let pass_keys: Vec<StreamKey> =
                    key_chunk.iter().map(|k| k.index(n as u64)).collect();
                let z = model.logits(map_chunk, &Mode::Mc(&pass_keys))?;
                Ok(z.data()
                    .chunks_exact(N_CLASSES)
                    .map(|r| [r[0] as f64, r[1] as f64, r[2] as f64])
                    .collect())
            })
            .collect::<Result<_>>()?;
        let base = chunk_idx * opts.chunk.max(1);
        for pass in per_pass {
            for (i, row) in pass.into_iter().enumerate() {
                logits[base + i].push(row);
            }
        }
    }
    logits
        .into_iter()
        .map(|passes| {
            let probs: Vec<[f64; N_CLASSES]> = passes
                .iter()
                .map(|z| ProbVector::from_logits(z, 1.0).0)
                .collect();
            let mean = mean_of_passes(&probs)?;
            Ok(McResult {
                mean,
                entropy: entropy(&mean),
                n_passes: opts.passes,
                per_pass: opts.keep_passes.then_some(passes),
            })
        })
        .collect()
}
