//! Class-weighted training with AdamW, plateau learning-rate halving and
//! best-on-validation model selection.

use std::io::Write;
use std::path::{Path, PathBuf};

use murmur_autodiff::{Graph, StreamKey};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::ClassLabel;
use crate::error::{invalid, Error, Result};
use crate::features::FeatureMap;
use crate::model::{feature_batch, save_checkpoint, Mode, ModelState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Loss weights of (absent, present, unknown).
    pub class_weights: [f64; 3],
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps, mid-epoch if need be.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            class_weights: [1.0, 5.0, 3.0],
            lr0: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: 128,
            epochs: 30,
            plateau_patience: 5,
            lr_factor: 0.5,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.class_weights.iter().any(|&w| w.is_nan() || w <= 0.0) {
            return fail("class weights must be positive");
        }
        if self.lr0.is_nan() || self.lr0 <= 0.0 || self.weight_decay < 0.0 {
            return fail("lr0 must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
        {
            return fail("Adam betas must lie in [0, 1) and eps be positive");
        }
        if self.batch == 0 || self.epochs == 0 || self.plateau_patience == 0 {
            return fail("batch, epochs and plateau_patience must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return fail("lr_factor must lie in (0, 1)");
        }
        if self.max_steps == Some(0) {
            return fail("max_steps must be positive when set");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Accuracy of the epoch's training batches, dropout active.
    pub train_accuracy: f64,
    pub lr: f64,
    pub is_best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Eval-mode accuracy of the final weights on the training segments.
    pub final_train_accuracy: f64,
    /// Eval-mode accuracy of the selected weights on the training segments.
    pub best_train_accuracy: f64,
}

pub struct TrainOutcome {
    /// Weights at the lowest validation loss.
    pub best: ModelState<f32>,
    /// Weights after the last step.
    pub last: ModelState<f32>,
    pub log: Vec<TrainLogEntry>,
    pub summary: TrainSummary,
}

/// A feature map with its training target.
pub type Labeled<'a> = (&'a FeatureMap, ClassLabel);

/// Weighted mean cross entropy `Σ w[y]·(−log softmax(z)[y]) / Σ w[y]`.
pub fn weighted_ce(logits: &[Vec<f64>], labels: &[ClassLabel], weights: &[f64; 3]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(invalid(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (z, y) in logits.iter().zip(labels) {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let w = weights[y.index()];
        num += w * (lse - z[y.index()]);
        den += w;
    }
    Ok(num / den)
}

/// Plateau rule: the rate is multiplied by `factor` after `patience`
/// consecutive epochs without a new strict minimum.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    best: f64,
    stale: usize,
    patience: usize,
    factor: f64,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        Self {
            lr,
            best: f64::INFINITY,
            stale: 0,
            patience,
            factor,
        }
    }

    /// Records an epoch's validation loss; true when it is a new best.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            return true;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr *= self.factor;
            self.stale = 0;
        }
        false
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(model: &ModelState<f32>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f32>> = model
            .params
            .iter()
            .map(|p| vec![0.0; p.tensor.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, model: &mut ModelState<f32>, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps_hat = (self.eps * c2.sqrt()) as f32;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        for (((p, g), m), v) in model
            .params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &g), m), v) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w = *w * decay - step * *m / (v.sqrt() + eps_hat);
            }
        }
    }
}

/// Loss, parameter gradients and number of correct argmax predictions of one batch.
pub fn batch_gradients(
    model: &ModelState<f32>,
    batch: &[Labeled<'_>],
    weights: &[f64; 3],
    mode: &Mode,
) -> Result<(f64, Vec<Vec<f32>>, usize)> {
    let maps: Vec<&FeatureMap> = batch.iter().map(|(m, _)| *m).collect();
    let labels: Vec<usize> = batch.iter().map(|(_, l)| l.index()).collect();
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.constant(feature_batch(&maps)?);
    let z = bound.forward(&mut g, x, mode, None)?;
    let loss = g.weighted_cross_entropy(z, &labels, weights)?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0] as f64;
    let c = model.config.n_classes;
    let correct = g
        .value(z)
        .data()
        .chunks_exact(c)
        .zip(&labels)
        .filter(|(row, &y)| argmax(&row.iter().map(|&v| v as f64).collect::<Vec<_>>()) == y)
        .count();
    let grads = bound
        .vars()
        .iter()
        .zip(model.params.iter())
        .map(|(&v, p)| {
            g.grad(v)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.tensor.numel()])
        })
        .collect();
    Ok((value, grads, correct))
}

/// Eval-mode logits for many segments, in input order.
pub fn eval_logits(
    model: &ModelState<f32>,
    maps: &[&FeatureMap],
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(maps.len());
    for part in maps.chunks(chunk.max(1)) {
        let z = model.logits(part, &Mode::Eval)?;
        out.extend(
            z.data()
                .chunks(model.config.n_classes)
                .map(|r| r.iter().map(|&v| v as f64).collect()),
        );
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode accuracy of `model` on labelled segments.
pub fn accuracy(
    model: &ModelState<f32>,
    maps: &[&FeatureMap],
    labels: &[ClassLabel],
) -> Result<f64> {
    let logits = eval_logits(model, maps, 64)?;
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(z, y)| argmax(z) == y.index())
        .count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Where training writes checkpoints and its log.
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn epoch_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.ckpt"))
    }
}

#[derive(Serialize)]
struct BestPointer<'a> {
    epoch: usize,
    checkpoint: &'a str,
    val_loss: f64,
}

/// Runs the training loop from `model`'s current weights.
///
/// Segment order is reshuffled every epoch and dropout masks are keyed by
/// (epoch, segment), so two runs with the same seed are identical.
pub fn train(
    mut model: ModelState<f32>,
    train_set: &[Labeled<'_>],
    val_set: &[Labeled<'_>],
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid(
            "training needs nonempty train and validation splits",
        ));
    }
    let root = StreamKey::root(cfg.seed);
    let (shuffle_key, dropout_key) = (root.derive("shuffle"), root.derive("dropout"));
    let mut log_file = match outputs {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let p = o.log_path();
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let train_maps: Vec<&FeatureMap> = train_set.iter().map(|(m, _)| *m).collect();
    let train_labels: Vec<ClassLabel> = train_set.iter().map(|(_, l)| *l).collect();
    let val_maps: Vec<&FeatureMap> = val_set.iter().map(|(m, _)| *m).collect();
    let val_labels: Vec<ClassLabel> = val_set.iter().map(|(_, l)| *l).collect();

    let mut opt = AdamW::new(&model, cfg);
    let mut sched = PlateauSchedule::new(cfg.lr0, cfg.plateau_patience, cfg.lr_factor);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut steps = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut shuffle_key.index(epoch as u64).rng());
        let lr = sched.lr;
        let (mut loss_sum, mut batches, mut seen, mut hits) = (0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<Labeled<'_>> = chunk.iter().map(|&i| train_set[i]).collect();
            let keys: Vec<StreamKey> = chunk
                .iter()
                .map(|&i| dropout_key.index(epoch as u64).index(i as u64))
                .collect();
            let (loss, grads, correct) =
                batch_gradients(&model, &batch, &cfg.class_weights, &Mode::Train(&keys))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "epoch {epoch}, step {}: loss {loss}",
                    steps + 1
                )));
            }
            opt.step(&mut model, &grads, lr);
            steps += 1;
            loss_sum += loss;
            batches += 1;
            seen += batch.len();
            hits += correct;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
        }
        let val_loss = weighted_ce(
            &eval_logits(&model, &val_maps, 64)?,
            &val_labels,
            &cfg.class_weights,
        )?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "epoch {epoch}: validation loss {val_loss}"
            )));
        }
        let is_best = sched.observe(val_loss);
        if is_best {
            best = model.clone();
            if let Some(o) = outputs {
                save_checkpoint(&o.epoch_path(epoch), &model)?;
                save_checkpoint(&o.best_path(), &model)?;
                let name = o.epoch_path(epoch);
                let pointer = BestPointer {
                    epoch,
                    checkpoint: name
                        .file_name()
                        .and_then(|n| n.to_str())
                        .unwrap_or_default(),
                    val_loss,
                };
                write_json(&o.dir.join("best.json"), &pointer)?;
            }
        }
        let entry = TrainLogEntry {
            epoch,
            steps,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss,
            train_accuracy: hits as f64 / seen.max(1) as f64,
            lr,
            is_best,
        };
        if let Some((f, p)) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&*p, e))?;
        }
        log.push(entry);
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }
    let best_entry = log
        .iter()
        .rfind(|e| e.is_best)
        .expect("first epoch is always a new best");
    let summary = TrainSummary {
        epochs_run: log.len(),
        steps,
        best_epoch: best_entry.epoch,
        best_val_loss: best_entry.val_loss,
        final_train_accuracy: accuracy(&model, &train_maps, &train_labels)?,
        best_train_accuracy: accuracy(&best, &train_maps, &train_labels)?,
    };
    if let Some((f, p)) = log_file.as_mut() {
        let line = serde_json::json!({ "summary": &summary });
        writeln!(f, "{line}").map_err(|e| Error::io(&*p, e))?;
    }
    Ok(TrainOutcome {
        best,
        last: model,
        log,
        summary,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::*;

    #[test]
    fn weighted_ce_examples() {
        let w = [1.0, 5.0, 3.0];
        let ln3 = 3f64.ln();
        let uniform = weighted_ce(&[vec![0.0; 3]], &[Unknown], &w).unwrap();
        assert!((uniform - ln3).abs() < 1e-12);
        let mixed = weighted_ce(&[vec![0.0; 3], vec![0.0; 3]], &[Present, Absent], &w).unwrap();
        assert!((mixed - (5.0 * ln3 + ln3) / 6.0).abs() < 1e-12);
        let confident = weighted_ce(&[vec![0.0, 1e6, 0.0]], &[Present], &w).unwrap();
        assert!(confident.abs() < 1e-12);
        assert!(weighted_ce(&[], &[], &w).is_err());
    }

    #[test]
    fn autodiff_loss_matches_plain_loss() {
        let rows = vec![vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.4]];
        let labels = [Present, Unknown];
        let mut g = Graph::<f64>::new();
        let z = g.leaf(murmur_autodiff::Tensor::new(&[2, 3], rows.concat()).unwrap());
        let l = g
            .weighted_cross_entropy(z, &[1, 2], &[1.0, 5.0, 3.0])
            .unwrap();
        let plain = weighted_ce(&rows, &labels, &[1.0, 5.0, 3.0]).unwrap();
        assert!((g.value(l).data()[0] - plain).abs() < 1e-12);
    }

    #[test]
    fn present_sample_gets_five_times_the_gradient() {
        let row = [0.4, -0.2, 0.1];
        let mut g = Graph::<f64>::new();
        let z = g.leaf(murmur_autodiff::Tensor::new(&[2, 3], [row, row].concat()).unwrap());
        let l = g
            .weighted_cross_entropy(z, &[1, 0], &[1.0, 5.0, 3.0])
            .unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(z).unwrap();
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (present, absent) = (norm(&grad[..3]), norm(&grad[3..]));
        // identical logits with different targets: compare against the per-sample magnitudes
        let probs: Vec<f64> = {
            let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        let unit = |y: usize| {
            norm(
                &probs
                    .iter()
                    .enumerate()
                    .map(|(k, p)| p - (k == y) as u8 as f64)
                    .collect::<Vec<_>>(),
            )
        };
        assert!((present / unit(1) / (absent / unit(0)) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn plateau_schedule() {
        let mut s = PlateauSchedule::new(1e-4, 5, 0.5);
        for (i, v) in [5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.25].iter().enumerate() {
            assert!(s.observe(*v), "epoch {i}");
            assert_eq!(s.lr, 1e-4);
        }
        for _ in 0..4 {
            assert!(!s.observe(0.25));
        }
        assert_eq!(s.lr, 1e-4);
        assert!(!s.observe(0.3));
        assert_eq!(s.lr, 5e-5);
        for _ in 0..5 {
            s.observe(1.0);
        }
        assert_eq!(s.lr, 2.5e-5);
        assert!(s.observe(0.1));
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            lr_factor: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            class_weights: [1.0, 0.0, 3.0],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
