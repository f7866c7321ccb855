use super::{Grads, Op, Tape};
use crate::error::{invalid, mismatch, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<S: Scalar> Graph<S> {
    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        if n == 0 {
            return Err(invalid("softmax", "empty last axis"));
        }
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(a), data)?;
        self.push("softmax", value, Op::Softmax { a }, &[a])
    }

    /// Layer normalisation over the last axis with learned `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(mismatch("layer_norm", &shape, self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let eps = S::of(LAYER_NORM_EPS);
        let inv_n = S::of(1.0 / n as f64);
        let src = self.value(x).data();
        let rows = src.len() / n.max(1);
        let mut xhat = vec![S::zero(); src.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut data = vec![S::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                data[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(&shape, data)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(invalid(
                "mean_axis",
                format!("axis {axis} invalid for {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let inv = S::of(1.0 / n as f64);
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for j in 0..inner {
                    data[o * inner + j] = data[o * inner + j] + src[base + j];
                }
            }
        }
        data.iter_mut().for_each(|v| *v = *v * inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, data)?;
        self.push("mean_axis", value, Op::MeanAxis { a, axis }, &[a])
    }

    /// Relative position bias `[heads, len, len]` gathered from a learned
    /// table `[heads, 2·max_offset + 1]` by clipped offset `j − i`.
    pub fn rel_pos_bias(&mut self, table: Var, len: usize) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || shape[1].is_multiple_of(2) {
            return Err(invalid(
                "rel_pos_bias",
                format!("table shape {shape:?} is not [heads, 2R+1]"),
            ));
        }
        let (heads, width) = (shape[0], shape[1]);
        let max_offset = width / 2;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(heads * len * len);
        for h in 0..heads {
            for i in 0..len {
                for j in 0..len {
                    data.push(src[h * width + offset_slot(i, j, max_offset)]);
                }
            }
        }
        let value = Tensor::new(&[heads, len, len], data)?;
        self.push(
            "rel_pos_bias",
            value,
            Op::RelBias {
                table,
                len,
                max_offset,
            },
            &[table],
        )
    }

    /// Class-weighted cross entropy of `logits [batch, classes]`,
    /// normalised by the total weight of the batch.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: &[f64],
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[1] != class_weights.len() {
            return Err(invalid(
                "weighted_cross_entropy",
                format!(
                    "logits {shape:?}, {} labels, {} class weights",
                    labels.len(),
                    class_weights.len()
                ),
            ));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(invalid(
                "weighted_cross_entropy",
                format!("label {bad} out of range"),
            ));
        }
        let total: f64 = labels.iter().map(|&y| class_weights[y]).sum();
        if total.is_nan() || total <= 0.0 {
            return Err(invalid(
                "weighted_cross_entropy",
                "total batch weight is not positive",
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0f64;
        let mut sample_w = Vec::with_capacity(labels.len());
        for (row, &y) in probs.chunks_exact_mut(c).zip(labels) {
            let lse = log_sum_exp(row);
            loss += class_weights[y] * (lse - row[y].as_f64());
            for v in row.iter_mut() {
                *v = S::of((v.as_f64() - lse).exp());
            }
            sample_w.push(S::of(class_weights[y] / total));
        }
        let value = Tensor::scalar(S::of(loss / total));
        self.push(
            "weighted_cross_entropy",
            value,
            Op::WeightedCe {
                logits,
                labels: labels.to_vec(),
                sample_w,
                probs,
            },
            &[logits],
        )
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> f64 {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    max + row
        .iter()
        .map(|v| (v.as_f64() - max).exp())
        .sum::<f64>()
        .ln()
}

fn offset_slot(i: usize, j: usize, max_offset: usize) -> usize {
    let r = max_offset as isize;
    ((j as isize - i as isize).clamp(-r, r) + r) as usize
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}

pub(super) fn softmax_backward<S: Scalar>(a: Var, y: &Tensor<S>, dy: &[S]) -> Grads<S> {
    let n = last_dim(y.shape());
    let mut dx = vec![S::zero(); dy.len()];
    for ((yr, gr), dr) in y
        .data()
        .chunks_exact(n)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot: S = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
        for j in 0..n {
            dr[j] = yr[j] * (gr[j] - dot);
        }
    }
    vec![(a, dx)]
}

pub(super) fn layer_norm_backward<S: Scalar>(
    t: &Tape<S>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[S],
    rstd: &[S],
    dy: &[S],
) -> Grads<S> {
    let n = last_dim(t.val(x).shape());
    let g = t.val(gamma).data();
    let inv_n = S::of(1.0 / n as f64);
    let mut dgamma = vec![S::zero(); n];
    let mut dbeta = vec![S::zero(); n];
    let mut dx = vec![S::zero(); dy.len()];
    for (r, &rs) in rstd.iter().enumerate() {
        let (h, gy) = (&xhat[r * n..(r + 1) * n], &dy[r * n..(r + 1) * n]);
        let mut mean_dh = S::zero();
        let mut mean_dh_h = S::zero();
        for j in 0..n {
            dgamma[j] = dgamma[j] + gy[j] * h[j];
            dbeta[j] = dbeta[j] + gy[j];
            let dh = gy[j] * g[j];
            mean_dh = mean_dh + dh;
            mean_dh_h = mean_dh_h + dh * h[j];
        }
        mean_dh = mean_dh * inv_n;
        mean_dh_h = mean_dh_h * inv_n;
        for j in 0..n {
            dx[r * n + j] = rs * (gy[j] * g[j] - mean_dh - h[j] * mean_dh_h);
        }
    }
    let mut out = Vec::new();
    if t.wants(x) {
        out.push((x, dx));
    }
    if t.wants(gamma) {
        out.push((gamma, dgamma));
    }
    if t.wants(beta) {
        out.push((beta, dbeta));
    }
    out
}

pub(super) fn mean_axis_backward<S: Scalar>(
    t: &Tape<S>,
    a: Var,
    axis: usize,
    dy: &[S],
) -> Grads<S> {
    let (outer, n, inner) = split_axis(t.val(a).shape(), axis);
    let inv = S::of(1.0 / n as f64);
    let mut dx = vec![S::zero(); outer * n * inner];
    for o in 0..outer {
        for i in 0..n {
            let base = (o * n + i) * inner;
            for j in 0..inner {
                dx[base + j] = dy[o * inner + j] * inv;
            }
        }
    }
    vec![(a, dx)]
}

pub(super) fn rel_bias_backward<S: Scalar>(
    t: &Tape<S>,
    table: Var,
    len: usize,
    max_offset: usize,
    dy: &[S],
) -> Grads<S> {
    let shape = t.val(table).shape();
    let (heads, width) = (shape[0], shape[1]);
    let mut dt = vec![S::zero(); heads * width];
    for h in 0..heads {
        for i in 0..len {
            for j in 0..len {
                let slot = h * width + offset_slot(i, j, max_offset);
                dt[slot] = dt[slot] + dy[(h * len + i) * len + j];
            }
        }
    }
    vec![(table, dt)]
}

pub(super) fn weighted_ce_backward<S: Scalar>(
    logits: Var,
    labels: &[usize],
    sample_w: &[S],
    probs: &[S],
    dy: &[S],
) -> Grads<S> {
    let c = probs.len() / labels.len().max(1);
    let mut dx = vec![S::zero(); probs.len()];
    for (b, &y) in labels.iter().enumerate() {
        let scale = dy[0] * sample_w[b];
        for k in 0..c {
            let target = if k == y { S::one() } else { S::zero() };
            dx[b * c + k] = scale * (probs[b * c + k] - target);
        }
    }
    vec![(logits, dx)]
}
