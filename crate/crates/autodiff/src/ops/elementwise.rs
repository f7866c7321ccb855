use rand::RngCore;

use super::{suffix_broadcast, Grads, Op, Tape};
use crate::error::{invalid, mismatch, Result};
use crate::graph::{Graph, Var};
use crate::rng::StreamKey;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

impl<S: Scalar> Graph<S> {
    /// `a + b`, where `b` may match only the trailing extents of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product with the same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    fn broadcast_binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (_, inner) = suffix_broadcast(ta.shape(), tb.shape())
            .ok_or_else(|| mismatch(name, ta.shape(), tb.shape()))?;
        let data = if inner == 0 {
            Vec::new()
        } else {
            ta.data()
                .chunks_exact(inner)
                .flat_map(|row| row.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        Tensor::new(ta.shape(), data)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = S::of(c);
        let value = Tensor::new(
            self.shape(a),
            self.value(a).data().iter().map(|&x| x * c).collect(),
        )?;
        self.push("scale", value, Op::Scale { a, c }, &[a])
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll { a }, &[a])
    }

    /// GELU, tanh approximation, evaluated as `x·σ(2u)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (one, k2, c) = (S::one(), S::of(2.0 * GELU_K), S::of(GELU_C));
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x / (one + (-(k2 * (x + c * x * x * x))).exp()))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push("gelu", value, Op::Gelu { a }, &[a])
    }

    /// Inverted dropout with drop probability `p`.
    ///
    /// Row `r` of the leading axis draws its mask from `row_keys[r]`, so a
    /// sample's mask does not depend on which batch it travels in. With
    /// `p == 0` the input is returned unchanged.
    pub fn dropout(&mut self, a: Var, p: f64, row_keys: &[StreamKey]) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("p must lie in [0, 1), got {p}")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let shape = self.shape(a).to_vec();
        let rows = shape.first().copied().unwrap_or(1);
        if row_keys.len() != rows {
            return Err(invalid(
                "dropout",
                format!("{} row keys for leading extent {rows}", row_keys.len()),
            ));
        }
        let per_row = self.value(a).numel() / rows.max(1);
        let keep = S::of(1.0 / (1.0 - p));
        let threshold = (p * 4_294_967_296.0) as u64;
        let mut mask = Vec::with_capacity(self.value(a).numel());
        for key in row_keys {
            let mut rng = key.rng();
            mask.extend((0..per_row).map(|_| {
                if (rng.next_u32() as u64) < threshold {
                    S::zero()
                } else {
                    keep
                }
            }));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::new(&shape, data)?;
        self.push("dropout", value, Op::Dropout { a, mask }, &[a])
    }
}

fn reduce_leading<S: Scalar>(g: &[S], inner: usize) -> Vec<S> {
    let mut out = vec![S::zero(); inner];
    if inner > 0 {
        for row in g.chunks_exact(inner) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
        }
    }
    out
}

pub(super) fn add_backward<S: Scalar>(t: &Tape<S>, a: Var, b: Var, dy: &[S]) -> Grads<S> {
    let mut out = Vec::new();
    if t.wants(a) {
        out.push((a, dy.to_vec()));
    }
    if t.wants(b) {
        out.push((b, reduce_leading(dy, t.val(b).numel())));
    }
    out
}

pub(super) fn mul_backward<S: Scalar>(t: &Tape<S>, a: Var, b: Var, dy: &[S]) -> Grads<S> {
    let (ta, tb) = (t.val(a), t.val(b));
    let inner = tb.numel();
    let mut out = Vec::new();
    if inner == 0 {
        return out;
    }
    if t.wants(a) {
        let da = dy
            .chunks_exact(inner)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(&g, &y)| g * y))
            .collect();
        out.push((a, da));
    }
    if t.wants(b) {
        let prod: Vec<S> = dy.iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
        out.push((b, reduce_leading(&prod, inner)));
    }
    out
}

pub(super) fn gelu_backward<S: Scalar>(t: &Tape<S>, a: Var, dy: &[S]) -> Grads<S> {
    let (one, k2, c, c3) = (
        S::one(),
        S::of(2.0 * GELU_K),
        S::of(GELU_C),
        S::of(3.0 * GELU_C),
    );
    let da = t
        .val(a)
        .data()
        .iter()
        .zip(dy)
        .map(|(&x, &g)| {
            let s = one / (one + (-(k2 * (x + c * x * x * x))).exp());
            let d = s + x * s * (one - s) * k2 * (one + c3 * x * x);
            g * d
        })
        .collect();
    vec![(a, da)]
}
