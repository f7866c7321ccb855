use super::{Grads, Op, Tape};
use crate::error::{invalid, mismatch, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Shape bookkeeping for `a [.., m, k] · b`.
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is a single `[k, n]` matrix shared by every batch entry.
    shared: bool,
}

fn dims(a: &[usize], b: &[usize]) -> Option<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let lead: usize = a[..a.len() - 2].iter().product();
    if b.len() == 2 {
        if b[0] != k {
            return None;
        }
        return Some(MatMulDims {
            batch: lead,
            m,
            k,
            n: b[1],
            shared: true,
        });
    }
    if b.len() != a.len() || a[..a.len() - 2] != b[..b.len() - 2] || b[b.len() - 2] != k {
        return None;
    }
    Some(MatMulDims {
        batch: lead,
        m,
        k,
        n: b[b.len() - 1],
        shared: false,
    })
}

impl<S: Scalar> Graph<S> {
    /// Matrix product over the last two axes.
    ///
    /// `b` is either a rank-2 matrix applied to every leading entry of `a`
    /// or a tensor with exactly the same leading extents as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let d = dims(&sa, &sb).ok_or_else(|| mismatch("matmul", &sa, &sb))?;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(d.n);
        let mut c = vec![S::zero(); d.batch * d.m * d.n];
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        if d.shared {
            S::gemm(
                d.batch * d.m,
                d.k,
                d.n,
                ta,
                (d.k as isize, 1),
                tb,
                (d.n as isize, 1),
                S::zero(),
                &mut c,
                (d.n as isize, 1),
            );
        } else {
            for i in 0..d.batch {
                S::gemm(
                    d.m,
                    d.k,
                    d.n,
                    &ta[i * d.m * d.k..],
                    (d.k as isize, 1),
                    &tb[i * d.k * d.n..],
                    (d.n as isize, 1),
                    S::zero(),
                    &mut c[i * d.m * d.n..],
                    (d.n as isize, 1),
                );
            }
        }
        let value = Tensor::new(&out_shape, c)?;
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    /// `x · w + bias` with `w: [in, out]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, bias)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(invalid(
                "transpose_last",
                format!("rank {} < 2", shape.len()),
            ));
        }
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let data = transpose_blocks(self.value(a).data(), m, n);
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape.swap(r - 2, r - 1);
        let value = Tensor::new(&out_shape, data)?;
        self.push("transpose_last", value, Op::TransposeLast { a }, &[a])
    }
}

fn transpose_blocks<S: Scalar>(src: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); src.len()];
    let block = m * n;
    if block == 0 {
        return out;
    }
    for (s, d) in src.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}

pub(super) fn matmul_backward<S: Scalar>(t: &Tape<S>, a: Var, b: Var, dy: &[S]) -> Grads<S> {
    let (ta, tb) = (t.val(a), t.val(b));
    let d = dims(ta.shape(), tb.shape()).expect("validated in forward");
    let (m, k, n) = (d.m, d.k, d.n);
    let mut out = Vec::new();
    if t.wants(a) {
        let mut da = vec![S::zero(); ta.numel()];
        if d.shared {
            S::gemm(
                d.batch * m,
                n,
                k,
                dy,
                (n as isize, 1),
                tb.data(),
                (1, n as isize),
                S::zero(),
                &mut da,
                (k as isize, 1),
            );
        } else {
            for i in 0..d.batch {
                S::gemm(
                    m,
                    n,
                    k,
                    &dy[i * m * n..],
                    (n as isize, 1),
                    &tb.data()[i * k * n..],
                    (1, n as isize),
                    S::zero(),
                    &mut da[i * m * k..],
                    (k as isize, 1),
                );
            }
        }
        out.push((a, da));
    }
    if t.wants(b) {
        let mut db = vec![S::zero(); tb.numel()];
        if d.shared {
            S::gemm(
                k,
                d.batch * m,
                n,
                ta.data(),
                (1, k as isize),
                dy,
                (n as isize, 1),
                S::zero(),
                &mut db,
                (n as isize, 1),
            );
        } else {
            for i in 0..d.batch {
                S::gemm(
                    k,
                    m,
                    n,
                    &ta.data()[i * m * k..],
                    (1, k as isize),
                    &dy[i * m * n..],
                    (n as isize, 1),
                    S::zero(),
                    &mut db[i * k * n..],
                    (n as isize, 1),
                );
            }
        }
        out.push((b, db));
    }
    out
}

pub(super) fn transpose_last_backward<S: Scalar>(t: &Tape<S>, a: Var, dy: &[S]) -> Grads<S> {
    let shape = t.val(a).shape();
    let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    // dy has shape [.., n, m]
    vec![(a, transpose_blocks(dy, n, m))]
}
