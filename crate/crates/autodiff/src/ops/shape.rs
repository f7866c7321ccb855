use super::{Grads, Op, Tape};
use crate::error::{invalid, mismatch, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat_last", &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let rows = da.len() / p.max(1);
        let mut data = Vec::with_capacity(da.len() + db.len());
        for r in 0..rows {
            data.extend_from_slice(&da[r * p..(r + 1) * p]);
            data.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        let mut shape = sa;
        *shape.last_mut().expect("non-empty") = p + q;
        let value = Tensor::new(&shape, data)?;
        self.push("concat_last", value, Op::Concat { a, b }, &[a, b])
    }

    /// `a[.., start..start + len]` along the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| invalid("slice_last", "rank-0 input"))?;
        if start + len > n {
            return Err(invalid(
                "slice_last",
                format!("range {start}..{} exceeds {n}", start + len),
            ));
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .chunks_exact(n.max(1))
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = len;
        let value = Tensor::new(&out_shape, data)?;
        self.push("slice_last", value, Op::SliceLast { a, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let data = permute_data(self.value(a).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(&out_shape, data)?;
        self.push(
            "permute",
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        )
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<S: Scalar>(src: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = out_shape[rank - 1];
    let inner_step = src_step[rank - 1];
    loop {
        for i in 0..inner {
            out.push(src[offset + i * inner_step]);
        }
        // advance all but the innermost axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            counter[axis] += 1;
            offset += src_step[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            offset -= src_step[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
}

pub(super) fn concat_backward<S: Scalar>(t: &Tape<S>, a: Var, b: Var, dy: &[S]) -> Grads<S> {
    let (sa, sb) = (t.val(a).shape(), t.val(b).shape());
    let (p, q) = (sa[sa.len() - 1], sb[sb.len() - 1]);
    let mut ga = Vec::with_capacity(t.val(a).numel());
    let mut gb = Vec::with_capacity(t.val(b).numel());
    for row in dy.chunks_exact((p + q).max(1)) {
        ga.extend_from_slice(&row[..p]);
        gb.extend_from_slice(&row[p..]);
    }
    let mut out = Vec::new();
    if t.wants(a) {
        out.push((a, ga));
    }
    if t.wants(b) {
        out.push((b, gb));
    }
    out
}

pub(super) fn slice_last_backward<S: Scalar>(
    t: &Tape<S>,
    a: Var,
    start: usize,
    out: &Tensor<S>,
    dy: &[S],
) -> Grads<S> {
    let n = *t.val(a).shape().last().expect("non-empty");
    let len = *out.shape().last().expect("non-empty");
    let mut dx = vec![S::zero(); t.val(a).numel()];
    if len > 0 {
        for (drow, grow) in dx.chunks_exact_mut(n).zip(dy.chunks_exact(len)) {
            drow[start..start + len].copy_from_slice(grow);
        }
    }
    vec![(a, dx)]
}

pub(super) fn permute_backward<S: Scalar>(
    t: &Tape<S>,
    a: Var,
    perm: &[usize],
    dy: &[S],
) -> Grads<S> {
    let in_shape = t.val(a).shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    vec![(a, permute_data(dy, &out_shape, &inverse))]
}
