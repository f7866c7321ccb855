//! Operator set. Each submodule adds forward methods to [`Graph`] and a
//! matching backward rule dispatched from [`Op::backward`].

mod conv;
mod elementwise;
mod linalg;
mod nn;
mod shape;

pub use conv::Conv2dGeometry;

use crate::graph::{Node, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: S,
    },
    SumAll {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<S>,
    },
    TransposeLast {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    MeanAxis {
        a: Var,
        axis: usize,
    },
    RelBias {
        table: Var,
        len: usize,
        max_offset: usize,
    },
    WeightedCe {
        logits: Var,
        labels: Vec<usize>,
        sample_w: Vec<S>,
        probs: Vec<S>,
    },
    DwConv1d {
        x: Var,
        w: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geo: Conv2dGeometry,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceLast {
        a: Var,
        start: usize,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
}

pub(crate) type Grads<S> = Vec<(Var, Vec<S>)>;

/// Read-only view of the tape handed to backward rules.
pub(crate) struct Tape<'a, S> {
    nodes: &'a [Node<S>],
}

impl<S: Scalar> Tape<'_, S> {
    fn val(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

impl<S: Scalar> Op<S> {
    pub(crate) fn backward(&self, nodes: &[Node<S>], out: &Tensor<S>, dy: &[S]) -> Grads<S> {
        let t = Tape { nodes };
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } => linalg::matmul_backward(&t, *a, *b, dy),
            Op::Add { a, b } => elementwise::add_backward(&t, *a, *b, dy),
            Op::Mul { a, b } => elementwise::mul_backward(&t, *a, *b, dy),
            Op::Scale { a, c } => vec![(*a, dy.iter().map(|&g| g * *c).collect())],
            Op::SumAll { a } => vec![(*a, vec![dy[0]; t.val(*a).numel()])],
            Op::Gelu { a } => elementwise::gelu_backward(&t, *a, dy),
            Op::Dropout { a, mask } => {
                vec![(*a, dy.iter().zip(mask).map(|(&g, &m)| g * m).collect())]
            }
            Op::TransposeLast { a } => linalg::transpose_last_backward(&t, *a, dy),
            Op::Softmax { a } => nn::softmax_backward(*a, out, dy),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => nn::layer_norm_backward(&t, *x, *gamma, *beta, xhat, rstd, dy),
            Op::MeanAxis { a, axis } => nn::mean_axis_backward(&t, *a, *axis, dy),
            Op::RelBias {
                table,
                len,
                max_offset,
            } => nn::rel_bias_backward(&t, *table, *len, *max_offset, dy),
            Op::WeightedCe {
                logits,
                labels,
                sample_w,
                probs,
            } => nn::weighted_ce_backward(*logits, labels, sample_w, probs, dy),
            Op::DwConv1d { x, w } => conv::dwconv1d_backward(&t, *x, *w, dy),
            Op::Conv2d { x, w, b, geo } => conv::conv2d_backward(&t, *x, *w, *b, *geo, dy),
            Op::Concat { a, b } => shape::concat_backward(&t, *a, *b, dy),
            Op::SliceLast { a, start } => shape::slice_last_backward(&t, *a, *start, out, dy),
            Op::Reshape { a } => vec![(*a, dy.to_vec())],
            Op::Permute { a, perm } => shape::permute_backward(&t, *a, perm, dy),
        }
    }
}

/// Splits `outer` so that `inner` equals the trailing extents; the leading-batch
/// broadcast rule shared by `add` and `mul`.
pub(crate) fn suffix_broadcast(big: &[usize], small: &[usize]) -> Option<(usize, usize)> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return None;
    }
    let inner: usize = small.iter().product();
    let outer: usize = big[..big.len() - small.len()].iter().product();
    Some((outer, inner))
}
