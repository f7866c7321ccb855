use super::{Grads, Op, Tape};
use crate::error::{invalid, mismatch, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride and zero padding of a 2-D convolution, shared by both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn output_len(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

impl<S: Scalar> Graph<S> {
    /// Per-channel 1-D convolution over time with zero "same" padding.
    ///
    /// `x: [batch, time, channels]`, `w: [channels, kernel]`, kernel odd.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] {
            return Err(mismatch("depthwise_conv1d", &sx, &sw));
        }
        let k = sw[1];
        if k % 2 == 0 {
            return Err(invalid(
                "depthwise_conv1d",
                format!("kernel {k} must be odd"),
            ));
        }
        let (b, tl, c) = (sx[0], sx[1], sx[2]);
        let half = k / 2;
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![S::zero(); xs.len()];
        for bi in 0..b {
            let xb = &xs[bi * tl * c..(bi + 1) * tl * c];
            let ob = &mut out[bi * tl * c..(bi + 1) * tl * c];
            for t in 0..tl {
                let lo = half.saturating_sub(t);
                let hi = k.min(tl + half - t);
                let orow = &mut ob[t * c..(t + 1) * c];
                for kk in lo..hi {
                    let src = t + kk - half;
                    let xrow = &xb[src * c..(src + 1) * c];
                    for ch in 0..c {
                        orow[ch] = orow[ch] + ws[ch * k + kk] * xrow[ch];
                    }
                }
            }
        }
        let value = Tensor::new(&sx, out)?;
        self.push("depthwise_conv1d", value, Op::DwConv1d { x, w }, &[x, w])
    }

    /// 2-D convolution `x: [batch, c_in, h, w]` with `weight: [c_out, c_in, kh, kw]`
    /// and `bias: [c_out]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, geo: Conv2dGeometry) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || self.shape(bias) != [sw[0]] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if geo.stride == 0 || sx[2] + 2 * geo.padding < sw[2] || sx[3] + 2 * geo.padding < sw[3] {
            return Err(invalid(
                "conv2d",
                format!("geometry {geo:?} invalid for input {sx:?}"),
            ));
        }
        let g = Im2Col::new(&sx, &sw, geo);
        let (xs, ws, bs) = (
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let mut out = vec![S::zero(); sx[0] * g.c_out * g.spatial()];
        let mut cols = vec![S::zero(); g.rows() * g.spatial()];
        for bi in 0..sx[0] {
            g.unfold(&xs[bi * g.in_size()..(bi + 1) * g.in_size()], &mut cols);
            let ob = &mut out[bi * g.c_out * g.spatial()..(bi + 1) * g.c_out * g.spatial()];
            for (co, row) in ob.chunks_exact_mut(g.spatial()).enumerate() {
                row.iter_mut().for_each(|v| *v = bs[co]);
            }
            let sp = g.spatial() as isize;
            S::gemm(
                g.c_out,
                g.rows(),
                g.spatial(),
                ws,
                (g.rows() as isize, 1),
                &cols,
                (sp, 1),
                S::one(),
                ob,
                (sp, 1),
            );
        }
        let value = Tensor::new(&[sx[0], g.c_out, g.out_h, g.out_w], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                geo,
            },
            &[x, weight, bias],
        )
    }
}

struct Im2Col {
    c_in: usize,
    c_out: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    geo: Conv2dGeometry,
}

impl Im2Col {
    fn new(sx: &[usize], sw: &[usize], geo: Conv2dGeometry) -> Self {
        Self {
            c_in: sx[1],
            c_out: sw[0],
            in_h: sx[2],
            in_w: sx[3],
            kh: sw[2],
            kw: sw[3],
            out_h: geo.output_len(sx[2], sw[2]),
            out_w: geo.output_len(sx[3], sw[3]),
            geo,
        }
    }

    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_size(&self) -> usize {
        self.c_in * self.in_h * self.in_w
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap of row `r`.
    fn for_each_tap(&self, r: usize, mut f: impl FnMut(usize, usize)) {
        let (c, rem) = (r / (self.kh * self.kw), r % (self.kh * self.kw));
        let (ki, kj) = (rem / self.kw, rem % self.kw);
        let (s, p) = (self.geo.stride, self.geo.padding);
        for oi in 0..self.out_h {
            let ii = (oi * s + ki) as isize - p as isize;
            if ii < 0 || ii >= self.in_h as isize {
                continue;
            }
            let base = (c * self.in_h + ii as usize) * self.in_w;
            for oj in 0..self.out_w {
                let jj = (oj * s + kj) as isize - p as isize;
                if jj < 0 || jj >= self.in_w as isize {
                    continue;
                }
                f(oi * self.out_w + oj, base + jj as usize);
            }
        }
    }

    fn unfold<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        cols.iter_mut().for_each(|v| *v = S::zero());
        let sp = self.spatial();
        for r in 0..self.rows() {
            let row = &mut cols[r * sp..(r + 1) * sp];
            self.for_each_tap(r, |col, idx| row[col] = x[idx]);
        }
    }

    fn fold<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let sp = self.spatial();
        for r in 0..self.rows() {
            let row = &cols[r * sp..(r + 1) * sp];
            self.for_each_tap(r, |col, idx| dx[idx] = dx[idx] + row[col]);
        }
    }
}

pub(super) fn dwconv1d_backward<S: Scalar>(t: &Tape<S>, x: Var, w: Var, dy: &[S]) -> Grads<S> {
    let (tx, tw) = (t.val(x), t.val(w));
    let (b, tl, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
    let k = tw.shape()[1];
    let half = k / 2;
    let (xs, ws) = (tx.data(), tw.data());
    let mut dx = vec![S::zero(); xs.len()];
    let mut dw = vec![S::zero(); ws.len()];
    for bi in 0..b {
        let off = bi * tl * c;
        for t_out in 0..tl {
            let lo = half.saturating_sub(t_out);
            let hi = k.min(tl + half - t_out);
            let grow = &dy[off + t_out * c..off + (t_out + 1) * c];
            for kk in lo..hi {
                let src = off + (t_out + kk - half) * c;
                for ch in 0..c {
                    dx[src + ch] = dx[src + ch] + ws[ch * k + kk] * grow[ch];
                    dw[ch * k + kk] = dw[ch * k + kk] + xs[src + ch] * grow[ch];
                }
            }
        }
    }
    let mut out = Vec::new();
    if t.wants(x) {
        out.push((x, dx));
    }
    if t.wants(w) {
        out.push((w, dw));
    }
    out
}

pub(super) fn conv2d_backward<S: Scalar>(
    t: &Tape<S>,
    x: Var,
    w: Var,
    b: Var,
    geo: Conv2dGeometry,
    dy: &[S],
) -> Grads<S> {
    let (tx, tw) = (t.val(x), t.val(w));
    let g = Im2Col::new(tx.shape(), tw.shape(), geo);
    let batch = tx.shape()[0];
    let (sp, rows) = (g.spatial(), g.rows());
    let mut dw = vec![S::zero(); tw.numel()];
    let mut db = vec![S::zero(); g.c_out];
    let mut dx = vec![S::zero(); tx.numel()];
    let mut cols = vec![S::zero(); rows * sp];
    let mut dcols = vec![S::zero(); rows * sp];
    for bi in 0..batch {
        let gy = &dy[bi * g.c_out * sp..(bi + 1) * g.c_out * sp];
        for (co, row) in gy.chunks_exact(sp).enumerate() {
            db[co] = db[co] + row.iter().copied().sum::<S>();
        }
        if t.wants(w) {
            g.unfold(
                &tx.data()[bi * g.in_size()..(bi + 1) * g.in_size()],
                &mut cols,
            );
            // dW += dY · colsᵀ
            S::gemm(
                g.c_out,
                sp,
                rows,
                gy,
                (sp as isize, 1),
                &cols,
                (1, sp as isize),
                S::one(),
                &mut dw,
                (rows as isize, 1),
            );
        }
        if t.wants(x) {
            // dcols = Wᵀ · dY
            S::gemm(
                rows,
                g.c_out,
                sp,
                tw.data(),
                (1, rows as isize),
                gy,
                (sp as isize, 1),
                S::zero(),
                &mut dcols,
                (sp as isize, 1),
            );
            g.fold(&dcols, &mut dx[bi * g.in_size()..(bi + 1) * g.in_size()]);
        }
    }
    let mut out = Vec::new();
    if t.wants(x) {
        out.push((x, dx));
    }
    if t.wants(w) {
        out.push((w, dw));
    }
    if t.wants(b) {
        out.push((b, db));
    }
    out
}
