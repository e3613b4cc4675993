//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value and enough of its inputs
//! to run the adjoint. [`Graph::backward`] walks the tape in reverse once.
//! A graph is built per training step and dropped afterwards.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{matmul_into, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Conv geometry shared by the forward and adjoint passes.
#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// 1-D linear interpolation taps for resizing.
#[derive(Clone, Debug)]
struct Axis {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Axis {
    /// Half-pixel-centered taps from `src` to `dst` samples, clamped at the
    /// borders.
    fn new(src: usize, dst: usize) -> Axis {
        let scale = src as f64 / dst as f64;
        let (mut lo, mut hi, mut frac) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..dst {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let l = s.floor() as usize;
            lo.push(l);
            hi.push((l + 1).min(src - 1));
            frac.push(s - l as f64);
        }
        Axis { lo, hi, frac }
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    MulCols(Var, Var),
    ConcatCols(Var, Var),
    MeanGroups(Var, usize),
    Gather { src: Var, taps: Vec<(usize, S)>, per_row: usize },
    SegmentSum { x: Var, weights: Vec<S>, offsets: Vec<usize> },
    Mse(Var, Var),
    Sum(Var),
    Conv2d { x: Var, w: Var, b: Var, d: ConvDims },
    AvgPool2(Var),
    Resize { x: Var, ay: Axis, ax: Axis },
    ConcatChannels(Vec<Var>),
    NchwToRows(Var),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, Var>,
}

fn mismatch<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn im2col<S: Scalar>(x: &[S], d: &ConvDims, n: usize, cols: &mut [S]) {
    let plane = d.h * d.w;
    let npix = d.ho * d.wo;
    for c in 0..d.c {
        let xs = &x[(n * d.c + c) * plane..][..plane];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = &mut cols[((c * d.k + ky) * d.k + kx) * npix..][..npix];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        row[oy * d.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                            xs[iy as usize * d.w + ix as usize]
                        } else {
                            S::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], d: &ConvDims, n: usize, gx: &mut [S]) {
    let plane = d.h * d.w;
    let npix = d.ho * d.wo;
    for c in 0..d.c {
        let gs = &mut gx[(n * d.c + c) * plane..][..plane];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = &cols[((c * d.k + ky) * d.k + kx) * npix..][..npix];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            gs[iy as usize * d.w + ix as usize] += row[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, t: Tensor<S>) -> Result<Var> {
        self.push(t, Op::Leaf, true, "input")
    }

    /// The parameter `name` of `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Leaf, true, "param")?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `a (n×k) · b (k×m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((n, k), (k2, m)) = (ta.dims2("matmul")?, tb.dims2("matmul")?);
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![S::zero(); n * m];
        matmul_into(n, k, m, ta.data(), false, tb.data(), false, &mut out, false);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), ng, "matmul")
    }

    /// Adds a row vector `b` (length m) to every row of `x (n×m)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, m) = tx.dims2("add_bias")?;
        if tb.len() != m {
            return Err(mismatch("add_bias", tx, tb));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(out, Op::AddBias(x, b), ng, "add_bias")
    }

    /// `x · W + b` with `W` of shape `[in, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.shape() != ty.shape() {
            return Err(mismatch("add", tx, ty));
        }
        let data = tx.data().iter().zip(ty.data()).map(|(&a, &b)| a + b).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(y);
        self.push(out, Op::Add(x, y), ng, "add")
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v * c).collect())?;
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng, "scale")
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>, name: &'static str) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| f(v)).collect())?;
        let ng = self.needs(x);
        self.push(out, op, ng, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(S::zero()), Op::Relu(x), "relu")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, softplus, Op::Softplus(x), "softplus")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp(x), "exp")
    }

    /// Scales column `j` of `x (n×m)` by `s[j]`.
    pub fn mul_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (_, m) = tx.dims2("mul_cols")?;
        if ts.len() != m {
            return Err(mismatch("mul_cols", tx, ts));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &sv) in row.iter_mut().zip(ts.data()) {
                *o = *o * sv;
            }
        }
        let ng = self.needs(x) || self.needs(s);
        self.push(out, Op::MulCols(x, s), ng, "mul_cols")
    }

    /// `[a | b]` for `a (n×p)`, `b (n×q)`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((n, p), (n2, q)) = (ta.dims2("concat_cols")?, tb.dims2("concat_cols")?);
        if n != n2 {
            return Err(mismatch("concat_cols", ta, tb));
        }
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&ta.data()[i * p..(i + 1) * p]);
            out.extend_from_slice(&tb.data()[i * q..(i + 1) * q]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![n, p + q], out)?, Op::ConcatCols(a, b), ng, "concat_cols")
    }

    /// Mean over consecutive groups of `group` rows: `(n·group)×m → n×m`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, m) = tx.dims2("mean_groups")?;
        if group == 0 || r % group != 0 {
            return Err(Error::ShapeMismatch {
                op: "mean_groups",
                left: tx.shape().to_vec(),
                right: vec![group],
            });
        }
        let n = r / group;
        let inv = S::one() / S::of(group as f64);
        let mut out = vec![S::zero(); n * m];
        for (i, orow) in out.chunks_mut(m).enumerate() {
            for g in 0..group {
                let xrow = &tx.data()[(i * group + g) * m..][..m];
                for (o, &v) in orow.iter_mut().zip(xrow) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o = *o * inv);
        }
        let ng = self.needs(x);
        self.push(Tensor::new(vec![n, m], out)?, Op::MeanGroups(x, group), ng, "mean_groups")
    }

    /// Row `r` of the output is `Σ_t w_t · src[idx_t]` over the `per_row`
    /// taps `taps[r·per_row ..]` of rows of `src (R×D)`.
    pub fn gather_rows(&mut self, src: Var, taps: Vec<(usize, S)>, per_row: usize) -> Result<Var> {
        let ts = self.value(src);
        let (r, d) = ts.dims2("gather_rows")?;
        if per_row == 0 || taps.len() % per_row != 0 || taps.iter().any(|&(i, _)| i >= r) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                left: ts.shape().to_vec(),
                right: vec![taps.len(), per_row],
            });
        }
        let n = taps.len() / per_row;
        let mut out = vec![S::zero(); n * d];
        for (orow, row_taps) in out.chunks_mut(d).zip(taps.chunks(per_row)) {
            for &(idx, w) in row_taps {
                if w == S::zero() {
                    continue;
                }
                for (o, &v) in orow.iter_mut().zip(&ts.data()[idx * d..][..d]) {
                    *o += w * v;
                }
            }
        }
        let ng = self.needs(src);
        self.push(Tensor::new(vec![n, d], out)?, Op::Gather { src, taps, per_row }, ng, "gather_rows")
    }

    /// Weighted segment sums: output row `r` is `Σ_j weights[j] · x[j]` for
    /// `j` in `offsets[r]..offsets[r+1]`.
    pub fn segment_sum(&mut self, x: Var, weights: Vec<S>, offsets: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = tx.dims2("segment_sum")?;
        let valid = weights.len() == n
            && offsets.first() == Some(&0)
            && offsets.last() == Some(&n)
            && offsets.windows(2).all(|w| w[0] <= w[1]);
        if !valid {
            return Err(Error::ShapeMismatch {
                op: "segment_sum",
                left: tx.shape().to_vec(),
                right: vec![weights.len(), offsets.len()],
            });
        }
        let segs = offsets.len() - 1;
        let mut out = vec![S::zero(); segs * c];
        for (r, orow) in out.chunks_mut(c).enumerate() {
            for j in offsets[r]..offsets[r + 1] {
                for (o, &v) in orow.iter_mut().zip(&tx.data()[j * c..][..c]) {
                    *o += weights[j] * v;
                }
            }
        }
        let ng = self.needs(x);
        let op = Op::SegmentSum { x, weights, offsets };
        self.push(Tensor::new(vec![segs, c], out)?, op, ng, "segment_sum")
    }

    /// Mean over rows of the squared error summed over columns.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(mismatch("mse", tp, tt));
        }
        let rows = tp.shape().first().copied().unwrap_or(1).max(1);
        let s: S = tp.data().iter().zip(tt.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let ng = self.needs(pred) || self.needs(target);
        self.push(Tensor::scalar(s / S::of(rows as f64)), Op::Mse(pred, target), ng, "mse")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    /// 2-D convolution of `x [N,C,H,W]` with square kernels `w [O,C,K,K]`
    /// and bias `b [O]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, c, h, wd) = tx.dims4("conv2d")?;
        let (o, c2, k, k2) = tw.dims4("conv2d")?;
        if c != c2 || k != k2 || tb.len() != o || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(mismatch("conv2d", tx, tw));
        }
        let d = ConvDims {
            n,
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let npix = d.ho * d.wo;
        let ckk = c * k * k;
        let mut cols = vec![S::zero(); ckk * npix];
        let mut out = vec![S::zero(); n * o * npix];
        for s in 0..n {
            im2col(tx.data(), &d, s, &mut cols);
            let os = &mut out[s * o * npix..][..o * npix];
            for (oc, row) in os.chunks_mut(npix).enumerate() {
                row.iter_mut().for_each(|v| *v = tb.data()[oc]);
            }
            matmul_into(o, ckk, npix, tw.data(), false, &cols, false, os, true);
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        let out = Tensor::new(vec![n, o, d.ho, d.wo], out)?;
        self.push(out, Op::Conv2d { x, w, b, d }, ng, "conv2d")
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4("avg_pool2")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(mismatch("avg_pool2", tx, tx));
        }
        let quarter = S::of(0.25);
        let mut out = vec![S::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let xs = &tx.data()[p * h * w..][..h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let s = xs[2 * i * w + 2 * j]
                        + xs[2 * i * w + 2 * j + 1]
                        + xs[(2 * i + 1) * w + 2 * j]
                        + xs[(2 * i + 1) * w + 2 * j + 1];
                    out[(p * ho + i) * wo + j] = s * quarter;
                }
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(vec![n, c, ho, wo], out)?, Op::AvgPool2(x), ng, "avg_pool2")
    }

    /// Bilinear resize of `x [N,C,h,w]` to `[N,C,out_h,out_w]` with
    /// half-pixel-centered sampling and clamped borders.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4("resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(mismatch("resize_bilinear", tx, tx));
        }
        let (ay, ax) = (Axis::new(h, out_h), Axis::new(w, out_w));
        let mut out = vec![S::zero(); n * c * out_h * out_w];
        for p in 0..n * c {
            let xs = &tx.data()[p * h * w..][..h * w];
            let os = &mut out[p * out_h * out_w..][..out_h * out_w];
            for i in 0..out_h {
                let fy = S::of(ay.frac[i]);
                let (r0, r1) = (&xs[ay.lo[i] * w..][..w], &xs[ay.hi[i] * w..][..w]);
                for j in 0..out_w {
                    let fx = S::of(ax.frac[j]);
                    let top = r0[ax.lo[j]] + fx * (r0[ax.hi[j]] - r0[ax.lo[j]]);
                    let bot = r1[ax.lo[j]] + fx * (r1[ax.hi[j]] - r1[ax.lo[j]]);
                    os[i * out_w + j] = top + fy * (bot - top);
                }
            }
        }
        let ng = self.needs(x);
        let out = Tensor::new(vec![n, c, out_h, out_w], out)?;
        self.push(out, Op::Resize { x, ay, ax }, ng, "resize_bilinear")
    }

    /// Concatenates `[N,Cᵢ,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat_channels inputs"))?;
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut ctot = 0;
        for &v in xs {
            let t = self.value(v);
            let (n2, c, h2, w2) = t.dims4("concat_channels")?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(mismatch("concat_channels", self.value(first), t));
            }
            ctot += c;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * ctot * plane);
        for s in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[s * c * plane..][..c * plane]);
            }
        }
        let ng = xs.iter().any(|&v| self.needs(v));
        let out = Tensor::new(vec![n, ctot, h, w], out)?;
        self.push(out, Op::ConcatChannels(xs.to_vec()), ng, "concat_channels")
    }

    /// `[N,C,H,W] → [N·H·W, C]`, one row per pixel.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4("nchw_to_rows")?;
        let plane = h * w;
        let mut out = vec![S::zero(); n * plane * c];
        for s in 0..n {
            for ch in 0..c {
                let src = &tx.data()[(s * c + ch) * plane..][..plane];
                for (p, &v) in src.iter().enumerate() {
                    out[(s * plane + p) * c + ch] = v;
                }
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(vec![n * plane, c], out)?, Op::NchwToRows(x), ng, "nchw_to_rows")
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: t.shape().to_vec(),
                right: vec![1],
            });
        }
        self.backward_with_seed(loss, Tensor::full(t.shape(), S::one()))
    }

    /// Reverse pass seeded with `seed = ∂L/∂out`.
    pub fn backward_with_seed(&self, out: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        if out.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if seed.shape() != self.value(out).shape() {
            return Err(mismatch("backward", self.value(out), &seed));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.adjoint(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<S>>], v: Var) -> Option<&'g mut [S]> {
        if !self.needs(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn adjoint(&self, id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_into(n, m, k, gd, false, tb.data(), true, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_into(k, n, m, ta.data(), true, gd, false, gb, true);
                }
            }
            Op::AddBias(x, b) => {
                let m = self.value(*b).len();
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(gd).for_each(|(a, &v)| *a += v);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in gd.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::Add(x, y) => {
                for v in [*x, *y] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(gd).for_each(|(a, &d)| *a += d);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(gd).for_each(|(a, &d)| *a += *c * d);
                }
            }
            Op::Relu(x) => {
                let out = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &d), &o) in gx.iter_mut().zip(gd).zip(out) {
                        if o > S::zero() {
                            *a += d;
                        }
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &d), &xi) in gx.iter_mut().zip(gd).zip(xv) {
                        *a += d * sigmoid(xi);
                    }
                }
            }
            Op::Exp(x) => {
                let out = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &d), &o) in gx.iter_mut().zip(gd).zip(out) {
                        *a += d * o;
                    }
                }
            }
            Op::MulCols(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let m = ts.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for (grow, drow) in gx.chunks_mut(m).zip(gd.chunks(m)) {
                        for ((a, &d), &sv) in grow.iter_mut().zip(drow).zip(ts.data()) {
                            *a += d * sv;
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    for (xrow, drow) in tx.data().chunks(m).zip(gd.chunks(m)) {
                        for ((a, &d), &xv) in gs.iter_mut().zip(drow).zip(xrow) {
                            *a += d * xv;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).shape()[1];
                let q = self.value(*b).shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for (grow, drow) in ga.chunks_mut(p).zip(gd.chunks(p + q)) {
                        grow.iter_mut().zip(&drow[..p]).for_each(|(x, &d)| *x += d);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (grow, drow) in gb.chunks_mut(q).zip(gd.chunks(p + q)) {
                        grow.iter_mut().zip(&drow[p..]).for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::MeanGroups(x, group) => {
                let m = node.value.shape()[1];
                let inv = S::one() / S::of(*group as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, grow) in gx.chunks_mut(m).enumerate() {
                        let drow = &gd[(r / group) * m..][..m];
                        grow.iter_mut().zip(drow).for_each(|(a, &d)| *a += d * inv);
                    }
                }
            }
            Op::Gather { src, taps, per_row } => {
                let d = node.value.shape()[1];
                if let Some(gs) = self.acc(grads, *src) {
                    for (drow, row_taps) in gd.chunks(d).zip(taps.chunks(*per_row)) {
                        for &(idx, w) in row_taps {
                            if w == S::zero() {
                                continue;
                            }
                            for (a, &v) in gs[idx * d..][..d].iter_mut().zip(drow) {
                                *a += w * v;
                            }
                        }
                    }
                }
            }
            Op::SegmentSum { x, weights, offsets } => {
                let c = node.value.shape()[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, drow) in gd.chunks(c).enumerate() {
                        for j in offsets[r]..offsets[r + 1] {
                            for (a, &d) in gx[j * c..][..c].iter_mut().zip(drow) {
                                *a += weights[j] * d;
                            }
                        }
                    }
                }
            }
            Op::Mse(p, t) => {
                let (tp, tt) = (self.value(*p), self.value(*t));
                let rows = tp.shape().first().copied().unwrap_or(1).max(1);
                let f = S::of(2.0) * gd[0] / S::of(rows as f64);
                if let Some(gp) = self.acc(grads, *p) {
                    for ((a, &pv), &tv) in gp.iter_mut().zip(tp.data()).zip(tt.data()) {
                        *a += f * (pv - tv);
                    }
                }
                if let Some(gt) = self.acc(grads, *t) {
                    for ((a, &pv), &tv) in gt.iter_mut().zip(tp.data()).zip(tt.data()) {
                        *a += f * (tv - pv);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += gd[0]);
                }
            }
            Op::Conv2d { x, w, b, d } => self.conv_adjoint(*x, *w, *b, d, gd, grads),
            Op::AvgPool2(x) => {
                let (_, _, h, w) = self.value(*x).dims4("avg_pool2").expect("rank 4");
                let (ho, wo) = (h / 2, w / 2);
                let quarter = S::of(0.25);
                if let Some(gx) = self.acc(grads, *x) {
                    for (p, dplane) in gd.chunks(ho * wo).enumerate() {
                        let gs = &mut gx[p * h * w..][..h * w];
                        for i in 0..ho {
                            for j in 0..wo {
                                let v = dplane[i * wo + j] * quarter;
                                gs[2 * i * w + 2 * j] += v;
                                gs[2 * i * w + 2 * j + 1] += v;
                                gs[(2 * i + 1) * w + 2 * j] += v;
                                gs[(2 * i + 1) * w + 2 * j + 1] += v;
                            }
                        }
                    }
                }
            }
            Op::Resize { x, ay, ax } => {
                let (_, _, h, w) = self.value(*x).dims4("resize_bilinear").expect("rank 4");
                let (oh, ow) = (ay.lo.len(), ax.lo.len());
                if let Some(gx) = self.acc(grads, *x) {
                    for (p, dplane) in gd.chunks(oh * ow).enumerate() {
                        let gs = &mut gx[p * h * w..][..h * w];
                        for i in 0..oh {
                            let fy = S::of(ay.frac[i]);
                            for j in 0..ow {
                                let fx = S::of(ax.frac[j]);
                                let d = dplane[i * ow + j];
                                let (top, bot) = (d * (S::one() - fy), d * fy);
                                gs[ay.lo[i] * w + ax.lo[j]] += top * (S::one() - fx);
                                gs[ay.lo[i] * w + ax.hi[j]] += top * fx;
                                gs[ay.hi[i] * w + ax.lo[j]] += bot * (S::one() - fx);
                                gs[ay.hi[i] * w + ax.hi[j]] += bot * fx;
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels(xs) => {
                let (n, ctot, h, w) = node.value.dims4("concat_channels").expect("rank 4");
                let plane = h * w;
                let mut c0 = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if let Some(gv) = self.acc(grads, v) {
                        for s in 0..n {
                            let src = &gd[(s * ctot + c0) * plane..][..c * plane];
                            gv[s * c * plane..][..c * plane]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &d)| *a += d);
                        }
                    }
                    c0 += c;
                }
            }
            Op::NchwToRows(x) => {
                let (n, c, h, w) = self.value(*x).dims4("nchw_to_rows").expect("rank 4");
                let plane = h * w;
                if let Some(gx) = self.acc(grads, *x) {
                    for s in 0..n {
                        for ch in 0..c {
                            let gs = &mut gx[(s * c + ch) * plane..][..plane];
                            for (p, a) in gs.iter_mut().enumerate() {
                                *a += gd[(s * plane + p) * c + ch];
                            }
                        }
                    }
                }
            }
        }
    }

    fn conv_adjoint(&self, x: Var, w: Var, b: Var, d: &ConvDims, gd: &[S], grads: &mut [Option<Tensor<S>>]) {
        let npix = d.ho * d.wo;
        let ckk = d.c * d.k * d.k;
        if let Some(gb) = self.acc(grads, b) {
            for s in 0..d.n {
                for (oc, row) in gd[s * d.o * npix..][..d.o * npix].chunks(npix).enumerate() {
                    gb[oc] += row.iter().copied().sum::<S>();
                }
            }
        }
        let mut cols = vec![S::zero(); ckk * npix];
        if self.needs(w) {
            for s in 0..d.n {
                im2col(self.value(x).data(), d, s, &mut cols);
                let gs = &gd[s * d.o * npix..][..d.o * npix];
                let gw = self.acc(grads, w).expect("needs grad");
                matmul_into(d.o, npix, ckk, gs, false, &cols, true, gw, true);
            }
        }
        if self.needs(x) {
            let wv = self.value(w).data();
            for s in 0..d.n {
                let gs = &gd[s * d.o * npix..][..d.o * npix];
                matmul_into(ckk, d.o, npix, wv, true, gs, false, &mut cols, false);
                let gx = self.acc(grads, x).expect("needs grad");
                col2im(&cols, d, s, gx);
            }
        }
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: BTreeMap<String, Var>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of `v`, or `None` when no gradient flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every parameter used by the graph; parameters that did not
    /// influence the output get zeros.
    pub fn params(&self) -> BTreeMap<String, Tensor<S>> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]));
                (name.clone(), g)
            })
            .collect()
    }
}
