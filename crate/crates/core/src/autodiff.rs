//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Graph`]; node ids are creation
//! order, which is also a valid topological order. [`Graph::backward`] walks
//! the tape strictly in reverse and accumulates gradients only into nodes
//! that descend from a tracked parameter.
//!
//! Forward operations refuse to produce NaN or infinite values.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation implemented outside this module.
///
/// `backward` returns one gradient buffer per input, in input order. Entries
/// for inputs with `needs[i] == false` may be `None`.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Index(Var, usize),
    Matmul(Var, Var),
    SoftmaxLast(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    LayerNormChannels {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Upsample2x(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Epsilon inside the square root of [`Graph::layer_norm_channels`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient buffer for `v`; `None` when `v` does not influence the loss
    /// through tracked operations.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` as a tensor, zeros when untouched.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        let data = match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; shape.numel()],
        };
        Tensor::from_shape(shape, data).expect("gradient matches node shape")
    }
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownNode(v.0))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Untracked leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf (a trainable parameter or an input under gradcheck).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.check(a)?.value.shape(), self.check(b)?.value.shape());
        if sa != sb {
            return Err(Error::dim(op, sa.dims(), sb.dims()));
        }
        Ok(())
    }

    fn map(&mut self, op_name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let x = &self.check(a)?.value;
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = finite(op_name, Tensor::from_shape(x.shape().clone(), data)?)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = finite("add", Tensor::from_shape(x.shape().clone(), data)?)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = finite("mul", Tensor::from_shape(x.shape().clone(), data)?)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scalar_mul", a, |v| v * c, Op::ScalarMul(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.value.data().iter().sum::<f64>();
        let out = finite("sum", Tensor::scalar(s))?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::Sum(a), tracked))
    }

    /// Scalar view of one flat element of `a`.
    pub fn index(&mut self, a: Var, flat: usize) -> Result<Var> {
        let x = &self.check(a)?.value;
        if flat >= x.len() {
            return Err(Error::dim("index", x.dims(), &[flat]));
        }
        let out = Tensor::scalar(x.data()[flat]);
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::Index(a, flat), tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.check(a)?.value, &self.check(b)?.value);
        let (m, k, n) = match (x.dims(), y.dims()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => return Err(Error::dim("matmul", x.dims(), y.dims())),
        };
        let out = matmul_raw(x.data(), y.data(), m, k, n);
        let out = finite("matmul", Tensor::new(vec![m, n], out)?)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), tracked))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = &self.check(a)?.value;
        let last = *x.dims().last().expect("rank >= 1");
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(last) {
            softmax_in_place(row);
        }
        let out = finite("softmax", Tensor::from_shape(x.shape().clone(), data)?)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::SoftmaxLast(a), tracked))
    }

    /// Cross-correlation with "same" padding `(k-1)/2`.
    ///
    /// `x` is `C_in×H×W`, `w` is `C_out×C_in×k×k` with odd `k`, `b` is `C_out`.
    /// Output extents are `ceil(H/stride)×ceil(W/stride)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xv = &self.check(x)?.value;
        let wv = &self.check(w)?.value;
        let geom = ConvGeom::new(xv.shape(), wv.shape(), stride)?;
        if let Some(b) = b {
            let bv = &self.check(b)?.value;
            if bv.dims() != [geom.c_out] {
                return Err(Error::dim("conv2d bias", bv.dims(), &[geom.c_out]));
            }
        }
        let bias = b.map(|b| self.nodes[b.0].value.data());
        let out = geom.forward(xv.data(), wv.data(), bias);
        let out = finite(
            "conv2d",
            Tensor::new(vec![geom.c_out, geom.h_out, geom.w_out], out)?,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let tracked = self.tracked(&inputs);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride }, tracked))
    }

    /// Normalizes the channel vector at each spatial position of a `C×H×W`
    /// tensor, then applies per-channel `gain` and `bias`.
    pub fn layer_norm_channels(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = &self.check(x)?.value;
        let (c, h, w) = xv.shape().chw()?;
        for p in [gain, bias] {
            let pv = &self.check(p)?.value;
            if pv.dims() != [c] {
                return Err(Error::dim("layer_norm gain/bias", pv.dims(), &[c]));
            }
        }
        let (g, b) = (self.nodes[gain.0].value.data(), self.nodes[bias.0].value.data());
        let hw = h * w;
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for p in 0..hw {
            let (_, inv, xhat) = ln_stats(xd, c, hw, p);
            for ch in 0..c {
                out[ch * hw + p] = g[ch] * xhat[ch] + b[ch];
            }
            debug_assert!(inv.is_finite());
        }
        let out = finite("layer_norm", Tensor::new(vec![c, h, w], out)?)?;
        let tracked = self.tracked(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNormChannels { x, gain, bias }, tracked))
    }

    /// Nearest-neighbour upsampling of a `C×H×W` tensor to `C×2H×2W`.
    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var> {
        let xv = &self.check(a)?.value;
        let (c, h, w) = xv.shape().chw()?;
        let xd = xv.data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] = xd[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let out = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::Upsample2x(a), tracked))
    }

    /// Records an externally computed `output` of `inputs` with its own
    /// backward rule.
    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        for &v in &inputs {
            self.check(v)?;
        }
        let output = finite(op.name(), output)?;
        let tracked = self.tracked(&inputs);
        Ok(self.push(output, Op::Custom { inputs, op }, tracked))
    }

    /// Reverse sweep from a scalar `loss`. The loss gradient is seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.check(loss)?;
        if !node.value.shape().is_scalar() {
            return Err(Error::NonScalarLoss(node.value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.backward_node(node, &gy, &mut grads);
            grads[id] = Some(gy);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().clone()).collect(),
        })
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &|g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a).data(), val(*b).data());
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * xb[i];
                    }
                });
                acc(*b, &|g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * xa[i];
                    }
                });
            }
            Op::ScalarMul(a, c) => acc(*a, &|g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += c * d)),
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|g| g.iter_mut().for_each(|g| *g += gy[0])),
            Op::Index(a, flat) => acc(*a, &|g| g[*flat] += gy[0]),
            Op::Matmul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let (m, k) = (xa.dims()[0], xa.dims()[1]);
                let n = xb.dims()[1];
                // dA = dY·Bᵀ
                acc(*a, &|g| {
                    for i in 0..m {
                        for j in 0..n {
                            let d = gy[i * n + j];
                            for p in 0..k {
                                g[i * k + p] += d * xb.data()[p * n + j];
                            }
                        }
                    }
                });
                // dB = Aᵀ·dY
                acc(*b, &|g| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = xa.data()[i * k + p];
                            for j in 0..n {
                                g[p * n + j] += av * gy[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::SoftmaxLast(a) => {
                let y = &node.value;
                let last = *y.dims().last().unwrap();
                acc(*a, &|g| {
                    for ((gr, yr), dr) in g.chunks_mut(last).zip(y.data().chunks(last)).zip(gy.chunks(last)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for i in 0..last {
                            gr[i] += yr[i] * (dr[i] - dot);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride } => {
                let (xv, wv) = (val(*x), val(*w));
                let geom = ConvGeom::new(xv.shape(), wv.shape(), *stride).expect("validated in forward");
                acc(*x, &|g| geom.backward_input(wv.data(), gy, g));
                acc(*w, &|g| geom.backward_weight(xv.data(), gy, g));
                if let Some(b) = b {
                    let plane = geom.h_out * geom.w_out;
                    acc(*b, &|g| {
                        for (co, gb) in g.iter_mut().enumerate() {
                            *gb += gy[co * plane..(co + 1) * plane].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::LayerNormChannels { x, gain, bias } => {
                let xv = val(*x);
                let (c, h, w) = xv.shape().chw().unwrap();
                let hw = h * w;
                let gain_v = val(*gain).data();
                acc(*x, &|g| {
                    for p in 0..hw {
                        let (_, inv, xhat) = ln_stats(xv.data(), c, hw, p);
                        let dxhat: Vec<f64> = (0..c).map(|ch| gy[ch * hw + p] * gain_v[ch]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum::<f64>() / c as f64;
                        for ch in 0..c {
                            g[ch * hw + p] += inv * (dxhat[ch] - mean_d - xhat[ch] * mean_dx);
                        }
                    }
                });
                acc(*gain, &|g| {
                    for p in 0..hw {
                        let (_, _, xhat) = ln_stats(xv.data(), c, hw, p);
                        for ch in 0..c {
                            g[ch] += gy[ch * hw + p] * xhat[ch];
                        }
                    }
                });
                acc(*bias, &|g| {
                    for ch in 0..c {
                        g[ch] += gy[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::Upsample2x(a) => {
                let (c, h, w) = val(*a).shape().chw().unwrap();
                acc(*a, &|g| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                g[(ch * h + y / 2) * w + x / 2] += gy[(ch * 2 * h + y) * 2 * w + x];
                            }
                        }
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].tracked).collect();
                let local = op.backward(&values, &node.value, gy, &needs);
                for (v, lg) in inputs.iter().zip(local) {
                    if let Some(lg) = lg {
                        acc(*v, &|g| g.iter_mut().zip(&lg).for_each(|(g, d)| *g += d));
                    }
                }
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let row = &b[p * n..(p + 1) * n];
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Mean, inverse std and normalized channel vector at spatial position `p`.
fn ln_stats(x: &[f64], c: usize, hw: usize, p: usize) -> (f64, f64, Vec<f64>) {
    let mean = (0..c).map(|ch| x[ch * hw + p]).sum::<f64>() / c as f64;
    let var = (0..c).map(|ch| (x[ch * hw + p] - mean).powi(2)).sum::<f64>() / c as f64;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let xhat = (0..c).map(|ch| (x[ch * hw + p] - mean) * inv).collect();
    (mean, inv, xhat)
}

struct ConvGeom {
    c_in: usize,
    c_out: usize,
    k: usize,
    pad: usize,
    stride: usize,
    h: usize,
    w: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn new(x: &Shape, w: &Shape, stride: usize) -> Result<Self> {
        let (c_in, h, wd) = x.chw()?;
        let (c_out, wc_in, k) = match w.dims() {
            &[co, ci, k1, k2] if k1 == k2 && k1 % 2 == 1 => (co, ci, k1),
            _ => {
                return Err(Error::InvalidShape {
                    dims: w.dims().to_vec(),
                    reason: "conv weights must be C_out x C_in x k x k with odd k".into(),
                })
            }
        };
        if wc_in != c_in {
            return Err(Error::dim("conv2d channels", x.dims(), w.dims()));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        Ok(ConvGeom {
            c_in,
            c_out,
            k,
            pad: (k - 1) / 2,
            stride,
            h,
            w: wd,
            h_out: h.div_ceil(stride),
            w_out: wd.div_ceil(stride),
        })
    }

    /// Output columns `ox_lo..ox_hi` whose tap at kernel column `kx` lands
    /// inside the input, and the input column of the first one.
    fn col_span(&self, kx: usize) -> (usize, usize, usize) {
        let (s, pad) = (self.stride, self.pad);
        let lo = pad.saturating_sub(kx).div_ceil(s);
        // ix = ox*s + kx - pad < w
        let limit = self.w + pad;
        let hi = if kx >= limit { 0 } else { (limit - kx).div_ceil(s).min(self.w_out) };
        let hi = hi.max(lo);
        (lo, hi, (lo * s + kx).saturating_sub(pad))
    }

    /// Calls `f(out_row, in_row, ox_lo, ox_hi, ix_lo)` for every output row
    /// whose tap at kernel row `ky` lands inside the input.
    #[inline]
    fn rows(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (lo, hi, ix_lo) = self.col_span(kx);
        if lo >= hi {
            return;
        }
        for oy in 0..self.h_out {
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            f(oy, iy as usize, lo, hi, ix_lo);
        }
    }

    fn widx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c_in + ci) * self.k + ky) * self.k + kx
    }

    fn forward(&self, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
        let plane = self.h_out * self.w_out;
        let s = self.stride;
        let mut out = vec![0.0; self.c_out * plane];
        for co in 0..self.c_out {
            let o = &mut out[co * plane..(co + 1) * plane];
            if let Some(b) = b {
                o.fill(b[co]);
            }
            for ci in 0..self.c_in {
                let xin = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wv = w[self.widx(co, ci, ky, kx)];
                        self.rows(ky, kx, |oy, iy, lo, hi, ix| {
                            let orow = &mut o[oy * self.w_out + lo..oy * self.w_out + hi];
                            let xrow = xin[iy * self.w + ix..].iter().step_by(s);
                            orow.iter_mut().zip(xrow).for_each(|(o, x)| *o += wv * x);
                        });
                    }
                }
            }
        }
        out
    }

    fn backward_input(&self, w: &[f64], gy: &[f64], gx: &mut [f64]) {
        let plane = self.h_out * self.w_out;
        let s = self.stride;
        for co in 0..self.c_out {
            let d = &gy[co * plane..(co + 1) * plane];
            for ci in 0..self.c_in {
                let g = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wv = w[self.widx(co, ci, ky, kx)];
                        self.rows(ky, kx, |oy, iy, lo, hi, ix| {
                            let drow = &d[oy * self.w_out + lo..oy * self.w_out + hi];
                            let grow = g[iy * self.w + ix..].iter_mut().step_by(s);
                            grow.zip(drow).for_each(|(g, d)| *g += wv * d);
                        });
                    }
                }
            }
        }
    }

    fn backward_weight(&self, x: &[f64], gy: &[f64], gw: &mut [f64]) {
        let plane = self.h_out * self.w_out;
        let s = self.stride;
        for co in 0..self.c_out {
            let d = &gy[co * plane..(co + 1) * plane];
            for ci in 0..self.c_in {
                let xin = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let mut acc = 0.0;
                        self.rows(ky, kx, |oy, iy, lo, hi, ix| {
                            let drow = &d[oy * self.w_out + lo..oy * self.w_out + hi];
                            let xrow = xin[iy * self.w + ix..].iter().step_by(s);
                            acc += drow.iter().zip(xrow).map(|(d, x)| d * x).sum::<f64>();
                        });
                        gw[self.widx(co, ci, ky, kx)] += acc;
                    }
                }
            }
        }
    }
}
