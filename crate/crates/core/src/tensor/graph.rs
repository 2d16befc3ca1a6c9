//! Tape-based reverse-mode autodiff.
//!
//! Every operation appends a node to the [`Graph`]; since inputs always exist
//! before their outputs, node order is a topological order and `backward`
//! simply walks it in reverse, visiting each node once.

use rayon::prelude::*;

use super::linalg::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPadding {
    /// Zero padding so the output extent is `ceil(input / stride)`.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Unfold one image (`h×w×cin`) into `(oh·ow) × (kh·kw·cin)` patches.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let plen = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * plen..][..plen];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                        let dst = &mut row[(ky * self.kw + kx) * self.cin..][..self.cin];
                        if iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
                            dst.fill(0.0);
                        } else {
                            let src = (iy as usize * self.w + ix as usize) * self.cin;
                            dst.copy_from_slice(&img[src..src + self.cin]);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-add patch gradients back.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let plen = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols[(oy * self.ow + ox) * plen..][..plen];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy as usize >= self.h {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                        if ix < 0 || ix as usize >= self.w {
                            continue;
                        }
                        let dst = (iy as usize * self.w + ix as usize) * self.cin;
                        let src = &row[(ky * self.kw + kx) * self.cin..][..self.cin];
                        for (d, s) in img[dst..dst + self.cin].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values each channel statistic was taken over.
    pub count: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BackwardOptions {
    /// Guided backpropagation: relu nodes also block negative incoming gradient.
    pub guided_relu: bool,
    /// Record, per relu node, which positions the guided rule zeroed.
    pub record_guided: bool,
    /// Keep gradients of intermediate nodes, not only of leaves.
    pub retain_grads: bool,
}

#[derive(Clone, Debug, Default)]
pub struct BackwardReport {
    /// `(relu output node, flat indices where the guided rule blocked a nonzero gradient)`.
    pub guided_blocked: Vec<(Var, Vec<usize>)>,
}

enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: Vec<usize>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Gap {
        x: Var,
        spatial: usize,
    },
    Sum(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
}

/// How the right operand of a binary op maps onto the left operand's elements.
enum Broadcast {
    Same,
    /// Right operand has one element.
    Scalar,
    /// Right operand is a vector along the last axis.
    Trailing(usize),
    /// Explicit right-operand index for every left-operand element.
    Index(Vec<usize>),
}

impl Broadcast {
    fn plan(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        let err = || Error::dim(format!("cannot broadcast {b:?} onto {a:?}"));
        if b.len() > a.len() {
            return Err(err());
        }
        let offset = a.len() - b.len();
        for (i, &bd) in b.iter().enumerate() {
            if bd != 1 && bd != a[offset + i] {
                return Err(err());
            }
        }
        let b_numel: usize = b.iter().product();
        if b_numel == 1 {
            return Ok(Broadcast::Scalar);
        }
        let last = *a.last().expect("nonscalar a");
        if b_numel == last && b.last() == Some(&last) {
            return Ok(Broadcast::Trailing(last));
        }
        // General case: strides of b aligned to a, zero on broadcast axes.
        let mut strides = vec![0usize; a.len()];
        let mut s = 1;
        for i in (0..b.len()).rev() {
            if b[i] != 1 {
                strides[offset + i] = s;
            }
            s *= b[i];
        }
        let numel: usize = a.iter().product();
        let mut index = Vec::with_capacity(numel);
        let mut counter = vec![0usize; a.len()];
        let mut cur = 0usize;
        for _ in 0..numel {
            index.push(cur);
            for ax in (0..a.len()).rev() {
                counter[ax] += 1;
                cur += strides[ax];
                if counter[ax] < a[ax] {
                    break;
                }
                cur -= strides[ax] * a[ax];
                counter[ax] = 0;
            }
        }
        Ok(Broadcast::Index(index))
    }

    #[inline]
    fn map(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Trailing(c) => i % c,
            Broadcast::Index(idx) => idx[i],
        }
    }

    /// Sum a left-shaped gradient down to the right operand's shape.
    fn reduce(&self, grad: &[f64], b_numel: usize) -> Vec<f64> {
        match self {
            Broadcast::Same => grad.to_vec(),
            _ => {
                let mut out = vec![0.0; b_numel];
                for (i, g) in grad.iter().enumerate() {
                    out[self.map(i)] += g;
                }
                out
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Values are immutable once pushed.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output of shape {:?}",
                value.shape()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf (or retained intermediate) after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the node's value.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, kind: u8) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let plan = Broadcast::plan(av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let out: Vec<f64> = match kind {
            b'+' => ad.iter().enumerate().map(|(i, x)| x + bd[plan.map(i)]).collect(),
            b'-' => ad.iter().enumerate().map(|(i, x)| x - bd[plan.map(i)]).collect(),
            _ => ad.iter().enumerate().map(|(i, x)| x * bd[plan.map(i)]).collect(),
        };
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        let op = match kind {
            b'+' => Op::Add(a, b, plan),
            b'-' => Op::Sub(a, b, plan),
            _ => Op::Mul(a, b, plan),
        };
        self.push(value, op, rg)
    }

    /// `a + b`, with `b` broadcast onto `a` (right-aligned, extents equal or 1).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, b'+')
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, b'-')
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, b'*')
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Matrix product of rank-2 operands, or batched product of rank-3 operands
    /// sharing the leading extent. Transposes apply to the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::dim(format!("matmul shape mismatch: {sa:?} x {sb:?}"));
        let (batch, ra, ca, rb, cb) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => return Err(mismatch()),
        };
        let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(mismatch());
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                trans_a,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[a, b]);
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let mut inner = Vec::with_capacity(inputs.len());
        let mut total_axis = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: {base:?} vs {s:?}"
                )));
            }
            inner.push(s[axis] * tail);
            total_axis += s[axis];
        }
        let row: usize = inner.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&inner) {
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
            },
            rg,
        )
    }

    /// 2-D cross-correlation of `x: n×h×w×cin` with `kernel: kh×kw×cin×cout`,
    /// plus an optional `cout` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: ConvPadding,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] {
            return Err(Error::dim(format!(
                "conv2d: input {xs:?} incompatible with kernel {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[3]] {
                return Err(Error::dim(format!(
                    "conv2d bias {:?} does not match {} output channels",
                    self.shape(b),
                    ks[3]
                )));
            }
        }
        let (n, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        let (oh, ow, pad_top, pad_left) = match padding {
            ConvPadding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::dim(format!(
                        "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
                    )));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            ConvPadding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                if kh > h + ph || kw > w + pw {
                    return Err(Error::dim("conv2d: kernel larger than padded input"));
                }
                (oh, ow, ph / 2, pw / 2)
            }
        };
        let geom = ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        };
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let bd = bias.map(|b| self.value(b).data());
        let in_len = h * w * cin;
        let out_len = oh * ow * cout;
        let mut out = vec![0.0; n * out_len];
        out.par_chunks_mut(out_len).enumerate().for_each(|(i, o)| {
            let img = &xd[i * in_len..(i + 1) * in_len];
            if geom.is_pointwise() {
                gemm(oh * ow, cin, cout, img, false, kd, false, o, false);
            } else {
                let mut cols = vec![0.0; oh * ow * geom.patch_len()];
                geom.im2col(img, &mut cols);
                gemm(oh * ow, geom.patch_len(), cout, &cols, false, kd, false, o, false);
            }
            if let Some(bd) = bd {
                for row in o.chunks_mut(cout) {
                    for (v, b) in row.iter_mut().zip(bd) {
                        *v += b;
                    }
                }
            }
        });
        let value = Tensor::new(vec![n, oh, ow, cout], out)?;
        let mut deps = vec![x, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
            rg,
        )
    }

    /// Max pooling over the two middle axes of `n×h×w×c`, no padding.
    /// Trailing rows/columns that do not fill a window are dropped; ties go to
    /// the first (lowest index) element of the window.
    pub fn maxpool2d(&mut self, x: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("maxpool2d expects rank 4, got {s:?}")));
        }
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::contract("maxpool window and stride must be >= 1"));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        if window.0 > h || window.1 > w {
            return Err(Error::dim(format!(
                "maxpool window {window:?} exceeds input {h}x{w} (empty output)"
            )));
        }
        let oh = (h - window.0) / stride.0 + 1;
        let ow = (w - window.1) / stride.1 + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for wy in 0..window.0 {
                            for wx in 0..window.1 {
                                let iy = oy * stride.0 + wy;
                                let ix = ox * stride.1 + wx;
                                let idx = ((b * h + iy) * w + ix) * c + ch;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_i = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow, c], out)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::MaxPool { x, argmax }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Softmax over the last axis, stabilized by subtracting each slice's max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax of a scalar"))?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Global average pooling: `n×…×c → n×c`, averaging every middle axis.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::dim(format!("gap expects n×…×c, got {s:?}")));
        }
        let (n, c) = (s[0], s[s.len() - 1]);
        let spatial: usize = s[1..s.len() - 1].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            let o = &mut out[b * c..(b + 1) * c];
            for p in 0..spatial {
                for (acc, v) in o.iter_mut().zip(&xd[(b * spatial + p) * c..][..c]) {
                    *acc += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= spatial as f64);
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gap { x, spatial }, rg)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Batch normalization over every axis except the last (channel) one.
    ///
    /// With `running = None` the batch's own statistics are used and returned;
    /// otherwise the supplied `(mean, var)` make this a fixed affine map.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| Error::dim("batchnorm of a scalar"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "batchnorm: gamma/beta must have shape [{c}]"
            )));
        }
        let xd = self.value(x).data();
        let count = xd.len() / c;
        let (mean, var) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::dim("batchnorm running stats length"));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![0.0; c];
                for row in xd.chunks(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; c];
                for row in xd.chunks(c) {
                    for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *acc += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gd[ch] * h + bd[ch]);
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let train = running.is_none();
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        )?;
        let stats = train.then_some(BatchStats { mean, var, count });
        Ok((v, stats))
    }

    /// Mean over the batch of `-ln(max(p[label], 1e-12))` for `probs: n×k`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy: probs {s:?} vs {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        let pd = self.value(probs).data();
        let mut loss = 0.0;
        for (row, &l) in pd.chunks(k).zip(labels) {
            if l >= k {
                return Err(Error::contract(format!("label {l} outside 0..{k}")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "cross_entropy: probability row sums to {total}"
                )));
            }
            loss -= row[l].max(CE_CLAMP).ln();
        }
        loss /= labels.len() as f64;
        let rg = self.any_grad(&[probs]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Populate gradients of `loss` (a one-element node). Leaf gradients
    /// accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_with(loss, BackwardOptions::default()).map(|_| ())
    }

    pub fn backward_with(&mut self, loss: Var, opts: BackwardOptions) -> Result<BackwardReport> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut report = BackwardReport::default();
        let mut pending: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) || opts.retain_grads {
                accumulate(&mut self.grads[idx], &grad);
            }
            self.propagate(Var(idx), &grad, &mut pending, &opts, &mut report);
        }
        Ok(report)
    }

    fn propagate(
        &self,
        out: Var,
        g: &[f64],
        pending: &mut [Option<Vec<f64>>],
        opts: &BackwardOptions,
        report: &mut BackwardReport,
    ) {
        let wants = |v: Var| self.node(v).requires_grad;
        let mut send = |v: Var, grad: Vec<f64>| match &mut pending[v.0] {
            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(grad),
        };
        let node = self.node(out);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
                let negate = matches!(node.op, Op::Sub(..));
                if wants(*a) {
                    send(*a, g.to_vec());
                }
                if wants(*b) {
                    let mut gb = plan.reduce(g, self.value(*b).numel());
                    if negate {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    send(*b, gb);
                }
            }
            Op::Mul(a, b, plan) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    send(
                        *a,
                        g.iter().enumerate().map(|(i, gi)| gi * bd[plan.map(i)]).collect(),
                    );
                }
                if wants(*b) {
                    let prod: Vec<f64> = g.iter().zip(ad).map(|(gi, ai)| gi * ai).collect();
                    send(*b, plan.reduce(&prod, bd.len()));
                }
            }
            Op::Scale(a, f) => send(*a, g.iter().map(|v| v * f).collect()),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_a {
                            // a stored k×m: da = op(b) · gᵀ
                            gemm(k, n, m, bi, !*trans_b, gi, true, dst, false);
                        } else {
                            // da = g · op(b)ᵀ
                            gemm(m, n, k, gi, false, bi, !*trans_b, dst, false);
                        }
                    }
                    send(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // b stored n×k: db = gᵀ · op(a)
                            gemm(n, m, k, gi, true, ai, *trans_a, dst, false);
                        } else {
                            // db = op(a)ᵀ · g
                            gemm(k, m, n, ai, !*trans_a, gi, false, dst, false);
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Concat {
                inputs,
                outer,
                inner,
            } => {
                let row: usize = inner.iter().sum();
                let mut offset = 0;
                for (&v, &len) in inputs.iter().zip(inner) {
                    if wants(v) {
                        let mut gv = Vec::with_capacity(outer * len);
                        for o in 0..*outer {
                            gv.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                        }
                        send(v, gv);
                    }
                    offset += len;
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => self.conv_backward(*x, *kernel, *bias, geom, g, wants, &mut send),
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    for (gi, &src) in g.iter().zip(argmax) {
                        gx[src] += gi;
                    }
                    send(*x, gx);
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let mut blocked = Vec::new();
                let gx = g
                    .iter()
                    .zip(xd)
                    .enumerate()
                    .map(|(i, (&gi, &xi))| {
                        if xi <= 0.0 {
                            0.0
                        } else if opts.guided_relu && gi < 0.0 {
                            if opts.record_guided {
                                blocked.push(i);
                            }
                            0.0
                        } else {
                            gi
                        }
                    })
                    .collect();
                if opts.record_guided && opts.guided_relu {
                    report.guided_blocked.push((out, blocked));
                }
                send(*x, gx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(
                    *x,
                    g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect(),
                );
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = *node.value.shape().last().expect("rank >= 1");
                let mut gx = Vec::with_capacity(y.len());
                for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                send(*x, gx);
            }
            Op::Gap { x, spatial } => {
                let c = node.value.shape()[1];
                let n = node.value.shape()[0];
                let mut gx = Vec::with_capacity(n * spatial * c);
                for b in 0..n {
                    let row: Vec<f64> = g[b * c..(b + 1) * c]
                        .iter()
                        .map(|v| v / *spatial as f64)
                        .collect();
                    for _ in 0..*spatial {
                        gx.extend_from_slice(&row);
                    }
                }
                send(*x, gx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let count = (xhat.len() / c) as f64;
                let gd = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_g[ch] += gr[ch];
                        sum_gx[ch] += gr[ch] * hr[ch];
                    }
                }
                if wants(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            let scale = gd[ch] * inv_std[ch];
                            if *train {
                                gx.push(
                                    scale
                                        * (gr[ch]
                                            - sum_g[ch] / count
                                            - hr[ch] * sum_gx[ch] / count),
                                );
                            } else {
                                gx.push(scale * gr[ch]);
                            }
                        }
                    }
                    send(*x, gx);
                }
                if wants(*gamma) {
                    send(*gamma, sum_gx);
                }
                if wants(*beta) {
                    send(*beta, sum_g);
                }
            }
            Op::CrossEntropy { probs, labels } => {
                let pv = self.value(*probs);
                let k = pv.shape()[1];
                let n = labels.len() as f64;
                let mut gp = vec![0.0; pv.numel()];
                for (i, &l) in labels.iter().enumerate() {
                    let p = pv.data()[i * k + l];
                    if p > CE_CLAMP {
                        gp[i * k + l] = -g[0] / (n * p);
                    }
                }
                send(*probs, gp);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        g: &[f64],
        wants: impl Fn(Var) -> bool,
        send: &mut impl FnMut(Var, Vec<f64>),
    ) {
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let (in_len, out_len) = (geom.h * geom.w * geom.cin, geom.oh * geom.ow * geom.cout);
        let plen = geom.patch_len();
        let npos = geom.oh * geom.ow;
        if wants(x) {
            let mut gx = vec![0.0; geom.n * in_len];
            gx.par_chunks_mut(in_len).enumerate().for_each(|(i, dst)| {
                let gi = &g[i * out_len..(i + 1) * out_len];
                if geom.is_pointwise() {
                    gemm(npos, geom.cout, geom.cin, gi, false, kd, true, dst, false);
                } else {
                    let mut dcols = vec![0.0; npos * plen];
                    gemm(npos, geom.cout, plen, gi, false, kd, true, &mut dcols, false);
                    geom.col2im(&dcols, dst);
                }
            });
            send(x, gx);
        }
        if wants(kernel) {
            // Per-image partials summed in index order keep the result
            // independent of thread scheduling.
            let partials: Vec<Vec<f64>> = (0..geom.n)
                .into_par_iter()
                .map(|i| {
                    let gi = &g[i * out_len..(i + 1) * out_len];
                    let img = &xd[i * in_len..(i + 1) * in_len];
                    let mut gk = vec![0.0; plen * geom.cout];
                    if geom.is_pointwise() {
                        gemm(plen, npos, geom.cout, img, true, gi, false, &mut gk, false);
                    } else {
                        let mut cols = vec![0.0; npos * plen];
                        geom.im2col(img, &mut cols);
                        gemm(plen, npos, geom.cout, &cols, true, gi, false, &mut gk, false);
                    }
                    gk
                })
                .collect();
            let mut gk = vec![0.0; plen * geom.cout];
            for p in partials {
                gk.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
            }
            send(kernel, gk);
        }
        if let Some(b) = bias.filter(|&b| wants(b)) {
            let mut gb = vec![0.0; geom.cout];
            for row in g.chunks(geom.cout) {
                gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            send(b, gb);
        }
    }
}

const CE_CLAMP: f64 = 1e-12;

fn accumulate(slot: &mut Option<Vec<f64>>, grad: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
        None => *slot = Some(grad.to_vec()),
    }
}
