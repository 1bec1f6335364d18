//! Tape-based reverse-mode differentiation over a closed set of tensor primitives.
//!
//! Every primitive appends one node to a [`Tape`]; [`Tape::backward`] walks the
//! nodes in exact reverse order and accumulates adjoints additively, so a value
//! consumed by several operations receives the sum of their contributions.
//!
//! Broadcasting is deliberately narrow: [`Tape::add`] repeats a trailing-suffix
//! operand, and [`Tape::mul`] accepts either a per-channel vector or a
//! single-channel map against a `C×H×W` feature map.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{col2im, gemm, im2col, ConvGeom, Mat};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of one adjoint rule, used as a negative control for
/// gradient verification.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Multiplies the sigmoid adjoint by the given factor.
    SigmoidAdjointScale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` has shape `[C]`, `a` has shape `[C, H, W]`.
    Channel,
    /// `b` has shape `[1, H, W]`, `a` has shape `[C, H, W]`.
    Map,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
        cols: Option<Vec<f64>>,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        in_ch: usize,
    },
    ChannelPool {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass. Single-threaded: one pass owns one tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Adjoints of the leaves that require gradients.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0)?.take()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is collected by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !suffix {
            return Err(Error::shape("add", sa, sb));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let out: Vec<f64> = if av.len() == bv.len() {
            av.data().iter().zip(bv).map(|(x, y)| x + y).collect()
        } else {
            av.data()
                .chunks(bv.len())
                .flat_map(|chunk| chunk.iter().zip(bv).map(|(x, y)| x + y))
                .collect()
        };
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("sub", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Hadamard product. `b` may equal `a` in shape, be a `[C]` channel vector,
    /// or a `[1, H, W]` map broadcast over the channels of a `[C, H, W]` map.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mode = if sa == sb {
            Broadcast::Same
        } else if sa.len() == 3 && sb == [sa[0]] {
            Broadcast::Channel
        } else if sa.len() == 3 && sb.len() == 3 && sb[0] == 1 && sb[1..] == sa[1..] {
            Broadcast::Map
        } else {
            return Err(Error::shape("mul", &sa, &sb));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = match mode {
            Broadcast::Same => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            Broadcast::Channel => {
                let p = sa[1] * sa[2];
                av.chunks(p)
                    .zip(bv)
                    .flat_map(|(plane, &s)| plane.iter().map(move |x| x * s))
                    .collect()
            }
            Broadcast::Map => av
                .chunks(bv.len())
                .flat_map(|plane| plane.iter().zip(bv).map(|(x, y)| x * y))
                .collect(),
        };
        let value = Tensor::from_parts(sa, out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b, mode), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_scalar);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Digest of every piecewise branch taken so far: ReLU input signs and
    /// max-pool winners. Two passes with equal digests lie on the same smooth piece.
    pub fn branch_digest(&self) -> u64 {
        use std::hash::{DefaultHasher, Hash, Hasher};
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.value(*a).data() {
                        (x > 0.0).hash(&mut h);
                    }
                }
                Op::ChannelPool { argmax, .. } => argmax.hash(&mut h),
                Op::GlobalMaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptySequence("concat"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::from_parts(shape, data);
        let rg = self.any_grad(xs);
        Ok(self.push(value, Op::Concat(xs.to_vec()), rg))
    }

    /// Channels `start..start + len` of a map.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::invalid_shape(
                "slice_channels",
                format!("range {start}..{} outside {} channels", start + len, s[0]),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let value = Tensor::from_parts(shape, data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceChannels { x, start }, rg))
    }

    /// Cross-correlation of `x: [C, H, W]` with `w: [O, C, kh, kw]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let out_ch = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [out_ch] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[out_ch]));
            }
        }
        let geom = ConvGeom::conv(sx[0], sx[1], sx[2], sw[2], sw[3], stride, pad)
            .ok_or_else(|| {
                Error::invalid_shape(
                    "conv2d",
                    format!("output extent < 1 for input {sx:?}, kernel {sw:?}, stride {stride}, pad {pad}"),
                )
            })?;
        let p = geom.col_cols();
        let k = geom.col_rows();
        let xv = self.value(x).data();
        let cols = if geom.is_pointwise() {
            None
        } else {
            let mut cols = vec![0.0; k * p];
            im2col(xv, &geom, &mut cols);
            Some(cols)
        };
        let mut out = vec![0.0; out_ch * p];
        if let Some(b) = b {
            for (plane, &bias) in out.chunks_mut(p).zip(self.value(b).data()) {
                plane.fill(bias);
            }
        }
        let rhs = cols.as_deref().unwrap_or(xv);
        gemm(
            Mat::new(self.value(w).data(), out_ch, k),
            Mat::new(rhs, k, p),
            &mut out,
            1.0,
        );
        let value = Tensor::from_parts(vec![out_ch, geom.out_h, geom.out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch,
                cols,
            },
            rg,
        ))
    }

    /// Transposed convolution of `x: [C, H, W]` with `w: [C, O, kh, kw]`.
    /// Output extent is `(in − 1)·stride − 2·pad + k`.
    pub fn deconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] {
            return Err(Error::shape("deconv2d", &sx, &sw));
        }
        let (in_ch, out_ch) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_ch] {
                return Err(Error::shape("deconv2d bias", self.shape(b), &[out_ch]));
            }
        }
        let geom = ConvGeom::transposed(out_ch, sx[1], sx[2], sw[2], sw[3], stride, pad)
            .ok_or_else(|| {
                Error::invalid_shape(
                    "deconv2d",
                    format!("no valid output for input {sx:?}, kernel {sw:?}, stride {stride}, pad {pad}"),
                )
            })?;
        let p = geom.col_cols();
        let k = geom.col_rows();
        let mut cols = vec![0.0; k * p];
        gemm(
            Mat::new(self.value(w).data(), in_ch, k).t(),
            Mat::new(self.value(x).data(), in_ch, p),
            &mut cols,
            0.0,
        );
        let plane = geom.height * geom.width;
        let mut out = vec![0.0; out_ch * plane];
        col2im(&cols, &geom, &mut out);
        if let Some(b) = b {
            for (chunk, &bias) in out.chunks_mut(plane).zip(self.value(b).data()) {
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::from_parts(vec![out_ch, geom.height, geom.width], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            value,
            Op::Deconv2d {
                x,
                w,
                b,
                geom,
                in_ch,
            },
            rg,
        ))
    }

    /// Per-pixel mean (channel 0) and max (channel 1) across channels.
    pub fn channel_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid_shape(
                "channel_pool",
                format!("expected C×H×W, got {s:?}"),
            ));
        }
        let (c, p) = (s[0], s[1] * s[2]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; 2 * p];
        let mut argmax = vec![0u32; p];
        let (mean, max) = out.split_at_mut(p);
        max.copy_from_slice(&xv[..p]);
        mean.copy_from_slice(&xv[..p]);
        for ch in 1..c {
            let plane = &xv[ch * p..(ch + 1) * p];
            for i in 0..p {
                mean[i] += plane[i];
                if plane[i] > max[i] {
                    max[i] = plane[i];
                    argmax[i] = ch as u32;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= c as f64);
        let value = Tensor::from_parts(vec![2, s[1], s[2]], out);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::ChannelPool { x, argmax }, rg))
    }

    /// Spatial mean of each channel of a `[C, H, W]` map, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid_shape(
                "global_avg_pool",
                format!("expected C×H×W, got {s:?}"),
            ));
        }
        let p = s[1] * s[2];
        let out = self
            .value(x)
            .data()
            .chunks(p)
            .map(|plane| plane.iter().sum::<f64>() / p as f64)
            .collect();
        let value = Tensor::from_parts(vec![s[0]], out);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Spatial max of each channel of a `[C, H, W]` map, giving `[C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid_shape(
                "global_max_pool",
                format!("expected C×H×W, got {s:?}"),
            ));
        }
        let p = s[1] * s[2];
        let mut out = Vec::with_capacity(s[0]);
        let mut argmax = Vec::with_capacity(s[0]);
        for plane in self.value(x).data().chunks(p) {
            let (idx, &m) = plane.iter().enumerate().fold((0, &plane[0]), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            });
            out.push(m);
            argmax.push(idx);
        }
        let value = Tensor::from_parts(vec![s[0]], out);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::GlobalMaxPool { x, argmax }, rg))
    }

    /// `w·x + b` for a vector `x: [I]` and `w: [O, I]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 1 || sw.len() != 2 || sw[1] != sx[0] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let o = sw[0];
        let mut out = match b {
            Some(b) => {
                if self.shape(b) != [o] {
                    return Err(Error::shape("linear bias", self.shape(b), &[o]));
                }
                self.value(b).data().to_vec()
            }
            None => vec![0.0; o],
        };
        let xv = self.value(x).data();
        for (row, slot) in self.value(w).data().chunks(sx[0]).zip(out.iter_mut()) {
            *slot += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        let value = Tensor::from_parts(vec![o], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Back-propagates from a single-element `loss`, returning adjoints of every
    /// leaf created with [`Tape::variable`] that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid_shape(
                "backward",
                format!("loss must hold one value, got shape {:?}", self.shape(loss)),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; len])
                .as_mut_slice(),
        )
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
                if let Some(gb) = self.slot(grads, b) {
                    let n = gb.len();
                    for (i, d) in g.iter().enumerate() {
                        gb[i % n] += d;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(s, d)| *s -= d);
                }
            }
            Op::Mul(a, b, mode) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                match mode {
                    Broadcast::Same => {
                        if let Some(ga) = self.slot(grads, a) {
                            for i in 0..g.len() {
                                ga[i] += g[i] * bv[i];
                            }
                        }
                        if let Some(gb) = self.slot(grads, b) {
                            for i in 0..g.len() {
                                gb[i] += g[i] * av[i];
                            }
                        }
                    }
                    Broadcast::Channel => {
                        let p = g.len() / bv.len();
                        if let Some(ga) = self.slot(grads, a) {
                            for (i, s) in ga.iter_mut().enumerate() {
                                *s += g[i] * bv[i / p];
                            }
                        }
                        if let Some(gb) = self.slot(grads, b) {
                            for (c, s) in gb.iter_mut().enumerate() {
                                let r = c * p..(c + 1) * p;
                                *s += g[r.clone()]
                                    .iter()
                                    .zip(&av[r])
                                    .map(|(x, y)| x * y)
                                    .sum::<f64>();
                            }
                        }
                    }
                    Broadcast::Map => {
                        let p = bv.len();
                        if let Some(ga) = self.slot(grads, a) {
                            for (i, s) in ga.iter_mut().enumerate() {
                                *s += g[i] * bv[i % p];
                            }
                        }
                        if let Some(gb) = self.slot(grads, b) {
                            for i in 0..g.len() {
                                gb[i % p] += g[i] * av[i];
                            }
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += s * d);
                }
            }
            Op::Sigmoid(a) => {
                let k = match self.fault {
                    Some(Fault::SigmoidAdjointScale(k)) => k,
                    None => 1.0,
                };
                if let Some(ga) = self.slot(grads, a) {
                    for ((s, d), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *s += k * d * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((s, d), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *s += d * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((s, d), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        if *y > 0.0 {
                            *s += d;
                        }
                    }
                }
            }
            Op::Concat(ref xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    if let Some(gx) = self.slot(grads, x) {
                        gx.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(s, d)| *s += d);
                    }
                    offset += len;
                }
            }
            Op::SliceChannels { x, start } => {
                let inner: usize = out.shape()[1..].iter().product();
                if let Some(gx) = self.slot(grads, x) {
                    gx[start * inner..start * inner + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, d)| *s += d);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch,
                ref cols,
            } => {
                let (k, p) = (geom.col_rows(), geom.col_cols());
                let gmat = Mat::new(g, out_ch, p);
                if let Some(gw) = self.slot(grads, w) {
                    let rhs = cols.as_deref().unwrap_or_else(|| self.value(x).data());
                    gemm(gmat, Mat::new(rhs, k, p).t(), gw, 1.0);
                }
                if let Some(gb) = b.and_then(|b| self.slot(grads, b)) {
                    for (s, plane) in gb.iter_mut().zip(g.chunks(p)) {
                        *s += plane.iter().sum::<f64>();
                    }
                }
                if self.requires_grad(x) {
                    let wmat = Mat::new(self.value(w).data(), out_ch, k).t();
                    let gx = self.slot(grads, x).expect("checked");
                    if geom.is_pointwise() {
                        gemm(wmat, gmat, gx, 1.0);
                    } else {
                        let mut dcols = vec![0.0; k * p];
                        gemm(wmat, gmat, &mut dcols, 0.0);
                        col2im(&dcols, &geom, gx);
                    }
                }
            }
            Op::Deconv2d {
                x,
                w,
                b,
                geom,
                in_ch,
            } => {
                let (k, p) = (geom.col_rows(), geom.col_cols());
                let mut dcols = vec![0.0; k * p];
                im2col(g, &geom, &mut dcols);
                let dmat = Mat::new(&dcols, k, p);
                if let Some(gx) = self.slot(grads, x) {
                    gemm(Mat::new(self.value(w).data(), in_ch, k), dmat, gx, 1.0);
                }
                if let Some(gw) = self.slot(grads, w) {
                    gemm(Mat::new(self.value(x).data(), in_ch, p), dmat.t(), gw, 1.0);
                }
                if let Some(gb) = b.and_then(|b| self.slot(grads, b)) {
                    let plane = geom.height * geom.width;
                    for (s, chunk) in gb.iter_mut().zip(g.chunks(plane)) {
                        *s += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::ChannelPool { x, ref argmax } => {
                let p = argmax.len();
                let c = self.value(x).len() / p;
                if let Some(gx) = self.slot(grads, x) {
                    let inv = 1.0 / c as f64;
                    for ch in 0..c {
                        for i in 0..p {
                            gx[ch * p + i] += g[i] * inv;
                        }
                    }
                    for (i, &m) in argmax.iter().enumerate() {
                        gx[m as usize * p + i] += g[p + i];
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let c = g.len();
                if let Some(gx) = self.slot(grads, x) {
                    let p = gx.len() / c;
                    for (plane, d) in gx.chunks_mut(p).zip(g) {
                        let share = d / p as f64;
                        plane.iter_mut().for_each(|s| *s += share);
                    }
                }
            }
            Op::GlobalMaxPool { x, ref argmax } => {
                if let Some(gx) = self.slot(grads, x) {
                    let p = gx.len() / g.len();
                    for (c, (&m, d)) in argmax.iter().zip(g).enumerate() {
                        gx[c * p + m] += d;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let i_len = self.value(x).len();
                if let Some(gx) = self.slot(grads, x) {
                    for (row, d) in self.value(w).data().chunks(i_len).zip(g) {
                        gx.iter_mut().zip(row).for_each(|(s, wv)| *s += wv * d);
                    }
                }
                if let Some(gw) = self.slot(grads, w) {
                    let xv = self.value(x).data();
                    for (row, d) in gw.chunks_mut(i_len).zip(g) {
                        row.iter_mut().zip(xv).for_each(|(s, xv)| *s += d * xv);
                    }
                }
                if let Some(gb) = b.and_then(|b| self.slot(grads, b)) {
                    gb.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let share = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|s| *s += share);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().for_each(|s| *s += g[0]);
                }
            }
        }
    }
}
