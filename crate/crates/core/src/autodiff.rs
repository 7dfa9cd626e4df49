//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass along
//! with the intermediates its backward rule needs. [`Tape::backward`] walks
//! the records in reverse, accumulating adjoints, and returns one gradient
//! per named parameter.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    index: usize,
}

/// A scalar-valued term with a hand-written gradient, recorded as a single
/// tape node. Implementations decide which inputs are held constant.
pub trait LossTerm {
    fn evaluate(&self, input: &Tensor) -> Result<LossEval>;
}

/// Output of a [`LossTerm`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    /// Gradient w.r.t. the term's input.
    pub grad: Tensor,
    /// Hash of the piecewise branch taken (e.g. which hinges are active);
    /// 0 for smooth terms.
    pub branch: u64,
}

/// Deliberate backward-rule corruptions used to prove the gradient checker
/// catches errors.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// ReLU passes the incoming gradient through unmasked.
    ReluPassThrough,
}

enum Op {
    Leaf,
    Param,
    Conv2d { x: usize, w: usize, b: Option<usize> },
    Relu(usize),
    MaxPool2 { x: usize, argmax: Vec<u32> },
    Upsample2(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Softmax(usize),
    StopGradient,
    Loss { x: usize, grad: Tensor },
    WeightedSum(Vec<(usize, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    fault: Option<Fault>,
    signature: u64,
}

/// Gradients keyed by parameter name, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Euclidean norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.entries.iter().flat_map(|(_, t)| t.data()).map(|v| v * v).sum())
    }

    /// Rescales all entries so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm {
            let k = max_norm / norm;
            for (_, t) in &mut self.entries {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn fnv(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0100_0000_01b3)
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), params: Vec::new(), fault: None, signature: 0xcbf2_9ce4_8422_2325 }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// Hash of every data-dependent branch taken so far: ReLU masks,
    /// pooling winners and loss-term branches. Two forward passes with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.signature
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignNode);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A named leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.push(t, Op::Param);
        self.params.push((String::from(name), v.index));
        v
    }

    /// Stride-1 "same" convolution with an odd square kernel `[o, i, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let out = conv2d_forward(&self.nodes[xi].value, &self.nodes[wi].value, bi.map(|b| &self.nodes[b].value))?;
        Ok(self.push(out, Op::Conv2d { x: xi, w: wi, b: bi }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let src = &self.nodes[xi].value;
        let mut sig = self.signature;
        let data = src
            .data()
            .iter()
            .map(|&v| {
                sig = fnv(sig, u64::from(v > 0.0));
                v.max(0.0)
            })
            .collect();
        self.signature = sig;
        let out = Tensor::from_vec(src.dims(), data)?;
        Ok(self.push(out, Op::Relu(xi)))
    }

    /// 2×2 max-pool with stride 2; ties go to the first element in
    /// row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let src = &self.nodes[xi].value;
        if src.dims().len() != 3 {
            bail!(Shape, "max_pool2 expects [c, h, w], got {:?}", src.dims());
        }
        let (c, h, w) = src.chw();
        if h % 2 != 0 || w % 2 != 0 {
            bail!(Shape, "max_pool2 needs even spatial dims, got {}x{}", h, w);
        }
        let (oh, ow) = (h / 2, w / 2);
        let d = src.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        let mut sig = self.signature;
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = (ch * h + 2 * y) * w + 2 * x;
                    let cand = [base, base + 1, base + w, base + w + 1];
                    let mut best = cand[0];
                    for &i in &cand[1..] {
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best as u32);
                    sig = fnv(sig, best as u64);
                }
            }
        }
        self.signature = sig;
        let out = Tensor::from_vec(&[c, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool2 { x: xi, argmax }))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let src = &self.nodes[xi].value;
        if src.dims().len() != 3 {
            bail!(Shape, "upsample2 expects [c, h, w], got {:?}", src.dims());
        }
        let (c, h, w) = src.chw();
        let mut out = Vec::with_capacity(c * h * w * 4);
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out.push(src.at3(ch, y / 2, x / 2));
                }
            }
        }
        let out = Tensor::from_vec(&[c, 2 * h, 2 * w], out)?;
        Ok(self.push(out, Op::Upsample2(xi)))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if !ta.same_shape(tb) {
            bail!(Shape, "operands {:?} and {:?}", ta.dims(), tb.dims());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ai, bi, Tensor::from_vec(ta.dims(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(ai, bi)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ai, bi)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let src = &self.nodes[xi].value;
        let out = Tensor::from_vec(src.dims(), src.data().iter().map(|v| v * factor).collect())?;
        Ok(self.push(out, Op::Scale(xi, factor)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(xi)))
    }

    /// Identity in the forward pass; blocks the gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.nodes[xi].value.clone();
        Ok(self.push(v, Op::StopGradient))
    }

    /// Softmax across the channel axis of a `[c, h, w]` map, stabilised by
    /// subtracting the per-pixel maximum.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let src = &self.nodes[xi].value;
        if src.dims().len() != 3 {
            bail!(Shape, "softmax expects [c, h, w], got {:?}", src.dims());
        }
        let (c, h, w) = src.chw();
        let hw = h * w;
        let d = src.data();
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let m = (0..c).map(|k| d[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = libm::exp(d[k * hw + p] - m);
                out[k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                out[k * hw + p] /= z;
            }
        }
        let out = Tensor::from_vec(&[c, h, w], out)?;
        Ok(self.push(out, Op::Softmax(xi)))
    }

    /// Records a scalar loss term evaluated on `x`.
    pub fn loss(&mut self, x: Var, term: &dyn LossTerm) -> Result<Var> {
        let xi = self.idx(x)?;
        let input = &self.nodes[xi].value;
        let LossEval { value, grad, branch } = term.evaluate(input)?;
        if !grad.same_shape(input) {
            bail!(Shape, "loss gradient {:?} vs input {:?}", grad.dims(), input.dims());
        }
        self.signature = fnv(self.signature, branch);
        Ok(self.push(Tensor::scalar(value), Op::Loss { x: xi, grad }))
    }

    /// `Σ weight · scalar` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut idx = Vec::with_capacity(terms.len());
        let mut total = 0.0;
        for &(v, wgt) in terms {
            let i = self.idx(v)?;
            if self.nodes[i].value.len() != 1 {
                bail!(Shape, "weighted_sum expects scalars, got {:?}", self.nodes[i].value.dims());
            }
            total += wgt * self.nodes[i].value.item();
            idx.push((i, wgt));
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(idx)))
    }

    /// Reverse sweep from a scalar `loss`; returns one gradient per
    /// registered parameter (zeros for parameters the loss does not reach).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            bail!(Shape, "backward needs a scalar loss, got {:?}", self.nodes[li].value.dims());
        }
        let mut adj: Vec<Option<Tensor>> = (0..=li).map(|_| None).collect();
        adj[li] = Some(Tensor::scalar(1.0));
        for i in (0..=li).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::StopGradient => {}
                Op::Param => {
                    adj[i] = Some(g);
                }
                Op::Conv2d { x, w, b } => {
                    let (gx, gw, gb) = conv2d_backward(&self.nodes[*x].value, &self.nodes[*w].value, &g);
                    accumulate(&mut adj, *x, gx);
                    accumulate(&mut adj, *w, gw);
                    if let Some(b) = b {
                        accumulate(&mut adj, *b, gb);
                    }
                }
                Op::Relu(x) => {
                    let src = &self.nodes[*x].value;
                    let data = match self.fault {
                        Some(Fault::ReluPassThrough) => g.data().to_vec(),
                        None => src.data().iter().zip(g.data()).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect(),
                    };
                    accumulate(&mut adj, *x, Tensor::from_vec(src.dims(), data)?);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut gx = Tensor::zeros(self.nodes[*x].value.dims());
                    let gd = gx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        gd[src as usize] += gv;
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::Upsample2(x) => {
                    let (c, h, w) = self.nodes[*x].value.chw();
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    let gd = gx.data_mut();
                    let (oh, ow) = (2 * h, 2 * w);
                    let go = g.data();
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gd[(ch * h + y / 2) * w + xx / 2] += go[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = Tensor::from_vec(va.dims(), g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect())?;
                    let gb = Tensor::from_vec(vb.dims(), g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect())?;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(x, f) => {
                    let gx = Tensor::from_vec(g.dims(), g.data().iter().map(|v| v * f).collect())?;
                    accumulate(&mut adj, *x, gx);
                }
                Op::Sum(x) => {
                    let dims = self.nodes[*x].value.dims();
                    let s = g.item();
                    let gx = Tensor::from_vec(dims, vec![s; dims.iter().product()])?;
                    accumulate(&mut adj, *x, gx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let (c, h, w) = y.chw();
                    let hw = h * w;
                    let (yd, gd) = (y.data(), g.data());
                    let mut gx = vec![0.0; c * hw];
                    for p in 0..hw {
                        let dot: f64 = (0..c).map(|k| yd[k * hw + p] * gd[k * hw + p]).sum();
                        for k in 0..c {
                            gx[k * hw + p] = yd[k * hw + p] * (gd[k * hw + p] - dot);
                        }
                    }
                    accumulate(&mut adj, *x, Tensor::from_vec(&[c, h, w], gx)?);
                }
                Op::Loss { x, grad } => {
                    let s = g.item();
                    let gx = Tensor::from_vec(grad.dims(), grad.data().iter().map(|v| v * s).collect())?;
                    accumulate(&mut adj, *x, gx);
                }
                Op::WeightedSum(terms) => {
                    let s = g.item();
                    for &(t, wgt) in terms {
                        accumulate(&mut adj, t, Tensor::scalar(s * wgt));
                    }
                }
            }
        }
        let entries = self
            .params
            .iter()
            .map(|(name, i)| {
                let g = if *i <= li { adj[*i].take() } else { None };
                (name.clone(), g.unwrap_or_else(|| Tensor::zeros(self.nodes[*i].value.dims())))
            })
            .collect();
        Ok(Gradients { entries })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut adj[i] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Overlap of an output row/column range with a shifted input range.
#[inline]
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

fn check_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<(usize, usize, usize, usize, usize)> {
    if x.dims().len() != 3 || w.dims().len() != 4 {
        bail!(Shape, "conv2d expects x [c, h, w] and w [o, i, k, k], got {:?} / {:?}", x.dims(), w.dims());
    }
    let (ci, h, wd) = x.chw();
    let wdims = w.dims();
    let (co, wi, k) = (wdims[0], wdims[1], wdims[2]);
    if wi != ci || wdims[3] != k || k % 2 == 0 {
        bail!(Shape, "kernel {:?} incompatible with {} input channels", wdims, ci);
    }
    if let Some(b) = b {
        if b.dims() != [co] {
            bail!(Shape, "bias {:?} for {} output channels", b.dims(), co);
        }
    }
    Ok((ci, co, h, wd, k))
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (ci, co, h, wd, k) = check_conv(x, w, b)?;
    let hw = h * wd;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; co * hw];
    let (xd, wdata) = (x.data(), w.data());
    for o in 0..co {
        let orow = &mut out[o * hw..(o + 1) * hw];
        if let Some(b) = b {
            orow.fill(b.data()[o]);
        }
        for i in 0..ci {
            let plane = &xd[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(wd, dx);
                    let wv = wdata[((o * ci + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize) * wd;
                        let dst = &mut orow[y * wd + x0..y * wd + x1];
                        let src = &plane[(src_row as isize + x0 as isize + dx) as usize..];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[co, h, wd], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (ci, h, wd) = x.chw();
    let wdims = w.dims();
    let (co, k) = (wdims[0], wdims[2]);
    let hw = h * wd;
    let pad = (k / 2) as isize;
    let (xd, wdata, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; ci * hw];
    let mut gw = vec![0.0; wdata.len()];
    let mut gb = vec![0.0; co];
    for o in 0..co {
        let grow = &gd[o * hw..(o + 1) * hw];
        gb[o] = grow.iter().sum();
        for i in 0..ci {
            let plane = &xd[i * hw..(i + 1) * hw];
            let gplane = &mut gx[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(wd, dx);
                    let widx = ((o * ci + i) * k + ky) * k + kx;
                    let wv = wdata[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src_start = (((y as isize + dy) as usize) * wd) as isize + x0 as isize + dx;
                        let src_start = src_start as usize;
                        let n = x1 - x0;
                        let gr = &grow[y * wd + x0..y * wd + x1];
                        let xs = &plane[src_start..src_start + n];
                        acc += gr.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        let gxs = &mut gplane[src_start..src_start + n];
                        for (d, s) in gxs.iter_mut().zip(gr) {
                            *d += wv * s;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (
        Tensor::from_vec(&[ci, h, wd], gx).expect("shape"),
        Tensor::from_vec(wdims, gw).expect("shape"),
        Tensor::from_vec(&[co], gb).expect("shape"),
    )
}
