//! Reverse-mode differentiation via a Wengert tape.
//!
//! Every primitive the models need is recorded as a [`Op`] node holding its
//! input indices; [`Tape::backward`] replays the node list in reverse,
//! accumulating vector–Jacobian products into per-node gradients. One tape
//! owns one forward pass (a single sample); batch parallelism runs
//! independent tapes and sums their leaf gradients in a fixed order.
//!
//! [`grad_check`] compares the tape's gradients against central finite
//! differences and is the oracle the whole crate is certified against.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    ConvCircular { x: Var, w: Var, groups: usize, dilation: usize },
    ConvZeroPad { x: Var, w: Var, groups: usize, dilation: usize },
    TileChannels { src: Var, copies: usize },
    Add { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    L2OverAxes { x: Var, sensors: usize, axes: usize },
    MeanAxes { x: Var, sensors: usize, axes: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, eps: f64, mean: Vec<f64>, inv_std: Vec<f64> },
    MeanSensors { x: Var, groups: usize },
    BoxFilter { x: Var, k: usize },
    GapTime { x: Var },
    Concat { parts: Vec<Var> },
    Affine { w: Var, x: Var, b: Var },
    Dropout { x: Var, mask: Tensor },
    Sum { x: Var },
    WeightedCrossEntropy { logits: Var, label: usize, weight: f64, softmax: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Operation recorder; owns all forward values of one pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records an input. `trainable` marks gradient targets (parameters).
    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.push(Op::Leaf, t, trainable)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn conv1d_circular(&mut self, x: Var, w: Var, groups: usize, dilation: usize) -> Result<Var> {
        let y = tensor::conv1d_circular(self.value(x), self.value(w), groups, dilation)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Op::ConvCircular { x, w, groups, dilation }, y, ng))
    }

    pub fn conv1d_zeropad(&mut self, x: Var, w: Var, groups: usize, dilation: usize) -> Result<Var> {
        let y = tensor::conv1d_zeropad(self.value(x), self.value(w), groups, dilation)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Op::ConvZeroPad { x, w, groups, dilation }, y, ng))
    }

    /// Repeats a tensor `copies` times along axis 0. This is how tied kernel
    /// banks are materialized: one stored bank, one view per axis or sensor,
    /// with gradients summed back over the copies.
    pub fn tile_channels(&mut self, src: Var, copies: usize) -> Var {
        let s = self.value(src);
        let mut shape = s.shape().to_vec();
        if shape.is_empty() {
            shape = vec![1];
        }
        shape[0] *= copies;
        let mut data = Vec::with_capacity(s.numel() * copies);
        for _ in 0..copies {
            data.extend_from_slice(s.data());
        }
        let t = Tensor::from_vec(&shape, data).expect("tile shape");
        let ng = self.needs(src);
        self.push(Op::TileChannels { src, copies }, t, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(ta.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, t, ng))
    }

    /// `[C, T] + [C]`, broadcasting the bias over time.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, t_len) = self.value(x).dims2()?;
        if self.value(b).numel() != c {
            return Err(Error::shape(
                "add_bias",
                format!("bias has {} entries for {} channels", self.value(b).numel(), c),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        for ci in 0..c {
            let bv = self.value(b).data()[ci];
            for t in 0..t_len {
                data[ci * t_len + t] += bv;
            }
        }
        let t = Tensor::from_vec(&[c, t_len], data)?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddBias { x, b }, t, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(ta.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, t, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::from_vec(self.value(x).shape(), data).expect("scale");
        let ng = self.needs(x);
        self.push(Op::Scale { x, c }, t, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::from_vec(self.value(x).shape(), data).expect("relu");
        let ng = self.needs(x);
        self.push(Op::Relu { x }, t, ng)
    }

    pub fn l2_over_axes(&mut self, x: Var, sensors: usize, axes: usize) -> Result<Var> {
        let y = tensor::l2_over_axes(self.value(x), sensors, axes)?;
        let ng = self.needs(x);
        Ok(self.push(Op::L2OverAxes { x, sensors, axes }, y, ng))
    }

    /// Plain mean across the axis slots, same layout as [`Tape::l2_over_axes`].
    /// Used by the ablation that strips the ℓ2 reduction (it keeps channel
    /// counts intact but is not rotation invariant).
    pub fn mean_axes(&mut self, x: Var, sensors: usize, axes: usize) -> Result<Var> {
        let xin = self.value(x);
        let (c, t_len) = xin.dims2()?;
        if c % (sensors * axes) != 0 {
            return Err(Error::shape(
                "mean_axes",
                format!("{c} channels not divisible by {sensors} sensors x {axes} axes"),
            ));
        }
        let k = c / (sensors * axes);
        let mut out = vec![0.0; sensors * k * t_len];
        for s in 0..sensors {
            for f in 0..k {
                for a in 0..axes {
                    let src = ((s * axes + a) * k + f) * t_len;
                    for t in 0..t_len {
                        out[(s * k + f) * t_len + t] += xin.data()[src + t];
                    }
                }
            }
        }
        for v in &mut out {
            *v /= axes as f64;
        }
        let t = Tensor::from_vec(&[sensors * k, t_len], out)?;
        let ng = self.needs(x);
        Ok(self.push(Op::MeanAxes { x, sensors, axes }, t, ng))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (y, stats) =
            tensor::group_norm_fwd(self.value(x), self.value(gamma), self.value(beta), groups, eps)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::GroupNorm { x, gamma, beta, groups, eps, mean: stats.mean, inv_std: stats.inv_std },
            y,
            ng,
        ))
    }

    /// Mean over the leading sensor blocks: `[(G·C), T] -> [C, T]`.
    pub fn mean_sensors(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (c_all, t_len) = self.value(x).dims2()?;
        if groups == 0 || c_all % groups != 0 {
            return Err(Error::shape("mean_sensors", format!("{groups} groups on {c_all} channels")));
        }
        let c = c_all / groups;
        let mut data = vec![0.0; c * t_len];
        for g in 0..groups {
            for ci in 0..c {
                let src = (g * c + ci) * t_len;
                for t in 0..t_len {
                    data[ci * t_len + t] += self.value(x).data()[src + t];
                }
            }
        }
        for v in &mut data {
            *v /= groups as f64;
        }
        let t = Tensor::from_vec(&[c, t_len], data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::MeanSensors { x, groups }, t, ng))
    }

    /// Depthwise circular box filter; self-adjoint, so the backward pass is
    /// the same filter applied to the upstream gradient.
    pub fn box_filter(&mut self, x: Var, k: usize) -> Result<Var> {
        let y = tensor::box_filter_circular(self.value(x), k)?;
        let ng = self.needs(x);
        Ok(self.push(Op::BoxFilter { x, k }, y, ng))
    }

    pub fn gap_time(&mut self, x: Var) -> Result<Var> {
        let y = tensor::gap_time(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(Op::GapTime { x }, y, ng))
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(Error::shape("concat", format!("rank-1 parts only, got {:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let n = data.len();
        let t = Tensor::from_vec(&[n], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, t, ng))
    }

    /// `y = W x + b` with `W: [K, D]`, `x: [D]`, `b: [K]`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (k, d) = self.value(w).dims2().map_err(|_| {
            Error::shape("affine", format!("weight must be [K, D], got {:?}", self.value(w).shape()))
        })?;
        if self.value(x).numel() != d || self.value(b).numel() != k {
            return Err(Error::shape(
                "affine",
                format!(
                    "W {:?} x {:?} b {:?}",
                    self.value(w).shape(),
                    self.value(x).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let mut data = vec![0.0; k];
        for ki in 0..k {
            let mut acc = self.value(b).data()[ki];
            let row = &self.value(w).data()[ki * d..(ki + 1) * d];
            for di in 0..d {
                acc += row[di] * self.value(x).data()[di];
            }
            data[ki] = acc;
        }
        let t = Tensor::from_vec(&[k], data)?;
        let ng = self.needs(w) || self.needs(x) || self.needs(b);
        Ok(self.push(Op::Affine { w, x, b }, t, ng))
    }

    /// Inverted dropout: keeps entries with probability `1 - p`, scaling the
    /// survivors by `1/(1-p)` so the eval-mode pass is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut Rng) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask = Tensor::from_fn(self.value(x).shape(), |_| {
            if rng.uniform() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(v, m)| v * m)
            .collect();
        let t = Tensor::from_vec(self.value(x).shape(), data).expect("dropout");
        let ng = self.needs(x);
        self.push(Op::Dropout { x, mask }, t, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Op::Sum { x }, Tensor::scalar(s), ng)
    }

    /// Class-weighted softmax cross-entropy against an integer label
    /// (0-based): `loss = weight * (logsumexp(z) - z[label])`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, label: usize, weight: f64) -> Result<Var> {
        let z = self.value(logits);
        if z.shape().len() != 1 || label >= z.numel() {
            return Err(Error::shape(
                "weighted_cross_entropy",
                format!("logits {:?}, label {}", z.shape(), label),
            ));
        }
        let m = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.data().iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum_exp.ln();
        let softmax: Vec<f64> = z.data().iter().map(|v| (v - m).exp() / sum_exp).collect();
        let loss = weight * (lse - z.data()[label]);
        let ng = self.needs(logits);
        Ok(self.push(Op::WeightedCrossEntropy { logits, label, weight, softmax }, Tensor::scalar(loss), ng))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes[output.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.nodes[output.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::from_vec(
            self.nodes[output.0].value.shape(),
            vec![1.0],
        )?);

        for i in (0..=output.0).rev() {
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(gy);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::ConvCircular { x, w, groups, dilation } => {
                    let (gx, gw) = tensor::conv1d_circular_grads(
                        self.value(*x),
                        self.value(*w),
                        &gy,
                        *groups,
                        *dilation,
                    );
                    accumulate(&mut grads, *x, gx, self.needs(*x));
                    accumulate(&mut grads, *w, gw, self.needs(*w));
                }
                Op::ConvZeroPad { x, w, groups, dilation } => {
                    let (gx, gw) = tensor::conv1d_zeropad_grads(
                        self.value(*x),
                        self.value(*w),
                        &gy,
                        *groups,
                        *dilation,
                    );
                    accumulate(&mut grads, *x, gx, self.needs(*x));
                    accumulate(&mut grads, *w, gw, self.needs(*w));
                }
                Op::TileChannels { src, copies } => {
                    let n = self.value(*src).numel();
                    let mut g = vec![0.0; n];
                    for cp in 0..*copies {
                        for idx in 0..n {
                            g[idx] += gy.data()[cp * n + idx];
                        }
                    }
                    let gt = Tensor::from_vec(self.value(*src).shape(), g)?;
                    accumulate(&mut grads, *src, gt, self.needs(*src));
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gy.clone(), self.needs(*a));
                    accumulate(&mut grads, *b, gy.clone(), self.needs(*b));
                }
                Op::AddBias { x, b } => {
                    let (c, t_len) = self.value(*x).dims2()?;
                    accumulate(&mut grads, *x, gy.clone(), self.needs(*x));
                    if self.needs(*b) {
                        let mut gb = vec![0.0; c];
                        for ci in 0..c {
                            gb[ci] = gy.data()[ci * t_len..(ci + 1) * t_len].iter().sum();
                        }
                        accumulate(&mut grads, *b, Tensor::from_vec(&[c], gb)?, true);
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        let g = elementwise_mul(&gy, self.value(*b));
                        accumulate(&mut grads, *a, g, true);
                    }
                    if self.needs(*b) {
                        let g = elementwise_mul(&gy, self.value(*a));
                        accumulate(&mut grads, *b, g, true);
                    }
                }
                Op::Scale { x, c } => {
                    let mut g = gy.clone();
                    g.scale_in_place(*c);
                    accumulate(&mut grads, *x, g, self.needs(*x));
                }
                Op::Relu { x } => {
                    let data = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    let g = Tensor::from_vec(self.value(*x).shape(), data)?;
                    accumulate(&mut grads, *x, g, self.needs(*x));
                }
                Op::L2OverAxes { x, sensors, axes } => {
                    let xin = self.value(*x);
                    let (c, t_len) = xin.dims2()?;
                    let k = c / (sensors * axes);
                    let yv = &node.value;
                    let mut g = vec![0.0; xin.numel()];
                    for s in 0..*sensors {
                        for f in 0..k {
                            for a in 0..*axes {
                                let xi = (s * axes + a) * k + f;
                                let yi = s * k + f;
                                for t in 0..t_len {
                                    let y = yv.data()[yi * t_len + t];
                                    if y > 0.0 {
                                        g[xi * t_len + t] =
                                            gy.data()[yi * t_len + t] * xin.data()[xi * t_len + t] / y;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(xin.shape(), g)?, self.needs(*x));
                }
                Op::MeanAxes { x, sensors, axes } => {
                    let xin = self.value(*x);
                    let (c, t_len) = xin.dims2()?;
                    let k = c / (sensors * axes);
                    let mut g = vec![0.0; xin.numel()];
                    for s in 0..*sensors {
                        for f in 0..k {
                            for a in 0..*axes {
                                let dst = ((s * axes + a) * k + f) * t_len;
                                for t in 0..t_len {
                                    g[dst + t] = gy.data()[(s * k + f) * t_len + t] / *axes as f64;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(xin.shape(), g)?, self.needs(*x));
                }
                Op::GroupNorm { x, gamma, beta, groups, eps: _, mean, inv_std } => {
                    let xin = self.value(*x);
                    let (c, t_len) = xin.dims2()?;
                    let cg = c / groups;
                    let m = (cg * t_len) as f64;
                    let gam = self.value(*gamma);
                    let mut gx = vec![0.0; xin.numel()];
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for g in 0..*groups {
                        let istd = inv_std[g];
                        let mu = mean[g];
                        // h = gy .* gamma (per channel); means over the group block
                        let mut sum_h = 0.0;
                        let mut sum_hxhat = 0.0;
                        for ci in 0..cg {
                            let ch = g * cg + ci;
                            for t in 0..t_len {
                                let idx = ch * t_len + t;
                                let xhat = (xin.data()[idx] - mu) * istd;
                                let h = gy.data()[idx] * gam.data()[ch];
                                sum_h += h;
                                sum_hxhat += h * xhat;
                                ggamma[ch] += gy.data()[idx] * xhat;
                                gbeta[ch] += gy.data()[idx];
                            }
                        }
                        let mean_h = sum_h / m;
                        let mean_hxhat = sum_hxhat / m;
                        for ci in 0..cg {
                            let ch = g * cg + ci;
                            for t in 0..t_len {
                                let idx = ch * t_len + t;
                                let xhat = (xin.data()[idx] - mu) * istd;
                                let h = gy.data()[idx] * gam.data()[ch];
                                gx[idx] = istd * (h - mean_h - xhat * mean_hxhat);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(xin.shape(), gx)?, self.needs(*x));
                    accumulate(&mut grads, *gamma, Tensor::from_vec(&[c], ggamma)?, self.needs(*gamma));
                    accumulate(&mut grads, *beta, Tensor::from_vec(&[c], gbeta)?, self.needs(*beta));
                }
                Op::MeanSensors { x, groups } => {
                    let (c_all, t_len) = self.value(*x).dims2()?;
                    let c = c_all / groups;
                    let mut g = vec![0.0; c_all * t_len];
                    for gi in 0..*groups {
                        for ci in 0..c {
                            for t in 0..t_len {
                                g[(gi * c + ci) * t_len + t] = gy.data()[ci * t_len + t] / *groups as f64;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[c_all, t_len], g)?, self.needs(*x));
                }
                Op::BoxFilter { x, k } => {
                    let g = tensor::box_filter_circular(&gy, *k)?;
                    accumulate(&mut grads, *x, g, self.needs(*x));
                }
                Op::GapTime { x } => {
                    let (c, t_len) = self.value(*x).dims2()?;
                    let mut g = vec![0.0; c * t_len];
                    for ci in 0..c {
                        let gv = gy.data()[ci] / t_len as f64;
                        for t in 0..t_len {
                            g[ci * t_len + t] = gv;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[c, t_len], g)?, self.needs(*x));
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        if self.needs(p) {
                            let g = Tensor::from_vec(&[n], gy.data()[off..off + n].to_vec())?;
                            accumulate(&mut grads, p, g, true);
                        }
                        off += n;
                    }
                }
                Op::Affine { w, x, b } => {
                    let (k, d) = self.value(*w).dims2()?;
                    if self.needs(*w) {
                        let mut gw = vec![0.0; k * d];
                        for ki in 0..k {
                            for di in 0..d {
                                gw[ki * d + di] = gy.data()[ki] * self.value(*x).data()[di];
                            }
                        }
                        accumulate(&mut grads, *w, Tensor::from_vec(&[k, d], gw)?, true);
                    }
                    if self.needs(*x) {
                        let mut gx = vec![0.0; d];
                        for di in 0..d {
                            for ki in 0..k {
                                gx[di] += self.value(*w).data()[ki * d + di] * gy.data()[ki];
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(&[d], gx)?, true);
                    }
                    accumulate(&mut grads, *b, gy.clone(), self.needs(*b));
                }
                Op::Dropout { x, mask } => {
                    let g = elementwise_mul(&gy, mask);
                    accumulate(&mut grads, *x, g, self.needs(*x));
                }
                Op::Sum { x } => {
                    let g = Tensor::filled(self.value(*x).shape(), gy.item());
                    accumulate(&mut grads, *x, g, self.needs(*x));
                }
                Op::WeightedCrossEntropy { logits, label, weight, softmax } => {
                    let upstream = gy.item();
                    let data: Vec<f64> = softmax
                        .iter()
                        .enumerate()
                        .map(|(k, p)| {
                            let ind = if k == *label { 1.0 } else { 0.0 };
                            upstream * weight * (p - ind)
                        })
                        .collect();
                    let n = data.len();
                    accumulate(&mut grads, *logits, Tensor::from_vec(&[n], data)?, self.needs(*logits));
                }
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }
}

fn elementwise_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.shape(), data).expect("elementwise_mul")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor, needed: bool) {
    if !needed {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot => *slot = Some(g),
    }
}

/// Central finite-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Checks a scalar function of several parameter tensors against central
/// finite differences. Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check_params<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + step;
            let fp = eval(&work)?;
            work[pi].data_mut()[i] = orig - step;
            let fm = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[pi].data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-parameter convenience wrapper around [`grad_check_params`].
pub fn grad_check<F>(f: F, theta: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_params(|tape, vars| f(tape, vars[0]), std::slice::from_ref(theta), step)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-4;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gauss())
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let theta = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(theta.clone(), true);
        let sq = tape.mul(v, v).unwrap();
        let out = tape.sum(sq);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[2.0, 4.0]);

        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                Ok(tape.sum(sq))
            },
            &theta,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let theta = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(theta, true);
        let r = tape.relu(v);
        let out = tape.sum(r);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[1.0]);
    }

    #[test]
    fn conv_circular_grad_check() {
        let x = randn(&[4, 10], 1);
        let w = randn(&[6, 2, 3], 2);
        let err = grad_check_params(
            |tape, vars| {
                let y = tape.conv1d_circular(vars[0], vars[1], 2, 2)?;
                Ok(tape.sum(y))
            },
            &[x, w],
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn conv_zeropad_grad_check() {
        let x = randn(&[2, 9], 3);
        let w = randn(&[4, 2, 5], 4);
        let err = grad_check_params(
            |tape, vars| {
                let y = tape.conv1d_zeropad(vars[0], vars[1], 1, 1)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            },
            &[x, w],
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn l2_over_axes_grad_check() {
        // keep inputs away from the norm's kink at zero
        let mut rng = Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[6, 7], |_| 2.0 + rng.uniform());
        let err = grad_check(
            |tape, v| {
                let y = tape.l2_over_axes(v, 2, 3)?;
                let r = tape.relu(y);
                Ok(tape.sum(r))
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn mean_axes_grad_check() {
        let x = randn(&[6, 5], 21);
        let err = grad_check(
            |tape, v| {
                let y = tape.mean_axes(v, 2, 3)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn group_norm_grad_check() {
        let x = randn(&[4, 6], 6);
        let gamma = Tensor::from_fn(&[4], |i| 0.5 + 0.1 * i as f64);
        let beta = randn(&[4], 7);
        let err = grad_check_params(
            |tape, vars| {
                let y = tape.group_norm(vars[0], vars[1], vars[2], 2, 1e-5)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            },
            &[x, gamma, beta],
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn affine_concat_gap_grad_check() {
        let x = randn(&[3, 8], 8);
        let w = randn(&[4, 5], 9);
        let b = randn(&[4], 10);
        let extra = randn(&[2], 11);
        let err = grad_check_params(
            |tape, vars| {
                let g = tape.gap_time(vars[0])?;
                let z = tape.concat(&[g, vars[3]])?;
                let y = tape.affine(vars[1], z, vars[2])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            },
            &[x, w, b, extra],
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn mean_sensors_tile_box_grad_check() {
        let x = randn(&[4, 10], 12);
        let w = randn(&[3, 2, 3], 13);
        let err = grad_check_params(
            |tape, vars| {
                let wt = tape.tile_channels(vars[1], 2); // [6,2,3]
                let y = tape.conv1d_circular(vars[0], wt, 2, 1)?;
                let m = tape.mean_sensors(y, 2)?;
                let s = tape.box_filter(m, 3)?;
                Ok(tape.sum(s))
            },
            &[x, w],
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn cross_entropy_grad_check() {
        let z = randn(&[6], 14);
        let err = grad_check(
            |tape, v| tape.weighted_cross_entropy(v, 2, 1.7),
            &z,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn dropout_grad_matches_mask() {
        let x = randn(&[8], 15);
        // deterministic mask: same seed on every evaluation
        let err = grad_check(
            |tape, v| {
                let mut rng = Rng::seed_from_u64(99);
                let d = tape.dropout(v, 0.5, true, &mut rng);
                let sq = tape.mul(d, d)?;
                Ok(tape.sum(sq))
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let x = randn(&[16], 16);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let mut rng = Rng::seed_from_u64(1);
        let d = tape.dropout(v, 0.5, false, &mut rng);
        assert_eq!(tape.value(d).data(), x.data());
    }

    #[test]
    fn reused_variable_accumulates_gradient() {
        // f(x) = sum(x*x) + sum(x): grad = 2x + 1
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let sq = tape.mul(v, v).unwrap();
        let s1 = tape.sum(sq);
        let s2 = tape.sum(v);
        let total = tape.add(s1, s2).unwrap();
        let grads = tape.backward(total).unwrap();
        let g = grads.get(v).unwrap();
        for i in 0..3 {
            assert!((g.data()[i] - (2.0 * x.data()[i] + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[2, 3]), true);
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn tied_bank_gradient_sums_over_copies() {
        // tile then conv with identical group inputs: gradient on the stored
        // bank must be the sum over the two realized copies.
        let x = Tensor::from_vec(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let wv = tape.leaf(w, true);
        let wt = tape.tile_channels(wv, 2);
        let y = tape.conv1d_circular(xv, wt, 2, 1).unwrap();
        let out = tape.sum(y);
        let grads = tape.backward(out).unwrap();
        // each copy sees sum(x_group) = 10
        assert_eq!(grads.get(wv).unwrap().data(), &[20.0]);
    }
}
