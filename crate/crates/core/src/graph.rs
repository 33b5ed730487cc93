//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! A [`Graph`] records every forward operation as a node holding its output
//! value. Nodes are appended in execution order, so the node list is already
//! a topological order and [`Graph::backward`] simply walks it in reverse.
//! A graph can be differentiated once; build a fresh graph per step.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{
    self, axis_split, conv_dims, conv_weight_dims, gelu_grad, matmul_dims, numel, reduce_plan,
    Tensor,
};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupedConv {
        x: Var,
        w: Var,
        groups: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    Softmax(Var, usize),
    Mean {
        x: Var,
        kept: Vec<usize>,
        count: usize,
    },
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
    differentiated: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A free variable whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The node for a stored parameter. Each parameter gets exactly one node
    /// per graph; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).scale(factor);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).gelu();
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = self
            .value(x)
            .linear(self.value(w), b.map(|b| self.value(b)))?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    pub fn grouped_pointwise_conv(&mut self, x: Var, w: Var, groups: usize) -> Result<Var> {
        let out = self
            .value(x)
            .grouped_pointwise_conv(self.value(w), groups)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::GroupedConv { x, w, groups }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), ng))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).broadcast_to(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::BroadcastTo(x), ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax(x, axis), ng))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let (kept, count) = reduce_plan(self.shape(x), axes)?;
        let out = self.value(x).mean(axes, keepdim)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Mean { x, kept, count }, ng))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum_all());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// Layer normalization over the last axis with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gain)));
        }
        let rows = xv.numel() / d;
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        let inv_d = T::one() / T::lit(d as f64);
        for row in xv.data().chunks(d) {
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let r = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * r;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Mean cross-entropy of `logits[B×C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let shape = lv.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", shape, &[labels.len()]));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let probs = lv.softmax(1)?;
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            loss -= probs.data()[i * classes + l]
                .max(T::min_positive_value())
                .ln();
        }
        loss /= T::lit(labels.len() as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.into_data(),
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&vals, axis)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, ng))
    }

    /// Back-propagates from a scalar `loss`. A graph can be differentiated
    /// only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.differentiated {
            return Err(Error::Contract(
                "backward already ran on this graph; record a new graph".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match self.nodes[idx].op {
                Op::Constant => {}
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                }
                _ => {
                    for (input, gi) in self.input_grads(idx, &g)? {
                        accumulate(&mut grads[input.0], gi)?;
                    }
                }
            }
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf | Op::Param))
            .map(|(i, _)| i)
            .collect::<Vec<_>>();
        let mut kept: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in leaves {
            kept[i] = grads[i].take();
        }
        Ok(Gradients {
            by_node: kept,
            params: self.params.clone(),
        })
    }

    /// Gradients flowing into the inputs of node `idx` given its output gradient.
    fn input_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        let wants = |v: Var| self.needs(v);
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    out.push((*a, g.sum_to_shape(self.shape(*a))?));
                }
                if wants(*b) {
                    out.push((*b, g.sum_to_shape(self.shape(*b))?));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    out.push((*a, g.sum_to_shape(self.shape(*a))?));
                }
                if wants(*b) {
                    out.push((*b, g.scale(-T::one()).sum_to_shape(self.shape(*b))?));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.mul(self.value(*b))?.sum_to_shape(self.shape(*a))?));
                }
                if wants(*b) {
                    out.push((*b, g.mul(self.value(*a))?.sum_to_shape(self.shape(*b))?));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.scale(*c))),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * gelu_grad(xv))
                    .collect();
                out.push((*a, Tensor::new(x.shape(), data)?));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k, n, shared) = matmul_dims(av.shape(), bv.shape())?;
                if wants(*a) {
                    let mut ga = vec![T::zero(); av.numel()];
                    for bi in 0..batch {
                        let gb = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let bm = if shared {
                            bv.data()
                        } else {
                            &bv.data()[bi * k * n..(bi + 1) * k * n]
                        };
                        tensor::gemm_nt_acc(m, n, k, gb, bm, &mut ga[bi * m * k..(bi + 1) * m * k]);
                    }
                    out.push((*a, Tensor::new(av.shape(), ga)?));
                }
                if wants(*b) {
                    let mut gbv = vec![T::zero(); bv.numel()];
                    for bi in 0..batch {
                        let gb = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let am = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let dst = if shared {
                            &mut gbv[..]
                        } else {
                            &mut gbv[bi * k * n..(bi + 1) * k * n]
                        };
                        tensor::gemm_tn_acc(m, k, n, am, gb, dst);
                    }
                    out.push((*b, Tensor::new(bv.shape(), gbv)?));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (fan_out, fan_in) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / fan_in;
                if wants(*x) {
                    let mut gx = vec![T::zero(); xv.numel()];
                    tensor::gemm_acc(rows, fan_out, fan_in, g.data(), wv.data(), &mut gx);
                    out.push((*x, Tensor::new(xv.shape(), gx)?));
                }
                if wants(*w) {
                    let mut gw = vec![T::zero(); wv.numel()];
                    tensor::gemm_tn_acc(rows, fan_out, fan_in, g.data(), xv.data(), &mut gw);
                    out.push((*w, Tensor::new(wv.shape(), gw)?));
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let mut gb = vec![T::zero(); fan_out];
                    for row in g.data().chunks(fan_out) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((b, Tensor::new(&[fan_out], gb)?));
                }
            }
            Op::GroupedConv { x, w, groups } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (lead, c_in, len) = conv_dims(xv.shape())?;
                let (c_out, cin_g, cout_g) = conv_weight_dims(c_in, wv.shape(), *groups)?;
                let mut gx = wants(*x).then(|| vec![T::zero(); xv.numel()]);
                let mut gw = wants(*w).then(|| vec![T::zero(); wv.numel()]);
                for bi in 0..lead {
                    let gb = &g.data()[bi * c_out * len..(bi + 1) * c_out * len];
                    let xb = &xv.data()[bi * c_in * len..(bi + 1) * c_in * len];
                    for grp in 0..*groups {
                        let gg = &gb[grp * cout_g * len..(grp + 1) * cout_g * len];
                        let wr = grp * cout_g * cin_g..(grp + 1) * cout_g * cin_g;
                        let xr = grp * cin_g * len..(grp + 1) * cin_g * len;
                        if let Some(gx) = gx.as_mut() {
                            let dst = &mut gx[bi * c_in * len..(bi + 1) * c_in * len][xr.clone()];
                            tensor::gemm_tn_acc(
                                cout_g,
                                cin_g,
                                len,
                                &wv.data()[wr.clone()],
                                gg,
                                dst,
                            );
                        }
                        if let Some(gw) = gw.as_mut() {
                            tensor::gemm_nt_acc(cout_g, len, cin_g, gg, &xb[xr], &mut gw[wr]);
                        }
                    }
                }
                if let Some(gx) = gx {
                    out.push((*x, Tensor::new(xv.shape(), gx)?));
                }
                if let Some(gw) = gw {
                    out.push((*w, Tensor::new(wv.shape(), gw)?));
                }
            }
            Op::Reshape(x) => out.push((*x, g.reshape(self.shape(*x))?)),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                out.push((*x, g.permute(&inv)?));
            }
            Op::BroadcastTo(x) => out.push((*x, g.sum_to_shape(self.shape(*x))?)),
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let mut gx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: T = (0..n).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape(), gx)?));
            }
            Op::Mean { x, kept, count } => {
                let inv = T::one() / T::lit(*count as f64);
                let gx = g.reshape(kept)?.broadcast_to(self.shape(*x))?.scale(inv);
                out.push((*x, gx));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x), g.item()))),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                if wants(*x) {
                    let mut gx = vec![T::zero(); xhat.len()];
                    let inv_d = T::one() / T::lit(d as f64);
                    for (r, ((gr, hr), dst)) in g
                        .data()
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let m1 = dh.iter().copied().sum::<T>() * inv_d;
                        let m2 = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for j in 0..d {
                            dst[j] = rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                    out.push((*x, Tensor::new(self.shape(*x), gx)?));
                }
                if wants(*gain) {
                    let mut gg = vec![T::zero(); d];
                    for (gr, hr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gain, Tensor::new(&[d], gg)?));
                }
                if wants(*bias) {
                    let mut gb = vec![T::zero(); d];
                    for gr in g.data().chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                    out.push((*bias, Tensor::new(&[d], gb)?));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = self.shape(*logits);
                let classes = shape[1];
                let scale = g.item() / T::lit(labels.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * classes + l] -= scale;
                }
                out.push((*logits, Tensor::new(shape, gl)?));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if wants(p) {
                        out.push((p, g.narrow(*axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = axis_split(xs, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    let base = o * n * inner + start * inner;
                    gx[base..base + len * inner].copy_from_slice(src);
                }
                out.push((*x, Tensor::new(xs, gx)?));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::shape(
                    "gradient accumulation",
                    acc.shape(),
                    g.shape(),
                ));
            }
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}

/// Gradients of leaves and parameters after [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a [`Graph::variable`] or parameter node; `None` if the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// One gradient per stored parameter, zeros where the loss does not reach it.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}
