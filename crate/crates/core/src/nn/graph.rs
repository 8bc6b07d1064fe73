//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op as it is evaluated. Parameters are pulled in
//! from a [`ParamStore`] by name, either as trainable leaves or as frozen
//! constants, and [`Graph::backward`] returns gradients keyed by parameter
//! name.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::kernels::{self, ConvGeom};
use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// An op whose forward value and input gradients are supplied by the
/// caller. Used for the loss functions, which live next to the code that
/// defines them.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    /// Gradient with respect to each input; entries for inputs in
    /// `wanted` that are `false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        wanted: &[bool],
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    LeakyRelu(Var, f64),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Resize(Var),
    Lin(Vec<(Var, f64)>),
    Softmax(Var),
    Sigmoid(Var),
    MeanList(Vec<Var>),
    FuseStats(Vec<Var>),
    Narrow { x: Var, start: usize, len: usize },
    Stack(Vec<Var>),
    ChannelSum { x: Var, channels: Vec<usize> },
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Resize(x)
            | Op::Softmax(x)
            | Op::Sigmoid(x)
            | Op::MaxPool2 { x, .. }
            | Op::Narrow { x, .. }
            | Op::ChannelSum { x, .. } => vec![*x],
            Op::Lin(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::MeanList(xs) | Op::FuseStats(xs) | Op::Stack(xs) | Op::Custom(_, xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// Gradient flows through this node.
    tracked: bool,
    param: Option<String>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Name to leaf, plus the address of the store it was read from.
    param_vars: HashMap<String, (Var, usize)>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            tracked,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].tracked = true;
        v
    }

    /// Fetches a named parameter. Repeated lookups of one name return the
    /// same leaf, so weight sharing accumulates gradients correctly. Binding
    /// one name from two different stores in a single graph panics.
    pub fn param(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Var {
        let addr = store as *const ParamStore as usize;
        if let Some(&(v, from)) = self.param_vars.get(name) {
            assert_eq!(from, addr, "parameter `{name}` already bound from another store");
            return v;
        }
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.push(t, Op::Leaf);
        let node = &mut self.nodes[v.0];
        node.tracked = trainable;
        node.param = Some(name.to_string());
        self.param_vars.insert(name.to_string(), (v, addr));
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), geom);
        self.push(out, Op::Conv2d { x, w, b, geom })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope))
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (out, argmax) = kernels::maxpool2_forward(self.value(x));
        self.push(out, Op::MaxPool2 { x, argmax })
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = kernels::resize_bilinear_forward(self.value(x), h, w);
        self.push(out, Op::Resize(x))
    }

    /// Weighted sum of same-shaped tensors.
    pub fn lin(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "empty linear combination");
        let mut out = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, c) in terms {
            out.add_scaled(self.value(v), c);
        }
        self.push(out, Op::Lin(terms.to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.lin(&[(a, 1.0), (b, 1.0)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.lin(&[(a, c)])
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_channels(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Elementwise arithmetic mean of same-shaped tensors.
    pub fn mean_list(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "mean of zero tensors");
        let shape = self.value(xs[0]).shape();
        let mut out = Tensor::zeros(shape);
        for &v in xs {
            assert_eq!(self.value(v).shape(), shape, "mean_list shape mismatch");
            out.add_assign(self.value(v));
        }
        let k = xs.len() as f64;
        out.data_mut().iter_mut().for_each(|v| *v /= k);
        self.push(out, Op::MeanList(xs.to_vec()))
    }

    /// Channel-wise `concat(mean, population variance)` across `xs`.
    pub fn fuse_stats(&mut self, xs: &[Var]) -> Var {
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = fuse_stats_forward(&parts);
        self.push(out, Op::FuseStats(xs.to_vec()))
    }

    pub fn select(&mut self, x: Var, index: usize) -> Var {
        self.narrow(x, index, 1)
    }

    /// Batch items `start..start + len`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        assert!(len > 0 && start + len <= n, "narrow {start}+{len} out of batch {n}");
        let per = t.item_len();
        let out = Tensor::from_vec([len, c, h, w], t.data()[start * per..(start + len) * per].to_vec());
        self.push(out, Op::Narrow { x, start, len })
    }

    pub fn stack(&mut self, xs: &[Var]) -> Var {
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::stack(&parts);
        self.push(out, Op::Stack(xs.to_vec()))
    }

    /// Sums the listed channels into a single channel.
    pub fn channel_sum(&mut self, x: Var, channels: &[usize]) -> Var {
        let t = self.value(x);
        let [n, _, h, w] = t.shape();
        let hw = h * w;
        let mut out = Tensor::zeros([n, 1, h, w]);
        for i in 0..n {
            let src = t.item(i);
            let dst = out.item_mut(i);
            for &c in channels {
                for (d, s) in dst.iter_mut().zip(&src[c * hw..(c + 1) * hw]) {
                    *d += s;
                }
            }
        }
        self.push(
            out,
            Op::ChannelSum {
                x,
                channels: channels.to_vec(),
            },
        )
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Var {
        let parts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&parts);
        self.push(out, Op::Custom(op, inputs.to_vec()))
    }

    /// Gradients of the scalar `root` with respect to every tracked leaf.
    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_filtered(root, |_| true)
    }

    /// Like [`Graph::backward`], but only parameters accepted by `keep` (and
    /// plain variables) receive gradients; branches that lead only to other
    /// parameters are not traversed.
    pub fn backward_filtered(&self, root: Var, keep: impl Fn(&str) -> bool) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let count = root.0 + 1;
        let mut relevant = vec![false; count];
        for i in 0..count {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            relevant[i] = match (&node.op, &node.param) {
                (Op::Leaf, Some(name)) => keep(name),
                (Op::Leaf, None) => true,
                (op, _) => op.inputs().iter().any(|v| relevant[v.0]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = (0..count).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut leaves = BTreeMap::new();

        for i in (0..count).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaves.insert(Var(i), g);
                continue;
            }
            self.propagate(node, &g, &relevant, &mut grads);
        }

        let params = leaves
            .iter()
            .filter_map(|(v, g)| {
                self.nodes[v.0]
                    .param
                    .as_ref()
                    .map(|name| (name.clone(), g.clone()))
            })
            .collect();
        Gradients { leaves, params }
    }

    fn propagate(&self, node: &Node, g: &Tensor, relevant: &[bool], grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| relevant[v.0];
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let out = kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    *geom,
                    [want(*x), want(*w), want(*b)],
                );
                if let Some(t) = out.dx {
                    acc(*x, t);
                }
                if let Some(t) = out.dweight {
                    acc(*w, t);
                }
                if let Some(t) = out.dbias {
                    acc(*b, t);
                }
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                for (gv, &o) in d.data_mut().iter_mut().zip(node.value.data()) {
                    if o <= 0.0 {
                        *gv = 0.0;
                    }
                }
                acc(*x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let mut d = g.clone();
                for (gv, &inp) in d.data_mut().iter_mut().zip(val(*x).data()) {
                    if inp <= 0.0 {
                        *gv *= slope;
                    }
                }
                acc(*x, d);
            }
            Op::MaxPool2 { x, argmax } => {
                acc(*x, kernels::maxpool2_backward(val(*x).shape(), argmax, g));
            }
            Op::Resize(x) => {
                acc(*x, kernels::resize_bilinear_backward(val(*x).shape(), g));
            }
            Op::Lin(terms) => {
                for &(v, c) in terms {
                    if want(v) {
                        acc(v, g.map(|e| e * c));
                    }
                }
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let [n, c, h, w] = p.shape();
                let hw = h * w;
                let mut d = Tensor::zeros(p.shape());
                for i in 0..n {
                    let (pi, gi) = (p.item(i), g.item(i));
                    let di = d.item_mut(i);
                    for k in 0..hw {
                        let dot: f64 = (0..c).map(|ch| pi[ch * hw + k] * gi[ch * hw + k]).sum();
                        for ch in 0..c {
                            di[ch * hw + k] = pi[ch * hw + k] * (gi[ch * hw + k] - dot);
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let mut d = g.clone();
                for (gv, &s) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= s * (1.0 - s);
                }
                acc(*x, d);
            }
            Op::MeanList(xs) => {
                let k = xs.len() as f64;
                for &v in xs {
                    if want(v) {
                        acc(v, g.map(|e| e / k));
                    }
                }
            }
            Op::FuseStats(xs) => {
                let parts: Vec<&Tensor> = xs.iter().map(|&v| val(v)).collect();
                for (j, t) in fuse_stats_backward(&parts, &node.value, g).into_iter().enumerate() {
                    if want(xs[j]) {
                        acc(xs[j], t);
                    }
                }
            }
            Op::Narrow { x, start, len } => {
                let mut d = Tensor::zeros(val(*x).shape());
                let per = d.item_len();
                d.data_mut()[start * per..(start + len) * per].copy_from_slice(g.data());
                acc(*x, d);
            }
            Op::Stack(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let shape = val(v).shape();
                    let len = val(v).len();
                    if want(v) {
                        acc(v, Tensor::from_vec(shape, g.data()[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::ChannelSum { x, channels } => {
                let [n, c, h, w] = val(*x).shape();
                let hw = h * w;
                let mut d = Tensor::zeros([n, c, h, w]);
                for i in 0..n {
                    let gi = g.item(i).to_vec();
                    let di = d.item_mut(i);
                    for &ch in channels {
                        for (dv, gv) in di[ch * hw..(ch + 1) * hw].iter_mut().zip(&gi) {
                            *dv += gv;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Custom(op, xs) => {
                let parts: Vec<&Tensor> = xs.iter().map(|&v| val(v)).collect();
                let wanted: Vec<bool> = xs.iter().map(|&v| want(v)).collect();
                let out = op.backward(&parts, &node.value, g, &wanted);
                for (j, t) in out.into_iter().enumerate() {
                    if let (Some(t), true) = (t, wanted[j]) {
                        acc(xs[j], t);
                    }
                }
            }
        }
    }
}

/// Result of a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<Var, Tensor>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf; `None` if the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
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

/// Softmax over channels, independently at every pixel.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        let xi = x.item(i);
        let oi = out.item_mut(i);
        for k in 0..hw {
            let max = (0..c).map(|ch| xi[ch * hw + k]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ch in 0..c {
                let e = (xi[ch * hw + k] - max).exp();
                oi[ch * hw + k] = e;
                total += e;
            }
            for ch in 0..c {
                oi[ch * hw + k] /= total;
            }
        }
    }
    out
}

pub(crate) fn fuse_stats_forward(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "fusion needs at least one input");
    let [n, c, h, w] = parts[0].shape();
    for p in parts {
        assert_eq!(p.shape(), [n, c, h, w], "fusion inputs differ in shape");
    }
    let k = parts.len() as f64;
    let per = c * h * w;
    let mut out = Tensor::zeros([n, 2 * c, h, w]);
    for i in 0..n {
        let oi = out.item_mut(i);
        let (mean, var) = oi.split_at_mut(per);
        for p in parts {
            for (m, v) in mean.iter_mut().zip(p.item(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k);
        for p in parts {
            for ((s, v), m) in var.iter_mut().zip(p.item(i)).zip(mean.iter()) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= k);
    }
    out
}

fn fuse_stats_backward(parts: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    let k = parts.len() as f64;
    let [n, c2, h, w] = out.shape();
    let per = (c2 / 2) * h * w;
    parts
        .iter()
        .map(|p| {
            let mut d = Tensor::zeros(p.shape());
            for i in 0..n {
                let (gm, gv) = g.item(i).split_at(per);
                let mean = &out.item(i)[..per];
                let xi = p.item(i);
                for (j, dv) in d.item_mut(i).iter_mut().enumerate() {
                    *dv = gm[j] / k + gv[j] * 2.0 * (xi[j] - mean[j]) / k;
                }
            }
            d
        })
        .collect()
}
