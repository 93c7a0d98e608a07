//! Minimal CPU convolution-network engine: a static layer graph with
//! explicit forward/backward passes.
//!
//! The graph is a flat list of nodes in topological order (builders can only
//! reference already-created nodes). Weights live inside the ops; forward and
//! backward take `&self` so inference and per-sample gradient computation can
//! run concurrently, while weight updates require `&mut`.

mod conv;
mod norm;

pub use conv::Conv2d;
pub use norm::ChannelNorm;

use ndarray::{concatenate, Array1, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Activations and gradients are `(batch, channels, height, width)`.
pub type Tensor = Array4<f32>;

/// Per-node observed normalization statistics: `(mean, variance)` per
/// channel for normalization nodes, `None` elsewhere.
pub type NormStats = Vec<Option<(Array1<f32>, Array1<f32>)>>;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Conv(Conv2d),
    Norm(ChannelNorm),
    Relu,
    /// 2x2 max pooling with stride 2.
    MaxPool2,
    /// 2x nearest-neighbor upsampling.
    Upsample2,
    /// Channel concatenation of all inputs.
    Concat,
    /// Elementwise sum of two inputs.
    Add,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub input: NodeId,
    pub outputs: Vec<NodeId>,
}

/// Per-node state saved by the training-mode forward pass.
enum Saved {
    None,
    /// argmax position (0..4) of every pooled window
    Pool(Array4<u8>),
    /// per-(sample, channel) statistics
    Norm {
        mean: Array2<f32>,
        var: Array2<f32>,
        inv_std: Array2<f32>,
    },
}

/// Result of a forward pass; owns every intermediate activation.
pub struct ForwardPass {
    pub values: Vec<Option<Tensor>>,
    saved: Vec<Saved>,
    mode: Mode,
}

impl ForwardPass {
    pub fn output(&self, graph: &Graph, idx: usize) -> &Tensor {
        self.values[graph.outputs[idx]]
            .as_ref()
            .expect("output value present after forward")
    }

    /// Mean/variance observed per normalization node, averaged over the
    /// batch in index order. Used by the trainer for running-stat updates.
    pub fn norm_stats(&self, graph: &Graph) -> NormStats {
        let mut out = Vec::with_capacity(graph.nodes.len());
        for saved in &self.saved {
            out.push(match saved {
                Saved::Norm { mean, var, .. } => {
                    let n = mean.shape()[0] as f32;
                    Some((
                        mean.sum_axis(Axis(0)) / n,
                        var.sum_axis(Axis(0)) / n,
                    ))
                }
                _ => None,
            });
        }
        out
    }
}

/// Gradients (or any per-parameter buffers, e.g. optimizer velocity) shaped
/// like the graph's parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub by_node: Vec<Option<OpGrads>>,
}

#[derive(Debug, Clone)]
pub enum OpGrads {
    Conv {
        dw: Array4<f32>,
        db: Option<Array1<f32>>,
    },
    Norm {
        dgamma: Array1<f32>,
        dbeta: Array1<f32>,
    },
}

impl ParamGrads {
    pub fn zeros_like(graph: &Graph) -> Self {
        let by_node = graph
            .nodes
            .iter()
            .map(|node| match &node.op {
                Op::Conv(c) => Some(OpGrads::Conv {
                    dw: Array4::zeros(c.weight.raw_dim()),
                    db: c.bias.as_ref().map(|b| Array1::zeros(b.raw_dim())),
                }),
                Op::Norm(n) => Some(OpGrads::Norm {
                    dgamma: Array1::zeros(n.gamma.raw_dim()),
                    dbeta: Array1::zeros(n.beta.raw_dim()),
                }),
                _ => None,
            })
            .collect();
        Self { by_node }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.by_node.iter_mut().zip(&other.by_node) {
            match (a, b) {
                (None, None) => {}
                (
                    Some(OpGrads::Conv { dw, db }),
                    Some(OpGrads::Conv { dw: dw2, db: db2 }),
                ) => {
                    *dw += dw2;
                    if let (Some(db), Some(db2)) = (db, db2) {
                        *db += db2;
                    }
                }
                (
                    Some(OpGrads::Norm { dgamma, dbeta }),
                    Some(OpGrads::Norm {
                        dgamma: dg2,
                        dbeta: db2,
                    }),
                ) => {
                    *dgamma += dg2;
                    *dbeta += db2;
                }
                _ => panic!("mismatched gradient layouts"),
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.by_node.iter_mut().flatten() {
            match g {
                OpGrads::Conv { dw, db } => {
                    dw.mapv_inplace(|v| v * s);
                    if let Some(db) = db {
                        db.mapv_inplace(|v| v * s);
                    }
                }
                OpGrads::Norm { dgamma, dbeta } => {
                    dgamma.mapv_inplace(|v| v * s);
                    dbeta.mapv_inplace(|v| v * s);
                }
            }
        }
    }

    pub fn max_abs(&self) -> f32 {
        let mut m = 0.0f32;
        for g in self.by_node.iter().flatten() {
            match g {
                OpGrads::Conv { dw, db } => {
                    m = dw.iter().fold(m, |m, v| m.max(v.abs()));
                    if let Some(db) = db {
                        m = db.iter().fold(m, |m, v| m.max(v.abs()));
                    }
                }
                OpGrads::Norm { dgamma, dbeta } => {
                    m = dgamma.iter().fold(m, |m, v| m.max(v.abs()));
                    m = dbeta.iter().fold(m, |m, v| m.max(v.abs()));
                }
            }
        }
        m
    }
}

impl Graph {
    /// Run the graph on `x`. Train mode records what backward needs and uses
    /// per-sample normalization statistics; eval mode uses running statistics.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> ForwardPass {
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut saved: Vec<Saved> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let mut save = Saved::None;
            let value = match &node.op {
                Op::Input => x.clone(),
                Op::Conv(c) => c.forward(get(&values, node.inputs[0])),
                Op::Norm(n) => {
                    if mode == Mode::Train {
                        let (y, mean, var, inv_std) =
                            n.forward_train(get(&values, node.inputs[0]));
                        save = Saved::Norm { mean, var, inv_std };
                        y
                    } else {
                        n.forward_eval(get(&values, node.inputs[0]))
                    }
                }
                Op::Relu => get(&values, node.inputs[0]).mapv(|v| v.max(0.0)),
                Op::MaxPool2 => {
                    let (y, idx) = maxpool2_forward(get(&values, node.inputs[0]));
                    if mode == Mode::Train {
                        save = Saved::Pool(idx);
                    }
                    y
                }
                Op::Upsample2 => upsample2_forward(get(&values, node.inputs[0])),
                Op::Concat => {
                    let views: Vec<_> = node
                        .inputs
                        .iter()
                        .map(|&i| get(&values, i).view())
                        .collect();
                    let cat = concatenate(Axis(1), &views).expect("concat shapes agree");
                    // downstream ops index raw slices, so force standard layout
                    cat.as_standard_layout().to_owned()
                }
                Op::Add => get(&values, node.inputs[0]) + get(&values, node.inputs[1]),
            };
            values[id] = Some(value);
            saved.push(save);
        }
        ForwardPass { values, saved, mode }
    }

    /// Backpropagate `out_grads` (aligned with `self.outputs`) through a
    /// training-mode forward pass. Returns parameter gradients; the gradient
    /// with respect to the input image is discarded.
    pub fn backward(&self, fwd: &ForwardPass, out_grads: Vec<Tensor>) -> ParamGrads {
        assert_eq!(fwd.mode, Mode::Train, "backward requires a train-mode forward");
        assert_eq!(out_grads.len(), self.outputs.len());
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (slot, g) in self.outputs.iter().zip(out_grads) {
            accumulate(&mut grads, *slot, g);
        }
        let mut pgrads = ParamGrads::zeros_like(self);

        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Conv(c) => {
                    let x = get(&fwd.values, node.inputs[0]);
                    let Some(OpGrads::Conv { dw, db }) = pgrads.by_node[id].as_mut() else {
                        unreachable!()
                    };
                    let dx = c.backward(x, &dy, dw, db.as_mut());
                    accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::Norm(n) => {
                    let x = get(&fwd.values, node.inputs[0]);
                    let Saved::Norm { mean, inv_std, .. } = &fwd.saved[id] else {
                        panic!("missing saved norm state")
                    };
                    let Some(OpGrads::Norm { dgamma, dbeta }) = pgrads.by_node[id].as_mut()
                    else {
                        unreachable!()
                    };
                    let dx = n.backward(x, &dy, mean, inv_std, dgamma, dbeta);
                    accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::Relu => {
                    let y = get(&fwd.values, id);
                    let mut dx = dy;
                    dx.zip_mut_with(y, |d, &v| {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::MaxPool2 => {
                    let Saved::Pool(idx) = &fwd.saved[id] else {
                        panic!("missing saved pool state")
                    };
                    let x_shape = get(&fwd.values, node.inputs[0]).raw_dim();
                    let dx = maxpool2_backward(&dy, idx, x_shape);
                    accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::Upsample2 => {
                    let dx = upsample2_backward(&dy);
                    accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::Concat => {
                    let mut start = 0;
                    for &src in &node.inputs {
                        let c = get(&fwd.values, src).shape()[1];
                        let part = dy
                            .slice(ndarray::s![.., start..start + c, .., ..])
                            .to_owned();
                        accumulate(&mut grads, src, part);
                        start += c;
                    }
                }
                Op::Add => {
                    accumulate(&mut grads, node.inputs[0], dy.clone());
                    accumulate(&mut grads, node.inputs[1], dy);
                }
            }
        }
        pgrads
    }

    /// Blend observed normalization statistics into the running averages.
    pub fn update_running_stats(
        &mut self,
        stats: &[Option<(Array1<f32>, Array1<f32>)>],
        momentum: f32,
    ) {
        for (node, stat) in self.nodes.iter_mut().zip(stats) {
            if let (Op::Norm(n), Some((mean, var))) = (&mut node.op, stat) {
                n.running_mean.zip_mut_with(mean, |r, &m| {
                    *r = (1.0 - momentum) * *r + momentum * m;
                });
                n.running_var.zip_mut_with(var, |r, &v| {
                    *r = (1.0 - momentum) * *r + momentum * v;
                });
            }
        }
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|node| match &node.op {
                Op::Conv(c) => c.weight.len() + c.bias.as_ref().map_or(0, |b| b.len()),
                Op::Norm(n) => n.gamma.len() + n.beta.len(),
                _ => 0,
            })
            .sum()
    }

    /// All tensors, learnable or not, keyed by `<node name>.<slot>`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Conv(c) => {
                    out.push((
                        format!("{}.weight", node.name),
                        c.weight.shape().to_vec(),
                        c.weight.iter().copied().collect(),
                    ));
                    if let Some(b) = &c.bias {
                        out.push((
                            format!("{}.bias", node.name),
                            b.shape().to_vec(),
                            b.to_vec(),
                        ));
                    }
                }
                Op::Norm(n) => {
                    for (slot, t) in [
                        ("gamma", &n.gamma),
                        ("beta", &n.beta),
                        ("running_mean", &n.running_mean),
                        ("running_var", &n.running_var),
                    ] {
                        out.push((
                            format!("{}.{slot}", node.name),
                            t.shape().to_vec(),
                            t.to_vec(),
                        ));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Load tensors by name; every stored tensor must match an existing slot
    /// and shape, and every slot must be filled.
    pub fn load_named_tensors(
        &mut self,
        tensors: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    ) -> Result<(), String> {
        let mut filled = 0usize;
        let mut expected = 0usize;
        for node in &mut self.nodes {
            let mut fill = |name: String, shape: &[usize], dst: &mut [f32]| -> Result<(), String> {
                expected += 1;
                let (st_shape, data) = tensors
                    .get(&name)
                    .ok_or_else(|| format!("checkpoint is missing tensor `{name}`"))?;
                if st_shape != shape {
                    return Err(format!(
                        "tensor `{name}` shape mismatch: checkpoint {st_shape:?} vs model {shape:?}"
                    ));
                }
                dst.copy_from_slice(data);
                filled += 1;
                Ok(())
            };
            match &mut node.op {
                Op::Conv(c) => {
                    let shape = c.weight.shape().to_vec();
                    fill(
                        format!("{}.weight", node.name),
                        &shape,
                        c.weight.as_slice_mut().expect("standard layout"),
                    )?;
                    if let Some(b) = &mut c.bias {
                        let shape = b.shape().to_vec();
                        fill(
                            format!("{}.bias", node.name),
                            &shape,
                            b.as_slice_mut().expect("standard layout"),
                        )?;
                    }
                }
                Op::Norm(n) => {
                    for (slot, t) in [
                        ("gamma", &mut n.gamma),
                        ("beta", &mut n.beta),
                        ("running_mean", &mut n.running_mean),
                        ("running_var", &mut n.running_var),
                    ] {
                        let shape = t.shape().to_vec();
                        fill(
                            format!("{}.{slot}", node.name),
                            &shape,
                            t.as_slice_mut().expect("standard layout"),
                        )?;
                    }
                }
                _ => {}
            }
        }
        if tensors.len() != filled {
            return Err(format!(
                "checkpoint holds {} tensors but the model has {expected} slots",
                tensors.len()
            ));
        }
        Ok(())
    }
}

fn get<'a>(values: &'a [Option<Tensor>], id: NodeId) -> &'a Tensor {
    values[id].as_ref().expect("value computed before use")
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn maxpool2_forward(x: &Tensor) -> (Tensor, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooled dims must be even, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((n, c, oh, ow));
    let mut idx = Array4::zeros((n, c, oh, ow));
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    let is = idx.as_slice_mut().expect("standard layout");
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let obase = (img * c + ch) * oh * ow;
            for oy in 0..oh {
                let r0 = base + (2 * oy) * w;
                let r1 = base + (2 * oy + 1) * w;
                let orow = obase + oy * ow;
                for ox in 0..ow {
                    let cands = [
                        xs[r0 + 2 * ox],
                        xs[r0 + 2 * ox + 1],
                        xs[r1 + 2 * ox],
                        xs[r1 + 2 * ox + 1],
                    ];
                    let mut best = 0u8;
                    for k in 1..4 {
                        if cands[k as usize] > cands[best as usize] {
                            best = k;
                        }
                    }
                    ys[orow + ox] = cands[best as usize];
                    is[orow + ox] = best;
                }
            }
        }
    }
    (y, idx)
}

fn maxpool2_backward(dy: &Tensor, idx: &Array4<u8>, x_shape: ndarray::Ix4) -> Tensor {
    let (n, c, oh, ow) = dy.dim();
    let mut dx = Array4::zeros(x_shape);
    let (_, _, h, w) = dx.dim();
    let ds = dy.as_slice().expect("standard layout");
    let is = idx.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let obase = (img * c + ch) * oh * ow;
            for oy in 0..oh {
                let orow = obase + oy * ow;
                for ox in 0..ow {
                    let k = is[orow + ox] as usize;
                    let (dyy, dxx) = (k / 2, k % 2);
                    xs[base + (2 * oy + dyy) * w + 2 * ox + dxx] += ds[orow + ox];
                }
            }
        }
    }
    dx
}

fn upsample2_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let obase = (img * c + ch) * 4 * h * w;
            for iy in 0..h {
                let src = base + iy * w;
                for dyy in 0..2 {
                    let dst = obase + (2 * iy + dyy) * 2 * w;
                    for ix in 0..w {
                        let v = xs[src + ix];
                        ys[dst + 2 * ix] = v;
                        ys[dst + 2 * ix + 1] = v;
                    }
                }
            }
        }
    }
    y
}

fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (n, c, oh, ow) = dy.dim();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    let ds = dy.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let obase = (img * c + ch) * oh * ow;
            for iy in 0..h {
                let dst = base + iy * w;
                for dyy in 0..2 {
                    let src = obase + (2 * iy + dyy) * ow;
                    for ix in 0..w {
                        xs[dst + ix] += ds[src + 2 * ix] + ds[src + 2 * ix + 1];
                    }
                }
            }
        }
    }
    dx
}

/// Incrementally builds a graph, tracking channel counts so convolution
/// weights can be allocated and initialized in construction order.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    channels: Vec<usize>,
    input: Option<NodeId>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            channels: Vec::new(),
            input: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: String, op: Op, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.nodes.push(Node { name, op, inputs });
        self.channels.push(channels);
        self.nodes.len() - 1
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.channels[id]
    }

    pub fn input(&mut self, channels: usize) -> NodeId {
        let id = self.push("input".into(), Op::Input, vec![], channels);
        self.input = Some(id);
        id
    }

    /// Normal draw via Box-Muller; two uniforms per sample keeps the stream
    /// layout independent of rejection behavior.
    fn normal(&mut self, std: f32) -> f32 {
        let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        (z as f32) * std
    }

    pub fn conv(
        &mut self,
        name: &str,
        src: NodeId,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> NodeId {
        let c_in = self.channels[src];
        let fan_in = (c_in * k * k) as f32;
        let std = (2.0 / fan_in).sqrt();
        let weight = Array4::from_shape_simple_fn((c_out, c_in, k, k), || self.normal(std));
        let conv = Conv2d {
            weight,
            bias: None,
            stride,
            pad: k / 2,
        };
        self.push(name.to_string(), Op::Conv(conv), vec![src], c_out)
    }

    /// Head output convolution: small weights, explicit per-channel bias.
    pub fn conv_out(&mut self, name: &str, src: NodeId, c_out: usize, bias: &[f32]) -> NodeId {
        assert_eq!(bias.len(), c_out);
        let c_in = self.channels[src];
        let weight = Array4::from_shape_simple_fn((c_out, c_in, 1, 1), || self.normal(0.01));
        let conv = Conv2d {
            weight,
            bias: Some(Array1::from_vec(bias.to_vec())),
            stride: 1,
            pad: 0,
        };
        self.push(name.to_string(), Op::Conv(conv), vec![src], c_out)
    }

    pub fn norm(&mut self, name: &str, src: NodeId) -> NodeId {
        let c = self.channels[src];
        self.push(
            name.to_string(),
            Op::Norm(ChannelNorm::identity(c)),
            vec![src],
            c,
        )
    }

    pub fn relu(&mut self, name: &str, src: NodeId) -> NodeId {
        let c = self.channels[src];
        self.push(name.to_string(), Op::Relu, vec![src], c)
    }

    pub fn maxpool(&mut self, name: &str, src: NodeId) -> NodeId {
        let c = self.channels[src];
        self.push(name.to_string(), Op::MaxPool2, vec![src], c)
    }

    pub fn upsample(&mut self, name: &str, src: NodeId) -> NodeId {
        let c = self.channels[src];
        self.push(name.to_string(), Op::Upsample2, vec![src], c)
    }

    pub fn concat(&mut self, name: &str, srcs: &[NodeId]) -> NodeId {
        let c = srcs.iter().map(|&s| self.channels[s]).sum();
        self.push(name.to_string(), Op::Concat, srcs.to_vec(), c)
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.channels[a], self.channels[b]);
        let c = self.channels[a];
        self.push(name.to_string(), Op::Add, vec![a, b], c)
    }

    /// Convolution + normalization + ReLU ("c" block).
    pub fn cbr(&mut self, name: &str, src: NodeId, c_out: usize, k: usize, stride: usize) -> NodeId {
        let conv = self.conv(&format!("{name}.conv"), src, c_out, k, stride);
        let norm = self.norm(&format!("{name}.norm"), conv);
        self.relu(&format!("{name}.relu"), norm)
    }

    /// Parallel 3x3 and 1x1 conv-norm-ReLU branches joined by concatenation
    /// ("b" block). `c_out` must be even; each branch produces half.
    pub fn bblock(&mut self, name: &str, src: NodeId, c_out: usize) -> NodeId {
        assert!(c_out % 2 == 0, "b-block output channels must be even");
        let half = c_out / 2;
        let b3 = self.cbr(&format!("{name}.k3"), src, half, 3, 1);
        let b1 = self.cbr(&format!("{name}.k1"), src, half, 1, 1);
        self.concat(&format!("{name}.cat"), &[b3, b1])
    }

    pub fn finish(self, outputs: Vec<NodeId>) -> Graph {
        Graph {
            nodes: self.nodes,
            input: self.input.expect("graph has an input"),
            outputs,
        }
    }
}
