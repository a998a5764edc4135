//! Convolutional classifier with hand-written backward pass.
//!
//! Activations are stored channel-major as `[C, B, H, W]` so that a
//! convolution over the whole batch is a single GEMM against the im2col
//! matrix `[C_in * k * k, B * H_out * W_out]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{ModelParams, Tensor};
use super::scalar::{matmul, Scalar};
use crate::datamodel::Label;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Network topology. `Reference` is the desk-scale default; `ResNet34`
/// follows the 3-4-6-3 basic-block layout (without normalization layers).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// `widths.len()` blocks of 3x3 conv, ReLU, 2x average pool.
    Plain { input_size: usize, widths: Vec<usize> },
    ResNet34 { input_size: usize },
}

impl Architecture {
    /// Four blocks, widths 16-32-64-64.
    pub fn reference(input_size: usize) -> Self {
        Architecture::Plain {
            input_size,
            widths: vec![16, 32, 64, 64],
        }
    }

    pub fn resnet34(input_size: usize) -> Self {
        Architecture::ResNet34 { input_size }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Architecture::Plain { input_size, .. } | Architecture::ResNet34 { input_size } => {
                *input_size
            }
        }
    }

    pub fn id(&self) -> String {
        match self {
            Architecture::Plain { input_size, widths } => {
                let w: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
                format!("plain-{}@{}", w.join("-"), input_size)
            }
            Architecture::ResNet34 { input_size } => format!("resnet34@{input_size}"),
        }
    }

    /// Parses `reference`, `resnet34` or `plain:16,32,64,64`.
    pub fn parse(spec: &str, input_size: usize) -> Result<Self> {
        match spec {
            "reference" => Ok(Architecture::reference(input_size)),
            "resnet34" => Ok(Architecture::resnet34(input_size)),
            s if s.starts_with("plain:") => {
                let widths = s[6..]
                    .split(',')
                    .map(|w| w.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Config(format!("bad architecture {s:?}")))?;
                Ok(Architecture::Plain { input_size, widths })
            }
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Shape {
    c: usize,
    b: usize,
    h: usize,
    w: usize,
}

impl Shape {
    fn len(&self) -> usize {
        self.c * self.b * self.h * self.w
    }
}

#[derive(Clone, Debug)]
struct Act<F> {
    shape: Shape,
    data: Vec<F>,
}

#[derive(Clone, Debug)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    weight: usize,
    bias: usize,
}

impl ConvSpec {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

#[derive(Clone, Debug)]
enum Node {
    Conv(ConvSpec),
    Relu,
    AvgPool2,
    MaxPool3,
    /// `body(x) + shortcut(x)`; identity shortcut when `None`.
    Residual {
        body: Vec<Node>,
        shortcut: Option<ConvSpec>,
    },
}

enum Cache<F> {
    Conv { cols: Vec<F>, input: Shape },
    Relu { active: Vec<bool> },
    AvgPool2 { input: Shape },
    MaxPool3 { argmax: Vec<u32>, input: Shape },
    Residual { body: Vec<Cache<F>>, shortcut: Option<Box<Cache<F>>> },
}

/// Everything the backward pass needs from one training forward.
pub struct Tape<F> {
    caches: Vec<Cache<F>>,
    last: Shape,
    features: Vec<F>,
}

/// Raw batch outputs, row-major `[B, 3]` logits and `[B, F]` features.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutput<F> {
    pub batch: usize,
    pub feature_dim: usize,
    pub logits: Vec<F>,
    pub features: Vec<F>,
}

/// Per-slice output: pooled last-conv feature and class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub feature: Vec<f64>,
    pub logits: [f64; 3],
    pub probs: [f64; 3],
}

impl ForwardOutput {
    /// Argmax with ties resolved to the lowest class index.
    pub fn predicted(&self) -> Label {
        let mut best = 0;
        for k in 1..3 {
            if self.probs[k] > self.probs[best] {
                best = k;
            }
        }
        Label::from_index(best).unwrap()
    }
}

pub fn softmax3(logits: [f64; 3]) -> [f64; 3] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|z| (z - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

impl<F: Scalar> BatchOutput<F> {
    pub fn outputs(&self) -> Vec<ForwardOutput> {
        (0..self.batch)
            .map(|i| {
                let logits = [0, 1, 2].map(|k| self.logits[i * 3 + k].as_f64());
                ForwardOutput {
                    feature: self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
                        .iter()
                        .map(|v| v.as_f64())
                        .collect(),
                    logits,
                    probs: softmax3(logits),
                }
            })
            .collect()
    }
}

/// Compiled network: topology plus parameter layout.
#[derive(Clone, Debug)]
pub struct Network {
    arch: Architecture,
    nodes: Vec<Node>,
    names: Vec<String>,
    specs: Vec<(String, Vec<usize>)>,
    /// Indices of convs whose weights start at zero (last conv of each
    /// residual branch).
    zero_init: Vec<usize>,
    feature_dim: usize,
    head_weight: usize,
    head_bias: usize,
}

struct Builder {
    specs: Vec<(String, Vec<usize>)>,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvSpec {
        let weight = self.specs.len();
        self.specs.push((format!("{name}.weight"), vec![cout, cin, k, k]));
        let bias = self.specs.len();
        self.specs.push((format!("{name}.bias"), vec![cout]));
        ConvSpec {
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            weight,
            bias,
        }
    }
}

impl Network {
    pub fn new(arch: Architecture) -> Result<Self> {
        let mut b = Builder { specs: Vec::new() };
        let mut nodes = Vec::new();
        let mut names = Vec::new();
        let mut zero_init = Vec::new();
        let feature_dim;
        match &arch {
            Architecture::Plain { input_size, widths } => {
                if widths.is_empty() || widths.contains(&0) {
                    return Err(Error::Config("plain architecture needs non-zero widths".into()));
                }
                let pools = widths.len() - 1;
                if *input_size == 0 || input_size % (1 << pools) != 0 {
                    return Err(Error::Config(format!(
                        "input size {input_size} not divisible by {}",
                        1 << pools
                    )));
                }
                let mut cin = 1;
                for (i, &w) in widths.iter().enumerate() {
                    let name = format!("block{}.conv", i + 1);
                    nodes.push(Node::Conv(b.conv(&name, cin, w, 3, 1)));
                    names.push(name);
                    nodes.push(Node::Relu);
                    names.push(format!("block{}.relu", i + 1));
                    // The last block's downsample is subsumed by global
                    // average pooling.
                    if i + 1 < widths.len() {
                        nodes.push(Node::AvgPool2);
                        names.push(format!("block{}.pool", i + 1));
                    }
                    cin = w;
                }
                feature_dim = cin;
            }
            Architecture::ResNet34 { input_size } => {
                if *input_size < 32 {
                    return Err(Error::Config("resnet34 needs input size >= 32".into()));
                }
                nodes.push(Node::Conv(b.conv("stem.conv", 1, 64, 7, 2)));
                names.push("stem.conv".into());
                nodes.push(Node::Relu);
                names.push("stem.relu".into());
                nodes.push(Node::MaxPool3);
                names.push("stem.pool".into());
                let mut cin = 64;
                for (stage, (&width, &blocks)) in
                    [64usize, 128, 256, 512].iter().zip(&[3usize, 4, 6, 3]).enumerate()
                {
                    for blk in 0..blocks {
                        let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
                        let prefix = format!("layer{}.{}", stage + 1, blk);
                        let c1 = b.conv(&format!("{prefix}.conv1"), cin, width, 3, stride);
                        let c2 = b.conv(&format!("{prefix}.conv2"), width, width, 3, 1);
                        zero_init.push(c2.weight);
                        let shortcut = (stride != 1 || cin != width)
                            .then(|| b.conv(&format!("{prefix}.shortcut"), cin, width, 1, stride));
                        nodes.push(Node::Residual {
                            body: vec![Node::Conv(c1), Node::Relu, Node::Conv(c2)],
                            shortcut,
                        });
                        names.push(prefix.clone());
                        nodes.push(Node::Relu);
                        names.push(format!("{prefix}.relu"));
                        cin = width;
                    }
                }
                feature_dim = cin;
            }
        }
        let head_weight = b.specs.len();
        b.specs.push(("head.weight".into(), vec![Label::COUNT, feature_dim]));
        let head_bias = b.specs.len();
        b.specs.push(("head.bias".into(), vec![Label::COUNT]));
        Ok(Network {
            arch,
            nodes,
            names,
            specs: b.specs,
            zero_init,
            feature_dim,
            head_weight,
            head_bias,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input_size(&self) -> usize {
        self.arch.input_size()
    }

    /// He-normal convolution weights, zero biases, `N(0, 1/F)` head.
    pub fn init_params<F: Scalar>(&self, rng: &mut impl Rng) -> ModelParams<F> {
        let tensors = self
            .specs
            .iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let mut t = Tensor::zeros(name.clone(), shape.clone());
                let is_bias = shape.len() == 1;
                if !is_bias && !self.zero_init.contains(&i) {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if i == self.head_weight { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
                    for v in &mut t.data {
                        *v = F::of(normal.sample(rng));
                    }
                }
                t
            })
            .collect();
        ModelParams { tensors }
    }

    pub fn check_params<F: Scalar>(&self, params: &ModelParams<F>) -> Result<()> {
        if params.tensors.len() != self.specs.len() {
            return Err(Error::Shape(format!(
                "{} parameter arrays, architecture {} expects {}",
                params.tensors.len(),
                self.arch.id(),
                self.specs.len()
            )));
        }
        for (t, (name, shape)) in params.tensors.iter().zip(&self.specs) {
            if &t.name != name || &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "parameter {}{:?}, expected {}{:?}",
                    t.name, t.shape, name, shape
                )));
            }
        }
        Ok(())
    }

    fn input<F: Scalar>(&self, inputs: &[&Grid<f32>]) -> Result<Act<F>> {
        let n = self.input_size();
        let plane = n * n;
        let mut data = Vec::with_capacity(inputs.len() * plane);
        for g in inputs {
            if g.shape() != (n, n) {
                return Err(Error::Shape(format!(
                    "input {:?}, network expects {n}x{n}",
                    g.shape()
                )));
            }
            data.extend(g.as_slice().iter().map(|&v| F::of(v as f64)));
        }
        Ok(Act {
            shape: Shape {
                c: 1,
                b: inputs.len(),
                h: n,
                w: n,
            },
            data,
        })
    }

    /// Inference forward.
    pub fn forward_batch<F: Scalar>(
        &self,
        params: &ModelParams<F>,
        inputs: &[&Grid<f32>],
    ) -> Result<BatchOutput<F>> {
        self.run(params, inputs, None)
    }

    /// Forward that records what the backward pass needs.
    pub fn forward_train<F: Scalar>(
        &self,
        params: &ModelParams<F>,
        inputs: &[&Grid<f32>],
    ) -> Result<(BatchOutput<F>, Tape<F>)> {
        let mut tape = Tape {
            caches: Vec::with_capacity(self.nodes.len()),
            last: Shape { c: 0, b: 0, h: 0, w: 0 },
            features: Vec::new(),
        };
        let out = self.run(params, inputs, Some(&mut tape))?;
        Ok((out, tape))
    }

    fn run<F: Scalar>(
        &self,
        params: &ModelParams<F>,
        inputs: &[&Grid<f32>],
        mut tape: Option<&mut Tape<F>>,
    ) -> Result<BatchOutput<F>> {
        self.check_params(params)?;
        let mut x = self.input::<F>(inputs)?;
        for (node, name) in self.nodes.iter().zip(&self.names) {
            let (y, cache) = forward_node(node, params, x, tape.is_some());
            if let (Some(t), Some(c)) = (tape.as_deref_mut(), cache) {
                t.caches.push(c);
            }
            if y.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {name}")));
            }
            x = y;
        }
        let Shape { c, b, h, w } = x.shape;
        let hw = h * w;
        let inv = F::of(1.0 / hw as f64);
        let mut features = vec![F::zero(); b * c];
        for ci in 0..c {
            for bi in 0..b {
                let off = (ci * b + bi) * hw;
                features[bi * c + ci] = x.data[off..off + hw].iter().copied().sum::<F>() * inv;
            }
        }
        let mut logits = vec![F::zero(); b * Label::COUNT];
        let hw_t = &params.tensors[self.head_weight].data;
        let hb = &params.tensors[self.head_bias].data;
        matmul(b, c, Label::COUNT, &features, false, hw_t, true, &mut logits, false);
        for row in logits.chunks_mut(Label::COUNT) {
            for (v, bias) in row.iter_mut().zip(hb) {
                *v += *bias;
            }
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer head".into()));
        }
        if let Some(t) = tape {
            t.last = x.shape;
            t.features = features.clone();
        }
        Ok(BatchOutput {
            batch: b,
            feature_dim: c,
            logits,
            features,
        })
    }

    /// Accumulates parameter gradients into `grads` given upstream
    /// gradients w.r.t. logits `[B, 3]` and (optionally) pooled features
    /// `[B, F]`.
    pub fn backward<F: Scalar>(
        &self,
        params: &ModelParams<F>,
        tape: Tape<F>,
        dlogits: &[F],
        dfeatures: Option<&[F]>,
        grads: &mut ModelParams<F>,
    ) -> Result<()> {
        grads.ensure_compatible(params)?;
        let Shape { c, b, h, w } = tape.last;
        if dlogits.len() != b * Label::COUNT || dfeatures.is_some_and(|d| d.len() != b * c) {
            return Err(Error::Shape("upstream gradient size".into()));
        }
        let head_w = &params.tensors[self.head_weight].data;
        matmul(
            Label::COUNT,
            b,
            c,
            dlogits,
            true,
            &tape.features,
            false,
            &mut grads.tensors[self.head_weight].data,
            true,
        );
        {
            let db = &mut grads.tensors[self.head_bias].data;
            for row in dlogits.chunks(Label::COUNT) {
                for (g, v) in db.iter_mut().zip(row) {
                    *g += *v;
                }
            }
        }
        let mut dfeat = match dfeatures {
            Some(d) => d.to_vec(),
            None => vec![F::zero(); b * c],
        };
        matmul(b, Label::COUNT, c, dlogits, false, head_w, false, &mut dfeat, true);

        let hw = h * w;
        let inv = F::of(1.0 / hw as f64);
        let mut dx = vec![F::zero(); tape.last.len()];
        for ci in 0..c {
            for bi in 0..b {
                let g = dfeat[bi * c + ci] * inv;
                let off = (ci * b + bi) * hw;
                dx[off..off + hw].iter_mut().for_each(|v| *v = g);
            }
        }
        let dy = Act {
            shape: tape.last,
            data: dx,
        };
        backward_nodes(&self.nodes, tape.caches, dy, params, grads, false);
        Ok(())
    }
}

fn forward_node<F: Scalar>(
    node: &Node,
    params: &ModelParams<F>,
    x: Act<F>,
    record: bool,
) -> (Act<F>, Option<Cache<F>>) {
    match node {
        Node::Conv(spec) => {
            let (y, cols) = conv_forward(spec, params, &x);
            let cache = record.then_some(Cache::Conv {
                cols,
                input: x.shape,
            });
            (y, cache)
        }
        Node::Relu => {
            let mut x = x;
            let mut active = if record { Vec::with_capacity(x.data.len()) } else { Vec::new() };
            for v in &mut x.data {
                let on = *v > F::zero();
                if !on {
                    *v = F::zero();
                }
                if record {
                    active.push(on);
                }
            }
            (x, record.then_some(Cache::Relu { active }))
        }
        Node::AvgPool2 => {
            let input = x.shape;
            (avgpool_forward(&x), record.then_some(Cache::AvgPool2 { input }))
        }
        Node::MaxPool3 => {
            let input = x.shape;
            let (y, argmax) = maxpool_forward(&x);
            (y, record.then_some(Cache::MaxPool3 { argmax, input }))
        }
        Node::Residual { body, shortcut } => {
            let mut caches = Vec::new();
            let mut h = x.clone();
            for n in body {
                let (y, c) = forward_node(n, params, h, record);
                if let Some(c) = c {
                    caches.push(c);
                }
                h = y;
            }
            let (s, sc) = match shortcut {
                Some(spec) => {
                    let (y, c) = forward_node(&Node::Conv(spec.clone()), params, x, record);
                    (y, c.map(Box::new))
                }
                None => (x, None),
            };
            for (a, b) in h.data.iter_mut().zip(&s.data) {
                *a += *b;
            }
            (
                h,
                record.then_some(Cache::Residual {
                    body: caches,
                    shortcut: sc,
                }),
            )
        }
    }
}

/// Returns the input gradient when `need_dx`.
fn backward_nodes<F: Scalar>(
    nodes: &[Node],
    caches: Vec<Cache<F>>,
    mut dy: Act<F>,
    params: &ModelParams<F>,
    grads: &mut ModelParams<F>,
    need_dx: bool,
) -> Option<Act<F>> {
    for (i, (node, cache)) in nodes.iter().zip(caches).enumerate().rev() {
        let want = need_dx || i > 0;
        match (node, cache) {
            (Node::Conv(spec), Cache::Conv { cols, input }) => {
                match conv_backward(spec, params, grads, &cols, input, &dy, want) {
                    Some(dx) => dy = dx,
                    None => {
                        debug_assert_eq!(i, 0);
                        return None;
                    }
                }
            }
            (Node::Relu, Cache::Relu { active }) => {
                for (g, on) in dy.data.iter_mut().zip(active) {
                    if !on {
                        *g = F::zero();
                    }
                }
            }
            (Node::AvgPool2, Cache::AvgPool2 { input }) => dy = avgpool_backward(&dy, input),
            (Node::MaxPool3, Cache::MaxPool3 { argmax, input }) => {
                dy = maxpool_backward(&dy, &argmax, input)
            }
            (Node::Residual { body, shortcut }, Cache::Residual { body: bc, shortcut: sc }) => {
                let through_body = backward_nodes(body, bc, dy.clone(), params, grads, true)
                    .expect("residual body returns input gradient");
                let through_short = match (shortcut, sc) {
                    (Some(spec), Some(c)) => match *c {
                        Cache::Conv { cols, input } => {
                            conv_backward(spec, params, grads, &cols, input, &dy, true).unwrap()
                        }
                        _ => unreachable!("shortcut cache is a conv cache"),
                    },
                    _ => dy,
                };
                let mut sum = through_body;
                for (a, b) in sum.data.iter_mut().zip(&through_short.data) {
                    *a += *b;
                }
                dy = sum;
            }
            _ => unreachable!("cache does not match node"),
        }
    }
    need_dx.then_some(dy)
}

fn im2col<F: Scalar>(x: &Act<F>, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<F> {
    let Shape { c, b, h, w } = x.shape;
    let k = spec.k;
    let n = b * oh * ow;
    let mut cols = vec![F::zero(); c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let src = &x.data[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[(bi * oh + oy) * ow..(bi * oh + oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(dcols: &[F], input: Shape, spec: &ConvSpec, oh: usize, ow: usize) -> Act<F> {
    let Shape { c, b, h, w } = input;
    let k = spec.k;
    let n = b * oh * ow;
    let mut dx = vec![F::zero(); input.len()];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &dcols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let dst = &mut dx[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[(bi * oh + oy) * ow..(bi * oh + oy + 1) * ow];
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, g) in srow.iter().enumerate() {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += *g;
                            }
                        }
                    }
                }
            }
        }
    }
    Act { shape: input, data: dx }
}

fn conv_forward<F: Scalar>(spec: &ConvSpec, params: &ModelParams<F>, x: &Act<F>) -> (Act<F>, Vec<F>) {
    debug_assert_eq!(x.shape.c, spec.cin);
    let (oh, ow) = spec.out_hw(x.shape.h, x.shape.w);
    let cols = im2col(x, spec, oh, ow);
    let n = x.shape.b * oh * ow;
    let kk = spec.cin * spec.k * spec.k;
    let mut y = vec![F::zero(); spec.cout * n];
    matmul(spec.cout, kk, n, &params.tensors[spec.weight].data, false, &cols, false, &mut y, false);
    let bias = &params.tensors[spec.bias].data;
    for (co, row) in y.chunks_mut(n).enumerate() {
        let bv = bias[co];
        row.iter_mut().for_each(|v| *v += bv);
    }
    let shape = Shape {
        c: spec.cout,
        b: x.shape.b,
        h: oh,
        w: ow,
    };
    (Act { shape, data: y }, cols)
}

fn conv_backward<F: Scalar>(
    spec: &ConvSpec,
    params: &ModelParams<F>,
    grads: &mut ModelParams<F>,
    cols: &[F],
    input: Shape,
    dy: &Act<F>,
    need_dx: bool,
) -> Option<Act<F>> {
    let (oh, ow) = (dy.shape.h, dy.shape.w);
    let n = dy.shape.b * oh * ow;
    let kk = spec.cin * spec.k * spec.k;
    matmul(spec.cout, n, kk, &dy.data, false, cols, true, &mut grads.tensors[spec.weight].data, true);
    {
        let db = &mut grads.tensors[spec.bias].data;
        for (co, row) in dy.data.chunks(n).enumerate() {
            db[co] += row.iter().copied().sum::<F>();
        }
    }
    if !need_dx {
        return None;
    }
    let mut dcols = vec![F::zero(); kk * n];
    matmul(kk, spec.cout, n, &params.tensors[spec.weight].data, true, &dy.data, false, &mut dcols, false);
    Some(col2im(&dcols, input, spec, oh, ow))
}

fn avgpool_forward<F: Scalar>(x: &Act<F>) -> Act<F> {
    let Shape { c, b, h, w } = x.shape;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::of(0.25);
    let mut y = vec![F::zero(); c * b * oh * ow];
    for plane in 0..c * b {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (r, cc) = (2 * oy, 2 * ox);
                dst[oy * ow + ox] = (src[r * w + cc]
                    + src[r * w + cc + 1]
                    + src[(r + 1) * w + cc]
                    + src[(r + 1) * w + cc + 1])
                    * quarter;
            }
        }
    }
    Act {
        shape: Shape { c, b, h: oh, w: ow },
        data: y,
    }
}

fn avgpool_backward<F: Scalar>(dy: &Act<F>, input: Shape) -> Act<F> {
    let Shape { c, b, h, w } = input;
    let (oh, ow) = (dy.shape.h, dy.shape.w);
    let quarter = F::of(0.25);
    let mut dx = vec![F::zero(); input.len()];
    for plane in 0..c * b {
        let src = &dy.data[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * quarter;
                let (r, cc) = (2 * oy, 2 * ox);
                dst[r * w + cc] = g;
                dst[r * w + cc + 1] = g;
                dst[(r + 1) * w + cc] = g;
                dst[(r + 1) * w + cc + 1] = g;
            }
        }
    }
    Act { shape: input, data: dx }
}

/// 3x3 max pooling, stride 2, padding 1.
fn maxpool_forward<F: Scalar>(x: &Act<F>) -> (Act<F>, Vec<u32>) {
    let Shape { c, b, h, w } = x.shape;
    let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    let mut y = vec![F::zero(); c * b * oh * ow];
    let mut argmax = vec![0u32; y.len()];
    for plane in 0..c * b {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = F::neg_infinity();
                let mut at = 0usize;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let iy = (2 * oy + dy) as isize - 1;
                        let ix = (2 * ox + dx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if src[idx] > best {
                            best = src[idx];
                            at = idx;
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                y[o] = best;
                argmax[o] = at as u32;
            }
        }
    }
    (
        Act {
            shape: Shape { c, b, h: oh, w: ow },
            data: y,
        },
        argmax,
    )
}

fn maxpool_backward<F: Scalar>(dy: &Act<F>, argmax: &[u32], input: Shape) -> Act<F> {
    let (h, w) = (input.h, input.w);
    let per = dy.shape.h * dy.shape.w;
    let mut dx = vec![F::zero(); input.len()];
    for (o, (g, &at)) in dy.data.iter().zip(argmax).enumerate() {
        let plane = o / per;
        dx[plane * h * w + at as usize] += *g;
    }
    Act { shape: input, data: dx }
}
