//! Small trainable layers shared by the denoisers. Parameters are stored as
//! plain arrays and bound into the autodiff graph on every forward pass; a
//! [`Binding`] keeps the (name, leaf) pairs of one pass for grad extraction.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{
    add, add_colvec, add_rowvec, conv3x3, layer_norm_rows, matmul, reshape, scale, silu,
    softmax_rows, transpose, Arr, Tensor,
};

/// Leaf tensors created for one forward pass, in binding order.
#[derive(Default)]
pub struct Binding {
    entries: Vec<(String, Tensor)>,
}

impl Binding {
    pub fn new() -> Binding {
        Binding::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &ArrayD<f64>, requires_grad: bool) -> Tensor {
        let t = Tensor::leaf(value.clone(), requires_grad);
        self.entries.push((name.into(), t.clone()));
        t
    }

    /// Gradients accumulated by the last backward pass, keyed by name.
    /// Missing grads (e.g. constants) are returned as zeros.
    pub fn grads(&self) -> Vec<(String, Arr)> {
        self.entries
            .iter()
            .map(|(n, t)| {
                let g = t
                    .grad()
                    .unwrap_or_else(|| Arr::zeros(IxDyn(t.shape())));
                (n.clone(), g)
            })
            .collect()
    }
}

/// Visitor over stored parameters; the visit order is the canonical parameter
/// order used by the optimizer and checkpoints.
pub trait VisitParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>));
}

fn randn_arr<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * std).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
}

pub struct LinearT {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Linear {
        let std = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: randn_arr(&[d_in, d_out], std, rng),
            b: ArrayD::zeros(IxDyn(&[d_out])),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: ArrayD::zeros(IxDyn(&[d_in, d_out])),
            b: ArrayD::zeros(IxDyn(&[d_out])),
        }
    }

    pub fn bind(&self, prefix: &str, reg: &mut Binding, rg: bool) -> LinearT {
        LinearT {
            w: reg.bind(format!("{prefix}.w"), &self.w, rg),
            b: reg.bind(format!("{prefix}.b"), &self.b, rg),
        }
    }
}

impl VisitParams for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

impl LinearT {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        add_rowvec(&matmul(x, &self.w), &self.b)
    }
}

// ---------------------------------------------------------------------------
// 3x3 convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
}

pub struct ConvT {
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv {
    pub fn init<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Conv {
        let std = 1.0 / ((c_in * 9) as f64).sqrt();
        Conv {
            w: randn_arr(&[c_out, c_in, 3, 3], std, rng),
            b: ArrayD::zeros(IxDyn(&[c_out])),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Conv {
        Conv {
            w: ArrayD::zeros(IxDyn(&[c_out, c_in, 3, 3])),
            b: ArrayD::zeros(IxDyn(&[c_out])),
        }
    }

    pub fn bind(&self, prefix: &str, reg: &mut Binding, rg: bool) -> ConvT {
        ConvT {
            w: reg.bind(format!("{prefix}.w"), &self.w, rg),
            b: reg.bind(format!("{prefix}.b"), &self.b, rg),
        }
    }
}

impl VisitParams for Conv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

impl ConvT {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv3x3(x, &self.w, &self.b)
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ArrayD<f64>,
    pub beta: ArrayD<f64>,
}

pub struct LayerNormT {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn init(d: usize) -> LayerNorm {
        LayerNorm {
            gamma: ArrayD::ones(IxDyn(&[d])),
            beta: ArrayD::zeros(IxDyn(&[d])),
        }
    }

    pub fn bind(&self, prefix: &str, reg: &mut Binding, rg: bool) -> LayerNormT {
        LayerNormT {
            gamma: reg.bind(format!("{prefix}.gamma"), &self.gamma, rg),
            beta: reg.bind(format!("{prefix}.beta"), &self.beta, rg),
        }
    }
}

impl VisitParams for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

impl LayerNormT {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        layer_norm_rows(x, &self.gamma, &self.beta, 1e-5)
    }
}

// ---------------------------------------------------------------------------
// Pre-LN transformer block (single-head self-attention + MLP)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    d: usize,
}

pub struct AttnBlockT {
    ln1: LayerNormT,
    wq: LinearT,
    wk: LinearT,
    wv: LinearT,
    wo: LinearT,
    ln2: LayerNormT,
    fc1: LinearT,
    fc2: LinearT,
    d: usize,
}

impl AttnBlock {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> AttnBlock {
        AttnBlock {
            ln1: LayerNorm::init(d),
            wq: Linear::init(d, d, rng),
            wk: Linear::init(d, d, rng),
            wv: Linear::init(d, d, rng),
            wo: Linear::init(d, d, rng),
            ln2: LayerNorm::init(d),
            fc1: Linear::init(d, 2 * d, rng),
            fc2: Linear::init(2 * d, d, rng),
            d,
        }
    }

    pub fn bind(&self, prefix: &str, reg: &mut Binding, rg: bool) -> AttnBlockT {
        AttnBlockT {
            ln1: self.ln1.bind(&format!("{prefix}.ln1"), reg, rg),
            wq: self.wq.bind(&format!("{prefix}.wq"), reg, rg),
            wk: self.wk.bind(&format!("{prefix}.wk"), reg, rg),
            wv: self.wv.bind(&format!("{prefix}.wv"), reg, rg),
            wo: self.wo.bind(&format!("{prefix}.wo"), reg, rg),
            ln2: self.ln2.bind(&format!("{prefix}.ln2"), reg, rg),
            fc1: self.fc1.bind(&format!("{prefix}.fc1"), reg, rg),
            fc2: self.fc2.bind(&format!("{prefix}.fc2"), reg, rg),
            d: self.d,
        }
    }
}

impl VisitParams for AttnBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

impl AttnBlockT {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.ln1.forward(x);
        let q = self.wq.forward(&h);
        let k = self.wk.forward(&h);
        let v = self.wv.forward(&h);
        let logits = scale(&matmul(&q, &transpose(&k)), 1.0 / (self.d as f64).sqrt());
        let attn = matmul(&softmax_rows(&logits), &v);
        let x = add(x, &self.wo.forward(&attn));
        let h = self.ln2.forward(&x);
        add(&x, &self.fc2.forward(&silu(&self.fc1.forward(&h))))
    }
}

// ---------------------------------------------------------------------------
// Residual convolution block with embedding-conditioned channel bias
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub emb_proj: Linear,
    feat: usize,
}

pub struct ResBlockT {
    conv1: ConvT,
    conv2: ConvT,
    emb_proj: LinearT,
    feat: usize,
}

impl ResBlock {
    pub fn init<R: Rng>(feat: usize, emb_dim: usize, rng: &mut R) -> ResBlock {
        ResBlock {
            conv1: Conv::init(feat, feat, rng),
            conv2: Conv::init(feat, feat, rng),
            emb_proj: Linear::init(emb_dim, feat, rng),
            feat,
        }
    }

    pub fn bind(&self, prefix: &str, reg: &mut Binding, rg: bool) -> ResBlockT {
        ResBlockT {
            conv1: self.conv1.bind(&format!("{prefix}.conv1"), reg, rg),
            conv2: self.conv2.bind(&format!("{prefix}.conv2"), reg, rg),
            emb_proj: self.emb_proj.bind(&format!("{prefix}.emb"), reg, rg),
            feat: self.feat,
        }
    }
}

impl VisitParams for ResBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.emb_proj.visit(&format!("{prefix}.emb"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        self.emb_proj.visit_mut(&format!("{prefix}.emb"), f);
    }
}

impl ResBlockT {
    /// `emb` is a (1, emb_dim) conditioning row (time embedding plus, for the
    /// class model, the projected class embedding).
    pub fn forward(&self, x: &Tensor, emb: &Tensor) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        debug_assert_eq!(c, self.feat);
        let bias = reshape(&self.emb_proj.forward(emb), &[self.feat]);
        let mut y = self.conv1.forward(&silu(x));
        y = reshape(&add_colvec(&reshape(&y, &[c, h * w]), &bias), &[c, h, w]);
        y = self.conv2.forward(&silu(&y));
        add(x, &y)
    }
}

// ---------------------------------------------------------------------------
// Cross-attention from image features to an encoded token sequence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CrossAttn {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    dk: usize,
}

pub struct CrossAttnT {
    wq: LinearT,
    wk: LinearT,
    wv: LinearT,
    wo: LinearT,
    dk: usize,
}

impl CrossAttn {
    pub fn init<R: Rng>(feat: usize, d_tokens: usize, dk: usize, rng: &mut R) -> CrossAttn {
        CrossAttn {
            wq: Linear::init(feat, dk, rng),
            wk: Linear::init(d_tokens, dk, rng),
            wv: Linear::init(d_tokens, dk, rng),
            wo: Linear::init(dk, feat, rng),
            dk,
        }
    }

    pub fn bind(&self, prefix: &str, reg: &mut Binding, rg: bool) -> CrossAttnT {
        CrossAttnT {
            wq: self.wq.bind(&format!("{prefix}.wq"), reg, rg),
            wk: self.wk.bind(&format!("{prefix}.wk"), reg, rg),
            wv: self.wv.bind(&format!("{prefix}.wv"), reg, rg),
            wo: self.wo.bind(&format!("{prefix}.wo"), reg, rg),
            dk: self.dk,
        }
    }
}

impl VisitParams for CrossAttn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

impl CrossAttnT {
    /// x: (C, H, W) image features; tokens: (S, d) encoded sequence.
    /// Returns the attended update with the same shape as x (added by caller).
    pub fn forward(&self, x: &Tensor, tokens: &Tensor) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let flat = transpose(&reshape(x, &[c, h * w])); // (HW, C)
        let q = self.wq.forward(&flat);
        let k = self.wk.forward(tokens);
        let v = self.wv.forward(tokens);
        let logits = scale(&matmul(&q, &transpose(&k)), 1.0 / (self.dk as f64).sqrt());
        let attn = matmul(&softmax_rows(&logits), &v);
        let out = self.wo.forward(&attn); // (HW, C)
        reshape(&transpose(&out), &[c, h, w])
    }
}

// ---------------------------------------------------------------------------
// Timestep features
// ---------------------------------------------------------------------------

/// Sinusoidal features of the (1-based) timestep, shape (1, dim).
pub fn time_features(t: usize, dim: usize) -> Arr {
    assert!(dim % 2 == 0, "time feature dim must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / (half - 1) as f64).exp();
        out.push((t as f64 * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / (half - 1) as f64).exp();
        out.push((t as f64 * freq).cos());
    }
    ArrayD::from_shape_vec(IxDyn(&[1, dim]), out).unwrap()
}
