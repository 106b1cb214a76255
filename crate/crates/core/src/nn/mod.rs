//! Small layer library with explicit forward/backward passes.
//!
//! Every layer caches what it needs during `forward` and consumes it in
//! `backward`, accumulating parameter gradients into [`Param::grad`]. Layers
//! are plain values, so a whole network can be cloned for independent use.

mod conv;
mod layers;
mod optim;

pub use conv::{Conv2d, ConvTranspose2d};
pub use layers::{BatchNorm, Dropout, Linear};
pub use optim::{clip_grad_norm, Adam, AdamConfig};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// A named tensor owned by a network: either a trainable weight or a buffer
/// such as batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { name: name.into(), value, grad, trainable: true }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), value, grad: Tensor::zeros(&[0]), trainable: false }
    }

    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f32, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Param::new(name, Tensor::from_vec(shape, data).expect("shape product"))
    }

    pub fn zero_grad(&mut self) {
        if self.trainable {
            self.grad.fill(0.0);
        }
    }
}

/// Forward-pass mode. Training mode carries the random stream used by dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
    /// Batch statistics without updating running statistics; no dropout.
    Batch,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    fn batch_stats(&self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Conv(Conv2d),
    ConvT(ConvTranspose2d),
    BatchNorm(BatchNorm),
    Dropout(Dropout),
    Relu {
        mask: Vec<bool>,
    },
    LeakyRelu {
        slope: f32,
        mask: Vec<bool>,
    },
    Sigmoid {
        out: Tensor,
    },
    /// Reshapes every row to the given per-sample shape.
    Reshape {
        shape: Vec<usize>,
        input: Vec<usize>,
    },
}

impl Layer {
    pub fn relu() -> Self {
        Layer::Relu { mask: Vec::new() }
    }

    pub fn leaky_relu(slope: f32) -> Self {
        Layer::LeakyRelu { slope, mask: Vec::new() }
    }

    pub fn sigmoid() -> Self {
        Layer::Sigmoid { out: Tensor::zeros(&[0]) }
    }

    pub fn reshape(shape: &[usize]) -> Self {
        Layer::Reshape { shape: shape.to_vec(), input: Vec::new() }
    }

    pub fn forward(&mut self, x: &Tensor, mode: &mut Mode<'_>) -> Tensor {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv(l) => l.forward(x),
            Layer::ConvT(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, mode.batch_stats(), mode.is_train()),
            Layer::Dropout(l) => l.forward(x, mode),
            Layer::Relu { mask } => {
                *mask = x.data().iter().map(|&v| v > 0.0).collect();
                x.map(|v| v.max(0.0))
            }
            Layer::LeakyRelu { slope, mask } => {
                *mask = x.data().iter().map(|&v| v > 0.0).collect();
                let s = *slope;
                x.map(|v| if v > 0.0 { v } else { s * v })
            }
            Layer::Sigmoid { out } => {
                *out = x.map(sigmoid);
                out.clone()
            }
            Layer::Reshape { shape, input } => {
                *input = x.shape().to_vec();
                let mut full = vec![x.rows()];
                full.extend_from_slice(shape);
                x.clone().reshape(&full).expect("reshape preserves size")
            }
        }
    }

    /// Eval-mode forward pass that leaves the layer untouched.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Linear(l) => l.infer(x),
            Layer::Conv(l) => l.infer(x),
            Layer::ConvT(l) => l.infer(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::Dropout(_) => x.clone(),
            Layer::Relu { .. } => x.map(|v| v.max(0.0)),
            Layer::LeakyRelu { slope, .. } => {
                let s = *slope;
                x.map(|v| if v > 0.0 { v } else { s * v })
            }
            Layer::Sigmoid { .. } => x.map(sigmoid),
            Layer::Reshape { shape, .. } => {
                let mut full = vec![x.rows()];
                full.extend_from_slice(shape);
                x.clone().reshape(&full).expect("reshape preserves size")
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        match self {
            Layer::Linear(l) => l.backward(grad),
            Layer::Conv(l) => l.backward(grad),
            Layer::ConvT(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Dropout(l) => l.backward(grad),
            Layer::Relu { mask } => {
                let mut g = grad.clone();
                for (v, &m) in g.data_mut().iter_mut().zip(mask.iter()) {
                    if !m {
                        *v = 0.0;
                    }
                }
                g
            }
            Layer::LeakyRelu { slope, mask } => {
                let mut g = grad.clone();
                for (v, &m) in g.data_mut().iter_mut().zip(mask.iter()) {
                    if !m {
                        *v *= *slope;
                    }
                }
                g
            }
            Layer::Sigmoid { out } => {
                let mut g = grad.clone();
                for (v, &y) in g.data_mut().iter_mut().zip(out.data()) {
                    *v *= y * (1.0 - y);
                }
                g
            }
            Layer::Reshape { input, .. } => grad.clone().reshape(input).expect("reshape preserves size"),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::ConvT(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta, &l.running_mean, &l.running_var],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::ConvT(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => {
                vec![&mut l.gamma, &mut l.beta, &mut l.running_mean, &mut l.running_var]
            }
            _ => Vec::new(),
        }
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// A chain of layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&mut self, x: &Tensor, mode: &mut Mode<'_>) -> Tensor {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode);
        }
        h
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h);
        }
        h
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Row-wise softmax of a `[n, k]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x as f64;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / sum) as f32;
    }
}

/// Backpropagates through a row-wise softmax given its output `p` and the
/// gradient with respect to `p`.
pub fn softmax_backward(p: &Tensor, grad_p: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(p.shape());
    for i in 0..p.rows() {
        let (pr, gr) = (p.row(i), grad_p.row(i));
        let dot: f32 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &pj), &gj) in out.row_mut(i).iter_mut().zip(pr).zip(gr) {
            *o = pj * (gj - dot);
        }
    }
    out
}

pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut Param>) {
    for p in params {
        p.zero_grad();
    }
}
