use rand_chacha::ChaCha8Rng;

use crate::nn::{BatchNorm, Conv2d, ConvTranspose2d, Dropout, Layer, Linear, Mode, Param, Sequential};
use crate::tensor::Tensor;

const SLOPE: f32 = 0.2;

/// `E`: six convolutions and two fully connected layers, image to `E(s)`.
pub fn encoder(channels: &[usize; 5], hidden: usize, latent: usize, in_ch: usize, rng: &mut ChaCha8Rng) -> Sequential {
    let kernels = [3, 3, 4, 4, 4];
    let mut layers = Vec::new();
    let mut c = in_ch;
    for (i, (&out, &k)) in channels.iter().zip(&kernels).enumerate() {
        layers.push(Layer::Conv(Conv2d::new(&format!("E.conv{i}"), c, out, k, 2, 1, rng)));
        layers.push(Layer::BatchNorm(BatchNorm::new(&format!("E.bn{i}"), out)));
        layers.push(Layer::leaky_relu(SLOPE));
        c = out;
    }
    layers.push(Layer::Conv(Conv2d::new("E.conv5", c, c, 1, 1, 0, rng)));
    layers.push(Layer::BatchNorm(BatchNorm::new("E.bn5", c)));
    layers.push(Layer::leaky_relu(SLOPE));
    layers.push(Layer::reshape(&[c * 4]));
    layers.push(Layer::Linear(Linear::new("E.fc0", c * 4, hidden, rng)));
    layers.push(Layer::BatchNorm(BatchNorm::new("E.bn6", hidden)));
    layers.push(Layer::leaky_relu(SLOPE));
    layers.push(Layer::Linear(Linear::new("E.fc1", hidden, latent, rng)));
    Sequential::new(layers)
}

/// `D`: predicts the action distribution (as logits) from `E(s)`.
pub fn discriminator(latent: usize, actions: usize, dropout: f32, rng: &mut ChaCha8Rng) -> Sequential {
    Sequential::new(vec![
        Layer::Linear(Linear::new("D.fc0", latent, latent, rng)),
        Layer::Dropout(Dropout::new(dropout)),
        Layer::leaky_relu(SLOPE),
        Layer::Linear(Linear::new("D.fc1", latent, latent, rng)),
        Layer::Dropout(Dropout::new(dropout)),
        Layer::leaky_relu(SLOPE),
        Layer::Linear(Linear::new("D.out", latent, actions, rng)),
    ])
}

/// Three-layer perceptron with batch norm and leaky ReLU between layers.
pub fn mlp(name: &str, dims: [usize; 4], rng: &mut ChaCha8Rng) -> Sequential {
    Sequential::new(vec![
        Layer::Linear(Linear::new(&format!("{name}.fc0"), dims[0], dims[1], rng)),
        Layer::BatchNorm(BatchNorm::new(&format!("{name}.bn0"), dims[1])),
        Layer::leaky_relu(SLOPE),
        Layer::Linear(Linear::new(&format!("{name}.fc1"), dims[1], dims[2], rng)),
        Layer::BatchNorm(BatchNorm::new(&format!("{name}.bn1"), dims[2])),
        Layer::leaky_relu(SLOPE),
        Layer::Linear(Linear::new(&format!("{name}.fc2"), dims[2], dims[3], rng)),
    ])
}

/// `G`: a fully connected projection to a 2×2 map followed by five stride-2
/// transposed convolutions. The conditioning vector is broadcast as constant
/// channels in front of every transposed convolution.
#[derive(Debug, Clone)]
pub struct Generator {
    pub stem: Sequential,
    pub blocks: Vec<Sequential>,
    pub input_dim: usize,
    pub cond_dim: usize,
    base: usize,
    cached: Vec<usize>,
}

impl Generator {
    pub fn new(input_dim: usize, cond_dim: usize, channels: &[usize; 5], out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let base = channels[0];
        let stem = Sequential::new(vec![
            Layer::Linear(Linear::new("G.fc", input_dim, base * 4, rng)),
            Layer::BatchNorm(BatchNorm::new("G.bn_fc", base * 4)),
            Layer::relu(),
            Layer::reshape(&[base, 2, 2]),
        ]);
        let mut blocks = Vec::new();
        let outs = [channels[1], channels[2], channels[3], channels[4], out_ch];
        let mut c = base;
        for (i, &o) in outs.iter().enumerate() {
            let conv = Layer::ConvT(ConvTranspose2d::new(&format!("G.deconv{i}"), c + cond_dim, o, 4, 2, 1, rng));
            let block = if i + 1 < outs.len() {
                vec![conv, Layer::BatchNorm(BatchNorm::new(&format!("G.bn{i}"), o)), Layer::relu()]
            } else {
                vec![conv, Layer::sigmoid()]
            };
            blocks.push(Sequential::new(block));
            c = o;
        }
        Generator { stem, blocks, input_dim, cond_dim, base, cached: Vec::new() }
    }

    fn check(&self, input: &Tensor, cond: &Tensor) {
        assert_eq!(input.row_len(), self.input_dim, "generator input width");
        assert_eq!(cond.row_len(), self.cond_dim, "generator condition width");
        assert_eq!(input.rows(), cond.rows(), "generator batch sizes");
    }

    pub fn forward(&mut self, input: &Tensor, cond: &Tensor, mode: &mut Mode<'_>) -> Tensor {
        self.check(input, cond);
        let mut h = self.stem.forward(input, mode);
        self.cached.clear();
        for b in &mut self.blocks {
            self.cached.push(h.shape()[1]);
            h = b.forward(&append_channels(&h, cond), mode);
        }
        h
    }

    pub fn infer(&self, input: &Tensor, cond: &Tensor) -> Tensor {
        self.check(input, cond);
        let mut h = self.stem.infer(input);
        for b in &self.blocks {
            h = b.infer(&append_channels(&h, cond));
        }
        h
    }

    /// Returns gradients with respect to the input vector and the condition.
    pub fn backward(&mut self, grad: &Tensor) -> (Tensor, Tensor) {
        let n = grad.rows();
        let mut d_cond = Tensor::zeros(&[n, self.cond_dim]);
        let mut g = grad.clone();
        for (b, &c) in self.blocks.iter_mut().zip(&self.cached).rev() {
            let gi = b.backward(&g);
            let (gh, gc) = split_channels(&gi, c);
            d_cond.add_assign(&gc);
            g = gh;
        }
        debug_assert_eq!(g.shape()[1], self.base);
        (self.stem.backward(&g), d_cond)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.stem.params();
        p.extend(self.blocks.iter().flat_map(|b| b.params()));
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params_mut();
        p.extend(self.blocks.iter_mut().flat_map(|b| b.params_mut()));
        p
    }
}

/// Concatenates `cond` (`[n, k]`) as `k` constant planes after the channels of `h`.
pub fn append_channels(h: &Tensor, cond: &Tensor) -> Tensor {
    let (n, c, hh, ww) = (h.shape()[0], h.shape()[1], h.shape()[2], h.shape()[3]);
    let k = cond.row_len();
    let plane = hh * ww;
    let mut out = Tensor::zeros(&[n, c + k, hh, ww]);
    for i in 0..n {
        let row = out.row_mut(i);
        row[..c * plane].copy_from_slice(h.row(i));
        for (j, &v) in cond.row(i).iter().enumerate() {
            row[(c + j) * plane..(c + j + 1) * plane].fill(v);
        }
    }
    out
}

/// Splits a `[n, c + k, h, w]` gradient into the first `c` channels and the
/// per-sample sums of the remaining `k` planes.
pub fn split_channels(g: &Tensor, c: usize) -> (Tensor, Tensor) {
    let (n, total, hh, ww) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let k = total - c;
    let plane = hh * ww;
    let mut gh = Tensor::zeros(&[n, c, hh, ww]);
    let mut gc = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let row = g.row(i);
        gh.row_mut(i).copy_from_slice(&row[..c * plane]);
        for (j, v) in gc.row_mut(i).iter_mut().enumerate() {
            *v = row[(c + j) * plane..(c + j + 1) * plane].iter().sum();
        }
    }
    (gh, gc)
}
