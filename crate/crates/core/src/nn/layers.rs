use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Mode, Param};
use crate::tensor::{gemm, Tensor};

/// Fully connected layer, `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Tensor,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        Linear {
            weight: Param::uniform(format!("{name}.weight"), &[outputs, inputs], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[outputs], bound, rng),
            input: Tensor::zeros(&[0]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.infer(x);
        self.input = x.clone();
        y
    }

    /// Forward pass without caching the input.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let (n, i, o) = (x.rows(), self.inputs(), self.outputs());
        assert_eq!(x.row_len(), i, "linear input width");
        let mut y = Tensor::zeros(&[n, o]);
        for r in 0..n {
            y.row_mut(r).copy_from_slice(self.bias.value.data());
        }
        gemm(n, i, o, x.data(), false, self.weight.value.data(), true, y.data_mut(), 1.0);
        y
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (n, i, o) = (grad.rows(), self.inputs(), self.outputs());
        gemm(o, n, i, grad.data(), true, self.input.data(), false, self.weight.grad.data_mut(), 1.0);
        let gb = self.bias.grad.data_mut();
        for r in 0..n {
            for (b, g) in gb.iter_mut().zip(grad.row(r)) {
                *b += g;
            }
        }
        let mut dx = Tensor::zeros(&[n, i]);
        gemm(n, o, i, grad.data(), false, self.weight.value.data(), false, dx.data_mut(), 0.0);
        let shape = self.input.shape().to_vec();
        dx.reshape(&shape).expect("same size")
    }
}

/// Batch normalization over the feature axis of `[n, c]` or the channel axis
/// of `[n, c, h, w]` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
    xhat: Tensor,
    inv_std: Vec<f32>,
    train: bool,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
            xhat: Tensor::zeros(&[0]),
            inv_std: Vec::new(),
            train: false,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Eval-mode normalization with running statistics; caches nothing.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let c = self.channels();
        let spatial = x.row_len() / c;
        let mut y = x.clone();
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        let (m, v) = (self.running_mean.value.data(), self.running_var.value.data());
        for r in 0..x.rows() {
            let yr = y.row_mut(r);
            for ch in 0..c {
                let k = g[ch] / (v[ch] + self.eps).sqrt();
                for o in &mut yr[ch * spatial..(ch + 1) * spatial] {
                    *o = (*o - m[ch]) * k + b[ch];
                }
            }
        }
        y
    }

    /// `batch_stats` normalizes with the batch's own statistics; `update`
    /// additionally folds them into the running averages.
    pub fn forward(&mut self, x: &Tensor, batch_stats: bool, update: bool) -> Tensor {
        let train = batch_stats;
        let c = self.channels();
        let n = x.rows();
        let spatial = x.row_len() / c;
        assert_eq!(spatial * c, x.row_len(), "batch-norm channel count");
        let count = n * spatial;
        let (mean, var): (Vec<f32>, Vec<f32>) = if train && count > 1 {
            let mut mean = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            for r in 0..n {
                let row = x.row(r);
                for ch in 0..c {
                    for &v in &row[ch * spatial..(ch + 1) * spatial] {
                        mean[ch] += v as f64;
                        sq[ch] += (v as f64) * (v as f64);
                    }
                }
            }
            let m = count as f64;
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                mean[ch] /= m;
                var[ch] = (sq[ch] / m - mean[ch] * mean[ch]).max(0.0);
                if !update {
                    continue;
                }
                let unbiased = var[ch] * m / (m - 1.0);
                let rm = &mut self.running_mean.value.data_mut()[ch];
                *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[ch] as f32;
                let rv = &mut self.running_var.value.data_mut()[ch];
                *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased as f32;
            }
            (mean.iter().map(|&v| v as f32).collect(), var.iter().map(|&v| v as f32).collect())
        } else {
            (self.running_mean.value.data().to_vec(), self.running_var.value.data().to_vec())
        };
        self.train = train && count > 1;
        self.inv_std = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for r in 0..n {
            let xr = xhat.row_mut(r);
            for ch in 0..c {
                for v in &mut xr[ch * spatial..(ch + 1) * spatial] {
                    *v = (*v - mean[ch]) * self.inv_std[ch];
                }
            }
            let yr = y.row_mut(r);
            let xr = xhat.row(r);
            for ch in 0..c {
                for (o, &h) in
                    yr[ch * spatial..(ch + 1) * spatial].iter_mut().zip(&xr[ch * spatial..(ch + 1) * spatial])
                {
                    *o = g[ch] * h + b[ch];
                }
            }
        }
        self.xhat = xhat;
        y
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let c = self.channels();
        let n = grad.rows();
        let spatial = grad.row_len() / c;
        let m = (n * spatial) as f32;
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for r in 0..n {
            let (gr, xr) = (grad.row(r), self.xhat.row(r));
            for ch in 0..c {
                let s = ch * spatial..(ch + 1) * spatial;
                for (&g, &h) in gr[s.clone()].iter().zip(&xr[s]) {
                    sum_g[ch] += g as f64;
                    sum_gx[ch] += (g * h) as f64;
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad.data_mut()[ch] += sum_gx[ch] as f32;
            self.beta.grad.data_mut()[ch] += sum_g[ch] as f32;
        }
        let gamma = self.gamma.value.data();
        let mut dx = grad.clone();
        for r in 0..n {
            let xr = self.xhat.row(r).to_vec();
            let dr = dx.row_mut(r);
            for ch in 0..c {
                let k = gamma[ch] * self.inv_std[ch];
                let s = ch * spatial..(ch + 1) * spatial;
                if self.train {
                    let mg = sum_g[ch] as f32 / m;
                    let mgx = sum_gx[ch] as f32 / m;
                    for (d, &h) in dr[s.clone()].iter_mut().zip(&xr[s]) {
                        *d = k * (*d - mg - h * mgx);
                    }
                } else {
                    for d in &mut dr[s] {
                        *d *= k;
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f32,
    mask: Vec<f32>,
}

impl Dropout {
    pub fn new(p: f32) -> Self {
        Dropout { p, mask: Vec::new() }
    }

    pub fn forward(&mut self, x: &Tensor, mode: &mut Mode<'_>) -> Tensor {
        match mode {
            Mode::Train(rng) if self.p > 0.0 => {
                let keep = 1.0 - self.p;
                self.mask = (0..x.len()).map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 }).collect();
                let mut y = x.clone();
                for (v, m) in y.data_mut().iter_mut().zip(&self.mask) {
                    *v *= m;
                }
                y
            }
            _ => {
                self.mask = vec![1.0; x.len()];
                x.clone()
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for (v, m) in g.data_mut().iter_mut().zip(&self.mask) {
            *v *= m;
        }
        g
    }
}
