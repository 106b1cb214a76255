//! 2-d convolution and transposed convolution via batched im2col + GEMM.
//!
//! Column matrices are laid out `[channels·k·k, n·oh·ow]`, so one GEMM
//! covers the whole batch.

use rand_chacha::ChaCha8Rng;

use super::Param;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

pub fn conv_t_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size - 1) * stride + k - 2 * pad
}

fn im2col(x: &[f32], g: &Geometry) -> Vec<f32> {
    let ncols = g.cols();
    let mut col = vec![0.0f32; g.c * g.k * g.k * ncols];
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let src = &x[(b * g.c + ci) * hw..(b * g.c + ci + 1) * hw];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = b * ohw + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f32], g: &Geometry) -> Vec<f32> {
    let ncols = g.cols();
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let mut x = vec![0.0f32; g.n * g.c * hw];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &col[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let dst = &mut x[(b * g.c + ci) * hw..(b * g.c + ci + 1) * hw];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = b * ohw + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, s] -> [c, n·s]`
fn batch_to_channel_major(x: &[f32], n: usize, c: usize, s: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * s + b * s..ch * n * s + (b + 1) * s]
                .copy_from_slice(&x[(b * c + ch) * s..(b * c + ch + 1) * s]);
        }
    }
    out
}

/// `[c, n·s] -> [n, c, s]`
fn channel_major_to_batch(x: &[f32], n: usize, c: usize, s: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * s..(b * c + ch + 1) * s]
                .copy_from_slice(&x[ch * n * s + b * s..ch * n * s + (b + 1) * s]);
        }
    }
    out
}

/// Convolution with square kernels. Weight layout `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    col: Vec<f32>,
    geom: Option<Geometry>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((inputs * kernel * kernel) as f32).sqrt();
        Conv2d {
            weight: Param::uniform(format!("{name}.weight"), &[outputs, inputs, kernel, kernel], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[outputs], bound, rng),
            kernel,
            stride,
            pad,
            col: Vec::new(),
            geom: None,
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (y, col, g) = self.compute(x);
        self.col = col;
        self.geom = Some(g);
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.compute(x).0
    }

    fn compute(&self, x: &Tensor) -> (Tensor, Vec<f32>, Geometry) {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv input must be [n, c, h, w]");
        assert_eq!(s[1], self.inputs(), "conv input channels");
        let g = Geometry {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            k: self.kernel,
            stride: self.stride,
            pad: self.pad,
            oh: conv_out(s[2], self.kernel, self.stride, self.pad),
            ow: conv_out(s[3], self.kernel, self.stride, self.pad),
        };
        let col = im2col(x.data(), &g);
        let (o, ckk, ncols) = (self.outputs(), g.c * g.k * g.k, g.cols());
        let mut out = vec![0.0f32; o * ncols];
        for (ch, &b) in self.bias.value.data().iter().enumerate() {
            out[ch * ncols..(ch + 1) * ncols].fill(b);
        }
        gemm(o, ckk, ncols, self.weight.value.data(), false, &col, false, &mut out, 1.0);
        let data = channel_major_to_batch(&out, g.n, o, g.oh * g.ow);
        (Tensor::from_vec(&[g.n, o, g.oh, g.ow], data).expect("conv output size"), col, g)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.geom.expect("backward before forward");
        let (o, ckk, ncols) = (self.outputs(), g.c * g.k * g.k, g.cols());
        let gm = batch_to_channel_major(grad.data(), g.n, o, g.oh * g.ow);
        gemm(o, ncols, ckk, &gm, false, &self.col, true, self.weight.grad.data_mut(), 1.0);
        for (ch, b) in self.bias.grad.data_mut().iter_mut().enumerate() {
            *b += gm[ch * ncols..(ch + 1) * ncols].iter().sum::<f32>();
        }
        let mut dcol = vec![0.0f32; ckk * ncols];
        gemm(ckk, o, ncols, self.weight.value.data(), true, &gm, false, &mut dcol, 0.0);
        let dx = col2im(&dcol, &g);
        Tensor::from_vec(&[g.n, g.c, g.h, g.w], dx).expect("conv input size")
    }
}

/// Transposed convolution. Weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    xm: Vec<f32>,
    geom: Option<Geometry>,
}

impl ConvTranspose2d {
    pub fn new(
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((outputs * kernel * kernel) as f32).sqrt();
        ConvTranspose2d {
            weight: Param::uniform(format!("{name}.weight"), &[inputs, outputs, kernel, kernel], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[outputs], bound, rng),
            kernel,
            stride,
            pad,
            xm: Vec::new(),
            geom: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (y, xm, g) = self.compute(x);
        self.xm = xm;
        self.geom = Some(g);
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.compute(x).0
    }

    fn compute(&self, x: &Tensor) -> (Tensor, Vec<f32>, Geometry) {
        let s = x.shape();
        assert_eq!(s.len(), 4, "transposed conv input must be [n, c, h, w]");
        assert_eq!(s[1], self.inputs(), "transposed conv input channels");
        let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
        // Geometry of the adjoint convolution: output image -> input grid.
        let g = Geometry {
            n,
            c: self.outputs(),
            h: conv_t_out(h, self.kernel, self.stride, self.pad),
            w: conv_t_out(w, self.kernel, self.stride, self.pad),
            k: self.kernel,
            stride: self.stride,
            pad: self.pad,
            oh: h,
            ow: w,
        };
        let xm = batch_to_channel_major(x.data(), n, ci, h * w);
        let okk = g.c * g.k * g.k;
        let mut col = vec![0.0f32; okk * g.cols()];
        gemm(okk, ci, g.cols(), self.weight.value.data(), true, &xm, false, &mut col, 0.0);
        let mut out = col2im(&col, &g);
        let plane = g.h * g.w;
        for b in 0..n {
            for (ch, &bias) in self.bias.value.data().iter().enumerate() {
                for v in &mut out[(b * g.c + ch) * plane..(b * g.c + ch + 1) * plane] {
                    *v += bias;
                }
            }
        }
        (Tensor::from_vec(&[n, g.c, g.h, g.w], out).expect("transposed conv output size"), xm, g)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.geom.expect("backward before forward");
        let ci = self.inputs();
        let okk = g.c * g.k * g.k;
        let plane = g.h * g.w;
        for b in 0..g.n {
            for (ch, gb) in self.bias.grad.data_mut().iter_mut().enumerate() {
                *gb += grad.data()[(b * g.c + ch) * plane..(b * g.c + ch + 1) * plane].iter().sum::<f32>();
            }
        }
        let gcol = im2col(grad.data(), &g);
        gemm(ci, g.cols(), okk, &self.xm, false, &gcol, true, self.weight.grad.data_mut(), 1.0);
        let mut dxm = vec![0.0f32; ci * g.cols()];
        gemm(ci, okk, g.cols(), self.weight.value.data(), false, &gcol, false, &mut dxm, 0.0);
        let dx = channel_major_to_batch(&dxm, g.n, ci, g.oh * g.ow);
        Tensor::from_vec(&[g.n, ci, g.oh, g.ow], dx).expect("transposed conv input size")
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;

    fn naive_conv(x: &Tensor, c: &Conv2d) -> Tensor {
        let s = x.shape();
        let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
        let (k, st, p, o) = (c.kernel, c.stride, c.pad, c.outputs());
        let (oh, ow) = (conv_out(h, k, st, p), conv_out(w, k, st, p));
        let wt = c.weight.value.data();
        let mut y = Tensor::zeros(&[n, o, oh, ow]);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = c.bias.value.data()[oc];
                        for ic in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * st + ki) as isize - p as isize;
                                    let ix = (ox * st + kj) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[((oc * ci + ic) * k + ki) * k + kj]
                                            * x.data()[((b * ci + ic) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((b * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn naive_conv_t(x: &Tensor, c: &ConvTranspose2d) -> Tensor {
        let s = x.shape();
        let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
        let (k, st, p, o) = (c.kernel, c.stride, c.pad, c.outputs());
        let (oh, ow) = (conv_t_out(h, k, st, p), conv_t_out(w, k, st, p));
        let wt = c.weight.value.data();
        let mut y = Tensor::zeros(&[n, o, oh, ow]);
        for b in 0..n {
            for oc in 0..o {
                for v in &mut y.data_mut()[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow] {
                    *v = c.bias.value.data()[oc];
                }
            }
            for ic in 0..ci {
                for iy in 0..h {
                    for ix in 0..w {
                        let xv = x.data()[((b * ci + ic) * h + iy) * w + ix];
                        for oc in 0..o {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let oy = (iy * st + ki) as isize - p as isize;
                                    let ox = (ix * st + kj) as isize - p as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                        y.data_mut()[((b * o + oc) * oh + oy as usize) * ow + ox as usize] +=
                                            xv * wt[((ic * o + oc) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 2, 1), (4, 2, 1), (3, 1, 0), (1, 1, 0)] {
            let mut c = Conv2d::new("c", 3, 5, k, s, p, &mut rng);
            let x = random(&[2, 3, 8, 7], &mut rng);
            let fast = c.forward(&x);
            let slow = naive_conv(&x, &c);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_transpose_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = ConvTranspose2d::new("t", 4, 3, 4, 2, 1, &mut rng);
        let x = random(&[2, 4, 3, 5], &mut rng);
        let fast = c.forward(&x);
        assert_eq!(fast.shape(), &[2, 3, 6, 10]);
        let slow = naive_conv_t(&x, &c);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    /// `<conv(x), y> == <x, conv_backward(y)>` (bias-free adjoint identity).
    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = Conv2d::new("c", 2, 3, 3, 2, 1, &mut rng);
        c.bias.value.fill(0.0);
        let x = random(&[2, 2, 6, 6], &mut rng);
        let y = c.forward(&x);
        let r = random(y.shape(), &mut rng);
        let lhs: f32 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let dx = c.backward(&r);
        let rhs: f32 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    }
}
