use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax_rows;
use crate::tensor::Tensor;

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(p: &[f32]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v as f64 * (v as f64).ln()).sum::<f64>()
}

fn check_nonempty(t: &Tensor) -> Result<()> {
    if t.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Batch mean of the summed squared reconstruction error, with its gradient
/// with respect to `recon`.
pub fn autoencoder_loss(recon: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_nonempty(recon)?;
    if recon.shape() != target.shape() {
        return Err(Error::Shape(format!("reconstruction {:?} vs target {:?}", recon.shape(), target.shape())));
    }
    let n = recon.rows() as f64;
    let mut grad = Tensor::zeros(recon.shape());
    let mut sum = 0.0f64;
    for ((g, &r), &t) in grad.data_mut().iter_mut().zip(recon.data()).zip(target.data()) {
        let d = r as f64 - t as f64;
        sum += d * d;
        *g = (2.0 * d / n) as f32;
    }
    Ok((sum / n, grad))
}

/// Training signal for the discriminator that predicts `π` from `E(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorLoss {
    /// Squared error between predicted and true distributions.
    #[default]
    Mse,
    /// `KL(π ‖ D(E(s)))`, experimental.
    Kl,
}

/// Loss of discriminator logits against target distributions, with the
/// gradient with respect to the logits.
pub fn discriminator_loss(logits: &Tensor, target: &Tensor, kind: DiscriminatorLoss) -> Result<(f64, Tensor)> {
    check_nonempty(logits)?;
    if logits.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", logits.shape(), target.shape())));
    }
    let n = logits.rows() as f64;
    let p = softmax_rows(logits);
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0f64;
    for i in 0..p.rows() {
        let (pr, tr) = (p.row(i), target.row(i));
        match kind {
            DiscriminatorLoss::Mse => {
                let d: Vec<f64> = pr.iter().zip(tr).map(|(&a, &b)| a as f64 - b as f64).collect();
                loss += d.iter().map(|v| v * v).sum::<f64>();
                // Chain through the softmax: dL/dz_j = p_j (g_j − Σ_k p_k g_k) with g = 2d.
                let dot: f64 = pr.iter().zip(&d).map(|(&a, b)| a as f64 * 2.0 * b).sum();
                for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                    *g = (pr[j] as f64 * (2.0 * d[j] - dot) / n) as f32;
                }
            }
            DiscriminatorLoss::Kl => {
                for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                    let (q, t) = (pr[j] as f64, tr[j] as f64);
                    if t > 0.0 {
                        loss += t * (t.ln() - q.max(1e-30).ln());
                    }
                    *g = ((q - t) / n) as f32;
                }
            }
        }
    }
    Ok((loss / n, grad))
}

/// `(λ/|B|) Σ −H(softmax(logits))` with its gradient with respect to the
/// logits. Minimizing it pushes the discriminator's output towards uniform.
pub fn adversarial_loss(logits: &Tensor, lambda: f32) -> Result<(f64, Tensor)> {
    check_nonempty(logits)?;
    let n = logits.rows() as f64;
    let scale = lambda as f64 / n;
    let p = softmax_rows(logits);
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0f64;
    for i in 0..p.rows() {
        let pr = p.row(i);
        let h = entropy(pr);
        loss -= h;
        // d(−H)/dz_j = p_j (ln p_j + H)
        for (g, &pj) in grad.row_mut(i).iter_mut().zip(pr) {
            let lp = if pj > 0.0 { (pj as f64).ln() } else { 0.0 };
            *g = (scale * pj as f64 * (lp + h)) as f32;
        }
    }
    Ok((loss * scale, grad))
}

/// Inverse multiquadratic kernel `C / (C + ‖x − y‖²)`.
pub fn imq_kernel(x: &[f32], y: &[f32], c: f64) -> f64 {
    c / (c + sq_dist(x, y))
}

fn sq_dist(x: &[f32], y: &[f32]) -> f64 {
    x.iter().zip(y).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum()
}

fn check_mmd(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::InvalidArgument("MMD needs at least two samples on each side".into()));
    }
    if x.row_len() != y.row_len() {
        return Err(Error::Shape(format!("MMD sample widths {} vs {}", x.row_len(), y.row_len())));
    }
    Ok(())
}

/// Unbiased MMD² estimate between samples `x` and `y` under the IMQ kernel.
pub fn mmd_imq(x: &Tensor, y: &Tensor, c: f64) -> Result<f64> {
    Ok(mmd_imq_with_grad(x, y, c)?.0)
}

/// [`mmd_imq`] together with its gradient with respect to `x`.
pub fn mmd_imq_with_grad(x: &Tensor, y: &Tensor, c: f64) -> Result<(f64, Tensor)> {
    check_mmd(x, y)?;
    let (n, m, d) = (x.rows(), y.rows(), x.row_len());
    let mut grad = vec![0.0f64; n * d];
    let (mut kxx, mut kyy, mut kxy) = (0.0f64, 0.0f64, 0.0f64);
    let wxx = 1.0 / (n * (n - 1)) as f64;
    let wxy = 2.0 / (n * m) as f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let (xi, xj) = (x.row(i), x.row(j));
            let dist = sq_dist(xi, xj);
            kxx += 2.0 * c / (c + dist);
            // Both ordered pairs (i, j) and (j, i) contribute.
            let dk = -c / (c + dist).powi(2) * 2.0 * wxx;
            for k in 0..d {
                let diff = xi[k] as f64 - xj[k] as f64;
                grad[i * d + k] += dk * 2.0 * diff;
                grad[j * d + k] -= dk * 2.0 * diff;
            }
        }
        for j in 0..m {
            let (xi, yj) = (x.row(i), y.row(j));
            let dist = sq_dist(xi, yj);
            kxy += c / (c + dist);
            let dk = c / (c + dist).powi(2) * wxy;
            for k in 0..d {
                grad[i * d + k] += dk * 2.0 * (xi[k] as f64 - yj[k] as f64);
            }
        }
    }
    for i in 0..m {
        for j in (i + 1)..m {
            kyy += 2.0 * imq_kernel(y.row(i), y.row(j), c);
        }
    }
    let mmd = kxx * wxx + kyy / (m * (m - 1)) as f64 - kxy * wxy;
    let grad = Tensor::from_vec(x.shape(), grad.into_iter().map(|v| v as f32).collect())?;
    Ok((mmd, grad))
}

/// `n` points drawn uniformly from the unit sphere in `d` dimensions.
pub fn sample_sphere(n: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let row = t.row_mut(i);
        loop {
            for v in row.iter_mut() {
                *v = rng.sample::<f32, _>(StandardNormal);
            }
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for v in row.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
                break;
            }
        }
    }
    t
}

/// Projects each row onto the unit sphere. Returns the projected rows and the
/// original norms; a row with norm below 1e-12 is an error.
pub fn l2_normalize_rows(x: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = y.row_mut(i);
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("latent norm".into()));
        }
        if norm < 1e-12 {
            return Err(Error::DegenerateLatent);
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
        norms.push(norm as f32);
    }
    Ok((y, norms))
}

/// Backpropagates through [`l2_normalize_rows`]: `dx = (g − y (y·g)) / ‖x‖`.
pub fn l2_normalize_backward(y: &Tensor, norms: &[f32], grad: &Tensor) -> Tensor {
    let mut dx = grad.clone();
    for i in 0..y.rows() {
        let yr = y.row(i);
        let dot: f32 = yr.iter().zip(grad.row(i)).map(|(a, b)| a * b).sum();
        for (d, &yv) in dx.row_mut(i).iter_mut().zip(yr) {
            *d = (*d - yv * dot) / norms[i];
        }
    }
    dx
}
