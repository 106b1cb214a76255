//! The generative stack: encoder `E`, generator `G`, discriminator `D` and
//! the Wasserstein autoencoder `E_w`/`D_w` over agent latents.

mod losses;
mod networks;

pub use losses::{
    adversarial_loss, autoencoder_loss, discriminator_loss, entropy, imq_kernel, l2_normalize_backward,
    l2_normalize_rows, mmd_imq, mmd_imq_with_grad, sample_sphere, DiscriminatorLoss,
};
pub use networks::{append_channels, discriminator, encoder, mlp, split_channels, Generator};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::LATENT_DIM;
use crate::env::{CHANNELS, FRAME_H, FRAME_W, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Param, Sequential};
use crate::persistence::{atomic_write, load_checkpoint, save_checkpoint, Checkpoint};
use crate::tensor::Tensor;

/// Layer widths of the generative stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenArch {
    /// Divides every convolutional channel count; 1 is the full-size model.
    pub width_divisor: usize,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub wae_dim: usize,
    pub wae_hidden: usize,
    pub dropout: f32,
}

impl Default for GenArch {
    fn default() -> Self {
        GenArch { width_divisor: 4, latent_dim: 16, encoder_hidden: 128, wae_dim: 128, wae_hidden: 256, dropout: 0.2 }
    }
}

impl GenArch {
    fn scaled<const N: usize>(&self, full: [usize; N]) -> [usize; N] {
        full.map(|c| (c / self.width_divisor.max(1)).max(1))
    }

    pub fn encoder_channels(&self) -> [usize; 5] {
        self.scaled([32, 64, 128, 256, 256])
    }

    pub fn generator_channels(&self) -> [usize; 5] {
        self.scaled([512, 256, 128, 128, 64])
    }
}

/// Which signals the generator receives, in the fixed order
/// `E(s)`, `z_w`, `z`, `π`. The action distribution, when present, is also
/// broadcast as constant channels into every transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenInputs {
    pub encoder: bool,
    pub wae: bool,
    pub agent: bool,
    pub policy: bool,
}

impl GenInputs {
    pub const FULL: GenInputs = GenInputs { encoder: true, wae: false, agent: false, policy: true };

    pub fn input_dim(&self, arch: &GenArch) -> usize {
        let mut d = 0;
        if self.encoder {
            d += arch.latent_dim;
        }
        if self.wae {
            d += arch.wae_dim;
        }
        if self.agent {
            d += LATENT_DIM;
        }
        if self.policy {
            d += NUM_ACTIONS;
        }
        d
    }

    /// The adversarial discriminator only makes sense when both the encoding
    /// and the action distribution are inputs.
    pub fn adversarial(&self) -> bool {
        self.encoder && self.policy
    }
}

/// Batched generator inputs; each must be present iff the model uses it.
#[derive(Debug, Clone, Copy, Default)]
pub struct GenParts<'a> {
    pub e: Option<&'a Tensor>,
    pub zw: Option<&'a Tensor>,
    pub z: Option<&'a Tensor>,
    pub pi: Option<&'a Tensor>,
}

#[derive(Debug, Clone)]
pub struct GenModel {
    pub arch: GenArch,
    pub inputs: GenInputs,
    pub encoder: Option<Sequential>,
    pub generator: Generator,
    pub discriminator: Option<Sequential>,
    pub wae_encoder: Sequential,
    pub wae_decoder: Sequential,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    arch: GenArch,
    inputs: GenInputs,
}

impl GenModel {
    pub fn new(arch: GenArch, inputs: GenInputs, seed: u64) -> Result<Self> {
        if inputs.input_dim(&arch) == 0 {
            return Err(Error::InvalidArgument("generator needs at least one input".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = inputs
            .encoder
            .then(|| encoder(&arch.encoder_channels(), arch.encoder_hidden, arch.latent_dim, CHANNELS, &mut rng));
        let cond = if inputs.policy { NUM_ACTIONS } else { 0 };
        let generator = Generator::new(inputs.input_dim(&arch), cond, &arch.generator_channels(), CHANNELS, &mut rng);
        let discriminator =
            inputs.adversarial().then(|| discriminator(arch.latent_dim, NUM_ACTIONS, arch.dropout, &mut rng));
        let h = arch.wae_hidden;
        let wae_encoder = mlp("Ew", [LATENT_DIM, h, h, arch.wae_dim], &mut rng);
        let wae_decoder = mlp("Dw", [arch.wae_dim, h, h, LATENT_DIM], &mut rng);
        Ok(GenModel { arch, inputs, encoder, generator, discriminator, wae_encoder, wae_decoder })
    }

    fn encoder_ref(&self) -> Result<&Sequential> {
        self.encoder.as_ref().ok_or_else(|| Error::InvalidArgument("model has no state encoder".into()))
    }

    /// `E(s)` for `[n, 12, 64, 64]` observations.
    pub fn encode(&self, s: &Tensor) -> Result<Tensor> {
        check_images(s)?;
        Ok(self.encoder_ref()?.infer(s))
    }

    /// `D(E(s))` as probabilities.
    pub fn discriminate(&self, e: &Tensor) -> Result<Tensor> {
        let d =
            self.discriminator.as_ref().ok_or_else(|| Error::InvalidArgument("model has no discriminator".into()))?;
        check_width(e, self.arch.latent_dim, "encoding")?;
        Ok(softmax_rows(&d.infer(e)))
    }

    /// `E_w(z)`, projected onto the unit sphere.
    pub fn wae_encode(&self, z: &Tensor) -> Result<Tensor> {
        check_width(z, LATENT_DIM, "agent latent")?;
        Ok(l2_normalize_rows(&self.wae_encoder.infer(z))?.0)
    }

    /// `D_w(z_w)`.
    pub fn wae_decode(&self, zw: &Tensor) -> Result<Tensor> {
        check_width(zw, self.arch.wae_dim, "WAE latent")?;
        Ok(self.wae_decoder.infer(zw))
    }

    /// Concatenates the generator input and condition from `parts`.
    pub fn assemble(&self, parts: &GenParts<'_>) -> Result<(Tensor, Tensor)> {
        let layout = [
            ("E(s)", self.inputs.encoder, parts.e, self.arch.latent_dim),
            ("z_w", self.inputs.wae, parts.zw, self.arch.wae_dim),
            ("z", self.inputs.agent, parts.z, LATENT_DIM),
            ("π", self.inputs.policy, parts.pi, NUM_ACTIONS),
        ];
        let mut input: Option<Tensor> = None;
        for (name, used, part, width) in layout {
            match (used, part) {
                (true, Some(t)) => {
                    check_width(t, width, name)?;
                    input = Some(match input {
                        None => t.clone(),
                        Some(acc) if acc.rows() == t.rows() => Tensor::concat_cols(&acc, t),
                        Some(_) => return Err(Error::Shape("generator inputs differ in batch size".into())),
                    });
                }
                (true, None) => return Err(Error::InvalidArgument(format!("generator input {name} missing"))),
                (false, Some(_)) => return Err(Error::InvalidArgument(format!("model does not take {name}"))),
                (false, None) => {}
            }
        }
        let input = input.expect("input_dim > 0");
        let cond = match parts.pi {
            Some(pi) if self.inputs.policy => pi.clone(),
            _ => Tensor::zeros(&[input.rows(), 0]),
        };
        Ok((input, cond))
    }

    /// `G(...)`: decodes an image from the given parts.
    pub fn generate(&self, parts: &GenParts<'_>) -> Result<Tensor> {
        let (input, cond) = self.assemble(parts)?;
        Ok(self.generator.infer(&input, &cond))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = Vec::new();
        if let Some(e) = &self.encoder {
            p.extend(e.params());
        }
        p.extend(self.generator.params());
        if let Some(d) = &self.discriminator {
            p.extend(d.params());
        }
        p.extend(self.wae_encoder.params());
        p.extend(self.wae_decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = Vec::new();
        if let Some(e) = &mut self.encoder {
            p.extend(e.params_mut());
        }
        p.extend(self.generator.params_mut());
        if let Some(d) = &mut self.discriminator {
            p.extend(d.params_mut());
        }
        p.extend(self.wae_encoder.params_mut());
        p.extend(self.wae_decoder.params_mut());
        p
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.params())
    }

    pub fn from_checkpoint(arch: GenArch, inputs: GenInputs, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = GenModel::new(arch, inputs, 0)?;
        ckpt.restore(m.params_mut())?;
        Ok(m)
    }

    /// Writes `model.json` and `model.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::to_vec_pretty(&ModelMeta { arch: self.arch, inputs: self.inputs })
            .map_err(|e| Error::Format(e.to_string()))?;
        atomic_write(&dir.join("model.json"), &meta)?;
        save_checkpoint(&dir.join("model.ckpt"), &self.to_checkpoint())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_slice(&std::fs::read(dir.join("model.json"))?)
            .map_err(|e| Error::Format(e.to_string()))?;
        GenModel::from_checkpoint(meta.arch, meta.inputs, &load_checkpoint(&dir.join("model.ckpt"))?)
    }
}

pub(crate) fn check_images(s: &Tensor) -> Result<()> {
    if s.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if s.shape() != [s.rows(), CHANNELS, FRAME_H, FRAME_W] {
        return Err(Error::Shape(format!("expected [n, {CHANNELS}, {FRAME_H}, {FRAME_W}], got {:?}", s.shape())));
    }
    Ok(())
}

pub(crate) fn check_width(t: &Tensor, width: usize, what: &str) -> Result<()> {
    if t.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if t.shape() != [t.rows(), width] {
        return Err(Error::Shape(format!("{what} must be [n, {width}], got {:?}", t.shape())));
    }
    Ok(())
}
