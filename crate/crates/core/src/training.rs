//! Training of the generative stack and its evaluation probes.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{argmax, AgentNet};
use crate::env::NUM_ACTIONS;
use crate::error::{Error, Result};
use crate::genmodel::{
    adversarial_loss, autoencoder_loss, discriminator_loss, l2_normalize_backward, l2_normalize_rows,
    mmd_imq_with_grad, sample_sphere, DiscriminatorLoss, GenModel, GenParts,
};
use crate::nn::{softmax_rows, zero_grads, Adam, AdamConfig, Layer, Linear, Mode, Param, Sequential};
use crate::persistence::{atomic_write, load_checkpoint, save_checkpoint, Checkpoint, RolloutDataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the adversarial term; 0 disables it.
    pub lambda: f32,
    pub disc_loss: DiscriminatorLoss,
    /// Learning rate shared by `E`, `G` and `D` (Adam with β = (0, 0.9)).
    pub lr: f32,
    /// Learning rate of the Wasserstein autoencoder (Adam, default betas).
    pub wae_lr: f32,
    /// Scale `C` of the inverse multiquadratic kernel.
    pub mmd_scale: f64,
    pub mmd_weight: f64,
    /// Train the Wasserstein autoencoder in its own pass after the other
    /// networks instead of interleaving it batch by batch.
    pub wae_separate: bool,
    /// Evaluate reconstruction and the invariance probe on held-out records
    /// every this many epochs (and after the last); 0 disables it.
    pub eval_every: usize,
    /// Upper bound on held-out records used per evaluation.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lambda: 20.0,
            disc_loss: DiscriminatorLoss::Mse,
            lr: 1e-4,
            wae_lr: 1e-4,
            mmd_scale: 256.0,
            mmd_weight: 1.0,
            wae_separate: false,
            eval_every: 5,
            eval_samples: 2000,
        }
    }
}

/// A dataset together with the frozen agent's latents and policies.
pub struct TrainData<'a> {
    pub dataset: &'a RolloutDataset,
    pub z: Tensor,
    pub pi: Tensor,
    /// Records used for gradient updates.
    pub train: Vec<usize>,
    /// Records reserved for evaluation, grouped by whole episodes.
    pub holdout: Vec<usize>,
}

/// One minibatch: observations, agent latents and action distributions.
pub struct Batch {
    pub s: Tensor,
    pub z: Tensor,
    pub pi: Tensor,
}

impl<'a> TrainData<'a> {
    /// Computes `A(s)` for every record. The stored distributions are used as `π`.
    pub fn new(agent: &AgentNet, dataset: &'a RolloutDataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let idx: Vec<usize> = (0..dataset.len()).collect();
        let mut rows = Vec::with_capacity(dataset.len() * crate::agent::LATENT_DIM);
        for chunk in idx.chunks(64) {
            rows.extend_from_slice(agent.latent(&dataset.observations(chunk))?.data());
        }
        let z = Tensor::from_vec(&[dataset.len(), crate::agent::LATENT_DIM], rows)?;
        Ok(TrainData { dataset, z, pi: dataset.policies(&idx), train: idx, holdout: Vec::new() })
    }

    /// Like [`TrainData::new`] but reserves whole episodes, picked in seeded
    /// random order, until at least `fraction` of the records are held out.
    pub fn with_holdout(agent: &AgentNet, dataset: &'a RolloutDataset, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("holdout fraction {fraction} outside [0, 1)")));
        }
        let mut data = TrainData::new(agent, dataset)?;
        let mut episodes: Vec<u32> = dataset.records.iter().map(|r| r.episode).collect();
        episodes.sort_unstable();
        episodes.dedup();
        episodes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let want = (fraction * dataset.len() as f64).ceil() as usize;
        let mut held = std::collections::HashSet::new();
        let mut count = 0;
        for ep in episodes {
            if count >= want {
                break;
            }
            count += dataset.records.iter().filter(|r| r.episode == ep).count();
            held.insert(ep);
        }
        let (holdout, train): (Vec<usize>, Vec<usize>) =
            (0..dataset.len()).partition(|&i| held.contains(&dataset.records[i].episode));
        if train.len() < 2 {
            return Err(Error::InvalidArgument("holdout leaves fewer than two training records".into()));
        }
        data.train = train;
        data.holdout = holdout;
        Ok(data)
    }

    /// Number of training records.
    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch { s: self.dataset.observations(idx), z: self.z.gather_rows(idx), pi: self.pi.gather_rows(idx) }
    }
}

/// Generator inputs for a batch, with `E(s)` supplied by the caller and
/// `z_w` computed by the (frozen) Wasserstein encoder when needed.
fn batch_parts<'a>(
    model: &GenModel,
    e: Option<&'a Tensor>,
    zw: &'a mut Option<Tensor>,
    b: &'a Batch,
) -> Result<GenParts<'a>> {
    if model.inputs.wae {
        *zw = Some(model.wae_encode(&b.z)?);
    }
    Ok(GenParts {
        e: if model.inputs.encoder { e } else { None },
        zw: zw.as_ref(),
        z: model.inputs.agent.then_some(&b.z),
        pi: model.inputs.policy.then_some(&b.pi),
    })
}

/// Generator reconstruction of every sample in `b` under the model's inputs.
pub fn reconstruct(model: &GenModel, b: &Batch) -> Result<Tensor> {
    let e = if model.inputs.encoder { Some(model.encode(&b.s)?) } else { None };
    let mut zw = None;
    let parts = batch_parts(model, e.as_ref(), &mut zw, b)?;
    model.generate(&parts)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub batches: usize,
    pub loss_disc: f64,
    pub loss_ae: f64,
    pub loss_adv: f64,
    pub wae_recon: f64,
    pub wae_mmd: f64,
    pub seconds: f64,
    /// Held-out per-pixel reconstruction error, on evaluation epochs.
    pub recon_mse: Option<f64>,
    /// Held-out invariance probe, on evaluation epochs of models with an encoder.
    pub probe: Option<ProbeReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    /// SHA-256 of the JSON-serialized training configuration.
    pub config_hash: String,
    pub epochs: Vec<EpochReport>,
}

impl TrainConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    config: TrainConfig,
    seed: u64,
    epoch: usize,
    steps: [u64; 3],
    report: TrainReport,
}

/// Owns the model under training and the three optimizers. Each update
/// step touches only its own networks.
pub struct Trainer {
    pub model: GenModel,
    pub config: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub report: TrainReport,
    opt_disc: Adam,
    opt_ae: Adam,
    opt_wae: Adam,
}

fn adversarial_adam(lr: f32) -> Adam {
    Adam::new(AdamConfig { lr, beta1: 0.0, beta2: 0.9, ..Default::default() })
}

fn collect<'a>(nets: impl IntoIterator<Item = &'a mut Sequential>) -> Vec<&'a mut Param> {
    nets.into_iter().flat_map(|s| s.params_mut()).collect()
}

impl Trainer {
    pub fn new(model: GenModel, config: TrainConfig, seed: u64) -> Self {
        let hash = config.hash();
        Trainer {
            opt_disc: adversarial_adam(config.lr),
            opt_ae: adversarial_adam(config.lr),
            opt_wae: Adam::new(AdamConfig { lr: config.wae_lr, ..Default::default() }),
            model,
            config,
            seed,
            epoch: 0,
            report: TrainReport { seed, config_hash: hash, epochs: Vec::new() },
        }
    }

    /// Discriminator update on frozen encodings. Returns the loss.
    pub fn step_discriminator(&mut self, b: &Batch, rng: &mut ChaCha8Rng) -> Result<f64> {
        let (Some(enc), Some(disc)) = (self.model.encoder.as_mut(), self.model.discriminator.as_mut()) else {
            return Ok(0.0);
        };
        let e = enc.forward(&b.s, &mut Mode::Batch);
        zero_grads(disc.params_mut());
        let logits = disc.forward(&e, &mut Mode::Train(rng));
        let (loss, grad) = discriminator_loss(&logits, &b.pi, self.config.disc_loss)?;
        finite(loss, "discriminator loss")?;
        disc.backward(&grad);
        self.opt_disc.step(&mut disc.params_mut());
        Ok(loss)
    }

    /// Encoder and generator update on reconstruction plus the adversarial
    /// term. Returns `(reconstruction, adversarial)` losses.
    pub fn step_autoencoder(&mut self, b: &Batch, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let e = match self.model.encoder.as_mut() {
            Some(enc) => {
                zero_grads(enc.params_mut());
                Some(enc.forward(&b.s, &mut Mode::Train(rng)))
            }
            None => None,
        };
        let mut zw = None;
        let parts = batch_parts(&self.model, e.as_ref(), &mut zw, b)?;
        let (input, cond) = self.model.assemble(&parts)?;
        let gen = &mut self.model.generator;
        zero_grads(gen.params_mut());
        let recon = gen.forward(&input, &cond, &mut Mode::Train(rng));
        let (loss_ae, grad) = autoencoder_loss(&recon, &b.s)?;
        finite(loss_ae, "reconstruction loss")?;
        let (d_input, _) = gen.backward(&grad);
        let mut loss_adv = 0.0;
        if let (Some(e), Some(enc)) = (e, self.model.encoder.as_mut()) {
            let latent = self.model.arch.latent_dim;
            let (mut d_e, _) = d_input.split_cols(latent);
            if let Some(disc) = self.model.discriminator.as_mut() {
                if self.config.lambda > 0.0 {
                    let logits = disc.forward(&e, &mut Mode::Eval);
                    let (l, g) = adversarial_loss(&logits, self.config.lambda)?;
                    finite(l, "adversarial loss")?;
                    loss_adv = l;
                    d_e.add_assign(&disc.backward(&g));
                    zero_grads(disc.params_mut());
                }
            }
            enc.backward(&d_e);
        }
        let mut params: Vec<&mut Param> = Vec::new();
        if let Some(enc) = self.model.encoder.as_mut() {
            params.extend(enc.params_mut());
        }
        params.extend(self.model.generator.params_mut());
        self.opt_ae.step(&mut params);
        Ok((loss_ae, loss_adv))
    }

    /// Wasserstein autoencoder update on agent latents. Returns
    /// `(reconstruction, MMD)`.
    pub fn step_wae(&mut self, z: &Tensor, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let (ew, dw) = (&mut self.model.wae_encoder, &mut self.model.wae_decoder);
        zero_grads(collect([&mut *ew, &mut *dw]));
        let raw = ew.forward(z, &mut Mode::Train(rng));
        let (zw, norms) = l2_normalize_rows(&raw)?;
        let zr = dw.forward(&zw, &mut Mode::Train(rng));
        let (recon, g_recon) = autoencoder_loss(&zr, z)?;
        let prior = sample_sphere(z.rows(), zw.row_len(), rng);
        let (mmd, mut g_mmd) = mmd_imq_with_grad(&zw, &prior, self.config.mmd_scale)?;
        finite(recon + mmd, "autoencoder loss on agent latents")?;
        g_mmd.scale(self.config.mmd_weight as f32);
        let mut g_zw = dw.backward(&g_recon);
        g_zw.add_assign(&g_mmd);
        ew.backward(&l2_normalize_backward(&zw, &norms, &g_zw));
        self.opt_wae.step(&mut collect([ew, dw]));
        Ok((recon, mmd))
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    fn batches(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.chunks(self.config.batch_size.max(2)).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
    }

    /// Epochs spent on the Wasserstein autoencoder alone before the others,
    /// used when the generator consumes `z_w`.
    fn wae_first(&self) -> bool {
        self.model.inputs.wae
    }

    fn total_epochs(&self) -> usize {
        if self.wae_first() || self.config.wae_separate {
            2 * self.config.epochs
        } else {
            self.config.epochs
        }
    }

    /// Runs one epoch. Depending on the schedule it updates all networks
    /// batch by batch, or only the Wasserstein autoencoder, or only the rest.
    pub fn run_epoch(&mut self, data: &TrainData<'_>) -> Result<EpochReport> {
        let start = std::time::Instant::now();
        let epoch = self.epoch;
        let mut rng = self.epoch_rng(epoch);
        let split = self.wae_first() || self.config.wae_separate;
        let wae_phase = self.wae_first() && epoch < self.config.epochs
            || self.config.wae_separate && !self.wae_first() && epoch >= self.config.epochs;
        let (do_wae, do_rest) = if split { (wae_phase, !wae_phase) } else { (true, true) };
        let mut r = EpochReport { epoch, ..Default::default() };
        for idx in self.batches(data.len(), &mut rng) {
            let idx: Vec<usize> = idx.iter().map(|&i| data.train[i]).collect();
            let b = data.batch(&idx);
            if do_rest {
                r.loss_disc += self.step_discriminator(&b, &mut rng)?;
                let (ae, adv) = self.step_autoencoder(&b, &mut rng)?;
                r.loss_ae += ae;
                r.loss_adv += adv;
            }
            if do_wae {
                let (rec, mmd) = self.step_wae(&b.z, &mut rng)?;
                r.wae_recon += rec;
                r.wae_mmd += mmd;
            }
            r.batches += 1;
        }
        let n = r.batches.max(1) as f64;
        for v in [&mut r.loss_disc, &mut r.loss_ae, &mut r.loss_adv, &mut r.wae_recon, &mut r.wae_mmd] {
            *v /= n;
        }
        r.seconds = start.elapsed().as_secs_f64();
        self.epoch += 1;
        let every = self.config.eval_every;
        if every > 0 && !data.holdout.is_empty() && (self.epoch.is_multiple_of(every) || self.finished()) {
            let idx = &data.holdout[..data.holdout.len().min(self.config.eval_samples)];
            r.recon_mse = Some(eval_reconstruction(&self.model, data, idx)?);
            if self.model.encoder.is_some() {
                match probe_invariance(&self.model, data, idx, self.seed) {
                    Ok(p) => r.probe = Some(p),
                    Err(Error::InsufficientClassCoverage) => log::warn!("probe skipped: insufficient class coverage"),
                    Err(e) => return Err(e),
                }
            }
        }
        self.report.epochs.push(r.clone());
        Ok(r)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.total_epochs()
    }

    /// Trains until every scheduled epoch has run, appending one JSON line
    /// per epoch to `log` and checkpointing into `checkpoint_dir` after each.
    pub fn train(
        &mut self,
        data: &TrainData<'_>,
        mut log: Option<&mut dyn Write>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<&TrainReport> {
        while !self.finished() {
            let r = self.run_epoch(data)?;
            log::info!(
                "epoch {} ae {:.3} disc {:.4} adv {:.3} wae {:.3} mmd {:.5} ({:.0}s)",
                r.epoch,
                r.loss_ae,
                r.loss_disc,
                r.loss_adv,
                r.wae_recon,
                r.wae_mmd,
                r.seconds
            );
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&r).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(w, "{line}")?;
            }
            if let Some(dir) = checkpoint_dir {
                self.save(dir)?;
            }
        }
        Ok(&self.report)
    }

    /// Saves the model, optimizer state and schedule position.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        let mut ckpt = Checkpoint::default();
        for (tag, opt) in [("disc", &self.opt_disc), ("ae", &self.opt_ae), ("wae", &self.opt_wae)] {
            for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                ckpt.tensors.push((format!("{tag}.m.{i}"), m.clone()));
                ckpt.tensors.push((format!("{tag}.v.{i}"), v.clone()));
            }
        }
        save_checkpoint(&dir.join("optim.ckpt"), &ckpt)?;
        let meta = TrainerMeta {
            config: self.config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            steps: [self.opt_disc.step, self.opt_ae.step, self.opt_wae.step],
            report: self.report.clone(),
        };
        let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        atomic_write(&dir.join("trainer.json"), &json)
    }

    pub fn resume(dir: &Path) -> Result<Self> {
        let model = GenModel::load(dir)?;
        let meta: TrainerMeta = serde_json::from_slice(&std::fs::read(dir.join("trainer.json"))?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let ckpt = load_checkpoint(&dir.join("optim.ckpt"))?;
        let mut t = Trainer::new(model, meta.config, meta.seed);
        t.epoch = meta.epoch;
        t.report = meta.report;
        for ((tag, opt), step) in
            [("disc", &mut t.opt_disc), ("ae", &mut t.opt_ae), ("wae", &mut t.opt_wae)].into_iter().zip(meta.steps)
        {
            opt.step = step;
            let mut i = 0;
            while let (Some(m), Some(v)) = (ckpt.get(&format!("{tag}.m.{i}")), ckpt.get(&format!("{tag}.v.{i}"))) {
                opt.m.push(m.clone());
                opt.v.push(v.clone());
                i += 1;
            }
        }
        Ok(t)
    }
}

fn finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Final summary written next to the per-epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub epochs: usize,
    pub seconds: f64,
    pub last: Option<EpochReport>,
    /// Most recent held-out evaluation.
    pub recon_mse: Option<f64>,
    pub probe: Option<ProbeReport>,
}

impl TrainSummary {
    pub fn from_report(config: &TrainConfig, report: &TrainReport) -> Self {
        TrainSummary {
            seed: report.seed,
            config_hash: report.config_hash.clone(),
            config: config.clone(),
            epochs: report.epochs.len(),
            seconds: report.epochs.iter().map(|e| e.seconds).sum(),
            last: report.epochs.last().cloned(),
            recon_mse: report.epochs.iter().rev().find_map(|e| e.recon_mse),
            probe: report.epochs.iter().rev().find_map(|e| e.probe.clone()),
        }
    }
}

/// Trains inside `dir`, resuming from a checkpoint there if one exists.
/// Appends one JSON line per epoch to `train.jsonl`, checkpoints after each
/// epoch and finishes with `summary.json`.
pub fn train_in_dir(
    model: GenModel,
    data: &TrainData<'_>,
    config: &TrainConfig,
    seed: u64,
    dir: &Path,
) -> Result<Trainer> {
    std::fs::create_dir_all(dir)?;
    let mut trainer = if dir.join("trainer.json").exists() {
        let t = Trainer::resume(dir)?;
        if t.config != *config || t.seed != seed || t.model.inputs != model.inputs || t.model.arch != model.arch {
            return Err(Error::Config(format!("{} holds a run with a different configuration", dir.display())));
        }
        log::info!("resuming {} at epoch {}", dir.display(), t.epoch);
        t
    } else {
        Trainer::new(model, config.clone(), seed)
    };
    let mut log = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("train.jsonl"))?;
    trainer.train(data, Some(&mut log), Some(dir))?;
    let summary = TrainSummary::from_report(&trainer.config, &trainer.report);
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    atomic_write(&dir.join("summary.json"), &json)?;
    Ok(trainer)
}

/// Trains a model from scratch with the given configuration.
pub fn train_models(model: GenModel, data: &TrainData<'_>, config: &TrainConfig, seed: u64) -> Result<Trainer> {
    let mut t = Trainer::new(model, config.clone(), seed);
    t.train(data, None, None)?;
    Ok(t)
}

/// Mean squared error per pixel of the model's reconstructions over `idx`.
pub fn eval_reconstruction(model: &GenModel, data: &TrainData<'_>, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for chunk in idx.chunks(64) {
        let b = data.batch(chunk);
        let r = reconstruct(model, &b)?;
        sum += r.data().iter().zip(b.s.data()).map(|(&a, &t)| (a as f64 - t as f64).powi(2)).sum::<f64>();
        count += r.len();
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    /// Accuracy of always predicting the most frequent training label.
    pub chance: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Stratified 80/20 split by label. Every present label keeps
/// `floor(0.8·count)` samples for training; a label left without training
/// samples is an error.
pub fn stratified_split(labels: &[usize], rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut members in by_class.into_iter().filter(|m| !m.is_empty()) {
        members.shuffle(rng);
        let cut = members.len() * 4 / 5;
        if cut == 0 {
            return Err(Error::InsufficientClassCoverage);
        }
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Trains a fresh two-layer classifier to predict the agent's greedy action
/// from frozen features and reports its held-out accuracy.
pub fn probe_accuracy(features: &Tensor, labels: &[usize], seed: u64) -> Result<ProbeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, test) = stratified_split(labels, &mut rng)?;
    if test.is_empty() {
        return Err(Error::InsufficientClassCoverage);
    }
    let d = features.row_len();
    let xtr = features.gather_rows(&train);
    let (mean, std) = column_stats(&xtr);
    let norm = |x: &Tensor| {
        let mut y = x.clone();
        for i in 0..y.rows() {
            for ((v, m), s) in y.row_mut(i).iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
        y
    };
    let (xtr, xte) = (norm(&xtr), norm(&features.gather_rows(&test)));
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let mut probe = Sequential::new(vec![
        Layer::Linear(Linear::new("probe.fc0", d, 64, &mut rng)),
        Layer::relu(),
        Layer::Linear(Linear::new("probe.fc1", 64, NUM_ACTIONS, &mut rng)),
    ]);
    let mut opt = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() });
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..60 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(64) {
            let x = xtr.gather_rows(chunk);
            zero_grads(probe.params_mut());
            let p = softmax_rows(&probe.forward(&x, &mut Mode::Eval));
            let mut g = p.clone();
            for (r, &i) in chunk.iter().enumerate() {
                g.row_mut(r)[ytr[i]] -= 1.0;
            }
            g.scale(1.0 / chunk.len() as f32);
            probe.backward(&g);
            opt.step(&mut probe.params_mut());
        }
    }
    let pred = probe.infer(&xte);
    let correct = (0..yte.len()).filter(|&i| argmax(pred.row(i)) == yte[i]).count();
    let mut counts = [0usize; NUM_ACTIONS];
    for &y in &ytr {
        counts[y] += 1;
    }
    let majority = argmax(&counts.iter().map(|&c| c as f32).collect::<Vec<_>>());
    let chance = yte.iter().filter(|&&y| y == majority).count() as f64 / yte.len() as f64;
    Ok(ProbeReport {
        accuracy: correct as f64 / yte.len() as f64,
        chance,
        train_size: train.len(),
        test_size: test.len(),
    })
}

fn column_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let (n, d) = (x.rows() as f64, x.row_len());
    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for i in 0..x.rows() {
        for (j, &v) in x.row(i).iter().enumerate() {
            mean[j] += v as f64;
            sq[j] += (v as f64).powi(2);
        }
    }
    let mean: Vec<f64> = mean.iter().map(|m| m / n).collect();
    let std = sq.iter().zip(&mean).map(|(s, m)| ((s / n - m * m).max(0.0).sqrt().max(1e-6)) as f32).collect();
    (mean.iter().map(|&m| m as f32).collect(), std)
}

/// How much of the agent's greedy action can be read off `E(s)`.
pub fn probe_invariance(model: &GenModel, data: &TrainData<'_>, idx: &[usize], seed: u64) -> Result<ProbeReport> {
    let mut rows = Vec::new();
    for chunk in idx.chunks(64) {
        rows.extend_from_slice(model.encode(&data.dataset.observations(chunk))?.data());
    }
    let features = Tensor::from_vec(&[idx.len(), model.arch.latent_dim], rows)?;
    let labels: Vec<usize> = idx.iter().map(|&i| argmax(data.pi.row(i))).collect();
    probe_accuracy(&features, &labels, seed)
}
