//! Counterfactual generation by gradient descent in a latent space of the
//! agent, plus highlighting and query-selection heuristics.

use serde::{Deserialize, Serialize};

use crate::agent::{argmax, AgentNet, LATENT_DIM};
use crate::env::{Action, Frame, Observation, NUM_ACTIONS, STACK};
use crate::error::{Error, Result};
use crate::genmodel::{l2_normalize_rows, GenModel, GenParts};
use crate::nn::{softmax_in_place, Linear, Mode, Sequential};
use crate::tensor::Tensor;

/// Probability ceiling inside `ln(1 − p)`, which keeps the objective finite.
pub const PROB_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfConfig {
    pub step_size: f32,
    pub max_steps: usize,
    /// Project the iterate back onto the unit sphere after every step.
    pub renormalize: bool,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig { step_size: 0.05, max_steps: 500, renormalize: true }
    }
}

/// Maps the optimization variable to an agent latent `z`.
pub trait LatentDecoder {
    fn decode(&mut self, x: &[f32]) -> Result<Vec<f32>>;
    /// Gradient with respect to `x` given the gradient with respect to the
    /// output of the last `decode` call.
    fn backward(&mut self, grad: &[f32]) -> Vec<f32>;
}

/// `D_w` in evaluation mode.
pub struct WaeDecoder {
    net: Sequential,
}

impl WaeDecoder {
    pub fn new(model: &GenModel) -> Self {
        WaeDecoder { net: model.wae_decoder.clone() }
    }
}

impl LatentDecoder for WaeDecoder {
    fn decode(&mut self, x: &[f32]) -> Result<Vec<f32>> {
        let t = Tensor::from_vec(&[1, x.len()], x.to_vec())?;
        Ok(self.net.forward(&t, &mut Mode::Eval).into_vec())
    }

    fn backward(&mut self, grad: &[f32]) -> Vec<f32> {
        let g = Tensor::from_vec(&[1, grad.len()], grad.to_vec()).expect("gradient row");
        self.net.backward(&g).into_vec()
    }
}

/// Optimizes the agent latent directly.
pub struct Identity;

impl LatentDecoder for Identity {
    fn decode(&mut self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(x.to_vec())
    }

    fn backward(&mut self, grad: &[f32]) -> Vec<f32> {
        grad.to_vec()
    }
}

/// Objective value, gradient and the policy at `x`.
#[derive(Debug, Clone)]
pub struct CfEval {
    pub value: f64,
    pub grad: Vec<f32>,
    pub policy: Vec<f32>,
}

fn policy_at(head: &Linear, z: &[f32]) -> Result<Vec<f32>> {
    let mut p = head.infer(&Tensor::from_vec(&[1, z.len()], z.to_vec())?).into_vec();
    softmax_in_place(&mut p);
    Ok(p)
}

/// `‖x − x₀‖² + ln(1 − π(dec(x))[a′])` with the probability clamped below
/// [`PROB_CLAMP`]; beyond the clamp the second term is constant.
pub fn cf_objective(
    x: &[f32],
    x0: &[f32],
    target: Action,
    head: &Linear,
    decoder: &mut dyn LatentDecoder,
) -> Result<CfEval> {
    if x.len() != x0.len() {
        return Err(Error::Shape(format!("latent lengths {} and {}", x.len(), x0.len())));
    }
    let z = decoder.decode(x)?;
    if z.len() != LATENT_DIM {
        return Err(Error::Shape(format!("decoded latent has {} entries", z.len())));
    }
    let p = policy_at(head, &z)?;
    let a = target.id();
    let pa = p[a] as f64;
    let dist: f64 = x.iter().zip(x0).map(|(&u, &v)| (u as f64 - v as f64).powi(2)).sum();
    let value = dist + (1.0 - pa.min(PROB_CLAMP)).ln();
    let mut grad: Vec<f32> = x.iter().zip(x0).map(|(&u, &v)| 2.0 * (u - v)).collect();
    if pa < PROB_CLAMP {
        // d ln(1 − p_a)/d logit_j = −p_a (δ_ja − p_j) / (1 − p_a)
        let scale = -pa / (1.0 - pa);
        let d_logits: Vec<f64> =
            (0..NUM_ACTIONS).map(|j| scale * (if j == a { 1.0 } else { 0.0 } - p[j] as f64)).collect();
        let w = head.weight.value.data();
        let mut dz = vec![0.0f32; LATENT_DIM];
        for (j, &dl) in d_logits.iter().enumerate() {
            for (k, d) in dz.iter_mut().enumerate() {
                *d += (dl * w[j * LATENT_DIM + k] as f64) as f32;
            }
        }
        for (g, d) in grad.iter_mut().zip(decoder.backward(&dz)) {
            *g += d;
        }
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("counterfactual objective".into()));
    }
    Ok(CfEval { value, grad, policy: p })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfTrace {
    pub latent: Vec<f32>,
    pub steps: usize,
    pub success: bool,
    /// Objective value before each step, plus the final iterate's.
    pub objective: Vec<f64>,
    pub policy: Vec<f32>,
}

fn project(x: &mut [f32]) -> Result<()> {
    let t = Tensor::from_vec(&[1, x.len()], x.to_vec())?;
    x.copy_from_slice(l2_normalize_rows(&t)?.0.data());
    Ok(())
}

/// Gradient descent from `x0` until the target action becomes the argmax or
/// the step budget runs out.
pub fn cf_optimize(
    x0: &[f32],
    target: Action,
    head: &Linear,
    decoder: &mut dyn LatentDecoder,
    config: &CfConfig,
) -> Result<CfTrace> {
    let mut x = x0.to_vec();
    let mut objective = Vec::new();
    for step in 0..=config.max_steps {
        let eval = cf_objective(&x, x0, target, head, decoder)?;
        objective.push(eval.value);
        if argmax(&eval.policy) == target.id() || step == config.max_steps {
            let success = argmax(&eval.policy) == target.id();
            return Ok(CfTrace { latent: x, steps: step, success, objective, policy: eval.policy });
        }
        for (v, g) in x.iter_mut().zip(&eval.grad) {
            *v -= config.step_size * g;
        }
        if config.renormalize {
            project(&mut x)?;
        }
    }
    unreachable!("loop returns on the last step")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualResult {
    /// Newest frame of the query observation.
    pub query: Frame,
    /// `G(E(s), π(D_w(E_w(A(s)))))`: the model's own rendering of the query.
    pub reconstruction: Observation,
    pub counterfactual: Observation,
    /// Action the agent takes in the query state.
    pub action: Action,
    pub target: Action,
    pub pi_agent: Vec<f32>,
    pub pi_before: Vec<f32>,
    pub pi_after: Vec<f32>,
    pub steps: usize,
    pub success: bool,
    pub latent_delta: f64,
    pub zw_before: Vec<f32>,
    pub zw_after: Vec<f32>,
    pub objective: Vec<f64>,
}

/// An action as shown to people: stable id and display name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionLabel {
    pub id: usize,
    pub name: String,
}

impl From<Action> for ActionLabel {
    fn from(a: Action) -> Self {
        ActionLabel { id: a.id(), name: a.name().to_string() }
    }
}

/// Serializable summary of a [`CounterfactualResult`] without the images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfRecord {
    pub action: ActionLabel,
    pub target: ActionLabel,
    pub pi_agent: Vec<f32>,
    pub pi_before: Vec<f32>,
    pub pi_after: Vec<f32>,
    pub steps: usize,
    pub success: bool,
    pub latent_delta: f64,
    pub zw_before: Vec<f32>,
    pub zw_after: Vec<f32>,
    pub objective: Vec<f64>,
}

/// The images displayed for one counterfactual, all of the newest frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Panels {
    pub query: Frame,
    pub reconstruction: Frame,
    pub counterfactual: Frame,
    /// The query with the changed regions tinted red.
    pub highlight: Frame,
}

impl CounterfactualResult {
    pub fn record(&self) -> CfRecord {
        CfRecord {
            action: self.action.into(),
            target: self.target.into(),
            pi_agent: self.pi_agent.clone(),
            pi_before: self.pi_before.clone(),
            pi_after: self.pi_after.clone(),
            steps: self.steps,
            success: self.success,
            latent_delta: self.latent_delta,
            zw_before: self.zw_before.clone(),
            zw_after: self.zw_after.clone(),
            objective: self.objective.clone(),
        }
    }

    pub fn panels(&self, config: &HighlightConfig) -> Result<Panels> {
        let reconstruction = latest(&self.reconstruction);
        let counterfactual = latest(&self.counterfactual);
        let mask = highlight_mask(&reconstruction, &counterfactual, config)?;
        let highlight = highlight_overlay(&self.query, &mask, config)?;
        Ok(Panels { query: self.query.clone(), reconstruction, counterfactual, highlight })
    }
}

fn obs_tensor(obs: &Observation) -> Result<Tensor> {
    crate::agent::observations_tensor(&[obs])
}

fn as_observation(t: &Tensor, like: &Observation) -> Observation {
    Observation { height: like.height, width: like.width, data: t.data().to_vec() }
}

/// Decodes a state from `E(s)` and the given policy-side signals.
pub fn render_state(model: &GenModel, s: &Tensor, zw: Option<&[f32]>, z: Option<&[f32]>, pi: &[f32]) -> Result<Tensor> {
    let e = if model.inputs.encoder { Some(model.encode(s)?) } else { None };
    let row = |v: &[f32]| Tensor::from_vec(&[1, v.len()], v.to_vec());
    let zw = zw.filter(|_| model.inputs.wae).map(row).transpose()?;
    let z = z.filter(|_| model.inputs.agent).map(row).transpose()?;
    let pi = row(pi)?;
    model.generate(&GenParts { e: e.as_ref(), zw: zw.as_ref(), z: z.as_ref(), pi: model.inputs.policy.then_some(&pi) })
}

/// Moves the query's Wasserstein latent until the agent would take `target`
/// and renders the resulting state.
pub fn generate_counterfactual(
    agent: &AgentNet,
    model: &GenModel,
    obs: &Observation,
    target: Action,
    config: &CfConfig,
) -> Result<CounterfactualResult> {
    let s = obs_tensor(obs)?;
    let z = agent.latent(&s)?;
    let pi_agent = agent.policy_probs(&z)?.into_vec();
    let zw0 = model.wae_encode(&z)?.into_vec();
    let mut dec = WaeDecoder::new(model);
    let trace = cf_optimize(&zw0, target, &agent.policy, &mut dec, config)?;
    let pi_before = policy_at(&agent.policy, &dec.decode(&zw0)?)?;
    let recon = render_state(model, &s, Some(&zw0), None, &pi_before)?;
    let cf = render_state(model, &s, Some(&trace.latent), None, &trace.policy)?;
    let latent_delta = trace.latent.iter().zip(&zw0).map(|(a, b)| (a - b) as f64 * (a - b) as f64).sum::<f64>().sqrt();
    Ok(CounterfactualResult {
        query: obs.latest_frame(),
        reconstruction: as_observation(&recon, obs),
        counterfactual: as_observation(&cf, obs),
        action: Action::ALL[argmax(&pi_agent)],
        target,
        pi_agent,
        pi_before,
        pi_after: trace.policy.clone(),
        steps: trace.steps,
        success: trace.success,
        latent_delta,
        zw_before: zw0,
        zw_after: trace.latent,
        objective: trace.objective,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HighlightConfig {
    pub sigma: f32,
    pub threshold: f32,
    pub max_alpha: f32,
}

impl Default for HighlightConfig {
    fn default() -> Self {
        HighlightConfig { sigma: 1.5, threshold: 0.05, max_alpha: 0.7 }
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i32;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * (sigma as f64).powi(2))).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter().map(|v| (v / sum) as f32).collect()
}

/// Separable Gaussian blur with edge replication.
fn blur(src: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] =
                k.iter().enumerate().map(|(i, kv)| kv * src[y * w + clamp(x as isize + i as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                k.iter().enumerate().map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Per-pixel change mask in `[0, 1]`: the largest absolute channel
/// difference, blurred and thresholded.
pub fn highlight_mask(recon: &Frame, cf: &Frame, config: &HighlightConfig) -> Result<Vec<f32>> {
    if recon.height != cf.height || recon.width != cf.width {
        return Err(Error::Shape("highlight frames differ in size".into()));
    }
    let (h, w) = (recon.height, recon.width);
    let diff: Vec<f32> = (0..h * w)
        .map(|i| (0..3).map(|c| (recon.pixels[i * 3 + c] - cf.pixels[i * 3 + c]).abs()).fold(0.0, f32::max))
        .collect();
    let mut mask = blur(&diff, h, w, config.sigma);
    for m in &mut mask {
        *m = if *m < config.threshold { 0.0 } else { m.min(1.0) };
    }
    Ok(mask)
}

/// Composites red over `original` with opacity proportional to the mask.
pub fn highlight_overlay(original: &Frame, mask: &[f32], config: &HighlightConfig) -> Result<Frame> {
    if mask.len() != original.height * original.width {
        return Err(Error::Shape("mask does not match frame".into()));
    }
    let mut out = original.clone();
    for (i, &m) in mask.iter().enumerate() {
        let alpha = config.max_alpha * m;
        if alpha > 0.0 {
            for (c, red) in [1.0f32, 0.0, 0.0].into_iter().enumerate() {
                let v = &mut out.pixels[i * 3 + c];
                *v += alpha * (red - *v);
            }
        }
    }
    Ok(out)
}

/// Newest frame of a generated observation.
pub fn latest(obs: &Observation) -> Frame {
    obs.frame(STACK - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyOrder {
    /// Confident decisions first.
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyFrameConfig {
    /// Minimum distance in time steps between two selected frames.
    pub min_gap: usize,
    pub order: EntropyOrder,
}

impl Default for KeyFrameConfig {
    fn default() -> Self {
        KeyFrameConfig { min_gap: 3, order: EntropyOrder::Low }
    }
}

/// Chooses up to `n` time steps ranked by policy entropy (earlier on ties),
/// at least `min_gap` apart. Returned in rank order.
pub fn select_key_frames(entropies: &[f64], n: usize, config: &KeyFrameConfig) -> Result<Vec<usize>> {
    if entropies.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("entropy".into()));
    }
    let min_gap = config.min_gap;
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| {
        let by_entropy = entropies[a].total_cmp(&entropies[b]);
        let by_entropy = if config.order == EntropyOrder::High { by_entropy.reverse() } else { by_entropy };
        by_entropy.then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = Vec::new();
    for t in order {
        if picked.len() >= n {
            break;
        }
        if picked.iter().all(|&p| p.abs_diff(t) >= min_gap) {
            picked.push(t);
        }
    }
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub action: Action,
    pub success: bool,
    pub steps: usize,
    pub latent_delta: f64,
}

/// Tries every action except no-op and the agent's current choice and keeps
/// the successful one whose latent moved furthest.
pub fn select_cf_action(
    agent: &AgentNet,
    model: &GenModel,
    obs: &Observation,
    config: &CfConfig,
) -> Result<(Action, Vec<Candidate>)> {
    let s = obs_tensor(obs)?;
    let z = agent.latent(&s)?;
    let current = argmax(agent.policy_probs(&z)?.data());
    let zw0 = model.wae_encode(&z)?.into_vec();
    let mut dec = WaeDecoder::new(model);
    let mut table = Vec::new();
    for a in Action::ALL.into_iter().filter(|a| *a != Action::NoOp && a.id() != current) {
        let trace = cf_optimize(&zw0, a, &agent.policy, &mut dec, config)?;
        let delta = trace.latent.iter().zip(&zw0).map(|(x, y)| (x - y) as f64 * (x - y) as f64).sum::<f64>().sqrt();
        table.push(Candidate { action: a, success: trace.success, steps: trace.steps, latent_delta: delta });
    }
    let best = best_candidate(&table)?.action;
    Ok((best, table))
}

/// The successful candidate whose latent moved furthest; the earlier one on
/// ties.
pub fn best_candidate(table: &[Candidate]) -> Result<&Candidate> {
    table
        .iter()
        .filter(|c| c.success)
        .fold(None::<&Candidate>, |best, c| match best {
            Some(b) if b.latent_delta >= c.latent_delta => Some(b),
            _ => Some(c),
        })
        .ok_or(Error::NoCounterfactual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_head(seed: u64) -> Linear {
        Linear::new("head", LATENT_DIM, NUM_ACTIONS, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn objective_at_start_is_log_term_only() {
        let head = toy_head(1);
        let x0: Vec<f32> = (0..LATENT_DIM).map(|i| (i % 5) as f32 * 0.1).collect();
        let e = cf_objective(&x0, &x0, Action::Left, &head, &mut Identity).unwrap();
        assert!((e.value - (1.0 - e.policy[1] as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn clamped_probability_keeps_objective_finite() {
        let mut head = toy_head(2);
        head.weight.value.fill(0.0);
        head.bias.value.data_mut().copy_from_slice(&[0.0, 60.0, 0.0, 0.0, 0.0, 0.0]);
        let x = vec![0.0; LATENT_DIM];
        let e = cf_objective(&x, &x, Action::Left, &head, &mut Identity).unwrap();
        assert!((e.value - (1e-7f64).ln()).abs() < 1e-6);
        assert!(e.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn target_already_chosen_takes_zero_steps() {
        let head = toy_head(3);
        let x0: Vec<f32> = (0..LATENT_DIM).map(|i| ((i * 7) % 11) as f32 * 0.05).collect();
        let p = policy_at(&head, &x0).unwrap();
        let a = Action::ALL[argmax(&p)];
        let t =
            cf_optimize(&x0, a, &head, &mut Identity, &CfConfig { renormalize: false, ..Default::default() }).unwrap();
        assert_eq!((t.steps, t.success), (0, true));
        assert_eq!(t.latent, x0);
    }

    #[test]
    fn optimization_reaches_the_target_in_latent_space() {
        let mut head = toy_head(4);
        head.weight.value.scale(20.0);
        let x0: Vec<f32> = (0..LATENT_DIM).map(|i| ((i * 3) % 7) as f32 * 0.05).collect();
        let p = policy_at(&head, &x0).unwrap();
        let target = Action::ALL[(argmax(&p) + 1) % NUM_ACTIONS];
        let cfg = CfConfig { renormalize: false, ..Default::default() };
        let t = cf_optimize(&x0, target, &head, &mut Identity, &cfg).unwrap();
        assert!(t.success && t.steps > 0);
        assert_eq!(argmax(&t.policy), target.id());
    }

    #[test]
    fn key_frames_follow_entropy_with_gaps() {
        let cfg = KeyFrameConfig::default();
        assert_eq!(select_key_frames(&[0.1, 0.09, 2.0, 0.05], 2, &cfg).unwrap(), vec![3, 0]);
        assert_eq!(select_key_frames(&[1.0; 10], 10, &cfg).unwrap(), vec![0, 3, 6, 9]);
        assert!(select_key_frames(&[1.0; 10], 0, &cfg).unwrap().is_empty());
        assert!(select_key_frames(&[], 3, &cfg).unwrap().is_empty());
        assert!(select_key_frames(&[f64::NAN], 1, &cfg).is_err());
        let high = KeyFrameConfig { order: EntropyOrder::High, ..cfg };
        assert_eq!(select_key_frames(&[0.1, 0.09, 2.0, 0.05], 1, &high).unwrap(), vec![2]);
    }

    #[test]
    fn best_candidate_prefers_the_largest_successful_move() {
        let c = |action, success, latent_delta| Candidate { action, success, steps: 1, latent_delta };
        let table = [c(Action::Left, true, 0.4), c(Action::Right, true, 0.9), c(Action::Fire, true, 0.2)];
        assert_eq!(best_candidate(&table).unwrap().action, Action::Right);
        let table = [c(Action::Left, false, 2.0), c(Action::Fire, true, 0.1)];
        assert_eq!(best_candidate(&table).unwrap().action, Action::Fire);
        let tie = [c(Action::Left, true, 0.5), c(Action::Right, true, 0.5)];
        assert_eq!(best_candidate(&tie).unwrap().action, Action::Left);
        assert!(matches!(best_candidate(&[c(Action::Left, false, 1.0)]), Err(Error::NoCounterfactual)));
    }

    #[test]
    fn identical_frames_leave_the_original_untouched() {
        let mut f = Frame::blank(16, 16);
        f.set(3, 4, [0.2, 0.9, 0.1]);
        let cfg = HighlightConfig::default();
        let mask = highlight_mask(&f, &f, &cfg).unwrap();
        assert!(mask.iter().all(|&m| m == 0.0));
        assert_eq!(highlight_overlay(&f, &mask, &cfg).unwrap(), f);
    }

    #[test]
    fn changed_region_is_highlighted_red() {
        let a = Frame::blank(16, 16);
        let mut b = a.clone();
        for y in 6..10 {
            for x in 6..10 {
                b.set(y, x, [1.0, 1.0, 1.0]);
            }
        }
        let cfg = HighlightConfig::default();
        let mask = highlight_mask(&a, &b, &cfg).unwrap();
        assert!(mask.iter().all(|m| (0.0..=1.0).contains(m)));
        assert!(mask[8 * 16 + 8] > 0.5);
        assert_eq!(mask[0], 0.0);
        let o = highlight_overlay(&a, &mask, &cfg).unwrap();
        let [r, g, _] = o.get(8, 8);
        assert!(r > 0.3 && g == 0.0);
    }
}
