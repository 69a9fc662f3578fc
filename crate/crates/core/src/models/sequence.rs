//! Sequence-level objectives: ELBO for latent families, teacher-forced
//! likelihood for deterministic ones.

use imagine_autograd::{Binding, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scoring::{gaussian_kl, pixel_log_prob, reward_log_prob, sampled_log_ratio};
use super::{EnvModel, Family};
use crate::envs::{Observation, Trajectory};
use crate::error::{Error, Result};

/// Trajectories stacked along a leading batch axis.
#[derive(Clone, Debug)]
pub struct TrajectoryBatch {
    /// Three `[n, H, W, 3]` tensors, oldest first.
    pub context: Vec<Tensor>,
    pub observations: Vec<Tensor>,
    /// `[n, c*A]` per step.
    pub actions: Vec<Tensor>,
    /// `rewards[t][i]` for step `t` of trajectory `i`.
    pub rewards: Vec<Vec<f64>>,
}

impl TrajectoryBatch {
    pub fn new(trajectories: &[&Trajectory]) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::InvalidInput("empty trajectory batch".into()))?;
        let t_len = first.len();
        if trajectories.iter().any(|t| t.len() != t_len) {
            return Err(Error::InvalidInput("trajectories differ in length".into()));
        }
        let stack = |pick: &dyn Fn(&Trajectory) -> &Observation| -> Result<Tensor> {
            let frames: Vec<&Observation> = trajectories.iter().map(|t| pick(t)).collect();
            Observation::batch(&frames)
        };
        let context = (0..3)
            .map(|i| stack(&|t: &Trajectory| &t.context[i]))
            .collect::<Result<_>>()?;
        let observations = (0..t_len)
            .map(|i| stack(&|t: &Trajectory| &t.observations[i]))
            .collect::<Result<_>>()?;
        let a_len = first.actions.first().map_or(0, |a| a.len());
        let mut actions = Vec::with_capacity(t_len);
        for i in 0..t_len {
            let mut data = Vec::with_capacity(trajectories.len() * a_len);
            for t in trajectories {
                if t.actions[i].len() != a_len {
                    return Err(Error::Shape("action records differ in length".into()));
                }
                data.extend_from_slice(t.actions[i].values());
            }
            actions.push(Tensor::from_vec(&[trajectories.len(), a_len], data));
        }
        let rewards = (0..t_len)
            .map(|i| trajectories.iter().map(|t| t.rewards[i]).collect())
            .collect();
        Ok(Self {
            context,
            observations,
            actions,
            rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.context[0].shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> usize {
        self.observations.len()
    }

    /// Pixels per frame.
    pub fn frame_pixels(&self) -> usize {
        let s = self.context[0].shape();
        s[1] * s[2]
    }
}

/// Per-trajectory (`[n]`) score terms.
#[derive(Clone, Copy, Debug)]
pub struct SequenceScore<'g> {
    pub pixel: Var<'g>,
    pub reward: Var<'g>,
    /// Analytic KL between posterior and prior, summed over steps.
    pub kl: Option<Var<'g>>,
    /// Sampled `log q(z) - log p(z)` at the drawn latents, summed over steps.
    pub log_ratio: Option<Var<'g>>,
}

impl<'g> SequenceScore<'g> {
    /// ELBO with the analytic KL (log-likelihood for deterministic families).
    pub fn total(&self) -> Var<'g> {
        let r = self.pixel + self.reward;
        match self.kl {
            Some(k) => r - k,
            None => r,
        }
    }

    /// Log importance weight `log p(o, z) - log q(z)` of the drawn latents.
    pub fn log_weight(&self) -> Var<'g> {
        let r = self.pixel + self.reward;
        match self.log_ratio {
            Some(k) => r - k,
            None => r,
        }
    }
}

fn check_batch(model: &EnvModel, batch: &TrajectoryBatch) -> Result<()> {
    let c = &model.config;
    let s = batch.context[0].shape();
    if s[1..] != [c.height, c.width, 3] {
        return Err(Error::Shape(format!(
            "batch frames {s:?} do not match the {}x{} model",
            c.height, c.width
        )));
    }
    if let Some(a) = batch.actions.first() {
        if a.shape()[1] != c.action_len() {
            return Err(Error::Shape(format!(
                "batch action records of length {} for a model expecting {} (jumpy factor {})",
                a.shape()[1],
                c.action_len(),
                c.jumpy
            )));
        }
    }
    Ok(())
}

/// Filter through the batch with one posterior sample per step and sum the
/// per-step terms. Deterministic families are teacher forced and have no KL.
/// With `rng = None` latents are the posterior means.
pub fn sequence_elbo<'g>(
    model: &EnvModel,
    b: &Binding<'g>,
    batch: &TrajectoryBatch,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<SequenceScore<'g>> {
    check_batch(model, batch)?;
    let g = b.graph();
    let ctx: Vec<Var> = batch.context.iter().map(|t| g.constant(t.clone())).collect();
    let n = batch.len();
    let mut state = model.init_state(b, &ctx)?;
    // The frame VAE scores every frame against the context only.
    let fixed = (model.family() == Family::BaselineVae).then(|| state.clone());
    let zero = || g.constant(Tensor::zeros(&[n]));
    let (mut pixel, mut reward) = (zero(), zero());
    let (mut kl, mut ratio) = (None::<Var>, None::<Var>);
    for t in 0..batch.horizon() {
        let obs = &batch.observations[t];
        let a = g.constant(batch.actions[t].clone());
        let from = fixed.as_ref().unwrap_or(&state);
        let out = model.inference_step(b, from, a, g.constant(obs.clone()), rng.as_deref_mut())?;
        pixel = pixel + pixel_log_prob(out.pixel_logits.expect("inference decodes pixels"), obs)?;
        reward = reward + reward_log_prob(out.reward_logits, &batch.rewards[t])?;
        if let (Some(q), Some(p), Some(z)) = (out.posterior, out.prior, out.z) {
            let k = gaussian_kl(&q, &p)?;
            let r = sampled_log_ratio(z, &q, &p);
            kl = Some(kl.map_or(k, |acc| acc + k));
            ratio = Some(ratio.map_or(r, |acc| acc + r));
        }
        state = out.state;
    }
    Ok(SequenceScore {
        pixel,
        reward,
        kl,
        log_ratio: ratio,
    })
}

/// Teacher-forced negative log-likelihood, averaged over the batch.
pub fn mle_loss<'g>(model: &EnvModel, b: &Binding<'g>, batch: &TrajectoryBatch) -> Result<Var<'g>> {
    if !model.family().is_deterministic() {
        return Err(Error::InvalidInput(format!(
            "{} is a latent-variable family; use the ELBO",
            model.family()
        )));
    }
    Ok(sequence_elbo(model, b, batch, None)?.total().mean().neg())
}

/// Latent-family log importance weights and analytic-KL ELBO values for
/// `draws` independent posterior samples of one trajectory.
pub fn sequence_log_weights(
    model: &EnvModel,
    trajectory: &Trajectory,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let batch = TrajectoryBatch::new(&vec![trajectory; draws])?;
    let g = Graph::new();
    let b = Binding::frozen(&g, &model.params);
    let s = sequence_elbo(model, &b, &batch, Some(rng))?;
    Ok((
        s.total().value().data().to_vec(),
        s.log_weight().value().data().to_vec(),
    ))
}

/// Held-out scores, averaged per trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub trajectories: usize,
    /// Mean total score divided by steps and frame pixels.
    pub nats_per_pixel: f64,
    pub pixel: f64,
    pub reward: f64,
    pub kl: f64,
}

/// Score `data` in minibatches with a fixed sampling seed.
pub fn evaluate(model: &EnvModel, data: &[Trajectory], batch_size: usize, seed: u64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut pixel, mut reward, mut kl) = (0.0, 0.0, 0.0, 0.0);
    let mut per_step_pixels = 0;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Trajectory> = chunk.iter().collect();
        let batch = TrajectoryBatch::new(&refs)?;
        per_step_pixels = batch.horizon() * batch.frame_pixels();
        let g = Graph::new();
        let b = Binding::frozen(&g, &model.params);
        let s = sequence_elbo(model, &b, &batch, Some(&mut rng))?;
        total += s.total().value().sum();
        pixel += s.pixel.value().sum();
        reward += s.reward.value().sum();
        kl += s.kl.map_or(0.0, |k| k.value().sum());
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        trajectories: data.len(),
        nats_per_pixel: total / n / per_step_pixels as f64,
        pixel: pixel / n,
        reward: reward / n,
        kl: kl / n,
    })
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use crate::envs::ActionRecord;

    fn binary_traj(t: usize, size: usize) -> Trajectory {
        let frame = Observation::new(size, size, vec![255; size * size * 3]).unwrap();
        Trajectory::new(
            vec![frame.clone(); 3],
            vec![frame; t],
            vec![ActionRecord::one_hot(0, 5).unwrap(); t],
            vec![0.0; t],
        )
        .unwrap()
    }

    #[test]
    fn zero_logit_model_loss_counts_bernoulli_terms() {
        let mut m = EnvModel::new(ModelConfig::new(Family::DssmDet, 5, 80, 80).with_scale(0.125), 0).unwrap();
        for (name, t) in m.params.iter_mut() {
            if name.starts_with("decoder") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let tr = binary_traj(1, 80);
        let batch = TrajectoryBatch::new(&[&tr]).unwrap();
        let g = Graph::new();
        let b = Binding::frozen(&g, &m.params);
        let loss = mle_loss(&m, &b, &batch).unwrap().item();
        let want = 19210.0 * 2f64.ln();
        assert!((loss - want).abs() < 1e-6 * want, "{loss} vs {want}");
    }

    #[test]
    fn mle_rejects_latent_families() {
        let m = EnvModel::new(ModelConfig::new(Family::Sssm, 5, 16, 16).with_scale(0.125), 0).unwrap();
        let tr = binary_traj(2, 16);
        let batch = TrajectoryBatch::new(&[&tr]).unwrap();
        let g = Graph::new();
        let b = Binding::frozen(&g, &m.params);
        assert!(mle_loss(&m, &b, &batch).is_err());
        let s = sequence_elbo(&m, &b, &batch, None).unwrap();
        assert!(s.kl.is_some());
    }

    #[test]
    fn jumpy_mismatch_rejected() {
        let m = EnvModel::new(
            ModelConfig::new(Family::Sssm, 5, 16, 16)
                .with_scale(0.125)
                .with_jumpy(2),
            0,
        )
        .unwrap();
        let tr = binary_traj(2, 16);
        let batch = TrajectoryBatch::new(&[&tr]).unwrap();
        let g = Graph::new();
        let b = Binding::frozen(&g, &m.params);
        assert!(sequence_elbo(&m, &b, &batch, None).is_err());
    }
}
