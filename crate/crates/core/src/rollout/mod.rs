//! Batched Monte-Carlo rollouts of environment models.

mod bench;
mod images;

pub use bench::{benchmark, BenchConfig, BenchReport, BenchRow};
pub use images::{write_strip_png, StripRow};

use imagine_autograd::{Binding, Graph, Tensor, Var};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{EnvModel, Family, ModelState, StepMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// Abstract states; the pixel decoder never runs.
    State,
    /// Decoded frame probabilities.
    Pixels,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionSource {
    /// Environment-step actions (`tau * c` of them), shared by all chains.
    Fixed(Vec<usize>),
    /// Draw from the rollout policy passed alongside the request.
    Policy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRequest {
    /// Chains per batch row.
    pub k: usize,
    /// Model steps per chain.
    pub tau: usize,
    pub features: FeatureKind,
    pub actions: ActionSource,
    pub mode: StepMode,
    /// Start chain `k` with action `k mod A` (the whole first chunk for
    /// jumpy models), then follow the policy.
    pub first_action_per_chain: bool,
    pub seed: u64,
}

impl RolloutRequest {
    pub fn new(k: usize, tau: usize, features: FeatureKind, actions: ActionSource, seed: u64) -> Self {
        Self {
            k,
            tau,
            features,
            actions,
            mode: StepMode::Sample,
            first_action_per_chain: false,
            seed,
        }
    }

    fn validate(&self, model: &EnvModel) -> Result<()> {
        if self.k == 0 || self.tau == 0 {
            return Err(Error::InvalidInput("rollouts need K >= 1 and tau >= 1".into()));
        }
        if self.features == FeatureKind::State && !model.family().has_state() {
            return Err(Error::InvalidInput(format!(
                "{} has no abstract state to roll out",
                model.family()
            )));
        }
        if let ActionSource::Fixed(a) = &self.actions {
            let want = self.tau * model.config.jumpy;
            if a.len() != want || a.iter().any(|&x| x >= model.config.num_actions) {
                return Err(Error::InvalidInput(format!(
                    "fixed rollouts need {want} valid actions, got {a:?}"
                )));
            }
        }
        Ok(())
    }
}

/// What a rollout policy may look at.
#[derive(Clone, Copy, Debug)]
pub struct PolicyInput<'g> {
    pub state: Option<Var<'g>>,
    /// Most recent (real or imagined) frame, when available.
    pub frame: Option<Var<'g>>,
}

/// Maps the current imagined state to action probabilities `[rows, A]`.
pub trait RolloutPolicy<'g> {
    fn probabilities(&self, input: &PolicyInput<'g>) -> Result<Var<'g>>;
}

/// Uniform distribution over `A` actions.
#[derive(Clone, Copy, Debug)]
pub struct UniformPolicy {
    pub num_actions: usize,
}

impl<'g> RolloutPolicy<'g> for UniformPolicy {
    fn probabilities(&self, input: &PolicyInput<'g>) -> Result<Var<'g>> {
        let v = input
            .state
            .or(input.frame)
            .ok_or_else(|| Error::InvalidInput("policy input is empty".into()))?;
        let rows = v.shape()[0];
        let a = self.num_actions;
        Ok(v.graph().constant(Tensor::full(&[rows, a], 1.0 / a as f64)))
    }
}

/// `K` chains of `tau` steps for each of `n` start states. All per-step
/// tensors have `n * K` rows; row `i * K + k` is chain `k` of start `i`.
pub struct ImaginationBundle<'g> {
    pub k: usize,
    pub tau: usize,
    pub batch: usize,
    /// Start state `s_{t|t}` (`[n, ...]`), absent for the auto-regressive family.
    pub initial: Option<Var<'g>>,
    pub features: Vec<Var<'g>>,
    pub reward_logits: Vec<Var<'g>>,
    /// Action records fed to the model at each step.
    pub actions: Vec<Var<'g>>,
}

/// Probability source for [`rollout_relaxed`].
pub enum RelaxedActions<'a, 'g> {
    /// One `[A]` or `[n * K, A]` probability tensor per environment step
    /// (`tau * c` in total).
    Given(Vec<Var<'g>>),
    Policy(&'a dyn RolloutPolicy<'g>),
}

fn one_hot_rows(rows: usize, num_actions: usize, idx: impl Fn(usize) -> usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, num_actions]);
    for r in 0..rows {
        t.data_mut()[r * num_actions + idx(r)] = 1.0;
    }
    t
}

fn run_chains<'g>(
    model: &EnvModel,
    b: &Binding<'g>,
    prior: Option<&Binding<'g>>,
    s_init: &ModelState<'g>,
    request: &RolloutRequest,
    mut next_action: impl FnMut(usize, &PolicyInput<'g>, &mut ChaCha8Rng) -> Result<Var<'g>>,
) -> Result<ImaginationBundle<'g>> {
    request.validate(model)?;
    let n = s_init.batch();
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let mut state = s_init.repeat(request.k);
    let mut frame = state.prev_obs.or_else(|| state.frames.last().copied());
    let decode = request.features == FeatureKind::Pixels;
    let mut bundle = ImaginationBundle {
        k: request.k,
        tau: request.tau,
        batch: n,
        initial: s_init.s,
        features: Vec::with_capacity(request.tau),
        reward_logits: Vec::with_capacity(request.tau),
        actions: Vec::with_capacity(request.tau),
    };
    for t in 0..request.tau {
        let input = PolicyInput { state: state.s, frame };
        let action = next_action(t, &input, &mut rng)?;
        let out = match prior {
            Some(p) => model.generative_step_with_prior(b, p, &state, action, request.mode, decode, Some(&mut rng))?,
            None => model.generative_step(b, &state, action, request.mode, decode, Some(&mut rng))?,
        };
        let feature = match request.features {
            FeatureKind::State => out.state.state()?,
            FeatureKind::Pixels => {
                let p = out.pixel_logits.expect("pixels decoded").sigmoid();
                frame = Some(p);
                p
            }
        };
        bundle.features.push(feature);
        bundle.reward_logits.push(out.reward_logits);
        bundle.actions.push(action);
        state = out.state;
    }
    Ok(bundle)
}

/// Roll the model out with discrete actions, either fixed or sampled from
/// `policy`.
pub fn rollout<'g>(
    model: &EnvModel,
    b: &Binding<'g>,
    s_init: &ModelState<'g>,
    request: &RolloutRequest,
    policy: Option<&dyn RolloutPolicy<'g>>,
) -> Result<ImaginationBundle<'g>> {
    let a_count = model.config.num_actions;
    let c = model.config.jumpy;
    let k = request.k;
    let g = b.graph();
    let rows = s_init.batch() * k;
    if request.actions == ActionSource::Policy && policy.is_none() {
        return Err(Error::InvalidInput("policy-driven rollout without a policy".into()));
    }
    run_chains(model, b, None, s_init, request, |t, input, rng| {
        let mut blocks = Vec::with_capacity(c);
        match &request.actions {
            ActionSource::Fixed(seq) => {
                for j in 0..c {
                    blocks.push(one_hot_rows(rows, a_count, |_| seq[t * c + j]));
                }
            }
            ActionSource::Policy if t == 0 && request.first_action_per_chain => {
                for _ in 0..c {
                    blocks.push(one_hot_rows(rows, a_count, |r| (r % k) % a_count));
                }
            }
            ActionSource::Policy => {
                let p = policy.expect("checked above").probabilities(input)?.value();
                check_probabilities(&p, rows, a_count)?;
                let dists = p
                    .data()
                    .chunks(a_count)
                    .map(|row| WeightedIndex::new(row).map_err(|e| Error::InvalidInput(e.to_string())))
                    .collect::<Result<Vec<_>>>()?;
                for _ in 0..c {
                    let idx: Vec<usize> = dists.iter().map(|d| d.sample(rng)).collect();
                    blocks.push(one_hot_rows(rows, a_count, |r| idx[r]));
                }
            }
        }
        let parts: Vec<Var> = blocks.into_iter().map(|t| g.constant(t)).collect();
        Ok(Var::concat_last(&parts))
    })
}

fn check_probabilities(p: &Tensor, rows: usize, a: usize) -> Result<()> {
    if p.shape() != [rows, a] && p.shape() != [a] {
        return Err(Error::Shape(format!(
            "action probabilities {:?}, expected [{rows}, {a}] or [{a}]",
            p.shape()
        )));
    }
    for row in p.data().chunks(a) {
        let s: f64 = row.iter().sum();
        if row.iter().any(|&x| x.is_nan() || x < 0.0) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "action probabilities {row:?} are not normalized"
            )));
        }
    }
    Ok(())
}

/// Roll out with action probability vectors fed to the model in place of
/// one-hot actions, keeping the chain differentiable in the probabilities.
/// Bind the model frozen to keep its parameters out of the gradient.
pub fn rollout_relaxed<'a, 'g>(
    model: &EnvModel,
    b: &Binding<'g>,
    s_init: &ModelState<'g>,
    request: &RolloutRequest,
    probs: RelaxedActions<'a, 'g>,
) -> Result<ImaginationBundle<'g>> {
    let a_count = model.config.num_actions;
    let c = model.config.jumpy;
    let k = request.k;
    let rows = s_init.batch() * k;
    if let RelaxedActions::Given(v) = &probs {
        if v.len() != request.tau * c {
            return Err(Error::InvalidInput(format!(
                "{} probability vectors for {} environment steps",
                v.len(),
                request.tau * c
            )));
        }
        for p in v {
            check_probabilities(&p.value(), rows, a_count)?;
        }
    }
    let g = b.graph();
    run_chains(model, b, None, s_init, request, |t, input, _rng| {
        let mut blocks = Vec::with_capacity(c);
        for j in 0..c {
            let p = match &probs {
                RelaxedActions::Given(v) => v[t * c + j],
                RelaxedActions::Policy(_) if t == 0 && request.first_action_per_chain => {
                    g.constant(one_hot_rows(rows, a_count, |r| (r % k) % a_count))
                }
                RelaxedActions::Policy(pol) => {
                    let p = pol.probabilities(input)?;
                    check_probabilities(&p.value(), rows, a_count)?;
                    p
                }
            };
            let p = if p.shape().len() == 1 {
                p.reshape(&[1, a_count]).repeat_rows(rows)
            } else {
                p
            };
            blocks.push(p);
        }
        Ok(if c == 1 { blocks[0] } else { Var::concat_last(&blocks) })
    })
}

/// Roll out an action-unconditional model with its prior replaced by the
/// `prior/...` parameters bound in `prior`. Actions are absorbed into the
/// latents, so the request's action source is ignored.
pub fn rollout_modulated<'g>(
    model: &EnvModel,
    b: &Binding<'g>,
    prior: &Binding<'g>,
    s_init: &ModelState<'g>,
    request: &RolloutRequest,
) -> Result<ImaginationBundle<'g>> {
    if model.family() != Family::SssmUncond {
        return Err(Error::InvalidInput(format!(
            "modulated rollouts need an action-unconditional model, got {}",
            model.family()
        )));
    }
    let rows = s_init.batch() * request.k;
    let len = model.config.action_len();
    let g = b.graph();
    let mut req = request.clone();
    req.actions = ActionSource::Policy;
    run_chains(model, b, Some(prior), s_init, &req, |_, _, _| {
        Ok(g.constant(Tensor::zeros(&[rows, len])))
    })
}

/// Convenience: start states from context tensors on a fresh frozen binding.
pub fn context_vars<'g>(g: &'g Graph, context: &[Tensor]) -> Vec<Var<'g>> {
    context.iter().map(|t| g.constant(t.clone())).collect()
}
