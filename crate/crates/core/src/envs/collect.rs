use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionRecord, Env, EnvConfig, Observation, StepResult, Trajectory};
use crate::error::{Error, Result};

/// Scripted behaviour used to generate model-training data. Policies read the
/// environment's internal state rather than pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataPolicy {
    Uniform,
    Noop,
    /// Walk a shortest path to the nearest pill; act uniformly at random with
    /// probability `epsilon`. Uniform on environments without pills.
    PillSeeker {
        epsilon: f64,
    },
}

impl DataPolicy {
    pub fn pill_seeker() -> Self {
        DataPolicy::PillSeeker { epsilon: 0.2 }
    }

    /// Default policy for an environment kind.
    pub fn default_for(env: &EnvConfig) -> Self {
        match env.kind {
            super::EnvKind::BouncingBall => DataPolicy::Uniform,
            super::EnvKind::MiniPacman => Self::pill_seeker(),
        }
    }

    pub fn act(&self, env: &Env, rng: &mut ChaCha8Rng) -> usize {
        let a = env.num_actions();
        match *self {
            DataPolicy::Uniform => rng.random_range(0..a),
            DataPolicy::Noop => match env {
                Env::MiniPacman(_) => super::Action::Noop as usize,
                Env::BouncingBall(_) => 0,
            },
            DataPolicy::PillSeeker { epsilon } => {
                let explore = rng.random::<f64>() < epsilon;
                match env {
                    Env::MiniPacman(p) if !explore => p
                        .nearest_pill_action()
                        .map_or_else(|| rng.random_range(0..a), |x| x as usize),
                    _ => rng.random_range(0..a),
                }
            }
        }
    }
}

impl std::str::FromStr for DataPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "random" => Ok(DataPolicy::Uniform),
            "noop" => Ok(DataPolicy::Noop),
            "pill_seeker" | "pill-seeker" => Ok(DataPolicy::pill_seeker()),
            other => Err(Error::Config(format!("unknown data policy {other:?}"))),
        }
    }
}

/// `N` environment instances advanced in lockstep. Finished episodes are reset
/// automatically; the returned step result then carries the terminal reward
/// with the first frame of the new episode.
#[derive(Clone, Debug)]
pub struct BatchedEnvs {
    envs: Vec<Env>,
    action_repeat: usize,
}

impl BatchedEnvs {
    pub fn new(config: &EnvConfig, count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("need at least one environment".into()));
        }
        let envs = (0..count)
            .map(|i| config.build(seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        Ok(Self {
            envs,
            action_repeat: config.action_repeat,
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[Env] {
        &self.envs
    }

    pub fn reset(&mut self) -> Vec<Observation> {
        self.envs.iter_mut().map(Env::reset).collect()
    }

    /// Apply one macro step (action repeated `action_repeat` times) to each instance.
    pub fn step(&mut self, actions: &[usize]) -> Result<Vec<StepResult>> {
        if actions.len() != self.envs.len() {
            return Err(Error::InvalidInput(format!(
                "{} actions for {} environments",
                actions.len(),
                self.envs.len()
            )));
        }
        self.envs
            .iter_mut()
            .zip(actions)
            .map(|(env, &a)| {
                let mut r = env.step_repeated(a, self.action_repeat)?;
                if r.done {
                    r.observation = env.reset();
                }
                Ok(r)
            })
            .collect()
    }

    /// Raw environment steps summed over instances.
    pub fn raw_steps(&self) -> u64 {
        self.envs.iter().map(Env::raw_steps).sum()
    }
}

#[derive(Clone, Debug)]
pub struct CollectOptions {
    /// Modeled steps per trajectory.
    pub horizon: usize,
    pub count: usize,
    /// Up to this many random-length macro steps of the data policy before the
    /// context, to spread trajectories over the episode.
    pub burn_in: usize,
    /// Abort after this many raw environment steps.
    pub step_budget: Option<u64>,
    pub seed: u64,
}

impl CollectOptions {
    pub fn new(horizon: usize, count: usize, seed: u64) -> Self {
        Self {
            horizon,
            count,
            burn_in: 0,
            step_budget: None,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CollectResult {
    pub trajectories: Vec<Trajectory>,
    /// Set when the step budget ran out before `count` trajectories.
    pub incomplete: bool,
    pub raw_steps: u64,
    pub discarded: usize,
}

/// Roll out the data policy and cut trajectories of `3 + horizon` macro frames,
/// each macro frame being the last of `action_repeat` raw steps with the
/// rewards of those steps summed. Episodes that end before the trajectory is
/// complete are discarded.
pub fn collect_trajectories(config: &EnvConfig, policy: DataPolicy, options: &CollectOptions) -> Result<CollectResult> {
    if options.horizon == 0 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    config.validate()?;
    let mut env = config.build(config.seed ^ options.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(0x5eed));
    let a_count = env.num_actions();
    let repeat = config.action_repeat;
    let mut out = Vec::with_capacity(options.count);
    let mut discarded = 0;
    let budget_hit = |env: &Env| options.step_budget.is_some_and(|b| env.raw_steps() >= b);

    'outer: while out.len() < options.count {
        if budget_hit(&env) {
            break;
        }
        env.reset();
        let burn = if options.burn_in > 0 {
            rng.random_range(0..=options.burn_in)
        } else {
            0
        };
        for _ in 0..burn {
            let a = policy.act(&env, &mut rng);
            if env.step_repeated(a, repeat)?.done {
                discarded += 1;
                continue 'outer;
            }
        }
        let mut context = Vec::with_capacity(3);
        let mut observations = Vec::with_capacity(options.horizon);
        let mut actions = Vec::with_capacity(options.horizon);
        let mut rewards = Vec::with_capacity(options.horizon);
        for i in 0..3 + options.horizon {
            let a = policy.act(&env, &mut rng);
            let r = env.step_repeated(a, repeat)?;
            let last = i + 1 == 3 + options.horizon;
            if r.done && !last {
                discarded += 1;
                continue 'outer;
            }
            if i < 3 {
                context.push(r.observation);
            } else {
                observations.push(r.observation);
                actions.push(ActionRecord::one_hot(a, a_count)?);
                rewards.push(r.reward);
            }
        }
        out.push(Trajectory::new(context, observations, actions, rewards)?);
    }
    let incomplete = out.len() < options.count;
    if incomplete {
        log::warn!(
            "step budget exhausted: collected {} of {} trajectories",
            out.len(),
            options.count
        );
    }
    Ok(CollectResult {
        trajectories: out,
        incomplete,
        raw_steps: env.raw_steps(),
        discarded,
    })
}
