//! Imagination-augmented agents, their baselines and the actor-critic trainer.

mod a2c;
pub mod nets;

pub use a2c::{
    a2c_loss, distillation_loss, n_step_returns, policy_entropy, train_agent, A2cConfig, A2cLosses, AgentLog,
    AgentMetrics, AgentTrainer, UnrollBatch,
};

use std::cell::RefCell;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use imagine_autograd::{Binding, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{LatentHead, Linear};
use crate::error::{Error, Result};
use crate::models::{EnvModel, Family};
use crate::rollout::{
    rollout, rollout_modulated, rollout_relaxed, ActionSource, FeatureKind, PolicyInput, RelaxedActions, RolloutPolicy,
    RolloutRequest, UniformPolicy,
};
use nets::{ModelFreePath, RolloutPolicyNet, Summarizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ModelFree,
    I2aState,
    I2aPixel,
    /// Every imagined feature replaced by the initial state.
    CopyBaseline,
    /// State rollouts from a frozen, randomly initialized model.
    UntrainedModelBaseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::ModelFree,
        Variant::I2aState,
        Variant::I2aPixel,
        Variant::CopyBaseline,
        Variant::UntrainedModelBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ModelFree => "model_free",
            Variant::I2aState => "i2a_state",
            Variant::I2aPixel => "i2a_pixel",
            Variant::CopyBaseline => "copy_baseline",
            Variant::UntrainedModelBaseline => "untrained_model_baseline",
        }
    }

    pub fn uses_model(self) -> bool {
        self != Variant::ModelFree
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown agent variant {s:?}")))
    }
}

/// How imagined actions are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Random,
    /// Rollout policy trained to imitate the agent's policy.
    Distilled,
    /// Rollout policy trained through relaxed rollouts by the agent's loss.
    LearnToQuery,
    /// Unconditional model with a trainable replacement prior.
    Modulation,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::Random,
        Regime::Distilled,
        Regime::LearnToQuery,
        Regime::Modulation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Random => "random",
            Regime::Distilled => "distilled",
            Regime::LearnToQuery => "learn_to_query",
            Regime::Modulation => "modulation",
        }
    }

    fn has_policy_net(self) -> bool {
        matches!(self, Regime::Distilled | Regime::LearnToQuery)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown rollout regime {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub variant: Variant,
    pub regime: Regime,
    pub k: usize,
    pub tau: usize,
    /// Weight of the distillation loss.
    pub lambda_d: f64,
    /// Weight of the entropy penalty on the rollout policy (learning to query).
    pub rollout_entropy_weight: f64,
    pub a2c: A2cConfig,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::I2aState,
            regime: Regime::Random,
            k: 5,
            tau: 3,
            lambda_d: 1.0,
            rollout_entropy_weight: 0.0,
            a2c: A2cConfig::default(),
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn new(variant: Variant, regime: Regime) -> Self {
        Self {
            variant,
            regime,
            ..Default::default()
        }
    }
}

/// Policy logits and value estimates for a batch of observations.
pub struct AgentOutput<'g> {
    /// `[n, A]`.
    pub logits: Var<'g>,
    /// `[n]`.
    pub value: Var<'g>,
    /// Rollout-policy logits at the current state (or frame).
    pub rollout_logits: Option<Var<'g>>,
    /// Mean rollout-policy entropy over imagined steps (relaxed rollouts).
    pub rollout_entropy: Option<Var<'g>>,
}

/// Frame geometry and action count of the environment an agent acts in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvShape {
    pub height: usize,
    pub width: usize,
    pub num_actions: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Nets {
    model_free: ModelFreePath,
    policy: Linear,
    value: Linear,
    summarizer: Option<Summarizer>,
    rollout_policy: Option<RolloutPolicyNet>,
    p_imag: Option<LatentHead>,
}

/// Agent parameters plus the frozen environment model it imagines with.
#[derive(Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub env: EnvShape,
    pub params: ParamStore,
    model: Option<EnvModel>,
    nets: Nets,
}

/// Rollout policy backed by a network, recording entropies of the
/// distributions it hands out.
struct NetPolicy<'a, 'g> {
    net: &'a RolloutPolicyNet,
    b: &'a Binding<'g>,
    entropies: RefCell<Vec<Var<'g>>>,
}

impl<'g> RolloutPolicy<'g> for NetPolicy<'_, 'g> {
    fn probabilities(&self, input: &PolicyInput<'g>) -> Result<Var<'g>> {
        let x = if self.net.on_pixels { input.frame } else { input.state };
        let x = x.ok_or_else(|| Error::InvalidInput("rollout policy input missing".into()))?;
        let logits = self.net.forward(self.b, x)?;
        self.entropies.borrow_mut().push(policy_entropy(logits).mean());
        Ok(logits.softmax())
    }
}

impl Agent {
    /// Build an agent. Every variant except `model_free` needs `model`; the
    /// untrained-model baseline only takes its configuration.
    pub fn new(config: AgentConfig, env: EnvShape, model: Option<EnvModel>) -> Result<Self> {
        let model = Self::check(&config, env, model)?;
        let mut nets = Nets {
            model_free: ModelFreePath::new("agent/model_free", env.height, env.width),
            policy: Linear::new("agent/policy", 0, env.num_actions),
            value: Linear::new("agent/value", 0, 1),
            summarizer: None,
            rollout_policy: None,
            p_imag: None,
        };
        let mut code = 0;
        if let Some(m) = &model {
            let (h, w) = m.config.state_hw();
            let state = (h, w, m.arch.widths.state);
            let reward = m.config.reward_bits + 2;
            let pixels = config.variant == Variant::I2aPixel;
            if config.k > 0 {
                nets.summarizer = Some(if pixels {
                    Summarizer::on_pixels("agent/summarizer", env.height, env.width, reward)
                } else {
                    Summarizer::on_state("agent/summarizer", state, reward)
                });
                code = config.k * Summarizer::HIDDEN;
            }
            if config.regime.has_policy_net() {
                nets.rollout_policy = Some(if pixels {
                    RolloutPolicyNet::on_pixels("agent/rollout_policy", env.height, env.width, env.num_actions)
                } else {
                    RolloutPolicyNet::on_state("agent/rollout_policy", state, env.num_actions)
                });
            }
            if config.regime == Regime::Modulation {
                nets.p_imag = m.arch.prior.clone();
            }
        }
        let width = code + ModelFreePath::WIDTH;
        nets.policy.in_dim = width;
        nets.value.in_dim = width;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        nets.model_free.init(&mut params, &mut rng);
        nets.policy.init(&mut params, &mut rng);
        nets.value.init(&mut params, &mut rng);
        if let Some(s) = &nets.summarizer {
            s.init(&mut params, &mut rng);
        }
        if let Some(p) = &nets.rollout_policy {
            p.init(&mut params, &mut rng);
        }
        if let Some(p) = &nets.p_imag {
            p.init(&mut params, &mut rng);
        }
        Ok(Self {
            config,
            env,
            params,
            model,
            nets,
        })
    }

    fn check(config: &AgentConfig, env: EnvShape, model: Option<EnvModel>) -> Result<Option<EnvModel>> {
        let variant = config.variant;
        if !variant.uses_model() {
            if model.is_some() {
                return Err(Error::Config("the model-free agent takes no environment model".into()));
            }
            return Ok(None);
        }
        let model = model.ok_or_else(|| Error::Config(format!("{variant} needs an environment model")))?;
        let mc = &model.config;
        if (mc.height, mc.width) != (env.height, env.width) {
            return Err(Error::Config(format!(
                "model frames {}x{} differ from environment frames {}x{}",
                mc.height, mc.width, env.height, env.width
            )));
        }
        let family = model.family();
        if family.conditions_on_actions() && mc.num_actions != env.num_actions {
            return Err(Error::Config(format!(
                "model has {} actions, environment {}",
                mc.num_actions, env.num_actions
            )));
        }
        if variant != Variant::I2aPixel && !family.has_state() {
            return Err(Error::Config(format!(
                "{variant} needs a state-space model, got {family}"
            )));
        }
        if family == Family::BaselineVae {
            return Err(Error::Config("the frame VAE cannot be rolled out".into()));
        }
        let modulation = config.regime == Regime::Modulation;
        if modulation != (family == Family::SssmUncond) {
            return Err(Error::Config(format!(
                "the modulation regime pairs with an unconditional stochastic model (got {} with {family})",
                config.regime
            )));
        }
        if modulation && variant != Variant::I2aState {
            return Err(Error::Config("modulation is only defined for state rollouts".into()));
        }
        if variant == Variant::CopyBaseline && config.regime == Regime::LearnToQuery {
            return Err(Error::Config("the copy baseline has no rollouts to query".into()));
        }
        if config.tau == 0 {
            return Err(Error::Config("rollout depth must be at least 1".into()));
        }
        if variant == Variant::UntrainedModelBaseline {
            let fresh = EnvModel::new(model.config.clone(), config.seed ^ 0x005e_ed0f_f2e5)?;
            return Ok(Some(fresh));
        }
        Ok(Some(model))
    }

    pub fn model(&self) -> Option<&EnvModel> {
        self.model.as_ref()
    }

    /// Trainable agent parameters (the environment model is excluded).
    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Forward pass from the last three frames (`[n, H, W, 3]` each, oldest
    /// first). `seed` drives the imagined rollouts.
    pub fn forward<'g>(&'g self, b: &Binding<'g>, context: &[Tensor], seed: u64) -> Result<AgentOutput<'g>> {
        if context.len() != 3 {
            return Err(Error::InvalidInput("the agent reads the last three frames".into()));
        }
        let g = b.graph();
        let o = g.constant(context[2].clone());
        let n = context[2].shape()[0];
        let mf = self.nets.model_free.forward(b, o)?;
        let mut rollout_logits = None;
        let mut rollout_entropy = None;
        let features = match (&self.model, &self.nets.summarizer) {
            (Some(model), Some(summarizer)) => {
                let mb = Binding::frozen(g, &model.params);
                let ctx: Vec<Var> = context.iter().map(|t| g.constant(t.clone())).collect();
                let mut s0 = model.init_state(&mb, &ctx)?;
                if s0.prev_obs.is_none() {
                    s0.prev_obs = Some(o);
                }
                let k = self.config.k;
                let (feats, rewards) = if self.config.variant == Variant::CopyBaseline {
                    let s = s0.state()?;
                    let r = model.reward_logits(&mb, s)?.repeat_rows(k);
                    (vec![s.repeat_rows(k); self.config.tau], vec![r; self.config.tau])
                } else {
                    let pixels = self.config.variant == Variant::I2aPixel;
                    let mut request = RolloutRequest::new(
                        k,
                        self.config.tau,
                        if pixels {
                            FeatureKind::Pixels
                        } else {
                            FeatureKind::State
                        },
                        ActionSource::Policy,
                        seed,
                    );
                    request.first_action_per_chain = k == self.env.num_actions;
                    let net_policy = self.nets.rollout_policy.as_ref().map(|net| NetPolicy {
                        net,
                        b,
                        entropies: RefCell::new(Vec::new()),
                    });
                    let bundle = match self.config.regime {
                        Regime::Random => {
                            let u = UniformPolicy {
                                num_actions: self.env.num_actions,
                            };
                            rollout(model, &mb, &s0, &request, Some(&u))?
                        }
                        Regime::Distilled => rollout(model, &mb, &s0, &request, net_policy.as_ref().map(|p| p as _))?,
                        Regime::LearnToQuery => {
                            let p = net_policy.as_ref().expect("learn-to-query has a policy net");
                            rollout_relaxed(model, &mb, &s0, &request, RelaxedActions::Policy(p))?
                        }
                        Regime::Modulation => rollout_modulated(model, &mb, b, &s0, &request)?,
                    };
                    if self.config.regime == Regime::LearnToQuery {
                        let e = net_policy.as_ref().expect("policy net").entropies.borrow().clone();
                        if !e.is_empty() {
                            let len = e.len() as f64;
                            let sum = e.into_iter().reduce(|a, b| a + b).expect("non-empty");
                            rollout_entropy = Some(sum.scale(1.0 / len));
                        }
                    }
                    (bundle.features, bundle.reward_logits)
                };
                if let Some(net) = &self.nets.rollout_policy {
                    let x = if net.on_pixels { o } else { s0.state()? };
                    rollout_logits = Some(net.forward(b, x)?);
                }
                Some(summarizer.forward(b, &feats, &rewards, n, k)?)
            }
            _ => None,
        };
        let x = match features {
            Some(code) => Var::concat_last(&[code, mf]),
            None => mf,
        };
        Ok(AgentOutput {
            logits: self.nets.policy.forward(b, x),
            value: self.nets.value.forward(b, x).reshape(&[n]),
            rollout_logits,
            rollout_entropy,
        })
    }

    /// Writes `agent.toml`, `params.bin` and the environment model under `model/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = AgentFile {
            config: self.config.clone(),
            env: self.env,
        };
        std::fs::write(dir.join("agent.toml"), toml::to_string(&meta)?)?;
        self.params.save(&dir.join("params.bin"))?;
        if let Some(m) = &self.model {
            m.save(&dir.join("model"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("agent.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::MissingArtifact {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let meta: AgentFile = toml::from_str(&text)?;
        let model = if meta.config.variant.uses_model() {
            Some(EnvModel::load(&dir.join("model"))?)
        } else {
            None
        };
        // The untrained baseline stores its random model; keep it as saved.
        let (variant, mut config) = (meta.config.variant, meta.config);
        if variant == Variant::UntrainedModelBaseline {
            config.variant = Variant::I2aState;
        }
        let mut agent = Self::new(config, meta.env, model)?;
        agent.config.variant = variant;
        let params = imagine_autograd::ParamStore::load(&dir.join("params.bin"))?;
        for (name, t) in agent.params.iter_mut() {
            let loaded = params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("saved agent lacks parameter {name}")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Shape(format!("parameter {name} has shape {:?}", loaded.shape())));
            }
            *t = loaded.clone();
        }
        Ok(agent)
    }
}

#[derive(Serialize, Deserialize)]
struct AgentFile {
    config: AgentConfig,
    env: EnvShape,
}
