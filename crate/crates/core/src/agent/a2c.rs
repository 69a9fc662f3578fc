//! Synchronous n-step advantage actor-critic.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use imagine_autograd::{Adam, AdamConfig, Binding, Graph, Tensor, Var};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, Regime};
use crate::envs::{BatchedEnvs, EnvConfig, Observation};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct A2cConfig {
    /// Steps per environment copy between updates.
    pub unroll: usize,
    pub num_envs: usize,
    pub discount: f64,
    pub value_weight: f64,
    pub entropy_weight: f64,
    pub adam: AdamConfig,
}

impl Default for A2cConfig {
    fn default() -> Self {
        Self {
            unroll: 5,
            num_envs: 16,
            discount: 0.99,
            value_weight: 0.5,
            entropy_weight: 0.01,
            adam: AdamConfig::default(),
        }
    }
}

/// Discounted returns bootstrapped from `bootstrap` after the last step;
/// a `done` cuts the return at that step. Indexed `[t][env]`.
pub fn n_step_returns(rewards: &[Vec<f64>], dones: &[Vec<bool>], bootstrap: &[f64], gamma: f64) -> Vec<Vec<f64>> {
    let mut acc = bootstrap.to_vec();
    let mut out = vec![Vec::new(); rewards.len()];
    for t in (0..rewards.len()).rev() {
        for (i, a) in acc.iter_mut().enumerate() {
            let cont = if dones[t][i] { 0.0 } else { 1.0 };
            *a = rewards[t][i] + gamma * cont * *a;
        }
        out[t] = acc.clone();
    }
    out
}

/// Entropy of `softmax(logits)` per row.
pub fn policy_entropy<'g>(logits: Var<'g>) -> Var<'g> {
    let lp = logits.log_softmax();
    (lp.exp() * lp).sum_rows().neg()
}

/// `lambda * KL(pi || pi_r)` averaged over rows. `pi` is a fixed target, so
/// gradients reach only `pi_r_logits`.
pub fn distillation_loss<'g>(pi_logits: Var<'g>, pi_r_logits: Var<'g>, lambda: f64) -> Result<Var<'g>> {
    if pi_logits.shape() != pi_r_logits.shape() {
        return Err(Error::Shape(format!(
            "policy logits {:?} vs rollout-policy logits {:?}",
            pi_logits.shape(),
            pi_r_logits.shape()
        )));
    }
    let lp = pi_logits.detach().log_softmax();
    let kl = (lp.exp() * (lp - pi_r_logits.log_softmax())).sum_rows();
    Ok(kl.mean().scale(lambda))
}

/// Stacked unroll: `logits` `[T*n, A]`, `values` `[T*n]`, with targets.
pub struct UnrollBatch<'g> {
    pub logits: Var<'g>,
    pub values: Var<'g>,
    pub actions: Vec<usize>,
    pub returns: Vec<f64>,
}

pub struct A2cLosses<'g> {
    pub total: Var<'g>,
    pub policy: Var<'g>,
    pub value: Var<'g>,
    pub entropy: Var<'g>,
}

/// Policy-gradient term with advantages `R - V` (held fixed), squared value
/// error and entropy bonus.
pub fn a2c_loss<'g>(batch: &UnrollBatch<'g>, config: &A2cConfig) -> Result<A2cLosses<'g>> {
    let rows = batch.actions.len();
    if batch.logits.shape()[0] != rows || batch.values.shape() != [rows] || batch.returns.len() != rows {
        return Err(Error::Shape("unroll batch pieces disagree in length".into()));
    }
    let g = batch.logits.graph();
    let v = batch.values.value();
    let adv: Vec<f64> = batch.returns.iter().zip(v.data()).map(|(r, v)| r - v).collect();
    let log_pi = batch.logits.log_softmax().pick(&batch.actions);
    let policy = (log_pi * g.constant(Tensor::from_vec(&[rows], adv))).mean().neg();
    let targets = g.constant(Tensor::from_vec(&[rows], batch.returns.clone()));
    let value = (targets - batch.values).square().mean();
    let entropy = policy_entropy(batch.logits).mean();
    let total = policy + value.scale(config.value_weight) - entropy.scale(config.entropy_weight);
    Ok(A2cLosses {
        total,
        policy,
        value,
        entropy,
    })
}

/// One row of the agent metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub update: u64,
    pub env_steps: u64,
    pub episodes: u64,
    /// Mean return of the last 100 finished episodes (0 before the first).
    pub mean_return: f64,
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// `KL(pi || pi_r)` on visited states, 0 without a rollout policy.
    pub distill_kl: f64,
    pub wall_clock: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AgentLog {
    pub rows: Vec<AgentMetrics>,
}

impl AgentLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { rows })
    }
}

/// Owns the agent, its optimizer and the parallel environment copies.
pub struct AgentTrainer {
    pub agent: Agent,
    envs: BatchedEnvs,
    history: Vec<[Observation; 3]>,
    opt: Adam,
    rng: ChaCha8Rng,
    updates: u64,
    env_steps: u64,
    running: Vec<f64>,
    finished: VecDeque<f64>,
    episodes: u64,
    start: Instant,
}

fn stack_context(history: &[[Observation; 3]]) -> Result<Vec<Tensor>> {
    (0..3)
        .map(|j| {
            let frames: Vec<&Observation> = history.iter().map(|h| &h[j]).collect();
            Observation::batch(&frames)
        })
        .collect()
}

fn sample_actions(logits: &Tensor, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let a = logits.shape()[1];
    logits
        .data()
        .chunks(a)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row.iter().map(|l| (l - m).exp()).collect();
            let d = WeightedIndex::new(&w).map_err(|e| Error::InvalidInput(format!("policy: {e}")))?;
            Ok(d.sample(rng))
        })
        .collect()
}

impl AgentTrainer {
    pub fn new(agent: Agent, env: &EnvConfig) -> Result<Self> {
        env.validate()?;
        let shape = agent.env;
        if (env.height, env.width, env.num_actions()) != (shape.height, shape.width, shape.num_actions) {
            return Err(Error::Config(format!(
                "agent built for {}x{} frames with {} actions, environment gives {}x{} with {}",
                shape.height,
                shape.width,
                shape.num_actions,
                env.height,
                env.width,
                env.num_actions()
            )));
        }
        let a2c = &agent.config.a2c;
        if a2c.unroll == 0 {
            return Err(Error::Config("unroll length must be positive".into()));
        }
        let seed = agent.config.seed;
        let mut envs = BatchedEnvs::new(env, a2c.num_envs, seed)?;
        let history = envs.reset().into_iter().map(|o| [o.clone(), o.clone(), o]).collect();
        Ok(Self {
            opt: Adam::new(a2c.adam),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xa2c),
            running: vec![0.0; a2c.num_envs],
            envs,
            history,
            agent,
            updates: 0,
            env_steps: 0,
            finished: VecDeque::new(),
            episodes: 0,
            start: Instant::now(),
        })
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    fn rollout_seed(&self, t: usize) -> u64 {
        let base = self.agent.config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        base ^ (self.updates * self.agent.config.a2c.unroll as u64 + t as u64)
    }

    /// Collect one unroll from every environment copy and take one optimizer
    /// step. The environment model is never updated.
    pub fn update(&mut self) -> Result<AgentMetrics> {
        let cfg = self.agent.config.clone();
        let n = cfg.a2c.num_envs;
        let (metrics, grads) = {
            let g = Graph::new();
            let b = Binding::trainable(&g, &self.agent.params);
            let (mut logits, mut values, mut actions) = (Vec::new(), Vec::new(), Vec::new());
            let (mut rewards, mut dones) = (Vec::new(), Vec::new());
            let mut extra: Option<Var> = None;
            let mut kl_sum = 0.0;
            for t in 0..cfg.a2c.unroll {
                let ctx = stack_context(&self.history)?;
                let out = self.agent.forward(&b, &ctx, self.rollout_seed(t))?;
                let acts = sample_actions(&out.logits.value(), &mut self.rng)?;
                let results = self.envs.step(&acts)?;
                let mut r = Vec::with_capacity(n);
                let mut d = Vec::with_capacity(n);
                for (i, res) in results.into_iter().enumerate() {
                    self.running[i] += res.reward;
                    if res.done {
                        self.finished.push_back(self.running[i]);
                        if self.finished.len() > 100 {
                            self.finished.pop_front();
                        }
                        self.running[i] = 0.0;
                        self.episodes += 1;
                        self.history[i] = [res.observation.clone(), res.observation.clone(), res.observation];
                    } else {
                        let h = &mut self.history[i];
                        h.rotate_left(1);
                        h[2] = res.observation;
                    }
                    r.push(res.reward);
                    d.push(res.done);
                }
                if let Some(rl) = out.rollout_logits {
                    kl_sum += distillation_loss(out.logits, rl, 1.0)?.item();
                    if cfg.regime == Regime::Distilled {
                        let term = distillation_loss(out.logits, rl, cfg.lambda_d)?;
                        extra = Some(extra.map_or(term, |e| e + term));
                    }
                }
                if let Some(h) = out.rollout_entropy {
                    let term = h.scale(cfg.rollout_entropy_weight / cfg.a2c.unroll as f64);
                    extra = Some(extra.map_or(term, |e| e + term));
                }
                logits.push(out.logits);
                values.push(out.value);
                actions.extend(acts);
                rewards.push(r);
                dones.push(d);
                self.env_steps += n as u64;
            }
            let bootstrap = {
                let g2 = Graph::new();
                let b2 = Binding::frozen(&g2, &self.agent.params);
                let ctx = stack_context(&self.history)?;
                let out = self.agent.forward(&b2, &ctx, self.rollout_seed(cfg.a2c.unroll))?;
                out.value.value().data().to_vec()
            };
            let returns = n_step_returns(&rewards, &dones, &bootstrap, cfg.a2c.discount);
            let batch = UnrollBatch {
                logits: Var::concat_rows(&logits),
                values: Var::concat_rows(&values),
                actions,
                returns: returns.into_iter().flatten().collect(),
            };
            let losses = a2c_loss(&batch, &cfg.a2c)?;
            let total = match extra {
                Some(e) => losses.total + e.scale(1.0 / cfg.a2c.unroll as f64),
                None => losses.total,
            };
            let loss = total.item();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: self.updates + 1,
                    detail: format!(
                        "agent loss {loss} (policy {}, value {}, entropy {})",
                        losses.policy.item(),
                        losses.value.item(),
                        losses.entropy.item()
                    ),
                });
            }
            let grads = b.gradients(&g.backward(total));
            let mean_return = if self.finished.is_empty() {
                0.0
            } else {
                self.finished.iter().sum::<f64>() / self.finished.len() as f64
            };
            let m = AgentMetrics {
                update: self.updates + 1,
                env_steps: self.env_steps,
                episodes: self.episodes,
                mean_return,
                loss,
                policy_loss: losses.policy.item(),
                value_loss: losses.value.item(),
                entropy: losses.entropy.item(),
                distill_kl: kl_sum / cfg.a2c.unroll as f64,
                wall_clock: self.start.elapsed().as_secs_f64(),
            };
            (m, grads)
        };
        if grads.values().any(|t| !t.all_finite()) {
            return Err(Error::Divergence {
                step: self.updates + 1,
                detail: "non-finite agent gradient".into(),
            });
        }
        self.opt.step(&mut self.agent.params, &grads);
        self.updates += 1;
        Ok(metrics)
    }
}

/// Train until `env_steps` environment steps (summed over copies) have been
/// taken. With `out`, writes `metrics.csv` and the final agent.
pub fn train_agent(agent: Agent, env: &EnvConfig, env_steps: u64, out: Option<&Path>) -> Result<(Agent, AgentLog)> {
    let mut trainer = AgentTrainer::new(agent, env)?;
    let mut log = AgentLog::default();
    while trainer.env_steps() < env_steps {
        let m = trainer.update()?;
        if m.update % 100 == 1 {
            log::info!(
                "update {} env steps {} return {:.3} kl {:.4}",
                m.update,
                m.env_steps,
                m.mean_return,
                m.distill_kl
            );
        }
        log.rows.push(m);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        log.write_csv(&dir.join("metrics.csv"))?;
        trainer.agent.save(&dir.join("agent"))?;
    }
    Ok((trainer.agent, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn returns_cut_at_episode_end() {
        let r = vec![vec![1.0], vec![1.0], vec![1.0]];
        let d = vec![vec![false], vec![true], vec![false]];
        let out = n_step_returns(&r, &d, &[10.0], 0.5);
        assert_eq!(out[2], vec![6.0]);
        assert_eq!(out[1], vec![1.0]);
        assert_eq!(out[0], vec![1.5]);
    }

    #[test]
    fn distillation_values() {
        let g = Graph::new();
        let pi = g.constant(Tensor::from_vec(&[1, 2], vec![0.7f64.ln(), 0.3f64.ln()]));
        let pr = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]));
        let kl = distillation_loss(pi, pr, 1.0).unwrap().item();
        let want = 0.7 * 1.4f64.ln() + 0.3 * 0.6f64.ln();
        assert!((kl - want).abs() < 1e-12);
        assert!((want - 0.0823).abs() < 1e-4);
        assert_eq!(distillation_loss(pi, pr, 0.0).unwrap().item(), 0.0);
        assert!(distillation_loss(pi, pi, 1.0).unwrap().item().abs() < 1e-15);
    }

    #[test]
    fn distillation_gradient_reaches_rollout_policy_only() {
        let g = Graph::new();
        let pi = g.leaf(Tensor::from_vec(&[1, 3], vec![0.2, -0.4, 1.0]));
        let pr = g.leaf(Tensor::from_vec(&[1, 3], vec![0.0, 0.3, 0.1]));
        let grads = g.backward(distillation_loss(pi, pr, 1.0).unwrap());
        assert!(grads.get(pi).is_none_or(|t| t.max_abs() == 0.0));
        assert!(grads.get(pr).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn uniform_entropy_and_zero_advantage() {
        let g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[2, 5]));
        let e = policy_entropy(logits).value();
        assert!((e.data()[0] - 5f64.ln()).abs() < 1e-12);
        let batch = UnrollBatch {
            logits,
            values: g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0])),
            actions: vec![0, 3],
            returns: vec![1.0, 2.0],
        };
        let l = a2c_loss(&batch, &A2cConfig::default()).unwrap();
        assert_eq!(l.policy.item(), 0.0);
        assert_eq!(l.value.item(), 0.0);
    }

    #[test]
    fn value_converges_to_discounted_constant_reward() {
        // Single-state bandit paying 1 each step; bootstrapped 5-step targets.
        let gamma = 0.9;
        let mut store = imagine_autograd::ParamStore::new();
        store.insert("v", Tensor::zeros(&[1]));
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..Default::default()
        });
        for _ in 0..4000 {
            let grads = {
                let g = Graph::new();
                let b = Binding::trainable(&g, &store);
                let v = b.param("v");
                let boot = v.item();
                let ret = n_step_returns(&vec![vec![1.0]; 5], &vec![vec![false]; 5], &[boot], gamma);
                let values = Var::concat_rows(&[v; 5]);
                let batch = UnrollBatch {
                    logits: g.constant(Tensor::zeros(&[5, 2])),
                    values,
                    actions: vec![0; 5],
                    returns: ret.into_iter().flatten().collect(),
                };
                let l = a2c_loss(&batch, &A2cConfig::default()).unwrap();
                b.gradients(&g.backward(l.total))
            };
            opt.step(&mut store, &grads);
        }
        let v = store.get("v").unwrap().item();
        let target = 1.0 / (1.0 - gamma);
        assert!((v - target).abs() < 0.01 * target, "{v} vs {target}");
    }

    fn tiny_setup(variant: super::super::Variant, regime: Regime, family: crate::models::Family) -> (Agent, EnvConfig) {
        use crate::envs::EnvKind;
        use crate::models::{EnvModel, ModelConfig};
        let mut env = EnvConfig::new(EnvKind::MiniPacman, 0);
        env.height = 16;
        env.width = 16;
        env.action_repeat = 1;
        let model = EnvModel::new(ModelConfig::new(family, 5, 16, 16).with_scale(0.125), 1).unwrap();
        let cfg = super::super::AgentConfig {
            k: 2,
            tau: 2,
            rollout_entropy_weight: 0.1,
            a2c: A2cConfig {
                num_envs: 2,
                unroll: 3,
                ..Default::default()
            },
            ..super::super::AgentConfig::new(variant, regime)
        };
        let shape = super::super::EnvShape {
            height: 16,
            width: 16,
            num_actions: 5,
        };
        let model = variant.uses_model().then_some(model);
        (Agent::new(cfg, shape, model).unwrap(), env)
    }

    #[test]
    fn every_regime_trains_without_touching_the_model() {
        use super::super::Variant;
        use crate::models::Family;
        let cases = [
            (Variant::I2aState, Regime::Random, Family::Sssm),
            (Variant::I2aState, Regime::Distilled, Family::DssmDet),
            (Variant::I2aState, Regime::LearnToQuery, Family::Sssm),
            (Variant::I2aState, Regime::Modulation, Family::SssmUncond),
            (Variant::I2aPixel, Regime::Distilled, Family::Sssm),
            (Variant::CopyBaseline, Regime::Random, Family::Sssm),
            (Variant::ModelFree, Regime::Random, Family::Sssm),
        ];
        for (v, r, f) in cases {
            let (agent, env) = tiny_setup(v, r, f);
            let model_before = agent.model().map(|m| m.params.clone());
            let agent_before = agent.params.clone();
            let mut tr = AgentTrainer::new(agent, &env).unwrap();
            for _ in 0..3 {
                let m = tr.update().unwrap();
                assert!(m.loss.is_finite(), "{v} {r}");
            }
            assert_eq!(tr.env_steps(), 18);
            assert_eq!(tr.agent.model().map(|m| m.params.clone()), model_before, "{v} {r}");
            assert_ne!(tr.agent.params, agent_before);
            if r == Regime::Modulation {
                let name = tr
                    .agent
                    .params
                    .names()
                    .find(|n| n.starts_with("prior/"))
                    .unwrap()
                    .clone();
                assert_ne!(tr.agent.params.get(&name), agent_before.get(&name));
            }
        }
    }

    #[test]
    fn training_log_is_reproducible() {
        use super::super::Variant;
        use crate::models::Family;
        let run = || {
            let (agent, env) = tiny_setup(Variant::I2aState, Regime::Distilled, Family::Sssm);
            let (_, log) = train_agent(agent, &env, 12, None).unwrap();
            log.rows
                .into_iter()
                .map(|mut r| {
                    r.wall_clock = 0.0;
                    r
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
