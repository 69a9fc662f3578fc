use std::path::Path;
use std::time::Instant;

use imagine_autograd::{Adam, AdamConfig, Binding, Graph};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sequence::{sequence_elbo, TrajectoryBatch};
use super::EnvModel;
use crate::envs::Trajectory;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many steps (needs an output directory).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: None,
        }
    }
}

/// Per-step means over the minibatch (nats per trajectory).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub reward: f64,
    pub kl: f64,
    pub wall_clock: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

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

fn draw_batch(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if k <= n {
        sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Minimize the negative ELBO (or negative log-likelihood for deterministic
/// families) with Adam. With `out`, writes `train_log.csv`, periodic
/// checkpoints under `step_<k>/` and the final model.
pub fn train(model: &mut EnvModel, data: &[Trajectory], config: &TrainConfig, out: Option<&Path>) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.adam);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 1..=config.steps {
        let idx = draw_batch(data.len(), config.batch_size, &mut rng);
        let refs: Vec<&Trajectory> = idx.iter().map(|&i| &data[i]).collect();
        let batch = TrajectoryBatch::new(&refs)?;
        let (row, grads) = {
            let g = Graph::new();
            let b = Binding::trainable(&g, &model.params);
            let s = sequence_elbo(model, &b, &batch, Some(&mut rng))?;
            let loss = s.total().mean().neg();
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: step as u64,
                    detail: format!(
                        "loss {value} (reconstruction {}, reward {})",
                        s.pixel.value().mean(),
                        s.reward.value().mean()
                    ),
                });
            }
            let row = TrainRow {
                step,
                loss: value,
                reconstruction: s.pixel.value().mean(),
                reward: s.reward.value().mean(),
                kl: s.kl.map_or(0.0, |k| k.value().mean()),
                wall_clock: start.elapsed().as_secs_f64(),
            };
            let grads = b.gradients(&g.backward(loss));
            (row, grads)
        };
        if grads.values().any(|t| !t.all_finite()) {
            return Err(Error::Divergence {
                step: step as u64,
                detail: "non-finite gradient".into(),
            });
        }
        opt.step(&mut model.params, &grads);
        if step == 1 || step % 50 == 0 {
            log::debug!("{} step {step}: loss {:.3}", model.family(), row.loss);
        }
        log.rows.push(row);
        if let (Some(dir), Some(every)) = (out, config.checkpoint_every) {
            if every > 0 && step % every == 0 {
                model.save(&dir.join(format!("step_{step}")))?;
            }
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        log.write_csv(&dir.join("train_log.csv"))?;
        model.save(dir)?;
    }
    Ok(log)
}
