use std::path::Path;
use std::time::Instant;

use imagine_autograd::{Binding, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{context_vars, rollout, ActionSource, FeatureKind, RolloutRequest};
use crate::error::{Error, Result};
use crate::models::{EnvModel, Family};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub batch: usize,
    /// Simulated horizon in environment steps; must be divisible by every
    /// model's jumpy factor.
    pub horizon: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            horizon: 12,
            warmup: 5,
            repetitions: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub family: String,
    pub jumpy: usize,
    pub median_s: f64,
    pub mean_s: f64,
    pub std_s: f64,
    /// Median wall clock divided by the simulated environment steps.
    pub per_env_step_s: f64,
    /// Auto-regressive per-step time over this model's (first model when no
    /// auto-regressive model is present).
    pub relative_speed: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub batch: usize,
    /// Environment steps per timed rollout.
    pub horizon: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn row(&self, label: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time one rollout of `horizon` environment steps per model. State-space
/// families roll out abstract states; families without a state render frames.
/// Only the rollout itself is timed, not the initial-state inference.
pub fn benchmark(models: &[(&str, &EnvModel)], config: &BenchConfig) -> Result<BenchReport> {
    if config.repetitions == 0 || config.batch == 0 {
        return Err(Error::Config(
            "benchmark needs at least one repetition and batch row".into(),
        ));
    }
    let mut rows = Vec::new();
    for &(label, model) in models {
        let c = model.config.jumpy;
        if !config.horizon.is_multiple_of(c) {
            return Err(Error::Config(format!(
                "horizon {} is not a multiple of {label}'s jumpy factor {c}",
                config.horizon
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (h, w) = (model.config.height, model.config.width);
        let context: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(&[config.batch, h, w, 3], 0.0, 1.0, &mut rng))
            .collect();
        let features = if model.family().has_state() {
            FeatureKind::State
        } else {
            FeatureKind::Pixels
        };
        let actions: Vec<usize> = (0..config.horizon).map(|i| i % model.config.num_actions).collect();
        let request = RolloutRequest::new(
            1,
            config.horizon / c,
            features,
            ActionSource::Fixed(actions),
            config.seed,
        );
        let mut times = Vec::with_capacity(config.repetitions);
        for rep in 0..config.warmup + config.repetitions {
            let g = Graph::new();
            let b = Binding::frozen(&g, &model.params);
            let s0 = model.init_state(&b, &context_vars(&g, &context))?;
            let start = Instant::now();
            let bundle = rollout(model, &b, &s0, &request, None)?;
            std::hint::black_box(&bundle.features);
            let dt = start.elapsed().as_secs_f64();
            if rep >= config.warmup {
                times.push(dt);
            }
        }
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let std = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
        let med = median(&mut times);
        log::info!("{label}: median {med:.4}s over {} reps", config.repetitions);
        rows.push(BenchRow {
            label: label.to_string(),
            family: model.family().name().to_string(),
            jumpy: c,
            median_s: med,
            mean_s: mean,
            std_s: std,
            per_env_step_s: med / config.horizon as f64,
            relative_speed: 0.0,
        });
    }
    let reference = models.iter().position(|(_, m)| m.family() == Family::Ar).unwrap_or(0);
    let base = rows.get(reference).map_or(1.0, |r| r.per_env_step_s);
    for r in &mut rows {
        r.relative_speed = base / r.per_env_step_s;
    }
    Ok(BenchReport {
        batch: config.batch,
        horizon: config.horizon,
        rows,
    })
}
