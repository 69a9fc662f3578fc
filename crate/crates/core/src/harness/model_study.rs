use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{mean_std, median, MetricsTable};
use super::spec::{ExperimentSpec, ModelEntry};
use crate::envs::{collect_trajectories, CollectOptions, DataPolicy, Dataset};
use crate::error::{Error, Result};
use crate::models::{evaluate, train, EnvModel, Family, TrainLog};
use crate::rollout::benchmark;

pub const TEST_SCORE: &str = "test_nats_per_pixel";
pub const TRAIN_LOSS: &str = "train_loss";
pub const PER_ENV_STEP: &str = "per_env_step_s";
pub const RELATIVE_SPEED: &str = "relative_speed";

/// Collect (or reload from `<output>/data`) the train and test splits.
pub fn prepare_data(spec: &ExperimentSpec) -> Result<(Dataset, Dataset)> {
    let dir = spec.output.join("data");
    let (train_dir, test_dir) = (dir.join("train"), dir.join("test"));
    if train_dir.join("manifest.toml").exists() && test_dir.join("manifest.toml").exists() {
        let train = Dataset::load(&train_dir)?;
        if train.manifest.env == spec.env && train.manifest.horizon == spec.data.horizon {
            return Ok((train, Dataset::load(&test_dir)?));
        }
        log::warn!("cached data in {} is stale; recollecting", dir.display());
    }
    let d = &spec.data;
    let policy = d.policy.unwrap_or_else(|| DataPolicy::default_for(&spec.env));
    let mut opts = CollectOptions::new(d.horizon, d.train_count + d.test_count, d.seed);
    opts.burn_in = d.burn_in;
    let res = collect_trajectories(&spec.env, policy, &opts)?;
    if res.incomplete {
        return Err(Error::Env("data collection stopped early".into()));
    }
    log::info!(
        "collected {} trajectories ({} raw steps, {} discarded)",
        res.trajectories.len(),
        res.raw_steps,
        res.discarded
    );
    let all = Dataset::new(spec.env.clone(), policy, d.seed, 1, res.trajectories)?;
    let (train, test) = all.split_tail(d.test_count);
    train.save(&train_dir)?;
    test.save(&test_dir)?;
    Ok((train, test))
}

fn record_train_log(table: &mut MetricsTable, label: &str, seed: u64, log: &TrainLog) -> Result<()> {
    let every = (log.rows.len() / 200).max(1);
    for r in log.rows.iter().filter(|r| r.step % every == 0 || r.step == 1) {
        table.push(label, seed, TRAIN_LOSS, r.step as u64, r.loss)?;
    }
    Ok(())
}

/// Train `entry` for `seed` on `train`, or load the checkpoint a previous run
/// left under the study's output directory.
pub fn train_or_load(
    spec: &ExperimentSpec,
    entry: &ModelEntry,
    seed: u64,
    train_data: &Dataset,
    table: Option<&mut MetricsTable>,
) -> Result<EnvModel> {
    let dir = spec.model_dir(&entry.label, seed);
    let (model, log) = if dir.join("model.toml").exists() && dir.join("train_log.csv").exists() {
        log::info!("reusing {}", dir.display());
        (EnvModel::load(&dir)?, TrainLog::read_csv(&dir.join("train_log.csv"))?)
    } else {
        let data = if entry.jumpy > 1 {
            train_data.jumpy(entry.jumpy)?
        } else {
            train_data.clone()
        };
        let mut model = EnvModel::new(entry.model_config(&spec.env), seed)?;
        let cfg = entry.train_config(&spec.train, seed);
        log::info!("training {} seed {seed} for {} steps", entry.label, cfg.steps);
        let log = train(&mut model, &data.trajectories, &cfg, Some(&dir))?;
        (model, log)
    };
    if let Some(t) = table {
        record_train_log(t, &entry.label, seed, &log)?;
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReportRow {
    pub label: String,
    pub family: String,
    pub jumpy: usize,
    pub seeds: usize,
    pub nats_per_pixel_median: f64,
    /// Improvement over the baseline in 1e-3 nats per pixel; absent for the
    /// baseline itself and for jumpy models (different frames are scored).
    pub improvement_mean: Option<f64>,
    pub improvement_std: Option<f64>,
    pub improvement_median: Option<f64>,
    pub relative_speed: Option<f64>,
}

/// Per-family likelihood improvement and rollout speed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelReport {
    pub baseline: Option<String>,
    pub rows: Vec<ModelReportRow>,
}

impl ModelReport {
    /// Built from the metrics table alone, so it can be regenerated offline.
    pub fn from_metrics(spec: &ExperimentSpec, table: &MetricsTable) -> Self {
        let baseline = spec
            .models
            .iter()
            .find(|m| m.family == Family::BaselineVae && m.jumpy == 1)
            .map(|m| m.label.clone());
        let mut rows = Vec::new();
        for m in &spec.models {
            let seeds = table.seeds(&m.label);
            let scores: Vec<(u64, f64)> = seeds
                .iter()
                .filter_map(|&s| table.last_value(&m.label, s, TEST_SCORE).map(|v| (s, v)))
                .collect();
            if scores.is_empty() {
                continue;
            }
            let values: Vec<f64> = scores.iter().map(|p| p.1).collect();
            let improvements: Vec<f64> = match &baseline {
                Some(b) if *b != m.label && m.jumpy == 1 => scores
                    .iter()
                    .filter_map(|&(s, v)| table.last_value(b, s, TEST_SCORE).map(|bv| (v - bv) * 1e3))
                    .collect(),
                _ => Vec::new(),
            };
            let (mean, std) = mean_std(&improvements);
            let some = |x: f64| (!improvements.is_empty()).then_some(x);
            let speed = seeds
                .iter()
                .find_map(|&s| table.last_value(&m.label, s, RELATIVE_SPEED));
            rows.push(ModelReportRow {
                label: m.label.clone(),
                family: m.family.name().to_string(),
                jumpy: m.jumpy,
                seeds: values.len(),
                nats_per_pixel_median: median(&values),
                improvement_mean: some(mean),
                improvement_std: some(std),
                improvement_median: some(median(&improvements)),
                relative_speed: speed,
            });
        }
        Self { baseline, rows }
    }

    pub fn row(&self, label: &str) -> Option<&ModelReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_markdown(&self) -> String {
        let fmt = |x: Option<f64>, p: usize| x.map_or_else(|| "-".to_string(), |v| format!("{v:.p$}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "| model | family | jumpy | seeds | nats/pixel (median) | LL improvement (1e-3 nats/pixel) | rel. speed |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let imp = match (r.improvement_mean, r.improvement_std) {
                (Some(m), Some(sd)) => format!("{m:.2} ± {sd:.2}"),
                _ => "-".to_string(),
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.5} | {} | {} |",
                r.label,
                r.family,
                r.jumpy,
                r.seeds,
                r.nats_per_pixel_median,
                imp,
                fmt(r.relative_speed, 2)
            );
        }
        if let Some(b) = &self.baseline {
            let _ = writeln!(s, "\nImprovements are relative to `{b}` on the same seed.");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.md"), self.to_markdown())?;
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Train and score every model for every seed, time rollouts of the
/// first seed's models, and write `metrics.csv` plus `report.{md,csv}`.
pub fn run_model_study(spec: &ExperimentSpec) -> Result<(MetricsTable, ModelReport)> {
    spec.validate()?;
    let (train_data, test_data) = prepare_data(spec)?;
    let mut table = MetricsTable::new();
    let mut bench_models: Vec<(String, EnvModel)> = Vec::new();
    for entry in &spec.models {
        let test = if entry.jumpy > 1 {
            test_data.jumpy(entry.jumpy)?
        } else {
            test_data.clone()
        };
        for (i, &seed) in spec.seeds.iter().enumerate() {
            let model = train_or_load(spec, entry, seed, &train_data, Some(&mut table))?;
            let eval = evaluate(&model, &test.trajectories, 16, spec.eval_seed)?;
            let step = spec.train.steps as u64;
            log::info!("{} seed {seed}: {:.5} nats/pixel", entry.label, eval.nats_per_pixel);
            table.push(&entry.label, seed, TEST_SCORE, step, eval.nats_per_pixel)?;
            table.push(&entry.label, seed, "test_pixel", step, eval.pixel)?;
            table.push(&entry.label, seed, "test_reward", step, eval.reward)?;
            table.push(&entry.label, seed, "test_kl", step, eval.kl)?;
            if i == 0 && entry.family != Family::BaselineVae {
                bench_models.push((entry.label.clone(), model));
            }
        }
    }
    if let Some(cfg) = &spec.bench {
        let refs: Vec<(&str, &EnvModel)> = bench_models.iter().map(|(l, m)| (l.as_str(), m)).collect();
        let report = benchmark(&refs, cfg)?;
        report.write_csv(&spec.output.join("bench.csv"))?;
        for r in &report.rows {
            table.push(&r.label, spec.seeds[0], PER_ENV_STEP, 0, r.per_env_step_s)?;
            table.push(&r.label, spec.seeds[0], RELATIVE_SPEED, 0, r.relative_speed)?;
        }
    }
    table.write_csv(&spec.output.join("metrics.csv"))?;
    let report = ModelReport::from_metrics(spec, &table);
    report.write(&spec.output)?;
    Ok((table, report))
}
