use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use imagine_autograd::{Binding, Graph, Tensor};

use crate::envs::{Observation, Trajectory};
use crate::error::{Error, Result};
use crate::models::{EnvModel, StepMode};
use crate::rollout::{context_vars, rollout, write_strip_png, ActionSource, FeatureKind, RolloutRequest, StripRow};

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryOptions {
    /// Sample rollouts per stochastic model.
    pub k: usize,
    /// Model steps per rollout.
    pub tau: usize,
    /// Number of trajectories to draw contexts from.
    pub contexts: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GalleryReport {
    pub images: Vec<PathBuf>,
    /// Mean per-pixel distance from {0, 1} of every rendered frame, by model.
    pub blur: BTreeMap<String, f64>,
}

/// Mean of `min(p, 1 - p)` over all entries.
pub fn blur_statistic(p: &Tensor) -> f64 {
    p.data().iter().map(|&v| v.min(1.0 - v)).sum::<f64>() / p.numel().max(1) as f64
}

fn frame(t: &Tensor, row: usize) -> Result<Observation> {
    let s = t.shape();
    Observation::from_unit(&t.narrow_rows(row, 1).reshape(&s[1..]))
}

/// Strips per context: ground truth, then one mean rollout for each
/// deterministic model and `k` sampled rollouts for each stochastic one,
/// all under the trajectory's recorded actions.
pub fn render_rollout_gallery(
    models: &[(&str, &EnvModel)],
    data: &[Trajectory],
    options: &GalleryOptions,
    out_dir: &Path,
) -> Result<GalleryReport> {
    if models.is_empty() || data.is_empty() || options.k == 0 || options.tau == 0 {
        return Err(Error::InvalidInput(
            "gallery needs models, data, k >= 1 and tau >= 1".into(),
        ));
    }
    let mut report = GalleryReport::default();
    let mut blur_acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (ci, traj) in data.iter().take(options.contexts.max(1)).enumerate() {
        let actions: Vec<usize> = traj
            .actions
            .iter()
            .map(|a| {
                a.indices()
                    .ok_or_else(|| Error::InvalidInput("gallery needs one-hot actions".into()))
            })
            .collect::<Result<Vec<_>>>()?
            .concat();
        let mut rows = Vec::new();
        let c0 = models[0].1.config.jumpy;
        rows.push(StripRow {
            label: "ground truth".into(),
            frames: (0..options.tau)
                .map(|t| traj.observations.get((t + 1) * c0 - 1).cloned())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::InvalidInput("trajectory shorter than the rollout".into()))?,
        });
        for &(label, model) in models {
            let c = model.config.jumpy;
            if actions.len() < options.tau * c {
                return Err(Error::InvalidInput(format!(
                    "{label}: trajectory shorter than the rollout"
                )));
            }
            let deterministic = model.family().is_deterministic();
            let k = if deterministic { 1 } else { options.k };
            let mut req = RolloutRequest::new(
                k,
                options.tau,
                FeatureKind::Pixels,
                ActionSource::Fixed(actions[..options.tau * c].to_vec()),
                options.seed.wrapping_add(ci as u64),
            );
            req.mode = if deterministic {
                StepMode::Mean
            } else {
                StepMode::Sample
            };
            let g = Graph::new();
            let b = Binding::frozen(&g, &model.params);
            let ctx: Vec<&Observation> = traj.context.iter().collect();
            let ctx: Vec<Tensor> = ctx.iter().map(|o| Observation::batch(&[o])).collect::<Result<_>>()?;
            let s0 = model.init_state(&b, &context_vars(&g, &ctx))?;
            let bundle = rollout(model, &b, &s0, &req, None)?;
            let values: Vec<_> = bundle.features.iter().map(|f| f.value()).collect();
            let acc = blur_acc.entry(label.to_string()).or_insert((0.0, 0));
            for v in &values {
                acc.0 += blur_statistic(v);
                acc.1 += 1;
            }
            for chain in 0..k {
                let frames = values.iter().map(|v| frame(v, chain)).collect::<Result<Vec<_>>>()?;
                let tag = if deterministic {
                    "mean".to_string()
                } else {
                    format!("sample {}", chain + 1)
                };
                rows.push(StripRow {
                    label: format!("{label} {tag}"),
                    frames,
                });
            }
        }
        let path = out_dir.join(format!("context_{ci:03}.png"));
        write_strip_png(&rows, &path)?;
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        std::fs::write(path.with_extension("txt"), labels.join("\n") + "\n")?;
        report.images.push(path);
    }
    report.blur = blur_acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    Ok(report)
}
