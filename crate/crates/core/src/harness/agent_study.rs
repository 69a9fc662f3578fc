use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use super::metrics::{median, MetricsTable};
use super::model_study::{prepare_data, train_or_load};
use super::spec::ExperimentSpec;
use crate::agent::{train_agent, Agent, EnvShape};
use crate::envs::Dataset;
use crate::error::{Error, Result};
use crate::models::EnvModel;

pub const MEAN_RETURN: &str = "mean_return";
pub const DISTILL_KL: &str = "distill_kl";

/// Train every agent for every seed and plot return against environment
/// steps. Writes per-run tables, `agent_metrics.csv` and `learning_curves.svg`.
pub fn run_agent_study(spec: &ExperimentSpec) -> Result<MetricsTable> {
    spec.validate()?;
    let shape = EnvShape {
        height: spec.env.height,
        width: spec.env.width,
        num_actions: spec.env.num_actions(),
    };
    let mut data: Option<Dataset> = None;
    let mut table = MetricsTable::new();
    for entry in &spec.agents {
        for &seed in &spec.seeds {
            let model = match &entry.model {
                None => None,
                Some(r) => match spec.model(r) {
                    Some(m) => {
                        if data.is_none() {
                            data = Some(prepare_data(spec)?.0);
                        }
                        Some(train_or_load(spec, m, seed, data.as_ref().expect("just set"), None)?)
                    }
                    None => Some(EnvModel::load(Path::new(r))?),
                },
            };
            let agent = Agent::new(spec.agent_config(entry, seed), shape, model)?;
            let dir = spec.agent_dir(&entry.label, seed);
            log::info!("training agent {} seed {seed}", entry.label);
            let (_, log) = train_agent(agent, &spec.env, spec.agent_env_steps, Some(&dir))?;
            let mut run = MetricsTable::new();
            for r in &log.rows {
                run.push(&entry.label, seed, MEAN_RETURN, r.env_steps, r.mean_return)?;
                run.push(&entry.label, seed, DISTILL_KL, r.env_steps, r.distill_kl)?;
                run.push(&entry.label, seed, "loss", r.env_steps, r.loss)?;
            }
            run.write_csv(&dir.join("metrics_table.csv"))?;
            table.extend(&run)?;
        }
    }
    let merged = spec.output.join("agent_metrics.csv");
    table.write_csv(&merged)?;
    plot_learning_curves(
        &MetricsTable::read_csv(&merged)?,
        MEAN_RETURN,
        &spec.output.join("learning_curves.svg"),
    )?;
    Ok(table)
}

/// Per-run median over seeds of `metric` at each step.
pub fn median_curves(table: &MetricsTable, metric: &str) -> BTreeMap<String, Vec<(u64, f64)>> {
    let mut out = BTreeMap::new();
    for run in table.runs() {
        let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in table.rows().iter().filter(|r| r.run == run && r.metric == metric) {
            by_step.entry(r.step).or_default().push(r.value);
        }
        if !by_step.is_empty() {
            out.insert(run, by_step.into_iter().map(|(s, v)| (s, median(&v))).collect());
        }
    }
    out
}

/// Line plot of per-run medians, drawn from the metrics table only.
pub fn plot_learning_curves(table: &MetricsTable, metric: &str, path: &Path) -> Result<()> {
    let curves = median_curves(table, metric);
    if curves.is_empty() {
        return Err(Error::InvalidInput(format!("no {metric} series to plot")));
    }
    let pts = curves.values().flatten();
    let x_max = pts.clone().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let (mut y_min, mut y_max) = pts.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if (y_max - y_min).abs() < 1e-9 {
        y_min -= 1.0;
        y_max += 1.0;
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let render = |e: String| Error::Render(e);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| render(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("{metric} vs environment steps (median over seeds)"),
            ("sans-serif", 18),
        )
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..x_max, y_min..y_max)
        .map_err(|e| render(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("environment steps")
        .y_desc(metric)
        .draw()
        .map_err(|e| render(e.to_string()))?;
    for (i, (label, pts)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                pts.iter().map(|&(s, v)| (s as f64, v)),
                color.stroke_width(2),
            ))
            .map_err(|e| render(e.to_string()))?
            .label(label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| render(e.to_string()))?;
    root.present().map_err(|e| render(e.to_string()))?;
    Ok(())
}
