//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst per-coordinate relative error.
    pub max_rel_err: f64,
    /// Worst absolute discrepancy.
    pub max_abs_err: f64,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coordinates_checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor for relative errors.
    pub abs_floor: f64,
    /// Check at most this many coordinates per input (random subset).
    pub max_coords_per_input: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            abs_floor: 1e-6,
            max_coords_per_input: None,
        }
    }
}

/// Compare the analytic gradient of the scalar `f(inputs)` against central
/// differences. `f` must be deterministic in its inputs.
pub fn check_gradients<R, F>(inputs: &[Tensor], config: GradCheckConfig, rng: &mut R, f: F) -> GradCheckReport
where
    R: Rng + ?Sized,
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match config.max_coords_per_input {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + config.step;
            let fp = eval(&work);
            work[i].data_mut()[j] = x0 - config.step;
            let fm = eval(&work);
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * config.step);
            let a = analytic[i].data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(config.abs_floor);
            report.coordinates_checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= report.max_rel_err {
                    report.worst = Some((i, j, a, numeric));
                }
            }
        }
    }
    report
}
