//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use imagine_autograd::{Binding, Graph, ParamStore, Tensor, Var};
use imagine_core::envs::{collect_trajectories, CollectOptions, DataPolicy, EnvConfig, EnvKind, Trajectory};
use imagine_core::models::{EnvModel, Family, ModelConfig};
use imagine_core::Result;
use rand::seq::index::sample;
use rand::Rng;

/// Worst central-difference discrepancy over sampled coordinates.
#[derive(Clone, Debug, Default)]
pub struct FdCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub coordinates: usize,
    /// Coordinates whose one-sided slopes disagree: the stencil straddles a
    /// ReLU or max-pool kink, so no derivative exists to compare against.
    pub kinks: usize,
}

impl FdCheck {
    pub fn merge(&mut self, other: FdCheck, label: &str) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = format!("{label}: {}", other.worst);
        }
        self.coordinates += other.coordinates;
        self.kinks += other.kinks;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub per_tensor: usize,
    /// Relative disagreement between step sizes treated as a kink.
    pub kink_tol: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compare `analytic[j]` with central differences of `eval` around `point`.
pub fn fd_check<R: Rng>(
    names: &[String],
    point: &[Tensor],
    analytic: &[Tensor],
    cfg: FdConfig,
    rng: &mut R,
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<FdCheck> {
    let mut work = point.to_vec();
    let f0 = eval(&work)?;
    let mut report = FdCheck::default();
    for (j, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        for i in sample(rng, n, cfg.per_tensor.min(n)) {
            let orig = work[j].data()[i];
            let mut at = |dx: f64| -> Result<f64> {
                work[j].data_mut()[i] = orig + dx;
                let v = eval(&work);
                work[j].data_mut()[i] = orig;
                v
            };
            let h = cfg.step;
            let (up, down, up2, down2) = (at(h)?, at(-h)?, at(h / 2.0)?, at(-h / 2.0)?);
            let numeric = (up - down) / (2.0 * h);
            let half = (up2 - down2) / h;
            // On a smooth coordinate the two central differences agree and the
            // one-sided gap shrinks linearly with the step; a kink inside the
            // stencil breaks at least one of the two.
            let gap = (up - 2.0 * f0 + down) / h;
            let gap2 = (up2 - 2.0 * f0 + down2) / (h / 2.0);
            let scale = numeric.abs().max(cfg.floor);
            if (numeric - half).abs() > cfg.kink_tol * scale || (gap - 2.0 * gap2).abs() > cfg.kink_tol * scale {
                report.kinks += 1;
                continue;
            }
            let a = grad.data()[i];
            let e = rel_err(a, numeric, cfg.floor);
            report.coordinates += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{}[{i}]: analytic {a:.6e} numeric {numeric:.6e}", names[j]);
            }
        }
    }
    Ok(report)
}

/// Check tape gradients of the scalar `f` with respect to every parameter of
/// `store` that `f` uses.
pub fn param_gradcheck<R, F>(store: &ParamStore, cfg: FdConfig, rng: &mut R, f: F) -> Result<FdCheck>
where
    R: Rng,
    F: for<'g> Fn(&Binding<'g>) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::new();
        let b = Binding::trainable(&g, store);
        let out = f(&b)?;
        let grads = g.backward(out);
        b.gradients(&grads)
    };
    let names: Vec<String> = analytic.keys().cloned().collect();
    let point: Vec<Tensor> = names.iter().map(|n| store.get(n).expect("param").clone()).collect();
    let grads: Vec<Tensor> = analytic.into_values().collect();
    let mut work = store.clone();
    fd_check(&names, &point, &grads, cfg, rng, |xs| {
        for (n, t) in names.iter().zip(xs) {
            *work.get_mut(n).expect("param") = t.clone();
        }
        let g = Graph::new();
        let b = Binding::frozen(&g, &work);
        Ok(f(&b)?.item())
    })
}

/// Check gradients of `f` with respect to its (non-parameter) inputs.
pub fn input_gradcheck<R, F>(store: &ParamStore, inputs: &[Tensor], cfg: FdConfig, rng: &mut R, f: F) -> Result<FdCheck>
where
    R: Rng,
    F: for<'g> Fn(&Binding<'g>, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let b = Binding::frozen(&g, store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let grads = g.backward(f(&b, &vars)?);
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    fd_check(&names, inputs, &analytic, cfg, rng, |xs| {
        let g = Graph::new();
        let b = Binding::frozen(&g, store);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&b, &vars)?.item())
    })
}

pub fn env_config(kind: EnvKind, size: usize) -> EnvConfig {
    let mut env = EnvConfig::new(kind, 0);
    env.height = size;
    env.width = size;
    if kind == EnvKind::BouncingBall {
        let s = size as f64 / 80.0;
        env.bouncing_ball.radius = (6.0 * s).max(2.0);
        env.bouncing_ball.velocity = [3.0 * s, 2.0 * s];
        env.bouncing_ball.diffusion = 1.5 * s;
    }
    env
}

pub fn trajectories(env: &EnvConfig, count: usize, horizon: usize, seed: u64) -> Vec<Trajectory> {
    let mut opts = CollectOptions::new(horizon, count, seed);
    opts.burn_in = 5;
    let policy = DataPolicy::default_for(env);
    collect_trajectories(env, policy, &opts)
        .expect("collection")
        .trajectories
}

/// A model at the smallest channel scale on `size x size` frames.
pub fn micro_model(family: Family, size: usize, jumpy: usize, seed: u64) -> EnvModel {
    let cfg = ModelConfig::new(family, 5, size, size)
        .with_scale(0.125)
        .with_jumpy(jumpy);
    EnvModel::new(cfg, seed).expect("model")
}
