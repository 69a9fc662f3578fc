mod common;

use imagine_autograd::{Binding, Graph, ParamStore, Tensor, Var};
use imagine_core::models::{EnvModel, Family, StepMode};
use imagine_core::rollout::{
    context_vars, rollout, rollout_modulated, rollout_relaxed, ActionSource, FeatureKind, RelaxedActions,
    RolloutRequest,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{input_gradcheck, micro_model, param_gradcheck, FdConfig};

const CFG: FdConfig = FdConfig {
    step: 1e-4,
    floor: 1e-3,
    per_tensor: 8,
    kink_tol: 1e-4,
};

fn context(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .map(|_| Tensor::uniform(&[n, 16, 16, 3], 0.0, 1.0, &mut rng))
        .collect()
}

fn weighted<'g>(vs: &[Var<'g>]) -> Var<'g> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let terms: Vec<Var> = vs
        .iter()
        .map(|v| (*v * v.graph().constant(Tensor::randn(&v.shape(), &mut rng))).sum())
        .collect();
    terms.into_iter().reduce(|a, b| a + b).expect("nonempty")
}

fn leak(model: EnvModel) -> &'static EnvModel {
    Box::leak(Box::new(model))
}

/// Gradients of imagined features with respect to the action logits that
/// feed relaxed rollouts (the learning-to-query path) match differences.
#[test]
fn relaxed_rollout_gradients_match_finite_differences() {
    for family in [Family::Sssm, Family::DssmDet, Family::Rar] {
        let model = leak(micro_model(family, 16, 1, 5));
        let ctx = context(1, 1);
        let features = if family.has_state() {
            FeatureKind::State
        } else {
            FeatureKind::Pixels
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[2, 5], &mut rng)).collect();
        let store: &'static ParamStore = &model.params;
        let rep = input_gradcheck(store, &logits, CFG, &mut rng, |b, v| {
            let g = b.graph();
            let s0 = model.init_state(b, &context_vars(g, &ctx))?;
            let req = RolloutRequest::new(2, 3, features, ActionSource::Policy, 3);
            let probs: Vec<Var> = v.iter().map(|l| l.softmax()).collect();
            let bundle = rollout_relaxed(model, b, &s0, &req, RelaxedActions::Given(probs))?;
            let mut all = bundle.features.clone();
            all.extend(bundle.reward_logits.iter().copied());
            Ok(weighted(&all))
        })
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "{family}: {rep:?}");
        assert!(rep.coordinates > 0);
    }
}

/// Gradients with respect to the agent-owned prior of a modulated rollout.
#[test]
fn modulated_prior_gradients_match_finite_differences() {
    let model = leak(micro_model(Family::SssmUncond, 16, 1, 6));
    let mut prior = model.params.subset("prior/");
    assert!(!prior.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (_, t) in prior.iter_mut() {
        let noise = Tensor::randn(t.shape(), &mut rng);
        t.add_assign(&noise.scale(0.05));
    }
    let ctx = context(1, 2);
    let rep = param_gradcheck(&prior, CFG, &mut rng, |pb| {
        let g = pb.graph();
        let b = Binding::frozen(g, &model.params);
        let s0 = model.init_state(&b, &context_vars(g, &ctx))?;
        let req = RolloutRequest::new(2, 3, FeatureKind::State, ActionSource::Policy, 4);
        let bundle = rollout_modulated(model, &b, pb, &s0, &req)?;
        Ok(weighted(&bundle.features))
    })
    .unwrap();
    assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    assert!(rep.coordinates > 20);
}

#[test]
fn modulated_rollouts_follow_the_given_prior() {
    let model = micro_model(Family::SssmUncond, 16, 1, 6);
    let ctx = context(1, 2);
    let run = |prior: &ParamStore| {
        let g = Graph::new();
        let b = Binding::frozen(&g, &model.params);
        let pb = Binding::frozen(&g, prior);
        let s0 = model.init_state(&b, &context_vars(&g, &ctx)).unwrap();
        let req = RolloutRequest::new(1, 2, FeatureKind::State, ActionSource::Policy, 4);
        let bundle = rollout_modulated(&model, &b, &pb, &s0, &req).unwrap();
        bundle.features[1].value().as_ref().clone()
    };
    let own = model.params.subset("prior/");
    let mut shifted = own.clone();
    for (_, t) in shifted.iter_mut() {
        t.data_mut()[0] += 0.5;
    }
    // With the model's own prior the modulated rollout is the plain one.
    let g = Graph::new();
    let b = Binding::frozen(&g, &model.params);
    let s0 = model.init_state(&b, &context_vars(&g, &ctx)).unwrap();
    let plain = rollout(
        &model,
        &b,
        &s0,
        &RolloutRequest::new(1, 2, FeatureKind::State, ActionSource::Fixed(vec![0, 0]), 4),
        None,
    )
    .unwrap();
    assert_eq!(run(&own), *plain.features[1].value());
    assert_ne!(run(&shifted), run(&own));
}

fn chain_spread(model: &EnvModel, features: FeatureKind) -> f64 {
    let k = 6;
    let ctx = context(1, 3);
    let g = Graph::new();
    let b = Binding::frozen(&g, &model.params);
    let s0 = model.init_state(&b, &context_vars(&g, &ctx)).unwrap();
    let mut req = RolloutRequest::new(k, 4, features, ActionSource::Fixed(vec![2; 4]), 8);
    req.mode = StepMode::Sample;
    let bundle = rollout(model, &b, &s0, &req, None).unwrap();
    let last = bundle.features[3].value();
    let rows: Vec<Tensor> = (0..k).map(|r| last.narrow_rows(r, 1)).collect();
    // Largest per-coordinate range across chains; exactly zero when all
    // chains coincide.
    (0..rows[0].numel())
        .map(|i| {
            let vals = rows.iter().map(|r| r.data()[i]);
            vals.clone().fold(f64::NEG_INFINITY, f64::max) - vals.fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Chains under identical actions only diverge where latents feed the state.
#[test]
fn chain_variance_reflects_state_stochasticity() {
    let sssm = micro_model(Family::Sssm, 16, 1, 1);
    let det = micro_model(Family::DssmDet, 16, 1, 1);
    let vae = micro_model(Family::DssmVae, 16, 1, 1);
    assert!(chain_spread(&sssm, FeatureKind::State) > 1e-6);
    assert_eq!(chain_spread(&det, FeatureKind::State), 0.0);
    assert_eq!(chain_spread(&vae, FeatureKind::State), 0.0);
    // The VAE's sampled latents still reach the decoded frames.
    assert!(chain_spread(&vae, FeatureKind::Pixels) > 0.0);
    assert_eq!(chain_spread(&det, FeatureKind::Pixels), 0.0);
}

#[test]
fn state_rollouts_never_decode_pixels() {
    let model = micro_model(Family::Sssm, 16, 2, 1);
    model.counters.reset();
    let ctx = context(2, 4);
    let g = Graph::new();
    let b = Binding::frozen(&g, &model.params);
    let s0 = model.init_state(&b, &context_vars(&g, &ctx)).unwrap();
    let req = RolloutRequest::new(3, 5, FeatureKind::State, ActionSource::Fixed(vec![1; 10]), 0);
    let bundle = rollout(&model, &b, &s0, &req, None).unwrap();
    assert_eq!(bundle.features.len(), 5);
    assert_eq!(model.counters.pixel_decodes(), 0);
    assert_eq!(model.counters.generative_steps(), 5);
    assert_eq!(model.counters.sample_steps(), 5 * 6);
}
