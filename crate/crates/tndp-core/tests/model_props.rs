//! Structural invariants of the masked transformer: permutation invariance
//! over the context set, isolation of prediction/query tokens, σ positivity,
//! and finite-difference validation of the full loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tndp_core::model::{ModelConfig, TndpModel};
use tndp_core::nn::{Grads, ParamId, ParamSet};
use tndp_core::task::{Design, ExperimentHistory, GlobalInfo, Outcome, TndpInput};
use tndp_core::train::{prediction_loss, prediction_loss_grad, query_loss_logit_grad};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config(n_decisions: Option<usize>, gamma: bool) -> ModelConfig {
    ModelConfig {
        d_x: 1,
        embed_dim: 16,
        n_layers: 2,
        n_heads: 4,
        mlp_hidden: 24,
        embedder_depth: 2,
        embedder_hidden: 12,
        head_hidden: 12,
        max_steps: 12,
        n_decisions,
        gamma_dim: usize::from(gamma),
    }
}

fn random_input(cfg: &ModelConfig, n_c: usize, n_p: usize, n_q: usize, r: &mut ChaCha8Rng) -> TndpInput {
    let design = |r: &mut ChaCha8Rng| {
        let coords = vec![r.random_range(-1.0..1.0)];
        match cfg.n_decisions {
            Some(n) => Design::with_tag(coords, r.random_range(0..n)),
            None => Design::new(coords),
        }
    };
    let mut history = ExperimentHistory::empty();
    for _ in 0..n_c {
        history = history
            .with(design(r), Outcome::new(r.random_range(-1.0..1.0)).unwrap())
            .unwrap();
    }
    TndpInput {
        context: history,
        prediction_designs: (0..n_p).map(|_| design(r)).collect(),
        query_designs: (0..n_q).map(|_| design(r)).collect(),
        global_info: GlobalInfo::new(
            n_c,
            if cfg.gamma_dim > 0 { vec![r.random_range(-1.0..1.0)] } else { Vec::new() },
        ),
    }
}

#[test]
fn context_permutation_leaves_outputs_unchanged() {
    for trial in 0..50 {
        let mut r = rng(100 + trial);
        let with_tags = trial % 2 == 0;
        let cfg = small_config(if with_tags { Some(3) } else { None }, trial % 3 == 0);
        let (model, params) = TndpModel::init::<f64>(&cfg, &mut r).unwrap();
        let input = random_input(&cfg, 5, 3, 4, &mut r);
        let base = model.forward(&params, &input).unwrap();

        // Reverse the context ordering.
        let mut pairs = input.context.pairs().to_vec();
        pairs.reverse();
        let permuted = TndpInput {
            context: ExperimentHistory::from_pairs(pairs).unwrap(),
            ..input.clone()
        };
        let out = model.forward(&params, &permuted).unwrap();

        for (a, b) in base.predictions.iter().zip(&out.predictions) {
            assert!((a.mean - b.mean).abs() < 1e-5, "trial {trial}: mean moved");
            assert!((a.std - b.std).abs() < 1e-5, "trial {trial}: std moved");
        }
        for (a, b) in base.query_logits.iter().zip(&out.query_logits) {
            assert!((a - b).abs() < 1e-5, "trial {trial}: logit moved");
        }
    }
}

#[test]
fn removing_a_query_design_leaves_others_unchanged() {
    for trial in 0..50 {
        let mut r = rng(300 + trial);
        let cfg = small_config(None, true);
        let (model, params) = TndpModel::init::<f64>(&cfg, &mut r).unwrap();
        let input = random_input(&cfg, 3, 2, 5, &mut r);
        let base = model.forward(&params, &input).unwrap();

        let mut reduced = input.clone();
        reduced.query_designs.remove(2);
        let out = model.forward(&params, &reduced).unwrap();

        for (a, b) in base.predictions.iter().zip(&out.predictions) {
            assert!((a.mean - b.mean).abs() < 1e-5);
            assert!((a.std - b.std).abs() < 1e-5);
        }
        let kept: Vec<f64> = base
            .query_logits
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 2)
            .map(|(_, &l)| l)
            .collect();
        for (a, b) in kept.iter().zip(&out.query_logits) {
            assert!((a - b).abs() < 1e-5, "trial {trial}: surviving logit moved");
        }
    }
}

#[test]
fn perturbing_a_prediction_design_leaves_query_logits_unchanged() {
    for trial in 0..50 {
        let mut r = rng(500 + trial);
        let cfg = small_config(None, false);
        let (model, params) = TndpModel::init::<f64>(&cfg, &mut r).unwrap();
        let input = random_input(&cfg, 4, 3, 4, &mut r);
        let base = model.forward(&params, &input).unwrap();

        let mut perturbed = input.clone();
        perturbed.prediction_designs[1] = Design::new(vec![r.random_range(-1.0..1.0)]);
        let out = model.forward(&params, &perturbed).unwrap();

        for (a, b) in base.query_logits.iter().zip(&out.query_logits) {
            assert!((a - b).abs() < 1e-5, "trial {trial}: logit moved");
        }
        // Untouched prediction tokens are isolated from each other too.
        for i in [0usize, 2] {
            assert!((base.predictions[i].mean - out.predictions[i].mean).abs() < 1e-5);
            assert!((base.predictions[i].std - out.predictions[i].std).abs() < 1e-5);
        }
    }
}

#[test]
fn sigma_positive_on_random_instances() {
    for trial in 0..50 {
        let mut r = rng(700 + trial);
        let cfg = small_config(Some(4), true);
        let (model, params) = TndpModel::init::<f64>(&cfg, &mut r).unwrap();
        let input = random_input(&cfg, 6, 4, 3, &mut r);
        let out = model.forward(&params, &input).unwrap();
        for p in &out.predictions {
            assert!(p.std > 0.0);
        }
    }
}

/// Total loss (prediction NLL + policy term with fixed returns) for the
/// finite-difference gradient check.
fn total_loss(
    model: &TndpModel,
    params: &ParamSet<f64>,
    input: &TndpInput,
    targets: &[f64],
    chosen: usize,
    ret: f64,
) -> f64 {
    let out = model.forward(params, input).unwrap();
    let probs = tndp_core::model::policy_distribution(&out.query_logits);
    prediction_loss(&out.predictions, targets) - ret * probs[chosen].ln()
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut r = rng(900);
    let cfg = small_config(Some(3), true);
    let (model, mut params) = TndpModel::init::<f64>(&cfg, &mut r).unwrap();
    let input = random_input(&cfg, 4, 3, 4, &mut r);
    let targets: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    let chosen = 1usize;
    let ret = 0.7;

    // Analytic gradient through the full model.
    let (out, trace) = model.forward_traced(&params, &input).unwrap();
    let (_, d_mean, d_std) = prediction_loss_grad(&out.predictions, &targets);
    let probs = tndp_core::model::policy_distribution(&out.query_logits);
    let d_logits = query_loss_logit_grad(&probs, chosen, ret);
    let mut grads = Grads::zeros_like(&params);
    model.backward(&params, &trace, &d_mean, &d_std, &d_logits, &mut grads);

    // 20 random parameter scalars, central differences.
    let n_tensors = params.len();
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 20 && attempts < 200 {
        attempts += 1;
        let id = ParamId(r.random_range(0..n_tensors));
        let (rows, cols) = params.get(id).dim();
        let i = r.random_range(0..rows);
        let j = r.random_range(0..cols);

        let an = grads.get(id)[[i, j]];
        let h = 1e-5 * params.get(id)[[i, j]].abs().max(1.0);
        let orig = params.get(id)[[i, j]];
        params.get_mut(id)[[i, j]] = orig + h;
        let fp = total_loss(&model, &params, &input, &targets, chosen, ret);
        params.get_mut(id)[[i, j]] = orig - h;
        let fm = total_loss(&model, &params, &input, &targets, chosen, ret);
        params.get_mut(id)[[i, j]] = orig;
        let fd = (fp - fm) / (2.0 * h);

        // Skip parameters the loss genuinely does not touch (e.g. unused
        // embedding rows); both routes agree they are zero.
        if fd.abs() < 1e-12 && an.abs() < 1e-12 {
            continue;
        }
        let denom = fd.abs().max(an.abs());
        assert!(
            ((fd - an) / denom).abs() < 1e-3,
            "param {} ({i},{j}): fd {fd} vs analytic {an}",
            params.name(id)
        );
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} informative parameters checked");
}

#[test]
fn gradient_check_covers_every_component_kind() {
    // Deterministic sweep: first scalar of every tensor, so embedders,
    // attention, layer norms, and both heads all get validated.
    let mut r = rng(901);
    let cfg = small_config(Some(3), true);
    let (model, mut params) = TndpModel::init::<f64>(&cfg, &mut r).unwrap();
    let input = random_input(&cfg, 3, 2, 3, &mut r);
    let targets: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
    let chosen = 0usize;
    let ret = -0.4;

    let (out, trace) = model.forward_traced(&params, &input).unwrap();
    let (_, d_mean, d_std) = prediction_loss_grad(&out.predictions, &targets);
    let probs = tndp_core::model::policy_distribution(&out.query_logits);
    let d_logits = query_loss_logit_grad(&probs, chosen, ret);
    let mut grads = Grads::zeros_like(&params);
    model.backward(&params, &trace, &d_mean, &d_std, &d_logits, &mut grads);

    for t in 0..params.len() {
        let id = ParamId(t);
        let an = grads.get(id)[[0, 0]];
        let orig = params.get(id)[[0, 0]];
        let h = 1e-5 * orig.abs().max(1.0);
        params.get_mut(id)[[0, 0]] = orig + h;
        let fp = total_loss(&model, &params, &input, &targets, chosen, ret);
        params.get_mut(id)[[0, 0]] = orig - h;
        let fm = total_loss(&model, &params, &input, &targets, chosen, ret);
        params.get_mut(id)[[0, 0]] = orig;
        let fd = (fp - fm) / (2.0 * h);
        if fd.abs() < 1e-12 && an.abs() < 1e-12 {
            continue;
        }
        let denom = fd.abs().max(an.abs());
        assert!(
            ((fd - an) / denom).abs() < 1e-3,
            "tensor {} [0,0]: fd {fd} vs analytic {an}",
            params.name(id)
        );
    }
}
