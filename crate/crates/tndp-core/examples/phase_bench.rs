//! Times forward/traced/backward phases at top-k shapes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tndp_core::model::{ModelConfig, TndpModel};
use tndp_core::nn::Grads;
use tndp_core::task::{Design, ExperimentHistory, GlobalInfo, Outcome, TndpInput};

fn main() {
    let d_x = 6;
    let cfg = ModelConfig::for_task(d_x, 56, None, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (model, params) = TndpModel::init::<f32>(&cfg, &mut rng).unwrap();

    let design = |r: &mut ChaCha8Rng| {
        Design::new((0..d_x).map(|_| r.random_range(0.0..1.0)).collect::<Vec<f64>>())
    };
    let mut history = ExperimentHistory::empty();
    for _ in 0..30 {
        history = history
            .with(design(&mut rng), Outcome::new(rng.random_range(0.0..1.0)).unwrap())
            .unwrap();
    }
    let input = TndpInput {
        context: history,
        prediction_designs: (0..256).map(|_| design(&mut rng)).collect(),
        query_designs: (0..100).map(|_| design(&mut rng)).collect(),
        global_info: GlobalInfo::new(30, vec![]),
    };

    let iters = 30;
    let t0 = Instant::now();
    for _ in 0..iters {
        let _ = model.forward(&params, &input).unwrap();
    }
    println!("lean forward: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);

    let t0 = Instant::now();
    for _ in 0..iters {
        let _ = model.forward_traced(&params, &input).unwrap();
    }
    println!("traced forward: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);

    let (out, trace) = model.forward_traced(&params, &input).unwrap();
    let d_mean = vec![0.1; out.predictions.len()];
    let d_std = vec![0.1; out.predictions.len()];
    let d_logits = vec![0.1; out.query_logits.len()];
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut grads = Grads::zeros_like(&params);
        model.backward(&params, &trace, &d_mean, &d_std, &d_logits, &mut grads);
    }
    println!("backward: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);
}
