//! Measures wall time per training epoch at the reference model size for the
//! three task families.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tndp_core::envs::{
    generate_synthetic_benchmark, DecisionAlFactory, TopKFactory, ToyFactory,
};
use tndp_core::model::ModelConfig;
use tndp_core::train::{train, TrainConfig};

fn time_task(name: &str, model_cfg: &ModelConfig, tc: &TrainConfig, factory: &dyn tndp_core::train::EnvFactory) {
    let dir = std::env::temp_dir().join(format!("tndp-epoch-bench-{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = Instant::now();
    train::<f32>(tc, model_cfg, factory, &dir, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{name}: {} epochs in {:.2}s -> {:.3}s/epoch",
        tc.epochs,
        dt,
        dt / tc.epochs as f64
    );
    let _ = std::fs::remove_dir_all(&dir);
}

fn main() {
    let n_epochs: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);

    // Toy: T=1, continuous queries.
    let model_cfg = ModelConfig::for_task(1, 2, None, 1);
    let mut tc = TrainConfig::with_defaults(1, n_epochs, 1);
    tc.checkpoint_interval = 1_000_000;
    tc.log_interval = 1_000_000;
    time_task("toy", &model_cfg, &tc, &ToyFactory::default());

    // Decision-aware AL: T=10, pool 100.
    let model_cfg = ModelConfig::for_task(1, 11, Some(4), 1);
    let mut tc = TrainConfig::with_defaults(10, n_epochs, 1);
    tc.checkpoint_interval = 1_000_000;
    tc.log_interval = 1_000_000;
    time_task("decision_al", &model_cfg, &tc, &DecisionAlFactory::default());

    // Top-k: T=50 over a 500-row table.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bench = Arc::new(
        generate_synthetic_benchmark("bench", 6, 500, 5, &mut rng, None).unwrap(),
    );
    let model_cfg = ModelConfig::for_task(6, 56, None, 0);
    let mut tc = TrainConfig::with_defaults(50, (n_epochs / 2).max(1), 1);
    tc.checkpoint_interval = 1_000_000;
    tc.log_interval = 1_000_000;
    tc.train_query_subsample = Some(100);
    time_task("topk", &model_cfg, &tc, &TopKFactory::new(bench));
}
