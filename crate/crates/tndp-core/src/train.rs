//! Training: episode rollouts, decision-utility-gain step rewards, discounted
//! returns, the joint Gaussian-NLL + policy-gradient loss, and the
//! optimization schedule.
//!
//! Every source of randomness is a stream derived from (seed, epoch,
//! episode), so batches parallelize across workers with bit-identical
//! results and resuming from a checkpoint continues the exact run.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    load_checkpoint, make_checkpoint, policy_distribution, restore_model, save_checkpoint,
    ModelConfig, ModelError, TndpModel,
};
use crate::nn::{cosine_lr, Adam, Grads, ParamSet, Real};
use crate::seeded::{stream, Stream};
use crate::task::{
    optimal_decision, Decision, DecisionProblem, Design, ExperimentHistory, GaussianPrediction,
    GlobalInfo, TaskEnvironment, TaskError, TndpInput, DEFAULT_UTILITY_SAMPLES,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}; diagnostic checkpoint at {diagnostic:?}")]
    NonFiniteLoss { epoch: u64, diagnostic: PathBuf },
    #[error("query set exhausted at step {0} before horizon")]
    QueryExhausted(usize),
}

/// Samples fresh task environments for simulation-based training.
pub trait EnvFactory: Send + Sync {
    fn sample_env(&self, rng: &mut ChaCha8Rng) -> Box<dyn TaskEnvironment>;
}

/// Training hyperparameters. Reference values: lr 5e-4 with cosine annealing,
/// batch 16, discount 0.99, 50k epochs for top-k tasks and 100k otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub discount: f64,
    pub horizon: usize,
    pub seed: u64,
    pub checkpoint_interval: u64,
    /// Minimum prediction-set size per step (decision-relevant designs are
    /// always included and may exceed it).
    pub n_pred: usize,
    /// Query-set size resampled per step for continuous design spaces.
    pub n_query_resample: usize,
    /// Optional per-step query subsample for large finite pools during
    /// training; evaluation always scores the full pool.
    pub train_query_subsample: Option<usize>,
    /// Monte Carlo samples for expected-utility estimates.
    pub utility_samples: usize,
    /// Subtract the batch-mean return from each return (variance reduction).
    pub mean_return_baseline: bool,
    /// Epoch interval for training-log rows (1 = every epoch).
    pub log_interval: u64,
    /// Stop this invocation after the given epoch (checkpointing as usual)
    /// while keeping the lr schedule pinned to `epochs`; resume later.
    pub stop_at_epoch: Option<u64>,
}

impl TrainConfig {
    pub fn with_defaults(horizon: usize, epochs: u64, seed: u64) -> Self {
        Self {
            lr: 5e-4,
            batch_size: 16,
            epochs,
            discount: 0.99,
            horizon,
            seed,
            checkpoint_interval: 1000,
            n_pred: 16,
            n_query_resample: 100,
            train_query_subsample: None,
            utility_samples: DEFAULT_UTILITY_SAMPLES,
            mean_return_baseline: false,
            log_interval: 1,
            stop_at_epoch: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(TrainError::Config("discount must lie in [0, 1]".into()));
        }
        if self.horizon == 0 {
            return Err(TrainError::Config("horizon must be at least 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// One recorded forward pass of a rollout: the inputs needed to replay it
/// with gradients, plus the outputs needed for rewards and logging.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub context_len: usize,
    pub prediction_designs: Vec<Design>,
    pub prediction_targets: Vec<f64>,
    pub predictions: Vec<GaussianPrediction>,
    pub query_designs: Vec<Design>,
    /// Index into `query_designs` of the sampled next design (absent on the
    /// final prediction-only pass).
    pub chosen: Option<usize>,
    pub log_pi: Option<f64>,
    /// max_a E_q[u] estimated from this pass's predictions.
    pub value: f64,
    pub problem: DecisionProblem,
}

/// A complete episode: T querying passes plus the final prediction pass.
#[derive(Debug, Clone)]
pub struct EpisodeTrajectory {
    pub forwards: Vec<ForwardRecord>,
    pub rewards: Vec<f64>,
    pub final_history: ExperimentHistory,
    pub final_decision: Decision,
    pub terminal_true_utility: f64,
}

impl EpisodeTrajectory {
    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// ξ_t ~ π (training).
    Sample,
    /// ξ_t = argmax π (deployment).
    Greedy,
}

/// Single-step reward: the gain in maximum expected utility from the new
/// observation, with common random numbers across the two estimates.
pub fn step_reward(
    preds_before: &[GaussianPrediction],
    preds_after: &[GaussianPrediction],
    space: &crate::task::DecisionSpace,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TaskError> {
    let mut rng_before = rng.clone();
    let mut rng_after = rng.clone();
    let (_, v_before) = optimal_decision(preds_before, space, n_samples, &mut rng_before)?;
    let (_, v_after) = optimal_decision(preds_after, space, n_samples, &mut rng_after)?;
    *rng = rng_after;
    Ok(v_after - v_before)
}

/// R_t = Σ_{k=t}^T α^{k−t} r_k via the exact reverse recursion.
pub fn discounted_returns(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + discount * acc;
        returns[i] = acc;
    }
    returns
}

/// Gaussian negative log-likelihood summed over aligned predictions/targets.
pub fn prediction_loss(preds: &[GaussianPrediction], targets: &[f64]) -> f64 {
    assert_eq!(preds.len(), targets.len());
    let mut loss = 0.0;
    for (p, &y) in preds.iter().zip(targets) {
        let var = p.std * p.std;
        let resid = y - p.mean;
        loss += 0.5 * (2.0 * std::f64::consts::PI * var).ln() + resid * resid / (2.0 * var);
    }
    loss
}

/// Loss plus gradients with respect to each mean and std.
pub fn prediction_loss_grad(
    preds: &[GaussianPrediction],
    targets: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let loss = prediction_loss(preds, targets);
    let mut d_mean = Vec::with_capacity(preds.len());
    let mut d_std = Vec::with_capacity(preds.len());
    for (p, &y) in preds.iter().zip(targets) {
        let var = p.std * p.std;
        let resid = y - p.mean;
        d_mean.push(-resid / var);
        d_std.push(1.0 / p.std - resid * resid / (var * p.std));
    }
    (loss, d_mean, d_std)
}

/// L^(q) = −Σ_t R_t log π(ξ_t); returns are constants, gradients flow only
/// through the log-probabilities.
pub fn query_loss(log_pis: &[f64], returns: &[f64]) -> f64 {
    assert_eq!(log_pis.len(), returns.len());
    -log_pis.iter().zip(returns).map(|(lp, r)| r * lp).sum::<f64>()
}

/// Gradient of one step's −R·log π(chosen) with respect to the logits:
/// R·(π − onehot).
pub fn query_loss_logit_grad(probs: &[f64], chosen: usize, ret: f64) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(j, &p)| ret * (p - if j == chosen { 1.0 } else { 0.0 }))
        .collect()
}

fn sample_from_probs(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Builds the prediction set for one step: the decision problem's designs
/// first (so predictions align with it), padded with draws from the task's
/// design distribution up to `n_pred`.
fn build_prediction_set(
    env: &dyn TaskEnvironment,
    problem: &DecisionProblem,
    n_pred: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Design> {
    let mut designs = problem.designs.clone();
    if designs.len() < n_pred {
        designs.extend(env.sample_designs(n_pred - designs.len(), rng));
    }
    designs
}

/// Rolls out one episode of length `horizon` against `env`.
///
/// The rollout performs horizon+1 forward passes: passes 0..T propose designs
/// (sampled or greedy), pass T is prediction-only and supports the final
/// decision. Rewards are first differences of the per-pass expected-utility
/// values, so they telescope exactly.
pub fn rollout_episode<F: Real>(
    model: &TndpModel,
    params: &ParamSet<F>,
    env: &dyn TaskEnvironment,
    horizon: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mode: RolloutMode,
) -> Result<EpisodeTrajectory, TrainError> {
    let gamma = env.global_context();
    let mut history = env.initial_history();
    let finite_pool = env.query_pool();
    let mut remaining: Vec<Design> = finite_pool.clone().unwrap_or_default();

    let mut forwards: Vec<ForwardRecord> = Vec::with_capacity(horizon + 1);

    for t in 0..=horizon {
        let is_final = t == horizon;
        let problem = env.decision_problem(&history, rng);
        let prediction_designs = build_prediction_set(env, &problem, cfg.n_pred, rng);
        let prediction_targets: Vec<f64> = prediction_designs
            .iter()
            .map(|d| env.observe(d, rng).value())
            .collect();

        let query_designs: Vec<Design> = if is_final {
            Vec::new()
        } else if finite_pool.is_some() {
            if remaining.is_empty() {
                return Err(TrainError::QueryExhausted(t));
            }
            match cfg.train_query_subsample {
                Some(m) if mode == RolloutMode::Sample && remaining.len() > m => {
                    // Partial Fisher-Yates for m distinct pool indices.
                    let mut idx: Vec<usize> = (0..remaining.len()).collect();
                    for i in 0..m {
                        let j = rng.random_range(i..idx.len());
                        idx.swap(i, j);
                    }
                    idx[..m].iter().map(|&i| remaining[i].clone()).collect()
                }
                _ => remaining.clone(),
            }
        } else {
            env.sample_designs(cfg.n_query_resample, rng)
        };

        let input = TndpInput {
            context: history.clone(),
            prediction_designs: prediction_designs.clone(),
            query_designs: query_designs.clone(),
            global_info: GlobalInfo::new(history.step(), gamma.clone()),
        };
        let out = model.forward(params, &input)?;

        let n_problem = problem.designs.len();
        let (decision, value) = optimal_decision(
            &out.predictions[..n_problem],
            &problem.space,
            cfg.utility_samples,
            rng,
        )?;

        if is_final {
            let terminal_true_utility = env.true_utility(&problem, &decision);
            forwards.push(ForwardRecord {
                context_len: history.step(),
                prediction_designs,
                prediction_targets,
                predictions: out.predictions,
                query_designs,
                chosen: None,
                log_pi: None,
                value,
                problem,
            });
            let mut rewards = Vec::with_capacity(horizon);
            for k in 1..=horizon {
                rewards.push(forwards[k].value - forwards[k - 1].value);
            }
            return Ok(EpisodeTrajectory {
                forwards,
                rewards,
                final_history: history,
                final_decision: decision,
                terminal_true_utility,
            });
        }

        if out.query_logits.is_empty() {
            return Err(TrainError::Model(ModelError::EmptyQuerySet));
        }
        let probs = policy_distribution(&out.query_logits);
        let chosen = match mode {
            RolloutMode::Sample => sample_from_probs(&probs, rng),
            RolloutMode::Greedy => argmax(&probs),
        };
        let log_pi = probs[chosen].max(1e-300).ln();
        let chosen_design = query_designs[chosen].clone();
        let outcome = env.observe(&chosen_design, rng);

        forwards.push(ForwardRecord {
            context_len: history.step(),
            prediction_designs,
            prediction_targets,
            predictions: out.predictions,
            query_designs,
            chosen: Some(chosen),
            log_pi: Some(log_pi),
            value,
            problem,
        });

        history = history.with(chosen_design.clone(), outcome)?;
        if finite_pool.is_some() {
            remaining.retain(|d| d != &chosen_design);
        }
    }
    unreachable!("loop returns at the final pass");
}

/// Per-episode loss terms and gradients from replaying a trajectory.
struct EpisodeGrads<F: Real> {
    grads: Grads<F>,
    loss_p: f64,
    loss_q: f64,
}

fn episode_gradients<F: Real>(
    model: &TndpModel,
    params: &ParamSet<F>,
    env_gamma: &[f64],
    traj: &EpisodeTrajectory,
    returns: &[f64],
) -> Result<EpisodeGrads<F>, TrainError> {
    let mut grads = Grads::zeros_like(params);
    let mut loss_p = 0.0;
    let mut loss_q = 0.0;
    let horizon = traj.horizon();

    for (k, rec) in traj.forwards.iter().enumerate() {
        let context = ExperimentHistory::from_pairs(
            traj.final_history.pairs()[..rec.context_len].to_vec(),
        )?;
        let input = TndpInput {
            context,
            prediction_designs: rec.prediction_designs.clone(),
            query_designs: rec.query_designs.clone(),
            global_info: GlobalInfo::new(rec.context_len, env_gamma.to_vec()),
        };
        let (out, trace) = model.forward_traced(params, &input)?;

        // The prediction loss covers passes 1..=T: contexts that include at
        // least one queried observation, matching the per-step NLL sum.
        let (d_mean, d_std) = if k >= 1 {
            let (lp, dm, ds) = prediction_loss_grad(&out.predictions, &rec.prediction_targets);
            loss_p += lp;
            (dm, ds)
        } else {
            (vec![0.0; out.predictions.len()], vec![0.0; out.predictions.len()])
        };

        // Policy-gradient term on the querying passes.
        let d_logits = if k < horizon {
            let probs = policy_distribution(&out.query_logits);
            let chosen = rec.chosen.expect("querying pass has a chosen design");
            loss_q += -returns[k] * probs[chosen].max(1e-300).ln();
            query_loss_logit_grad(&probs, chosen, returns[k])
        } else {
            Vec::new()
        };

        model.backward(params, &trace, &d_mean, &d_std, &d_logits, &mut grads);
    }

    Ok(EpisodeGrads { grads, loss_p, loss_q })
}

/// Artifacts of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub final_epoch: u64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,loss_p,loss_q,mean_terminal_utility,lr,wall_time_s";

/// Runs (or resumes) simulation-based training: each epoch samples
/// `batch_size` fresh environments, rolls out episodes, and applies one
/// optimizer step on the batch-averaged prediction and query losses.
pub fn train<F: Real>(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    factory: &dyn EnvFactory,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join("checkpoint.ckpt");
    let log_path = out_dir.join("train_log.csv");

    let (model, mut params, mut adam, start_epoch) = match resume_from {
        Some(path) => {
            let ckpt = load_checkpoint::<F>(path)?;
            if &ckpt.config != model_cfg {
                return Err(TrainError::Model(ModelError::ConfigMismatch(
                    "resume checkpoint was trained with a different model config".into(),
                )));
            }
            if ckpt.master_seed != train_cfg.seed {
                return Err(TrainError::Config(format!(
                    "resume checkpoint has seed {}, config has {}",
                    ckpt.master_seed, train_cfg.seed
                )));
            }
            let (model, params) = restore_model(&ckpt)?;
            let mut adam = Adam::new(&params);
            if let Some((t, m, v)) = ckpt.adam {
                adam.t = t;
                adam.m = m;
                adam.v = v;
            }
            (model, params, adam, ckpt.train_step)
        }
        None => {
            let mut init_rng = stream(train_cfg.seed, Stream::ParamInit, 0, 0);
            let (model, params) = TndpModel::init::<F>(model_cfg, &mut init_rng)?;
            let adam = Adam::new(&params);
            (model, params, adam, 0)
        }
    };

    // γ layout is fixed per task family; probe one env to validate it early.
    let gamma_dim = {
        let mut rng = stream(train_cfg.seed, Stream::EnvDraw, 0, 0);
        factory.sample_env(&mut rng).global_context().len()
    };
    if gamma_dim != model_cfg.gamma_dim {
        return Err(TrainError::Config(format!(
            "task γ dimension {gamma_dim} does not match model gamma_dim {}",
            model_cfg.gamma_dim
        )));
    }

    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    if start_epoch == 0 {
        use std::io::Write;
        writeln!(log, "{TRAIN_LOG_HEADER}")?;
    }

    let start = std::time::Instant::now();
    let run_until = train_cfg.stop_at_epoch.unwrap_or(train_cfg.epochs).min(train_cfg.epochs);

    for epoch in start_epoch..run_until {
        let lr = cosine_lr(train_cfg.lr, epoch, train_cfg.epochs);

        // Phase 1: roll out the batch in parallel, deterministically seeded.
        let rollout_results: Vec<Result<(EpisodeTrajectory, Vec<f64>, Vec<f64>), TrainError>> =
            (0..train_cfg.batch_size)
                .into_par_iter()
                .map(|i| {
                    let mut env_rng =
                        stream(train_cfg.seed, Stream::EnvDraw, epoch, i as u64);
                    let env = factory.sample_env(&mut env_rng);
                    let mut ep_rng = stream(train_cfg.seed, Stream::Rollout, epoch, i as u64);
                    let traj = rollout_episode(
                        &model,
                        &params,
                        env.as_ref(),
                        train_cfg.horizon,
                        train_cfg,
                        &mut ep_rng,
                        RolloutMode::Sample,
                    )?;
                    let gamma = env.global_context();
                    let returns = discounted_returns(&traj.rewards, train_cfg.discount);
                    Ok((traj, gamma, returns))
                })
                .collect();

        let mut batch = Vec::with_capacity(train_cfg.batch_size);
        for r in rollout_results {
            batch.push(r?);
        }

        // Optional batch-mean-return baseline.
        if train_cfg.mean_return_baseline {
            let mut means = vec![0.0; train_cfg.horizon];
            for (_, _, returns) in &batch {
                for (t, r) in returns.iter().enumerate() {
                    means[t] += r / train_cfg.batch_size as f64;
                }
            }
            for (_, _, returns) in batch.iter_mut() {
                for (t, r) in returns.iter_mut().enumerate() {
                    *r -= means[t];
                }
            }
        }

        // Phase 2: replay with gradients, in parallel; reduce sequentially.
        let grad_results: Vec<Result<EpisodeGrads<F>, TrainError>> = batch
            .par_iter()
            .map(|(traj, gamma, returns)| {
                episode_gradients(&model, &params, gamma, traj, returns)
            })
            .collect();

        let mut total = Grads::zeros_like(&params);
        let mut loss_p = 0.0;
        let mut loss_q = 0.0;
        for r in grad_results {
            let eg = r?;
            total.add_assign(&eg.grads);
            loss_p += eg.loss_p;
            loss_q += eg.loss_q;
        }
        let inv_batch = 1.0 / train_cfg.batch_size as f64;
        total.scale(crate::nn::c::<F>(inv_batch));
        loss_p *= inv_batch;
        loss_q *= inv_batch;
        let mean_utility = batch
            .iter()
            .map(|(t, _, _)| t.terminal_true_utility)
            .sum::<f64>()
            * inv_batch;

        if !loss_p.is_finite() || !loss_q.is_finite() {
            let diag = out_dir.join(format!("diagnostic-epoch{epoch}.ckpt"));
            save_checkpoint(
                &make_checkpoint(model_cfg, &params, Some(&adam), epoch, train_cfg.seed),
                &diag,
            )?;
            return Err(TrainError::NonFiniteLoss { epoch, diagnostic: diag });
        }

        adam.step(&mut params, &total, lr);

        if epoch % train_cfg.log_interval == 0 || epoch + 1 == train_cfg.epochs {
            use std::io::Write;
            writeln!(
                log,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.3}",
                epoch,
                loss_p,
                loss_q,
                mean_utility,
                lr,
                start.elapsed().as_secs_f64()
            )?;
        }

        let next = epoch + 1;
        if next % train_cfg.checkpoint_interval == 0 || next == run_until {
            save_checkpoint(
                &make_checkpoint(model_cfg, &params, Some(&adam), next, train_cfg.seed),
                &checkpoint_path,
            )?;
        }
    }

    // Resume-at-end edge case: nothing ran but callers still need the file.
    if start_epoch >= run_until && !checkpoint_path.exists() {
        save_checkpoint(
            &make_checkpoint(model_cfg, &params, Some(&adam), start_epoch, train_cfg.seed),
            &checkpoint_path,
        )?;
    }

    Ok(TrainOutcome { checkpoint_path, log_path, final_epoch: run_until })
}

/// A model plus parameters restored from a checkpoint, ready for evaluation.
pub struct LoadedModel<F: Real> {
    pub model: TndpModel,
    pub params: ParamSet<F>,
}

impl<F: Real> LoadedModel<F> {
    pub fn from_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let ckpt = load_checkpoint::<F>(path)?;
        let (model, params) = restore_model(&ckpt)?;
        Ok(Self { model, params })
    }
}
