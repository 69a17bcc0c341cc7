//! Shared data model for experimental histories, model inputs, decision
//! spaces, and expected-utility computation.
//!
//! Histories are value-semantic snapshots: appending returns a new history and
//! never mutates the input, so rollout workers can share prefixes freely.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

/// Inline coordinate storage; covers every benchmark dimension without heap
/// allocation, so designs clone cheaply in hot rollout loops.
pub type Coordinates = SmallVec<[f64; 16]>;

/// Default Monte Carlo sample count for expected-utility estimates.
pub const DEFAULT_UTILITY_SAMPLES: usize = 256;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("design dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("outcome must be finite, got {0}")]
    NonFiniteOutcome(f64),
    #[error("predictive std must be strictly positive, got {0}")]
    NonPositiveStd(f64),
    #[error("misaligned predictions: decision space requires {expected}, got {got}")]
    MisalignedPredictions { expected: usize, got: usize },
    #[error("decision space is empty or degenerate: {0}")]
    EmptyDecisionSpace(String),
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("decision tag {tag} out of range for {n_decisions} decisions")]
    DecisionTagOutOfRange { tag: usize, n_decisions: usize },
}

/// A single experimental design ξ: covariate coordinates plus an optional
/// decision tag for tasks whose design space is covariates × decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub coordinates: Coordinates,
    pub decision_tag: Option<usize>,
}

impl Design {
    pub fn new(coordinates: impl Into<Coordinates>) -> Self {
        Self { coordinates: coordinates.into(), decision_tag: None }
    }

    pub fn with_tag(coordinates: impl Into<Coordinates>, tag: usize) -> Self {
        Self { coordinates: coordinates.into(), decision_tag: Some(tag) }
    }

    pub fn dim(&self) -> usize {
        self.coordinates.len()
    }
}

/// A scalar experimental outcome y. Always finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome(f64);

impl Outcome {
    pub fn new(value: f64) -> Result<Self, TaskError> {
        if !value.is_finite() {
            return Err(TaskError::NonFiniteOutcome(value));
        }
        Ok(Self(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Ordered experimental history h_{1:t}. The step count always equals the
/// number of (design, outcome) pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentHistory {
    pairs: Vec<(Design, Outcome)>,
}

impl ExperimentHistory {
    pub fn empty() -> Self {
        Self { pairs: Vec::new() }
    }

    pub fn from_pairs(pairs: Vec<(Design, Outcome)>) -> Result<Self, TaskError> {
        if let Some((first, _)) = pairs.first() {
            let dim = first.dim();
            for (d, _) in &pairs {
                if d.dim() != dim {
                    return Err(TaskError::DimensionMismatch { expected: dim, got: d.dim() });
                }
            }
        }
        Ok(Self { pairs })
    }

    pub fn step(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(Design, Outcome)] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Returns a new history with the pair appended; `self` is unmodified.
    pub fn with(&self, design: Design, outcome: Outcome) -> Result<Self, TaskError> {
        if let Some((first, _)) = self.pairs.first() {
            if first.dim() != design.dim() {
                return Err(TaskError::DimensionMismatch {
                    expected: first.dim(),
                    got: design.dim(),
                });
            }
        }
        let mut pairs = self.pairs.clone();
        pairs.push((design, outcome));
        Ok(Self { pairs })
    }
}

/// Appends one (design, outcome) pair, returning a fresh history.
pub fn append_history(
    history: &ExperimentHistory,
    design: Design,
    outcome: Outcome,
) -> Result<ExperimentHistory, TaskError> {
    history.with(design, outcome)
}

/// Global information GI = [t, γ]: the current step plus optional task
/// context (e.g. the test point the downstream decision targets).
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalInfo {
    pub step: usize,
    pub task_context: Vec<f64>,
}

impl GlobalInfo {
    pub fn new(step: usize, task_context: Vec<f64>) -> Self {
        Self { step, task_context }
    }
}

/// The four-part model input D = {context, prediction set, query set, GI}.
#[derive(Debug, Clone)]
pub struct TndpInput {
    pub context: ExperimentHistory,
    pub prediction_designs: Vec<Design>,
    pub query_designs: Vec<Design>,
    pub global_info: GlobalInfo,
}

/// Per-design Gaussian predictive emitted by the prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: f64,
    pub std: f64,
}

impl GaussianPrediction {
    pub fn new(mean: f64, std: f64) -> Result<Self, TaskError> {
        if !(std > 0.0) {
            return Err(TaskError::NonPositiveStd(std));
        }
        Ok(Self { mean, std })
    }
}

/// The downstream decision space a task exposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DecisionSpace {
    /// The decision is itself a predictive distribution for one target design.
    DistributionOutput,
    /// One of `n_arms` discrete actions; utility is the indicator of picking
    /// the arm whose outcome is largest.
    DiscreteArm { n_arms: usize },
    /// A set of k distinct candidates; utility is the sum of their outcomes.
    TopKSubset { k: usize, n_candidates: usize },
}

impl DecisionSpace {
    /// Number of predictions a decision over this space reads.
    pub fn required_predictions(&self) -> usize {
        match self {
            DecisionSpace::DistributionOutput => 1,
            DecisionSpace::DiscreteArm { n_arms } => *n_arms,
            DecisionSpace::TopKSubset { n_candidates, .. } => *n_candidates,
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        match self {
            DecisionSpace::DistributionOutput => Ok(()),
            DecisionSpace::DiscreteArm { n_arms } => {
                if *n_arms == 0 {
                    Err(TaskError::EmptyDecisionSpace("zero arms".into()))
                } else {
                    Ok(())
                }
            }
            DecisionSpace::TopKSubset { k, n_candidates } => {
                if *k == 0 || *n_candidates == 0 {
                    Err(TaskError::EmptyDecisionSpace("zero candidates or k".into()))
                } else if k > n_candidates {
                    Err(TaskError::EmptyDecisionSpace(format!(
                        "k={k} exceeds {n_candidates} candidates"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// A concrete decision drawn from a [`DecisionSpace`]. Arm and subset indices
/// refer to positions in the prediction list the decision was computed from.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Gaussian(GaussianPrediction),
    Arm(usize),
    Subset(Vec<usize>),
}

/// A decision problem instance: the designs whose predictions the decision
/// reads, the space to decide over, and per-design labels carrying task
/// meaning (arm ids, table row ids).
#[derive(Debug, Clone)]
pub struct DecisionProblem {
    pub designs: Vec<Design>,
    pub space: DecisionSpace,
    pub labels: Vec<usize>,
}

/// Expected log-density of a Gaussian output decision `a` under the
/// predictive `q`: E_{y~q}[log a(y)].
fn expected_log_density(q: &GaussianPrediction, a: &GaussianPrediction) -> f64 {
    let var_a = a.std * a.std;
    let var_q = q.std * q.std;
    let diff = q.mean - a.mean;
    -0.5 * (2.0 * std::f64::consts::PI * var_a).ln() - (var_q + diff * diff) / (2.0 * var_a)
}

/// Shared-sample estimate of the probability that each arm attains the
/// maximum outcome. Common random numbers across arms; the vector sums to 1.
fn arm_optimality_probs(
    preds: &[GaussianPrediction],
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Vec<f64> {
    let n_arms = preds.len();
    let mut counts = vec![0usize; n_arms];
    for _ in 0..n_samples {
        let mut best = f64::NEG_INFINITY;
        let mut best_arm = 0usize;
        for (j, p) in preds.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            let y = p.mean + p.std * z;
            if y > best {
                best = y;
                best_arm = j;
            }
        }
        counts[best_arm] += 1;
    }
    counts.iter().map(|&c| c as f64 / n_samples as f64).collect()
}

fn validate_preds(preds: &[GaussianPrediction], space: &DecisionSpace) -> Result<(), TaskError> {
    space.validate()?;
    let expected = space.required_predictions();
    if preds.len() != expected {
        return Err(TaskError::MisalignedPredictions { expected, got: preds.len() });
    }
    Ok(())
}

/// Estimates E_q[u(y_Ξ, a)] for a decision under the predictive belief.
///
/// Distribution-output and top-k use closed forms; discrete arms use a
/// shared-sample Monte Carlo estimate of the optimality probability.
pub fn expected_utility(
    preds: &[GaussianPrediction],
    space: &DecisionSpace,
    decision: &Decision,
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<f64, TaskError> {
    validate_preds(preds, space)?;
    match (space, decision) {
        (DecisionSpace::DistributionOutput, Decision::Gaussian(a)) => {
            Ok(expected_log_density(&preds[0], a))
        }
        (DecisionSpace::DiscreteArm { n_arms }, Decision::Arm(a)) => {
            if *a >= *n_arms {
                return Err(TaskError::InvalidDecision(format!("arm {a} of {n_arms}")));
            }
            Ok(arm_optimality_probs(preds, n_samples, rng)[*a])
        }
        (DecisionSpace::TopKSubset { k, n_candidates }, Decision::Subset(idx)) => {
            if idx.len() != *k {
                return Err(TaskError::InvalidDecision(format!(
                    "subset size {} != k={k}",
                    idx.len()
                )));
            }
            let mut seen = vec![false; *n_candidates];
            let mut total = 0.0;
            for &i in idx {
                if i >= *n_candidates || seen[i] {
                    return Err(TaskError::InvalidDecision(format!(
                        "candidate index {i} out of range or repeated"
                    )));
                }
                seen[i] = true;
                total += preds[i].mean;
            }
            Ok(total)
        }
        _ => Err(TaskError::InvalidDecision("decision kind does not match space".into())),
    }
}

/// Returns the expected-utility-maximizing decision and its value.
/// Ties resolve to the lowest index; deterministic given a fixed rng seed.
pub fn optimal_decision(
    preds: &[GaussianPrediction],
    space: &DecisionSpace,
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<(Decision, f64), TaskError> {
    validate_preds(preds, space)?;
    match space {
        DecisionSpace::DistributionOutput => {
            let p = preds[0];
            let value = -0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * p.std * p.std).ln();
            Ok((Decision::Gaussian(p), value))
        }
        DecisionSpace::DiscreteArm { .. } => {
            let probs = arm_optimality_probs(preds, n_samples, rng);
            let mut best = 0usize;
            for (j, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = j;
                }
            }
            Ok((Decision::Arm(best), probs[best]))
        }
        DecisionSpace::TopKSubset { k, .. } => {
            let mut order: Vec<usize> = (0..preds.len()).collect();
            order.sort_by(|&a, &b| {
                preds[b]
                    .mean
                    .partial_cmp(&preds[a].mean)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let chosen: Vec<usize> = order[..*k].to_vec();
            let value: f64 = chosen.iter().map(|&i| preds[i].mean).sum();
            Ok((Decision::Subset(chosen), value))
        }
    }
}

/// A task family: latent-function sampler, outcome likelihood, candidate
/// designs, decision space, and utility evaluators. One ground-truth draw per
/// environment instance; interior mutability only for the outcome rng path.
pub trait TaskEnvironment: Send + Sync {
    /// Covariate dimension of designs.
    fn d_x(&self) -> usize;
    /// Query budget T.
    fn horizon(&self) -> usize;
    /// Number of discrete decisions N_d, when the design space carries tags.
    fn n_decisions(&self) -> Option<usize> {
        None
    }
    fn decision_space(&self) -> DecisionSpace;
    /// Task context γ (empty when the task has none).
    fn global_context(&self) -> Vec<f64>;
    /// Observed pairs the episode starts from (empty for most tasks).
    fn initial_history(&self) -> ExperimentHistory;
    /// The finite candidate pool, or None for continuous design spaces.
    fn query_pool(&self) -> Option<Vec<Design>>;
    /// Draws designs from the task's design distribution.
    fn sample_designs(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Design>;
    /// The decision-relevant designs, space, and labels at the current step.
    fn decision_problem(&self, history: &ExperimentHistory, rng: &mut dyn RngCore)
        -> DecisionProblem;
    /// Samples an outcome y ~ p(y|ξ, θ) from the environment's ground truth.
    fn observe(&self, design: &Design, rng: &mut dyn RngCore) -> Outcome;
    /// Ground-truth utility of a decision; evaluation only, deterministic.
    fn true_utility(&self, problem: &DecisionProblem, decision: &Decision) -> f64;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn g(mean: f64, std: f64) -> GaussianPrediction {
        GaussianPrediction::new(mean, std).unwrap()
    }

    #[test]
    fn append_to_empty_history() {
        let h = ExperimentHistory::empty();
        let h1 = append_history(&h, Design::new(vec![0.3]), Outcome::new(1.0).unwrap()).unwrap();
        assert_eq!(h1.step(), 1);
        assert_eq!(h.step(), 0);
    }

    #[test]
    fn append_preserves_prefix() {
        let mut h = ExperimentHistory::empty();
        for i in 0..3 {
            h = h
                .with(Design::new(vec![i as f64]), Outcome::new(i as f64).unwrap())
                .unwrap();
        }
        let h4 = append_history(&h, Design::new(vec![9.0]), Outcome::new(9.0).unwrap()).unwrap();
        assert_eq!(h4.step(), 4);
        assert_eq!(h.step(), 3);
        for i in 0..3 {
            assert_eq!(h4.pairs()[i], h.pairs()[i]);
        }
    }

    #[test]
    fn append_wrong_dimension_errors() {
        let h = ExperimentHistory::empty()
            .with(Design::new(vec![0.0, 1.0]), Outcome::new(0.0).unwrap())
            .unwrap();
        let err = append_history(&h, Design::new(vec![0.0]), Outcome::new(0.0).unwrap());
        assert!(matches!(err, Err(TaskError::DimensionMismatch { expected: 2, got: 1 })));
    }

    #[test]
    fn outcome_rejects_non_finite() {
        assert!(Outcome::new(f64::NAN).is_err());
        assert!(Outcome::new(f64::INFINITY).is_err());
        assert!(Outcome::new(-3.5).is_ok());
    }

    #[test]
    fn gaussian_prediction_requires_positive_std() {
        assert!(GaussianPrediction::new(0.0, 0.0).is_err());
        assert!(GaussianPrediction::new(0.0, -1.0).is_err());
        assert!(GaussianPrediction::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn topk_expected_utility_is_sum_of_means() {
        let preds = [g(0.3, 0.5), g(0.7, 2.0)];
        let space = DecisionSpace::TopKSubset { k: 1, n_candidates: 2 };
        let mut r = rng(0);
        let u = expected_utility(&preds, &space, &Decision::Subset(vec![1]), 16, &mut r).unwrap();
        assert!((u - 0.7).abs() < 1e-12);
    }

    #[test]
    fn symmetric_arms_split_probability() {
        let preds = [g(0.0, 1.0), g(0.0, 1.0)];
        let space = DecisionSpace::DiscreteArm { n_arms: 2 };
        let n = 4096;
        let mut r = rng(7);
        let u = expected_utility(&preds, &space, &Decision::Arm(0), n, &mut r).unwrap();
        assert!((u - 0.5).abs() < 3.0 / (n as f64).sqrt(), "got {u}");
    }

    #[test]
    fn separated_arms_give_near_certain_choice() {
        // Oracle: P(y1 > y2) = Phi((1 - (-1)) / sqrt(0.1^2 + 0.1^2)) = Phi(14.14...),
        // which is 1 to far beyond 1e-6.
        let preds = [g(1.0, 0.1), g(-1.0, 0.1)];
        let space = DecisionSpace::DiscreteArm { n_arms: 2 };
        let mut r = rng(3);
        let u = expected_utility(&preds, &space, &Decision::Arm(0), 4096, &mut r).unwrap();
        assert!((u - 1.0).abs() < 1e-6, "got {u}");
    }

    #[test]
    fn optimal_arm_is_argmax_mean_for_equal_stds() {
        let preds = [g(0.1, 0.3), g(0.9, 0.3), g(0.4, 0.3), g(0.2, 0.3)];
        let space = DecisionSpace::DiscreteArm { n_arms: 4 };
        let mut r = rng(11);
        let (d, _) = optimal_decision(&preds, &space, 2048, &mut r).unwrap();
        assert_eq!(d, Decision::Arm(1));
    }

    #[test]
    fn topk_optimal_is_k_largest_means() {
        let preds = [g(5.0, 1.0), g(1.0, 1.0), g(4.0, 1.0), g(2.0, 1.0), g(3.0, 1.0)];
        let space = DecisionSpace::TopKSubset { k: 3, n_candidates: 5 };
        let mut r = rng(0);
        let (d, v) = optimal_decision(&preds, &space, 16, &mut r).unwrap();
        match d {
            Decision::Subset(mut idx) => {
                idx.sort_unstable();
                assert_eq!(idx, vec![0, 2, 4]);
            }
            _ => panic!("wrong decision kind"),
        }
        assert!((v - 12.0).abs() < 1e-12);
    }

    #[test]
    fn distribution_output_value_is_neg_entropy() {
        // max over Gaussian decisions of E_q[log a(y)] is attained at a = q
        // with value -0.5 log(2 pi e sigma^2); the grid-search oracle lives in
        // the integration tests.
        let preds = [g(0.3, 0.5)];
        let space = DecisionSpace::DistributionOutput;
        let mut r = rng(0);
        let (d, v) = optimal_decision(&preds, &space, 16, &mut r).unwrap();
        assert_eq!(d, Decision::Gaussian(preds[0]));
        let expect = -0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * 0.25).ln();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn arm_probabilities_sum_to_one() {
        let preds = [g(0.1, 0.4), g(-0.2, 1.3), g(0.5, 0.2)];
        let mut r = rng(5);
        let probs = arm_optimality_probs(&preds, 512, &mut r);
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_decision_space_errors() {
        let space = DecisionSpace::DiscreteArm { n_arms: 0 };
        let mut r = rng(0);
        assert!(optimal_decision(&[], &space, 16, &mut r).is_err());
    }

    #[test]
    fn misaligned_predictions_error() {
        let preds = [g(0.0, 1.0)];
        let space = DecisionSpace::DiscreteArm { n_arms: 2 };
        let mut r = rng(0);
        let err = expected_utility(&preds, &space, &Decision::Arm(0), 16, &mut r);
        assert!(matches!(err, Err(TaskError::MisalignedPredictions { expected: 2, got: 1 })));
    }
}
