//! The three benchmark task families and tabular-benchmark ingestion.
//!
//! Each environment realizes one ground-truth draw at construction (latent
//! GP functions realized lazily through an env-owned rng, so paired
//! evaluations of different methods see the same world). Caller rngs supply
//! only observation noise and candidate sampling.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{sample_task_params, LazyGpSampler, SeKernelParams};
use crate::task::{
    Decision, DecisionProblem, DecisionSpace, Design, ExperimentHistory, GaussianPrediction,
    GlobalInfo, Outcome, TaskEnvironment, TndpInput,
};
use crate::train::EnvFactory;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid benchmark: {0}")]
    Invalid(String),
}

pub const TOY_NOISE_STD: f64 = 0.1;
pub const DECISION_AL_NOISE_STD: f64 = 0.1;
pub const DECISION_AL_ARMS: usize = 4;
pub const DECISION_AL_POOL: usize = 100;
pub const TOPK_K: usize = 3;
pub const TOPK_HORIZON: usize = 50;
pub const TOPK_INITIAL_CONTEXT: usize = 5;
pub const TOPK_PRED_SUBSAMPLE: usize = 256;

fn expected_log_density_under_truth(truth_mean: f64, truth_var: f64, a: &GaussianPrediction) -> f64 {
    let var_a = a.std * a.std;
    let diff = truth_mean - a.mean;
    -0.5 * (2.0 * std::f64::consts::PI * var_a).ln() - (truth_var + diff * diff) / (2.0 * var_a)
}

// --- Toy 1-D regression ------------------------------------------------------

/// 1-D regression at a random test point x*: the decision is the predictive
/// distribution reported there, utility its expected log-density under the
/// true outcome distribution.
pub struct ToyEnv {
    kernel: SeKernelParams,
    x_star: f64,
    noise_std: f64,
    latent: Mutex<(LazyGpSampler, ChaCha8Rng)>,
    f_star: f64,
    horizon: usize,
}

impl ToyEnv {
    pub fn new(kernel: SeKernelParams, x_star: f64, noise_std: f64, latent_seed: u64) -> Self {
        let mut sampler = LazyGpSampler::new(kernel, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(latent_seed);
        let f_star = sampler.value_at(&[x_star], &mut rng);
        Self {
            kernel,
            x_star,
            noise_std,
            latent: Mutex::new((sampler, rng)),
            f_star,
            horizon: 1,
        }
    }

    pub fn x_star(&self) -> f64 {
        self.x_star
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    pub fn kernel(&self) -> SeKernelParams {
        self.kernel
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Ground-truth latent value, realized on first access.
    pub fn latent_at(&self, x: f64) -> f64 {
        let mut guard = self.latent.lock().unwrap();
        let (sampler, rng) = &mut *guard;
        sampler.value_at(&[x], rng)
    }
}

impl TaskEnvironment for ToyEnv {
    fn d_x(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn decision_space(&self) -> DecisionSpace {
        DecisionSpace::DistributionOutput
    }

    fn global_context(&self) -> Vec<f64> {
        vec![self.x_star]
    }

    fn initial_history(&self) -> ExperimentHistory {
        ExperimentHistory::empty()
    }

    fn query_pool(&self) -> Option<Vec<Design>> {
        None
    }

    fn sample_designs(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Design> {
        (0..n).map(|_| Design::new(vec![rng.random_range(-1.0..1.0)])).collect()
    }

    fn decision_problem(
        &self,
        _history: &ExperimentHistory,
        _rng: &mut dyn RngCore,
    ) -> DecisionProblem {
        DecisionProblem {
            designs: vec![Design::new(vec![self.x_star])],
            space: DecisionSpace::DistributionOutput,
            labels: vec![0],
        }
    }

    fn observe(&self, design: &Design, rng: &mut dyn RngCore) -> Outcome {
        let f = self.latent_at(design.coordinates[0]);
        let eps: f64 = rng.sample(StandardNormal);
        Outcome::new(f + self.noise_std * eps).expect("finite outcome")
    }

    fn true_utility(&self, _problem: &DecisionProblem, decision: &Decision) -> f64 {
        match decision {
            Decision::Gaussian(g) => expected_log_density_under_truth(
                self.f_star,
                self.noise_std * self.noise_std,
                g,
            ),
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Draws fresh toy environments: kernel hyperparameters from the documented
/// ranges, x* uniform on the design domain.
pub struct ToyFactory {
    pub noise_std: f64,
}

impl Default for ToyFactory {
    fn default() -> Self {
        Self { noise_std: TOY_NOISE_STD }
    }
}

impl EnvFactory for ToyFactory {
    fn sample_env(&self, rng: &mut ChaCha8Rng) -> Box<dyn TaskEnvironment> {
        let kernel = sample_task_params(rng);
        let x_star = rng.random_range(-1.0..1.0);
        let latent_seed = rng.next_u64();
        Box::new(ToyEnv::new(kernel, x_star, self.noise_std, latent_seed))
    }
}

// --- Decision-aware active learning ------------------------------------------

/// Finite pool of (covariate, decision) designs with independent GP ground
/// truths per decision; utility is the indicator of recommending the arm
/// whose noise-free outcome at x* is largest.
pub struct DecisionAlEnv {
    pool: Vec<Design>,
    x_star: f64,
    n_arms: usize,
    noise_std: f64,
    horizon: usize,
    latents: Vec<Mutex<(LazyGpSampler, ChaCha8Rng)>>,
    a_star: usize,
    f_star: Vec<f64>,
}

impl DecisionAlEnv {
    pub fn new(
        pool_size: usize,
        n_arms: usize,
        horizon: usize,
        noise_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // One independent GP draw per arm, each with its own hyperparameters.
        let kernels: Vec<SeKernelParams> = (0..n_arms).map(|_| sample_task_params(rng)).collect();
        let x_star: f64 = rng.sample(StandardNormal);
        let pool: Vec<Design> = (0..pool_size)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                let arm = rng.random_range(0..n_arms);
                Design::with_tag(vec![x], arm)
            })
            .collect();

        let mut latents = Vec::with_capacity(n_arms);
        let mut f_star = Vec::with_capacity(n_arms);
        for kernel in &kernels {
            let mut sampler = LazyGpSampler::new(*kernel, 1);
            let mut arm_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            // The test point is realized first; everything else lazily, so
            // construction stays cheap for large pools. Methods evaluated
            // against one shared env instance see one consistent draw.
            f_star.push(sampler.value_at(&[x_star], &mut arm_rng));
            latents.push(Mutex::new((sampler, arm_rng)));
        }
        let a_star = f_star
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();

        Self { pool, x_star, n_arms, noise_std, horizon, latents, a_star, f_star }
    }

    pub fn x_star(&self) -> f64 {
        self.x_star
    }

    pub fn a_star(&self) -> usize {
        self.a_star
    }

    pub fn f_star(&self) -> &[f64] {
        &self.f_star
    }

    pub fn latent_at(&self, arm: usize, x: f64) -> f64 {
        let mut guard = self.latents[arm].lock().unwrap();
        let (sampler, rng) = &mut *guard;
        sampler.value_at(&[x], rng)
    }
}

impl TaskEnvironment for DecisionAlEnv {
    fn d_x(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn n_decisions(&self) -> Option<usize> {
        Some(self.n_arms)
    }

    fn decision_space(&self) -> DecisionSpace {
        DecisionSpace::DiscreteArm { n_arms: self.n_arms }
    }

    fn global_context(&self) -> Vec<f64> {
        vec![self.x_star]
    }

    fn initial_history(&self) -> ExperimentHistory {
        ExperimentHistory::empty()
    }

    fn query_pool(&self) -> Option<Vec<Design>> {
        Some(self.pool.clone())
    }

    fn sample_designs(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Design> {
        (0..n)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                let arm = rng.random_range(0..self.n_arms);
                Design::with_tag(vec![x], arm)
            })
            .collect()
    }

    fn decision_problem(
        &self,
        _history: &ExperimentHistory,
        _rng: &mut dyn RngCore,
    ) -> DecisionProblem {
        DecisionProblem {
            designs: (0..self.n_arms)
                .map(|a| Design::with_tag(vec![self.x_star], a))
                .collect(),
            space: DecisionSpace::DiscreteArm { n_arms: self.n_arms },
            labels: (0..self.n_arms).collect(),
        }
    }

    fn observe(&self, design: &Design, rng: &mut dyn RngCore) -> Outcome {
        let arm = design.decision_tag.expect("decision-AL designs carry an arm tag");
        let f = self.latent_at(arm, design.coordinates[0]);
        let eps: f64 = rng.sample(StandardNormal);
        Outcome::new(f + self.noise_std * eps).expect("finite outcome")
    }

    fn true_utility(&self, problem: &DecisionProblem, decision: &Decision) -> f64 {
        match decision {
            Decision::Arm(i) => {
                if problem.labels[*i] == self.a_star {
                    1.0
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    }
}

pub struct DecisionAlFactory {
    pub pool_size: usize,
    pub n_arms: usize,
    pub horizon: usize,
    pub noise_std: f64,
}

impl Default for DecisionAlFactory {
    fn default() -> Self {
        Self {
            pool_size: DECISION_AL_POOL,
            n_arms: DECISION_AL_ARMS,
            horizon: 10,
            noise_std: DECISION_AL_NOISE_STD,
        }
    }
}

impl EnvFactory for DecisionAlFactory {
    fn sample_env(&self, rng: &mut ChaCha8Rng) -> Box<dyn TaskEnvironment> {
        Box::new(DecisionAlEnv::new(
            self.pool_size,
            self.n_arms,
            self.horizon,
            self.noise_std,
            rng,
        ))
    }
}

// --- Tabular benchmarks and the top-k task -----------------------------------

/// A finite table of (configuration, outcome) rows standing in for an HPO
/// search space.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularBenchmark {
    pub name: String,
    pub d_x: usize,
    pub rows: Vec<Vec<f64>>,
    pub outcomes: Vec<f64>,
    /// Predefined initial-context index lists for test splits.
    pub initial_contexts: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BenchmarkMeta {
    name: String,
    d_x: usize,
    initial_contexts: Vec<Vec<usize>>,
}

impl TabularBenchmark {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    fn validate(&self) -> Result<(), EnvError> {
        if self.rows.len() != self.outcomes.len() {
            return Err(EnvError::Invalid("rows and outcomes must align".into()));
        }
        let mut seen = HashMap::new();
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.d_x {
                return Err(EnvError::Invalid(format!("row {i} has wrong dimension")));
            }
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            if let Some(j) = seen.insert(key, i) {
                return Err(EnvError::Invalid(format!(
                    "duplicate configuration rows {j} and {i}"
                )));
            }
            if !self.outcomes[i].is_finite() {
                return Err(EnvError::Invalid(format!("non-finite outcome at row {i}")));
            }
        }
        for list in &self.initial_contexts {
            for &idx in list {
                if idx >= self.rows.len() {
                    return Err(EnvError::Invalid(format!(
                        "initial-context index {idx} out of range"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// Reads a benchmark from its data file (header `x1,…,xd,y`) plus the
/// `.meta.json` sidecar. Errors name the offending line.
pub fn load_tabular_benchmark(path: &Path) -> Result<TabularBenchmark, EnvError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| EnvError::Parse { line: 1, message: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols.last() != Some(&"y") {
        return Err(EnvError::Parse {
            line: 1,
            message: format!("header must be x1,…,xd,y; got {header:?}"),
        });
    }
    let d_x = cols.len() - 1;
    for (i, c) in cols[..d_x].iter().enumerate() {
        if *c != format!("x{}", i + 1) {
            return Err(EnvError::Parse {
                line: 1,
                message: format!("expected column x{}, got {c:?}", i + 1),
            });
        }
    }

    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for (lineno0, line) in lines {
        let lineno = lineno0 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d_x + 1 {
            return Err(EnvError::Parse {
                line: lineno,
                message: format!("expected {} fields, got {}", d_x + 1, fields.len()),
            });
        }
        let mut row = Vec::with_capacity(d_x);
        for f in &fields[..d_x] {
            let v: f64 = f.trim().parse().map_err(|e| EnvError::Parse {
                line: lineno,
                message: format!("bad number {f:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(EnvError::Parse {
                    line: lineno,
                    message: format!("non-finite coordinate {f:?}"),
                });
            }
            row.push(v);
        }
        let y: f64 = fields[d_x].trim().parse().map_err(|e| EnvError::Parse {
            line: lineno,
            message: format!("bad outcome {:?}: {e}", fields[d_x]),
        })?;
        if !y.is_finite() {
            return Err(EnvError::Parse {
                line: lineno,
                message: format!("non-finite outcome {:?}", fields[d_x]),
            });
        }
        rows.push(row);
        outcomes.push(y);
    }

    let meta_file = meta_path(path);
    let (name, initial_contexts) = if meta_file.exists() {
        let meta: BenchmarkMeta = serde_json::from_str(&std::fs::read_to_string(&meta_file)?)
            .map_err(|e| EnvError::Invalid(format!("bad sidecar: {e}")))?;
        if meta.d_x != d_x {
            return Err(EnvError::Invalid(format!(
                "sidecar d_x {} does not match file d_x {d_x}",
                meta.d_x
            )));
        }
        (meta.name, meta.initial_contexts)
    } else {
        (
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            Vec::new(),
        )
    };

    let bench = TabularBenchmark { name, d_x, rows, outcomes, initial_contexts };
    bench.validate()?;
    Ok(bench)
}

/// Writes the data file and sidecar; decimal serialization keeps 17
/// significant digits so a round trip is bit-exact.
pub fn save_tabular_benchmark(bench: &TabularBenchmark, path: &Path) -> Result<(), EnvError> {
    bench.validate()?;
    let mut out = String::new();
    for i in 0..bench.d_x {
        out.push_str(&format!("x{},", i + 1));
    }
    out.push_str("y\n");
    for (row, y) in bench.rows.iter().zip(&bench.outcomes) {
        for v in row {
            out.push_str(&format!("{v:.16e},"));
        }
        out.push_str(&format!("{y:.16e}\n"));
    }
    std::fs::write(path, out)?;
    let meta = BenchmarkMeta {
        name: bench.name.clone(),
        d_x: bench.d_x,
        initial_contexts: bench.initial_contexts.clone(),
    };
    std::fs::write(meta_path(path), serde_json::to_string_pretty(&meta).unwrap())?;
    Ok(())
}

/// Generates a synthetic benchmark: uniform configurations in [0,1]^d with a
/// GP function draw squashed through the logistic function. Writes both the
/// data file and its sidecar when `out_path` is given.
pub fn generate_synthetic_benchmark(
    name: &str,
    d_x: usize,
    n_rows: usize,
    n_initial_lists: usize,
    rng: &mut ChaCha8Rng,
    out_path: Option<&Path>,
) -> Result<TabularBenchmark, EnvError> {
    let kernel = sample_task_params(rng);
    let mut sampler = LazyGpSampler::new(kernel, d_x);
    let mut rows = Vec::with_capacity(n_rows);
    let mut outcomes = Vec::with_capacity(n_rows);
    let mut latent_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    for _ in 0..n_rows {
        let row: Vec<f64> = (0..d_x).map(|_| rng.random_range(0.0..1.0)).collect();
        let f = sampler.value_at(&row, &mut latent_rng);
        // Logistic squash scaled so draws do not saturate.
        let y = 1.0 / (1.0 + (-2.0 * f).exp());
        rows.push(row);
        outcomes.push(y);
    }
    let initial_contexts = (0..n_initial_lists)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n_rows).collect();
            for i in 0..TOPK_INITIAL_CONTEXT.min(n_rows) {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
            }
            idx[..TOPK_INITIAL_CONTEXT.min(n_rows)].to_vec()
        })
        .collect();
    let bench = TabularBenchmark {
        name: name.to_string(),
        d_x,
        rows,
        outcomes,
        initial_contexts,
    };
    bench.validate()?;
    if let Some(path) = out_path {
        save_tabular_benchmark(&bench, path)?;
    }
    Ok(bench)
}

/// Top-k selection over a finite benchmark table: query T rows, then pick k
/// distinct rows maximizing the summed true outcomes.
pub struct TopKEnv {
    benchmark: Arc<TabularBenchmark>,
    initial_idx: Vec<usize>,
    k: usize,
    horizon: usize,
    pred_subsample: usize,
    row_index: HashMap<Vec<u64>, usize>,
}

impl TopKEnv {
    pub fn new(
        benchmark: Arc<TabularBenchmark>,
        initial_idx: Vec<usize>,
        k: usize,
        horizon: usize,
        pred_subsample: usize,
    ) -> Result<Self, EnvError> {
        let needed = k + horizon + initial_idx.len();
        if benchmark.n_rows() < needed {
            return Err(EnvError::Invalid(format!(
                "table has {} rows; need at least {needed}",
                benchmark.n_rows()
            )));
        }
        let row_index = benchmark
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| (row.iter().map(|v| v.to_bits()).collect(), i))
            .collect();
        Ok(Self { benchmark, initial_idx, k, horizon, pred_subsample, row_index })
    }

    pub fn benchmark(&self) -> &TabularBenchmark {
        &self.benchmark
    }

    pub fn initial_indices(&self) -> &[usize] {
        &self.initial_idx
    }

    fn design_for_row(&self, row: usize) -> Design {
        Design::new(smallvec::SmallVec::from_slice(&self.benchmark.rows[row]))
    }

    fn row_for_design(&self, design: &Design) -> usize {
        let key: Vec<u64> = design.coordinates.iter().map(|v| v.to_bits()).collect();
        *self
            .row_index
            .get(&key)
            .expect("top-k designs must be benchmark rows")
    }

    /// Sum of the k largest table outcomes; no strategy can do better.
    pub fn oracle_upper_bound(&self) -> f64 {
        let mut ys = self.benchmark.outcomes.clone();
        ys.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ys[..self.k].iter().sum()
    }
}

impl TaskEnvironment for TopKEnv {
    fn d_x(&self) -> usize {
        self.benchmark.d_x
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn decision_space(&self) -> DecisionSpace {
        DecisionSpace::TopKSubset { k: self.k, n_candidates: self.pred_subsample }
    }

    fn global_context(&self) -> Vec<f64> {
        Vec::new()
    }

    fn initial_history(&self) -> ExperimentHistory {
        let mut h = ExperimentHistory::empty();
        for &i in &self.initial_idx {
            h = h
                .with(
                    self.design_for_row(i),
                    Outcome::new(self.benchmark.outcomes[i]).unwrap(),
                )
                .unwrap();
        }
        h
    }

    fn query_pool(&self) -> Option<Vec<Design>> {
        Some(
            (0..self.benchmark.n_rows())
                .filter(|i| !self.initial_idx.contains(i))
                .map(|i| self.design_for_row(i))
                .collect(),
        )
    }

    fn sample_designs(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Design> {
        (0..n)
            .map(|_| self.design_for_row(rng.random_range(0..self.benchmark.n_rows())))
            .collect()
    }

    /// The decision reads predictions over a row subsample that always
    /// contains the already-queried rows, capped at `pred_subsample`.
    fn decision_problem(
        &self,
        history: &ExperimentHistory,
        rng: &mut dyn RngCore,
    ) -> DecisionProblem {
        let n = self.benchmark.n_rows();
        let cap = self.pred_subsample.min(n);
        let mut chosen: Vec<usize> = Vec::with_capacity(cap);
        let mut in_set = vec![false; n];
        for (d, _) in history.pairs() {
            let row = self.row_for_design(d);
            if !in_set[row] {
                in_set[row] = true;
                chosen.push(row);
            }
        }
        while chosen.len() < cap {
            let row = rng.random_range(0..n);
            if !in_set[row] {
                in_set[row] = true;
                chosen.push(row);
            }
        }
        DecisionProblem {
            designs: chosen.iter().map(|&r| self.design_for_row(r)).collect(),
            space: DecisionSpace::TopKSubset { k: self.k, n_candidates: chosen.len() },
            labels: chosen,
        }
    }

    fn observe(&self, design: &Design, _rng: &mut dyn RngCore) -> Outcome {
        let row = self.row_for_design(design);
        Outcome::new(self.benchmark.outcomes[row]).unwrap()
    }

    fn true_utility(&self, problem: &DecisionProblem, decision: &Decision) -> f64 {
        match decision {
            Decision::Subset(idx) => idx
                .iter()
                .map(|&i| self.benchmark.outcomes[problem.labels[i]])
                .sum(),
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Spawns top-k episodes over one benchmark table: the initial context comes
/// from the table's predefined index lists when present, otherwise it is
/// drawn uniformly from the episode seed.
pub struct TopKFactory {
    pub benchmark: Arc<TabularBenchmark>,
    pub k: usize,
    pub horizon: usize,
    pub n_initial: usize,
    pub pred_subsample: usize,
}

impl TopKFactory {
    pub fn new(benchmark: Arc<TabularBenchmark>) -> Self {
        Self {
            benchmark,
            k: TOPK_K,
            horizon: TOPK_HORIZON,
            n_initial: TOPK_INITIAL_CONTEXT,
            pred_subsample: TOPK_PRED_SUBSAMPLE,
        }
    }
}

impl EnvFactory for TopKFactory {
    fn sample_env(&self, rng: &mut ChaCha8Rng) -> Box<dyn TaskEnvironment> {
        let initial = if self.benchmark.initial_contexts.is_empty() {
            let n = self.benchmark.n_rows();
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..self.n_initial.min(n) {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
            }
            idx[..self.n_initial.min(n)].to_vec()
        } else {
            let pick = rng.random_range(0..self.benchmark.initial_contexts.len());
            self.benchmark.initial_contexts[pick].clone()
        };
        Box::new(
            TopKEnv::new(
                Arc::clone(&self.benchmark),
                initial,
                self.k,
                self.horizon,
                self.pred_subsample,
            )
            .expect("factory benchmark large enough"),
        )
    }
}

/// Builds the model input for one deployment step; shared by evaluation and
/// the command-line paths.
pub fn deployment_input(
    env: &dyn TaskEnvironment,
    history: &ExperimentHistory,
    prediction_designs: Vec<Design>,
    query_designs: Vec<Design>,
) -> TndpInput {
    TndpInput {
        context: history.clone(),
        prediction_designs,
        query_designs,
        global_info: GlobalInfo::new(history.step(), env.global_context()),
    }
}
