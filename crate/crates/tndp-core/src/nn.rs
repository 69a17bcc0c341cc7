//! Minimal neural-network building blocks with hand-written backward passes.
//!
//! Everything is generic over the float type: f32 keeps training cheap on
//! CPU, f64 is used by the finite-difference gradient checks. Parameters live
//! in a flat [`ParamSet`]; layers hold indices into it, so gradients across
//! parallel episode workers can be reduced deterministically.

use ndarray::{Array1, Array2};
use rand::{Rng, RngCore};

/// Scalar type the network computes in.
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const TAG: u8;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn to_bits_u64(self) -> u64;
    fn from_bits_u64(bits: u64) -> Self;
}

impl Real for f32 {
    const TAG: u8 = 4;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
    fn from_bits_u64(bits: u64) -> Self {
        f32::from_bits(bits as u32)
    }
}

impl Real for f64 {
    const TAG: u8 = 8;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
    fn from_bits_u64(bits: u64) -> Self {
        f64::from_bits(bits)
    }
}

pub fn c<F: Real>(x: f64) -> F {
    F::from_f64(x)
}

/// Identifier of one parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Flat registry of parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamSet<F: Real> {
    tensors: Vec<Array2<F>>,
    names: Vec<String>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self { tensors: Vec::new(), names: Vec::new() }
    }

    pub fn alloc(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        self.tensors.push(value);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> &[Array2<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.tensors
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient accumulator aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Grads<F: Real> {
    tensors: Vec<Array2<F>>,
}

impl<F: Real> Grads<F> {
    pub fn zeros_like(params: &ParamSet<F>) -> Self {
        Self {
            tensors: params
                .tensors()
                .iter()
                .map(|t| Array2::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Array2<F>] {
        &self.tensors
    }

    /// Element-wise accumulate; used for the deterministic batch reduction.
    pub fn add_assign(&mut self, other: &Grads<F>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in self.tensors.iter_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }
}

/// Uniform fan-in initialization, U(−1/√fan_in, 1/√fan_in).
pub fn fan_in_init<F: Real>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut dyn RngCore,
) -> Array2<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| c(rng.random_range(-bound..bound)))
}

/// Fully connected layer computing x·W + b over row-major token matrices.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<F: Real>(
        params: &mut ParamSet<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let w = params.alloc(format!("{name}.w"), fan_in_init(d_in, d_out, d_in, rng));
        let b = params.alloc(format!("{name}.b"), fan_in_init(1, d_out, d_in, rng));
        Self { w, b }
    }

    pub fn forward<F: Real>(&self, params: &ParamSet<F>, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(params.get(self.w));
        y += params.get(self.b);
        y
    }

    /// Accumulates dW and db; returns dx.
    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: &Array2<F>,
        dy: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> Array2<F> {
        *grads.get_mut(self.w) += &x.t().dot(dy);
        let db = dy.sum_axis(ndarray::Axis(0));
        *grads.get_mut(self.b) += &db.insert_axis(ndarray::Axis(0));
        dy.dot(&params.get(self.w).t())
    }
}

/// Multi-layer perceptron with ReLU between layers and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpTrace<F: Real> {
    /// Input to each linear layer (post-ReLU for hidden layers).
    pub xs: Vec<Array2<F>>,
}

impl Mlp {
    /// `depth` linear layers: d_in → hidden → … → hidden → d_out.
    pub fn init<F: Real>(
        params: &mut ParamSet<F>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        depth: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        assert!(depth >= 1);
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let din = if i == 0 { d_in } else { hidden };
            let dout = if i + 1 == depth { d_out } else { hidden };
            layers.push(Linear::init(params, &format!("{name}.{i}"), din, dout, rng));
        }
        Self { layers }
    }

    pub fn forward<F: Real>(&self, params: &ParamSet<F>, x: &Array2<F>) -> Array2<F> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(params, &h);
            if i + 1 < self.layers.len() {
                h.mapv_inplace(|v| v.max(F::zero()));
            }
        }
        h
    }

    pub fn forward_traced<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: &Array2<F>,
    ) -> (Array2<F>, MlpTrace<F>) {
        let mut xs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            xs.push(h.clone());
            h = layer.forward(params, &h);
            if i + 1 < self.layers.len() {
                h.mapv_inplace(|v| v.max(F::zero()));
            }
        }
        (h, MlpTrace { xs })
    }

    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        trace: &MlpTrace<F>,
        dy: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> Array2<F> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                // ReLU mask: the input of layer i+1 is relu(pre-activation i).
                let relu_out = &trace.xs[i + 1];
                ndarray::Zip::from(&mut d).and(relu_out).for_each(|g, &o| {
                    if o <= F::zero() {
                        *g = F::zero();
                    }
                });
            }
            d = self.layers[i].backward(params, &trace.xs[i], &d, grads);
        }
        d
    }
}

/// Discrete embedding table; rows are embeddings.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn init<F: Real>(
        params: &mut ParamSet<F>,
        name: &str,
        n: usize,
        dim: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let table = params.alloc(name, fan_in_init(n, dim, dim, rng));
        Self { table }
    }

    pub fn lookup<F: Real>(&self, params: &ParamSet<F>, idx: usize) -> Array1<F> {
        params.get(self.table).row(idx).to_owned()
    }

    pub fn accumulate_grad<F: Real>(&self, idx: usize, d: &Array1<F>, grads: &mut Grads<F>) {
        let mut row = grads.get_mut(self.table).row_mut(idx);
        row += d;
    }
}

/// Per-token layer normalization with learned scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerNormTrace<F: Real> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn init<F: Real>(params: &mut ParamSet<F>, name: &str, dim: usize) -> Self {
        let gamma = params.alloc(format!("{name}.gamma"), Array2::from_elem((1, dim), F::one()));
        let beta = params.alloc(format!("{name}.beta"), Array2::zeros((1, dim)));
        Self { gamma, beta }
    }

    pub fn forward_traced<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: &Array2<F>,
    ) -> (Array2<F>, LayerNormTrace<F>) {
        let (n, d) = x.dim();
        let dim = c::<F>(d as f64);
        let mut xhat = x.clone();
        let mut inv_std = Array1::<F>::zeros(n);
        for i in 0..n {
            let row = xhat.row_mut(i).into_slice().unwrap();
            let mut mean = F::zero();
            for &v in row.iter() {
                mean = mean + v;
            }
            mean = mean / dim;
            let mut var = F::zero();
            for &v in row.iter() {
                let z = v - mean;
                var = var + z * z;
            }
            var = var / dim;
            let istd = F::one() / (var + c::<F>(LN_EPS)).sqrt();
            inv_std[i] = istd;
            for v in row.iter_mut() {
                *v = (*v - mean) * istd;
            }
        }
        let gamma = params.get(self.gamma);
        let beta = params.get(self.beta);
        let mut y = xhat.clone();
        y *= gamma;
        y += beta;
        (y, LayerNormTrace { xhat, inv_std })
    }

    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        trace: &LayerNormTrace<F>,
        dy: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> Array2<F> {
        let (n, d) = dy.dim();
        let dim = c::<F>(d as f64);
        let gamma = params.get(self.gamma).row(0);
        let gamma = gamma.as_slice().unwrap();

        // dgamma = Σ_rows dy ∘ xhat; dbeta = Σ_rows dy.
        {
            let mut dg_row = grads.get_mut(self.gamma).row_mut(0);
            let dg = dg_row.as_slice_mut().unwrap();
            for i in 0..n {
                let dyr = dy.row(i);
                let dyr = dyr.as_slice().unwrap();
                let xh = trace.xhat.row(i);
                let xh = xh.as_slice().unwrap();
                for ((g, &dv), &xv) in dg.iter_mut().zip(dyr).zip(xh) {
                    *g = *g + dv * xv;
                }
            }
        }
        {
            let mut db_row = grads.get_mut(self.beta).row_mut(0);
            let db = db_row.as_slice_mut().unwrap();
            for i in 0..n {
                let dyr = dy.row(i);
                let dyr = dyr.as_slice().unwrap();
                for (b, &dv) in db.iter_mut().zip(dyr) {
                    *b = *b + dv;
                }
            }
        }

        let mut dx = Array2::<F>::zeros((n, d));
        for i in 0..n {
            // dxhat = dy ∘ gamma;
            // dx = istd/D · (D·dxhat − Σdxhat − xhat·Σ(dxhat∘xhat)).
            let dyr = dy.row(i);
            let dyr = dyr.as_slice().unwrap();
            let xh = trace.xhat.row(i);
            let xh = xh.as_slice().unwrap();
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for ((&dv, &g), &xv) in dyr.iter().zip(gamma).zip(xh) {
                let dxh = dv * g;
                sum_dxhat = sum_dxhat + dxh;
                sum_dxhat_xhat = sum_dxhat_xhat + dxh * xv;
            }
            let istd = trace.inv_std[i];
            let out = dx.row_mut(i).into_slice().unwrap();
            for (((o, &dv), &g), &xv) in out.iter_mut().zip(dyr).zip(gamma).zip(xh) {
                let dxh = dv * g;
                *o = istd / dim * (dim * dxh - sum_dxhat - xv * sum_dxhat_xhat);
            }
        }
        dx
    }
}

/// Row-wise softmax, numerically stable.
pub fn softmax_rows<F: Real>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let mut max = F::neg_infinity();
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Jacobian-vector product of row-wise softmax: p ∘ (d − Σ(d ∘ p)).
pub fn softmax_backward_row<F: Real>(probs: &[F], d: &[F], out: &mut [F]) {
    let mut dot = F::zero();
    for (p, g) in probs.iter().zip(d.iter()) {
        dot = dot + *p * *g;
    }
    for ((o, p), g) in out.iter_mut().zip(probs.iter()).zip(d.iter()) {
        *o = *p * (*g - dot);
    }
}

pub fn softplus<F: Real>(x: F) -> F {
    // max(x, 0) + ln(1 + e^{-|x|}), stable in both tails.
    let zero = F::zero();
    x.max(zero) + x.abs().neg().exp().ln_1p()
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + x.neg().exp())
}

/// Adam optimizer state over a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        Self {
            m: params.tensors().iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
            v: params.tensors().iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &Grads<F>, lr: f64) {
        self.t += 1;
        let b1 = c::<F>(self.beta1);
        let b2 = c::<F>(self.beta2);
        let one = F::one();
        let bc1 = c::<F>(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = c::<F>(1.0 - self.beta2.powi(self.t as i32));
        let lr_f = c::<F>(lr);
        let eps = c::<F>(self.eps);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr_f * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Cosine annealing from `lr0` at epoch 0 to 0 at `total` epochs.
pub fn cosine_lr(lr0: f64, epoch: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (epoch as f64 / total as f64).min(1.0);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Central finite-difference gradient of a scalar loss in one parameter
    /// scalar, used to validate the manual backward passes.
    fn fd_grad<LossFn>(params: &mut ParamSet<f64>, id: ParamId, i: usize, j: usize, loss: LossFn) -> f64
    where
        LossFn: Fn(&ParamSet<f64>) -> f64,
    {
        let h = 1e-6;
        let orig = params.get(id)[[i, j]];
        params.get_mut(id)[[i, j]] = orig + h;
        let fp = loss(params);
        params.get_mut(id)[[i, j]] = orig - h;
        let fm = loss(params);
        params.get_mut(id)[[i, j]] = orig;
        (fp - fm) / (2.0 * h)
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut r = rng(1);
        let mut params = ParamSet::<f64>::new();
        let mlp = Mlp::init(&mut params, "m", 3, 8, 2, 3, &mut r);
        let x = Array2::from_shape_fn((5, 3), |_| r.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((5, 2), |_| r.random_range(-1.0..1.0));

        let loss = |ps: &ParamSet<f64>| {
            let y = mlp.forward(ps, &x);
            let d = &y - &target;
            d.iter().map(|v| v * v).sum::<f64>()
        };

        let (y, trace) = mlp.forward_traced(&params, &x);
        let dy = (&y - &target) * 2.0;
        let mut grads = Grads::zeros_like(&params);
        mlp.backward(&params, &trace, &dy, &mut grads);

        for id in 0..params.len() {
            let shape = params.get(ParamId(id)).dim();
            for (i, j) in [(0, 0), (shape.0 - 1, shape.1 - 1)] {
                let fd = fd_grad(&mut params, ParamId(id), i, j, loss);
                let an = grads.get(ParamId(id))[[i, j]];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    ((fd - an) / denom).abs() < 1e-5,
                    "param {id} ({i},{j}): fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut r = rng(2);
        let mut params = ParamSet::<f64>::new();
        let ln = LayerNorm::init(&mut params, "ln", 6);
        let x = Array2::from_shape_fn((4, 6), |_| r.random_range(-2.0..2.0));
        let w = Array2::from_shape_fn((4, 6), |_| r.random_range(-1.0..1.0));

        let loss = |ps: &ParamSet<f64>| {
            let ln2 = ln;
            let (y, _) = ln2.forward_traced(ps, &x);
            (&y * &w).sum()
        };

        let (_, trace) = ln.forward_traced(&params, &x);
        let mut grads = Grads::zeros_like(&params);
        let dx = ln.backward(&params, &trace, &w, &mut grads);

        for id in [ln.gamma, ln.beta] {
            for j in [0, 5] {
                let fd = fd_grad(&mut params, id, 0, j, loss);
                let an = grads.get(id)[[0, j]];
                assert!((fd - an).abs() < 1e-6, "fd={fd} analytic={an}");
            }
        }

        // dx via finite differences on the input.
        let mut xp = x.clone();
        let h = 1e-6;
        for (i, j) in [(0, 0), (3, 5), (2, 3)] {
            xp[[i, j]] = x[[i, j]] + h;
            let (yp, _) = ln.forward_traced(&params, &xp);
            xp[[i, j]] = x[[i, j]] - h;
            let (ym, _) = ln.forward_traced(&params, &xp);
            xp[[i, j]] = x[[i, j]];
            let fd = ((&yp * &w).sum() - (&ym * &w).sum()) / (2.0 * h);
            assert!((fd - dx[[i, j]]).abs() < 1e-5, "dx ({i},{j}): fd={fd} an={}", dx[[i, j]]);
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut x = Array2::from_shape_vec((1, 4), vec![0.0f64, 0.0, 0.0, 0.0]).unwrap();
        softmax_rows(&mut x);
        for &v in x.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_is_stable_and_positive() {
        assert!(softplus(-800.0f64) >= 0.0);
        assert!(softplus(800.0f64).is_finite());
        assert!((softplus(0.0f64) - (2.0f64).ln()).abs() < 1e-12);
        let x = 3.7f64;
        assert!((softplus(x) - (1.0 + x.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(5e-4, 0, 100) - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(5e-4, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(5e-4, 50, 100) - 2.5e-4).abs() < 1e-12);
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut params = ParamSet::<f64>::new();
        let id = params.alloc("x", Array2::from_elem((1, 1), 3.0));
        let mut adam = Adam::new(&params);
        for _ in 0..500 {
            let mut grads = Grads::zeros_like(&params);
            grads.get_mut(id)[[0, 0]] = 2.0 * params.get(id)[[0, 0]];
            adam.step(&mut params, &grads, 0.05);
        }
        assert!(params.get(id)[[0, 0]].abs() < 0.05);
    }
}
