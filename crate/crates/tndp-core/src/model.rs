//! The dual-head transformer: data embedders, masked transformer encoder,
//! Gaussian prediction head, and softmax query head.
//!
//! Tokens are laid out as [context…, prediction…, query…, GI]. Context and GI
//! tokens attend to each other; every prediction or query token attends only
//! to itself, the context, and GI, which keeps candidate evaluations
//! independent and the whole model permutation invariant over sets.

use ndarray::{s, Array1, Array2};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::nn::{
    c, softmax_backward_row, softplus, sigmoid, Adam, Embedding, Grads, LayerNorm,
    LayerNormTrace, Linear, Mlp, MlpTrace, ParamSet, Real,
};
use crate::task::{GaussianPrediction, TndpInput};

/// Floor added to the softplus-transformed predictive standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("empty query set during rollout")]
    EmptyQuerySet,
}

/// Architecture hyperparameters. Defaults follow the reference setup:
/// 32-dim embeddings, 6 transformer layers with 8 heads and a 128-unit MLP
/// block, depth-4 embedders, 32-unit output heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_x: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub embedder_depth: usize,
    pub embedder_hidden: usize,
    pub head_hidden: usize,
    /// Largest context length the time-step embedding must cover.
    pub max_steps: usize,
    /// Number of discrete decisions when designs carry tags.
    pub n_decisions: Option<usize>,
    /// Dimension of the global task context γ (0 when the task has none).
    pub gamma_dim: usize,
}

impl ModelConfig {
    pub fn for_task(
        d_x: usize,
        max_steps: usize,
        n_decisions: Option<usize>,
        gamma_dim: usize,
    ) -> Self {
        Self {
            d_x,
            embed_dim: 32,
            n_layers: 6,
            n_heads: 8,
            mlp_hidden: 128,
            embedder_depth: 4,
            embedder_hidden: 32,
            head_hidden: 32,
            max_steps,
            n_decisions,
            gamma_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.mlp_hidden == 0
            || self.embedder_depth == 0
            || self.embedder_hidden == 0
            || self.head_hidden == 0
            || self.d_x == 0
        {
            return Err(ModelError::Validation("all dimensions must be positive".into()));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(ModelError::Validation(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.gamma_dim != 0 && self.gamma_dim != self.d_x {
            return Err(ModelError::Validation(format!(
                "gamma_dim {} must be 0 or d_x {}",
                self.gamma_dim, self.d_x
            )));
        }
        if self.n_decisions == Some(0) {
            return Err(ModelError::Validation("n_decisions must be positive".into()));
        }
        Ok(())
    }
}

/// Token-count layout of one model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_c: usize,
    pub n_p: usize,
    pub n_q: usize,
    pub n_gi: usize,
}

impl TokenLayout {
    pub fn total(&self) -> usize {
        self.n_c + self.n_p + self.n_q + self.n_gi
    }

    /// Indices of the mutually attending block: context plus GI.
    fn s_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_c).collect();
        let base = self.n_c + self.n_p + self.n_q;
        idx.extend(base..base + self.n_gi);
        idx
    }

    /// Range of the isolated tokens (prediction then query).
    fn iso_range(&self) -> std::ops::Range<usize> {
        self.n_c..self.n_c + self.n_p + self.n_q
    }
}

/// Boolean attention mask; `allowed[[i, j]]` means row token i may attend to
/// column token j.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub allowed: Array2<bool>,
    pub layout: TokenLayout,
}

/// Builds the mask: context and GI attend within their block; each
/// prediction/query token attends to itself, the context, and GI only.
pub fn build_mask(n_c: usize, n_p: usize, n_q: usize, n_gi: usize) -> AttentionMask {
    let layout = TokenLayout { n_c, n_p, n_q, n_gi };
    let n = layout.total();
    let mut allowed = Array2::from_elem((n, n), false);
    let s_idx = layout.s_indices();
    for &i in &s_idx {
        for &j in &s_idx {
            allowed[[i, j]] = true;
        }
    }
    for i in layout.iso_range() {
        allowed[[i, i]] = true;
        for &j in &s_idx {
            allowed[[i, j]] = true;
        }
    }
    AttentionMask { allowed, layout }
}

/// Multi-head attention specialized to the block mask above.
#[derive(Debug, Clone)]
struct MaskedAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    n_heads: usize,
}

#[derive(Debug, Clone)]
struct AttnTrace<F: Real> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Per-head S-block attention probabilities (S×S).
    probs_s: Vec<Array2<F>>,
    /// Per-head isolated-token probabilities (I×(S+1)); last column is the
    /// self weight.
    probs_iso: Vec<Array2<F>>,
    pre_proj: Array2<F>,
}

impl MaskedAttention {
    fn init<F: Real>(
        params: &mut ParamSet<F>,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        Self {
            wq: Linear::init(params, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::init(params, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::init(params, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::init(params, &format!("{name}.wo"), dim, dim, rng),
            n_heads,
        }
    }

    fn forward_lean<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: &Array2<F>,
        layout: &TokenLayout,
    ) -> Array2<F> {
        let dim = x.ncols();
        let hd = dim / self.n_heads;
        let scale = c::<F>(1.0 / (hd as f64).sqrt());
        let q = self.wq.forward(params, x);
        let k = self.wk.forward(params, x);
        let v = self.wv.forward(params, x);

        let s_idx = layout.s_indices();
        let iso = layout.iso_range();
        let n_s = s_idx.len();
        let n_iso = iso.len();

        let gather = |m: &Array2<F>| -> Array2<F> {
            let mut out = Array2::zeros((n_s, dim));
            for (r, &i) in s_idx.iter().enumerate() {
                out.row_mut(r).assign(&m.row(i));
            }
            out
        };
        let q_s = gather(&q);
        let k_s = gather(&k);
        let v_s = gather(&v);

        let mut pre_proj = Array2::<F>::zeros((x.nrows(), dim));
        let mut out_s_all = Array2::<F>::zeros((n_s, dim));

        for h in 0..self.n_heads {
            let hc = h * hd..(h + 1) * hd;
            let qh_s = q_s.slice(s![.., hc.clone()]);
            let kh_s = k_s.slice(s![.., hc.clone()]);
            let vh_s = v_s.slice(s![.., hc.clone()]);

            let mut scores = qh_s.dot(&kh_s.t());
            scores.mapv_inplace(|z| z * scale);
            crate::nn::softmax_rows(&mut scores);
            let out_s = scores.dot(&vh_s);
            out_s_all.slice_mut(s![.., hc.clone()]).assign(&out_s);

            if n_iso > 0 {
                let qh_i = q.slice(s![iso.clone(), hc.clone()]);
                let kh_i = k.slice(s![iso.clone(), hc.clone()]);
                let vh_i = v.slice(s![iso.clone(), hc.clone()]);
                let mut p = {
                    let mut m = qh_i.dot(&kh_s.t());
                    m.mapv_inplace(|z| z * scale);
                    m
                };
                let mut p_self = vec![F::zero(); n_iso];
                for r in 0..n_iso {
                    let self_score = qh_i.row(r).dot(&kh_i.row(r)) * scale;
                    let row = p.row_mut(r).into_slice().unwrap();
                    let mut maxv = self_score;
                    for &z in row.iter() {
                        if z > maxv {
                            maxv = z;
                        }
                    }
                    let mut sum = F::zero();
                    for d in row.iter_mut() {
                        let e = (*d - maxv).exp();
                        *d = e;
                        sum = sum + e;
                    }
                    let e_self = (self_score - maxv).exp();
                    sum = sum + e_self;
                    let inv = F::one() / sum;
                    for d in row.iter_mut() {
                        *d = *d * inv;
                    }
                    p_self[r] = e_self * inv;
                }
                let mut out_iso = p.dot(&vh_s);
                for r in 0..n_iso {
                    let mut o = out_iso.row_mut(r);
                    o.scaled_add(p_self[r], &vh_i.row(r));
                }
                pre_proj
                    .slice_mut(s![iso.clone(), hc.clone()])
                    .assign(&out_iso);
            }
        }
        for (r, &i) in s_idx.iter().enumerate() {
            pre_proj.row_mut(i).assign(&out_s_all.row(r));
        }

        self.wo.forward(params, &pre_proj)
    }

    fn forward_traced<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: &Array2<F>,
        layout: &TokenLayout,
    ) -> (Array2<F>, AttnTrace<F>) {
        let dim = x.ncols();
        let hd = dim / self.n_heads;
        let scale = c::<F>(1.0 / (hd as f64).sqrt());
        let q = self.wq.forward(params, x);
        let k = self.wk.forward(params, x);
        let v = self.wv.forward(params, x);

        let s_idx = layout.s_indices();
        let iso = layout.iso_range();
        let n_s = s_idx.len();
        let n_iso = iso.len();

        let gather = |m: &Array2<F>| -> Array2<F> {
            let mut out = Array2::zeros((n_s, dim));
            for (r, &i) in s_idx.iter().enumerate() {
                out.row_mut(r).assign(&m.row(i));
            }
            out
        };
        let q_s = gather(&q);
        let k_s = gather(&k);
        let v_s = gather(&v);

        let mut pre_proj = Array2::<F>::zeros((x.nrows(), dim));
        let mut out_s_all = Array2::<F>::zeros((n_s, dim));
        let mut probs_s = Vec::with_capacity(self.n_heads);
        let mut probs_iso = Vec::with_capacity(self.n_heads);

        for h in 0..self.n_heads {
            let hc = h * hd..(h + 1) * hd;
            let qh_s = q_s.slice(s![.., hc.clone()]);
            let kh_s = k_s.slice(s![.., hc.clone()]);
            let vh_s = v_s.slice(s![.., hc.clone()]);

            // Context+GI block: full attention within.
            let mut scores = qh_s.dot(&kh_s.t());
            scores.mapv_inplace(|z| z * scale);
            crate::nn::softmax_rows(&mut scores);
            let out_s = scores.dot(&vh_s);
            out_s_all.slice_mut(s![.., hc.clone()]).assign(&out_s);
            probs_s.push(scores);

            // Isolated tokens: self plus the context+GI keys.
            let mut p_iso = Array2::<F>::zeros((n_iso, n_s + 1));
            if n_iso > 0 {
                let qh_i = q.slice(s![iso.clone(), hc.clone()]);
                let kh_i = k.slice(s![iso.clone(), hc.clone()]);
                let vh_i = v.slice(s![iso.clone(), hc.clone()]);
                let scores_ctx = {
                    let mut m = qh_i.dot(&kh_s.t());
                    m.mapv_inplace(|z| z * scale);
                    m
                };
                for r in 0..n_iso {
                    let self_score = qh_i.row(r).dot(&kh_i.row(r)) * scale;
                    let src = scores_ctx.row(r);
                    let src = src.as_slice().unwrap();
                    let dst = p_iso.row_mut(r).into_slice().unwrap();
                    // Stable softmax over [ctx scores…, self score].
                    let mut maxv = self_score;
                    for &z in src {
                        if z > maxv {
                            maxv = z;
                        }
                    }
                    let mut sum = F::zero();
                    for (d, &z) in dst[..n_s].iter_mut().zip(src) {
                        let e = (z - maxv).exp();
                        *d = e;
                        sum = sum + e;
                    }
                    let e_self = (self_score - maxv).exp();
                    dst[n_s] = e_self;
                    sum = sum + e_self;
                    let inv = F::one() / sum;
                    for d in dst.iter_mut() {
                        *d = *d * inv;
                    }
                }
                // out = P_ctx · V_s + diag(p_self) · V_iso.
                let mut out_iso = p_iso.slice(s![.., 0..n_s]).dot(&vh_s);
                for r in 0..n_iso {
                    let ps = p_iso[[r, n_s]];
                    let mut o = out_iso.row_mut(r);
                    o.scaled_add(ps, &vh_i.row(r));
                }
                pre_proj
                    .slice_mut(s![iso.clone(), hc.clone()])
                    .assign(&out_iso);
            }
            probs_iso.push(p_iso);
        }
        for (r, &i) in s_idx.iter().enumerate() {
            pre_proj
                .row_mut(i)
                .assign(&out_s_all.row(r));
        }

        let out = self.wo.forward(params, &pre_proj);
        (
            out,
            AttnTrace { x: x.clone(), q, k, v, probs_s, probs_iso, pre_proj },
        )
    }

    fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        trace: &AttnTrace<F>,
        layout: &TokenLayout,
        dy: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> Array2<F> {
        let dim = trace.x.ncols();
        let hd = dim / self.n_heads;
        let scale = c::<F>(1.0 / (hd as f64).sqrt());
        let s_idx = layout.s_indices();
        let iso = layout.iso_range();
        let n_s = s_idx.len();
        let n_iso = iso.len();

        let d_pre = self.wo.backward(params, &trace.pre_proj, dy, grads);

        let mut dq = Array2::<F>::zeros(trace.q.raw_dim());
        let mut dk = Array2::<F>::zeros(trace.k.raw_dim());
        let mut dv = Array2::<F>::zeros(trace.v.raw_dim());

        let gather = |m: &Array2<F>| -> Array2<F> {
            let mut out = Array2::zeros((n_s, dim));
            for (r, &i) in s_idx.iter().enumerate() {
                out.row_mut(r).assign(&m.row(i));
            }
            out
        };
        let q_s = gather(&trace.q);
        let k_s = gather(&trace.k);
        let v_s = gather(&trace.v);

        // Accumulate gradients for the S rows per head, scatter once at the
        // end; iso rows are written directly (no other source touches them).
        let mut dq_s_all = Array2::<F>::zeros((n_s, dim));
        let mut dk_s_all = Array2::<F>::zeros((n_s, dim));
        let mut dv_s_all = Array2::<F>::zeros((n_s, dim));
        let d_pre_s = gather(&d_pre);

        for h in 0..self.n_heads {
            let hc = h * hd..(h + 1) * hd;
            let probs = &trace.probs_s[h];

            // S-block backward.
            let d_out_s = d_pre_s.slice(s![.., hc.clone()]);
            let vh_s = v_s.slice(s![.., hc.clone()]);
            let qh_s = q_s.slice(s![.., hc.clone()]);
            let kh_s = k_s.slice(s![.., hc.clone()]);

            let dp = d_out_s.dot(&vh_s.t());
            let dv_s_h = probs.t().dot(&d_out_s);
            let mut dscores = Array2::<F>::zeros((n_s, n_s));
            for r in 0..n_s {
                softmax_backward_row(
                    probs.row(r).as_slice().unwrap(),
                    dp.row(r).as_slice().unwrap(),
                    dscores.row_mut(r).as_slice_mut().unwrap(),
                );
            }
            dscores.mapv_inplace(|z| z * scale);
            let dq_s_h = dscores.dot(&kh_s);
            let dk_s_h = dscores.t().dot(&qh_s);
            dq_s_all.slice_mut(s![.., hc.clone()]).assign(&dq_s_h);
            {
                let mut dk_sl = dk_s_all.slice_mut(s![.., hc.clone()]);
                dk_sl += &dk_s_h;
                let mut dv_sl = dv_s_all.slice_mut(s![.., hc.clone()]);
                dv_sl += &dv_s_h;
            }

            // Isolated-token backward.
            if n_iso > 0 {
                let p_iso = &trace.probs_iso[h];
                let qh_i = trace.q.slice(s![iso.clone(), hc.clone()]);
                let kh_i = trace.k.slice(s![iso.clone(), hc.clone()]);
                let vh_i = trace.v.slice(s![iso.clone(), hc.clone()]);
                let d_out_i = d_pre.slice(s![iso.clone(), hc.clone()]);

                // dP over [ctx cols…, self col].
                let mut dp_full = Array2::<F>::zeros((n_iso, n_s + 1));
                dp_full
                    .slice_mut(s![.., 0..n_s])
                    .assign(&d_out_i.dot(&vh_s.t()));
                for r in 0..n_iso {
                    dp_full[[r, n_s]] = d_out_i.row(r).dot(&vh_i.row(r));
                }
                let mut ds_full = Array2::<F>::zeros((n_iso, n_s + 1));
                for r in 0..n_iso {
                    softmax_backward_row(
                        p_iso.row(r).as_slice().unwrap(),
                        dp_full.row(r).as_slice().unwrap(),
                        ds_full.row_mut(r).as_slice_mut().unwrap(),
                    );
                }
                ds_full.mapv_inplace(|z| z * scale);

                let ds_ctx = ds_full.slice(s![.., 0..n_s]);
                let mut dq_i_h = ds_ctx.dot(&kh_s);
                {
                    let mut dk_sl = dk_s_all.slice_mut(s![.., hc.clone()]);
                    dk_sl += &ds_ctx.t().dot(&qh_i);
                    let mut dv_sl = dv_s_all.slice_mut(s![.., hc.clone()]);
                    dv_sl += &p_iso.slice(s![.., 0..n_s]).t().dot(&d_out_i);
                }
                let mut dk_i_h = Array2::<F>::zeros((n_iso, hd));
                let mut dv_i_h = Array2::<F>::zeros((n_iso, hd));
                for r in 0..n_iso {
                    let ds_self = ds_full[[r, n_s]];
                    let p_self = p_iso[[r, n_s]];
                    dq_i_h.row_mut(r).scaled_add(ds_self, &kh_i.row(r));
                    dk_i_h.row_mut(r).scaled_add(ds_self, &qh_i.row(r));
                    dv_i_h.row_mut(r).scaled_add(p_self, &d_out_i.row(r));
                }
                dq.slice_mut(s![iso.clone(), hc.clone()]).assign(&dq_i_h);
                dk.slice_mut(s![iso.clone(), hc.clone()]).assign(&dk_i_h);
                dv.slice_mut(s![iso.clone(), hc.clone()]).assign(&dv_i_h);
            }
        }
        for (r, &i) in s_idx.iter().enumerate() {
            dq.row_mut(i).assign(&dq_s_all.row(r));
            dk.row_mut(i).assign(&dk_s_all.row(r));
            dv.row_mut(i).assign(&dv_s_all.row(r));
        }

        let mut dx = self.wq.backward(params, &trace.x, &dq, grads);
        dx += &self.wk.backward(params, &trace.x, &dk, grads);
        dx += &self.wv.backward(params, &trace.x, &dv, grads);
        dx
    }
}

#[derive(Debug, Clone)]
struct TransformerLayer {
    ln1: LayerNorm,
    attn: MaskedAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct LayerTrace<F: Real> {
    ln1: LayerNormTrace<F>,
    attn: AttnTrace<F>,
    ln2: LayerNormTrace<F>,
    mlp: MlpTrace<F>,
}

impl TransformerLayer {
    fn init<F: Real>(
        params: &mut ParamSet<F>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut dyn RngCore,
    ) -> Self {
        Self {
            ln1: LayerNorm::init(params, &format!("{name}.ln1"), cfg.embed_dim),
            attn: MaskedAttention::init(
                params,
                &format!("{name}.attn"),
                cfg.embed_dim,
                cfg.n_heads,
                rng,
            ),
            ln2: LayerNorm::init(params, &format!("{name}.ln2"), cfg.embed_dim),
            mlp: Mlp::init(
                params,
                &format!("{name}.mlp"),
                cfg.embed_dim,
                cfg.mlp_hidden,
                cfg.embed_dim,
                2,
                rng,
            ),
        }
    }

    fn forward_traced<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: &Array2<F>,
        layout: &TokenLayout,
    ) -> (Array2<F>, LayerTrace<F>) {
        let (a_in, ln1) = self.ln1.forward_traced(params, x);
        let (a_out, attn) = self.attn.forward_traced(params, &a_in, layout);
        let x1 = x + &a_out;
        let (m_in, ln2) = self.ln2.forward_traced(params, &x1);
        let (m_out, mlp) = self.mlp.forward_traced(params, &m_in);
        let y = &x1 + &m_out;
        (y, LayerTrace { ln1, attn, ln2, mlp })
    }

    fn forward_lean<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: &Array2<F>,
        layout: &TokenLayout,
    ) -> Array2<F> {
        let (a_in, _) = self.ln1.forward_traced(params, x);
        let a_out = self.attn.forward_lean(params, &a_in, layout);
        let x1 = x + &a_out;
        let (m_in, _) = self.ln2.forward_traced(params, &x1);
        let m_out = self.mlp.forward(params, &m_in);
        x1 + m_out
    }

    fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        trace: &LayerTrace<F>,
        layout: &TokenLayout,
        dy: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> Array2<F> {
        let dm_in = self.mlp.backward(params, &trace.mlp, dy, grads);
        let dx1_from_mlp = self.ln2.backward(params, &trace.ln2, &dm_in, grads);
        let dx1 = dy + &dx1_from_mlp;
        let da_in = self.attn.backward(params, &trace.attn, layout, &dx1, grads);
        let dx_from_attn = self.ln1.backward(params, &trace.ln1, &da_in, grads);
        &dx1 + &dx_from_attn
    }
}

/// Prediction-head and query-head outputs for one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub predictions: Vec<GaussianPrediction>,
    pub query_logits: Vec<f64>,
}

/// Softmax policy over the query set.
pub fn policy_distribution(query_logits: &[f64]) -> Vec<f64> {
    assert!(!query_logits.is_empty(), "policy needs at least one logit");
    let max = query_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = query_logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone)]
struct EmbedTrace<F: Real> {
    design_mlp: MlpTrace<F>,
    outcome_mlp: Option<MlpTrace<F>>,
    layout: TokenLayout,
    tags: Vec<(usize, usize)>,
    step: usize,
    has_gamma: bool,
}

/// Full trace of one forward pass, consumed by [`TndpModel::backward`].
#[derive(Debug, Clone)]
pub struct ModelTrace<F: Real> {
    embed: EmbedTrace<F>,
    layers: Vec<LayerTrace<F>>,
    final_ln: LayerNormTrace<F>,
    pred_head: Option<MlpTrace<F>>,
    query_head: Option<MlpTrace<F>>,
    /// Pre-softplus σ inputs, for the positivity transform's chain rule.
    sigma_pre: Array1<F>,
    layout: TokenLayout,
}

/// The TNDP network. Parameter data lives in a separate [`ParamSet`]; the
/// model holds the wiring, so identical configs always produce identical
/// parameter layouts regardless of initialization randomness.
#[derive(Debug, Clone)]
pub struct TndpModel {
    pub config: ModelConfig,
    design_mlp: Mlp,
    outcome_mlp: Mlp,
    time_embed: Embedding,
    decision_embed: Option<Embedding>,
    layers: Vec<TransformerLayer>,
    final_ln: LayerNorm,
    pred_head: Mlp,
    query_head: Mlp,
}

impl TndpModel {
    pub fn init<F: Real>(
        config: &ModelConfig,
        rng: &mut dyn RngCore,
    ) -> Result<(Self, ParamSet<F>), ModelError> {
        config.validate()?;
        let mut params = ParamSet::new();
        let e = config.embed_dim;
        let design_mlp = Mlp::init(
            &mut params,
            "embed.design",
            config.d_x,
            config.embedder_hidden,
            e,
            config.embedder_depth,
            rng,
        );
        let outcome_mlp = Mlp::init(
            &mut params,
            "embed.outcome",
            1,
            config.embedder_hidden,
            e,
            config.embedder_depth,
            rng,
        );
        let time_embed = Embedding::init(&mut params, "embed.time", config.max_steps + 1, e, rng);
        let decision_embed = config
            .n_decisions
            .map(|n| Embedding::init(&mut params, "embed.decision", n, e, rng));
        let layers = (0..config.n_layers)
            .map(|i| TransformerLayer::init(&mut params, &format!("layer{i}"), config, rng))
            .collect();
        let final_ln = LayerNorm::init(&mut params, "final_ln", e);
        let pred_head = Mlp::init(&mut params, "head.pred", e, config.head_hidden, 2, 2, rng);
        let query_head = Mlp::init(&mut params, "head.query", e, config.head_hidden, 1, 2, rng);
        Ok((
            Self {
                config: config.clone(),
                design_mlp,
                outcome_mlp,
                time_embed,
                decision_embed,
                layers,
                final_ln,
                pred_head,
                query_head,
            },
            params,
        ))
    }

    fn validate_input(&self, input: &TndpInput) -> Result<TokenLayout, ModelError> {
        let cfg = &self.config;
        let check_design = |d: &crate::task::Design| -> Result<(), ModelError> {
            if d.dim() != cfg.d_x {
                return Err(ModelError::Validation(format!(
                    "design dimension {} != configured d_x {}",
                    d.dim(),
                    cfg.d_x
                )));
            }
            match (d.decision_tag, cfg.n_decisions) {
                (Some(t), Some(n)) if t >= n => Err(ModelError::Validation(format!(
                    "decision tag {t} out of range for {n} decisions"
                ))),
                (Some(_), None) => Err(ModelError::Validation(
                    "tagged design but model has no decision embedder".into(),
                )),
                _ => Ok(()),
            }
        };
        for (d, _) in input.context.pairs() {
            check_design(d)?;
        }
        for d in &input.prediction_designs {
            check_design(d)?;
        }
        for d in &input.query_designs {
            check_design(d)?;
        }
        if input.query_designs.len() > 1 {
            // Sort indices by (coords bits, tag); duplicates become adjacent.
            let key = |d: &crate::task::Design| {
                (
                    d.coordinates.iter().map(|v| v.to_bits()).collect::<Vec<u64>>(),
                    d.decision_tag,
                )
            };
            let mut order: Vec<usize> = (0..input.query_designs.len()).collect();
            order.sort_unstable_by(|&a, &b| {
                let da = &input.query_designs[a];
                let db = &input.query_designs[b];
                da.coordinates
                    .iter()
                    .map(|v| v.to_bits())
                    .cmp(db.coordinates.iter().map(|v| v.to_bits()))
                    .then(da.decision_tag.cmp(&db.decision_tag))
            });
            for w in order.windows(2) {
                if key(&input.query_designs[w[0]]) == key(&input.query_designs[w[1]]) {
                    return Err(ModelError::Validation(
                        "duplicate design in query set".into(),
                    ));
                }
            }
        }
        if input.global_info.step > cfg.max_steps {
            return Err(ModelError::Validation(format!(
                "step {} exceeds max_steps {}",
                input.global_info.step, cfg.max_steps
            )));
        }
        if input.global_info.task_context.len() != cfg.gamma_dim {
            return Err(ModelError::Validation(format!(
                "gamma dimension {} != configured {}",
                input.global_info.task_context.len(),
                cfg.gamma_dim
            )));
        }
        Ok(TokenLayout {
            n_c: input.context.step(),
            n_p: input.prediction_designs.len(),
            n_q: input.query_designs.len(),
            n_gi: 1,
        })
    }

    /// Embeds the input into the token matrix E (one row per token).
    pub fn embed<F: Real>(
        &self,
        params: &ParamSet<F>,
        input: &TndpInput,
    ) -> Result<Array2<F>, ModelError> {
        let (e, _) = self.embed_traced(params, input)?;
        Ok(e)
    }

    fn embed_traced<F: Real>(
        &self,
        params: &ParamSet<F>,
        input: &TndpInput,
    ) -> Result<(Array2<F>, EmbedTrace<F>), ModelError> {
        self.embed_traced_impl(params, input, true)
    }

    fn embed_traced_impl<F: Real>(
        &self,
        params: &ParamSet<F>,
        input: &TndpInput,
        record: bool,
    ) -> Result<(Array2<F>, EmbedTrace<F>), ModelError> {
        let layout = self.validate_input(input)?;
        let cfg = &self.config;
        let e_dim = cfg.embed_dim;
        let has_gamma = cfg.gamma_dim > 0;

        // All covariate vectors share one embedder pass: context designs,
        // prediction designs, query designs, then γ when present.
        let n_designs = layout.n_c + layout.n_p + layout.n_q + usize::from(has_gamma);
        let mut coords = Array2::<F>::zeros((n_designs, cfg.d_x));
        let mut tags: Vec<(usize, usize)> = Vec::new();
        {
            let mut r = 0usize;
            let mut push = |d: &crate::task::Design, coords: &mut Array2<F>| {
                for (j, &v) in d.coordinates.iter().enumerate() {
                    coords[[r, j]] = c(v);
                }
                r += 1;
            };
            for (d, _) in input.context.pairs() {
                push(d, &mut coords);
            }
            for d in &input.prediction_designs {
                push(d, &mut coords);
            }
            for d in &input.query_designs {
                push(d, &mut coords);
            }
            if has_gamma {
                for (j, &v) in input.global_info.task_context.iter().enumerate() {
                    coords[[r, j]] = c(v);
                }
            }
        }
        let (design_out, design_trace) = if record {
            let (out, trace) = self.design_mlp.forward_traced(params, &coords);
            (out, trace)
        } else {
            (self.design_mlp.forward(params, &coords), MlpTrace { xs: Vec::new() })
        };

        let n_tokens = layout.total();
        let mut e = Array2::<F>::zeros((n_tokens, e_dim));

        // Context tokens: design + outcome (+ decision tag) embeddings summed.
        let outcome_trace = if layout.n_c > 0 {
            let mut ys = Array2::<F>::zeros((layout.n_c, 1));
            for (i, (_, y)) in input.context.pairs().iter().enumerate() {
                ys[[i, 0]] = c(y.value());
            }
            let (y_out, y_trace) = if record {
                let (out, trace) = self.outcome_mlp.forward_traced(params, &ys);
                (out, Some(trace))
            } else {
                (self.outcome_mlp.forward(params, &ys), None)
            };
            for i in 0..layout.n_c {
                let mut row = e.row_mut(i);
                row += &design_out.row(i);
                row += &y_out.row(i);
            }
            y_trace
        } else {
            None
        };

        // Prediction and query tokens: design embeddings only.
        for i in 0..layout.n_p + layout.n_q {
            let tok = layout.n_c + i;
            let mut row = e.row_mut(tok);
            row += &design_out.row(layout.n_c + i);
        }

        // Decision-tag embeddings for every tagged design token.
        if let Some(embed) = &self.decision_embed {
            let all_designs = input
                .context
                .pairs()
                .iter()
                .map(|(d, _)| d)
                .chain(&input.prediction_designs)
                .chain(&input.query_designs);
            for (tok, d) in all_designs.enumerate() {
                if let Some(tag) = d.decision_tag {
                    let emb = embed.lookup(params, tag);
                    let mut row = e.row_mut(tok);
                    row += &emb;
                    tags.push((tok, tag));
                }
            }
        }

        // GI token: time-step embedding plus embedded γ, summed.
        let gi_tok = n_tokens - 1;
        {
            let t_emb = self.time_embed.lookup(params, input.global_info.step);
            let mut row = e.row_mut(gi_tok);
            row += &t_emb;
            if has_gamma {
                row += &design_out.row(n_designs - 1);
            }
        }

        Ok((
            e,
            EmbedTrace {
                design_mlp: design_trace,
                outcome_mlp: outcome_trace,
                layout,
                tags,
                step: input.global_info.step,
                has_gamma,
            },
        ))
    }

    fn embed_backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        trace: &EmbedTrace<F>,
        de: &Array2<F>,
        grads: &mut Grads<F>,
    ) {
        let layout = &trace.layout;
        let n_tokens = layout.total();
        let gi_tok = n_tokens - 1;
        let n_designs =
            layout.n_c + layout.n_p + layout.n_q + usize::from(trace.has_gamma);

        // Design-embedder gradient rows mirror the forward packing order.
        let e_dim = de.ncols();
        let mut d_design = Array2::<F>::zeros((n_designs, e_dim));
        for i in 0..layout.n_c + layout.n_p + layout.n_q {
            d_design.row_mut(i).assign(&de.row(i));
        }
        if trace.has_gamma {
            d_design.row_mut(n_designs - 1).assign(&de.row(gi_tok));
        }
        self.design_mlp.backward(params, &trace.design_mlp, &d_design, grads);

        if let Some(y_trace) = &trace.outcome_mlp {
            let mut d_y = Array2::<F>::zeros((layout.n_c, e_dim));
            for i in 0..layout.n_c {
                d_y.row_mut(i).assign(&de.row(i));
            }
            self.outcome_mlp.backward(params, y_trace, &d_y, grads);
        }

        if let Some(embed) = &self.decision_embed {
            for &(tok, tag) in &trace.tags {
                embed.accumulate_grad(tag, &de.row(tok).to_owned(), grads);
            }
        }

        self.time_embed
            .accumulate_grad(trace.step, &de.row(gi_tok).to_owned(), grads);
    }

    /// Forward pass without gradient bookkeeping; skips all trace recording,
    /// so rollouts and deployment stay cheap.
    pub fn forward<F: Real>(
        &self,
        params: &ParamSet<F>,
        input: &TndpInput,
    ) -> Result<ModelOutput, ModelError> {
        let (e, layout) = self.embed_lean(params, input)?;
        let mut x = e;
        for layer in &self.layers {
            x = layer.forward_lean(params, &x, &layout);
        }
        let (final_out, _) = self.final_ln.forward_traced(params, &x);

        let predictions = if layout.n_p > 0 {
            let pred_tokens = final_out.slice(s![layout.n_c..layout.n_c + layout.n_p, ..]);
            let raw = self.pred_head.forward(params, &pred_tokens.to_owned());
            (0..layout.n_p)
                .map(|i| GaussianPrediction {
                    mean: raw[[i, 0]].to_f64(),
                    std: softplus(raw[[i, 1]]).to_f64() + SIGMA_FLOOR,
                })
                .collect()
        } else {
            Vec::new()
        };

        let query_logits = if layout.n_q > 0 {
            let q_start = layout.n_c + layout.n_p;
            let q_tokens = final_out.slice(s![q_start..q_start + layout.n_q, ..]);
            let raw = self.query_head.forward(params, &q_tokens.to_owned());
            (0..layout.n_q).map(|i| raw[[i, 0]].to_f64()).collect()
        } else {
            Vec::new()
        };
        for l in &query_logits {
            if !l.is_finite() {
                return Err(ModelError::Validation("non-finite query logit".into()));
            }
        }
        Ok(ModelOutput { predictions, query_logits })
    }

    /// Embedding without trace recording.
    fn embed_lean<F: Real>(
        &self,
        params: &ParamSet<F>,
        input: &TndpInput,
    ) -> Result<(Array2<F>, TokenLayout), ModelError> {
        let (e, trace) = self.embed_traced_impl(params, input, false)?;
        Ok((e, trace.layout))
    }

    /// Forward pass that records everything [`Self::backward`] needs.
    pub fn forward_traced<F: Real>(
        &self,
        params: &ParamSet<F>,
        input: &TndpInput,
    ) -> Result<(ModelOutput, ModelTrace<F>), ModelError> {
        let (e, embed_trace) = self.embed_traced(params, input)?;
        let layout = embed_trace.layout;

        let mut x = e;
        let mut layer_traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, t) = layer.forward_traced(params, &x, &layout);
            x = y;
            layer_traces.push(t);
        }
        let (final_out, final_ln_trace) = self.final_ln.forward_traced(params, &x);

        let (predictions, pred_trace, sigma_pre) = if layout.n_p > 0 {
            let pred_tokens = final_out.slice(s![layout.n_c..layout.n_c + layout.n_p, ..]);
            let (raw, trace) = self.pred_head.forward_traced(params, &pred_tokens.to_owned());
            let mut preds = Vec::with_capacity(layout.n_p);
            let mut sigma_pre = Array1::<F>::zeros(layout.n_p);
            for i in 0..layout.n_p {
                let mean = raw[[i, 0]].to_f64();
                let s_raw = raw[[i, 1]];
                sigma_pre[i] = s_raw;
                let sigma = softplus(s_raw).to_f64() + SIGMA_FLOOR;
                preds.push(GaussianPrediction { mean, std: sigma });
            }
            (preds, Some(trace), sigma_pre)
        } else {
            (Vec::new(), None, Array1::zeros(0))
        };

        let (query_logits, query_trace) = if layout.n_q > 0 {
            let q_start = layout.n_c + layout.n_p;
            let q_tokens = final_out.slice(s![q_start..q_start + layout.n_q, ..]);
            let (raw, trace) = self.query_head.forward_traced(params, &q_tokens.to_owned());
            let logits: Vec<f64> = (0..layout.n_q).map(|i| raw[[i, 0]].to_f64()).collect();
            (logits, Some(trace))
        } else {
            (Vec::new(), None)
        };

        for l in &query_logits {
            if !l.is_finite() {
                return Err(ModelError::Validation("non-finite query logit".into()));
            }
        }

        Ok((
            ModelOutput { predictions, query_logits },
            ModelTrace {
                embed: embed_trace,
                layers: layer_traces,
                final_ln: final_ln_trace,
                pred_head: pred_trace,
                query_head: query_trace,
                sigma_pre,
                layout,
            },
        ))
    }

    /// Accumulates parameter gradients given loss gradients with respect to
    /// the predictive means and stds and the query logits.
    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        trace: &ModelTrace<F>,
        d_mean: &[f64],
        d_std: &[f64],
        d_logits: &[f64],
        grads: &mut Grads<F>,
    ) {
        let layout = trace.layout;
        assert_eq!(d_mean.len(), layout.n_p);
        assert_eq!(d_std.len(), layout.n_p);
        assert_eq!(d_logits.len(), layout.n_q);

        let e_dim = self.config.embed_dim;
        let mut d_final = Array2::<F>::zeros((layout.total(), e_dim));

        if layout.n_p > 0 {
            let trace_p = trace.pred_head.as_ref().unwrap();
            let mut d_raw = Array2::<F>::zeros((layout.n_p, 2));
            for i in 0..layout.n_p {
                d_raw[[i, 0]] = c(d_mean[i]);
                // σ = softplus(s) + floor ⇒ dσ/ds = sigmoid(s).
                d_raw[[i, 1]] = c::<F>(d_std[i]) * sigmoid(trace.sigma_pre[i]);
            }
            let d_tokens = self.pred_head.backward(params, trace_p, &d_raw, grads);
            for i in 0..layout.n_p {
                d_final.row_mut(layout.n_c + i).assign(&d_tokens.row(i));
            }
        }

        if layout.n_q > 0 {
            let trace_q = trace.query_head.as_ref().unwrap();
            let mut d_raw = Array2::<F>::zeros((layout.n_q, 1));
            for i in 0..layout.n_q {
                d_raw[[i, 0]] = c(d_logits[i]);
            }
            let d_tokens = self.query_head.backward(params, trace_q, &d_raw, grads);
            let q_start = layout.n_c + layout.n_p;
            for i in 0..layout.n_q {
                d_final.row_mut(q_start + i).assign(&d_tokens.row(i));
            }
        }

        let mut dx = self.final_ln.backward(params, &trace.final_ln, &d_final, grads);
        for (layer, ltrace) in self.layers.iter().zip(trace.layers.iter()).rev() {
            dx = layer.backward(params, ltrace, &layout, &dx, grads);
        }
        self.embed_backward(params, &trace.embed, &dx, grads);
    }
}

// --- Checkpoint format -----------------------------------------------------
//
// Self-describing binary container:
//   magic "TNDPCKP1" | u32 version | u8 float tag | u8 has_adam
//   u64 train_step | u64 master_seed
//   u32 config-JSON length | config JSON
//   u32 tensor count | per tensor: u32 rows, u32 cols, data (LE)
//   if has_adam: u64 adam_t, then m tensors and v tensors (data only)
//   magic "TNDPEND1"
//
// Training randomness is derived statelessly from (master_seed, epoch), so
// seed plus step is the complete rng state.

const CKPT_MAGIC: &[u8; 8] = b"TNDPCKP1";
const CKPT_END: &[u8; 8] = b"TNDPEND1";
const CKPT_VERSION: u32 = 1;

/// Everything a training run needs to resume exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Real> {
    pub config: ModelConfig,
    pub tensors: Vec<Array2<F>>,
    pub adam: Option<(u64, Vec<Array2<F>>, Vec<Array2<F>>)>,
    pub train_step: u64,
    pub master_seed: u64,
}

fn write_tensor<F: Real, W: Write>(w: &mut W, t: &Array2<F>) -> std::io::Result<()> {
    w.write_all(&(t.nrows() as u32).to_le_bytes())?;
    w.write_all(&(t.ncols() as u32).to_le_bytes())?;
    for v in t.iter() {
        match F::TAG {
            4 => w.write_all(&(v.to_bits_u64() as u32).to_le_bytes())?,
            _ => w.write_all(&v.to_bits_u64().to_le_bytes())?,
        }
    }
    Ok(())
}

fn read_exact_or_corrupt<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf)
        .map_err(|_| ModelError::Corrupt("unexpected end of file".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    read_exact_or_corrupt(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    read_exact_or_corrupt(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor<F: Real, R: Read>(r: &mut R) -> Result<Array2<F>, ModelError> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    if rows.saturating_mul(cols) > 100_000_000 {
        return Err(ModelError::Corrupt(format!("implausible tensor shape {rows}x{cols}")));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let v = match F::TAG {
            4 => {
                let mut b = [0u8; 4];
                read_exact_or_corrupt(r, &mut b)?;
                F::from_bits_u64(u32::from_le_bytes(b) as u64)
            }
            _ => {
                let mut b = [0u8; 8];
                read_exact_or_corrupt(r, &mut b)?;
                F::from_bits_u64(u64::from_le_bytes(b))
            }
        };
        data.push(v);
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| ModelError::Corrupt(e.to_string()))
}

/// Writes a checkpoint atomically (temp file + rename).
pub fn save_checkpoint<F: Real>(ckpt: &Checkpoint<F>, path: &Path) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&CKPT_VERSION.to_le_bytes())?;
        f.write_all(&[F::TAG])?;
        f.write_all(&[u8::from(ckpt.adam.is_some())])?;
        f.write_all(&ckpt.train_step.to_le_bytes())?;
        f.write_all(&ckpt.master_seed.to_le_bytes())?;
        let cfg = serde_json::to_vec(&ckpt.config)
            .map_err(|e| ModelError::Corrupt(e.to_string()))?;
        f.write_all(&(cfg.len() as u32).to_le_bytes())?;
        f.write_all(&cfg)?;
        f.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
        for t in &ckpt.tensors {
            write_tensor(&mut f, t)?;
        }
        if let Some((t, m, v)) = &ckpt.adam {
            f.write_all(&t.to_le_bytes())?;
            for x in m {
                write_tensor(&mut f, x)?;
            }
            for x in v {
                write_tensor(&mut f, x)?;
            }
        }
        f.write_all(CKPT_END)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint; fails on truncation, bad magic, or float-width
/// mismatch, without partial state.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>, ModelError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or_corrupt(&mut f, &mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(ModelError::Corrupt("bad magic".into()));
    }
    let version = read_u32(&mut f)?;
    if version != CKPT_VERSION {
        return Err(ModelError::Corrupt(format!("unsupported version {version}")));
    }
    let mut tag = [0u8; 1];
    read_exact_or_corrupt(&mut f, &mut tag)?;
    if tag[0] != F::TAG {
        return Err(ModelError::Corrupt(format!(
            "float width mismatch: file has {} bytes, expected {}",
            tag[0],
            F::TAG
        )));
    }
    let mut has_adam = [0u8; 1];
    read_exact_or_corrupt(&mut f, &mut has_adam)?;
    let train_step = read_u64(&mut f)?;
    let master_seed = read_u64(&mut f)?;
    let cfg_len = read_u32(&mut f)? as usize;
    if cfg_len > 1_000_000 {
        return Err(ModelError::Corrupt("implausible config size".into()));
    }
    let mut cfg_bytes = vec![0u8; cfg_len];
    read_exact_or_corrupt(&mut f, &mut cfg_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| ModelError::Corrupt(format!("config: {e}")))?;
    let n_tensors = read_u32(&mut f)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        tensors.push(read_tensor::<F, _>(&mut f)?);
    }
    let adam = if has_adam[0] == 1 {
        let t = read_u64(&mut f)?;
        let mut m = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            m.push(read_tensor::<F, _>(&mut f)?);
        }
        let mut v = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            v.push(read_tensor::<F, _>(&mut f)?);
        }
        Some((t, m, v))
    } else {
        None
    };
    let mut end = [0u8; 8];
    read_exact_or_corrupt(&mut f, &mut end)?;
    if &end != CKPT_END {
        return Err(ModelError::Corrupt("bad end marker".into()));
    }
    Ok(Checkpoint { config, tensors, adam, train_step, master_seed })
}

/// Saves model weights only (no optimizer state).
pub fn save_weights<F: Real>(
    config: &ModelConfig,
    params: &ParamSet<F>,
    path: &Path,
) -> Result<(), ModelError> {
    save_checkpoint(
        &Checkpoint {
            config: config.clone(),
            tensors: params.tensors().to_vec(),
            adam: None,
            train_step: 0,
            master_seed: 0,
        },
        path,
    )
}

/// Loads weights for a known config; errors when the stored config differs.
pub fn load_weights<F: Real>(
    path: &Path,
    expected: &ModelConfig,
) -> Result<(TndpModel, ParamSet<F>), ModelError> {
    let ckpt = load_checkpoint::<F>(path)?;
    if &ckpt.config != expected {
        return Err(ModelError::ConfigMismatch(format!(
            "stored config {:?} differs from expected {:?}",
            ckpt.config, expected
        )));
    }
    restore_model(&ckpt)
}

/// Rebuilds a model and parameter set from checkpoint contents.
pub fn restore_model<F: Real>(
    ckpt: &Checkpoint<F>,
) -> Result<(TndpModel, ParamSet<F>), ModelError> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (model, mut params) = TndpModel::init::<F>(&ckpt.config, &mut rng)?;
    if params.len() != ckpt.tensors.len() {
        return Err(ModelError::Corrupt(format!(
            "tensor count {} does not match config-implied {}",
            ckpt.tensors.len(),
            params.len()
        )));
    }
    for (i, t) in ckpt.tensors.iter().enumerate() {
        if params.tensors()[i].raw_dim() != t.raw_dim() {
            return Err(ModelError::Corrupt(format!("tensor {i} shape mismatch")));
        }
        params.tensors_mut()[i] = t.clone();
    }
    Ok((model, params))
}

/// Packages live training state into a checkpoint value.
pub fn make_checkpoint<F: Real>(
    config: &ModelConfig,
    params: &ParamSet<F>,
    adam: Option<&Adam<F>>,
    train_step: u64,
    master_seed: u64,
) -> Checkpoint<F> {
    Checkpoint {
        config: config.clone(),
        tensors: params.tensors().to_vec(),
        adam: adam.map(|a| (a.t, a.m.clone(), a.v.clone())),
        train_step,
        master_seed,
    }
}

use rand::SeedableRng;
