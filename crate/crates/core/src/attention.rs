//! Scaled dot-product attention over a causal query segment, optionally
//! preceded by globally visible demonstration (or virtual) key/value slots.
//!
//! For one query row `q`, demo keys `K_D` and visible query keys `K`:
//!
//! ```text
//! softmax(q[K_D, K]ᵀ/√d) [V_D; V] = α · SA(q, K, V) + β · V_D
//! α = Z2 / (Z1 + Z2),  β = exp(q K_Dᵀ/√d) / (Z1 + Z2)
//! ```
//!
//! `Z1`/`Z2` are the demo/query partition sums. Every coefficient is formed in
//! log space so large scores never overflow.

use crate::error::{config_err, domain_err, Error, Result};
use crate::numcore::{dot, log_add_exp, log_sum_exp, Matrix};

/// Per-head projections, each `d_model × d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl HeadParams {
    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }
}

/// Multi-head attention parameters: per-head projections plus the shared
/// output projection (`d_model × d_model`).
#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    pub heads: Vec<HeadParams>,
    pub w_o: Matrix,
}

/// Demonstration / virtual key-value slots for one head. Visible to every
/// query row and never causally masked.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedContext {
    pub k_d: Matrix,
    pub v_d: Matrix,
}

impl AugmentedContext {
    pub fn new(k_d: Matrix, v_d: Matrix) -> Result<Self> {
        if k_d.rows() != v_d.rows() || k_d.cols() != v_d.cols() {
            return Err(Error::Dimension {
                op: "AugmentedContext",
                left: k_d.shape_str(),
                right: v_d.shape_str(),
            });
        }
        Ok(Self { k_d, v_d })
    }

    pub fn empty(d_h: usize) -> Self {
        Self {
            k_d: Matrix::zeros(0, d_h),
            v_d: Matrix::zeros(0, d_h),
        }
    }

    pub fn slots(&self) -> usize {
        self.k_d.rows()
    }
}

/// How the query term and the demo shift are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CombineMode {
    /// `α · SA + β · V_D` (identical to attention over the concatenation).
    #[default]
    Exact,
    /// `SA + β · V_D`: the self-attention scaling is dropped, β is unchanged.
    AlphaOne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionResult {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub sa_out: Vec<f64>,
    pub shift: Vec<f64>,
    pub combined: Vec<f64>,
}

impl DecompositionResult {
    /// Recombines with the given mode; `Exact` returns `combined` unchanged.
    pub fn combine(&self, mode: CombineMode) -> Vec<f64> {
        match mode {
            CombineMode::Exact => self.combined.clone(),
            CombineMode::AlphaOne => self
                .sa_out
                .iter()
                .zip(&self.shift)
                .map(|(s, h)| s + h)
                .collect(),
        }
    }
}

/// Mixture coefficients for one row: α, β and the query-only softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Coefficients {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Coefficients from raw (already scaled) demo and query scores.
pub(crate) fn coefficients(demo_scores: &[f64], query_scores: &[f64]) -> Result<Coefficients> {
    let log_z2 = log_sum_exp(query_scores)?;
    let weights = query_scores.iter().map(|s| (s - log_z2).exp()).collect();
    if demo_scores.is_empty() {
        return Ok(Coefficients {
            alpha: 1.0,
            beta: Vec::new(),
            weights,
        });
    }
    let log_z1 = log_sum_exp(demo_scores)?;
    let log_z = log_add_exp(log_z1, log_z2);
    Ok(Coefficients {
        alpha: (log_z2 - log_z).exp(),
        beta: demo_scores.iter().map(|s| (s - log_z).exp()).collect(),
        weights,
    })
}

fn check_row_inputs(q_row: &[f64], keys: &Matrix, values: &Matrix) -> Result<()> {
    if keys.rows() == 0 {
        return Err(domain_err("attention needs at least one visible key"));
    }
    if keys.cols() != q_row.len() || values.cols() != q_row.len() || values.rows() != keys.rows() {
        return Err(Error::Dimension {
            op: "attention row",
            left: format!("q len {} keys {}", q_row.len(), keys.shape_str()),
            right: format!("values {}", values.shape_str()),
        });
    }
    Ok(())
}

fn check_ctx(q_row: &[f64], ctx: &AugmentedContext) -> Result<()> {
    if ctx.slots() > 0 && (ctx.k_d.cols() != q_row.len() || ctx.v_d.cols() != q_row.len()) {
        return Err(Error::Dimension {
            op: "attention context",
            left: format!("q len {}", q_row.len()),
            right: ctx.k_d.shape_str(),
        });
    }
    Ok(())
}

fn scores(q_row: &[f64], keys: &Matrix, scale: f64) -> Vec<f64> {
    (0..keys.rows()).map(|j| dot(q_row, keys.row(j)) * scale).collect()
}

fn weighted_rows(weights: &[f64], values: &Matrix, out: &mut [f64]) {
    for (j, &w) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(values.row(j)) {
            *o += w * v;
        }
    }
}

/// Standard self-attention for one query row over its visible keys.
pub fn sa_forward(q_row: &[f64], keys: &Matrix, values: &Matrix) -> Result<Vec<f64>> {
    check_row_inputs(q_row, keys, values)?;
    let scale = 1.0 / (q_row.len() as f64).sqrt();
    let s = scores(q_row, keys, scale);
    let w = crate::numcore::stable_softmax_row(&s)?;
    let mut out = vec![0.0; q_row.len()];
    weighted_rows(&w, values, &mut out);
    Ok(out)
}

/// Attention over the concatenation `[K_D; K]`, `[V_D; V]` with one softmax.
pub fn augmented_forward_direct(
    q_row: &[f64],
    keys: &Matrix,
    values: &Matrix,
    ctx: &AugmentedContext,
) -> Result<Vec<f64>> {
    check_row_inputs(q_row, keys, values)?;
    check_ctx(q_row, ctx)?;
    let all_keys = ctx.k_d.vstack(keys)?;
    let all_values = ctx.v_d.vstack(values)?;
    sa_forward(q_row, &all_keys, &all_values)
}

/// The α/β decomposition of context-augmented attention for one row.
pub fn decompose(
    q_row: &[f64],
    keys: &Matrix,
    values: &Matrix,
    ctx: &AugmentedContext,
) -> Result<DecompositionResult> {
    check_row_inputs(q_row, keys, values)?;
    check_ctx(q_row, ctx)?;
    let d_h = q_row.len();
    let scale = 1.0 / (d_h as f64).sqrt();
    let demo = scores(q_row, &ctx.k_d, scale);
    let query = scores(q_row, keys, scale);
    let c = coefficients(&demo, &query)?;
    let mut sa_out = vec![0.0; d_h];
    weighted_rows(&c.weights, values, &mut sa_out);
    let mut shift = vec![0.0; d_h];
    weighted_rows(&c.beta, &ctx.v_d, &mut shift);
    let combined = sa_out
        .iter()
        .zip(&shift)
        .map(|(s, h)| c.alpha * s + h)
        .collect();
    Ok(DecompositionResult {
        alpha: c.alpha,
        beta: c.beta,
        sa_out,
        shift,
        combined,
    })
}

/// Cached coefficients from [`attend`], consumed by [`attend_backward`].
#[derive(Debug, Clone)]
pub struct AttendCache {
    num_heads: usize,
    seq_len: usize,
    causal: bool,
    mode: CombineMode,
    rows: Vec<Coefficients>,
}

impl AttendCache {
    /// α for `(head, row)`.
    pub fn alpha(&self, head: usize, row: usize) -> f64 {
        self.rows[head * self.seq_len + row].alpha
    }

    pub fn beta(&self, head: usize, row: usize) -> &[f64] {
        &self.rows[head * self.seq_len + row].beta
    }
}

/// Gradients of [`attend`] inputs.
#[derive(Debug, Clone)]
pub struct AttendGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
    /// Per head `(dK_D, dV_D)`; empty when no context was supplied.
    pub dctx: Vec<(Matrix, Matrix)>,
}

fn visible(causal: bool, row: usize, t: usize) -> usize {
    if causal {
        row + 1
    } else {
        t
    }
}

/// Multi-head attention on already projected `Q, K, V` (each `T × d_model`,
/// heads laid out as contiguous column blocks). Returns the concatenated head
/// outputs, before any output projection.
pub fn attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    num_heads: usize,
    ctx: Option<&[AugmentedContext]>,
    causal: bool,
    mode: CombineMode,
) -> Result<(Matrix, AttendCache)> {
    let (t, d_model) = q.shape();
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::Dimension {
            op: "attend",
            left: q.shape_str(),
            right: format!("{} / {}", k.shape_str(), v.shape_str()),
        });
    }
    if t == 0 {
        return Err(domain_err("attention over an empty sequence"));
    }
    if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
        return Err(config_err(format!(
            "d_model {d_model} not divisible into {num_heads} heads"
        )));
    }
    if let Some(c) = ctx {
        if c.len() != num_heads {
            return Err(config_err(format!(
                "context list has {} entries for {num_heads} heads",
                c.len()
            )));
        }
    }
    let d_h = d_model / num_heads;
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut out = Matrix::zeros(t, d_model);
    let mut rows = Vec::with_capacity(num_heads * t);
    let mut query_scores = Vec::with_capacity(t);
    for h in 0..num_heads {
        let off = h * d_h;
        let head_ctx = ctx.map(|c| &c[h]);
        if let Some(c) = head_ctx {
            if c.slots() > 0 && (c.k_d.cols() != d_h || c.v_d.cols() != d_h) {
                return Err(Error::Dimension {
                    op: "attend context",
                    left: format!("d_h {d_h}"),
                    right: c.k_d.shape_str(),
                });
            }
        }
        for i in 0..t {
            let qi = &q.row(i)[off..off + d_h];
            let demo: Vec<f64> = match head_ctx {
                Some(c) => (0..c.slots()).map(|j| dot(qi, c.k_d.row(j)) * scale).collect(),
                None => Vec::new(),
            };
            query_scores.clear();
            for j in 0..visible(causal, i, t) {
                query_scores.push(dot(qi, &k.row(j)[off..off + d_h]) * scale);
            }
            let c = coefficients(&demo, &query_scores)?;
            let row_scale = match mode {
                CombineMode::Exact => c.alpha,
                CombineMode::AlphaOne => 1.0,
            };
            let o = &mut out.row_mut(i)[off..off + d_h];
            for (j, &w) in c.weights.iter().enumerate() {
                let coef = row_scale * w;
                for (oo, vv) in o.iter_mut().zip(&v.row(j)[off..off + d_h]) {
                    *oo += coef * vv;
                }
            }
            if let Some(hc) = head_ctx {
                for (j, &b) in c.beta.iter().enumerate() {
                    for (oo, vv) in o.iter_mut().zip(hc.v_d.row(j)) {
                        *oo += b * vv;
                    }
                }
            }
            rows.push(c);
        }
    }
    Ok((
        out,
        AttendCache {
            num_heads,
            seq_len: t,
            causal,
            mode,
            rows,
        },
    ))
}

/// Reverse-mode pass of [`attend`] given the upstream gradient `d_out`.
pub fn attend_backward(
    cache: &AttendCache,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    ctx: Option<&[AugmentedContext]>,
    d_out: &Matrix,
) -> Result<AttendGrads> {
    let (t, d_model) = q.shape();
    if d_out.shape() != q.shape() || t != cache.seq_len {
        return Err(Error::Dimension {
            op: "attend_backward",
            left: q.shape_str(),
            right: d_out.shape_str(),
        });
    }
    let num_heads = cache.num_heads;
    let d_h = d_model / num_heads;
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut dq = Matrix::zeros(t, d_model);
    let mut dk = Matrix::zeros(t, d_model);
    let mut dv = Matrix::zeros(t, d_model);
    let mut dctx: Vec<(Matrix, Matrix)> = match ctx {
        Some(c) => c
            .iter()
            .map(|hc| (Matrix::zeros(hc.slots(), d_h), Matrix::zeros(hc.slots(), d_h)))
            .collect(),
        None => Vec::new(),
    };
    let mut ds_k = Vec::with_capacity(t);
    let mut ds_d = Vec::new();
    for h in 0..num_heads {
        let off = h * d_h;
        let head_ctx = ctx.map(|c| &c[h]);
        for i in 0..t {
            let c = &cache.rows[h * t + i];
            let g = &d_out.row(i)[off..off + d_h];
            let n_vis = visible(cache.causal, i, t);
            let m = c.beta.len();
            ds_k.clear();
            ds_d.clear();
            // d/d(weights) and d/d(beta) before the softmax Jacobians.
            let dw: Vec<f64> = (0..n_vis).map(|j| dot(g, &v.row(j)[off..off + d_h])).collect();
            let dbeta: Vec<f64> = match head_ctx {
                Some(hc) => (0..m).map(|j| dot(g, hc.v_d.row(j))).collect(),
                None => Vec::new(),
            };
            match cache.mode {
                CombineMode::Exact => {
                    let avg: f64 = c.beta.iter().zip(&dbeta).map(|(b, d)| b * d).sum::<f64>()
                        + c.alpha * c.weights.iter().zip(&dw).map(|(w, d)| w * d).sum::<f64>();
                    for j in 0..m {
                        ds_d.push(c.beta[j] * (dbeta[j] - avg));
                    }
                    for j in 0..n_vis {
                        ds_k.push(c.alpha * c.weights[j] * (dw[j] - avg));
                    }
                    for (j, &w) in c.weights.iter().enumerate() {
                        let coef = c.alpha * w;
                        for (d, gg) in dv.row_mut(j)[off..off + d_h].iter_mut().zip(g) {
                            *d += coef * gg;
                        }
                    }
                }
                CombineMode::AlphaOne => {
                    let avg_w: f64 = c.weights.iter().zip(&dw).map(|(w, d)| w * d).sum();
                    let avg_b: f64 = c.beta.iter().zip(&dbeta).map(|(b, d)| b * d).sum();
                    for j in 0..m {
                        ds_d.push(c.beta[j] * (dbeta[j] - avg_b));
                    }
                    for j in 0..n_vis {
                        let w = c.weights[j];
                        ds_k.push(w * (dw[j] - avg_w) - c.alpha * w * avg_b);
                    }
                    for (j, &w) in c.weights.iter().enumerate() {
                        for (d, gg) in dv.row_mut(j)[off..off + d_h].iter_mut().zip(g) {
                            *d += w * gg;
                        }
                    }
                }
            }
            let qi = &q.row(i)[off..off + d_h];
            {
                let dqi = &mut dq.row_mut(i)[off..off + d_h];
                for (j, &s) in ds_k.iter().enumerate() {
                    let kj = &k.row(j)[off..off + d_h];
                    for (d, kk) in dqi.iter_mut().zip(kj) {
                        *d += scale * s * kk;
                    }
                }
            }
            for (j, &s) in ds_k.iter().enumerate() {
                for (d, qq) in dk.row_mut(j)[off..off + d_h].iter_mut().zip(qi) {
                    *d += scale * s * qq;
                }
            }
            if let Some(hc) = head_ctx {
                let dqi = &mut dq.row_mut(i)[off..off + d_h];
                for (j, &s) in ds_d.iter().enumerate() {
                    for (d, kk) in dqi.iter_mut().zip(hc.k_d.row(j)) {
                        *d += scale * s * kk;
                    }
                }
                let (dkd, dvd) = &mut dctx[h];
                for (j, &s) in ds_d.iter().enumerate() {
                    for (d, qq) in dkd.row_mut(j).iter_mut().zip(qi) {
                        *d += scale * s * qq;
                    }
                    let b = c.beta[j];
                    for (d, gg) in dvd.row_mut(j).iter_mut().zip(g) {
                        *d += b * gg;
                    }
                }
            }
        }
    }
    Ok(AttendGrads { dq, dk, dv, dctx })
}

/// Reference multi-head forward: per-head projections, per-row
/// decomposition, concatenation and output projection.
pub fn mha_forward(
    x: &Matrix,
    params: &MhaParams,
    ctx_per_head: Option<&[AugmentedContext]>,
    causal: bool,
) -> Result<Matrix> {
    let num_heads = params.heads.len();
    if let Some(c) = ctx_per_head {
        if c.len() != num_heads {
            return Err(config_err(format!(
                "context list has {} entries for {num_heads} heads",
                c.len()
            )));
        }
    }
    let t = x.rows();
    let d_model = x.cols();
    if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
        return Err(config_err(format!(
            "d_model {d_model} not divisible into {num_heads} heads"
        )));
    }
    let d_h = d_model / num_heads;
    let mut concat = Matrix::zeros(t, d_model);
    for (h, hp) in params.heads.iter().enumerate() {
        if hp.head_dim() != d_h {
            return Err(config_err(format!(
                "head {h} has dim {} but d_model/heads = {d_h}",
                hp.head_dim()
            )));
        }
        let q = x.matmul(&hp.w_q)?;
        let k = x.matmul(&hp.w_k)?;
        let v = x.matmul(&hp.w_v)?;
        let empty = AugmentedContext::empty(d_h);
        let c = ctx_per_head.map_or(&empty, |c| &c[h]);
        for i in 0..t {
            let n_vis = visible(causal, i, t);
            let keys = Matrix::from_vec(n_vis, d_h, k.data()[..n_vis * d_h].to_vec())?;
            let values = Matrix::from_vec(n_vis, d_h, v.data()[..n_vis * d_h].to_vec())?;
            let r = decompose(q.row(i), &keys, &values, c)?;
            concat.row_mut(i)[h * d_h..(h + 1) * d_h].copy_from_slice(&r.combined);
        }
    }
    concat.matmul(&params.w_o)
}
