//! Tiny pre-norm decoder-only transformer with hand-derived gradients and
//! hooks for every adapter type.

use crate::adapters::Adapter;
use crate::attention::{attend, attend_backward, AttendCache, AugmentedContext, CombineMode, HeadParams, MhaParams};
use crate::error::{config_err, domain_err, Error, Result};
use crate::numcore::{log_softmax_row, Matrix, Rng};
use crate::params::ParamSet;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 32,
            num_heads: 4,
            num_layers: 2,
            d_ff: 64,
            max_seq_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(config_err(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(config_err(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub w_ff1: Matrix,
    pub b_ff1: Matrix,
    pub w_ff2: Matrix,
    pub b_ff2: Matrix,
}

impl LayerParams {
    fn named(&self) -> [(&'static str, &Matrix); 12] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w_ff1", &self.w_ff1),
            ("b_ff1", &self.b_ff1),
            ("w_ff2", &self.w_ff2),
            ("b_ff2", &self.b_ff2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 12] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w_ff1", &mut self.w_ff1),
            ("b_ff1", &mut self.b_ff1),
            ("w_ff2", &mut self.w_ff2),
            ("b_ff2", &mut self.b_ff2),
        ]
    }
}

/// Base model parameters. `frozen` marks the backbone during adapter
/// training; the trainer refuses to update a frozen set.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
    pub w_out: Matrix,
    pub frozen: bool,
}

impl TransformerParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let std_in = 1.0 / (d as f64).sqrt();
        let resid = std_in / (2.0 * cfg.num_layers as f64).sqrt();
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                ln1_g: Matrix::filled(1, d, 1.0),
                ln1_b: Matrix::zeros(1, d),
                w_q: rng.normal_matrix(d, d, std_in),
                w_k: rng.normal_matrix(d, d, std_in),
                w_v: rng.normal_matrix(d, d, std_in),
                w_o: rng.normal_matrix(d, d, resid),
                ln2_g: Matrix::filled(1, d, 1.0),
                ln2_b: Matrix::zeros(1, d),
                w_ff1: rng.normal_matrix(d, cfg.d_ff, std_in),
                b_ff1: Matrix::zeros(1, cfg.d_ff),
                w_ff2: rng.normal_matrix(cfg.d_ff, d, resid * (d as f64 / cfg.d_ff as f64).sqrt()),
                b_ff2: Matrix::zeros(1, d),
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            tok_emb: rng.normal_matrix(cfg.vocab, d, 1.0),
            pos_emb: rng.normal_matrix(cfg.max_seq_len, d, 1.0),
            layers,
            lnf_g: Matrix::filled(1, d, 1.0),
            lnf_b: Matrix::zeros(1, d),
            w_out: rng.normal_matrix(d, cfg.vocab, std_in),
            frozen: false,
        })
    }

    /// Per-head view of one layer's attention weights.
    pub fn mha_params(&self, layer: usize) -> MhaParams {
        let lp = &self.layers[layer];
        let d_h = self.config.head_dim();
        MhaParams {
            heads: (0..self.config.num_heads)
                .map(|h| HeadParams {
                    w_q: lp.w_q.col_block(h * d_h, d_h),
                    w_k: lp.w_k.col_block(h * d_h, d_h),
                    w_v: lp.w_v.col_block(h * d_h, d_h),
                })
                .collect(),
            w_o: lp.w_o.clone(),
        }
    }
}

impl ParamSet for TransformerParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, lp) in self.layers.iter().enumerate() {
            for (name, m) in lp.named() {
                out.push((format!("layer{l}.{name}"), m));
            }
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out.push(("w_out".to_string(), &self.w_out));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, lp) in self.layers.iter_mut().enumerate() {
            for (name, m) in lp.named_mut() {
                out.push((format!("layer{l}.{name}"), m));
            }
        }
        out.push(("lnf_g".to_string(), &mut self.lnf_g));
        out.push(("lnf_b".to_string(), &mut self.lnf_b));
        out.push(("w_out".to_string(), &mut self.w_out));
        out
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Matrix, g: &Matrix, b: &Matrix) -> (Matrix, LnCache) {
    let (t, d) = x.shape();
    let mut y = Matrix::zeros(t, d);
    let mut xhat = Matrix::zeros(t, d);
    let mut inv_std = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let xr = xhat.row_mut(i);
        for (o, v) in xr.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = xhat.get(i, j) * g.data()[j] + b.data()[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    cache: &LnCache,
    g: &Matrix,
    dy: &Matrix,
    grads: Option<(&mut Matrix, &mut Matrix)>,
) -> Matrix {
    let (t, d) = dy.shape();
    let mut dx = Matrix::zeros(t, d);
    if let Some((dg, db)) = grads {
        for i in 0..t {
            for j in 0..d {
                let v = dy.get(i, j);
                dg.data_mut()[j] += v * cache.xhat.get(i, j);
                db.data_mut()[j] += v;
            }
        }
    }
    let gd = g.data();
    for i in 0..t {
        let xh = cache.xhat.row(i);
        let dyr = dy.row(i);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..d {
            let dxh = dyr[j] * gd[j];
            mean_d += dxh;
            mean_dx += dxh * xh[j];
        }
        mean_d /= d as f64;
        mean_dx /= d as f64;
        let inv = cache.inv_std[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            let dxh = dyr[j] * gd[j];
            out[j] = inv * (dxh - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn add_row_bias(m: &mut Matrix, bias: &Matrix) {
    for i in 0..m.rows() {
        for (v, b) in m.row_mut(i).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

fn col_sums_into(m: &Matrix, acc: &mut Matrix) {
    for i in 0..m.rows() {
        for (a, v) in acc.data_mut().iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
}

/// Model output: logits per position plus the residual stream after each block.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub hiddens: Vec<Matrix>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    w_eff: Option<[Matrix; 4]>,
    ctx: Option<Vec<AugmentedContext>>,
    attn: AttendCache,
    attn_out: Matrix,
    shift_mag: Vec<f64>,
    ln2: LnCache,
    h2: Matrix,
    pre: Matrix,
    act: Matrix,
}

/// Activations retained by [`forward_cached`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Matrix,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(domain_err("empty token sequence"));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(domain_err(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(domain_err(format!("token id {bad} >= vocab {}", cfg.vocab)));
    }
    Ok(())
}

fn check_adapter(cfg: &ModelConfig, adapter: &Adapter) -> Result<()> {
    let bad = |what: &str| Err(config_err(format!("{what} does not match the model shape")));
    match adapter {
        Adapter::Hificl(h) => {
            let s = &h.vkv.shape;
            if s.num_layers != cfg.num_layers
                || s.num_heads != cfg.num_heads
                || s.head_dim != cfg.head_dim()
                || h.vkv.layers.len() != cfg.num_layers
            {
                return bad("virtual key-value adapter");
            }
        }
        Adapter::Lora(l) => {
            if l.layers.len() != cfg.num_layers || l.layers[0].q.a.rows() != cfg.d_model {
                return bad("LoRA adapter");
            }
        }
        Adapter::Shift(s) => {
            if s.layers.len() != cfg.num_layers
                || s.layers.iter().any(|l| l.len() != cfg.num_heads)
                || s.layers[0][0].direction.cols() != cfg.head_dim()
            {
                return bad("shift adapter");
            }
        }
    }
    Ok(())
}

/// Forward pass; `adapter` may be any trained or fresh adapter.
pub fn forward(params: &TransformerParams, tokens: &[usize], adapter: Option<&Adapter>) -> Result<ForwardOutput> {
    forward_cached(params, tokens, adapter).map(|(o, _)| o)
}

pub fn forward_cached(
    params: &TransformerParams,
    tokens: &[usize],
    adapter: Option<&Adapter>,
) -> Result<(ForwardOutput, ForwardCache)> {
    let cfg = &params.config;
    check_tokens(cfg, tokens)?;
    if let Some(a) = adapter {
        check_adapter(cfg, a)?;
    }
    let t = tokens.len();
    let d = cfg.d_model;
    let d_h = cfg.head_dim();
    let mut x = Matrix::zeros(t, d);
    for (i, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(i);
        for ((o, a), b) in row.iter_mut().zip(params.tok_emb.row(tok)).zip(params.pos_emb.row(i)) {
            *o = a + b;
        }
    }
    let mut caches = Vec::with_capacity(cfg.num_layers);
    let mut hiddens = Vec::with_capacity(cfg.num_layers);
    for (l, lp) in params.layers.iter().enumerate() {
        let x_in = x;
        let (h1, ln1) = layer_norm(&x_in, &lp.ln1_g, &lp.ln1_b);
        let w_eff = match adapter {
            Some(Adapter::Lora(lora)) => {
                let ll = &lora.layers[l];
                Some([
                    lp.w_q.add(&ll.q.delta(lora.scale))?,
                    lp.w_k.add(&ll.k.delta(lora.scale))?,
                    lp.w_v.add(&ll.v.delta(lora.scale))?,
                    lp.w_o.add(&ll.o.delta(lora.scale))?,
                ])
            }
            _ => None,
        };
        let (wq, wk, wv, wo) = match &w_eff {
            Some(w) => (&w[0], &w[1], &w[2], &w[3]),
            None => (&lp.w_q, &lp.w_k, &lp.w_v, &lp.w_o),
        };
        let q = h1.matmul(wq)?;
        let k = h1.matmul(wk)?;
        let v = h1.matmul(wv)?;
        let (ctx, mode) = match adapter {
            Some(Adapter::Hificl(hf)) => (hf.vkv.layer_contexts(l)?, hf.flags.combine_mode()),
            _ => (None, CombineMode::Exact),
        };
        let (mut attn_out, attn) = attend(&q, &k, &v, cfg.num_heads, ctx.as_deref(), true, mode)?;
        let mut shift_mag = Vec::new();
        if let Some(Adapter::Shift(s)) = adapter {
            shift_mag.reserve(t * cfg.num_heads);
            for i in 0..t {
                for (h, hs) in s.layers[l].iter().enumerate() {
                    let m = hs.magnitude(&q.row(i)[h * d_h..(h + 1) * d_h]);
                    shift_mag.push(m);
                    let dst = &mut attn_out.row_mut(i)[h * d_h..(h + 1) * d_h];
                    for (o, u) in dst.iter_mut().zip(hs.direction.data()) {
                        *o += m * u;
                    }
                }
            }
        }
        let mut x1 = attn_out.matmul(wo)?;
        x1.add_assign(&x_in)?;
        let (h2, ln2) = layer_norm(&x1, &lp.ln2_g, &lp.ln2_b);
        let mut pre = h2.matmul(&lp.w_ff1)?;
        add_row_bias(&mut pre, &lp.b_ff1);
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut x2 = act.matmul(&lp.w_ff2)?;
        add_row_bias(&mut x2, &lp.b_ff2);
        x2.add_assign(&x1)?;
        hiddens.push(x2.clone());
        caches.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            w_eff,
            ctx,
            attn,
            attn_out,
            shift_mag,
            ln2,
            h2,
            pre,
            act,
        });
        x = x2;
    }
    let (hf, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let logits = hf.matmul(&params.w_out)?;
    Ok((
        ForwardOutput { logits, hiddens },
        ForwardCache {
            tokens: tokens.to_vec(),
            layers: caches,
            lnf,
            hf,
        },
    ))
}

/// Gradients for whichever parameter sets were requested.
#[derive(Debug, Clone)]
pub struct Grads {
    pub base: Option<TransformerParams>,
    pub adapter: Option<Adapter>,
}

/// Which parameter set receives gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Base,
    Adapter,
}

/// Reverse pass. `dhiddens`, when given, are upstream gradients on the
/// per-block residual outputs (one `T × d_model` matrix per layer).
pub fn backward(
    params: &TransformerParams,
    adapter: Option<&Adapter>,
    cache: &ForwardCache,
    dlogits: &Matrix,
    dhiddens: Option<&[Matrix]>,
    trainable: Trainable,
) -> Result<Grads> {
    let cfg = &params.config;
    let t = cache.tokens.len();
    if dlogits.shape() != (t, cfg.vocab) {
        return Err(Error::Dimension {
            op: "backward",
            left: format!("{t}x{}", cfg.vocab),
            right: dlogits.shape_str(),
        });
    }
    if trainable == Trainable::Adapter && adapter.is_none() {
        return Err(config_err("adapter gradients requested without an adapter"));
    }
    let want_base = trainable == Trainable::Base;
    let mut gb = want_base.then(|| params.zeros_like());
    let mut ga = if want_base { None } else { adapter.map(|a| a.zeros_like()) };
    let d_h = cfg.head_dim();

    let mut dx = dlogits.matmul_t(&params.w_out)?;
    if let Some(g) = gb.as_mut() {
        cache.hf.t_matmul_acc(dlogits, &mut g.w_out)?;
    }
    {
        let grads = gb.as_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b));
        // dx currently holds d(hf); push it through the final norm.
        dx = layer_norm_backward(&cache.lnf, &params.lnf_g, &dx, grads);
    }

    for l in (0..cfg.num_layers).rev() {
        let lp = &params.layers[l];
        let lc = &cache.layers[l];
        if let Some(dh) = dhiddens {
            dx.add_assign(&dh[l])?;
        }
        // Feed-forward block.
        let mut glayer = gb.as_mut().map(|g| &mut g.layers[l]);
        if let Some(g) = glayer.as_deref_mut() {
            lc.act.t_matmul_acc(&dx, &mut g.w_ff2)?;
            col_sums_into(&dx, &mut g.b_ff2);
        }
        let mut dpre = dx.matmul_t(&lp.w_ff2)?;
        for (dv, pv) in dpre.data_mut().iter_mut().zip(lc.pre.data()) {
            *dv *= gelu_grad(*pv);
        }
        if let Some(g) = glayer.as_deref_mut() {
            lc.h2.t_matmul_acc(&dpre, &mut g.w_ff1)?;
            col_sums_into(&dpre, &mut g.b_ff1);
        }
        let dh2 = dpre.matmul_t(&lp.w_ff1)?;
        let dx1 = layer_norm_backward(
            &lc.ln2,
            &lp.ln2_g,
            &dh2,
            glayer.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b)),
        );
        dx.add_assign(&dx1)?;

        // Attention block.
        let (wq, wk, wv, wo) = match &lc.w_eff {
            Some(w) => (&w[0], &w[1], &w[2], &w[3]),
            None => (&lp.w_q, &lp.w_k, &lp.w_v, &lp.w_o),
        };
        let need_w = want_base || lc.w_eff.is_some();
        let d_wo = if need_w { Some(lc.attn_out.t_matmul(&dx)?) } else { None };
        let d_attn = dx.matmul_t(wo)?;
        let mut dq_shift = None;
        if let (Some(Adapter::Shift(s)), Some(Adapter::Shift(gs))) = (adapter, ga.as_mut()) {
            let mut dq = Matrix::zeros(t, cfg.d_model);
            for i in 0..t {
                for (h, hs) in s.layers[l].iter().enumerate() {
                    let m = lc.shift_mag[i * cfg.num_heads + h];
                    let g = &d_attn.row(i)[h * d_h..(h + 1) * d_h];
                    let gh = &mut gs.layers[l][h];
                    let mut dm = 0.0;
                    for ((dd, gg), u) in gh.direction.data_mut().iter_mut().zip(g).zip(hs.direction.data()) {
                        *dd += m * gg;
                        dm += gg * u;
                    }
                    let dz = dm * (1.0 - m * m);
                    let qh = &lc.q.row(i)[h * d_h..(h + 1) * d_h];
                    for (dw, qq) in gh.gate_w.data_mut().iter_mut().zip(qh) {
                        *dw += dz * qq;
                    }
                    gh.gate_b.data_mut()[0] += dz;
                    for (dqv, w) in dq.row_mut(i)[h * d_h..(h + 1) * d_h].iter_mut().zip(hs.gate_w.data()) {
                        *dqv += dz * w;
                    }
                }
            }
            dq_shift = Some(dq);
        }
        let ag = attend_backward(&lc.attn, &lc.q, &lc.k, &lc.v, lc.ctx.as_deref(), &d_attn)?;
        let mut dq = ag.dq;
        if let Some(extra) = dq_shift {
            dq.add_assign(&extra)?;
        }
        if let (Some(Adapter::Hificl(hf)), Some(Adapter::Hificl(ghf))) = (adapter, ga.as_mut()) {
            hf.vkv.accumulate_layer_grads(l, &ag.dctx, &mut ghf.vkv)?;
        }
        let mut dh1 = dq.matmul_t(wq)?;
        dh1.add_assign(&ag.dk.matmul_t(wk)?)?;
        dh1.add_assign(&ag.dv.matmul_t(wv)?)?;
        if need_w {
            let d_eff = [
                lc.h1.t_matmul(&dq)?,
                lc.h1.t_matmul(&ag.dk)?,
                lc.h1.t_matmul(&ag.dv)?,
                d_wo.expect("computed when weights need gradients"),
            ];
            if let Some(g) = glayer.as_deref_mut() {
                g.w_q.add_assign(&d_eff[0])?;
                g.w_k.add_assign(&d_eff[1])?;
                g.w_v.add_assign(&d_eff[2])?;
                g.w_o.add_assign(&d_eff[3])?;
            }
            if let (Some(Adapter::Lora(lora)), Some(Adapter::Lora(gl))) = (adapter, ga.as_mut()) {
                let pairs = lora.layers[l].pairs();
                for (j, gp) in gl.layers[l].pairs_mut().into_iter().enumerate() {
                    let dw = d_eff[j].scale(lora.scale);
                    gp.a.add_assign(&dw.matmul_t(&pairs[j].b)?)?;
                    pairs[j].a.t_matmul_acc(&dw, &mut gp.b)?;
                }
            }
        }
        let dx_in = layer_norm_backward(
            &lc.ln1,
            &lp.ln1_g,
            &dh1,
            glayer.map(|g| (&mut g.ln1_g, &mut g.ln1_b)),
        );
        dx.add_assign(&dx_in)?;
    }

    if let Some(g) = gb.as_mut() {
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let src = dx.row(i);
            for (a, b) in g.tok_emb.row_mut(tok).iter_mut().zip(src) {
                *a += b;
            }
            for (a, b) in g.pos_emb.row_mut(i).iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    Ok(Grads {
        base: gb,
        adapter: ga,
    })
}

/// Mean negative log-likelihood over positions with a target.
pub fn task_loss(logits: &Matrix, targets: &[Option<usize>]) -> Result<f64> {
    task_loss_grad(logits, targets).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits,
/// `(softmax − onehot) / count` at supervised positions.
pub fn task_loss_grad(logits: &Matrix, targets: &[Option<usize>]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(Error::Dimension {
            op: "task_loss",
            left: logits.shape_str(),
            right: format!("{} targets", targets.len()),
        });
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(domain_err("every position is masked"));
    }
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= logits.cols() {
            return Err(domain_err(format!("target {t} >= vocab {}", logits.cols())));
        }
        let lp = log_softmax_row(logits.row(i))?;
        total -= lp[t];
        let gr = grad.row_mut(i);
        for (g, l) in gr.iter_mut().zip(&lp) {
            *g = l.exp() / count as f64;
        }
        gr[t] -= 1.0 / count as f64;
    }
    Ok((total / count as f64, grad))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of `answer_len` tokens after `prompt`.
pub fn greedy_decode(
    params: &TransformerParams,
    prompt: &[usize],
    answer_len: usize,
    adapter: Option<&Adapter>,
) -> Result<(Vec<usize>, Matrix)> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(answer_len);
    let mut last_logits = Matrix::zeros(0, params.config.vocab);
    for _ in 0..answer_len {
        let f = forward(params, &seq, adapter)?;
        let row = f.logits.row(seq.len() - 1);
        let tok = argmax(row);
        last_logits = last_logits.vstack(&Matrix::row_vector(row))?;
        out.push(tok);
        seq.push(tok);
    }
    Ok((out, last_logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_virtual_kv, AblationFlags, HificlAdapter, LoraAdapter, ShiftAdapter, VirtualKvShape};
    use crate::numcore::{finite_diff_grad, max_rel_err};

    pub(crate) fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 11,
            d_model: 8,
            num_heads: 2,
            num_layers: 2,
            d_ff: 12,
            max_seq_len: 10,
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let logits = Matrix::zeros(2, 8);
        let l = task_loss(&logits, &[None, Some(3)]).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-14);
        assert!((l - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn saturated_and_hand_losses() {
        let mut logits = Matrix::zeros(1, 4);
        logits.set(0, 2, 1000.0);
        assert!(task_loss(&logits, &[Some(2)]).unwrap() < 1e-6);
        let l = task_loss(&Matrix::row_vector(&[3f64.ln(), 0.0]), &[Some(0)]).unwrap();
        assert!((l - (-(0.75f64).ln())).abs() < 1e-14);
        assert!((l - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn fully_masked_loss_is_domain_error() {
        assert!(matches!(task_loss(&Matrix::zeros(2, 3), &[None, None]), Err(Error::Domain(_))));
    }

    #[test]
    fn masked_logits_do_not_affect_loss() {
        let mut rng = Rng::new(2);
        let logits = rng.normal_matrix(3, 5, 1.0);
        let targets = [None, Some(1), None];
        let a = task_loss(&logits, &targets).unwrap();
        let mut b = logits.clone();
        b.set(0, 0, 99.0);
        b.set(2, 4, -42.0);
        assert_eq!(a, task_loss(&b, &targets).unwrap());
    }

    #[test]
    fn loss_gradient_matches_fd() {
        let mut rng = Rng::new(3);
        let logits = rng.normal_matrix(3, 5, 1.0);
        let targets = [Some(2), None, Some(4)];
        let (_, g) = task_loss_grad(&logits, &targets).unwrap();
        let fd = finite_diff_grad(
            |x| task_loss(&Matrix::from_vec(3, 5, x.to_vec()).unwrap(), &targets),
            logits.data(),
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(g.data(), &fd) < 1e-8);
    }

    #[test]
    fn overlong_and_bad_tokens_rejected() {
        let cfg = small_cfg();
        let p = TransformerParams::init(&cfg, &mut Rng::new(0)).unwrap();
        assert!(matches!(forward(&p, &[0; 11], None), Err(Error::Domain(_))));
        assert!(matches!(forward(&p, &[11], None), Err(Error::Domain(_))));
    }

    #[test]
    fn prefix_property_and_causality() {
        let cfg = small_cfg();
        let p = TransformerParams::init(&cfg, &mut Rng::new(1)).unwrap();
        let one = forward(&p, &[3], None).unwrap();
        let two = forward(&p, &[3, 7], None).unwrap();
        assert_eq!(one.logits.row(0), two.logits.row(0));
        let a = forward(&p, &[1, 2, 3, 4, 5], None).unwrap();
        let b = forward(&p, &[1, 2, 3, 9, 5], None).unwrap();
        for i in 0..3 {
            assert_eq!(a.logits.row(i), b.logits.row(i));
        }
        assert_ne!(a.logits.row(3), b.logits.row(3));
    }

    #[test]
    fn fresh_lora_reproduces_base_exactly() {
        let cfg = small_cfg();
        let p = TransformerParams::init(&cfg, &mut Rng::new(1)).unwrap();
        let lora = Adapter::Lora(LoraAdapter::new(&mut Rng::new(5), &cfg, 2).unwrap());
        let toks = [1, 4, 2, 8, 5];
        let a = forward(&p, &toks, None).unwrap();
        let b = forward(&p, &toks, Some(&lora)).unwrap();
        assert_eq!(a.logits.max_abs_diff(&b.logits).unwrap(), 0.0);
    }

    #[test]
    fn zero_direction_shift_reproduces_base_exactly() {
        let cfg = small_cfg();
        let p = TransformerParams::init(&cfg, &mut Rng::new(1)).unwrap();
        let s = Adapter::Shift(ShiftAdapter::new(&mut Rng::new(5), &cfg));
        let toks = [1, 4, 2, 8, 5];
        let a = forward(&p, &toks, None).unwrap();
        let b = forward(&p, &toks, Some(&s)).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn fresh_hificl_alpha_one_reproduces_base() {
        let cfg = small_cfg();
        let p = TransformerParams::init(&cfg, &mut Rng::new(1)).unwrap();
        let flags = AblationFlags { alpha_one: true, ..Default::default() };
        let vkv = init_virtual_kv(&mut Rng::new(2), &VirtualKvShape::for_model(&cfg, 4, 2), &flags).unwrap();
        let a = Adapter::Hificl(HificlAdapter { vkv: vkv.clone(), flags });
        let toks = [1, 4, 2, 8, 5];
        let base = forward(&p, &toks, None).unwrap();
        let out = forward(&p, &toks, Some(&a)).unwrap();
        assert_eq!(base.logits, out.logits);
        let full = Adapter::Hificl(HificlAdapter { vkv, flags: AblationFlags::default() });
        let out = forward(&p, &toks, Some(&full)).unwrap();
        assert!(base.logits.max_abs_diff(&out.logits).unwrap() > 0.0);
    }

    #[test]
    fn mha_view_matches_model_attention() {
        let cfg = small_cfg();
        let p = TransformerParams::init(&cfg, &mut Rng::new(2)).unwrap();
        let x = Rng::new(9).normal_matrix(4, cfg.d_model, 1.0);
        let lp = &p.layers[0];
        let q = x.matmul(&lp.w_q).unwrap();
        let k = x.matmul(&lp.w_k).unwrap();
        let v = x.matmul(&lp.w_v).unwrap();
        let (a, _) = attend(&q, &k, &v, cfg.num_heads, None, true, CombineMode::Exact).unwrap();
        let fused = a.matmul(&lp.w_o).unwrap();
        let reference = crate::attention::mha_forward(&x, &p.mha_params(0), None, true).unwrap();
        assert!(fused.max_abs_diff(&reference).unwrap() < 1e-12);
    }

    fn loss_of(p: &TransformerParams, a: Option<&Adapter>, toks: &[usize], tg: &[Option<usize>]) -> Result<f64> {
        let out = forward(p, toks, a)?;
        task_loss(&out.logits, tg)
    }

    #[test]
    fn base_gradients_match_fd() {
        let cfg = small_cfg();
        let p = TransformerParams::init(&cfg, &mut Rng::new(7)).unwrap();
        let toks = [1, 4, 2, 8, 5, 3];
        let tg = [None, Some(2), None, Some(5), None, Some(9)];
        let (out, cache) = forward_cached(&p, &toks, None).unwrap();
        let (_, dl) = task_loss_grad(&out.logits, &tg).unwrap();
        let g = backward(&p, None, &cache, &dl, None, Trainable::Base).unwrap();
        let analytic = g.base.unwrap().flatten();
        let fd = finite_diff_grad(
            |x| {
                let mut q = p.clone();
                q.assign_flat(x)?;
                loss_of(&q, None, &toks, &tg)
            },
            &p.flatten(),
            1e-5,
        )
        .unwrap();
        let err = max_rel_err(&analytic, &fd);
        assert!(err < 1e-5, "{err}");
    }
}
