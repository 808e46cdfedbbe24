//! Trainable adaptation mechanisms attached to a frozen transformer:
//! low-rank virtual key-value slots, LoRA on the attention projections and a
//! per-head linear shift baseline.

use log::warn;

use crate::attention::{AugmentedContext, CombineMode};
use crate::error::{config_err, Result};
use crate::model::ModelConfig;
use crate::numcore::{Matrix, Rng};
use crate::params::ParamSet;

/// Standard deviation for the random factors of virtual keys/values.
pub const VIRTUAL_INIT_STD: f64 = 0.02;

/// Ablation switches for the virtual key-value adapter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationFlags {
    /// Learn `K_learn` as a dense `n × d_h` matrix.
    pub no_lowrank_k: bool,
    /// Learn `V_learn` as a dense `n × d_h` matrix.
    pub no_lowrank_v: bool,
    /// Force α = 1 in the combine step (β untouched).
    pub alpha_one: bool,
    /// Add the hidden-state alignment loss against a demo-conditioned teacher.
    pub teacher: bool,
}

impl AblationFlags {
    pub fn combine_mode(&self) -> CombineMode {
        if self.alpha_one {
            CombineMode::AlphaOne
        } else {
            CombineMode::Exact
        }
    }
}

/// A virtual key or value matrix, either factored `a·b` or dense.
#[derive(Debug, Clone, PartialEq)]
pub enum Factored {
    LowRank { a: Matrix, b: Matrix },
    Dense(Matrix),
}

impl Factored {
    pub fn materialize(&self) -> Matrix {
        match self {
            Factored::LowRank { a, b } => a.matmul(b).expect("factor shapes fixed at init"),
            Factored::Dense(m) => m.clone(),
        }
    }

    /// Accumulates the gradient of the factors given `d` = dL/d(materialized).
    fn accumulate_grad(&self, d: &Matrix, grad: &mut Factored) -> Result<()> {
        match (self, grad) {
            (Factored::LowRank { a, b }, Factored::LowRank { a: ga, b: gb }) => {
                ga.add_assign(&d.matmul_t(b)?)?;
                a.t_matmul_acc(d, gb)?;
            }
            (Factored::Dense(_), Factored::Dense(g)) => g.add_assign(d)?,
            _ => return Err(config_err("gradient layout does not match factorization")),
        }
        Ok(())
    }

    fn count(&self) -> usize {
        match self {
            Factored::LowRank { a, b } => a.len() + b.len(),
            Factored::Dense(m) => m.len(),
        }
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        match self {
            Factored::LowRank { a, b } => {
                out.push((format!("{prefix}_a"), a));
                out.push((format!("{prefix}_b"), b));
            }
            Factored::Dense(m) => out.push((format!("{prefix}_dense"), m)),
        }
    }

    fn push_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        match self {
            Factored::LowRank { a, b } => {
                out.push((format!("{prefix}_a"), a));
                out.push((format!("{prefix}_b"), b));
            }
            Factored::Dense(m) => out.push((format!("{prefix}_dense"), m)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadVirtual {
    pub key: Factored,
    pub value: Factored,
}

/// Shape of a virtual key-value adapter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualKvShape {
    pub slots: usize,
    pub rank: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Layers that receive virtual slots; `None` means all of them.
    pub layers: Option<Vec<usize>>,
}

impl VirtualKvShape {
    pub fn for_model(cfg: &ModelConfig, slots: usize, rank: usize) -> Self {
        Self {
            slots,
            rank,
            num_layers: cfg.num_layers,
            num_heads: cfg.num_heads,
            head_dim: cfg.head_dim(),
            layers: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.head_dim == 0 || self.num_heads == 0 {
            return Err(config_err("virtual slots, heads and head dim must be positive"));
        }
        if self.rank == 0 {
            return Err(config_err("rank must be >= 1"));
        }
        if self.rank > self.slots || self.rank > self.head_dim {
            return Err(config_err(format!(
                "rank {} exceeds min(n = {}, d_h = {})",
                self.rank, self.slots, self.head_dim
            )));
        }
        if 2 * self.rank > self.head_dim {
            warn!(
                "rank {} is not small relative to head dim {}",
                self.rank, self.head_dim
            );
        }
        if let Some(ls) = &self.layers {
            if let Some(&bad) = ls.iter().find(|&&l| l >= self.num_layers) {
                return Err(config_err(format!("layer {bad} out of range")));
            }
        }
        Ok(())
    }

    fn is_adapted(&self, layer: usize) -> bool {
        self.layers.as_ref().is_none_or(|ls| ls.contains(&layer))
    }
}

/// Per-layer, per-head learnable virtual key-value pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualKV {
    pub shape: VirtualKvShape,
    /// `None` for layers without virtual slots.
    pub layers: Vec<Option<Vec<HeadVirtual>>>,
}

/// Fresh virtual slots: value up-projections are zero so the shift term
/// starts at exactly zero.
pub fn init_virtual_kv(rng: &mut Rng, shape: &VirtualKvShape, flags: &AblationFlags) -> Result<VirtualKV> {
    shape.validate()?;
    let (n, r, d) = (shape.slots, shape.rank, shape.head_dim);
    let std = VIRTUAL_INIT_STD;
    let layers = (0..shape.num_layers)
        .map(|l| {
            shape.is_adapted(l).then(|| {
                (0..shape.num_heads)
                    .map(|_| {
                        let key = if flags.no_lowrank_k {
                            Factored::Dense(rng.normal_matrix(n, d, std))
                        } else {
                            Factored::LowRank {
                                a: rng.normal_matrix(n, r, std),
                                b: rng.normal_matrix(r, d, std),
                            }
                        };
                        let value = if flags.no_lowrank_v {
                            Factored::Dense(Matrix::zeros(n, d))
                        } else {
                            Factored::LowRank {
                                a: rng.normal_matrix(n, r, std),
                                b: Matrix::zeros(r, d),
                            }
                        };
                        HeadVirtual { key, value }
                    })
                    .collect()
            })
        })
        .collect();
    Ok(VirtualKV {
        shape: shape.clone(),
        layers,
    })
}

impl VirtualKV {
    /// Materialized `(K_learn, V_learn)` for one head.
    pub fn build_virtual_context(&self, layer: usize, head: usize) -> Result<AugmentedContext> {
        let hv = self
            .layers
            .get(layer)
            .ok_or_else(|| config_err(format!("layer {layer} out of range")))?
            .as_ref()
            .ok_or_else(|| config_err(format!("layer {layer} has no virtual slots")))?
            .get(head)
            .ok_or_else(|| config_err(format!("head {head} out of range")))?;
        AugmentedContext::new(hv.key.materialize(), hv.value.materialize())
    }

    /// Contexts for every head of `layer`, or `None` if the layer is not adapted.
    pub fn layer_contexts(&self, layer: usize) -> Result<Option<Vec<AugmentedContext>>> {
        match self.layers.get(layer) {
            Some(Some(heads)) => (0..heads.len())
                .map(|h| self.build_virtual_context(layer, h))
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(None) => Ok(None),
            None => Err(config_err(format!("layer {layer} out of range"))),
        }
    }

    pub(crate) fn accumulate_layer_grads(
        &self,
        layer: usize,
        dctx: &[(Matrix, Matrix)],
        grad: &mut VirtualKV,
    ) -> Result<()> {
        let (Some(heads), Some(gheads)) = (&self.layers[layer], &mut grad.layers[layer]) else {
            return Ok(());
        };
        for ((hv, g), (dk, dv)) in heads.iter().zip(gheads.iter_mut()).zip(dctx) {
            hv.key.accumulate_grad(dk, &mut g.key)?;
            hv.value.accumulate_grad(dv, &mut g.value)?;
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .flatten()
            .map(|h| h.key.count() + h.value.count())
            .sum()
    }
}

impl ParamSet for VirtualKV {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, hv) in layer.iter().flatten().enumerate() {
                hv.key.push_tensors(&format!("vkv.l{l}.h{h}.k"), &mut out);
                hv.value.push_tensors(&format!("vkv.l{l}.h{h}.v"), &mut out);
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, hv) in layer.iter_mut().flatten().enumerate() {
                hv.key.push_tensors_mut(&format!("vkv.l{l}.h{h}.k"), &mut out);
                hv.value.push_tensors_mut(&format!("vkv.l{l}.h{h}.v"), &mut out);
            }
        }
        out
    }
}

/// Closed-form trainable count of a virtual key-value adapter.
pub fn virtual_kv_count(shape: &VirtualKvShape, flags: &AblationFlags) -> usize {
    let (n, r, d) = (shape.slots, shape.rank, shape.head_dim);
    let side = |dense: bool| if dense { n * d } else { r * (n + d) };
    let layers = shape.layers.as_ref().map_or(shape.num_layers, Vec::len);
    layers * shape.num_heads * (side(flags.no_lowrank_k) + side(flags.no_lowrank_v))
}

/// Virtual slots plus the switches that change how they are used.
#[derive(Debug, Clone, PartialEq)]
pub struct HificlAdapter {
    pub vkv: VirtualKV,
    pub flags: AblationFlags,
}

/// Low-rank update `a·b` for one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraPair {
    pub fn delta(&self, scale: f64) -> Matrix {
        self.a.matmul(&self.b).expect("lora shapes fixed at init").scale(scale)
    }
}

/// Attention projections a LoRA layer adapts, in storage order.
pub const LORA_TARGETS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub q: LoraPair,
    pub k: LoraPair,
    pub v: LoraPair,
    pub o: LoraPair,
}

impl LoraLayer {
    pub fn pairs(&self) -> [&LoraPair; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    pub fn pairs_mut(&mut self) -> [&mut LoraPair; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

/// Weight-space LoRA on every attention projection: `W + scale · a·b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scale: f64,
    pub layers: Vec<LoraLayer>,
}

impl LoraAdapter {
    /// `a ~ N(0, 1/d_in)`, `b = 0`.
    pub fn new(rng: &mut Rng, cfg: &ModelConfig, rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(config_err("LoRA rank must be >= 1"));
        }
        let d = cfg.d_model;
        if rank > d {
            return Err(config_err(format!("LoRA rank {rank} exceeds d_model {d}")));
        }
        let std = 1.0 / (d as f64).sqrt();
        let mut pair = || LoraPair {
            a: rng.normal_matrix(d, rank, std),
            b: Matrix::zeros(rank, d),
        };
        let layers = (0..cfg.num_layers)
            .map(|_| LoraLayer {
                q: pair(),
                k: pair(),
                v: pair(),
                o: pair(),
            })
            .collect();
        Ok(Self {
            rank,
            scale: 1.0,
            layers,
        })
    }
}

impl ParamSet for LoraAdapter {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, p) in LORA_TARGETS.iter().zip(layer.pairs()) {
                out.push((format!("lora.l{l}.{name}.a"), &p.a));
                out.push((format!("lora.l{l}.{name}.b"), &p.b));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, p) in LORA_TARGETS.iter().zip(layer.pairs_mut()) {
                out.push((format!("lora.l{l}.{name}.a"), &mut p.a));
                out.push((format!("lora.l{l}.{name}.b"), &mut p.b));
            }
        }
        out
    }
}

/// Closed-form LoRA count: every layer adapts four `d_model × d_model` maps.
pub fn lora_count(cfg: &ModelConfig, rank: usize) -> usize {
    cfg.num_layers * LORA_TARGETS.len() * rank * (cfg.d_model + cfg.d_model)
}

/// One head's shift: `head_out + tanh(q·gate_w + gate_b) · direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadShift {
    /// `1 × d_h`
    pub direction: Matrix,
    /// `d_h × 1`
    pub gate_w: Matrix,
    /// `1 × 1`
    pub gate_b: Matrix,
}

impl HeadShift {
    pub fn magnitude(&self, q_row: &[f64]) -> f64 {
        let z: f64 = q_row
            .iter()
            .zip(self.gate_w.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self.gate_b.data()[0];
        z.tanh()
    }
}

/// Linear-shift baseline: a fixed direction per head scaled by a bounded,
/// query-dependent magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftAdapter {
    pub layers: Vec<Vec<HeadShift>>,
}

impl ShiftAdapter {
    /// Directions start at zero (adapted model = base model); gate weights
    /// `~ N(0, 1/d_h)` so the magnitude is not stuck at zero.
    pub fn new(rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let d_h = cfg.head_dim();
        let std = 1.0 / (d_h as f64).sqrt();
        let layers = (0..cfg.num_layers)
            .map(|_| {
                (0..cfg.num_heads)
                    .map(|_| HeadShift {
                        direction: Matrix::zeros(1, d_h),
                        gate_w: rng.normal_matrix(d_h, 1, std),
                        gate_b: Matrix::zeros(1, 1),
                    })
                    .collect()
            })
            .collect();
        Self { layers }
    }
}

impl ParamSet for ShiftAdapter {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, s) in layer.iter().enumerate() {
                out.push((format!("shift.l{l}.h{h}.direction"), &s.direction));
                out.push((format!("shift.l{l}.h{h}.gate_w"), &s.gate_w));
                out.push((format!("shift.l{l}.h{h}.gate_b"), &s.gate_b));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, s) in layer.iter_mut().enumerate() {
                out.push((format!("shift.l{l}.h{h}.direction"), &mut s.direction));
                out.push((format!("shift.l{l}.h{h}.gate_w"), &mut s.gate_w));
                out.push((format!("shift.l{l}.h{h}.gate_b"), &mut s.gate_b));
            }
        }
        out
    }
}

pub fn shift_count(cfg: &ModelConfig) -> usize {
    cfg.num_layers * cfg.num_heads * (2 * cfg.head_dim() + 1)
}

/// Any trainable adapter the model forward can host.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Hificl(HificlAdapter),
    Lora(LoraAdapter),
    Shift(ShiftAdapter),
}

impl Adapter {
    pub fn kind(&self) -> &'static str {
        match self {
            Adapter::Hificl(_) => "hificl",
            Adapter::Lora(_) => "lora",
            Adapter::Shift(_) => "shift",
        }
    }
}

impl ParamSet for Adapter {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        match self {
            Adapter::Hificl(h) => h.vkv.tensors(),
            Adapter::Lora(l) => l.tensors(),
            Adapter::Shift(s) => s.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        match self {
            Adapter::Hificl(h) => h.vkv.tensors_mut(),
            Adapter::Lora(l) => l.tensors_mut(),
            Adapter::Shift(s) => s.tensors_mut(),
        }
    }
}
