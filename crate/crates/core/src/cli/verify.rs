//! Self-contained verification suite: decomposition identity, coefficient
//! law, gradient checks, zero-init contracts and checkpoint round trips.

use std::fmt;

use crate::adapters::{Adapter, LoraAdapter, ShiftAdapter};
use crate::attention::{augmented_forward_direct, decompose, AugmentedContext};
use crate::checkpoint::{adapter_from_checkpoint, adapter_to_checkpoint, base_from_checkpoint, base_to_checkpoint, Checkpoint};
use crate::error::Result;
use crate::gradcheck::{check_all, saturated_grad_norm, GRAD_TOL};
use crate::model::{forward, ModelConfig, TransformerParams};
use crate::numcore::{Matrix, Rng};
use crate::params::ParamSet;
use crate::trainer::{new_adapter, Method, TrainConfig};

pub const IDENTITY_TOL: f64 = 1e-9;
pub const COEFF_TOL: f64 = 1e-12;
pub const SATURATED_TOL: f64 = 1e-6;

const HEAD_DIMS: [usize; 3] = [1, 4, 16];
const MAX_SLOTS: usize = 8;
const MAX_KEYS: usize = 8;
const SCORE_BOOST: f64 = 50.0;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub max_error: f64,
    pub tol: f64,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<14} max_err={:.3e} tol={:.0e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tol,
            self.detail
        )
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub warnings: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for w in &self.warnings {
            writeln!(f, "WARNING {w}")?;
        }
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        write!(f, "{}", if self.passed() { "verify: all checks passed" } else { "verify: FAILED" })
    }
}

/// One randomly drawn decomposition instance.
#[derive(Debug, Clone)]
pub struct IdentityInstance {
    pub seed: u64,
    pub q: Vec<f64>,
    pub keys: Matrix,
    pub values: Matrix,
    pub ctx: AugmentedContext,
}

/// Draws the instance for `seed`: a head size from {1, 4, 16}, 0..=8 context
/// slots, 1..=8 query-segment keys and, for every other seed, queries and
/// keys boosted 50× so scores reach the hundreds.
pub fn identity_instance(seed: u64) -> IdentityInstance {
    let mut rng = Rng::new(seed);
    let d_h = HEAD_DIMS[rng.below(HEAD_DIMS.len())];
    let m = rng.below(MAX_SLOTS + 1);
    let t = 1 + rng.below(MAX_KEYS);
    let boost = if rng.below(2) == 1 { SCORE_BOOST.sqrt() } else { 1.0 };
    let q: Vec<f64> = (0..d_h).map(|_| boost * rng.normal()).collect();
    let keys = rng.normal_matrix(t, d_h, boost);
    let values = rng.normal_matrix(t, d_h, 1.0);
    let k_d = rng.normal_matrix(m, d_h, boost);
    let v_d = rng.normal_matrix(m, d_h, 1.0);
    let ctx = AugmentedContext::new(k_d, v_d).expect("matching shapes");
    IdentityInstance { seed, q, keys, values, ctx }
}

fn instance_seeds(seed: u64, trials: usize) -> Vec<u64> {
    let mut rng = Rng::derive(seed, 0x1DE7);
    (0..trials).map(|_| rng.next_u64()).collect()
}

/// Max over instances of `|direct − (α·SA + shift + perturb)|` and, in the
/// same pass, the worst violation of `α + Σβ = 1` and of `α = 1` at m = 0.
fn identity_and_coefficients(seed: u64, trials: usize, perturb: f64) -> Result<(CheckResult, CheckResult)> {
    let mut worst_id = (0.0f64, None::<u64>);
    let mut worst_co = (0.0f64, None::<u64>);
    let mut m0_exact = true;
    let mut m0_seen = 0;
    for s in instance_seeds(seed, trials) {
        let inst = identity_instance(s);
        let direct = augmented_forward_direct(&inst.q, &inst.keys, &inst.values, &inst.ctx)?;
        let dec = decompose(&inst.q, &inst.keys, &inst.values, &inst.ctx)?;
        let err = direct
            .iter()
            .zip(&dec.combined)
            .map(|(a, b)| (a - (b + perturb)).abs())
            .fold(0.0, f64::max);
        if err > worst_id.0 || err.is_nan() {
            worst_id = (err, Some(s));
        }
        let coeff = (dec.alpha + dec.beta.iter().sum::<f64>() - 1.0).abs();
        if coeff > worst_co.0 {
            worst_co = (coeff, Some(s));
        }
        if inst.ctx.slots() == 0 {
            m0_seen += 1;
            if dec.alpha != 1.0 {
                m0_exact = false;
                worst_co.1 = Some(s);
            }
        }
    }
    let id_pass = worst_id.0 <= IDENTITY_TOL;
    let fail_seed = |w: Option<u64>| w.map(|s| format!(" worst instance seed {s:#018x}")).unwrap_or_default();
    let identity = CheckResult {
        name: "identity",
        passed: id_pass,
        max_error: worst_id.0,
        tol: IDENTITY_TOL,
        detail: format!(
            "{trials} trials{}",
            if id_pass { String::new() } else { fail_seed(worst_id.1) }
        ),
    };
    let co_pass = worst_co.0 <= COEFF_TOL && m0_exact;
    let coefficients = CheckResult {
        name: "coefficients",
        passed: co_pass,
        max_error: worst_co.0,
        tol: COEFF_TOL,
        detail: format!(
            "{trials} trials, {m0_seen} with m=0, alpha==1 at m=0: {m0_exact}{}",
            if co_pass { String::new() } else { fail_seed(worst_co.1) }
        ),
    };
    Ok((identity, coefficients))
}

fn gradient_check(seed: u64) -> Result<Vec<CheckResult>> {
    let seeds = [seed, seed + 1, seed + 2];
    let checks = check_all(&seeds)?;
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("at least one check");
    let failing: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} seed {}", c.name, c.seed))
        .collect();
    let gradients = CheckResult {
        name: "gradients",
        passed: failing.is_empty(),
        max_error: worst.max_rel_err,
        tol: GRAD_TOL,
        detail: if failing.is_empty() {
            format!("{} checks over seeds {seeds:?}, worst {} seed {}", checks.len(), worst.name, worst.seed)
        } else {
            format!("failing: {}", failing.join(", "))
        },
    };
    let norm = saturated_grad_norm(seed)?;
    let saturated = CheckResult {
        name: "saturated-grad",
        passed: norm < SATURATED_TOL,
        max_error: norm,
        tol: SATURATED_TOL,
        detail: format!("gradient norm on a confidently fitted batch, seed {seed}"),
    };
    Ok(vec![gradients, saturated])
}

/// Fresh adapters on the default model: every virtual value and HiFICL shift
/// term is exactly zero, and LoRA, shift and α=1 adapters leave the base
/// forward pass bit-identical.
fn zero_init_check(seed: u64) -> Result<CheckResult> {
    let model = ModelConfig::default();
    let base = TransformerParams::init(&model, &mut Rng::derive(seed, 0x2E40))?;
    let mut rng = Rng::derive(seed, 0x2E41);
    let tokens: Vec<usize> = (0..26).map(|_| rng.below(model.vocab)).collect();
    let reference = forward(&base, &tokens, None)?;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for method in Method::ADAPTERS {
        let cfg = TrainConfig { method, seed, ..TrainConfig::default() };
        let adapter = new_adapter(&model, &cfg, &mut rng)?;
        if let Adapter::Hificl(h) = &adapter {
            for layer in 0..model.num_layers {
                for (head, ctx) in h.vkv.layer_contexts(layer)?.into_iter().flatten().enumerate() {
                    let d_h = ctx.k_d.cols();
                    let q: Vec<f64> = (0..d_h).map(|_| rng.normal()).collect();
                    let keys = rng.normal_matrix(4, d_h, 1.0);
                    let values = rng.normal_matrix(4, d_h, 1.0);
                    let dec = decompose(&q, &keys, &values, &ctx)?;
                    let shift = dec.shift.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    worst = worst.max(shift).max(ctx.v_d.max_abs());
                    if shift != 0.0 || ctx.v_d.max_abs() != 0.0 {
                        failures.push(format!("{method} layer {layer} head {head}"));
                    }
                }
            }
        }
        let identity_expected = matches!(adapter, Adapter::Lora(_) | Adapter::Shift(_)) || method == Method::HificlAlpha1;
        if identity_expected {
            let out = forward(&base, &tokens, Some(&adapter))?;
            let diff = out.logits.max_abs_diff(&reference.logits)?;
            worst = worst.max(diff);
            if diff != 0.0 || out.hiddens != reference.hiddens {
                failures.push(format!("{method} forward differs from base"));
            }
        }
    }
    Ok(CheckResult {
        name: "zero-init",
        passed: failures.is_empty(),
        max_error: worst,
        tol: 0.0,
        detail: if failures.is_empty() {
            format!("fresh adapters, seed {seed}")
        } else {
            failures.join("; ")
        },
    })
}

fn bits(p: &impl ParamSet) -> Vec<u64> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}

/// Base and adapter checkpoints survive a byte round trip bit for bit, and a
/// flipped byte is rejected by the CRC.
fn checkpoint_check(seed: u64) -> Result<CheckResult> {
    let model = ModelConfig::default();
    let base = TransformerParams::init(&model, &mut Rng::derive(seed, 0xC4EC))?;
    let mut failures = Vec::new();
    let bytes = base_to_checkpoint(&base).to_bytes()?;
    let back = base_from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
    if bits(&back) != bits(&base) || base_to_checkpoint(&back).to_bytes()? != bytes {
        failures.push("base".to_string());
    }
    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x10;
    if Checkpoint::from_bytes(&corrupt).is_ok() {
        failures.push("corrupted base accepted".to_string());
    }
    let mut rng = Rng::derive(seed, 0xC4ED);
    let mut adapters: Vec<(String, Adapter)> = Method::ADAPTERS
        .iter()
        .map(|&method| {
            let cfg = TrainConfig { method, seed, ..TrainConfig::default() };
            new_adapter(&model, &cfg, &mut rng).map(|a| (method.to_string(), a))
        })
        .collect::<Result<_>>()?;
    adapters.push(("lora-r2".into(), Adapter::Lora(LoraAdapter::new(&mut rng, &model, 2)?)));
    adapters.push(("shift".into(), Adapter::Shift(ShiftAdapter::new(&mut rng, &model))));
    for (name, mut a) in adapters {
        for (_, m) in a.tensors_mut() {
            for v in m.data_mut() {
                *v += rng.normal();
            }
        }
        let bytes = adapter_to_checkpoint(&a, &model).to_bytes()?;
        let (back, cfg) = adapter_from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
        if cfg != model || bits(&back) != bits(&a) || back != a || adapter_to_checkpoint(&back, &cfg).to_bytes()? != bytes {
            failures.push(name);
        }
    }
    Ok(CheckResult {
        name: "checkpoint",
        passed: failures.is_empty(),
        max_error: if failures.is_empty() { 0.0 } else { 1.0 },
        tol: 0.0,
        detail: if failures.is_empty() {
            "base and adapter round trips bit-exact, CRC rejects corruption".to_string()
        } else {
            format!("failing: {}", failures.join(", "))
        },
    })
}

/// Runs every check. `perturb` is added to each decomposed output before it
/// is compared, as a fault injection that the identity check must catch.
pub fn run_verify(seed: u64, trials: usize, perturb: f64) -> Result<VerifyReport> {
    let mut warnings = Vec::new();
    if trials == 0 {
        warnings.push("0 trials: identity and coefficient checks pass vacuously".to_string());
    }
    let (identity, coefficients) = identity_and_coefficients(seed, trials, perturb)?;
    let mut checks = vec![identity, coefficients];
    checks.extend(gradient_check(seed)?);
    checks.push(zero_init_check(seed)?);
    checks.push(checkpoint_check(seed)?);
    Ok(VerifyReport { checks, warnings })
}
