//! Finite-difference checks of the hand-written backward pass on a small
//! model and task, through the same per-example losses the trainers use.

use crate::adapters::Adapter;
use crate::error::Result;
use crate::model::{argmax, backward, forward_cached, task_loss_grad, ModelConfig, Trainable, TransformerParams};
use crate::numcore::{finite_diff_grad, max_rel_err, Rng, DEFAULT_FD_STEP};
use crate::params::ParamSet;
use crate::tasks::{gen_episode, pretrain_sequence, Episode, Layout, MappingMode, PretrainKind, TaskSpec};
use crate::trainer::{adapter_example_grad, new_adapter, pretrain_map, Method, TrainConfig};

/// Relative-error bound every gradient check must meet.
pub const GRAD_TOL: f64 = 1e-5;

pub fn small_model() -> ModelConfig {
    ModelConfig {
        vocab: 11,
        d_model: 8,
        num_heads: 2,
        num_layers: 2,
        d_ff: 12,
        max_seq_len: 10,
    }
}

/// Task that fits `small_model`: 9 tokens, 2-shot prompts of 8 inputs.
pub fn small_task(seed: u64) -> TaskSpec {
    TaskSpec {
        num_symbols: 4,
        num_labels: 3,
        k_shots: 2,
        mapping: MappingMode::EpisodicRandom,
        seed,
        ..TaskSpec::default()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub seed: u64,
    pub params: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

fn small_train_config(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        seed,
        n: 4,
        r: 2,
        lora_rank: 2,
        teacher_shots: 2,
        ..TrainConfig::default()
    }
}

/// Fresh adapter with every tensor moved off its init so that zero-initialised
/// factors (value factors, LoRA `b`, shift directions) carry gradient.
fn perturbed_adapter(model: &ModelConfig, cfg: &TrainConfig, rng: &mut Rng) -> Result<Adapter> {
    let mut a = new_adapter(model, cfg, rng)?;
    for (_, m) in a.tensors_mut() {
        for v in m.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    Ok(a)
}

fn random_base(model: &ModelConfig, seed: u64) -> Result<TransformerParams> {
    TransformerParams::init(model, &mut Rng::derive(seed, 0x6C4))
}

/// Checks the adapter gradient of `method`'s per-example training loss,
/// including the teacher alignment term for the teacher variant.
pub fn check_adapter(method: Method, seed: u64) -> Result<GradCheck> {
    let model = small_model();
    let task = small_task(seed);
    let layout = Layout::from(&task);
    let base = random_base(&model, seed)?;
    let mut rng = Rng::derive(seed, 0x6C5);
    let cfg = small_train_config(method, seed);
    let adapter = perturbed_adapter(&model, &cfg, &mut rng)?;
    let ep: Episode = gen_episode(&task, &mut rng)?;
    let (_, grad) = adapter_example_grad(&base, &adapter, &ep, layout, &cfg)?;
    let fd = finite_diff_grad(
        |x| {
            let mut a = adapter.clone();
            a.assign_flat(x)?;
            Ok(adapter_example_grad(&base, &a, &ep, layout, &cfg)?.0)
        },
        &adapter.flatten(),
        DEFAULT_FD_STEP,
    )?;
    Ok(GradCheck {
        name: method.name().to_string(),
        seed,
        params: adapter.num_params(),
        max_rel_err: max_rel_err(&grad.flatten(), &fd),
    })
}

/// Checks every base parameter's gradient on a pretraining sequence with
/// several supervised positions.
pub fn check_base(seed: u64) -> Result<GradCheck> {
    let model = small_model();
    let task = small_task(seed);
    let base = random_base(&model, seed)?;
    let map = pretrain_map(&task, seed);
    let mut rng = Rng::derive(seed, 0x6C6);
    let (inputs, targets) = pretrain_sequence(&task, PretrainKind::GlobalMap, &map, &mut rng)?;
    let loss = |p: &TransformerParams| -> Result<(f64, TransformerParams)> {
        let (out, cache) = forward_cached(p, &inputs, None)?;
        let (loss, dlogits) = task_loss_grad(&out.logits, &targets)?;
        let g = backward(p, None, &cache, &dlogits, None, Trainable::Base)?;
        Ok((loss, g.base.expect("base gradients requested")))
    };
    let (_, grad) = loss(&base)?;
    let fd = finite_diff_grad(
        |x| {
            let mut p = base.clone();
            p.assign_flat(x)?;
            let (out, _) = forward_cached(&p, &inputs, None)?;
            Ok(task_loss_grad(&out.logits, &targets)?.0)
        },
        &base.flatten(),
        DEFAULT_FD_STEP,
    )?;
    Ok(GradCheck {
        name: Method::BasePretrain.name().to_string(),
        seed,
        params: base.num_params(),
        max_rel_err: max_rel_err(&grad.flatten(), &fd),
    })
}

/// Every gradient check for each seed: the base model and all adapter methods.
pub fn check_all(seeds: &[u64]) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for &seed in seeds {
        out.push(check_base(seed)?);
        for m in Method::ADAPTERS {
            out.push(check_adapter(m, seed)?);
        }
    }
    Ok(out)
}

/// Gradient norm of a shift adapter on a batch the base already fits with
/// near-certainty: the output head is scaled up and each target is the
/// argmax of its logits row.
pub fn saturated_grad_norm(seed: u64) -> Result<f64> {
    let model = small_model();
    let task = small_task(seed);
    let layout = Layout::from(&task);
    let mut base = random_base(&model, seed)?;
    base.w_out.scale_in_place(1e4);
    let mut rng = Rng::derive(seed, 0x6C7);
    let cfg = small_train_config(Method::Shift, seed);
    let adapter = new_adapter(&model, &cfg, &mut rng)?;
    let mut total = adapter.zeros_like();
    let batch = 4;
    for _ in 0..batch {
        let ep = gen_episode(&task, &mut rng)?;
        let (inputs, _) = ep.training_pair(layout, task.k_shots);
        let (out, cache) = forward_cached(&base, &inputs, Some(&adapter))?;
        let targets: Vec<Option<usize>> = (0..out.logits.rows()).map(|i| Some(argmax(out.logits.row(i)))).collect();
        let (_, dlogits) = task_loss_grad(&out.logits, &targets)?;
        let g = backward(&base, Some(&adapter), &cache, &dlogits, None, Trainable::Adapter)?;
        total.axpy(1.0, &g.adapter.expect("adapter gradients requested"))?;
    }
    total.scale_all(1.0 / batch as f64);
    Ok(total.global_norm())
}
