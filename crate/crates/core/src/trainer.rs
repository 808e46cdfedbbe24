//! Training loops for adapters and the base model, teacher alignment and
//! evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::adapters::{
    init_virtual_kv, AblationFlags, Adapter, HificlAdapter, LoraAdapter, ShiftAdapter, VirtualKvShape,
};
use crate::error::{config_err, Error, Result};
use crate::model::{argmax, backward, forward, forward_cached, task_loss_grad, ModelConfig, Trainable, TransformerParams};
use crate::numcore::{log_softmax_row, Matrix, Rng};
use crate::optim::{clip_global_norm, opt_step, AdamState, AdamWConfig, Schedule};
use crate::params::ParamSet;
use crate::tasks::{gen_dataset, pretrain_sequence, Episode, Layout, PretrainKind, TaskSpec, QUERY_SEGMENT};

/// Every trainable configuration the trainer knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Hificl,
    HificlAlpha1,
    HificlTeacher,
    HificlDenseK,
    HificlDenseV,
    Lora,
    Shift,
    BasePretrain,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Hificl,
        Method::HificlAlpha1,
        Method::HificlTeacher,
        Method::HificlDenseK,
        Method::HificlDenseV,
        Method::Lora,
        Method::Shift,
        Method::BasePretrain,
    ];

    /// Methods that train an adapter on a frozen base.
    pub const ADAPTERS: [Method; 7] = [
        Method::Lora,
        Method::Shift,
        Method::Hificl,
        Method::HificlAlpha1,
        Method::HificlTeacher,
        Method::HificlDenseK,
        Method::HificlDenseV,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Hificl => "hificl",
            Method::HificlAlpha1 => "hificl-alpha1",
            Method::HificlTeacher => "hificl-teacher",
            Method::HificlDenseK => "hificl-dense-k",
            Method::HificlDenseV => "hificl-dense-v",
            Method::Lora => "lora",
            Method::Shift => "shift",
            Method::BasePretrain => "base-pretrain",
        }
    }

    pub fn flags(self) -> AblationFlags {
        AblationFlags {
            no_lowrank_k: self == Method::HificlDenseK,
            no_lowrank_v: self == Method::HificlDenseV,
            alpha_one: self == Method::HificlAlpha1,
            teacher: self == Method::HificlTeacher,
        }
    }

    pub fn is_hificl(self) -> bool {
        matches!(
            self,
            Method::Hificl | Method::HificlAlpha1 | Method::HificlTeacher | Method::HificlDenseK | Method::HificlDenseV
        )
    }

    pub fn valid_names() -> String {
        Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err(format!("unknown method {s:?}; valid methods: {}", Method::valid_names())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub lr_peak: f64,
    /// Peak learning rate used instead of `lr_peak` for LoRA.
    pub lora_lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Virtual slots per head.
    pub n: usize,
    /// Rank of the virtual key/value factors.
    pub r: usize,
    pub lora_rank: usize,
    pub teacher_weight: f64,
    /// Demonstrations shown to the teacher.
    pub teacher_shots: usize,
    /// Explicit demonstrations kept in the student prompt during training
    /// and validation (0 = the adapter replaces them).
    pub demo_shots: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Hificl,
            lr_peak: 5e-3,
            lora_lr: 5e-4,
            weight_decay: 0.05,
            warmup_frac: 0.1,
            epochs: 20,
            batch_size: 2,
            grad_accum: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 1,
            n: 8,
            r: 4,
            lora_rank: 8,
            teacher_weight: 1.0,
            teacher_shots: 8,
            demo_shots: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == Method::BasePretrain {
            return Err(config_err("base-pretrain is trained by train_base, not train_adapter"));
        }
        if self.epochs == 0 {
            return Err(config_err("train.epochs must be positive"));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(config_err("train.batch_size and train.grad_accum must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(config_err(format!("train.warmup_frac {} not in [0, 1)", self.warmup_frac)));
        }
        if self.peak_lr() < 0.0 || self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(config_err("learning rate and weight decay must be >= 0, clip norm > 0"));
        }
        if self.teacher_weight < 0.0 {
            return Err(config_err("train.teacher_weight must be >= 0"));
        }
        if self.method == Method::Lora && self.lora_rank == 0 {
            return Err(config_err("train.lora_rank must be >= 1"));
        }
        if self.method.is_hificl() && (self.n == 0 || self.r == 0) {
            return Err(config_err("train.n and train.r must be >= 1"));
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        if self.method == Method::Lora {
            self.lora_lr
        } else {
            self.lr_peak
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr_peak: self.peak_lr(),
            warmup_frac: self.warmup_frac,
        }
    }

    pub fn examples_per_step(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.examples_per_step())
    }
}

/// Fresh adapter for `cfg.method`.
pub fn new_adapter(model: &ModelConfig, cfg: &TrainConfig, rng: &mut Rng) -> Result<Adapter> {
    match cfg.method {
        Method::Lora => Ok(Adapter::Lora(LoraAdapter::new(rng, model, cfg.lora_rank)?)),
        Method::Shift => Ok(Adapter::Shift(ShiftAdapter::new(rng, model))),
        Method::BasePretrain => Err(config_err("base-pretrain has no adapter")),
        m => {
            let flags = m.flags();
            let shape = VirtualKvShape::for_model(model, cfg.n, cfg.r);
            Ok(Adapter::Hificl(HificlAdapter {
                vkv: init_virtual_kv(rng, &shape, &flags)?,
                flags,
            }))
        }
    }
}

/// Mean squared difference between student and teacher hidden states at
/// aligned positions, averaged over layers, positions and channels. Row
/// `student_offset + i` of each student layer is matched with row
/// `teacher_offset + i` of the teacher, for `i < count`. Returns the loss and
/// its gradient with respect to every student hidden matrix.
pub fn teacher_align_loss(
    student: &[Matrix],
    teacher: &[Matrix],
    student_offset: usize,
    teacher_offset: usize,
    count: usize,
) -> Result<(f64, Vec<Matrix>)> {
    if student.len() != teacher.len() || student.is_empty() || count == 0 {
        return Err(config_err(format!(
            "teacher alignment needs matching non-empty layer lists and positions, got {} vs {} layers, {count} positions",
            student.len(),
            teacher.len()
        )));
    }
    let d = student[0].cols();
    for (s, t) in student.iter().zip(teacher) {
        if s.cols() != t.cols() || s.cols() != d || s.rows() < student_offset + count || t.rows() < teacher_offset + count
        {
            return Err(config_err(format!(
                "position map does not fit hidden states {} and {}",
                s.shape_str(),
                t.shape_str()
            )));
        }
    }
    let norm = (student.len() * count * d) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(teacher) {
        let mut g = Matrix::zeros(s.rows(), s.cols());
        for i in 0..count {
            let sr = s.row(student_offset + i);
            let tr = t.row(teacher_offset + i);
            for ((gv, a), b) in g.row_mut(student_offset + i).iter_mut().zip(sr).zip(tr) {
                let diff = a - b;
                total += diff * diff;
                *gv = 2.0 * diff / norm;
            }
        }
        grads.push(g);
    }
    Ok((total / norm, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub episodes: usize,
    /// Wall-clock seconds for the whole pass.
    pub seconds: f64,
    /// Answer tokens per wall-clock second.
    pub tokens_per_sec: f64,
}

/// Greedy-decodes the answer of every episode with `shots` explicit
/// demonstrations in the prompt.
pub fn evaluate(
    params: &TransformerParams,
    adapter: Option<&Adapter>,
    episodes: &[Episode],
    layout: Layout,
    shots: usize,
) -> Result<EvalResult> {
    if episodes.is_empty() {
        return Err(config_err("evaluation set is empty"));
    }
    let start = Instant::now();
    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut tokens = 0usize;
    for ep in episodes {
        let prompt = ep.prompt(layout, shots);
        let answer = ep.answer_tokens(layout);
        let mut seq = prompt;
        let mut all_right = true;
        for &want in &answer {
            let out = forward(params, &seq, adapter)?;
            let row = out.logits.row(seq.len() - 1);
            let lp = log_softmax_row(row)?;
            loss -= lp[want];
            let got = argmax(row);
            all_right &= got == want;
            seq.push(got);
            tokens += 1;
        }
        correct += usize::from(all_right);
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(EvalResult {
        accuracy: correct as f64 / episodes.len() as f64,
        mean_loss: loss / tokens as f64,
        episodes: episodes.len(),
        seconds,
        tokens_per_sec: tokens as f64 / seconds.max(1e-12),
    })
}

/// One line of a metrics stream. Records with `kind = "timing"` hold
/// wall-clock measurements and are the only ones that vary between reruns.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Run {
        method: String,
        seed: u64,
        trainable_params: usize,
        total_steps: usize,
        no_lowrank_k: bool,
        no_lowrank_v: bool,
        alpha_one: bool,
        teacher: bool,
    },
    Step {
        step: usize,
        lr: f64,
        train_loss: f64,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        step: usize,
        val_loss: f64,
        val_acc: f64,
    },
    Best {
        epoch: usize,
        step: usize,
        val_loss: f64,
        val_acc: f64,
    },
    BaseGate {
        reached: bool,
        target_acc: f64,
        val_acc: f64,
        epochs_run: usize,
    },
    /// `seconds` covers the whole run; `steps_per_sec` counts optimizer
    /// steps against time spent in steps only, validation excluded.
    Timing {
        wall_clock: bool,
        seconds: f64,
        steps_per_sec: f64,
    },
}

impl Record {
    pub fn is_timing(&self) -> bool {
        matches!(self, Record::Timing { .. })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

/// Renders records as JSON lines, optionally dropping wall-clock records.
pub fn render_metrics(records: &[Record], include_timing: bool) -> String {
    let mut out = String::new();
    for r in records.iter().filter(|r| include_timing || !r.is_timing()) {
        out.push_str(&r.to_json());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestInfo {
    pub epoch: usize,
    pub step: usize,
    pub val_acc: f64,
    pub val_loss: f64,
}

impl BestInfo {
    /// Higher accuracy wins, then lower loss; earlier checkpoints win ties.
    fn improved_by(&self, acc: f64, loss: f64) -> bool {
        acc > self.val_acc || (acc == self.val_acc && loss < self.val_loss)
    }
}

#[derive(Debug, Clone)]
pub struct AdapterRun {
    pub best: Adapter,
    pub last: Adapter,
    pub best_info: BestInfo,
    pub records: Vec<Record>,
    pub trainable_params: usize,
    pub steps_per_sec: f64,
}

/// Loss of one episode and its gradient for the adapter parameters.
pub fn adapter_example_grad(
    base: &TransformerParams,
    adapter: &Adapter,
    ep: &Episode,
    layout: Layout,
    cfg: &TrainConfig,
) -> Result<(f64, Adapter)> {
    let (inputs, targets) = ep.training_pair(layout, cfg.demo_shots);
    let s_off = ep.query_offset(cfg.demo_shots);
    let (out, cache) = forward_cached(base, &inputs, Some(adapter))?;
    let (mut loss, dlogits) = task_loss_grad(&out.logits, &targets)?;
    let mut dh = None;
    if cfg.method == Method::HificlTeacher {
        let (t_inputs, _) = ep.training_pair(layout, cfg.teacher_shots);
        let t_off = ep.query_offset(cfg.teacher_shots);
        if t_inputs.get(t_off..t_off + QUERY_SEGMENT) != inputs.get(s_off..s_off + QUERY_SEGMENT) {
            return Err(config_err("teacher and student query segments do not line up"));
        }
        let teacher = forward(base, &t_inputs, None)?;
        let (align, mut g) = teacher_align_loss(&out.hiddens, &teacher.hiddens, s_off, t_off, QUERY_SEGMENT)?;
        loss += cfg.teacher_weight * align;
        for m in &mut g {
            m.scale_in_place(cfg.teacher_weight);
        }
        dh = Some(g);
    }
    let grads = backward(base, Some(adapter), &cache, &dlogits, dh.as_deref(), Trainable::Adapter)?;
    Ok((loss, grads.adapter.expect("adapter gradients requested")))
}

/// Trains `cfg.method` on a frozen base. Prompts carry `demo_shots`
/// demonstrations; the teacher variant additionally runs the frozen base with
/// `teacher_shots` of them.
pub fn train_adapter(
    base: &TransformerParams,
    train: &[Episode],
    val: &[Episode],
    layout: Layout,
    cfg: &TrainConfig,
) -> Result<AdapterRun> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(config_err("training and validation sets must be non-empty"));
    }
    let base_sum = base.checksum();
    let mut rng = Rng::derive(cfg.seed, 0xADA9);
    let mut adapter = new_adapter(&base.config, cfg, &mut rng)?;
    let trainable_params = adapter.num_params();
    let mut state = AdamState::new(&adapter);
    let opt = cfg.adamw();
    let sched = cfg.schedule();
    let per_step = cfg.examples_per_step();
    let steps_per_epoch = cfg.steps_per_epoch(train.len());
    let total_steps = steps_per_epoch * cfg.epochs;
    let flags = cfg.method.flags();
    let mut records = vec![Record::Run {
        method: cfg.method.name().to_string(),
        seed: cfg.seed,
        trainable_params,
        total_steps,
        no_lowrank_k: flags.no_lowrank_k,
        no_lowrank_v: flags.no_lowrank_v,
        alpha_one: flags.alpha_one,
        teacher: flags.teacher,
    }];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = Rng::derive(cfg.seed, 0x5EED);
    let mut best: Option<(BestInfo, Adapter)> = None;
    let mut step = 0usize;
    let start = Instant::now();
    let mut train_seconds = 0.0;
    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let epoch_start = Instant::now();
        for chunk in order.chunks(per_step) {
            let mut grad = adapter.zeros_like();
            let mut loss_sum = 0.0;
            for micro in chunk.chunks(cfg.batch_size) {
                for &i in micro {
                    let (loss, g) = adapter_example_grad(base, &adapter, &train[i], layout, cfg)?;
                    loss_sum += loss;
                    grad.axpy(1.0, &g)?;
                }
            }
            let count = chunk.len() as f64;
            grad.scale_all(1.0 / count);
            let grad_norm = clip_global_norm(&mut grad, cfg.clip_norm);
            let lr = sched.lr_at(step, total_steps)?;
            opt_step(&mut adapter, &grad, &mut state, &opt, lr)?;
            step += 1;
            records.push(Record::Step {
                step,
                lr,
                train_loss: loss_sum / count,
                grad_norm,
            });
        }
        train_seconds += epoch_start.elapsed().as_secs_f64();
        let ev = evaluate(base, Some(&adapter), val, layout, cfg.demo_shots)?;
        records.push(Record::Epoch {
            epoch,
            step,
            val_loss: ev.mean_loss,
            val_acc: ev.accuracy,
        });
        let better = best.as_ref().is_none_or(|(b, _)| b.improved_by(ev.accuracy, ev.mean_loss));
        if better {
            let info = BestInfo {
                epoch,
                step,
                val_acc: ev.accuracy,
                val_loss: ev.mean_loss,
            };
            best = Some((info, adapter.clone()));
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    if base.checksum() != base_sum {
        return Err(config_err("frozen base parameters changed during adapter training"));
    }
    let (best_info, best_adapter) = best.expect("at least one epoch ran");
    records.push(Record::Best {
        epoch: best_info.epoch,
        step: best_info.step,
        val_loss: best_info.val_loss,
        val_acc: best_info.val_acc,
    });
    let steps_per_sec = step as f64 / train_seconds.max(1e-12);
    records.push(Record::Timing {
        wall_clock: true,
        seconds,
        steps_per_sec,
    });
    Ok(AdapterRun {
        best: best_adapter,
        last: adapter,
        best_info,
        records,
        trainable_params,
        steps_per_sec,
    })
}

/// Settings for pretraining the base model on episodic-random episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseTrainConfig {
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub max_epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub val_episodes: usize,
    /// Share of pretraining sequences labelled by the pretraining map.
    pub global_map_frac: f64,
    /// Share of pretraining sequences with repeated demo symbols.
    pub repeat_frac: f64,
    /// Stop as soon as validation accuracy at `task.k_shots` reaches this.
    pub target_acc: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-3,
            weight_decay: 0.01,
            warmup_frac: 0.02,
            max_epochs: 40,
            episodes_per_epoch: 4096,
            batch_size: 32,
            clip_norm: 1.0,
            val_episodes: 1000,
            global_map_frac: 0.4,
            repeat_frac: 0.4,
            target_acc: 0.98,
            seed: 1,
        }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(config_err("base.max_epochs must be positive (0 epochs cannot reach the accuracy gate)"));
        }
        if self.episodes_per_epoch == 0 || self.batch_size == 0 || self.val_episodes == 0 {
            return Err(config_err("base episode, batch and validation counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(config_err(format!("base.warmup_frac {} not in [0, 1)", self.warmup_frac)));
        }
        let fracs = [self.global_map_frac, self.repeat_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || fracs.iter().sum::<f64>() > 1.0 {
            return Err(config_err("base mixture fractions must lie in [0, 1] and sum to at most 1"));
        }
        if !(0.0..=1.0).contains(&self.target_acc) {
            return Err(config_err("base.target_acc must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BaseRun {
    pub params: TransformerParams,
    pub records: Vec<Record>,
    pub reached: bool,
    pub val_acc: f64,
    pub epochs_run: usize,
}

/// Symbol→label map used only by pretraining sequences, drawn independently
/// of the task's own fixed map.
pub fn pretrain_map(task: &TaskSpec, seed: u64) -> Vec<usize> {
    let mut rng = Rng::derive(seed, 0xC0DE);
    (0..task.num_symbols).map(|_| rng.below(task.num_labels)).collect()
}

/// Trains a base model from scratch with `task.k_shots` demonstrations per
/// episode, drawing fresh episodes every epoch.
pub fn train_base(model: &ModelConfig, task: &TaskSpec, cfg: &BaseTrainConfig) -> Result<BaseRun> {
    cfg.validate()?;
    model.validate()?;
    task.validate()?;
    if task.vocab_needed() > model.vocab {
        return Err(config_err(format!(
            "task needs {} tokens but model.vocab is {}",
            task.vocab_needed(),
            model.vocab
        )));
    }
    let layout = Layout::from(task);
    let mut params = TransformerParams::init(model, &mut Rng::derive(cfg.seed, 0xBA5E))?;
    let val = gen_dataset(task, cfg.val_episodes, &mut task.val_rng())?.episodes;
    let mut data_rng = task.train_rng();
    let pretrain_map = pretrain_map(task, cfg.seed);
    let mut state = AdamState::new(&params);
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let sched = Schedule {
        lr_peak: cfg.lr_peak,
        warmup_frac: cfg.warmup_frac,
    };
    let steps_per_epoch = cfg.episodes_per_epoch.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let mut records = vec![Record::Run {
        method: Method::BasePretrain.name().to_string(),
        seed: cfg.seed,
        trainable_params: params.num_params(),
        total_steps,
        no_lowrank_k: false,
        no_lowrank_v: false,
        alpha_one: false,
        teacher: false,
    }];
    let start = Instant::now();
    let mut step = 0usize;
    let mut val_acc = 0.0;
    let mut reached = false;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        let train = (0..cfg.episodes_per_epoch)
            .map(|_| {
                let u = data_rng.next_f64();
                let kind = if u < cfg.global_map_frac {
                    PretrainKind::GlobalMap
                } else if u < cfg.global_map_frac + cfg.repeat_frac {
                    PretrainKind::Repeats
                } else {
                    PretrainKind::Episode
                };
                pretrain_sequence(task, kind, &pretrain_map, &mut data_rng)
            })
            .collect::<Result<Vec<_>>>()?;
        for batch in train.chunks(cfg.batch_size) {
            let mut grad = params.zeros_like();
            let mut loss_sum = 0.0;
            for (inputs, targets) in batch {
                let (out, cache) = forward_cached(&params, &inputs, None)?;
                let (loss, dlogits) = task_loss_grad(&out.logits, &targets)?;
                let g = backward(&params, None, &cache, &dlogits, None, Trainable::Base)?;
                grad.axpy(1.0, &g.base.expect("base gradients requested"))?;
                loss_sum += loss;
            }
            grad.scale_all(1.0 / batch.len() as f64);
            let grad_norm = clip_global_norm(&mut grad, cfg.clip_norm);
            let lr = sched.lr_at(step, total_steps)?;
            opt_step(&mut params, &grad, &mut state, &opt, lr)?;
            step += 1;
            records.push(Record::Step {
                step,
                lr,
                train_loss: loss_sum / batch.len() as f64,
                grad_norm,
            });
        }
        let ev = evaluate(&params, None, &val, layout, task.k_shots)?;
        records.push(Record::Epoch {
            epoch,
            step,
            val_loss: ev.mean_loss,
            val_acc: ev.accuracy,
        });
        log::info!("base epoch {epoch}: val_acc {:.4} val_loss {:.4}", ev.accuracy, ev.mean_loss);
        val_acc = ev.accuracy;
        epochs_run = epoch;
        if ev.accuracy >= cfg.target_acc {
            reached = true;
            break;
        }
    }
    records.push(Record::BaseGate {
        reached,
        target_acc: cfg.target_acc,
        val_acc,
        epochs_run,
    });
    let seconds = start.elapsed().as_secs_f64();
    records.push(Record::Timing {
        wall_clock: true,
        seconds,
        steps_per_sec: step as f64 / seconds.max(1e-12),
    });
    Ok(BaseRun {
        params,
        records,
        reached,
        val_acc,
        epochs_run,
    })
}
