//! Flat `key = value` run configuration with dotted keys.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::model::ModelConfig;
use crate::tasks::{Coverage, MappingMode, TaskSpec};
use crate::trainer::{BaseTrainConfig, Method, TrainConfig};

/// Which task family `eval` draws its episodes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    Fixed,
    Episodic,
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "episodic" => Ok(Self::Episodic),
            _ => Err(config_err(format!("eval.task must be fixed or episodic, got {s:?}"))),
        }
    }
}

impl Display for EvalTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Episodic => "episodic",
        })
    }
}

/// Every setting a command can read. `seed` drives the task draw, base
/// initialisation and adapter training alike.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub num_symbols: usize,
    pub num_labels: usize,
    pub k_shots: usize,
    pub train: TrainConfig,
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub base: BaseTrainConfig,
    pub eval_episodes: usize,
    pub eval_shots: usize,
    pub eval_task: EvalTask,
    pub out: PathBuf,
    pub base_path: Option<PathBuf>,
    pub adapter_path: Option<PathBuf>,
    pub dataset_path: Option<PathBuf>,
    pub verify_trials: usize,
    pub bench_runs: usize,
    pub bench_episodes: usize,
    pub bench_train_episodes: usize,
    pub compare_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelConfig::default(),
            num_symbols: 16,
            num_labels: 8,
            k_shots: 8,
            train: TrainConfig::default(),
            train_episodes: 1000,
            val_episodes: 500,
            base: BaseTrainConfig::default(),
            eval_episodes: 10_000,
            eval_shots: 8,
            eval_task: EvalTask::Fixed,
            out: PathBuf::from("runs"),
            base_path: None,
            adapter_path: None,
            dataset_path: None,
            verify_trials: 1000,
            bench_runs: 5,
            bench_episodes: 1000,
            bench_train_episodes: 200,
            compare_seeds: vec![1, 2, 3],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| config_err(format!("bad value {value:?} for {key}: {e}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one dotted key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "model.vocab" => self.model.vocab = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.num_heads" => self.model.num_heads = parse(key, v)?,
            "model.num_layers" => self.model.num_layers = parse(key, v)?,
            "model.d_ff" => self.model.d_ff = parse(key, v)?,
            "model.max_seq_len" => self.model.max_seq_len = parse(key, v)?,
            "task.num_symbols" => self.num_symbols = parse(key, v)?,
            "task.num_labels" => self.num_labels = parse(key, v)?,
            "task.k_shots" => self.k_shots = parse(key, v)?,
            "train.method" => self.train.method = parse(key, v)?,
            "train.lr" => self.train.lr_peak = parse(key, v)?,
            "train.lora_lr" => self.train.lora_lr = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.warmup_frac" => self.train.warmup_frac = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.grad_accum" => self.train.grad_accum = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.n" => self.train.n = parse(key, v)?,
            "train.r" => self.train.r = parse(key, v)?,
            "train.lora_rank" => self.train.lora_rank = parse(key, v)?,
            "train.teacher_weight" => self.train.teacher_weight = parse(key, v)?,
            "train.teacher_shots" => self.train.teacher_shots = parse(key, v)?,
            "train.demo_shots" => self.train.demo_shots = parse(key, v)?,
            "train.train_episodes" => self.train_episodes = parse(key, v)?,
            "train.val_episodes" => self.val_episodes = parse(key, v)?,
            "base.lr" => self.base.lr_peak = parse(key, v)?,
            "base.weight_decay" => self.base.weight_decay = parse(key, v)?,
            "base.warmup_frac" => self.base.warmup_frac = parse(key, v)?,
            "base.max_epochs" => self.base.max_epochs = parse(key, v)?,
            "base.episodes_per_epoch" => self.base.episodes_per_epoch = parse(key, v)?,
            "base.batch_size" => self.base.batch_size = parse(key, v)?,
            "base.clip_norm" => self.base.clip_norm = parse(key, v)?,
            "base.val_episodes" => self.base.val_episodes = parse(key, v)?,
            "base.global_map_frac" => self.base.global_map_frac = parse(key, v)?,
            "base.repeat_frac" => self.base.repeat_frac = parse(key, v)?,
            "base.target_acc" => self.base.target_acc = parse(key, v)?,
            "eval.episodes" => self.eval_episodes = parse(key, v)?,
            "eval.shots" => self.eval_shots = parse(key, v)?,
            "eval.task" => self.eval_task = parse(key, v)?,
            "paths.out" => self.out = PathBuf::from(v),
            "paths.base" => self.base_path = opt_path(v),
            "paths.adapter" => self.adapter_path = opt_path(v),
            "paths.dataset" => self.dataset_path = opt_path(v),
            "verify.trials" => self.verify_trials = parse(key, v)?,
            "bench.runs" => self.bench_runs = parse(key, v)?,
            "bench.episodes" => self.bench_episodes = parse(key, v)?,
            "bench.train_episodes" => self.bench_train_episodes = parse(key, v)?,
            "compare.seeds" => {
                self.compare_seeds = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            other => return Err(config_err(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let b = &self.base;
        let m = &self.model;
        let seeds: Vec<String> = self.compare_seeds.iter().map(u64::to_string).collect();
        vec![
            ("seed", self.seed.to_string()),
            ("model.vocab", m.vocab.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.num_heads", m.num_heads.to_string()),
            ("model.num_layers", m.num_layers.to_string()),
            ("model.d_ff", m.d_ff.to_string()),
            ("model.max_seq_len", m.max_seq_len.to_string()),
            ("task.num_symbols", self.num_symbols.to_string()),
            ("task.num_labels", self.num_labels.to_string()),
            ("task.k_shots", self.k_shots.to_string()),
            ("train.method", t.method.to_string()),
            ("train.lr", format!("{:?}", t.lr_peak)),
            ("train.lora_lr", format!("{:?}", t.lora_lr)),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.warmup_frac", format!("{:?}", t.warmup_frac)),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.grad_accum", t.grad_accum.to_string()),
            ("train.beta1", format!("{:?}", t.beta1)),
            ("train.beta2", format!("{:?}", t.beta2)),
            ("train.eps", format!("{:?}", t.eps)),
            ("train.clip_norm", format!("{:?}", t.clip_norm)),
            ("train.n", t.n.to_string()),
            ("train.r", t.r.to_string()),
            ("train.lora_rank", t.lora_rank.to_string()),
            ("train.teacher_weight", format!("{:?}", t.teacher_weight)),
            ("train.teacher_shots", t.teacher_shots.to_string()),
            ("train.demo_shots", t.demo_shots.to_string()),
            ("train.train_episodes", self.train_episodes.to_string()),
            ("train.val_episodes", self.val_episodes.to_string()),
            ("base.lr", format!("{:?}", b.lr_peak)),
            ("base.weight_decay", format!("{:?}", b.weight_decay)),
            ("base.warmup_frac", format!("{:?}", b.warmup_frac)),
            ("base.max_epochs", b.max_epochs.to_string()),
            ("base.episodes_per_epoch", b.episodes_per_epoch.to_string()),
            ("base.batch_size", b.batch_size.to_string()),
            ("base.clip_norm", format!("{:?}", b.clip_norm)),
            ("base.val_episodes", b.val_episodes.to_string()),
            ("base.global_map_frac", format!("{:?}", b.global_map_frac)),
            ("base.repeat_frac", format!("{:?}", b.repeat_frac)),
            ("base.target_acc", format!("{:?}", b.target_acc)),
            ("eval.episodes", self.eval_episodes.to_string()),
            ("eval.shots", self.eval_shots.to_string()),
            ("eval.task", self.eval_task.to_string()),
            ("paths.out", self.out.display().to_string()),
            ("paths.base", show_path(&self.base_path)),
            ("paths.adapter", show_path(&self.adapter_path)),
            ("paths.dataset", show_path(&self.dataset_path)),
            ("verify.trials", self.verify_trials.to_string()),
            ("bench.runs", self.bench_runs.to_string()),
            ("bench.episodes", self.bench_episodes.to_string()),
            ("bench.train_episodes", self.bench_train_episodes.to_string()),
            ("compare.seeds", seeds.join(",")),
        ]
    }

    /// Renders the whole configuration in the file format.
    pub fn render(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies every assignment in `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
            self.set(k, v)
                .map_err(|e| config_err(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies one `key=value` override.
    pub fn apply_assignment(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config_err(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Task used for base pretraining and its gate.
    pub fn episodic_task(&self) -> TaskSpec {
        TaskSpec {
            num_symbols: self.num_symbols,
            num_labels: self.num_labels,
            k_shots: self.k_shots,
            mapping: MappingMode::EpisodicRandom,
            coverage: Coverage::QueryInDemos,
            seed: self.seed,
        }
    }

    /// Fixed-task episodes for adapter training: queries never appear among
    /// the demonstrations, so the map has to be stored by the adapter.
    pub fn fixed_train_task(&self) -> TaskSpec {
        TaskSpec {
            mapping: MappingMode::Fixed,
            coverage: Coverage::QueryHeldOut,
            ..self.episodic_task()
        }
    }

    /// Fixed-task episodes for validation and evaluation.
    pub fn fixed_eval_task(&self) -> TaskSpec {
        TaskSpec {
            coverage: Coverage::QueryInDemos,
            ..self.fixed_train_task()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn base_config(&self) -> BaseTrainConfig {
        BaseTrainConfig {
            seed: self.seed,
            ..self.base.clone()
        }
    }

    pub fn base_checkpoint_path(&self) -> PathBuf {
        self.base_path
            .clone()
            .unwrap_or_else(|| self.out.join(format!("base_seed{}.hfkv", self.seed)))
    }

    pub fn adapter_checkpoint_path(&self, method: Method) -> PathBuf {
        self.adapter_path
            .clone()
            .unwrap_or_else(|| self.out.join(format!("{}_seed{}.hfkv", method.name(), self.seed)))
    }

    /// Metrics stream written next to a checkpoint.
    pub fn metrics_path(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("metrics.jsonl")
    }

    /// Copy with a different master seed and per-seed default paths.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            base_path: None,
            adapter_path: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.episodic_task().validate()?;
        if self.episodic_task().vocab_needed() > self.model.vocab {
            return Err(config_err(format!(
                "task needs {} tokens but model.vocab is {}",
                self.episodic_task().vocab_needed(),
                self.model.vocab
            )));
        }
        let longest = 3 * self.k_shots.max(self.eval_shots).max(self.train.teacher_shots) + 2;
        if longest > self.model.max_seq_len {
            return Err(config_err(format!(
                "prompts of up to {longest} tokens exceed model.max_seq_len {}",
                self.model.max_seq_len
            )));
        }
        if self.train_episodes == 0 || self.val_episodes == 0 || self.eval_episodes == 0 {
            return Err(config_err("train, val and eval episode counts must be positive"));
        }
        if self.bench_runs < 5 {
            return Err(config_err(format!("bench.runs must be >= 5, got {}", self.bench_runs)));
        }
        if self.bench_episodes == 0 || self.bench_train_episodes == 0 {
            return Err(config_err("bench episode counts must be positive"));
        }
        if self.compare_seeds.is_empty() {
            return Err(config_err("compare.seeds must list at least one seed"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_and_parse_round_trip() {
        let mut c = RunConfig::default();
        c.set("train.method", "hificl-dense-v").unwrap();
        c.set("train.lr", "0.0001").unwrap();
        c.set("paths.dataset", "x.jsonl").unwrap();
        c.set("compare.seeds", "4, 5").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.render()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn comments_blank_lines_and_spacing() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\n  model.d_model=48   # inline\nseed = 9\n").unwrap();
        assert_eq!(c.model.d_model, 48);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn bad_input_is_config_error() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("seed 3"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("seed = x"), Err(Error::Config(_))));
        let e = c.apply_text("train.method = bogus").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("hificl-alpha1"), "{e}");
        assert!(matches!(c.set("eval.task", "other"), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_validate_and_derive_paths() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.base_checkpoint_path(), PathBuf::from("runs/base_seed1.hfkv"));
        assert_eq!(c.adapter_checkpoint_path(Method::Lora), PathBuf::from("runs/lora_seed1.hfkv"));
        assert_eq!(
            RunConfig::metrics_path(&c.adapter_checkpoint_path(Method::Lora)),
            PathBuf::from("runs/lora_seed1.metrics.jsonl")
        );
        assert_eq!(c.with_seed(3).base_checkpoint_path(), PathBuf::from("runs/base_seed3.hfkv"));
    }

    #[test]
    fn invalid_combinations_rejected() {
        let mut c = RunConfig::default();
        c.model.max_seq_len = 20;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.bench_runs = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.model.vocab = 20;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
