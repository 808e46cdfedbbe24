//! Command bodies. Each writes its artifacts under the configured output
//! directory and returns a summary for printing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::{EvalTask, RunConfig};
use crate::adapters::Adapter;
use crate::checkpoint::{adapter_from_checkpoint, adapter_to_checkpoint, base_from_checkpoint, base_to_checkpoint, Checkpoint};
use crate::error::{config_err, Error, Result};
use crate::model::TransformerParams;
use crate::params::ParamSet;
use crate::tasks::{gen_dataset, load_episodes, Episode, Layout};
use crate::trainer::{evaluate, render_metrics, train_adapter, train_base, EvalResult, Method, TrainConfig};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text)?;
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct BaseSummary {
    pub checkpoint: PathBuf,
    pub reached: bool,
    pub target_acc: f64,
    pub val_acc: f64,
    pub epochs_run: usize,
    pub seconds: f64,
}

/// Pretrains the base model and writes its checkpoint and metrics stream.
/// The checkpoint is written even when the gate is missed.
pub fn cmd_train_base(cfg: &RunConfig) -> Result<BaseSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let run = train_base(&cfg.model, &cfg.episodic_task(), &cfg.base_config())?;
    let seconds = start.elapsed().as_secs_f64();
    let path = cfg.base_checkpoint_path();
    ensure_parent(&path)?;
    base_to_checkpoint(&run.params).save(&path)?;
    write_text(&RunConfig::metrics_path(&path), &render_metrics(&run.records, true))?;
    Ok(BaseSummary {
        checkpoint: path,
        reached: run.reached,
        target_acc: cfg.base.target_acc,
        val_acc: run.val_acc,
        epochs_run: run.epochs_run,
        seconds,
    })
}

pub fn load_base(path: &Path) -> Result<TransformerParams> {
    if !path.exists() {
        return Err(Error::Missing(format!(
            "base checkpoint {} not found; run `hificl train-base` with the same seed first, or pass --train-missing",
            path.display()
        )));
    }
    let mut params = base_from_checkpoint(&Checkpoint::load(path)?)?;
    params.frozen = true;
    Ok(params)
}

pub fn load_adapter(path: &Path, base: &TransformerParams) -> Result<Adapter> {
    if !path.exists() {
        return Err(Error::Missing(format!(
            "adapter checkpoint {} not found; run `hificl train-adapter --method ...` with the same seed first, or pass --train-missing",
            path.display()
        )));
    }
    let (adapter, model) = adapter_from_checkpoint(&Checkpoint::load(path)?)?;
    if model != base.config {
        return Err(config_err(format!(
            "adapter {} was trained for a different model configuration",
            path.display()
        )));
    }
    Ok(adapter)
}

#[derive(Debug, Clone, Serialize)]
pub struct AdapterSummary {
    pub method: String,
    pub checkpoint: PathBuf,
    pub trainable_params: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub seconds: f64,
    pub steps_per_sec: f64,
}

/// Training and validation episodes for adapters on the fixed task.
pub fn adapter_data(cfg: &RunConfig) -> Result<(Vec<Episode>, Vec<Episode>)> {
    let train_task = cfg.fixed_train_task();
    let eval_task = cfg.fixed_eval_task();
    let train = gen_dataset(&train_task, cfg.train_episodes, &mut train_task.train_rng())?.episodes;
    let val = gen_dataset(&eval_task, cfg.val_episodes, &mut eval_task.val_rng())?.episodes;
    Ok((train, val))
}

fn train_and_save(cfg: &RunConfig, base: &TransformerParams, method: Method, tc: &TrainConfig) -> Result<AdapterSummary> {
    let (train, val) = adapter_data(cfg)?;
    let layout = Layout::from(&cfg.fixed_train_task());
    let start = Instant::now();
    let run = train_adapter(base, &train, &val, layout, tc)?;
    let seconds = start.elapsed().as_secs_f64();
    let path = cfg.adapter_checkpoint_path(method);
    ensure_parent(&path)?;
    adapter_to_checkpoint(&run.best, &base.config).save(&path)?;
    write_text(&RunConfig::metrics_path(&path), &render_metrics(&run.records, true))?;
    Ok(AdapterSummary {
        method: method.name().to_string(),
        checkpoint: path,
        trainable_params: run.trainable_params,
        best_epoch: run.best_info.epoch,
        best_val_acc: run.best_info.val_acc,
        seconds,
        steps_per_sec: run.steps_per_sec,
    })
}

/// Trains one adapter method on the frozen base checkpoint for `cfg.seed`.
pub fn cmd_train_adapter(cfg: &RunConfig, method: Method) -> Result<AdapterSummary> {
    cfg.validate()?;
    let tc = TrainConfig { method, ..cfg.train_config() };
    tc.validate()?;
    let base = load_base(&cfg.base_checkpoint_path())?;
    train_and_save(cfg, &base, method, &tc)
}

/// Held-out evaluation episodes: the dataset file if one is configured,
/// otherwise a fresh draw from the test stream of the selected task.
pub fn eval_episodes(cfg: &RunConfig, task: EvalTask) -> Result<(Vec<Episode>, Layout)> {
    let spec = match task {
        EvalTask::Fixed => cfg.fixed_eval_task(),
        EvalTask::Episodic => cfg.episodic_task(),
    };
    let layout = Layout::from(&spec);
    let episodes = match &cfg.dataset_path {
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| Error::Missing(format!("dataset {}: {e}", p.display())))?;
            load_episodes(std::io::BufReader::new(f))?
        }
        None => gen_dataset(&spec, cfg.eval_episodes, &mut spec.test_rng())?.episodes,
    };
    if episodes.is_empty() {
        return Err(config_err("evaluation set is empty"));
    }
    Ok((episodes, layout))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub base: PathBuf,
    pub adapter: Option<PathBuf>,
    pub task: String,
    pub shots: usize,
    #[serde(flatten)]
    pub result: EvalResult,
}

/// Evaluates the base model, optionally with an adapter, at `shots`
/// explicit demonstrations.
pub fn cmd_eval(cfg: &RunConfig, adapter: Option<&Path>, shots: usize, task: EvalTask) -> Result<EvalSummary> {
    cfg.validate()?;
    let base_path = cfg.base_checkpoint_path();
    let base = load_base(&base_path)?;
    let adapter_obj = adapter.map(|p| load_adapter(p, &base)).transpose()?;
    let (episodes, layout) = eval_episodes(cfg, task)?;
    let result = evaluate(&base, adapter_obj.as_ref(), &episodes, layout, shots)?;
    Ok(EvalSummary {
        base: base_path,
        adapter: adapter.map(Path::to_path_buf),
        task: task.to_string(),
        shots,
        result,
    })
}

/// Median answer tokens per second over `runs` timed passes, after one
/// untimed warm-up pass.
pub fn timed_throughput(
    base: &TransformerParams,
    adapter: Option<&Adapter>,
    episodes: &[Episode],
    layout: Layout,
    shots: usize,
    runs: usize,
) -> Result<f64> {
    evaluate(base, adapter, episodes, layout, shots)?;
    let mut tps = Vec::with_capacity(runs);
    for _ in 0..runs {
        tps.push(evaluate(base, adapter, episodes, layout, shots)?.tokens_per_sec);
    }
    Ok(median(tps))
}

fn training_seconds(metrics: &Path) -> Result<f64> {
    let text = fs::read_to_string(metrics).map_err(|e| Error::Missing(format!("metrics {}: {e}", metrics.display())))?;
    text.lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .find(|v| v["kind"] == "timing")
        .and_then(|v| v["seconds"].as_f64())
        .ok_or_else(|| Error::Parse(format!("no timing record in {}", metrics.display())))
}

/// Rows of the comparison, in display order.
pub fn comparison_rows() -> Vec<String> {
    let mut rows = vec!["zero-shot".to_string(), "8-shot-icl".to_string()];
    rows.extend(Method::ADAPTERS.iter().map(|m| m.name().to_string()));
    rows
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareCell {
    pub row: String,
    pub seed: u64,
    pub accuracy: f64,
    pub params: usize,
    pub train_seconds: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub row: String,
    pub seeds: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub params: usize,
    pub train_seconds_mean: f64,
    pub train_seconds_std: f64,
    pub tps_mean: f64,
    pub tps_std: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub cells: Vec<CompareCell>,
    pub summary: Vec<CompareSummary>,
    pub table: String,
}

impl Comparison {
    pub fn row(&self, name: &str) -> Option<&CompareSummary> {
        self.summary.iter().find(|s| s.row == name)
    }

    pub fn cells_for(&self, name: &str) -> Vec<&CompareCell> {
        self.cells.iter().filter(|c| c.row == name).collect()
    }
}

/// Base model for `cfg.seed`, trained first if missing and allowed.
fn base_for(cfg: &RunConfig, train_missing: bool) -> Result<TransformerParams> {
    let path = cfg.base_checkpoint_path();
    if !path.exists() && train_missing {
        let s = cmd_train_base(cfg)?;
        if !s.reached {
            log::warn!(
                "base seed {} stopped at val acc {:.4} below target {}",
                cfg.seed,
                s.val_acc,
                s.target_acc
            );
        }
    }
    load_base(&path)
}

fn adapter_for(cfg: &RunConfig, base: &TransformerParams, method: Method, train_missing: bool) -> Result<Adapter> {
    let path = cfg.adapter_checkpoint_path(method);
    if !path.exists() && train_missing {
        let tc = TrainConfig { method, ..cfg.train_config() };
        train_and_save(cfg, base, method, &tc)?;
    }
    load_adapter(&path, base)
}

/// Evaluates every row on the fixed task for every seed in `compare.seeds`.
pub fn cmd_compare(cfg: &RunConfig, train_missing: bool) -> Result<Comparison> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &seed in &cfg.compare_seeds {
        let sc = cfg.with_seed(seed);
        let base = base_for(&sc, train_missing)?;
        let (episodes, layout) = eval_episodes(&sc, EvalTask::Fixed)?;
        let timing_set = &episodes[..episodes.len().min(sc.bench_episodes)];
        let mut push = |row: String, adapter: Option<&Adapter>, shots: usize, train_seconds: f64| -> Result<()> {
            let ev = evaluate(&base, adapter, &episodes, layout, shots)?;
            let tps = timed_throughput(&base, adapter, timing_set, layout, shots, sc.bench_runs)?;
            log::info!("compare seed {seed} {row}: acc {:.4}", ev.accuracy);
            cells.push(CompareCell {
                row,
                seed,
                accuracy: ev.accuracy,
                params: adapter.map_or(0, |a| a.num_params()),
                train_seconds,
                tokens_per_sec: tps,
            });
            Ok(())
        };
        push("zero-shot".into(), None, 0, 0.0)?;
        push("8-shot-icl".into(), None, sc.eval_shots, 0.0)?;
        for method in Method::ADAPTERS {
            let adapter = adapter_for(&sc, &base, method, train_missing)?;
            let secs = training_seconds(&RunConfig::metrics_path(&sc.adapter_checkpoint_path(method)))?;
            push(method.name().to_string(), Some(&adapter), sc.train.demo_shots, secs)?;
        }
    }
    let summary: Vec<CompareSummary> = comparison_rows()
        .into_iter()
        .map(|row| {
            let cs: Vec<&CompareCell> = cells.iter().filter(|c| c.row == row).collect();
            let col = |f: fn(&CompareCell) -> f64| mean_std(&cs.iter().map(|c| f(c)).collect::<Vec<_>>());
            let (acc_mean, acc_std) = col(|c| c.accuracy);
            let (train_seconds_mean, train_seconds_std) = col(|c| c.train_seconds);
            let (tps_mean, tps_std) = col(|c| c.tokens_per_sec);
            CompareSummary {
                row,
                seeds: cs.len(),
                acc_mean,
                acc_std,
                params: cs.first().map_or(0, |c| c.params),
                train_seconds_mean,
                train_seconds_std,
                tps_mean,
                tps_std,
            }
        })
        .collect();
    let table = render_compare_table(&summary, &cfg.compare_seeds);
    ensure_dir(&cfg.out)?;
    let mut jsonl = String::new();
    for c in &cells {
        jsonl.push_str(&tagged_json("cell", c));
    }
    for s in &summary {
        jsonl.push_str(&tagged_json("summary", s));
    }
    write_text(&cfg.out.join("compare.jsonl"), &jsonl)?;
    write_text(&cfg.out.join("compare.txt"), &table)?;
    Ok(Comparison { cells, summary, table })
}

fn tagged_json<T: Serialize>(kind: &str, value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("serializable");
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("kind".into(), kind.into());
    }
    format!("{v}\n")
}

fn render_compare_table(rows: &[CompareSummary], seeds: &[u64]) -> String {
    let mut out = format!(
        "fixed-task comparison, mean ± std over seeds {seeds:?}\n{:<16} {:>17} {:>8} {:>17} {:>19}\n",
        "row", "accuracy", "params", "train s", "eval tokens/s"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:>8.4} ± {:<6.4} {:>8} {:>8.1} ± {:<6.1} {:>9.0} ± {:<7.0}\n",
            r.row, r.acc_mean, r.acc_std, r.params, r.train_seconds_mean, r.train_seconds_std, r.tps_mean, r.tps_std
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyRow {
    pub row: String,
    pub shots: usize,
    pub latency_sec: f64,
    pub normalized: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainCost {
    pub method: String,
    pub steps_per_sec: f64,
    pub sec_per_step: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub latency: Vec<LatencyRow>,
    pub training: Vec<TrainCost>,
    /// Wall-clock per step of hificl-teacher over teacher-free hificl.
    pub teacher_cost_ratio: f64,
    pub table: String,
}

impl BenchReport {
    pub fn latency_of(&self, row: &str) -> Option<&LatencyRow> {
        self.latency.iter().find(|r| r.row == row)
    }
}

/// Median training steps/s of `method` over `runs` one-epoch runs on a
/// subset, after one warm-up run.
fn bench_training(base: &TransformerParams, cfg: &RunConfig, method: Method) -> Result<f64> {
    let (train, val) = adapter_data(cfg)?;
    let train = &train[..train.len().min(cfg.bench_train_episodes)];
    let val = &val[..val.len().min(8)];
    let layout = Layout::from(&cfg.fixed_train_task());
    let tc = TrainConfig {
        method,
        epochs: 1,
        ..cfg.train_config()
    };
    train_adapter(base, train, val, layout, &tc)?;
    let mut sps = Vec::with_capacity(cfg.bench_runs);
    for _ in 0..cfg.bench_runs {
        sps.push(train_adapter(base, train, val, layout, &tc)?.steps_per_sec);
    }
    Ok(median(sps))
}

/// Per-episode inference latency of every row normalized to zero-shot, and
/// the training cost of the teacher variant against plain HiFICL.
pub fn cmd_bench(cfg: &RunConfig, train_missing: bool) -> Result<BenchReport> {
    cfg.validate()?;
    let base = base_for(cfg, train_missing)?;
    let (episodes, layout) = eval_episodes(cfg, EvalTask::Fixed)?;
    let episodes = &episodes[..episodes.len().min(cfg.bench_episodes)];
    let mut rows: Vec<(String, Option<Adapter>, usize)> =
        vec![("zero-shot".into(), None, 0), ("8-shot-icl".into(), None, cfg.eval_shots)];
    for method in Method::ADAPTERS {
        let a = adapter_for(cfg, &base, method, train_missing)?;
        rows.push((method.name().to_string(), Some(a), cfg.train.demo_shots));
    }
    let mut latency = Vec::new();
    for (row, adapter, shots) in &rows {
        let tps = timed_throughput(&base, adapter.as_ref(), episodes, layout, *shots, cfg.bench_runs)?;
        latency.push(LatencyRow {
            row: row.clone(),
            shots: *shots,
            latency_sec: 1.0 / tps,
            normalized: 0.0,
            tokens_per_sec: tps,
        });
    }
    let zero = latency[0].latency_sec;
    for r in &mut latency {
        r.normalized = r.latency_sec / zero;
    }
    let training: Vec<TrainCost> = [Method::Hificl, Method::HificlTeacher]
        .into_iter()
        .map(|m| {
            bench_training(&base, cfg, m).map(|sps| TrainCost {
                method: m.name().to_string(),
                steps_per_sec: sps,
                sec_per_step: 1.0 / sps,
            })
        })
        .collect::<Result<_>>()?;
    let teacher_cost_ratio = training[0].steps_per_sec / training[1].steps_per_sec;
    let mut table = format!(
        "inference latency, median of {} warm runs over {} episodes, seed {}\n{:<16} {:>6} {:>14} {:>10} {:>12}\n",
        cfg.bench_runs,
        episodes.len(),
        cfg.seed,
        "row",
        "shots",
        "sec/episode",
        "vs zero",
        "tokens/s"
    );
    for r in &latency {
        table.push_str(&format!(
            "{:<16} {:>6} {:>14.3e} {:>9.2}x {:>12.0}\n",
            r.row, r.shots, r.latency_sec, r.normalized, r.tokens_per_sec
        ));
    }
    table.push_str("training cost\n");
    for t in &training {
        table.push_str(&format!("{:<16} {:>10.1} steps/s\n", t.method, t.steps_per_sec));
    }
    table.push_str(&format!("teacher / plain wall-clock per step: {teacher_cost_ratio:.2}x\n"));
    let mut jsonl = String::new();
    for r in &latency {
        jsonl.push_str(&tagged_json("latency", r));
    }
    for t in &training {
        jsonl.push_str(&tagged_json("train_cost", t));
    }
    jsonl.push_str(&tagged_json(
        "teacher_cost",
        &serde_json::json!({ "ratio": teacher_cost_ratio, "wall_clock": true }),
    ));
    ensure_dir(&cfg.out)?;
    write_text(&cfg.out.join("bench.jsonl"), &jsonl)?;
    write_text(&cfg.out.join("bench.txt"), &table)?;
    Ok(BenchReport {
        latency,
        training,
        teacher_cost_ratio,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_std() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn rows_in_display_order() {
        let rows = comparison_rows();
        assert_eq!(rows.len(), 9);
        assert_eq!(rows[0], "zero-shot");
        assert_eq!(rows[1], "8-shot-icl");
        assert!(rows.contains(&"hificl-dense-v".to_string()));
    }

    #[test]
    fn missing_checkpoints_are_actionable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let e = cmd_train_adapter(&cfg, Method::Hificl).unwrap_err();
        assert!(matches!(&e, Error::Missing(m) if m.contains("train-base")), "{e}");
        let e = cmd_compare(&cfg, false).unwrap_err();
        assert!(e.to_string().contains("--train-missing"), "{e}");
    }
}
