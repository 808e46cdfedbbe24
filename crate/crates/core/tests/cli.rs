use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# tiny model and task so the whole pipeline runs in seconds
model.vocab = 11
model.d_model = 8
model.num_heads = 2
model.num_layers = 2
model.d_ff = 12
model.max_seq_len = 10
task.num_symbols = 4
task.num_labels = 3
task.k_shots = 2
train.epochs = 2
train.train_episodes = 16
train.val_episodes = 8
train.n = 4
train.r = 2
train.lora_rank = 2
train.teacher_shots = 2
base.max_epochs = 1
base.episodes_per_epoch = 32
base.batch_size = 8
base.val_episodes = 20
base.target_acc = 0.0
eval.episodes = 30
eval.shots = 2
bench.episodes = 10
bench.train_episodes = 8
compare.seeds = 1
";

fn hificl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hificl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn verify_passes_with_default_trials() {
    let o = hificl(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{out}");
    assert!(out.contains("1000 trials"));
}

#[test]
fn verify_catches_injected_fault() {
    let o = hificl(&["verify", "--perturb", "1e-6"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("FAIL identity") && out.contains("seed 0x"), "{out}");
}

#[test]
fn verify_zero_trials_warns() {
    let o = hificl(&["verify", "--trials", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("WARNING 0 trials"));
}

#[test]
fn print_config_shows_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.cfg");
    fs::write(&p, "seed = 5\ntrain.epochs = 7\n").unwrap();
    let o = hificl(&["--config", p.to_str().unwrap(), "--seed", "9", "--print-config", "train-adapter", "--method", "lora"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("seed = 9\n"), "{out}");
    assert!(out.contains("train.epochs = 7\n"));
    assert!(out.contains("model.d_model = 32\n"));
    assert!(out.contains("compare.seeds = 1,2,3\n"));
}

#[test]
fn usage_and_config_errors_exit_two() {
    let o = hificl(&["train-adapter", "--method", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hificl-dense-k"));
    let o = hificl(&["train-base", "--epochs", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("max_epochs"));
    let dir = tempfile::tempdir().unwrap();
    let o = hificl(&["--out", dir.path().to_str().unwrap(), "--set", "train.lora_rank=0", "train-adapter", "--method", "lora"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lora_rank"));
    let p = dir.path().join("bad.cfg");
    fs::write(&p, "model.width = 3\n").unwrap();
    let o = hificl(&["--config", p.to_str().unwrap(), "verify"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_base_is_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let o = hificl(&["--out", dir.path().to_str().unwrap(), "train-adapter", "--method", "hificl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train-base"), "{}", stderr(&o));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs");
    let out_s = out.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", cfg.as_str(), "--out", out_s];
        all.extend_from_slice(args);
        hificl(&all)
    };

    let o = run(&["train-base"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("base_seed1.hfkv").exists());
    assert!(out.join("base_seed1.metrics.jsonl").exists());

    let o = run(&["train-adapter", "--method", "hificl"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("trainable parameters: 128"), "{}", stdout(&o));
    let first = fs::read(out.join("hificl_seed1.hfkv")).unwrap();
    let o = run(&["train-adapter", "--method", "hificl"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(first, fs::read(out.join("hificl_seed1.hfkv")).unwrap());

    let o = run(&["train-adapter", "--method", "hificl-alpha1"]);
    assert_eq!(o.status.code(), Some(0));
    let metrics = fs::read_to_string(out.join("hificl-alpha1_seed1.metrics.jsonl")).unwrap();
    let header = metrics.lines().next().unwrap();
    assert!(header.contains("\"alpha_one\":true") && header.contains("\"kind\":\"run\""), "{header}");

    let adapter = out.join("hificl_seed1.hfkv");
    let o = run(&["eval", "--adapter", adapter.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["shots"], 0);
    assert_eq!(v["episodes"], 30);
    assert!(v["accuracy"].as_f64().unwrap() >= 0.0);

    let o = run(&["eval", "--task", "episodic", "--shots", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = run(&["compare"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--train-missing"));

    let o = run(&["compare", "--train-missing"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = stdout(&o);
    for row in ["zero-shot", "8-shot-icl", "lora", "shift", "hificl-teacher", "hificl-dense-k", "hificl-dense-v"] {
        assert!(table.contains(row), "{row} missing from {table}");
    }
    let jsonl = fs::read_to_string(out.join("compare.jsonl")).unwrap();
    assert_eq!(jsonl.lines().filter(|l| l.contains("\"kind\":\"summary\"")).count(), 9);

    let o = run(&["bench"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("teacher / plain"));
    let bench = fs::read_to_string(out.join("bench.jsonl")).unwrap();
    let zero: serde_json::Value = serde_json::from_str(bench.lines().next().unwrap()).unwrap();
    assert_eq!(zero["row"], "zero-shot");
    assert_eq!(zero["normalized"], 1.0);
}
