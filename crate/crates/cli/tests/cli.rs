use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cpool_cli::config;
use cpool_cli::inspect::{export_pool_stats, mask_dump, stats_csv, LayerDump, MaskDump, STAT_BINS};
use cpool_core::params::ParamStore;
use cpool_harness::checkpoint::{self, Checkpoint};
use cpool_harness::metrics::RunRecord;
use cpool_harness::{Model, ModelConfig, TrainConfig};
use tempfile::TempDir;

const CONFIG: &str = r#"
total_steps = 20
seq_len = 12
batch_size = 2
eval_interval = 10
eval_examples = 8
dtype = "f64"

[model]
kind = "transformer"
layers = 3
d_model = 16
heads = 2
ffn_hidden = 16
vocab_size = 256
max_seq_len = 16
causal = true

[model.cp]

[dataset]
kind = "synthetic_text"
bytes = 20000
seed = 0
"#;

const SAMPLE: &str = "the cat sat on the mat while the dog slept by the door, and nobody minded at all.";

fn cpool(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cpool"));
    cmd.args(args).env_remove(config::SEED_ENV);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn cpool")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The failure contract: one `error[class]: ...` line on stderr.
fn assert_fails(o: &Output, code: i32, class: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{class}]: ")), "{err}");
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace { dir: TempDir::new().unwrap() };
        ws.write("c.toml", CONFIG);
        ws.write("sample.txt", SAMPLE);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn write(&self, name: &str, text: &str) {
        std::fs::write(self.path(name), text).unwrap();
    }

    fn train(&self) -> PathBuf {
        let o = cpool(&["train", "--config", &self.arg("c.toml"), "--out", &self.arg("run")], &[]);
        assert!(o.status.success(), "{}", stderr(&o));
        self.path("run")
    }
}

fn record(run: &Path) -> RunRecord {
    serde_json::from_str(&std::fs::read_to_string(run.join("run.json")).unwrap()).unwrap()
}

#[test]
fn train_writes_the_run_record() {
    let ws = Workspace::new();
    let run = ws.train();
    let r = record(&run);
    assert_eq!(r.config, config::parse(CONFIG).unwrap());
    assert_eq!(r.train_events().count(), 20);
    assert!(run.join("metrics.jsonl").exists() && run.join("model.cpkt").exists());
}

#[test]
fn printed_config_round_trips() {
    let ws = Workspace::new();
    let o = cpool(&["train", "--config", &ws.arg("c.toml"), "--print-config"], &[]);
    assert!(o.status.success());
    let printed = String::from_utf8(o.stdout).unwrap();
    let reparsed = config::parse(&printed).unwrap();
    assert_eq!(reparsed, config::parse(CONFIG).unwrap());
    assert_eq!(config::to_toml(&reparsed).unwrap(), printed);
    assert!(!ws.path("run").exists());
}

#[test]
fn seed_env_overrides_the_config() {
    let ws = Workspace::new();
    let o = cpool(&["train", "--config", &ws.arg("c.toml"), "--print-config"], &[("CP_SEED", "42")]);
    let printed: TrainConfig = toml::from_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(printed.seed, 42);
    let o = cpool(&["train", "--config", &ws.arg("c.toml"), "--print-config"], &[("CP_SEED", "-1")]);
    assert_fails(&o, 3, "config");
}

#[test]
fn usage_errors_exit_2() {
    assert_fails(&cpool(&["frobnicate"], &[]), 2, "usage");
    assert_fails(&cpool(&[], &[]), 2, "usage");
    assert_fails(&cpool(&["train", "--config", "c.toml", "--bogus"], &[]), 2, "usage");
    assert_fails(&cpool(&["train", "--config", "c.toml"], &[]), 2, "usage");
    assert_fails(&cpool(&["gradcheck", "--module", "softmax"], &[]), 2, "usage");
    assert_fails(&cpool(&["eval", "--checkpoint", "m", "--config", "c", "--split", "val"], &[]), 2, "usage");
    assert!(cpool(&["--help"], &[]).status.success());
}

#[test]
fn invalid_configs_exit_3() {
    let ws = Workspace::new();
    let cases = [
        CONFIG.replace("seq_len = 12", "seq_len = 12\nlearning_rate = 1.0"),
        CONFIG.replace("seq_len = 12", "seq_len = 17"),
        CONFIG.replace("d_model = 16", "d_model = 15"),
        CONFIG.replace("[model.cp]", "[model.cp]\nwidth = 3"),
        CONFIG.replace("kind = \"synthetic_text\"", "kind = \"imagenet\""),
        CONFIG.replace("total_steps = 20", "total_steps = \"many\""),
    ];
    for (i, text) in cases.iter().enumerate() {
        ws.write("bad.toml", text);
        let o = cpool(&["train", "--config", &ws.arg("bad.toml"), "--out", &ws.arg("run")], &[]);
        assert_fails(&o, 3, "config");
        assert!(!ws.path("run").exists(), "case {i} started a run");
    }
}

#[test]
fn runtime_failures_exit_1() {
    let ws = Workspace::new();
    let o = cpool(&["train", "--config", &ws.arg("missing.toml"), "--out", &ws.arg("run")], &[]);
    assert_fails(&o, 1, "runtime");
    ws.write("junk.cpkt", "not a checkpoint");
    let o = cpool(&["inspect", "--checkpoint", &ws.arg("junk.cpkt"), "--input", &ws.arg("sample.txt"), "--dump", &ws.arg("m.json")], &[]);
    assert_fails(&o, 1, "runtime");
}

#[test]
fn gradcheck_reports_the_max_error() {
    let o = cpool(&["gradcheck", "--module", "contextpool", "--seed", "7"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let last = out.lines().last().unwrap();
    let err: f64 = last.strip_prefix("max relative error ").unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-4);
    assert!(last.ends_with("over 40 checks"), "{last}");
}

#[test]
fn inspect_dump_satisfies_invariants_and_is_reproducible() {
    let ws = Workspace::new();
    let run = ws.train();
    let ckpt = run.join("model.cpkt").display().to_string();
    let args = |dump: &str, stats: &str| {
        vec![
            "inspect".to_string(),
            "--checkpoint".into(),
            ckpt.clone(),
            "--input".into(),
            ws.arg("sample.txt"),
            "--dump".into(),
            ws.arg(dump),
            "--full-mask".into(),
            "--stats".into(),
            ws.arg(stats),
        ]
    };
    for (dump, stats) in [("a.json", "a.csv"), ("b.json", "b.csv")] {
        let o = cpool(&args(dump, stats).iter().map(String::as_str).collect::<Vec<_>>(), &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read(ws.path("a.json")).unwrap();
    assert_eq!(a, std::fs::read(ws.path("b.json")).unwrap());
    assert_eq!(std::fs::read(ws.path("a.csv")).unwrap(), std::fs::read(ws.path("b.csv")).unwrap());

    let dump: MaskDump = serde_json::from_slice(&a).unwrap();
    dump.check().unwrap();
    assert_eq!(dump.tokens, 16);
    assert_eq!(dump.layers.iter().map(|l| l.layer).collect::<Vec<_>>(), [0, 1]);
    assert_eq!(dump.checkpoint_sha256, Checkpoint::read(&run.join("model.cpkt")).unwrap().sha256);
    for l in &dump.layers {
        let g = l.g.as_ref().unwrap();
        for (i, row) in g.iter().enumerate() {
            assert_eq!(row[i], 1.0);
            assert!(row[i + 1..].iter().all(|&v| v == 0.0), "causal mask leaks");
        }
    }
}

#[test]
fn eval_is_reproducible_and_matches_the_run() {
    let ws = Workspace::new();
    let run = ws.train();
    let ckpt = run.join("model.cpkt").display().to_string();
    for out in ["e1.json", "e2.json"] {
        let o = cpool(&["eval", "--checkpoint", &ckpt, "--config", &ws.arg("c.toml"), "--out", &ws.arg(out)], &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let e1 = std::fs::read(ws.path("e1.json")).unwrap();
    assert_eq!(e1, std::fs::read(ws.path("e2.json")).unwrap());
    let report: cpool_cli::EvalReport = serde_json::from_slice(&e1).unwrap();
    let r = record(&run);
    assert_eq!(report.checkpoint_step, 20);
    assert_eq!(report.loss, r.final_dev.loss);
    assert_eq!(report.bpc, r.final_dev.bpc);

    ws.write("other.toml", &CONFIG.replace("d_model = 16", "d_model = 8"));
    let o = cpool(&["eval", "--checkpoint", &ckpt, "--config", &ws.arg("other.toml")], &[]);
    assert_fails(&o, 3, "config");
}

#[test]
fn ablate_writes_the_table() {
    let ws = Workspace::new();
    ws.write("c.toml", &CONFIG.replace("total_steps = 20", "total_steps = 2"));
    let o = cpool(&["ablate", "--config", &ws.arg("c.toml"), "--out", &ws.arg("abl"), "--seeds", "0,1"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(ws.path("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
    assert!(csv.lines().next().unwrap().ends_with("seed0,seed1"));
    assert!(ws.path("abl/ablation.md").exists() && ws.path("abl/ablation.json").exists());
}

/// Checkpoint of an untrained 3-layer model whose predictors output zeros.
fn zero_predictor_checkpoint(path: &Path) -> Checkpoint {
    let config = config::parse(CONFIG).unwrap().model;
    let (mut store, model): (ParamStore<f64>, Model) = config.build(5).unwrap();
    let Model::Lm(lm) = &model else { unreachable!() };
    for block in &lm.blocks {
        if let Some(cp) = &block.cp {
            cp.predictor.zero(&mut store);
        }
    }
    checkpoint::save(path, &config, &store, 0).unwrap();
    Checkpoint::read(path).unwrap()
}

#[test]
fn zero_predictor_puts_every_size_in_one_bin() {
    let ws = Workspace::new();
    let ckpt = zero_predictor_checkpoint(&ws.path("zero.cpkt"));
    let sample = SAMPLE.repeat(3);
    let stats = export_pool_stats(&ckpt, sample.as_bytes()).unwrap();
    assert_eq!(stats.len(), 2);
    for l in &stats {
        assert_eq!(l.counts.len(), STAT_BINS);
        assert_eq!(l.counts[STAT_BINS / 2], sample.len());
        assert_eq!(l.tokens(), sample.len());
        assert_eq!((l.mean_s, l.std_s), (0.5, 0.0));
    }
    let dump = mask_dump(&ckpt, "sample", sample.as_bytes(), false).unwrap();
    dump.check().unwrap();
    for l in &dump.layers {
        assert!(l.s.iter().all(|&s| s == 0.5));
        assert!(l.w.iter().all(|&w| (w - 1.0 / 16.0).abs() < 1e-15));
    }
}

#[test]
fn stats_csv_layout() {
    let ws = Workspace::new();
    let ckpt = zero_predictor_checkpoint(&ws.path("zero.cpkt"));
    let csv = stats_csv(&export_pool_stats(&ckpt, SAMPLE.as_bytes()).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * STAT_BINS + 1 + 2);
    assert_eq!(lines[0], "layer,bin_lo,bin_hi,count");
    assert_eq!(lines[1], "0,0,0.05,0");
    assert_eq!(lines[11], format!("0,0.5,0.55,{}", SAMPLE.len()));
    assert_eq!(lines[20], "0,0.95,1,0");
    assert_eq!(lines[41], "layer,mean_s,std_s");
    assert_eq!(lines[42], "0,0.5,0");
    assert_eq!(lines[43], "1,0.5,0");
}

#[test]
fn inspect_rejects_inputs_the_model_cannot_read() {
    let ws = Workspace::new();
    let ckpt = zero_predictor_checkpoint(&ws.path("zero.cpkt"));
    assert!(mask_dump(&ckpt, "empty", b"", false).is_err());
    let mut config = config::parse(CONFIG).unwrap();
    if let ModelConfig::Transformer(t) = &mut config.model {
        t.cp = None;
    }
    let (store, _) = config.model.build::<f64>(0).unwrap();
    checkpoint::save(&ws.path("plain.cpkt"), &config.model, &store, 0).unwrap();
    let o = cpool(&["inspect", "--checkpoint", &ws.arg("plain.cpkt"), "--input", &ws.arg("sample.txt"), "--stats", &ws.arg("s.csv")], &[]);
    assert_fails(&o, 3, "config");
}

#[test]
fn mask_dump_check_catches_violations() {
    let layer = LayerDump {
        layer: 0,
        w: vec![0.25; 4],
        s: vec![0.5; 4],
        sigma: vec![0.2; 4],
        g: None,
    };
    let dump = |l: LayerDump| MaskDump {
        input: "x".into(),
        input_sha256: String::new(),
        checkpoint_sha256: String::new(),
        tokens: 4,
        layers: vec![l],
    };
    assert!(dump(layer.clone()).check().is_ok());
    assert!(dump(LayerDump { w: vec![0.25, 0.25, 0.25, 0.2500011], ..layer.clone() }).check().is_err());
    assert!(dump(LayerDump { s: vec![0.5, 0.5, 1.0 + 1e-12, 0.5], ..layer.clone() }).check().is_err());
    assert!(dump(LayerDump { sigma: vec![0.2; 3], ..layer.clone() }).check().is_err());
    assert!(dump(LayerDump { g: Some(vec![vec![1.0; 4]; 3]), ..layer }).check().is_err());
}
