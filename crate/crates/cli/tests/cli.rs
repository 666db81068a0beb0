use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use rankclip_core::data::load_dataset;
use rankclip_core::trainer::{save_checkpoint, OptimizerState};
use rankclip_core::{EncoderConfig, EncoderParams};

const SMALL: &str = r#"
seed = 1

[dataset]
num_superclasses = 2
subclasses_per_superclass = 2
latent_dim = 8
image_dim = 10
text_dim = 6
within_super_corr = 0.6
noise_std = 0.1
pairs_per_class = 12
eval_pairs = 20
seed = 4

[encoder]
image_hidden = [12]
text_hidden = [12]
shared_dim = 4

[train]
epochs = 3
batch_size = 16
learning_rate = 0.01

[eval]
top_ks = [1, 2, 4]
recall_ks = [1, 5]
probe_iters = 50

[compare]
variants = ["clip_only", "full", "in_only"]
seeds = [0, 1]
"#;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankclip-lab"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn data(&self, config: &Path) -> PathBuf {
        let out = self.path("data.bin");
        let o = lab(&["gen-data", "--config", s(config), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    }
}

#[test]
fn gen_data_is_deterministic_and_reloadable() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", SMALL);
    let a = ws.path("a.bin");
    let b = ws.path("b.bin");
    for out in [&a, &b] {
        let o = lab(&["gen-data", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("68 pairs"), "{}", stdout(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(load_dataset(&a).unwrap().len(), 4 * 12 + 20);
}

#[test]
fn config_errors_name_the_key() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", &SMALL.replace("seed = 4\n", ""));
    let o = lab(&["gen-data", "--config", s(&cfg), "--out", s(&ws.path("x.bin"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing key: dataset.seed"), "{}", stderr(&o));

    let cfg = ws.config("d.toml", &format!("{SMALL}\n[loss]\nlamda_mode = \"fixed\"\n"));
    let o = lab(&["gen-data", "--config", s(&cfg), "--out", s(&ws.path("x.bin"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown key: loss.lamda_mode"), "{}", stderr(&o));

    let o = lab(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_outputs_are_deterministic() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", SMALL);
    let data = ws.data(&cfg);
    let (a, b) = (ws.path("run_a"), ws.path("run_b"));
    for out in [&a, &b] {
        let o = lab(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for file in ["history.ndjson", "checkpoint.bin"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 9);
    assert!(summary["wall_time_s"].as_f64().unwrap() >= 0.0);
    let history = fs::read_to_string(a.join("history.ndjson")).unwrap();
    assert_eq!(history.lines().count(), 3 * 3);

    let c = ws.path("run_c");
    let o = lab(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&c),
        "--seed",
        "9",
    ]);
    assert!(o.status.success());
    assert_ne!(
        fs::read(a.join("checkpoint.bin")).unwrap(),
        fs::read(c.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn clip_only_history_has_zero_rank_terms() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", &format!("{SMALL}\n[loss]\nablation = \"clip_only\"\n"));
    let data = ws.data(&cfg);
    let out = ws.path("run");
    let o = lab(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for line in fs::read_to_string(out.join("history.ndjson")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["l_in"], 0.0);
        assert_eq!(v["l_cross"], 0.0);
    }
}

#[test]
fn smoke_training_is_fast() {
    let ws = Workspace::new();
    let text = SMALL
        .replace("num_superclasses = 2", "num_superclasses = 4")
        .replace("subclasses_per_superclass = 2", "subclasses_per_superclass = 4")
        .replace("latent_dim = 8", "latent_dim = 32")
        .replace("image_dim = 10", "image_dim = 64")
        .replace("text_dim = 6", "text_dim = 48")
        .replace("pairs_per_class = 12", "pairs_per_class = 32")
        .replace("epochs = 3", "epochs = 2")
        .replace("batch_size = 16", "batch_size = 256")
        .replace(
            "[encoder]\nimage_hidden = [12]\ntext_hidden = [12]\nshared_dim = 4\n",
            "",
        );
    let cfg = ws.config("c.toml", &text);
    let data = ws.data(&cfg);
    let started = Instant::now();
    let o = lab(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&ws.path("run")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(started.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn eval_untrained_checkpoint() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", SMALL);
    let data = ws.data(&cfg);
    let mut enc = EncoderConfig::with_dims(10, 6, 3);
    enc.shared_dim = 4;
    let ckpt = ws.path("init.bin");
    save_checkpoint(
        &EncoderParams::init(&enc).unwrap(),
        &OptimizerState::default(),
        0,
        &ckpt,
    )
    .unwrap();

    let (a, b) = (ws.path("eval_a"), ws.path("eval_b"));
    for out in [&a, &b] {
        let o = lab(&[
            "eval",
            "--config",
            s(&cfg),
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--out",
            s(out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for file in ["metrics.json", "metrics.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap());
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["top_k_accuracy"]["4"], 1.0);
    let gap = m["modality_gap"].as_f64().unwrap();
    assert!((0.0..=2.0).contains(&gap));
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("top1,top2,top4,i2t_r1,i2t_r5,t2i_r1,t2i_r5,alignment,"));

    // Default [eval] asks for top-5 over 4 classes.
    let o = lab(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_rejects_corrupt_inputs() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", SMALL);
    let data = ws.data(&cfg);
    let mut enc = EncoderConfig::with_dims(10, 6, 3);
    enc.shared_dim = 4;
    let ckpt = ws.path("init.bin");
    save_checkpoint(
        &EncoderParams::init(&enc).unwrap(),
        &OptimizerState::default(),
        0,
        &ckpt,
    )
    .unwrap();

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[4] = 7;
    let bad = ws.path("bad.bin");
    fs::write(&bad, &bytes).unwrap();
    let o = lab(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&bad),
        "--data",
        s(&data),
        "--out",
        s(&ws.path("e")),
    ]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("unsupported version"), "{}", stderr(&o));

    let o = lab(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&data),
        "--data",
        s(&ckpt),
        "--out",
        s(&ws.path("e")),
    ]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_with_runtime_code() {
    let ws = Workspace::new();
    let text = SMALL.replace("learning_rate = 0.01", "learning_rate = 1e300\noptimizer = \"sgd\"");
    let cfg = ws.config("c.toml", &text);
    let data = ws.data(&cfg);
    let o = lab(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&ws.path("run")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("divergence at step "), "{}", stderr(&o));
}

#[test]
fn verify_modes_pass() {
    for mode in ["gradcheck", "oracle", "schedule"] {
        let o = lab(&["verify", "--mode", mode]);
        assert_eq!(o.status.code(), Some(0), "{mode}: {}", stdout(&o));
        assert!(!stdout(&o).contains("FAIL"));
    }
    let out = stdout(&lab(&["verify", "--mode", "schedule"]));
    assert!(out.contains(&format!("\n1,{}\n", 2.0 / 63.0)), "{out}");
    assert!(out.contains(&format!("\n42,{}\n", 125.0 / 63.0)), "{out}");
    for i in 43..=64 {
        assert!(out.contains(&format!("\n{i},2\n")), "{i}");
    }
}

#[test]
fn compare_writes_table_and_wins() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", SMALL);
    let out = ws.path("cmp");
    let o = Command::new(env!("CARGO_BIN_EXE_rankclip-lab"))
        .args(["compare", "--config", s(&cfg), "--out", s(&out)])
        .env("RANKCLIP_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 * 2);
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(&header[..6], ["variant", "seed", "l_clip", "l_in", "l_cross", "total"]);
    for row in &lines[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), header.len());
        if cols[0] == "clip_only" {
            assert_eq!((cols[3], cols[4]), ("0", "0"));
        }
    }
    let wins = fs::read_to_string(out.join("wins.csv")).unwrap();
    assert!(wins.starts_with("metric,full_wins,clip_only_wins,ties\n"));
    assert!(wins.contains("\nconsistency_spearman,"));

    let again = ws.path("cmp2");
    let o = lab(&["compare", "--config", s(&cfg), "--out", s(&again)]);
    assert!(o.status.success());
    assert_eq!(csv, fs::read_to_string(again.join("compare.csv")).unwrap());
}

#[test]
fn usage_errors_exit_with_validation_code() {
    assert_eq!(lab(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lab(&["verify", "--mode", "everything"]).status.code(), Some(1));
    assert_eq!(lab(&["--help"]).status.code(), Some(0));
}
