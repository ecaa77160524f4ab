use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
[world]
min_chars = 2
max_chars = 4
[data]
n = 60
[codec]
extractor_layers = 1
combiner_layers = 1
model_dim = 16
heads = 2
max_frames = 16
[heads]
asr_layers = 1
asr_dim = 16
asr_heads = 2
max_text = 8
clap_width = 16
clap_heads = 2
clap_dim = 8
[lm]
backbone_layers = 1
width = 16
heads = 2
max_context = 64
decoder_layers = 1
decoder_heads = 2
[train_codec]
batch_size = 8
lr = 1e-3
max_steps = 4
[train_lm]
batch_size = 8
lr = 1e-3
max_steps = 4
[eval]
max_len = 8
probe_epochs = 10
bench_texts = 2
bench_steps = 4
bench_repeats = 1
"#;

struct Env {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    run: PathBuf,
}

impl Env {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let run = tmp.path().join("run");
        Self { _tmp: tmp, config, run }
    }

    fn cmd(&self, run: &Path, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_preftts"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(run)
            .arg("--quiet")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cmd(&self.run, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> (i32, String) {
        let out = self.cmd(&self.run, args);
        (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn read(p: PathBuf) -> String {
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_is_deterministic_in_the_seed() {
    let env = Env::new();
    let (a, b, c) = (env.run.join("a"), env.run.join("b"), env.run.join("c"));
    for (dir, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        assert!(env.cmd(dir, &["--seed", seed, "gen-data"]).status.success());
    }
    for f in ["train.jsonl", "test.jsonl", "unit_table.txt", "world.json"] {
        assert_eq!(read(a.join("data").join(f)), read(b.join("data").join(f)), "{f}");
    }
    assert_ne!(read(a.join("data/train.jsonl")), read(c.join("data/train.jsonl")));
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let env = Env::new();
    let (code, err) = env.code(&["--override", "lm.nope=3", "gen-data"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("lm.nope"));
    let (code, _) = env.code(&["--override", "train_lm.lr=-1", "gen-data"]);
    assert_eq!(code, 2);
}

#[test]
fn stages_refuse_missing_prerequisites() {
    let env = Env::new();
    let (code, err) = env.code(&["train", "--stage", "codec"]);
    assert_eq!(code, 3, "{err}");
    env.ok(&["gen-data"]);
    env.ok(&["train", "--stage", "codec"]);
    let (code, err) = env.code(&["train", "--stage", "lm"]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("label"), "{err}");
}

#[test]
fn full_pipeline_on_a_tiny_world() {
    let env = Env::new();
    env.ok(&["gen-data"]);
    let out = env.ok(&["--override", "codec.noise_std=0.0", "train", "--stage", "codec"]);
    assert!(out.contains("fingerprint"));
    let snapshots: Vec<String> = fs::read_dir(env.run.join("snapshots"))
        .unwrap()
        .map(|e| read(e.unwrap().path()))
        .collect();
    assert!(snapshots.iter().any(|s| s.contains("noise_std = 0.0")));
    let (code, err) = env.code(&["train", "--stage", "codec"]);
    assert_eq!(code, 2, "existing checkpoint must not be overwritten: {err}");

    assert!(env.ok(&["label"]).contains("prompt codebook utilization"));
    env.ok(&["train", "--stage", "lm"]);
    assert!(env.run.join("logs/lm.jsonl").exists());

    let args = ["synthesize", "--instruction", "speak in a calm tone", "--text", "abc"];
    let first = env.ok(&args);
    assert_eq!(first, env.ok(&args));
    let v: serde_json::Value = serde_json::from_str(first.trim()).unwrap();
    assert_eq!(v["decoding_mode"], "hierarchical");
    let speech = v["speech"].as_array().unwrap().len();
    assert_eq!(v["content"].as_array().unwrap().len(), speech);
    assert!(speech <= 8);

    let report = env.ok(&["eval"]);
    assert!(report.contains("token_error_rate"));
    let json: serde_json::Value = serde_json::from_str(&read(env.run.join("eval.json"))).unwrap();
    for key in ["reconstruction_accuracy", "token_error_rate", "style_accuracy", "retrieval_acc"] {
        let x = json[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x), "{key} = {x}");
    }
    let rescored = env.ok(&["eval", "--records", env.run.join("generations.jsonl").to_str().unwrap()]);
    let rescored: serde_json::Value = serde_json::from_str(rescored.trim()).unwrap();
    assert_eq!(rescored["token_error_rate"], json["token_error_rate"]);

    let oracle: serde_json::Value = serde_json::from_str(env.ok(&["eval", "--oracle"]).trim()).unwrap();
    assert_eq!(oracle["token_error_rate"].as_f64().unwrap(), 0.0);
    assert_eq!(oracle["style_accuracy"].as_f64().unwrap(), 1.0);

    assert!(env.ok(&["bench"]).contains("ratio"));

    env.ok(&["train", "--stage", "lm", "--variant", "single-step"]);
    let single = env.ok(&["synthesize", "--mode", "single_step", "--instruction", "speak in a calm tone", "--text", "ab"]);
    let v: serde_json::Value = serde_json::from_str(single.trim()).unwrap();
    assert_eq!(v["decoding_mode"], "single_step");
    assert!(v["content"].as_array().unwrap().is_empty());
    assert!(v["prompt"].as_array().unwrap().is_empty());
    let (code, _) = env.code(&["synthesize", "--mode", "parallel", "--instruction", "x", "--text", "ab"]);
    assert_eq!(code, 3);
}

#[test]
fn ablation_writes_a_row_per_variant() {
    let env = Env::new();
    env.ok(&["gen-data"]);
    env.ok(&["train", "--stage", "codec"]);
    env.ok(&["label"]);
    let table = env.ok(&["ablate", "--variants", "proposed,parallel"]);
    assert!(table.contains("proposed") && table.contains("parallel"), "{table}");
    let rows = read(env.run.join("ablation.jsonl"));
    assert_eq!(rows.lines().count(), 2);
    let (code, _) = env.code(&["ablate", "--variants", "bogus"]);
    assert_eq!(code, 2);
}
