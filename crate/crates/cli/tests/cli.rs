use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dense2moe");

const TINY: &str = r#"
seed = 3

[model]
image_size = 8
patch_size = 4
channels = 3
hidden = 8
heads = 2
n_double = 1
n_single = 2
ffn_ratio = 4
text_len = 5
vocab = 32

[corpus]
n_categories = 4
train_size = 32

[moe]
skip_blocks = []
calibration_batches = 2
calibration_batch_size = 2

[[mob.groups]]
start = 1
len = 2
active = 1

[stage.teacher]
steps = 3
batch_size = 2

[stage.init]
steps = 2
batch_size = 2

[stage.moe]
steps = 2
batch_size = 2

[stage.mob]
steps = 2
batch_size = 2

[analysis]
sample_steps = 2
prompts_per_category = 1
topk_values = [0, 2]
validation_size = 4
"#;

fn run(args: &[&Path]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&Path]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

struct Dir {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Dir {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        std::fs::write(root.join("run.toml"), config).unwrap();
        Dir { _tmp: tmp, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn teacher(&self) -> PathBuf {
        ok(&[Path::new("train-teacher"), Path::new("--config"), &self.p("run.toml"), Path::new("--out"), &self.root]);
        self.p("teacher.json")
    }

    fn init(&self, extra: &[&str]) -> PathBuf {
        let teacher = self.teacher();
        let mut args: Vec<&Path> = vec![Path::new("stage-init"), Path::new("--teacher"), &teacher, Path::new("--out"), &self.root];
        args.extend(extra.iter().map(Path::new));
        ok(&args);
        self.p("init.json")
    }
}

#[test]
fn unknown_config_key_is_a_json_error() {
    let d = Dir::new(&format!("{TINY}\n[stage.extra]\nsteps = 1\n"));
    let out = run(&[Path::new("train-teacher"), Path::new("--config"), &d.p("run.toml"), Path::new("--out"), &d.root]);
    assert_eq!(error_line(&out)["error"], "config");
    let d = Dir::new(&TINY.replace("hidden = 8", "hidden = 8\nhiden = 8"));
    let out = run(&[Path::new("train-teacher"), Path::new("--config"), &d.p("run.toml")]);
    assert!(error_line(&out)["message"].as_str().unwrap().contains("hiden"));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let d = Dir::new(TINY);
    let out = run(&[Path::new("sample"), Path::new("--checkpoint"), &d.p("absent.json")]);
    assert_eq!(error_line(&out)["error"], "io");
    let out = run(&[Path::new("sample")]);
    assert_eq!(error_line(&out)["error"], "config");
}

#[test]
fn stage_order_is_enforced() {
    let d = Dir::new(TINY);
    let teacher = d.teacher();
    let out = run(&[Path::new("stage-moe"), Path::new("--checkpoint"), &teacher, Path::new("--teacher"), &teacher, Path::new("--out"), &d.root]);
    let e = error_line(&out);
    assert_eq!(e["error"], "provenance");
    assert_eq!(e["expected_stage"], "stage-init");
    assert!(e["message"].as_str().unwrap().contains("stage-init"));
}

#[test]
fn fresh_init_verifies_and_samples_with_defaults() {
    let d = Dir::new(TINY);
    let init = d.init(&["--steps", "0"]);
    let report = ok(&[Path::new("verify"), Path::new("--checkpoint"), &init, Path::new("--teacher"), &d.p("teacher.json")]);
    let checks: Vec<serde_json::Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let status = |name: &str| checks.iter().find(|c| c["check"] == name).map(|c| c["status"].clone());
    assert_eq!(status("reassembly").unwrap(), "pass");
    assert_eq!(status("gate_normalization").unwrap(), "pass");
    assert_eq!(status("teacher_link").unwrap(), "pass");

    let out = d.p("samples");
    ok(&[Path::new("sample"), Path::new("--checkpoint"), &init, Path::new("--out"), &out]);
    assert!(out.join("samples.ppm").exists());
    let recorded = std::fs::read_to_string(out.join("sample.config.toml")).unwrap();
    // the run config chooses 2 steps; without the key the default applies
    assert!(recorded.contains("sample_steps = 2"), "{recorded}");
    let bare = Dir::new(&TINY.replace("sample_steps = 2\n", ""));
    let out = bare.p("samples");
    ok(&[Path::new("sample"), Path::new("--checkpoint"), &init, Path::new("--config"), &bare.p("run.toml"), Path::new("--out"), &out]);
    let recorded = std::fs::read_to_string(out.join("sample.config.toml")).unwrap();
    assert!(recorded.contains("sample_steps = 28"), "{recorded}");
}

#[test]
fn truncated_blob_is_rejected() {
    let d = Dir::new(TINY);
    let teacher = d.teacher();
    let blob = d.p("teacher.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    let out = run(&[Path::new("report-params"), Path::new("--checkpoint"), &teacher]);
    assert_eq!(error_line(&out)["error"], "checkpoint");
}

#[test]
fn full_tiny_pipeline_is_deterministic() {
    let pipeline = || {
        let d = Dir::new(TINY);
        let teacher = d.teacher();
        let init = d.init(&[]);
        let out = d.root.clone();
        ok(&[Path::new("stage-moe"), Path::new("--checkpoint"), &init, Path::new("--teacher"), &teacher, Path::new("--out"), &out]);
        let moe = d.p("moe.json");
        ok(&[Path::new("stage-mob"), Path::new("--checkpoint"), &moe, Path::new("--teacher"), &teacher, Path::new("--out"), &out]);
        for stem in ["init", "moe", "mob"] {
            ok(&[Path::new("verify"), Path::new("--checkpoint"), &d.p(&format!("{stem}.json"))]);
        }
        let analysis = d.p("analysis");
        ok(&[Path::new("analyze-experts"), Path::new("--checkpoint"), &d.p("mob.json"), Path::new("--out"), &analysis]);
        assert!(analysis.join("topk_sweep.csv").exists());
        ok(&[Path::new("probe-blocks"), Path::new("--checkpoint"), &d.p("moe.json"), Path::new("--out"), &analysis]);
        ok(&[Path::new("report-params"), Path::new("--checkpoint"), &d.p("mob.json"), Path::new("--out"), &analysis]);
        let logs: Vec<Vec<u8>> = ["teacher", "init", "moe", "mob"]
            .iter()
            .map(|s| std::fs::read(d.p(&format!("{s}_loss.csv"))).unwrap())
            .collect();
        let hash = dense2moe::checkpoint::checkpoint_hash(&d.p("mob.json")).unwrap();
        (logs, hash)
    };
    assert_eq!(pipeline(), pipeline());
}
