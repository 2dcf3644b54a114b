use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
# a few-second run
epochs = 2
batch_size = 12
k = 4
d = 4
probe_epochs = 3
n_train = 120
n_dev = 30
n_test = 30
";

fn paircl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paircl"))
        .args(args)
        .current_dir(dir)
        .env_remove("PAIRCL_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    std::fs::write(&path, SMALL).unwrap();
    path.display().to_string()
}

#[test]
fn gradcheck_seed_three_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = paircl(&["gradcheck", "--seed", "3"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    for group in ["encoder", "cross", "classifier"] {
        let line = text.lines().find(|l| l.starts_with(group)).expect(group);
        let err: f64 = line
            .split_whitespace()
            .nth(4)
            .and_then(|v| v.parse().ok())
            .expect("error value");
        assert!(err < 1e-5, "{line}");
    }
}

#[test]
fn zero_epoch_train_reports_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = paircl(&["train", "--config", &cfg, "--epochs", "0", "--out-dir", "run"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("best epoch 0"));
    assert!(dir.path().join("run/best.json").exists());
}

#[test]
fn eval_without_checkpoint_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = paircl(&["eval", "--checkpoint", "nowhere/best.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("does not exist"), "{}", stderr(&out));
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = paircl(&["train", "--learning-rate", "3"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
    assert_eq!(paircl(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "epochs = 1\ntemperature = 0.1\n").unwrap();
    let out = paircl(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad.cfg:2"), "{}", stderr(&out));
}

#[test]
fn diverging_run_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = paircl(&["train", "--config", &cfg, "--lr", "1e300", "--out-dir", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn header_reflects_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_paircl"))
        .args(["train", "--config", &cfg, "--epochs", "0", "--tau", "0.2", "--out-dir", "run"])
        .current_dir(dir.path())
        .env("PAIRCL_SEED", "17")
        .output()
        .unwrap();
    let text = stdout(&out);
    assert!(text.contains("# seed = 17\n"));
    assert!(text.contains("# tau = 0.2\n"));
    assert!(text.contains("# k = 4\n"));
    assert!(text.contains("# epochs = 0\n"));
    assert!(text.contains("(reference scale: 512)"));

    let flag = Command::new(env!("CARGO_BIN_EXE_paircl"))
        .args(["train", "--config", &cfg, "--epochs", "0", "--seed", "5", "--out-dir", "run"])
        .current_dir(dir.path())
        .env("PAIRCL_SEED", "17")
        .output()
        .unwrap();
    assert!(stdout(&flag).contains("# seed = 5\n"));
}

#[test]
fn identical_invocations_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for out_dir in ["a", "b"] {
        let out = paircl(&["train", "--config", &cfg, "--out-dir", out_dir], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for name in ["best.json", "last.json", "report.json"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn file_pipeline_gen_train_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let common = ["--config", &cfg, "--data-dir", "data", "--format", "tsv", "--out-dir", "run"];
    let run = |cmd: &[&str]| {
        let mut args = cmd.to_vec();
        args.extend_from_slice(&common);
        let out = paircl(&args, dir.path());
        assert_eq!(out.status.code(), Some(0), "{cmd:?}: {}", stderr(&out));
        stdout(&out)
    };
    run(&["gen-data"]);
    assert!(dir.path().join("data/train.tsv").exists());
    run(&["train"]);
    assert!(dir.path().join("run/vocab.json").exists());
    let eval = run(&["eval", "--split", "dev"]);
    assert!(eval.contains("n 30  accuracy"));
    let json = eval.lines().last().unwrap();
    let report: serde_json::Value = serde_json::from_str(json).unwrap();
    let confusion = report["confusion"].as_array().unwrap();
    let total: u64 = confusion
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 30);
    let inspect = run(&["inspect"]);
    assert!(inspect.contains("format paircl-checkpoint v1"));
    assert!(inspect.contains("encoder.token_table"));
}

#[test]
fn ablate_writes_table_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = paircl(&["ablate", "--config", &cfg, "--seeds", "1", "--out-dir", "abl"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    for v in ["full", "-ce", "-scl", "-crossattn"] {
        assert!(text.lines().any(|l| l.starts_with(v)), "{v}");
    }
    let csv = std::fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(dir.path().join("abl/ablation.json").exists());
}
