use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small enough that every command finishes in seconds.
const TINY: &str = r#"
seed = 7

[data]
stride = 6

[data.synthetic]
sequences = 2
frames = 12
canvas = 64
object_min = 10
object_max = 14

[attack]
generator = "gradient"
surrogate = "auto"
decoy_offset = 3

[attack.budget]
norm = "linf"
epsilon = 0.1
steps = 2
step_size = 0.025

[train]
epochs = 1
batch_size = 4
image_size = 16
lr = 0.002

[train.unet]
base_channels = 8
channel_multipliers = [1, 2]
norm_groups = 4
time_sinusoid_dim = 16
time_embed_dim = 16

[train.schedule]
kind = "linear"
steps = 20
beta_start = 0.005
beta_end = 0.2

[purify]
t_star = 3
batch = 16

[eval.synthetic]
sequences = 2
frames = 10
canvas = 64
object_min = 10
object_max = 14

[eval.matrix]
search_size = 16

[eval.matrix.attack]
decoy_offset = 3

[eval.matrix.attack.budget]
norm = "linf"
epsilon = 0.1
steps = 2
step_size = 0.025
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_diffdf"));
        cmd.current_dir(self.dir.path())
            .env_remove("DIFFDF_SEED")
            .env_remove("DIFFDF_CONFIG")
            .arg("--config")
            .arg(self.path("tiny.toml"))
            .args(args);
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn manifest_len(dir: &Path) -> usize {
    let v: serde_json::Value = serde_json::from_slice(&read(&dir.join("manifest.json"))).unwrap();
    v["entries"].as_array().unwrap().len()
}

#[test]
fn make_data_counts_pairs_and_is_reproducible() {
    let env = Env::new();
    // 4 sequences × 30 frames at stride 10 → 12 frames, two crops each.
    let out = env.ok(&[
        "make-data",
        "--synthetic",
        "--sequences",
        "4",
        "--frames",
        "30",
        "--stride",
        "10",
        "--out",
        "a",
    ]);
    assert!(out.contains("pairs 24"), "{out}");
    assert_eq!(manifest_len(&env.path("a")), 24);
    env.ok(&[
        "make-data",
        "--synthetic",
        "--sequences",
        "4",
        "--frames",
        "30",
        "--stride",
        "10",
        "--out",
        "b",
    ]);
    assert_eq!(
        read(&env.path("a/manifest.json")),
        read(&env.path("b/manifest.json"))
    );
    assert!(env.path("a/run.json").exists());
    assert!(env.path("a/sequences").is_dir());
}

#[test]
fn seed_flag_and_environment() {
    let env = Env::new();
    env.ok(&["make-data", "--seed", "3", "--out", "flag3"]);
    let out = env.run_env(
        &["make-data", "--seed", "9", "--out", "env3"],
        &[("DIFFDF_SEED", "3")],
    );
    assert!(out.status.success());
    env.ok(&["make-data", "--seed", "4", "--out", "flag4"]);
    assert_eq!(
        read(&env.path("flag3/manifest.json")),
        read(&env.path("env3/manifest.json"))
    );
    assert_ne!(
        read(&env.path("flag3/manifest.json")),
        read(&env.path("flag4/manifest.json"))
    );
}

#[test]
fn configuration_errors_exit_with_2() {
    let env = Env::new();
    std::fs::write(env.path("bad.toml"), "[train]\nepochz = 1\n").unwrap();
    let out = env.run_env(
        &["make-data", "--out", "x"],
        &[("DIFFDF_CONFIG", env.path("bad.toml").to_str().unwrap())],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    assert_eq!(
        env.run(&["train", "--data", "x", "--out", "y", "--weights", "1,2"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        env.run(&["make-data", "--preset", "huge", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(env.run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_3() {
    let env = Env::new();
    std::fs::write(env.path("file"), "not a directory").unwrap();
    let out = env.run(&["make-data", "--out", "file/sub"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = env.run(&["train", "--data", "missing", "--out", "t"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn print_config_round_trips() {
    let env = Env::new();
    let text = env.ok(&["--print-config", "make-data", "--out", "x"]);
    std::fs::write(env.path("printed.toml"), &text).unwrap();
    let again = env.run_env(
        &["--print-config", "make-data", "--out", "x"],
        &[("DIFFDF_CONFIG", env.path("printed.toml").to_str().unwrap())],
    );
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
    assert!(!env.path("x").exists());
}

#[test]
fn attack_respects_budget() {
    let env = Env::new();
    let out = env.ok(&[
        "attack",
        "--kind",
        "gradient",
        "--epsilon",
        "0.06",
        "--steps",
        "10",
        "--out",
        "atk",
    ]);
    assert!(out.contains("<= 0.06"), "{out}");
    let run: serde_json::Value = serde_json::from_slice(&read(&env.path("atk/run.json"))).unwrap();
    assert!(run["summary"]["max_perturbation"].as_f64().unwrap() <= 0.06 + 1e-9);
    let out = env.ok(&[
        "attack",
        "--kind",
        "checker",
        "--epsilon",
        "0.1",
        "--out",
        "chk",
    ]);
    assert!(out.contains("structured"), "{out}");
    assert_eq!(
        env.run(&["attack", "--kind", "checker", "--out", "c2"])
            .status
            .code(),
        Some(2)
    );
}

fn loss_rows(p: &Path) -> Vec<Vec<f64>> {
    String::from_utf8(read(p))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn train_purify_eval_plot_pipeline() {
    let env = Env::new();
    env.ok(&["make-data", "--out", "data"]);
    let out = env.ok(&["train", "--data", "data", "--out", "model"]);
    assert!(out.contains("final loss"), "{out}");
    assert!(env.path("model/checkpoint.bin").exists());
    assert!(env.path("model/loss.csv").exists());

    // Directory and single-file purification.
    env.ok(&[
        "purify",
        "--checkpoint",
        "model",
        "--input",
        "data/adv",
        "--output",
        "pur",
        "--t-star",
        "2",
        "--deterministic",
        "true",
    ]);
    let n_in = std::fs::read_dir(env.path("data/adv")).unwrap().count();
    let n_out = std::fs::read_dir(env.path("pur"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "png")
        })
        .count();
    assert_eq!(n_in, n_out);
    let first = std::fs::read_dir(env.path("data/adv"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    env.ok(&[
        "purify",
        "--checkpoint",
        "model/checkpoint.bin",
        "--input",
        first.to_str().unwrap(),
        "--output",
        "one/out.png",
    ]);
    assert_eq!(image::open(env.path("one/out.png")).unwrap().width(), 16);
    let out = env.run(&[
        "purify",
        "--checkpoint",
        "model",
        "--input",
        "data/adv",
        "--output",
        "p2",
        "--t-star",
        "21",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = env.ok(&[
        "eval",
        "--checkpoint",
        "model",
        "--sequences",
        "data/sequences",
        "--pairs",
        "data",
        "--conditions",
        "original,attacked,defended",
        "--out",
        "ev",
    ]);
    assert!(out.contains("defended"), "{out}");
    let report = String::from_utf8(read(&env.path("ev/report.csv"))).unwrap();
    // 3 conditions × 2 sequences + 3 aggregates, plus the header.
    assert_eq!(report.lines().count(), 1 + 3 * 2 + 3);
    assert!(env.path("ev/quality.json").exists());
    assert!(env.path("ev/report.json").exists());

    env.ok(&["plot", "--from", "ev/report.csv"]);
    for png in ["success.png", "precision.png"] {
        let meta = std::fs::metadata(env.path("ev").join(png)).unwrap();
        assert!(meta.len() > 0);
    }
    env.ok(&["plot", "--from", "model/loss.csv", "--out", "lossplot"]);
    assert!(
        std::fs::metadata(env.path("lossplot/loss.png"))
            .unwrap()
            .len()
            > 0
    );

    // Defended without a model is a configuration error.
    assert_eq!(
        env.run(&["eval", "--conditions", "defended", "--out", "e2"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn zero_weights_reduce_total_to_simple() {
    let env = Env::new();
    env.ok(&["make-data", "--out", "data"]);
    env.ok(&[
        "train",
        "--data",
        "data",
        "--out",
        "m",
        "--weights",
        "0,0,0",
    ]);
    let rows = loss_rows(&env.path("m/loss.csv"));
    assert!(!rows.is_empty());
    for r in rows {
        assert_eq!(r[5], r[1]);
    }
}

#[test]
fn resume_continues_and_matches_uninterrupted_run() {
    let env = Env::new();
    env.ok(&["make-data", "--out", "data"]);
    env.ok(&["train", "--data", "data", "--out", "split", "--epochs", "1"]);
    let first = loss_rows(&env.path("split/loss.csv")).len();
    env.ok(&[
        "train", "--data", "data", "--out", "split", "--epochs", "2", "--resume",
    ]);
    env.ok(&["train", "--data", "data", "--out", "whole", "--epochs", "2"]);
    assert_eq!(loss_rows(&env.path("split/loss.csv")).len(), 2 * first);
    assert_eq!(
        read(&env.path("split/loss.csv")),
        read(&env.path("whole/loss.csv"))
    );
    assert_eq!(
        read(&env.path("split/checkpoint.bin")),
        read(&env.path("whole/checkpoint.bin"))
    );
}

#[test]
fn ablation_emits_four_rows_reproducibly() {
    let env = Env::new();
    env.ok(&["make-data", "--out", "data"]);
    let out = env.ok(&[
        "ablate",
        "--data",
        "data",
        "--sequences",
        "data/sequences",
        "--out",
        "ab",
    ]);
    assert_eq!(out.lines().count(), 5, "{out}");
    for name in ["pixel", "pixel+semantic", "pixel+ssim", "all"] {
        assert!(
            out.lines().any(|l| l.starts_with(&format!("{name},"))),
            "{out}"
        );
    }
    env.ok(&[
        "ablate",
        "--data",
        "data",
        "--sequences",
        "data/sequences",
        "--out",
        "ab2",
    ]);
    assert_eq!(
        read(&env.path("ab/ablation.csv")),
        read(&env.path("ab2/ablation.csv"))
    );
}
