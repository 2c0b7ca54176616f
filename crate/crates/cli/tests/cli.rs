use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coca::rng::{stream_rng, Stream};
use coca::DenoiserParams;
use coca_cli::artifacts::{read_curve, Checkpoint, ContributionLine, RunMeta, CURVE_COLUMNS};

fn coca(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coca")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("coca-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Small checkpoint shared by the training tests.
fn checkpoint(dir: &Path) -> PathBuf {
    let o = coca(&["pretrain", "--out", "ck.json", "--steps", "200", "--seed", "3"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("ck.json")
}

#[test]
fn pretrain_reduces_loss_and_is_reproducible() {
    let dir = scratch("pretrain");
    for out in ["a.json", "b.json"] {
        let o = coca(&["pretrain", "--out", out, "--seed", "11"], &dir);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(dir.join("a.json")).unwrap(), fs::read(dir.join("b.json")).unwrap());
    assert_eq!(fs::read(dir.join("a.loss.csv")).unwrap(), fs::read(dir.join("b.loss.csv")).unwrap());

    let mut losses = csv::Reader::from_path(dir.join("a.loss.csv")).unwrap();
    let values: Vec<f64> = losses.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(values.len(), 2000);
    let head: f64 = values[..50].iter().sum::<f64>() / 50.0;
    let tail: f64 = values[values.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(tail < head, "loss {head} -> {tail}");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn zero_steps_writes_the_initialization() {
    let dir = scratch("init");
    let o = coca(&["pretrain", "--out", "ck.json", "--steps", "0", "--seed", "5", "--hidden", "8"], &dir);
    assert_eq!(code(&o), 0);
    let ck = Checkpoint::read(&dir.join("ck.json")).unwrap();
    let expected = DenoiserParams::init(2, 4, 8, &mut stream_rng(5, Stream::Init, &[]));
    assert_eq!(ck.params().unwrap(), expected);
    assert_eq!(ck.final_loss, None);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn checkpoint_matches_library_pretraining_bitwise() {
    let dir = scratch("bitwise");
    let o = coca(&["pretrain", "--out", "ck.json", "--steps", "50", "--seed", "8", "--horizon", "12"], &dir);
    assert_eq!(code(&o), 0);
    let ck = Checkpoint::read(&dir.join("ck.json")).unwrap();
    let schedule = ck.schedule.build().unwrap();
    assert_eq!(schedule.horizon(), 12);
    let (params, losses) = coca::diffusion::pretrain(&ck.data, &schedule, &ck.pretrain, 8).unwrap();
    assert_eq!(ck.params().unwrap(), params);
    assert_eq!(ck.final_loss, losses.last().copied());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn methods_share_the_curve_schema() {
    let dir = scratch("schema");
    let ck = checkpoint(&dir);
    for (out, method) in [("sparse", "sparse"), ("coca", "coca"), ("mix", "beta_mix")] {
        let o = coca(
            &[
                "train",
                "--checkpoint",
                ck.to_str().unwrap(),
                "--out",
                out,
                "--method",
                method,
                "--beta",
                "0.5",
                "--epochs",
                "4",
            ],
            &dir,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let text = fs::read_to_string(dir.join(out).join("curve.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), CURVE_COLUMNS.join(","));
        assert_eq!(read_curve(&dir.join(out).join("curve.csv")).unwrap().len(), 4);
    }
    let meta = RunMeta::read(&dir.join("mix/meta.json")).unwrap();
    assert_eq!(meta.config.train.beta, 0.5);
    assert_eq!(meta.epochs_completed, 4);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn contributions_are_dumped_per_trajectory() {
    let dir = scratch("dump");
    let ck = checkpoint(&dir);
    let o = coca(
        &[
            "train",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--out",
            "run",
            "--epochs",
            "3",
            "--samples",
            "16",
            "--minibatch",
            "8",
            "--dump-contributions",
            "--svg",
        ],
        &dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.join("run/contributions.jsonl")).unwrap();
    let lines: Vec<ContributionLine> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 48);
    for l in &lines {
        let p = l.profile.as_ref().unwrap();
        assert_eq!(p.weights.len(), 20);
        assert_eq!(p.sim.len(), 21);
    }
    assert!(fs::read_to_string(dir.join("run/curve.svg")).unwrap().starts_with("<svg"));

    // dump-profile draws the same rollouts as the first training epoch.
    let o = coca(&["dump-profile", "--checkpoint", ck.to_str().unwrap(), "--count", "4"], &dir);
    assert_eq!(code(&o), 0);
    let fresh: Vec<ContributionLine> =
        String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for (a, b) in fresh.iter().zip(&lines) {
        assert_eq!((a.context_id, a.terminal_reward), (b.context_id, b.terminal_reward));
        assert_eq!(a.profile, b.profile);
    }
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn flags_override_the_config_file() {
    let dir = scratch("config");
    let ck = checkpoint(&dir);
    fs::write(dir.join("run.toml"), "output_dir = \"from_file\"\n[train]\nmethod = \"uca\"\nepochs = 2\nseed = 9\n")
        .unwrap();
    let o = coca(&["train", "--config", "run.toml", "--checkpoint", ck.to_str().unwrap(), "--seed", "10"], &dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let meta = RunMeta::read(&dir.join("from_file/meta.json")).unwrap();
    assert_eq!(meta.config.train.method, coca::Method::Uca);
    assert_eq!((meta.seed, meta.epochs_completed), (10, 2));

    fs::write(dir.join("bad.toml"), "[train]\nwindow = 5\n").unwrap();
    let o = coca(&["train", "--config", "bad.toml", "--checkpoint", ck.to_str().unwrap()], &dir);
    assert_eq!(code(&o), 2);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn meta_replays_the_run_exactly() {
    let dir = scratch("replay");
    let ck = checkpoint(&dir);
    let o =
        coca(&["train", "--checkpoint", ck.to_str().unwrap(), "--out", "a", "--epochs", "5", "--workers", "2"], &dir);
    assert_eq!(code(&o), 0);
    let o = coca(&["train", "--replay", "a/meta.json", "--out", "b", "--workers", "1"], &dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(dir.join("a/curve.csv")).unwrap(), fs::read(dir.join("b/curve.csv")).unwrap());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn compare_reports_ratios_and_unreached_thresholds() {
    let dir = scratch("compare");
    let ck = checkpoint(&dir);
    for (out, method) in [("coca", "coca"), ("sparse", "sparse")] {
        let o = coca(
            &["train", "--checkpoint", ck.to_str().unwrap(), "--out", out, "--method", method, "--epochs", "6"],
            &dir,
        );
        assert_eq!(code(&o), 0);
    }

    let o = coca(&["compare", "coca", "coca", "--out", "same"], &dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut pairs = csv::Reader::from_path(dir.join("same/compare_pairs.csv")).unwrap();
    let row = pairs.records().next().unwrap().unwrap();
    let mean_col = pairs.headers().unwrap().iter().position(|h| h == "mean").unwrap();
    assert_eq!(row[mean_col].parse::<f64>().unwrap(), 1.0);

    let o = coca(&["compare", "coca", "sparse", "--threshold", "100"], &dir);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("inf (not reached)"), "{text}");

    let o = coca(&["compare", "coca"], &dir);
    assert_eq!(code(&o), 2);

    let o = coca(
        &["train", "--checkpoint", ck.to_str().unwrap(), "--out", "ring", "--reward", "ring", "--epochs", "1"],
        &dir,
    );
    assert_eq!(code(&o), 0);
    let o = coca(&["compare", "coca", "ring"], &dir);
    assert_eq!(code(&o), 2);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn verify_exit_codes() {
    let dir = scratch("verify");
    let o = coca(&["verify", "--count", "200", "--seed", "42", "--report", "ok.json"], &dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("ok.json")).unwrap()).unwrap();
    assert_eq!(report["instances"], 200);
    assert_eq!(report["passed"], 200);
    assert_eq!(report["counterexample_detected"], true);

    let o = coca(&["verify", "--count", "0"], &dir);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["instances"], 0);
    assert_eq!(report["counterexample_detected"], true);

    let o = coca(&["verify", "--count", "5", "--corrupt"], &dir);
    assert_eq!(code(&o), 4);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!report["failures"].as_array().unwrap().is_empty());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn error_paths_use_documented_exit_codes() {
    let dir = scratch("errors");
    assert_eq!(code(&coca(&["train", "--checkpoint", "missing.json", "--out", "x"], &dir)), 2);
    let ck = checkpoint(&dir);
    let ck = ck.to_str().unwrap();
    assert_eq!(code(&coca(&["train", "--checkpoint", ck, "--out", "x", "--window", "0"], &dir)), 2);
    assert_eq!(code(&coca(&["train", "--checkpoint", ck, "--out", "x", "--method", "greedy"], &dir)), 2);
    assert_eq!(code(&coca(&["train", "--checkpoint", ck, "--out", "x", "--target", "1,2,3"], &dir)), 2);

    let o = coca(&["train", "--checkpoint", ck, "--out", "div", "--lr", "1e6", "--epochs", "5"], &dir);
    assert_eq!(code(&o), 3);
    let meta = RunMeta::read(&dir.join("div/meta.json")).unwrap();
    assert!(matches!(meta.status, coca::RunStatus::Diverged { .. }));
    assert_eq!(read_curve(&dir.join("div/curve.csv")).unwrap().len(), meta.epochs_completed);
    fs::remove_dir_all(&dir).unwrap();
}
