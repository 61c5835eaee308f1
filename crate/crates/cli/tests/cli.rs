use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fusion_core::archive::Archive;
use fusion_core::{Model, NetworkSpec, TaskKind};

fn fusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusion")).args(args).env("FUSION_THREADS", "2").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small benchmark and a briefly trained checkpoint shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let model = dir.path().join("model");
        let o = fusion(&["gen-data", "--samples", "96", "--test-samples", "64", "--patch-size", "16", "--out", p(&data)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = fusion(&["train", "--data", p(&data), "--out", p(&model), "--train.epochs", "2"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Fixture { checkpoint: model.join("model.fusb"), data, _dir: dir }
    })
}

#[test]
fn help_exits_zero_and_lists_defaults() {
    let o = fusion(&["--help"]);
    assert_eq!(code(&o), 0);
    let o = fusion(&["adapt", "--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--checkpoint", "--target", "--policy", "--beta", "--steps", "--batch-size", "--seed", "--out"] {
        assert!(text.contains(flag), "{flag} missing from adapt --help");
    }
    assert!(text.contains("default: adapt.batch_size = 32"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let o = fusion(&["config", "--train.lrr", "0.1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lrr"));
    let o = fusion(&["config", "--trian.lr", "0.1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = fusion(&["config", "--adapt.beta", "0.7", "--dataset.shift_profile", "[0, 1.5]"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let path = dir.path().join("c.toml");
    std::fs::write(&path, &o.stdout).unwrap();
    let again = fusion(&["config", "--config", p(&path)]);
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert_eq!(o.stdout, again.stdout);
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = fusion(&["train", "--data", p(&missing), "--out", p(&dir.path().join("m"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn gen_data_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = fusion(&[
            "gen-data",
            "--centers",
            "3",
            "--samples",
            "20",
            "--test-samples",
            "8",
            "--patch-size",
            "16",
            "--out",
            p(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for k in 0..3 {
        let m = std::fs::read_to_string(a.join(format!("C{k}/manifest.tsv"))).unwrap();
        assert_eq!(m.lines().filter(|l| l.contains("\ttrain\t")).count(), 20);
        assert_eq!(m, std::fs::read_to_string(b.join(format!("C{k}/manifest.tsv"))).unwrap());
    }
    assert!(!a.join("C3").exists());
}

#[test]
fn shift_profile_distances_increase_from_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let o = fusion(&[
        "gen-data",
        "--shift-profile",
        "0,0.5,1,1.5,2",
        "--samples",
        "8",
        "--test-samples",
        "64",
        "--patch-size",
        "16",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("distances.csv")).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!(row.windows(2).all(|w| w[1] > w[0]), "{row:?}");
}

#[test]
fn bad_flag_values_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = fusion(&["gen-data", "--shift-profile", "0,-1", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--shift-profile"));
}

#[test]
fn batch_of_one_is_rejected() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = fusion(&[
        "adapt",
        "--checkpoint",
        p(&f.checkpoint),
        "--target",
        p(&f.data.join("C4")),
        "--batch-size",
        "1",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("degenerate"));
}

fn adapt(extra: &[&str], out: &Path) {
    let f = fixture();
    let target = f.data.join("C4");
    let mut args = vec!["adapt", "--checkpoint", p(&f.checkpoint), "--target", p(&target), "--out", p(out)];
    args.extend_from_slice(extra);
    let o = fusion(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn fused_at_zero_matches_plain_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    adapt(&["--policy", "fused", "--beta", "0"], &dir.path().join("fused"));
    adapt(&["--policy", "source-running"], &dir.path().join("plain"));
    let a = Archive::load(&dir.path().join("fused/predictions.fusb")).unwrap();
    let b = Archive::load(&dir.path().join("plain/predictions.fusb")).unwrap();
    assert_eq!(a.get("probs").unwrap(), b.get("probs").unwrap());
}

#[test]
fn same_seed_gives_identical_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b", "c"] {
        let seed = if name == "c" { "7" } else { "3" };
        adapt(&["--policy", "fused", "--beta", "0.8", "--batch-size", "8", "--seed", seed], &dir.path().join(name));
    }
    let read = |n: &str| std::fs::read(dir.path().join(n).join("adapted.fusb")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn evaluate_scores_adapt_output() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    adapt(&["--policy", "target-running", "--steps", "4", "--batch-size", "16"], dir.path());
    let out = dir.path().join("metrics.csv");
    let o = fusion(&[
        "evaluate",
        "--predictions",
        p(&dir.path().join("predictions.fusb")),
        "--target",
        p(&f.data.join("C4")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let line = text.lines().nth(1).unwrap();
    assert!(line.starts_with("0,4,target-running,,4,16,0,balanced-accuracy,"), "{line}");
    let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&v));
}

#[test]
fn evaluate_without_predictions_is_an_io_error() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = fusion(&[
        "evaluate",
        "--predictions",
        p(&dir.path().join("absent.fusb")),
        "--target",
        p(&f.data.join("C1")),
        "--out",
        p(&dir.path().join("m.csv")),
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("absent.fusb"));
}

#[test]
fn one_cell_sweep_equals_adapt_then_evaluate() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    adapt(&["--policy", "fused", "--beta", "0.7", "--steps", "3", "--batch-size", "8", "--seed", "5"], &dir.path().join("a"));
    let o = fusion(&[
        "evaluate",
        "--predictions",
        p(&dir.path().join("a/predictions.fusb")),
        "--target",
        p(&f.data.join("C4")),
        "--out",
        p(&dir.path().join("m.csv")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = fusion(&[
        "sweep",
        "--checkpoint",
        p(&f.checkpoint),
        "--data",
        p(&f.data),
        "--targets",
        "4",
        "--steps",
        "3",
        "--batch-sizes",
        "8",
        "--policy",
        "fused",
        "--beta",
        "0.7",
        "--seed",
        "5",
        "--out",
        p(&dir.path().join("s")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metric = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let sweep = std::fs::read_to_string(dir.path().join("s/sweep_results.csv")).unwrap();
    assert_eq!(metric.lines().nth(1), sweep.lines().nth(1));
}

#[test]
fn diagnose_on_the_source_reports_no_shift() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = fusion(&[
        "diagnose",
        "--checkpoint",
        p(&f.checkpoint),
        "--data",
        p(&f.data),
        "--target-center",
        "0",
        "--steps",
        "4",
        "--batch-size",
        "16",
        "--bins",
        "10",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let moments = std::fs::read_to_string(dir.path().join("moments.csv")).unwrap();
    let mut by_key = std::collections::HashMap::new();
    for line in moments.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        by_key.insert((f[0].to_string(), f[1].to_string(), f[2].to_string()), f[3].parse::<f64>().unwrap());
    }
    for ((l, c, r), m) in &by_key {
        if r == "target-source-stats" {
            let src = by_key[&(l.clone(), c.clone(), "source".to_string())];
            assert!((m - src).abs() < 0.02);
        }
    }
    assert!(dir.path().join("histograms/bn00_c000.csv").exists());
    let dev = std::fs::read_to_string(dir.path().join("deviation.csv")).unwrap();
    assert_eq!(dev.lines().count(), 6);
}

#[test]
fn zero_learning_rate_leaves_parameters_at_init() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o =
        fusion(&["train", "--data", p(&f.data), "--out", p(dir.path()), "--train.lr", "0", "--train.epochs", "1", "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("learning rate is 0"), "{}", stderr(&o));
    let trained = Archive::load(&dir.path().join("model.fusb")).unwrap();
    let init = Model::init(&NetworkSpec::reference(TaskKind::Classification, 2, 16), fusion_core::seed::derive(9, "init"))
        .unwrap()
        .to_archive()
        .unwrap();
    let mut compared = 0;
    for (name, t) in init.tensors() {
        let learned = [".kernel", ".weight", ".bias", ".gamma", ".alpha"];
        if learned.iter().any(|s| name.ends_with(s)) {
            assert_eq!(trained.get(name).unwrap(), t, "{name}");
            compared += 1;
        }
    }
    assert!(compared >= 10);
}
