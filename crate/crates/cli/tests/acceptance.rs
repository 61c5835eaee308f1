//! The acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Runtime budgets count toward the verdict.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fusion_core::adapt::{
    accumulate_target_stats, bn_forward_fused, bn_forward_source, bn_forward_target, run_fusion_protocol, DIAGNOSTIC_BETA_GRID,
    PAPER_BETA_GRID,
};
use fusion_core::archive::{write_atomic, Archive};
use fusion_core::harness::{
    evaluate_roster, mean_over_targets, moment_deviation_curve, sweep_steps_and_batch, train_repetitions, ExperimentConfig,
    Repetition, Sampler, SWEEP_BETA,
};
use fusion_core::nn::{BatchNormParts, BatchNormState, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use fusion_core::stainsim::{self, generate_benchmark, Benchmark, BenchmarkSpec, ShiftMagnitude};
use fusion_core::tensor::gradcheck::check_all_ops;
use fusion_core::{AdaptationPolicy, ProtocolParams, TaskKind, Tensor, TrainRecipe};
use rand::Rng;

/// Targets of the strong-shift benchmark: the centers with shift 1.5 and 2.0.
const STRONG_TARGETS: [usize; 2] = [3, 4];
/// Center of the default layout with shift magnitude 2.0.
const SHIFT_2_CENTER: usize = 4;
/// Center of the segmentation layout with shift magnitude 1.5.
const SHIFT_15_CENTER: usize = 3;

type Verdict = Result<(bool, String), String>;

struct Line {
    id: usize,
    title: &'static str,
    budget: Duration,
}

fn report(line: Line, elapsed: Duration, verdict: Verdict) -> bool {
    let (pass, detail) = verdict.unwrap_or_else(|e| (false, format!("error: {e}")));
    let in_time = elapsed <= line.budget;
    let ok = pass && in_time;
    println!(
        "criterion {:>2} {} {}: {}; runtime {:.1}s of {}s{}",
        line.id,
        if ok { "PASS" } else { "FAIL" },
        line.title,
        detail,
        elapsed.as_secs_f64(),
        line.budget.as_secs(),
        if in_time { "" } else { " (over budget)" }
    );
    ok
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed())
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Statistics and inputs of the magnitude a trained BN layer sees, so outputs are O(1).
fn random_state(rng: &mut impl Rng, c: usize) -> BatchNormState {
    let v = |rng: &mut dyn rand::RngCore, lo: f32, hi: f32| -> Vec<f32> { (0..c).map(|_| rng.gen_range(lo..hi)).collect() };
    BatchNormState::from_parts(BatchNormParts {
        gamma: v(rng, 0.5, 1.5),
        alpha: v(rng, -0.5, 0.5),
        source_mean: v(rng, -0.5, 0.5),
        source_var: v(rng, 0.5, 2.0),
        target_mean: v(rng, -0.5, 0.5),
        target_var: v(rng, 0.5, 2.0),
        epsilon: DEFAULT_EPSILON,
        momentum: DEFAULT_MOMENTUM,
        target_steps: 1,
    })
    .expect("valid parts")
}

fn random_input(rng: &mut impl Rng, c: usize) -> Tensor {
    let n = rng.gen_range(1..6);
    let s = rng.gen_range(1..5);
    Tensor::from_fn(vec![n, c, s, s], |_| rng.gen_range(-1.0..1.0))
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Verdict {
    let mut rng = fusion_core::seed::rng(1, "acceptance-reduction");
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.gen_range(1..9);
        let state = random_state(&mut rng, c);
        let x = random_input(&mut rng, c);
        let f0 = bn_forward_fused(&x, &state, 0.0).map_err(err)?;
        let f1 = bn_forward_fused(&x, &state, 1.0).map_err(err)?;
        worst = worst
            .max(max_abs(&f0, &bn_forward_source(&x, &state).map_err(err)?))
            .max(max_abs(&f1, &bn_forward_target(&x, &state).map_err(err)?));
    }
    Ok((worst < 1e-6, format!("max |deviation| {worst:.2e} over 100 states (limit 1e-6)")))
}

fn criterion_2() -> Verdict {
    let mut rng = fusion_core::seed::rng(2, "acceptance-affine");
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.gen_range(1..9);
        let state = random_state(&mut rng, c);
        let x = random_input(&mut rng, c);
        let f0 = bn_forward_fused(&x, &state, 0.0).map_err(err)?;
        let f1 = bn_forward_fused(&x, &state, 1.0).map_err(err)?;
        for k in 1..=9 {
            let beta = k as f64 / 10.0;
            let fb = bn_forward_fused(&x, &state, beta).map_err(err)?;
            for ((b, z), o) in fb.data().iter().zip(f0.data()).zip(f1.data()) {
                let expect = beta * *o as f64 + (1.0 - beta) * *z as f64;
                worst = worst.max((*b as f64 - expect).abs());
            }
        }
    }
    Ok((worst < 1e-6, format!("max |output(β) − affine combination| {worst:.2e} (limit 1e-6)")))
}

fn criterion_3() -> Verdict {
    let mut rng = fusion_core::seed::rng(3, "acceptance-ema");
    let mut worst_slack = f64::NEG_INFINITY;
    let mut checked = 0;
    for _ in 0..20 {
        let c = rng.gen_range(1..9);
        let batch = random_input(&mut rng, c);
        let mu0 = fusion_core::tensor::channel_moments_f64(&batch).map_err(err)?.mean;
        for k in [1usize, 5, 20] {
            let mut state = random_state(&mut rng, c);
            state.reset_target();
            let init: Vec<f64> = state.target_mean().data().iter().map(|&v| v as f64).collect();
            let norm = |m: &[f64]| m.iter().zip(&mu0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let start = norm(&init);
            accumulate_target_stats(std::iter::repeat(batch.clone()), &mut state, k, false).map_err(err)?;
            let after: Vec<f64> = state.target_mean().data().iter().map(|&v| v as f64).collect();
            let bound = (1.0 - state.momentum()).powi(k as i32) * start;
            worst_slack = worst_slack.max(norm(&after) - bound);
            checked += 1;
        }
    }
    Ok((
        worst_slack <= 1e-6,
        format!("max ‖Mᵗ−μ₀‖ − (1−m)^K‖M_init−μ₀‖ = {worst_slack:.2e} over {checked} runs at K ∈ {{1, 5, 20}} (tolerance 1e-6)"),
    ))
}

fn criterion_4() -> Verdict {
    let checks = check_all_ops(4).map_err(err)?;
    let worst = checks.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error)).ok_or("no ops checked")?;
    let vacuous: Vec<&str> = checks.iter().filter(|c| c.numeric_norm <= 1e-4).map(|c| c.op.as_str()).collect();
    Ok((
        worst.relative_error < 1e-3 && vacuous.is_empty(),
        format!(
            "{} op checks, worst relative error {:.2e} ({}), limit 1e-3{}",
            checks.len(),
            worst.relative_error,
            worst.op,
            if vacuous.is_empty() { String::new() } else { format!("; vanishing gradients: {vacuous:?}") }
        ),
    ))
}

struct Trained {
    bench: Benchmark,
    config: ExperimentConfig,
    reps: Vec<Repetition>,
    train_time: Duration,
}

fn train_classification() -> Result<Trained, String> {
    let params = ProtocolParams::default();
    let mut config = ExperimentConfig::standard(BenchmarkSpec::default(), TrainRecipe::desk(), &params);
    config.targets = STRONG_TARGETS.to_vec();
    let t = Instant::now();
    let bench = generate_benchmark(&config.benchmark).map_err(err)?;
    let reps = train_repetitions(&config, &bench).map_err(err)?;
    Ok(Trained { bench, config, reps, train_time: t.elapsed() })
}

fn criterion_5(t: &Trained) -> Verdict {
    let shift = t.bench.spec.shifts[SHIFT_2_CENTER];
    if shift != 2.0 {
        return Err(format!("center {SHIFT_2_CENTER} has shift {shift}, expected 2.0"));
    }
    let model = t.reps[0].model.as_ref().map_err(Clone::clone)?;
    let params = ProtocolParams { seed: t.reps[0].seed, ..ProtocolParams::default() };
    let target = t.bench.centers[SHIFT_2_CENTER].test.images();
    let curve = moment_deviation_curve(model, target, &DIAGNOSTIC_BETA_GRID, &params).map_err(err)?;
    let d: Vec<f64> = curve.iter().map(|c| c.1).collect();
    let monotone = d.windows(2).all(|w| w[1] <= w[0]);
    let ratio = d[d.len() - 1] / d[0];
    let shown: Vec<String> = curve.iter().map(|(b, v)| format!("d({b})={v:.3}")).collect();
    Ok((monotone && ratio < 0.1, format!("{}; non-increasing {monotone}; d(1)/d(0) = {ratio:.4} (limit 0.1)", shown.join(" "))))
}

fn criterion_6(t: &Trained) -> Verdict {
    let report = evaluate_roster(&t.config, &t.bench, &t.reps).map_err(err)?;
    let mean = |label: &str, beta: Option<f64>| {
        mean_over_targets(&report, label, beta).map(|m| m.0).ok_or_else(|| format!("no record for {label}"))
    };
    let src = mean("source-running", None)?;
    let target = mean("target-running", None)?;
    let per_batch = mean("per-batch", None)?;
    let stratified = mean("per-batch+stratified", None)?;
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for &b in &PAPER_BETA_GRID {
        let v = mean("fused", Some(b))?;
        if v > best.1 {
            best = (b, v);
        }
    }
    let a = best.1 - src >= 0.05;
    let b = stratified - per_batch >= 0.02;
    let c = best.1 >= target - 0.01;
    Ok((
        a && b && c,
        format!(
            "targets C{:?}, {} seeds: (a) fused(β={}) {:.4} − source-running {:.4} = {:+.4} ≥ 0.05 {a}; \
             (b) stratified {:.4} − per-batch {:.4} = {:+.4} ≥ 0.02 {b}; (c) fused {:.4} ≥ target-running {:.4} − 0.01 {c}",
            STRONG_TARGETS,
            t.reps.len(),
            best.0,
            best.1,
            src,
            best.1 - src,
            stratified,
            per_batch,
            stratified - per_batch,
            best.1,
            target
        ),
    ))
}

fn criterion_7(t: &Trained) -> Verdict {
    let targets: Vec<&stainsim::CenterDataset> = STRONG_TARGETS.iter().map(|&k| &t.bench.centers[k].test).collect();
    let batches = [8, 16, 32];
    let sweep = sweep_steps_and_batch(
        t.config.source,
        &targets,
        &t.reps,
        &AdaptationPolicy::Fused { beta: SWEEP_BETA },
        &[1, 10, 20],
        &batches,
    )
    .map_err(err)?;
    let cell = |s: usize, b: usize| sweep.cell(s, b).map(|c| c.mean).ok_or(format!("missing cell {s}x{b}"));
    let mut a = true;
    let mut parts = Vec::new();
    for &b in &batches {
        let (one, twenty) = (cell(1, b)?, cell(20, b)?);
        a &= twenty >= one - 0.02;
        parts.push(format!("bs{b}: acc@1 {one:.4} acc@20 {twenty:.4}"));
    }
    let at10 = batches.iter().map(|&b| cell(10, b)).collect::<Result<Vec<_>, _>>()?;
    let spread = at10.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - at10.iter().cloned().fold(f64::INFINITY, f64::min);
    let b = spread < 0.05;
    Ok((a && b, format!("fused(β={SWEEP_BETA}): (a) {} {a}; (b) spread at 10 steps {spread:.4} < 0.05 {b}", parts.join(", "))))
}

fn criterion_8() -> Verdict {
    let params = ProtocolParams::default();
    let spec = BenchmarkSpec { task: TaskKind::DensePrediction, ..BenchmarkSpec::default() };
    let mut config = ExperimentConfig::standard(spec, TrainRecipe::desk(), &params);
    config.targets = vec![SHIFT_15_CENTER];
    config.roster.retain(|e| e.sampler == Sampler::Shuffled);
    let bench = generate_benchmark(&config.benchmark).map_err(err)?;
    let shift = bench.spec.shifts[SHIFT_15_CENTER];
    if shift != 1.5 {
        return Err(format!("center {SHIFT_15_CENTER} has shift {shift}, expected 1.5"));
    }
    let reps = train_repetitions(&config, &bench).map_err(err)?;
    let report = evaluate_roster(&config, &bench, &reps).map_err(err)?;
    let mean = |label: &str, beta: Option<f64>| {
        mean_over_targets(&report, label, beta).map(|m| m.0).ok_or_else(|| format!("no record for {label}"))
    };
    let src = mean("source-running", None)?;
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for &b in &PAPER_BETA_GRID {
        let v = mean("fused", Some(b))?;
        if v > best.1 {
            best = (b, v);
        }
    }
    Ok((
        best.1 - src >= 0.03,
        format!(
            "{} seeds: fused(β={}) dice {:.4} − source-running dice {:.4} = {:+.4} (needs ≥ 0.03)",
            reps.len(),
            best.0,
            best.1,
            src,
            best.1 - src
        ),
    ))
}

/// Writes a center directory holding pixels only: no label or mask column, no mask tensors.
fn write_unlabeled_center(dir: &Path) -> Result<Tensor, String> {
    let data =
        stainsim::generate_center(2, 48, TaskKind::Classification, ShiftMagnitude::new(1.0).map_err(err)?, 9, 16).map_err(err)?;
    let mut a = Archive::new();
    a.set_meta("kind", "dataset");
    a.set_meta("split", "test");
    a.set_meta("center", 2);
    let mut manifest = String::from("filename\tsplit\n");
    for (i, name) in data.names().iter().enumerate() {
        a.push(name.clone(), Tensor::new(vec![3, 16, 16], data.images().sample(i).to_vec()).map_err(err)?).map_err(err)?;
        manifest.push_str(&format!("{name}\ttest\n"));
    }
    a.save(&dir.join("test.fusb")).map_err(err)?;
    write_atomic(&dir.join("manifest.tsv"), manifest.as_bytes()).map_err(err)?;
    Ok(data.images().clone())
}

fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().map_err(err)?;
    let pixels = write_unlabeled_center(dir.path())?;
    let labelled_read = stainsim::read_center(dir.path(), "test");
    let target = stainsim::read_center_images(dir.path(), "test").map_err(err)?;
    if target.images != pixels {
        return Err("pixels did not round-trip".into());
    }
    let spec = fusion_core::NetworkSpec::reference(TaskKind::Classification, 2, 16);
    let model = fusion_core::Model::init(&spec, 5).map_err(err)?;
    let params = ProtocolParams { steps: 5, batch_size: 8, seed: 3, record_snapshots: false };
    let mut ran = Vec::new();
    for policy in [AdaptationPolicy::Fused { beta: 0.8 }, AdaptationPolicy::TargetRunning, AdaptationPolicy::PerBatch] {
        let r = run_fusion_protocol(&model, &target.images, &policy, &params).map_err(err)?;
        if r.predictions.shape() != [48, 2] || r.predictions.data().iter().any(|v| !v.is_finite()) {
            return Err(format!("{policy}: bad predictions {:?}", r.predictions.shape()));
        }
        ran.push(policy.to_string());
    }
    Ok((
        labelled_read.is_err(),
        format!(
            "protocol ran under {} on a center with no annotations on disk; labelled loader refuses it: {}",
            ran.join(", "),
            labelled_read.is_err()
        ),
    ))
}

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "csv"))
        .map(|e| {
            let rel = e.path().strip_prefix(root).expect("under root").to_path_buf();
            (rel, std::fs::read(e.path()).unwrap_or_default())
        })
        .collect()
}

/// Reduced sizes keep two full pipelines fast; every stage still runs.
const REPRODUCE_CONFIG: &str = r#"
[dataset]
train_samples = 160
test_samples = 96
patch_size = 16

[train]
epochs = 3

[adapt]
steps = 10
batch_size = 16

[experiment]
seed = 11
sweep_steps = [1, 5]
sweep_batch_sizes = [8, 16]
histogram_bins = 12
"#;

fn criterion_10() -> Verdict {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = dir.path().join("reproduce.toml");
    std::fs::write(&config, REPRODUCE_CONFIG).map_err(err)?;
    let mut trees = Vec::new();
    // the second run uses a different worker count; output must not depend on scheduling
    for (run, threads) in [("one", "1"), ("two", "3")] {
        let out = dir.path().join(run);
        let o = Command::new(env!("CARGO_BIN_EXE_fusion"))
            .args(["reproduce-all", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env("FUSION_THREADS", threads)
            .output()
            .map_err(err)?;
        if !o.status.success() {
            return Err(format!("reproduce-all failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        trees.push(csv_files(&out));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing: Vec<String> = a.iter().filter(|(k, v)| b.get(*k) != Some(*v)).map(|(k, _)| k.display().to_string()).collect();
    let same_set = a.keys().eq(b.keys());
    Ok((
        same_set && differing.is_empty() && a.len() > 10,
        format!(
            "{} CSV files per run; identical file set {same_set}; differing files {}",
            a.len(),
            if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
        ),
    ))
}

fn main() {
    // `cargo test -- --list` and name filters from the default harness
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let secs = Duration::from_secs;
    let mut all = true;

    let (v, e) = timed(criterion_1);
    all &= report(Line { id: 1, title: "fused reduces to source and target", budget: secs(1) }, e, v);
    let (v, e) = timed(criterion_2);
    all &= report(Line { id: 2, title: "fused output is affine in β", budget: secs(1) }, e, v);
    let (v, e) = timed(criterion_3);
    all &= report(Line { id: 3, title: "EMA geometric convergence bound", budget: secs(1) }, e, v);
    let (v, e) = timed(criterion_4);
    all &= report(Line { id: 4, title: "finite-difference gradient check", budget: secs(30) }, e, v);

    let (trained, train_time) = timed(train_classification);
    match trained {
        Ok(t) => {
            println!(
                "(trained {} classification repetitions in {:.1}s; the training time counts toward criteria 5 to 7)",
                t.reps.len(),
                t.train_time.as_secs_f64()
            );
            let (v, e) = timed(|| criterion_5(&t));
            all &= report(Line { id: 5, title: "moment deviation shrinks with β", budget: secs(300) }, e + train_time, v);
            let (v, e) = timed(|| criterion_6(&t));
            all &= report(Line { id: 6, title: "policy ordering on strong shift", budget: secs(900) }, e + train_time, v);
            let (v, e) = timed(|| criterion_7(&t));
            all &= report(Line { id: 7, title: "steps and batch-size sweep", budget: secs(1200) }, e + train_time, v);
        }
        Err(msg) => {
            for (id, title) in [
                (5, "moment deviation shrinks with β"),
                (6, "policy ordering on strong shift"),
                (7, "steps and batch-size sweep"),
            ] {
                all &= report(Line { id, title, budget: secs(0) }, train_time, Err(format!("training failed: {msg}")));
            }
        }
    }

    let (v, e) = timed(criterion_8);
    all &= report(Line { id: 8, title: "segmentation dice gain at shift 1.5", budget: secs(900) }, e, v);
    let (v, e) = timed(criterion_9);
    all &= report(Line { id: 9, title: "adaptation runs without labels", budget: secs(1) }, e, v);
    let (v, e) = timed(criterion_10);
    all &= report(Line { id: 10, title: "reproduce-all is byte-deterministic", budget: secs(1200) }, e, v);

    if !all {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
