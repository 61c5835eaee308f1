//! One function per subcommand. Every output file goes through a temp file and a rename.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use fusion_core::adapt::{run_fusion_protocol, sidecar, DIAGNOSTIC_BETA_GRID};
use fusion_core::archive::{write_atomic, Archive};
use fusion_core::harness::{self, report, Repetition, ResultRow};
use fusion_core::nn::{self, TrainOutcome};
use fusion_core::stainsim::{self, BenchmarkSpec, CenterDataset};
use fusion_core::{AdaptationPolicy, Model, NetworkSpec, ProtocolParams, TaskKind, Tensor};

use crate::config::Config;
use crate::error::{CliError, Context as _};
use crate::{AdaptArgs, Common, DiagnoseArgs, EvaluateArgs, GenDataArgs, ProtocolFlags, SweepArgs, TrainArgs};

const CHECKPOINT: &str = "model.fusb";
const BENCHMARK: &str = "benchmark.json";

/// Effective configuration and seed of one invocation.
pub struct Context {
    pub config: Config,
    pub seed: u64,
}

impl Context {
    pub fn new(common: &Common, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let config = Config::load(common.config.as_deref(), overrides)?;
        let seed = common.seed.unwrap_or(config.experiment.seed);
        Ok(Context { config, seed })
    }
}

fn parse_list<T: FromStr>(flag: &str, raw: &str) -> Result<Vec<T>, CliError> {
    raw.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse().map_err(|_| CliError::Usage(format!("{flag}: cannot parse `{s}` in `{raw}`")))
        })
        .collect()
}

fn center_dir(data: &Path, k: usize) -> PathBuf {
    data.join(format!("C{k}"))
}

fn write_csv<T: serde::Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(format!("{}: {}", path.display(), e.error())))?;
    write_atomic(path, &bytes).ctx(&path.display().to_string())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).ctx(&path.display().to_string())
}

fn load_archive(path: &Path, kind: &str) -> Result<Archive, CliError> {
    let name = path.display().to_string();
    let a = Archive::load(path).ctx(&name)?;
    let found = a.meta("kind").ctx(&name)?;
    if found != kind {
        return Err(CliError::Io(format!("{name}: expected a {kind} archive, found {found}")));
    }
    Ok(a)
}

/// Loads a checkpoint and applies the configured BN momentum, which governs target accumulation.
fn load_model(ctx: &Context, path: &Path) -> Result<(Model, Archive), CliError> {
    let a = load_archive(path, "checkpoint")?;
    let mut model = Model::from_archive(&a).ctx(&path.display().to_string())?;
    for s in model.bn_layers_mut() {
        s.set_momentum(ctx.config.model.bn_momentum).map_err(|e| CliError::usage("--model.bn_momentum", e))?;
    }
    Ok((model, a))
}

fn read_benchmark(data: &Path) -> Result<BenchmarkSpec, CliError> {
    let path = data.join(BENCHMARK);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_split(dir: &Path, split: &str) -> Result<CenterDataset, CliError> {
    stainsim::read_center(dir, split).ctx(&dir.display().to_string())
}

/// Policy and protocol parameters: config values, then flags.
fn protocol(ctx: &Context, flags: &ProtocolFlags) -> Result<(AdaptationPolicy, ProtocolParams), CliError> {
    let mut section = ctx.config.adapt.clone();
    if let Some(p) = &flags.policy {
        section.policy = p.clone();
    }
    if let Some(b) = flags.beta {
        section.beta = b;
    }
    if let Some(n) = flags.n_prior {
        section.n_prior = n;
    }
    if let Some(s) = flags.steps {
        section.steps = s;
    }
    if let Some(b) = flags.batch_size {
        section.batch_size = b;
    }
    if section.batch_size < 2 {
        return Err(CliError::Usage(format!(
            "--batch-size {}: degenerate batch, at least 2 samples are needed for batch statistics",
            section.batch_size
        )));
    }
    let policy = section.policy()?;
    if policy.uses_target_stats() && section.steps == 0 {
        return Err(CliError::Usage(format!("--steps: {policy} needs at least one accumulation step")));
    }
    let params = ProtocolParams { steps: section.steps, batch_size: section.batch_size, seed: ctx.seed, record_snapshots: false };
    Ok((policy, params))
}

fn linspace_profile(centers: usize) -> Vec<f64> {
    match centers {
        1 => vec![0.0],
        n => (0..n).map(|k| 2.0 * k as f64 / (n - 1) as f64).collect(),
    }
}

pub fn gen_data(ctx: &Context, a: &GenDataArgs) -> Result<(), CliError> {
    let mut spec = ctx.config.benchmark(ctx.seed);
    match (&a.shift_profile, a.centers) {
        (Some(raw), centers) => {
            spec.shifts = parse_list("--shift-profile", raw)?;
            if centers.is_some_and(|c| c != spec.shifts.len()) {
                return Err(CliError::Usage(format!(
                    "--centers {} disagrees with --shift-profile ({} values)",
                    centers.unwrap_or_default(),
                    spec.shifts.len()
                )));
            }
        }
        (None, Some(0)) => return Err(CliError::Usage("--centers: at least one center".into())),
        (None, Some(c)) => spec.shifts = linspace_profile(c),
        (None, None) => {}
    }
    for &s in &spec.shifts {
        stainsim::ShiftMagnitude::new(s).map_err(|e| CliError::usage("--shift-profile", e))?;
    }
    if let Some(n) = a.samples {
        spec.train_samples = n;
    }
    if let Some(n) = a.test_samples {
        spec.test_samples = n;
    }
    if let Some(t) = a.task {
        spec.task = t;
    }
    if let Some(p) = a.patch_size {
        spec.patch_size = p;
    }
    if spec.train_samples < 2 || spec.test_samples < 2 {
        return Err(CliError::Usage("--samples/--test-samples: at least 2 per center".into()));
    }
    let bench = stainsim::generate_benchmark(&spec).map_err(|e| CliError::usage("gen-data", e))?;
    for (k, c) in bench.centers.iter().enumerate() {
        let dir = center_dir(&a.out, k);
        stainsim::write_center(&dir, &[("train", &c.train), ("test", &c.test)]).ctx(&dir.display().to_string())?;
    }
    let mut json = serde_json::to_vec_pretty(&spec).expect("spec serializes");
    json.push(b'\n');
    write_bytes(&a.out.join(BENCHMARK), &json)?;

    let n = bench.centers.len();
    let mut header = vec!["center".to_string()];
    header.extend((0..n).map(|k| format!("C{k}")));
    let mut rows = Vec::with_capacity(n);
    for (i, ci) in bench.centers.iter().enumerate() {
        let mut row = vec![format!("C{i}")];
        for cj in &bench.centers {
            let d = stainsim::chromatic_distance(&ci.test, &cj.test).ctx("chromatic distance")?;
            row.push(format!("{d:.6}"));
        }
        rows.push(row);
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&a.out.join("distances.csv"), &header_refs, &rows)?;
    println!("chromatic distance between center test sets");
    println!("{}", header.join("\t"));
    for r in &rows {
        println!("{}", r.join("\t"));
    }
    Ok(())
}

pub fn train(ctx: &Context, a: &TrainArgs) -> Result<TrainOutcome, CliError> {
    let source = a.source_center.unwrap_or(ctx.config.experiment.source);
    let dir = center_dir(&a.data, source);
    let data = read_split(&dir, "train")?;
    let spec = NetworkSpec::reference(data.task(), data.classes(), data.patch_size());
    let recipe = ctx.config.train.recipe()?;
    let mut out = nn::train(&spec, &data, &recipe, ctx.seed).ctx("train")?;
    for s in out.model.bn_layers_mut() {
        s.set_momentum(ctx.config.model.bn_momentum).map_err(|e| CliError::usage("--model.bn_momentum", e))?;
    }
    let mut archive = out.model.to_archive().ctx("checkpoint")?;
    archive.set_meta("source_center", source);
    archive.set_meta("train_seed", ctx.seed);
    let path = a.out.join(CHECKPOINT);
    archive.save(&path).ctx(&path.display().to_string())?;
    write_csv(&a.out.join("train_log.csv"), &["epoch", "lr", "loss", "metric"], &out.log)?;

    if dir.join("test.fusb").exists() {
        let test = read_split(&dir, "test")?;
        let probs = fusion_core::adapt::predict(&out.model, test.images(), &AdaptationPolicy::SourceRunning).ctx("evaluate")?;
        let value = harness::score(&probs, &test).ctx("evaluate")?;
        println!("source test {}: {value:.4}", harness::metric_name(test.task()));
    }
    Ok(out)
}

pub fn adapt(ctx: &Context, a: &AdaptArgs) -> Result<(), CliError> {
    let (policy, params) = protocol(ctx, &a.protocol)?;
    let (model, checkpoint) = load_model(ctx, &a.checkpoint)?;
    let target = stainsim::read_center_images(&a.target, "test").ctx(&a.target.display().to_string())?;
    let result = run_fusion_protocol(&model, &target.images, &policy, &params).ctx("adapt")?;

    let side = sidecar(&result.adapted, &policy, &result.log).ctx("sidecar")?;
    let path = a.out.join("adapted.fusb");
    side.save(&path).ctx(&path.display().to_string())?;

    let mut pred = Archive::new();
    pred.set_meta("kind", "predictions");
    pred.set_meta("task", model.task());
    pred.set_meta("center", target.center);
    pred.set_meta("source", checkpoint.meta("source_center").unwrap_or("-"));
    pred.set_meta("policy", serde_json::to_string(&policy).expect("policy serializes"));
    pred.set_meta("beta", policy.beta().map_or("-".to_string(), |b| b.to_string()));
    pred.set_meta("steps", result.log.steps);
    pred.set_meta("batch_size", params.batch_size);
    pred.set_meta("seed", params.seed);
    pred.set_meta("names", serde_json::to_string(&target.names).expect("names serialize"));
    pred.push("probs", result.predictions.clone()).ctx("predictions")?;
    let path = a.out.join("predictions.fusb");
    pred.save(&path).ctx(&path.display().to_string())?;

    if model.task() == TaskKind::Classification {
        let p = &result.predictions;
        let k = p.shape()[1];
        let classes = harness::metrics::argmax_rows(p).ctx("predictions")?;
        let mut header = vec!["filename".to_string(), "predicted".to_string()];
        header.extend((0..k).map(|c| format!("p{c}")));
        let rows: Vec<Vec<String>> = target
            .names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let mut r = vec![name.clone(), classes[i].to_string()];
                r.extend(p.sample(i).iter().map(|v| v.to_string()));
                r
            })
            .collect();
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&a.out.join("predictions.csv"), &refs, &rows)?;
    }
    println!("{policy}: {} target images, {} accumulation steps of {}", target.names.len(), result.log.steps, params.batch_size);
    Ok(())
}

/// Reorders `data` to the order of `names`; every name must be present.
fn align(data: &CenterDataset, names: &[String], context: &str) -> Result<CenterDataset, CliError> {
    let index: std::collections::HashMap<&str, usize> = data.names().iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let idx = names
        .iter()
        .map(|n| {
            index
                .get(n.as_str())
                .copied()
                .ok_or_else(|| CliError::Io(format!("{context}: `{n}` has no annotation in the target")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    data.subset(&idx).ctx(context)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<Vec<ResultRow>, CliError> {
    let name = a.predictions.display().to_string();
    let pred = load_archive(&a.predictions, "predictions")?;
    let probs: Tensor = pred.get("probs").ctx(&name)?.clone();
    let names: Vec<String> =
        serde_json::from_str(pred.meta("names").ctx(&name)?).map_err(|e| CliError::Io(format!("{name}: {e}")))?;
    let policy: AdaptationPolicy =
        serde_json::from_str(pred.meta("policy").ctx(&name)?).map_err(|e| CliError::Io(format!("{name}: {e}")))?;
    let data = read_split(&a.target, "test")?;
    let data = align(&data, &names, &name)?;
    let value = harness::score(&probs, &data).ctx("evaluate")?;
    let source = match pred.meta("source").ctx(&name)? {
        "-" => data.center(),
        s => s.parse().map_err(|_| CliError::Io(format!("{name}: bad source `{s}`")))?,
    };
    let row = ResultRow {
        source,
        target: data.center(),
        policy: policy.name().to_string(),
        beta: policy.beta(),
        steps: pred.meta_parse("steps").ctx(&name)?,
        batch_size: pred.meta_parse("batch_size").ctx(&name)?,
        seed: pred.meta_parse("seed").ctx(&name)?,
        metric_name: harness::metric_name(data.task()).to_string(),
        value,
    };
    let rows = vec![row];
    report::write_results_csv(&a.out, &rows).ctx(&a.out.display().to_string())?;
    println!("C{} {policy}: {} {value:.4}", data.center(), rows[0].metric_name);
    Ok(rows)
}

fn source_of(ctx: &Context, checkpoint: &Archive) -> usize {
    checkpoint.meta_parse("source_center").unwrap_or(ctx.config.experiment.source)
}

fn default_targets(ctx: &Context, data: &Path, source: usize) -> Result<Vec<usize>, CliError> {
    if !ctx.config.experiment.targets.is_empty() {
        return Ok(ctx.config.experiment.targets.clone());
    }
    let n = read_benchmark(data)?.shifts.len();
    Ok((0..n).filter(|&k| k != source).collect())
}

pub fn sweep(ctx: &Context, a: &SweepArgs) -> Result<(), CliError> {
    let flags = ProtocolFlags { policy: a.policy.clone(), beta: a.beta, n_prior: None, steps: None, batch_size: None };
    let (policy, _) = protocol(ctx, &flags)?;
    let steps = match &a.step_counts {
        Some(raw) => parse_list("--steps", raw)?,
        None => ctx.config.experiment.sweep_steps.clone(),
    };
    let batches = match &a.batch_sizes {
        Some(raw) => parse_list("--batch-sizes", raw)?,
        None => ctx.config.experiment.sweep_batch_sizes.clone(),
    };
    let (model, checkpoint) = load_model(ctx, &a.checkpoint)?;
    let source = source_of(ctx, &checkpoint);
    let targets = match &a.targets {
        Some(raw) => parse_list("--targets", raw)?,
        None => default_targets(ctx, &a.data, source)?,
    };
    let data = targets.iter().map(|&t| read_split(&center_dir(&a.data, t), "test")).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&CenterDataset> = data.iter().collect();
    let reps = [Repetition { seed: ctx.seed, model: Ok(model), log: Vec::new() }];
    let sweep = harness::sweep_steps_and_batch(source, &refs, &reps, &policy, &steps, &batches)
        .map_err(|e| CliError::usage("sweep", e))?;
    write_bytes(&a.out.join("sweep_grid.csv"), &report::sweep_grid_csv(&sweep).ctx("sweep")?)?;
    report::write_results_csv(&a.out.join("sweep_results.csv"), &sweep.rows).ctx("sweep")?;
    println!("{policy}: mean over targets");
    println!("steps\tbatch\tmean");
    for c in &sweep.cells {
        println!("{}\t{}\t{:.4}", c.steps, c.batch_size, c.mean);
    }
    Ok(())
}

pub fn diagnose(ctx: &Context, a: &DiagnoseArgs) -> Result<(), CliError> {
    let (policy, params) = protocol(ctx, &a.protocol)?;
    let (model, checkpoint) = load_model(ctx, &a.checkpoint)?;
    let source = a.source_center.unwrap_or_else(|| source_of(ctx, &checkpoint));
    let target = match a.target_center {
        Some(t) => t,
        None => read_benchmark(&a.data)?.shifts.len() - 1,
    };
    let bins = a.bins.unwrap_or(ctx.config.experiment.histogram_bins);
    let src = stainsim::read_center_images(&center_dir(&a.data, source), "test")
        .ctx(&center_dir(&a.data, source).display().to_string())?;
    let tgt = stainsim::read_center_images(&center_dir(&a.data, target), "test")
        .ctx(&center_dir(&a.data, target).display().to_string())?;
    let diags = harness::diagnose_shift(&model, &src.images, &tgt.images, &policy, &params, bins)
        .map_err(|e| CliError::usage("diagnose", e))?;
    write_bytes(&a.out.join("moments.csv"), &report::diagnostic_moments_csv(&diags).ctx("diagnose")?)?;
    for d in &diags {
        let path = a.out.join("histograms").join(format!("bn{:02}_c{:03}.csv", d.layer, d.channel));
        write_bytes(&path, &report::histogram_csv(d).ctx("diagnose")?)?;
    }
    let curve_params = ProtocolParams { steps: params.steps.max(1), ..params };
    let curve = harness::moment_deviation_curve(&model, &tgt.images, &DIAGNOSTIC_BETA_GRID, &curve_params)
        .map_err(|e| CliError::usage("diagnose", e))?;
    write_csv(&a.out.join("deviation.csv"), &["beta", "deviation"], &curve)?;

    let max_shift = |r: usize| diags.iter().map(|d| (d.moments[r].mean - d.moments[0].mean).abs()).fold(0.0, f64::max);
    println!("C{source} -> C{target}, {} BN channels", diags.len());
    println!("max |mean shift| under source statistics: {:.4}", max_shift(1));
    println!("max |mean shift| under {policy}: {:.4}", max_shift(2));
    for (beta, d) in &curve {
        println!("d({beta}) = {d:.4}");
    }
    Ok(())
}

fn experiment_config(ctx: &Context) -> Result<harness::ExperimentConfig, CliError> {
    let recipe = ctx.config.train.recipe()?;
    let params = ProtocolParams {
        steps: ctx.config.adapt.steps,
        batch_size: ctx.config.adapt.batch_size,
        seed: ctx.seed,
        record_snapshots: false,
    };
    let mut cfg = harness::ExperimentConfig::standard(ctx.config.benchmark(ctx.seed), recipe, &params);
    let exp = &ctx.config.experiment;
    cfg.source = exp.source;
    cfg.targets = if exp.targets.is_empty() {
        (0..cfg.benchmark.shifts.len()).filter(|&k| k != exp.source).collect()
    } else {
        exp.targets.clone()
    };
    cfg.repetitions = exp.repetitions;
    if cfg.benchmark.task == TaskKind::DensePrediction {
        cfg.roster.retain(|e| e.sampler == harness::Sampler::Shuffled);
    }
    cfg.validate().map_err(|e| CliError::usage("experiment", e))?;
    Ok(cfg)
}

pub fn experiment(ctx: &Context, out: &Path) -> Result<(), CliError> {
    let cfg = experiment_config(ctx)?;
    let report = harness::run_experiment(&cfg).ctx("experiment")?;
    report::write_results_csv(&out.join("results.csv"), &report.rows).ctx("results.csv")?;
    report::write_summary_json(&out.join("summary.json"), &report).ctx("summary.json")?;
    println!("policy\tbeta\ttarget\tmean\tstd\tincrement");
    for r in &report.records {
        println!(
            "{}\t{}\tC{}\t{:.4}\t{:.4}\t{:+.4}",
            r.policy,
            r.beta.map_or("-".to_string(), |b| b.to_string()),
            r.target,
            r.mean,
            r.std,
            r.increment_mean
        );
    }
    Ok(())
}

/// Policies run through adapt and evaluate by `reproduce-all`.
fn reproduce_policies(ctx: &Context) -> Vec<AdaptationPolicy> {
    let mut v = vec![
        AdaptationPolicy::SourceRunning,
        AdaptationPolicy::PerBatch,
        AdaptationPolicy::SourcePrior { n_prior: ctx.config.adapt.n_prior },
        AdaptationPolicy::TargetRunning,
    ];
    v.extend(fusion_core::adapt::PAPER_BETA_GRID.iter().map(|&beta| AdaptationPolicy::Fused { beta }));
    v
}

fn policy_dir(p: &AdaptationPolicy) -> String {
    match p.beta() {
        Some(b) => format!("{}-{b}", p.name()),
        None => p.name().to_string(),
    }
}

pub fn reproduce_all(ctx: &Context, out: &Path) -> Result<(), CliError> {
    write_bytes(&out.join("config.toml"), ctx.config.normalized().as_bytes())?;
    let data = out.join("data");
    gen_data(
        ctx,
        &GenDataArgs {
            centers: None,
            samples: None,
            test_samples: None,
            shift_profile: None,
            task: None,
            patch_size: None,
            out: data.clone(),
        },
    )?;
    let model_dir = out.join("model");
    train(ctx, &TrainArgs { data: data.clone(), source_center: None, out: model_dir.clone() })?;
    let checkpoint = model_dir.join(CHECKPOINT);
    let source = ctx.config.experiment.source;
    let targets = default_targets(ctx, &data, source)?;
    let mut rows = Vec::new();
    for &t in &targets {
        for p in reproduce_policies(ctx) {
            let dir = out.join("adapt").join(format!("C{t}")).join(policy_dir(&p));
            let flags = ProtocolFlags {
                policy: Some(p.name().to_string()),
                beta: p.beta(),
                n_prior: match p {
                    AdaptationPolicy::SourcePrior { n_prior } => Some(n_prior),
                    _ => None,
                },
                steps: None,
                batch_size: None,
            };
            adapt(
                ctx,
                &AdaptArgs { checkpoint: checkpoint.clone(), target: center_dir(&data, t), protocol: flags, out: dir.clone() },
            )?;
            rows.extend(evaluate(&EvaluateArgs {
                predictions: dir.join("predictions.fusb"),
                target: center_dir(&data, t),
                out: dir.join("metrics.csv"),
            })?);
        }
    }
    report::write_results_csv(&out.join("results.csv"), &rows).ctx("results.csv")?;
    sweep(
        ctx,
        &SweepArgs {
            checkpoint: checkpoint.clone(),
            data: data.clone(),
            targets: None,
            step_counts: None,
            batch_sizes: None,
            policy: None,
            beta: None,
            out: out.join("sweep"),
        },
    )?;
    diagnose(
        ctx,
        &DiagnoseArgs {
            checkpoint,
            data,
            source_center: None,
            target_center: None,
            protocol: ProtocolFlags { policy: None, beta: None, n_prior: None, steps: None, batch_size: None },
            bins: None,
            out: out.join("diagnose"),
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_parse_and_name_the_flag() {
        assert_eq!(parse_list::<f64>("--x", "0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        let e = parse_list::<usize>("--targets", "1,a").unwrap_err();
        assert!(e.to_string().contains("--targets"));
    }

    #[test]
    fn linspace_spans_zero_to_two() {
        assert_eq!(linspace_profile(1), vec![0.0]);
        assert_eq!(linspace_profile(5), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn batch_of_one_is_a_usage_error() {
        let ctx = Context { config: Config::default(), seed: 0 };
        let flags = ProtocolFlags { policy: None, beta: None, n_prior: None, steps: None, batch_size: Some(1) };
        let e = protocol(&ctx, &flags).unwrap_err();
        assert_eq!(e.code(), 2);
        assert!(e.to_string().contains("degenerate"));
    }
}
