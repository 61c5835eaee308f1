use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{argmax_rows, balanced_accuracy, mean_dice};
use crate::adapt::{
    predict_partitioned, run_fusion_protocol, shuffled_partition, stratified_partition, AdaptationPolicy, ProtocolParams,
    DEFAULT_PRIOR, PAPER_BETA_GRID,
};
use crate::error::{Error, Result};
use crate::nn::{self, EpochLog, Model, NetworkSpec, TaskKind, TrainRecipe};
use crate::seed;
use crate::stainsim::{generate_benchmark, Benchmark, BenchmarkSpec, CenterDataset};
use crate::tensor::Tensor;

/// How the second protocol step groups target samples for batch-dependent policies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    #[default]
    Shuffled,
    /// Class-stratified batches built from the target labels (classification only).
    Stratified,
}

/// One policy of a roster together with its protocol settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosterEntry {
    pub policy: AdaptationPolicy,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub sampler: Sampler,
}

impl RosterEntry {
    pub fn new(policy: AdaptationPolicy, steps: usize, batch_size: usize) -> Self {
        RosterEntry { policy, steps, batch_size, sampler: Sampler::Shuffled }
    }

    pub fn stratified(mut self) -> Self {
        self.sampler = Sampler::Stratified;
        self
    }

    /// Name used in result tables, e.g. `fused` or `per-batch+stratified`.
    pub fn label(&self) -> String {
        match self.sampler {
            Sampler::Shuffled => self.policy.name().to_string(),
            Sampler::Stratified => format!("{}+stratified", self.policy.name()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch size {} is degenerate: a batch of one sample has no usable statistics",
                self.batch_size
            )));
        }
        if self.policy.uses_target_stats() && self.steps == 0 {
            return Err(Error::config(format!("{} needs at least one accumulation step", self.policy)));
        }
        if self.sampler == Sampler::Stratified && !self.policy.batch_dependent() {
            return Err(Error::config(format!(
                "stratified batches only matter for batch-dependent policies, not {}",
                self.policy
            )));
        }
        Ok(())
    }

    fn params(&self, seed: u64) -> ProtocolParams {
        ProtocolParams {
            steps: if self.policy.uses_target_stats() { self.steps } else { 0 },
            batch_size: self.batch_size,
            seed,
            record_snapshots: false,
        }
    }
}

/// The full comparison roster: vanilla, per-batch with and without
/// stratification, the source prior, target running statistics and fused
/// normalization over the β grid.
pub fn standard_roster(steps: usize, batch_size: usize) -> Vec<RosterEntry> {
    let mut roster = vec![
        RosterEntry::new(AdaptationPolicy::SourceRunning, steps, batch_size),
        RosterEntry::new(AdaptationPolicy::PerBatch, steps, batch_size),
        RosterEntry::new(AdaptationPolicy::PerBatch, steps, batch_size).stratified(),
        RosterEntry::new(AdaptationPolicy::SourcePrior { n_prior: DEFAULT_PRIOR }, steps, batch_size),
        RosterEntry::new(AdaptationPolicy::TargetRunning, steps, batch_size),
    ];
    roster.extend(PAPER_BETA_GRID.iter().map(|&beta| RosterEntry::new(AdaptationPolicy::Fused { beta }, steps, batch_size)));
    roster
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    pub source: usize,
    pub targets: Vec<usize>,
    pub network: NetworkSpec,
    pub recipe: TrainRecipe,
    pub roster: Vec<RosterEntry>,
    pub repetitions: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Source center 0, every other center a target, the standard roster and three repetitions.
    pub fn standard(benchmark: BenchmarkSpec, recipe: TrainRecipe, protocol: &ProtocolParams) -> Self {
        let network = NetworkSpec::reference(benchmark.task, 2, benchmark.patch_size);
        ExperimentConfig {
            targets: (1..benchmark.shifts.len()).collect(),
            source: 0,
            network,
            recipe,
            roster: standard_roster(protocol.steps, protocol.batch_size),
            repetitions: 3,
            seed: protocol.seed,
            benchmark,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let centers = self.benchmark.shifts.len();
        if self.source >= centers {
            return Err(Error::config(format!("source center {} outside 0..{centers}", self.source)));
        }
        if self.targets.is_empty() {
            return Err(Error::config("an experiment needs at least one target center"));
        }
        for &t in &self.targets {
            if t == self.source {
                return Err(Error::config(format!("center {t} is both source and target")));
            }
            if t >= centers {
                return Err(Error::config(format!("target center {t} outside 0..{centers}")));
            }
        }
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be >= 1"));
        }
        if self.network.task != self.benchmark.task {
            return Err(Error::config(format!(
                "network is built for {} but the benchmark is {}",
                self.network.task, self.benchmark.task
            )));
        }
        self.network.validate()?;
        self.recipe.validate()?;
        if self.roster.is_empty() {
            return Err(Error::config("the policy roster is empty"));
        }
        for e in &self.roster {
            e.validate()?;
            if e.sampler == Sampler::Stratified && self.benchmark.task == TaskKind::DensePrediction {
                return Err(Error::config("stratified batches need class labels; dense prediction has none"));
            }
        }
        Ok(())
    }

    /// Seed of repetition `r`; drives training, accumulation and batching.
    pub fn repetition_seed(&self, r: usize) -> u64 {
        seed::derive_indexed(self.seed, "repetition", r as u64)
    }

    /// Stable hex digest of the configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", seed::derive(0, &json))
    }
}

/// Outcome of training one repetition.
#[derive(Clone, Debug)]
pub struct Repetition {
    pub seed: u64,
    /// The trained model, or the divergence message.
    pub model: std::result::Result<Model, String>,
    pub log: Vec<EpochLog>,
}

/// Trains one model per repetition seed on the source center. Divergence is
/// recorded, any other error aborts.
pub fn train_repetitions(config: &ExperimentConfig, bench: &Benchmark) -> Result<Vec<Repetition>> {
    config.validate()?;
    let source = &center(bench, config.source)?.train;
    let outcomes = crate::par_map(0..config.repetitions, |r| {
        let seed = config.repetition_seed(r);
        (seed, nn::train(&config.network, source, &config.recipe, seed))
    });
    outcomes
        .into_iter()
        .map(|(seed, out)| match out {
            Ok(o) => Ok(Repetition { seed, model: Ok(o.model), log: o.log }),
            Err(e @ Error::Divergence { .. }) => {
                log::warn!("repetition seed {seed}: {e}");
                Ok(Repetition { seed, model: Err(e.to_string()), log: Vec::new() })
            }
            Err(e) => Err(e),
        })
        .collect()
}

fn center(bench: &Benchmark, k: usize) -> Result<&crate::stainsim::CenterSplit> {
    bench.centers.get(k).ok_or_else(|| Error::config(format!("benchmark has no center {k}")))
}

/// `balanced-accuracy` for classification, `dice` for dense prediction.
pub fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classification => "balanced-accuracy",
        TaskKind::DensePrediction => "dice",
    }
}

/// Scores class or mask probabilities against the labels of `data`.
pub fn score(predictions: &Tensor, data: &CenterDataset) -> Result<f64> {
    match data.task() {
        TaskKind::Classification => {
            let labels = data.labels().ok_or_else(|| Error::config("scoring needs labels"))?;
            balanced_accuracy(&argmax_rows(predictions)?, labels)
        }
        TaskKind::DensePrediction => {
            let masks = data.masks().ok_or_else(|| Error::config("scoring needs masks"))?;
            mean_dice(predictions, masks, 0.5)
        }
    }
}

/// Predictions for one roster entry on a labelled target split. Only the
/// stratified sampler looks at labels, and only to group samples.
pub fn evaluate_entry(model: &Model, target: &CenterDataset, entry: &RosterEntry, seed: u64) -> Result<(Tensor, usize)> {
    entry.validate()?;
    let params = entry.params(seed);
    match entry.sampler {
        Sampler::Shuffled => {
            let r = run_fusion_protocol(model, target.images(), &entry.policy, &params)?;
            Ok((r.predictions, r.log.steps))
        }
        Sampler::Stratified => {
            let labels = target.labels().ok_or_else(|| Error::config("stratified batches need target labels"))?;
            let parts = stratified_partition(labels, target.classes(), entry.batch_size, seed::derive(seed, "evaluate"))?;
            Ok((predict_partitioned(model, target.images(), &entry.policy, &parts)?, 0))
        }
    }
}

/// One line of the per-seed results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub source: usize,
    pub target: usize,
    pub policy: String,
    pub beta: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub metric_name: String,
    pub value: f64,
}

/// Aggregate of one roster entry on one target over all repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub fingerprint: String,
    pub policy: String,
    pub beta: Option<f64>,
    pub target: usize,
    pub metric_name: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Per-seed difference to the vanilla (source running statistics) metric.
    pub increments: Vec<f64>,
    pub increment_mean: f64,
    pub accumulation_steps: usize,
    pub batch_size: usize,
    /// Seeds whose training diverged; they contribute no values.
    pub failed_seeds: Vec<u64>,
}

impl ExperimentRecord {
    pub fn failed(&self) -> bool {
        !self.failed_seeds.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub fingerprint: String,
    pub config: ExperimentConfig,
    pub rows: Vec<ResultRow>,
    pub records: Vec<ExperimentRecord>,
    pub wall_clock_secs: f64,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct Cell {
    value: f64,
    steps: usize,
}

/// Evaluates every roster entry on every target for every trained repetition.
/// The vanilla baseline is always computed so increments are defined even when
/// it is not part of the roster.
pub fn evaluate_roster(config: &ExperimentConfig, bench: &Benchmark, reps: &[Repetition]) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let vanilla = RosterEntry::new(AdaptationPolicy::SourceRunning, 0, 2);
    let entries: Vec<&RosterEntry> = std::iter::once(&vanilla).chain(&config.roster).collect();
    let (nt, ne) = (config.targets.len(), entries.len());
    let cells = crate::par_map(0..reps.len() * nt * ne, |i| -> Result<Option<Cell>> {
        let (r, t, e) = (i / (nt * ne), (i / ne) % nt, i % ne);
        let Ok(model) = &reps[r].model else {
            return Ok(None);
        };
        let target = &center(bench, config.targets[t])?.test;
        let (pred, steps) = evaluate_entry(model, target, entries[e], reps[r].seed)?;
        Ok(Some(Cell { value: score(&pred, target)?, steps }))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let cell = |r: usize, t: usize, e: usize| cells[(r * nt + t) * ne + e].as_ref();

    let fingerprint = config.fingerprint();
    let metric = metric_name(config.network.task).to_string();
    let mut rows = Vec::new();
    for (r, rep) in reps.iter().enumerate() {
        for (t, &target) in config.targets.iter().enumerate() {
            for (e, entry) in config.roster.iter().enumerate() {
                rows.push(ResultRow {
                    source: config.source,
                    target,
                    policy: entry.label(),
                    beta: entry.policy.beta(),
                    steps: cell(r, t, e + 1).map_or(0, |c| c.steps),
                    batch_size: entry.batch_size,
                    seed: rep.seed,
                    metric_name: metric.clone(),
                    value: cell(r, t, e + 1).map_or(f64::NAN, |c| c.value),
                });
            }
        }
    }
    let failed_seeds: Vec<u64> = reps.iter().filter(|r| r.model.is_err()).map(|r| r.seed).collect();
    let mut records = Vec::new();
    for (e, entry) in config.roster.iter().enumerate() {
        for (t, &target) in config.targets.iter().enumerate() {
            let (mut seeds, mut values, mut increments, mut steps) = (Vec::new(), Vec::new(), Vec::new(), 0);
            for (r, rep) in reps.iter().enumerate() {
                if let (Some(c), Some(v)) = (cell(r, t, e + 1), cell(r, t, 0)) {
                    seeds.push(rep.seed);
                    values.push(c.value);
                    increments.push(c.value - v.value);
                    steps = c.steps;
                }
            }
            let (mean, std) = mean_std(&values);
            records.push(ExperimentRecord {
                fingerprint: fingerprint.clone(),
                policy: entry.label(),
                beta: entry.policy.beta(),
                target,
                metric_name: metric.clone(),
                seeds,
                values,
                mean,
                std,
                increment_mean: mean_std(&increments).0,
                increments,
                accumulation_steps: steps,
                batch_size: entry.batch_size,
                failed_seeds: failed_seeds.clone(),
            });
        }
    }
    Ok(ExperimentReport { fingerprint, config: config.clone(), rows, records, wall_clock_secs: start.elapsed().as_secs_f64() })
}

/// Generates the benchmark, trains every repetition and evaluates the roster.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let bench = generate_benchmark(&config.benchmark)?;
    let reps = train_repetitions(config, &bench)?;
    let mut report = evaluate_roster(config, &bench, &reps)?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean of a roster entry's metric over all targets, as `(mean over seeds, per-seed means)`.
pub fn mean_over_targets(report: &ExperimentReport, label: &str, beta: Option<f64>) -> Option<(f64, Vec<f64>)> {
    let recs: Vec<&ExperimentRecord> = report.records.iter().filter(|r| r.policy == label && r.beta == beta).collect();
    let first = recs.first()?;
    let per_seed: Vec<f64> =
        (0..first.values.len()).map(|s| recs.iter().map(|r| r.values[s]).sum::<f64>() / recs.len() as f64).collect();
    Some((mean_std(&per_seed).0, per_seed))
}

/// One cell of a steps by batch-size grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub steps: usize,
    pub batch_size: usize,
    /// Metric averaged over targets, then over seeds.
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub policy: AdaptationPolicy,
    pub cells: Vec<SweepCell>,
    pub rows: Vec<ResultRow>,
}

impl SweepReport {
    pub fn cell(&self, steps: usize, batch_size: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.steps == steps && c.batch_size == batch_size)
    }
}

/// Runs the two-step protocol under `policy` for every `(steps, batch size)`
/// pair and reports the metric averaged over `targets`, then over seeds.
/// `source` only labels the result rows.
pub fn sweep_steps_and_batch(
    source: usize,
    targets: &[&CenterDataset],
    reps: &[Repetition],
    policy: &AdaptationPolicy,
    step_counts: &[usize],
    batch_sizes: &[usize],
) -> Result<SweepReport> {
    policy.validate()?;
    if !policy.uses_target_stats() {
        return Err(Error::config(format!("{policy} accumulates no statistics; nothing to sweep")));
    }
    if let Some(&b) = batch_sizes.iter().find(|&&b| b < 2) {
        return Err(Error::config(format!(
            "batch size {b} is degenerate: a batch of one sample is not sufficient for batch statistics"
        )));
    }
    if step_counts.contains(&0) {
        return Err(Error::config("step counts must be >= 1"));
    }
    if step_counts.is_empty() || batch_sizes.is_empty() || targets.is_empty() {
        return Err(Error::config("the sweep grid is empty"));
    }
    let grid: Vec<(usize, usize)> = step_counts.iter().flat_map(|&s| batch_sizes.iter().map(move |&b| (s, b))).collect();
    let live: Vec<&Repetition> = reps.iter().filter(|r| r.model.is_ok()).collect();
    if live.is_empty() {
        return Err(Error::config("no repetition trained successfully"));
    }
    let nt = targets.len();
    let per = live.len() * nt;
    let values = crate::par_map(0..grid.len() * per, |i| -> Result<f64> {
        let (g, r, t) = (i / per, (i % per) / nt, i % nt);
        let (steps, batch_size) = grid[g];
        let entry = RosterEntry::new(*policy, steps, batch_size);
        let target = targets[t];
        let model = live[r].model.as_ref().expect("filtered");
        let (pred, _) = evaluate_entry(model, target, &entry, live[r].seed)?;
        score(&pred, target)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let metric = metric_name(targets[0].task()).to_string();
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for (g, &(steps, batch_size)) in grid.iter().enumerate() {
        let mut per_seed = Vec::new();
        for (r, rep) in live.iter().enumerate() {
            let vals = &values[g * per + r * nt..][..nt];
            per_seed.push(vals.iter().sum::<f64>() / nt as f64);
            for (t, &v) in vals.iter().enumerate() {
                rows.push(ResultRow {
                    source,
                    target: targets[t].center(),
                    policy: policy.name().to_string(),
                    beta: policy.beta(),
                    steps,
                    batch_size,
                    seed: rep.seed,
                    metric_name: metric.clone(),
                    value: v,
                });
            }
        }
        let (mean, std) = mean_std(&per_seed);
        cells.push(SweepCell { steps, batch_size, mean, std, per_seed });
    }
    Ok(SweepReport { policy: *policy, cells, rows })
}

/// Shuffled partition of a target for a batch-dependent policy, as used by the protocol.
pub fn protocol_partition(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    shuffled_partition(n, batch_size, seed::derive(seed, "evaluate"))
}
