use serde::{Deserialize, Serialize};

use super::{bn_forward, shuffled_partition, shuffled_stream, snapshot_all, AccumulationLog, AdaptationPolicy};
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::nn::{BatchNormState, Model};
use crate::seed;
use crate::tensor::{channel_moments_f64, Tensor};

/// Batch-independent policies are evaluated in chunks of this many samples.
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Accumulation batches in the first step.
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep per-step target statistics of every layer in the log.
    pub record_snapshots: bool,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams { steps: 50, batch_size: 32, seed: 0, record_snapshots: false }
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolResult {
    /// Class probabilities `[N, K]` or foreground probabilities `[N, 1, H, W]`, in input order.
    pub predictions: Tensor,
    pub log: AccumulationLog,
    /// BN states after the first step (target statistics frozen).
    pub adapted: Vec<BatchNormState>,
    /// The policy read target statistics that were never accumulated.
    pub stale_target: bool,
}

/// First step: streams `steps` shuffled batches through the network with
/// per-batch normalization, folding each layer's batch moments into its
/// target running statistics. Outputs are discarded.
pub(crate) fn accumulate_network(model: &mut Model, images: &Tensor, params: &ProtocolParams) -> Result<AccumulationLog> {
    for s in model.bn_layers_mut() {
        s.reset_target();
    }
    let mut log = AccumulationLog {
        steps: 0,
        batch_size: params.batch_size,
        seed: params.seed,
        snapshots: params.record_snapshots.then(Vec::new),
    };
    let mut stream = shuffled_stream(images.batch(), params.batch_size, seed::derive(params.seed, "accumulate"))?;
    for step in 0..params.steps {
        let idx = stream.next().ok_or(Error::Exhausted { completed: step, requested: params.steps })?;
        let batch = images.select(&idx)?;
        model.forward_with_mut(&batch, |_, t, s| {
            let m = channel_moments_f64(t)?;
            let out = s.normalize_with(t, &m.mean, &m.var, "accumulate_target_stats")?;
            s.update_target(&m);
            Ok(out)
        })?;
        log.steps += 1;
        if let Some(snaps) = log.snapshots.as_mut() {
            snaps.push(snapshot_all(model.bn_layers()));
        }
    }
    Ok(log)
}

fn check_stale(model: &Model, policy: &AdaptationPolicy) -> bool {
    let stale = policy.uses_target_stats() && model.bn_layers().iter().any(|s| s.target_steps() == 0);
    if stale {
        log::warn!("{policy} reads target statistics that were never accumulated");
    }
    stale
}

fn forward_probs(model: &Model, x: &Tensor, policy: &AdaptationPolicy) -> Result<Tensor> {
    let logits = model.forward_with(x, |_, t, s| bn_forward(t, s, policy))?;
    model.probabilities(&logits)
}

/// Evaluates a batch-independent policy over all of `images`.
pub fn predict(model: &Model, images: &Tensor, policy: &AdaptationPolicy) -> Result<Tensor> {
    policy.validate()?;
    if policy.batch_dependent() {
        return Err(Error::config(format!("{policy} needs explicit batches; use predict_partitioned")));
    }
    check_stale(model, policy);
    let n = images.batch();
    let mut parts = Vec::with_capacity(n.div_ceil(EVAL_CHUNK));
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        parts.push(forward_probs(model, &images.slice_batch(start, len)?, policy)?);
        start += len;
    }
    Tensor::concat(&parts)
}

/// Evaluates `policy` batch by batch; `partition` must cover every sample exactly once.
pub fn predict_partitioned(
    model: &Model,
    images: &Tensor,
    policy: &AdaptationPolicy,
    partition: &[Vec<usize>],
) -> Result<Tensor> {
    policy.validate()?;
    check_stale(model, policy);
    let n = images.batch();
    let mut seen = vec![false; n];
    for &i in partition.iter().flatten() {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::contract(format!("partition repeats or exceeds sample {i}")));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::contract("partition does not cover every sample"));
    }
    let mut rows: Vec<Option<Vec<f32>>> = vec![None; n];
    let mut shape = Vec::new();
    for idx in partition {
        let probs = forward_probs(model, &images.select(idx)?, policy)?;
        shape = probs.shape()[1..].to_vec();
        for (j, &i) in idx.iter().enumerate() {
            rows[i] = Some(probs.sample(j).to_vec());
        }
    }
    let data: Vec<f32> = rows.into_iter().flat_map(|r| r.expect("covered")).collect();
    let mut full = vec![n];
    full.extend(shape);
    Tensor::new(full, data)
}

/// Runs both steps: target statistics are accumulated (for policies that use
/// them) on a fresh copy of `model`, then the whole of `target` is predicted
/// under `policy`. Only pixels are passed in.
pub fn run_fusion_protocol(
    model: &Model,
    target: &Tensor,
    policy: &AdaptationPolicy,
    params: &ProtocolParams,
) -> Result<ProtocolResult> {
    policy.validate()?;
    if policy.uses_target_stats() && params.steps == 0 {
        return Err(Error::config(format!("{policy} needs at least one accumulation step")));
    }
    let mut adapted = model.clone();
    let log = if policy.uses_target_stats() {
        accumulate_network(&mut adapted, target, params)?
    } else {
        AccumulationLog { steps: 0, batch_size: params.batch_size, seed: params.seed, snapshots: None }
    };
    let predictions = if policy.batch_dependent() {
        let parts = shuffled_partition(target.batch(), params.batch_size, seed::derive(params.seed, "evaluate"))?;
        predict_partitioned(&adapted, target, policy, &parts)?
    } else {
        predict(&adapted, target, policy)?
    };
    let stale_target = check_stale(&adapted, policy);
    Ok(ProtocolResult { predictions, log, adapted: adapted.bn_layers().to_vec(), stale_target })
}

/// Adapted-state sidecar: per-layer target statistics plus protocol metadata.
pub fn sidecar(states: &[BatchNormState], policy: &AdaptationPolicy, log: &AccumulationLog) -> Result<Archive> {
    let mut a = Archive::new();
    a.set_meta("kind", "adapted-state");
    a.set_meta("policy", serde_json::to_string(policy)?);
    a.set_meta("beta", policy.beta().map_or("-".to_string(), |b| b.to_string()));
    a.set_meta("steps", log.steps);
    a.set_meta("batch_size", log.batch_size);
    a.set_meta("seed", log.seed);
    a.set_meta("layers", states.len());
    for (i, s) in states.iter().enumerate() {
        a.push(format!("bn{i:02}.target_mean"), s.target_mean().clone())?;
        a.push(format!("bn{i:02}.target_var"), s.target_var().clone())?;
        a.set_meta(format!("bn{i:02}.target_steps"), s.target_steps());
    }
    Ok(a)
}

/// Installs a sidecar's target statistics into `model`.
pub fn apply_sidecar(model: &mut Model, a: &Archive) -> Result<(AdaptationPolicy, AccumulationLog)> {
    if a.meta("kind")? != "adapted-state" {
        return Err(Error::Format("archive is not an adapted-state sidecar".into()));
    }
    let layers: usize = a.meta_parse("layers")?;
    if layers != model.bn_layers().len() {
        return Err(Error::Format(format!("sidecar has {layers} BN layers, model has {}", model.bn_layers().len())));
    }
    for (i, s) in model.bn_layers_mut().iter_mut().enumerate() {
        let mean = a.get(&format!("bn{i:02}.target_mean"))?.clone();
        let var = a.get(&format!("bn{i:02}.target_var"))?.clone();
        if var.data().iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::Format(format!("bn{i:02}.target_var has negative entries")));
        }
        s.set_target_stats(mean, var, a.meta_parse(&format!("bn{i:02}.target_steps"))?)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    let policy: AdaptationPolicy = serde_json::from_str(a.meta("policy")?)?;
    let log = AccumulationLog {
        steps: a.meta_parse("steps")?,
        batch_size: a.meta_parse("batch_size")?,
        seed: a.meta_parse("seed")?,
        snapshots: None,
    };
    Ok((policy, log))
}
