//! Test-time normalization policies and the two-step adaptation protocol.
//!
//! The protocol functions see images and BN states only; labels appear solely
//! in the stratified samplers, which callers use to group samples.

mod protocol;
mod sampler;

use serde::{Deserialize, Serialize};

pub(crate) use protocol::accumulate_network;
pub use protocol::{apply_sidecar, predict, predict_partitioned, run_fusion_protocol, sidecar, ProtocolParams, ProtocolResult};
pub use sampler::{representative_batches, shuffled_partition, shuffled_stream, stratified_partition, stratified_stream};

use crate::error::{Error, Result};
use crate::nn::{map_channels, BatchNormState};
use crate::tensor::{channel_moments_f64, Tensor};

/// Fusion weights searched by default.
pub const PAPER_BETA_GRID: [f64; 4] = [0.6, 0.7, 0.8, 0.9];
/// Evenly spaced weights used for diagnostics.
pub const DIAGNOSTIC_BETA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Pseudo-count of the source prior.
pub const DEFAULT_PRIOR: usize = 20;

/// Which statistics normalize each BN layer at inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum AdaptationPolicy {
    /// Source running statistics (plain evaluation).
    SourceRunning,
    /// Moments of the current test batch.
    PerBatch,
    /// Target running statistics accumulated in the first step.
    TargetRunning,
    /// `beta`-weighted sum of the target- and source-normalized activations.
    Fused { beta: f64 },
    /// Batch moments shrunk towards the source statistics with pseudo-count `n_prior`.
    SourcePrior { n_prior: usize },
}

impl AdaptationPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AdaptationPolicy::Fused { beta } if !(0.0..=1.0).contains(&beta) => {
                Err(Error::contract(format!("beta must lie in [0, 1], got {beta}")))
            }
            AdaptationPolicy::SourcePrior { n_prior: 0 } => Err(Error::contract("n_prior must be >= 1")),
            _ => Ok(()),
        }
    }

    /// Whether the policy reads target running statistics.
    pub fn uses_target_stats(&self) -> bool {
        matches!(self, AdaptationPolicy::TargetRunning | AdaptationPolicy::Fused { .. })
    }

    /// Whether outputs depend on which samples share a batch.
    pub fn batch_dependent(&self) -> bool {
        matches!(self, AdaptationPolicy::PerBatch | AdaptationPolicy::SourcePrior { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdaptationPolicy::SourceRunning => "source-running",
            AdaptationPolicy::PerBatch => "per-batch",
            AdaptationPolicy::TargetRunning => "target-running",
            AdaptationPolicy::Fused { .. } => "fused",
            AdaptationPolicy::SourcePrior { .. } => "source-prior",
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match *self {
            AdaptationPolicy::Fused { beta } => Some(beta),
            _ => None,
        }
    }

    /// Parses a policy name plus its optional parameters.
    pub fn parse(name: &str, beta: Option<f64>, n_prior: Option<usize>) -> Result<Self> {
        let p = match name {
            "source-running" | "source" | "vanilla" => AdaptationPolicy::SourceRunning,
            "per-batch" => AdaptationPolicy::PerBatch,
            "target-running" | "target" => AdaptationPolicy::TargetRunning,
            "fused" | "fusion" => {
                AdaptationPolicy::Fused { beta: beta.ok_or_else(|| Error::config("policy `fused` needs a beta"))? }
            }
            "source-prior" => AdaptationPolicy::SourcePrior { n_prior: n_prior.unwrap_or(DEFAULT_PRIOR) },
            _ => {
                return Err(Error::config(format!(
                    "unknown policy `{name}` (source-running | per-batch | target-running | fused | source-prior)"
                )))
            }
        };
        p.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(p)
    }
}

impl std::fmt::Display for AdaptationPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdaptationPolicy::Fused { beta } => write!(f, "fused(beta={beta})"),
            AdaptationPolicy::SourcePrior { n_prior } => write!(f, "source-prior(N={n_prior})"),
            p => f.write_str(p.name()),
        }
    }
}

/// Normalizes with the source running statistics (plain inference).
pub fn bn_forward_source(x: &Tensor, state: &BatchNormState) -> Result<Tensor> {
    state.forward_source(x)
}

/// Normalizes with this batch's moments. The state is not touched.
pub fn bn_forward_perbatch(x: &Tensor, state: &BatchNormState) -> Result<Tensor> {
    let m = channel_moments_f64(x)?;
    state.normalize_with(x, &m.mean, &m.var, "bn_forward_perbatch")
}

/// Normalizes with the target running statistics.
pub fn bn_forward_target(x: &Tensor, state: &BatchNormState) -> Result<Tensor> {
    let (mean, var) = state.target_stats_f64();
    state.normalize_with(x, &mean, &var, "bn_forward_target")
}

/// `gamma * (beta * (x - Mt)/sqrt(Vt + eps) + (1 - beta) * (x - Ms)/sqrt(Vs + eps)) + alpha`.
///
/// The two normalized terms are mixed, not the statistics. At `beta = 0` and
/// `beta = 1` the result is bit-identical to [`BatchNormState::forward_source`]
/// and [`bn_forward_target`].
pub fn bn_forward_fused(x: &Tensor, state: &BatchNormState, beta: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::contract(format!("beta must lie in [0, 1], got {beta}")));
    }
    let (_, channels, _) = crate::tensor::channel_layout(x, "bn_forward_fused")?;
    if channels != state.channels() {
        return Err(Error::Dimension { op: "bn_forward_fused", lhs: x.shape().to_vec(), rhs: vec![state.channels()] });
    }
    let (ms, vs) = state.source_stats_f64();
    let (mt, vt) = state.target_stats_f64();
    let (g, a) = state.affine_f64();
    let eps = state.epsilon();
    let is: Vec<f64> = vs.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let it: Vec<f64> = vt.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    map_channels(x, "bn_forward_fused", |c, v| {
        let fused = beta * ((v - mt[c]) * it[c]) + (1.0 - beta) * ((v - ms[c]) * is[c]);
        g[c] * fused + a[c]
    })
}

/// Normalizes with the batch moments shrunk towards the source statistics:
/// `mu = (N*Ms + n*mean) / (N + n)`, `var = (N*Vs + n*var_b) / (N + n)`, `n` the batch size.
pub fn bn_forward_source_prior(x: &Tensor, state: &BatchNormState, n_prior: usize) -> Result<Tensor> {
    if n_prior == 0 {
        return Err(Error::contract("n_prior must be >= 1"));
    }
    let m = channel_moments_f64(x)?;
    let (ms, vs) = state.source_stats_f64();
    let (big_n, n) = (n_prior as f64, x.batch() as f64);
    let mean: Vec<f64> = ms.iter().zip(&m.mean).map(|(s, b)| (big_n * s + n * b) / (big_n + n)).collect();
    let var: Vec<f64> = vs.iter().zip(&m.var).map(|(s, b)| (big_n * s + n * b) / (big_n + n)).collect();
    state.normalize_with(x, &mean, &var, "bn_forward_source_prior")
}

/// Applies `policy` to one BN layer.
pub fn bn_forward(x: &Tensor, state: &BatchNormState, policy: &AdaptationPolicy) -> Result<Tensor> {
    match *policy {
        AdaptationPolicy::SourceRunning => bn_forward_source(x, state),
        AdaptationPolicy::PerBatch => bn_forward_perbatch(x, state),
        AdaptationPolicy::TargetRunning => bn_forward_target(x, state),
        AdaptationPolicy::Fused { beta } => bn_forward_fused(x, state, beta),
        AdaptationPolicy::SourcePrior { n_prior } => bn_forward_source_prior(x, state, n_prior),
    }
}

/// Target statistics of one BN layer after an accumulation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl StatsSnapshot {
    fn of(state: &BatchNormState) -> Self {
        StatsSnapshot { mean: state.target_mean().data().to_vec(), var: state.target_var().data().to_vec() }
    }
}

/// Record of the first (accumulation) step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccumulationLog {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `snapshots[step][layer]`, when requested.
    pub snapshots: Option<Vec<Vec<StatsSnapshot>>>,
}

/// Folds the moments of `steps` batches into the target running statistics of
/// one layer. Source statistics are left alone.
pub fn accumulate_target_stats<I>(batches: I, state: &mut BatchNormState, steps: usize, record: bool) -> Result<AccumulationLog>
where
    I: IntoIterator<Item = Tensor>,
{
    let mut log = AccumulationLog { snapshots: record.then(Vec::new), ..AccumulationLog::default() };
    let mut it = batches.into_iter();
    for step in 0..steps {
        let batch = it.next().ok_or(Error::Exhausted { completed: step, requested: steps })?;
        let m = channel_moments_f64(&batch)?;
        if m.mean.len() != state.channels() {
            return Err(Error::Dimension {
                op: "accumulate_target_stats",
                lhs: batch.shape().to_vec(),
                rhs: vec![state.channels()],
            });
        }
        state.update_target(&m);
        log.steps += 1;
        log.batch_size = batch.batch();
        if let Some(s) = log.snapshots.as_mut() {
            s.push(vec![StatsSnapshot::of(state)]);
        }
    }
    Ok(log)
}

pub(crate) fn snapshot_all(states: &[BatchNormState]) -> Vec<StatsSnapshot> {
    states.iter().map(StatsSnapshot::of).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BatchNormParts;

    fn state(ms: f32, vs: f32, mt: f32, vt: f32) -> BatchNormState {
        BatchNormState::from_parts(BatchNormParts {
            gamma: vec![1.0],
            alpha: vec![0.0],
            source_mean: vec![ms],
            source_var: vec![vs],
            target_mean: vec![mt],
            target_var: vec![vt],
            epsilon: 1e-12,
            momentum: 0.1,
            target_steps: 1,
        })
        .unwrap()
    }

    fn x13() -> Tensor {
        Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap()
    }

    fn close(t: &Tensor, want: &[f32]) {
        for (a, b) in t.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{:?} vs {want:?}", t.data());
        }
    }

    #[test]
    fn per_batch_example() {
        close(&bn_forward_perbatch(&x13(), &state(0.0, 1.0, 0.0, 1.0)).unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn target_example() {
        close(&bn_forward_target(&x13(), &state(0.0, 4.0, 2.0, 1.0)).unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn fused_example_and_reductions() {
        let s = state(0.0, 4.0, 2.0, 1.0);
        close(&bn_forward_fused(&x13(), &s, 0.5).unwrap(), &[-0.25, 1.25]);
        assert_eq!(bn_forward_fused(&x13(), &s, 0.0).unwrap(), s.forward_source(&x13()).unwrap());
        assert_eq!(bn_forward_fused(&x13(), &s, 1.0).unwrap(), bn_forward_target(&x13(), &s).unwrap());
        assert!(matches!(bn_forward_fused(&x13(), &s, 1.5), Err(Error::Contract(_))));
        assert!(bn_forward_fused(&Tensor::zeros(vec![2, 3]), &s, 0.5).is_err());
    }

    #[test]
    fn source_prior_mixes_means() {
        // N = 20, n = 20, Ms = 0, batch mean 2: mu = 1
        let s = state(0.0, 1.0, 0.0, 1.0);
        let x = Tensor::from_fn(vec![20, 1], |i| if i % 2 == 0 { 1.0 } else { 3.0 });
        let y = bn_forward_source_prior(&x, &s, 20).unwrap();
        // var = (20*1 + 20*1)/40 = 1, so y = x - 1
        close(&y, x.map(|v| v - 1.0).data());
        let huge = bn_forward_source_prior(&x, &s, 1_000_000_000).unwrap();
        assert!(huge.max_abs_diff(&s.forward_source(&x).unwrap()) < 1e-6);
    }

    #[test]
    fn accumulate_example() {
        let mut s = BatchNormState::new(1);
        // one batch with moments (2, 4)
        let b = Tensor::new(vec![2, 1], vec![0.0, 4.0]).unwrap();
        let log = accumulate_target_stats([b], &mut s, 1, true).unwrap();
        assert_eq!(log.steps, 1);
        assert!((s.target_mean().data()[0] - 0.2).abs() < 1e-6);
        assert!((s.target_var().data()[0] - 1.3).abs() < 1e-6);
        assert_eq!(s.source_mean().data(), &[0.0]);
        assert_eq!(log.snapshots.unwrap().len(), 1);
    }

    #[test]
    fn accumulate_zero_steps_and_exhaustion() {
        let mut s = BatchNormState::new(1);
        let before = s.clone();
        accumulate_target_stats(std::iter::empty(), &mut s, 0, false).unwrap();
        assert_eq!(s, before);
        let b = Tensor::new(vec![2, 1], vec![0.0, 4.0]).unwrap();
        let err = accumulate_target_stats([b.clone(), b], &mut s, 3, false).unwrap_err();
        assert!(matches!(err, Error::Exhausted { completed: 2, requested: 3 }));
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(AdaptationPolicy::parse("fused", Some(0.7), None).unwrap(), AdaptationPolicy::Fused { beta: 0.7 });
        assert!(AdaptationPolicy::parse("fused", Some(1.2), None).is_err());
        assert!(AdaptationPolicy::parse("fused", None, None).is_err());
        assert_eq!(AdaptationPolicy::parse("source-prior", None, None).unwrap(), AdaptationPolicy::SourcePrior { n_prior: 20 });
        assert!(AdaptationPolicy::parse("bogus", None, None).is_err());
    }
}
