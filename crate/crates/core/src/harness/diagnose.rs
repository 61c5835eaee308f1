//! Post-normalization activation moments and densities per BN channel.

use serde::{Deserialize, Serialize};

use crate::adapt::{accumulate_network, bn_forward, AdaptationPolicy, ProtocolParams};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::seed;
use crate::tensor::{channel_layout, Tensor};

pub const DEFAULT_BINS: usize = 40;
const CHUNK: usize = 128;

/// The three views of one channel: source data under source statistics,
/// target data under source statistics, target data under the adapted policy.
pub const REGIMES: [&str; 3] = ["source", "target-source-stats", "target-adapted"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
}

/// Density histogram; `edges` has one more entry than `density`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn integral(&self) -> f64 {
        self.density.iter().zip(self.edges.windows(2)).map(|(d, e)| d * (e[1] - e[0])).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftDiagnostic {
    pub layer: usize,
    pub channel: usize,
    /// Learned shift and scale of the channel.
    pub alpha: f64,
    pub gamma: f64,
    /// Indexed like [`REGIMES`].
    pub moments: [Moments; 3],
    pub histograms: [Histogram; 3],
}

#[derive(Clone, Debug)]
struct Accum {
    sum: f64,
    sumsq: f64,
    min: f64,
    max: f64,
    count: usize,
}

impl Default for Accum {
    fn default() -> Self {
        Accum { sum: 0.0, sumsq: 0.0, min: f64::INFINITY, max: f64::NEG_INFINITY, count: 0 }
    }
}

impl Accum {
    fn moments(&self) -> Moments {
        let n = self.count as f64;
        let mean = self.sum / n;
        Moments { mean, var: (self.sumsq / n - mean * mean).max(0.0) }
    }
}

/// Calls `f(layer, channel, value)` for every post-normalization activation of
/// `images` under `policy`.
fn visit(
    model: &Model,
    images: &Tensor,
    policy: &AdaptationPolicy,
    seed: u64,
    batch_size: usize,
    f: &mut dyn FnMut(usize, usize, f32),
) -> Result<()> {
    let n = images.batch();
    let batches: Vec<Vec<usize>> = if policy.batch_dependent() {
        crate::adapt::shuffled_partition(n, batch_size, seed::derive(seed, "evaluate"))?
    } else {
        (0..n).collect::<Vec<_>>().chunks(CHUNK).map(<[usize]>::to_vec).collect()
    };
    for idx in &batches {
        let x = images.select(idx)?;
        model.forward_with(&x, |layer, t, s| {
            let y = bn_forward(t, s, policy)?;
            let (bn, c, plane) = channel_layout(&y, "diagnose_shift")?;
            for ni in 0..bn {
                for ci in 0..c {
                    for &v in &y.data()[(ni * c + ci) * plane..][..plane] {
                        f(layer, ci, v);
                    }
                }
            }
            Ok(y)
        })?;
    }
    Ok(())
}

fn moments_of(model: &Model, images: &Tensor, policy: &AdaptationPolicy, params: &ProtocolParams) -> Result<Vec<Vec<Accum>>> {
    let mut acc: Vec<Vec<Accum>> = model.bn_layers().iter().map(|s| vec![Accum::default(); s.channels()]).collect();
    visit(model, images, policy, params.seed, params.batch_size, &mut |l, c, v| {
        let a = &mut acc[l][c];
        let v = v as f64;
        a.sum += v;
        a.sumsq += v * v;
        a.min = a.min.min(v);
        a.max = a.max.max(v);
        a.count += 1;
    })?;
    Ok(acc)
}

/// A copy of `model` whose target statistics come from the first protocol step on `target`.
pub fn adapt_model(model: &Model, target: &Tensor, policy: &AdaptationPolicy, params: &ProtocolParams) -> Result<Model> {
    let mut adapted = model.clone();
    if policy.uses_target_stats() {
        accumulate_network(&mut adapted, target, params)?;
    }
    Ok(adapted)
}

/// Per-channel moments and densities of every BN output under the three regimes.
pub fn diagnose_shift(
    model: &Model,
    source: &Tensor,
    target: &Tensor,
    policy: &AdaptationPolicy,
    params: &ProtocolParams,
    bins: usize,
) -> Result<Vec<ShiftDiagnostic>> {
    policy.validate()?;
    if source.batch() == 0 || target.batch() == 0 {
        return Err(Error::config("diagnosis needs non-empty source and target data"));
    }
    if bins == 0 {
        return Err(Error::config("histograms need at least one bin"));
    }
    let adapted = adapt_model(model, target, policy, params)?;
    let runs: [(&Model, &Tensor, &AdaptationPolicy); 3] = [
        (model, source, &AdaptationPolicy::SourceRunning),
        (model, target, &AdaptationPolicy::SourceRunning),
        (&adapted, target, policy),
    ];
    let accs = runs.iter().map(|&(m, x, p)| moments_of(m, x, p, params)).collect::<Result<Vec<_>>>()?;

    // shared range per channel so the three densities are comparable
    let ranges: Vec<Vec<(f64, f64)>> = accs[0]
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            (0..layer.len())
                .map(|c| {
                    let lo = accs.iter().map(|a| a[l][c].min).fold(f64::INFINITY, f64::min);
                    let hi = accs.iter().map(|a| a[l][c].max).fold(f64::NEG_INFINITY, f64::max);
                    if hi > lo {
                        (lo, hi)
                    } else {
                        (lo - 0.5, lo + 0.5)
                    }
                })
                .collect()
        })
        .collect();
    let mut counts: Vec<Vec<Vec<Vec<usize>>>> = Vec::with_capacity(3);
    for &(m, x, p) in &runs {
        let mut c: Vec<Vec<Vec<usize>>> = ranges.iter().map(|l| vec![vec![0; bins]; l.len()]).collect();
        visit(m, x, p, params.seed, params.batch_size, &mut |l, ch, v| {
            let (lo, hi) = ranges[l][ch];
            let b = (((v as f64 - lo) / (hi - lo)) * bins as f64).floor();
            c[l][ch][(b.max(0.0) as usize).min(bins - 1)] += 1;
        })?;
        counts.push(c);
    }

    let mut out = Vec::new();
    for (l, state) in model.bn_layers().iter().enumerate() {
        for c in 0..state.channels() {
            let (lo, hi) = ranges[l][c];
            let width = (hi - lo) / bins as f64;
            let edges: Vec<f64> = (0..=bins).map(|b| lo + b as f64 * width).collect();
            let hist = |r: usize| {
                let total = accs[r][l][c].count as f64;
                Histogram { edges: edges.clone(), density: counts[r][l][c].iter().map(|&k| k as f64 / (total * width)).collect() }
            };
            out.push(ShiftDiagnostic {
                layer: l,
                channel: c,
                alpha: state.alpha().data()[c] as f64,
                gamma: state.gamma().data()[c] as f64,
                moments: [accs[0][l][c].moments(), accs[1][l][c].moments(), accs[2][l][c].moments()],
                histograms: [hist(0), hist(1), hist(2)],
            });
        }
    }
    Ok(out)
}

/// `d(β)`: over every BN channel, the summed distance of the post-normalization
/// mean and variance on `target` from their training-time values `(α, γ²)`,
/// under fused normalization at each β. Target statistics are accumulated once.
pub fn moment_deviation_curve(model: &Model, target: &Tensor, betas: &[f64], params: &ProtocolParams) -> Result<Vec<(f64, f64)>> {
    if params.steps == 0 {
        return Err(Error::config("the deviation curve needs at least one accumulation step"));
    }
    let adapted = adapt_model(model, target, &AdaptationPolicy::TargetRunning, params)?;
    betas
        .iter()
        .map(|&beta| {
            let policy = AdaptationPolicy::Fused { beta };
            policy.validate()?;
            let acc = moments_of(&adapted, target, &policy, params)?;
            let mut d = 0.0;
            for (state, layer) in adapted.bn_layers().iter().zip(&acc) {
                for (c, a) in layer.iter().enumerate() {
                    let m = a.moments();
                    let alpha = state.alpha().data()[c] as f64;
                    let gamma = state.gamma().data()[c] as f64;
                    d += (m.mean - alpha).abs() + (m.var - gamma * gamma).abs();
                }
            }
            Ok((beta, d))
        })
        .collect()
}
