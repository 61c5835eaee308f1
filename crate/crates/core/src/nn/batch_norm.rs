use crate::error::{Error, Result};
use crate::tensor::{channel_layout, channel_moments_f64, ChannelMoments, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Affine parameters of one BN layer plus its two sets of running statistics.
///
/// The source pair is maintained by training. The target pair starts at
/// `(0, 1)` and is only ever written by a target accumulation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    gamma: Tensor,
    alpha: Tensor,
    source_mean: Tensor,
    source_var: Tensor,
    target_mean: Tensor,
    target_var: Tensor,
    epsilon: f64,
    momentum: f64,
    target_steps: usize,
}

/// Explicit field values for [`BatchNormState::from_parts`].
#[derive(Clone, Debug)]
pub struct BatchNormParts {
    pub gamma: Vec<f32>,
    pub alpha: Vec<f32>,
    pub source_mean: Vec<f32>,
    pub source_var: Vec<f32>,
    pub target_mean: Vec<f32>,
    pub target_var: Vec<f32>,
    pub epsilon: f64,
    pub momentum: f64,
    pub target_steps: usize,
}

/// `y = gamma * ((x - mean) * inv_std) + alpha`, evaluated in f64.
#[inline]
pub(crate) fn affine_normalize(x: f64, mean: f64, inv_std: f64, gamma: f64, alpha: f64) -> f64 {
    gamma * ((x - mean) * inv_std) + alpha
}

/// Applies `f(channel, value)` to every element of a `[N, C]` or `[N, C, H, W]` tensor.
pub(crate) fn map_channels(x: &Tensor, op: &'static str, f: impl Fn(usize, f64) -> f64) -> Result<Tensor> {
    let (_, c, plane) = channel_layout(x, op)?;
    let data = x.data().iter().enumerate().map(|(i, &v)| f((i / plane) % c, v as f64) as f32).collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

impl BatchNormState {
    /// Fresh layer: `gamma = 1`, `alpha = 0`, both statistic pairs at `(0, 1)`.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(vec![channels]),
            alpha: Tensor::zeros(vec![channels]),
            source_mean: Tensor::zeros(vec![channels]),
            source_var: Tensor::ones(vec![channels]),
            target_mean: Tensor::zeros(vec![channels]),
            target_var: Tensor::ones(vec![channels]),
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            target_steps: 0,
        }
    }

    pub fn from_parts(p: BatchNormParts) -> Result<Self> {
        let c = p.gamma.len();
        if c == 0 {
            return Err(Error::contract("batch norm needs at least one channel"));
        }
        for (name, v) in [
            ("alpha", &p.alpha),
            ("source_mean", &p.source_mean),
            ("source_var", &p.source_var),
            ("target_mean", &p.target_mean),
            ("target_var", &p.target_var),
        ] {
            if v.len() != c {
                return Err(Error::Shape { shape: vec![v.len()], reason: format!("{name} must have {c} channels") });
            }
        }
        if p.source_var.iter().chain(&p.target_var).any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::contract("running variances must be >= 0"));
        }
        if p.epsilon.is_nan() || p.epsilon <= 0.0 {
            return Err(Error::contract("epsilon must be > 0"));
        }
        if !(p.momentum > 0.0 && p.momentum <= 1.0) {
            return Err(Error::contract("momentum must lie in (0, 1]"));
        }
        Ok(BatchNormState {
            gamma: Tensor::vector(p.gamma),
            alpha: Tensor::vector(p.alpha),
            source_mean: Tensor::vector(p.source_mean),
            source_var: Tensor::vector(p.source_var),
            target_mean: Tensor::vector(p.target_mean),
            target_var: Tensor::vector(p.target_var),
            epsilon: p.epsilon,
            momentum: p.momentum,
            target_steps: p.target_steps,
        })
    }

    pub fn to_parts(&self) -> BatchNormParts {
        BatchNormParts {
            gamma: self.gamma.data().to_vec(),
            alpha: self.alpha.data().to_vec(),
            source_mean: self.source_mean.data().to_vec(),
            source_var: self.source_var.data().to_vec(),
            target_mean: self.target_mean.data().to_vec(),
            target_var: self.target_var.data().to_vec(),
            epsilon: self.epsilon,
            momentum: self.momentum,
            target_steps: self.target_steps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }

    pub fn source_mean(&self) -> &Tensor {
        &self.source_mean
    }

    pub fn source_var(&self) -> &Tensor {
        &self.source_var
    }

    pub fn target_mean(&self) -> &Tensor {
        &self.target_mean
    }

    pub fn target_var(&self) -> &Tensor {
        &self.target_var
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn set_momentum(&mut self, momentum: f64) -> Result<()> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::contract("momentum must lie in (0, 1]"));
        }
        self.momentum = momentum;
        Ok(())
    }

    /// Number of target accumulation updates applied since the last reset.
    pub fn target_steps(&self) -> usize {
        self.target_steps
    }

    pub(crate) fn affine_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.gamma, &mut self.alpha)
    }

    /// Restores a previously accumulated target pair (checkpoint and sidecar loading).
    pub(crate) fn set_target_stats(&mut self, mean: Tensor, var: Tensor, steps: usize) -> Result<()> {
        mean.expect_same_shape(&self.target_mean, "set_target_stats")?;
        var.expect_same_shape(&self.target_var, "set_target_stats")?;
        self.target_mean = mean;
        self.target_var = var;
        self.target_steps = steps;
        Ok(())
    }

    pub fn reset_target(&mut self) {
        let c = self.channels();
        self.target_mean = Tensor::zeros(vec![c]);
        self.target_var = Tensor::ones(vec![c]);
        self.target_steps = 0;
    }

    fn check_input(&self, x: &Tensor, op: &'static str) -> Result<()> {
        let (_, c, _) = channel_layout(x, op)?;
        if c != self.channels() {
            return Err(Error::Dimension { op, lhs: x.shape().to_vec(), rhs: vec![self.channels()] });
        }
        Ok(())
    }

    fn ema(old: &Tensor, new: &[f64], m: f64) -> Tensor {
        Tensor::vector(old.data().iter().zip(new).map(|(&o, &n)| ((1.0 - m) * o as f64 + m * n) as f32).collect())
    }

    pub(crate) fn update_source(&mut self, moments: &ChannelMoments) {
        self.source_mean = Self::ema(&self.source_mean, &moments.mean, self.momentum);
        self.source_var = Self::ema(&self.source_var, &moments.var, self.momentum);
    }

    pub(crate) fn update_target(&mut self, moments: &ChannelMoments) {
        self.target_mean = Self::ema(&self.target_mean, &moments.mean, self.momentum);
        self.target_var = Self::ema(&self.target_var, &moments.var, self.momentum);
        self.target_steps += 1;
    }

    /// Normalizes with explicit per-channel statistics and this layer's affine.
    pub fn normalize_with(&self, x: &Tensor, mean: &[f64], var: &[f64], op: &'static str) -> Result<Tensor> {
        self.check_input(x, op)?;
        let g = f64s(&self.gamma);
        let a = f64s(&self.alpha);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        map_channels(x, op, |c, v| affine_normalize(v, mean[c], inv[c], g[c], a[c]))
    }

    /// Training-time normalization with this batch's moments; folds them into the
    /// source running statistics.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x, "bn_forward_train")?;
        let moments = channel_moments_f64(x)?;
        let out = self.normalize_with(x, &moments.mean, &moments.var, "bn_forward_train")?;
        self.update_source(&moments);
        Ok(out)
    }

    /// Inference with the source running statistics. Never mutates the state.
    pub fn forward_source(&self, x: &Tensor) -> Result<Tensor> {
        self.normalize_with(x, &f64s(&self.source_mean), &f64s(&self.source_var), "bn_forward_source")
    }

    pub(crate) fn source_stats_f64(&self) -> (Vec<f64>, Vec<f64>) {
        (f64s(&self.source_mean), f64s(&self.source_var))
    }

    pub(crate) fn target_stats_f64(&self) -> (Vec<f64>, Vec<f64>) {
        (f64s(&self.target_mean), f64s(&self.target_var))
    }

    pub(crate) fn affine_f64(&self) -> (Vec<f64>, Vec<f64>) {
        (f64s(&self.gamma), f64s(&self.alpha))
    }
}
