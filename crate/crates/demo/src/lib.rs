//! Browser demo: synthetic stained patches, fused normalization of one
//! channel, and convergence of the target running mean.
//!
//! Each export is a thin wrapper over a plain function so the logic is
//! testable on the host.

use fusion_core::adapt::{accumulate_target_stats, bn_forward_fused, bn_forward_source};
use fusion_core::nn::{BatchNormParts, BatchNormState, DEFAULT_EPSILON};
use fusion_core::stainsim::{generate_center, ShiftMagnitude};
use fusion_core::{TaskKind, Tensor};
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

/// Range covered by the density histograms.
pub const DENSITY_RANGE: (f64, f64) = (-5.0, 5.0);
const DENSITY_SAMPLES: usize = 20_000;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// RGBA bytes of one `size`×`size` patch from `center` at stain shift `shift`.
pub fn stain_patch_rgba(center: usize, shift: f64, seed: u64, size: usize) -> Result<Vec<u8>, String> {
    let shift = ShiftMagnitude::new(shift).map_err(err)?;
    let data = generate_center(center, 1, TaskKind::Classification, shift, seed, size).map_err(err)?;
    let img = data.images().sample(0);
    let plane = size * size;
    let mut out = Vec::with_capacity(plane * 4);
    for p in 0..plane {
        for c in 0..3 {
            out.push((img[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    Ok(out)
}

fn channel_state(target_mean: f64, target_std: f64) -> Result<BatchNormState, String> {
    BatchNormState::from_parts(BatchNormParts {
        gamma: vec![1.0],
        alpha: vec![0.0],
        source_mean: vec![0.0],
        source_var: vec![1.0],
        target_mean: vec![target_mean as f32],
        target_var: vec![(target_std * target_std) as f32],
        epsilon: DEFAULT_EPSILON,
        momentum: fusion_core::nn::DEFAULT_MOMENTUM,
        target_steps: 1,
    })
    .map_err(err)
}

fn gaussian(mean: f64, std: f64, n: usize, seed: u64, purpose: &str) -> Result<Tensor, String> {
    let d = Normal::new(mean, std).map_err(err)?;
    let mut rng = fusion_core::seed::rng(seed, purpose);
    let v = (0..n).map(|_| d.sample(&mut rng) as f32).collect();
    Tensor::new(vec![n, 1], v).map_err(err)
}

fn density(x: &Tensor, bins: usize) -> Vec<f64> {
    let (lo, hi) = DENSITY_RANGE;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in x.data() {
        let b = ((v as f64 - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            counts[b as usize] += 1;
        }
    }
    let n = x.len() as f64;
    counts.iter().map(|&c| c as f64 / (n * width)).collect()
}

/// Densities of one BN channel with source statistics `(0, 1)`, as three
/// consecutive runs of `bins` values: source data under source statistics,
/// shifted target data under source statistics, target data under fused
/// normalization at `beta`.
pub fn fused_densities(beta: f64, target_mean: f64, target_std: f64, bins: usize, seed: u64) -> Result<Vec<f64>, String> {
    if bins == 0 {
        return Err("bins must be positive".into());
    }
    let state = channel_state(target_mean, target_std)?;
    let source = gaussian(0.0, 1.0, DENSITY_SAMPLES, seed, "demo-source")?;
    let target = gaussian(target_mean, target_std, DENSITY_SAMPLES, seed, "demo-target")?;
    let mut out = density(&bn_forward_source(&source, &state).map_err(err)?, bins);
    out.extend(density(&bn_forward_source(&target, &state).map_err(err)?, bins));
    out.extend(density(&bn_forward_fused(&target, &state, beta).map_err(err)?, bins));
    Ok(out)
}

/// Distance of the target running mean from the batch mean after each of
/// `steps` identical batches, followed by the geometric bound at each step.
pub fn ema_curve(momentum: f64, steps: usize, batch_size: usize, target_mean: f64, seed: u64) -> Result<Vec<f64>, String> {
    if batch_size < 2 {
        return Err("batch size must be at least 2".into());
    }
    let mut state = channel_state(0.0, 1.0)?;
    state.reset_target();
    state.set_momentum(momentum).map_err(err)?;
    let batch = gaussian(target_mean, 1.0, batch_size, seed, "demo-ema")?;
    let mu = batch.data().iter().map(|&v| v as f64).sum::<f64>() / batch_size as f64;
    let log = accumulate_target_stats(std::iter::repeat(batch), &mut state, steps, true).map_err(err)?;
    let start = (0.0 - mu).abs();
    let mut out: Vec<f64> = log.snapshots.unwrap_or_default().iter().map(|s| (s[0].mean[0] as f64 - mu).abs()).collect();
    out.extend((1..=steps).map(|k| (1.0 - momentum).powi(k as i32) * start));
    Ok(out)
}

#[wasm_bindgen(js_name = stainPatch)]
pub fn stain_patch_js(center: u32, shift: f64, seed: u32, size: u32) -> Result<Vec<u8>, JsError> {
    stain_patch_rgba(center as usize, shift, seed as u64, size as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = fusedDensities)]
pub fn fused_densities_js(beta: f64, target_mean: f64, target_std: f64, bins: u32, seed: u32) -> Result<Vec<f64>, JsError> {
    fused_densities(beta, target_mean, target_std, bins as usize, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = emaCurve)]
pub fn ema_curve_js(momentum: f64, steps: u32, batch_size: u32, target_mean: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    ema_curve(momentum, steps as usize, batch_size as usize, target_mean, seed as u64).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_is_opaque_rgba() {
        let p = stain_patch_rgba(1, 1.0, 3, 16).unwrap();
        assert_eq!(p.len(), 16 * 16 * 4);
        assert!(p.chunks(4).all(|px| px[3] == 255));
        assert_ne!(p, stain_patch_rgba(1, 0.0, 3, 16).unwrap());
        assert!(stain_patch_rgba(1, -1.0, 3, 16).is_err());
    }

    #[test]
    fn full_fusion_recentres_the_target() {
        let bins = 50;
        let d = fused_densities(1.0, 2.0, 0.5, bins, 1).unwrap();
        let (lo, hi) = DENSITY_RANGE;
        let width = (hi - lo) / bins as f64;
        let mean = |run: &[f64]| run.iter().enumerate().map(|(i, p)| p * width * (lo + (i as f64 + 0.5) * width)).sum::<f64>();
        assert!((mean(&d[bins..2 * bins]) - 2.0).abs() < 0.1);
        assert!(mean(&d[2 * bins..]).abs() < 0.1);
        assert!(mean(&d[..bins]).abs() < 0.1);
    }

    #[test]
    fn ema_stays_under_its_bound() {
        let c = ema_curve(0.1, 20, 16, 1.5, 2).unwrap();
        let (obs, bound) = c.split_at(20);
        for (o, b) in obs.iter().zip(bound) {
            assert!(*o <= b + 1e-5, "{o} > {b}");
        }
        assert!(obs[19] < obs[0]);
    }
}
