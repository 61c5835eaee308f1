use rand::Rng;
use serde::{Deserialize, Serialize};

use super::color::{hsv_to_rgb, rgb_to_hsv};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Guards `ln(0)` when converting intensities to optical density.
/// Per unit of shift: off-diagonal and diagonal mixing perturbation.
const MIXING_STEP: f64 = 0.03;
/// Per unit of shift: Euclidean norm of the optical-density offset.
const OFFSET_STEP: f64 = 0.3;
const HUE_STEP: f64 = 0.02;
/// Per unit of shift: log saturation and log value scale.
const SAT_STEP: f64 = 0.1;
const VAL_STEP: f64 = 0.08;

pub const OD_GUARD: f64 = 1e-4;

/// Distance of a center's stain from the identity stain; 0 means unchanged.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ShiftMagnitude(f64);

impl ShiftMagnitude {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::config(format!("shift magnitude must be finite and >= 0, got {value}")));
        }
        Ok(ShiftMagnitude(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Colour model of one center: an affine map in optical-density space followed
/// by HSV jitter.
///
/// `I' = clamp(hsv(exp(-(A * -ln(I + d) + b))), 0, 1)`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainTransform {
    pub mixing: [[f64; 3]; 3],
    pub offset: [f64; 3],
    pub hue_shift: f64,
    pub sat_scale: f64,
    pub val_scale: f64,
}

impl Default for StainTransform {
    fn default() -> Self {
        Self::identity()
    }
}

fn det3(a: &[[f64; 3]; 3]) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

impl StainTransform {
    pub fn identity() -> Self {
        StainTransform {
            mixing: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            offset: [0.0; 3],
            hue_shift: 0.0,
            sat_scale: 1.0,
            val_scale: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn has_hsv(&self) -> bool {
        self.hue_shift != 0.0 || self.sat_scale != 1.0 || self.val_scale != 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let d = det3(&self.mixing);
        if d.is_nan() || d.abs() <= 1e-6 {
            return Err(Error::config(format!("stain mixing matrix is singular (det {d:e})")));
        }
        if !(self.sat_scale >= 0.0 && self.val_scale >= 0.0) {
            return Err(Error::config("HSV scales must be >= 0"));
        }
        let finite = self.mixing.iter().flatten().chain(&self.offset).all(|v| v.is_finite())
            && self.hue_shift.is_finite()
            && self.sat_scale.is_finite()
            && self.val_scale.is_finite();
        if !finite {
            return Err(Error::config("stain parameters must be finite"));
        }
        Ok(())
    }

    /// Deterministic stain of center `center` at the given distance from identity.
    ///
    /// Each center owns a fixed direction in parameter space; the magnitude
    /// scales along it. Mixing perturbations stay small enough that the matrix
    /// remains invertible for magnitudes up to 2.5.
    pub fn for_center(center: usize, shift: ShiftMagnitude) -> Self {
        let s = shift.value();
        if s == 0.0 {
            return Self::identity();
        }
        // Directions are random per center; sizes per unit of shift are fixed,
        // so severity grows with `s` the same way on every center.
        let mut rng = seed::rng(center as u64, "stain-direction");
        let mut sign = || if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let signs: Vec<f64> = (0..9).map(|_| sign()).collect();
        let mut mixing = [[0.0; 3]; 3];
        for (i, row) in mixing.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { 1.0 } else { 0.0 } + s * MIXING_STEP * signs[i * 3 + j];
            }
        }
        let weights: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..1.0));
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        let offset = weights.map(|w| s * OFFSET_STEP * w / norm);
        let hue = HUE_STEP * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let sat = SAT_STEP * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let val = -VAL_STEP;
        StainTransform { mixing, offset, hue_shift: s * hue, sat_scale: (s * sat).exp(), val_scale: (s * val).exp() }
    }

    /// Transforms a single RGB pixel (no clamping of the input).
    pub fn apply_pixel(&self, rgb: [f64; 3]) -> [f64; 3] {
        let od = rgb.map(|c| -(c + OD_GUARD).ln());
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let mixed: f64 = (0..3).map(|j| self.mixing[i][j] * od[j]).sum::<f64>() + self.offset[i];
            *o = (-mixed).exp();
        }
        if self.has_hsv() {
            let (h, s, v) = rgb_to_hsv(out[0].clamp(0.0, 1.0), out[1].clamp(0.0, 1.0), out[2].clamp(0.0, 1.0));
            let (r, g, b) = hsv_to_rgb(
                (h + self.hue_shift).rem_euclid(1.0),
                (s * self.sat_scale).clamp(0.0, 1.0),
                (v * self.val_scale).clamp(0.0, 1.0),
            );
            out = [r, g, b];
        }
        out.map(|c| c.clamp(0.0, 1.0))
    }
}

/// Applies a stain to an `[N, 3, H, W]` batch with values in `[0, 1]`.
///
/// The identity transform returns the input unchanged, bit for bit.
pub fn apply_stain(image: &Tensor, transform: &StainTransform) -> Result<Tensor> {
    transform.validate()?;
    let [n, c, h, w] = image.dims4("apply_stain")?;
    if c != 3 {
        return Err(Error::Dimension { op: "apply_stain", lhs: image.shape().to_vec(), rhs: vec![n, 3, h, w] });
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("apply_stain expects pixel values in [0, 1]"));
    }
    if transform.is_identity() {
        return Ok(image.clone());
    }
    let plane = h * w;
    let mut out = image.clone();
    let data = out.data_mut();
    for s in 0..n {
        let base = s * 3 * plane;
        for p in 0..plane {
            let px = [data[base + p] as f64, data[base + plane + p] as f64, data[base + 2 * plane + p] as f64];
            let q = transform.apply_pixel(px);
            for ch in 0..3 {
                data[base + ch * plane + p] = q[ch] as f32;
            }
        }
    }
    Ok(out)
}
