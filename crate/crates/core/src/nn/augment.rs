//! Geometric and colour augmentations shared by training and test-time averaging.

use crate::stainsim::color::{hsv_to_rgb, rgb_to_hsv};

/// Number of distinct dihedral views of a square patch.
pub const DIHEDRAL_VIEWS: usize = 8;

/// Source pixel for output `(y, x)` under dihedral view `k` (rotations `k % 4`,
/// mirrored for `k >= 4`). View 0 is the identity.
fn source_coord(y: usize, x: usize, n: usize, k: usize) -> (usize, usize) {
    let (mut y, mut x) = (y, x);
    for _ in 0..k % 4 {
        (y, x) = (x, n - 1 - y);
    }
    if k >= 4 {
        x = n - 1 - x;
    }
    (y, x)
}

/// Applies dihedral view `k` to one `[C, N, N]` sample.
pub fn dihedral(sample: &[f32], channels: usize, size: usize, k: usize) -> Vec<f32> {
    if k.is_multiple_of(DIHEDRAL_VIEWS) {
        return sample.to_vec();
    }
    let plane = size * size;
    let mut out = vec![0.0; sample.len()];
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let (sy, sx) = source_coord(y, x, size, k % DIHEDRAL_VIEWS);
                out[c * plane + y * size + x] = sample[c * plane + sy * size + sx];
            }
        }
    }
    out
}

/// Inverse of [`dihedral`] for the same `k`.
pub fn dihedral_inverse(sample: &[f32], channels: usize, size: usize, k: usize) -> Vec<f32> {
    if k.is_multiple_of(DIHEDRAL_VIEWS) {
        return sample.to_vec();
    }
    let plane = size * size;
    let mut out = vec![0.0; sample.len()];
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let (sy, sx) = source_coord(y, x, size, k % DIHEDRAL_VIEWS);
                out[c * plane + sy * size + sx] = sample[c * plane + y * size + x];
            }
        }
    }
    out
}

/// HSV jitter on an RGB `[3, H, W]` sample with values in `[0, 1]`.
pub fn hsv_jitter(sample: &mut [f32], hue_shift: f64, sat_scale: f64, val_scale: f64) {
    let plane = sample.len() / 3;
    for i in 0..plane {
        let (h, s, v) = rgb_to_hsv(sample[i] as f64, sample[plane + i] as f64, sample[2 * plane + i] as f64);
        let h = (h + hue_shift).rem_euclid(1.0);
        let s = (s * sat_scale).clamp(0.0, 1.0);
        let v = (v * val_scale).clamp(0.0, 1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        sample[i] = r as f32;
        sample[plane + i] = g as f32;
        sample[2 * plane + i] = b as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_are_bijective_and_invertible() {
        let n = 5;
        let s: Vec<f32> = (0..2 * n * n).map(|i| i as f32).collect();
        assert_eq!(dihedral(&s, 2, n, 0), s);
        let mut seen = std::collections::HashSet::new();
        for k in 0..DIHEDRAL_VIEWS {
            let v = dihedral(&s, 2, n, k);
            let mut sorted = v.clone();
            sorted.sort_by(f32::total_cmp);
            assert_eq!(sorted, s, "view {k} must permute pixels");
            assert_eq!(dihedral_inverse(&v, 2, n, k), s);
            seen.insert(v.iter().map(|&x| x as i32).collect::<Vec<_>>());
        }
        assert_eq!(seen.len(), DIHEDRAL_VIEWS);
    }

    #[test]
    fn neutral_jitter_keeps_colours() {
        let mut s = vec![0.2, 0.9, 0.5, 0.4, 0.1, 0.5];
        let orig = s.clone();
        hsv_jitter(&mut s, 0.0, 1.0, 1.0);
        for (a, b) in s.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
