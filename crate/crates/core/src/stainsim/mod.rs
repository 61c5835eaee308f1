//! Deterministic multi-center patch benchmark with per-center stain transforms.

pub mod color;
mod disk;
#[cfg(feature = "images")]
mod load;
mod transform;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use disk::{read_center, read_center_images, write_center, CenterImages, MANIFEST_HEADER};
#[cfg(feature = "images")]
pub use load::load_image_directory;
pub use transform::{apply_stain, ShiftMagnitude, StainTransform, OD_GUARD};

use crate::error::{Error, Result};
use crate::nn::TaskKind;
use crate::seed;
use crate::tensor::Tensor;

/// Patches, annotations and provenance of one center.
///
/// Classification sets carry `labels`, dense-prediction sets carry `masks`.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterDataset {
    center: usize,
    task: TaskKind,
    classes: usize,
    images: Tensor,
    labels: Option<Vec<usize>>,
    masks: Option<Tensor>,
    seed: u64,
    transform: StainTransform,
    names: Vec<String>,
}

impl CenterDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        center: usize,
        task: TaskKind,
        classes: usize,
        images: Tensor,
        labels: Option<Vec<usize>>,
        masks: Option<Tensor>,
        seed: u64,
        transform: StainTransform,
        names: Vec<String>,
    ) -> Result<Self> {
        let [n, c, h, w] = images.dims4("center_dataset")?;
        if c != 3 {
            return Err(Error::Shape { shape: images.shape().to_vec(), reason: "images must have 3 channels".into() });
        }
        if names.len() != n {
            return Err(Error::config(format!("{} names for {n} images", names.len())));
        }
        if classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::config(format!("{} labels for {n} images", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&v| v >= classes) {
                return Err(Error::config(format!("label {bad} outside {classes} classes")));
            }
        }
        if let Some(m) = &masks {
            if m.shape() != [n, 1, h, w] {
                return Err(Error::Dimension { op: "center_dataset", lhs: m.shape().to_vec(), rhs: vec![n, 1, h, w] });
            }
        }
        match task {
            TaskKind::Classification if labels.is_none() => return Err(Error::config("classification dataset without labels")),
            TaskKind::DensePrediction if masks.is_none() => return Err(Error::config("dense-prediction dataset without masks")),
            _ => {}
        }
        Ok(CenterDataset { center, task, classes, images, labels, masks, seed, transform, names })
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn masks(&self) -> Option<&Tensor> {
        self.masks.as_ref()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn transform(&self) -> &StainTransform {
        &self.transform
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn patch_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Per-class sample counts (classification only).
    pub fn class_counts(&self) -> Option<Vec<usize>> {
        let labels = self.labels.as_ref()?;
        let mut counts = vec![0; self.classes];
        for &l in labels {
            counts[l] += 1;
        }
        Some(counts)
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(CenterDataset {
            images: self.images.select(indices)?,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            masks: self.masks.as_ref().map(|m| m.select(indices)).transpose()?,
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            ..self.clone()
        })
    }

    /// The pixel data alone; this is all the adaptation path ever receives.
    pub fn into_images(self) -> Tensor {
        self.images
    }
}

/// Knobs of the procedural content.
const BACKGROUND: [f64; 3] = [0.93, 0.74, 0.86];
const NUCLEUS: [f64; 3] = [0.36, 0.22, 0.56];
const SPARSE_BLOBS: (usize, usize) = (2, 4);
const DENSE_BLOBS: (usize, usize) = (6, 9);
const MIN_FOREGROUND: f64 = 0.01;

struct Content {
    pixels: Vec<f32>,
    mask: Vec<f32>,
}

fn blob_range(class: usize, size: usize) -> (usize, usize) {
    let area = (size * size) as f64 / 1024.0;
    let scale = |v: usize| ((v as f64 * area).round() as usize).max(1);
    let (lo, hi) = if class == 0 { SPARSE_BLOBS } else { DENSE_BLOBS };
    let (lo, hi) = (scale(lo), scale(hi));
    if class == 0 {
        (lo, hi)
    } else {
        // keep the classes separable at small patch sizes
        let floor = scale(SPARSE_BLOBS.1) + 1;
        (lo.max(floor), hi.max(floor))
    }
}

/// One `[3, S, S]` patch of pinkish textured tissue with `class`-dependent nucleus density.
fn render(class: usize, size: usize, key: u64) -> Content {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(key);
    let plane = size * size;
    let noise = Normal::new(0.0, 0.02).expect("valid normal");

    // low-frequency texture from a handful of random plane waves
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq: f64 = rng.gen_range(0.08..0.35);
            (freq * theta.cos(), freq * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.01..0.04))
        })
        .collect();
    let tint: [f64; 3] = [rng.gen_range(-0.03..0.03), rng.gen_range(-0.04..0.04), rng.gen_range(-0.03..0.03)];
    let brightness: f64 = rng.gen_range(0.92..1.04);

    let mut pixels = vec![0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let t: f64 = waves.iter().map(|&(kx, ky, ph, amp)| amp * (kx * x as f64 + ky * y as f64 + ph).sin()).sum();
            for c in 0..3 {
                let v = (BACKGROUND[c] + tint[c] + t) * brightness + noise.sample(&mut rng);
                pixels[c * plane + y * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    let (lo, hi) = blob_range(class, size);
    let mut count = rng.gen_range(lo..=hi);
    let mut mask = vec![0f32; plane];
    let margin = 2.0;
    let mut placed = 0;
    while placed < count {
        let cy: f64 = rng.gen_range(margin..size as f64 - margin);
        let cx: f64 = rng.gen_range(margin..size as f64 - margin);
        let a: f64 = rng.gen_range(2.0..3.2);
        let b: f64 = rng.gen_range(2.0..3.2);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let shade: f64 = rng.gen_range(0.85..1.15);
        let (st, ct) = theta.sin_cos();
        let reach = a.max(b) + 1.5;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(size - 1);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = (dx * ct + dy * st) / a;
                let v = (-dx * st + dy * ct) / b;
                let r = (u * u + v * v).sqrt();
                // soft rim: fully stained inside, fading over ~one pixel
                let weight = (1.0 - (r - 0.85) / 0.3).clamp(0.0, 1.0);
                if weight <= 0.0 {
                    continue;
                }
                let p = y * size + x;
                if r < 1.0 {
                    mask[p] = 1.0;
                }
                for c in 0..3 {
                    let cur = pixels[c * plane + p] as f64;
                    let target = (NUCLEUS[c] * shade + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    pixels[c * plane + p] = (cur + weight * (target - cur)) as f32;
                }
            }
        }
        placed += 1;
        if placed == count {
            let fg = mask.iter().filter(|&&m| m > 0.0).count() as f64 / plane as f64;
            if fg < MIN_FOREGROUND {
                count += 1;
            }
        }
    }
    Content { pixels, mask }
}

/// Seeded permutation of an exactly balanced label vector.
fn balanced_labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut seed::rng(seed, "labels"));
    labels
}

/// Generates `samples` patches for `center`.
///
/// Content (morphology, labels, masks) depends only on `seed`; the stain of
/// `center` at magnitude `shift` is applied last.
pub fn generate_center(
    center: usize,
    samples: usize,
    task: TaskKind,
    shift: ShiftMagnitude,
    seed: u64,
    patch_size: usize,
) -> Result<CenterDataset> {
    if samples == 0 {
        return Err(Error::config("a center needs at least one sample"));
    }
    if patch_size < 16 || !patch_size.is_multiple_of(4) {
        return Err(Error::config(format!("patch size must be a multiple of 4 and at least 16, got {patch_size}")));
    }
    let classes = 2;
    let labels = balanced_labels(samples, classes, seed);
    let contents: Vec<Content> =
        crate::par_map(0..samples, |i| render(labels[i], patch_size, seed::derive_indexed(seed, "content", i as u64)));
    let plane = patch_size * patch_size;
    let mut pixels = Vec::with_capacity(samples * 3 * plane);
    let mut mask = Vec::with_capacity(samples * plane);
    for c in contents {
        pixels.extend(c.pixels);
        mask.extend(c.mask);
    }
    let raw = Tensor::new(vec![samples, 3, patch_size, patch_size], pixels)?;
    let transform = StainTransform::for_center(center, shift);
    let images = apply_stain(&raw, &transform)?;
    let names = (0..samples).map(|i| format!("s{i:05}")).collect();
    let (labels, masks) = match task {
        TaskKind::Classification => (Some(labels), None),
        TaskKind::DensePrediction => (None, Some(Tensor::new(vec![samples, 1, patch_size, patch_size], mask)?)),
    };
    CenterDataset::new(center, task, classes, images, labels, masks, seed, transform, names)
}

/// Layout of a multi-center benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub shifts: Vec<f64>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub patch_size: usize,
    pub task: TaskKind,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            shifts: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            train_samples: 2000,
            test_samples: 500,
            patch_size: 32,
            task: TaskKind::Classification,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterSplit {
    pub train: CenterDataset,
    pub test: CenterDataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub centers: Vec<CenterSplit>,
}

/// Generates every center of `spec`. Each center and split gets its own content
/// seed, so centers differ in morphology as well as in stain.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    if spec.shifts.is_empty() {
        return Err(Error::config("benchmark needs at least one center"));
    }
    let centers = spec
        .shifts
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let shift = ShiftMagnitude::new(s)?;
            let train_seed = seed::derive_indexed(spec.seed, "center-train", k as u64);
            let test_seed = seed::derive_indexed(spec.seed, "center-test", k as u64);
            Ok(CenterSplit {
                train: generate_center(k, spec.train_samples, spec.task, shift, train_seed, spec.patch_size)?,
                test: generate_center(k, spec.test_samples, spec.task, shift, test_seed, spec.patch_size)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark { spec: spec.clone(), centers })
}

/// Per-channel `(mean, std)` of the pixel distribution, as `[m_r, m_g, m_b, s_r, s_g, s_b]`.
pub fn color_summary(images: &Tensor) -> Result<[f64; 6]> {
    let m = crate::tensor::channel_moments_f64(images)?;
    if m.mean.len() != 3 {
        return Err(Error::Shape { shape: images.shape().to_vec(), reason: "expected RGB images".into() });
    }
    Ok([m.mean[0], m.mean[1], m.mean[2], m.var[0].sqrt(), m.var[1].sqrt(), m.var[2].sqrt()])
}

/// Euclidean distance between the colour summaries of two datasets.
pub fn chromatic_distance(a: &CenterDataset, b: &CenterDataset) -> Result<f64> {
    let sa = color_summary(a.images())?;
    let sb = color_summary(b.images())?;
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shift(v: f64) -> ShiftMagnitude {
        ShiftMagnitude::new(v).unwrap()
    }

    #[test]
    fn zero_shift_centers_share_pixels() {
        let a = generate_center(0, 12, TaskKind::Classification, shift(0.0), 7, 32).unwrap();
        let b = generate_center(3, 12, TaskKind::Classification, shift(0.0), 7, 32).unwrap();
        assert_eq!(a.images(), b.images());
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn labels_are_balanced_for_large_sets() {
        let d = generate_center(0, 2000, TaskKind::Classification, shift(0.0), 1, 16).unwrap();
        let counts = d.class_counts().unwrap();
        let frac = counts[0] as f64 / 2000.0;
        assert!((frac - 0.5).abs() <= 0.02, "{counts:?}");
    }

    #[test]
    fn every_mask_has_foreground() {
        let d = generate_center(1, 200, TaskKind::DensePrediction, shift(1.0), 3, 32).unwrap();
        let m = d.masks().unwrap();
        for i in 0..d.len() {
            let fg = m.sample(i).iter().filter(|&&v| v > 0.5).count() as f64 / 1024.0;
            assert!(fg >= 0.01, "sample {i}: {fg}");
        }
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn stain_preserves_morphology() {
        let a = generate_center(1, 20, TaskKind::DensePrediction, shift(0.0), 9, 32).unwrap();
        let b = generate_center(4, 20, TaskKind::DensePrediction, shift(2.0), 9, 32).unwrap();
        assert_eq!(a.masks(), b.masks());
        assert_ne!(a.images(), b.images());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_center(2, 30, TaskKind::Classification, shift(1.5), 11, 32).unwrap();
        let b = generate_center(2, 30, TaskKind::Classification, shift(1.5), 11, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chromatic_distance_properties() {
        let src = generate_center(3, 64, TaskKind::Classification, shift(0.0), 5, 32).unwrap();
        assert_eq!(chromatic_distance(&src, &src).unwrap(), 0.0);
        let mut last = 0.0;
        for s in [0.25, 0.5, 1.0, 2.0] {
            let t = generate_center(3, 64, TaskKind::Classification, shift(s), 5, 32).unwrap();
            let d = chromatic_distance(&src, &t).unwrap();
            assert_eq!(d, chromatic_distance(&t, &src).unwrap());
            assert!(d > last, "shift {s}: {d} <= {last}");
            last = d;
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_center(0, 0, TaskKind::Classification, shift(0.0), 0, 32).is_err());
        assert!(generate_center(0, 4, TaskKind::Classification, shift(0.0), 0, 8).is_err());
    }

    #[test]
    fn subset_keeps_annotations_aligned() {
        let d = generate_center(0, 10, TaskKind::Classification, shift(0.5), 2, 16).unwrap();
        let s = d.subset(&[3, 1]).unwrap();
        assert_eq!(s.labels().unwrap(), &[d.labels().unwrap()[3], d.labels().unwrap()[1]]);
        assert_eq!(s.images().sample(0), d.images().sample(3));
        assert_eq!(s.names(), &["s00003".to_string(), "s00001".to_string()]);
    }
}
