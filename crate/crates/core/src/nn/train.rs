use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::{dihedral, hsv_jitter, DIHEDRAL_VIEWS};
use super::network::{Model, NetworkSpec, TaskKind};
use crate::error::{Error, Result};
use crate::harness::metrics::{argmax_rows, balanced_accuracy, mean_dice};
use crate::seed;
use crate::stainsim::CenterDataset;
use crate::tensor::{Graph, Tensor};

/// SGD-with-momentum schedule and augmentation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRecipe {
    pub lr: f64,
    pub epochs: usize,
    pub momentum: f64,
    /// Multiplier applied to the learning rate every `step_size` epochs.
    pub decay: f64,
    pub step_size: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Random dihedral view per sample.
    pub rotation: bool,
    /// Random hue/saturation/value jitter per sample.
    pub hsv: bool,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainRecipe {
    pub fn desk() -> Self {
        TrainRecipe {
            lr: 0.01,
            epochs: 15,
            momentum: 0.9,
            decay: 0.1,
            step_size: 10,
            batch_size: 32,
            weight_decay: 1e-4,
            rotation: true,
            hsv: false,
        }
    }

    /// The long schedule: 55 epochs at 0.001, batch 64, weight decay 0.01.
    pub fn paper() -> Self {
        TrainRecipe {
            lr: 0.001,
            epochs: 55,
            momentum: 0.9,
            decay: 0.1,
            step_size: 30,
            batch_size: 64,
            weight_decay: 0.01,
            rotation: true,
            hsv: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::config(format!("unknown training preset `{name}` (desk | paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch size must be at least 2 for batch statistics, got {}", self.batch_size)));
        }
        if self.step_size == 0 {
            return Err(Error::config("step_size must be >= 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be finite and >= 0"));
        }
        Ok(())
    }

    /// Learning rate during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.step_size) as i32)
    }
}

/// SGD with momentum and L2 weight decay folded into the gradient:
/// `v = mu*v + (g + wd*w); w -= lr*v`.
#[derive(Clone, Debug)]
pub struct Sgdm {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgdm {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgdm { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            p.expect_same_shape(g, "sgdm_step")?;
            for ((w, &d), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let grad = d as f64 + self.weight_decay * *w as f64;
                *vel = self.momentum * *vel + grad;
                *w = (*w as f64 - lr * *vel) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Balanced accuracy (classification) or mean dice (dense prediction) on
    /// the augmented training batches of this epoch.
    pub metric: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Splits a permutation into batches; a trailing batch of one sample joins its predecessor.
pub(crate) fn chunk_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

struct Batch {
    images: Tensor,
    labels: Vec<usize>,
    masks: Option<Tensor>,
}

fn assemble(data: &CenterDataset, idx: &[usize], recipe: &TrainRecipe, rng: &mut impl Rng) -> Result<Batch> {
    let size = data.patch_size();
    let mut images = Vec::with_capacity(idx.len() * 3 * size * size);
    let mut masks = Vec::new();
    for &i in idx {
        let k = if recipe.rotation { rng.gen_range(0..DIHEDRAL_VIEWS) } else { 0 };
        let mut img = dihedral(data.images().sample(i), 3, size, k);
        if recipe.hsv {
            let hue = rng.gen_range(-0.05..0.05);
            let sat = rng.gen_range(0.7..1.3);
            let val = rng.gen_range(0.7..1.3);
            hsv_jitter(&mut img, hue, sat, val);
        }
        images.extend(img);
        if let Some(m) = data.masks() {
            masks.extend(dihedral(m.sample(i), 1, size, k));
        }
    }
    let n = idx.len();
    Ok(Batch {
        images: Tensor::new(vec![n, 3, size, size], images)?,
        labels: data.labels().map(|l| idx.iter().map(|&i| l[i]).collect()).unwrap_or_default(),
        masks: match data.masks() {
            Some(_) => Some(Tensor::new(vec![n, 1, size, size], masks)?),
            None => None,
        },
    })
}

/// Trains a freshly initialized `spec` on `data`. Deterministic given `seed`.
pub fn train(spec: &NetworkSpec, data: &CenterDataset, recipe: &TrainRecipe, seed: u64) -> Result<TrainOutcome> {
    recipe.validate()?;
    spec.validate()?;
    if data.len() < 2 {
        return Err(Error::config("training needs at least two samples"));
    }
    if spec.task != data.task() {
        return Err(Error::config(format!("network is built for {} but the dataset is {}", spec.task, data.task())));
    }
    if spec.task == TaskKind::Classification && data.classes() > spec.classes {
        return Err(Error::config(format!("dataset has {} classes, network head has {}", data.classes(), spec.classes)));
    }
    if recipe.lr == 0.0 {
        log::warn!("learning rate is 0: parameters will not change");
    }
    let mut model = Model::init(spec, seed::derive(seed, "init"))?;
    let pixels = crate::tensor::channel_moments_f64(data.images())?;
    model.set_input_normalization(
        pixels.mean.iter().map(|&m| m as f32).collect(),
        pixels.var.iter().map(|&v| (v.sqrt() as f32).max(1e-3)).collect(),
    )?;
    let mut opt = Sgdm::new(recipe.momentum, recipe.weight_decay);
    let mut log = Vec::with_capacity(recipe.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..recipe.epochs {
        let lr = recipe.lr_at(epoch);
        let mut rng = seed::rng(seed::derive_indexed(seed, "epoch", epoch as u64), "train");
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        let mut dice_sum = 0.0;

        for idx in chunk_batches(&order, recipe.batch_size) {
            let batch = assemble(data, &idx, recipe, &mut rng)?;
            let mut g = Graph::new();
            let (logits, params, moments) = model.forward_graph(&mut g, &batch.images)?;
            let loss = match &batch.masks {
                None => g.softmax_cross_entropy(logits, &batch.labels)?,
                Some(m) => {
                    let bce = g.bce_with_logits(logits, m)?;
                    let probs = g.sigmoid(logits);
                    let dice = g.dice_loss(probs, m)?;
                    g.add(bce, dice)?
                }
            };
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, lr });
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> =
                params.iter().map(|&p| grads.take(p).unwrap_or_else(|| Tensor::zeros(g.value(p).shape().to_vec()))).collect();
            opt.step(&mut model.parameters_mut(), &grads, lr)?;
            for (state, m) in model.bn_layers_mut().iter_mut().zip(&moments) {
                state.update_source(m);
            }

            loss_sum += value * idx.len() as f64;
            seen += idx.len();
            let out = g.value(logits);
            match &batch.masks {
                None => {
                    preds.extend(argmax_rows(out)?);
                    truth.extend(batch.labels);
                }
                Some(m) => dice_sum += mean_dice(&crate::tensor::sigmoid(out), m, 0.5)? * idx.len() as f64,
            }
        }
        let metric = match data.task() {
            TaskKind::Classification => balanced_accuracy(&preds, &truth)?,
            TaskKind::DensePrediction => dice_sum / seen as f64,
        };
        let loss = loss_sum / seen as f64;
        log::debug!("epoch {epoch}: lr {lr} loss {loss:.4} metric {metric:.4}");
        log.push(EpochLog { epoch, lr, loss, metric });
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use crate::stainsim::StainTransform;

    /// Flat-colour patches: class 1 is brighter than class 0.
    fn toy(n: usize) -> CenterDataset {
        let mut rng = seed::rng(3, "toy");
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut px = Vec::new();
        for &l in &labels {
            let base = if l == 1 { 0.7 } else { 0.3 };
            for _ in 0..3 * 64 {
                px.push((base + rng.gen_range(-0.1..0.1)) as f32);
            }
        }
        let images = Tensor::new(vec![n, 3, 8, 8], px).unwrap();
        let names = (0..n).map(|i| i.to_string()).collect();
        CenterDataset::new(0, TaskKind::Classification, 2, images, Some(labels), None, 0, StainTransform::identity(), names)
            .unwrap()
    }

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            input_channels: 3,
            input_size: 8,
            classes: 2,
            task: TaskKind::Classification,
            layers: vec![
                LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::ClassifierHead { classes: 2 },
            ],
        }
    }

    fn quick() -> TrainRecipe {
        TrainRecipe { epochs: 8, batch_size: 8, lr: 0.05, ..TrainRecipe::desk() }
    }

    #[test]
    fn separable_toy_is_learned() {
        let out = train(&tiny_spec(), &toy(64), &quick(), 1).unwrap();
        let last = out.log.last().unwrap();
        assert!(last.metric > 0.95, "{:?}", out.log);
        assert!(last.loss < out.log[0].loss);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let recipe = TrainRecipe { lr: 0.0, ..quick() };
        let out = train(&tiny_spec(), &toy(16), &recipe, 5).unwrap();
        let init = Model::init(&tiny_spec(), seed::derive(5, "init")).unwrap();
        assert_eq!(out.model.parameters(), init.parameters());
        assert_ne!(out.model.input_normalization().1, init.input_normalization().1);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = train(&tiny_spec(), &toy(32), &quick(), 9).unwrap();
        let b = train(&tiny_spec(), &toy(32), &quick(), 9).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn weight_decay_alone_shrinks_by_rule() {
        let (lr, wd) = (0.1, 0.01);
        let mut opt = Sgdm::new(0.9, wd);
        let mut w = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let zero = Tensor::zeros(vec![3]);
        let w0: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
        opt.step(&mut [&mut w], std::slice::from_ref(&zero), lr).unwrap();
        for (a, b) in w.data().iter().zip(&w0) {
            assert!((*a as f64 - b * (1.0 - lr * wd)).abs() < 1e-7);
        }
        // second step carries momentum: v2 = mu*v1 + wd*w1
        let w1: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
        opt.step(&mut [&mut w], &[zero], lr).unwrap();
        for ((a, b0), b1) in w.data().iter().zip(&w0).zip(&w1) {
            let v2 = 0.9 * wd * b0 + wd * b1;
            assert!((*a as f64 - (b1 - lr * v2)).abs() < 1e-7);
        }
    }

    #[test]
    fn recipe_validation_and_schedule() {
        assert!(TrainRecipe { batch_size: 1, ..TrainRecipe::desk() }.validate().is_err());
        assert!(TrainRecipe { decay: 0.0, ..TrainRecipe::desk() }.validate().is_err());
        assert!(TrainRecipe { lr: -1.0, ..TrainRecipe::desk() }.validate().is_err());
        let r = TrainRecipe::desk();
        assert_eq!(r.lr_at(9), 0.01);
        assert!((r.lr_at(10) - 0.001).abs() < 1e-15);
        assert_eq!(TrainRecipe::paper().epochs, 55);
    }

    #[test]
    fn leftover_singleton_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = chunk_batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
    }
}
