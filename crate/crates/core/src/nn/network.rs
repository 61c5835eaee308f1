use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::batch_norm::BatchNormState;
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{
    conv2d, global_avg_pool, matmul, max_pool2d, relu, sigmoid, softmax_rows, upsample_bilinear, ChannelMoments, Graph, NodeId,
    Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification,
    DensePrediction,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::DensePrediction => "dense-prediction",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "dense-prediction" | "segmentation" => Ok(TaskKind::DensePrediction),
            _ => Err(Error::config(format!("unknown task `{s}` (expected classification | dense-prediction)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    /// Bias-free convolution; the following BN layer supplies the shift.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        out_features: usize,
    },
    BatchNorm,
    Relu,
    MaxPool,
    GlobalAvgPool,
    /// Dense layer with bias producing class logits.
    ClassifierHead {
        classes: usize,
    },
    /// 1x1 convolution with bias to a single logit map, bilinearly upsampled.
    MaskHead {
        upsample: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub classes: usize,
    pub task: TaskKind,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Activation {
    Map { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl NetworkSpec {
    /// Three conv-BN-ReLU blocks (16/32/64 channels, max-pool between),
    /// global average pooling and a dense head.
    pub fn reference_classifier(classes: usize, input_size: usize) -> Self {
        let conv = |out_channels| LayerSpec::Conv { out_channels, kernel: 3, stride: 1, padding: 1 };
        NetworkSpec {
            input_channels: 3,
            input_size,
            classes,
            task: TaskKind::Classification,
            layers: vec![
                conv(16),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                conv(32),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                conv(64),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::ClassifierHead { classes },
            ],
        }
    }

    /// Same three blocks with a single pooling stage and a 1x1 mask head
    /// upsampled back to the input resolution.
    pub fn reference_segmenter(input_size: usize) -> Self {
        let conv = |out_channels| LayerSpec::Conv { out_channels, kernel: 3, stride: 1, padding: 1 };
        NetworkSpec {
            input_channels: 3,
            input_size,
            classes: 2,
            task: TaskKind::DensePrediction,
            layers: vec![
                conv(16),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                conv(32),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                conv(64),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaskHead { upsample: 2 },
            ],
        }
    }

    pub fn reference(task: TaskKind, classes: usize, input_size: usize) -> Self {
        match task {
            TaskKind::Classification => Self::reference_classifier(classes, input_size),
            TaskKind::DensePrediction => Self::reference_segmenter(input_size),
        }
    }

    /// Checks layer ordering and shape compatibility; returns each layer's input.
    fn trace(&self) -> Result<Vec<Activation>> {
        let bad = |i: usize, msg: String| Error::config(format!("layer {i}: {msg}"));
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::config("input channels and size must be >= 1"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        let mut act = Activation::Map { c: self.input_channels, h: self.input_size, w: self.input_size };
        let mut inputs = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(act);
            let needs_bn = matches!(layer, LayerSpec::Conv { .. } | LayerSpec::Dense { .. });
            if needs_bn && self.layers.get(i + 1) != Some(&LayerSpec::BatchNorm) {
                return Err(bad(i, "conv and dense layers must be followed by a BN layer".into()));
            }
            if *layer == LayerSpec::BatchNorm
                && !matches!(i.checked_sub(1).map(|p| &self.layers[p]), Some(LayerSpec::Conv { .. } | LayerSpec::Dense { .. }))
            {
                return Err(bad(i, "BN must directly follow a conv or dense layer".into()));
            }
            let is_head = matches!(layer, LayerSpec::ClassifierHead { .. } | LayerSpec::MaskHead { .. });
            if is_head != (i == last) {
                return Err(bad(i, "exactly one head, as the final layer".into()));
            }
            act = match (*layer, act) {
                (LayerSpec::Conv { out_channels, kernel, stride, padding }, Activation::Map { h, w, .. }) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad(i, "conv extents must be >= 1".into()));
                    }
                    let out = |len: usize| {
                        let p = len + 2 * padding;
                        (p >= kernel && (p - kernel).is_multiple_of(stride)).then(|| (p - kernel) / stride + 1)
                    };
                    match (out(h), out(w)) {
                        (Some(h), Some(w)) => Activation::Map { c: out_channels, h, w },
                        _ => return Err(bad(i, "conv output size is not integral".into())),
                    }
                }
                (LayerSpec::Dense { out_features }, Activation::Flat { .. }) if out_features > 0 => {
                    Activation::Flat { d: out_features }
                }
                (LayerSpec::BatchNorm | LayerSpec::Relu, a) => a,
                (LayerSpec::MaxPool, Activation::Map { c, h, w }) if h % 2 == 0 && w % 2 == 0 => {
                    Activation::Map { c, h: h / 2, w: w / 2 }
                }
                (LayerSpec::GlobalAvgPool, Activation::Map { c, .. }) => Activation::Flat { d: c },
                (LayerSpec::ClassifierHead { classes }, Activation::Flat { .. }) => {
                    if self.task != TaskKind::Classification || classes != self.classes {
                        return Err(bad(i, "classifier head must match task and class count".into()));
                    }
                    Activation::Flat { d: classes }
                }
                (LayerSpec::MaskHead { upsample }, Activation::Map { h, w, .. }) => {
                    if self.task != TaskKind::DensePrediction {
                        return Err(bad(i, "mask head requires a dense-prediction task".into()));
                    }
                    if h * upsample != self.input_size || w * upsample != self.input_size {
                        return Err(bad(i, "mask head must upsample to the input size".into()));
                    }
                    Activation::Map { c: 1, h: h * upsample, w: w * upsample }
                }
                (l, a) => return Err(bad(i, format!("{l:?} cannot consume {a:?}"))),
            };
        }
        if self.task == TaskKind::Classification && self.classes < 2 {
            return Err(Error::config("classification needs at least 2 classes"));
        }
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        self.trace().map(|_| ())
    }

    pub fn bn_count(&self) -> usize {
        self.layers.iter().filter(|l| **l == LayerSpec::BatchNorm).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
enum LayerWeights {
    Stateless,
    Conv(Tensor),
    Dense(Tensor),
    BatchNorm(usize),
    Head { weight: Tensor, bias: Tensor },
}

/// Network parameters plus one [`BatchNormState`] per BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: NetworkSpec,
    weights: Vec<LayerWeights>,
    bn: Vec<BatchNormState>,
    /// Fixed per-channel input standardization `(x - mean) / std`, set once
    /// from the training set.
    input_mean: Vec<f32>,
    input_std: Vec<f32>,
}

fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
}

fn standardize(x: &Tensor, mean: &[f32], std: &[f32]) -> Result<Tensor> {
    super::batch_norm::map_channels(x, "standardize_input", |c, v| (v - mean[c] as f64) / std[c] as f64)
}

fn run_layers(
    spec: &NetworkSpec,
    weights: &[LayerWeights],
    input_norm: (&[f32], &[f32]),
    x: &Tensor,
    norm: &mut dyn FnMut(usize, &Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let [_, c, h, w] = x.dims4("model_forward")?;
    if c != spec.input_channels || h != spec.input_size || w != spec.input_size {
        return Err(Error::Dimension {
            op: "model_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![0, spec.input_channels, spec.input_size, spec.input_size],
        });
    }
    let mut cur = standardize(x, input_norm.0, input_norm.1)?;
    for (layer, wts) in spec.layers.iter().zip(weights) {
        cur = match (layer, wts) {
            (LayerSpec::Conv { stride, padding, .. }, LayerWeights::Conv(k)) => conv2d(&cur, k, *stride, *padding)?,
            (LayerSpec::Dense { .. }, LayerWeights::Dense(wm)) => matmul(&cur, wm)?,
            (LayerSpec::BatchNorm, LayerWeights::BatchNorm(i)) => norm(*i, &cur)?,
            (LayerSpec::Relu, _) => relu(&cur),
            (LayerSpec::MaxPool, _) => max_pool2d(&cur)?.0,
            (LayerSpec::GlobalAvgPool, _) => global_avg_pool(&cur)?,
            (LayerSpec::ClassifierHead { .. }, LayerWeights::Head { weight, bias }) => {
                let z = matmul(&cur, weight)?;
                add_channel_bias(&z, bias)?
            }
            (LayerSpec::MaskHead { upsample }, LayerWeights::Head { weight, bias }) => {
                let z = conv2d(&cur, weight, 1, 0)?;
                upsample_bilinear(&add_channel_bias(&z, bias)?, *upsample)?
            }
            (l, _) => return Err(Error::contract(format!("weights do not match layer {l:?}"))),
        };
    }
    Ok(cur)
}

fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let b = bias.data();
    super::batch_norm::map_channels(x, "add_bias", |c, v| v + b[c] as f64)
}

impl Model {
    /// He-initialized weights, fresh BN layers.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let inputs = spec.trace()?;
        let mut rng = seed::rng(seed, "model-init");
        let mut weights = Vec::with_capacity(spec.layers.len());
        let mut bn = Vec::new();
        for (layer, input) in spec.layers.iter().zip(&inputs) {
            let w = match (layer, *input) {
                (LayerSpec::Conv { out_channels, kernel, .. }, Activation::Map { c, .. }) => {
                    LayerWeights::Conv(he_normal(vec![*out_channels, c, *kernel, *kernel], c * kernel * kernel, &mut rng))
                }
                (LayerSpec::Dense { out_features }, Activation::Flat { d }) => {
                    LayerWeights::Dense(he_normal(vec![d, *out_features], d, &mut rng))
                }
                (LayerSpec::BatchNorm, Activation::Map { c, .. } | Activation::Flat { d: c }) => {
                    bn.push(BatchNormState::new(c));
                    LayerWeights::BatchNorm(bn.len() - 1)
                }
                (LayerSpec::ClassifierHead { classes }, Activation::Flat { d }) => LayerWeights::Head {
                    weight: he_normal(vec![d, *classes], 2 * d, &mut rng),
                    bias: Tensor::zeros(vec![*classes]),
                },
                (LayerSpec::MaskHead { .. }, Activation::Map { c, .. }) => {
                    LayerWeights::Head { weight: he_normal(vec![1, c, 1, 1], 2 * c, &mut rng), bias: Tensor::zeros(vec![1]) }
                }
                _ => LayerWeights::Stateless,
            };
            weights.push(w);
        }
        Ok(Model {
            spec: spec.clone(),
            weights,
            bn,
            input_mean: vec![0.0; spec.input_channels],
            input_std: vec![1.0; spec.input_channels],
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn task(&self) -> TaskKind {
        self.spec.task
    }

    /// Per-channel `(mean, std)` subtracted from and divided into every input.
    pub fn input_normalization(&self) -> (&[f32], &[f32]) {
        (&self.input_mean, &self.input_std)
    }

    pub(crate) fn set_input_normalization(&mut self, mean: Vec<f32>, std: Vec<f32>) -> Result<()> {
        let c = self.spec.input_channels;
        if mean.len() != c || std.len() != c {
            return Err(Error::Shape {
                shape: vec![mean.len(), std.len()],
                reason: format!("input normalization needs {c} channels"),
            });
        }
        if std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("input normalization must be finite with std > 0"));
        }
        self.input_mean = mean;
        self.input_std = std;
        Ok(())
    }

    pub fn bn_layers(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn bn_layers_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    /// Forward pass where each BN layer is replaced by `norm(bn_index, input, state)`.
    pub fn forward_with<F>(&self, x: &Tensor, mut norm: F) -> Result<Tensor>
    where
        F: FnMut(usize, &Tensor, &BatchNormState) -> Result<Tensor>,
    {
        let bn = &self.bn;
        let input = (&self.input_mean[..], &self.input_std[..]);
        run_layers(&self.spec, &self.weights, input, x, &mut |i, t| norm(i, t, &bn[i]))
    }

    /// As [`Model::forward_with`], with mutable access to the BN states.
    pub fn forward_with_mut<F>(&mut self, x: &Tensor, mut norm: F) -> Result<Tensor>
    where
        F: FnMut(usize, &Tensor, &mut BatchNormState) -> Result<Tensor>,
    {
        let Model { spec, weights, bn, input_mean, input_std } = self;
        run_layers(spec, weights, (input_mean, input_std), x, &mut |i, t| norm(i, t, &mut bn[i]))
    }

    /// Plain evaluation with the source running statistics.
    pub fn forward_source(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, |_, t, s| s.forward_source(t))
    }

    /// Class probabilities `[N, K]` or foreground probabilities `[N, 1, H, W]`.
    pub fn probabilities(&self, logits: &Tensor) -> Result<Tensor> {
        match self.spec.task {
            TaskKind::Classification => softmax_rows(logits),
            TaskKind::DensePrediction => Ok(sigmoid(logits)),
        }
    }

    /// Learnable tensors in a fixed order: conv/dense weights, BN `gamma`/`alpha`,
    /// head weight and bias.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for w in &self.weights {
            match w {
                LayerWeights::Conv(t) | LayerWeights::Dense(t) => out.push(t),
                LayerWeights::BatchNorm(i) => {
                    out.push(self.bn[*i].gamma());
                    out.push(self.bn[*i].alpha());
                }
                LayerWeights::Head { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerWeights::Stateless => {}
            }
        }
        out
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let mut bn: Vec<Option<&mut BatchNormState>> = self.bn.iter_mut().map(Some).collect();
        for w in &mut self.weights {
            match w {
                LayerWeights::Conv(t) | LayerWeights::Dense(t) => out.push(t),
                LayerWeights::BatchNorm(i) => {
                    let (g, a) = bn[*i].take().expect("BN layer referenced once").affine_mut();
                    out.push(g);
                    out.push(a);
                }
                LayerWeights::Head { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerWeights::Stateless => {}
            }
        }
        out
    }

    /// Records a training-mode forward pass on `graph`.
    ///
    /// Returns the logits node, the parameter nodes (same order as
    /// [`Model::parameters`]) and the batch moments seen by each BN layer.
    pub(crate) fn forward_graph(&self, graph: &mut Graph, x: &Tensor) -> Result<(NodeId, Vec<NodeId>, Vec<ChannelMoments>)> {
        let mut cur = graph.constant(standardize(x, &self.input_mean, &self.input_std)?);
        let mut params = Vec::new();
        let mut moments = Vec::with_capacity(self.bn.len());
        for (layer, w) in self.spec.layers.iter().zip(&self.weights) {
            cur = match (layer, w) {
                (LayerSpec::Conv { stride, padding, .. }, LayerWeights::Conv(k)) => {
                    let k = graph.param(k.clone());
                    params.push(k);
                    graph.conv2d(cur, k, *stride, *padding)?
                }
                (LayerSpec::Dense { .. }, LayerWeights::Dense(wm)) => {
                    let wm = graph.param(wm.clone());
                    params.push(wm);
                    graph.matmul(cur, wm)?
                }
                (LayerSpec::BatchNorm, LayerWeights::BatchNorm(i)) => {
                    let s = &self.bn[*i];
                    let g = graph.param(s.gamma().clone());
                    let a = graph.param(s.alpha().clone());
                    params.push(g);
                    params.push(a);
                    let (out, m) = graph.batch_norm(cur, g, a, s.epsilon())?;
                    moments.push(m);
                    out
                }
                (LayerSpec::Relu, _) => graph.relu(cur),
                (LayerSpec::MaxPool, _) => graph.max_pool2d(cur)?,
                (LayerSpec::GlobalAvgPool, _) => graph.global_avg_pool(cur)?,
                (LayerSpec::ClassifierHead { .. }, LayerWeights::Head { weight, bias }) => {
                    let wn = graph.param(weight.clone());
                    let bn = graph.param(bias.clone());
                    params.push(wn);
                    params.push(bn);
                    let z = graph.matmul(cur, wn)?;
                    graph.add_bias(z, bn)?
                }
                (LayerSpec::MaskHead { upsample }, LayerWeights::Head { weight, bias }) => {
                    let wn = graph.param(weight.clone());
                    let bn = graph.param(bias.clone());
                    params.push(wn);
                    params.push(bn);
                    let z = graph.conv2d(cur, wn, 1, 0)?;
                    let z = graph.add_bias(z, bn)?;
                    graph.upsample_bilinear(z, *upsample)?
                }
                (l, _) => return Err(Error::contract(format!("weights do not match layer {l:?}"))),
            };
        }
        Ok((cur, params, moments))
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.set_meta("kind", "checkpoint");
        a.set_meta("network", serde_json::to_string(&self.spec)?);
        a.push("input.mean", Tensor::vector(self.input_mean.clone()))?;
        a.push("input.std", Tensor::vector(self.input_std.clone()))?;
        for (li, w) in self.weights.iter().enumerate() {
            match w {
                LayerWeights::Conv(t) => a.push(format!("layer{li:02}.kernel"), t.clone())?,
                LayerWeights::Dense(t) => a.push(format!("layer{li:02}.weight"), t.clone())?,
                LayerWeights::Head { weight, bias } => {
                    a.push(format!("layer{li:02}.weight"), weight.clone())?;
                    a.push(format!("layer{li:02}.bias"), bias.clone())?;
                }
                LayerWeights::BatchNorm(i) => {
                    let s = &self.bn[*i];
                    let p = format!("layer{li:02}.bn");
                    a.push(format!("{p}.gamma"), s.gamma().clone())?;
                    a.push(format!("{p}.alpha"), s.alpha().clone())?;
                    a.push(format!("{p}.source_mean"), s.source_mean().clone())?;
                    a.push(format!("{p}.source_var"), s.source_var().clone())?;
                    a.push(format!("{p}.target_mean"), s.target_mean().clone())?;
                    a.push(format!("{p}.target_var"), s.target_var().clone())?;
                    a.set_meta(format!("{p}.epsilon"), s.epsilon());
                    a.set_meta(format!("{p}.momentum"), s.momentum());
                    a.set_meta(format!("{p}.target_steps"), s.target_steps());
                }
                LayerWeights::Stateless => {}
            }
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta("kind")? != "checkpoint" {
            return Err(Error::Format("archive is not a checkpoint".into()));
        }
        let spec: NetworkSpec = serde_json::from_str(a.meta("network")?)?;
        let mut model = Model::init(&spec, 0)?;
        let take = |name: String, like: &Tensor| -> Result<Tensor> {
            let t = a.get(&name)?;
            if t.shape() != like.shape() {
                return Err(Error::Format(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), like.shape())));
            }
            Ok(t.clone())
        };
        model
            .set_input_normalization(a.get("input.mean")?.data().to_vec(), a.get("input.std")?.data().to_vec())
            .map_err(|e| Error::Format(e.to_string()))?;
        let Model { weights, bn, .. } = &mut model;
        for (li, w) in weights.iter_mut().enumerate() {
            match w {
                LayerWeights::Conv(t) => *t = take(format!("layer{li:02}.kernel"), t)?,
                LayerWeights::Dense(t) => *t = take(format!("layer{li:02}.weight"), t)?,
                LayerWeights::Head { weight, bias } => {
                    *weight = take(format!("layer{li:02}.weight"), weight)?;
                    *bias = take(format!("layer{li:02}.bias"), bias)?;
                }
                LayerWeights::BatchNorm(i) => {
                    let s = &mut bn[*i];
                    let p = format!("layer{li:02}.bn");
                    let mut parts = s.to_parts();
                    parts.gamma = take(format!("{p}.gamma"), s.gamma())?.into_data();
                    parts.alpha = take(format!("{p}.alpha"), s.alpha())?.into_data();
                    parts.source_mean = take(format!("{p}.source_mean"), s.source_mean())?.into_data();
                    parts.source_var = take(format!("{p}.source_var"), s.source_var())?.into_data();
                    parts.target_mean = take(format!("{p}.target_mean"), s.target_mean())?.into_data();
                    parts.target_var = take(format!("{p}.target_var"), s.target_var())?.into_data();
                    parts.epsilon = a.meta_parse(&format!("{p}.epsilon"))?;
                    parts.momentum = a.meta_parse(&format!("{p}.momentum"))?;
                    parts.target_steps = a.meta_parse(&format!("{p}.target_steps"))?;
                    *s = BatchNormState::from_parts(parts)?;
                }
                LayerWeights::Stateless => {}
            }
        }
        Ok(model)
    }
}
