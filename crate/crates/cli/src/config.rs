//! The TOML configuration file and its `--section.key value` overrides.

use std::path::Path;

use fusion_core::adapt::{AdaptationPolicy, DEFAULT_PRIOR};
use fusion_core::harness::SWEEP_BETA;
use fusion_core::stainsim::BenchmarkSpec;
use fusion_core::{TaskKind, TrainRecipe};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// `(section.key, raw value)` pairs in command-line order.
pub type Overrides = Vec<(String, String)>;

pub const SECTIONS: [&str; 5] = ["dataset", "model", "train", "adapt", "experiment"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Shift magnitude per center; center 0 is conventionally the source.
    pub shift_profile: Vec<f64>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub patch_size: usize,
    pub task: TaskKind,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let b = BenchmarkSpec::default();
        DatasetSection {
            shift_profile: b.shifts,
            train_samples: b.train_samples,
            test_samples: b.test_samples,
            patch_size: b.patch_size,
            task: b.task,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Only `reference` exists: three conv-BN-ReLU blocks.
    pub network: String,
    /// Momentum of every running-statistics update.
    pub bn_momentum: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { network: "reference".into(), bn_momentum: fusion_core::nn::DEFAULT_MOMENTUM }
    }
}

/// A named preset with optional per-key overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub preset: String,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub momentum: Option<f64>,
    pub decay: Option<f64>,
    pub step_size: Option<usize>,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    pub rotation: Option<bool>,
    pub hsv: Option<bool>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            preset: "desk".into(),
            lr: None,
            epochs: None,
            momentum: None,
            decay: None,
            step_size: None,
            batch_size: None,
            weight_decay: None,
            rotation: None,
            hsv: None,
        }
    }
}

impl TrainSection {
    pub fn recipe(&self) -> Result<TrainRecipe, CliError> {
        let mut r = TrainRecipe::preset(&self.preset).map_err(|e| CliError::usage("--train.preset", e))?;
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { r.$f = v; } )* };
        }
        over!(lr, epochs, momentum, decay, step_size, batch_size, weight_decay, rotation, hsv);
        r.validate().map_err(|e| CliError::usage("train", e))?;
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    /// source-running | per-batch | target-running | fused | source-prior
    pub policy: String,
    pub beta: f64,
    pub n_prior: usize,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let p = fusion_core::ProtocolParams::default();
        AdaptSection {
            policy: "fused".into(),
            beta: SWEEP_BETA,
            n_prior: DEFAULT_PRIOR,
            steps: p.steps,
            batch_size: p.batch_size,
        }
    }
}

impl AdaptSection {
    pub fn policy(&self) -> Result<AdaptationPolicy, CliError> {
        AdaptationPolicy::parse(&self.policy, Some(self.beta), Some(self.n_prior)).map_err(|e| CliError::usage("--policy", e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seed: u64,
    pub source: usize,
    /// Empty means every center except the source.
    pub targets: Vec<usize>,
    pub repetitions: usize,
    pub sweep_steps: Vec<usize>,
    pub sweep_batch_sizes: Vec<usize>,
    pub histogram_bins: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seed: 0,
            source: 0,
            targets: Vec::new(),
            repetitions: 3,
            sweep_steps: vec![1, 5, 10, 20, 50],
            sweep_batch_sizes: vec![8, 16, 32],
            histogram_bins: fusion_core::harness::diagnose::DEFAULT_BINS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub adapt: AdaptSection,
    pub experiment: ExperimentSection,
}

impl Config {
    /// Reads `path` (if any), then applies `--section.key value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut doc: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("--config {}: {e}", p.display())))?;
                text.parse().map_err(|e: toml::de::Error| CliError::Usage(format!("--config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            let flag = format!("--{key}");
            let (section, field) =
                key.split_once('.').ok_or_else(|| CliError::Usage(format!("{flag}: expected --section.key")))?;
            if !SECTIONS.contains(&section) {
                return Err(CliError::Usage(format!("{flag}: unknown section `{section}`")));
            }
            let table = doc
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| CliError::Usage(format!("{flag}: `{section}` is not a section")))?;
            table.insert(field.to_string(), parse_value(raw));
        }
        let cfg: Config = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("configuration: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.model.network != "reference" {
            return Err(CliError::Usage(format!("--model.network: unknown network `{}` (only `reference`)", self.model.network)));
        }
        if !(self.model.bn_momentum > 0.0 && self.model.bn_momentum <= 1.0) {
            return Err(CliError::Usage("--model.bn_momentum must lie in (0, 1]".into()));
        }
        self.train.recipe()?;
        self.adapt.policy()?;
        if self.dataset.shift_profile.is_empty() {
            return Err(CliError::Usage("--dataset.shift_profile: at least one center".into()));
        }
        for &s in &self.dataset.shift_profile {
            fusion_core::stainsim::ShiftMagnitude::new(s).map_err(|e| CliError::usage("--dataset.shift_profile", e))?;
        }
        Ok(())
    }

    pub fn benchmark(&self, seed: u64) -> BenchmarkSpec {
        BenchmarkSpec {
            shifts: self.dataset.shift_profile.clone(),
            train_samples: self.dataset.train_samples,
            test_samples: self.dataset.test_samples,
            patch_size: self.dataset.patch_size,
            task: self.dataset.task,
            seed,
        }
    }

    /// Every key with its effective value, as TOML.
    pub fn normalized(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses an override as a TOML literal (number, bool, array), else a string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Splits `--section.key value` and `--section.key=value` pairs out of `args`.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--").filter(|b| b.contains('.') && !b.starts_with('.')) else {
            rest.push(a);
            continue;
        };
        let section = body.split(['.', '=']).next().unwrap_or_default();
        if !SECTIONS.contains(&section) {
            rest.push(a);
            continue;
        }
        match body.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| CliError::Usage(format!("--{body}: missing value")))?;
                overrides.push((body.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}
