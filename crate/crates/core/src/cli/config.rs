//! Run configuration: presets, an optional TOML file, then flag overrides.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{SamplingPolicy, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::{LossWeights, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Small,
    Full,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Small => ModelConfig::small(),
            Preset::Full => ModelConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Echonet,
    Synthetic,
}

/// The TOML document. Every table is a partial overlay on the defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub dataset: Option<DatasetKind>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: Option<Split>,
    pub model: Option<toml::Table>,
    pub optimizer: Option<toml::Table>,
    pub sampling: Option<toml::Table>,
    pub loss: Option<toml::Table>,
    pub synthetic: Option<toml::Table>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Values given on the command line; `None` leaves the file or default.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: Option<Split>,
    pub synthetic: bool,
    pub disable_e2cbd: bool,
    pub disable_e2fa: bool,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub f_sel: Option<usize>,
    pub stride: Option<usize>,
    pub fixed_start: bool,
}

/// Fully resolved settings, echoed into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: Option<Split>,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub sampling: SamplingPolicy,
    pub loss: LossWeights,
    pub synthetic: SyntheticSpec,
    /// Whether any architecture setting was given explicitly.
    #[serde(skip)]
    pub model_overridden: bool,
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&toml::Table>) -> Result<T> {
    let Some(patch) = patch else {
        return serde_json::from_value(serde_json::to_value(base).map_err(invalid)?)
            .map_err(invalid);
    };
    let mut value = serde_json::to_value(base).map_err(invalid)?;
    let patch = serde_json::to_value(patch).map_err(invalid)?;
    if let (Some(obj), Some(p)) = (value.as_object_mut(), patch.as_object()) {
        for (k, v) in p {
            if !obj.contains_key(k) {
                return Err(Error::InvalidConfig(format!("unknown setting {k:?}")));
            }
            obj.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(value).map_err(invalid)
}

fn invalid(e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(e.to_string())
}

/// Synthetic data matched to a model: frame size, chord count and a video
/// long enough for a few distinct window starts.
pub fn synthetic_for(model: &ModelConfig, sampling: &SamplingPolicy, seed: u64) -> SyntheticSpec {
    let span = sampling.span();
    SyntheticSpec {
        seed,
        size: model.height,
        landmarks: model.landmarks,
        period: (span + 1).div_ceil(2) * 2,
        frames: span + 9,
        ..SyntheticSpec::default()
    }
}

impl RunConfig {
    pub fn resolve(command: &str, file: &FileConfig, o: &Overrides) -> Result<Self> {
        let seed = o.seed.or(file.seed).unwrap_or(0);
        let preset = o.preset.or(file.preset).unwrap_or(Preset::Full);
        let mut model_overridden = o.preset.is_some() || file.preset.is_some();

        let mut model = overlay(&preset.model(), file.model.as_ref())?;
        model_overridden |= file.model.is_some();
        model.seed = seed;
        if o.disable_e2cbd {
            model.disable_e2cbd = true;
            model_overridden = true;
        }
        if o.disable_e2fa {
            model.disable_e2fa = true;
            model_overridden = true;
        }

        let mut optimizer = overlay(&OptimizerConfig::default(), file.optimizer.as_ref())?;
        if let Some(v) = o.epochs {
            optimizer.epochs = v;
        }
        if let Some(v) = o.batch_size {
            optimizer.batch_size = v;
        }
        if let Some(v) = o.lr {
            optimizer.learning_rate = v;
        }
        if let Some(v) = o.weight_decay {
            optimizer.weight_decay = v;
        }

        let base_sampling = SamplingPolicy {
            f_sel: model.frames,
            train_random_start: true,
            ..SamplingPolicy::default()
        };
        let mut sampling = overlay(&base_sampling, file.sampling.as_ref())?;
        if let Some(v) = o.f_sel {
            sampling.f_sel = v;
            model.frames = v;
            model_overridden = true;
        }
        if let Some(v) = o.stride {
            sampling.stride = v;
        }
        if o.fixed_start {
            sampling.train_random_start = false;
        }
        if sampling.f_sel != model.frames {
            return Err(Error::InvalidConfig(format!(
                "sampling.f_sel {} differs from model.frames {}",
                sampling.f_sel, model.frames
            )));
        }

        let loss = overlay(&LossWeights::default(), file.loss.as_ref())?;
        let mut synthetic = overlay(
            &synthetic_for(&model, &sampling, seed),
            file.synthetic.as_ref(),
        )?;
        if file
            .synthetic
            .as_ref()
            .is_none_or(|t| !t.contains_key("seed"))
        {
            synthetic.seed = seed;
        }

        let dataset = if o.synthetic {
            DatasetKind::Synthetic
        } else {
            file.dataset.unwrap_or(DatasetKind::Echonet)
        };
        let cfg = Self {
            command: command.to_string(),
            seed,
            dataset,
            data_dir: o.data_dir.clone().or_else(|| file.data_dir.clone()),
            checkpoint: o.checkpoint.clone().or_else(|| file.checkpoint.clone()),
            out: o.out.clone().or_else(|| file.out.clone()),
            split: o.split.or(file.split),
            model,
            optimizer,
            sampling,
            loss,
            synthetic,
            model_overridden,
        };
        cfg.model.validate()?;
        cfg.optimizer.validate()?;
        cfg.sampling.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# config not serializable: {e}\n"))
    }
}
