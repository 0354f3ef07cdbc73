//! Run configuration shared by training, checkpoints and the CLI.
//!
//! The serialised form mirrors the config file sections (`[data]`, `[model]`,
//! `[pointer]`, `[train]`); typed model configs are derived from it.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::VocabPolicy;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Lstm,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub min_count: Option<u64>,
    pub top_k: Option<usize>,
}

impl DataSection {
    pub fn policy(&self) -> Result<VocabPolicy> {
        match (self.min_count, self.top_k) {
            (Some(_), Some(_)) => Err(Error::Config(
                "min_count and top_k are mutually exclusive".into(),
            )),
            (_, Some(k)) => Ok(VocabPolicy::TopK(k)),
            (Some(m), None) => Ok(VocabPolicy::MinCount(m)),
            (None, None) => Ok(VocabPolicy::MinCount(1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub positional_embedding: bool,
    /// Transformer position table size; defaults to the chunk length.
    pub max_positions: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone: BackboneKind::Lstm,
            layers: 2,
            hidden: 650,
            heads: 8,
            ffn_mult: 4,
            dropout: 0.5,
            positional_embedding: true,
            max_positions: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointerSection {
    pub enabled: bool,
    /// History length `L`; defaults to the chunk length.
    pub window: Option<usize>,
    pub memory_augmentation: Switch,
    /// Words whose history slots are never valid (e.g. `</s>`, `<unk>`).
    pub exclude: Vec<String>,
}

impl Default for PointerSection {
    fn default() -> Self {
        PointerSection {
            enabled: true,
            window: None,
            memory_augmentation: Switch::On,
            exclude: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Defaults to 1.0 for LSTMs and 0.1 for Transformers.
    pub lr0: Option<f64>,
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_streams: usize,
    pub chunk_len: usize,
    pub precision: u32,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr0: None,
            lr_decay: 0.5,
            clip_norm: 5.0,
            epochs: 40,
            batch_streams: 20,
            chunk_len: 100,
            precision: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub pointer: PointerSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data: DataSection::default(),
            model: ModelSection::default(),
            pointer: PointerSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmConfig {
    pub layers: usize,
    pub hidden: usize,
    pub embed: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub use_positional_embedding: bool,
    pub max_positions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BackboneConfig {
    Lstm(LstmConfig),
    Transformer(TransformerConfig),
}

impl BackboneConfig {
    pub fn hidden(&self) -> usize {
        match self {
            BackboneConfig::Lstm(c) => c.hidden,
            BackboneConfig::Transformer(c) => c.d_model,
        }
    }

    pub fn dropout(&self) -> f64 {
        match self {
            BackboneConfig::Lstm(c) => c.dropout,
            BackboneConfig::Transformer(c) => c.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_p = |p: f64| {
            if (0.0..1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("dropout {p} outside [0, 1)")))
            }
        };
        match self {
            BackboneConfig::Lstm(c) => {
                if c.layers == 0 || c.hidden == 0 {
                    return Err(Error::Config("LSTM needs layers and hidden > 0".into()));
                }
                if c.embed != c.hidden {
                    return Err(Error::Config(format!(
                        "tied embeddings need embed ({}) == hidden ({})",
                        c.embed, c.hidden
                    )));
                }
                check_p(c.dropout)
            }
            BackboneConfig::Transformer(c) => {
                if c.layers == 0 || c.d_model == 0 || c.heads == 0 || c.ffn_mult == 0 {
                    return Err(Error::Config("Transformer dimensions must be positive".into()));
                }
                if c.d_model % c.heads != 0 {
                    return Err(Error::Config(format!(
                        "d_model {} not divisible by heads {}",
                        c.d_model, c.heads
                    )));
                }
                if c.max_positions == 0 {
                    return Err(Error::Config("max_positions must be positive".into()));
                }
                check_p(c.dropout)
            }
        }
    }
}

/// Pointer head settings with the window resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct PointerConfig {
    pub enabled: bool,
    pub window: usize,
    pub memory_augmentation: bool,
    pub exclude: Vec<String>,
}

impl PointerConfig {
    pub fn disabled() -> Self {
        PointerConfig {
            enabled: false,
            window: 0,
            memory_augmentation: false,
            exclude: Vec::new(),
        }
    }

    pub fn with_window(window: usize) -> Self {
        PointerConfig {
            enabled: true,
            window,
            memory_augmentation: true,
            exclude: Vec::new(),
        }
    }

    /// Number of history slots actually appended to the output.
    pub fn slots(&self) -> usize {
        if self.enabled {
            self.window
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub pointer: PointerConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_streams: usize,
    pub chunk_len: usize,
    pub seed: u64,
    pub precision: u32,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.precision != 64 {
            return Err(Error::Config(format!(
                "precision {} unsupported; this build computes in 64-bit",
                self.precision
            )));
        }
        if self.chunk_len == 0 || self.batch_streams == 0 {
            return Err(Error::Config("chunk_len and batch_streams must be positive".into()));
        }
        let in_range = self.lr0 >= 0.0 && self.clip_norm > 0.0 && self.lr_decay > 0.0;
        if !in_range {
            return Err(Error::Config("lr0 >= 0, clip_norm > 0 and lr_decay > 0 required".into()));
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let chunk_len = self.train.chunk_len;
        let backbone = match m.backbone {
            BackboneKind::Lstm => BackboneConfig::Lstm(LstmConfig {
                layers: m.layers,
                hidden: m.hidden,
                embed: m.hidden,
                dropout: m.dropout,
            }),
            BackboneKind::Transformer => BackboneConfig::Transformer(TransformerConfig {
                layers: m.layers,
                d_model: m.hidden,
                heads: m.heads,
                ffn_mult: m.ffn_mult,
                dropout: m.dropout,
                use_positional_embedding: m.positional_embedding,
                max_positions: m.max_positions.unwrap_or(chunk_len),
            }),
        };
        backbone.validate()?;
        let pointer = PointerConfig {
            enabled: self.pointer.enabled,
            window: self.pointer.window.unwrap_or(chunk_len),
            memory_augmentation: self.pointer.memory_augmentation.is_on(),
            exclude: self.pointer.exclude.clone(),
        };
        Ok(ModelConfig { backbone, pointer })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let lr0 = t.lr0.unwrap_or(match self.model.backbone {
            BackboneKind::Lstm => 1.0,
            BackboneKind::Transformer => 0.1,
        });
        let tc = TrainConfig {
            lr0,
            lr_decay: t.lr_decay,
            clip_norm: t.clip_norm,
            epochs: t.epochs,
            batch_streams: t.batch_streams,
            chunk_len: t.chunk_len,
            seed: self.seed,
            precision: t.precision,
        };
        tc.validate()?;
        Ok(tc)
    }
}
