//! Run configuration: TOML file mirroring the data, model, and training knobs.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::EncodeConfig;
use crate::encoders::{EncoderDims, Pooling};
use crate::error::{Error, Result};
use crate::fusion::{FusionForm, FusionStrategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// Corpus files: sentences, descriptions, types, relations.
    Text,
    /// Precomputed view vectors (synthetic experiments).
    Features,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingConfig {
    /// Relation-aware attention pooling.
    Rat,
    /// Mean over non-pad positions (attention-free ablation).
    Mean,
}

impl From<PoolingConfig> for Pooling {
    fn from(p: PoolingConfig) -> Pooling {
        match p {
            PoolingConfig::Rat => Pooling::RelationAttention,
            PoolingConfig::Mean => Pooling::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceQuery {
    /// Score each candidate relation with its own bag-attention query.
    PerRelation,
    /// One forward pass with the global mean-relation query.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub descriptions: Option<PathBuf>,
    pub types: Option<PathBuf>,
    pub relations: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    pub max_sentence_len: usize,
    pub max_types: usize,
    pub position_clip: usize,
    pub bag_cap: usize,
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let enc = EncodeConfig::default();
        DataConfig {
            kind: DataKind::Text,
            train: None,
            test: None,
            descriptions: None,
            types: None,
            relations: None,
            word_vectors: None,
            max_sentence_len: enc.max_len,
            max_types: enc.max_types,
            position_clip: enc.position_clip,
            bag_cap: enc.bag_cap,
            min_count: 1,
        }
    }
}

impl DataConfig {
    pub fn encode_config(&self, seed: u64) -> EncodeConfig {
        EncodeConfig {
            max_len: self.max_sentence_len,
            max_types: self.max_types,
            position_clip: self.position_clip,
            bag_cap: self.bag_cap,
            seed,
        }
    }

    pub fn corpus_paths(&self, which: &str) -> Result<crate::data::CorpusPaths> {
        let pick = |name: &str, p: &Option<PathBuf>| -> Result<PathBuf> {
            p.clone()
                .ok_or_else(|| Error::Config(format!("data.{name} path is required")))
        };
        let sentences = match which {
            "train" => pick("train", &self.train)?,
            "test" => pick("test", &self.test)?,
            other => return Err(Error::Config(format!("unknown split '{other}'"))),
        };
        Ok(crate::data::CorpusPaths {
            sentences,
            descriptions: pick("descriptions", &self.descriptions)?,
            types: pick("types", &self.types)?,
            relations: pick("relations", &self.relations)?,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_word: usize,
    pub d_position: usize,
    pub d_type: usize,
    pub d_intact: usize,
    pub heads: usize,
    pub conv_layers: usize,
    pub conv_width: usize,
    pub fusion: FusionStrategy,
    pub fusion_form: FusionForm,
    pub ridge: f64,
    pub pooling: PoolingConfig,
    pub share_description_encoder: bool,
    pub inference_query: InferenceQuery,
    /// Which views participate: sentences, descriptions, types.
    pub views: [bool; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            d_word: 50,
            d_position: 14,
            d_type: 16,
            d_intact: 400,
            heads: 8,
            conv_layers: 4,
            conv_width: 7,
            fusion: FusionStrategy::Insrl,
            fusion_form: FusionForm::Learnable,
            ridge: 1e-3,
            pooling: PoolingConfig::Rat,
            share_description_encoder: false,
            inference_query: InferenceQuery::PerRelation,
            views: [true, true, true],
        }
    }
}

impl ModelConfig {
    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            d_model: self.d_model,
            d_word: self.d_word,
            d_position: self.d_position,
            d_type: self.d_type,
            heads: self.heads,
            conv_layers: self.conv_layers,
            conv_width: self.conv_width,
        }
    }

    pub fn present_views(&self) -> Vec<usize> {
        (0..3).filter(|&j| self.views[j]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_dims().validate()?;
        if self.d_intact <= self.d_model {
            return Err(Error::Config(format!(
                "d_intact ({}) must exceed d_model ({})",
                self.d_intact, self.d_model
            )));
        }
        if self.ridge <= 0.0 && self.fusion_form == FusionForm::Closed {
            return Err(Error::Config("closed-form fusion needs ridge > 0".into()));
        }
        if self.views.iter().all(|v| !v) {
            return Err(Error::Config("at least one view must be enabled".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Seeds used by multi-run protocols are `seed, seed+1, …, seed+runs−1`.
    pub runs: usize,
    pub precision: Precision,
    /// Weight of the auxiliary reconstruction term; 0 trains the classifier
    /// loss alone.
    pub lambda_reconstruction: f64,
    /// Global gradient-norm clip; absent by default.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 200,
            epochs: 80,
            seed: 0,
            runs: 5,
            precision: Precision::F64,
            lambda_reconstruction: 0.0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.runs == 0 {
            return Err(Error::Config(
                "batch_size, epochs, and runs must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.lambda_reconstruction < 0.0 {
            return Err(Error::Config("lambda_reconstruction must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_with_overrides() {
        let text = r#"
            [data]
            kind = "features"
            max_sentence_len = 24

            [model]
            d_model = 32
            d_intact = 48
            heads = 4
            fusion = "mv-att"
            fusion_form = "closed"

            [train]
            epochs = 3
            precision = "f32"
        "#;
        let cfg: Config = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.data.kind, DataKind::Features);
        assert_eq!(cfg.model.fusion, FusionStrategy::MvAtt);
        assert_eq!(cfg.model.fusion_form, FusionForm::Closed);
        assert_eq!(cfg.train.precision, Precision::F32);
        assert_eq!(cfg.train.batch_size, 200); // default survives
    }

    #[test]
    fn intact_dimension_must_exceed_model_dimension() {
        let mut cfg = Config::default();
        cfg.model.d_intact = cfg.model.d_model;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn all_views_disabled_is_rejected() {
        let mut cfg = Config::default();
        cfg.model.views = [false, false, false];
        assert!(cfg.validate().is_err());
    }
}
