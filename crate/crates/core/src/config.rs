//! Flat `key = value` experiment configuration (TOML syntax).
//!
//! Every key is optional and falls back to [`ExperimentConfig::default`];
//! unknown keys are rejected so typos do not silently run the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codebook::{CodeConfig, FullBitsConvention};
use crate::composer::{ComposerKind, ComposerSpec};
use crate::guidance::{GuidanceConfig, GuidanceMode, MaskGranularity};
use crate::tasks::MarkerCorpusSpec;
use crate::trainer::{OptimizerKind, ScheduleKind, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    #[default]
    Reconstruction,
    Classification,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    #[default]
    Kd,
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComposerName {
    #[default]
    LinearSum,
    LinearHidden,
    Lstm,
}

/// Where a KD layer's codes come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodeSource {
    /// Learned end to end.
    #[default]
    Learned,
    /// Uniform random digits, frozen.
    Random,
    /// Learned on reconstruction of the pre-trained embeddings, then frozen.
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // data
    pub task: TaskKind,
    /// Text embedding file; the synthetic generator is used when unset.
    pub embeddings: Option<PathBuf>,
    pub vocab: usize,
    pub dim: usize,
    pub clusters: usize,
    pub cluster_spread: f64,
    pub data_seed: u64,
    pub validation_fraction: f64,
    pub docs: usize,
    pub classes: usize,
    pub markers_per_class: usize,
    pub doc_len: usize,
    pub markers_per_doc: usize,

    // embedding layer
    pub layer: LayerKind,
    pub k: usize,
    pub dims: usize,
    pub code_dim: usize,
    pub lossy: bool,
    pub composer: ComposerName,
    pub hidden_width: usize,
    pub literal_gates: bool,
    pub codes: CodeSource,
    pub full_bits: FullBitsConvention,

    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub tau_schedule: ScheduleKind,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_decay_fraction: f64,
    pub entropy_weight: f64,
    pub entropy_ramp: f64,
    pub straight_through: bool,
    pub clip_norm: f64,
    pub logit_init_std: f64,
    pub seed: u64,

    // guidance
    pub guidance: GuidanceMode,
    pub odg_p: f64,
    pub odg_lambda: f64,
    pub odg_lambda_ramp: f64,
    pub odg_mask: MaskGranularity,
    pub pdg_alpha: f64,
    pub pdg_beta: f64,
    pub pdg_autoencoder: bool,
    pub pdg_encoder_width: usize,

    // baselines
    pub pq_subspaces: usize,
    pub pq_centroids: usize,
    pub scalar_bits: u32,
    pub low_rank: usize,
    pub low_rank_steps: usize,

    // evaluation
    pub nn_k: usize,
    pub probe_trials: usize,
    /// Record wall time in reports (makes them non-reproducible).
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let guidance = GuidanceConfig::default();
        let corpus = MarkerCorpusSpec::default();
        Self {
            task: TaskKind::Reconstruction,
            embeddings: None,
            vocab: 1000,
            dim: 32,
            clusters: 20,
            cluster_spread: 0.3,
            data_seed: 0,
            validation_fraction: 0.1,
            docs: corpus.docs,
            classes: corpus.classes,
            markers_per_class: corpus.markers_per_class,
            doc_len: corpus.doc_len,
            markers_per_doc: corpus.markers_per_doc,
            layer: LayerKind::Kd,
            k: 16,
            dims: 4,
            code_dim: 32,
            lossy: false,
            composer: ComposerName::LinearSum,
            hidden_width: 300,
            literal_gates: false,
            codes: CodeSource::Learned,
            full_bits: FullBitsConvention::Matrix,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            optimizer: train.optimizer,
            tau_schedule: train.tau_schedule,
            tau_init: train.tau_init,
            tau_min: train.tau_min,
            tau_decay_fraction: train.tau_decay_fraction,
            entropy_weight: train.entropy_weight,
            entropy_ramp: train.entropy_ramp,
            straight_through: train.straight_through,
            clip_norm: train.clip_norm,
            logit_init_std: train.logit_init_std,
            seed: train.seed,
            guidance: guidance.mode,
            odg_p: guidance.p,
            odg_lambda: guidance.lambda,
            odg_lambda_ramp: guidance.lambda_ramp,
            odg_mask: guidance.mask,
            pdg_alpha: guidance.alpha,
            pdg_beta: guidance.beta,
            pdg_autoencoder: guidance.autoencoder,
            pdg_encoder_width: guidance.encoder_width,
            pq_subspaces: 4,
            pq_centroids: 16,
            scalar_bits: 8,
            low_rank: 4,
            low_rank_steps: 6000,
            nn_k: 10,
            probe_trials: 200,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative data paths are taken from the config's directory.
        if let (Some(p), Some(dir)) = (&cfg.embeddings, path.parent()) {
            if p.is_relative() {
                cfg.embeddings = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies one `key=value` override using the file syntax for the value.
    /// Bare words that are not valid TOML are taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_all(&[(key, value)])
    }

    /// Applies several overrides, validating only the final configuration.
    /// Nothing changes on error.
    pub fn set_all(&mut self, pairs: &[(&str, &str)]) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        for &(key, value) in pairs {
            let parsed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        let next: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab < 2 || self.dim == 0 {
            return bad("vocab must be at least 2 and dim positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if self.clusters == 0 || self.cluster_spread < 0.0 {
            return bad("clusters must be positive and cluster_spread non-negative");
        }
        if self.nn_k == 0 {
            return bad("nn_k must be positive");
        }
        if self.layer == LayerKind::Kd {
            self.code_config(self.vocab).validate()?;
            self.composer_spec(self.dim).validate()?;
        }
        self.train_config().validate()
    }

    pub fn composer_kind(&self) -> ComposerKind {
        match self.composer {
            ComposerName::LinearSum => ComposerKind::LinearSum,
            ComposerName::LinearHidden => ComposerKind::LinearHidden { width: self.hidden_width },
            ComposerName::Lstm => ComposerKind::Lstm { literal_gates: self.literal_gates },
        }
    }

    pub fn composer_spec(&self, out_dim: usize) -> ComposerSpec {
        ComposerSpec { kind: self.composer_kind(), k: self.k, dims: self.dims, code_dim: self.code_dim, out_dim }
    }

    pub fn code_config(&self, vocab: usize) -> CodeConfig {
        CodeConfig { vocab, k: self.k, dims: self.dims, code_dim: self.code_dim, lossy: self.lossy }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            mode: self.guidance,
            p: self.odg_p,
            lambda: self.odg_lambda,
            lambda_ramp: self.odg_lambda_ramp,
            mask: self.odg_mask,
            alpha: self.pdg_alpha,
            beta: self.pdg_beta,
            autoencoder: self.pdg_autoencoder,
            encoder_width: self.pdg_encoder_width,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            tau_schedule: self.tau_schedule,
            tau_init: self.tau_init,
            tau_min: self.tau_min,
            tau_decay_fraction: self.tau_decay_fraction,
            entropy_weight: self.entropy_weight,
            entropy_ramp: self.entropy_ramp,
            straight_through: self.straight_through,
            clip_norm: self.clip_norm,
            logit_init_std: self.logit_init_std,
            guidance: self.guidance_config(),
            seed: self.seed,
        }
    }

    pub fn corpus_spec(&self) -> MarkerCorpusSpec {
        MarkerCorpusSpec {
            vocab: self.vocab,
            docs: self.docs,
            classes: self.classes,
            markers_per_class: self.markers_per_class,
            doc_len: self.doc_len,
            markers_per_doc: self.markers_per_doc,
        }
    }
}
