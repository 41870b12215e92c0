//! Experiment configuration (TOML). See `docs/config.md` for the schema.

use std::path::{Path, PathBuf};

use ogan_core::gan::{GanConfig, HeadWeights};
use ogan_core::labelnet::LabelPredictorConfig;
use ogan_core::metrics::{EvalSettings, ExtractorTraining};
use ogan_core::nn::AdamConfig;
use ogan_core::textemb::mix64;
use ogan_core::trainer::TrainSchedule;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed. Every section seed left unset is derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Output root, relative to the config file.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub paths: PathsSection,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub gan: GanSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub labelnet: LabelnetSection,
    #[serde(default)]
    pub extractor: ExtractorSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sample: SampleSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub ontology: PathBuf,
    /// GloVe-format text file. Without it a hashed table is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_vectors: Option<PathBuf>,
    /// Dataset directory; defaults to `<out>/data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Defaults to `<out>/extractor/extractor.ckpt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<PathBuf>,
    /// Defaults to `<out>/labelnet/labelnet.ckpt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labelnet: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    /// Dimension of the hashed table (ignored when word vectors are loaded).
    pub hashed_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hashed_seed: Option<u64>,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection { hashed_dim: 50, hashed_seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub num_examples: usize,
    pub resolution: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { num_examples: 3000, resolution: 32, seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanSection {
    pub d_z: usize,
    pub base_channels: usize,
    pub min_channels: usize,
    pub max_resolution: usize,
    pub gp_lambda: f64,
    pub drift: f64,
    pub head_weights: HeadWeights,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

impl Default for GanSection {
    fn default() -> Self {
        let g = GanConfig::default();
        GanSection {
            d_z: g.d_z,
            base_channels: g.base_channels,
            min_channels: g.min_channels,
            max_resolution: g.max_resolution,
            gp_lambda: g.gp_lambda,
            drift: g.drift,
            head_weights: g.head_weights,
            init_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub images_per_stage: u64,
    pub images_per_fade: u64,
    pub n_critic: u64,
    pub batch_sizes: Vec<usize>,
    /// Train this many stages; unset trains up to `gan.max_resolution`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stages: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = TrainSchedule::default();
        ScheduleSection {
            images_per_stage: s.images_per_stage,
            images_per_fade: s.images_per_fade,
            n_critic: s.n_critic,
            batch_sizes: s.batch_sizes,
            stages: s.stages,
            lr: s.adam.lr,
            beta1: s.adam.beta1,
            beta2: s.adam.beta2,
            adam_eps: s.adam.eps,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    /// In-loop evaluation cadence in steps; needs a trained extractor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics_every: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelnetSection {
    pub hidden: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub holdout: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for LabelnetSection {
    fn default() -> Self {
        let l = LabelPredictorConfig::default();
        LabelnetSection {
            hidden: l.hidden,
            max_len: l.max_len,
            dropout: l.dropout,
            lr: l.lr,
            epochs: l.epochs,
            batch_size: l.batch_size,
            holdout: l.holdout,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub channels: usize,
    pub feature_dim: usize,
    /// Fraction of the dataset kept out of training for the accuracy record.
    pub holdout: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        let x = ExtractorTraining::default();
        ExtractorSection {
            epochs: x.epochs,
            batch_size: x.batch_size,
            lr: x.lr,
            channels: x.channels,
            feature_dim: x.feature_dim,
            holdout: 0.2,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_real: usize,
    pub n_fake: usize,
    pub is_splits: usize,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalSettings::default();
        EvalSection { n_real: e.n_real, n_fake: e.n_fake, is_splits: e.is_splits, batch_size: e.batch_size, seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub count: usize,
    /// Nearest-neighbour upscaling factor of the written grid.
    pub scale: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { count: 8, scale: 4, seed: None }
    }
}

/// Salts for seeds derived from the global one.
mod salt {
    pub const DATASET: u64 = 0xd5;
    pub const EMBEDDING: u64 = 0xe3;
    pub const INIT: u64 = 0x61;
    pub const SCHEDULE: u64 = 0x5c;
    pub const LABELNET: u64 = 0x1b;
    pub const EXTRACTOR: u64 = 0xec;
    pub const EVAL: u64 = 0xea;
    pub const SAMPLE: u64 = 0x5a;
}

pub fn derive_seed(global: u64, explicit: Option<u64>, salt: u64) -> u64 {
    explicit.unwrap_or_else(|| mix64(global ^ mix64(salt)))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dataset_seed(&self) -> u64 {
        derive_seed(self.seed, self.dataset.seed, salt::DATASET)
    }

    pub fn hashed_seed(&self) -> u64 {
        derive_seed(self.seed, self.embedding.hashed_seed, salt::EMBEDDING)
    }

    pub fn sample_seed(&self) -> u64 {
        derive_seed(self.seed, self.sample.seed, salt::SAMPLE)
    }

    /// `num_sub`, `num_main` and `d_e` come from the ontology and word vectors.
    pub fn gan_config(&self, num_sub: usize, num_main: usize, d_e: usize, use_ontology: bool) -> GanConfig {
        let g = &self.gan;
        GanConfig {
            d_z: g.d_z,
            d_e,
            num_sub,
            num_main,
            base_channels: g.base_channels,
            min_channels: g.min_channels,
            max_resolution: g.max_resolution,
            use_ontology,
            gp_lambda: g.gp_lambda,
            head_weights: g.head_weights,
            drift: g.drift,
            init_seed: derive_seed(self.seed, g.init_seed, salt::INIT),
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        let s = &self.schedule;
        TrainSchedule {
            images_per_stage: s.images_per_stage,
            images_per_fade: s.images_per_fade,
            n_critic: s.n_critic,
            batch_sizes: s.batch_sizes.clone(),
            adam: AdamConfig { lr: s.lr, beta1: s.beta1, beta2: s.beta2, eps: s.adam_eps },
            stages: s.stages,
            seed: derive_seed(self.seed, s.seed, salt::SCHEDULE),
        }
    }

    pub fn labelnet_config(&self, d_e: usize, num_labels: usize) -> LabelPredictorConfig {
        let l = &self.labelnet;
        LabelPredictorConfig {
            d_e,
            hidden: l.hidden,
            num_labels,
            max_len: l.max_len,
            dropout: l.dropout,
            lr: l.lr,
            epochs: l.epochs,
            batch_size: l.batch_size,
            holdout: l.holdout,
            seed: derive_seed(self.seed, l.seed, salt::LABELNET),
        }
    }

    pub fn extractor_training(&self) -> ExtractorTraining {
        let x = &self.extractor;
        ExtractorTraining {
            epochs: x.epochs,
            batch_size: x.batch_size,
            lr: x.lr,
            channels: x.channels,
            feature_dim: x.feature_dim,
            seed: derive_seed(self.seed, x.seed, salt::EXTRACTOR),
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        let e = &self.eval;
        EvalSettings {
            n_real: e.n_real,
            n_fake: e.n_fake,
            is_splits: e.is_splits,
            batch_size: e.batch_size,
            seed: derive_seed(self.seed, e.seed, salt::EVAL),
        }
    }
}

/// A parsed config plus where it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Directory relative paths resolve against.
    pub base: PathBuf,
    /// SHA-256 of the file bytes.
    pub sha256: String,
    pub path: PathBuf,
}

impl std::ops::Deref for LoadedConfig {
    type Target = ExperimentConfig;

    fn deref(&self) -> &ExperimentConfig {
        &self.config
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| CliError::Config(format!("config {} is not UTF-8", path.display())))?;
        let config = ExperimentConfig::parse(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedConfig { config, base, sha256: crate::sha256_hex(&bytes), path: path.to_path_buf() })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.out)
    }

    pub fn ontology_path(&self) -> PathBuf {
        self.resolve(&self.config.paths.ontology)
    }

    pub fn word_vectors_path(&self) -> Option<PathBuf> {
        self.config.paths.word_vectors.as_deref().map(|p| self.resolve(p))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        match &self.config.paths.dataset {
            Some(p) => self.resolve(p),
            None => self.out_dir().join("data"),
        }
    }

    pub fn extractor_path(&self) -> PathBuf {
        match &self.config.paths.extractor {
            Some(p) => self.resolve(p),
            None => self.out_dir().join("extractor").join("extractor.ckpt"),
        }
    }

    pub fn labelnet_path(&self) -> PathBuf {
        match &self.config.paths.labelnet {
            Some(p) => self.resolve(p),
            None => self.out_dir().join("labelnet").join("labelnet.ckpt"),
        }
    }
}
