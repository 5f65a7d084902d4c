use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SDR_FILTER_LEN;
use crate::nn::{AttractorMode, EncoderKind, Framing, LossWeights, ModelConfig, ModelKind, ReconDomain, TcnConfig};
use crate::scene::MAX_SPEAKERS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_scenes: usize,
    /// Speaker count (as a string key) to the proportion of scenes.
    pub speaker_counts: BTreeMap<String, f64>,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub master_seed: u64,
    #[serde(default = "default_rir_length")]
    pub rir_length_s: f64,
}

fn default_rir_length() -> f64 {
    0.5
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_scenes: 200,
            speaker_counts: BTreeMap::from([("2".to_string(), 1.0)]),
            sample_rate: 8000,
            duration_s: 2.0,
            master_seed: 0,
            rir_length_s: default_rir_length(),
        }
    }
}

impl DatasetConfig {
    /// Parsed `(K, proportion)` pairs, sorted by K, proportions normalized.
    pub fn speaker_distribution(&self) -> Result<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        for (k, p) in &self.speaker_counts {
            let k: usize = k
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfiguration(format!("speaker count key {k:?} is not an integer")))?;
            if k == 0 || k > MAX_SPEAKERS {
                return Err(Error::InvalidConfiguration(format!("speaker count {k} outside 1..={MAX_SPEAKERS}")));
            }
            if !(p.is_finite() && *p >= 0.0) {
                return Err(Error::InvalidConfiguration(format!("proportion {p} for {k} speakers")));
            }
            out.push((k, *p));
        }
        out.sort_by_key(|e| e.0);
        let total: f64 = out.iter().map(|e| e.1).sum();
        if out.is_empty() || total <= 0.0 {
            return Err(Error::InvalidConfiguration("speaker_counts has no positive proportion".into()));
        }
        Ok(out.into_iter().map(|(k, p)| (k, p / total)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderKind,
    #[serde(flatten)]
    pub tcn: TcnConfig,
    #[serde(rename = "D", default = "twenty")]
    pub d: usize,
    #[serde(rename = "E", default = "twenty")]
    pub e: usize,
    #[serde(default)]
    pub ses_repeats: Option<usize>,
    #[serde(default)]
    pub framing: Option<Framing>,
    #[serde(default)]
    pub num_speakers: Option<usize>,
    #[serde(default)]
    pub presence_percent: Option<f64>,
    #[serde(default)]
    pub recon_domain: ReconDomain,
    #[serde(default)]
    pub kmeans_normalize: bool,
}

fn default_encoder() -> EncoderKind {
    EncoderKind::Stft
}

fn twenty() -> usize {
    20
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Tddan,
            encoder: EncoderKind::Stft,
            tcn: TcnConfig::new(16, 32, 3, 4, 2),
            d: 20,
            e: 20,
            ses_repeats: None,
            framing: None,
            num_speakers: None,
            presence_percent: None,
            recon_domain: ReconDomain::Magnitude,
            kmeans_normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub segment_s: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Defaults depend on the model kind and encoder.
    #[serde(default)]
    pub loss_weights: Option<LossWeights>,
    /// Optional cap on optimizer steps per epoch.
    #[serde(default)]
    pub max_steps_per_epoch: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-3,
            max_epochs: 50,
            patience_epochs: 3,
            segment_s: 4.0,
            batch_size: 16,
            seed: 0,
            loss_weights: None,
            max_steps_per_epoch: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    SiSdr,
    Sdr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub attractor_mode: AttractorMode,
    pub metrics: Vec<MetricKind>,
    pub sdr_filter_len: usize,
    #[serde(default)]
    pub kmeans_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            attractor_mode: AttractorMode::Oracle,
            metrics: vec![MetricKind::SiSdr, MetricKind::Sdr],
            sdr_filter_len: SDR_FILTER_LEN,
            kmeans_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::InvalidConfiguration(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfiguration(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfiguration(m));
        let d = &self.dataset;
        d.speaker_distribution()?;
        if d.num_scenes == 0 {
            return bad("num_scenes must be >= 1".into());
        }
        if d.sample_rate == 0 || !(d.duration_s > 0.0) || !(d.rir_length_s > 0.0) {
            return bad("sample_rate, duration_s and rir_length_s must be positive".into());
        }
        let t = &self.training;
        if t.patience_epochs == 0 {
            return bad("patience_epochs must be >= 1".into());
        }
        if !(t.segment_s > 0.0) {
            return bad(format!("segment_s must be positive, got {}", t.segment_s));
        }
        if !(t.lr > 0.0) || t.batch_size == 0 {
            return bad("lr and batch_size must be positive".into());
        }
        if self.eval.sdr_filter_len == 0 {
            return bad("sdr_filter_len must be >= 1".into());
        }
        self.model_config()?.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = ModelConfig::desk(m.kind, m.encoder);
        cfg.tcn = m.tcn;
        cfg.d = m.d;
        cfg.e = m.e;
        cfg.sample_rate = self.dataset.sample_rate;
        cfg.ses_repeats = m.ses_repeats.unwrap_or((m.tcn.r / 2).max(1));
        if let Some(f) = m.framing {
            cfg.framing = f;
        }
        if let Some(k) = m.num_speakers {
            cfg.num_speakers = k;
        } else if m.kind == ModelKind::Tasnet {
            cfg.num_speakers = self.dataset.speaker_distribution()?.iter().map(|e| e.0).max().unwrap_or(2);
        }
        if let Some(p) = m.presence_percent {
            cfg.presence_percent = p;
        }
        cfg.recon_domain = m.recon_domain;
        cfg.kmeans_normalize = m.kmeans_normalize;
        if let Some(w) = self.training.loss_weights {
            cfg.loss_weights = w;
        }
        cfg.init_seed = self.training.seed;
        Ok(cfg)
    }
}
