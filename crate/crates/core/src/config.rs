//! Pipeline configuration file: a strict TOML tree binding all module
//! settings together. Unknown keys are rejected so typos fail loudly; the
//! `CVEC_SEED` environment variable overrides the configured seed.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::nets::{CpdConfig, VadConfig};
use crate::pipeline::{DiarizeConfig, SegmentationMode};
use crate::scoring::ScoreConfig;
use crate::segmentation::{MergeRule, SegmenterConfig};
use crate::synth::SyntheticCorpusSpec;
use crate::system::{SystemConfig, SystemKind};
use crate::training::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad config: {0}")]
    Parse(String),
    #[error("unknown system `{0}`")]
    UnknownSystem(String),
    #[error("missing path: {0}")]
    MissingPath(PathBuf),
}

fn default_profile() -> String {
    "tiny".into()
}

fn default_system() -> String {
    "Stacked_sigmoid".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub corpus_dir: PathBuf,
    pub model_dir: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationSection {
    pub mode: Option<String>,
    pub speech_threshold: Option<f64>,
    pub min_nonspeech_s: Option<f64>,
    pub min_segment_s: Option<f64>,
    pub cpd_threshold: Option<f64>,
    pub median_window: Option<usize>,
    pub merge_rule: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub window: Option<usize>,
    pub shift: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub held_out_fraction: Option<f64>,
    pub grad_clip: Option<f64>,
    pub vad_epochs: Option<usize>,
    pub vad_samples: Option<usize>,
    pub vad_lr: Option<f64>,
    pub cpd_epochs: Option<usize>,
    pub cpd_samples: Option<usize>,
    pub cpd_lr: Option<f64>,
    pub cpd_pretrain_chunks: Option<usize>,
    pub cpd_pretrain_epochs: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingSection {
    /// Penalty coefficient μ for all self-attentive structures.
    pub mu: Option<f64>,
    /// λ override for the first-level pooling heads.
    pub lambda: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringSection {
    pub refine_threshold: Option<f64>,
    pub k_max: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringSection {
    pub collar: Option<f64>,
    pub score_overlap: Option<bool>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub speakers: Option<usize>,
    pub recordings: Option<usize>,
    pub speakers_per_recording: Option<usize>,
    pub target_len_s: Option<f64>,
    pub pause_zero_prob: Option<f64>,
    pub template_scale: Option<f64>,
    pub within_sigma: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// "tiny" (quarter widths) or "full" (the documented defaults).
    #[serde(default = "default_profile")]
    pub profile: String,
    /// System selection: TDNN, HORNN, or a combiner name.
    #[serde(default = "default_system")]
    pub system: String,
    pub paths: PathsSection,
    #[serde(default)]
    pub segmentation: SegmentationSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub pooling: PoolingSection,
    #[serde(default)]
    pub clustering: ClusteringSection,
    #[serde(default)]
    pub scoring: ScoringSection,
    #[serde(default)]
    pub synth: Option<SynthSection>,
}

impl PipelineConfig {
    /// Parses the file; `CVEC_SEED` overrides the configured seed.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Ok(seed) = std::env::var("CVEC_SEED") {
            cfg.seed = seed
                .parse()
                .map_err(|_| ConfigError::Parse(format!("CVEC_SEED `{seed}` is not a u64")))?;
        }
        cfg.system_kind()?;
        Ok(cfg)
    }

    pub fn system_kind(&self) -> Result<SystemKind, ConfigError> {
        SystemKind::parse(&self.system)
            .ok_or_else(|| ConfigError::UnknownSystem(self.system.clone()))
    }

    fn full_profile(&self) -> bool {
        self.profile == "full"
    }

    pub fn system_config(&self) -> Result<SystemConfig, ConfigError> {
        let kind = self.system_kind()?;
        let mut cfg = if self.full_profile() {
            SystemConfig::full(kind)
        } else {
            SystemConfig::tiny(kind)
        };
        if let Some(mu) = self.pooling.mu {
            cfg.pool_tdnn.mu = mu;
            cfg.pool_hornn.mu = mu;
            cfg.combiner.mu = mu;
        }
        if let Some(lambda) = &self.pooling.lambda {
            cfg.pool_tdnn.lambda = lambda.clone();
            cfg.pool_hornn.lambda = lambda.clone();
        }
        Ok(cfg)
    }

    pub fn vad_config(&self) -> VadConfig {
        if self.full_profile() {
            VadConfig::full()
        } else {
            VadConfig::tiny()
        }
    }

    pub fn cpd_config(&self) -> CpdConfig {
        if self.full_profile() {
            CpdConfig::full()
        } else {
            CpdConfig::tiny()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        let t = &self.train;
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = t.$field { cfg.$field = v; })*
            };
        }
        take!(
            window, shift, batch_size, lr, epochs, held_out_fraction, grad_clip, vad_epochs,
            vad_samples, vad_lr, cpd_epochs, cpd_samples, cpd_lr, cpd_pretrain_chunks,
            cpd_pretrain_epochs
        );
        cfg
    }

    pub fn segmentation_mode(&self) -> Result<SegmentationMode, ConfigError> {
        match self.segmentation.mode.as_deref().unwrap_or("cpd") {
            "cpd" => Ok(SegmentationMode::Cpd),
            "window" => Ok(SegmentationMode::WindowLevel),
            other => Err(ConfigError::Parse(format!(
                "segmentation.mode `{other}` (want `cpd` or `window`)"
            ))),
        }
    }

    pub fn segmenter_config(&self) -> Result<SegmenterConfig, ConfigError> {
        let mut cfg = SegmenterConfig::default();
        let s = &self.segmentation;
        if let Some(v) = s.speech_threshold {
            cfg.speech_threshold = v;
        }
        if let Some(v) = s.min_nonspeech_s {
            cfg.min_nonspeech_s = v;
        }
        if let Some(v) = s.min_segment_s {
            cfg.min_segment_s = v;
        }
        if let Some(v) = s.cpd_threshold {
            cfg.cpd_threshold = v;
        }
        if let Some(v) = s.median_window {
            cfg.median_window = v;
        }
        if let Some(rule) = s.merge_rule.as_deref() {
            cfg.merge_rule = match rule {
                "shorter" => MergeRule::Shorter,
                "earlier" => MergeRule::Earlier,
                "later" => MergeRule::Later,
                other => {
                    return Err(ConfigError::Parse(format!(
                        "merge_rule `{other}` (want shorter|earlier|later)"
                    )))
                }
            };
        }
        Ok(cfg)
    }

    pub fn diarize_config(&self) -> Result<DiarizeConfig, ConfigError> {
        let train = self.train_config();
        Ok(DiarizeConfig {
            mode: self.segmentation_mode()?,
            segmenter: self.segmenter_config()?,
            window: train.window,
            shift: train.shift,
            refine_threshold: self.clustering.refine_threshold.unwrap_or(0.4),
            k_max: self.clustering.k_max.unwrap_or(10),
        })
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            collar: self.scoring.collar.unwrap_or(0.25),
            score_overlap: self.scoring.score_overlap.unwrap_or(false),
        }
    }

    pub fn synth_spec(&self) -> SyntheticCorpusSpec {
        let mut spec = SyntheticCorpusSpec { seed: self.seed, ..SyntheticCorpusSpec::default() };
        if let Some(s) = &self.synth {
            if let Some(v) = s.speakers {
                spec.speakers = v;
            }
            if let Some(v) = s.recordings {
                spec.recordings = v;
            }
            if let Some(v) = s.speakers_per_recording {
                spec.speakers_per_recording = v;
            }
            if let Some(v) = s.target_len_s {
                spec.target_len_s = v;
            }
            if let Some(v) = s.pause_zero_prob {
                spec.pause_zero_prob = v;
            }
            if let Some(v) = s.template_scale {
                spec.template_scale = v;
            }
            if let Some(v) = s.within_sigma {
                spec.within_sigma = v;
            }
        }
        spec
    }

    /// Paths that must exist before training (unless the corpus is about
    /// to be synthesized) and before diarisation.
    pub fn require_corpus(&self) -> Result<(), ConfigError> {
        if !self.paths.corpus_dir.is_dir() {
            return Err(ConfigError::MissingPath(self.paths.corpus_dir.clone()));
        }
        Ok(())
    }

    pub fn require_models(&self, cpd_needed: bool) -> Result<Vec<PathBuf>, ConfigError> {
        let mut files = vec![
            self.paths.model_dir.join("vad.params"),
            self.paths.model_dir.join("system.params"),
        ];
        if cpd_needed {
            files.push(self.paths.model_dir.join("cpd.params"));
        }
        for f in &files {
            if !f.is_file() {
                return Err(ConfigError::MissingPath(f.clone()));
            }
        }
        Ok(files)
    }
}
