//! End-to-end diarisation of one recording: VAD → (optional CPD) →
//! sliding windows → embeddings → spectral clustering → assignment.

use crate::clustering::{
    self, AssignMode, ClusterResult, DiarizationHypothesis,
};
use crate::features::FeatureSequence;
use crate::nets::{CpdConfig, NetError, VadConfig};
use crate::segmentation::{self, SegmenterConfig};
use crate::system::{system_forward, SystemConfig};
use crate::timeline::Timeline;
use crate::training::make_windows;
use crate::{ParamStore, Tape};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Cluster(#[from] crate::clustering::ClusterError),
}

pub type Result<V> = std::result::Result<V, PipelineError>;

/// Whether clustering runs on CPD-derived speaker-homogeneous segments or
/// directly on the sliding windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentationMode {
    WindowLevel,
    Cpd,
}

/// Everything needed to run the pipeline on one recording.
pub struct PipelineModels<'a> {
    pub vad_store: &'a ParamStore,
    pub vad: &'a VadConfig,
    /// Present only in CPD mode.
    pub cpd_store: Option<&'a ParamStore>,
    pub cpd: &'a CpdConfig,
    pub system_store: &'a ParamStore,
    pub system: &'a SystemConfig,
}

#[derive(Debug, Clone)]
pub struct DiarizeConfig {
    pub mode: SegmentationMode,
    pub segmenter: SegmenterConfig,
    /// Sliding-window length and shift in frames.
    pub window: usize,
    pub shift: usize,
    /// Affinity refinement threshold fraction.
    pub refine_threshold: f64,
    pub k_max: usize,
}

impl Default for DiarizeConfig {
    fn default() -> Self {
        Self {
            mode: SegmentationMode::Cpd,
            segmenter: SegmenterConfig::default(),
            window: 200,
            shift: 100,
            refine_threshold: 0.4,
            k_max: 10,
        }
    }
}

/// Stable per-recording seed so recording-level parallelism cannot change
/// any result.
pub fn recording_seed(global_seed: u64, recording: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in recording.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    global_seed ^ hash
}

/// Runs the full pipeline on one recording. An empty or speech-free
/// stream produces an empty hypothesis.
pub fn diarize_recording(
    recording: &str,
    feats: &FeatureSequence,
    models: &PipelineModels<'_>,
    cfg: &DiarizeConfig,
    global_seed: u64,
) -> Result<DiarizationHypothesis> {
    let seed = recording_seed(global_seed, recording);
    let empty = || DiarizationHypothesis {
        timeline: Timeline::new(recording),
        window_spans: vec![],
        window_labels: vec![],
        window_embeddings: vec![],
    };
    if feats.is_empty() {
        return Ok(empty());
    }

    let speech = segmentation::vad_segment(feats, models.vad_store, models.vad, &cfg.segmenter, recording)?;
    if speech.is_empty() {
        return Ok(empty());
    }
    let segments = match (cfg.mode, models.cpd_store) {
        (SegmentationMode::Cpd, Some(cpd_store)) => {
            segmentation::cpd_segment(feats, &speech, cpd_store, models.cpd, &cfg.segmenter)?
        }
        _ => speech,
    };

    let windows = make_windows(feats, &segments, cfg.window, cfg.shift, 0);
    if windows.is_empty() {
        return Ok(empty());
    }
    let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(windows.len());
    for sample in &windows {
        let tape = Tape::new();
        let out = system_forward(
            &tape,
            models.system_store,
            models.system,
            tape.constant(sample.tensor(feats, cfg.window)),
        )?;
        embeddings.push(out.embedding.value().into_data());
    }

    let window_segment: Vec<usize> = windows.iter().map(|w| w.segment).collect();
    let window_spans: Vec<(f64, f64)> = windows.iter().map(|w| w.span).collect();

    let clusters = if embeddings.len() < 2 {
        // A single window cannot be clustered; it forms its own speaker.
        ClusterResult {
            labels: vec![0; embeddings.len()],
            centroids: vec![embeddings[0].clone()],
            k: 1,
            eigenvalues: vec![],
        }
    } else {
        let affinity = clustering::cosine_affinity(&embeddings)?;
        let refined = clustering::refine_affinity(&affinity, cfg.refine_threshold);
        clustering::choose_k_and_cluster(&refined, &embeddings, cfg.k_max, seed)?
    };

    let mode = match cfg.mode {
        SegmentationMode::Cpd => AssignMode::SegmentLevel,
        SegmentationMode::WindowLevel => AssignMode::WindowLevel,
    };
    Ok(clustering::assign_segments(
        &segments,
        &window_segment,
        &window_spans,
        &embeddings,
        &clusters,
        mode,
    ))
}
