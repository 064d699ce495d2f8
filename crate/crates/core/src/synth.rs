//! Deterministic synthetic multi-speaker corpus.
//!
//! Each speaker has a fixed spectral template plus a speaker-specific slow
//! modulation, so frames are nearly linearly separable while temporal
//! models still have structure to exploit. Non-speech is low-energy noise
//! around a constant floor. Roughly half of the speaker turns follow the
//! previous one with no pause, giving the change-point detector seamless
//! boundaries to learn.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{FeatureSequence, FeatureError, FEAT_DIM, FRAME_PERIOD_S};
use crate::timeline::{self, Interval, RttmError, Timeline};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Rttm(#[from] RttmError),
    #[error("corpus directory {0} has no recordings")]
    Empty(String),
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpusSpec {
    pub speakers: usize,
    pub recordings: usize,
    pub speakers_per_recording: usize,
    /// Approximate recording length in seconds.
    pub target_len_s: f64,
    pub utterance_s: (f64, f64),
    /// Probability that a turn follows the previous one with no pause.
    pub pause_zero_prob: f64,
    pub pause_s: (f64, f64),
    pub edge_silence_s: f64,
    /// Norm of each speaker's spectral template.
    pub template_scale: f64,
    pub within_sigma: f64,
    /// Amplitude of the speaker-specific slow modulation.
    pub wave_amp: f64,
    pub noise_floor: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            speakers: 8,
            recordings: 12,
            speakers_per_recording: 4,
            target_len_s: 40.0,
            utterance_s: (1.5, 4.0),
            pause_zero_prob: 0.45,
            pause_s: (0.3, 1.0),
            edge_silence_s: 0.7,
            template_scale: 3.0,
            within_sigma: 0.5,
            wave_amp: 0.6,
            noise_floor: -4.0,
            noise_sigma: 0.15,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Recording {
    pub id: String,
    pub feats: FeatureSequence,
    pub reference: Timeline,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub recordings: Vec<Recording>,
}

impl Corpus {
    /// Writes one directory per recording: `feats.f64` + `ref.rttm`.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir)?;
        for rec in &self.recordings {
            let rec_dir = dir.join(&rec.id);
            std::fs::create_dir_all(&rec_dir)?;
            rec.feats.save(&rec_dir.join("feats.f64"))?;
            std::fs::write(rec_dir.join("ref.rttm"), rec.reference.to_rttm())?;
        }
        Ok(())
    }

    /// Loads every recording directory (sorted by name) under `dir`.
    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let mut ids: Vec<String> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("feats.f64").is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        if ids.is_empty() {
            return Err(CorpusError::Empty(dir.display().to_string()));
        }
        let mut recordings = Vec::with_capacity(ids.len());
        for id in ids {
            let rec_dir = dir.join(&id);
            let feats = FeatureSequence::load(&rec_dir.join("feats.f64"))?;
            let ref_path = rec_dir.join("ref.rttm");
            let reference = if ref_path.is_file() {
                timeline::read_rttm(&ref_path)?
                    .into_iter()
                    .find(|t| t.recording == id)
                    .unwrap_or_else(|| Timeline::new(id.clone()))
            } else {
                Timeline::new(id.clone())
            };
            recordings.push(Recording { id, feats, reference });
        }
        Ok(Self { recordings })
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller, one draw per call.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct SpeakerModel {
    template: Vec<f64>,
    wave_dir: Vec<f64>,
    wave_hz: f64,
}

/// Deterministic corpus generation: identical spec ⇒ byte-identical
/// features and references.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = FEAT_DIM;
    let speakers: Vec<SpeakerModel> = (0..spec.speakers)
        .map(|_| SpeakerModel {
            template: unit_direction(&mut rng, dim)
                .into_iter()
                .map(|x| x * spec.template_scale)
                .collect(),
            wave_dir: unit_direction(&mut rng, dim),
            wave_hz: rng.gen_range(0.5..2.0),
        })
        .collect();

    let mut recordings = Vec::with_capacity(spec.recordings);
    for r in 0..spec.recordings {
        let id = format!("synth{r:03}");
        let mut cast: Vec<usize> = (0..spec.speakers).collect();
        // Seeded Fisher–Yates, then take the head as this meeting's cast.
        for i in (1..cast.len()).rev() {
            let j = rng.gen_range(0..=i);
            cast.swap(i, j);
        }
        cast.truncate(spec.speakers_per_recording.min(spec.speakers));

        let mut feats = FeatureSequence::empty(dim);
        let mut reference = Timeline::new(id.clone());
        let silence = |feats: &mut FeatureSequence, rng: &mut ChaCha8Rng, dur_s: f64| {
            let frames = (dur_s / FRAME_PERIOD_S).round() as usize;
            for _ in 0..frames {
                let frame: Vec<f64> = (0..dim)
                    .map(|_| spec.noise_floor + spec.noise_sigma * gauss(rng))
                    .collect();
                feats.push_frame(&frame);
            }
        };

        silence(&mut feats, &mut rng, spec.edge_silence_s);
        let mut prev: Option<usize> = None;
        while feats.duration_s() < spec.target_len_s {
            let speaker = loop {
                let s = cast[rng.gen_range(0..cast.len())];
                if Some(s) != prev || cast.len() == 1 {
                    break s;
                }
            };
            prev = Some(speaker);
            let model = &speakers[speaker];
            let dur = rng.gen_range(spec.utterance_s.0..spec.utterance_s.1);
            let frames = (dur / FRAME_PERIOD_S).round() as usize;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let start = feats.duration_s();
            for _ in 0..frames {
                let t = feats.len() as f64 * FRAME_PERIOD_S;
                let wave = spec.wave_amp
                    * (std::f64::consts::TAU * model.wave_hz * t + phase).sin();
                let frame: Vec<f64> = (0..dim)
                    .map(|d| {
                        model.template[d]
                            + wave * model.wave_dir[d]
                            + spec.within_sigma * gauss(&mut rng)
                    })
                    .collect();
                feats.push_frame(&frame);
            }
            reference.push(Interval::new(start, feats.duration_s(), format!("spk{speaker}")));
            if rng.gen::<f64>() >= spec.pause_zero_prob {
                let pause = rng.gen_range(spec.pause_s.0..spec.pause_s.1);
                silence(&mut feats, &mut rng, pause);
            }
        }
        silence(&mut feats, &mut rng, spec.edge_silence_s);
        recordings.push(Recording { id, feats, reference });
    }
    Corpus { recordings }
}
