//! Acoustic feature sequences and the `feats.f64` on-disk format.
//!
//! A sequence is a time-major matrix of fixed-dimension frames at a 10 ms
//! frame period. The file layout is a 16-byte header (8-byte magic, u32
//! frame count, u32 dimension, little-endian) followed by row-major
//! little-endian doubles.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::Tensor;

pub const FRAME_PERIOD_S: f64 = 0.01;
pub const FEAT_DIM: usize = 40;

const MAGIC: &[u8; 8] = b"CVECF64\0";

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad feature file: {0}")]
    Format(String),
}

/// Time-major matrix of acoustic feature frames with a frame period.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    dim: usize,
    frame_period: f64,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len() % dim.max(1), 0, "data not a whole number of frames");
        Self { dim, frame_period: FRAME_PERIOD_S, data }
    }

    pub fn empty(dim: usize) -> Self {
        Self::new(dim, Vec::new())
    }

    pub fn push_frame(&mut self, frame: &[f64]) {
        assert_eq!(frame.len(), self.dim);
        self.data.extend_from_slice(frame);
    }

    /// Number of frames.
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_period(&self) -> f64 {
        self.frame_period
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 * self.frame_period
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Frame index containing time `t` seconds.
    pub fn frame_at(&self, t: f64) -> usize {
        (t / self.frame_period).round() as usize
    }

    /// Extracts `len` frames starting at (possibly negative) `start`, with
    /// indices clamped to `[lo, hi)` — replicate padding at range edges.
    pub fn window_in(&self, lo: usize, hi: usize, start: isize, len: usize) -> Tensor<f64> {
        assert!(lo < hi && hi <= self.len(), "bad window range [{lo},{hi})");
        let mut data = Vec::with_capacity(len * self.dim);
        for i in 0..len {
            let idx = (start + i as isize).clamp(lo as isize, hi as isize - 1) as usize;
            data.extend_from_slice(self.frame(idx));
        }
        Tensor::new(vec![len, self.dim], data).expect("window shape")
    }

    /// Whole-stream window with replicate padding at stream edges.
    pub fn window(&self, start: isize, len: usize) -> Tensor<f64> {
        self.window_in(0, self.len(), start, len)
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FeatureError::Format("bad magic".into()));
        }
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        let frames = u32::from_le_bytes(b) as usize;
        r.read_exact(&mut b)?;
        let dim = u32::from_le_bytes(b) as usize;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != frames * dim * 8 {
            return Err(FeatureError::Format(format!(
                "payload {} bytes, want {}",
                raw.len(),
                frames * dim * 8
            )));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dim, frame_period: FRAME_PERIOD_S, data })
    }
}
