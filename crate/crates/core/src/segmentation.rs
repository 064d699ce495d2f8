//! Stream-level VAD and CPD decisioning: frame posteriors → smoothed
//! speech segments → speaker-homogeneous segments.

use crate::features::FeatureSequence;
use crate::nets::{self, CpdConfig, NetError, VadConfig};
use crate::timeline::{Interval, Timeline};
use crate::{ParamStore, Tape};

pub type Result<V> = std::result::Result<V, NetError>;

/// Which neighbor absorbs a sub-minimum segment during the merge pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeRule {
    /// Merge into the shorter adjacent segment (tie → earlier).
    Shorter,
    Earlier,
    Later,
}

#[derive(Debug, Clone)]
pub struct SegmenterConfig {
    /// Speech posterior threshold.
    pub speech_threshold: f64,
    /// Non-speech gaps shorter than this merge into surrounding speech.
    pub min_nonspeech_s: f64,
    /// Speaker-homogeneous segments shorter than this merge into a neighbor.
    pub min_segment_s: f64,
    /// Change posterior threshold.
    pub cpd_threshold: f64,
    /// Median filter width (odd) applied to VAD posteriors.
    pub median_window: usize,
    pub merge_rule: MergeRule,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            speech_threshold: 0.5,
            min_nonspeech_s: 0.2,
            min_segment_s: 0.3,
            cpd_threshold: 0.5,
            median_window: 11,
            merge_rule: MergeRule::Shorter,
        }
    }
}

/// Odd-width running median with edge clamping.
pub fn median_filter(values: &[f64], width: usize) -> Vec<f64> {
    assert!(width % 2 == 1, "median window must be odd");
    if width == 1 || values.is_empty() {
        return values.to_vec();
    }
    let half = (width / 2) as isize;
    let n = values.len() as isize;
    (0..n)
        .map(|t| {
            let mut window: Vec<f64> = (t - half..=t + half)
                .map(|i| values[i.clamp(0, n - 1) as usize])
                .collect();
            window.sort_by(f64::total_cmp);
            window[window.len() / 2]
        })
        .collect()
}

/// Per-frame speech posteriors for a whole stream, batched through the
/// VAD network in chunks of context windows.
pub fn vad_speech_probs(
    feats: &FeatureSequence,
    store: &ParamStore,
    cfg: &VadConfig,
) -> Result<Vec<f64>> {
    let frames = feats.len();
    if frames == 0 {
        return Ok(Vec::new());
    }
    let window = cfg.window_frames();
    let input_dim = cfg.input_dim();
    let half = cfg.context_half as isize;
    let chunk = 512usize;
    let mut probs = Vec::with_capacity(frames);
    for chunk_start in (0..frames).step_by(chunk) {
        let chunk_end = (chunk_start + chunk).min(frames);
        let rows = chunk_end - chunk_start;
        let mut data = Vec::with_capacity(rows * input_dim);
        for t in chunk_start..chunk_end {
            let w = feats.window(t as isize - half, window);
            data.extend_from_slice(w.data());
        }
        let tape = Tape::new();
        let mut h = tape.input(
            crate::Tensor::new(vec![rows, input_dim], data).expect("chunk shape"),
            false,
        );
        for i in 0..cfg.hidden_layers {
            let w = tape.param(store, &format!("vad.l{i}.w"))?;
            let b = tape.param(store, &format!("vad.l{i}.b"))?;
            h = h.matmul(w)?.add_row(b)?.relu()?;
        }
        let w = tape.param(store, "vad.out.w")?;
        let b = tape.param(store, "vad.out.b")?;
        let logits = h.matmul(w)?.add_row(b)?;
        // Row-wise softmax via the column variant on the transpose.
        let post = logits.transpose()?.softmax_columns()?.value();
        for t in 0..rows {
            probs.push(post.at(1, t));
        }
    }
    Ok(probs)
}

/// Thresholds smoothed speech posteriors and merges short non-speech gaps
/// into the surrounding speech.
pub fn vad_segment(
    feats: &FeatureSequence,
    store: &ParamStore,
    vad_cfg: &VadConfig,
    cfg: &SegmenterConfig,
    recording: &str,
) -> Result<Timeline> {
    let probs = vad_speech_probs(feats, store, vad_cfg)?;
    let smoothed = median_filter(&probs, cfg.median_window);
    Ok(segments_from_flags(
        &smoothed.iter().map(|p| *p > cfg.speech_threshold).collect::<Vec<_>>(),
        feats.frame_period(),
        cfg.min_nonspeech_s,
        recording,
    ))
}

/// Builds the speech timeline from per-frame flags; gaps shorter than the
/// minimum non-speech duration are treated as intra-utterance silence.
pub fn segments_from_flags(
    speech: &[bool],
    frame_period: f64,
    min_nonspeech_s: f64,
    recording: &str,
) -> Timeline {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (t, &flag) in speech.iter().enumerate() {
        match (flag, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                runs.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, speech.len()));
    }
    // Merge across short gaps.
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for run in runs {
        match merged.last_mut() {
            Some(last) if (run.0 - last.1) as f64 * frame_period < min_nonspeech_s => {
                last.1 = run.1;
            }
            _ => merged.push(run),
        }
    }
    let mut timeline = Timeline::new(recording);
    for (s, e) in merged {
        timeline.push(Interval::new(
            s as f64 * frame_period,
            e as f64 * frame_period,
            "speech",
        ));
    }
    timeline
}

/// Change posterior for every frame of one speech segment, with windows
/// replicate-padded at the segment edges.
pub fn cpd_change_probs(
    feats: &FeatureSequence,
    seg_start: usize,
    seg_end: usize,
    store: &ParamStore,
    cfg: &CpdConfig,
) -> Result<Vec<f64>> {
    let side = cfg.side_frames();
    let mut probs = Vec::with_capacity(seg_end - seg_start);
    for t in seg_start..seg_end {
        let past = feats.window_in(seg_start, seg_end, t as isize - cfg.context_half as isize, side);
        let future = feats.window_in(seg_start, seg_end, t as isize, side);
        let tape = Tape::new();
        let p = tape.constant(past);
        let f = tape.constant(future);
        probs.push(nets::cpd_change_prob(&tape, store, p, f, cfg)?);
    }
    Ok(probs)
}

/// Collapses maximal runs of above-threshold frames to their middle frame.
pub fn change_frames(probs: &[f64], threshold: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    for (t, &p) in probs.iter().enumerate() {
        if p > threshold {
            run_start.get_or_insert(t);
        } else if let Some(s) = run_start.take() {
            out.push((s + (t - 1)) / 2);
        }
    }
    if let Some(s) = run_start {
        out.push((s + (probs.len() - 1)) / 2);
    }
    out
}

/// Merges sub-minimum segments into a neighbor until none remain (or one
/// segment is left). Returns interval boundaries in frames.
fn merge_short(mut bounds: Vec<(usize, usize)>, min_frames: usize, rule: MergeRule) -> Vec<(usize, usize)> {
    loop {
        if bounds.len() <= 1 {
            return bounds;
        }
        let victim = match bounds
            .iter()
            .enumerate()
            .filter(|(_, (s, e))| e - s < min_frames)
            .min_by_key(|(i, (s, e))| (e - s, *i))
        {
            Some((i, _)) => i,
            None => return bounds,
        };
        let merge_with_prev = match rule {
            MergeRule::Earlier => victim > 0,
            MergeRule::Later => victim + 1 >= bounds.len(),
            MergeRule::Shorter => {
                let prev = victim.checked_sub(1).map(|i| bounds[i].1 - bounds[i].0);
                let next = bounds.get(victim + 1).map(|(s, e)| e - s);
                match (prev, next) {
                    (Some(p), Some(n)) => p <= n,
                    (Some(_), None) => true,
                    _ => false,
                }
            }
        };
        if merge_with_prev {
            bounds[victim - 1].1 = bounds[victim].1;
            bounds.remove(victim);
        } else {
            bounds[victim + 1].0 = bounds[victim].0;
            bounds.remove(victim);
        }
    }
}

/// Splits each speech segment at detected change points, then merges
/// sub-minimum pieces. Segments shorter than the CPD context pass through
/// unsplit. The output exactly tiles the input speech timeline.
pub fn cpd_segment(
    feats: &FeatureSequence,
    speech: &Timeline,
    store: &ParamStore,
    cpd_cfg: &CpdConfig,
    cfg: &SegmenterConfig,
) -> Result<Timeline> {
    let period = feats.frame_period();
    let min_frames = (cfg.min_segment_s / period).round() as usize;
    let context = 2 * cpd_cfg.context_half + 1;
    let mut out = Timeline::new(speech.recording.clone());
    for segment in speech.entries() {
        let fs = feats.frame_at(segment.start);
        let fe = feats.frame_at(segment.end).min(feats.len());
        if fe.saturating_sub(fs) < context {
            out.push(segment.clone());
            continue;
        }
        let probs = cpd_change_probs(feats, fs, fe, store, cpd_cfg)?;
        let changes = change_frames(&probs, cfg.cpd_threshold);
        let mut bounds = Vec::new();
        let mut cursor = fs;
        for c in changes {
            let abs = fs + c;
            if abs > cursor && abs < fe {
                bounds.push((cursor, abs));
                cursor = abs;
            }
        }
        bounds.push((cursor, fe));
        let merged = merge_short(bounds, min_frames, cfg.merge_rule);
        for (i, (s, e)) in merged.iter().enumerate() {
            // Keep the parent's exact extent at the edges so the output
            // tiles the speech timeline.
            let start = if i == 0 { segment.start } else { *s as f64 * period };
            let end = if i + 1 == merged.len() { segment.end } else { *e as f64 * period };
            out.push(Interval::new(start, end, segment.label.clone()));
        }
    }
    Ok(out)
}

/// Boundaries of `segmented` that fall strictly inside a `speech` segment
/// (the hypothesized change points).
pub fn interior_boundaries(speech: &Timeline, segmented: &Timeline) -> Vec<f64> {
    let mut out = Vec::new();
    for seg in segmented.entries() {
        let inside = speech
            .entries()
            .iter()
            .any(|s| seg.start > s.start + 1e-9 && seg.start < s.end - 1e-9);
        if inside {
            out.push(seg.start);
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    out
}

/// Reference change points: boundaries between adjacent different-speaker
/// segments with at most `max_gap` seconds between them.
pub fn reference_change_points(reference: &Timeline, max_gap: f64) -> Vec<f64> {
    let entries = reference.entries();
    let mut out = Vec::new();
    for pair in entries.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.label != b.label && b.start - a.end <= max_gap && b.start >= a.end {
            out.push((a.end + b.start) / 2.0);
        }
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Precision/recall/F1 of hypothesized change points against references,
/// greedy one-to-one matching within ±collar.
#[derive(Debug, Clone, PartialEq)]
pub struct CpdMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn cpd_eval(hypothesis: &[f64], reference: &[f64], collar: f64) -> CpdMetrics {
    let mut hyp = hypothesis.to_vec();
    let mut refs = reference.to_vec();
    hyp.sort_by(f64::total_cmp);
    refs.sort_by(f64::total_cmp);
    let mut matched = vec![false; refs.len()];
    let mut tp = 0usize;
    for &h in &hyp {
        let best = refs
            .iter()
            .enumerate()
            .filter(|(i, r)| !matched[*i] && (h - **r).abs() <= collar)
            .min_by(|(_, a), (_, b)| (h - **a).abs().total_cmp(&(h - **b).abs()));
        if let Some((i, _)) = best {
            matched[i] = true;
            tp += 1;
        }
    }
    let fp = hyp.len() - tp;
    let fn_ = refs.len() - tp;
    let precision = if hyp.is_empty() {
        if refs.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / hyp.len() as f64
    };
    let recall = if refs.is_empty() { 1.0 } else { tp as f64 / refs.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    CpdMetrics {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        precision,
        recall,
        f1,
    }
}
