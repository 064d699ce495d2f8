//! NIST-style diarisation scoring: collar handling, overlap exclusion,
//! optimal speaker mapping, and the DER = MS + FA + SER decomposition.
//!
//! All interval arithmetic runs on integer 0.1 ms ticks so collar math has
//! no floating-point boundary ambiguity; percentages are produced only at
//! the end.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::timeline::Timeline;

/// Ticks per second (0.1 ms resolution).
const TICKS: i64 = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("recording mismatch: reference `{reference}` vs hypothesis `{hypothesis}`")]
    RecordingMismatch { reference: String, hypothesis: String },
}

#[derive(Debug, Clone)]
pub struct ScoreConfig {
    /// No-score zone around every reference boundary, seconds.
    pub collar: f64,
    /// Score regions where two or more reference speakers overlap.
    pub score_overlap: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { collar: 0.25, score_overlap: false }
    }
}

fn to_ticks(s: f64) -> i64 {
    (s * TICKS as f64).round() as i64
}

fn to_secs(t: i64) -> f64 {
    t as f64 / TICKS as f64
}

// ── Interval sets ────────────────────────────────────────────────────

/// Sorted, disjoint, half-open tick intervals.
#[derive(Debug, Clone, Default, PartialEq)]
struct IntervalSet(Vec<(i64, i64)>);

impl IntervalSet {
    fn from_raw(mut raw: Vec<(i64, i64)>) -> Self {
        raw.retain(|(a, b)| a < b);
        raw.sort_unstable();
        let mut merged: Vec<(i64, i64)> = Vec::with_capacity(raw.len());
        for (a, b) in raw {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        Self(merged)
    }

    fn total(&self) -> i64 {
        self.0.iter().map(|(a, b)| b - a).sum()
    }

    fn intersect(&self, other: &IntervalSet) -> IntervalSet {
        let mut out = Vec::new();
        let (mut i, mut j) = (0usize, 0usize);
        while i < self.0.len() && j < other.0.len() {
            let (a1, b1) = self.0[i];
            let (a2, b2) = other.0[j];
            let lo = a1.max(a2);
            let hi = b1.min(b2);
            if lo < hi {
                out.push((lo, hi));
            }
            if b1 <= b2 {
                i += 1;
            } else {
                j += 1;
            }
        }
        IntervalSet(out)
    }

    fn subtract(&self, other: &IntervalSet) -> IntervalSet {
        let mut out = Vec::new();
        let mut j = 0usize;
        for &(mut a, b) in &self.0 {
            while j < other.0.len() && other.0[j].1 <= a {
                j += 1;
            }
            let mut jj = j;
            while a < b && jj < other.0.len() && other.0[jj].0 < b {
                let (c, d) = other.0[jj];
                if c > a {
                    out.push((a, c.min(b)));
                }
                a = a.max(d);
                jj += 1;
            }
            if a < b {
                out.push((a, b));
            }
        }
        IntervalSet(out)
    }
}

// ── Reports ──────────────────────────────────────────────────────────

/// Error times pooled over one or more recordings, all in ticks.
#[derive(Debug, Clone, Default)]
struct ErrorTimes {
    scored_speech: i64,
    missed: i64,
    false_alarm: i64,
    speaker_error: i64,
}

impl ErrorTimes {
    fn add(&mut self, other: &ErrorTimes) {
        self.scored_speech += other.scored_speech;
        self.missed += other.missed;
        self.false_alarm += other.false_alarm;
        self.speaker_error += other.speaker_error;
    }
}

/// Score numbers as percentages of scored reference speech time.
#[derive(Debug, Clone)]
pub struct ScoreNumbers {
    pub scored_speech_s: f64,
    pub missed_pct: f64,
    pub false_alarm_pct: f64,
    pub speaker_error_pct: f64,
    pub der_pct: f64,
}

impl ScoreNumbers {
    fn from_times(t: &ErrorTimes) -> Self {
        let denom = t.scored_speech as f64;
        // Zero scored speech makes rates undefined; the report's `valid`
        // flag records it instead of a division by zero.
        let pct = |x: i64| if t.scored_speech == 0 { 0.0 } else { 100.0 * x as f64 / denom };
        Self {
            scored_speech_s: to_secs(t.scored_speech),
            missed_pct: pct(t.missed),
            false_alarm_pct: pct(t.false_alarm),
            speaker_error_pct: pct(t.speaker_error),
            der_pct: pct(t.missed + t.false_alarm + t.speaker_error),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecordingScore {
    pub recording: String,
    pub numbers: ScoreNumbers,
    /// Reference speaker → hypothesis cluster pairs actually mapped.
    pub mapping: Vec<(String, String)>,
}

/// Full scoring output; `valid` is false when no reference speech
/// survived the scored region (the percentages are then meaningless).
#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub overall: ScoreNumbers,
    pub per_recording: Vec<RecordingScore>,
    pub valid: bool,
}

impl ScoreReport {
    /// Machine-readable key=value lines for CI assertions.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "SCORED_SPEECH={:.3}", self.overall.scored_speech_s).unwrap();
        writeln!(out, "MS={:.4}", self.overall.missed_pct).unwrap();
        writeln!(out, "FA={:.4}", self.overall.false_alarm_pct).unwrap();
        writeln!(out, "SER={:.4}", self.overall.speaker_error_pct).unwrap();
        writeln!(out, "DER={:.4}", self.overall.der_pct).unwrap();
        writeln!(out, "VALID={}", if self.valid { 1 } else { 0 }).unwrap();
        out
    }

    /// Human-readable table, one row per recording plus the pooled total.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<20} {:>10} {:>8} {:>8} {:>8} {:>8}",
            "recording", "scored(s)", "MS%", "FA%", "SER%", "DER%"
        )
        .unwrap();
        for r in &self.per_recording {
            writeln!(
                out,
                "{:<20} {:>10.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                r.recording,
                r.numbers.scored_speech_s,
                r.numbers.missed_pct,
                r.numbers.false_alarm_pct,
                r.numbers.speaker_error_pct,
                r.numbers.der_pct
            )
            .unwrap();
        }
        writeln!(
            out,
            "{:<20} {:>10.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            "TOTAL",
            self.overall.scored_speech_s,
            self.overall.missed_pct,
            self.overall.false_alarm_pct,
            self.overall.speaker_error_pct,
            self.overall.der_pct
        )
        .unwrap();
        if !self.valid {
            writeln!(out, "WARNING: no scored reference speech; rates are undefined").unwrap();
        }
        out
    }
}

// ── Scored region ────────────────────────────────────────────────────

/// Scored region: the full extent minus ±collar around every reference
/// segment boundary, minus reference overlap regions unless
/// `score_overlap` is set.
pub fn scored_region_s(reference: &Timeline, cfg: &ScoreConfig) -> Vec<(f64, f64)> {
    let hi = reference
        .entries()
        .iter()
        .map(|e| to_ticks(e.end))
        .max()
        .unwrap_or(0);
    scored_region(reference, cfg, hi)
        .0
        .iter()
        .map(|&(a, b)| (to_secs(a), to_secs(b)))
        .collect()
}

fn scored_region(reference: &Timeline, cfg: &ScoreConfig, extent_hi: i64) -> IntervalSet {
    let collar = to_ticks(cfg.collar);
    let mut zones = Vec::new();
    for e in reference.entries() {
        let (s, t) = (to_ticks(e.start), to_ticks(e.end));
        zones.push((s - collar, s + collar));
        zones.push((t - collar, t + collar));
    }
    let universe = IntervalSet::from_raw(vec![(0, extent_hi)]);
    let mut scored = universe.subtract(&IntervalSet::from_raw(zones));
    if !cfg.score_overlap {
        scored = scored.subtract(&overlap_regions(reference));
    }
    scored
}

/// Regions where at least two reference speakers are active.
fn overlap_regions(reference: &Timeline) -> IntervalSet {
    let mut events: Vec<(i64, i32)> = Vec::new();
    for e in reference.entries() {
        events.push((to_ticks(e.start), 1));
        events.push((to_ticks(e.end), -1));
    }
    events.sort_unstable();
    let mut active = 0i32;
    let mut out = Vec::new();
    let mut start = 0i64;
    for (t, delta) in events {
        let was = active;
        active += delta;
        if was < 2 && active >= 2 {
            start = t;
        } else if was >= 2 && active < 2 {
            out.push((start, t));
        }
    }
    IntervalSet::from_raw(out)
}

fn per_label_sets(timeline: &Timeline) -> BTreeMap<String, IntervalSet> {
    let mut raw: BTreeMap<String, Vec<(i64, i64)>> = BTreeMap::new();
    for e in timeline.entries() {
        raw.entry(e.label.clone())
            .or_default()
            .push((to_ticks(e.start), to_ticks(e.end)));
    }
    raw.into_iter().map(|(k, v)| (k, IntervalSet::from_raw(v))).collect()
}

// ── Optimal mapping ──────────────────────────────────────────────────

/// One-to-one partial mapping of rows (reference speakers) to columns
/// (clusters) maximizing total overlap. Zero-overlap pairs are dropped
/// from the returned mapping.
pub fn optimal_mapping(overlap: &[Vec<i64>]) -> Vec<(usize, usize)> {
    let rows = overlap.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = overlap[0].len();
    if cols == 0 {
        return Vec::new();
    }
    // Assign the smaller side over bitmasks of the larger side.
    let transposed = cols < rows;
    let (r, c, get): (usize, usize, Box<dyn Fn(usize, usize) -> i64>) = if transposed {
        (cols, rows, Box::new(|i, j| overlap[j][i]))
    } else {
        (rows, cols, Box::new(|i, j| overlap[i][j]))
    };
    assert!(c <= 24, "assignment over {c} columns is out of desk scale");

    // dp[mask] = best total using rows 0..i with used-column mask.
    let full = 1usize << c;
    let mut dp = vec![i64::MIN; full];
    let mut choice: Vec<Vec<Option<usize>>> = vec![vec![None; full]; r];
    dp[0] = 0;
    for i in 0..r {
        let mut next = vec![i64::MIN; full];
        let mut next_choice = vec![None; full];
        for mask in 0..full {
            if dp[mask] == i64::MIN {
                continue;
            }
            // Leave row i unmapped.
            if dp[mask] > next[mask] {
                next[mask] = dp[mask];
                next_choice[mask] = None;
            }
            for j in 0..c {
                if mask & (1 << j) != 0 {
                    continue;
                }
                let m2 = mask | (1 << j);
                let v = dp[mask] + get(i, j);
                if v > next[m2] {
                    next[m2] = v;
                    next_choice[m2] = Some(j);
                }
            }
        }
        dp = next;
        choice[i] = next_choice;
    }
    let mut best_mask = (0..full).max_by_key(|&m| dp[m]).unwrap_or(0);
    // Walk back through the per-row choices.
    let mut pairs = Vec::new();
    for i in (0..r).rev() {
        if let Some(j) = choice[i][best_mask] {
            if get(i, j) > 0 {
                pairs.push(if transposed { (j, i) } else { (i, j) });
            }
            best_mask &= !(1 << j);
        }
    }
    pairs.sort_unstable();
    pairs
}

// ── Scoring proper ───────────────────────────────────────────────────

fn score_one(
    reference: &Timeline,
    hypothesis: &Timeline,
    cfg: &ScoreConfig,
) -> (RecordingScore, ErrorTimes) {
    let extent_hi = reference
        .entries()
        .iter()
        .chain(hypothesis.entries())
        .map(|e| to_ticks(e.end))
        .max()
        .unwrap_or(0)
        + to_ticks(cfg.collar)
        + 1;
    let scored = scored_region(reference, cfg, extent_hi);

    let ref_sets: Vec<(String, IntervalSet)> = per_label_sets(reference)
        .into_iter()
        .map(|(k, v)| (k, v.intersect(&scored)))
        .collect();
    let hyp_sets: Vec<(String, IntervalSet)> = per_label_sets(hypothesis)
        .into_iter()
        .map(|(k, v)| (k, v.intersect(&scored)))
        .collect();

    // Optimal one-to-one mapping on the scored overlap-duration matrix.
    let overlap: Vec<Vec<i64>> = ref_sets
        .iter()
        .map(|(_, r)| hyp_sets.iter().map(|(_, h)| r.intersect(h).total()).collect())
        .collect();
    let pairs = optimal_mapping(&overlap);
    let mapped_cluster: BTreeMap<usize, usize> = pairs.iter().map(|&(r, c)| (r, c)).collect();
    let mapping: Vec<(String, String)> = pairs
        .iter()
        .map(|&(r, c)| (ref_sets[r].0.clone(), hyp_sets[c].0.clone()))
        .collect();

    // Event walk over elementary intervals where the active speaker and
    // cluster sets are constant.
    let mut events: Vec<i64> = Vec::new();
    for (_, set) in ref_sets.iter().chain(hyp_sets.iter()) {
        for &(a, b) in &set.0 {
            events.push(a);
            events.push(b);
        }
    }
    events.sort_unstable();
    events.dedup();

    let mut times = ErrorTimes::default();
    for win in events.windows(2) {
        let (a, b) = (win[0], win[1]);
        let dur = b - a;
        let probe = IntervalSet(vec![(a, b)]);
        let active_refs: Vec<usize> = ref_sets
            .iter()
            .enumerate()
            .filter(|(_, (_, s))| s.intersect(&probe).total() == dur)
            .map(|(i, _)| i)
            .collect();
        let active_hyps: Vec<usize> = hyp_sets
            .iter()
            .enumerate()
            .filter(|(_, (_, s))| s.intersect(&probe).total() == dur)
            .map(|(i, _)| i)
            .collect();
        let n_ref = active_refs.len() as i64;
        let n_hyp = active_hyps.len() as i64;
        if n_ref == 0 && n_hyp == 0 {
            continue;
        }
        let n_correct = active_refs
            .iter()
            .filter(|r| {
                mapped_cluster
                    .get(r)
                    .map(|c| active_hyps.contains(c))
                    .unwrap_or(false)
            })
            .count() as i64;
        times.scored_speech += dur * n_ref;
        times.missed += dur * (n_ref - n_hyp).max(0);
        times.false_alarm += dur * (n_hyp - n_ref).max(0);
        times.speaker_error += dur * (n_ref.min(n_hyp) - n_correct);
    }

    let rec = RecordingScore {
        recording: reference.recording.clone(),
        numbers: ScoreNumbers::from_times(&times),
        mapping,
    };
    (rec, times)
}

/// Scores hypothesis timelines against references, pairing recordings by
/// id. Components pool over recordings by time, not by averaging rates.
pub fn score(
    references: &[Timeline],
    hypotheses: &[Timeline],
    cfg: &ScoreConfig,
) -> Result<ScoreReport, ScoreError> {
    let mut per_recording = Vec::new();
    let mut pooled = ErrorTimes::default();
    for reference in references {
        let empty = Timeline::new(reference.recording.clone());
        let hypothesis = hypotheses
            .iter()
            .find(|h| h.recording == reference.recording)
            .unwrap_or(&empty);
        let (rec, times) = score_one(reference, hypothesis, cfg);
        pooled.add(&times);
        per_recording.push(rec);
    }
    let valid = pooled.scored_speech > 0;
    Ok(ScoreReport { overall: ScoreNumbers::from_times(&pooled), per_recording, valid })
}

#[cfg(test)]
mod tests;
