//! Labeled time intervals over one recording, with RTTM serialization.
//!
//! A `Timeline` represents VAD output, CPD output, diarisation hypotheses
//! and references alike. VAD/CPD timelines are non-overlapping by
//! construction; reference timelines may contain overlapping speakers.

use std::collections::BTreeSet;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum RttmError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// One labeled interval in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub label: String,
}

impl Interval {
    pub fn new(start: f64, end: f64, label: impl Into<String>) -> Self {
        assert!(start < end, "interval start {start} must precede end {end}");
        Self { start, end, label: label.into() }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Ordered set of labeled intervals over one recording.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timeline {
    pub recording: String,
    entries: Vec<Interval>,
}

impl Timeline {
    pub fn new(recording: impl Into<String>) -> Self {
        Self { recording: recording.into(), entries: Vec::new() }
    }

    pub fn from_entries(recording: impl Into<String>, mut entries: Vec<Interval>) -> Self {
        entries.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
        Self { recording: recording.into(), entries }
    }

    /// Inserts one interval, keeping start order.
    pub fn push(&mut self, interval: Interval) {
        let at = self
            .entries
            .partition_point(|e| (e.start, e.end) <= (interval.start, interval.end));
        self.entries.insert(at, interval);
    }

    pub fn entries(&self) -> &[Interval] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum of interval durations (overlap counted with multiplicity).
    pub fn total_duration(&self) -> f64 {
        self.entries.iter().map(Interval::duration).sum()
    }

    pub fn labels(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.label.as_str()).collect()
    }

    /// Replaces every label via `f` (used for cluster → speaker renaming).
    pub fn relabel(&self, f: impl Fn(&str) -> String) -> Timeline {
        Timeline {
            recording: self.recording.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| Interval { start: e.start, end: e.end, label: f(&e.label) })
                .collect(),
        }
    }

    /// Serializes as RTTM `SPEAKER` lines (seconds at 3 decimals).
    pub fn to_rttm(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(
                out,
                "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
                self.recording,
                e.start,
                e.duration(),
                e.label
            )
            .expect("string write");
        }
        out
    }
}

/// Parses RTTM text into one timeline per recording, in order of first
/// appearance. Non-SPEAKER lines and blanks are skipped.
pub fn parse_rttm(text: &str) -> Result<Vec<Timeline>, RttmError> {
    let mut timelines: Vec<Timeline> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with(';') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields[0] != "SPEAKER" {
            continue;
        }
        if fields.len() < 8 {
            return Err(RttmError::Malformed {
                line,
                reason: format!("{} fields, want at least 8", fields.len()),
            });
        }
        let recording = fields[1].to_string();
        let start: f64 = fields[3].parse().map_err(|_| RttmError::Malformed {
            line,
            reason: format!("bad start `{}`", fields[3]),
        })?;
        let dur: f64 = fields[4].parse().map_err(|_| RttmError::Malformed {
            line,
            reason: format!("bad duration `{}`", fields[4]),
        })?;
        if dur <= 0.0 || start < 0.0 || !start.is_finite() || !dur.is_finite() {
            return Err(RttmError::Malformed {
                line,
                reason: format!("non-positive interval ({start}, {dur})"),
            });
        }
        let label = fields[7].to_string();
        let timeline = match timelines.iter_mut().find(|t| t.recording == recording) {
            Some(t) => t,
            None => {
                timelines.push(Timeline::new(recording));
                timelines.last_mut().unwrap()
            }
        };
        timeline.push(Interval::new(start, start + dur, label));
    }
    Ok(timelines)
}

/// Reads an RTTM file from disk.
pub fn read_rttm(path: &std::path::Path) -> Result<Vec<Timeline>, RttmError> {
    parse_rttm(&std::fs::read_to_string(path)?)
}

/// Writes timelines to one RTTM file.
pub fn write_rttm(path: &std::path::Path, timelines: &[Timeline]) -> Result<(), RttmError> {
    let mut out = String::new();
    for t in timelines {
        out.push_str(&t.to_rttm());
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn push_keeps_start_order() {
        let mut t = Timeline::new("rec");
        t.push(Interval::new(2.0, 3.0, "b"));
        t.push(Interval::new(0.5, 1.0, "a"));
        t.push(Interval::new(1.0, 2.5, "c"));
        let starts: Vec<f64> = t.entries().iter().map(|e| e.start).collect();
        assert_eq!(starts, vec![0.5, 1.0, 2.0]);
    }

    #[test]
    fn rttm_line_format_is_exact() {
        let mut t = Timeline::new("meeting1");
        t.push(Interval::new(1.25, 3.5, "spk0"));
        assert_eq!(
            t.to_rttm(),
            "SPEAKER meeting1 1 1.250 2.250 <NA> <NA> spk0 <NA> <NA>\n"
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "SPEAKER rec 1 0.0 1.0 <NA> <NA> a <NA> <NA>\nSPEAKER rec 1 oops 1.0 <NA> <NA> a <NA> <NA>\n";
        match parse_rttm(text) {
            Err(RttmError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn multiple_recordings_are_split() {
        let text = "SPEAKER a 1 0.0 1.0 <NA> <NA> x <NA> <NA>\nSPEAKER b 1 0.5 1.0 <NA> <NA> y <NA> <NA>\nSPEAKER a 1 2.0 1.0 <NA> <NA> x <NA> <NA>\n";
        let ts = parse_rttm(text).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[0].recording, "a");
        assert_eq!(ts[0].len(), 2);
        assert_eq!(ts[1].recording, "b");
    }

    proptest! {
        // Round-trip at 3-decimal resolution: parse(to_rttm(t)) == t when all
        // times are whole milliseconds.
        #[test]
        fn rttm_round_trip(entries in proptest::collection::vec((0u32..100_000, 1u32..50_000, 0u8..4), 0..20)) {
            let mut t = Timeline::new("rec");
            for (start_ms, dur_ms, spk) in entries {
                let start = start_ms as f64 / 1000.0;
                let end = start + dur_ms as f64 / 1000.0;
                t.push(Interval::new(start, end, format!("spk{spk}")));
            }
            let parsed = parse_rttm(&t.to_rttm()).unwrap();
            if t.is_empty() {
                prop_assert!(parsed.is_empty());
            } else {
                prop_assert_eq!(parsed.len(), 1);
                prop_assert_eq!(parsed[0].len(), t.len());
                for (a, b) in parsed[0].entries().iter().zip(t.entries()) {
                    prop_assert!((a.start - b.start).abs() < 5e-4);
                    prop_assert!((a.end - b.end).abs() < 1e-3);
                    prop_assert_eq!(&a.label, &b.label);
                }
            }
        }
    }
}
