use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::timeline::{Interval, Timeline};

fn timeline(rec: &str, entries: &[(f64, f64, &str)]) -> Timeline {
    let mut t = Timeline::new(rec);
    for &(s, e, l) in entries {
        t.push(Interval::new(s, e, l));
    }
    t
}

fn run(reference: &Timeline, hypothesis: &Timeline, cfg: &ScoreConfig) -> ScoreReport {
    score(
        std::slice::from_ref(reference),
        std::slice::from_ref(hypothesis),
        cfg,
    )
    .unwrap()
}

#[test]
fn perfect_hypothesis_scores_zero() {
    let reference = timeline("rec", &[(0.0, 10.0, "alice")]);
    let hypothesis = timeline("rec", &[(0.0, 10.0, "spk0")]);
    let report = run(&reference, &hypothesis, &ScoreConfig::default());
    assert!(report.valid);
    assert_eq!(report.overall.der_pct, 0.0);
}

#[test]
fn half_covered_reference_is_fifty_percent_missed() {
    // 10 s single-speaker reference, collar 0.25 ⇒ scored speech 9.5 s.
    // Hypothesis covers the first 5 s ⇒ MS = (9.75 − 5)/9.5 = 50%.
    let reference = timeline("rec", &[(0.0, 10.0, "alice")]);
    let hypothesis = timeline("rec", &[(0.0, 5.0, "spk0")]);
    let report = run(&reference, &hypothesis, &ScoreConfig::default());
    assert!((report.overall.missed_pct - 50.0).abs() < 0.1);
    assert_eq!(report.overall.false_alarm_pct, 0.0);
    assert_eq!(report.overall.speaker_error_pct, 0.0);
    assert!((report.overall.scored_speech_s - 9.5).abs() < 1e-9);
}

#[test]
fn swapped_labels_are_absorbed_by_the_mapping() {
    let reference = timeline(
        "rec",
        &[(0.0, 4.0, "alice"), (5.0, 9.0, "bob"), (10.0, 14.0, "alice")],
    );
    let hypothesis = timeline(
        "rec",
        &[(0.0, 4.0, "spk1"), (5.0, 9.0, "spk0"), (10.0, 14.0, "spk1")],
    );
    let report = run(&reference, &hypothesis, &ScoreConfig::default());
    assert_eq!(report.overall.speaker_error_pct, 0.0);
    assert_eq!(report.overall.der_pct, 0.0);
}

#[test]
fn collar_exclusion_zones_are_exact() {
    // Segment [1.0, 2.0] with collar 0.25 leaves scored speech (1.25, 1.75).
    let reference = timeline("rec", &[(1.0, 2.0, "a")]);
    let scored = scored_region_s(&reference, &ScoreConfig::default());
    // Scored region excludes [0.75,1.25] and [1.75,2.25].
    assert!(scored.iter().all(|&(s, e)| e <= 0.75 + 1e-12 || (s >= 1.25 && e <= 1.75)));
    let hypothesis = timeline("rec", &[(1.0, 2.0, "x")]);
    let report = run(&reference, &hypothesis, &ScoreConfig::default());
    assert!((report.overall.scored_speech_s - 0.5).abs() < 1e-9);
}

#[test]
fn zero_collar_no_overlap_scores_everything() {
    let reference = timeline("rec", &[(1.0, 2.0, "a"), (3.0, 4.5, "b")]);
    let cfg = ScoreConfig { collar: 0.0, score_overlap: false };
    let report = run(&reference, &timeline("rec", &[]), &cfg);
    assert!((report.overall.scored_speech_s - 2.5).abs() < 1e-9);
    assert!((report.overall.missed_pct - 100.0).abs() < 1e-9);
}

#[test]
fn overlap_region_is_excluded_when_not_scored() {
    // Two speakers overlapping on [3,4]: that second is cut from scoring.
    let reference = timeline("rec", &[(0.0, 4.0, "a"), (3.0, 7.0, "b")]);
    let cfg = ScoreConfig { collar: 0.0, score_overlap: false };
    let scored = scored_region_s(&reference, &cfg);
    for &(s, e) in &scored {
        assert!(e <= 3.0 + 1e-12 || s >= 4.0 - 1e-12, "({s},{e}) intersects the overlap");
    }
    let report = run(&reference, &timeline("rec", &[]), &cfg);
    assert!((report.overall.scored_speech_s - 6.0).abs() < 1e-9);
}

#[test]
fn overlap_counts_with_multiplicity_when_scored() {
    let reference = timeline("rec", &[(0.0, 4.0, "a"), (3.0, 7.0, "b")]);
    let cfg = ScoreConfig { collar: 0.0, score_overlap: true };
    let report = run(&reference, &timeline("rec", &[]), &cfg);
    // 4 + 4 speaker-seconds.
    assert!((report.overall.scored_speech_s - 8.0).abs() < 1e-9);
}

#[test]
fn empty_scored_reference_flags_invalid() {
    // Collar swallows the single short segment entirely.
    let reference = timeline("rec", &[(1.0, 1.2, "a")]);
    let report = run(&reference, &timeline("rec", &[(0.0, 2.0, "x")]), &ScoreConfig::default());
    assert!(!report.valid);
}

#[test]
fn unmapped_cluster_speech_is_speaker_error() {
    // One reference speaker, two clusters; the unmapped cluster's speech
    // inside scored reference speech counts as speaker error.
    let reference = timeline("rec", &[(0.0, 10.0, "a")]);
    let hypothesis = timeline("rec", &[(0.0, 6.0, "spk0"), (6.0, 10.0, "spk1")]);
    let cfg = ScoreConfig { collar: 0.0, score_overlap: false };
    let report = run(&reference, &hypothesis, &cfg);
    assert_eq!(report.overall.missed_pct, 0.0);
    assert_eq!(report.overall.false_alarm_pct, 0.0);
    assert!((report.overall.speaker_error_pct - 40.0).abs() < 1e-9);
    assert_eq!(report.per_recording[0].mapping, vec![("a".into(), "spk0".into())]);
}

#[test]
fn mapping_prefers_max_total_overlap() {
    let m = vec![vec![5, 0], vec![0, 0], vec![0, 4]];
    assert_eq!(optimal_mapping(&m), vec![(0, 0), (2, 1)]);

    let diag = vec![vec![9, 1], vec![2, 7]];
    assert_eq!(optimal_mapping(&diag), vec![(0, 0), (1, 1)]);

    // Greedy would take (0,0)=8 then be stuck with (1,1)=0; optimal
    // crosses over.
    let cross = vec![vec![8, 7], vec![8, 0]];
    assert_eq!(optimal_mapping(&cross), vec![(0, 1), (1, 0)]);
}

#[test]
fn mapping_permutes_with_rows() {
    let m = vec![vec![5, 1, 0], vec![0, 6, 2], vec![1, 0, 7]];
    let base = optimal_mapping(&m);
    let total = |pairs: &[(usize, usize)], m: &[Vec<i64>]| -> i64 {
        pairs.iter().map(|&(r, c)| m[r][c]).sum()
    };
    let permuted = vec![m[2].clone(), m[0].clone(), m[1].clone()];
    let p = optimal_mapping(&permuted);
    assert_eq!(total(&base, &m), total(&p, &permuted));
    // Row i of the permuted matrix is row (i+2)%3 of the original.
    for &(r, c) in &p {
        assert!(base.contains(&((r + 2) % 3, c)));
    }
}

#[test]
fn splitting_a_hypothesis_segment_changes_nothing() {
    let reference = timeline("rec", &[(0.0, 10.0, "a"), (12.0, 20.0, "b")]);
    let whole = timeline("rec", &[(0.0, 10.0, "x"), (12.0, 20.0, "y")]);
    let split = timeline(
        "rec",
        &[(0.0, 4.0, "x"), (4.0, 10.0, "x"), (12.0, 16.5, "y"), (16.5, 20.0, "y")],
    );
    let cfg = ScoreConfig::default();
    let a = run(&reference, &whole, &cfg);
    let b = run(&reference, &split, &cfg);
    assert_eq!(a.overall.der_pct, b.overall.der_pct);
    assert_eq!(a.overall.missed_pct, b.overall.missed_pct);
    assert_eq!(a.overall.false_alarm_pct, b.overall.false_alarm_pct);
    assert_eq!(a.overall.speaker_error_pct, b.overall.speaker_error_pct);
}

#[test]
fn pooling_adds_times_not_rates() {
    // rec1: 10 s scored, fully missed. rec2: 30 s scored, perfect.
    // Pooled MS = 10/40 = 25%, not the 50% rate average.
    let refs = vec![
        timeline("rec1", &[(0.0, 10.0, "a")]),
        timeline("rec2", &[(0.0, 30.0, "a")]),
    ];
    let hyps = vec![timeline("rec1", &[]), timeline("rec2", &[(0.0, 30.0, "x")])];
    let cfg = ScoreConfig { collar: 0.0, score_overlap: false };
    let report = score(&refs, &hyps, &cfg).unwrap();
    assert!((report.overall.missed_pct - 25.0).abs() < 1e-9);
}

fn random_timeline(rec: &str, rng: &mut ChaCha8Rng, labels: &[&str], segments: usize) -> Timeline {
    let mut t = Timeline::new(rec);
    let mut cursor = 0.0f64;
    for _ in 0..segments {
        cursor += rng.gen_range(0.0..2.0);
        let dur = rng.gen_range(0.2..3.0);
        let label = labels[rng.gen_range(0..labels.len())];
        // Occasional overlapping reference entry.
        let start = if rng.gen_bool(0.2) { (cursor - 0.5).max(0.0) } else { cursor };
        t.push(Interval::new(start, start + dur, label));
        cursor = start + dur;
    }
    t
}

#[test]
fn der_decomposition_is_exact_on_random_timelines() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..50 {
        let reference = random_timeline("rec", &mut rng, &["a", "b", "c"], 8);
        let hypothesis = random_timeline("rec", &mut rng, &["x", "y", "z"], 8);
        let cfg = ScoreConfig { collar: 0.25, score_overlap: i % 2 == 0 };
        let report = run(&reference, &hypothesis, &cfg);
        if !report.valid {
            continue;
        }
        let sum = report.overall.missed_pct
            + report.overall.false_alarm_pct
            + report.overall.speaker_error_pct;
        assert!(
            (sum - report.overall.der_pct).abs() < 1e-9,
            "case {i}: MS+FA+SER {sum} vs DER {}",
            report.overall.der_pct
        );
    }
}

#[test]
fn label_permutation_invariance_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let reference = random_timeline("rec", &mut rng, &["a", "b", "c"], 6);
        let hypothesis = random_timeline("rec", &mut rng, &["s0", "s1", "s2"], 6);
        let permuted = hypothesis.relabel(|l| match l {
            "s0" => "s2".into(),
            "s1" => "s0".into(),
            _ => "s1".into(),
        });
        let cfg = ScoreConfig::default();
        let a = run(&reference, &hypothesis, &cfg);
        let b = run(&reference, &permuted, &cfg);
        assert_eq!(a.overall.der_pct, b.overall.der_pct);
        assert_eq!(a.overall.speaker_error_pct, b.overall.speaker_error_pct);
    }
}

proptest! {
    // Widening the collar never increases scored time, and components
    // stay non-negative.
    #[test]
    fn collar_monotonicity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = random_timeline("rec", &mut rng, &["a", "b"], 6);
        let hypothesis = random_timeline("rec", &mut rng, &["x", "y"], 6);
        let mut prev = f64::INFINITY;
        for collar in [0.0, 0.1, 0.25, 0.5, 1.0] {
            let cfg = ScoreConfig { collar, score_overlap: false };
            let report = run(&reference, &hypothesis, &cfg);
            prop_assert!(report.overall.scored_speech_s <= prev + 1e-9);
            prev = report.overall.scored_speech_s;
            prop_assert!(report.overall.missed_pct >= 0.0);
            prop_assert!(report.overall.false_alarm_pct >= 0.0);
            prop_assert!(report.overall.speaker_error_pct >= 0.0);
        }
    }
}
