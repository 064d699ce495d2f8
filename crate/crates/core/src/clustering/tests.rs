use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Spherical Gaussian clouds around well-separated unit directions, with
/// centroid separation `sep_over_sigma` times the within-cloud sigma.
fn gaussian_clouds(
    k: usize,
    per_cloud: usize,
    dim: usize,
    sep_over_sigma: f64,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = move || {
        // Box–Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    // Orthogonal-ish centroids: random Gaussian directions, Gram-Schmidt.
    let mut centers: Vec<Vec<f64>> = Vec::new();
    while centers.len() < k {
        let mut c: Vec<f64> = (0..dim).map(|_| gauss()).collect();
        for prev in &centers {
            let proj = dot(&c, prev);
            for (x, p) in c.iter_mut().zip(prev) {
                *x -= proj * p;
            }
        }
        if norm(&c) > 1e-6 {
            centers.push(unit(c));
        }
    }
    // Unit-norm centroids are 2·sin(45°)≈1.41 apart; scale sigma to match
    // the requested separation ratio.
    let sigma = std::f64::consts::SQRT_2 / sep_over_sigma;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (ci, center) in centers.iter().enumerate() {
        for _ in 0..per_cloud {
            let p: Vec<f64> = center.iter().map(|c| c + sigma * gauss()).collect();
            points.push(p);
            labels.push(ci);
        }
    }
    (points, labels)
}

#[test]
fn affinity_extremes() {
    let a = vec![1.0f64, 0.0];
    let spread = vec![
        a.clone(),
        a.clone(),
        vec![-1.0, 0.0],
        vec![0.0, 1.0],
    ];
    let aff = cosine_affinity(&spread).unwrap();
    assert!((aff.at(0, 1) - 1.0).abs() < 1e-15, "identical vectors");
    assert!(aff.at(0, 2).abs() < 1e-15, "antipodal vectors");
    assert!((aff.at(0, 3) - 0.5).abs() < 1e-15, "orthogonal vectors");
    assert_eq!(aff.at(2, 2), 1.0);
}

#[test]
fn affinity_rejects_zero_norm() {
    let embeddings = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
    assert!(matches!(
        cosine_affinity(&embeddings),
        Err(ClusterError::ZeroNorm(1))
    ));
}

#[test]
fn affinity_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let embeddings: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let scaled: Vec<Vec<f64>> = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| e.iter().map(|x| x * (i + 1) as f64 * 0.37).collect())
        .collect();
    let a = cosine_affinity(&embeddings).unwrap();
    let b = cosine_affinity(&scaled).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn refine_with_vanishing_threshold_only_symmetrizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let embeddings: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let a = cosine_affinity(&embeddings).unwrap();
    let r = refine_affinity(&a, 1e-9);
    for (x, y) in a.data().iter().zip(r.data()) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn refine_output_is_symmetric_with_unit_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let embeddings: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let r = refine_affinity(&cosine_affinity(&embeddings).unwrap(), 0.6);
    let n = r.rows();
    for i in 0..n {
        assert_eq!(r.at(i, i), 1.0);
        for j in 0..n {
            assert!((r.at(i, j) - r.at(j, i)).abs() < 1e-15);
        }
    }
}

#[test]
fn refine_keeps_two_block_structure_dominant() {
    // Two tight bundles of directions: in-block affinity near 1,
    // cross-block near 0.5.
    let block_a = vec![unit(vec![1.0, 0.02, 0.0]), unit(vec![1.0, -0.02, 0.01]), unit(vec![1.0, 0.0, -0.02])];
    let block_b = vec![unit(vec![0.0, 0.02, 1.0]), unit(vec![0.01, -0.02, 1.0]), unit(vec![-0.01, 0.0, 1.0])];
    let all: Vec<Vec<f64>> = block_a.into_iter().chain(block_b).collect();
    let refined = refine_affinity(&cosine_affinity(&all).unwrap(), 0.8);
    for i in 0..3 {
        for j in 0..3 {
            let within = refined.at(i, j);
            let across = refined.at(i, j + 3);
            assert!(within > 10.0 * across, "within {within} across {across}");
        }
    }
}

#[test]
fn laplacian_spectrum_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let embeddings: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let a = cosine_affinity(&embeddings).unwrap();
    let (eigs, _) = symmetric_eigen(&normalized_laplacian(&a));
    assert!(eigs[0].abs() < 1e-9, "smallest eigenvalue {}", eigs[0]);
    for &e in &eigs {
        assert!((-1e-9..=2.0 + 1e-9).contains(&e), "eigenvalue {e} out of [0,2]");
    }
}

#[test]
fn jacobi_matches_hand_eigenvalues() {
    let m = Tensor::new(vec![2, 2], vec![2.0f64, 1.0, 1.0, 2.0]).unwrap();
    let (eigs, vecs) = symmetric_eigen(&m);
    assert!((eigs[0] - 1.0).abs() < 1e-12);
    assert!((eigs[1] - 3.0).abs() < 1e-12);
    // Columns are unit eigenvectors: A·v = λ·v.
    for (col, &lambda) in eigs.iter().enumerate() {
        let v = [vecs.at(0, col), vecs.at(1, col)];
        let av = [2.0 * v[0] + v[1], v[0] + 2.0 * v[1]];
        assert!((av[0] - lambda * v[0]).abs() < 1e-10);
        assert!((av[1] - lambda * v[1]).abs() < 1e-10);
    }
}

#[test]
fn two_exact_blocks_split_perfectly() {
    let embeddings: Vec<Vec<f64>> = (0..8)
        .map(|i| {
            if i < 4 {
                vec![1.0, 0.0, 0.0]
            } else {
                vec![0.0, 0.0, 1.0]
            }
        })
        .collect();
    let a = cosine_affinity(&embeddings).unwrap();
    let result = choose_k_and_cluster(&refine_affinity(&a, 0.4), &embeddings, 10, 7).unwrap();
    assert_eq!(result.k, 2);
    assert_eq!(&result.labels[..4], &[0, 0, 0, 0]);
    assert_eq!(&result.labels[4..], &[1, 1, 1, 1]);
}

#[test]
fn gaussian_clouds_recover_k_and_ari() {
    for k in [2usize, 3, 4, 5] {
        let (points, truth) = gaussian_clouds(k, 20, 16, 10.0, 100 + k as u64);
        let a = cosine_affinity(&points).unwrap();
        let refined = refine_affinity(&a, 0.4);
        let result = choose_k_and_cluster(&refined, &points, 10, 13).unwrap();
        assert_eq!(result.k, k, "eigengap picked {} for {k} clouds", result.k);
        let ari = adjusted_rand_index(&result.labels, &truth);
        assert!((ari - 1.0).abs() < 1e-12, "ARI {ari} for k={k}");
    }
}

#[test]
fn single_tight_cloud_hits_the_k_floor() {
    let (points, _) = gaussian_clouds(1, 30, 8, 10.0, 77);
    let a = cosine_affinity(&points).unwrap();
    let result = choose_k_and_cluster(&refine_affinity(&a, 0.4), &points, 10, 5).unwrap();
    assert_eq!(result.k, 2, "count stays greater than one");
}

#[test]
fn clustering_is_rotation_invariant() {
    let (points, _) = gaussian_clouds(3, 10, 6, 10.0, 31);
    // Random orthogonal matrix via Gram–Schmidt on a Gaussian matrix.
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let dim = 6;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen::<f64>();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        for prev in &basis {
            let proj = dot(&v, prev);
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= proj * p;
            }
        }
        if norm(&v) > 1e-8 {
            basis.push(unit(v));
        }
    }
    let rotate = |p: &Vec<f64>| -> Vec<f64> { basis.iter().map(|row| dot(row, p)).collect() };
    let rotated: Vec<Vec<f64>> = points.iter().map(rotate).collect();

    let a = cosine_affinity(&points).unwrap();
    let b = cosine_affinity(&rotated).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12, "affinity moved under rotation");
    }
    let ra = choose_k_and_cluster(&refine_affinity(&a, 0.4), &points, 10, 99).unwrap();
    let rb = choose_k_and_cluster(&refine_affinity(&b, 0.4), &rotated, 10, 99).unwrap();
    assert_eq!(ra.labels, rb.labels);
}

#[test]
fn ari_known_values() {
    assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
    assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]), 1.0);
    let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
    assert!(ari < 0.01, "independent labelings score near zero, got {ari}");
}

// ── assign_segments ──────────────────────────────────────────────────

use crate::timeline::{Interval, Timeline};

fn clusters_with_centroids(centroids: Vec<Vec<f64>>, labels: Vec<usize>) -> ClusterResult<f64> {
    ClusterResult { k: centroids.len(), centroids, labels, eigenvalues: vec![] }
}

#[test]
fn segment_takes_its_windows_cluster() {
    let mut segments = Timeline::new("rec");
    segments.push(Interval::new(0.0, 2.0, "seg"));
    let clusters = clusters_with_centroids(
        vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0]), unit(vec![1.0, 1.0])],
        vec![2, 2],
    );
    let hyp = assign_segments(
        &segments,
        &[0, 0],
        &[(0.0, 1.0), (1.0, 2.0)],
        &[unit(vec![1.0, 1.1]), unit(vec![1.1, 1.0])],
        &clusters,
        AssignMode::SegmentLevel,
    );
    assert_eq!(hyp.timeline.entries().len(), 1);
    assert_eq!(hyp.timeline.entries()[0].label, "spk2");
}

#[test]
fn equidistant_mean_takes_lower_cluster_id() {
    let mut segments = Timeline::new("rec");
    segments.push(Interval::new(0.0, 1.0, "seg"));
    let clusters = clusters_with_centroids(
        vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])],
        vec![0],
    );
    // Mean embedding along the exact bisector of the two centroids.
    let hyp = assign_segments(
        &segments,
        &[0],
        &[(0.0, 1.0)],
        &[unit(vec![1.0, 1.0])],
        &clusters,
        AssignMode::SegmentLevel,
    );
    assert_eq!(hyp.timeline.entries()[0].label, "spk0");
}

#[test]
fn window_mode_splits_overlap_at_midpoints() {
    let mut segments = Timeline::new("rec");
    segments.push(Interval::new(0.0, 4.0, "seg"));
    // Three 2 s windows at 1 s shift, labels 0,0,1.
    let clusters = clusters_with_centroids(
        vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])],
        vec![0, 0, 1],
    );
    let hyp = assign_segments(
        &segments,
        &[0, 0, 0],
        &[(0.0, 2.0), (1.0, 3.0), (2.0, 4.0)],
        &[unit(vec![1.0, 0.1]), unit(vec![1.0, 0.2]), unit(vec![0.1, 1.0])],
        &clusters,
        AssignMode::WindowLevel,
    );
    let entries = hyp.timeline.entries();
    // Windows 1 and 2 merge (same label, boundary at 1.5 swallowed),
    // window 3 owns from the 2.5 overlap midpoint.
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0].label, "spk0");
    assert!((entries[0].start - 0.0).abs() < 1e-12);
    assert!((entries[0].end - 2.5).abs() < 1e-12);
    assert_eq!(entries[1].label, "spk1");
    assert!((entries[1].start - 2.5).abs() < 1e-12);
    assert!((entries[1].end - 4.0).abs() < 1e-12);
}

#[test]
fn every_segment_appears_exactly_once() {
    let mut segments = Timeline::new("rec");
    segments.push(Interval::new(0.0, 1.0, "a"));
    segments.push(Interval::new(1.5, 3.0, "b"));
    segments.push(Interval::new(3.5, 5.0, "c"));
    let clusters = clusters_with_centroids(
        vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])],
        vec![0, 1, 0],
    );
    let hyp = assign_segments(
        &segments,
        &[0, 1, 2],
        &[(0.0, 1.0), (1.5, 3.0), (3.5, 5.0)],
        &[unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0]), unit(vec![1.0, 0.1])],
        &clusters,
        AssignMode::SegmentLevel,
    );
    assert_eq!(hyp.timeline.entries().len(), 3);
    let labels: Vec<&str> = hyp.timeline.entries().iter().map(|e| e.label.as_str()).collect();
    assert_eq!(labels, vec!["spk0", "spk1", "spk0"]);
}
