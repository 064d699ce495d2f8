//! Spectral clustering of window-level embeddings with cosine affinity,
//! eigengap cluster-count selection, and segment-level cluster assignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;
use crate::scalar::{lit, Scalar};
use crate::timeline::{Interval, Timeline};

const KMEANS_RESTARTS: usize = 50;
const KMEANS_MAX_ITERS: usize = 100;
const REFINE_ATTENUATION: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("need at least 2 embeddings, got {0}")]
    TooFew(usize),
    #[error("zero-norm embedding at index {0}")]
    ZeroNorm(usize),
    #[error("embedding dimensions differ")]
    RaggedInput,
}

pub type Result<V> = std::result::Result<V, ClusterError>;

/// Clustering outcome for one recording's windows.
#[derive(Debug, Clone)]
pub struct ClusterResult<T> {
    /// Per-window cluster id in 0..k.
    pub labels: Vec<usize>,
    /// Unit-normalized mean of each cluster's member embeddings.
    pub centroids: Vec<Vec<T>>,
    pub k: usize,
    /// Ascending Laplacian eigenvalues, kept for diagnostics.
    pub eigenvalues: Vec<T>,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// A[i,j] = (1 + cos(xᵢ,xⱼ))/2, mapped into [0,1]; A[i,i] = 1.
pub fn cosine_affinity<T: Scalar>(embeddings: &[Vec<T>]) -> Result<Tensor<T>> {
    let n = embeddings.len();
    if n < 2 {
        return Err(ClusterError::TooFew(n));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(ClusterError::RaggedInput);
    }
    let norms: Vec<T> = embeddings.iter().map(|e| norm(e)).collect();
    if let Some(i) = norms.iter().position(|n| *n == T::zero()) {
        return Err(ClusterError::ZeroNorm(i));
    }
    let half = lit::<T>(0.5);
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        a.data_mut()[i * n + i] = T::one();
        for j in i + 1..n {
            let cos = dot(&embeddings[i], &embeddings[j]) / (norms[i] * norms[j]);
            let v = (T::one() + cos) * half;
            a.data_mut()[i * n + j] = v;
            a.data_mut()[j * n + i] = v;
        }
    }
    Ok(a)
}

/// Row-wise soft thresholding: entries below p·(row max) are attenuated,
/// the result is symmetrized by elementwise max and the diagonal restored.
pub fn refine_affinity<T: Scalar>(affinity: &Tensor<T>, p: f64) -> Tensor<T> {
    let n = affinity.rows();
    let p = lit::<T>(p);
    let atten = lit::<T>(REFINE_ATTENUATION);
    let mut out = affinity.clone();
    for i in 0..n {
        let row_max = (0..n)
            .map(|j| affinity.at(i, j))
            .fold(T::neg_infinity(), T::max);
        let threshold = p * row_max;
        for j in 0..n {
            if affinity.at(i, j) < threshold {
                out.data_mut()[i * n + j] = affinity.at(i, j) * atten;
            }
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let v = out.at(i, j).max(out.at(j, i));
            out.data_mut()[i * n + j] = v;
            out.data_mut()[j * n + i] = v;
        }
        out.data_mut()[i * n + i] = T::one();
    }
    out
}

/// Symmetric normalized Laplacian L = I − D^{−1/2}·A·D^{−1/2}.
pub fn normalized_laplacian<T: Scalar>(affinity: &Tensor<T>) -> Tensor<T> {
    let n = affinity.rows();
    let inv_sqrt: Vec<T> = (0..n)
        .map(|i| {
            let d: T = (0..n).map(|j| affinity.at(i, j)).sum();
            T::one() / d.sqrt()
        })
        .collect();
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let norm = inv_sqrt[i] * affinity.at(i, j) * inv_sqrt[j];
            let eye = if i == j { T::one() } else { T::zero() };
            l.data_mut()[i * n + j] = eye - norm;
        }
    }
    l
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (ascending eigenvalues, eigenvectors as columns in matching order).
pub fn symmetric_eigen<T: Scalar>(mat: &Tensor<T>) -> (Vec<T>, Tensor<T>) {
    let n = mat.rows();
    let mut a = mat.clone();
    let mut v = Tensor::zeros(&[n, n]);
    for i in 0..n {
        v.data_mut()[i * n + i] = T::one();
    }
    let tol = lit::<T>(1e-14);
    let scale: T = mat.data().iter().map(|x| *x * *x).sum::<T>().sqrt().max(T::one());
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                off += a.at(i, j) * a.at(i, j);
            }
        }
        if off.sqrt() <= tol * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq == T::zero() {
                    continue;
                }
                let app = a.at(p, p);
                let aqq = a.at(q, q);
                let theta = (aqq - app) / (lit::<T>(2.0) * apq);
                let t = {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    a.data_mut()[k * n + p] = c * akp - s * akq;
                    a.data_mut()[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    a.data_mut()[p * n + k] = c * apk - s * aqk;
                    a.data_mut()[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.data_mut()[k * n + p] = c * vkp - s * vkq;
                    v.data_mut()[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.at(i, i).partial_cmp(&a.at(j, j)).expect("finite eigenvalues"));
    let eigenvalues: Vec<T> = order.iter().map(|&i| a.at(i, i)).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            vectors.data_mut()[row * n + new_col] = v.at(row, old_col);
        }
    }
    (eigenvalues, vectors)
}

fn kmeans_once<T: Scalar>(
    rows: &[Vec<T>],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, T) {
    let n = rows.len();
    let dim = rows[0].len();
    let sqdist = |a: &[T], b: &[T]| -> T {
        a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum()
    };

    // k-means++ seeding.
    let mut centroids: Vec<Vec<T>> = Vec::with_capacity(k);
    centroids.push(rows[rng.gen_range(0..n)].clone());
    while centroids.len() < k {
        let d2: Vec<T> = rows
            .iter()
            .map(|r| {
                centroids
                    .iter()
                    .map(|c| sqdist(r, c))
                    .fold(T::infinity(), T::min)
            })
            .collect();
        let total: T = d2.iter().copied().sum();
        let next = if total > T::zero() {
            let mut target = lit::<T>(rng.gen::<f64>()) * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target <= *d {
                    chosen = i;
                    break;
                }
                target -= *d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(rows[next].clone());
    }

    let mut labels = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let mut best = 0;
            let mut best_d = T::infinity();
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sqdist(r, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        // Rebuild centroids; an emptied cluster takes the point farthest
        // from its current centroid (first maximum, deterministic).
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![T::zero(); dim]; k];
        for (i, r) in rows.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, x) in sums[labels[i]].iter_mut().zip(r) {
                *s += *x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sqdist(&rows[a], &centroids[labels[a]])
                            .partial_cmp(&sqdist(&rows[b], &centroids[labels[b]]))
                            .expect("finite distances")
                    })
                    .expect("non-empty rows");
                labels[far] = c;
                counts[c] = 1;
                changed = true;
                sums[c] = rows[far].clone();
            }
        }
        for c in 0..k {
            let count = lit::<T>(counts[c] as f64);
            for (slot, s) in centroids[c].iter_mut().zip(&sums[c]) {
                *slot = *s / count;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia: T = rows
        .iter()
        .zip(&labels)
        .map(|(r, &l)| sqdist(r, &centroids[l]))
        .sum();
    (labels, inertia)
}

fn kmeans_best<T: Scalar>(rows: &[Vec<T>], k: usize, seed: u64) -> Vec<usize> {
    let mut best: Option<(Vec<usize>, T)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (restart as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let (labels, inertia) = kmeans_once(rows, k, &mut rng);
        let better = match &best {
            None => true,
            Some((_, best_inertia)) => inertia < *best_inertia,
        };
        if better {
            best = Some((labels, inertia));
        }
    }
    best.expect("at least one restart").0
}

/// Eigengap cluster-count selection followed by spectral k-means.
///
/// The count is the k in [2, k_max] maximizing λ_{k+1} − λ_k over the
/// ascending Laplacian eigenvalues, clamped to the number of windows.
pub fn choose_k_and_cluster<T: Scalar>(
    affinity: &Tensor<T>,
    embeddings: &[Vec<T>],
    k_max: usize,
    seed: u64,
) -> Result<ClusterResult<T>> {
    let n = affinity.rows();
    if n < 2 {
        return Err(ClusterError::TooFew(n));
    }
    let laplacian = normalized_laplacian(affinity);
    let (eigenvalues, vectors) = symmetric_eigen(&laplacian);

    // Gap between λ_{k+1} and λ_k (1-based), for k in [2, min(k_max, n−1)];
    // the floor keeps the count greater than one.
    let hi = k_max.min(n - 1);
    let mut k = 2usize;
    let mut best_gap = T::neg_infinity();
    for cand in 2..=hi {
        let gap = eigenvalues[cand] - eigenvalues[cand - 1];
        if gap > best_gap {
            best_gap = gap;
            k = cand;
        }
    }
    let k = k.min(n);

    // Spectral embedding: rows of the first k eigenvector columns,
    // row-normalized.
    let rows: Vec<Vec<T>> = (0..n)
        .map(|i| {
            let mut row: Vec<T> = (0..k).map(|c| vectors.at(i, c)).collect();
            let m = norm(&row);
            if m > T::zero() {
                row.iter_mut().for_each(|v| *v /= m);
            }
            row
        })
        .collect();
    let raw_labels = kmeans_best(&rows, k, seed);

    // Relabel clusters by first appearance for a stable output order.
    let mut mapping: Vec<Option<usize>> = vec![None; k];
    let mut next = 0usize;
    let mut labels = Vec::with_capacity(n);
    for &raw in &raw_labels {
        let id = *mapping[raw].get_or_insert_with(|| {
            let id = next;
            next += 1;
            id
        });
        labels.push(id);
    }

    let dim = embeddings[0].len();
    let mut centroids = vec![vec![T::zero(); dim]; next];
    let mut counts = vec![0usize; next];
    for (e, &l) in embeddings.iter().zip(&labels) {
        counts[l] += 1;
        for (c, x) in centroids[l].iter_mut().zip(e) {
            *c += *x;
        }
    }
    for (c, &count) in centroids.iter_mut().zip(&counts) {
        let count = lit::<T>(count as f64);
        c.iter_mut().for_each(|v| *v /= count);
        let m = norm(c);
        if m > T::zero() {
            c.iter_mut().for_each(|v| *v /= m);
        }
    }
    Ok(ClusterResult { labels, centroids, k: next, eigenvalues })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n == 0 {
        return 1.0;
    }
    let ka = a.iter().max().map(|m| m + 1).unwrap_or(0);
    let kb = b.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let comb2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_a: f64 = table.iter().map(|row| comb2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| comb2(table.iter().map(|row| row[j]).sum()))
        .sum();
    let total = comb2(n as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-15 {
        return 1.0;
    }
    (sum_ij - expected) / (max_index - expected)
}

// ── Segment assignment ───────────────────────────────────────────────

/// How window cluster labels become output segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignMode {
    /// Each speaker-homogeneous segment takes the cluster nearest (by
    /// cosine) to the mean of its windows' embeddings.
    SegmentLevel,
    /// Each window keeps its own label; windows become the segments, with
    /// overlap halves split at window midpoints.
    WindowLevel,
}

/// Diarisation output: cluster-labeled timeline plus per-window
/// diagnostics.
#[derive(Debug, Clone)]
pub struct DiarizationHypothesis {
    pub timeline: Timeline,
    pub window_spans: Vec<(f64, f64)>,
    pub window_labels: Vec<usize>,
    pub window_embeddings: Vec<Vec<f64>>,
}

fn cluster_label(id: usize) -> String {
    format!("spk{id}")
}

/// Maps clustered windows back onto segments.
///
/// `window_segment[i]` is the index into `segments` owning window i, and
/// `window_spans[i]` its actual (unpadded) time span.
pub fn assign_segments(
    segments: &Timeline,
    window_segment: &[usize],
    window_spans: &[(f64, f64)],
    embeddings: &[Vec<f64>],
    clusters: &ClusterResult<f64>,
    mode: AssignMode,
) -> DiarizationHypothesis {
    assert_eq!(window_segment.len(), embeddings.len());
    assert_eq!(window_spans.len(), embeddings.len());
    let mut timeline = Timeline::new(segments.recording.clone());

    match mode {
        AssignMode::SegmentLevel => {
            for (seg_idx, segment) in segments.entries().iter().enumerate() {
                let members: Vec<usize> = window_segment
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| s == seg_idx)
                    .map(|(w, _)| w)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let dim = embeddings[members[0]].len();
                let mut mean = vec![0.0f64; dim];
                for &w in &members {
                    for (m, x) in mean.iter_mut().zip(&embeddings[w]) {
                        *m += *x;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= members.len() as f64);
                // Nearest centroid by cosine; ties go to the lower id.
                let mean_norm = norm(&mean).max(1e-300);
                let mut best = 0usize;
                let mut best_cos = f64::NEG_INFINITY;
                for (c, centroid) in clusters.centroids.iter().enumerate() {
                    let cos = dot(&mean, centroid) / mean_norm;
                    if cos > best_cos {
                        best_cos = cos;
                        best = c;
                    }
                }
                timeline.push(Interval::new(segment.start, segment.end, cluster_label(best)));
            }
        }
        AssignMode::WindowLevel => {
            for (seg_idx, segment) in segments.entries().iter().enumerate() {
                let mut members: Vec<usize> = window_segment
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| s == seg_idx)
                    .map(|(w, _)| w)
                    .collect();
                members.sort_by(|&a, &b| window_spans[a].0.total_cmp(&window_spans[b].0));
                if members.is_empty() {
                    continue;
                }
                // Ownership boundary between consecutive windows is the
                // midpoint of their overlap region.
                let mut pieces: Vec<(f64, f64, usize)> = Vec::new();
                for (pos, &w) in members.iter().enumerate() {
                    let start = if pos == 0 {
                        segment.start
                    } else {
                        let prev = members[pos - 1];
                        (window_spans[prev].1 + window_spans[w].0) / 2.0
                    };
                    let end = if pos + 1 == members.len() {
                        segment.end
                    } else {
                        let next = members[pos + 1];
                        (window_spans[w].1 + window_spans[next].0) / 2.0
                    };
                    if end > start {
                        pieces.push((start, end, clusters.labels[w]));
                    }
                }
                // Merge adjacent same-label pieces.
                let mut merged: Vec<(f64, f64, usize)> = Vec::new();
                for piece in pieces {
                    match merged.last_mut() {
                        Some(last) if last.2 == piece.2 && (piece.0 - last.1).abs() < 1e-9 => {
                            last.1 = piece.1;
                        }
                        _ => merged.push(piece),
                    }
                }
                for (start, end, label) in merged {
                    timeline.push(Interval::new(start, end, cluster_label(label)));
                }
            }
        }
    }

    DiarizationHypothesis {
        timeline,
        window_spans: window_spans.to_vec(),
        window_labels: clusters.labels.clone(),
        window_embeddings: embeddings.to_vec(),
    }
}

#[cfg(test)]
mod tests;
