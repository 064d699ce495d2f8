//! Multi-head self-attentive temporal pooling with the modified penalty
//! term, turning frame-level d-vectors into window-level d-vectors.

use rand::Rng;

use crate::nets::{NetError, Result};
use crate::numerics::{Tape, Var};
use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};

/// Configuration for one self-attentive structure.
#[derive(Debug, Clone)]
pub struct PoolingConfig {
    /// Number of output heads G.
    pub heads: usize,
    /// Attention hidden size (columns of W1, rows of W2).
    pub hidden: usize,
    /// Per-head smoothness coefficients λ_g for the penalty term.
    pub lambda: Vec<f64>,
    /// Penalty coefficient μ.
    pub mu: f64,
    /// Input subsample stride (1 keeps every frame-level d-vector).
    pub stride: usize,
}

impl PoolingConfig {
    pub fn new(heads: usize, hidden: usize, stride: usize) -> Self {
        Self { heads, hidden, lambda: default_lambda(heads), mu: 0.05, stride }
    }

    pub fn full(stride: usize) -> Self {
        Self::new(5, 64, stride)
    }

    pub fn tiny(stride: usize) -> Self {
        Self::new(5, 16, stride)
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.stride == 0 {
            return Err(NetError::Config("pooling heads and stride must be ≥ 1".into()));
        }
        if self.lambda.len() != self.heads {
            return Err(NetError::Config(format!(
                "λ has {} entries for {} heads",
                self.lambda.len(),
                self.heads
            )));
        }
        if self.lambda.iter().any(|l| *l <= 0.0) {
            return Err(NetError::Config("λ entries must be positive".into()));
        }
        Ok(())
    }
}

/// Mix of spiky and smooth heads: the first ⌈3G/5⌉ coefficients are 1
/// (sparse, spiky annotation vectors), the rest 1/G (evenly distributed).
pub fn default_lambda(heads: usize) -> Vec<f64> {
    let ones = (3 * heads).div_ceil(5);
    (0..heads)
        .map(|g| if g < ones { 1.0 } else { 1.0 / heads as f64 })
        .collect()
}

/// Output of one self-attentive pooling pass.
pub struct Pooled<'t, T: Scalar> {
    /// Annotation matrix A, T×G, columns sum to one.
    pub annotation: Var<'t, T>,
    /// Integrated vectors E, G×N (one row per head).
    pub heads: Var<'t, T>,
    /// Window-level d-vector: concatenation of the head rows (G·N).
    pub embedding: Var<'t, T>,
}

pub fn register_pooling<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_dim: usize,
    cfg: &PoolingConfig,
    rng: &mut impl Rng,
) {
    store.insert_xavier(&format!("{prefix}.w1"), in_dim, cfg.hidden, rng);
    store.insert_xavier(&format!("{prefix}.w2"), cfg.hidden, cfg.heads, rng);
}

/// Keeps rows 0, stride, 2·stride, … of a frame matrix.
pub fn subsample<'t, T: Scalar>(h: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
    if stride == 0 {
        return Err(NetError::Config("stride must be ≥ 1".into()));
    }
    if stride == 1 {
        return Ok(h);
    }
    let rows: Vec<usize> = (0..h.shape()[0]).step_by(stride).collect();
    Ok(h.select_rows(&rows)?)
}

/// A = SoftmaxColumns(tanh(H·W1)·W2); E = Aᵀ·H; e = Vector(Eᵀ), i.e. the
/// concatenation ê₁‖…‖ê_G. Subsampling by `cfg.stride` is applied first.
pub fn self_attentive_pool<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    h: Var<'t, T>,
    cfg: &PoolingConfig,
) -> Result<Pooled<'t, T>> {
    cfg.validate()?;
    let h = subsample(h, cfg.stride)?;
    let w1 = tape.param(store, &format!("{prefix}.w1"))?;
    let w2 = tape.param(store, &format!("{prefix}.w2"))?;
    let annotation = h.matmul(w1)?.tanh()?.matmul(w2)?.softmax_columns()?;
    let heads = annotation.transpose()?.matmul(h)?;
    let embedding = heads.vectorize()?;
    Ok(Pooled { annotation, heads, embedding })
}

/// Penalty μ·‖AᵀA − diag(λ)‖²_F, added to the training loss. Each λ_g
/// controls whether head g is pushed spiky (λ=1) or smooth (λ=1/T-ish).
pub fn attention_penalty<'t, T: Scalar>(
    tape: &'t Tape<T>,
    annotation: Var<'t, T>,
    lambda: &[f64],
    mu: f64,
) -> Result<Var<'t, T>> {
    let heads = annotation.shape()[1];
    if lambda.len() != heads {
        return Err(NetError::Config(format!(
            "λ has {} entries for {} annotation columns",
            lambda.len(),
            heads
        )));
    }
    let target = crate::numerics::Tensor::diag(
        &lambda.iter().map(|l| lit::<T>(*l)).collect::<Vec<_>>(),
    );
    let ata = annotation.transpose()?.matmul(annotation)?;
    let diff = ata.sub(tape.constant(target))?;
    Ok(diff.frob_sq()?.scale(lit::<T>(mu))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{ParamStore, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    fn pooled_store(in_dim: usize, cfg: &PoolingConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        register_pooling(&mut store, "pool.t", in_dim, cfg, &mut rng);
        store
    }

    #[test]
    fn lambda_rule_matches_five_head_default() {
        assert_eq!(default_lambda(5), vec![1.0, 1.0, 1.0, 0.2, 0.2]);
        assert_eq!(default_lambda(1), vec![1.0]);
        assert_eq!(default_lambda(2), vec![1.0, 1.0]);
        assert_eq!(default_lambda(10), vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 0.1]);
    }

    #[test]
    fn zero_w2_pools_to_column_means() {
        let cfg = PoolingConfig::new(3, 4, 1);
        let mut store = pooled_store(2, &cfg, 1);
        store.get_mut("pool.t.w2").unwrap().values.iter_mut().for_each(|v| *v = 0.0);
        let tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 6.0, 60.0]).unwrap());
        let pooled = self_attentive_pool(&tape, &store, "pool.t", h, &cfg).unwrap();
        let e = pooled.heads.value();
        for g in 0..3 {
            assert!((e.at(g, 0) - 3.0).abs() < 1e-12);
            assert!((e.at(g, 1) - 30.0).abs() < 1e-12);
        }
    }

    #[test]
    fn five_heads_on_128_dims_give_640_dim_embedding() {
        let cfg = PoolingConfig::full(1);
        let store = pooled_store(128, &cfg, 2);
        let tape = Tape::new();
        let h = tape.constant(random_matrix(200, 128, 3));
        let pooled = self_attentive_pool(&tape, &store, "pool.t", h, &cfg).unwrap();
        assert_eq!(pooled.embedding.shape(), vec![640]);
        assert_eq!(pooled.annotation.shape(), vec![200, 5]);
    }

    #[test]
    fn hand_case_matches_direct_evaluation() {
        // T=3, N=2, hidden=2, G=2 with hand-set weights.
        let cfg = PoolingConfig { heads: 2, hidden: 2, lambda: vec![1.0, 0.5], mu: 0.05, stride: 1 };
        let mut store = ParamStore::new();
        let w1 = vec![0.3, -0.2, 0.15, 0.4];
        let w2 = vec![0.7, -0.1, 0.2, 0.5];
        store.insert("pool.t.w1", &[2, 2], w1.clone());
        store.insert("pool.t.w2", &[2, 2], w2.clone());
        let hdata = vec![1.0, 0.5, -0.75, 0.25, 0.1, -0.4];
        let tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![3, 2], hdata.clone()).unwrap());
        let pooled = self_attentive_pool(&tape, &store, "pool.t", h, &cfg).unwrap();

        // Direct evaluation with plain loops.
        let mut scores = [[0.0f64; 2]; 3];
        for t in 0..3 {
            let (h0, h1) = (hdata[2 * t], hdata[2 * t + 1]);
            let a0 = (h0 * w1[0] + h1 * w1[2]).tanh();
            let a1 = (h0 * w1[1] + h1 * w1[3]).tanh();
            scores[t][0] = a0 * w2[0] + a1 * w2[2];
            scores[t][1] = a0 * w2[1] + a1 * w2[3];
        }
        let mut a = [[0.0f64; 2]; 3];
        for g in 0..2 {
            let mx = scores.iter().map(|r| r[g]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = scores.iter().map(|r| (r[g] - mx).exp()).sum();
            for t in 0..3 {
                a[t][g] = (scores[t][g] - mx).exp() / total;
            }
        }
        let got_a = pooled.annotation.value();
        for t in 0..3 {
            for g in 0..2 {
                assert!((got_a.at(t, g) - a[t][g]).abs() < 1e-12);
            }
        }
        let got_e = pooled.heads.value();
        for g in 0..2 {
            for n in 0..2 {
                let want: f64 = (0..3).map(|t| a[t][g] * hdata[2 * t + n]).sum();
                assert!((got_e.at(g, n) - want).abs() < 1e-12);
            }
        }
        // e is the concatenation ê₁‖ê₂.
        let e = pooled.embedding.value();
        assert_eq!(e.data()[0], got_e.at(0, 0));
        assert_eq!(e.data()[3], got_e.at(1, 1));
    }

    #[test]
    fn annotation_columns_sum_to_one_and_heads_stay_in_hull() {
        let cfg = PoolingConfig::new(4, 8, 1);
        let store = pooled_store(6, &cfg, 9);
        let tape = Tape::new();
        let hdata = random_matrix(15, 6, 10);
        let h = tape.constant(hdata.clone());
        let pooled = self_attentive_pool(&tape, &store, "pool.t", h, &cfg).unwrap();
        let a = pooled.annotation.value();
        for g in 0..4 {
            let sum: f64 = (0..15).map(|t| a.at(t, g)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let e = pooled.heads.value();
        for n in 0..6 {
            let col: Vec<f64> = (0..15).map(|t| hdata.at(t, n)).collect();
            let (lo, hi) = (
                col.iter().copied().fold(f64::INFINITY, f64::min),
                col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            );
            for g in 0..4 {
                let v = e.at(g, n);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "ê[{g},{n}]={v} outside [{lo},{hi}]");
            }
        }
    }

    #[test]
    fn subsample_strides() {
        let tape = Tape::new();
        let h = tape.constant(random_matrix(200, 3, 5));
        assert_eq!(subsample(h, 1).unwrap().shape(), vec![200, 3]);
        assert_eq!(subsample(h, 10).unwrap().shape(), vec![20, 3]);

        let h7 = tape.constant(Tensor::new(vec![7, 1], (0..7).map(|i| i as f64).collect()).unwrap());
        let s = subsample(h7, 3).unwrap().value();
        assert_eq!(s.data(), &[0.0, 3.0, 6.0]);
    }

    #[test]
    fn penalty_zero_at_one_hot_with_unit_lambda() {
        let tape = Tape::new();
        let mut col = vec![0.0; 6];
        col[0] = 1.0;
        let a = tape.constant(Tensor::new(vec![6, 1], col).unwrap());
        let p = attention_penalty(&tape, a, &[1.0], 0.05).unwrap();
        assert_eq!(p.scalar_value(), 0.0);
    }

    #[test]
    fn penalty_zero_at_uniform_with_inverse_t_lambda() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![5, 1], vec![0.2; 5]).unwrap());
        let p = attention_penalty(&tape, a, &[0.2], 0.05).unwrap();
        assert!(p.scalar_value().abs() < 1e-30);
    }

    #[test]
    fn penalty_matches_frobenius_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // Random column-stochastic 4×2 annotation matrix.
        let mut cols = [[0.0f64; 4]; 2];
        for col in cols.iter_mut() {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            for (slot, v) in col.iter_mut().zip(&raw) {
                *slot = v / total;
            }
        }
        let mut data = vec![0.0; 8];
        for t in 0..4 {
            for g in 0..2 {
                data[t * 2 + g] = cols[g][t];
            }
        }
        let lambda = [1.0, 0.2];
        let mu = 0.05;

        // Oracle: explicit AᵀA, then squared Frobenius norm of the residual.
        let mut ata = [[0.0f64; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                ata[i][j] = (0..4).map(|t| cols[i][t] * cols[j][t]).sum();
            }
        }
        let mut frob = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let target = if i == j { lambda[i] } else { 0.0 };
                frob += (ata[i][j] - target).powi(2);
            }
        }

        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![4, 2], data).unwrap());
        let p = attention_penalty(&tape, a, &lambda, mu).unwrap();
        assert!((p.scalar_value() - mu * frob).abs() < 1e-12);
    }

    #[test]
    fn penalty_positive_away_from_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let rows = rng.gen_range(2..8);
            let heads = rng.gen_range(1..4usize);
            let mut data = vec![0.0f64; rows * heads];
            for g in 0..heads {
                let raw: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                for t in 0..rows {
                    data[t * heads + g] = raw[t] / total;
                }
            }
            let lambda = vec![1.0; heads];
            let tape = Tape::new();
            let a = tape.constant(Tensor::new(vec![rows, heads], data).unwrap());
            let p = attention_penalty(&tape, a, &lambda, 0.05).unwrap().scalar_value();
            assert!(p > 0.0, "random stochastic A columns are never exactly one-hot");
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let cfg = PoolingConfig::new(2, 3, 1);
        let store = pooled_store(4, &cfg, 31);
        let hdata = random_matrix(6, 4, 33);
        let report = crate::gradcheck::check_params(&store, 20, 1e-5, 7, |tape, p| {
            let h = tape.constant(hdata.clone());
            let pooled = self_attentive_pool(tape, p, "pool.t", h, &cfg)
                .map_err(|e| crate::numerics::NumericsError::ShapeMismatch {
                    op: "pool",
                    detail: e.to_string(),
                })?;
            let pen = attention_penalty(tape, pooled.annotation, &cfg.lambda, cfg.mu)
                .map_err(|e| crate::numerics::NumericsError::ShapeMismatch {
                    op: "penalty",
                    detail: e.to_string(),
                })?;
            // Penalty plus a data term so both paths carry gradient.
            let data_term = pooled.embedding.hadamard(pooled.embedding)?.sum()?;
            pen.add(data_term)
        })
        .unwrap();
        assert!(report.passes(1e-5), "max rel err {:e}", report.max_rel_err);
    }

    #[test]
    fn lambda_length_mismatch_is_config_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![3, 2], vec![0.5, 0.5, 0.3, 0.3, 0.2, 0.2]).unwrap());
        assert!(matches!(
            attention_penalty(&tape, a, &[1.0], 0.05),
            Err(NetError::Config(_))
        ));
    }
}
