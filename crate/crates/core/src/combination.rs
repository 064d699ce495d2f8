//! c-vector structures: everything that fuses K window-level d-vectors
//! into one combined embedding. Covers plain FC fusion, both 2D
//! self-attentive types, gated additive combination, low-rank bilinear
//! pooling with shortcut connections (including the K>2 extension), and
//! the stacked SelfAtt1 → Bilinear structure.

use rand::Rng;

use crate::nets::{NetError, Result};
use crate::numerics::{Tape, Var};
use crate::params::ParamStore;
use crate::pooling::Pooled;
use crate::scalar::Scalar;

/// Bounded activation applied inside combiners.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    /// No-op transform, used by the algebra oracles.
    Identity,
}

impl Activation {
    fn apply<'t, T: Scalar>(self, v: Var<'t, T>) -> crate::numerics::Result<Var<'t, T>> {
        match self {
            Activation::Sigmoid => v.sigmoid(),
            Activation::Tanh => v.tanh(),
            Activation::Identity => Ok(v),
        }
    }
}

/// The structure used to derive a c-vector from K window-level d-vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombinerVariant {
    FcFusion,
    SelfAtt1,
    SelfAtt2,
    GatedAdd,
    BilinearSigmoid,
    BilinearTanh,
    StackedSigmoid,
    StackedTanh,
}

impl CombinerVariant {
    pub const ALL: [CombinerVariant; 8] = [
        CombinerVariant::FcFusion,
        CombinerVariant::SelfAtt1,
        CombinerVariant::SelfAtt2,
        CombinerVariant::GatedAdd,
        CombinerVariant::BilinearSigmoid,
        CombinerVariant::BilinearTanh,
        CombinerVariant::StackedSigmoid,
        CombinerVariant::StackedTanh,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CombinerVariant::FcFusion => "FCFusion",
            CombinerVariant::SelfAtt1 => "SelfAtt1",
            CombinerVariant::SelfAtt2 => "SelfAtt2",
            CombinerVariant::GatedAdd => "GatedAdd",
            CombinerVariant::BilinearSigmoid => "Bilinear_sigmoid",
            CombinerVariant::BilinearTanh => "Bilinear_tanh",
            CombinerVariant::StackedSigmoid => "Stacked_sigmoid",
            CombinerVariant::StackedTanh => "Stacked_tanh",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.name() == name)
    }

    fn bilinear_activation(&self) -> Activation {
        match self {
            CombinerVariant::BilinearSigmoid | CombinerVariant::StackedSigmoid => Activation::Sigmoid,
            _ => Activation::Tanh,
        }
    }
}

/// Hyperparameters shared by all combiner variants; dimension fields left
/// as `None` are resolved from the input d-vector sizes.
#[derive(Debug, Clone)]
pub struct CombinerConfig {
    pub variant: CombinerVariant,
    /// Output size O (default: first input dimension).
    pub output: Option<usize>,
    /// Bilinear rank D (default: first input dimension / 5).
    pub rank: Option<usize>,
    /// Hidden size of the second-level attention.
    pub att_hidden: usize,
    /// Head count of the second-level attention.
    pub att_heads: usize,
    /// Penalty coefficient for second-level annotation matrices.
    pub mu: f64,
    /// Candidate-vector activation for gated additive combination.
    pub gated_activation: Activation,
}

impl CombinerConfig {
    pub fn new(variant: CombinerVariant) -> Self {
        Self {
            variant,
            output: None,
            rank: None,
            att_hidden: 64,
            att_heads: 1,
            mu: 0.05,
            gated_activation: Activation::Tanh,
        }
    }

    pub fn tiny(variant: CombinerVariant) -> Self {
        Self { att_hidden: 16, ..Self::new(variant) }
    }

    fn resolve_output(&self, dims: &[usize]) -> usize {
        self.output.unwrap_or(dims[0])
    }

    fn resolve_rank(&self, dims: &[usize]) -> usize {
        self.rank.unwrap_or((dims[0] / 5).max(1))
    }
}

/// Shapes of the d-vector inputs a combiner is built for: for each system
/// the head count G_k and per-head dimension N_k (so e_k has G_k·N_k dims).
#[derive(Debug, Clone)]
pub struct CombinerInputs {
    pub head_shapes: Vec<(usize, usize)>,
}

impl CombinerInputs {
    pub fn new(head_shapes: Vec<(usize, usize)>) -> Self {
        Self { head_shapes }
    }

    pub fn systems(&self) -> usize {
        self.head_shapes.len()
    }

    pub fn embedding_dims(&self) -> Vec<usize> {
        self.head_shapes.iter().map(|(g, n)| g * n).collect()
    }
}

/// One d-vector system's pooled output as seen by a combiner.
#[derive(Clone, Copy)]
pub struct CombinerInput<'t, T: Scalar> {
    /// Window-level d-vector e_k (G_k·N_k).
    pub embedding: Var<'t, T>,
    /// Integrated head vectors E_k, G_k×N_k.
    pub heads: Var<'t, T>,
}

impl<'t, T: Scalar> From<&Pooled<'t, T>> for CombinerInput<'t, T> {
    fn from(p: &Pooled<'t, T>) -> Self {
        Self { embedding: p.embedding, heads: p.heads }
    }
}

/// A second-level annotation matrix plus its penalty coefficients.
pub struct AttentionUse<'t, T: Scalar> {
    pub annotation: Var<'t, T>,
    pub lambda: Vec<f64>,
    pub mu: f64,
}

/// Combined c-vector and any annotation matrices produced on the way.
pub struct Combined<'t, T: Scalar> {
    pub cvector: Var<'t, T>,
    pub attention: Vec<AttentionUse<'t, T>>,
}

/// Output dimension of the c-vector produced by `cfg` for these inputs.
pub fn output_dim(cfg: &CombinerConfig, inputs: &CombinerInputs) -> usize {
    let dims = inputs.embedding_dims();
    match cfg.variant {
        CombinerVariant::FcFusion | CombinerVariant::GatedAdd => cfg.resolve_output(&dims),
        CombinerVariant::SelfAtt1 => cfg.att_heads * dims[0],
        CombinerVariant::SelfAtt2 => cfg.att_heads * inputs.head_shapes[0].1,
        CombinerVariant::BilinearSigmoid | CombinerVariant::BilinearTanh => cfg.resolve_output(&dims),
        CombinerVariant::StackedSigmoid | CombinerVariant::StackedTanh => cfg.resolve_output(&dims),
    }
}

// ── Registration ─────────────────────────────────────────────────────

fn register_selfatt<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    common: usize,
    cfg: &CombinerConfig,
    rng: &mut impl Rng,
) {
    store.insert_xavier(&format!("{prefix}.att.w1"), common, cfg.att_hidden, rng);
    store.insert_xavier(&format!("{prefix}.att.w2"), cfg.att_hidden, cfg.att_heads, rng);
}

fn register_bilinear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dims: &[usize],
    output: usize,
    rank: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let min_dim = *dims.iter().min().expect("at least one input");
    if rank > min_dim {
        return Err(NetError::Config(format!(
            "bilinear rank {rank} exceeds min input dim {min_dim}"
        )));
    }
    for (k, &m) in dims.iter().enumerate() {
        store.insert_xavier(&format!("{prefix}.u{}", k + 1), m, rank, rng);
        store.insert_xavier(&format!("{prefix}.v{}", k + 1), output, m, rng);
    }
    store.insert_xavier(&format!("{prefix}.p"), output, rank, rng);
    store.insert_zeros(&format!("{prefix}.b"), &[output]);
    Ok(())
}

/// Registers all parameters of the combiner under the `comb.` prefix.
pub fn register_combiner<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &CombinerConfig,
    inputs: &CombinerInputs,
    rng: &mut impl Rng,
) -> Result<()> {
    let dims = inputs.embedding_dims();
    if dims.is_empty() {
        return Err(NetError::Config("combiner needs at least one input system".into()));
    }
    let output = cfg.resolve_output(&dims);
    match cfg.variant {
        CombinerVariant::FcFusion => {
            if dims.len() < 2 {
                return Err(NetError::Config("FCFusion needs K ≥ 2 inputs".into()));
            }
            let total: usize = dims.iter().sum();
            store.insert_xavier("comb.w", output, total, rng);
            store.insert_zeros("comb.b", &[output]);
        }
        CombinerVariant::SelfAtt1 => {
            let common = dims[0];
            for (k, &m) in dims.iter().enumerate() {
                store.insert_xavier(&format!("comb.map{}.w", k + 1), common, m, rng);
            }
            register_selfatt(store, "comb", common, cfg, rng);
        }
        CombinerVariant::SelfAtt2 => {
            let common = inputs.head_shapes[0].1;
            for (k, &(_, n)) in inputs.head_shapes.iter().enumerate() {
                store.insert_xavier(&format!("comb.map{}.w", k + 1), common, n, rng);
            }
            register_selfatt(store, "comb", common, cfg, rng);
        }
        CombinerVariant::GatedAdd => {
            if dims.len() < 2 {
                return Err(NetError::Config("GatedAdd needs K ≥ 2 inputs".into()));
            }
            for (k, &m) in dims.iter().enumerate() {
                store.insert_xavier(&format!("comb.gate{}.w", k + 1), output, m, rng);
                store.insert_zeros(&format!("comb.gate{}.bw", k + 1), &[output]);
                store.insert_xavier(&format!("comb.gate{}.u", k + 1), output, m, rng);
                store.insert_zeros(&format!("comb.gate{}.bu", k + 1), &[output]);
            }
        }
        CombinerVariant::BilinearSigmoid | CombinerVariant::BilinearTanh => {
            if dims.len() < 2 {
                return Err(NetError::Config("bilinear pooling needs K ≥ 2 inputs".into()));
            }
            register_bilinear(store, "comb.bl", &dims, output, cfg.resolve_rank(&dims), rng)?;
        }
        CombinerVariant::StackedSigmoid | CombinerVariant::StackedTanh => {
            if dims.len() != 2 {
                return Err(NetError::Config("stacked combination is defined for K = 2".into()));
            }
            // Stage 1: SelfAtt1 over (e1, e2).
            let common = dims[0];
            for (k, &m) in dims.iter().enumerate() {
                store.insert_xavier(&format!("comb.s1.map{}.w", k + 1), common, m, rng);
            }
            register_selfatt(store, "comb.s1", common, cfg, rng);
            // Stage 2: bilinear over (c′, e2).
            let c1_dim = cfg.att_heads * common;
            let stage2 = [c1_dim, dims[1]];
            register_bilinear(store, "comb.s2.bl", &stage2, output, cfg.resolve_rank(&dims), rng)?;
        }
    }
    Ok(())
}

// ── Forward passes ───────────────────────────────────────────────────

/// Matrix·vector with 1-D in/out.
fn matvec<'t, T: Scalar>(w: Var<'t, T>, x: Var<'t, T>) -> crate::numerics::Result<Var<'t, T>> {
    w.matmul(x.as_col()?)?.vectorize()
}

/// Second-level self-attention over a list of candidate vectors; returns
/// the vectorized output and the annotation matrix. All second-level heads
/// use the smooth λ = 1/K target.
fn selfatt_over<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    candidates: &[Var<'t, T>],
    cfg: &CombinerConfig,
) -> Result<(Var<'t, T>, AttentionUse<'t, T>)> {
    let v = tape.stack_rows(candidates)?;
    let w1 = tape.param(store, &format!("{prefix}.att.w1"))?;
    let w2 = tape.param(store, &format!("{prefix}.att.w2"))?;
    let annotation = v.matmul(w1)?.tanh()?.matmul(w2)?.softmax_columns()?;
    let combined = annotation.transpose()?.matmul(v)?.vectorize()?;
    let lambda = vec![1.0 / candidates.len() as f64; cfg.att_heads];
    Ok((combined, AttentionUse { annotation, lambda, mu: cfg.mu }))
}

/// c = ReLU(W·Concat(e₁…e_K) + b).
fn fc_fusion<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    es: &[Var<'t, T>],
) -> Result<Var<'t, T>> {
    let stacked = tape.concat(es)?;
    let w = tape.param(store, "comb.w")?;
    let b = tape.param(store, "comb.b")?;
    Ok(matvec(w, stacked)?.add(b)?.relu()?)
}

/// c = Σₖ f(Wₖeₖ + b_{w,k}) ⊙ σ(Uₖeₖ + b_{u,k}).
fn gated_add<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    es: &[Var<'t, T>],
    activation: Activation,
) -> Result<Var<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    for (k, e) in es.iter().enumerate() {
        let w = tape.param(store, &format!("comb.gate{}.w", k + 1))?;
        let bw = tape.param(store, &format!("comb.gate{}.bw", k + 1))?;
        let u = tape.param(store, &format!("comb.gate{}.u", k + 1))?;
        let bu = tape.param(store, &format!("comb.gate{}.bu", k + 1))?;
        let candidate = activation.apply(matvec(w, *e)?.add(bw)?)?;
        let gate = matvec(u, *e)?.add(bu)?.sigmoid()?;
        let term = candidate.hadamard(gate)?;
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("K ≥ 2 checked at registration"))
}

/// c* = P·(f(U₁ᵀe₁) ⊙ … ⊙ f(U_Kᵀe_K)) + b; c = c* + Σₖ Vₖeₖ.
fn bilinear_k<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    es: &[Var<'t, T>],
    f: Activation,
) -> Result<Var<'t, T>> {
    let mut fused: Option<Var<'t, T>> = None;
    for (k, e) in es.iter().enumerate() {
        let u = tape.param(store, &format!("{prefix}.u{}", k + 1))?;
        let z = f.apply(matvec(u.transpose()?, *e)?)?;
        fused = Some(match fused {
            Some(acc) => acc.hadamard(z)?,
            None => z,
        });
    }
    let p = tape.param(store, &format!("{prefix}.p"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let mut c = matvec(p, fused.expect("K ≥ 2 checked at registration"))?.add(b)?;
    for (k, e) in es.iter().enumerate() {
        let v = tape.param(store, &format!("{prefix}.v{}", k + 1))?;
        c = c.add(matvec(v, *e)?)?;
    }
    Ok(c)
}

/// Runs the configured combiner over the pooled system outputs.
pub fn combine<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    cfg: &CombinerConfig,
    inputs: &[CombinerInput<'t, T>],
) -> Result<Combined<'t, T>> {
    if inputs.is_empty() {
        return Err(NetError::Config("combiner called with no inputs".into()));
    }
    let es: Vec<Var<'t, T>> = inputs.iter().map(|i| i.embedding).collect();
    match cfg.variant {
        CombinerVariant::FcFusion => {
            Ok(Combined { cvector: fc_fusion(tape, store, &es)?, attention: vec![] })
        }
        CombinerVariant::SelfAtt1 => {
            let mut candidates = Vec::with_capacity(es.len());
            for (k, e) in es.iter().enumerate() {
                let w = tape.param(store, &format!("comb.map{}.w", k + 1))?;
                candidates.push(matvec(w, *e)?);
            }
            let (cvector, att) = selfatt_over(tape, store, "comb", &candidates, cfg)?;
            Ok(Combined { cvector, attention: vec![att] })
        }
        CombinerVariant::SelfAtt2 => {
            // Pool over every integrated head vector of every system.
            let mut candidates = Vec::new();
            for (k, input) in inputs.iter().enumerate() {
                let w = tape.param(store, &format!("comb.map{}.w", k + 1))?;
                let heads = input.heads.shape()[0];
                for g in 0..heads {
                    candidates.push(matvec(w, input.heads.row(g)?)?);
                }
            }
            let (cvector, att) = selfatt_over(tape, store, "comb", &candidates, cfg)?;
            Ok(Combined { cvector, attention: vec![att] })
        }
        CombinerVariant::GatedAdd => Ok(Combined {
            cvector: gated_add(tape, store, &es, cfg.gated_activation)?,
            attention: vec![],
        }),
        CombinerVariant::BilinearSigmoid | CombinerVariant::BilinearTanh => Ok(Combined {
            cvector: bilinear_k(tape, store, "comb.bl", &es, cfg.variant.bilinear_activation())?,
            attention: vec![],
        }),
        CombinerVariant::StackedSigmoid | CombinerVariant::StackedTanh => {
            let mut candidates = Vec::with_capacity(es.len());
            for (k, e) in es.iter().enumerate() {
                let w = tape.param(store, &format!("comb.s1.map{}.w", k + 1))?;
                candidates.push(matvec(w, *e)?);
            }
            let (c1, att) = selfatt_over(tape, store, "comb.s1", &candidates, cfg)?;
            let stage2 = [c1, es[1]];
            let cvector =
                bilinear_k(tape, store, "comb.s2.bl", &stage2, cfg.variant.bilinear_activation())?;
            Ok(Combined { cvector, attention: vec![att] })
        }
    }
}

// ── Algebra oracles (small dims, plain loops, no tape) ───────────────

/// Explicit bilinear form: c_o = e₁ᵀ·W_o·e₂ + b_o, with the weight tensor
/// stored o-major as `w[o][i][j]` flattened row-major.
pub fn bilinear_full_oracle(e1: &[f64], e2: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (m, n, o) = (e1.len(), e2.len(), b.len());
    assert_eq!(w.len(), o * m * n);
    (0..o)
        .map(|out| {
            let mut acc = b[out];
            for i in 0..m {
                for j in 0..n {
                    acc += e1[i] * w[out * m * n + i * n + j] * e2[j];
                }
            }
            acc
        })
        .collect()
}

/// Outer-product route: c = W·Vector(e₁⊗e₂) + b, where row o of W is the
/// row-major vectorization of W_o. Must agree with the explicit route.
pub fn bilinear_outer_oracle(e1: &[f64], e2: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (m, n, o) = (e1.len(), e2.len(), b.len());
    let mut outer = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            outer[i * n + j] = e1[i] * e2[j];
        }
    }
    (0..o)
        .map(|out| {
            let row = &w[out * m * n..(out + 1) * m * n];
            b[out] + row.iter().zip(&outer).map(|(wv, ov)| wv * ov).sum::<f64>()
        })
        .collect()
}

/// Builds the tied rank-D weight tensor W_o[i,j] = Σ_d U₁[i,d]·P[o,d]·U₂[j,d]
/// in the same o-major layout as the oracles above.
pub fn tied_rank_tensor(
    u1: &[f64],
    u2: &[f64],
    p: &[f64],
    m: usize,
    n: usize,
    d: usize,
    o: usize,
) -> Vec<f64> {
    assert_eq!(u1.len(), m * d);
    assert_eq!(u2.len(), n * d);
    assert_eq!(p.len(), o * d);
    let mut w = vec![0.0; o * m * n];
    for out in 0..o {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for r in 0..d {
                    acc += u1[i * d + r] * p[out * d + r] * u2[j * d + r];
                }
                w[out * m * n + i * n + j] = acc;
            }
        }
    }
    w
}
