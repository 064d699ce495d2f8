//! Frame-level networks: the TDNN d-vector extractor, the high-order RNN,
//! the VAD frame classifier, and the change-point detector body.
//!
//! Parameter layout conventions: TDNN and VAD act on matrices of row
//! vectors (weights stored `[in, out]`); the recurrent nets act on column
//! vectors (weights stored `[out, in]`).

use rand::Rng;

use crate::numerics::{NumericsError, Var};
use crate::scalar::Scalar;
use crate::{params::ParamStore, numerics::Tape};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<V> = std::result::Result<V, NetError>;

// ── TDNN ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TdnnLayer {
    pub context: Vec<isize>,
    pub out_dim: usize,
    pub linear: bool,
}

/// Six-layer TDNN: contexts {±2}, {−2,0,2}, {−3,0,3}, then three 1-frame
/// layers, the last one linear. Total receptive field ±7 frames.
#[derive(Debug, Clone)]
pub struct TdnnConfig {
    pub feat_dim: usize,
    pub layers: Vec<TdnnLayer>,
}

impl TdnnConfig {
    pub fn with_widths(feat_dim: usize, hidden: usize, out: usize) -> Self {
        let relu = |context: Vec<isize>, out_dim| TdnnLayer { context, out_dim, linear: false };
        Self {
            feat_dim,
            layers: vec![
                relu(vec![-2, -1, 0, 1, 2], hidden),
                relu(vec![-2, 0, 2], hidden),
                relu(vec![-3, 0, 3], hidden),
                relu(vec![0], hidden),
                relu(vec![0], hidden),
                TdnnLayer { context: vec![0], out_dim: out, linear: true },
            ],
        }
    }

    /// Full-size profile (40-dim features, 256 hidden, 128-dim d-vectors).
    pub fn full() -> Self {
        Self::with_widths(40, 256, 128)
    }

    /// Quarter-width profile for fast tests and desk-scale training.
    pub fn tiny() -> Self {
        Self::with_widths(40, 64, 32)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty tdnn").out_dim
    }

    /// Frames of context consumed on each side of the current frame.
    pub fn receptive_half_width(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.context.iter().map(|o| o.unsigned_abs()).max().unwrap_or(0))
            .sum()
    }

    fn in_dim(&self, layer: usize) -> usize {
        let prev = if layer == 0 { self.feat_dim } else { self.layers[layer - 1].out_dim };
        self.layers[layer].context.len() * prev
    }
}

pub fn register_tdnn<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &TdnnConfig,
    rng: &mut impl Rng,
) {
    for (i, layer) in cfg.layers.iter().enumerate() {
        store.insert_xavier(&format!("{prefix}.l{i}.w"), cfg.in_dim(i), layer.out_dim, rng);
        store.insert_zeros(&format!("{prefix}.l{i}.b"), &[layer.out_dim]);
    }
}

/// Runs the TDNN over a whole window: one d-vector row per input frame,
/// edge frames replicate-padded so output length equals input length.
pub fn tdnn_forward<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    feats: Var<'t, T>,
    cfg: &TdnnConfig,
) -> Result<Var<'t, T>> {
    let shape = feats.shape();
    if shape.len() != 2 || shape[1] != cfg.feat_dim {
        return Err(NetError::Config(format!(
            "tdnn expects [T, {}] features, got {:?}",
            cfg.feat_dim, shape
        )));
    }
    let mut h = feats;
    for (i, layer) in cfg.layers.iter().enumerate() {
        if layer.context != [0] {
            h = h.splice(&layer.context)?;
        }
        let w = tape.param(store, &format!("{prefix}.l{i}.w"))?;
        let b = tape.param(store, &format!("{prefix}.l{i}.b"))?;
        h = h.matmul(w)?.add_row(b)?;
        if !layer.linear {
            h = h.relu()?;
        }
    }
    Ok(h)
}

// ── HORNN ────────────────────────────────────────────────────────────

/// ReLU RNN with recurrent connections to several past states and a shared
/// linear output projection.
#[derive(Debug, Clone)]
pub struct HornnConfig {
    pub feat_dim: usize,
    pub hidden: usize,
    pub lags: Vec<usize>,
    pub proj: usize,
}

impl HornnConfig {
    pub fn full() -> Self {
        Self { feat_dim: 40, hidden: 256, lags: vec![1, 4], proj: 128 }
    }

    pub fn tiny() -> Self {
        Self { feat_dim: 40, hidden: 64, lags: vec![1, 4], proj: 32 }
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for &lag in &self.lags {
            if lag == 0 || !seen.insert(lag) {
                return Err(NetError::Config(format!("lags must be positive and distinct: {:?}", self.lags)));
            }
        }
        Ok(())
    }
}

pub fn register_hornn<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &HornnConfig,
    rng: &mut impl Rng,
) {
    store.insert_xavier(&format!("{prefix}.w_in"), cfg.hidden, cfg.feat_dim, rng);
    for &lag in &cfg.lags {
        store.insert_xavier(&format!("{prefix}.u{lag}"), cfg.hidden, cfg.hidden, rng);
    }
    store.insert_zeros(&format!("{prefix}.b"), &[cfg.hidden]);
    store.insert_xavier(&format!("{prefix}.proj"), cfg.proj, cfg.hidden, rng);
}

/// h(t) = ReLU(W·x(t) + Σ U_ℓ·h(t−ℓ) + b) with h(τ)=0 for τ≤0;
/// d(t) = Proj·h(t) with the projection shared across time.
pub fn hornn_forward<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    feats: Var<'t, T>,
    cfg: &HornnConfig,
) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let shape = feats.shape();
    if shape.len() != 2 || shape[1] != cfg.feat_dim {
        return Err(NetError::Config(format!(
            "hornn expects [T, {}] features, got {:?}",
            cfg.feat_dim, shape
        )));
    }
    let frames = shape[0];
    let w_in = tape.param(store, &format!("{prefix}.w_in"))?;
    let us: Vec<(usize, Var<'t, T>)> = cfg
        .lags
        .iter()
        .map(|&lag| Ok((lag, tape.param(store, &format!("{prefix}.u{lag}"))?)))
        .collect::<Result<_>>()?;
    let b = tape.param(store, &format!("{prefix}.b"))?.as_col()?;
    let proj = tape.param(store, &format!("{prefix}.proj"))?;

    let mut states: Vec<Var<'t, T>> = Vec::with_capacity(frames);
    let mut outs: Vec<Var<'t, T>> = Vec::with_capacity(frames);
    for t in 0..frames {
        let x_t = feats.row(t)?.as_col()?;
        let mut pre = w_in.matmul(x_t)?;
        for (lag, u) in &us {
            if t >= *lag {
                pre = pre.add(u.matmul(states[t - lag])?)?;
            }
        }
        let h = pre.add(b)?.relu()?;
        states.push(h);
        outs.push(proj.matmul(h)?.vectorize()?);
    }
    Ok(tape.stack_rows(&outs)?)
}

// ── VAD ──────────────────────────────────────────────────────────────

/// Feed-forward speech/non-speech classifier over a wide frame context.
#[derive(Debug, Clone)]
pub struct VadConfig {
    pub feat_dim: usize,
    /// Frames of context on each side of the classified frame.
    pub context_half: usize,
    pub hidden_layers: usize,
    pub hidden: usize,
}

impl VadConfig {
    pub fn full() -> Self {
        Self { feat_dim: 40, context_half: 27, hidden_layers: 7, hidden: 256 }
    }

    pub fn tiny() -> Self {
        Self { feat_dim: 40, context_half: 27, hidden_layers: 7, hidden: 64 }
    }

    /// Total frames per input window (2·context_half + 1).
    pub fn window_frames(&self) -> usize {
        2 * self.context_half + 1
    }

    pub fn input_dim(&self) -> usize {
        self.window_frames() * self.feat_dim
    }
}

pub fn register_vad<T: Scalar>(store: &mut ParamStore<T>, cfg: &VadConfig, rng: &mut impl Rng) {
    let mut in_dim = cfg.input_dim();
    for i in 0..cfg.hidden_layers {
        store.insert_xavier(&format!("vad.l{i}.w"), in_dim, cfg.hidden, rng);
        store.insert_zeros(&format!("vad.l{i}.b"), &[cfg.hidden]);
        in_dim = cfg.hidden;
    }
    store.insert_xavier("vad.out.w", in_dim, 2, rng);
    store.insert_zeros("vad.out.b", &[2]);
}

/// Two-class logits for one context window; class 1 is speech.
pub fn vad_logits<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    window: Var<'t, T>,
    cfg: &VadConfig,
) -> Result<Var<'t, T>> {
    let shape = window.shape();
    if shape != [cfg.window_frames(), cfg.feat_dim] {
        return Err(NetError::Config(format!(
            "vad expects [{}, {}] window, got {:?}",
            cfg.window_frames(),
            cfg.feat_dim,
            shape
        )));
    }
    let mut h = window.reshape(&[1, cfg.input_dim()])?;
    for i in 0..cfg.hidden_layers {
        let w = tape.param(store, &format!("vad.l{i}.w"))?;
        let b = tape.param(store, &format!("vad.l{i}.b"))?;
        h = h.matmul(w)?.add_row(b)?.relu()?;
    }
    let w = tape.param(store, "vad.out.w")?;
    let b = tape.param(store, "vad.out.b")?;
    Ok(h.matmul(w)?.add_row(b)?.vectorize()?)
}

/// Softmax posterior over (non-speech, speech) for one window.
pub fn vad_posterior<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    window: Var<'t, T>,
    cfg: &VadConfig,
) -> Result<Var<'t, T>> {
    let logits = vad_logits(tape, store, window, cfg)?;
    Ok(logits.as_col()?.softmax_columns()?.vectorize()?)
}

// ── CPD ──────────────────────────────────────────────────────────────

/// Change-point model: a shared TDNN extracts frame d-vectors on both
/// sides of the current frame, one shared ReLU RNN encodes the past
/// left-to-right and the future right-to-left, and the two final states
/// are fused by Hadamard product before a two-class output layer.
#[derive(Debug, Clone)]
pub struct CpdConfig {
    /// Frames on each side of the candidate frame (1 s at 10 ms frames).
    pub context_half: usize,
    pub tdnn: TdnnConfig,
    pub rnn_hidden: usize,
    pub rnn_lags: Vec<usize>,
}

impl CpdConfig {
    pub fn full() -> Self {
        Self { context_half: 50, tdnn: TdnnConfig::full(), rnn_hidden: 256, rnn_lags: vec![1] }
    }

    pub fn tiny() -> Self {
        Self { context_half: 50, tdnn: TdnnConfig::tiny(), rnn_hidden: 64, rnn_lags: vec![1] }
    }

    /// Frames per side window (context_half + the current frame).
    pub fn side_frames(&self) -> usize {
        self.context_half + 1
    }
}

pub fn register_cpd<T: Scalar>(store: &mut ParamStore<T>, cfg: &CpdConfig, rng: &mut impl Rng) {
    register_tdnn(store, "cpd.tdnn", &cfg.tdnn, rng);
    let d = cfg.tdnn.out_dim();
    store.insert_xavier("cpd.rnn.w_in", cfg.rnn_hidden, d, rng);
    for &lag in &cfg.rnn_lags {
        store.insert_xavier(&format!("cpd.rnn.u{lag}"), cfg.rnn_hidden, cfg.rnn_hidden, rng);
    }
    store.insert_zeros("cpd.rnn.b", &[cfg.rnn_hidden]);
    store.insert_xavier("cpd.out.w", 2, cfg.rnn_hidden, rng);
    store.insert_zeros("cpd.out.b", &[2]);
}

/// Final RNN state after consuming the given rows of `seq` in order.
fn rnn_final_state<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    seq: Var<'t, T>,
    order: &[usize],
    lags: &[usize],
) -> Result<Var<'t, T>> {
    let w_in = tape.param(store, "cpd.rnn.w_in")?;
    let us: Vec<(usize, Var<'t, T>)> = lags
        .iter()
        .map(|&lag| Ok((lag, tape.param(store, &format!("cpd.rnn.u{lag}"))?)))
        .collect::<Result<_>>()?;
    let b = tape.param(store, "cpd.rnn.b")?.as_col()?;
    let mut states: Vec<Var<'t, T>> = Vec::with_capacity(order.len());
    for (step, &row) in order.iter().enumerate() {
        let x = seq.row(row)?.as_col()?;
        let mut pre = w_in.matmul(x)?;
        for (lag, u) in &us {
            if step >= *lag {
                pre = pre.add(u.matmul(states[step - lag])?)?;
            }
        }
        states.push(pre.add(b)?.relu()?);
    }
    states
        .last()
        .copied()
        .ok_or_else(|| NetError::Config("cpd side window is empty".into()))
}

/// Shared side encoder: TDNN d-vectors followed by the RNN final state,
/// consuming the rows in their given order.
fn cpd_side<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    side: Var<'t, T>,
    cfg: &CpdConfig,
) -> Result<Var<'t, T>> {
    let d = tdnn_forward(tape, store, "cpd.tdnn", side, &cfg.tdnn)?;
    let order: Vec<usize> = (0..d.shape()[0]).collect();
    rnn_final_state(tape, store, d, &order, &cfg.rnn_lags)
}

/// Two-class (non-change, change) logits for a candidate frame given its
/// past window `[t−C, t]` and future window `[t, t+C]`. The future side is
/// time-reversed up front so one shared encoder consumes both sides ending
/// at the candidate frame; swapping (past, future) with time-reversed
/// inputs therefore yields the identical fused vector.
pub fn cpd_logits<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    past: Var<'t, T>,
    future: Var<'t, T>,
    cfg: &CpdConfig,
) -> Result<Var<'t, T>> {
    let rev: Vec<usize> = (0..future.shape()[0]).rev().collect();
    let future_rev = future.select_rows(&rev)?;
    let s_past = cpd_side(tape, store, past, cfg)?;
    let s_future = cpd_side(tape, store, future_rev, cfg)?;
    let fused = s_past.hadamard(s_future)?;
    let w = tape.param(store, "cpd.out.w")?;
    let b = tape.param(store, "cpd.out.b")?.as_col()?;
    Ok(w.matmul(fused)?.add(b)?.vectorize()?)
}

/// Change posterior (probability of class 1 = change) for one frame.
pub fn cpd_change_prob<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    past: Var<'t, T>,
    future: Var<'t, T>,
    cfg: &CpdConfig,
) -> Result<T> {
    let logits = cpd_logits(tape, store, past, future, cfg)?;
    let post = logits.as_col()?.softmax_columns()?.value();
    Ok(post.data()[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_all(store: &mut crate::ParamStore) {
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            store.get_mut(&name).unwrap().values.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn random_feats(frames: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![frames, dim],
            (0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn tdnn_full_profile_keeps_window_length() {
        let cfg = TdnnConfig::full();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = crate::ParamStore::new();
        register_tdnn(&mut store, "tdnn", &cfg, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(random_feats(200, 40, 1));
        let h = tdnn_forward(&tape, &store, "tdnn", x, &cfg).unwrap();
        assert_eq!(h.shape(), vec![200, 128]);
    }

    #[test]
    fn tdnn_zero_params_give_zero_embeddings() {
        let cfg = TdnnConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = crate::ParamStore::new();
        register_tdnn(&mut store, "tdnn", &cfg, &mut rng);
        zero_all(&mut store);
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![20, 40], vec![0.7; 800]).unwrap());
        let h = tdnn_forward(&tape, &store, "tdnn", x, &cfg).unwrap();
        assert!(h.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tdnn_rejects_wrong_feature_dim() {
        let cfg = TdnnConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = crate::ParamStore::new();
        register_tdnn(&mut store, "tdnn", &cfg, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(random_feats(10, 39, 1));
        assert!(matches!(
            tdnn_forward(&tape, &store, "tdnn", x, &cfg),
            Err(NetError::Config(_))
        ));
    }

    #[test]
    fn tdnn_receptive_field_is_seven_frames() {
        let cfg = TdnnConfig::tiny();
        assert_eq!(cfg.receptive_half_width(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = crate::ParamStore::new();
        register_tdnn(&mut store, "tdnn", &cfg, &mut rng);

        let frames = 30;
        let base = random_feats(frames, 40, 7);
        let t = 10;
        let run = |feats: Tensor| {
            let tape = Tape::new();
            let x = tape.constant(feats);
            let h = tdnn_forward(&tape, &store, "tdnn", x, &cfg).unwrap().value();
            h.row(t).to_vec()
        };
        let reference = run(base.clone());

        let perturb = |offset: usize| {
            let mut data = base.data().to_vec();
            for c in 0..40 {
                data[offset * 40 + c] += 1.0;
            }
            run(Tensor::new(vec![frames, 40], data).unwrap())
        };
        // t+8 lies outside the ±7 receptive field, t+7 inside.
        assert_eq!(perturb(t + 8), reference);
        assert_ne!(perturb(t + 7), reference);
    }

    #[test]
    fn hornn_zero_input_zero_bias_is_silent() {
        let cfg = HornnConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = crate::ParamStore::new();
        register_hornn(&mut store, "hornn", &cfg, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[12, 40]));
        let h = hornn_forward(&tape, &store, "hornn", x, &cfg).unwrap();
        assert!(h.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hornn_is_causal() {
        let cfg = HornnConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = crate::ParamStore::new();
        register_hornn(&mut store, "hornn", &cfg, &mut rng);
        let base = random_feats(12, 40, 9);
        let t = 6;
        let run = |feats: Tensor| {
            let tape = Tape::new();
            let x = tape.constant(feats);
            hornn_forward(&tape, &store, "hornn", x, &cfg).unwrap().value().row(t).to_vec()
        };
        let reference = run(base.clone());
        let mut data = base.data().to_vec();
        for c in 0..40 {
            data[(t + 1) * 40 + c] += 3.0;
        }
        assert_eq!(run(Tensor::new(vec![12, 40], data).unwrap()), reference);
    }

    #[test]
    fn hornn_matches_hand_unrolled_recurrence() {
        // Scalar HORNN: hidden 1, feature 1, lags {1,4}, projection 1.
        let cfg = HornnConfig { feat_dim: 1, hidden: 1, lags: vec![1, 4], proj: 1 };
        let (w, u1, u4, b, p) = (0.5, 0.3, 0.2, 0.1, 2.0);
        let mut store = crate::ParamStore::new();
        store.insert("hornn.w_in", &[1, 1], vec![w]);
        store.insert("hornn.u1", &[1, 1], vec![u1]);
        store.insert("hornn.u4", &[1, 1], vec![u4]);
        store.insert("hornn.b", &[1], vec![b]);
        store.insert("hornn.proj", &[1, 1], vec![p]);

        let xs = [1.0, -1.0, 2.0, 0.5, -0.25, 3.0];
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![6, 1], xs.to_vec()).unwrap());
        let out = hornn_forward(&tape, &store, "hornn", x, &cfg).unwrap().value();

        let mut h = vec![0.0f64; xs.len()];
        for t in 0..xs.len() {
            let mut pre = w * xs[t] + b;
            if t >= 1 {
                pre += u1 * h[t - 1];
            }
            if t >= 4 {
                pre += u4 * h[t - 4];
            }
            h[t] = pre.max(0.0);
        }
        for t in 0..xs.len() {
            assert!(
                (out.row(t)[0] - p * h[t]).abs() < 1e-12,
                "step {t}: {} vs {}",
                out.row(t)[0],
                p * h[t]
            );
        }
    }

    #[test]
    fn hornn_rejects_duplicate_lags() {
        let cfg = HornnConfig { feat_dim: 40, hidden: 8, lags: vec![1, 1], proj: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = crate::ParamStore::new();
        store.insert_xavier("hornn.w_in", 8, 40, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(random_feats(4, 40, 2));
        assert!(hornn_forward(&tape, &store, "hornn", x, &cfg).is_err());
    }

    #[test]
    fn vad_zero_params_are_uninformative() {
        let cfg = VadConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = crate::ParamStore::new();
        register_vad(&mut store, &cfg, &mut rng);
        zero_all(&mut store);
        let tape = Tape::new();
        let w = tape.constant(random_feats(55, 40, 4));
        let p = vad_posterior(&tape, &store, w, &cfg).unwrap();
        assert_eq!(p.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn vad_posterior_sums_to_one() {
        let cfg = VadConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = crate::ParamStore::new();
        register_vad(&mut store, &cfg, &mut rng);
        let tape = Tape::new();
        let w = tape.constant(random_feats(55, 40, 5));
        let p = vad_posterior(&tape, &store, w, &cfg).unwrap().value();
        assert!((p.data()[0] + p.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vad_rejects_wrong_window_length() {
        let cfg = VadConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = crate::ParamStore::new();
        register_vad(&mut store, &cfg, &mut rng);
        let tape = Tape::new();
        let w = tape.constant(random_feats(54, 40, 4));
        assert!(matches!(
            vad_logits(&tape, &store, w, &cfg),
            Err(NetError::Config(_))
        ));
    }

    fn small_cpd() -> CpdConfig {
        CpdConfig {
            context_half: 6,
            tdnn: TdnnConfig::with_widths(8, 6, 4),
            rnn_hidden: 5,
            rnn_lags: vec![1],
        }
    }

    #[test]
    fn cpd_constant_sides_fuse_to_square() {
        // A constant window is palindromic, so both encoders see the same
        // sequence and the Hadamard fusion squares one state.
        let cfg = small_cpd();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = crate::ParamStore::new();
        register_cpd(&mut store, &cfg, &mut rng);
        let frames = cfg.side_frames();
        let window = Tensor::new(vec![frames, 8], vec![0.3; frames * 8]).unwrap();

        let tape = Tape::new();
        let past = tape.constant(window.clone());
        let future = tape.constant(window.clone());
        let s = cpd_side(&tape, &store, past, &cfg).unwrap().value();
        let rev: Vec<usize> = (0..frames).rev().collect();
        let future_rev = future.select_rows(&rev).unwrap();
        let s2 = cpd_side(&tape, &store, future_rev, &cfg).unwrap().value();
        for (a, b) in s.data().iter().zip(s2.data()) {
            assert!((a - b).abs() < 1e-12, "side states differ: {a} vs {b}");
        }
        let fused = cpd_logits(&tape, &store, tape.constant(window.clone()), tape.constant(window), &cfg);
        assert!(fused.is_ok());
    }

    #[test]
    fn cpd_zero_classifier_is_uninformative() {
        let cfg = small_cpd();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = crate::ParamStore::new();
        register_cpd(&mut store, &cfg, &mut rng);
        store.get_mut("cpd.out.w").unwrap().values.iter_mut().for_each(|v| *v = 0.0);
        let tape = Tape::new();
        let frames = cfg.side_frames();
        let past = tape.constant(random_feats(frames, 8, 3));
        let future = tape.constant(random_feats(frames, 8, 4));
        let p = cpd_change_prob(&tape, &store, past, future, &cfg).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cpd_swapping_time_reversed_sides_is_identity() {
        let cfg = small_cpd();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = crate::ParamStore::new();
        register_cpd(&mut store, &cfg, &mut rng);
        let frames = cfg.side_frames();
        let past = random_feats(frames, 8, 21);
        let future = random_feats(frames, 8, 22);
        let reverse = |t: &Tensor| {
            let mut rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
            rows.reverse();
            Tensor::from_rows(&rows).unwrap()
        };

        let run = |p: Tensor, f: Tensor| {
            let tape = Tape::new();
            let pv = tape.constant(p);
            let fv = tape.constant(f);
            cpd_logits(&tape, &store, pv, fv, &cfg).unwrap().value().data().to_vec()
        };
        let a = run(past.clone(), future.clone());
        let b = run(reverse(&future), reverse(&past));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn every_net_parameter_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tdnn_cfg = TdnnConfig::with_widths(8, 6, 4);
        let hornn_cfg = HornnConfig { feat_dim: 8, hidden: 5, lags: vec![1, 4], proj: 4 };
        let vad_cfg = VadConfig { feat_dim: 8, context_half: 3, hidden_layers: 2, hidden: 6 };
        let cpd_cfg = small_cpd();

        let mut store = crate::ParamStore::new();
        register_tdnn(&mut store, "tdnn", &tdnn_cfg, &mut rng);
        register_hornn(&mut store, "hornn", &hornn_cfg, &mut rng);
        register_vad(&mut store, &vad_cfg, &mut rng);
        register_cpd(&mut store, &cpd_cfg, &mut rng);

        let frames = 12;
        let feats = random_feats(frames, 8, 31);
        let vad_win = random_feats(vad_cfg.window_frames(), 8, 32);
        let side = cpd_cfg.side_frames();
        let past = random_feats(side, 8, 33);
        let future = random_feats(side, 8, 34);

        let dead = gradcheck::dead_params(&store, |tape, p| {
            let t1 = tdnn_forward(tape, p, "tdnn", tape.constant(feats.clone()), &tdnn_cfg)
                .map_err(net_to_numerics)?;
            let t2 = hornn_forward(tape, p, "hornn", tape.constant(feats.clone()), &hornn_cfg)
                .map_err(net_to_numerics)?;
            let t3 = vad_logits(tape, p, tape.constant(vad_win.clone()), &vad_cfg)
                .map_err(net_to_numerics)?;
            let t4 = cpd_logits(
                tape,
                p,
                tape.constant(past.clone()),
                tape.constant(future.clone()),
                &cpd_cfg,
            )
            .map_err(net_to_numerics)?;
            let mut loss = t1.vectorize()?.hadamard(weight(tape, t1.numel(), 1))?.sum()?;
            loss = loss.add(t2.vectorize()?.hadamard(weight(tape, t2.numel(), 2))?.sum()?)?;
            loss = loss.add(t3.hadamard(weight(tape, t3.numel(), 3))?.sum()?)?;
            loss = loss.add(t4.hadamard(weight(tape, t4.numel(), 4))?.sum()?)?;
            Ok(loss)
        })
        .unwrap();
        assert!(dead.is_empty(), "dead params: {dead:?}");
    }

    fn net_to_numerics(e: NetError) -> crate::numerics::NumericsError {
        match e {
            NetError::Numerics(n) => n,
            NetError::Config(msg) => crate::numerics::NumericsError::ShapeMismatch {
                op: "net_config",
                detail: msg,
            },
        }
    }

    /// Fixed random weights turning a network output into a scalar loss.
    fn weight<'t>(tape: &'t Tape, n: usize, seed: u64) -> crate::numerics::Var<'t, f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tape.constant(
            Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        )
    }

    #[test]
    fn tdnn_gradients_match_finite_differences() {
        let cfg = TdnnConfig::with_widths(8, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut store = crate::ParamStore::new();
        register_tdnn(&mut store, "tdnn", &cfg, &mut rng);
        let feats = random_feats(18, 8, 40);
        let report = gradcheck::check_params(&store, 60, 1e-5, 99, |tape, p| {
            let h = tdnn_forward(tape, p, "tdnn", tape.constant(feats.clone()), &cfg)
                .map_err(net_to_numerics)?;
            let mut rng = ChaCha8Rng::seed_from_u64(41);
            let w = tape.constant(
                Tensor::new(
                    vec![h.numel()],
                    (0..h.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            );
            h.vectorize()?.hadamard(w)?.sum()
        })
        .unwrap();
        assert!(report.passes(1e-5), "max rel err {:e}", report.max_rel_err);
    }
}
