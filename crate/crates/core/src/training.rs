//! Speaker-classification training for the embedding systems, plus the
//! VAD and CPD trainers. Plain SGD with gradient-norm clipping; every
//! source of randomness is seeded, so a (config, seed) pair reproduces
//! bit-identical parameters.

use std::collections::BTreeMap;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::FeatureSequence;
use crate::nets::{self, CpdConfig, NetError, VadConfig};
use crate::numerics::NumericsError;
use crate::pooling::attention_penalty;
use crate::synth::Corpus;
use crate::system::{angular_softmax_logits, angular_softmax_loss, system_forward, SystemConfig};
use crate::timeline::Timeline;
use crate::{ParamStore, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("training diverged (non-finite loss) at {0}")]
    Diverged(String),
    #[error("no training data: {0}")]
    NoData(String),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NonFinite { op } => TrainError::Diverged(format!("op {op}")),
            other => TrainError::Net(NetError::Numerics(other)),
        }
    }
}

pub type Result<V> = std::result::Result<V, TrainError>;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Sliding-window length in frames (2 s).
    pub window: usize,
    /// Window shift in frames (1 s, i.e. 50% overlap).
    pub shift: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub held_out_fraction: f64,
    pub grad_clip: f64,
    pub vad_epochs: usize,
    /// Number of (balanced) VAD training frames to sample.
    pub vad_samples: usize,
    pub vad_lr: f64,
    pub cpd_epochs: usize,
    pub cpd_samples: usize,
    pub cpd_lr: f64,
    /// Frame-classification chunks for d-vector pretraining of the CPD's
    /// TDNN before joint training (0 disables pretraining).
    pub cpd_pretrain_chunks: usize,
    pub cpd_pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 200,
            shift: 100,
            batch_size: 16,
            lr: 0.2,
            epochs: 8,
            held_out_fraction: 0.1,
            grad_clip: 5.0,
            vad_epochs: 3,
            vad_samples: 4000,
            vad_lr: 0.05,
            cpd_epochs: 3,
            cpd_samples: 1200,
            cpd_lr: 0.2,
            cpd_pretrain_chunks: 400,
            cpd_pretrain_epochs: 2,
        }
    }
}

// ── Window extraction ────────────────────────────────────────────────

/// One sliding window inside a speech segment.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub recording: usize,
    pub segment: usize,
    /// Absolute frame range actually covered (before padding).
    pub start_frame: usize,
    pub frames: usize,
    /// Segment frame bounds, for replicate padding.
    pub seg_bounds: (usize, usize),
    pub label: Option<String>,
    /// Actual covered span in seconds.
    pub span: (f64, f64),
}

impl WindowSample {
    /// Materializes the window, replicate-padded within its segment to
    /// `window` frames.
    pub fn tensor(&self, feats: &FeatureSequence, window: usize) -> Tensor {
        feats.window_in(self.seg_bounds.0, self.seg_bounds.1, self.start_frame as isize, window)
    }
}

/// Fixed-length windows at a fixed shift within each segment of the
/// timeline. A trailing partial window is kept (replicate-padded) only if
/// it covers frames beyond the last full window; shorter remainders are
/// dropped unless they are the segment's only window.
pub fn make_windows(
    feats: &FeatureSequence,
    timeline: &Timeline,
    window: usize,
    shift: usize,
    recording: usize,
) -> Vec<WindowSample> {
    let period = feats.frame_period();
    let mut out = Vec::new();
    for (seg_idx, seg) in timeline.entries().iter().enumerate() {
        let fs = feats.frame_at(seg.start);
        let fe = feats.frame_at(seg.end).min(feats.len());
        if fe <= fs {
            continue;
        }
        let len = fe - fs;
        let label = Some(seg.label.clone());
        let mut push = |start: usize, frames: usize| {
            out.push(WindowSample {
                recording,
                segment: seg_idx,
                start_frame: fs + start,
                frames,
                seg_bounds: (fs, fe),
                label: label.clone(),
                span: (
                    (fs + start) as f64 * period,
                    (fs + start + frames) as f64 * period,
                ),
            });
        };
        if len <= window {
            // Only window of the segment: always kept, padded if short.
            push(0, len);
            continue;
        }
        let mut off = 0usize;
        while off + window <= len {
            push(off, window);
            off += shift;
        }
        // Trailing partial window, only if it covers new frames.
        let tail = off;
        if tail < len && len - tail > shift {
            push(tail, len - tail);
        }
    }
    out
}

// ── Embedding-system training ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub store: ParamStore,
    /// Held-out accuracy before training and after each epoch.
    pub heldout_accuracy: Vec<f64>,
    pub speakers: Vec<String>,
}

fn speaker_classes(windows: &[WindowSample]) -> Vec<String> {
    let mut set: BTreeMap<&str, ()> = BTreeMap::new();
    for w in windows {
        if let Some(l) = &w.label {
            set.insert(l, ());
        }
    }
    set.into_keys().map(String::from).collect()
}

/// Per-speaker split keeping every speaker present on both sides.
fn split_held_out(
    windows: Vec<WindowSample>,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<WindowSample>, Vec<WindowSample>) {
    let mut by_speaker: BTreeMap<String, Vec<WindowSample>> = BTreeMap::new();
    for w in windows {
        let key = w.label.clone().unwrap_or_default();
        by_speaker.entry(key).or_default().push(w);
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (_, mut group) in by_speaker {
        group.shuffle(rng);
        let n_held = ((group.len() as f64 * fraction).round() as usize)
            .clamp(1, group.len().saturating_sub(1).max(1));
        for (i, w) in group.into_iter().enumerate() {
            if i < n_held {
                held.push(w);
            } else {
                train.push(w);
            }
        }
    }
    (train, held)
}

fn system_loss<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    cfg: &SystemConfig,
    window: Tensor,
    label: usize,
) -> Result<crate::numerics::Var<'t, f64>> {
    let out = system_forward(tape, store, cfg, tape.constant(window))?;
    let mut loss = angular_softmax_loss(tape, store, out.embedding, label)?;
    for att in &out.attention {
        let pen = attention_penalty(tape, att.annotation, &att.lambda, att.mu)?;
        loss = loss.add(pen).map_err(NetError::Numerics)?;
    }
    Ok(loss)
}

fn heldout_accuracy(
    store: &ParamStore,
    cfg: &SystemConfig,
    corpus: &Corpus,
    held: &[WindowSample],
    classes: &BTreeMap<String, usize>,
    window: usize,
) -> Result<f64> {
    if held.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for sample in held {
        let feats = &corpus.recordings[sample.recording].feats;
        let tape = Tape::new();
        let out = system_forward(&tape, store, cfg, tape.constant(sample.tensor(feats, window)))?;
        let logits = angular_softmax_logits(&tape, store, out.embedding)?.value();
        let pred = logits
            .data()
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.total_cmp(b))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let truth = classes[sample.label.as_deref().unwrap_or_default()];
        correct += (pred == truth) as usize;
    }
    Ok(correct as f64 / held.len() as f64)
}

/// Trains one embedding system (single or combined) on the corpus with
/// the angular-softmax loss plus all attention penalties, jointly over
/// every parameter. Reports held-out accuracy before training and after
/// each epoch.
pub fn train_embedding_system(
    cfg: &SystemConfig,
    corpus: &Corpus,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedSystem> {
    let mut all_windows = Vec::new();
    for (r, rec) in corpus.recordings.iter().enumerate() {
        all_windows.extend(make_windows(
            &rec.feats,
            &rec.reference,
            train_cfg.window,
            train_cfg.shift,
            r,
        ));
    }
    if all_windows.is_empty() {
        return Err(TrainError::NoData("no labeled windows in corpus".into()));
    }
    let speakers = speaker_classes(&all_windows);
    if speakers.len() < 2 {
        return Err(TrainError::NoData(format!("{} speakers in corpus", speakers.len())));
    }
    let classes: BTreeMap<String, usize> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    cfg.register(&mut store, &mut rng)?;
    store.insert_xavier("clf.w", speakers.len(), cfg.embed_dim, &mut rng);

    let (mut train, held) = split_held_out(all_windows, train_cfg.held_out_fraction, &mut rng);
    let mut accuracy = vec![heldout_accuracy(
        &store,
        cfg,
        corpus,
        &held,
        &classes,
        train_cfg.window,
    )?];

    for epoch in 0..train_cfg.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(train_cfg.batch_size) {
            store.zero_grads();
            for sample in batch {
                let feats = &corpus.recordings[sample.recording].feats;
                let label = classes[sample.label.as_deref().unwrap_or_default()];
                let tape = Tape::new();
                let loss =
                    system_loss(&tape, &store, cfg, sample.tensor(feats, train_cfg.window), label)?;
                if !loss.scalar_value().is_finite() {
                    return Err(TrainError::Diverged(format!("epoch {epoch}")));
                }
                tape.backward(loss).map_err(NumericsError::from)?;
                tape.accumulate_param_grads(&mut store);
            }
            store.clip_grads(train_cfg.grad_clip);
            store.sgd_step(train_cfg.lr, 1.0 / batch.len() as f64);
        }
        accuracy.push(heldout_accuracy(
            &store,
            cfg,
            corpus,
            &held,
            &classes,
            train_cfg.window,
        )?);
    }
    Ok(TrainedSystem { store, heldout_accuracy: accuracy, speakers })
}

// ── VAD training ─────────────────────────────────────────────────────

fn frame_is_speech(reference: &Timeline, t_mid: f64) -> bool {
    reference
        .entries()
        .iter()
        .any(|e| t_mid >= e.start && t_mid < e.end)
}

/// Stacks one batch of (recording, frame, label) context windows and runs
/// the VAD layers over all of them in one pass.
fn vad_batch_logits<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    corpus: &Corpus,
    cfg: &VadConfig,
    batch: &[(usize, usize, usize)],
) -> crate::numerics::Result<crate::numerics::Var<'t, f64>> {
    let window = cfg.window_frames();
    let half = cfg.context_half as isize;
    let input_dim = cfg.input_dim();
    let rows = batch.len();
    let mut data = Vec::with_capacity(rows * input_dim);
    for &(r, t, _) in batch {
        let w = corpus.recordings[r].feats.window(t as isize - half, window);
        data.extend_from_slice(w.data());
    }
    let mut h = tape.constant(Tensor::new(vec![rows, input_dim], data).expect("batch shape"));
    for i in 0..cfg.hidden_layers {
        let w = tape.param(store, &format!("vad.l{i}.w"))?;
        let b = tape.param(store, &format!("vad.l{i}.b"))?;
        h = h.matmul(w)?.add_row(b)?.relu()?;
    }
    let w = tape.param(store, "vad.out.w")?;
    let b = tape.param(store, "vad.out.b")?;
    h.matmul(w)?.add_row(b)
}

/// Trains the VAD frame classifier on a balanced sample of frames.
/// Returns the store and per-epoch held-out frame accuracy.
pub fn train_vad(
    vad_cfg: &VadConfig,
    corpus: &Corpus,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParamStore, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5641_4400);
    let mut speech: Vec<(usize, usize)> = Vec::new();
    let mut nonspeech: Vec<(usize, usize)> = Vec::new();
    for (r, rec) in corpus.recordings.iter().enumerate() {
        let period = rec.feats.frame_period();
        for t in 0..rec.feats.len() {
            let mid = (t as f64 + 0.5) * period;
            if frame_is_speech(&rec.reference, mid) {
                speech.push((r, t));
            } else {
                nonspeech.push((r, t));
            }
        }
    }
    if speech.is_empty() || nonspeech.is_empty() {
        return Err(TrainError::NoData("vad needs both classes".into()));
    }
    speech.shuffle(&mut rng);
    nonspeech.shuffle(&mut rng);
    let per_class = (train_cfg.vad_samples / 2).min(speech.len()).min(nonspeech.len());
    let mut samples: Vec<(usize, usize, usize)> = Vec::with_capacity(2 * per_class);
    samples.extend(speech.into_iter().take(per_class).map(|(r, t)| (r, t, 1usize)));
    samples.extend(nonspeech.into_iter().take(per_class).map(|(r, t)| (r, t, 0usize)));
    samples.shuffle(&mut rng);
    let n_held = (samples.len() / 10).max(1);
    let held: Vec<_> = samples.split_off(samples.len() - n_held);

    let mut store = ParamStore::new();
    nets::register_vad(&mut store, vad_cfg, &mut rng);

    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let logits = vad_batch_logits(&tape, store, corpus, vad_cfg, &held)?.value();
        let mut correct = 0usize;
        for (i, &(_, _, label)) in held.iter().enumerate() {
            let pred = (logits.at(i, 1) > logits.at(i, 0)) as usize;
            correct += (pred == label) as usize;
        }
        Ok(correct as f64 / held.len() as f64)
    };

    let mut accuracy = vec![eval(&store)?];
    for epoch in 0..train_cfg.vad_epochs {
        samples.shuffle(&mut rng);
        for batch in samples.chunks(train_cfg.batch_size.max(8)) {
            store.zero_grads();
            let tape = Tape::new();
            let logits = vad_batch_logits(&tape, &store, corpus, vad_cfg, batch)?;
            let mut loss: Option<crate::numerics::Var<f64>> = None;
            for (i, &(_, _, label)) in batch.iter().enumerate() {
                let ce = logits
                    .row(i)
                    .and_then(|r| r.cross_entropy(label))
                    .map_err(NumericsError::from)?;
                loss = Some(match loss {
                    Some(acc) => acc.add(ce).map_err(NumericsError::from)?,
                    None => ce,
                });
            }
            let loss = loss.expect("non-empty batch");
            if !loss.scalar_value().is_finite() {
                return Err(TrainError::Diverged(format!("vad epoch {epoch}")));
            }
            tape.backward(loss).map_err(NumericsError::from)?;
            tape.accumulate_param_grads(&mut store);
            store.clip_grads(train_cfg.grad_clip);
            store.sgd_step(train_cfg.vad_lr, 1.0 / batch.len() as f64);
        }
        accuracy.push(eval(&store)?);
    }
    Ok((store, accuracy))
}

// ── CPD training ─────────────────────────────────────────────────────

/// Change-point logits for one training sample, windows clipped to the
/// sample's speech block like the segmenter does at inference time.
fn cpd_sample_logits<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    corpus: &Corpus,
    cfg: &CpdConfig,
    sample: &(usize, usize, (usize, usize), usize),
) -> nets::Result<crate::numerics::Var<'t, f64>> {
    let (r, t, (bs, be), _) = *sample;
    let side = cfg.side_frames();
    let half = cfg.context_half as isize;
    let feats = &corpus.recordings[r].feats;
    let past = feats.window_in(bs, be, t as isize - half, side);
    let future = feats.window_in(bs, be, t as isize, side);
    nets::cpd_logits(tape, store, tape.constant(past), tape.constant(future), cfg)
}

/// Pretrains the CPD's TDNN as a frame-level speaker classifier, which
/// gives the change detector speaker-discriminative d-vectors to compare
/// before joint training starts (the from-scratch model tends to sit at
/// an uninformative saddle).
fn pretrain_cpd_tdnn(
    store: &mut ParamStore,
    cpd_cfg: &CpdConfig,
    corpus: &Corpus,
    train_cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    const CHUNK: usize = 25;
    // (recording, start frame, segment bounds, speaker label) chunks.
    let mut speakers: BTreeMap<String, usize> = BTreeMap::new();
    let mut chunks: Vec<(usize, usize, (usize, usize), usize)> = Vec::new();
    for (r, rec) in corpus.recordings.iter().enumerate() {
        for e in rec.reference.entries() {
            let fs = rec.feats.frame_at(e.start);
            let fe = rec.feats.frame_at(e.end).min(rec.feats.len());
            if fe <= fs {
                continue;
            }
            let next = speakers.len();
            let class = *speakers.entry(e.label.clone()).or_insert(next);
            let mut t = fs;
            while t < fe {
                chunks.push((r, t, (fs, fe), class));
                t += CHUNK;
            }
        }
    }
    if speakers.len() < 2 || chunks.is_empty() {
        return Ok(());
    }
    chunks.shuffle(rng);
    chunks.truncate(train_cfg.cpd_pretrain_chunks);

    let d = cpd_cfg.tdnn.out_dim();
    store.insert_xavier("cpd.pre.w", d, speakers.len(), rng);
    for epoch in 0..train_cfg.cpd_pretrain_epochs {
        chunks.shuffle(rng);
        for batch in chunks.chunks(8) {
            store.zero_grads();
            for &(r, t, (fs, fe), class) in batch {
                let feats = &corpus.recordings[r].feats;
                let window = feats.window_in(fs, fe, t as isize, CHUNK);
                let tape = Tape::new();
                let h = nets::tdnn_forward(&tape, store, "cpd.tdnn", tape.constant(window), &cpd_cfg.tdnn)?;
                let w = tape.param(store, "cpd.pre.w").map_err(NumericsError::from)?;
                let logits = h.matmul(w).map_err(NumericsError::from)?;
                let mut loss: Option<crate::numerics::Var<f64>> = None;
                for row in 0..CHUNK {
                    let ce = logits
                        .row(row)
                        .and_then(|r| r.cross_entropy(class))
                        .map_err(NumericsError::from)?;
                    loss = Some(match loss {
                        Some(acc) => acc.add(ce).map_err(NumericsError::from)?,
                        None => ce,
                    });
                }
                let loss = loss.expect("chunk rows").scale(1.0 / CHUNK as f64)
                    .map_err(NumericsError::from)?;
                if !loss.scalar_value().is_finite() {
                    return Err(TrainError::Diverged(format!("cpd pretrain epoch {epoch}")));
                }
                tape.backward(loss).map_err(NumericsError::from)?;
                tape.accumulate_param_grads(store);
            }
            store.clip_grads(train_cfg.grad_clip);
            store.sgd_step(train_cfg.cpd_lr, 1.0 / batch.len() as f64);
        }
    }
    store.remove("cpd.pre.w");
    Ok(())
}

/// Maximal speech blocks: reference segments merged across gaps below
/// `max_gap` (mirrors what VAD produces at inference time).
fn speech_blocks(reference: &Timeline, feats: &FeatureSequence, max_gap: f64) -> Vec<(usize, usize)> {
    let mut blocks: Vec<(f64, f64)> = Vec::new();
    for e in reference.entries() {
        match blocks.last_mut() {
            Some(last) if e.start - last.1 < max_gap => last.1 = last.1.max(e.end),
            _ => blocks.push((e.start, e.end)),
        }
    }
    blocks
        .into_iter()
        .map(|(s, e)| (feats.frame_at(s), feats.frame_at(e).min(feats.len())))
        .filter(|(s, e)| e > s)
        .collect()
}

/// Trains the change-point detector on balanced change/non-change frames.
pub fn train_cpd(
    cpd_cfg: &CpdConfig,
    corpus: &Corpus,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParamStore, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4350_4400);

    // Positives: frames at seamless speaker turns (±2 frame jitter).
    // Negatives: speech frames at least 0.5 s from any turn.
    let mut positives: Vec<(usize, usize, (usize, usize))> = Vec::new();
    let mut negatives: Vec<(usize, usize, (usize, usize))> = Vec::new();
    for (r, rec) in corpus.recordings.iter().enumerate() {
        let period = rec.feats.frame_period();
        let changes = crate::segmentation::reference_change_points(&rec.reference, 0.05);
        let blocks = speech_blocks(&rec.reference, &rec.feats, 0.2);
        let change_frames: Vec<usize> = changes.iter().map(|c| rec.feats.frame_at(*c)).collect();
        for &(bs, be) in &blocks {
            for &cf in &change_frames {
                if cf > bs && cf < be {
                    for jitter in -2i64..=2 {
                        let t = cf as i64 + jitter;
                        if t > bs as i64 && (t as usize) < be {
                            positives.push((r, t as usize, (bs, be)));
                        }
                    }
                }
            }
            let margin = (0.5 / period) as usize;
            for t in bs..be {
                let clear = change_frames
                    .iter()
                    .all(|&cf| (t as i64 - cf as i64).unsigned_abs() as usize >= margin);
                if clear {
                    negatives.push((r, t, (bs, be)));
                }
            }
        }
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(TrainError::NoData("cpd needs both classes".into()));
    }
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);
    let per_class = (train_cfg.cpd_samples / 2).min(positives.len()).min(negatives.len());
    let mut samples: Vec<(usize, usize, (usize, usize), usize)> = Vec::new();
    samples.extend(positives.into_iter().take(per_class).map(|(r, t, b)| (r, t, b, 1usize)));
    samples.extend(negatives.into_iter().take(per_class).map(|(r, t, b)| (r, t, b, 0usize)));
    samples.shuffle(&mut rng);
    let n_held = (samples.len() / 10).max(1);
    let held: Vec<_> = samples.split_off(samples.len() - n_held);

    let mut store = ParamStore::new();
    nets::register_cpd(&mut store, cpd_cfg, &mut rng);
    if train_cfg.cpd_pretrain_chunks > 0 {
        pretrain_cpd_tdnn(&mut store, cpd_cfg, corpus, train_cfg, &mut rng)?;
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut correct = 0usize;
        for sample in &held {
            let tape = Tape::new();
            let logits = cpd_sample_logits(&tape, store, corpus, cpd_cfg, sample)?.value();
            let pred = (logits.data()[1] > logits.data()[0]) as usize;
            correct += (pred == sample.3) as usize;
        }
        Ok(correct as f64 / held.len() as f64)
    };

    let mut accuracy = vec![eval(&store)?];
    for epoch in 0..train_cfg.cpd_epochs {
        samples.shuffle(&mut rng);
        for batch in samples.chunks(train_cfg.batch_size) {
            store.zero_grads();
            for sample in batch {
                let tape = Tape::new();
                let logits = cpd_sample_logits(&tape, &store, corpus, cpd_cfg, sample)?;
                let loss = logits.cross_entropy(sample.3).map_err(NumericsError::from)?;
                if !loss.scalar_value().is_finite() {
                    return Err(TrainError::Diverged(format!("cpd epoch {epoch}")));
                }
                tape.backward(loss).map_err(NumericsError::from)?;
                tape.accumulate_param_grads(&mut store);
            }
            store.clip_grads(train_cfg.grad_clip);
            store.sgd_step(train_cfg.cpd_lr, 1.0 / batch.len() as f64);
        }
        accuracy.push(eval(&store)?);
    }
    Ok((store, accuracy))
}
