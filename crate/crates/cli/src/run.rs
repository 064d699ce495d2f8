//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;

use cvec_core::config::PipelineConfig;
use cvec_core::pipeline::{self, PipelineModels, SegmentationMode};
use cvec_core::scoring::{self, ScoreConfig};
use cvec_core::synth::{generate_synthetic_corpus, Corpus};
use cvec_core::timeline::{read_rttm, write_rttm, Timeline};
use cvec_core::training;
use cvec_core::ParamStore;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_MODEL: u8 = 3;
pub const EXIT_SELFTEST: u8 = 4;

pub struct Failure {
    pub code: u8,
    pub message: anyhow::Error,
}

impl Failure {
    fn input(message: anyhow::Error) -> Self {
        Self { code: EXIT_INPUT, message }
    }

    fn model(message: anyhow::Error) -> Self {
        Self { code: EXIT_MODEL, message }
    }
}

type Result<V> = std::result::Result<V, Failure>;

fn load_config(path: &Path) -> Result<PipelineConfig> {
    PipelineConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))
        .map_err(Failure::input)
}

// ── train ────────────────────────────────────────────────────────────

pub fn train(
    config: &Path,
    seed: Option<u64>,
    system: Option<String>,
    epochs: Option<usize>,
    synth: bool,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(system) = system {
        cfg.system = system;
        cfg.system_kind().map_err(|e| Failure::input(e.into()))?;
    }
    if let Some(epochs) = epochs {
        cfg.train = cvec_core::config::TrainSection { epochs: Some(epochs), ..cfg.train.clone() };
    }

    if synth && !cfg.paths.corpus_dir.is_dir() {
        let spec = cfg.synth_spec();
        println!(
            "generating synthetic corpus: {} speakers, {} recordings -> {}",
            spec.speakers,
            spec.recordings,
            cfg.paths.corpus_dir.display()
        );
        generate_synthetic_corpus(&spec)
            .save(&cfg.paths.corpus_dir)
            .context("writing synthetic corpus")
            .map_err(Failure::input)?;
    }
    cfg.require_corpus().map_err(|e| Failure::input(e.into()))?;
    let corpus = Corpus::load(&cfg.paths.corpus_dir)
        .context("loading corpus")
        .map_err(Failure::input)?;
    println!("corpus: {} recordings", corpus.recordings.len());

    std::fs::create_dir_all(&cfg.paths.model_dir)
        .context("creating model dir")
        .map_err(Failure::input)?;
    let train_cfg = cfg.train_config();
    let mut log = String::new();
    let t0 = Instant::now();

    let vad_cfg = cfg.vad_config();
    let (vad_store, vad_acc) = training::train_vad(&vad_cfg, &corpus, &train_cfg, cfg.seed)
        .context("training vad")
        .map_err(Failure::input)?;
    save_params(&vad_store, &cfg.paths.model_dir.join("vad.params"))?;
    log_accuracy(&mut log, "vad", &vad_acc);
    println!("vad trained: heldout accuracy {:.3}", vad_acc.last().unwrap_or(&0.0));

    if matches!(cfg.segmentation_mode().map_err(|e| Failure::input(e.into()))?, SegmentationMode::Cpd) {
        let cpd_cfg = cfg.cpd_config();
        let (cpd_store, cpd_acc) = training::train_cpd(&cpd_cfg, &corpus, &train_cfg, cfg.seed)
            .context("training cpd")
            .map_err(Failure::input)?;
        save_params(&cpd_store, &cfg.paths.model_dir.join("cpd.params"))?;
        log_accuracy(&mut log, "cpd", &cpd_acc);
        println!("cpd trained: heldout accuracy {:.3}", cpd_acc.last().unwrap_or(&0.0));
    }

    let sys_cfg = cfg.system_config().map_err(|e| Failure::input(e.into()))?;
    let trained = training::train_embedding_system(&sys_cfg, &corpus, &train_cfg, cfg.seed)
        .with_context(|| format!("training system {}", cfg.system))
        .map_err(Failure::input)?;
    save_params(&trained.store, &cfg.paths.model_dir.join("system.params"))?;
    log_accuracy(&mut log, &format!("system({})", cfg.system), &trained.heldout_accuracy);
    println!(
        "system {} trained: heldout accuracy {:.3} ({} speakers)",
        cfg.system,
        trained.heldout_accuracy.last().unwrap_or(&0.0),
        trained.speakers.len()
    );

    writeln!(log, "wall_time_s {:.1}", t0.elapsed().as_secs_f64()).ok();
    std::fs::write(cfg.paths.model_dir.join("train_log.txt"), log)
        .context("writing train log")
        .map_err(Failure::input)?;
    Ok(())
}

fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    store
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::input)
}

fn log_accuracy(log: &mut String, name: &str, accuracy: &[f64]) {
    for (epoch, acc) in accuracy.iter().enumerate() {
        writeln!(log, "{name} epoch {epoch} heldout_acc {acc:.6}").ok();
    }
}

// ── diarize ──────────────────────────────────────────────────────────

pub fn diarize(config: &Path, recordings: &[String], jobs: usize) -> Result<()> {
    let cfg = load_config(config)?;
    cfg.require_corpus().map_err(|e| Failure::input(e.into()))?;
    let mode = cfg.segmentation_mode().map_err(|e| Failure::input(e.into()))?;
    cfg.require_models(matches!(mode, SegmentationMode::Cpd))
        .map_err(|e| Failure::model(anyhow::anyhow!("untrained model: {e}")))?;

    let vad_store = load_params(&cfg.paths.model_dir.join("vad.params"))?;
    let cpd_store = if matches!(mode, SegmentationMode::Cpd) {
        Some(load_params(&cfg.paths.model_dir.join("cpd.params"))?)
    } else {
        None
    };
    let system_store = load_params(&cfg.paths.model_dir.join("system.params"))?;

    let corpus = Corpus::load(&cfg.paths.corpus_dir)
        .context("loading corpus")
        .map_err(Failure::input)?;
    let selected: Vec<&cvec_core::synth::Recording> = if recordings.is_empty() {
        corpus.recordings.iter().collect()
    } else {
        let mut out = Vec::new();
        for id in recordings {
            let rec = corpus
                .recordings
                .iter()
                .find(|r| &r.id == id)
                .with_context(|| format!("recording `{id}` not found under corpus_dir"))
                .map_err(Failure::input)?;
            out.push(rec);
        }
        out
    };

    let vad_cfg = cfg.vad_config();
    let cpd_cfg = cfg.cpd_config();
    let sys_cfg = cfg.system_config().map_err(|e| Failure::input(e.into()))?;
    let diarize_cfg = cfg.diarize_config().map_err(|e| Failure::input(e.into()))?;
    let models = PipelineModels {
        vad_store: &vad_store,
        vad: &vad_cfg,
        cpd_store: cpd_store.as_ref(),
        cpd: &cpd_cfg,
        system_store: &system_store,
        system: &sys_cfg,
    };

    std::fs::create_dir_all(&cfg.paths.output_dir)
        .context("creating output dir")
        .map_err(Failure::input)?;

    // Recording-level parallelism; results keep input order, and each
    // recording derives its own seed, so jobs never change outputs.
    let jobs = jobs.max(1).min(selected.len().max(1));
    let t0 = Instant::now();
    let mut hypotheses: Vec<Option<Timeline>> = vec![None; selected.len()];
    let results: Vec<(usize, std::result::Result<cvec_core::clustering::DiarizationHypothesis, String>)> =
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in 0..jobs {
                let models = &models;
                let diarize_cfg = &diarize_cfg;
                let selected = &selected;
                let seed = cfg.seed;
                handles.push(scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut idx = chunk;
                    while idx < selected.len() {
                        let rec = selected[idx];
                        let hyp =
                            pipeline::diarize_recording(&rec.id, &rec.feats, models, diarize_cfg, seed)
                                .map_err(|e| e.to_string());
                        out.push((idx, hyp));
                        idx += jobs;
                    }
                    out
                }));
            }
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        });
    for (idx, outcome) in results {
        let hyp = outcome
            .map_err(|e| Failure::model(anyhow::anyhow!("diarizing {}: {e}", selected[idx].id)))?;
        hypotheses[idx] = Some(hyp.timeline);
    }

    let mut all: Vec<Timeline> = Vec::with_capacity(selected.len());
    for (rec, hyp) in selected.iter().zip(hypotheses) {
        let timeline = hyp.expect("every index filled");
        let path = cfg.paths.output_dir.join(format!("{}.rttm", rec.id));
        write_rttm(&path, std::slice::from_ref(&timeline))
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::input)?;
        println!("{} -> {} segments", rec.id, timeline.len());
        all.push(timeline);
    }
    write_rttm(&cfg.paths.output_dir.join("all.rttm"), &all)
        .context("writing pooled hypothesis")
        .map_err(Failure::input)?;
    println!(
        "diarized {} recordings in {:.1}s ({} jobs)",
        selected.len(),
        t0.elapsed().as_secs_f64(),
        jobs
    );
    Ok(())
}

fn load_params(path: &Path) -> Result<ParamStore> {
    ParamStore::load(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::model)
}

// ── score ────────────────────────────────────────────────────────────

pub fn score(reference: &Path, hypothesis: &Path, collar: f64, score_overlap: bool) -> Result<()> {
    let refs = read_rttm(reference)
        .with_context(|| format!("reading reference {}", reference.display()))
        .map_err(Failure::input)?;
    let hyps = read_rttm(hypothesis)
        .with_context(|| format!("reading hypothesis {}", hypothesis.display()))
        .map_err(Failure::input)?;
    let cfg = ScoreConfig { collar, score_overlap };
    let report = scoring::score(&refs, &hyps, &cfg)
        .context("scoring")
        .map_err(Failure::input)?;
    print!("{}", report.to_table());
    print!("{}", report.to_kv());
    Ok(())
}

// ── selftest ─────────────────────────────────────────────────────────

pub fn selftest() -> Result<()> {
    let t0 = Instant::now();
    let results = cvec_core::selftest::run_all();
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(20);
    let mut failures = 0usize;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {:<width$}  {}", r.name, r.detail, width = width);
        failures += (!r.passed) as usize;
    }
    println!(
        "{} checks, {} failed, {:.2}s",
        results.len(),
        failures,
        t0.elapsed().as_secs_f64()
    );
    if failures > 0 {
        return Err(Failure {
            code: EXIT_SELFTEST,
            message: anyhow::anyhow!("{failures} selftest check(s) failed"),
        });
    }
    Ok(())
}

