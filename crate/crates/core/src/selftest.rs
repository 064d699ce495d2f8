//! Built-in oracle suite behind `cvec selftest`: gradient checks, the
//! bilinear algebra equivalences, clustering recovery, scoring fixtures,
//! and serialization fault injection. Everything runs in seconds on small
//! dimensions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::combination::{
    bilinear_full_oracle, bilinear_outer_oracle, tied_rank_tensor, CombinerConfig,
    CombinerVariant,
};
use crate::gradcheck;
use crate::nets::{HornnConfig, TdnnConfig};
use crate::pooling::{attention_penalty, PoolingConfig};
use crate::scoring::{score, ScoreConfig};
use crate::segmentation::cpd_eval;
use crate::system::{angular_softmax_loss, system_forward, SystemConfig, SystemKind};
use crate::timeline::{parse_rttm, Interval, Timeline};
use crate::{ParamStore, Tape, Tensor};

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<String, String>;

fn ok(detail: impl Into<String>) -> Result<String, String> {
    Ok(detail.into())
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn check_matmul_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, k, n) = (5, 7, 4);
    let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let tape = Tape::new();
    let got = tape
        .constant(Tensor::new(vec![m, k], a.clone()).unwrap())
        .matmul(tape.constant(Tensor::new(vec![k, n], b.clone()).unwrap()))
        .map_err(|e| e.to_string())?
        .value();
    let mut max = 0.0f64;
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            max = max.max((got.at(i, j) - acc).abs());
        }
    }
    ensure(max < 1e-12, format!("triple-loop mismatch {max:e}"))?;
    ok(format!("max abs diff {max:e}"))
}

fn check_elementwise_gradient() -> Result<String, String> {
    let mut store = ParamStore::new();
    store.insert("x", &[3], vec![0.3, -0.7, 1.2]);
    let report = gradcheck::check_params(&store, 3, 1e-5, 2, |tape, p| {
        let x = tape.param(p, "x")?;
        x.tanh()?.hadamard(x.sigmoid()?)?.sum()
    })
    .map_err(|e| e.to_string())?;
    ensure(report.passes(1e-8), format!("rel err {:e}", report.max_rel_err))?;
    ok(format!("max rel err {:e}", report.max_rel_err))
}

fn check_cvector_gradients() -> Result<String, String> {
    let cfg = SystemConfig {
        kind: SystemKind::Combined(CombinerVariant::StackedSigmoid),
        tdnn: TdnnConfig::with_widths(6, 5, 4),
        hornn: HornnConfig { feat_dim: 6, hidden: 5, lags: vec![1, 4], proj: 4 },
        pool_tdnn: PoolingConfig::new(2, 3, 1),
        pool_hornn: PoolingConfig::new(2, 3, 2),
        combiner: CombinerConfig {
            output: Some(8),
            rank: Some(4),
            att_hidden: 3,
            ..CombinerConfig::tiny(CombinerVariant::StackedSigmoid)
        },
        embed_dim: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    cfg.register(&mut store, &mut rng).map_err(|e| e.to_string())?;
    store.insert_xavier("clf.w", 3, 4, &mut rng);
    let window = Tensor::new(
        vec![12, 6],
        (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let report = gradcheck::check_params(&store, 50, 1e-5, 11, |tape, p| {
        let out = system_forward(tape, p, &cfg, tape.constant(window.clone())).map_err(|e| {
            crate::numerics::NumericsError::ShapeMismatch { op: "selftest", detail: e.to_string() }
        })?;
        let mut loss =
            angular_softmax_loss(tape, p, out.embedding, 1).map_err(|e| {
                crate::numerics::NumericsError::ShapeMismatch {
                    op: "selftest",
                    detail: e.to_string(),
                }
            })?;
        for att in &out.attention {
            let pen = attention_penalty(tape, att.annotation, &att.lambda, att.mu).map_err(|e| {
                crate::numerics::NumericsError::ShapeMismatch {
                    op: "selftest",
                    detail: e.to_string(),
                }
            })?;
            loss = loss.add(pen)?;
        }
        Ok(loss)
    })
    .map_err(|e| e.to_string())?;
    ensure(report.passes(1e-5), format!("rel err {:e}", report.max_rel_err))?;
    ok(format!("{} params checked, max rel err {:e}", report.checked, report.max_rel_err))
}

fn check_bilinear_routes() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (m, n, o) = (3, 4, 2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let e1: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..o * m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = bilinear_full_oracle(&e1, &e2, &w, &b);
        let c = bilinear_outer_oracle(&e1, &e2, &w, &b);
        for (x, y) in a.iter().zip(&c) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst < 1e-12, format!("route gap {worst:e}"))?;
    ok(format!("100 draws, max route gap {worst:e}"))
}

fn check_tied_rank_reconstruction() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (m, n, d, o) = (4, 4, 2, 3);
    let u1: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let u2: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p: Vec<f64> = (0..o * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tied_rank_tensor(&u1, &u2, &p, m, n, d, o);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let e1: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Low-rank evaluation: c_o = p_oᵀ(U1ᵀe1 ⊙ U2ᵀe2) + b_o.
        let z: Vec<f64> = (0..d)
            .map(|dd| {
                let a: f64 = (0..m).map(|i| u1[i * d + dd] * e1[i]).sum();
                let c: f64 = (0..n).map(|j| u2[j * d + dd] * e2[j]).sum();
                a * c
            })
            .collect();
        let low: Vec<f64> = (0..o)
            .map(|out| (0..d).map(|dd| p[out * d + dd] * z[dd]).sum::<f64>() + b[out])
            .collect();
        let full = bilinear_full_oracle(&e1, &e2, &w, &b);
        for (x, y) in low.iter().zip(&full) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst < 1e-12, format!("reconstruction gap {worst:e}"))?;
    ok(format!("max reconstruction gap {worst:e}"))
}

fn check_attention_penalty() -> Result<String, String> {
    let tape = Tape::new();
    let mut one_hot = vec![0.0; 5];
    one_hot[0] = 1.0;
    let a = tape.constant(Tensor::new(vec![5, 1], one_hot).unwrap());
    let p = attention_penalty(&tape, a, &[1.0], 0.05).map_err(|e| e.to_string())?;
    ensure(p.scalar_value() == 0.0, "one-hot/λ=1 penalty not zero")?;

    let a = tape.constant(Tensor::new(vec![5, 1], vec![0.2; 5]).unwrap());
    let p = attention_penalty(&tape, a, &[0.2], 0.05).map_err(|e| e.to_string())?;
    ensure(p.scalar_value().abs() < 1e-30, "uniform/λ=1/T penalty not zero")?;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let col: Vec<f64> = raw.into_iter().map(|v| v / total).collect();
    let a = tape.constant(Tensor::new(vec![6, 1], col).unwrap());
    let p = attention_penalty(&tape, a, &[1.0], 0.05).map_err(|e| e.to_string())?;
    ensure(p.scalar_value() > 0.0, "random column penalty not positive")?;
    ok("analytic zeros and positivity hold")
}

fn check_clustering_recovery() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut gauss = move || {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let centers = [
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 0.0],
    ];
    let sigma = 0.14;
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for (ci, c) in centers.iter().enumerate() {
        for _ in 0..20 {
            points.push(c.iter().map(|x| x + sigma * gauss()).collect::<Vec<f64>>());
            truth.push(ci);
        }
    }
    let affinity = crate::clustering::cosine_affinity(&points).map_err(|e| e.to_string())?;
    let refined = crate::clustering::refine_affinity(&affinity, 0.4);
    let result = crate::clustering::choose_k_and_cluster(&refined, &points, 10, 3)
        .map_err(|e| e.to_string())?;
    ensure(result.k == 3, format!("eigengap picked k={}", result.k))?;
    let ari = crate::clustering::adjusted_rand_index(&result.labels, &truth);
    ensure((ari - 1.0).abs() < 1e-12, format!("ARI {ari}"))?;
    ok("k=3 recovered with ARI 1.0")
}

fn check_scoring_fixture() -> Result<String, String> {
    let mut reference = Timeline::new("rec");
    reference.push(Interval::new(0.0, 10.0, "alice"));
    let mut hypothesis = Timeline::new("rec");
    hypothesis.push(Interval::new(0.0, 5.0, "spk0"));
    let report = score(
        std::slice::from_ref(&reference),
        std::slice::from_ref(&hypothesis),
        &ScoreConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    ensure(report.valid, "report invalid")?;
    ensure(
        (report.overall.missed_pct - 50.0).abs() < 0.1,
        format!("MS {}%", report.overall.missed_pct),
    )?;
    ensure(report.overall.false_alarm_pct == 0.0, "FA nonzero")?;
    ensure(report.overall.speaker_error_pct == 0.0, "SER nonzero")?;
    let sum = report.overall.missed_pct + report.overall.false_alarm_pct
        + report.overall.speaker_error_pct;
    ensure((sum - report.overall.der_pct).abs() < 1e-9, "decomposition broken")?;
    ok(format!("MS {:.2}%, DER decomposition exact", report.overall.missed_pct))
}

fn check_cpd_metric_fixture() -> Result<String, String> {
    let m = cpd_eval(&[2.1, 14.0], &[2.0, 10.0, 20.0], 0.5);
    ensure(m.precision == 0.5, format!("P {}", m.precision))?;
    ensure((m.recall - 1.0 / 3.0).abs() < 1e-15, format!("R {}", m.recall))?;
    ensure((m.f1 - 0.4).abs() < 1e-12, format!("F1 {}", m.f1))?;
    ok("P=0.500 R=0.333 F1=0.400")
}

fn check_param_archive() -> Result<String, String> {
    let dir = std::env::temp_dir().join(format!("cvec-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("probe.params");
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut store = ParamStore::new();
    store.insert_xavier("a.w", 4, 3, &mut rng);
    store.insert_zeros("a.b", &[3]);
    store.save(&path).map_err(|e| e.to_string())?;
    let loaded = ParamStore::load(&path).map_err(|e| e.to_string())?;
    ensure(
        loaded.get("a.w").map(|p| p.values.clone()) == store.get("a.w").map(|p| p.values.clone()),
        "round trip mismatch",
    )?;
    // Fault injection: flip one byte in the payload.
    let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&path, bytes).map_err(|e| e.to_string())?;
    let corrupt = ParamStore::load(&path);
    let _ = std::fs::remove_dir_all(&dir);
    ensure(corrupt.is_err(), "corrupted archive loaded silently")?;
    ok("round trip exact; corruption detected")
}

fn check_rttm_round_trip() -> Result<String, String> {
    let mut t = Timeline::new("meeting");
    t.push(Interval::new(0.5, 2.25, "spk0"));
    t.push(Interval::new(2.25, 4.0, "spk1"));
    let parsed = parse_rttm(&t.to_rttm()).map_err(|e| e.to_string())?;
    ensure(parsed.len() == 1 && parsed[0].len() == 2, "round trip shape")?;
    ensure(
        parsed[0].entries()[1].label == "spk1",
        "labels lost in round trip",
    )?;
    ok("rttm writer/parser agree")
}

/// Runs every check; all must pass for a release-worthy build.
pub fn run_all() -> Vec<CheckResult> {
    let checks: [(&'static str, Check); 10] = [
        ("matmul vs triple-loop oracle", check_matmul_oracle),
        ("elementwise gradients vs finite differences", check_elementwise_gradient),
        ("full c-vector gradient check", check_cvector_gradients),
        ("bilinear dual-route equivalence", check_bilinear_routes),
        ("tied low-rank tensor reconstruction", check_tied_rank_reconstruction),
        ("attention penalty analytic cases", check_attention_penalty),
        ("spectral clustering recovery", check_clustering_recovery),
        ("scoring hand fixture", check_scoring_fixture),
        ("cpd metric fixture", check_cpd_metric_fixture),
        ("parameter archive integrity", check_param_archive),
    ];
    let mut results = Vec::with_capacity(checks.len() + 1);
    for (name, check) in checks {
        let outcome = check();
        results.push(CheckResult {
            name,
            passed: outcome.is_ok(),
            detail: outcome.unwrap_or_else(|e| e),
        });
    }
    let rttm = check_rttm_round_trip();
    results.push(CheckResult {
        name: "rttm round trip",
        passed: rttm.is_ok(),
        detail: rttm.unwrap_or_else(|e| e),
    });
    results
}
