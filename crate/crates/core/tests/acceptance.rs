//! Acceptance criteria A1–A9. Runs as a plain binary so each criterion
//! prints exactly one `A# PASS|FAIL` line; exits nonzero if any fails.
//! Pass a substring (e.g. `A7`) to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use contrastnet_core::autodiff::grad_check;
use contrastnet_core::contrast::{
    compute_magnitude, taylor_diagnostic, ContrastTarget, ExtractConfig, Extraction, Extractor,
    FeatureDump, LossKind,
};
use contrastnet_core::explain::{contrastive_cam, contrastive_maps, gradcam, ContrastLoss};
use contrastnet_core::harness::{
    extract_all, fit_head, loss_comparison_report, sweep_report, sweep_rows, train_pipeline,
    BenchConfig, DistortionKind, ExperimentReport, ReportRow, TrainedPipeline,
};
use contrastnet_core::head::{build_head, widths_of};
use contrastnet_core::nn::{desk_cnn, train, Checkpoint, Role, TrainConfig};
use contrastnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Shared desk pipeline for A2–A4: default configuration, trained once.

struct Desk {
    trained: TrainedPipeline,
    clean: ReportRow,
    noise: ExperimentReport,
    elapsed: Duration,
}

fn desk() -> &'static Result<Desk, String> {
    static DESK: OnceLock<Result<Desk, String>> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let config = BenchConfig::default();
        let (train_set, test_set) = ok(config.datasets())?;
        let trained = ok(train_pipeline(&config, &train_set))?;
        let (ff, ca) = ok(trained.evaluate(&test_set))?;
        let clean = ReportRow::new("clean", 0, test_set.len(), ff, ca);
        let elapsed = start.elapsed();
        let noise_config = BenchConfig {
            sweep_kinds: vec![DistortionKind::GaussianNoise, DistortionKind::SaltAndPepper],
            levels: vec![1, 2, 3, 4, 5],
            ..config
        };
        let mut noise = ExperimentReport::new("noise");
        noise.rows = ok(sweep_rows(&noise_config, &trained, &test_set, ""))?;
        for r in std::iter::once(&clean).chain(&noise.rows) {
            println!(
                "    {:<16} L{} ff {:6.2}  contrastive {:6.2}  gain {:+.2}",
                r.kind, r.level, r.ff_acc, r.contrastive_acc, r.gain
            );
        }
        Ok(Desk {
            trained,
            clean,
            noise,
            elapsed,
        })
    })
}

fn desk_ref() -> Result<&'static Desk, String> {
    desk()
        .as_ref()
        .map_err(|e| format!("desk pipeline failed: {e}"))
}

// ---------------------------------------------------------------------------

fn a1() -> Outcome {
    let (step, tol) = (1e-4, 1e-5);
    let mut target = Tensor::<f64>::zeros([1, 10]);
    target.data_mut()[3] = 1.0;

    let net = desk_cnn::<f64>(&[1, 32, 32], 10, 1).map_err(|e| e.to_string())?;
    let g = net.graph_with(|b, y| Some(LossKind::Ce.build(b, y, 10)));
    // Central differences are only an oracle where no ReLU or max-pool
    // kink lies within reach of the probe. A uniform image keeps every
    // interior pooling tie exact under any parameter change; the measured
    // margin is checked before comparing.
    let image = vec![0.3; 1024];
    let margin = kink_margin(&net, &image);
    ensure(
        margin >= 10.0 * step,
        format!("kink margin {margin:.2e} below {:.0e}", 10.0 * step),
    )?;
    let x = Tensor::new([1, 1, 32, 32], image).unwrap();
    let cnn = ok(grad_check(
        &g.graph,
        net.params(),
        &[("x", x), ("target", target.clone())],
        g.loss.unwrap(),
        step,
        tol,
    ))?;

    let head = ok(build_head::<f64>(10, 640, 3))?;
    let g = head.graph_with(|b, y| Some(LossKind::Ce.build(b, y, 10)));
    let f = Tensor::new([1, 640], random_vec(640, 4, -0.1, 0.1)).unwrap();
    let mlp = ok(grad_check(
        &g.graph,
        head.params(),
        &[("x", f), ("target", target)],
        g.loss.unwrap(),
        step,
        tol,
    ))?;

    let n: usize = net.params().numel() + head.params().numel();
    let worst = cnn.max_rel_error().max(mlp.max_rel_error());
    let detail = format!("{n} parameters, max relative error {worst:.2e} (tolerance {tol:.0e}), kink margin {margin:.2e}");
    ensure(cnn.passed(), format!("desk CNN: {:?}", cnn.failures()))?;
    ensure(mlp.passed(), format!("head: {:?}", mlp.failures()))?;
    Ok(detail)
}

fn a2() -> Outcome {
    let d = desk_ref()?;
    let gap = d.clean.gain.abs();
    let base_train = d.trained.base_history.last().map_or(0.0, |s| s.accuracy);
    let detail = format!(
        "feed-forward {:.2}%, contrastive {:.2}%, |gap| {:.2} (limit 3), train+eval {:.0}s (limit 600s)",
        d.clean.ff_acc,
        d.clean.contrastive_acc,
        gap,
        d.elapsed.as_secs_f64()
    );
    // parity of two untrained classifiers would be vacuous
    ensure(
        d.clean.ff_acc >= 80.0 && base_train >= 80.0,
        format!("base network did not train; {detail}"),
    )?;
    ensure(gap <= 3.0, detail.clone())?;
    ensure(d.elapsed < Duration::from_secs(600), detail.clone())?;
    Ok(detail)
}

fn a3() -> Outcome {
    let d = desk_ref()?;
    let levels = [3, 4, 5];
    let gn = d
        .noise
        .mean_gain("gaussian-noise", &levels)
        .ok_or("no gaussian-noise rows")?;
    let sp = d
        .noise
        .mean_gain("salt-and-pepper", &levels)
        .ok_or("no salt-and-pepper rows")?;
    let all: Vec<f64> = d.noise.select(|_| true, &levels).map(|r| r.gain).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let detail =
        format!("mean gain L3-5 {mean:+.2} (gaussian-noise {gn:+.2}, salt-and-pepper {sp:+.2})");
    ensure(
        all.len() == 6,
        format!("expected 6 rows, got {}", all.len()),
    )?;
    ensure(mean >= 0.0, detail.clone())?;
    ensure(gn > 0.0 || sp > 0.0, detail.clone())?;
    Ok(detail)
}

fn a4() -> Outcome {
    let d = desk_ref()?;
    let g1 = d
        .noise
        .mean_gain("gaussian-noise", &[1])
        .ok_or("no level-1 row")?;
    let g5 = d
        .noise
        .mean_gain("gaussian-noise", &[5])
        .ok_or("no level-5 row")?;
    let detail = format!("gaussian-noise gain L5 {g5:+.2} vs L1 {g1:+.2}");
    ensure(g5 >= g1, detail.clone())?;
    Ok(detail)
}

fn a5() -> Outcome {
    let widths = widths_of(&ok(build_head::<f32>(10, 640, 0))?);
    ensure(
        widths == [640, 300, 100, 10],
        format!("head widths {widths:?}"),
    )?;
    let net = ok(desk_cnn::<f64>(&[1, 32, 32], 10, 5))?;
    let configs = LossKind::ALL
        .iter()
        .map(|&k| ExtractConfig::gradient(k))
        .chain([ExtractConfig {
            extraction: Extraction::Fgsm {
                epsilon: 0.01,
                max_iters: 50,
            },
            normalize: true,
        }]);
    let mut count = 0;
    for cfg in configs {
        let ex = ok(Extractor::new(&net, cfg, Some(2.0)))?;
        for seed in 0..3 {
            let f = ok(ex.extract(&random_image(100 + seed), 0))?;
            ensure(
                f.len() == 640 && f.block_dim == 64 && f.num_classes == 10,
                format!("feature length {}", f.len()),
            )?;
            count += 1;
        }
    }
    Ok(format!(
        "{count} features of length 640; head widths 640-300-100-10"
    ))
}

fn a6() -> Outcome {
    let tol = 1e-6;
    let mut worst: f64 = 0.0;
    let mut maps = 0;
    let mut compare = |got: &[f64], want: &[f64]| -> Result<(), String> {
        ensure(got.len() == want.len(), "map size differs")?;
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
        maps += 1;
        Ok(())
    };
    // Grad-CAM against hand-written backward loops, including the trained base
    let trained = desk_ref().ok().map(|d| d.trained.base.cast::<f64>());
    let fresh = ok(desk_cnn::<f64>(&[1, 32, 32], 10, 6))?;
    for net in trained.iter().chain([&fresh]) {
        for seed in 0..2 {
            let x = random_image(200 + seed);
            for class in 0..10 {
                let m = ok(gradcam(net, &x, class))?;
                compare(&m.raw, &gradcam_oracle(net, x.data(), class))?;
            }
        }
    }
    // Contrastive maps against central differences of the exponential loss
    let net = positive_desk_cnn(7);
    let x = random_image(300);
    let all = ok(contrastive_maps(&net, &x, ContrastLoss::Exponential))?;
    ensure(all.len() == 10, format!("{} contrastive maps", all.len()))?;
    for (q, m) in all.iter().enumerate() {
        ensure(m.q == q, "maps out of class order")?;
        ensure(m.values.iter().all(|&v| v >= 0.0), "negative map value")?;
        compare(&m.raw, &contrastive_fd_oracle(&net, x.data(), q, true))?;
    }
    let m = ok(contrastive_cam(
        &net,
        &random_image(301),
        2,
        ContrastLoss::Exponential,
    ))?;
    compare(
        &m.raw,
        &contrastive_fd_oracle(&net, random_image(301).data(), 2, true),
    )?;
    let detail = format!("{maps} maps, max abs deviation {worst:.2e} (tolerance {tol:.0e})");
    ensure(worst <= tol, detail.clone())?;
    Ok(detail)
}

/// One trial of the engineered regime: final rows made zero-sum (so the
/// gradient of the logit sum vanishes), biases set so every logit but `P`
/// is zero and `y_P` is a small positive value. Returns `(cosine, max |y_j|
/// over j != P)`.
fn engineered_trial(t: u64) -> Result<(f64, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7000 + t);
    let mut net = ok(desk_cnn::<f64>(&[1, 32, 32], 10, 700 + t))?;
    let x = random_image(800 + t);
    let p = (t % 10) as usize;
    let q = (p + 1 + (t as usize / 10) % 9) % 10;
    let y_p: f64 = rng.gen_range(0.05..0.5);
    let h = ok(net.features(&x, net.depth() - 1))?.data().to_vec();
    let d = h.len();
    let w = net.params_mut().get_mut("9.weight").unwrap().data_mut();
    for k in 0..d {
        let mean = (0..10).map(|j| w[j * d + k]).sum::<f64>() / 10.0;
        (0..10).for_each(|j| w[j * d + k] -= mean);
    }
    let wh: Vec<f64> = (0..10)
        .map(|j| (0..d).map(|k| w[j * d + k] * h[k]).sum())
        .collect();
    let b = net.params_mut().get_mut("9.bias").unwrap().data_mut();
    for j in 0..10 {
        b[j] = if j == p { y_p } else { 0.0 } - wh[j];
    }
    let r = ok(taylor_diagnostic(&net, &x, p, q))?;
    let off = (0..10)
        .filter(|&j| j != p)
        .map(|j| r.logits[j].abs())
        .fold(0.0, f64::max);
    ensure(
        ok(net.predict(&x))?.label == p,
        format!("trial {t}: P is not the prediction"),
    )?;
    Ok((r.cosine, off))
}

fn a7() -> Outcome {
    let trials: u64 = 100;
    let mut good = 0;
    let mut lowest = f64::INFINITY;
    for t in 0..trials {
        let (cosine, off) = engineered_trial(t)?;
        ensure(off <= 1e-3, format!("trial {t}: off-P logit {off}"))?;
        lowest = lowest.min(cosine);
        if cosine >= 0.99 {
            good += 1;
        }
    }
    let detail = format!("{good}/{trials} trials with cosine >= 0.99 (lowest {lowest:.4})");
    ensure(good * 100 >= 95 * trials, detail.clone())?;
    Ok(detail)
}

fn small_config() -> BenchConfig {
    BenchConfig {
        seed: 3,
        train_per_class: 4,
        test_per_class: 2,
        base: TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        },
        head: TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        },
        sweep_kinds: vec![DistortionKind::GaussianNoise],
        levels: vec![1, 5],
        ..Default::default()
    }
}

fn a8() -> Outcome {
    // δ^M and M against brute force
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let n = rng.gen_range(2..20);
        let class = rng.gen_range(0..n);
        let m: f64 = rng.gen_range(0.01..50.0);
        let want: Vec<f64> = (0..n).map(|j| if j == class { m } else { 0.0 }).collect();
        ensure(
            ok(ContrastTarget::new(n, class, m))?.values == want,
            "δ^M differs",
        )?;
        for k in LossKind::ALL.into_iter().filter(|k| k.uses_magnitude()) {
            ensure(
                ok(k.target(n, class, Some(m)))? == want,
                format!("{} target differs", k.name()),
            )?;
        }
    }
    let config = small_config();
    let (train_set, test_set) = ok(config.datasets())?;
    let mut base = ok(desk_cnn::<f32>(train_set.sample_shape(), 10, config.seed))?;
    let outcome = ok(train(
        &mut base,
        &train_set.images,
        &train_set.labels,
        &config.base,
    ))?;
    let got = ok(compute_magnitude(&base, &train_set.images))?;
    let mut sum = 0.0;
    for i in 0..train_set.len() {
        let y = ok(base.logits(&train_set.sample(i)))?;
        sum += y
            .data()
            .iter()
            .map(|&v| v as f64)
            .fold(f64::NEG_INFINITY, f64::max);
    }
    let want = sum / train_set.len() as f64;
    ensure(got == want, format!("M {got} vs brute force {want}"))?;

    // every loss trains a head to completion
    for kind in LossKind::ALL {
        let (_, _, history) = ok(fit_head(
            &base,
            &train_set,
            ExtractConfig::gradient(kind),
            &config.head,
            1,
        ))?;
        ensure(
            history.len() == config.head.epochs && history.iter().all(|s| s.loss.is_finite()),
            format!("{} head stopped early", kind.name()),
        )?;
    }
    let report = ok(loss_comparison_report(
        &config,
        &base,
        outcome.history,
        &train_set,
        &test_set,
    ))?;
    for kind in LossKind::ALL {
        let prefix = format!("{}/", kind.name());
        let rows = report
            .rows
            .iter()
            .filter(|r| r.kind.starts_with(&prefix))
            .count();
        ensure(rows == 2, format!("{} has {rows} report rows", kind.name()))?;
        ensure(
            report.aggregates.iter().any(|a| a.label == kind.name()),
            format!("{} missing", kind.name()),
        )?;
    }
    ensure(report.ranking.len() == 9, "ranking incomplete")?;
    Ok(format!(
        "9/9 losses trained and reported; M = {got:.4} matches brute force exactly"
    ))
}

fn a9() -> Outcome {
    let config = small_config();
    type Artifacts = (Vec<u8>, Vec<u8>, Vec<u32>, String);
    let run = || -> Result<Artifacts, String> {
        let (train_set, test_set) = ok(config.datasets())?;
        let t = ok(train_pipeline(&config, &train_set))?;
        let features = ok(extract_all(
            &t.base,
            t.magnitude,
            config.extraction,
            &test_set,
        ))?;
        let bits = features
            .iter()
            .flat_map(|f| f.data.iter().map(|v| v.to_bits()))
            .collect();
        let csv = ok(sweep_report(&config, &t, &test_set))?.to_csv();
        let base = Checkpoint {
            network: t.base.clone(),
            epoch: config.base.epochs as u32,
            magnitude: Some(t.magnitude),
            role: Role::Base,
        };
        Ok((
            base.to_bytes(),
            t.head.checkpoint(config.head.epochs as u32).to_bytes(),
            bits,
            csv,
        ))
    };
    let first = run()?;
    let second = run()?;
    ensure(first.0 == second.0, "base checkpoints differ")?;
    ensure(first.1 == second.1, "head checkpoints differ")?;
    ensure(first.2 == second.2, "features differ")?;
    ensure(first.3 == second.3, "CSV reports differ")?;

    let dir = tempdir().map_err(|e| e.to_string())?;
    let ck = ok(Checkpoint::<f32>::from_bytes(&first.0))?;
    let path = dir.path().join("base.cnmf");
    ok(ck.save(&path))?;
    let back = ok(Checkpoint::<f32>::load(&path))?;
    ensure(
        back == ck && back.to_bytes() == first.0,
        "checkpoint round trip",
    )?;

    let (_, test_set) = ok(config.datasets())?;
    let features = ok(extract_all(
        &ck.network,
        ck.magnitude.unwrap(),
        config.extraction,
        &test_set,
    ))?;
    let mut dump = FeatureDump::new(
        10,
        64,
        config.extraction.extraction.loss(),
        config.extraction.normalize,
    );
    for f in &features {
        ok(dump.push(f))?;
    }
    let fpath = dir.path().join("f.cnfx");
    ok(dump.save(&fpath))?;
    let loaded = ok(FeatureDump::load(&fpath))?;
    ensure(loaded == dump, "feature dump round trip")?;
    let restored = loaded.features::<f32>();
    ensure(
        restored
            .iter()
            .zip(&features)
            .all(|(a, b)| a.data == b.data && a.predicted == b.predicted),
        "feature values changed",
    )?;
    Ok(format!(
        "2 seeded runs bit-identical ({} B base, {} B head, {} feature values, {} B CSV); round trips lossless",
        first.0.len(),
        first.1.len(),
        first.2.len(),
        first.3.len()
    ))
}

fn main() {
    type Criterion = (&'static str, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("A1", "gradient fidelity", a1),
        ("A2", "clean-data parity", a2),
        ("A3", "distortion gain", a3),
        ("A4", "level trend", a4),
        ("A5", "dimensional law", a5),
        ("A6", "explanation oracles", a6),
        ("A7", "Taylor diagnostic", a7),
        ("A8", "loss-family totality", a8),
        ("A9", "determinism and round trips", a9),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, f) in criteria {
        if !filters.is_empty()
            && !filters
                .iter()
                .any(|p| id.contains(p.as_str()) || name.contains(p.as_str()))
        {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("{id} FAIL {name}: {detail} [{secs:.1}s]");
                failed.push(id);
            }
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
