use contrastnet_core::autodiff::ParamStore;
use contrastnet_core::contrast::{
    compute_magnitude, extract_contrast, extract_feature, extract_feature_fgsm, fgsm_class_walk,
    l2_normalize, loss_eval, taylor_diagnostic, ContrastTarget, ExtractConfig, Extraction,
    Extractor, FeatureDump, LossKind,
};
use contrastnet_core::nn::{desk_cnn, LayerSpec, Network};
use contrastnet_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Independent per-kind formulas: mean reduction over the N logits.
fn reference_loss(kind: LossKind, y: &[f64], t: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean =
        |f: &dyn Fn(f64, f64) -> f64| y.iter().zip(t).map(|(&a, &b)| f(a, b)).sum::<f64>() / n;
    match kind {
        LossKind::MseM => mean(&|a, b| (a - b) * (a - b)),
        LossKind::Ce => {
            let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + y.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - y.iter().zip(t).map(|(a, b)| a * b).sum::<f64>()
        }
        LossKind::Bce => {
            // −[t ln σ(y) + (1−t) ln(1−σ(y))]
            mean(&|a, b| {
                let s = 1.0 / (1.0 + (-a).exp());
                -(b * s.ln() + (1.0 - b) * (1.0 - s).ln())
            })
        }
        LossKind::L1 | LossKind::L1M => mean(&|a, b| (a - b).abs()),
        LossKind::SmoothL1 | LossKind::SmoothL1M => mean(&|a, b| {
            let d = (a - b).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        }),
        LossKind::Nll => -y.iter().zip(t).map(|(a, b)| a * b).sum::<f64>(),
        LossKind::SoftMargin => mean(&|a, b| softplus(-a * b)),
    }
}

#[test]
fn every_loss_matches_its_reference_formula() {
    let n = 10;
    for (s, kind) in LossKind::ALL.into_iter().enumerate() {
        let y = random_vec(n, 40 + s as u64, 3.0);
        let t = kind.target(n, 3, Some(2.5)).unwrap();
        let got = loss_eval(kind, &y, &t).unwrap();
        let want = reference_loss(kind, &y, &t);
        assert!(got.is_finite());
        assert!(
            (got - want).abs() < 1e-12 * want.abs().max(1.0),
            "{kind}: {got} vs {want}"
        );
    }
}

#[test]
fn loss_eval_rejects_nan_and_length_mismatch() {
    assert!(loss_eval(LossKind::Ce, &[f64::NAN, 0.0], &[1.0, 0.0]).is_err());
    assert!(loss_eval(LossKind::Ce, &[0.0, 0.0], &[1.0]).is_err());
}

#[test]
fn kronecker_target_has_one_nonzero_entry() {
    for n in 2..8 {
        for i in 0..n {
            let t = ContrastTarget::new(n, i, 1.75).unwrap();
            let nz: Vec<usize> = (0..n).filter(|&j| t.values[j] != 0.0).collect();
            assert_eq!(nz, vec![i]);
            assert_eq!(t.values[i], 1.75);
        }
    }
    assert!(ContrastTarget::new(3, 0, 0.0).is_err());
    assert!(ContrastTarget::new(3, 0, -1.0).is_err());
    assert!(ContrastTarget::new(3, 3, 1.0).is_err());
}

fn dense_net(w_final: Vec<f64>, b_final: Vec<f64>, d: usize, n: usize) -> Network<f64> {
    let layers = vec![
        LayerSpec::Dense {
            inputs: d,
            outputs: d,
        },
        LayerSpec::Dense {
            inputs: d,
            outputs: n,
        },
    ];
    let mut p = ParamStore::new();
    p.insert("0.weight", Tensor::eye(d));
    p.insert("0.bias", Tensor::zeros([d]));
    p.insert("1.weight", Tensor::new([n, d], w_final).unwrap());
    p.insert("1.bias", Tensor::new([n], b_final).unwrap());
    Network::from_parts(&[d], layers, p).unwrap()
}

#[test]
fn magnitude_of_a_constant_network() {
    let net = dense_net(vec![0.0; 6], vec![0.0, 2.0, 1.0], 2, 3);
    let images = Tensor::new([4, 2], random_vec(8, 1, 1.0)).unwrap();
    assert_eq!(compute_magnitude(&net, &images).unwrap(), 2.0);
}

#[test]
fn magnitude_is_the_mean_of_maxima() {
    // y = x, so the max logits are 3 and 5
    let net = dense_net(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
    let images = Tensor::new([2, 2], vec![3.0, -1.0, 0.0, 5.0]).unwrap();
    assert_eq!(compute_magnitude(&net, &images).unwrap(), 4.0);
    let empty = Tensor::<f64>::zeros([0, 2]);
    assert!(matches!(
        compute_magnitude(&net, &empty),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn magnitude_matches_a_sample_by_sample_pass() {
    let net = desk_cnn::<f64>(&[1, 32, 32], 10, 4).unwrap();
    let images = Tensor::new([300, 1, 32, 32], random_vec(300 * 1024, 2, 1.0)).unwrap();
    let mut total = 0.0;
    for i in 0..300 {
        total += net.predict(&images.batch_item(i)).unwrap().confidence;
    }
    let got = compute_magnitude(&net, &images).unwrap();
    assert!((got - total / 300.0).abs() < 1e-12);
}

#[test]
fn contrast_is_zero_at_the_loss_minimum() {
    // logits (M, 0) equal δ^M for class 0
    let net = dense_net(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
    let x = Tensor::new([2], vec![2.0, 0.0]).unwrap();
    let r = extract_contrast(&net, &x, 0, LossKind::MseM, Some(2.0)).unwrap();
    assert!(r.iter().all(|&v| v == 0.0));
}

#[test]
fn mse_m_linear_closed_form() {
    let net = dense_net(vec![0.0; 4], vec![0.0; 2], 2, 2);
    let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
    // (2/N)(y_i − M)·h with N = 2
    assert_eq!(
        extract_contrast(&net, &x, 0, LossKind::MseM, Some(1.0)).unwrap(),
        vec![-1.0, -2.0]
    );
}

fn final_row_fd(
    net: &Network<f64>,
    x: &Tensor<f64>,
    kind: LossKind,
    class: usize,
    m: f64,
) -> Vec<f64> {
    let n = net.num_classes();
    let d = net.feature_dim();
    let name = format!("{}.weight", net.final_layer_index());
    let t = kind.target(n, class, Some(m)).unwrap();
    let loss_at = |net: &Network<f64>| {
        let y = net.logits(x).unwrap();
        reference_loss(kind, y.data(), &t)
    };
    let h = 1e-5;
    let mut probe = net.clone();
    (0..d)
        .map(|j| {
            let idx = class * d + j;
            let orig = probe.params().get(&name).unwrap().data()[idx];
            probe.params_mut().get_mut(&name).unwrap().data_mut()[idx] = orig + h;
            let up = loss_at(&probe);
            probe.params_mut().get_mut(&name).unwrap().data_mut()[idx] = orig - h;
            let down = loss_at(&probe);
            probe.params_mut().get_mut(&name).unwrap().data_mut()[idx] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn every_kind_matches_finite_differences_on_the_final_row() {
    let net = desk_cnn::<f64>(&[1, 32, 32], 10, 8).unwrap();
    let x = Tensor::new([1, 32, 32], random_vec(1024, 9, 1.0)).unwrap();
    let m = 1.3;
    for (s, kind) in LossKind::ALL.into_iter().enumerate() {
        let class = (s * 3) % 10;
        let got = extract_contrast(&net, &x, class, kind, Some(m)).unwrap();
        let want = final_row_fd(&net, &x, kind, class, m);
        assert_eq!(got.len(), 64);
        for (g, w) in got.iter().zip(&want) {
            let rel = (g - w).abs() / w.abs().max(1.0);
            assert!(rel < 1e-5, "{kind} class {class}: {g} vs {w}");
        }
    }
}

#[test]
fn feature_has_n_blocks_in_class_order() {
    let net = desk_cnn::<f64>(&[1, 32, 32], 10, 3).unwrap();
    let x = Tensor::new([1, 32, 32], random_vec(1024, 5, 1.0)).unwrap();
    let raw = ExtractConfig {
        extraction: Extraction::Gradient(LossKind::MseM),
        normalize: false,
    };
    let f = extract_feature(&net, &x, raw, Some(2.0)).unwrap();
    assert_eq!(f.len(), 640);
    for i in 0..10 {
        let r = extract_contrast(&net, &x, i, LossKind::MseM, Some(2.0)).unwrap();
        assert_eq!(f.block(i), r.as_slice());
    }
    let normed = extract_feature(&net, &x, ExtractConfig::default(), Some(2.0)).unwrap();
    let norm: f64 = normed.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
    assert!(normed.normalized);
}

#[test]
fn permuting_classes_permutes_blocks() {
    let net = desk_cnn::<f64>(&[1, 32, 32], 10, 6).unwrap();
    let x = Tensor::new([1, 32, 32], random_vec(1024, 7, 1.0)).unwrap();
    let perm = [3, 7, 0, 9, 1, 4, 8, 2, 6, 5];
    let mut permuted = net.clone();
    let li = net.final_layer_index();
    let (wn, bn) = (format!("{li}.weight"), format!("{li}.bias"));
    for (k, &src) in perm.iter().enumerate() {
        let row: Vec<f64> =
            net.params().get(&wn).unwrap().data()[src * 64..(src + 1) * 64].to_vec();
        permuted.params_mut().get_mut(&wn).unwrap().data_mut()[k * 64..(k + 1) * 64]
            .copy_from_slice(&row);
        permuted.params_mut().get_mut(&bn).unwrap().data_mut()[k] =
            net.params().get(&bn).unwrap().data()[src];
    }
    for kind in LossKind::ALL {
        let cfg = ExtractConfig {
            extraction: Extraction::Gradient(kind),
            normalize: false,
        };
        let a = extract_feature(&net, &x, cfg, Some(1.5)).unwrap();
        let b = extract_feature(&permuted, &x, cfg, Some(1.5)).unwrap();
        for (k, &src) in perm.iter().enumerate() {
            for (u, v) in b.block(k).iter().zip(a.block(src)) {
                assert!((u - v).abs() < 1e-12, "{kind}");
            }
        }
    }
}

#[test]
fn zero_blocks_stay_zero_after_normalization() {
    // h = 0 makes every final-row gradient vanish
    let net = dense_net(vec![0.3, -0.2, 0.1, 0.4], vec![0.5, -0.5], 2, 2);
    let x = Tensor::new([2], vec![0.0, 0.0]).unwrap();
    let f = extract_feature(&net, &x, ExtractConfig::default(), Some(1.0)).unwrap();
    assert_eq!(f.data, vec![0.0; 4]);
}

#[test]
fn normalization_is_idempotent() {
    let mut v = random_vec(640, 11, 2.0);
    l2_normalize(&mut v);
    let once = v.clone();
    l2_normalize(&mut v);
    for (a, b) in v.iter().zip(&once) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn magnitude_losses_need_a_magnitude() {
    let net = desk_cnn::<f64>(&[1, 32, 32], 10, 0).unwrap();
    for kind in [LossKind::MseM, LossKind::L1M, LossKind::SmoothL1M] {
        let cfg = ExtractConfig::gradient(kind);
        assert!(Extractor::new(&net, cfg, None).is_err());
        assert!(Extractor::new(&net, cfg, Some(0.0)).is_err());
    }
    assert!(Extractor::new(&net, ExtractConfig::gradient(LossKind::Ce), None).is_ok());
    let x = Tensor::<f64>::zeros([1, 32, 32]);
    assert!(extract_contrast(&net, &x, 10, LossKind::Ce, None).is_err());
}

/// Two classes, h = x, logits `W x`.
fn fgsm_net() -> Network<f64> {
    dense_net(vec![1.0, 0.5, -1.0, 0.0], vec![0.0, 0.0], 2, 2)
}

/// Hand simulation of the targeted sign walk for [`fgsm_net`].
fn fgsm_oracle(x0: [f64; 2], class: usize, eps: f64, max_iters: usize) -> (usize, Vec<f64>, bool) {
    let w = [[1.0, 0.5], [-1.0, 0.0]];
    let mut x = x0;
    let mut acc = vec![0.0; 2];
    for k in 1..=max_iters {
        let y = [
            w[0][0] * x[0] + w[0][1] * x[1],
            w[1][0] * x[0] + w[1][1] * x[1],
        ];
        let m = y[0].max(y[1]);
        let z = (y[0] - m).exp() + (y[1] - m).exp();
        let p = [(y[0] - m).exp() / z, (y[1] - m).exp() / z];
        let delta: Vec<f64> = (0..2)
            .map(|j| p[j] - f64::from(u8::from(j == class)))
            .collect();
        // ∂CE/∂W[class] = δ_class · h
        for j in 0..2 {
            acc[j] += (delta[class] * x[j]).abs();
        }
        for j in 0..2 {
            let g = delta[0] * w[0][j] + delta[1] * w[1][j];
            x[j] -= eps
                * if g > 0.0 {
                    1.0
                } else if g < 0.0 {
                    -1.0
                } else {
                    0.0
                };
        }
        let y = [
            w[0][0] * x[0] + w[0][1] * x[1],
            w[1][0] * x[0] + w[1][1] * x[1],
        ];
        let pred = if y[0] >= y[1] { 0 } else { 1 };
        if pred == class {
            return (k, acc, true);
        }
    }
    (max_iters, acc, false)
}

#[test]
fn fgsm_iteration_count_matches_hand_simulation() {
    let net = fgsm_net();
    let x = Tensor::new([2], vec![-1.0, -1.0]).unwrap();
    assert_eq!(net.predict(&x).unwrap().label, 1);
    let walk = fgsm_class_walk(&net, &x, 0, 0.15, 100).unwrap();
    let (k, acc, converged) = fgsm_oracle([-1.0, -1.0], 0, 0.15, 100);
    // margin −2.5 closes by 0.15·‖W₀ − W₁‖₁ = 0.375 per step
    assert_eq!(k, 7);
    assert_eq!(walk.iterations, k);
    assert!(walk.converged && converged);
    for (a, b) in walk.accumulated.iter().zip(&acc) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn fgsm_with_zero_step_never_moves() {
    let net = fgsm_net();
    let x = Tensor::new([2], vec![-1.0, -1.0]).unwrap();
    let one = fgsm_class_walk(&net, &x, 0, 0.0, 1).unwrap();
    let walk = fgsm_class_walk(&net, &x, 0, 0.0, 9).unwrap();
    assert!(!walk.converged);
    assert_eq!(walk.iterations, 9);
    for (a, b) in walk.accumulated.iter().zip(&one.accumulated) {
        assert!((a - 9.0 * b).abs() < 1e-12);
    }
    let f = extract_feature_fgsm(&net, &x, 0.0, 9, false).unwrap();
    assert_eq!(f.nonconverged, vec![0]);
    assert_eq!(f.loss, None);
}

#[test]
fn fgsm_on_the_predicted_class_stops_after_one_step() {
    let net = fgsm_net();
    let x = Tensor::new([2], vec![-1.0, -1.0]).unwrap();
    let p = net.predict(&x).unwrap().label;
    let walk = fgsm_class_walk(&net, &x, p, 0.1, 50).unwrap();
    assert_eq!(walk.iterations, 1);
    assert!(walk.converged);
    let single = extract_contrast(&net, &x, p, LossKind::Ce, None).unwrap();
    for (a, b) in walk.accumulated.iter().zip(&single) {
        assert_eq!(*a, b.abs());
    }
}

#[test]
fn fgsm_rejects_bad_parameters() {
    let net = fgsm_net();
    let x = Tensor::new([2], vec![0.0, 0.0]).unwrap();
    assert!(fgsm_class_walk(&net, &x, 0, -0.1, 5).is_err());
    assert!(fgsm_class_walk(&net, &x, 0, 0.1, 0).is_err());
    assert!(fgsm_class_walk(&net, &x, 2, 0.1, 5).is_err());
}

#[test]
fn feature_dumps_round_trip() {
    let net = desk_cnn::<f32>(&[1, 32, 32], 10, 1).unwrap();
    let images = Tensor::new([3, 1, 32, 32], random_vec(3 * 1024, 3, 1.0))
        .unwrap()
        .cast::<f32>();
    let ex = Extractor::new(&net, ExtractConfig::default(), Some(1.0)).unwrap();
    let feats = ex.extract_batch(&images, 40).unwrap();
    assert_eq!(
        feats.iter().map(|f| f.sample_id).collect::<Vec<_>>(),
        vec![40, 41, 42]
    );
    let mut dump = FeatureDump::new(10, 64, Some(LossKind::MseM), true);
    for f in &feats {
        dump.push(f).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.cnfx");
    dump.save(&path).unwrap();
    let back = FeatureDump::load(&path).unwrap();
    assert_eq!(back, dump);
    assert_eq!(back.features::<f32>(), feats);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"CNFX");
    assert!(FeatureDump::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn taylor_rejects_equal_classes() {
    let net = desk_cnn::<f64>(&[1, 32, 32], 10, 0).unwrap();
    let x = Tensor::<f64>::zeros([1, 32, 32]);
    assert!(taylor_diagnostic(&net, &x, 3, 3).is_err());
    let dense = fgsm_net();
    assert!(matches!(
        taylor_diagnostic(&dense, &Tensor::zeros([2]), 0, 1),
        Err(Error::NoConvLayer)
    ));
    // far from the regime the report is still produced
    let x = Tensor::new([1, 32, 32], random_vec(1024, 1, 1.0)).unwrap();
    let r = taylor_diagnostic(&net, &x, 0, 1).unwrap();
    assert!(r.cosine.is_finite() && r.cosine.abs() <= 1.0 + 1e-12);
}
