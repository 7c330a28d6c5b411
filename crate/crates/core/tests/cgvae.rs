use std::fs;

use dislab_core::cgvae::{
    elbo_terms, encode, sparse_penalty_exact, sparse_penalty_fd, train, Checkpoint, CgvaeModel, FdVariant, InputScaling,
    ModelConfig, PenaltyKind, PenaltyScale, TrainConfig,
};
use dislab_core::flows::DeepSigmoidFlow;
use dislab_core::numerics::mlp::Linear;
use dislab_core::numerics::{Mlp, SeededRng, Tensor};
use dislab_core::synthgen::preset_dataset;
use dislab_core::Error;
use proptest::prelude::*;

fn linear(weight: Tensor, bias: Vec<f64>) -> Mlp {
    let out = weight.cols();
    Mlp {
        layers: vec![Linear {
            weight,
            bias: Tensor::matrix(1, out, bias).unwrap(),
        }],
        slope: 0.2,
        final_activation: false,
    }
}

/// Encoder whose mean is `x` and whose log-variance is `logvar`.
fn copy_encoder(n: usize, logvar: f64) -> Mlp {
    let mut w = Tensor::zeros(&[n, 2 * n]);
    for i in 0..n {
        w.set(i, i, 1.0);
    }
    let mut b = vec![0.0; n];
    b.extend(vec![logvar; n]);
    linear(w, b)
}

/// Encoder ignoring its input: `μ = mean`, `logσ² = 0`.
fn constant_encoder(n: usize, mean: f64) -> Mlp {
    let mut b = vec![mean; n];
    b.extend(vec![0.0; n]);
    linear(Tensor::zeros(&[n, 2 * n]), b)
}

fn linear_model(w: Tensor) -> CgvaeModel {
    let (n, m) = (w.rows(), w.cols());
    let enc = linear(Tensor::zeros(&[m, 2 * n]), vec![0.0; 2 * n]);
    CgvaeModel::from_parts(enc, linear(w, vec![0.0; m]), DeepSigmoidFlow::identity(1, n), None).unwrap()
}

fn small(seed: u64) -> CgvaeModel {
    let mut cfg = ModelConfig::new(4, 4, 2);
    cfg.hidden = 8;
    cfg.layers = 2;
    cfg.flow_units = 2;
    CgvaeModel::new(cfg, seed).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch: 32,
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_decoder_penalty_is_weight_l1(seed in any::<u64>(), n in 1usize..5, m in 1usize..5) {
        let mut rng = SeededRng::new(seed);
        let w = Tensor::matrix(n, m, rng.normals(n * m)).unwrap();
        let model = linear_model(w.clone());
        let z = Tensor::matrix(7, n, rng.normals(7 * n)).unwrap();
        let l1: f64 = w.data().iter().map(|v| v.abs()).sum();
        let l2: f64 = w.data().iter().map(|v| v * v).sum();
        let got = sparse_penalty_exact(&model, &z, PenaltyKind::L1, PenaltyScale::Raw).unwrap();
        prop_assert!((got - l1).abs() < 1e-10 * l1.max(1.0));
        let got = sparse_penalty_exact(&model, &z, PenaltyKind::L2, PenaltyScale::Raw).unwrap();
        prop_assert!((got - l2).abs() < 1e-10 * l2.max(1.0));

        // finite differences are exact for an affine decoder
        let row_sums: f64 = (0..m).map(|j| (0..n).map(|i| w.get(i, j)).sum::<f64>().abs()).sum();
        let fd = sparse_penalty_fd(&model, &z, 0.1, FdVariant::SummedColumns, PenaltyScale::Raw).unwrap();
        prop_assert!((fd - row_sums).abs() < 1e-9 * row_sums.max(1.0));
        let fd = sparse_penalty_fd(&model, &z, 0.1, FdVariant::Entrywise, PenaltyScale::Raw).unwrap();
        prop_assert!((fd - l1).abs() < 1e-9 * l1.max(1.0));
    }

    #[test]
    fn input_scaling_round_trips(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let x = Tensor::matrix(30, 3, rng.normals(90).into_iter().map(|v| 5.0 * v + 2.0).collect()).unwrap();
        let s = InputScaling::fit(&x);
        let y = s.apply(&x).unwrap();
        prop_assert!(s.invert(&y).unwrap().max_abs_diff(&x) < 1e-12);
        for j in 0..3 {
            let c = y.column(j);
            let mean = c.iter().sum::<f64>() / 30.0;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 30.0;
            prop_assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn standardized_scale_weights_columns_by_latent_spread() {
    let w = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let model = linear_model(w);
    let z = Tensor::matrix(4, 2, vec![1.0, 0.0, -1.0, 0.0, 1.0, 2.0, -1.0, -2.0]).unwrap();
    let sd = |j: usize| {
        let c = z.column(j);
        let m = c.iter().sum::<f64>() / 4.0;
        (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0).sqrt()
    };
    let want = sd(0) * 3.0 + sd(1) * 3.5;
    let got = sparse_penalty_exact(&model, &z, PenaltyKind::L1, PenaltyScale::Standardized).unwrap();
    assert!((got - want).abs() < 1e-6 * want, "{got} vs {want}");
}

#[test]
fn finite_difference_converges_to_exact_penalty() {
    let model = small(3);
    let z = Tensor::matrix(16, 4, SeededRng::new(1).normals(64)).unwrap();
    let exact = sparse_penalty_exact(&model, &z, PenaltyKind::L1, PenaltyScale::Raw).unwrap();
    let err = |h: f64| (sparse_penalty_fd(&model, &z, h, FdVariant::Entrywise, PenaltyScale::Raw).unwrap() - exact).abs();
    let (coarse, fine) = (err(1e-2), err(1e-4));
    assert!(fine < coarse || fine < 1e-8, "{coarse} {fine}");
    assert!(fine < 1e-2 * exact);
}

#[test]
fn kl_matches_closed_form_for_gaussian_posterior() {
    let n = 3;
    let m = 0.7;
    let model =
        CgvaeModel::from_parts(constant_encoder(n, m), identity_decoder(n), DeepSigmoidFlow::identity(1, n), None)
            .unwrap();
    let rows = 100_000;
    let mut rng = SeededRng::new(42);
    let eta = Tensor::matrix(rows, n, rng.normals(rows * n)).unwrap();
    let x = Tensor::zeros(&[rows, n]);
    let kl = elbo_terms(&model, &x, &vec![0; rows], &eta).unwrap().kl;
    let want = n as f64 * m * m / 2.0;
    let se = m * (n as f64).sqrt() / (rows as f64).sqrt();
    assert!((kl - want).abs() < 3.0 * se, "{kl} vs {want} (se {se})");
}

fn identity_decoder(n: usize) -> Mlp {
    linear(Tensor::identity(n), vec![0.0; n])
}

#[test]
fn exact_reconstruction_and_matching_prior_give_zero_terms() {
    let n = 3;
    let model =
        CgvaeModel::from_parts(copy_encoder(n, 0.0), identity_decoder(n), DeepSigmoidFlow::identity(1, n), None)
            .unwrap();
    let mut rng = SeededRng::new(5);
    let x = Tensor::matrix(20, n, rng.normals(20 * n)).unwrap();
    let zero = Tensor::zeros(&[20, n]);
    assert_eq!(elbo_terms(&model, &x, &[0; 20], &zero).unwrap().recon, 0.0);

    let prior_match =
        CgvaeModel::from_parts(constant_encoder(n, 0.0), identity_decoder(n), DeepSigmoidFlow::identity(1, n), None)
            .unwrap();
    let eta = Tensor::matrix(20, n, rng.normals(20 * n)).unwrap();
    assert!(elbo_terms(&prior_match, &x, &[0; 20], &eta).unwrap().kl.abs() < 1e-12);
}

#[test]
fn zero_noise_samples_the_mean() {
    let model = small(1);
    let x = Tensor::matrix(10, 4, SeededRng::new(2).normals(40)).unwrap();
    let e = encode(&model, &x, &Tensor::zeros(&[10, 4])).unwrap();
    assert_eq!(e.z, e.mu);
    assert_eq!(e.mu, model.encode_mean(&x).unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let data = preset_dataset("A", 2, 60, 0).unwrap();
    let cfg = quick_config();
    let model = train(small(4), &data, &cfg).unwrap().model;
    let ck = Checkpoint {
        model,
        train_config: Some(cfg),
        dataset_digest: Some(data.digest()),
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ck.save(&a).unwrap();
    let back = Checkpoint::load(&a).unwrap();
    assert_eq!(back, ck);
    assert_ne!(back.model.scaling, InputScaling::identity(4));
    back.save(&b).unwrap();
    for f in ["model.json", "params.f64le"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let test_x = data.test_x();
    let u: Vec<usize> = data.test.iter().map(|&r| data.u[r]).collect();
    let eta = Tensor::matrix(test_x.rows(), 4, SeededRng::new(9).normals(test_x.rows() * 4)).unwrap();
    assert_eq!(elbo_terms(&ck.model, &test_x, &u, &eta).unwrap(), elbo_terms(&back.model, &test_x, &u, &eta).unwrap());

    let blob = fs::read(b.join("params.f64le")).unwrap();
    fs::write(b.join("params.f64le"), &blob[..blob.len() - 8]).unwrap();
    assert!(matches!(Checkpoint::load(&b), Err(Error::Corrupt { .. })));
    fs::write(b.join("params.f64le"), &blob).unwrap();
    fs::write(b.join("model.json"), "{ not json").unwrap();
    assert!(matches!(Checkpoint::load(&b), Err(Error::Corrupt { .. })));
}

#[test]
fn training_is_bit_reproducible() {
    let data = preset_dataset("B", 2, 60, 1).unwrap();
    let cfg = quick_config();
    let a = train(small(7), &data, &cfg).unwrap();
    let b = train(small(7), &data, &cfg).unwrap();
    for (p, q) in a.model.params().iter().zip(b.model.params()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(p), bits(q));
    }
    assert_eq!(a.history, b.history);
}

#[test]
fn ablation_matches_zero_alpha() {
    let data = preset_dataset("A", 2, 60, 2).unwrap();
    let plain = TrainConfig {
        alpha: 0.0,
        ..quick_config()
    };
    let ablated = TrainConfig {
        alpha: 0.5,
        alpha_zero_ablation: true,
        ..quick_config()
    };
    let a = train(small(3), &data, &plain).unwrap();
    let b = train(small(3), &data, &ablated).unwrap();
    assert_eq!(a.model, b.model);
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!((x.loss.recon, x.loss.kl, x.loss.mask, x.loss.total), (y.loss.recon, y.loss.kl, y.loss.mask, y.loss.total));
    }
}

#[test]
fn reconstruction_improves_without_regularisers() {
    let data = preset_dataset("A", 2, 200, 3).unwrap();
    let cfg = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        epochs: 5,
        ..TrainConfig::default()
    };
    let h = train(small(0), &data, &cfg).unwrap().history;
    let first = (h[0].loss.recon + h[1].loss.recon) / 2.0;
    let last = (h[3].loss.recon + h[4].loss.recon) / 2.0;
    assert!(last > first, "recon went from {first} to {last}");
}

#[test]
fn masked_prior_handles_batches() {
    let mut cfg = ModelConfig::new(3, 3, 2);
    cfg.use_mask = true;
    let model = CgvaeModel::new(cfg, 2).unwrap();
    let mut rng = SeededRng::new(6);
    let x = Tensor::matrix(5, 3, rng.normals(15)).unwrap();
    let eta = Tensor::matrix(5, 3, rng.normals(15)).unwrap();
    let t = elbo_terms(&model, &x, &[0, 1, 0, 1, 1], &eta).unwrap();
    assert!(t.kl.is_finite() && t.mask == 1.5);
}
