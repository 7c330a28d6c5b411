use dislab_core::cgvae::CgvaeModel;
use dislab_core::flows::DeepSigmoidFlow;
use dislab_core::numerics::finite_diff::central_gradient;
use dislab_core::numerics::mlp::Linear;
use dislab_core::numerics::{Mlp, SeededRng, Tensor};
use dislab_core::synthgen::{preset, preset_graph, DomainPrior, MixingGraph, MixingSpec};
use dislab_core::theory::{
    check_a3, check_a4, check_subspace_blocks, estimate_h_jacobian, required_domains, score_vectors_w, Verdict,
};
use proptest::prelude::*;

#[test]
fn required_domains_by_graph() {
    assert_eq!(required_domains(&MixingGraph::fully_connected(4)).unwrap(), vec![9; 4]);
    assert_eq!(required_domains(&MixingGraph::identity(3)).unwrap(), vec![3; 3]);
    let a = required_domains(&preset_graph("A").unwrap()).unwrap();
    assert!(a.iter().any(|&r| r < 9), "{a:?}");
    assert!(a.iter().all(|&r| r <= 9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn analytic_scores_match_numerical_derivatives(seed in any::<u64>(), d in 1usize..5) {
        let mut rng = SeededRng::new(seed);
        let prior = DomainPrior::random(d, 3, &mut rng);
        let z = rng.normals(3);
        for u in 0..d {
            let g = central_gradient(|v| prior.log_density(v, u), &z, 1e-4);
            for i in 0..3 {
                prop_assert!((g[i] - prior.score(z[i], u, i)).abs() < 1e-8);
                let h = central_gradient(|v| prior.score(v[0], u, i), &[z[i]], 1e-4)[0];
                prop_assert!((h - prior.second_score(u, i)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn a3_verdict_ignores_domain_order(seed in any::<u64>(), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let (spec, prior) = preset("B", 6, seed).unwrap();
        let moved = prior.reordered(&perm);
        for k in [vec![0], vec![1, 2], vec![3]] {
            let a = check_a3(&spec, &prior, &k, 1).unwrap();
            let b = check_a3(&spec, &moved, &k, 1).unwrap();
            prop_assert_eq!((a.verdict, a.rank), (b.verdict, b.rank));
        }
    }
}

#[test]
fn identical_instances_give_negated_halves() {
    let (spec, prior) = preset("A", 3, 0).unwrap();
    let x = spec.mix(&Tensor::matrix(1, 4, vec![0.3, -0.2, 1.0, 0.5]).unwrap()).unwrap().into_data();
    let w = score_vectors_w(&spec, &prior, &[1, 2], &[x.clone(), x], 2).unwrap();
    assert_eq!(w.len(), 6);
    for pair in w.chunks(2) {
        assert_eq!(pair[0], -pair[1]);
    }
}

#[test]
fn one_domain_has_rank_zero() {
    let (spec, prior) = preset("A", 1, 0).unwrap();
    let r = check_a3(&spec, &prior, &[0], 0).unwrap();
    assert_eq!((r.rank, r.verdict), (0, Verdict::InsufficientDomains));
}

#[test]
fn duplicated_domains_are_rank_deficient() {
    let (spec, prior) = preset("A", 1, 0).unwrap();
    let copies = prior.reordered(&[0; 6]);
    let r = check_a3(&spec, &copies, &[1], 0).unwrap();
    assert_eq!((r.rank, r.verdict), (0, Verdict::Violated));
    let r = check_a4(&spec, &copies, &[0], &[2, 3], 0).unwrap();
    assert_eq!((r.rank, r.verdict), (0, Verdict::Violated));

    let (_, varied) = preset("A", 6, 0).unwrap();
    let r = check_a3(&spec, &varied, &[1], 0).unwrap();
    assert_eq!(r.verdict, Verdict::Satisfied);
}

#[test]
fn a4_has_nothing_to_check_on_dense_graphs() {
    let (spec, prior) = preset("full", 9, 0).unwrap();
    let r = check_a4(&spec, &prior, &[0], &[1], 0).unwrap();
    assert_eq!(r.verdict, Verdict::NotApplicable);
    assert!(r.latents.is_empty());
}

#[test]
fn decoder_equal_to_mixer_gives_identity_h() {
    let graph = preset_graph("A").unwrap();
    let mut w = Tensor::identity(4);
    for i in 0..3 {
        w.set(i, i + 1, 0.5);
    }
    let bias = vec![0.1, -0.2, 0.0, 0.3];
    let spec = MixingSpec::from_weights(graph, vec![w.clone()], vec![bias.clone()], 0.2).unwrap();
    let decoder = Mlp {
        layers: vec![Linear {
            weight: w,
            bias: Tensor::matrix(1, 4, bias).unwrap(),
        }],
        slope: 0.2,
        final_activation: true,
    };
    let encoder = Mlp::new(&[4, 8], 0.2, &mut SeededRng::new(0));
    let model = CgvaeModel::from_parts(encoder, decoder, DeepSigmoidFlow::identity(1, 4), None).unwrap();
    let points = Tensor::matrix(50, 4, SeededRng::new(1).normals(200)).unwrap();
    let jac = estimate_h_jacobian(&spec, &model, &points).unwrap();
    for j in &jac.per_point {
        for (i, row) in j.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                let want = if i == k { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-10);
            }
        }
    }
    let report = check_subspace_blocks(&jac, &spec, &model, &points, 0.1).unwrap();
    assert_eq!(report.matching, vec![0, 1, 2, 3]);
    assert!(report.all_pass && report.off_support_mass == 0.0);
}
