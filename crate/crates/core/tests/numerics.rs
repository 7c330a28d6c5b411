use dislab_core::numerics::finite_diff::{central_gradient, relative_error};
use dislab_core::numerics::{AdamWConfig, AdamWState, Mlp, SeededRng, Tape, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-5;

/// Tape gradient of `build(x)` against central differences of the same
/// function evaluated through a fresh tape.
fn check(shape: (usize, usize), x: &[f64], tol: f64, build: impl Fn(&mut Tape, Var) -> Var) {
    let eval = |v: &[f64]| {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::matrix(shape.0, shape.1, v.to_vec()).unwrap());
        let out = build(&mut tape, p);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let p = tape.param(Tensor::matrix(shape.0, shape.1, x.to_vec()).unwrap());
    let out = build(&mut tape, p);
    let g = tape.backward(out).unwrap().wrt(p);
    let fd = central_gradient(eval, x, H);
    for (k, (a, b)) in g.data().iter().zip(&fd).enumerate() {
        assert!(relative_error(*a, *b, 1e-8) < tol, "entry {k}: tape {a} vs fd {b}");
    }
}

/// Like `check`, for piecewise-linear graphs where a hidden unit can sit
/// within `H` of its kink: the tape gradient must match the central or one of
/// the one-sided differences, and a one-sided difference that does not cross
/// the kink is exact up to rounding.
fn check_piecewise(shape: (usize, usize), x: &[f64], tol: f64, build: impl Fn(&mut Tape, Var) -> Var) {
    let eval = |v: &[f64]| {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::matrix(shape.0, shape.1, v.to_vec()).unwrap());
        let out = build(&mut tape, p);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let p = tape.param(Tensor::matrix(shape.0, shape.1, x.to_vec()).unwrap());
    let out = build(&mut tape, p);
    let g = tape.backward(out).unwrap().wrt(p);
    let f0 = eval(x);
    let fd = central_gradient(eval, x, H);
    for (k, (a, c)) in g.data().iter().zip(&fd).enumerate() {
        let mut up = x.to_vec();
        up[k] += H;
        let mut down = x.to_vec();
        down[k] -= H;
        let fwd = (eval(&up) - f0) / H;
        let bwd = (f0 - eval(&down)) / H;
        let ok = [*c, fwd, bwd].iter().any(|b| relative_error(*a, *b, 1e-8) < tol);
        assert!(ok, "entry {k}: tape {a} vs central {c}, forward {fwd}, backward {bwd}");
    }
}

fn inputs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

/// Inputs at least `2h` away from the LeakyReLU / abs kink.
fn off_kink(n: usize) -> impl Strategy<Value = Vec<f64>> {
    inputs(n).prop_map(|v| v.into_iter().map(|x| if x.abs() < 1e-3 { x + 0.01 } else { x }).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smooth_unary_primitives(x in inputs(6)) {
        check((2, 3), &x, 1e-4, |t, p| { let s = t.sigmoid(p); t.sum(s) });
        check((2, 3), &x, 1e-4, |t, p| { let s = t.softplus(p); t.sum(s) });
        check((2, 3), &x, 1e-4, |t, p| { let s = t.exp(p); t.sum(s) });
        check((2, 3), &x, 1e-4, |t, p| { let e = t.exp(p); let l = t.log(e); let s = t.square(l); t.sum(s) });
    }

    #[test]
    fn kinked_primitives_away_from_zero(x in off_kink(6)) {
        check((2, 3), &x, 1e-4, |t, p| { let s = t.leaky_relu(p, 0.2); t.sum(s) });
        check((2, 3), &x, 1e-4, |t, p| { let s = t.abs(p); t.sum(s) });
    }

    #[test]
    fn binary_and_structural_primitives(x in inputs(6), w in inputs(6)) {
        let wt = Tensor::matrix(3, 2, w.clone()).unwrap();
        check((2, 3), &x, 1e-4, |t, p| {
            let c = t.constant(wt.clone());
            let m = t.matmul(p, c).unwrap();
            let s = t.sigmoid(m);
            t.sum(s)
        });
        let other = Tensor::matrix(2, 3, w).unwrap();
        check((2, 3), &x, 1e-4, |t, p| {
            let c = t.constant(other.clone());
            let a = t.mul(p, c).unwrap();
            let b = t.add(a, p).unwrap();
            let sl = t.slice_cols(b, 1, 2).unwrap();
            let cat = t.concat(&[sl, p], 1).unwrap();
            let sq = t.square(cat);
            t.sum(sq)
        });
    }

    #[test]
    fn mlp_scalar_output(seed in any::<u64>(), x in inputs(8)) {
        let mlp = Mlp::new(&[4, 6, 6, 6, 6, 1], 0.2, &mut SeededRng::new(seed));
        check_piecewise((2, 4), &x, 1e-4, |t, p| {
            let b = mlp.bind_frozen(t, "mlp");
            let y = b.forward(t, p).unwrap();
            t.sum(y)
        });
    }

    #[test]
    fn backward_is_linear_over_independent_subgraphs(x in inputs(3), y in inputs(3)) {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::matrix(1, 3, x.clone()).unwrap());
        let b = tape.param(Tensor::matrix(1, 3, y.clone()).unwrap());
        let fa = { let s = tape.sigmoid(a); tape.sum(s) };
        let fb = { let s = tape.square(b); tape.sum(s) };
        let total = tape.add(fa, fb).unwrap();
        let joint = tape.backward(total).unwrap();
        let ga = tape.backward(fa).unwrap();
        let gb = tape.backward(fb).unwrap();
        prop_assert_eq!(joint.wrt(a), ga.wrt(a));
        prop_assert_eq!(joint.wrt(b), gb.wrt(b));
    }

    #[test]
    fn same_seed_same_stream(seed in any::<u64>()) {
        let mut a = SeededRng::new(seed);
        let mut b = SeededRng::new(seed);
        prop_assert_eq!(a.normals(100), b.normals(100));
    }
}

#[test]
fn adamw_reaches_quadratic_optimum() {
    let target = [1.5, -0.5, 3.0];
    let mut theta = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
    let mut opt = AdamWState::new(
        AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        [&theta],
    );
    let names = vec!["theta".to_string()];
    for _ in 0..2000 {
        let g: Vec<f64> = theta.data().iter().zip(&target).map(|(t, c)| 2.0 * (t - c)).collect();
        let grads = [Tensor::matrix(1, 3, g).unwrap()];
        opt.step(&mut [&mut theta], &grads, &names).unwrap();
    }
    for (t, c) in theta.data().iter().zip(&target) {
        assert!((t - c).abs() < 1e-3, "{t} vs {c}");
    }
}
