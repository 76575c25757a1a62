use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmot_autograd::{grad_check, ReduceKind, Tape, Tensor, Var};

/// Uniform values in ±[lo, hi], kept away from the kinks of abs/relu/max.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn positive(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.2..3.0)).collect()
}

fn weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts an arbitrary-shaped output with fixed random weights so every
/// output element contributes to the checked scalar.
fn contract<'t>(t: &'t Tape, y: Var<'t>, w: &Tensor) -> rmot_autograd::Result<Var<'t>> {
    Ok(y.mul(t.constant(w.clone()))?.sum())
}

const TOL: f64 = 1e-5;
const SEEDS: u64 = 100;

#[test]
fn unary_primitives_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![2, 3], away_from_zero(&mut rng, 6, 0.05, 2.0)).unwrap();
        let xp = Tensor::new(vec![2, 3], positive(&mut rng, 6)).unwrap();
        let w = weights(&mut rng, &[2, 3]);
        type Unary = for<'t> fn(Var<'t>) -> rmot_autograd::Result<Var<'t>>;
        let signed: [(&str, Unary); 9] = [
            ("abs", |v| Ok(v.abs())),
            ("sigmoid", |v| Ok(v.sigmoid())),
            ("exp", |v| Ok(v.exp())),
            ("relu", |v| Ok(v.relu())),
            ("negate", |v| Ok(v.neg())),
            ("log_sigmoid", |v| Ok(v.log_sigmoid())),
            ("tanh", |v| Ok(v.tanh())),
            ("square", |v| Ok(v.square())),
            ("clamp", |v| Ok(v.clamp(-1.0, 1.0))),
        ];
        for (name, op) in signed {
            let r = grad_check(|t, v| contract(t, op(v)?, &w), &x, TOL).unwrap();
            assert!(r.passed, "{name} seed {seed}: {}", r.max_rel_error);
        }
        let pos: [(&str, Unary); 2] = [("sqrt", |v| v.sqrt()), ("log", |v| v.log())];
        for (name, op) in pos {
            let r = grad_check(|t, v| contract(t, op(v)?, &w), &xp, TOL).unwrap();
            assert!(r.passed, "{name} seed {seed}: {}", r.max_rel_error);
        }
    }
}

#[test]
fn binary_primitives_match_finite_differences_with_broadcast() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let a = Tensor::new(vec![3, 2, 4], away_from_zero(&mut rng, 24, 0.1, 2.0)).unwrap();
        let b = Tensor::new(vec![2, 1], positive(&mut rng, 2)).unwrap();
        let w = weights(&mut rng, &[3, 2, 4]);
        for kind in ["add", "sub", "mul", "div"] {
            fn apply<'t>(kind: &str, x: Var<'t>, y: Var<'t>) -> rmot_autograd::Result<Var<'t>> {
                match kind {
                    "add" => x.add(y),
                    "sub" => x.sub(y),
                    "mul" => x.mul(y),
                    _ => x.div(y),
                }
            }
            // Differentiate with respect to each operand in turn.
            let r = grad_check(|t, v| contract(t, apply(kind, v, t.constant(b.clone()))?, &w), &a, TOL)
                .unwrap();
            assert!(r.passed, "{kind} lhs seed {seed}: {}", r.max_rel_error);
            let r = grad_check(|t, v| contract(t, apply(kind, t.constant(a.clone()), v)?, &w), &b, TOL)
                .unwrap();
            assert!(r.passed, "{kind} rhs seed {seed}: {}", r.max_rel_error);
        }
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let a = weights(&mut rng, &[3, 4]);
        let b = weights(&mut rng, &[4, 2]);
        let r = grad_check(|t, v| Ok(v.matmul(t.constant(b.clone()))?.sum()), &a, 1e-6).unwrap();
        assert!(r.passed, "lhs seed {seed}: {}", r.max_rel_error);
        let r = grad_check(|t, v| Ok(t.constant(a.clone()).matmul(v)?.sum()), &b, 1e-6).unwrap();
        assert!(r.passed, "rhs seed {seed}: {}", r.max_rel_error);
    }
}

#[test]
fn softmax_reduce_and_structural_ops_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let x = Tensor::new(vec![3, 4], away_from_zero(&mut rng, 12, 0.05, 2.0)).unwrap();
        let w = weights(&mut rng, &[3, 4]);
        let w_row = weights(&mut rng, &[3]);
        let w_col = weights(&mut rng, &[4]);
        for axis in 0..2 {
            let r = grad_check(|t, v| contract(t, v.softmax(axis)?, &w), &x, TOL).unwrap();
            assert!(r.passed, "softmax axis {axis} seed {seed}: {}", r.max_rel_error);
        }
        for kind in [
            ReduceKind::Sum,
            ReduceKind::Mean,
            ReduceKind::Variance,
            ReduceKind::L2Norm,
            ReduceKind::Max,
        ] {
            let r = grad_check(|t, v| contract(t, v.reduce(kind, Some(1))?, &w_row), &x, TOL)
                .unwrap();
            assert!(r.passed, "{kind:?} axis 1 seed {seed}: {}", r.max_rel_error);
            let r = grad_check(|t, v| contract(t, v.reduce(kind, Some(0))?, &w_col), &x, TOL)
                .unwrap();
            assert!(r.passed, "{kind:?} axis 0 seed {seed}: {}", r.max_rel_error);
            let r = grad_check(|_, v| v.reduce(kind, None), &x, TOL).unwrap();
            assert!(r.passed, "{kind:?} full seed {seed}: {}", r.max_rel_error);
        }
        let r = grad_check(|t, v| contract(t, v.layer_norm(1e-5)?, &w), &x, TOL).unwrap();
        assert!(r.passed, "layer_norm seed {seed}: {}", r.max_rel_error);

        let wt = weights(&mut rng, &[4, 3]);
        let r = grad_check(|t, v| contract(t, v.transpose()?, &wt), &x, TOL).unwrap();
        assert!(r.passed, "transpose seed {seed}");

        let y = weights(&mut rng, &[3, 4]);
        let ws = weights(&mut rng, &[2, 3, 4]);
        let r = grad_check(
            |t, v| {
                let s = t.stack(&[v, t.constant(y.clone())])?;
                contract(t, s.tanh(), &ws)
            },
            &x,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "stack seed {seed}");
        let wc = weights(&mut rng, &[6, 4]);
        let r = grad_check(
            |t, v| {
                let c = t.concat(&[t.constant(y.clone()), v])?;
                contract(t, c.square(), &wc)
            },
            &x,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "concat seed {seed}");
    }
}

#[test]
fn cosine_gradient_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let a = weights(&mut rng, &[6]);
        let b = weights(&mut rng, &[6]);
        let r = grad_check(|t, v| v.cosine_similarity(t.constant(b.clone())), &a, TOL).unwrap();
        assert!(r.passed, "cosine seed {seed}: {}", r.max_rel_error);
    }
}

#[test]
fn softmax_gradient_on_random_four_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = weights(&mut rng, &[4]);
    let w = weights(&mut rng, &[4]);
    let r = grad_check(|t, v| contract(t, v.softmax(0)?, &w), &x, 1e-6).unwrap();
    assert!(r.passed, "{}", r.max_rel_error);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = weights(&mut rng, &[5, 3]);
        let b = weights(&mut rng, &[3, 4]);
        let t = Tape::new();
        let va = t.variable(a);
        let y = va
            .matmul(t.constant(b))
            .unwrap()
            .softmax(1)
            .unwrap()
            .layer_norm(1e-5)
            .unwrap()
            .tanh()
            .variance();
        let value = y.item();
        let g = t.backward(y).unwrap();
        (value.to_bits(), g.get(&va).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        data in prop::collection::vec(-10.0f64..10.0, 12)
    ) {
        let t = Tape::new();
        let x = t.constant(Tensor::new(vec![3, 4], data).unwrap());
        let s = x.softmax(1).unwrap().value();
        for r in 0..3 {
            let row = s.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn cosine_is_symmetric_and_scale_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 5),
        b in prop::collection::vec(-5.0f64..5.0, 5),
    ) {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
        let t = Tape::new();
        let va = t.constant(Tensor::from_vec(a.clone()));
        let vb = t.constant(Tensor::from_vec(b));
        let a2 = t.constant(Tensor::from_vec(a.iter().map(|x| 2.0 * x).collect()));
        let ab = va.cosine_similarity(vb).unwrap().item();
        let ba = vb.cosine_similarity(va).unwrap().item();
        let a2b = a2.cosine_similarity(vb).unwrap().item();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((ab - a2b).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }
}
