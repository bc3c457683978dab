//! Property tests for the tensor substrate: per-op gradient checks on small
//! random inputs, softmax normalisation, resize round trips, determinism.

use vidcap_core::tensor::ops::{self, softmax_rows};
use vidcap_core::tensor::{grad_check, GradCheckOptions, Graph, ParamStore, Tensor, Var};
use vidcap_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OP_TOLERANCE: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Weights with magnitude in [0.5, 1.5] and random sign, so that the
/// reduction `sum(w * out)` has no accidental cancellation.
fn weights(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.5..1.5);
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

/// Checks `sum(w * op(inputs))` with every input a parameter.
fn check_op<F>(inputs: Vec<(&str, Tensor<f64>)>, seed: u64, op: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.to_string()).collect();
    for (n, t) in inputs {
        store.insert(n, t).unwrap();
    }
    // Output shape from one forward pass, then a fixed weighting.
    let mut g = Graph::new();
    let vars: Vec<Var> = names.iter().map(|n| g.param(&store, n).unwrap()).collect();
    let out = op(&mut g, &vars).unwrap();
    let out_shape = g.value(out).shape().to_vec();
    let w = weights(&out_shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xABCD));
    let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let vars: Vec<Var> = names.iter().map(|n| g.param(s, n)).collect::<Result<_>>()?;
        let out = op(g, &vars)?;
        let weighted = g.mul_const(out, &w)?;
        Ok(g.sum(weighted))
    };
    grad_check(&store, f, &GradCheckOptions::default()).unwrap().max_rel_error()
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=4, 1usize..=4, 1usize..=4, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_algebra_gradients((m, k, n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, k], -2.0, 2.0, &mut rng);
        let b = random(&[k, n], -2.0, 2.0, &mut rng);
        let bt = random(&[n, k], -2.0, 2.0, &mut rng);
        let bias = random(&[n], -1.0, 1.0, &mut rng);
        prop_assert!(check_op(vec![("a", a.clone()), ("b", b.clone())], seed, |g, v| g.matmul(v[0], v[1])) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("a", a.clone()), ("b", bt)], seed, |g, v| g.matmul_nt(v[0], v[1])) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("a", a.clone()), ("b", b.clone()), ("c", bias.clone())], seed, |g, v| g.linear(v[0], v[1], Some(v[2]))) < OP_TOLERANCE);
        let ab = random(&[m, n], -2.0, 2.0, &mut rng);
        prop_assert!(check_op(vec![("a", ab), ("b", bias)], seed, |g, v| g.add_bias(v[0], v[1])) < OP_TOLERANCE);
    }

    #[test]
    fn elementwise_gradients((m, n, _k, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, n], -3.0, 3.0, &mut rng);
        let b = random(&[m, n], -3.0, 3.0, &mut rng);
        let c = random(&[m, n], -1.0, 1.0, &mut rng);
        let s = random(&[m, 1], -2.0, 2.0, &mut rng);
        let pair = || vec![("a", a.clone()), ("b", b.clone())];
        prop_assert!(check_op(pair(), seed, |g, v| g.add(v[0], v[1])) < OP_TOLERANCE);
        prop_assert!(check_op(pair(), seed, |g, v| g.sub(v[0], v[1])) < OP_TOLERANCE);
        prop_assert!(check_op(pair(), seed, |g, v| g.mul(v[0], v[1])) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("a", a.clone())], seed, |g, v| Ok(g.affine(v[0], -0.7, 0.3))) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("a", a.clone())], seed, |g, v| Ok(g.scale(v[0], 1.9))) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("a", a.clone())], seed, |g, v| g.mul_const(v[0], &c)) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("a", a.clone())], seed, |g, v| g.add_const(v[0], &c)) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("a", a.clone()), ("s", s)], seed, |g, v| g.scale_rows(v[0], v[1])) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("a", a.clone())], seed, |g, v| Ok(g.sigmoid(v[0]))) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("a", a.clone())], seed, |g, v| Ok(g.gelu(v[0]))) < OP_TOLERANCE);
        prop_assert!(check_op(pair(), seed, |g, v| g.mean(&[v[0], v[1]])) < OP_TOLERANCE);
    }

    #[test]
    fn normalisation_gradients((m, n, _k, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, n + 1], -3.0, 3.0, &mut rng);
        prop_assert!(check_op(vec![("a", a.clone())], seed, |g, v| g.softmax_rows(v[0])) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("a", a.clone())], seed, |g, v| g.log_softmax_rows(v[0])) < OP_TOLERANCE);
        // With two columns the normalised output is +-1 regardless of x, so
        // the input gradient is pure roundoff; use at least three.
        let x = random(&[m, n + 2], -3.0, 3.0, &mut rng);
        let gain = random(&[n + 2], 0.5, 1.5, &mut rng);
        let bias = random(&[n + 2], -0.5, 0.5, &mut rng);
        prop_assert!(check_op(vec![("x", x), ("g", gain), ("b", bias)], seed, |g, v| g.layer_norm(v[0], v[1], v[2])) < OP_TOLERANCE);
        let picks: Vec<(usize, usize)> = (0..m).map(|i| (i, rng.gen_range(0..=n))).collect();
        let nll = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let lp = g.log_softmax_rows(v[0])?;
            g.nll(lp, &picks, 0.5)
        };
        prop_assert!(check_op(vec![("a", a)], seed, nll) < OP_TOLERANCE);
    }

    #[test]
    fn structural_gradients((m, n, k, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, n], -2.0, 2.0, &mut rng);
        let b = random(&[m, k], -2.0, 2.0, &mut rng);
        let c = random(&[k, n], -2.0, 2.0, &mut rng);
        prop_assert!(check_op(vec![("a", a.clone()), ("b", b)], seed, |g, v| g.concat(&[v[0], v[1]])) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("a", a.clone()), ("c", c)], seed, |g, v| g.concat_rows(&[v[0], v[1]])) < OP_TOLERANCE);
        let start = rng.gen_range(0..n);
        let len = rng.gen_range(1..=n - start);
        prop_assert!(check_op(vec![("a", a.clone())], seed, move |g, v| g.slice_cols(v[0], start, len)) < OP_TOLERANCE);
        let rstart = rng.gen_range(0..m);
        let rlen = rng.gen_range(1..=m - rstart);
        prop_assert!(check_op(vec![("a", a.clone())], seed, move |g, v| g.slice_rows(v[0], rstart, rlen)) < OP_TOLERANCE);
        let ids: Vec<usize> = (0..k + 1).map(|_| rng.gen_range(0..m)).collect();
        prop_assert!(check_op(vec![("a", a.clone())], seed, move |g, v| g.gather(v[0], &ids)) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("a", a.clone())], seed, move |g, v| g.reshape(v[0], &[m * n])) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("a", a)], seed, |g, v| Ok(g.sum(v[0]))) < OP_TOLERANCE);
    }

    #[test]
    fn spatial_gradients(t in 1usize..=2, h in 1usize..=2, w in 1usize..=2, c in 1usize..=2, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[t, 2 * h, 2 * w, c], -2.0, 2.0, &mut rng);
        prop_assert!(check_op(vec![("x", x.clone())], seed, |g, v| g.space_to_depth(v[0])) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("x", x.clone())], seed, move |g, v| g.resize_spatial(v[0], (4 * h, 4 * w))) < OP_TOLERANCE);
        prop_assert!(check_op(vec![("x", x.clone())], seed, move |g, v| g.resize_spatial(v[0], (h, w))) < OP_TOLERANCE);
        let y = random(&[t + 1, 2 * h, 2 * w, c], -2.0, 2.0, &mut rng);
        prop_assert!(check_op(vec![("y", y)], seed, |g, v| g.avg_pool3d(v[0], [2, 2, 2], [1, 2, 2])) < OP_TOLERANCE);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..=6, cols in 1usize..=12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f64> = random(&[rows, cols], -50.0, 50.0, &mut rng);
        let s = softmax_rows(&x);
        for r in s.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        let x32: Tensor<f32> = x.cast();
        for r in softmax_rows(&x32).data().chunks(cols) {
            prop_assert!((r.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn block_constant_resize_round_trips(t in 1usize..=2, h in 1usize..=4, w in 1usize..=4, c in 1usize..=3,
                                         fy in 1usize..=3, fx in 1usize..=3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Dyadic values keep the block sums exact.
        let x = Tensor::<f64>::from_fn(&[t, h, w, c], |_| rng.gen_range(-80i32..80) as f64 / 16.0);
        let up = ops::resize_spatial(&x, (h * fy, w * fx)).unwrap();
        let back = ops::resize_spatial(&up, (h, w)).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn forward_ops_are_deterministic(m in 1usize..=5, n in 1usize..=5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Tensor<f32> = random(&[m, n], -3.0, 3.0, &mut rng).cast();
        let b: Tensor<f32> = random(&[n, m], -3.0, 3.0, &mut rng).cast();
        let run = || {
            let mut g = Graph::<f32>::new();
            let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
            let p = g.matmul(va, vb).unwrap();
            let s = g.softmax_rows(p).unwrap();
            let e = g.gelu(s);
            g.value(e).clone()
        };
        let (x, y) = (run(), run());
        prop_assert_eq!(
            x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn softmax_thousand_random_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let cols = rng.gen_range(1..16);
        let x: Tensor<f64> = random(&[1, cols], -50.0, 50.0, &mut rng);
        let sum: f64 = softmax_rows(&x).data().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn hand_examples() {
    let x = Tensor::<f64>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
    assert_eq!(ops::matmul(&x, &w).unwrap().data(), &[3.0, 2.0]);

    let s = softmax_rows(&Tensor::<f64>::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
    let e2 = 2f64.exp();
    assert!((s.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
    assert!((s.data()[0] - 0.880797).abs() < 1e-6);

    let ramp = Tensor::<f64>::from_fn(&[1, 4, 4, 1], |i| i as f64);
    let down = ops::resize_spatial(&ramp, (2, 2)).unwrap();
    assert_eq!(down.data(), &[2.5, 4.5, 10.5, 12.5]);

    let cube = Tensor::<f64>::from_fn(&[2, 2, 2, 1], |i| (i + 1) as f64);
    assert_eq!(ops::avg_pool3d(&cube, [2, 2, 2], [1, 1, 1]).unwrap().data(), &[4.5]);
}
