use everest::numerics::{attention, gelu, layer_norm, matmul, primitive_checks, softmax, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn matmul_7x5_by_5x3_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, 7, 5);
    let b = random(&mut rng, 5, 3);
    let c = matmul(&a, &b).unwrap();
    for i in 0..7 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..5 {
                acc += a.row(i)[k] * b.row(k)[j];
            }
            assert!(rel(c.row(i)[j], acc) < 1e-6, "({i},{j})");
        }
    }
}

/// Maclaurin series, summed until terms vanish.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-17 * sum.abs().max(1e-300) {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn gelu_matches_erf_series() {
    for k in -400..=400 {
        let x = k as f64 / 100.0;
        let want = 0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
        assert!((gelu(x) - want).abs() < 1e-6, "x = {x}: {} vs {want}", gelu(x));
    }
}

#[test]
fn attention_matches_per_head_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (l, d, heads) = (4, 8, 2);
    let (q, k, v) = (random(&mut rng, l, d), random(&mut rng, l, d), random(&mut rng, l, d));
    let (out, _) = attention(&q, &k, &v, heads).unwrap();
    let dh = d / heads;
    for h in 0..heads {
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..dh).map(|c| q.row(i)[h * dh + c] * k.row(j)[h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                let want: f64 = (0..l).map(|j| e[j] / z * v.row(j)[h * dh + c]).sum();
                assert!((out.row(i)[h * dh + c] - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn layer_norm_direct_d16() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
    let gamma: Vec<f64> = (0..16).map(|_| rng.random_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..16).map(|_| rng.random_range(-0.5..0.5)).collect();
    let y = layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
    let mean = x.iter().sum::<f64>() / 16.0;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    for i in 0..16 {
        let want = (x[i] - mean) / (var + 1e-6).sqrt() * gamma[i] + beta[i];
        assert!((y[i] - want).abs() < 1e-6);
    }
}

#[test]
fn primitives_pass_gradient_checks_over_five_seeds() {
    for seed in 0..5 {
        for (name, err) in primitive_checks(seed, 1e-5).unwrap() {
            assert!(err < 1e-4, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn two_block_transformer_gradients() {
    let r = everest::mva::pipeline_grad_check(11, 1e-5, None).unwrap();
    assert!(r.max_rel_error < 1e-4, "{:e}", r.max_rel_error);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let p = softmax(&xs);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn forward_is_bit_deterministic(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, rows, cols);
        let b = random(&mut rng, cols, rows);
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(a.clone());
            let y = g.leaf(b.clone());
            let z = g.matmul(x, y).unwrap();
            let z = g.gelu(z).unwrap();
            let z = g.softmax(z).unwrap();
            g.value(z).data().to_vec()
        };
        let first = run();
        prop_assert!(first.iter().zip(run()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
