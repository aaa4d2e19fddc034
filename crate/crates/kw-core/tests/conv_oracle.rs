//! Fast-path convolution against the direct six-loop oracle, linearity, and
//! bit-exact determinism.

use kw_core::tensor::ops::{add, conv2d, conv2d_naive, scale};
use kw_core::tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_tensor(shape: &[usize], rng: &mut StdRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
    a.max_abs_diff(b).unwrap() / scale
}

#[test]
fn fast_path_matches_naive_loop_on_random_shapes() {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut checked = 0;
    while checked < 120 {
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=4);
        let f = rng.gen_range(1..=4);
        let k = [1, 2, 3][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=2);
        let h = rng.gen_range(k..=k + 6);
        let w = rng.gen_range(k..=k + 6);
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let x = random_tensor(&[n, c, h, w], &mut rng);
        let kernel = random_tensor(&[f, c, k, k], &mut rng);
        let fast = conv2d(&x, &kernel, stride, pad).unwrap();
        let slow = conv2d_naive(&x, &kernel, stride, pad).unwrap();
        let err = rel_error(&fast, &slow);
        assert!(
            err <= 1e-12,
            "relative error {err:e} at n={n} c={c} f={f} k={k} stride={stride} pad={pad} h={h} w={w}"
        );
        assert!(fast.is_all_finite());
        checked += 1;
    }
}

#[test]
fn spec_example_shapes_agree_with_oracle() {
    let mut rng = StdRng::seed_from_u64(7);
    let x = random_tensor(&[2, 3, 8, 8], &mut rng);
    let w = random_tensor(&[4, 3, 3, 3], &mut rng);
    let fast = conv2d(&x, &w, 1, 0).unwrap();
    let slow = conv2d_naive(&x, &w, 1, 0).unwrap();
    assert!(rel_error(&fast, &slow) <= 1e-12);
}

#[test]
fn convolution_is_linear_in_the_kernel() {
    let mut rng = StdRng::seed_from_u64(99);
    for _ in 0..20 {
        let x = random_tensor(&[1, 3, 7, 7], &mut rng);
        let w1 = random_tensor(&[2, 3, 3, 3], &mut rng);
        let w2 = random_tensor(&[2, 3, 3, 3], &mut rng);
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mixed = add(&scale(&w1, a), &scale(&w2, b)).unwrap();
        let lhs = conv2d(&x, &mixed, 1, 1).unwrap();
        let rhs = add(
            &scale(&conv2d(&x, &w1, 1, 1).unwrap(), a),
            &scale(&conv2d(&x, &w2, 1, 1).unwrap(), b),
        )
        .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let mut rng = StdRng::seed_from_u64(1234);
    let x = random_tensor(&[2, 4, 9, 9], &mut rng);
    let w = random_tensor(&[3, 4, 3, 3], &mut rng);
    let first = conv2d(&x, &w, 2, 1).unwrap();
    let second = conv2d(&x, &w, 2, 1).unwrap();
    assert_eq!(first.data(), second.data());
}
