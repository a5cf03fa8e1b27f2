use dss_lab::analysis::svd_spectrum_report;
use dss_lab::svd::svd_small;
use dss_lab::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Singular values of a 3×2 matrix from the characteristic polynomial of the
/// 2×2 Gram matrix `AᵀA = [[p, q], [q, r]]`.
fn closed_form_3x2(a: &[f64]) -> [f64; 2] {
    let col = |j: usize| [a[j], a[2 + j], a[4 + j]];
    let (c0, c1) = (col(0), col(1));
    let dot = |x: [f64; 3], y: [f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
    let (p, q, r) = (dot(c0, c0), dot(c0, c1), dot(c1, c1));
    let mid = 0.5 * (p + r);
    let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
    // The small root via the product of roots avoids cancellation.
    let big = mid + rad;
    let small = if big > 0.0 { (p * r - q * q) / big } else { 0.0 };
    [big.sqrt(), small.max(0.0).sqrt()]
}

#[test]
fn three_by_two_matches_the_characteristic_polynomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..500 {
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let expect = closed_form_3x2(&a);
        let got = svd_small(&Tensor::new(vec![3, 2], a.clone()).unwrap()).unwrap().sigma;
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() <= 1e-10 * expect[0], "{a:?}: {got:?} vs {expect:?}");
        }
        // The transpose has the same spectrum.
        let t: Vec<f64> = (0..6).map(|k| a[(k % 3) * 2 + k / 3]).collect();
        let wide = svd_small(&Tensor::new(vec![2, 3], t).unwrap()).unwrap().sigma;
        for (g, e) in wide.iter().zip(expect) {
            assert!((g - e).abs() <= 1e-10 * expect[0]);
        }
    }
}

#[test]
fn rank_one_three_by_two() {
    // u vᵀ with ‖u‖ = 3, ‖v‖ = 5
    let (u, v) = ([1.0, 2.0, 2.0], [3.0, 4.0]);
    let a: Vec<f64> = (0..6).map(|k| u[k / 2] * v[k % 2]).collect();
    let s = svd_small(&Tensor::new(vec![3, 2], a).unwrap()).unwrap().sigma;
    assert!((s[0] - 15.0).abs() < 1e-12);
    assert!(s[1].abs() < 1e-12);
}

#[test]
fn scalar_spectrum_is_the_magnitude() {
    for w in [-4.5, 0.0, 1e-300, 2.0] {
        assert_eq!(svd_spectrum_report(&Tensor::from_slice(&[w]), 1, 1).unwrap(), vec![w.abs()]);
    }
}

#[test]
fn stalled_jacobi_block_converges() {
    // A 16×16 block of trained weights on which a one-ulp orthogonality
    // threshold cycles forever.
    let data: Vec<f64> = serde_json::from_str(include_str!("data/jacobi_stall.json")).unwrap();
    let m = Tensor::new(vec![16, 16], data).unwrap();
    let s = svd_small(&m).unwrap();
    assert!(s.reconstruct().unwrap().max_abs_diff(&m).unwrap() < 1e-13);
    let sq: f64 = s.sigma.iter().map(|x| x * x).sum();
    let fro: f64 = m.data().iter().map(|x| x * x).sum();
    assert!((sq - fro).abs() < 1e-12 * fro);
}
