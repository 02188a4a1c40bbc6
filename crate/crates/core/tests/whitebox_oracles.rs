use fltrace::whitebox::{accuse_whitebox, batch_regularizer, project, projections, regularizer_loss_and_grad, OwnerBasis, ProjectionMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Naive `r_j` straight from the definition.
fn r_oracle(w: &[f64], d: &ProjectionMatrix, s: &[f64]) -> f64 {
    let (l, p) = (d.rows(), d.cols());
    let u: Vec<f64> = (0..p).map(|k| (0..l).map(|i| w[i] * d.entries()[i * p + k]).sum()).collect();
    let us: f64 = u.iter().zip(s).map(|(a, b)| a * b).sum();
    us / u.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Least-squares solution of `D^T w = target` (minimum norm), built with the
/// normal equations on the small `p x p` system.
fn embed_exactly(d: &ProjectionMatrix, target: &[f64]) -> Vec<f64> {
    let (l, p) = (d.rows(), d.cols());
    let dm = nalgebra::DMatrix::from_row_slice(l, p, d.entries());
    let gram = dm.transpose() * &dm;
    let y = gram.lu().solve(&nalgebra::DVector::from_column_slice(target)).expect("full-rank projection");
    (&dm * y).as_slice().to_vec()
}

#[test]
fn projection_matches_naive_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = ProjectionMatrix::generate(40, 12, 2).unwrap();
    let basis = OwnerBasis::generate(12, 5, 3).unwrap();
    let w = gaussian(40, &mut rng);
    let r = projections(&w, &d, &basis).unwrap();
    for (j, &rj) in r.iter().enumerate() {
        assert!((rj - r_oracle(&w, &d, basis.vector(j))).abs() < 1e-12);
    }
}

#[test]
fn basis_is_orthonormal() {
    let basis = OwnerBasis::generate(50, 50, 8).unwrap();
    for a in 0..50 {
        for b in 0..50 {
            let dot: f64 = basis.vector(a).iter().zip(basis.vector(b)).map(|(x, y)| x * y).sum();
            let expected = if a == b { 1.0 } else { 0.0 };
            assert!((dot - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn collusion_of_embedded_carriers_follows_inverse_sqrt_law() {
    let (l, p, n) = (300, 40, 10);
    let d = ProjectionMatrix::generate(l, p, 4).unwrap();
    let basis = OwnerBasis::generate(p, n, 5).unwrap();
    let carriers: Vec<Vec<f64>> = (0..6).map(|j| embed_exactly(&d, basis.vector(j))).collect();
    for c in 1..=6 {
        let merged: Vec<f64> = (0..l).map(|i| carriers[..c].iter().map(|w| w[i]).sum::<f64>() / c as f64).collect();
        let r = projections(&merged, &d, &basis).unwrap();
        for (j, &rj) in r.iter().enumerate() {
            let expected = if j < c { 1.0 / (c as f64).sqrt() } else { 0.0 };
            assert!((rj - expected).abs() < 1e-9, "c={c} j={j}: {rj}");
        }
        let report = accuse_whitebox(&merged, &d, &basis, 0.11).unwrap();
        assert_eq!(report.accused, (0..c).collect::<Vec<_>>());
    }
}

#[test]
fn regularizer_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for instance in 0..100 {
        let (l, p) = (rng.random_range(5..30), rng.random_range(2..8));
        let d = ProjectionMatrix::generate(l, p, instance).unwrap();
        let basis = OwnerBasis::generate(p, 1, instance + 1000).unwrap();
        let s = basis.vector(0);
        let w = gaussian(l, &mut rng);
        let (_, grad) = regularizer_loss_and_grad(&w, &d, s).unwrap();
        let h = 1e-6;
        for i in 0..l {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = ((-r_oracle(&plus, &d, s)).exp() - (-r_oracle(&minus, &d, s)).exp()) / (2.0 * h);
            let scale = grad.iter().map(|g| g.abs()).fold(0.0, f64::max).max(1e-12);
            worst = worst.max((grad[i] - fd).abs() / scale);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn batch_matches_single_evaluations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = ProjectionMatrix::generate(64, 16, 1).unwrap();
    let basis = OwnerBasis::generate(16, 4, 2).unwrap();
    let weights = gaussian(4 * 64, &mut rng);
    let vectors: Vec<&[f64]> = (0..4).map(|j| basis.vector(j)).collect();
    let batch = batch_regularizer(&weights, 4, &d, &vectors).unwrap();
    for (j, (loss, grad)) in batch.iter().enumerate() {
        let (l1, g1) = regularizer_loss_and_grad(&weights[j * 64..(j + 1) * 64], &d, basis.vector(j)).unwrap();
        assert!((loss - l1).abs() < 1e-12);
        assert!(grad.iter().zip(&g1).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn descent_on_the_regularizer_raises_r() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = ProjectionMatrix::generate(200, 20, 9).unwrap();
    let basis = OwnerBasis::generate(20, 3, 10).unwrap();
    let mut w = gaussian(200, &mut rng);
    let mut r = project(&w, &d, basis.vector(1)).unwrap();
    let r0 = r;
    for _ in 0..100 {
        let (_, g) = regularizer_loss_and_grad(&w, &d, basis.vector(1)).unwrap();
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= 0.5 * gi;
        }
        let next = project(&w, &d, basis.vector(1)).unwrap();
        assert!(next > r);
        r = next;
    }
    assert!(r > r0 + 0.5, "{r0} -> {r}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_scale_invariant(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = ProjectionMatrix::generate(30, 6, seed ^ 1).unwrap();
        let basis = OwnerBasis::generate(6, 6, seed ^ 2).unwrap();
        let w = gaussian(30, &mut rng);
        let scaled: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let a = projections(&w, &d, &basis).unwrap();
        let b = projections(&scaled, &d, &basis).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn projections_lie_in_unit_ball(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = ProjectionMatrix::generate(25, 8, seed ^ 3).unwrap();
        let basis = OwnerBasis::generate(8, 8, seed ^ 4).unwrap();
        let w = gaussian(25, &mut rng);
        let r = projections(&w, &d, &basis).unwrap();
        // a complete orthonormal basis recovers the whole unit vector u / |u|
        let total: f64 = r.iter().map(|x| x * x).sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }
}
