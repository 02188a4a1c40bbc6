//! Fast invariant checks runnable on any machine, without data.

use fltrace::nn::{checkpoint, Architecture, Model, IMAGE_PIXELS};
use fltrace::tardos::{accusation_threshold, cutoff_box, sample_bias_matrix, score_increment};
use fltrace::whitebox::{projections, regularizer_loss_and_grad, OwnerBasis, ProjectionMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

pub fn run_all() -> Vec<Check> {
    vec![
        innocent_scores(),
        threshold_equality(),
        bias_box(),
        regularizer_gradient(),
        scale_invariance(),
        architecture(),
        softmax_and_checkpoint(),
    ]
}

fn categorical(row: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    row.len() - 1
}

fn innocent_scores() -> Check {
    let bias = sample_bias_matrix(1000, 10, 100.0, 0.038, 3).expect("valid parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let row = bias.row(rng.random_range(0..bias.m()));
        let s = score_increment(categorical(row, &mut rng), categorical(row, &mut rng), row).expect("valid row");
        sum += s;
        sum_sq += s * s;
    }
    let mean = sum / n as f64;
    let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
    check("innocent score mean is zero", mean.abs() < 3.0 * se, format!("mean {mean:.5}, 3 SE {:.5}", 3.0 * se))
}

fn threshold_equality() -> Check {
    let (eps, tau) = (1e-6f64, 0.038f64);
    let mut worst = 0.0f64;
    for t in [1usize, 10, 100, 1000] {
        let z = accusation_threshold(t, eps, tau);
        let tf = t as f64;
        let lhs = z * z / (2.0 * tf) / (1.0 + z / (3.0 * tf * tau.sqrt()));
        worst = worst.max((lhs / -eps.ln() - 1.0).abs());
    }
    check("threshold solves the bound at equality", worst < 1e-6, format!("worst relative error {worst:.2e}"))
}

fn bias_box() -> Check {
    let bias = sample_bias_matrix(1000, 10, 100.0, 0.038, 7).expect("valid parameters");
    let (lo, hi) = cutoff_box(10, 0.038);
    let inside = bias.entries().iter().all(|&p| (lo..=hi).contains(&p));
    check("bias rows respect the cutoff box", inside, format!("box [{lo}, {hi:.3}]"))
}

fn r_of(w: &[f64], d: &ProjectionMatrix, s: &[f64]) -> f64 {
    let p = d.cols();
    let u: Vec<f64> = (0..p).map(|k| w.iter().enumerate().map(|(i, wi)| wi * d.entries()[i * p + k]).sum()).collect();
    u.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / u.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn regularizer_gradient() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for instance in 0..20 {
        let d = ProjectionMatrix::generate(24, 6, instance).expect("valid shape");
        let basis = OwnerBasis::generate(6, 1, instance + 100).expect("valid shape");
        let w: Vec<f64> = (0..24).map(|_| rng.random::<f64>() - 0.5).collect();
        let (_, grad) = regularizer_loss_and_grad(&w, &d, basis.vector(0)).expect("nondegenerate");
        let scale = grad.iter().map(|g| g.abs()).fold(1e-12, f64::max);
        for i in 0..w.len() {
            let (mut plus, mut minus) = (w.clone(), w.clone());
            plus[i] += 1e-6;
            minus[i] -= 1e-6;
            let fd = ((-r_of(&plus, &d, basis.vector(0))).exp() - (-r_of(&minus, &d, basis.vector(0))).exp()) / 2e-6;
            worst = worst.max((grad[i] - fd).abs() / scale);
        }
    }
    check("regularizer gradient matches finite differences", worst < 1e-4, format!("worst relative error {worst:.2e}"))
}

fn scale_invariance() -> Check {
    let d = ProjectionMatrix::generate(30, 5, 1).expect("valid shape");
    let basis = OwnerBasis::generate(5, 5, 2).expect("valid shape");
    let w: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
    let scaled: Vec<f64> = w.iter().map(|v| v * 37.5).collect();
    let a = projections(&w, &d, &basis).expect("nondegenerate");
    let b = projections(&scaled, &d, &basis).expect("nondegenerate");
    let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    check("r_j is invariant under scaling", worst < 1e-12, format!("max difference {worst:.2e}"))
}

fn architecture() -> Check {
    let arch = Architecture::small_cnn();
    let count = arch.layers()[arch.carrier_layer()].weight_len();
    check("conv3 kernel holds 73,728 weights", count == 73_728, format!("{count}"))
}

fn softmax_and_checkpoint() -> Check {
    let model = Model::small_cnn(9);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images: Vec<f32> = (0..4 * IMAGE_PIXELS).map(|_| rng.random()).collect();
    let (probs, _) = model.forward_predict(&images, None).expect("valid batch");
    let worst = probs.chunks_exact(10).map(|r| (r.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    let mut bytes = Vec::new();
    checkpoint::write_model(&model, &mut bytes).expect("in-memory write");
    let round_trip = checkpoint::read_model(&bytes).map(|m| m == model).unwrap_or(false);
    check(
        "softmax rows normalize and checkpoints round-trip",
        worst < 1e-6 && round_trip,
        format!("softmax error {worst:.2e}, round trip {round_trip}"),
    )
}
