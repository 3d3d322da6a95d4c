//! Compares the analytic gradients of all three losses with central finite
//! differences on a random batch.

use haseparator::losses::{compute_loss, LossConfig};
use haseparator::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;

fn numeric_gradient(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let mut plus = x.clone();
        plus.set(i, j, x.get(i, j) + STEP);
        let mut minus = x.clone();
        minus.set(i, j, x.get(i, j) - STEP);
        (f(&plus) - f(&minus)) / (2.0 * STEP)
    })
}

fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let size = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
        / size(a).max(size(b)).max(1e-12)
}

fn main() -> haseparator::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e = Matrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
    let w = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
    let labels = [0, 3, 1, 3];

    for config in [
        LossConfig::softmax(4.0),
        LossConfig::haseparator(4.0, 0.7),
        LossConfig::arcface(4.0, 0.5),
    ] {
        let r = compute_loss(&e, &w, &labels, &config)?;
        let ge = numeric_gradient(&e, |x| {
            compute_loss(x, &w, &labels, &config).unwrap().total_loss
        });
        let gw = numeric_gradient(&w, |x| {
            compute_loss(&e, x, &labels, &config).unwrap().total_loss
        });
        println!(
            "{:<12} loss {:.6}  rel. error dE {:.2e}  dW {:.2e}",
            config.kind.name(),
            r.total_loss,
            relative_error(&r.grad_embeddings, &ge),
            relative_error(&r.grad_weights, &gw)
        );
    }
    Ok(())
}
