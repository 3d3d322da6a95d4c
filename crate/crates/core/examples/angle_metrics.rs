//! Angular pair statistics: positive/negative pair angles, their histograms,
//! and the KL and earth mover's distances between them.

use haseparator::metrics::{build_histograms, emd_1d, kl_divergence, pair_angles};
use haseparator::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> haseparator::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centers = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for spread in [0.1, 0.4, 1.0] {
        let noise = Normal::new(0.0, spread).expect("valid spread");
        let mut labels = Vec::new();
        let e = Matrix::from_fn(150, 3, |i, j| {
            if j == 0 {
                labels.push(i % 3);
            }
            centers[i % 3][j] + noise.sample(&mut rng)
        });
        let angles = pair_angles(&e, &labels, usize::MAX, 0)?;
        let h = build_histograms(&angles.positive, &angles.negative, 36)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "spread {spread:.1}: {} positive pairs (mean {:.1} deg), {} negative (mean {:.1} deg), \
             D_KL {:.3}, D_EM {:.2} deg",
            angles.positive.len(),
            mean(&angles.positive),
            angles.negative.len(),
            mean(&angles.negative),
            kl_divergence(&h, 1e-10)?,
            emd_1d(&h)?
        );
        if spread == 0.4 {
            let mut csv = Vec::new();
            h.write_csv(&mut csv).expect("in-memory write");
            let text = String::from_utf8(csv).expect("utf-8 csv");
            println!(
                "  first bins:\n  {}",
                text.lines().take(4).collect::<Vec<_>>().join("\n  ")
            );
        }
    }
    Ok(())
}
