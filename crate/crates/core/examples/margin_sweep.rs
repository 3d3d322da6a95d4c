//! A small margin sweep: how the separator and the angular margin loss hold
//! up as the margin grows.

use haseparator::cli::{run_sweep, write_sweep_csv, ExperimentConfig, SweepGrid};
use haseparator::losses::LossKind;

fn main() -> haseparator::Result<()> {
    let base = ExperimentConfig {
        hidden: vec![32, 32],
        embed_dim: 16,
        steps: 200,
        max_pairs: 10_000,
        ..ExperimentConfig::default()
    };
    let grid = SweepGrid {
        losses: vec![LossKind::HaSeparator, LossKind::ArcFace],
        sigmas: vec![5.0],
        margins: vec![0.2, 0.6, 1.0],
        seeds: vec![0],
    };
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let records = run_sweep(&base, &grid, jobs)?;
    for r in &records {
        println!(
            "{:<12} m={:.1}  acc {:.3}  D_EM {:6.2} deg  final C_t {:.4}",
            r.loss.name(),
            r.margin,
            r.test_accuracy.unwrap_or(f64::NAN),
            r.d_em.unwrap_or(f64::NAN),
            r.c_t.unwrap_or(f64::NAN)
        );
    }
    let mut csv = Vec::new();
    write_sweep_csv(&records, &mut csv).expect("in-memory write");
    println!("\n{}", String::from_utf8(csv).expect("utf-8 csv"));
    Ok(())
}
