//! Forward pass of the separator loss on a hand-sized batch: logits,
//! hyperplane projections and the two cost terms.

use haseparator::losses::{compute_loss, hyperplane_normals, hyperplane_projections, LossConfig};
use haseparator::tensor::{l2_normalize_columns, l2_normalize_rows, Matrix, DEFAULT_EPSILON};

fn main() -> haseparator::Result<()> {
    // Three classes in the plane, 120 degrees apart.
    let w = Matrix::from_rows(&[[1.0, -0.5, -0.5], [0.0, 0.866, -0.866]])?;
    let e = Matrix::from_rows(&[[1.0, 0.0], [0.2, 1.0], [-1.0, 0.1]])?;
    let labels = [0, 1, 0];

    let w_hat = l2_normalize_columns(&w, DEFAULT_EPSILON)?;
    let e_hat = l2_normalize_rows(&e, DEFAULT_EPSILON)?;
    let normals = hyperplane_normals(&w_hat, &labels)?;
    let p = hyperplane_projections(&e_hat, &normals)?;

    let config = LossConfig::haseparator(4.0, 0.6);
    let r = compute_loss(&e, &w, &labels, &config)?;
    for (i, label) in labels.iter().enumerate() {
        println!(
            "sample {i} (label {label}): logits {:?}, projections {:?}",
            r.logits
                .row(i)
                .iter()
                .map(|v| format!("{v:+.3}"))
                .collect::<Vec<_>>(),
            p.row(i)
                .iter()
                .map(|v| format!("{v:+.3}"))
                .collect::<Vec<_>>()
        );
    }
    println!(
        "cross-entropy {:.6} + separator {:.6} = {:.6}",
        r.ce_loss, r.separator_loss, r.total_loss
    );

    // The two-class worked example: C_t = 1 - 1/sqrt(2).
    let r = compute_loss(
        &Matrix::from_rows(&[[1.0, 0.0]])?,
        &Matrix::identity(2),
        &[0],
        &LossConfig::haseparator(1.0, 1.0),
    )?;
    println!(
        "worked example: C_t = {:.8}, C_all = {:.8}",
        r.separator_loss, r.total_loss
    );
    Ok(())
}
