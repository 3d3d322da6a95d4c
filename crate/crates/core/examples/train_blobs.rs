//! Trains the MLP with each loss on Gaussian blobs and compares accuracy and
//! angular discrimination on the held-out split.

use haseparator::data::gaussian_blobs;
use haseparator::losses::{scaled_cosine_logits, LossConfig};
use haseparator::metrics::{evaluate, EvalSettings};
use haseparator::model::{MlpModel, ModelSpec};
use haseparator::trainer::{train, TrainConfig};

fn main() -> haseparator::Result<()> {
    let (train_set, test_set) = gaussian_blobs(5, 200, 16, 1.0, 0.35, 0)?;
    let spec = ModelSpec::new(16, &[32, 32], 16, 5);
    let sigma = 5.0;

    for loss in [
        LossConfig::softmax(sigma),
        LossConfig::haseparator(sigma, 0.9),
        LossConfig::arcface(sigma, 0.5),
    ] {
        let config = TrainConfig::with_defaults(300, loss, 2);
        let report = train(MlpModel::init(&spec, 1)?, &train_set, &config)?;
        let last = report.records.last().expect("at least one step");

        let emb = report.model.embed(&test_set.features)?;
        let logits = scaled_cosine_logits(&emb, &report.model.class_weights, sigma)?;
        let eval = evaluate(&emb, &logits, &test_set.labels, &EvalSettings::default())?;
        println!(
            "{:<12} final C_all {:.4} (C_t {:.4})  test acc {:.3}  D_KL {:.3}  D_EM {:.2} deg",
            loss.kind.name(),
            last.c_all,
            last.c_sep,
            eval.scores.accuracy,
            eval.scores.d_kl,
            eval.scores.d_em
        );
    }
    Ok(())
}
