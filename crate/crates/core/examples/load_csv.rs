//! Loads a delimited dataset from disk (standardized on load), trains on it,
//! and reports test accuracy.

use haseparator::data::{load_delimited, two_rings, write_delimited};
use haseparator::losses::{scaled_cosine_logits, LossConfig};
use haseparator::metrics::accuracy;
use haseparator::model::{MlpModel, ModelSpec};
use haseparator::trainer::{train, TrainConfig};

fn main() -> haseparator::Result<()> {
    // Write a dataset in the expected layout: features, then the label.
    let (rings, _) = two_rings(200, 0.1, 4)?;
    let path = std::env::temp_dir().join(format!("haseparator-rings-{}.csv", std::process::id()));
    write_delimited(&rings, &path)?;

    let data = load_delimited(&path, rings.dim(), false)?;
    std::fs::remove_file(&path).ok();
    let (train_set, test_set) = data.train_test_split(1)?;
    println!(
        "loaded {} rows x {} features, {} classes",
        data.len(),
        data.dim(),
        data.num_classes
    );

    let spec = ModelSpec::new(data.dim(), &[32, 32], 8, data.num_classes);
    let config = TrainConfig::with_defaults(800, LossConfig::haseparator(5.0, 0.5), 2);
    let model = train(MlpModel::init(&spec, 3)?, &train_set, &config)?.model;
    let emb = model.embed(&test_set.features)?;
    let logits = scaled_cosine_logits(&emb, &model.class_weights, 5.0)?;
    println!("test accuracy {:.3}", accuracy(&logits, &test_set.labels)?);
    Ok(())
}
