//! Saves a trained model, loads it back and checks that it embeds inputs
//! identically.

use haseparator::data::gaussian_blobs;
use haseparator::losses::LossConfig;
use haseparator::model::{MlpModel, ModelSpec};
use haseparator::trainer::{train, TrainConfig};

fn main() -> haseparator::Result<()> {
    let (train_set, test_set) = gaussian_blobs(3, 60, 4, 2.0, 0.3, 9)?;
    let spec = ModelSpec::new(4, &[12], 6, 3);
    let config = TrainConfig::with_defaults(100, LossConfig::haseparator(4.0, 0.8), 0);
    let model = train(MlpModel::init(&spec, 0)?, &train_set, &config)?.model;

    let path = std::env::temp_dir().join(format!("haseparator-example-{}.txt", std::process::id()));
    model.save(&path)?;
    let restored = MlpModel::load(&path)?;
    std::fs::remove_file(&path).ok();

    let a = model.embed(&test_set.features)?;
    let b = restored.embed(&test_set.features)?;
    println!(
        "{} parameters saved and restored; largest embedding difference {:e}",
        restored.param_count(),
        a.max_abs_diff(&b)
    );
    assert_eq!(model, restored);
    Ok(())
}
