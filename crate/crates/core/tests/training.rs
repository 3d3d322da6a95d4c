//! Library-level training scenarios beyond the unit tests.

use haseparator::cli::{run_experiment, DatasetSource, ExperimentConfig};
use haseparator::data::two_rings;
use haseparator::losses::{scaled_cosine_logits, LossConfig};
use haseparator::metrics::accuracy;
use haseparator::model::{MlpModel, ModelSpec};
use haseparator::trainer::{train, TrainConfig};

#[test]
fn mlp_separates_two_rings() {
    let (train_set, test_set) = two_rings(300, 0.1, 5).unwrap();
    let spec = ModelSpec::new(2, &[32, 32], 16, 2);
    let config = TrainConfig::with_defaults(1500, LossConfig::haseparator(5.0, 0.5), 8);
    let report = train(MlpModel::init(&spec, 2).unwrap(), &train_set, &config).unwrap();
    let emb = report.model.embed(&test_set.features).unwrap();
    let logits = scaled_cosine_logits(&emb, &report.model.class_weights, 5.0).unwrap();
    let acc = accuracy(&logits, &test_set.labels).unwrap();
    assert!(acc > 0.95, "test accuracy {acc}");
}

#[test]
fn experiments_are_reproducible_across_runs() {
    let cfg = ExperimentConfig {
        dataset: DatasetSource::Rings,
        steps: 80,
        hidden: vec![8],
        embed_dim: 4,
        max_pairs: 2000,
        ..ExperimentConfig::default()
    };
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.test.scores, b.test.scores);
    assert_eq!(a.test_embeddings, b.test_embeddings);
}

#[test]
fn separator_cost_falls_during_training() {
    let cfg = ExperimentConfig {
        steps: 300,
        hidden: vec![32],
        embed_dim: 16,
        max_pairs: 2000,
        ..ExperimentConfig::default()
    };
    let o = run_experiment(&cfg).unwrap();
    let head: f64 = o.report.records[..20].iter().map(|r| r.c_sep).sum::<f64>() / 20.0;
    let tail: f64 = o.report.records[280..].iter().map(|r| r.c_sep).sum::<f64>() / 20.0;
    assert!(tail < head, "separator cost {head} -> {tail}");
}
