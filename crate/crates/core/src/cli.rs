//! Experiment orchestration behind the `haseparator` binary: single training
//! runs, (σ, m) sweeps, and evaluation of saved checkpoints.
//!
//! Settings come from an optional `key=value` config file and are overridden
//! by command-line flags. Every command echoes its effective settings to
//! `config.txt` in the output directory.
//!
//! Output directory layout:
//!
//! | file                 | written by    | contents                                  |
//! |----------------------|---------------|-------------------------------------------|
//! | `config.txt`         | all           | effective settings, `key=value`           |
//! | `report.csv`         | train         | `step,lr,c_all,c_ce,c_sep,train_acc`      |
//! | `checkpoint.txt`     | train         | model parameters, see [`crate::model`]    |
//! | `hist_<run>.csv`     | train, eval   | angle histograms of one split             |
//! | `scores_<run>.json`  | train, eval   | D_KL, D_EM and accuracy of one split      |
//! | `embeddings_<run>.csv` | train, eval | `n_dims` line, then `v_0,..,v_n,label`    |
//! | `sweep.csv`          | sweep         | one row per (loss, σ, m, seed)            |
//!
//! `<run>` is the split name (`train` or `test`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{gaussian_blobs, load_delimited, two_rings, Dataset};
use crate::error::{Error, Result};
use crate::losses::{scaled_cosine_logits, LossConfig, LossKind};
use crate::metrics::{
    evaluate, write_embeddings, EvalSettings, Evaluation, DEFAULT_BINS, DEFAULT_KL_EPSILON,
    DEFAULT_MAX_PAIRS,
};
use crate::model::{MlpModel, ModelSpec};
use crate::trainer::{train, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Blobs,
    Rings,
    File(PathBuf),
}

impl DatasetSource {
    fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "blobs" => Ok(DatasetSource::Blobs),
            "rings" => Ok(DatasetSource::Rings),
            other => match other.strip_prefix("file:") {
                Some(path) if !path.is_empty() => Ok(DatasetSource::File(PathBuf::from(path))),
                _ => Err(Error::config(format!(
                    "unknown dataset {other:?} (expected blobs, rings or file:<path>)"
                ))),
            },
        }
    }

    fn describe(&self) -> String {
        match self {
            DatasetSource::Blobs => "blobs".into(),
            DatasetSource::Rings => "rings".into(),
            DatasetSource::File(p) => format!("file:{}", p.display()),
        }
    }
}

/// Everything needed for one training run and its evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub loss: LossConfig,
    pub dataset: DatasetSource,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub center_radius: f64,
    pub stddev: f64,
    pub ring_noise: f64,
    pub label_column: usize,
    pub skip_header: bool,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub steps: usize,
    /// When set, overrides `steps` with `epochs * ceil(train_len / batch_size)`.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// Explicit drop steps; `None` drops at 50% and 75% of the run.
    pub lr_drops: Option<Vec<usize>>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub bins: usize,
    pub max_pairs: usize,
    pub kl_epsilon: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            loss: LossConfig {
                kind: LossKind::HaSeparator,
                sigma: 3.0,
                margin: 0.9,
                arc_margin: 0.5,
            },
            dataset: DatasetSource::Blobs,
            classes: 5,
            per_class: 200,
            dim: 16,
            center_radius: 1.0,
            stddev: 0.35,
            ring_noise: 0.1,
            label_column: 0,
            skip_header: false,
            hidden: vec![32, 32],
            embed_dim: 64,
            steps: 1000,
            epochs: None,
            batch_size: 128,
            lr: 0.1,
            lr_drops: None,
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            bins: DEFAULT_BINS,
            max_pairs: DEFAULT_MAX_PAIRS,
            kl_epsilon: DEFAULT_KL_EPSILON,
        }
    }
}

/// Ordered `key=value` settings. Keys use underscores; dashes are accepted on
/// input and normalized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings(BTreeMap<String, String>);

fn normalize_key(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('-', "_")
}

impl Settings {
    /// Parses `key=value` lines. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "config line {}: expected key=value, got {raw:?}",
                    n + 1
                ))
            })?;
            map.insert(normalize_key(key), value.trim().to_string());
        }
        Ok(Settings(map))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Settings::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(normalize_key(key), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn take<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::config(format!("bad value {v:?} for {key}: {e}")))
            })
            .transpose()
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>()
                            .map_err(|e| Error::config(format!("bad entry {s:?} in {key}: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    fn check_known(&self, allowed: &[&str]) -> Result<()> {
        match self.0.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::config(format!("unknown setting {k:?}"))),
            None => Ok(()),
        }
    }
}

const EXPERIMENT_KEYS: &[&str] = &[
    "loss",
    "sigma",
    "margin",
    "arc_margin_deg",
    "dataset",
    "classes",
    "per_class",
    "dim",
    "center_radius",
    "stddev",
    "ring_noise",
    "label_column",
    "skip_header",
    "hidden",
    "embed_dim",
    "steps",
    "epochs",
    "batch_size",
    "lr",
    "lr_drops",
    "lr_drop_factor",
    "momentum",
    "weight_decay",
    "seed",
    "bins",
    "max_pairs",
    "kl_epsilon",
];
const SWEEP_KEYS: &[&str] = &["losses", "sigmas", "margins", "seeds", "jobs"];
const COMMAND_KEYS: &[&str] = &["out", "checkpoint"];

impl ExperimentConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        if let Some(v) = s.get("loss") {
            c.loss.kind = v.parse()?;
        }
        if let Some(v) = s.take("sigma")? {
            c.loss.sigma = v;
        }
        if let Some(v) = s.take("margin")? {
            c.loss.margin = v;
        }
        if let Some(v) = s.take::<f64>("arc_margin_deg")? {
            c.loss.arc_margin = v.to_radians();
        }
        if let Some(v) = s.get("dataset") {
            c.dataset = DatasetSource::parse(v)?;
        }
        macro_rules! field {
            ($($name:ident),*) => {$(
                if let Some(v) = s.take(stringify!($name))? {
                    c.$name = v;
                }
            )*};
        }
        field!(
            classes,
            per_class,
            dim,
            center_radius,
            stddev,
            ring_noise,
            label_column,
            skip_header,
            embed_dim,
            steps,
            batch_size,
            lr,
            lr_drop_factor,
            momentum,
            weight_decay,
            seed,
            bins,
            max_pairs,
            kl_epsilon
        );
        if let Some(v) = s.list("hidden")? {
            c.hidden = v;
        }
        if let Some(v) = s.take("epochs")? {
            c.epochs = Some(v);
        }
        if let Some(v) = s.list("lr_drops")? {
            c.lr_drops = Some(v);
        }
        c.loss.validate()?;
        Ok(c)
    }

    /// The effective settings, suitable for writing back as a config file.
    pub fn to_settings(&self) -> Settings {
        let mut s = Settings::default();
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        s.set("loss", self.loss.kind);
        s.set("sigma", self.loss.sigma);
        s.set("margin", self.loss.margin);
        s.set("arc_margin_deg", self.loss.arc_margin.to_degrees());
        s.set("dataset", self.dataset.describe());
        s.set("classes", self.classes);
        s.set("per_class", self.per_class);
        s.set("dim", self.dim);
        s.set("center_radius", self.center_radius);
        s.set("stddev", self.stddev);
        s.set("ring_noise", self.ring_noise);
        s.set("label_column", self.label_column);
        s.set("skip_header", self.skip_header);
        s.set("hidden", join(&self.hidden));
        s.set("embed_dim", self.embed_dim);
        s.set("steps", self.steps);
        if let Some(e) = self.epochs {
            s.set("epochs", e);
        }
        s.set("batch_size", self.batch_size);
        s.set("lr", self.lr);
        if let Some(d) = &self.lr_drops {
            s.set("lr_drops", join(d));
        }
        s.set("lr_drop_factor", self.lr_drop_factor);
        s.set("momentum", self.momentum);
        s.set("weight_decay", self.weight_decay);
        s.set("seed", self.seed);
        s.set("bins", self.bins);
        s.set("max_pairs", self.max_pairs);
        s.set("kl_epsilon", self.kl_epsilon);
        s
    }

    /// Train and test splits for this configuration's dataset and seed.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSource::Blobs => gaussian_blobs(
                self.classes,
                self.per_class,
                self.dim,
                self.center_radius,
                self.stddev,
                self.seed,
            ),
            DatasetSource::Rings => two_rings(self.per_class, self.ring_noise, self.seed),
            DatasetSource::File(path) => load_delimited(path, self.label_column, self.skip_header)?
                .train_test_split(self.seed),
        }
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        ModelSpec::new(input_dim, &self.hidden, self.embed_dim, num_classes)
    }

    pub fn train_config(&self, train_len: usize) -> TrainConfig {
        let steps = match self.epochs {
            Some(e) => e * train_len.div_ceil(self.batch_size.max(1)),
            None => self.steps,
        };
        let mut tc = TrainConfig::with_defaults(steps, self.loss, self.seed.wrapping_add(2));
        tc.batch_size = self.batch_size;
        tc.base_lr = self.lr;
        if let Some(d) = &self.lr_drops {
            tc.lr_drop_points = d.clone();
        }
        tc.lr_drop_factor = self.lr_drop_factor;
        tc.momentum = self.momentum;
        tc.weight_decay = self.weight_decay;
        tc
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            num_bins: self.bins,
            max_pairs_per_kind: self.max_pairs,
            kl_epsilon: self.kl_epsilon,
            seed: self.seed,
        }
    }
}

/// Result of training and evaluating one configuration.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: TrainReport,
    pub test: Evaluation,
    pub test_embeddings: crate::tensor::Matrix,
    pub test_labels: Vec<usize>,
    pub wall_time_s: f64,
}

/// Embeds `data` with `model` and computes its discrimination scores.
pub fn evaluate_model(
    model: &MlpModel,
    data: &Dataset,
    sigma: f64,
    settings: &EvalSettings,
) -> Result<(Evaluation, crate::tensor::Matrix)> {
    let embeddings = model.embed(&data.features)?;
    let logits = scaled_cosine_logits(&embeddings, &model.class_weights, sigma)?;
    Ok((
        evaluate(&embeddings, &logits, &data.labels, settings)?,
        embeddings,
    ))
}

/// Trains from scratch and evaluates on the test split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let (train_set, test_set) = cfg.load_data()?;
    let model = MlpModel::init(
        &cfg.model_spec(train_set.dim(), train_set.num_classes),
        cfg.seed.wrapping_add(1),
    )?;
    let report = train(model, &train_set, &cfg.train_config(train_set.len()))?;
    let (test, test_embeddings) = evaluate_model(
        &report.model,
        &test_set,
        cfg.loss.sigma,
        &cfg.eval_settings(),
    )?;
    Ok(RunOutcome {
        report,
        test,
        test_embeddings,
        test_labels: test_set.labels,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Serialize)]
struct ScoresRecord<'a> {
    split: &'a str,
    d_kl: f64,
    d_em: f64,
    accuracy: f64,
    pos_pairs: u64,
    neg_pairs: u64,
    skipped_zero: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes `hist_<run>.csv`, `scores_<run>.json` and `embeddings_<run>.csv`.
pub fn write_evaluation(
    out: &Path,
    run: &str,
    eval: &Evaluation,
    embeddings: &crate::tensor::Matrix,
    labels: &[usize],
) -> Result<()> {
    let hist_path = out.join(format!("hist_{run}.csv"));
    let mut buf = Vec::new();
    eval.histograms
        .write_csv(&mut buf)
        .map_err(io_err(&hist_path))?;
    write_file(&hist_path, buf)?;

    let record = ScoresRecord {
        split: run,
        d_kl: eval.scores.d_kl,
        d_em: eval.scores.d_em,
        accuracy: eval.scores.accuracy,
        pos_pairs: eval.histograms.pos_total,
        neg_pairs: eval.histograms.neg_total,
        skipped_zero: eval.skipped_zero,
    };
    let json = serde_json::to_string(&record).expect("scores serialize");
    write_file(&out.join(format!("scores_{run}.json")), json + "\n")?;
    write_embeddings(
        out.join(format!("embeddings_{run}.csv")),
        embeddings,
        labels,
    )
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))
}

/// Trains, evaluates on the test split and writes every artifact to `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    prepare_out(out)?;
    write_file(&out.join("config.txt"), cfg.to_settings().to_text())?;
    let outcome = run_experiment(cfg)?;
    let report_path = out.join("report.csv");
    let mut buf = Vec::new();
    outcome
        .report
        .write_csv(&mut buf)
        .map_err(io_err(&report_path))?;
    write_file(&report_path, buf)?;
    outcome.report.model.save(out.join("checkpoint.txt"))?;
    write_evaluation(
        out,
        "test",
        &outcome.test,
        &outcome.test_embeddings,
        &outcome.test_labels,
    )?;
    Ok(outcome)
}

/// Re-evaluates a checkpoint on both splits of the configured dataset.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
) -> Result<Vec<(String, Evaluation)>> {
    let model = MlpModel::load(checkpoint)?;
    let (train_set, test_set) = cfg.load_data()?;
    if model.input_dim() != train_set.dim() {
        return Err(Error::shape(format!(
            "checkpoint expects {} input features, dataset has {}",
            model.input_dim(),
            train_set.dim()
        )));
    }
    if model.num_classes() < train_set.num_classes {
        return Err(Error::shape(format!(
            "checkpoint has {} classes, dataset has {}",
            model.num_classes(),
            train_set.num_classes
        )));
    }
    prepare_out(out)?;
    let mut settings = cfg.to_settings();
    settings.set("checkpoint", checkpoint.display());
    write_file(&out.join("config.txt"), settings.to_text())?;
    let mut results = Vec::new();
    for (run, data) in [("train", &train_set), ("test", &test_set)] {
        let (eval, embeddings) =
            evaluate_model(&model, data, cfg.loss.sigma, &cfg.eval_settings())?;
        write_evaluation(out, run, &eval, &embeddings, &data.labels)?;
        results.push((run.to_string(), eval));
    }
    Ok(results)
}

/// The (loss, σ, m, seed) grid of a sweep. The margin grid drives the hinge
/// threshold for the separator and the angular margin (radians) for ArcFace;
/// softmax ignores it.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub losses: Vec<LossKind>,
    pub sigmas: Vec<f64>,
    pub margins: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            losses: vec![LossKind::HaSeparator, LossKind::ArcFace],
            sigmas: (1..=10).map(f64::from).collect(),
            margins: (1..=10).map(|i| f64::from(i) / 10.0).collect(),
            seeds: vec![0],
        }
    }
}

fn dedup_in_order<T: PartialEq + Clone + std::fmt::Debug>(
    name: &str,
    v: &mut Vec<T>,
    warnings: &mut Vec<String>,
) {
    let mut kept: Vec<T> = Vec::with_capacity(v.len());
    for x in v.drain(..) {
        if kept.contains(&x) {
            warnings.push(format!("duplicate {name} value {x:?} ignored"));
        } else {
            kept.push(x);
        }
    }
    *v = kept;
}

impl SweepGrid {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let mut g = SweepGrid::default();
        if let Some(v) = s.get("losses") {
            g.losses = v
                .split(',')
                .map(str::trim)
                .filter(|x| !x.is_empty())
                .map(str::parse)
                .collect::<Result<_>>()?;
        }
        if let Some(v) = s.list("sigmas")? {
            g.sigmas = v;
        }
        if let Some(v) = s.list("margins")? {
            g.margins = v;
        }
        if let Some(v) = s.list("seeds")? {
            g.seeds = v;
        }
        Ok(g)
    }

    /// Removes repeated values, keeping first occurrences, and returns one
    /// warning per removed value.
    pub fn dedup(&mut self) -> Vec<String> {
        let mut warnings = Vec::new();
        dedup_in_order("loss", &mut self.losses, &mut warnings);
        dedup_in_order("sigma", &mut self.sigmas, &mut warnings);
        dedup_in_order("margin", &mut self.margins, &mut warnings);
        dedup_in_order("seed", &mut self.seeds, &mut warnings);
        warnings
    }

    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty()
            || self.sigmas.is_empty()
            || self.margins.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::config("every sweep grid needs at least one value"));
        }
        Ok(())
    }

    /// Grid points in output order: loss, then σ, then m, then seed.
    pub fn points(&self) -> Vec<(LossKind, f64, f64, u64)> {
        let mut out = Vec::new();
        for &loss in &self.losses {
            for &sigma in &self.sigmas {
                for &margin in &self.margins {
                    for &seed in &self.seeds {
                        out.push((loss, sigma, margin, seed));
                    }
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.losses.len() * self.sigmas.len() * self.margins.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss configuration for one sweep point.
pub fn sweep_loss(kind: LossKind, sigma: f64, margin: f64) -> LossConfig {
    match kind {
        LossKind::Softmax => LossConfig::softmax(sigma),
        LossKind::HaSeparator => LossConfig::haseparator(sigma, margin),
        LossKind::ArcFace => LossConfig::arcface(sigma, margin),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    pub loss: LossKind,
    pub sigma: f64,
    pub margin: f64,
    pub seed: u64,
    pub test_accuracy: Option<f64>,
    pub d_kl: Option<f64>,
    pub d_em: Option<f64>,
    /// Separator loss at the last training step.
    pub c_t: Option<f64>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

impl SweepRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Runs every grid point on up to `jobs` threads. Records come back in grid
/// order; failed runs carry their error message.
pub fn run_sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    jobs: usize,
) -> Result<Vec<SweepRecord>> {
    grid.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} workers: {e}")))?;
    let points = grid.points();
    let records = pool.install(|| {
        points
            .par_iter()
            .map(|&(loss, sigma, margin, seed)| {
                let cfg = ExperimentConfig {
                    loss: sweep_loss(loss, sigma, margin),
                    seed,
                    ..base.clone()
                };
                let start = Instant::now();
                let result = cfg.loss.validate().and_then(|_| run_experiment(&cfg));
                let wall_time_s = start.elapsed().as_secs_f64();
                match result {
                    Ok(o) => SweepRecord {
                        loss,
                        sigma,
                        margin,
                        seed,
                        test_accuracy: Some(o.test.scores.accuracy),
                        d_kl: Some(o.test.scores.d_kl),
                        d_em: Some(o.test.scores.d_em),
                        c_t: Some(o.report.final_separator_loss()),
                        wall_time_s,
                        error: None,
                    },
                    Err(e) => {
                        log::warn!(
                            "sweep run {loss} sigma={sigma} m={margin} seed={seed} failed: {e}"
                        );
                        SweepRecord {
                            loss,
                            sigma,
                            margin,
                            seed,
                            test_accuracy: None,
                            d_kl: None,
                            d_em: None,
                            c_t: None,
                            wall_time_s,
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });
    Ok(records)
}

pub fn write_sweep_csv<W: std::io::Write>(records: &[SweepRecord], out: W) -> std::io::Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "loss",
        "sigma",
        "margin",
        "seed",
        "test_acc",
        "d_kl",
        "d_em",
        "c_t",
        "wall_time_s",
        "error",
    ])?;
    for r in records {
        w.write_record(&[
            r.loss.to_string(),
            r.sigma.to_string(),
            r.margin.to_string(),
            r.seed.to_string(),
            opt(r.test_accuracy),
            opt(r.d_kl),
            opt(r.d_em),
            opt(r.c_t),
            format!("{:.3}", r.wall_time_s),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()
}

pub fn cmd_sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    jobs: usize,
    out: &Path,
) -> Result<Vec<SweepRecord>> {
    prepare_out(out)?;
    let mut settings = base.to_settings();
    let join = |v: Vec<String>| v.join(",");
    settings.set(
        "losses",
        join(grid.losses.iter().map(|l| l.to_string()).collect()),
    );
    settings.set(
        "sigmas",
        join(grid.sigmas.iter().map(|l| l.to_string()).collect()),
    );
    settings.set(
        "margins",
        join(grid.margins.iter().map(|l| l.to_string()).collect()),
    );
    settings.set(
        "seeds",
        join(grid.seeds.iter().map(|l| l.to_string()).collect()),
    );
    settings.set("jobs", jobs);
    write_file(&out.join("config.txt"), settings.to_text())?;
    let records = run_sweep(base, grid, jobs)?;
    let path = out.join("sweep.csv");
    let mut buf = Vec::new();
    write_sweep_csv(&records, &mut buf).map_err(io_err(&path))?;
    write_file(&path, buf)?;
    Ok(records)
}

#[derive(Debug, Parser)]
#[command(
    name = "haseparator",
    version,
    about = "Train and evaluate hyperplane-separator embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model, then evaluate it on the test split.
    Train(CommonArgs),
    /// Train every (loss, sigma, margin, seed) combination.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Evaluate a saved checkpoint on both splits.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// key=value settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// softmax, haseparator or arcface.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub arc_margin_deg: Option<f64>,
    /// blobs, rings or file:<path>.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub max_pairs: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Label column for file datasets.
    #[arg(long)]
    pub label_column: Option<usize>,
    /// Skip one header row in file datasets.
    #[arg(long)]
    pub skip_header: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub losses: Option<String>,
    #[arg(long)]
    pub sigmas: Option<String>,
    #[arg(long)]
    pub margins: Option<String>,
    #[arg(long)]
    pub seeds: Option<String>,
    /// Concurrent runs; defaults to the number of available processors.
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl CommonArgs {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(path) => Settings::from_file(path)?,
            None => Settings::default(),
        };
        macro_rules! flag {
            ($($name:ident),*) => {$(
                if let Some(v) = &self.$name {
                    s.set(stringify!($name), v.clone());
                }
            )*};
        }
        flag!(
            loss,
            sigma,
            margin,
            arc_margin_deg,
            dataset,
            epochs,
            steps,
            batch_size,
            lr,
            seed,
            bins,
            max_pairs,
            hidden,
            embed_dim,
            label_column
        );
        if let Some(out) = &self.out {
            s.set("out", out.display());
        }
        if self.skip_header {
            s.set("skip_header", true);
        }
        Ok(s)
    }
}

impl SweepArgs {
    fn apply(&self, s: &mut Settings) {
        for (key, value) in [
            ("losses", &self.losses),
            ("sigmas", &self.sigmas),
            ("margins", &self.margins),
            ("seeds", &self.seeds),
        ] {
            if let Some(v) = value {
                s.set(key, v);
            }
        }
        if let Some(j) = self.jobs {
            s.set("jobs", j);
        }
    }
}

fn out_dir(s: &Settings) -> PathBuf {
    PathBuf::from(s.get("out").unwrap_or("out"))
}

/// Runs a parsed command line. Progress goes to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let s = args.settings()?;
            s.check_known(&[EXPERIMENT_KEYS, COMMAND_KEYS].concat())?;
            let cfg = ExperimentConfig::from_settings(&s)?;
            let out = out_dir(&s);
            let o = cmd_train(&cfg, &out)?;
            println!(
                "{} sigma={} margin={}: test accuracy {:.4}, D_KL {:.4}, D_EM {:.3} deg, final C_t {:.5} ({:.1}s) -> {}",
                cfg.loss.kind,
                cfg.loss.sigma,
                cfg.loss.margin,
                o.test.scores.accuracy,
                o.test.scores.d_kl,
                o.test.scores.d_em,
                o.report.final_separator_loss(),
                o.wall_time_s,
                out.display()
            );
        }
        Command::Sweep { common, sweep } => {
            let mut s = common.settings()?;
            sweep.apply(&mut s);
            s.check_known(&[EXPERIMENT_KEYS, SWEEP_KEYS, COMMAND_KEYS].concat())?;
            let base = ExperimentConfig::from_settings(&s)?;
            let mut grid = SweepGrid::from_settings(&s)?;
            for w in grid.dedup() {
                log::warn!("{w}");
                eprintln!("warning: {w}");
            }
            let jobs = match s.take::<usize>("jobs")? {
                Some(j) => j,
                None => std::thread::available_parallelism().map_or(1, |n| n.get()),
            };
            let out = out_dir(&s);
            let records = cmd_sweep(&base, &grid, jobs, &out)?;
            let failed = records.iter().filter(|r| !r.is_ok()).count();
            println!(
                "{} runs ({} failed) -> {}",
                records.len(),
                failed,
                out.join("sweep.csv").display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let s = common.settings()?;
            s.check_known(&[EXPERIMENT_KEYS, COMMAND_KEYS].concat())?;
            let cfg = ExperimentConfig::from_settings(&s)?;
            let out = out_dir(&s);
            for (split, e) in cmd_eval(&cfg, &checkpoint, &out)? {
                println!(
                    "{split}: accuracy {:.4}, D_KL {:.4}, D_EM {:.3} deg",
                    e.scores.accuracy, e.scores.d_kl, e.scores.d_em
                );
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_parse_comments_and_dashes() {
        let s = Settings::parse("# comment\nloss = arcface\n\nbatch-size=64 # trailing\n").unwrap();
        assert_eq!(s.get("loss"), Some("arcface"));
        assert_eq!(s.get("batch_size"), Some("64"));
        assert!(Settings::parse("no equals sign").is_err());
    }

    #[test]
    fn experiment_config_round_trips_through_settings() {
        let cfg = ExperimentConfig {
            dataset: DatasetSource::File(PathBuf::from("/tmp/x.csv")),
            epochs: Some(3),
            lr_drops: Some(vec![10, 20]),
            hidden: vec![8],
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_settings(&cfg.to_settings()).unwrap();
        assert_eq!(back.dataset, cfg.dataset);
        assert_eq!(back.epochs, Some(3));
        assert_eq!(back.lr_drops, Some(vec![10, 20]));
        assert_eq!(back.hidden, vec![8]);
        assert!((back.loss.arc_margin - cfg.loss.arc_margin).abs() < 1e-15);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in ["loss=cosface", "sigma=abc", "dataset=mnist", "margin=1.5"] {
            let s = Settings::parse(text).unwrap();
            assert!(
                matches!(
                    ExperimentConfig::from_settings(&s),
                    Err(Error::InvalidConfig(_))
                ),
                "{text}"
            );
        }
        let s = Settings::parse("colour=blue").unwrap();
        assert!(s.check_known(EXPERIMENT_KEYS).is_err());
    }

    #[test]
    fn grid_dedup_and_order() {
        let s = Settings::parse(
            "losses=haseparator,arcface,haseparator\nsigmas=1,2,2\nmargins=0.5\nseeds=0,1",
        )
        .unwrap();
        let mut g = SweepGrid::from_settings(&s).unwrap();
        let warnings = g.dedup();
        assert_eq!(warnings.len(), 2);
        assert_eq!(g.len(), 2 * 2 * 2);
        let pts = g.points();
        assert_eq!(pts[0], (LossKind::HaSeparator, 1.0, 0.5, 0));
        assert_eq!(pts[1], (LossKind::HaSeparator, 1.0, 0.5, 1));
        assert_eq!(pts[4].0, LossKind::ArcFace);
    }

    #[test]
    fn epochs_override_steps() {
        let cfg = ExperimentConfig {
            epochs: Some(2),
            batch_size: 30,
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.train_config(100).steps, 8);
    }
}
