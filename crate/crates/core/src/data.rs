//! Seeded synthetic datasets and a comma-separated loader.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_labels, Error, Result};
use crate::tensor::Matrix;

/// Variances at or below this are treated as constant features.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    /// Not yet split, e.g. straight out of [`load_delimited`].
    Full,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::input("a dataset needs at least one sample"));
        }
        if labels.len() != features.rows() {
            return Err(Error::shape(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        check_labels(&labels, num_classes)?;
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split,
        }
    }

    /// Seeded 80/20 split. The test side always gets at least one sample and
    /// the train side keeps the rest.
    pub fn train_test_split(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let m = self.len();
        if m < 2 {
            return Err(Error::input("need at least two samples to split"));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (m / 5).max(1);
        let (test_idx, train_idx) = order.split_at(n_test);
        Ok((
            self.subset(train_idx, Split::Train),
            self.subset(test_idx, Split::Test),
        ))
    }
}

/// Class centers for [`gaussian_blobs`]: evenly spaced on a circle in 2-D,
/// seeded random directions otherwise.
pub fn blob_centers(num_classes: usize, dim: usize, radius: f64, rng: &mut impl Rng) -> Matrix {
    if dim == 2 {
        return Matrix::from_fn(num_classes, 2, |c, k| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
            radius * if k == 0 { angle.cos() } else { angle.sin() }
        });
    }
    let mut centers = Matrix::zeros(num_classes, dim);
    for c in 0..num_classes {
        let row = centers.row_mut(c);
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let n = crate::tensor::norm(row);
            if n > 1e-6 {
                row.iter_mut().for_each(|v| *v *= radius / n);
                break;
            }
        }
    }
    centers
}

/// Isotropic Gaussian clusters, one per class, split 80/20.
pub fn gaussian_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    center_radius: f64,
    stddev: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if num_classes < 2 || per_class < 2 || dim == 0 {
        return Err(Error::config(format!(
            "blobs need >= 2 classes, >= 2 samples per class and dim >= 1 \
             (got {num_classes}, {per_class}, {dim})"
        )));
    }
    if !(stddev >= 0.0 && center_radius.is_finite() && stddev.is_finite()) {
        return Err(Error::config(
            "blob radius and stddev must be finite, stddev >= 0",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = blob_centers(num_classes, dim, center_radius, &mut rng);
    let mut features = Matrix::zeros(num_classes * per_class, dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        for s in 0..per_class {
            let row = features.row_mut(c * per_class + s);
            for (v, &center) in row.iter_mut().zip(centers.row(c)) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *v = center + stddev * noise;
            }
            labels.push(c);
        }
    }
    let full = Dataset::new(features, labels, num_classes, Split::Full)?;
    full.train_test_split(rng.random())
}

/// Two concentric rings in the plane, class 0 at radius 1 and class 1 at
/// radius 2, with Gaussian noise on the radius.
pub fn two_rings(per_class: usize, noise: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if per_class < 2 {
        return Err(Error::config(format!(
            "rings need >= 2 samples per class, got {per_class}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config("ring noise must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Matrix::zeros(2 * per_class, 2);
    let mut labels = Vec::with_capacity(2 * per_class);
    for c in 0..2 {
        for s in 0..per_class {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let jitter: f64 = StandardNormal.sample(&mut rng);
            let r = (c + 1) as f64 + noise * jitter;
            let row = features.row_mut(c * per_class + s);
            row[0] = r * angle.cos();
            row[1] = r * angle.sin();
            labels.push(c);
        }
    }
    let full = Dataset::new(features, labels, 2, Split::Full)?;
    full.train_test_split(rng.random())
}

/// Standardizes every column to mean 0 and variance 1 (population variance).
/// Constant columns become all zeros.
pub fn standardize_columns(m: &mut Matrix) {
    let rows = m.rows() as f64;
    for j in 0..m.cols() {
        let mean = (0..m.rows()).map(|i| m.get(i, j)).sum::<f64>() / rows;
        let var = (0..m.rows())
            .map(|i| (m.get(i, j) - mean).powi(2))
            .sum::<f64>()
            / rows;
        let inv = if var > VARIANCE_FLOOR {
            1.0 / var.sqrt()
        } else {
            0.0
        };
        for i in 0..m.rows() {
            let v = m.get(i, j);
            m.set(i, j, (v - mean) * inv);
        }
    }
}

/// Reads raw numeric rows without standardizing. Labels must be non-negative
/// integers; the class count is `max label + 1`.
pub fn read_delimited(path: &Path, label_column: usize, skip_header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(skip_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => Error::Delimited {
                path: path.to_path_buf(),
                message: format!("{other:?}"),
            },
        })?;

    let mut width = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Delimited {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::RaggedRow {
                path: path.to_path_buf(),
                line,
                expected,
                found: record.len(),
            });
        }
        if label_column >= expected {
            return Err(Error::config(format!(
                "label column {label_column} out of range for {expected} columns"
            )));
        }
        for (column, cell) in record.iter().enumerate() {
            let non_numeric = || Error::NonNumeric {
                path: path.to_path_buf(),
                line,
                column,
                value: cell.to_string(),
            };
            if column == label_column {
                labels.push(cell.parse::<usize>().map_err(|_| non_numeric())?);
            } else {
                let v: f64 = cell.parse().map_err(|_| non_numeric())?;
                if !v.is_finite() {
                    return Err(non_numeric());
                }
                features.push(v);
            }
        }
    }
    let width =
        width.ok_or_else(|| Error::input(format!("{} has no data rows", path.display())))?;
    let rows = labels.len();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let features = Matrix::new(rows, width - 1, features)?;
    Dataset::new(features, labels, num_classes, Split::Full)
}

/// Loads a comma-separated file and standardizes every feature column.
pub fn load_delimited(
    path: impl AsRef<Path>,
    label_column: usize,
    skip_header: bool,
) -> Result<Dataset> {
    let mut ds = read_delimited(path.as_ref(), label_column, skip_header)?;
    standardize_columns(&mut ds.features);
    Ok(ds)
}

/// Writes features and labels as comma-separated rows, label in the last
/// column, no header.
pub fn write_delimited(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Delimited {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    };
    let mut w = csv::WriterBuilder::new().from_path(path).map_err(io)?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        row.push(ds.labels[i].to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
