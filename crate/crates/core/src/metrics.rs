//! Angular discrimination metrics for learned embeddings.
//!
//! Unordered pairs of embeddings are split into positive (same class) and
//! negative (different class) pairs. Their angles are binned over
//! [0°, 180°], and the two histograms are compared with a KL divergence and
//! a 1-D earth mover's distance measured in degrees.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_labels, Error, Result};
use crate::tensor::{dot, l2_normalize_rows, Matrix, DEFAULT_EPSILON};

pub const DEFAULT_BINS: usize = 180;
pub const DEFAULT_MAX_PAIRS: usize = 200_000;
pub const DEFAULT_KL_EPSILON: f64 = 1e-10;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairAngles {
    /// Degrees, in enumeration order `(i, j)` with `i < j`.
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    /// Embeddings with no direction, left out of every pair.
    pub skipped_zero: usize,
}

/// Angle in degrees between two unit (or zero) vectors.
#[inline]
fn angle_deg(u: &[f64], v: &[f64]) -> f64 {
    dot(u, v).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angles of positive and negative embedding pairs.
///
/// When a kind has more than `max_pairs_per_kind` pairs, a seeded uniform
/// sample without replacement is kept (still in enumeration order). Zero
/// embeddings are skipped and counted.
pub fn pair_angles(
    embeddings: &Matrix,
    labels: &[usize],
    max_pairs_per_kind: usize,
    seed: u64,
) -> Result<PairAngles> {
    if labels.len() != embeddings.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.rows()
        )));
    }
    if embeddings.rows() < 2 {
        return Err(Error::input("pair angles need at least two embeddings"));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    check_labels(labels, num_classes)?;

    let unit = l2_normalize_rows(embeddings, DEFAULT_EPSILON)?;
    let kept: Vec<usize> = (0..unit.rows())
        .filter(|&i| unit.row(i).iter().any(|&v| v != 0.0))
        .collect();
    let skipped_zero = unit.rows() - kept.len();
    if skipped_zero > 0 {
        log::warn!("{skipped_zero} zero embeddings excluded from pair angles");
    }

    let mut class_counts = vec![0u64; num_classes];
    for &i in &kept {
        class_counts[labels[i]] += 1;
    }
    let k = kept.len() as u64;
    let total_pairs = k * k.saturating_sub(1) / 2;
    let pos_pairs: u64 = class_counts
        .iter()
        .map(|&n| n * n.saturating_sub(1) / 2)
        .sum();
    let neg_pairs = total_pairs - pos_pairs;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selection = |count: u64| -> Option<Vec<u64>> {
        if count as usize <= max_pairs_per_kind {
            return None;
        }
        let mut picked: Vec<u64> = index::sample(&mut rng, count as usize, max_pairs_per_kind)
            .into_iter()
            .map(|i| i as u64)
            .collect();
        picked.sort_unstable();
        Some(picked)
    };
    let pos_pick = selection(pos_pairs);
    let neg_pick = selection(neg_pairs);

    let cap = |count: u64| (count as usize).min(max_pairs_per_kind);
    let mut out = PairAngles {
        positive: Vec::with_capacity(cap(pos_pairs)),
        negative: Vec::with_capacity(cap(neg_pairs)),
        skipped_zero,
    };
    let (mut pos_seen, mut neg_seen) = (0u64, 0u64);
    let (mut pos_cursor, mut neg_cursor) = (0usize, 0usize);
    for (a, &i) in kept.iter().enumerate() {
        for &j in &kept[a + 1..] {
            let same = labels[i] == labels[j];
            let (seen, cursor, pick, dest) = if same {
                (&mut pos_seen, &mut pos_cursor, &pos_pick, &mut out.positive)
            } else {
                (&mut neg_seen, &mut neg_cursor, &neg_pick, &mut out.negative)
            };
            let take = match pick {
                None => true,
                Some(p) => {
                    if p.get(*cursor) == Some(seen) {
                        *cursor += 1;
                        true
                    } else {
                        false
                    }
                }
            };
            if take {
                dest.push(angle_deg(unit.row(i), unit.row(j)));
            }
            *seen += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngleHistograms {
    /// `num_bins + 1` uniformly spaced edges from 0 to 180 degrees.
    pub bin_edges: Vec<f64>,
    pub pos_counts: Vec<u64>,
    pub neg_counts: Vec<u64>,
    pub pos_total: u64,
    pub neg_total: u64,
}

fn bin_index(angle: f64, num_bins: usize) -> Result<usize> {
    if !(0.0..=180.0).contains(&angle) {
        return Err(Error::input(format!("angle {angle} outside [0, 180]")));
    }
    Ok(((angle / 180.0 * num_bins as f64).floor() as usize).min(num_bins - 1))
}

/// Bins both angle lists over [0°, 180°]. Bins are right-open except the last,
/// which includes 180°.
pub fn build_histograms(
    pos_angles: &[f64],
    neg_angles: &[f64],
    num_bins: usize,
) -> Result<AngleHistograms> {
    if num_bins < 2 {
        return Err(Error::input(format!(
            "need at least 2 bins, got {num_bins}"
        )));
    }
    if pos_angles.is_empty() || neg_angles.is_empty() {
        return Err(Error::input(
            "both positive and negative angle lists must be non-empty",
        ));
    }
    let mut pos_counts = vec![0u64; num_bins];
    let mut neg_counts = vec![0u64; num_bins];
    for &a in pos_angles {
        pos_counts[bin_index(a, num_bins)?] += 1;
    }
    for &a in neg_angles {
        neg_counts[bin_index(a, num_bins)?] += 1;
    }
    let width = 180.0 / num_bins as f64;
    Ok(AngleHistograms {
        bin_edges: (0..=num_bins).map(|b| b as f64 * width).collect(),
        pos_counts,
        neg_counts,
        pos_total: pos_angles.len() as u64,
        neg_total: neg_angles.len() as u64,
    })
}

impl AngleHistograms {
    /// Builds histograms directly from counts on uniform bins over [0°, 180°].
    pub fn from_counts(pos_counts: Vec<u64>, neg_counts: Vec<u64>) -> Result<Self> {
        let n = pos_counts.len();
        if n < 2 || neg_counts.len() != n {
            return Err(Error::input(format!(
                "need two equal-length count vectors with >= 2 bins, got {} and {}",
                n,
                neg_counts.len()
            )));
        }
        let width = 180.0 / n as f64;
        Ok(AngleHistograms {
            bin_edges: (0..=n).map(|b| b as f64 * width).collect(),
            pos_total: pos_counts.iter().sum(),
            neg_total: neg_counts.iter().sum(),
            pos_counts,
            neg_counts,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.pos_counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        180.0 / self.num_bins() as f64
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        self.bin_edges
            .windows(2)
            .map(|e| 0.5 * (e[0] + e[1]))
            .collect()
    }

    fn check_totals(&self) -> Result<()> {
        if self.pos_total == 0 || self.neg_total == 0 {
            Err(Error::input("both histograms need a positive total"))
        } else {
            Ok(())
        }
    }

    /// Writes `bin_start_deg,bin_end_deg,pos_count,neg_count` rows with a
    /// header.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_start_deg", "bin_end_deg", "pos_count", "neg_count"])?;
        for b in 0..self.num_bins() {
            w.write_record(&[
                self.bin_edges[b].to_string(),
                self.bin_edges[b + 1].to_string(),
                self.pos_counts[b].to_string(),
                self.neg_counts[b].to_string(),
            ])?;
        }
        w.flush()
    }
}

fn normalized(counts: &[u64], total: u64) -> Vec<f64> {
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// `D_KL(pos ‖ neg)` in nats. `epsilon` is added to every bin of both
/// normalized histograms, which are then renormalized.
pub fn kl_divergence(h: &AngleHistograms, epsilon: f64) -> Result<f64> {
    h.check_totals()?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::input(format!(
            "smoothing must be finite and >= 0, got {epsilon}"
        )));
    }
    let smooth = |counts: &[u64], total: u64| {
        let p: Vec<f64> = normalized(counts, total)
            .into_iter()
            .map(|v| v + epsilon)
            .collect();
        let s: f64 = p.iter().sum();
        p.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let p = smooth(&h.pos_counts, h.pos_total);
    let q = smooth(&h.neg_counts, h.neg_total);
    let mut d = 0.0;
    for (&pb, &qb) in p.iter().zip(&q) {
        if pb > 0.0 {
            if qb == 0.0 {
                return Ok(f64::INFINITY);
            }
            d += pb * (pb / qb).ln();
        }
    }
    Ok(d.max(0.0))
}

/// Wasserstein-1 distance in degrees between the normalized histograms, with
/// mass placed at bin centers.
pub fn emd_1d(h: &AngleHistograms) -> Result<f64> {
    h.check_totals()?;
    let p = normalized(&h.pos_counts, h.pos_total);
    let q = normalized(&h.neg_counts, h.neg_total);
    let mut cdf_gap = 0.0;
    let mut sum = 0.0;
    for (pb, qb) in p.iter().zip(&q).take(h.num_bins() - 1) {
        cdf_gap += pb - qb;
        sum += cdf_gap.abs();
    }
    Ok(h.bin_width() * sum)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() || labels.is_empty() {
        return Err(Error::shape(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    check_labels(labels, logits.cols())?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax(logits.row(i)) == label)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationScores {
    pub d_kl: f64,
    /// Degrees.
    pub d_em: f64,
    pub accuracy: f64,
}

/// Everything computed when evaluating one set of embeddings.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub scores: DiscriminationScores,
    pub histograms: AngleHistograms,
    pub skipped_zero: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub num_bins: usize,
    pub max_pairs_per_kind: usize,
    pub kl_epsilon: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            num_bins: DEFAULT_BINS,
            max_pairs_per_kind: DEFAULT_MAX_PAIRS,
            kl_epsilon: DEFAULT_KL_EPSILON,
            seed: 0,
        }
    }
}

/// Pair angles, histograms, D_KL, D_EM and accuracy in one pass.
pub fn evaluate(
    embeddings: &Matrix,
    logits: &Matrix,
    labels: &[usize],
    settings: &EvalSettings,
) -> Result<Evaluation> {
    let angles = pair_angles(
        embeddings,
        labels,
        settings.max_pairs_per_kind,
        settings.seed,
    )?;
    let histograms = build_histograms(&angles.positive, &angles.negative, settings.num_bins)?;
    Ok(Evaluation {
        scores: DiscriminationScores {
            d_kl: kl_divergence(&histograms, settings.kl_epsilon)?,
            d_em: emd_1d(&histograms)?,
            accuracy: accuracy(logits, labels)?,
        },
        histograms,
        skipped_zero: angles.skipped_zero,
    })
}

/// Writes one embedding per line after an `n_dims` header line:
/// `v_0,...,v_{n-1},label`.
pub fn write_embeddings(
    path: impl AsRef<Path>,
    embeddings: &Matrix,
    labels: &[usize],
) -> Result<()> {
    let path = path.as_ref();
    let mut text = format!("{}\n", embeddings.cols());
    for (i, label) in labels.iter().enumerate() {
        for v in embeddings.row(i) {
            text.push_str(&v.to_string());
            text.push(',');
        }
        text.push_str(&label.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pair_angle_examples() {
        let e = Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let a = pair_angles(&e, &[0, 0, 1, 2], 100, 0).unwrap();
        assert_eq!(a.positive, vec![0.0]);
        // (0,2) (0,3) (1,2) (1,3) (2,3)
        assert_eq!(a.negative.len(), 5);
        assert!((a.negative[0] - 90.0).abs() < 1e-12);
        assert!((a.negative[1] - 180.0).abs() < 1e-12);
    }

    #[test]
    fn zero_embeddings_are_skipped() {
        let e = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let a = pair_angles(&e, &[0, 0, 0, 1], 100, 0).unwrap();
        assert_eq!(a.skipped_zero, 1);
        assert_eq!(a.positive.len(), 1);
        assert_eq!(a.negative.len(), 2);
    }

    #[test]
    fn sampling_caps_and_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = Matrix::from_fn(60, 3, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let a = pair_angles(&e, &labels, 50, 7).unwrap();
        assert_eq!((a.positive.len(), a.negative.len()), (50, 50));
        assert_eq!(a, pair_angles(&e, &labels, 50, 7).unwrap());
        assert_ne!(a, pair_angles(&e, &labels, 50, 8).unwrap());
        let full = pair_angles(&e, &labels, usize::MAX, 7).unwrap();
        // every sampled angle is one of the full enumeration
        assert!(a.positive.iter().all(|x| full.positive.contains(x)));
    }

    #[test]
    fn histogram_examples() {
        let h = build_histograms(&[0.0, 0.0], &[180.0], 180).unwrap();
        assert_eq!(h.pos_counts[0], 2);
        assert_eq!(h.neg_counts[179], 1);
        assert_eq!(h.bin_edges.len(), 181);
        assert!(build_histograms(&[], &[1.0], 10).is_err());
        assert!(build_histograms(&[1.0], &[1.0], 1).is_err());
        assert!(build_histograms(&[181.0], &[1.0], 10).is_err());
    }

    #[test]
    fn uniform_angles_fill_bins_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let angles: Vec<f64> = (0..18_000).map(|_| rng.random_range(0.0..180.0)).collect();
        let h = build_histograms(&angles, &angles, 18).unwrap();
        let expected = 1000.0;
        let chi2: f64 = h
            .pos_counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 17 degrees of freedom, 0.999 quantile is about 40.8
        assert!(chi2 < 40.8, "chi-square {chi2}");
    }

    #[test]
    fn kl_examples() {
        let h = AngleHistograms::from_counts(vec![3, 1, 0], vec![3, 1, 0]).unwrap();
        assert_eq!(kl_divergence(&h, 1e-10).unwrap(), 0.0);

        let mut pos = vec![0; 180];
        let mut neg = vec![0; 180];
        pos[0] = 5;
        neg[90] = 7;
        let h = AngleHistograms::from_counts(pos, neg).unwrap();
        let eps: f64 = 1e-10;
        let z = 1.0 + 180.0 * eps;
        let (big, small) = ((1.0 + eps) / z, eps / z);
        let expected = big * (big / small).ln() + small * (small / big).ln();
        let d = kl_divergence(&h, eps).unwrap();
        assert!((d - expected).abs() < 1e-9 * expected, "{d} vs {expected}");
        assert!(d > 20.0);
    }

    #[test]
    fn emd_examples() {
        let h = AngleHistograms::from_counts(vec![1, 2, 3], vec![2, 4, 6]).unwrap();
        assert_eq!(emd_1d(&h).unwrap(), 0.0);
        let mut pos = vec![0; 180];
        let mut neg = vec![0; 180];
        pos[0] = 10;
        neg[90] = 3;
        let h = AngleHistograms::from_counts(pos, neg).unwrap();
        assert!((emd_1d(&h).unwrap() - 90.0).abs() < 1e-9);
        assert!(emd_1d(&AngleHistograms::from_counts(vec![0, 0], vec![1, 0]).unwrap()).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let onehot = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(accuracy(&onehot, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&onehot, &[1, 0]).unwrap(), 0.0);
        let flat = Matrix::from_rows(&[[0.3, 0.3, 0.3], [1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(accuracy(&flat, &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn histogram_csv_has_header_and_rows() {
        let h = build_histograms(&[10.0], &[100.0], 4).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "bin_start_deg,bin_end_deg,pos_count,neg_count");
        assert_eq!(lines[1], "0,45,1,0");
        assert_eq!(lines[3], "90,135,0,1");
        assert_eq!(lines.len(), 5);
    }
}
