//! Cosine-classifier losses: plain softmax cross-entropy, the hyperplane
//! separator, and the additive angular margin baseline.
//!
//! All three share the same head. Embeddings `E` (B x N) are normalized per
//! row and class weights `W` (N x C) per column, and the logits are
//! `O = sigma * Ê Ŵ`. The separator adds a hinge penalty on the projections of
//! each `ê_i` onto the unit normals `(ŵ_{L_i} - ŵ_j) / ‖ŵ_{L_i} - ŵ_j‖` of the
//! hyperplanes that bound its target class.
//!
//! Gradients are hand-derived. Every loss returns `∂C_all/∂E` and `∂C_all/∂W`
//! with respect to the *unnormalized* inputs.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_labels, Error, Result};
use crate::tensor::{
    batched_contract, broadcast_weights, dot, gather_target_columns, l2_normalize_columns,
    l2_normalize_rows, matmul, norm, replicate_classes, Matrix, Tensor3, DEFAULT_EPSILON,
};

/// Cosines are kept this far inside [-1, 1] before `acos`.
pub const ARCCOS_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Softmax,
    #[serde(rename = "haseparator")]
    HaSeparator,
    #[serde(rename = "arcface")]
    ArcFace,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Softmax, LossKind::HaSeparator, LossKind::ArcFace];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::HaSeparator => "haseparator",
            LossKind::ArcFace => "arcface",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "softmax" => Ok(LossKind::Softmax),
            "haseparator" => Ok(LossKind::HaSeparator),
            "arcface" => Ok(LossKind::ArcFace),
            other => Err(Error::config(format!(
                "unknown loss {other:?} (expected softmax, haseparator or arcface)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Feature scaler applied to the cosine logits.
    pub sigma: f64,
    /// Hinge threshold on hyperplane projections, in (0, 1].
    pub margin: f64,
    /// Additive angular margin in radians, used by [`LossKind::ArcFace`] only.
    pub arc_margin: f64,
}

impl LossConfig {
    pub fn softmax(sigma: f64) -> Self {
        LossConfig {
            kind: LossKind::Softmax,
            sigma,
            margin: 1.0,
            arc_margin: 0.0,
        }
    }

    pub fn haseparator(sigma: f64, margin: f64) -> Self {
        LossConfig {
            kind: LossKind::HaSeparator,
            sigma,
            margin,
            arc_margin: 0.0,
        }
    }

    pub fn arcface(sigma: f64, arc_margin: f64) -> Self {
        LossConfig {
            kind: LossKind::ArcFace,
            sigma,
            margin: 1.0,
            arc_margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        match self.kind {
            LossKind::HaSeparator if !(self.margin > 0.0 && self.margin <= 1.0) => Err(
                Error::config(format!("margin must lie in (0, 1], got {}", self.margin)),
            ),
            LossKind::ArcFace if !(self.arc_margin >= 0.0 && self.arc_margin < FRAC_PI_2) => {
                Err(Error::config(format!(
                    "arc margin must lie in [0, pi/2), got {}",
                    self.arc_margin
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    /// `ce_loss + separator_loss`.
    pub total_loss: f64,
    pub ce_loss: f64,
    /// Zero for softmax and ArcFace. Bounded by `(margin + 1) * (C - 1)`, the
    /// worst case being every projection at -1.
    pub separator_loss: f64,
    /// Plain scaled cosine logits `sigma * Ê Ŵ`, without any angular margin.
    /// These are what predictions are made from.
    pub logits: Matrix,
    /// Hyperplane projections, present for the separator loss only.
    pub projections: Option<Matrix>,
    pub grad_embeddings: Matrix,
    pub grad_weights: Matrix,
}

fn check_head_shapes(e: &Matrix, w: &Matrix, labels: &[usize]) -> Result<()> {
    if e.cols() != w.rows() {
        return Err(Error::shape(format!(
            "embeddings are {}x{} but class weights are {}x{}",
            e.rows(),
            e.cols(),
            w.rows(),
            w.cols()
        )));
    }
    if e.rows() == 0 {
        return Err(Error::shape("empty batch"));
    }
    if labels.len() != e.rows() {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            e.rows()
        )));
    }
    check_labels(labels, w.cols())
}

/// `sigma * Ê Ŵ`.
pub fn scaled_cosine_logits(e: &Matrix, w: &Matrix, sigma: f64) -> Result<Matrix> {
    if e.cols() != w.rows() {
        return Err(Error::shape(format!(
            "embeddings have {} columns, class weights {} rows",
            e.cols(),
            w.rows()
        )));
    }
    let e_hat = l2_normalize_rows(e, DEFAULT_EPSILON)?;
    let w_hat = l2_normalize_columns(w, DEFAULT_EPSILON)?;
    Ok(matmul(&e_hat, &w_hat)?.scale(sigma))
}

/// Mean cross-entropy of `softmax(logits)` against `labels`, and its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.shape();
    if labels.len() != b || b == 0 {
        return Err(Error::shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            b
        )));
    }
    check_labels(labels, c)?;
    let inv_b = 1.0 / b as f64;
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = grad.row_mut(i);
        let mut sum = 0.0;
        for (gj, &o) in g.iter_mut().zip(row) {
            *gj = (o - max).exp();
            sum += *gj;
        }
        loss += sum.ln() - (row[label] - max);
        for gj in g.iter_mut() {
            *gj = *gj / sum * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Unit normals of the hyperplanes around each sample's target class.
///
/// Slice `i`, column `j` holds `(ŵ_{L_i} - ŵ_j) / ‖ŵ_{L_i} - ŵ_j‖`, pointing
/// from class `j` towards the target. Column `L_i` is zero.
pub fn hyperplane_normals(w_hat: &Matrix, labels: &[usize]) -> Result<Tensor3> {
    raw_hyperplanes(w_hat, labels)?.l2_normalize_middle(DEFAULT_EPSILON)
}

fn raw_hyperplanes(w_hat: &Matrix, labels: &[usize]) -> Result<Tensor3> {
    let targets = replicate_classes(&gather_target_columns(w_hat, labels)?, w_hat.cols())?;
    let weights = broadcast_weights(w_hat, labels.len())?;
    targets.sub(&weights)
}

/// `P[i][j] = ⟨ê_i, ĥ_ij⟩`.
pub fn hyperplane_projections(e_hat: &Matrix, h_hat: &Tensor3) -> Result<Matrix> {
    batched_contract(e_hat, h_hat)
}

/// Hinge `m - min(p, m)` per projection, with target columns masked to zero.
/// Returns the cost matrix and its batch mean of row sums.
pub fn hinge_cost(p: &Matrix, margin: f64, labels: &[usize]) -> Result<(Matrix, f64)> {
    if labels.len() != p.rows() || p.rows() == 0 {
        return Err(Error::shape(format!(
            "{} labels for {} projection rows",
            labels.len(),
            p.rows()
        )));
    }
    check_labels(labels, p.cols())?;
    let mut costs = Matrix::zeros(p.rows(), p.cols());
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        for j in 0..p.cols() {
            if j == label {
                continue;
            }
            let c = margin - p.get(i, j).min(margin);
            costs.set(i, j, c);
            total += c;
        }
    }
    Ok((costs, total / p.rows() as f64))
}

/// Shared forward state of the cosine head.
struct Head {
    e_hat: Matrix,
    w_hat: Matrix,
    cosines: Matrix,
}

impl Head {
    fn new(e: &Matrix, w: &Matrix) -> Result<Self> {
        let e_hat = l2_normalize_rows(e, DEFAULT_EPSILON)?;
        let w_hat = l2_normalize_columns(w, DEFAULT_EPSILON)?;
        let cosines = matmul(&e_hat, &w_hat)?;
        Ok(Head {
            e_hat,
            w_hat,
            cosines,
        })
    }

    /// Gradients w.r.t. `Ê` and `Ŵ` given the gradient w.r.t. `Ê Ŵ`.
    fn backward(&self, grad_cos: &Matrix) -> Result<(Matrix, Matrix)> {
        let grad_e_hat = matmul(grad_cos, &self.w_hat.transpose())?;
        let grad_w_hat = matmul(&self.e_hat.transpose(), grad_cos)?;
        Ok((grad_e_hat, grad_w_hat))
    }
}

/// Pulls a gradient back through `x -> x / ‖x‖` applied per row. Rows at or
/// below the normalization threshold get zero gradient.
fn normalize_rows_backward(x: &Matrix, x_hat: &Matrix, grad_hat: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let n = norm(x.row(i));
        if n <= DEFAULT_EPSILON {
            continue;
        }
        let u = x_hat.row(i);
        let g = grad_hat.row(i);
        let radial = dot(u, g);
        for ((o, &gk), &uk) in out.row_mut(i).iter_mut().zip(g).zip(u) {
            *o = (gk - uk * radial) / n;
        }
    }
    out
}

fn normalize_columns_backward(x: &Matrix, x_hat: &Matrix, grad_hat: &Matrix) -> Matrix {
    normalize_rows_backward(&x.transpose(), &x_hat.transpose(), &grad_hat.transpose()).transpose()
}

/// Plain softmax cross-entropy on the scaled cosine logits.
pub fn softmax_loss(
    e: &Matrix,
    w: &Matrix,
    labels: &[usize],
    config: &LossConfig,
) -> Result<LossResult> {
    config.validate()?;
    check_head_shapes(e, w, labels)?;
    let head = Head::new(e, w)?;
    let logits = head.cosines.scale(config.sigma);
    let (ce, grad_logits) = softmax_cross_entropy(&logits, labels)?;
    let (ge, gw) = head.backward(&grad_logits.scale(config.sigma))?;
    Ok(LossResult {
        total_loss: ce,
        ce_loss: ce,
        separator_loss: 0.0,
        logits,
        projections: None,
        grad_embeddings: normalize_rows_backward(e, &head.e_hat, &ge),
        grad_weights: normalize_columns_backward(w, &head.w_hat, &gw),
    })
}

/// Cross-entropy on the scaled cosine logits plus the mean hyperplane hinge
/// cost.
pub fn haseparator_loss(
    e: &Matrix,
    w: &Matrix,
    labels: &[usize],
    config: &LossConfig,
) -> Result<LossResult> {
    config.validate()?;
    if !(config.margin > 0.0 && config.margin <= 1.0) {
        return Err(Error::config(format!(
            "margin must lie in (0, 1], got {}",
            config.margin
        )));
    }
    if w.cols() < 2 {
        return Err(Error::config("the separator needs at least two classes"));
    }
    check_head_shapes(e, w, labels)?;
    let head = Head::new(e, w)?;
    let logits = head.cosines.scale(config.sigma);
    let (ce, grad_logits) = softmax_cross_entropy(&logits, labels)?;
    let (mut ge, mut gw) = head.backward(&grad_logits.scale(config.sigma))?;

    let h = raw_hyperplanes(&head.w_hat, labels)?;
    let h_hat = h.l2_normalize_middle(DEFAULT_EPSILON)?;
    let p = hyperplane_projections(&head.e_hat, &h_hat)?;
    let (_, separator) = hinge_cost(&p, config.margin, labels)?;

    // dJ/dp is -1 strictly below the margin and 0 at or above it.
    let (b, n, c) = h.shape();
    let step = -1.0 / b as f64;
    let mut grad_h = vec![0.0; n];
    for (i, &label) in labels.iter().enumerate() {
        for j in 0..c {
            let pij = p.get(i, j);
            if j == label || pij >= config.margin {
                continue;
            }
            let r = (0..n).map(|k| h.get(i, k, j).powi(2)).sum::<f64>().sqrt();
            if r <= DEFAULT_EPSILON {
                continue;
            }
            let e_row = head.e_hat.row(i);
            for k in 0..n {
                let hk = h_hat.get(i, k, j);
                ge.row_mut(i)[k] += step * hk;
                grad_h[k] = step * (e_row[k] - pij * hk) / r;
            }
            for (k, &g) in grad_h.iter().enumerate() {
                let target = gw.get(k, label);
                gw.set(k, label, target + g);
                let other = gw.get(k, j);
                gw.set(k, j, other - g);
            }
        }
    }

    Ok(LossResult {
        total_loss: ce + separator,
        ce_loss: ce,
        separator_loss: separator,
        logits,
        projections: Some(p),
        grad_embeddings: normalize_rows_backward(e, &head.e_hat, &ge),
        grad_weights: normalize_columns_backward(w, &head.w_hat, &gw),
    })
}

/// Target logit `sigma * cos(θ + arc_margin)` and its derivative with respect
/// to `cos θ`.
fn margin_target(cosine: f64, arc_margin: f64, sigma: f64) -> (f64, f64) {
    let c = cosine.clamp(-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP);
    let theta = c.acos();
    let limit = PI - arc_margin;
    if theta >= limit {
        return (sigma * (limit + arc_margin).cos(), 0.0);
    }
    let logit = sigma * (theta + arc_margin).cos();
    let slope = if c != cosine {
        0.0
    } else {
        sigma * (theta + arc_margin).sin() / theta.sin()
    };
    (logit, slope)
}

/// Cross-entropy with an additive angular margin on the target class.
pub fn arcface_loss(
    e: &Matrix,
    w: &Matrix,
    labels: &[usize],
    config: &LossConfig,
) -> Result<LossResult> {
    config.validate()?;
    if !(config.arc_margin >= 0.0 && config.arc_margin < FRAC_PI_2) {
        return Err(Error::config(format!(
            "arc margin must lie in [0, pi/2), got {}",
            config.arc_margin
        )));
    }
    check_head_shapes(e, w, labels)?;
    let head = Head::new(e, w)?;
    let logits = head.cosines.scale(config.sigma);
    let mut margin_logits = logits.clone();
    let mut slopes = vec![config.sigma; labels.len()];
    if config.arc_margin > 0.0 {
        for (i, &label) in labels.iter().enumerate() {
            let (logit, slope) =
                margin_target(head.cosines.get(i, label), config.arc_margin, config.sigma);
            margin_logits.set(i, label, logit);
            slopes[i] = slope;
        }
    }
    let (ce, grad_logits) = softmax_cross_entropy(&margin_logits, labels)?;
    let mut grad_cos = grad_logits.scale(config.sigma);
    if config.arc_margin > 0.0 {
        for (i, &label) in labels.iter().enumerate() {
            grad_cos.set(i, label, grad_logits.get(i, label) * slopes[i]);
        }
    }
    let (ge, gw) = head.backward(&grad_cos)?;
    Ok(LossResult {
        total_loss: ce,
        ce_loss: ce,
        separator_loss: 0.0,
        logits,
        projections: None,
        grad_embeddings: normalize_rows_backward(e, &head.e_hat, &ge),
        grad_weights: normalize_columns_backward(w, &head.w_hat, &gw),
    })
}

/// Dispatches on `config.kind`.
pub fn compute_loss(
    e: &Matrix,
    w: &Matrix,
    labels: &[usize],
    config: &LossConfig,
) -> Result<LossResult> {
    match config.kind {
        LossKind::Softmax => softmax_loss(e, w, labels, config),
        LossKind::HaSeparator => haseparator_loss(e, w, labels, config),
        LossKind::ArcFace => arcface_loss(e, w, labels, config),
    }
}
