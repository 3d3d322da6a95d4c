//! A rectifier MLP feature extractor with a bias-free cosine classification
//! head.
//!
//! The network maps inputs (B x D) to raw embeddings (B x N). Normalization
//! and the head itself live in [`crate::losses`]; this module only owns the
//! class weight matrix so it can be trained and checkpointed alongside the
//! layers.
//!
//! # Checkpoint format
//!
//! UTF-8 text, one record per line, values written with Rust's shortest
//! round-trip `f64` formatting:
//!
//! ```text
//! haseparator-checkpoint 1
//! dims <d0> <d1> ... <dL>
//! classes <C>
//! weight <l> <rows> <cols>
//! <row of weight values>           (rows lines)
//! bias <l> <len>
//! <bias values>
//! ...                              (weight/bias pair for every layer)
//! head <N> <C>
//! <row of class weight values>     (N lines)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Matrix};

const CHECKPOINT_MAGIC: &str = "haseparator-checkpoint 1";

/// Layer sizes of a model to be initialized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    /// Input dimension, then hidden widths, then the embedding dimension.
    pub layer_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        embedding_dim: usize,
        num_classes: usize,
    ) -> Self {
        let mut layer_dims = Vec::with_capacity(hidden.len() + 2);
        layer_dims.push(input_dim);
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(embedding_dim);
        ModelSpec {
            layer_dims,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::config(
                "a model needs at least an input and an embedding dimension",
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::config(format!(
                "zero-width layer in {:?}",
                self.layer_dims
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config("a model needs at least one class"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    /// `weights[l]` is `layer_dims[l] x layer_dims[l + 1]`.
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// N x C, one column per class.
    pub class_weights: Matrix,
}

/// Intermediate values kept by [`MlpModel::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub inputs: Matrix,
    /// Affine outputs per layer.
    pub pre_activations: Vec<Matrix>,
    /// Rectified outputs per hidden layer; the final layer has no activation.
    pub activations: Vec<Matrix>,
    pub embeddings: Matrix,
}

/// Gradients for every parameter of an [`MlpModel`], laid out like it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub class_weights: Matrix,
}

impl MlpModel {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases. Class weights
    /// use the same rule with the embedding dimension as fan-in.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |rows: usize, cols: usize| {
            let normal = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("finite std");
            Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
        };
        let dims = &spec.layer_dims;
        let weights: Vec<Matrix> = dims.windows(2).map(|d| he(d[0], d[1])).collect();
        let biases = dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        let class_weights = he(*dims.last().unwrap(), spec.num_classes);
        Ok(MlpModel {
            layer_dims: dims.clone(),
            weights,
            biases,
            class_weights,
        })
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        class_weights: Matrix,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::shape(format!(
                "{} weight matrices and {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut layer_dims = vec![weights[0].rows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() != *layer_dims.last().unwrap() || b.len() != w.cols() {
                return Err(Error::shape(format!(
                    "layer {l}: weight {:?} and bias {} do not chain",
                    w.shape(),
                    b.len()
                )));
            }
            layer_dims.push(w.cols());
        }
        if class_weights.rows() != *layer_dims.last().unwrap() {
            return Err(Error::shape(format!(
                "class weights have {} rows, embedding dimension is {}",
                class_weights.rows(),
                layer_dims.last().unwrap()
            )));
        }
        let model = MlpModel {
            layer_dims,
            weights,
            biases,
            class_weights,
        };
        if !model.is_finite() {
            return Err(Error::input("model parameters must be finite"));
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.cols()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
            && self.class_weights.is_finite()
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<ForwardTrace> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "model expects {} input features, got {}",
                self.input_dim(),
                inputs.cols()
            )));
        }
        let last = self.num_layers() - 1;
        let mut pre_activations = Vec::with_capacity(self.num_layers());
        let mut activations = Vec::with_capacity(last);
        let mut current = inputs.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = matmul(&current, w)?;
            for i in 0..z.rows() {
                for (v, bias) in z.row_mut(i).iter_mut().zip(b) {
                    *v += bias;
                }
            }
            if l < last {
                let a = Matrix::from_fn(z.rows(), z.cols(), |i, j| z.get(i, j).max(0.0));
                pre_activations.push(z);
                activations.push(a.clone());
                current = a;
            } else {
                current = z.clone();
                pre_activations.push(z);
            }
        }
        Ok(ForwardTrace {
            inputs: inputs.clone(),
            pre_activations,
            activations,
            embeddings: current,
        })
    }

    /// Convenience wrapper returning only the embeddings.
    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward(inputs)?.embeddings)
    }

    /// Back-propagates `grad_embeddings` (B x N) through the layers.
    ///
    /// The returned `class_weights` gradient is `grad_class_weights` passed
    /// through unchanged, so callers can hand the result straight to the
    /// optimizer.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_embeddings: &Matrix,
        grad_class_weights: &Matrix,
    ) -> Result<ModelGrads> {
        let b = trace.inputs.rows();
        if trace.pre_activations.len() != self.num_layers()
            || trace.inputs.cols() != self.input_dim()
            || trace.embeddings.shape() != (b, self.embedding_dim())
        {
            return Err(Error::shape("trace does not belong to this model"));
        }
        if grad_embeddings.shape() != trace.embeddings.shape() {
            return Err(Error::shape(format!(
                "embedding gradient {:?} does not match embeddings {:?}",
                grad_embeddings.shape(),
                trace.embeddings.shape()
            )));
        }
        if grad_class_weights.shape() != self.class_weights.shape() {
            return Err(Error::shape(format!(
                "class weight gradient {:?} does not match {:?}",
                grad_class_weights.shape(),
                self.class_weights.shape()
            )));
        }

        let layers = self.num_layers();
        let mut weights = vec![Matrix::zeros(0, 0); layers];
        let mut biases = vec![Vec::new(); layers];
        let mut delta = grad_embeddings.clone();
        for l in (0..layers).rev() {
            let input = if l == 0 {
                &trace.inputs
            } else {
                &trace.activations[l - 1]
            };
            weights[l] = matmul(&input.transpose(), &delta)?;
            biases[l] = (0..delta.cols())
                .map(|j| (0..delta.rows()).map(|i| delta.get(i, j)).sum())
                .collect();
            if l > 0 {
                let mut upstream = matmul(&delta, &self.weights[l].transpose())?;
                let z = &trace.pre_activations[l - 1];
                for (g, &zv) in upstream.data_mut().iter_mut().zip(z.data()) {
                    if zv <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = upstream;
            }
        }
        Ok(ModelGrads {
            weights,
            biases,
            class_weights: grad_class_weights.clone(),
        })
    }

    /// Visits every parameter buffer in a fixed order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            f(w.data_mut());
            f(b);
        }
        f(self.class_weights.data_mut());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            n += w.data().len() + b.len();
        }
        n + self.class_weights.data().len()
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let join = |vals: &[f64]| {
            vals.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let dims: Vec<String> = self.layer_dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "dims {}", dims.join(" "));
        let _ = writeln!(out, "classes {}", self.num_classes());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let _ = writeln!(out, "weight {l} {} {}", w.rows(), w.cols());
            for i in 0..w.rows() {
                let _ = writeln!(out, "{}", join(w.row(i)));
            }
            let _ = writeln!(out, "bias {l} {}", b.len());
            let _ = writeln!(out, "{}", join(b));
        }
        let cw = &self.class_weights;
        let _ = writeln!(out, "head {} {}", cw.rows(), cw.cols());
        for i in 0..cw.rows() {
            let _ = writeln!(out, "{}", join(cw.row(i)));
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = CheckpointLines::new(text);
        let magic = lines.next_line()?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(lines.error(format!("unrecognised header {magic:?}")));
        }
        let dims = lines.header("dims", None)?;
        if dims.len() < 2 {
            return Err(lines.error("need at least two layer dimensions"));
        }
        let classes = lines.header("classes", Some(1))?[0];
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let shape = lines.header("weight", Some(3))?;
            if shape != [l, dims[l], dims[l + 1]] {
                return Err(lines.error(format!("weight header {shape:?} does not match dims")));
            }
            weights.push(lines.matrix(dims[l], dims[l + 1])?);
            let shape = lines.header("bias", Some(2))?;
            if shape != [l, dims[l + 1]] {
                return Err(lines.error(format!("bias header {shape:?} does not match dims")));
            }
            biases.push(lines.values(dims[l + 1])?);
        }
        let shape = lines.header("head", Some(2))?;
        if shape != [*dims.last().unwrap(), classes] {
            return Err(lines.error(format!("head header {shape:?} does not match dims")));
        }
        let class_weights = lines.matrix(shape[0], shape[1])?;
        if let Some(extra) = lines.remaining() {
            return Err(lines.error(format!("trailing content {extra:?}")));
        }
        MlpModel::from_parts(weights, biases, class_weights).map_err(|e| lines.error(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_string()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        MlpModel::from_checkpoint_str(&text)
    }
}

struct CheckpointLines<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> CheckpointLines<'a> {
    fn new(text: &'a str) -> Self {
        CheckpointLines {
            lines: text.lines().enumerate(),
            line: 0,
        }
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            line: self.line,
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                Err(self.error("unexpected end of checkpoint"))
            }
        }
    }

    fn remaining(&mut self) -> Option<&'a str> {
        self.lines
            .by_ref()
            .map(|(_, l)| l)
            .find(|l| !l.trim().is_empty())
    }

    fn header(&mut self, key: &str, arity: Option<usize>) -> Result<Vec<usize>> {
        let line = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.error(format!("expected {key:?} record, found {line:?}")));
        }
        let nums = parts
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| self.error(format!("bad {key} record: {e}")))?;
        if arity.is_some_and(|n| n != nums.len()) {
            return Err(self.error(format!("{key} record has {} fields", nums.len())));
        }
        Ok(nums)
    }

    fn values(&mut self, expected: usize) -> Result<Vec<f64>> {
        let line = self.next_line()?;
        let vals = line
            .split_whitespace()
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| self.error(format!("bad value: {e}")))?;
        if vals.len() != expected {
            return Err(self.error(format!("expected {expected} values, found {}", vals.len())));
        }
        Ok(vals)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.values(cols)?);
        }
        Matrix::new(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{compute_loss, LossConfig};
    use rand::Rng;

    fn random_inputs(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let mut m = MlpModel::init(&ModelSpec::new(3, &[4], 2, 2), 1).unwrap();
        m.for_each_param_mut(|p| p.fill(0.0));
        let e = m.embed(&random_inputs(2, 5, 3)).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_inputs_through() {
        let m = MlpModel::from_parts(
            vec![Matrix::identity(3)],
            vec![vec![0.0; 3]],
            Matrix::identity(3),
        )
        .unwrap();
        let x = random_inputs(3, 4, 3);
        assert_eq!(m.embed(&x).unwrap(), x);
    }

    #[test]
    fn forward_matches_layerwise_recomputation() {
        let m = MlpModel::init(&ModelSpec::new(4, &[6, 5], 3, 2), 7).unwrap();
        let x = random_inputs(8, 3, 4);
        let e = m.embed(&x).unwrap();
        for i in 0..3 {
            let mut h: Vec<f64> = x.row(i).to_vec();
            for l in 0..3 {
                let w = &m.weights[l];
                let mut next = m.biases[l].clone();
                for (j, out) in next.iter_mut().enumerate() {
                    for (k, hk) in h.iter().enumerate() {
                        *out += hk * w.get(k, j);
                    }
                }
                if l < 2 {
                    next.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                h = next;
            }
            for (a, b) in e.row(i).iter().zip(&h) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(m.forward(&random_inputs(1, 2, 5)).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let m = MlpModel::init(&ModelSpec::new(3, &[4], 2, 2), 1).unwrap();
        let t = m.forward(&random_inputs(2, 5, 3)).unwrap();
        let g = m
            .backward(&t, &Matrix::zeros(5, 2), &Matrix::zeros(2, 2))
            .unwrap();
        assert!(g.weights.iter().all(|w| w.data().iter().all(|&v| v == 0.0)));
        assert!(g.biases.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_model_gradient_is_input_sums() {
        let m = MlpModel::from_parts(
            vec![random_inputs(1, 3, 2)],
            vec![vec![0.1, -0.2]],
            Matrix::identity(2),
        )
        .unwrap();
        let x = random_inputs(4, 5, 3);
        let t = m.forward(&x).unwrap();
        let ones = Matrix::from_fn(5, 2, |_, _| 1.0);
        let g = m.backward(&t, &ones, &Matrix::zeros(2, 2)).unwrap();
        for k in 0..3 {
            let s: f64 = (0..5).map(|i| x.get(i, k)).sum();
            for j in 0..2 {
                assert!((g.weights[0].get(k, j) - s).abs() < 1e-12);
            }
        }
        assert_eq!(g.biases[0], vec![5.0, 5.0]);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let a = MlpModel::init(&ModelSpec::new(3, &[4], 2, 2), 1).unwrap();
        let b = MlpModel::init(&ModelSpec::new(3, &[4, 4], 2, 2), 1).unwrap();
        let t = a.forward(&random_inputs(2, 5, 3)).unwrap();
        assert!(matches!(
            b.backward(&t, &Matrix::zeros(5, 2), &Matrix::zeros(2, 2)),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn init_is_seeded() {
        let spec = ModelSpec::new(5, &[7], 3, 4);
        let a = MlpModel::init(&spec, 42).unwrap();
        assert_eq!(a, MlpModel::init(&spec, 42).unwrap());
        assert_ne!(a, MlpModel::init(&spec, 43).unwrap());
        assert!(MlpModel::init(
            &ModelSpec {
                layer_dims: vec![3],
                num_classes: 2
            },
            0
        )
        .is_err());
    }

    #[test]
    fn init_std_follows_fan_in() {
        let m = MlpModel::init(&ModelSpec::new(256, &[], 512, 2), 9).unwrap();
        let w = m.weights[0].data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = (2.0 / 256.0f64).sqrt();
        assert!((var.sqrt() / expected - 1.0).abs() < 0.2);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // Positive biases keep every unit alive so no embedding sits on the
        // non-differentiable zero vector.
        let mut m = MlpModel::init(&ModelSpec::new(3, &[5, 4], 4, 3), 11).unwrap();
        for b in &mut m.biases {
            b.fill(0.5);
        }
        let x = random_inputs(12, 4, 3);
        let labels = [0, 1, 2, 1];
        let cfg = LossConfig::softmax(3.0);
        let loss = |m: &MlpModel| {
            let e = m.embed(&x).unwrap();
            compute_loss(&e, &m.class_weights, &labels, &cfg)
                .unwrap()
                .total_loss
        };
        let t = m.forward(&x).unwrap();
        let r = compute_loss(&t.embeddings, &m.class_weights, &labels, &cfg).unwrap();
        let g = m.backward(&t, &r.grad_embeddings, &r.grad_weights).unwrap();

        let mut analytic = Vec::new();
        for (w, b) in g.weights.iter().zip(&g.biases) {
            analytic.extend_from_slice(w.data());
            analytic.extend_from_slice(b);
        }
        analytic.extend_from_slice(g.class_weights.data());

        let mut numeric = Vec::new();
        let total = m.param_count();
        for idx in 0..total {
            let perturb = |delta: f64| {
                let mut p = m.clone();
                let mut seen = 0;
                p.for_each_param_mut(|buf| {
                    if idx >= seen && idx < seen + buf.len() {
                        buf[idx - seen] += delta;
                    }
                    seen += buf.len();
                });
                loss(&p)
            };
            numeric.push((perturb(1e-6) - perturb(-1e-6)) / 2e-6);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = crate::tensor::norm(&analytic).max(crate::tensor::norm(&numeric));
        assert!(diff / scale < 1e-5, "relative error {}", diff / scale);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = MlpModel::init(&ModelSpec::new(4, &[3], 2, 3), 5).unwrap();
        let text = m.to_checkpoint_string();
        assert_eq!(MlpModel::from_checkpoint_str(&text).unwrap(), m);
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let m = MlpModel::init(&ModelSpec::new(2, &[], 2, 2), 5).unwrap();
        let text = m.to_checkpoint_string();
        assert!(MlpModel::from_checkpoint_str("").is_err());
        assert!(
            MlpModel::from_checkpoint_str(&text.replace("haseparator-checkpoint 1", "v2")).is_err()
        );
        let truncated: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            MlpModel::from_checkpoint_str(&truncated),
            Err(Error::Checkpoint { .. })
        ));
        let garbled = text.replacen("bias 0 2\n", "bias 0 2\nnot numbers\n", 1);
        assert!(MlpModel::from_checkpoint_str(&garbled).is_err());
    }
}
