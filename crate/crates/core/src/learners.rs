//! Reference base classifiers (softmax regression and a one-hidden-layer
//! tanh network) trained with mini-batch gradient descent, plus ingestion of
//! externally produced score matrices.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::Frame;
use crate::fusion::{FusionError, ScoreCsvError, ScoreMatrix};
use crate::infotheory::LabelVector;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite at epoch {epoch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid learner configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: line {line}: row sums to {sum}, which exceeds 1")]
    RowSumExceedsOne { path: String, line: usize, sum: f64 },
    #[error("{path}: classes {found:?} do not match frame {expected:?}")]
    ClassMismatch { path: String, expected: Vec<String>, found: Vec<String> },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("invalid model record: {0}")]
    Record(String),
}

pub type Result<T> = std::result::Result<T, LearnerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    SoftmaxLinear,
    #[serde(rename = "mlp_1hidden")]
    Mlp1Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub learner_kind: LearnerKind,
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2_penalty: f64,
    /// Fractional learning-rate reduction applied every `lr_drop_period` epochs.
    pub lr_drop: f64,
    pub lr_drop_period: usize,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            learner_kind: LearnerKind::SoftmaxLinear,
            hidden_units: 32,
            learning_rate: 0.005,
            epochs: 200,
            batch_size: 128,
            l2_penalty: 1e-4,
            lr_drop: 0.005,
            lr_drop_period: 10,
            seed: 0,
        }
    }
}

impl LearnerConfig {
    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(LearnerError::InvalidConfig(what.to_string()));
        if self.learner_kind == LearnerKind::Mlp1Hidden && self.hidden_units == 0 {
            return bad("hidden_units must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.l2_penalty >= 0.0) {
            return bad("l2_penalty must be non-negative");
        }
        if !(0.0..1.0).contains(&self.lr_drop) || self.lr_drop_period == 0 {
            return bad("lr_drop must lie in [0, 1) with a positive period");
        }
        Ok(())
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * (1.0 - self.lr_drop).powi((epoch / self.lr_drop_period) as i32)
    }
}

/// Network shape needed to interpret a flat parameter vector.
///
/// Layout: softmax `[W (c×d) row-major, b (c)]`; network
/// `[W1 (h×d), b1 (h), W2 (c×h), b2 (c)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub kind: LearnerKind,
    pub input_width: usize,
    pub hidden_units: usize,
    pub class_count: usize,
}

impl Architecture {
    pub fn parameter_count(&self) -> usize {
        let (d, h, c) = (self.input_width, self.hidden_units, self.class_count);
        match self.kind {
            LearnerKind::SoftmaxLinear => c * d + c,
            LearnerKind::Mlp1Hidden => h * d + h + c * h + c,
        }
    }

    /// Which flat entries are weights (penalized) as opposed to biases.
    fn is_weight(&self, idx: usize) -> bool {
        let (d, h, c) = (self.input_width, self.hidden_units, self.class_count);
        match self.kind {
            LearnerKind::SoftmaxLinear => idx < c * d,
            LearnerKind::Mlp1Hidden => idx < h * d || (idx >= h * d + h && idx < h * d + h + c * h),
        }
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn softmax_rows(mut logits: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..logits.nrows() {
        let row: Vec<f64> = logits.row(i).iter().copied().collect();
        for (j, p) in softmax(&row).into_iter().enumerate() {
            logits[(i, j)] = p;
        }
    }
    logits
}

fn mat(params: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, params)
}

/// Adds bias `b` to every row.
fn add_bias(mut m: DMatrix<f64>, b: &[f64]) -> DMatrix<f64> {
    for mut row in m.row_iter_mut() {
        row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
    }
    m
}

fn column_sums(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.sum()).collect()
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for row in m.row_iter() {
        out.extend(row.iter());
    }
}

/// Class probabilities for every row of `x`.
pub fn forward(arch: &Architecture, params: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, h, c) = (arch.input_width, arch.hidden_units, arch.class_count);
    match arch.kind {
        LearnerKind::SoftmaxLinear => {
            let w = mat(&params[..c * d], c, d);
            softmax_rows(add_bias(x * w.transpose(), &params[c * d..]))
        }
        LearnerKind::Mlp1Hidden => {
            let (w1, rest) = params.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            let hidden = add_bias(x * mat(w1, h, d).transpose(), b1).map(f64::tanh);
            softmax_rows(add_bias(hidden * mat(w2, c, h).transpose(), b2))
        }
    }
}

/// Mean cross-entropy plus `l2/2 · ‖W‖²` over the weight matrices, and its
/// gradient with respect to the flat parameter vector.
pub fn loss_and_gradient(
    arch: &Architecture,
    params: &[f64],
    x: &DMatrix<f64>,
    labels: &[usize],
    l2_penalty: f64,
) -> (f64, Vec<f64>) {
    let (d, h, c) = (arch.input_width, arch.hidden_units, arch.class_count);
    let n = x.nrows() as f64;
    let mut onehot = DMatrix::zeros(x.nrows(), c);
    for (i, &l) in labels.iter().enumerate() {
        onehot[(i, l)] = 1.0;
    }
    let penalty: f64 = params
        .iter()
        .enumerate()
        .filter(|(i, _)| arch.is_weight(*i))
        .map(|(_, w)| w * w)
        .sum::<f64>()
        * 0.5
        * l2_penalty;

    let (probs, hidden) = match arch.kind {
        LearnerKind::SoftmaxLinear => (forward(arch, params, x), None),
        LearnerKind::Mlp1Hidden => {
            let hidden = add_bias(x * mat(&params[..h * d], h, d).transpose(), &params[h * d..h * d + h]).map(f64::tanh);
            let w2 = mat(&params[h * d + h..h * d + h + c * h], c, h);
            let probs = softmax_rows(add_bias(&hidden * w2.transpose(), &params[h * d + h + c * h..]));
            (probs, Some(hidden))
        }
    };
    let ce: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs[(i, l)].max(1e-300).ln())
        .sum::<f64>()
        / n;
    let delta = (probs - onehot) / n;

    let mut grad = Vec::with_capacity(params.len());
    match hidden {
        None => {
            push_row_major(&mut grad, &(delta.transpose() * x));
            grad.extend(column_sums(&delta));
        }
        Some(hidden) => {
            let w2 = mat(&params[h * d + h..h * d + h + c * h], c, h);
            let d_hidden = (&delta * &w2).component_mul(&hidden.map(|t| 1.0 - t * t));
            push_row_major(&mut grad, &(d_hidden.transpose() * x));
            grad.extend(column_sums(&d_hidden));
            push_row_major(&mut grad, &(delta.transpose() * &hidden));
            grad.extend(column_sums(&delta));
        }
    }
    for (i, g) in grad.iter_mut().enumerate() {
        if arch.is_weight(i) {
            *g += l2_penalty * params[i];
        }
    }
    (ce + penalty, grad)
}

/// Trained, immutable classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedLearner {
    arch: Architecture,
    parameters: Vec<f64>,
    scaling: InputScaling,
    seed: u64,
    training_log: Vec<f64>,
}

impl TrainedLearner {
    pub fn kind(&self) -> LearnerKind {
        self.arch.kind
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_width(&self) -> usize {
        self.arch.input_width
    }

    pub fn class_count(&self) -> usize {
        self.arch.class_count
    }

    pub fn parameters(&self) -> &[f64] {
        &self.parameters
    }

    /// Full-data training loss after each epoch.
    pub fn training_log(&self) -> &[f64] {
        &self.training_log
    }

    pub fn predict_proba(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.ncols() != self.arch.input_width {
            return Err(LearnerError::ShapeMismatch(format!(
                "{} feature columns, model expects {}",
                features.ncols(),
                self.arch.input_width
            )));
        }
        Ok(forward(&self.arch, &self.parameters, &self.scaling.apply(features)))
    }

    pub fn input_scaling(&self) -> &InputScaling {
        &self.scaling
    }

    /// Class probabilities as a [`ScoreMatrix`] with the given identifiers.
    pub fn predict_scores(
        &self,
        classifier_id: &str,
        features: &DMatrix<f64>,
        sample_ids: &[String],
        class_labels: &[String],
    ) -> Result<ScoreMatrix> {
        let probs = self.predict_proba(features)?;
        if class_labels.len() != self.arch.class_count || sample_ids.len() != probs.nrows() {
            return Err(LearnerError::ShapeMismatch("identifier counts do not match the model output".into()));
        }
        let rows = probs.row_iter().map(|r| r.iter().copied().collect()).collect();
        Ok(ScoreMatrix::new(classifier_id, class_labels.to_vec(), sample_ids.to_vec(), rows)?)
    }

    pub fn to_record(&self) -> LearnerRecord {
        LearnerRecord {
            learner_kind: self.arch.kind,
            input_width: self.arch.input_width,
            class_count: self.arch.class_count,
            hidden_units: self.arch.hidden_units,
            weights: self.parameters.clone(),
            input_mean: self.scaling.mean.clone(),
            input_scale: self.scaling.scale.clone(),
            seed: self.seed,
        }
    }

    pub fn from_record(record: LearnerRecord) -> Result<TrainedLearner> {
        let arch = Architecture {
            kind: record.learner_kind,
            input_width: record.input_width,
            hidden_units: if record.learner_kind == LearnerKind::SoftmaxLinear { 0 } else { record.hidden_units },
            class_count: record.class_count,
        };
        if record.weights.len() != arch.parameter_count() {
            return Err(LearnerError::Record(format!(
                "{} weights, architecture needs {}",
                record.weights.len(),
                arch.parameter_count()
            )));
        }
        let scaling = if record.input_mean.is_empty() && record.input_scale.is_empty() {
            InputScaling::identity(arch.input_width)
        } else {
            InputScaling {
                mean: record.input_mean,
                scale: record.input_scale,
            }
        };
        if scaling.mean.len() != arch.input_width
            || scaling.scale.len() != arch.input_width
            || scaling.scale.iter().any(|s| !(*s > 0.0))
        {
            return Err(LearnerError::Record("input scaling does not match the input width".into()));
        }
        Ok(TrainedLearner {
            arch,
            parameters: record.weights,
            scaling,
            seed: record.seed,
            training_log: Vec::new(),
        })
    }
}

/// Serialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerRecord {
    pub learner_kind: LearnerKind,
    pub input_width: usize,
    pub class_count: usize,
    #[serde(default)]
    pub hidden_units: usize,
    pub weights: Vec<f64>,
    /// Per-column training mean; empty means no centering.
    #[serde(default)]
    pub input_mean: Vec<f64>,
    #[serde(default)]
    pub input_scale: Vec<f64>,
    pub seed: u64,
}

/// Per-column z-scoring fitted on the training features. Columns with
/// (near-)zero spread keep scale 1.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(width: usize) -> InputScaling {
        InputScaling {
            mean: vec![0.0; width],
            scale: vec![1.0; width],
        }
    }

    pub fn fit(x: &DMatrix<f64>) -> InputScaling {
        let n = x.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.iter().map(|v| v / n).sum::<f64>();
            // Factor out the largest deviation so the squares cannot overflow.
            let peak = col.iter().map(|v| (v - m).abs()).fold(0.0, f64::max);
            let sd = if peak > 0.0 && peak.is_finite() {
                peak * (col.iter().map(|v| ((v - m) / peak).powi(2)).sum::<f64>() / n).sqrt()
            } else {
                0.0
            };
            mean.push(m);
            scale.push(if sd > 1e-12 { sd } else { 1.0 });
        }
        InputScaling { mean, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.mean[j]) / self.scale[j]);
        }
        out
    }
}

fn initial_parameters(arch: &Architecture, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut params = vec![0.0; arch.parameter_count()];
    if arch.kind == LearnerKind::Mlp1Hidden {
        // Random input layer; the output layer starts at zero so an untrained
        // network predicts the uniform distribution.
        let (d, h) = (arch.input_width, arch.hidden_units);
        let limit = (6.0 / (d + h) as f64).sqrt();
        for p in &mut params[..h * d] {
            *p = rng.random_range(-limit..=limit);
        }
    }
    params
}

/// Mini-batch gradient descent on the softmax cross-entropy of z-scored
/// inputs; the scaling is part of the returned model.
pub fn train(
    features: &DMatrix<f64>,
    labels: &LabelVector,
    class_count: usize,
    cfg: &LearnerConfig,
) -> Result<TrainedLearner> {
    cfg.validate()?;
    let n = features.nrows();
    if labels.len() != n {
        return Err(LearnerError::ShapeMismatch(format!("{} labels for {} rows", labels.len(), n)));
    }
    if let Some(&l) = labels.as_slice().iter().find(|&&l| l >= class_count) {
        return Err(LearnerError::ShapeMismatch(format!("label {l} with {class_count} classes")));
    }
    let arch = Architecture {
        kind: cfg.learner_kind,
        input_width: features.ncols(),
        hidden_units: if cfg.learner_kind == LearnerKind::Mlp1Hidden { cfg.hidden_units } else { 0 },
        class_count,
    };
    let scaling = InputScaling::fit(features);
    let features = &scaling.apply(features);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = initial_parameters(&arch, &mut rng);
    let y = labels.as_slice();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        for batch in order.chunks(cfg.batch_size) {
            let xb = features.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let (_, grad) = loss_and_gradient(&arch, &params, &xb, &yb, cfg.l2_penalty);
            params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= lr * g);
        }
        let (loss, _) = loss_and_gradient(&arch, &params, features, y, cfg.l2_penalty);
        if !loss.is_finite() {
            return Err(LearnerError::NonFiniteLoss { epoch });
        }
        log.push(loss);
    }
    Ok(TrainedLearner {
        arch,
        parameters: params,
        scaling,
        seed: cfg.seed,
        training_log: log,
    })
}

/// Reads a score CSV and checks its classes against `frame`.
pub fn load_external_scores(path: &Path, frame: &Arc<Frame>) -> Result<ScoreMatrix> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| LearnerError::Io {
        path: display.clone(),
        source,
    })?;
    let id = path.file_stem().map_or_else(|| display.clone(), |s| s.to_string_lossy().into_owned());
    let scores = ScoreMatrix::read_csv(&id, file).map_err(|e| match e {
        ScoreCsvError::Parse { line, message } => LearnerError::Parse {
            path: display.clone(),
            line,
            message,
        },
        ScoreCsvError::Invalid {
            line,
            source: FusionError::RowSumExceedsOne { sum, .. },
        } => LearnerError::RowSumExceedsOne {
            path: display.clone(),
            line,
            sum,
        },
        ScoreCsvError::Invalid { line, source } => LearnerError::Parse {
            path: display.clone(),
            line,
            message: source.to_string(),
        },
    })?;
    if scores.class_labels() != frame.labels() {
        return Err(LearnerError::ClassMismatch {
            path: display,
            expected: frame.labels().to_vec(),
            found: scores.class_labels().to_vec(),
        });
    }
    Ok(scores)
}
