//! Spectral feature channels, min-max scaling and LARS-lasso frequency
//! selection.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infotheory::LabelVector;

/// Magnitudes are floored here before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;
/// The path stops once the largest residual correlation drops below this.
pub const LARS_CORRELATION_TOL: f64 = 1e-10;
const LARS_STEP_EPS: f64 = 1e-14;

/// Names of the generated channels, in canonical order.
pub const CHANNEL_NAMES: [&str; 8] = ["x1", "x2", "sum", "product", "x1_sq", "x2_sq", "log_x1", "log_x2"];
/// Name of the learner trained on all channels at once.
pub const ALL_CHANNELS: &str = "all";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("channel `{0}` not found")]
    MissingChannel(String),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Labeled magnitude spectra on a shared frequency axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumDataset {
    frequencies: Vec<f64>,
    channels: BTreeMap<String, DMatrix<f64>>,
    labels: LabelVector,
    class_names: Vec<String>,
    sample_ids: Vec<String>,
}

impl SpectrumDataset {
    pub fn new(
        frequencies: Vec<f64>,
        channels: BTreeMap<String, DMatrix<f64>>,
        labels: LabelVector,
        class_names: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Result<SpectrumDataset> {
        let n_s = sample_ids.len();
        let n_f = frequencies.len();
        if n_f == 0 || channels.is_empty() {
            return Err(FeatureError::InvalidDataset("no frequencies or channels".into()));
        }
        if frequencies.windows(2).any(|w| w[1] <= w[0]) || frequencies.iter().any(|f| !f.is_finite()) {
            return Err(FeatureError::InvalidDataset("frequencies must be finite and strictly increasing".into()));
        }
        if labels.len() != n_s {
            return Err(FeatureError::ShapeMismatch(format!("{} labels for {} samples", labels.len(), n_s)));
        }
        if labels.as_slice().iter().any(|&l| l >= class_names.len()) {
            return Err(FeatureError::InvalidDataset("label outside the class list".into()));
        }
        for (name, m) in &channels {
            if m.shape() != (n_s, n_f) {
                return Err(FeatureError::ShapeMismatch(format!(
                    "channel `{name}` is {}x{}, expected {n_s}x{n_f}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(FeatureError::InvalidDataset(format!(
                    "channel `{name}` has negative or non-finite magnitudes"
                )));
            }
        }
        Ok(SpectrumDataset {
            frequencies,
            channels,
            labels,
            class_names,
            sample_ids,
        })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn channels(&self) -> &BTreeMap<String, DMatrix<f64>> {
        &self.channels
    }

    pub fn channel(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.channels
            .get(name)
            .ok_or_else(|| FeatureError::MissingChannel(name.to_string()))
    }

    pub fn labels(&self) -> &LabelVector {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_frequencies(&self) -> usize {
        self.frequencies.len()
    }

    /// Rows `indices` (repeats allowed), in the given order.
    pub fn select_samples(&self, indices: &[usize]) -> SpectrumDataset {
        let channels = self
            .channels
            .iter()
            .map(|(k, m)| (k.clone(), m.select_rows(indices)))
            .collect();
        SpectrumDataset {
            frequencies: self.frequencies.clone(),
            channels,
            labels: self.labels.subset(indices),
            class_names: self.class_names.clone(),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
        }
    }

    /// Contiguous frequency bins `start..end`.
    pub fn select_frequencies(&self, start: usize, end: usize) -> SpectrumDataset {
        let channels = self
            .channels
            .iter()
            .map(|(k, m)| (k.clone(), m.columns(start, end - start).into_owned()))
            .collect();
        SpectrumDataset {
            frequencies: self.frequencies[start..end].to_vec(),
            channels,
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            sample_ids: self.sample_ids.clone(),
        }
    }

    /// Replaces every channel matrix, keeping labels and axis.
    pub fn map_channels<F>(&self, mut f: F) -> SpectrumDataset
    where
        F: FnMut(&str, &DMatrix<f64>) -> DMatrix<f64>,
    {
        let channels = self
            .channels
            .iter()
            .map(|(k, m)| {
                let out = f(k, m);
                assert_eq!(out.shape(), m.shape(), "channel map must keep the shape");
                (k.clone(), out)
            })
            .collect();
        SpectrumDataset {
            channels,
            ..self.clone()
        }
    }
}

/// The eight generated channels: both raw spectra, their sum, element-wise
/// product, squares and base-10 logarithms.
pub fn generate_channels(x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<Vec<(String, DMatrix<f64>)>> {
    if x1.shape() != x2.shape() {
        return Err(FeatureError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    let log = |m: &DMatrix<f64>| m.map(|v| v.max(LOG_FLOOR).log10());
    let channels = vec![
        x1.clone(),
        x2.clone(),
        x1 + x2,
        x1.component_mul(x2),
        x1.map(|v| v * v),
        x2.map(|v| v * v),
        log(x1),
        log(x2),
    ];
    Ok(CHANNEL_NAMES.iter().map(|s| s.to_string()).zip(channels).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

/// Maps a channel affinely so `min → -1` and `max → 1`. With `stats` given
/// (training statistics) values may land outside `[-1, 1]`; no clipping.
/// A constant channel maps to zeros.
pub fn normalize_minmax(channel: &DMatrix<f64>, stats: Option<MinMax>) -> (DMatrix<f64>, MinMax) {
    let stats = stats.unwrap_or_else(|| MinMax {
        min: channel.min(),
        max: channel.max(),
    });
    let span = stats.max - stats.min;
    let out = if span > 0.0 {
        channel.map(|v| 2.0 * (v - stats.min) / span - 1.0)
    } else {
        DMatrix::zeros(channel.nrows(), channel.ncols())
    };
    (out, stats)
}

/// One breakpoint of the lasso path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LarsKnot {
    /// Common absolute residual correlation of the active columns.
    pub lambda: f64,
    /// Coefficients on the standardized columns, one per input column.
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LarsPath {
    /// Column indices in activation order (a column may re-enter).
    pub entry_order: Vec<usize>,
    pub knots: Vec<LarsKnot>,
    /// Columns with non-zero coefficients at the end of the path, ascending.
    pub final_active: Vec<usize>,
    /// Zero-variance columns left out of the fit.
    pub excluded: Vec<usize>,
}

impl LarsPath {
    pub fn final_coefficients(&self) -> &[f64] {
        &self.knots.last().expect("a path has at least one knot").coefficients
    }
}

/// Centers and scales the columns to unit Euclidean norm. Returns the
/// standardized matrix over the usable columns, their original indices and
/// the excluded (constant) columns.
pub fn standardize_columns(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>, Vec<usize>) {
    let n = x.nrows();
    let mut used = Vec::new();
    let mut excluded = Vec::new();
    let mut cols = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j);
        let mean = col.mean();
        let centered = col.map(|v| v - mean);
        let norm = centered.norm();
        let scale = col.amax().max(1.0) * (n as f64).sqrt();
        if norm <= 1e-12 * scale {
            excluded.push(j);
        } else {
            used.push(j);
            cols.push(centered / norm);
        }
    }
    let xs = if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    (xs, used, excluded)
}

/// Traces the lasso path with least angle regression and the lasso
/// modification (a column leaves the active set when its coefficient hits
/// zero). Columns are standardized and `y` centered internally; `lambda` is
/// the shared absolute correlation `|Xᵀr|` of the active set. The path runs
/// until `min(n_s - 1, n_f)` columns are active and the least-squares end
/// point is reached, or the residual correlation vanishes.
pub fn lars_lasso_path(x: &DMatrix<f64>, y: &[f64]) -> Result<LarsPath> {
    let (n, p_all) = x.shape();
    if y.len() != n {
        return Err(FeatureError::ShapeMismatch(format!("{} responses for {} rows", y.len(), n)));
    }
    if n < 2 {
        return Err(FeatureError::TooFewSamples(n));
    }
    let (xs, used, excluded) = standardize_columns(x);
    let p = used.len();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let max_active = (n - 1).min(p);

    let mut beta = DVector::<f64>::zeros(p);
    let mut active: Vec<usize> = Vec::new();
    let mut is_active = vec![false; p];
    let mut entry_order = Vec::new();
    let mut knots = Vec::new();

    let expand = |beta: &DVector<f64>| {
        let mut full = vec![0.0; p_all];
        for (k, &j) in used.iter().enumerate() {
            full[j] = beta[k];
        }
        full
    };

    let mut corr = xs.tr_mul(&yc);
    let mut lambda = corr.amax();
    knots.push(LarsKnot {
        lambda,
        coefficients: expand(&beta),
    });
    if p > 0 && lambda >= LARS_CORRELATION_TOL {
        let j = argmax_abs(&corr, &is_active);
        active.push(j);
        is_active[j] = true;
        entry_order.push(used[j]);
    }

    let mut just_dropped: Option<usize> = None;
    let max_iterations = 8 * (p + n) + 100;
    let mut iterations = 0;
    while !active.is_empty() && lambda >= LARS_CORRELATION_TOL && iterations < max_iterations {
        iterations += 1;
        let signs = DVector::from_iterator(active.len(), active.iter().map(|&j| corr[j].signum()));
        let xa = xs.select_columns(&active);
        let gram = xa.tr_mul(&xa);
        let Some(chol) = gram.cholesky() else {
            break;
        };
        let q = chol.solve(&signs);
        let norm_factor = 1.0 / signs.dot(&q).sqrt();
        let w = q * norm_factor;
        let u = &xa * &w;
        let a = xs.tr_mul(&u);

        // Full step reaches the least-squares fit on the active set.
        let mut gamma = lambda / norm_factor;
        let mut join = None;
        let mut drop = None;
        if active.len() < max_active {
            for j in (0..p).filter(|&j| !is_active[j]) {
                for (num, den) in [(lambda - corr[j], norm_factor - a[j]), (lambda + corr[j], norm_factor + a[j])] {
                    if den > LARS_STEP_EPS {
                        let g = num.max(0.0) / den;
                        // A dropped column sits on the boundary; only a later
                        // crossing (the opposite sign) may bring it back.
                        if Some(j) == just_dropped && g <= LARS_STEP_EPS {
                            continue;
                        }
                        if g < gamma {
                            gamma = g;
                            join = Some(j);
                        }
                    }
                }
            }
        }
        for (k, &j) in active.iter().enumerate() {
            if w[k] != 0.0 && beta[j] != 0.0 {
                let g = -beta[j] / w[k];
                if g > LARS_STEP_EPS && g < gamma {
                    gamma = g;
                    drop = Some(k);
                    join = None;
                }
            }
        }

        for (k, &j) in active.iter().enumerate() {
            beta[j] += gamma * w[k];
        }
        just_dropped = None;
        if let Some(k) = drop {
            let j = active.remove(k);
            beta[j] = 0.0;
            is_active[j] = false;
            just_dropped = Some(j);
        }
        let resid = &yc - &xs * &beta;
        corr = xs.tr_mul(&resid);
        let full_step = join.is_none() && drop.is_none();
        lambda = if full_step {
            0.0
        } else if active.is_empty() {
            corr.amax()
        } else {
            active.iter().map(|&j| corr[j].abs()).fold(0.0, f64::max)
        };
        if gamma > LARS_STEP_EPS || full_step {
            knots.push(LarsKnot {
                lambda,
                coefficients: expand(&beta),
            });
        }
        if full_step {
            break;
        }
        if let Some(j) = join {
            active.push(j);
            is_active[j] = true;
            entry_order.push(used[j]);
        }
        if active.is_empty() && lambda >= LARS_CORRELATION_TOL {
            let j = argmax_abs(&corr, &is_active);
            active.push(j);
            is_active[j] = true;
            entry_order.push(used[j]);
        }
    }

    let last = &knots.last().expect("initial knot").coefficients;
    let final_active = (0..p_all).filter(|&j| last[j] != 0.0).collect();
    Ok(LarsPath {
        entry_order,
        knots,
        final_active,
        excluded: excluded.clone(),
    })
}

fn argmax_abs(v: &DVector<f64>, skip: &[bool]) -> usize {
    let mut best = None;
    for (j, x) in v.iter().enumerate() {
        if !skip[j] && best.is_none_or(|(_, b): (usize, f64)| x.abs() > b) {
            best = Some((j, x.abs()));
        }
    }
    best.map_or(0, |(j, _)| j)
}

/// Regression target for the lasso: `-1/+1` for two classes, the class index
/// otherwise.
pub fn label_target(labels: &LabelVector, n_classes: usize) -> Vec<f64> {
    labels
        .as_slice()
        .iter()
        .map(|&l| if n_classes == 2 { if l == 0 { -1.0 } else { 1.0 } } else { l as f64 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelSelection {
    pub channel: String,
    /// Selected frequency indices, ascending.
    pub indices: Vec<usize>,
    /// Final standardized coefficient for each selected index.
    pub coefficients: Vec<f64>,
    pub excluded: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencySelection {
    pub channels: Vec<ChannelSelection>,
    /// De-duplicated union over channels, ascending.
    pub union: Vec<usize>,
}

impl FrequencySelection {
    pub fn get(&self, channel: &str) -> Option<&ChannelSelection> {
        self.channels.iter().find(|c| c.channel == channel)
    }

    /// `channel,frequency_index,frequency_hz,coefficient`.
    pub fn write_csv<W: std::io::Write>(&self, frequencies: &[f64], writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["channel", "frequency_index", "frequency_hz", "coefficient"])?;
        for ch in &self.channels {
            for (&i, c) in ch.indices.iter().zip(&ch.coefficients) {
                w.write_record([ch.channel.clone(), i.to_string(), frequencies[i].to_string(), c.to_string()])?;
            }
        }
        w.flush()
    }
}

/// Runs the lasso path to its end on every channel independently.
pub fn select_frequencies(
    channels: &[(String, DMatrix<f64>)],
    labels: &LabelVector,
    n_classes: usize,
) -> Result<FrequencySelection> {
    let target = label_target(labels, n_classes);
    let per_channel = channels
        .par_iter()
        .map(|(name, x)| {
            let path = lars_lasso_path(x, &target)?;
            let coef = path.final_coefficients();
            Ok(ChannelSelection {
                channel: name.clone(),
                coefficients: path.final_active.iter().map(|&i| coef[i]).collect(),
                indices: path.final_active.clone(),
                excluded: path.excluded.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut union: Vec<usize> = per_channel.iter().flat_map(|c| c.indices.iter().copied()).collect();
    union.sort_unstable();
    union.dedup();
    Ok(FrequencySelection {
        channels: per_channel,
        union,
    })
}
