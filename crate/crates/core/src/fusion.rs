//! Classifier fusion on top of evidence theory.
//!
//! Each classifier's score row becomes a body of evidence (singleton masses
//! plus residual ignorance). The bodies are then weighted by a mix of
//! credibility (support from the other bodies, scaled by Deng entropy) and
//! support toward the chief focal element, averaged, and the weighted
//! average is combined with itself once per body using Dempster's rule.

use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::{
    self, bjs_divergence, combine_dempster, deng_entropy, disagreement_degree, Bba, BoeSet,
    EvidenceError, FocalSet, Frame,
};

/// Row sums may exceed one by this much before they are rejected; rows in
/// `(1, 1 + ROW_SUM_TOLERANCE]` are renormalized.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error("row {row} sums to {sum}, which exceeds 1")]
    RowSumExceedsOne { row: usize, sum: f64 },
    #[error("score {value} at row {row}, column {col} is outside [0, 1]")]
    ScoreOutOfRange { row: usize, col: usize, value: f64 },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("score matrix `{id}` does not match the others: {reason}")]
    ShapeMismatch { id: String, reason: String },
    #[error("fusion weights are degenerate (Σ W = {sum})")]
    InvalidWeights { sum: f64 },
    #[error("no body of evidence supports the chief focal element")]
    DegenerateChief,
    #[error("invalid fusion configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// Per-sample class scores emitted by one classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    classifier_id: String,
    class_labels: Vec<String>,
    sample_ids: Vec<String>,
    n_classes: usize,
    values: Vec<f64>,
}

impl ScoreMatrix {
    /// Validates and stores the rows. Entries must lie in `[0, 1]`; a row
    /// summing to slightly more than one (within [`ROW_SUM_TOLERANCE`]) is
    /// rescaled to sum to one.
    pub fn new(
        classifier_id: impl Into<String>,
        class_labels: Vec<String>,
        sample_ids: Vec<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<ScoreMatrix> {
        let n_classes = class_labels.len();
        if n_classes == 0 {
            return Err(FusionError::Evidence(EvidenceError::EmptyFrame));
        }
        if sample_ids.len() != rows.len() {
            return Err(FusionError::LengthMismatch {
                expected: rows.len(),
                got: sample_ids.len(),
            });
        }
        let mut values = Vec::with_capacity(rows.len() * n_classes);
        for (r, mut row) in rows.into_iter().enumerate() {
            if row.len() != n_classes {
                return Err(FusionError::LengthMismatch {
                    expected: n_classes,
                    got: row.len(),
                });
            }
            for (c, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(FusionError::ScoreOutOfRange { row: r, col: c, value: v });
                }
            }
            let sum: f64 = row.iter().sum();
            if sum > 1.0 + ROW_SUM_TOLERANCE {
                return Err(FusionError::RowSumExceedsOne { row: r, sum });
            }
            if sum > 1.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            }
            values.extend(row);
        }
        Ok(ScoreMatrix {
            classifier_id: classifier_id.into(),
            class_labels,
            sample_ids,
            n_classes,
            values,
        })
    }

    pub fn classifier_id(&self) -> &str {
        &self.classifier_id
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_classes..(s + 1) * self.n_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_classes)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> ScoreMatrix {
        self.classifier_id = id.into();
        self
    }

    /// Argmax per row, ties resolved to the lowest class index.
    pub fn predicted_labels(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }

    /// Writes `sample_id,<class_0>,...` with full round-trip precision.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.class_labels.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.sample_ids.iter().zip(self.rows()) {
            let mut record = vec![id.clone()];
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush()
    }

    /// Parses the score CSV format. Errors carry 1-based line numbers.
    pub fn read_csv<R: Read>(classifier_id: &str, reader: R) -> std::result::Result<ScoreMatrix, ScoreCsvError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| ScoreCsvError::Parse { line: 1, message: e.to_string() })?
            .clone();
        if header.len() < 2 || &header[0] != "sample_id" {
            return Err(ScoreCsvError::Parse {
                line: 1,
                message: "header must be `sample_id,<class_0>,...`".into(),
            });
        }
        let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| ScoreCsvError::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.len() != header.len() {
                return Err(ScoreCsvError::Parse {
                    line,
                    message: format!("expected {} fields, found {}", header.len(), record.len()),
                });
            }
            let row = record
                .iter()
                .skip(1)
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| ScoreCsvError::Parse { line, message: e.to_string() })?;
            ids.push(record[0].to_string());
            rows.push(row);
            lines.push(line);
        }
        if rows.is_empty() {
            return Err(ScoreCsvError::Parse {
                line: 2,
                message: "no score rows".into(),
            });
        }
        ScoreMatrix::new(classifier_id, labels, ids, rows).map_err(|e| {
            let line = match &e {
                FusionError::RowSumExceedsOne { row, .. } | FusionError::ScoreOutOfRange { row, .. } => {
                    lines[*row]
                }
                _ => 0,
            };
            ScoreCsvError::Invalid { line, source: e }
        })
    }
}

#[derive(Debug, Error)]
pub enum ScoreCsvError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Invalid { line: usize, source: FusionError },
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Per-class weights `w` applied to scores before they become masses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoeGenConfig {
    /// `None` means no weighting (all ones).
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl BoeGenConfig {
    pub fn uniform(weight: f64, n_classes: usize) -> BoeGenConfig {
        BoeGenConfig {
            weights: Some(vec![weight; n_classes]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Mixing between credibility (`θ`) and chief support (`1 - θ`).
    pub theta: f64,
    /// Scale of the disagreement degree's arctan argument.
    pub sigma: f64,
    /// Floor for the average divergence and for the weight sum.
    pub epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            theta: 0.5,
            sigma: 2.0,
            epsilon: 1e-12,
        }
    }
}

impl FusionConfig {
    pub fn with_theta(self, theta: f64) -> FusionConfig {
        FusionConfig { theta, ..self }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(FusionError::InvalidConfig(format!("sigma = {}", self.sigma)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(FusionError::InvalidConfig(format!("epsilon = {}", self.epsilon)));
        }
        if !self.theta.is_finite() {
            return Err(FusionError::InvalidConfig(format!("theta = {}", self.theta)));
        }
        Ok(())
    }
}

/// Every intermediate quantity of one fusion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionTrace {
    pub abjs: Vec<f64>,
    pub disagreement: Vec<f64>,
    pub sd_hat: Vec<f64>,
    pub cd_hat: Vec<f64>,
    pub sd_chief_hat: Vec<f64>,
    /// Class index of the chief focal element, `null` when it is composite.
    pub chief_index: Option<usize>,
    pub chief_focal: Vec<usize>,
    pub w_hat: Vec<f64>,
    pub wae: Bba,
    pub fused: Bba,
}

/// `m_i(E_k) = w_k ŷ_{i,k}`, `m_i(𝔈) = 1 - Σ_k w_k ŷ_{i,k}`.
pub fn boes_from_scores(frame: &Arc<Frame>, rows: &[&[f64]], cfg: &BoeGenConfig) -> Result<BoeSet> {
    let n_c = frame.len();
    let weights = match &cfg.weights {
        Some(w) if w.len() != n_c => {
            return Err(FusionError::LengthMismatch {
                expected: n_c,
                got: w.len(),
            })
        }
        Some(w) => {
            if let Some(&bad) = w.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(FusionError::InvalidConfig(format!("class weight {bad} outside [0, 1]")));
            }
            w.clone()
        }
        None => vec![1.0; n_c],
    };
    let mut boes = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n_c {
            return Err(FusionError::LengthMismatch {
                expected: n_c,
                got: row.len(),
            });
        }
        let mut masses: Vec<f64> = row.iter().zip(&weights).map(|(y, w)| y * w).collect();
        if let Some((c, &v)) = masses.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(FusionError::ScoreOutOfRange { row: i, col: c, value: v });
        }
        let sum: f64 = masses.iter().sum();
        if sum > 1.0 + ROW_SUM_TOLERANCE {
            return Err(FusionError::RowSumExceedsOne { row: i, sum });
        }
        if sum > 1.0 {
            masses.iter_mut().for_each(|m| *m /= sum);
        }
        boes.push(Bba::with_ignorance(frame.clone(), &masses)?);
    }
    Ok(BoeSet::new(boes)?)
}

/// Mean BJS divergence of each body to all the others.
pub fn average_bjs(boes: &BoeSet) -> Result<Vec<f64>> {
    let n = boes.len();
    if n < 2 {
        return Err(EvidenceError::TooFewBoes { needed: 2, got: n }.into());
    }
    let mut pair = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = bjs_divergence(&boes.as_slice()[i], &boes.as_slice()[j])?;
            pair[i * n + j] = d;
            pair[j * n + i] = d;
        }
    }
    Ok((0..n)
        .map(|i| pair[i * n..(i + 1) * n].iter().sum::<f64>() / (n - 1) as f64)
        .collect())
}

/// Support and credibility of each body, with the quantities they derive from.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportCredibility {
    pub abjs: Vec<f64>,
    pub disagreement: Vec<f64>,
    pub entropy: Vec<f64>,
    pub sd_hat: Vec<f64>,
    pub cd_hat: Vec<f64>,
}

/// `SD_i = 1 / (max(aBJS_i, ε) · m*_i)`, normalized to sum one;
/// `CD = exp(E_d) ⊙ ŜD`, normalized to a maximum of one.
pub fn support_credibility(boes: &BoeSet, cfg: &FusionConfig) -> Result<SupportCredibility> {
    cfg.validate()?;
    let abjs = average_bjs(boes)?;
    let disagreement = (0..boes.len())
        .map(|q| disagreement_degree(boes, q, cfg.sigma))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let sd: Vec<f64> = abjs
        .iter()
        .zip(&disagreement)
        .map(|(a, m)| 1.0 / (a.max(cfg.epsilon) * m))
        .collect();
    let sd_total: f64 = sd.iter().sum();
    let sd_hat: Vec<f64> = sd.iter().map(|s| s / sd_total).collect();
    let entropy: Vec<f64> = boes.iter().map(deng_entropy).collect();
    let cd: Vec<f64> = entropy.iter().zip(&sd_hat).map(|(e, s)| e.exp() * s).collect();
    let cd_max = cd.iter().copied().fold(f64::MIN, f64::max);
    let cd_hat = cd.iter().map(|c| c / cd_max).collect();
    Ok(SupportCredibility {
        abjs,
        disagreement,
        entropy,
        sd_hat,
        cd_hat,
    })
}

/// Picks the chief focal element and each body's normalized support for it.
///
/// The chief is the class with the largest mean singleton mass (lowest index
/// on ties). Only when no class carries any mean mass does the chief fall
/// back to the largest composite focal set of the mean BBA.
pub fn chief_support(boes: &BoeSet) -> Result<(Vec<f64>, FocalSet)> {
    let mean = boes.mean();
    let frame = boes.frame();
    let singletons = mean.singleton_masses();
    let k = argmax(&singletons);
    let chief = if singletons[k] > 0.0 {
        frame.singleton(k)
    } else {
        let mut best: Option<(FocalSet, f64)> = None;
        for (set, mass) in mean.iter() {
            if best.is_none_or(|(_, m)| mass > m) {
                best = Some((set, mass));
            }
        }
        best.ok_or(FusionError::DegenerateChief)?.0
    };
    let support: Vec<f64> = boes.iter().map(|m| m.mass(chief)).collect();
    let max = support.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(FusionError::DegenerateChief);
    }
    Ok((support.iter().map(|s| s / max).collect(), chief))
}

/// Dempster combination of `copies` copies of `m`.
pub fn self_combine(m: &Bba, copies: usize) -> Result<Bba> {
    let mut acc = m.clone();
    for _ in 1..copies {
        acc = combine_dempster(&acc, m)?;
    }
    Ok(acc)
}

/// Runs the full weighting and combination on one set of bodies.
pub fn fuse(boes: &BoeSet, cfg: &FusionConfig) -> Result<(Bba, FusionTrace)> {
    cfg.validate()?;
    let n = boes.len();
    if n == 1 {
        let m = boes.as_slice()[0].clone();
        let (_, chief) = chief_support(boes)?;
        let trace = FusionTrace {
            abjs: vec![0.0],
            disagreement: vec![0.5],
            sd_hat: vec![1.0],
            cd_hat: vec![1.0],
            sd_chief_hat: vec![1.0],
            chief_index: chief.singleton_index(),
            chief_focal: chief.members().collect(),
            w_hat: vec![1.0],
            wae: m.clone(),
            fused: m.clone(),
        };
        return Ok((m, trace));
    }

    let sc = support_credibility(boes, cfg)?;
    let (sd_chief_hat, chief) = chief_support(boes)?;
    let w: Vec<f64> = sc
        .cd_hat
        .iter()
        .zip(&sd_chief_hat)
        .map(|(cd, sdc)| cfg.theta * cd + (1.0 - cfg.theta) * sdc)
        .collect();
    let w_sum: f64 = w.iter().sum();
    if !(w_sum > cfg.epsilon) {
        return Err(FusionError::InvalidWeights { sum: w_sum });
    }
    let w_hat: Vec<f64> = w.iter().map(|x| x / w_sum).collect();
    let refs: Vec<&Bba> = boes.iter().collect();
    let wae = evidence::weighted_average(&refs, &w_hat).map_err(|e| match e {
        EvidenceError::InvalidMass(_) | EvidenceError::NotNormalized(_) => {
            FusionError::InvalidWeights { sum: w_sum }
        }
        other => other.into(),
    })?;
    let fused = self_combine(&wae, n)?;
    let trace = FusionTrace {
        abjs: sc.abjs,
        disagreement: sc.disagreement,
        sd_hat: sc.sd_hat,
        cd_hat: sc.cd_hat,
        sd_chief_hat,
        chief_index: chief.singleton_index(),
        chief_focal: chief.members().collect(),
        w_hat,
        wae,
        fused: fused.clone(),
    };
    Ok((fused, trace))
}

/// Row-by-row fusion of several classifiers' score matrices.
#[derive(Debug, Clone)]
pub struct FusedBatch {
    /// Singleton masses of the fused BBA per row; failed rows are all zero.
    pub scores: ScoreMatrix,
    /// Residual mass not committed to any single class.
    pub ignorance: Vec<f64>,
    pub rows: Vec<Result<FusionTrace>>,
}

impl FusedBatch {
    pub fn failed_rows(&self) -> impl Iterator<Item = (usize, &FusionError)> {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.as_ref().err().map(|e| (i, e)))
    }

    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.is_ok())
    }
}

/// Fuses row `s` of every matrix into row `s` of the output. Row failures are
/// recorded per row and do not abort the batch.
pub fn fuse_batch(matrices: &[&ScoreMatrix], cfg: &FusionConfig, gen: &BoeGenConfig) -> Result<FusedBatch> {
    cfg.validate()?;
    let first = *matrices.first().ok_or(EvidenceError::TooFewBoes { needed: 1, got: 0 })?;
    for m in &matrices[1..] {
        if m.class_labels() != first.class_labels() {
            return Err(FusionError::ShapeMismatch {
                id: m.classifier_id().into(),
                reason: "class labels differ".into(),
            });
        }
        if m.n_samples() != first.n_samples() {
            return Err(FusionError::ShapeMismatch {
                id: m.classifier_id().into(),
                reason: format!("{} rows instead of {}", m.n_samples(), first.n_samples()),
            });
        }
    }
    let frame = Frame::new(first.class_labels().iter().cloned())?;
    let rows: Vec<Result<FusionTrace>> = (0..first.n_samples())
        .into_par_iter()
        .map(|s| {
            let row_scores: Vec<&[f64]> = matrices.iter().map(|m| m.row(s)).collect();
            let boes = boes_from_scores(&frame, &row_scores, gen)?;
            fuse(&boes, cfg).map(|(_, trace)| trace)
        })
        .collect();
    let n_c = first.n_classes();
    let mut out = Vec::with_capacity(rows.len());
    let mut ignorance = Vec::with_capacity(rows.len());
    for r in &rows {
        match r {
            Ok(trace) => {
                let singles = trace.fused.singleton_masses();
                ignorance.push((1.0 - singles.iter().sum::<f64>()).max(0.0));
                out.push(singles);
            }
            Err(_) => {
                ignorance.push(0.0);
                out.push(vec![0.0; n_c]);
            }
        }
    }
    let scores = ScoreMatrix::new("fused", first.class_labels().to_vec(), first.sample_ids().to_vec(), out)?;
    Ok(FusedBatch { scores, ignorance, rows })
}
