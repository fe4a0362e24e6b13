//! Plug-in information measures over discrete label vectors, the classifier
//! ranking built on them, and the incremental (ensemble size × θ) search.
//!
//! All logarithms are base 2.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{fuse_batch, BoeGenConfig, FusionConfig, FusionError, ScoreMatrix};
use crate::pipeline::evaluate_accuracy;

/// Scores closer than this count as tied; ties go to the lowest index.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InfoError {
    #[error("label vector is empty")]
    EmptyInput,
    #[error("label vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label {label} is outside [0, {n_classes})")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("no classifiers to rank")]
    EmptyPool,
    #[error("theta grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

pub type Result<T> = std::result::Result<T, InfoError>;

/// Class index per sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(Vec<usize>);

impl LabelVector {
    pub fn new(values: Vec<usize>) -> Result<LabelVector> {
        if values.is_empty() {
            return Err(InfoError::EmptyInput);
        }
        Ok(LabelVector(values))
    }

    pub fn with_classes(values: Vec<usize>, n_classes: usize) -> Result<LabelVector> {
        if let Some(&label) = values.iter().find(|&&v| v >= n_classes) {
            return Err(InfoError::LabelOutOfRange { label, n_classes });
        }
        LabelVector::new(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn n_classes(&self) -> usize {
        self.0.iter().max().map_or(0, |m| m + 1)
    }

    /// Indices of the samples carrying `label`.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LabelVector {
        LabelVector(indices.iter().map(|&i| self.0[i]).collect())
    }
}

impl From<LabelVector> for Vec<usize> {
    fn from(v: LabelVector) -> Self {
        v.0
    }
}

fn check_lengths(vars: &[&LabelVector]) -> Result<usize> {
    let n = vars[0].len();
    if n == 0 {
        return Err(InfoError::EmptyInput);
    }
    for v in &vars[1..] {
        if v.len() != n {
            return Err(InfoError::LengthMismatch(n, v.len()));
        }
    }
    Ok(n)
}

/// Empirical joint entropy of the given variables.
fn joint_entropy(vars: &[&LabelVector]) -> f64 {
    let n = vars[0].len();
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for s in 0..n {
        let key: Vec<usize> = vars.iter().map(|v| v.0[s]).collect();
        *counts.entry(key).or_insert(0) += 1;
    }
    // Sorted counts make the floating-point sum independent of hash order
    // and of the order the variables were passed in.
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    let n = n as f64;
    c.into_iter()
        .map(|k| {
            let p = k as f64 / n;
            -p * p.log2()
        })
        .sum()
}

pub fn entropy(x: &LabelVector) -> Result<f64> {
    check_lengths(&[x])?;
    Ok(joint_entropy(&[x]))
}

/// `MI(x; y) = H(x) + H(y) - H(x, y)`.
pub fn mutual_information(x: &LabelVector, y: &LabelVector) -> Result<f64> {
    check_lengths(&[x, y])?;
    let mi = joint_entropy(&[x]) + joint_entropy(&[y]) - joint_entropy(&[x, y]);
    Ok(mi.max(0.0))
}

/// `I(x; y | z) = H(x | z) - H(x | y, z)`.
pub fn conditional_mi(x: &LabelVector, y: &LabelVector, z: &LabelVector) -> Result<f64> {
    check_lengths(&[x, y, z])?;
    let h_xz = joint_entropy(&[x, z]);
    let h_z = joint_entropy(&[z]);
    let h_xyz = joint_entropy(&[x, y, z]);
    let h_yz = joint_entropy(&[y, z]);
    Ok(((h_xz - h_z) - (h_xyz - h_yz)).max(0.0))
}

/// `JMI(x, w; y) = I(x; y | w) + MI(w; y)`.
pub fn joint_mi(x: &LabelVector, w: &LabelVector, y: &LabelVector) -> Result<f64> {
    Ok(conditional_mi(x, y, w)? + mutual_information(w, y)?)
}

/// Order produced by the ranking together with the score that won each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
}

fn pick_best(candidates: &[usize], mut score: impl FnMut(usize) -> Result<f64>) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &i in candidates {
        let s = score(i)?;
        if best.is_none_or(|(_, b)| s > b + TIE_TOLERANCE) {
            best = Some((i, s));
        }
    }
    best.ok_or(InfoError::EmptyPool)
}

/// Greedy ranking: most informative classifier first, then the one adding
/// most information given the first, then max-of-min joint information.
pub fn rank_classifiers(predictions: &[LabelVector], y: &LabelVector) -> Result<Ranking> {
    if predictions.is_empty() {
        return Err(InfoError::EmptyPool);
    }
    let mut all: Vec<&LabelVector> = predictions.iter().collect();
    all.push(y);
    check_lengths(&all)?;

    let mut remaining: Vec<usize> = (0..predictions.len()).collect();
    let mut order = Vec::with_capacity(predictions.len());
    let mut scores = Vec::with_capacity(predictions.len());

    let (first, s) = pick_best(&remaining, |i| mutual_information(&predictions[i], y))?;
    order.push(first);
    scores.push(s);
    remaining.retain(|&i| i != first);

    if !remaining.is_empty() {
        let (second, s) = pick_best(&remaining, |i| {
            let mut best = f64::MIN;
            for &j in &order {
                best = best.max(conditional_mi(&predictions[i], y, &predictions[j])?);
            }
            Ok(best)
        })?;
        order.push(second);
        scores.push(s);
        remaining.retain(|&i| i != second);
    }

    while !remaining.is_empty() {
        let (next, s) = pick_best(&remaining, |i| {
            let mut worst = f64::MAX;
            for &j in &order {
                worst = worst.min(joint_mi(&predictions[i], &predictions[j], y)?);
            }
            Ok(worst)
        })?;
        order.push(next);
        scores.push(s);
        remaining.retain(|&i| i != next);
    }
    Ok(Ranking { order, scores })
}

/// Ranking plus the ensemble size and θ picked on validation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
    pub selected_size: usize,
    pub selected_theta: f64,
    pub validation_accuracy: f64,
    /// Fused validation accuracy per `[size - 1][theta index]`.
    pub grid: Vec<Vec<f64>>,
}

/// Adds ranked classifiers one at a time and sweeps θ for every prefix,
/// keeping the most accurate cell. Ties prefer the smaller ensemble, then the
/// smaller θ. A cell with any row whose weights degenerate scores zero.
pub fn select_ensemble(
    pool: &[ScoreMatrix],
    ranking: &Ranking,
    y_val: &LabelVector,
    theta_grid: &[f64],
    fusion: &FusionConfig,
    gen: &BoeGenConfig,
) -> Result<RankingResult> {
    if pool.is_empty() || ranking.order.is_empty() {
        return Err(InfoError::EmptyPool);
    }
    if theta_grid.is_empty() {
        return Err(InfoError::EmptyGrid);
    }
    let ranked: Vec<&ScoreMatrix> = ranking.order.iter().map(|&i| &pool[i]).collect();
    let n_theta = theta_grid.len();
    let cells: Vec<(usize, usize)> = (1..=ranked.len())
        .flat_map(|size| (0..n_theta).map(move |t| (size, t)))
        .collect();
    let accuracies = cells
        .par_iter()
        .map(|&(size, t)| {
            let cfg = fusion.with_theta(theta_grid[t]);
            let batch = fuse_batch(&ranked[..size], &cfg, gen)?;
            if !batch.all_ok() {
                return Ok(0.0);
            }
            Ok(evaluate_accuracy(&batch.scores, y_val)?)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut theta_order: Vec<usize> = (0..n_theta).collect();
    theta_order.sort_by(|&a, &b| theta_grid[a].total_cmp(&theta_grid[b]));
    let mut best: Option<(usize, usize, f64)> = None;
    for size in 1..=ranked.len() {
        for &t in &theta_order {
            let acc = accuracies[(size - 1) * n_theta + t];
            if best.is_none_or(|(_, _, b)| acc > b) {
                best = Some((size, t, acc));
            }
        }
    }
    let (size, t, acc) = best.expect("grid is non-empty");
    Ok(RankingResult {
        order: ranking.order.clone(),
        scores: ranking.scores.clone(),
        selected_size: size,
        selected_theta: theta_grid[t],
        validation_accuracy: acc,
        grid: accuracies.chunks(n_theta).map(<[f64]>::to_vec).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[usize]) -> LabelVector {
        LabelVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&lv(&[2, 2, 2])).unwrap(), 0.0);
        assert!((entropy(&lv(&[0, 1, 0, 1])).unwrap() - 1.0).abs() < 1e-15);
        let h = entropy(&lv(&[0, 0, 0, 1])).unwrap();
        let want = -(0.75f64 * 0.75f64.log2() + 0.25 * 0.25f64.log2());
        assert!((h - want).abs() < 1e-15);
        assert!((h - 0.8113).abs() < 1e-4);
        assert_eq!(LabelVector::new(vec![]), Err(InfoError::EmptyInput));
        assert!(matches!(
            LabelVector::with_classes(vec![0, 3], 2),
            Err(InfoError::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn mutual_information_cases() {
        let x = lv(&[0, 1, 2, 0, 1, 2]);
        assert!((mutual_information(&x, &x).unwrap() - entropy(&x).unwrap()).abs() < 1e-12);
        // Product joint: x uniform over 2, y uniform over 2, all 4 pairs once.
        assert!(mutual_information(&lv(&[0, 0, 1, 1]), &lv(&[0, 1, 0, 1])).unwrap().abs() < 1e-15);
        // Joint counts [[2,1],[1,2]].
        let a = lv(&[0, 0, 0, 1, 1, 1]);
        let b = lv(&[0, 0, 1, 0, 1, 1]);
        let p: [f64; 2] = [2.0 / 6.0, 1.0 / 6.0];
        let want: f64 = 2.0 * p[0] * (p[0] / 0.25).log2() + 2.0 * p[1] * (p[1] / 0.25).log2();
        let got = mutual_information(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.0817).abs() < 1e-4);
        assert_eq!(mutual_information(&a, &lv(&[0])), Err(InfoError::LengthMismatch(6, 1)));
    }

    #[test]
    fn conditional_and_joint_cases() {
        let x = lv(&[0, 1, 1, 0, 1, 0, 0, 1]);
        let y = lv(&[1, 1, 0, 0, 1, 0, 1, 1]);
        let c = lv(&[3; 8]);
        let mi = mutual_information(&x, &y).unwrap();
        assert!((conditional_mi(&x, &y, &c).unwrap() - mi).abs() < 1e-12);
        assert!(conditional_mi(&x, &y, &x).unwrap().abs() < 1e-12);
        assert!((joint_mi(&x, &c, &y).unwrap() - mi).abs() < 1e-12);
        assert!((joint_mi(&x, &x, &y).unwrap() - mi).abs() < 1e-12);
    }

    #[test]
    fn ranking_cases() {
        let y = lv(&[0, 1, 0, 1, 1, 0, 1, 0]);
        let noisy = lv(&[0, 1, 1, 1, 0, 0, 1, 1]);
        let r = rank_classifiers(&[noisy.clone(), y.clone(), noisy.clone()], &y).unwrap();
        assert_eq!(r.order[0], 1);
        let same = rank_classifiers(&[noisy.clone(), noisy.clone(), noisy.clone(), noisy], &y).unwrap();
        assert_eq!(same.order, vec![0, 1, 2, 3]);
        assert_eq!(rank_classifiers(&[], &y), Err(InfoError::EmptyPool));
    }
}
