//! Experiment pipeline: synthetic FRF data, stratified splits, minority
//! oversampling, noise injection, bandwidth splitting and the repeated
//! end-to-end harness (channels → lasso selection → learners → ranking →
//! ensemble/θ selection → fusion).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    generate_channels, normalize_minmax, select_frequencies, FeatureError, FrequencySelection, SpectrumDataset,
    ALL_CHANNELS, CHANNEL_NAMES,
};
use crate::fusion::{argmax, BoeGenConfig, FusionConfig, FusionError, ScoreMatrix};
use crate::infotheory::{rank_classifiers, select_ensemble, InfoError, LabelVector, RankingResult};
use crate::learners::{train, LearnerConfig, LearnerError};

pub const HEALTHY: &str = "healthy";
pub const DEFECTED: &str = "defected";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("class `{class}` has {count} samples; at least 2 are needed to split")]
    ClassTooSmall { class: String, count: usize },
    #[error("cannot split {n_f} frequency bins into {requested} sections")]
    TooManySections { requested: usize, n_f: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Info(#[from] InfoError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Mixes a master seed and a stream index into an independent seed
/// (SplitMix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Modal-superposition model behind the synthetic spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_healthy: usize,
    pub n_defected: usize,
    pub n_f: usize,
    pub seed: u64,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    /// Fixed number of modes; drawn from 8..=15 when absent.
    pub n_modes: Option<usize>,
    /// Nominal loss factor η.
    pub damping: f64,
    /// Relative per-sample scatter of modal frequencies (all samples).
    pub frequency_jitter: f64,
    pub damping_jitter: f64,
    pub residue_jitter: f64,
    /// Range of the relative downward shift of a damaged mode.
    pub shift_min: f64,
    pub shift_max: f64,
    /// Largest relative damping change of a damaged mode.
    pub damping_perturbation: f64,
    /// Probability that a given eligible mode is damaged.
    pub damaged_mode_fraction: f64,
    /// Restricts damage to modes inside `[lo, hi)` Hz.
    pub signature_band_hz: Option<(f64, f64)>,
    /// RMS of the sensor noise floor relative to each spectrum's RMS.
    pub measurement_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_healthy: 60,
            n_defected: 30,
            n_f: 1024,
            seed: 7,
            f_min_hz: 3000.0,
            f_max_hz: 38000.0,
            n_modes: None,
            damping: 0.01,
            frequency_jitter: 0.004,
            damping_jitter: 0.1,
            residue_jitter: 0.1,
            shift_min: 0.005,
            shift_max: 0.02,
            damping_perturbation: 0.5,
            damaged_mode_fraction: 0.3,
            signature_band_hz: None,
            measurement_noise: 0.02,
        }
    }
}

/// A synthetic dataset plus the nominal modal frequencies it was built from.
#[derive(Debug, Clone)]
pub struct Synthesized {
    pub dataset: SpectrumDataset,
    pub modal_frequencies_hz: Vec<f64>,
}

/// Default synthetic two-sensor |FRF| dataset, healthy samples first.
pub fn synthesize_frf_dataset(n_healthy: usize, n_defected: usize, n_f: usize, seed: u64) -> Result<SpectrumDataset> {
    let cfg = SynthConfig {
        n_healthy,
        n_defected,
        n_f,
        seed,
        ..SynthConfig::default()
    };
    Ok(synthesize(&cfg)?.dataset)
}

/// `|Σ_k r_k / (f_k² − f² + i·η_k·f_k²)|` per sensor, with frequencies in kHz.
pub fn synthesize(cfg: &SynthConfig) -> Result<Synthesized> {
    if cfg.n_healthy < 1 || cfg.n_defected < 1 {
        return Err(PipelineError::InvalidCounts("need at least one sample per class".into()));
    }
    if cfg.n_f < 16 {
        return Err(PipelineError::InvalidCounts(format!("n_f = {} < 16", cfg.n_f)));
    }
    if cfg.n_modes == Some(0) {
        return Err(PipelineError::InvalidCounts("at least one mode is required".into()));
    }
    if !(cfg.f_max_hz > cfg.f_min_hz && cfg.f_min_hz > 0.0) || !(cfg.damping > 0.0) {
        return Err(PipelineError::InvalidConfig("frequency range or damping".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_modes = cfg.n_modes.unwrap_or_else(|| rng.random_range(8..=15));
    let span = cfg.f_max_hz - cfg.f_min_hz;
    let slot = span / n_modes as f64;
    let modes: Vec<f64> = (0..n_modes)
        .map(|k| cfg.f_min_hz + slot * (k as f64 + rng.random_range(0.2..0.8)))
        .collect();
    let damping: Vec<f64> = (0..n_modes).map(|_| cfg.damping * rng.random_range(0.8..1.2)).collect();
    let residue = |rng: &mut ChaCha8Rng| {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.random_range(0.5..1.5)
    };
    let residues: [Vec<f64>; 2] = [
        (0..n_modes).map(|_| residue(&mut rng)).collect(),
        (0..n_modes).map(|_| residue(&mut rng)).collect(),
    ];
    let eligible: Vec<usize> = (0..n_modes)
        .filter(|&k| cfg.signature_band_hz.is_none_or(|(lo, hi)| modes[k] >= lo && modes[k] < hi))
        .collect();
    if eligible.is_empty() {
        return Err(PipelineError::InvalidConfig("no mode falls inside the signature band".into()));
    }

    let n_f = cfg.n_f;
    let frequencies: Vec<f64> = (0..n_f)
        .map(|i| cfg.f_min_hz + span * i as f64 / (n_f - 1) as f64)
        .collect();
    let n_s = cfg.n_healthy + cfg.n_defected;
    let mut x = [DMatrix::zeros(n_s, n_f), DMatrix::zeros(n_s, n_f)];
    let mut labels = Vec::with_capacity(n_s);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    for s in 0..n_s {
        let defected = s >= cfg.n_healthy;
        labels.push(usize::from(defected));
        let mut f_k: Vec<f64> = modes.iter().map(|f| f * (1.0 + cfg.frequency_jitter * gauss(&mut rng))).collect();
        let mut eta: Vec<f64> = damping
            .iter()
            .map(|e| (e * (1.0 + cfg.damping_jitter * gauss(&mut rng))).max(1e-5))
            .collect();
        let r: Vec<Vec<f64>> = residues
            .iter()
            .map(|rs| rs.iter().map(|r| r * (1.0 + cfg.residue_jitter * gauss(&mut rng))).collect())
            .collect();
        if defected {
            let mut damaged: Vec<usize> = eligible
                .iter()
                .copied()
                .filter(|_| rng.random_bool(cfg.damaged_mode_fraction.clamp(0.0, 1.0)))
                .collect();
            if damaged.is_empty() {
                damaged.push(*eligible.choose(&mut rng).expect("non-empty"));
            }
            for k in damaged {
                f_k[k] *= 1.0 - rng.random_range(cfg.shift_min..=cfg.shift_max);
                let p = cfg.damping_perturbation;
                if p > 0.0 {
                    eta[k] *= 1.0 + rng.random_range(-p..=p);
                }
            }
        }
        for (i, f) in frequencies.iter().enumerate() {
            let w = f / 1000.0;
            for (sensor, xs) in x.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for k in 0..n_modes {
                    let wk = f_k[k] / 1000.0;
                    let a = wk * wk - w * w;
                    let b = eta[k] * wk * wk;
                    let den = a * a + b * b;
                    re += r[sensor][k] * a / den;
                    im -= r[sensor][k] * b / den;
                }
                xs[(s, i)] = re.hypot(im);
            }
        }
        if cfg.measurement_noise > 0.0 {
            for xs in x.iter_mut() {
                let rms = (xs.row(s).iter().map(|v| v * v).sum::<f64>() / n_f as f64).sqrt();
                for i in 0..n_f {
                    let e: f64 = gauss(&mut rng);
                    xs[(s, i)] = (xs[(s, i)] + cfg.measurement_noise * rms * e).max(0.0);
                }
            }
        }
    }
    let [x1, x2] = x;
    let channels = BTreeMap::from([("x1".to_string(), x1), ("x2".to_string(), x2)]);
    let dataset = SpectrumDataset::new(
        frequencies,
        channels,
        LabelVector::new(labels).map_err(PipelineError::Info)?,
        vec![HEALTHY.to_string(), DEFECTED.to_string()],
        (0..n_s).map(|i| format!("s{i:04}")).collect(),
    )?;
    Ok(Synthesized {
        dataset,
        modal_frequencies_hz: modes,
    })
}

/// Stratified split: per class, `floor(n · fraction)` samples go to training
/// (kept within `1..n`), the rest to validation.
pub fn split_train_validation(
    dataset: &SpectrumDataset,
    fraction: f64,
    seed: u64,
) -> Result<(SpectrumDataset, SpectrumDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PipelineError::InvalidConfig(format!("train fraction {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (c, name) in dataset.class_names().iter().enumerate() {
        let mut idx = dataset.labels().indices_of(c);
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(PipelineError::ClassTooSmall {
                class: name.clone(),
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let n_train = ((idx.len() as f64 * fraction + 1e-9).floor() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        valid.extend_from_slice(&idx[n_train..]);
    }
    Ok((dataset.select_samples(&train), dataset.select_samples(&valid)))
}

/// Repeats randomly drawn minority samples until every class matches the
/// majority count.
pub fn oversample_minority(train: &SpectrumDataset, seed: u64) -> SpectrumDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class: Vec<Vec<usize>> = (0..train.class_names().len())
        .map(|c| train.labels().indices_of(c))
        .collect();
    let majority = per_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut rows: Vec<usize> = (0..train.n_samples()).collect();
    for idx in per_class.iter().filter(|v| !v.is_empty()) {
        for _ in idx.len()..majority {
            rows.push(idx[rng.random_range(0..idx.len())]);
        }
    }
    if rows.len() == train.n_samples() {
        return train.clone();
    }
    train.select_samples(&rows)
}

/// Noise level and the SNR it implies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub nsr_percent: f64,
    /// `-20·log10(nsr / 100)`; absent for the noise-free case.
    pub snr_db: Option<f64>,
}

impl NoiseRecord {
    pub fn new(nsr_percent: f64) -> NoiseRecord {
        NoiseRecord {
            nsr_percent,
            snr_db: (nsr_percent > 0.0).then(|| -20.0 * (nsr_percent / 100.0).log10()),
        }
    }
}

/// Adds white Gaussian noise to every spectrum. Each draw is rescaled so its
/// RMS is exactly `nsr / 100` times the RMS of the spectrum it pollutes;
/// negative results are floored at zero.
pub fn add_noise(dataset: &SpectrumDataset, nsr_percent: f64, seed: u64) -> Result<(SpectrumDataset, NoiseRecord)> {
    if !(nsr_percent >= 0.0 && nsr_percent.is_finite()) {
        return Err(PipelineError::InvalidConfig(format!("nsr {nsr_percent}")));
    }
    let record = NoiseRecord::new(nsr_percent);
    if nsr_percent == 0.0 {
        return Ok((dataset.clone(), record));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ratio = nsr_percent / 100.0;
    let noisy = dataset.map_channels(|_, m| {
        let mut out = m.clone();
        for s in 0..m.nrows() {
            let row = m.row(s);
            let signal_rms = (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64).sqrt();
            let draw: Vec<f64> = (0..row.len()).map(|_| rng.sample(StandardNormal)).collect();
            let draw_rms = (draw.iter().map(|v| v * v).sum::<f64>() / draw.len() as f64).sqrt();
            let scale = if draw_rms > 0.0 { ratio * signal_rms / draw_rms } else { 0.0 };
            for (i, d) in draw.iter().enumerate() {
                out[(s, i)] = (m[(s, i)] + scale * d).max(0.0);
            }
        }
        out
    });
    Ok((noisy, record))
}

/// One contiguous frequency section.
#[derive(Debug, Clone)]
pub struct BandSection {
    pub index: usize,
    pub start_bin: usize,
    pub end_bin: usize,
    pub start_frequency_hz: f64,
    pub dataset: SpectrumDataset,
}

/// Splits the frequency axis into `n_sections` contiguous sections; the
/// first `n_f mod n_sections` sections get one extra bin.
pub fn bandwidth_split(dataset: &SpectrumDataset, n_sections: usize) -> Result<Vec<BandSection>> {
    let n_f = dataset.n_frequencies();
    if n_sections == 0 || n_sections > n_f {
        return Err(PipelineError::TooManySections {
            requested: n_sections,
            n_f,
        });
    }
    let base = n_f / n_sections;
    let extra = n_f % n_sections;
    let mut start = 0;
    let mut sections = Vec::with_capacity(n_sections);
    for index in 0..n_sections {
        let len = base + usize::from(index < extra);
        let end = start + len;
        sections.push(BandSection {
            index,
            start_bin: start,
            end_bin: end,
            start_frequency_hz: dataset.frequencies()[start],
            dataset: if n_sections == 1 {
                dataset.clone()
            } else {
                dataset.select_frequencies(start, end)
            },
        });
        start = end;
    }
    Ok(sections)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn evaluate_accuracy(scores: &ScoreMatrix, labels: &LabelVector) -> std::result::Result<f64, FusionError> {
    if scores.n_samples() != labels.len() {
        return Err(FusionError::LengthMismatch {
            expected: scores.n_samples(),
            got: labels.len(),
        });
    }
    let correct = scores
        .rows()
        .zip(labels.as_slice())
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn default_theta_grid() -> Vec<f64> {
    (0..10).map(|i| -0.5 + 0.5 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub repetitions: usize,
    pub train_fraction: f64,
    pub theta_grid: Vec<f64>,
    pub nsr_levels: Vec<f64>,
    pub bandwidth_sections: Vec<usize>,
    pub learner: LearnerConfig,
    pub fusion: FusionConfig,
    pub boe: BoeGenConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2021,
            repetitions: 50,
            train_fraction: 0.7,
            theta_grid: default_theta_grid(),
            nsr_levels: vec![0.0, 10.0, 20.0, 50.0, 80.0, 120.0, 160.0],
            bandwidth_sections: vec![1, 2, 4, 8, 16],
            learner: LearnerConfig::default(),
            fusion: FusionConfig::default(),
            boe: BoeGenConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.repetitions == 0 {
            return bad("repetitions must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.theta_grid.is_empty() || self.theta_grid.iter().any(|t| !t.is_finite()) {
            return bad("theta_grid must be a non-empty list of finite values");
        }
        if self.nsr_levels.is_empty() || self.nsr_levels.iter().any(|v| !(*v >= 0.0)) {
            return bad("nsr_levels must be a non-empty list of non-negative values");
        }
        if self.bandwidth_sections.is_empty() || self.bandwidth_sections.contains(&0) {
            return bad("bandwidth_sections must be a non-empty list of positive counts");
        }
        Ok(())
    }
}

/// Names of the nine learners: one per generated channel, then `all`.
pub fn learner_names() -> Vec<String> {
    CHANNEL_NAMES
        .iter()
        .copied()
        .chain(std::iter::once(ALL_CHANNELS))
        .map(str::to_string)
        .collect()
}

/// Everything one repetition produced.
#[derive(Debug, Clone)]
pub struct RepetitionOutcome {
    pub repetition: usize,
    pub seed: u64,
    pub learner_names: Vec<String>,
    pub learner_accuracies: Vec<f64>,
    pub validation_scores: Vec<ScoreMatrix>,
    pub validation_labels: LabelVector,
    pub selection: FrequencySelection,
    pub ranking: RankingResult,
}

impl RepetitionOutcome {
    pub fn fused_accuracy(&self) -> f64 {
        self.ranking.validation_accuracy
    }
}

fn columns_of(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    if cols.is_empty() {
        DMatrix::zeros(m.nrows(), 0)
    } else {
        m.select_columns(cols)
    }
}

fn hstack(parts: &[DMatrix<f64>], rows: usize) -> DMatrix<f64> {
    let width: usize = parts.iter().map(|m| m.ncols()).sum();
    let mut out = DMatrix::zeros(rows, width);
    let mut at = 0;
    for m in parts {
        out.columns_mut(at, m.ncols()).copy_from(m);
        at += m.ncols();
    }
    out
}

/// One pass of the full procedure with seeds derived from
/// `(cfg.seed, repetition)`.
pub fn run_repetition(dataset: &SpectrumDataset, cfg: &ExperimentConfig, repetition: usize) -> Result<RepetitionOutcome> {
    let seed = derive_seed(cfg.seed, repetition as u64);
    let (train_set, valid_set) = split_train_validation(dataset, cfg.train_fraction, derive_seed(seed, 1))?;
    let train_set = oversample_minority(&train_set, derive_seed(seed, 2));
    let n_classes = dataset.class_names().len();

    let raw_train = generate_channels(train_set.channel("x1")?, train_set.channel("x2")?)?;
    let raw_valid = generate_channels(valid_set.channel("x1")?, valid_set.channel("x2")?)?;
    let mut train_ch = Vec::with_capacity(raw_train.len());
    let mut valid_ch = Vec::with_capacity(raw_valid.len());
    for ((name, t), (_, v)) in raw_train.into_iter().zip(raw_valid) {
        let (tn, stats) = normalize_minmax(&t, None);
        let (vn, _) = normalize_minmax(&v, Some(stats));
        train_ch.push((name.clone(), tn));
        valid_ch.push((name, vn));
    }
    let selection = select_frequencies(&train_ch, train_set.labels(), n_classes)?;

    let mut inputs: Vec<(DMatrix<f64>, DMatrix<f64>)> = train_ch
        .iter()
        .zip(&valid_ch)
        .zip(&selection.channels)
        .map(|(((_, t), (_, v)), sel)| (columns_of(t, &sel.indices), columns_of(v, &sel.indices)))
        .collect();
    let all_train: Vec<DMatrix<f64>> = inputs.iter().map(|(t, _)| t.clone()).collect();
    let all_valid: Vec<DMatrix<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    inputs.push((
        hstack(&all_train, train_set.n_samples()),
        hstack(&all_valid, valid_set.n_samples()),
    ));

    let names = learner_names();
    let validation_scores = inputs
        .par_iter()
        .enumerate()
        .map(|(i, (xt, xv))| {
            let lcfg = LearnerConfig {
                seed: derive_seed(seed, 100 + i as u64),
                ..cfg.learner.clone()
            };
            let model = train(xt, train_set.labels(), n_classes, &lcfg)?;
            Ok(model.predict_scores(&names[i], xv, valid_set.sample_ids(), dataset.class_names())?)
        })
        .collect::<Result<Vec<ScoreMatrix>>>()?;

    let y_val = valid_set.labels().clone();
    let learner_accuracies = validation_scores
        .iter()
        .map(|s| evaluate_accuracy(s, &y_val))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let predictions = validation_scores
        .iter()
        .map(|s| LabelVector::new(s.predicted_labels()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let order = rank_classifiers(&predictions, &y_val)?;
    let ranking = select_ensemble(&validation_scores, &order, &y_val, &cfg.theta_grid, &cfg.fusion, &cfg.boe)?;
    Ok(RepetitionOutcome {
        repetition,
        seed,
        learner_names: names,
        learner_accuracies,
        validation_scores,
        validation_labels: y_val,
        selection,
        ranking,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyStats {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl AccuracyStats {
    pub fn from_values(values: Vec<f64>) -> AccuracyStats {
        if values.is_empty() {
            return AccuracyStats {
                mean: 0.0,
                median: 0.0,
                std: 0.0,
                values,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 0 {
            0.5 * (sorted[mid - 1] + sorted[mid])
        } else {
            sorted[mid]
        };
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        AccuracyStats {
            mean,
            median,
            std,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerStats {
    pub name: String,
    #[serde(flatten)]
    pub stats: AccuracyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerLearnerReport {
    pub learners: Vec<LearnerStats>,
    /// The learner with the highest mean accuracy (first on ties).
    pub best: LearnerStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionFailure {
    pub repetition: usize,
    pub error: String,
}

/// Aggregates over the repetitions of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub per_learner: PerLearnerReport,
    pub fused: AccuracyStats,
    pub selected_sizes: Vec<usize>,
    pub selected_thetas: Vec<f64>,
    /// Union of selected frequency lines per repetition.
    pub selected_frequency_counts: Vec<usize>,
    pub failures: Vec<RepetitionFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevelReport {
    pub nsr_percent: f64,
    pub snr_db: Option<f64>,
    pub fused: AccuracyStats,
    pub best_learner: String,
    pub best_learner_mean: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub sections: usize,
    pub band_index: usize,
    pub start_bin: usize,
    pub end_bin: usize,
    pub start_frequency_hz: f64,
    pub fused: AccuracyStats,
    pub best_learner: String,
    pub best_learner_mean: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_learner: PerLearnerReport,
    pub fused: AccuracyStats,
    pub selected_sizes: Vec<usize>,
    pub selected_thetas: Vec<f64>,
    pub selected_frequency_counts: Vec<usize>,
    pub failures: Vec<RepetitionFailure>,
    pub noise_sweep: Option<Vec<NoiseLevelReport>>,
    pub bandwidth_sweep: Option<Vec<BandReport>>,
    pub config_echo: ExperimentConfig,
}

impl MetricsReport {
    pub fn from_summary(summary: ExperimentSummary, cfg: &ExperimentConfig) -> MetricsReport {
        MetricsReport {
            per_learner: summary.per_learner,
            fused: summary.fused,
            selected_sizes: summary.selected_sizes,
            selected_thetas: summary.selected_thetas,
            selected_frequency_counts: summary.selected_frequency_counts,
            failures: summary.failures,
            noise_sweep: None,
            bandwidth_sweep: None,
            config_echo: cfg.clone(),
        }
    }

    /// `repetition,learner,accuracy` rows, fused results under `fused`.
    pub fn write_accuracy_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["repetition", "learner", "accuracy"])?;
        let reps = self.fused.values.len();
        for r in 0..reps {
            for l in &self.per_learner.learners {
                w.write_record([r.to_string(), l.name.clone(), l.stats.values[r].to_string()])?;
            }
            w.write_record([r.to_string(), "fused".to_string(), self.fused.values[r].to_string()])?;
        }
        w.flush()
    }
}

/// Runs every repetition (in parallel on the current rayon pool) and keeps
/// the outcomes in repetition order. Failed repetitions are reported, not
/// fatal.
pub fn run_repetitions(
    dataset: &SpectrumDataset,
    cfg: &ExperimentConfig,
) -> Result<Vec<std::result::Result<RepetitionOutcome, String>>> {
    cfg.validate()?;
    Ok((0..cfg.repetitions)
        .into_par_iter()
        .map(|r| run_repetition(dataset, cfg, r).map_err(|e| e.to_string()))
        .collect())
}

pub fn summarize(outcomes: &[std::result::Result<RepetitionOutcome, String>]) -> ExperimentSummary {
    let names = learner_names();
    let mut per_learner: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut fused = Vec::new();
    let mut sizes = Vec::new();
    let mut thetas = Vec::new();
    let mut counts = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.iter().enumerate() {
        match o {
            Ok(o) => {
                for (acc, v) in per_learner.iter_mut().zip(&o.learner_accuracies) {
                    acc.push(*v);
                }
                fused.push(o.fused_accuracy());
                sizes.push(o.ranking.selected_size);
                thetas.push(o.ranking.selected_theta);
                counts.push(o.selection.union.len());
            }
            Err(e) => failures.push(RepetitionFailure {
                repetition: r,
                error: e.clone(),
            }),
        }
    }
    let learners: Vec<LearnerStats> = names
        .into_iter()
        .zip(per_learner)
        .map(|(name, v)| LearnerStats {
            name,
            stats: AccuracyStats::from_values(v),
        })
        .collect();
    let mut best = 0;
    for (i, l) in learners.iter().enumerate() {
        if l.stats.mean > learners[best].stats.mean {
            best = i;
        }
    }
    ExperimentSummary {
        per_learner: PerLearnerReport {
            best: learners[best].clone(),
            learners,
        },
        fused: AccuracyStats::from_values(fused),
        selected_sizes: sizes,
        selected_thetas: thetas,
        selected_frequency_counts: counts,
        failures,
    }
}

/// Baseline experiment; sweeps are added separately.
pub fn run_experiment(dataset: &SpectrumDataset, cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let outcomes = run_repetitions(dataset, cfg)?;
    Ok(MetricsReport::from_summary(summarize(&outcomes), cfg))
}

/// Repeats the experiment on noisy copies of the dataset, one per level.
pub fn run_noise_sweep(dataset: &SpectrumDataset, cfg: &ExperimentConfig) -> Result<Vec<NoiseLevelReport>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.nsr_levels.len());
    for (i, &nsr) in cfg.nsr_levels.iter().enumerate() {
        let (noisy, record) = add_noise(dataset, nsr, derive_seed(cfg.seed, 1_000_000 + i as u64))?;
        let summary = summarize(&run_repetitions(&noisy, cfg)?);
        out.push(NoiseLevelReport {
            nsr_percent: record.nsr_percent,
            snr_db: record.snr_db,
            best_learner: summary.per_learner.best.name.clone(),
            best_learner_mean: summary.per_learner.best.stats.mean,
            failures: summary.failures.len(),
            fused: summary.fused,
        });
    }
    Ok(out)
}

/// Repeats the experiment on every section for every section count.
pub fn run_bandwidth_sweep(dataset: &SpectrumDataset, cfg: &ExperimentConfig) -> Result<Vec<BandReport>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &n in &cfg.bandwidth_sections {
        for band in bandwidth_split(dataset, n)? {
            let summary = summarize(&run_repetitions(&band.dataset, cfg)?);
            out.push(BandReport {
                sections: n,
                band_index: band.index,
                start_bin: band.start_bin,
                end_bin: band.end_bin,
                start_frequency_hz: band.start_frequency_hz,
                best_learner: summary.per_learner.best.name.clone(),
                best_learner_mean: summary.per_learner.best.stats.mean,
                failures: summary.failures.len(),
                fused: summary.fused,
            });
        }
    }
    Ok(out)
}

/// Writes the dataset CSV:
///
/// ```text
/// # frequencies_hz: f_0,...
/// # classes: healthy,defected
/// sample_id,label,ch,<f_0>,...
/// ```
///
/// with one row per (sample, channel).
pub fn write_dataset_csv<W: Write>(dataset: &SpectrumDataset, mut writer: W) -> std::io::Result<()> {
    let freqs: Vec<String> = dataset.frequencies().iter().map(|f| f.to_string()).collect();
    writeln!(writer, "# frequencies_hz: {}", freqs.join(","))?;
    writeln!(writer, "# classes: {}", dataset.class_names().join(","))?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["sample_id".to_string(), "label".to_string(), "ch".to_string()];
    header.extend(freqs);
    w.write_record(&header)?;
    for s in 0..dataset.n_samples() {
        let label = &dataset.class_names()[dataset.labels().as_slice()[s]];
        for (name, m) in dataset.channels() {
            let mut rec = vec![dataset.sample_ids()[s].clone(), label.clone(), name.clone()];
            rec.extend(m.row(s).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()
}

/// Reads the dataset CSV written by [`write_dataset_csv`]. Without a
/// `# classes:` line, classes are ordered by first appearance.
pub fn read_dataset_csv<R: BufRead>(reader: R) -> Result<SpectrumDataset> {
    let mut frequencies: Option<Vec<f64>> = None;
    let mut classes: Option<Vec<String>> = None;
    let mut body = String::new();
    let mut comment_lines = 0;
    let mut in_header = true;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if in_header && line.starts_with('#') {
            comment_lines += 1;
            let content = line.trim_start_matches('#').trim();
            if let Some(v) = content.strip_prefix("frequencies_hz:") {
                let parsed = v
                    .split(',')
                    .map(|f| f.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| PipelineError::Parse {
                        line: i + 1,
                        message: format!("bad frequency: {e}"),
                    })?;
                frequencies = Some(parsed);
            } else if let Some(v) = content.strip_prefix("classes:") {
                classes = Some(v.split(',').map(|c| c.trim().to_string()).collect());
            }
            continue;
        }
        in_header = false;
        body.push_str(&line);
        body.push('\n');
    }
    let parse_err = |line: usize, message: String| PipelineError::Parse { line, message };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let header = rdr.headers().map_err(|e| parse_err(comment_lines + 1, e.to_string()))?.clone();
    if header.len() < 4 || &header[0] != "sample_id" || &header[1] != "label" || &header[2] != "ch" {
        return Err(parse_err(comment_lines + 1, "header must be `sample_id,label,ch,<f_0>,...`".into()));
    }
    let n_f = header.len() - 3;
    let frequencies = match frequencies {
        Some(f) => f,
        None => header
            .iter()
            .skip(3)
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(comment_lines + 1, format!("no frequency line and header is not numeric: {e}")))?,
    };
    if frequencies.len() != n_f {
        return Err(parse_err(comment_lines + 1, format!("{} frequencies for {} columns", frequencies.len(), n_f)));
    }
    let mut class_names = classes.unwrap_or_default();
    let mut sample_ids: Vec<String> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut rows: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize) + comment_lines;
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize) + comment_lines;
        if record.len() != n_f + 3 {
            return Err(parse_err(line, format!("expected {} fields, found {}", n_f + 3, record.len())));
        }
        let id = &record[0];
        let label_name = &record[1];
        let label = match class_names.iter().position(|c| c == label_name) {
            Some(l) => l,
            None => {
                class_names.push(label_name.to_string());
                class_names.len() - 1
            }
        };
        if sample_ids.last().map(String::as_str) != Some(id) {
            sample_ids.push(id.to_string());
            labels.push(label);
        } else if labels.last() != Some(&label) {
            return Err(parse_err(line, format!("sample `{id}` has conflicting labels")));
        }
        let values = record
            .iter()
            .skip(3)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(line, e.to_string()))?;
        let channel = rows.entry(record[2].to_string()).or_default();
        if channel.len() + 1 != sample_ids.len() {
            return Err(parse_err(line, format!("channel `{}` rows are out of order", &record[2])));
        }
        channel.push(values);
    }
    if sample_ids.is_empty() {
        return Err(parse_err(comment_lines + 2, "dataset has no rows".into()));
    }
    let n_s = sample_ids.len();
    let mut channels = BTreeMap::new();
    for (name, r) in rows {
        if r.len() != n_s {
            return Err(parse_err(0, format!("channel `{name}` has {} rows for {n_s} samples", r.len())));
        }
        let flat: Vec<f64> = r.into_iter().flatten().collect();
        channels.insert(name, DMatrix::from_row_slice(n_s, n_f, &flat));
    }
    Ok(SpectrumDataset::new(
        frequencies,
        channels,
        LabelVector::new(labels)?,
        class_names,
        sample_ids,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_h: usize, n_d: usize) -> SpectrumDataset {
        synthesize_frf_dataset(n_h, n_d, 32, 3).unwrap()
    }

    #[test]
    fn accuracy_cases() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let onehot = ScoreMatrix::new(
            "x",
            labels.clone(),
            ids.clone(),
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]],
        )
        .unwrap();
        let y = LabelVector::new(vec![0, 1, 1, 0]).unwrap();
        assert_eq!(evaluate_accuracy(&onehot, &y).unwrap(), 1.0);
        let y3 = LabelVector::new(vec![0, 1, 1, 1]).unwrap();
        assert_eq!(evaluate_accuracy(&onehot, &y3).unwrap(), 0.75);
        let uniform = ScoreMatrix::new("u", labels, ids, vec![vec![0.5, 0.5]; 4]).unwrap();
        assert_eq!(evaluate_accuracy(&uniform, &LabelVector::new(vec![0; 4]).unwrap()).unwrap(), 1.0);
        assert!(evaluate_accuracy(&uniform, &LabelVector::new(vec![0; 3]).unwrap()).is_err());
    }

    #[test]
    fn split_counts_and_errors() {
        let ds = small(10, 10);
        let (t, v) = split_train_validation(&ds, 0.7, 1).unwrap();
        assert_eq!(t.labels().indices_of(0).len(), 7);
        assert_eq!(t.labels().indices_of(1).len(), 7);
        assert_eq!(v.n_samples(), 6);

        let ds = small(9, 4);
        let (t, v) = split_train_validation(&ds, 0.7, 1).unwrap();
        assert_eq!(t.labels().indices_of(0).len(), 6);
        assert_eq!(v.labels().indices_of(0).len(), 3);

        let mut ids: Vec<&String> = t.sample_ids().iter().chain(v.sample_ids()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 13, "partition is exact");

        let tiny = small(3, 1);
        assert!(matches!(
            split_train_validation(&tiny, 0.7, 1),
            Err(PipelineError::ClassTooSmall { .. })
        ));
    }

    #[test]
    fn oversampling_balances_from_minority_only() {
        let ds = small(12, 5);
        let out = oversample_minority(&ds, 9);
        assert_eq!(out.labels().indices_of(0).len(), 12);
        assert_eq!(out.labels().indices_of(1).len(), 12);
        let minority: Vec<&String> = ds.labels().indices_of(1).iter().map(|&i| &ds.sample_ids()[i]).collect();
        for extra in &out.sample_ids()[ds.n_samples()..] {
            assert!(minority.contains(&extra));
        }
        let balanced = small(4, 4);
        assert_eq!(oversample_minority(&balanced, 1), balanced);
    }

    #[test]
    fn noise_records() {
        let ds = small(2, 2);
        let (same, rec) = add_noise(&ds, 0.0, 1).unwrap();
        assert_eq!(same, ds);
        assert_eq!(rec.snr_db, None);
        assert_eq!(NoiseRecord::new(100.0).snr_db, Some(0.0));
        assert!((NoiseRecord::new(10.0).snr_db.unwrap() - 20.0).abs() < 1e-12);
        let (noisy, _) = add_noise(&ds, 50.0, 1).unwrap();
        assert!(noisy.channel("x1").unwrap().iter().all(|&v| v >= 0.0));
        assert_ne!(noisy, ds);
    }

    #[test]
    fn band_split_cases() {
        let ds = synthesize_frf_dataset(2, 2, 16, 1).unwrap();
        let one = bandwidth_split(&ds, 1).unwrap();
        assert_eq!(one[0].dataset, ds);
        assert!(matches!(bandwidth_split(&ds, 17), Err(PipelineError::TooManySections { .. })));
        assert!(bandwidth_split(&ds, 0).is_err());

        let sized = ds.select_frequencies(0, 10);
        let lens: Vec<usize> = bandwidth_split(&sized, 4)
            .unwrap()
            .iter()
            .map(|b| b.dataset.n_frequencies())
            .collect();
        assert_eq!(lens, vec![3, 3, 2, 2]);
    }

    #[test]
    fn synth_rejects_bad_counts() {
        assert!(matches!(
            synthesize_frf_dataset(0, 3, 64, 1),
            Err(PipelineError::InvalidCounts(_))
        ));
        assert!(matches!(
            synthesize_frf_dataset(3, 3, 8, 1),
            Err(PipelineError::InvalidCounts(_))
        ));
        let cfg = SynthConfig {
            n_modes: Some(0),
            ..SynthConfig::default()
        };
        assert!(matches!(synthesize(&cfg), Err(PipelineError::InvalidCounts(_))));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let ds = small(3, 2);
        let mut buf = Vec::new();
        write_dataset_csv(&ds, &mut buf).unwrap();
        let back = read_dataset_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2 + 1 + 5 * 2);
    }

    #[test]
    fn dataset_csv_errors_carry_lines() {
        let bad = "# frequencies_hz: 1,2\nsample_id,label,ch,1,2\ns0,healthy,x1,1.0,oops\n";
        match read_dataset_csv(bad.as_bytes()) {
            Err(PipelineError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn seeds_are_spread() {
        let a = derive_seed(1, 0);
        let b = derive_seed(1, 1);
        let c = derive_seed(2, 0);
        assert!(a != b && a != c && b != c);
        assert_eq!(derive_seed(1, 0), a);
    }
}
