//! Dempster-Shafer primitives: frames of discernment, focal sets, basic belief
//! assignments, Dempster's rule and the measures used to weigh bodies of
//! evidence against each other (conflict, Deng entropy, BJS divergence,
//! Jousselme distance and the disagreement degree).
//!
//! Logarithm bases are fixed per measure: Deng entropy uses base 10 and the
//! belief Jensen-Shannon divergence uses base 2.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::ser::{SerializeSeq, SerializeStruct};
use serde::{Serialize, Serializer};
use thiserror::Error;

/// Tolerance on `Σ m = 1` when a [`Bba`] is constructed.
pub const MASS_TOLERANCE: f64 = 1e-9;
/// Masses at or below this value are dropped to keep focal sets sparse.
pub const MASS_FLOOR: f64 = 1e-15;
/// Combination is refused when the conflict reaches `1 - TOTAL_CONFLICT_MARGIN`.
pub const TOTAL_CONFLICT_MARGIN: f64 = 1e-12;
/// Largest supported frame (focal sets are `u64` bitmasks).
pub const MAX_FRAME_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvidenceError {
    #[error("a frame needs at least one label")]
    EmptyFrame,
    #[error("frame has {0} labels, at most {MAX_FRAME_SIZE} are supported")]
    FrameTooLarge(usize),
    #[error("label `{0}` is empty or duplicated")]
    InvalidLabel(String),
    #[error("belief assignments live on different frames")]
    FrameMismatch,
    #[error("focal set {0:#b} is empty or not contained in the frame")]
    InvalidFocalSet(u64),
    #[error("mass {0} is negative or not finite")]
    InvalidMass(f64),
    #[error("masses sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("total conflict between the bodies of evidence (K = {0})")]
    TotalConflict(f64),
    #[error("index {index} is out of range for {len} bodies of evidence")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("need at least {needed} bodies of evidence, got {got}")]
    TooFewBoes { needed: usize, got: usize },
    #[error("sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, EvidenceError>;

/// Ordered set of mutually exclusive hypotheses (the class labels).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    labels: Vec<String>,
}

impl Frame {
    pub fn new<I, S>(labels: I) -> Result<Arc<Frame>>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(EvidenceError::EmptyFrame);
        }
        if labels.len() > MAX_FRAME_SIZE {
            return Err(EvidenceError::FrameTooLarge(labels.len()));
        }
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() || labels[..i].contains(label) {
                return Err(EvidenceError::InvalidLabel(label.clone()));
            }
        }
        Ok(Arc::new(Frame { labels }))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// The focal set `{E_k}`.
    pub fn singleton(&self, k: usize) -> FocalSet {
        assert!(k < self.len(), "class index {k} outside frame of size {}", self.len());
        FocalSet(1u64 << k)
    }

    /// The whole frame, i.e. the ignorance focal set.
    pub fn full(&self) -> FocalSet {
        FocalSet(full_mask(self.len()))
    }

    fn contains_set(&self, set: FocalSet) -> bool {
        set.0 != 0 && set.0 & !full_mask(self.len()) == 0
    }
}

fn full_mask(k: usize) -> u64 {
    if k >= 64 {
        u64::MAX
    } else {
        (1u64 << k) - 1
    }
}

/// Non-empty subset of a frame, stored as a bitmask over frame indices.
///
/// Sets order by cardinality first and bitmask second, so singletons come
/// first in frame-index order and the full frame comes last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FocalSet(u64);

impl FocalSet {
    pub fn from_bits(bits: u64) -> Option<FocalSet> {
        (bits != 0).then_some(FocalSet(bits))
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(indices: I) -> Option<FocalSet> {
        let bits = indices.into_iter().fold(0u64, |acc, i| {
            assert!(i < MAX_FRAME_SIZE, "index {i} exceeds focal set capacity");
            acc | (1u64 << i)
        });
        FocalSet::from_bits(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn cardinality(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_singleton(self) -> bool {
        self.cardinality() == 1
    }

    /// Index of the single member, if this is a singleton.
    pub fn singleton_index(self) -> Option<usize> {
        self.is_singleton().then(|| self.0.trailing_zeros() as usize)
    }

    pub fn contains(self, k: usize) -> bool {
        k < 64 && self.0 & (1u64 << k) != 0
    }

    pub fn intersect(self, other: FocalSet) -> Option<FocalSet> {
        FocalSet::from_bits(self.0 & other.0)
    }

    pub fn union(self, other: FocalSet) -> FocalSet {
        FocalSet(self.0 | other.0)
    }

    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..64).filter(move |&k| self.0 & (1u64 << k) != 0)
    }

    /// `|A ∩ B| / |A ∪ B|`.
    pub fn jaccard(self, other: FocalSet) -> f64 {
        f64::from((self.0 & other.0).count_ones()) / f64::from((self.0 | other.0).count_ones())
    }
}

impl Ord for FocalSet {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.cardinality(), self.0).cmp(&(other.cardinality(), other.0))
    }
}

impl PartialOrd for FocalSet {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Basic belief assignment: a mass function on the non-empty subsets of a
/// frame. Stored masses are strictly positive and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Bba {
    frame: Arc<Frame>,
    masses: BTreeMap<FocalSet, f64>,
}

impl Bba {
    /// Builds a BBA from `(focal set, mass)` pairs. Repeated sets accumulate,
    /// zero masses are dropped and round-off negatives down to `-1e-12` are
    /// treated as zero.
    pub fn new<I>(frame: Arc<Frame>, entries: I) -> Result<Bba>
    where
        I: IntoIterator<Item = (FocalSet, f64)>,
    {
        let mut masses = BTreeMap::new();
        for (set, mass) in entries {
            if !frame.contains_set(set) {
                return Err(EvidenceError::InvalidFocalSet(set.bits()));
            }
            if !mass.is_finite() || mass < -TOTAL_CONFLICT_MARGIN {
                return Err(EvidenceError::InvalidMass(mass));
            }
            *masses.entry(set).or_insert(0.0) += mass;
        }
        masses.retain(|_, m| *m > MASS_FLOOR);
        let total: f64 = masses.values().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(EvidenceError::NotNormalized(total));
        }
        Ok(Bba { frame, masses })
    }

    /// Probability vector over the singletons.
    pub fn bayesian(frame: Arc<Frame>, probabilities: &[f64]) -> Result<Bba> {
        if probabilities.len() != frame.len() {
            return Err(EvidenceError::LengthMismatch {
                expected: frame.len(),
                got: probabilities.len(),
            });
        }
        let entries: Vec<_> = probabilities
            .iter()
            .enumerate()
            .map(|(k, &p)| (frame.singleton(k), p))
            .collect();
        Bba::new(frame, entries)
    }

    /// Singleton masses plus whatever is left over on the full frame.
    pub fn with_ignorance(frame: Arc<Frame>, singleton_masses: &[f64]) -> Result<Bba> {
        if singleton_masses.len() != frame.len() {
            return Err(EvidenceError::LengthMismatch {
                expected: frame.len(),
                got: singleton_masses.len(),
            });
        }
        let rest = 1.0 - singleton_masses.iter().sum::<f64>();
        let mut entries: Vec<_> = singleton_masses
            .iter()
            .enumerate()
            .map(|(k, &p)| (frame.singleton(k), p))
            .collect();
        entries.push((frame.full(), rest));
        Bba::new(frame, entries)
    }

    /// Total ignorance: all mass on the full frame.
    pub fn vacuous(frame: Arc<Frame>) -> Bba {
        let full = frame.full();
        Bba {
            frame,
            masses: BTreeMap::from([(full, 1.0)]),
        }
    }

    /// Normalizes an accumulated mass table produced internally.
    fn from_accumulated(frame: Arc<Frame>, mut masses: BTreeMap<FocalSet, f64>, scale: f64) -> Bba {
        masses.values_mut().for_each(|m| *m *= scale);
        masses.retain(|_, m| *m > MASS_FLOOR);
        Bba { frame, masses }
    }

    pub fn frame(&self) -> &Arc<Frame> {
        &self.frame
    }

    pub fn mass(&self, set: FocalSet) -> f64 {
        self.masses.get(&set).copied().unwrap_or(0.0)
    }

    /// Focal elements with their masses, in focal-set order.
    pub fn iter(&self) -> impl Iterator<Item = (FocalSet, f64)> + '_ {
        self.masses.iter().map(|(s, m)| (*s, *m))
    }

    pub fn focal_sets(&self) -> impl Iterator<Item = FocalSet> + '_ {
        self.masses.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    /// `m({E_k})` for every class `k`.
    pub fn singleton_masses(&self) -> Vec<f64> {
        (0..self.frame.len())
            .map(|k| self.mass(self.frame.singleton(k)))
            .collect()
    }

    /// `m(𝔈)`.
    pub fn ignorance(&self) -> f64 {
        self.mass(self.frame.full())
    }

    pub fn is_bayesian(&self) -> bool {
        self.masses.keys().all(|s| s.is_singleton())
    }

    /// Largest absolute mass difference over the union of focal sets.
    pub fn max_abs_diff(&self, other: &Bba) -> f64 {
        union_of_focal_sets(self, other)
            .into_iter()
            .map(|s| (self.mass(s) - other.mass(s)).abs())
            .fold(0.0, f64::max)
    }

    fn same_frame(&self, other: &Bba) -> Result<()> {
        if Arc::ptr_eq(&self.frame, &other.frame) || self.frame == other.frame {
            Ok(())
        } else {
            Err(EvidenceError::FrameMismatch)
        }
    }

    fn set_label(&self, set: FocalSet) -> Vec<&str> {
        set.members().map(|k| self.frame.labels[k].as_str()).collect()
    }
}

impl fmt::Display for Bba {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (set, mass) in self.iter() {
            if !first {
                f.write_str(", ")?;
            }
            first = false;
            write!(f, "{{{}}}: {:.6}", self.set_label(set).join(","), mass)?;
        }
        Ok(())
    }
}

/// Serialized as a list of `{"focal": [labels...], "mass": x}` objects.
impl Serialize for Bba {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        struct Entry<'a>(Vec<&'a str>, f64);
        impl Serialize for Entry<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                let mut st = s.serialize_struct("FocalMass", 2)?;
                st.serialize_field("focal", &self.0)?;
                st.serialize_field("mass", &self.1)?;
                st.end()
            }
        }
        let mut seq = serializer.serialize_seq(Some(self.masses.len()))?;
        for (set, mass) in self.iter() {
            seq.serialize_element(&Entry(self.set_label(set), mass))?;
        }
        seq.end()
    }
}

fn union_of_focal_sets(a: &Bba, b: &Bba) -> Vec<FocalSet> {
    let mut sets: Vec<FocalSet> = a.focal_sets().chain(b.focal_sets()).collect();
    sets.sort();
    sets.dedup();
    sets
}

/// Conflict `K`: total mass product over pairs of disjoint focal sets.
pub fn conflict(m1: &Bba, m2: &Bba) -> Result<f64> {
    m1.same_frame(m2)?;
    let mut k = 0.0;
    for (a, ma) in m1.iter() {
        for (b, mb) in m2.iter() {
            if a.intersect(b).is_none() {
                k += ma * mb;
            }
        }
    }
    Ok(k)
}

/// Dempster's rule of combination.
pub fn combine_dempster(m1: &Bba, m2: &Bba) -> Result<Bba> {
    m1.same_frame(m2)?;
    let mut joint = BTreeMap::new();
    let mut k = 0.0;
    for (a, ma) in m1.iter() {
        for (b, mb) in m2.iter() {
            match a.intersect(b) {
                Some(c) => *joint.entry(c).or_insert(0.0) += ma * mb,
                None => k += ma * mb,
            }
        }
    }
    if k >= 1.0 - TOTAL_CONFLICT_MARGIN || joint.is_empty() {
        return Err(EvidenceError::TotalConflict(k));
    }
    // Normalize by the retained mass rather than 1 - K so the result sums to
    // one up to a single rounding.
    let retained: f64 = joint.values().sum();
    Ok(Bba::from_accumulated(m1.frame.clone(), joint, 1.0 / retained))
}

/// Deng entropy in base 10: `-Σ m(A) log10(m(A) / (2^|A| - 1))`.
pub fn deng_entropy(m: &Bba) -> f64 {
    m.iter()
        .map(|(set, mass)| {
            let capacity = 2f64.powi(set.cardinality() as i32) - 1.0;
            -mass * (mass / capacity).log10()
        })
        .sum()
}

/// Belief Jensen-Shannon divergence in base 2, over the union of focal sets.
pub fn bjs_divergence(m1: &Bba, m2: &Bba) -> Result<f64> {
    m1.same_frame(m2)?;
    let mut total = 0.0;
    for set in union_of_focal_sets(m1, m2) {
        let (a, b) = (m1.mass(set), m2.mass(set));
        let mid = a + b;
        if a > 0.0 {
            total += a * (2.0 * a / mid).log2();
        }
        if b > 0.0 {
            total += b * (2.0 * b / mid).log2();
        }
    }
    Ok((0.5 * total).max(0.0))
}

/// Jousselme distance `sqrt(Δᵀ·Jac·Δ)` with Jaccard weighting, without the
/// customary ½ factor.
pub fn jousselme_distance(m1: &Bba, m2: &Bba) -> Result<f64> {
    m1.same_frame(m2)?;
    let sets = union_of_focal_sets(m1, m2);
    let delta: Vec<f64> = sets.iter().map(|&s| m1.mass(s) - m2.mass(s)).collect();
    let mut quad = 0.0;
    for (i, &a) in sets.iter().enumerate() {
        for (j, &b) in sets.iter().enumerate() {
            quad += delta[i] * delta[j] * a.jaccard(b);
        }
    }
    Ok(quad.max(0.0).sqrt())
}

/// Arithmetic mean of BBAs sharing a frame.
pub fn average(bbas: &[&Bba]) -> Result<Bba> {
    let weights = vec![1.0 / bbas.len() as f64; bbas.len()];
    weighted_average(bbas, &weights)
}

/// `Σ w_i m_i`. Weights need not be non-negative, but the result must be a
/// valid BBA.
pub fn weighted_average(bbas: &[&Bba], weights: &[f64]) -> Result<Bba> {
    let first = bbas.first().ok_or(EvidenceError::TooFewBoes { needed: 1, got: 0 })?;
    if weights.len() != bbas.len() {
        return Err(EvidenceError::LengthMismatch {
            expected: bbas.len(),
            got: weights.len(),
        });
    }
    let mut acc: BTreeMap<FocalSet, f64> = BTreeMap::new();
    for (m, &w) in bbas.iter().zip(weights) {
        first.same_frame(m)?;
        for (set, mass) in m.iter() {
            *acc.entry(set).or_insert(0.0) += w * mass;
        }
    }
    Bba::new(first.frame.clone(), acc)
}

/// Ordered collection of bodies of evidence on one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BoeSet {
    frame: Arc<Frame>,
    boes: Vec<Bba>,
}

impl BoeSet {
    pub fn new(boes: Vec<Bba>) -> Result<BoeSet> {
        let first = boes.first().ok_or(EvidenceError::TooFewBoes { needed: 1, got: 0 })?;
        let frame = first.frame.clone();
        for m in &boes[1..] {
            first.same_frame(m)?;
        }
        Ok(BoeSet { frame, boes })
    }

    pub fn frame(&self) -> &Arc<Frame> {
        &self.frame
    }

    pub fn len(&self) -> usize {
        self.boes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boes.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Bba> {
        self.boes.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Bba> {
        self.boes.iter()
    }

    pub fn as_slice(&self) -> &[Bba] {
        &self.boes
    }

    /// The mean BBA `m̄`.
    pub fn mean(&self) -> Bba {
        let refs: Vec<&Bba> = self.boes.iter().collect();
        average(&refs).expect("a BoeSet averages to a valid BBA")
    }

    /// Average Jousselme distance of every body to the mean (`SW`).
    pub fn spread(&self) -> f64 {
        let center = self.mean();
        let total: f64 = self
            .boes
            .iter()
            .map(|m| jousselme_distance(m, &center).expect("shared frame"))
            .sum();
        total / self.boes.len() as f64
    }

    /// Average distance of the other bodies to their own mean once body `q`
    /// is removed (`SW_~q`). The leave-one-out mean divides by `L - 1`.
    pub fn spread_excluding(&self, q: usize) -> Result<f64> {
        self.check_index(q)?;
        if self.boes.len() < 2 {
            return Err(EvidenceError::TooFewBoes {
                needed: 2,
                got: self.boes.len(),
            });
        }
        let others: Vec<&Bba> = self
            .boes
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != q)
            .map(|(_, m)| m)
            .collect();
        let center = average(&others)?;
        let mut total = 0.0;
        for m in &others {
            total += jousselme_distance(m, &center)?;
        }
        Ok(total / others.len() as f64)
    }

    fn check_index(&self, q: usize) -> Result<()> {
        if q >= self.boes.len() {
            Err(EvidenceError::IndexOutOfRange {
                index: q,
                len: self.boes.len(),
            })
        } else {
            Ok(())
        }
    }
}

/// Disagreement degree `m*_{ΔE,~q} = 0.5 + arctan((SW - SW_~q) / σ) / π`.
///
/// Values above one half flag a body whose removal tightens the ensemble.
pub fn disagreement_degree(boes: &BoeSet, q: usize, sigma: f64) -> Result<f64> {
    if boes.len() < 2 {
        return Err(EvidenceError::TooFewBoes {
            needed: 2,
            got: boes.len(),
        });
    }
    boes.check_index(q)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(EvidenceError::InvalidSigma(sigma));
    }
    let delta = boes.spread() - boes.spread_excluding(q)?;
    Ok(0.5 + (delta / sigma).atan() / std::f64::consts::PI)
}
