//! Evidence-theoretic fusion of classifier outputs for vibration-based
//! defect detection.
//!
//! - [`evidence`]: frames, basic belief assignments and their measures.
//! - [`fusion`]: score matrices, BOE construction and the weighted fusion rule.
//! - [`infotheory`]: plug-in information measures and classifier ranking.
//! - [`features`]: spectral channels and lasso-path frequency selection.
//! - [`learners`]: small neural classifiers producing score matrices.
//! - [`pipeline`]: synthetic data, splits, noise, bands and the experiment harness.

pub mod evidence;
pub mod features;
pub mod fusion;
pub mod infotheory;
pub mod learners;
pub mod pipeline;
