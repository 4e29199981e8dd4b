//! Desk-scale pseudo-label polishing sandbox for semi-supervised object
//! detection: box geometry with analytic GIoU gradients, a synthetic
//! scene world with deterministic feature rendering, Gaussian synthesis
//! of (pseudo label, ground truth) training pairs, two trainable
//! polishing networks, a toy teacher-student loop with disentangled
//! pseudo-label selection, and a metrics suite.
//!
//! Everything is seeded and deterministic: the same configuration and
//! seed reproduce identical scenes, batches, parameters and reports
//! within one build.

pub mod config;
pub mod experiment;
pub mod geom;
pub mod metrics;
pub mod net;
pub mod polish;
pub mod rng;
pub mod sample;
pub mod scene;
pub mod ssod;

pub use config::ExperimentConfig;
pub use geom::{BBox, Delta, ScoredBox};
pub use metrics::{ApResult, DeviationStats, MeanStd, PseudoQualityReport};
pub use net::DenseNet;
pub use rng::SimRng;
pub use sample::PolishLearnConfig;
pub use scene::{DatasetSplit, FeatureMap, PseudoDetection, Scene};
pub use ssod::{SsodVariant, run_ssod};
