//! Convective storm cell nowcasting and power-grid damage classification.
//!
//! The pipeline runs in stages: radar frames ([`grid_io`]) are contoured at
//! 35 dBZ and clustered into storm cells ([`cells`]), cells are tracked and
//! forecast with dense optical flow ([`tracking`]), each cell is turned into a
//! 16-feature vector with a damage label ([`features`]), and the labeled
//! samples train a random forest ([`forest`]) or a multilayer perceptron
//! ([`mlp`]), optionally after SMOTE rebalancing ([`resample`]). [`eval`]
//! holds the split and the metrics, [`synth`] generates desk-scale scenarios.

pub mod cells;
pub mod dataset;
pub mod eval;
pub mod features;
pub mod forest;
pub mod geo;
pub mod grid_io;
pub mod mlp;
pub mod resample;
pub mod synth;
pub mod tracking;

pub use dataset::{DamageClass, Dataset, Sample, FEATURE_COUNT, FEATURE_NAMES};
pub use grid_io::{FrameSequence, ReflectivityGrid, NO_DATA};
