//! Subgroup choice for bias mitigation under spurious-correlation shift.
//!
//! Atoms are `(y, s, a)` triples over binary label `y`, spurious feature `s`
//! and attribute `a`. A grouping maps atoms to groups; reweighting by group
//! moves the training distribution toward the unbiased target, and how close
//! it can get (minimum KL) predicts how well group-based mitigation works.

pub mod dist;
pub mod error;
pub mod grouping;
pub mod harness;
pub mod metrics;
pub mod mitigation;
pub mod nnet;
pub mod reweight;
pub mod seed;
pub mod synth;

pub use dist::{divergence_to_target, kl_divergence, reweighted_distribution, Atom, Distribution};
pub use error::{Error, Result};
pub use grouping::{annotate_samples, atom_grouping, GroupingScheme, SoftGrouping};
pub use metrics::{evaluate, EvalReport};
pub use mitigation::{train, Method, TrainConfig, TrainedModel};
pub use reweight::{optimal_weights, WeightVector};
pub use synth::{make_splits, sample_dataset, Dataset, FeatureConfig};
