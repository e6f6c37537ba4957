//! Volumetric multi-class cartilage segmentation.
//!
//! The pipeline restricts classification to a band around three bone
//! surfaces, classifies band voxels with a cascade of random forests whose
//! later passes read the probability maps of earlier passes, and finally
//! smooths the labeling with multi-label graph cuts.
//!
//! * [`volume`]: dense grids, MetaImage I/O, gradient magnitude
//! * [`distance`]: signed Euclidean distance transforms, landmarks, band extraction
//! * [`features`]: the seventeen voxel feature kinds and their sampling
//! * [`forest`]: randomized decision forests
//! * [`cascade`]: multi-pass semantic-context classification
//! * [`graphcut`]: max-flow and alpha-expansion refinement
//! * [`dataset`]: manifests listing volumes, masks, landmarks and labels
//! * [`phantom`]: deterministic synthetic knee phantoms
//! * [`eval`]: Dice scores, grouped cross-validation and ablations
#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail validation

mod binio;
pub mod cascade;
pub mod config;
pub mod dataset;
pub mod distance;
mod error;
pub mod eval;
pub mod features;
pub mod forest;
pub mod graphcut;
pub mod labels;
pub mod phantom;
pub mod rng;
pub mod volume;

pub use cascade::{CascadeConfig, CascadeModel, TrainingVolume};
pub use config::PipelineConfig;
pub use distance::{Band, LandmarkSet};
pub use error::{Error, Result};
pub use features::{FeatureConfig, FeatureContext, FeatureDescriptor, FeatureKind};
pub use forest::{ForestConfig, RandomForest};
pub use graphcut::{EnergyParams, ProbabilityMaps};
pub use labels::{Bone, Palette};
pub use volume::{Geometry, LabelVolume, Volume, VoxelIndex, WorldPoint};
