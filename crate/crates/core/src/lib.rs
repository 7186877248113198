//! Open-vocabulary 3D scene understanding on pixel-aligned Gaussian fields.
//!
//! The pipeline lifts per-view mask predictions into a Gaussian
//! segmentation field, renders it back through a tile rasterizer, and
//! evaluates, edits or exports the result.

// `!(a < b)` is used on purpose so NaN thresholds are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

pub mod bundle;
pub mod config;
pub mod editing;
pub mod exec;
pub mod export;
pub mod lifting;
pub mod losses;
pub mod metrics;
pub mod pairing;
pub mod raster;
pub mod reference;
pub mod scene;
pub mod selftest;
pub mod synthetic;
pub mod text;

pub use config::Config;
pub use scene::{BACKGROUND, Camera, ClassTaxonomy, Dims, GaussianField, GaussianPrimitive, LabelMaps, SegmentationField, SemanticPredictions};
