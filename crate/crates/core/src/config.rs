//! Tunable thresholds, collected so bundles can carry a snapshot of the
//! values used to produce them.

use serde::{Deserialize, Serialize};

use crate::losses::{LossWeights, MatchCost};
use crate::raster::RasterConfig;

pub const SCALE_MIN: f64 = 0.5;
pub const SCALE_MAX: f64 = 15.0;
pub const DEFAULT_NUM_QUERIES: usize = 100;
/// Query confidence threshold.
pub const TAU_C: f64 = 0.5;
/// Pixel probability threshold.
pub const TAU: f64 = 0.3;
pub const TEXT_ATTN_LAYERS: usize = 6;
/// Depth agreement threshold for overlap pairing, in scene units.
pub const TAU_DEPTH: f64 = 0.1;
pub const PAIR_IOU_LO: f64 = 0.3;
pub const PAIR_IOU_HI: f64 = 0.8;
/// Logits are clamped to +-this value before sigmoid/softmax.
pub const LOGIT_CAP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub tau_c: f64,
    pub tau: f64,
    pub num_queries: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Pixels whose accumulated alpha after aggregation falls below this keep
    /// their pre-aggregation probabilities.
    pub coverage_min: f64,
    pub tau_depth: f64,
    pub pair_lo: f64,
    pub pair_hi: f64,
    /// Rasterizer used for rendering images, depth and label maps.
    pub raster: RasterConfig,
    /// Rasterizer used when fusing probability maps across views.
    pub aggregate_raster: RasterConfig,
    pub loss_weights: LossWeights,
    pub match_cost: MatchCost,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            tau_c: TAU_C,
            tau: TAU,
            num_queries: DEFAULT_NUM_QUERIES,
            scale_min: SCALE_MIN,
            scale_max: SCALE_MAX,
            coverage_min: 0.5,
            tau_depth: TAU_DEPTH,
            pair_lo: PAIR_IOU_LO,
            pair_hi: PAIR_IOU_HI,
            raster: RasterConfig::default(),
            aggregate_raster: RasterConfig::default(),
            loss_weights: LossWeights::default(),
            match_cost: MatchCost::default(),
        }
    }
}
