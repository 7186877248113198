//! Depth-based view overlap: unproject one frame's depth, reproject into
//! another camera, count the points whose depth agrees with the stored map,
//! and sample frame pairs whose symmetric overlap lies in a band.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::scene::{Camera, Intrinsics};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairError {
    #[error("empty or inverted band [{lo}, {hi}]")]
    Band { lo: f64, hi: f64 },
    #[error("crop window ({top},{left}) {height}x{width} outside a {rows}x{cols} frame")]
    Crop {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
        rows: usize,
        cols: usize,
    },
}

/// A depth map with its camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `(H, W)` z-depth; non-positive or non-finite entries are holes.
    pub depth: Array2<f64>,
    pub camera: Camera,
}

impl Frame {
    pub fn new(depth: Array2<f64>, camera: Camera) -> Self {
        Self { depth, camera }
    }

    pub fn size(&self) -> (usize, usize) {
        self.depth.dim()
    }

    /// Sub-window of the frame with intrinsics adjusted so every kept pixel
    /// sees the same ray as before.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Frame, PairError> {
        let (rows, cols) = self.size();
        if height == 0 || width == 0 || top + height > rows || left + width > cols {
            return Err(PairError::Crop { top, left, height, width, rows, cols });
        }
        let k = self.camera.intrinsics;
        let intrinsics = Intrinsics {
            fx: k.fx * cols as f64 / width as f64,
            fy: k.fy * rows as f64 / height as f64,
            cx: (k.cx * cols as f64 - left as f64) / width as f64,
            cy: (k.cy * rows as f64 - top as f64) / height as f64,
        };
        let depth = self
            .depth
            .slice(ndarray::s![top..top + height, left..left + width])
            .to_owned();
        Ok(Frame { depth, camera: Camera::new(intrinsics, self.camera.c2w) })
    }
}

#[inline]
fn valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// World-space point seen by every pixel; `None` where the depth is a hole.
pub fn unproject(depth: &Array2<f64>, cam: &Camera) -> Array2<Option<Vector3<f64>>> {
    let (h, w) = depth.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let d = depth[[i, j]];
        if !valid_depth(d) {
            return None;
        }
        let p = cam.backproject(j as f64 + 0.5, i as f64 + 0.5, d, h, w);
        Some(cam.camera_to_world(&p))
    })
}

/// Continuous pixel coordinates and camera depth of a world point, or
/// `None` when it lies behind the camera.
pub fn reproject(p: &Vector3<f64>, cam: &Camera, height: usize, width: usize) -> Option<(f64, f64, f64)> {
    let c = cam.world_to_camera(p);
    if !(c.z > 0.0) {
        return None;
    }
    let (u, v) = cam.project_camera_point(&c, height, width);
    Some((u, v, c.z))
}

/// Fraction of `a`'s valid depth pixels that land inside `b`, in front of
/// its camera, with `|z - depth_b| < tau_d` at the nearest (floored) pixel.
pub fn directed_iou(a: &Frame, b: &Frame, tau_d: f64) -> f64 {
    let (hb, wb) = b.size();
    let points = unproject(&a.depth, &a.camera);
    let (mut total, mut hits) = (0usize, 0usize);
    for p in points.iter().flatten() {
        total += 1;
        let Some((u, v, z)) = reproject(p, &b.camera, hb, wb) else {
            continue;
        };
        if !(u >= 0.0 && v >= 0.0 && u < wb as f64 && v < hb as f64) {
            continue;
        }
        let d = b.depth[[v.floor() as usize, u.floor() as usize]];
        if valid_depth(d) && (z - d).abs() < tau_d {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Symmetric overlap: mean of the two directed ratios.
pub fn overlap_iou(a: &Frame, b: &Frame, tau_d: f64) -> f64 {
    (directed_iou(a, b, tau_d) + directed_iou(b, a, tau_d)) / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub frames: Vec<usize>,
    /// Row-major `F x F`.
    pub iou: Vec<f64>,
}

impl OverlapMatrix {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.iou[i * self.len() + j]
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.len(), self.len()), self.iou.clone()).expect("square matrix")
    }
}

/// Pairwise overlap of all frames; directed ratios are computed in parallel.
pub fn overlap_matrix(frames: &[Frame], tau_d: f64) -> OverlapMatrix {
    let f = frames.len();
    let directed = exec::map_indexed(f * f, |k| {
        let (i, j) = (k / f, k % f);
        directed_iou(&frames[i], &frames[j], tau_d)
    });
    let mut iou = vec![0.0; f * f];
    for i in 0..f {
        for j in 0..f {
            iou[i * f + j] = (directed[i * f + j] + directed[j * f + i]) / 2.0;
        }
    }
    OverlapMatrix { frames: (0..f).collect(), iou }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    /// `(i, j)` frame pairs with `i < j`, in sampling order.
    pub pairs: Vec<(usize, usize)>,
    /// Set when fewer pairs than requested were available.
    pub warning: Option<String>,
}

/// Pairs with `lo <= iou <= hi`, `i < j`.
pub fn band_pairs(matrix: &OverlapMatrix, lo: f64, hi: f64) -> Vec<(usize, usize)> {
    let f = matrix.len();
    let mut out = Vec::new();
    for i in 0..f {
        for j in i + 1..f {
            let v = matrix.get(i, j);
            if v >= lo && v <= hi {
                out.push((i, j));
            }
        }
    }
    out
}

/// Uniform sample of `count` in-band pairs without replacement,
/// deterministic for a given seed.
pub fn sample_pairs(matrix: &OverlapMatrix, lo: f64, hi: f64, count: usize, seed: u64) -> Result<PairSample, PairError> {
    if !(lo < hi) {
        return Err(PairError::Band { lo, hi });
    }
    let band = band_pairs(matrix, lo, hi);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = count.min(band.len());
    let picked = rand::seq::index::sample(&mut rng, band.len(), take);
    let pairs: Vec<(usize, usize)> = picked.iter().map(|k| band[k]).collect();
    let warning = if band.is_empty() && count > 0 {
        Some(format!("no frame pairs with overlap in [{lo}, {hi}]"))
    } else if take < count {
        Some(format!("only {take} of {count} requested pairs in [{lo}, {hi}]"))
    } else {
        None
    };
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(PairSample { pairs, warning })
}
