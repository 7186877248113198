//! Tile-based CPU rasterizer for 3D Gaussians carrying arbitrary
//! K-dimensional attribute payloads.
//!
//! Every splat is projected with the first-order (EWA) approximation,
//! dilated by a small isotropic low-pass term and composited front to back:
//!
//! ```text
//! out(p) = sum_i attr_i * a_i(p) * T_i,   T_i = prod_{j<i} (1 - a_j(p))
//! a_i(p) = min(cap, opacity_i * exp(-0.5 d^T cov2d^-1 d))
//! ```
//!
//! The Gaussian kernel has compact support: beyond `cull_sigma` Mahalanobis
//! units its weight is exactly zero. Splats are binned into square tiles by
//! a circular bound of `cull_sigma * sqrt(lambda_max)`, which contains that
//! support, so binning never drops a non-zero contribution.

use log::warn;
use nalgebra::{Matrix2, Matrix2x3, Vector3};
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::scene::{Camera, GaussianField, GaussianPrimitive};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("projected covariance of Gaussian {source_index} is not positive definite")]
    NonSpd { source_index: usize },
    #[error("attribute rows {rows} x {cols} do not match field of {expected} Gaussians")]
    AttrShape {
        rows: usize,
        cols: usize,
        expected: usize,
    },
    #[error("attribute dimension must be at least 1")]
    EmptyAttributes,
    #[error("image size must be positive")]
    EmptyImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    /// Splats with camera depth at or below this are culled.
    pub near: f64,
    /// Added to both diagonal entries of every projected covariance (px^2).
    pub dilation: f64,
    /// Kernel support radius in standard deviations.
    pub cull_sigma: f64,
    pub opacity_cap: f64,
    /// Compositing stops once transmittance drops below this.
    pub min_transmittance: f64,
    pub tile_size: usize,
    /// Attribute dimensions above this trigger a memory warning.
    pub attr_warn: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            near: 0.01,
            dilation: 0.3,
            cull_sigma: 3.0,
            opacity_cap: 0.99,
            min_transmittance: 1e-4,
            tile_size: 16,
            attr_warn: 4096,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedSplat {
    /// Continuous pixel coordinates (u right, v down).
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    /// Conservative pixel radius of the kernel support.
    pub radius: f64,
    pub source_index: usize,
}

impl ProjectedSplat {
    /// Squared Mahalanobis distance of pixel position `(x, y)`.
    #[inline]
    pub fn mahalanobis2(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean2d[0];
        let dy = y - self.mean2d[1];
        let c = &self.conic;
        c[(0, 0)] * dx * dx + (c[(0, 1)] + c[(1, 0)]) * dx * dy + c[(1, 1)] * dy * dy
    }

    /// Effective opacity at pixel position `(x, y)`.
    #[inline]
    pub fn weight(&self, x: f64, y: f64, cfg: &RasterConfig) -> f64 {
        let power = self.mahalanobis2(x, y);
        if power > cfg.cull_sigma * cfg.cull_sigma {
            return 0.0;
        }
        (self.opacity * (-0.5 * power).exp()).min(cfg.opacity_cap)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// `(K, H, W)` composited attributes.
    pub attr: Array3<f64>,
    /// `(H, W)` accumulated opacity.
    pub alpha: Array2<f64>,
    /// `(H, W)` depth normalized by accumulated opacity.
    pub depth: Array2<f64>,
}

impl RenderOutput {
    pub fn zeros(k: usize, height: usize, width: usize) -> Self {
        Self {
            attr: Array3::zeros((k, height, width)),
            alpha: Array2::zeros((height, width)),
            depth: Array2::zeros((height, width)),
        }
    }
}

/// Projects one primitive; `Ok(None)` when it is culled by the near plane.
pub fn project_primitive(
    prim: &GaussianPrimitive,
    source_index: usize,
    cam: &Camera,
    size: (usize, usize),
    cfg: &RasterConfig,
) -> Result<Option<ProjectedSplat>, RasterError> {
    let (height, width) = size;
    let mean = Vector3::from(prim.mean);
    let p = cam.world_to_camera(&mean);
    if !(p.z > cfg.near) {
        return Ok(None);
    }
    let (fx, fy) = cam.focal_px(height, width);
    let (u, v) = cam.project_camera_point(&p, height, width);
    let z2 = p.z * p.z;
    let jac = Matrix2x3::new(
        fx / p.z,
        0.0,
        -fx * p.x / z2,
        0.0,
        fy / p.z,
        -fy * p.y / z2,
    );
    let w2c = cam.rotation().transpose();
    let cov_cam = w2c * prim.covariance() * w2c.transpose();
    let mut cov2d = jac * cov_cam * jac.transpose();
    // Symmetrize against roundoff before dilation.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    cov2d[(0, 0)] += cfg.dilation;
    cov2d[(1, 1)] += cfg.dilation;

    let det = cov2d.determinant();
    if !(det > 0.0 && cov2d[(0, 0)] > 0.0) || !det.is_finite() {
        return Err(RasterError::NonSpd { source_index });
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -off, -off, cov2d[(0, 0)]) / det;
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    Ok(Some(ProjectedSplat {
        mean2d: [u, v],
        cov2d,
        conic,
        depth: p.z,
        opacity: prim.opacity,
        radius: cfg.cull_sigma * lambda_max.sqrt(),
        source_index,
    }))
}

/// Projects every primitive of `field` into `cam`, dropping those behind the
/// near plane.
pub fn project(
    field: &GaussianField,
    cam: &Camera,
    size: (usize, usize),
    cfg: &RasterConfig,
) -> Result<Vec<ProjectedSplat>, RasterError> {
    let projected = exec::map_indexed(field.len(), |i| {
        project_primitive(&field.prims()[i], i, cam, size, cfg)
    });
    let mut out = Vec::with_capacity(projected.len());
    for p in projected {
        if let Some(s) = p? {
            out.push(s);
        }
    }
    Ok(out)
}

/// Renders the field's own attribute payload.
pub fn render(
    field: &GaussianField,
    cam: &Camera,
    size: (usize, usize),
    cfg: &RasterConfig,
) -> Result<RenderOutput, RasterError> {
    if field.attr_dim() == 0 {
        return Err(RasterError::EmptyAttributes);
    }
    let splats = project(field, cam, size, cfg)?;
    let prims = field.prims();
    Ok(rasterize(
        &splats,
        &|i: usize| prims[i].attr.as_slice(),
        field.attr_dim(),
        size,
        cfg,
    ))
}

/// Renders the field's geometry with a substitute attribute matrix of shape
/// `(N, K)`, one row per Gaussian.
pub fn render_semantic(
    field: &GaussianField,
    attrs: ArrayView2<'_, f64>,
    cam: &Camera,
    size: (usize, usize),
    cfg: &RasterConfig,
) -> Result<RenderOutput, RasterError> {
    let (rows, cols) = attrs.dim();
    if rows != field.len() {
        return Err(RasterError::AttrShape {
            rows,
            cols,
            expected: field.len(),
        });
    }
    if cols == 0 {
        return Err(RasterError::EmptyAttributes);
    }
    let splats = project(field, cam, size, cfg)?;
    let attrs = attrs.as_standard_layout();
    let flat = attrs.as_slice().expect("standard layout");
    Ok(rasterize(
        &splats,
        &|i: usize| &flat[i * cols..(i + 1) * cols],
        cols,
        size,
        cfg,
    ))
}

/// Composites pre-projected splats. `attr(i)` returns the K-vector of the
/// Gaussian with `source_index == i`.
pub fn rasterize<'a>(
    splats: &[ProjectedSplat],
    attr: &(dyn Fn(usize) -> &'a [f64] + Sync),
    k: usize,
    size: (usize, usize),
    cfg: &RasterConfig,
) -> RenderOutput {
    let (height, width) = size;
    if height == 0 || width == 0 {
        return RenderOutput::zeros(k, height, width);
    }
    if k > cfg.attr_warn {
        warn!(
            "rasterizing {k} attribute channels at {height}x{width}; expect heavy memory use"
        );
    }
    let tile = cfg.tile_size.max(1);
    let tiles_x = width.div_ceil(tile);
    let tiles_y = height.div_ceil(tile);

    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then(splats[a].source_index.cmp(&splats[b].source_index))
    });

    // Bin in depth order so every tile list is already sorted.
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); tiles_x * tiles_y];
    for &s in &order {
        let sp = &splats[s];
        let Some((c0, c1, r0, r1)) = pixel_bounds(sp, height, width) else {
            continue;
        };
        for ty in r0 / tile..=r1 / tile {
            for tx in c0 / tile..=c1 / tile {
                bins[ty * tiles_x + tx].push(s);
            }
        }
    }

    let tiles = exec::map_indexed(bins.len(), |t| {
        let (ty, tx) = (t / tiles_x, t % tiles_x);
        let rows = ty * tile..((ty + 1) * tile).min(height);
        let cols = tx * tile..((tx + 1) * tile).min(width);
        composite_tile(splats, &bins[t], attr, k, rows, cols, cfg)
    });

    let mut out = RenderOutput::zeros(k, height, width);
    for (t, res) in tiles.into_iter().enumerate() {
        let (ty, tx) = (t / tiles_x, t % tiles_x);
        let r0 = ty * tile;
        let c0 = tx * tile;
        let tw = res.width;
        for (p, (&a, &d)) in res.alpha.iter().zip(&res.depth).enumerate() {
            let (r, c) = (r0 + p / tw, c0 + p % tw);
            out.alpha[[r, c]] = a;
            out.depth[[r, c]] = d;
            for ch in 0..k {
                out.attr[[ch, r, c]] = res.attr[p * k + ch];
            }
        }
    }
    out
}

/// Inclusive column/row range of pixels whose centers fall inside the
/// splat's support bound, clipped to the image.
fn pixel_bounds(sp: &ProjectedSplat, height: usize, width: usize) -> Option<(usize, usize, usize, usize)> {
    let [u, v] = sp.mean2d;
    let r = sp.radius;
    let c0 = (u - r - 0.5).ceil().max(0.0);
    let c1 = (u + r - 0.5).floor().min(width as f64 - 1.0);
    let r0 = (v - r - 0.5).ceil().max(0.0);
    let r1 = (v + r - 0.5).floor().min(height as f64 - 1.0);
    if !(c0 <= c1 && r0 <= r1) {
        return None;
    }
    Some((c0 as usize, c1 as usize, r0 as usize, r1 as usize))
}

struct TileResult {
    width: usize,
    attr: Vec<f64>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
}

fn composite_tile<'a>(
    splats: &[ProjectedSplat],
    list: &[usize],
    attr: &(dyn Fn(usize) -> &'a [f64] + Sync),
    k: usize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    cfg: &RasterConfig,
) -> TileResult {
    let width = cols.len();
    let n = rows.len() * width;
    let mut res = TileResult {
        width,
        attr: vec![0.0; n * k],
        alpha: vec![0.0; n],
        depth: vec![0.0; n],
    };
    for (ri, r) in rows.clone().enumerate() {
        let y = r as f64 + 0.5;
        for (ci, c) in cols.clone().enumerate() {
            let x = c as f64 + 0.5;
            let p = ri * width + ci;
            let acc = &mut res.attr[p * k..(p + 1) * k];
            let mut t = 1.0;
            let mut depth = 0.0;
            for &s in list {
                let sp = &splats[s];
                let a = sp.weight(x, y, cfg);
                if a <= 0.0 {
                    continue;
                }
                let w = a * t;
                for (o, v) in acc.iter_mut().zip(attr(sp.source_index)) {
                    *o += v * w;
                }
                depth += sp.depth * w;
                t *= 1.0 - a;
                if t < cfg.min_transmittance {
                    break;
                }
            }
            let alpha = 1.0 - t;
            res.alpha[p] = alpha;
            res.depth[p] = depth / alpha.max(1e-8);
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::scene::{Dims, Intrinsics};
    use nalgebra::Matrix4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_cam() -> Camera {
        Camera::new(Intrinsics::new(1.0, 1.0, 0.5, 0.5), Matrix4::identity())
    }

    fn sparse(prims: Vec<GaussianPrimitive>) -> GaussianField {
        let k = prims.first().map_or(1, |p| p.attr.len());
        GaussianField::sparse(k, prims).unwrap()
    }

    #[test]
    fn on_axis_gaussian_projects_to_principal_point() {
        let cam = Camera::new(Intrinsics::new(0.8, 0.9, 0.4, 0.6), Matrix4::identity());
        let prim = GaussianPrimitive::isotropic([0.0, 0.0, 1.0], 0.01, 1.0, vec![1.0]);
        let s = project_primitive(&prim, 0, &cam, (20, 30), &RasterConfig::default())
            .unwrap()
            .unwrap();
        assert!((s.mean2d[0] - 0.4 * 30.0).abs() < 1e-12);
        assert!((s.mean2d[1] - 0.6 * 20.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_behind_camera_is_culled() {
        let prim = GaussianPrimitive::isotropic([0.0, 0.0, -1.0], 0.1, 1.0, vec![1.0]);
        let s = project_primitive(&prim, 0, &identity_cam(), (16, 16), &RasterConfig::default());
        assert_eq!(s, Ok(None));
        let at_near = GaussianPrimitive::isotropic([0.0, 0.0, 0.01], 0.1, 1.0, vec![1.0]);
        assert_eq!(
            project_primitive(&at_near, 0, &identity_cam(), (16, 16), &RasterConfig::default()),
            Ok(None)
        );
    }

    #[test]
    fn on_axis_isotropic_covariance_matches_pinhole_jacobian() {
        // cov2d = diag((sigma * f_px / z)^2 + dilation) for an on-axis point.
        let cfg = RasterConfig::default();
        let cam = Camera::new(Intrinsics::new(1.2, 1.2, 0.5, 0.5), Matrix4::identity());
        let (sigma, z, w) = (0.05, 2.5, 64usize);
        let prim = GaussianPrimitive::isotropic([0.0, 0.0, z], sigma, 1.0, vec![1.0]);
        let s = project_primitive(&prim, 0, &cam, (w, w), &cfg).unwrap().unwrap();
        let f_px = 1.2 * w as f64;
        let expected = (sigma * f_px / z).powi(2) + cfg.dilation;
        assert!((s.cov2d[(0, 0)] - expected).abs() < 1e-12);
        assert!((s.cov2d[(1, 1)] - expected).abs() < 1e-12);
        assert!(s.cov2d[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn empty_field_renders_zeros() {
        let field = GaussianField::sparse(3, vec![]).unwrap();
        let out = render(&field, &identity_cam(), (8, 8), &RasterConfig::default()).unwrap();
        assert!(out.attr.iter().all(|&v| v == 0.0));
        assert!(out.alpha.iter().all(|&v| v == 0.0));
    }

    /// Gaussian whose mean projects onto the center of pixel (row, col) of
    /// an identity camera with unit normalized focal length.
    fn centered_on_pixel(row: usize, col: usize, size: usize, z: f64, sigma: f64, opacity: f64, attr: Vec<f64>) -> GaussianPrimitive {
        let cam = identity_cam();
        let p = cam.backproject(col as f64 + 0.5, row as f64 + 0.5, z, size, size);
        GaussianPrimitive::isotropic([p.x, p.y, p.z], sigma, opacity, attr)
    }

    #[test]
    fn single_opaque_splat_saturates_at_cap() {
        let prim = centered_on_pixel(4, 4, 9, 2.0, 0.02, 1.0, vec![1.0, 0.0, 0.0]);
        let out = render(&sparse(vec![prim]), &identity_cam(), (9, 9), &RasterConfig::default()).unwrap();
        assert!((out.attr[[0, 4, 4]] - 0.99).abs() < 1e-12);
        assert!(out.attr[[1, 4, 4]].abs() < 1e-15);
        assert!((out.alpha[[4, 4]] - 0.99).abs() < 1e-12);
        assert!((out.depth[[4, 4]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_coincident_splats_composite_front_to_back() {
        let (a1, a2) = (0.6, 0.7);
        let front = centered_on_pixel(3, 3, 7, 1.0, 0.001, a1, vec![0.2, 0.9]);
        let back = centered_on_pixel(3, 3, 7, 3.0, 0.003, a2, vec![0.8, 0.1]);
        let field = sparse(vec![back, front]);
        let cfg = RasterConfig::default();
        let out = render(&field, &identity_cam(), (7, 7), &cfg).unwrap();
        // At the pixel center both kernels evaluate to exp(0) = 1.
        for (ch, (f, b)) in [(0.2, 0.8), (0.9, 0.1)].into_iter().enumerate() {
            let hand = f * a1 + b * a2 * (1.0 - a1);
            assert!((out.attr[[ch, 3, 3]] - hand).abs() < 1e-12);
        }
        let brute = reference::render_brute_force(field.prims(), &|i| field.prims()[i].attr.as_slice(), 2, &identity_cam(), (7, 7), &cfg);
        let max = (&out.attr - &brute.attr).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12);
    }

    #[test]
    fn semantic_render_with_zero_attrs_is_zero() {
        let prims: Vec<_> = (0..4).map(|i| centered_on_pixel(i, i, 6, 1.0, 0.01, 0.8, vec![0.3])).collect();
        let field = sparse(prims);
        let attrs = Array2::<f64>::zeros((4, 5));
        let out = render_semantic(&field, attrs.view(), &identity_cam(), (6, 6), &RasterConfig::default()).unwrap();
        assert_eq!(out.attr.dim(), (5, 6, 6));
        assert!(out.attr.iter().all(|&v| v == 0.0));
        assert!(out.alpha.iter().any(|&v| v > 0.5));
    }

    #[test]
    fn one_hot_semantic_channel_equals_alpha_footprint() {
        let field = sparse(vec![centered_on_pixel(5, 5, 11, 2.0, 0.2, 0.9, vec![0.0])]);
        let attrs = ndarray::arr2(&[[0.0, 1.0, 0.0]]);
        let out = render_semantic(&field, attrs.view(), &identity_cam(), (11, 11), &RasterConfig::default()).unwrap();
        for ((r, c), &a) in out.alpha.indexed_iter() {
            assert!((out.attr[[1, r, c]] - a).abs() < 1e-14);
            assert_eq!(out.attr[[0, r, c]], 0.0);
        }
    }

    #[test]
    fn semantic_dimension_mismatch_is_rejected() {
        let field = sparse(vec![centered_on_pixel(1, 1, 4, 1.0, 0.1, 0.5, vec![0.0])]);
        let attrs = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            render_semantic(&field, attrs.view(), &identity_cam(), (4, 4), &RasterConfig::default()),
            Err(RasterError::AttrShape { rows: 2, .. })
        ));
    }

    #[test]
    fn second_view_dominates_first_view_pixel() {
        // Gaussians of view 1 sit in front of view 0's Gaussians at a shared
        // pixel, so view 0's render carries view 1's semantic vector.
        let dims = Dims::new(2, 1, 1);
        let cam = identity_cam();
        let back = centered_on_pixel(0, 0, 1, 3.0, 0.3, 0.9, vec![0.0]);
        let front = centered_on_pixel(0, 0, 1, 1.5, 0.15, 0.7, vec![0.0]);
        let field = GaussianField::aligned(dims, 1, vec![back, front]).unwrap();
        let attrs = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let cfg = RasterConfig::default();
        let out = render_semantic(&field, attrs.view(), &cam, (1, 1), &cfg).unwrap();
        let brute = reference::render_brute_force(field.prims(), &|i| if i == 0 { &[1.0, 0.0] } else { &[0.0, 1.0] }, 2, &cam, (1, 1), &cfg);
        assert!(out.attr[[1, 0, 0]] > out.attr[[0, 0, 0]]);
        assert!((out.attr[[1, 0, 0]] - 0.7).abs() < 1e-12);
        assert!((&out.attr - &brute.attr).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn raising_front_opacity_never_raises_back_contribution() {
        let cfg = RasterConfig::default();
        let back = centered_on_pixel(4, 4, 9, 3.0, 0.1, 0.8, vec![0.0]);
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let front = centered_on_pixel(4, 5, 9, 1.0, 0.05, step as f64 / 10.0, vec![0.0]);
            let field = sparse(vec![front, back.clone()]);
            let attrs = ndarray::arr2(&[[0.0], [1.0]]);
            let out = render_semantic(&field, attrs.view(), &identity_cam(), (9, 9), &cfg).unwrap();
            let back_sum: f64 = out.attr.iter().sum();
            assert!(back_sum <= prev + 1e-15);
            prev = back_sum;
        }
    }

    fn random_field(rng: &mut ChaCha8Rng, n: usize, k: usize) -> GaussianField {
        let prims = (0..n)
            .map(|_| {
                let mut q = [0.0; 4];
                for c in &mut q {
                    *c = rng.random_range(-1.0..1.0);
                }
                let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
                GaussianPrimitive {
                    mean: [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(0.5..3.0)],
                    opacity: rng.random_range(0.05..1.0),
                    rotation: q.map(|c| c / norm),
                    scale: [rng.random_range(0.005..0.15), rng.random_range(0.005..0.15), rng.random_range(0.005..0.15)],
                    attr: (0..k).map(|_| rng.random_range(0.0..1.0)).collect(),
                }
            })
            .collect();
        GaussianField::sparse(k, prims).unwrap()
    }

    #[test]
    fn random_fields_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = RasterConfig { tile_size: 4, ..RasterConfig::default() };
        for trial in 0..30 {
            let field = random_field(&mut rng, 1 + trial, 3);
            let out = render(&field, &identity_cam(), (16, 16), &cfg).unwrap();
            let brute = reference::render_brute_force(field.prims(), &|i| field.prims()[i].attr.as_slice(), 3, &identity_cam(), (16, 16), &cfg);
            let err = (&out.attr - &brute.attr).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-5, "trial {trial}: {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn outputs_stay_in_unit_interval(seed in 0u64..10_000, n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let field = random_field(&mut rng, n, 2);
            let out = render(&field, &identity_cam(), (12, 12), &RasterConfig::default()).unwrap();
            prop_assert!(out.attr.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(out.alpha.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn input_order_does_not_change_output(seed in 0u64..10_000, n in 2usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let field = random_field(&mut rng, n, 2);
            let mut prims = field.prims().to_vec();
            prims.reverse();
            let shuffled = GaussianField::sparse(2, prims).unwrap();
            let cfg = RasterConfig::default();
            let a = render(&field, &identity_cam(), (12, 12), &cfg).unwrap();
            let b = render(&shuffled, &identity_cam(), (12, 12), &cfg).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
