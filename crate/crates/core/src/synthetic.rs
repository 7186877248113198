//! Procedural scenes with known answers: a labeled fronto-parallel wall seen
//! by pixel-aligned cameras, with predictions constructed from the layout.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3, Array4};

use crate::config::Config;
use crate::pairing::Frame;
use crate::raster::RasterConfig;
use crate::scene::{Camera, ClassTaxonomy, Dims, GaussianField, GaussianPrimitive, Intrinsics, LabelMaps, SemanticPredictions};
use crate::text::CrossAttentionStack;

/// Saturated logit used for confident predictions.
pub const SURE: f64 = 30.0;

/// Axis-aligned rectangle on the wall, in world units.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub class: i32,
    pub ins: i32,
    pub color: [f64; 3],
}

impl Region {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x.0 && x < self.x.1 && y >= self.y.0 && y < self.y.1
    }
}

/// A wall at world depth `depth` filling the frame, with labeled regions
/// painted on it. Points outside every region belong to `wall`.
#[derive(Clone, Debug, PartialEq)]
pub struct WallLayout {
    pub depth: f64,
    pub wall: Region,
    pub regions: Vec<Region>,
}

impl WallLayout {
    pub fn region_at(&self, x: f64, y: f64) -> &Region {
        self.regions.iter().find(|r| r.contains(x, y)).unwrap_or(&self.wall)
    }
}

/// Held-out cameras with their ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetViews {
    pub cameras: Vec<Camera>,
    pub labels: LabelMaps,
    pub depth: Array3<f64>,
    pub images: Array4<f64>,
    pub text_masks: Vec<Array3<bool>>,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub taxonomy: ClassTaxonomy,
    pub field: GaussianField,
    pub cameras: Vec<Camera>,
    pub preds: SemanticPredictions,
    pub gt: LabelMaps,
    pub gt_depth: Array3<f64>,
    /// `(V, 3, H, W)`
    pub images: Array4<f64>,
    pub text_feats: Array2<f64>,
    pub attention: CrossAttentionStack,
    pub gt_text_masks: Vec<Array3<bool>>,
    pub targets: Option<TargetViews>,
    /// Flat index pairs of context pixels that see the same wall point.
    pub correspondences: Vec<(usize, usize)>,
    pub config: Config,
}

fn camera_at(x: f64) -> Camera {
    Camera::from_rotation_translation(Intrinsics::new(1.0, 1.0, 0.5, 0.5), Matrix3::identity(), Vector3::new(x, 0.0, 0.0))
}

/// World point on the wall seen through the center of pixel `(i, j)`.
fn wall_point(cam: &Camera, layout: &WallLayout, i: usize, j: usize, size: usize) -> Vector3<f64> {
    let p = cam.backproject(j as f64 + 0.5, i as f64 + 0.5, layout.depth - cam.position().z, size, size);
    cam.camera_to_world(&p)
}

struct Rendered {
    labels: LabelMaps,
    depth: Array3<f64>,
    images: Array4<f64>,
    regions: Vec<Vec<usize>>,
}

/// Ground truth of a set of cameras by ray casting the layout. `regions`
/// holds, per pixel, the index into `[wall, regions...]`.
fn cast(layout: &WallLayout, cams: &[Camera], size: usize) -> Rendered {
    let v = cams.len();
    let mut sem = Array3::zeros((v, size, size));
    let mut ins = Array3::zeros((v, size, size));
    let mut depth = Array3::zeros((v, size, size));
    let mut images = Array4::zeros((v, 3, size, size));
    let mut regions = vec![Vec::with_capacity(size * size); v];
    for (vi, cam) in cams.iter().enumerate() {
        for i in 0..size {
            for j in 0..size {
                let p = wall_point(cam, layout, i, j, size);
                let r = layout.region_at(p.x, p.y);
                sem[[vi, i, j]] = r.class;
                ins[[vi, i, j]] = r.ins;
                depth[[vi, i, j]] = layout.depth - cam.position().z;
                for c in 0..3 {
                    images[[vi, c, i, j]] = r.color[c];
                }
                let idx = layout.regions.iter().position(|q| q == r).map_or(0, |k| k + 1);
                regions[vi].push(idx);
            }
        }
    }
    Rendered {
        labels: LabelMaps::new(sem, ins).expect("every pixel is labeled"),
        depth,
        images,
        regions,
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Pixel-aligned field: one isotropic Gaussian on the wall per pixel.
fn wall_field(layout: &WallLayout, cams: &[Camera], size: usize, sigma: f64, opacity: f64) -> GaussianField {
    let mut prims = Vec::with_capacity(cams.len() * size * size);
    for cam in cams {
        for i in 0..size {
            for j in 0..size {
                let p = wall_point(cam, layout, i, j, size);
                let color = layout.region_at(p.x, p.y).color;
                prims.push(GaussianPrimitive::isotropic([p.x, p.y, p.z], sigma, opacity, color.to_vec()));
            }
        }
    }
    GaussianField::aligned(Dims::new(cams.len(), size, size), 3, prims).expect("one Gaussian per pixel")
}

/// Correspondences between two views of the wall offset by `shift` whole
/// pixels along x: pixel `(i, j)` of view 1 sees what pixel `(i, j + shift)`
/// of view 0 sees.
fn shifted_correspondences(size: usize, shift: usize) -> Vec<(usize, usize)> {
    let dims = Dims::new(2, size, size);
    let mut out = Vec::new();
    for i in 0..size {
        for j in 0..size.saturating_sub(shift) {
            out.push((dims.flat(0, i, j + shift), dims.flat(1, i, j)));
        }
    }
    out
}

/// One-hot rows: query states are the standard basis.
fn basis_queries(n: usize) -> Array2<f64> {
    Array2::eye(n)
}

/// Two-object wall seen by two context views ten pixels apart and one
/// held-out target camera between them at a fractional pixel offset.
///
/// Queries: 0 wall (stuff class 0), 1 object A (thing class 1), 2 object B
/// (thing class 2), 3 and 4 no-object. Mask and class logits are saturated
/// on the true layout; the text prompt refers to object A.
pub fn wall_scene() -> SyntheticScene {
    let size = 64;
    let depth = 100.0;
    let px = depth / size as f64;
    let u = |col: f64| (col - size as f64 / 2.0) * px;
    let layout = WallLayout {
        depth,
        wall: Region { x: (f64::MIN, f64::MAX), y: (f64::MIN, f64::MAX), class: 0, ins: 0, color: [0.5, 0.5, 0.5] },
        regions: vec![
            Region { x: (u(14.0), u(26.0)), y: (u(20.0), u(44.0)), class: 1, ins: 1, color: [0.9, 0.2, 0.1] },
            Region { x: (u(36.0), u(50.0)), y: (u(10.0), u(30.0)), class: 2, ins: 2, color: [0.1, 0.3, 0.9] },
        ],
    };
    let cameras = vec![camera_at(0.0), camera_at(10.0 * px)];
    let targets = vec![camera_at(4.8 * px)];
    let gt = cast(&layout, &cameras, size);
    let tgt = cast(&layout, &targets, size);

    let nq = 5;
    let taxonomy = ClassTaxonomy::generic(3, &[1, 2]);
    let nc = taxonomy.num_classes();
    let mut mask_logits = Array4::from_elem((nq, 2, size, size), -SURE);
    for v in 0..2 {
        for (p, &r) in gt.regions[v].iter().enumerate() {
            mask_logits[[r, v, p / size, p % size]] = SURE;
        }
    }
    let mut class_logits = Array2::from_elem((nq, nc), -SURE);
    for (n, c) in [(0, 0), (1, 1), (2, 2), (3, 3), (4, 3)] {
        class_logits[[n, c]] = SURE;
    }
    let queries = basis_queries(nq);
    let text_feats = queries.row(1).insert_axis(ndarray::Axis(0)).to_owned();
    let gt_text_masks = vec![gt.labels.ins.mapv(|i| i == 1)];

    let config = Config {
        aggregate_raster: RasterConfig { dilation: 0.0, ..RasterConfig::default() },
        ..Config::default()
    };
    SyntheticScene {
        taxonomy,
        field: wall_field(&layout, &cameras, size, 0.5, 1.0),
        cameras,
        preds: SemanticPredictions { mask_logits, class_logits, queries },
        gt: gt.labels,
        gt_depth: gt.depth,
        images: gt.images,
        text_feats,
        attention: CrossAttentionStack::zeros(crate::config::TEXT_ATTN_LAYERS, nq, nq, 4),
        gt_text_masks,
        targets: Some(TargetViews {
            cameras: targets,
            text_masks: vec![tgt.labels.ins.mapv(|i| i == 1)],
            labels: tgt.labels,
            depth: tgt.depth,
            images: tgt.images,
        }),
        correspondences: shifted_correspondences(size, 10),
        config,
    }
}

/// Two views that see one object through different queries. View 0 is
/// confident in query 1 (0.95 vs 0.60); view 1 slightly prefers query 2
/// (0.55 vs 0.65). Translucent Gaussians (opacity 0.5) make each pixel a
/// blend of both views' evidence once aggregated, which favours query 1
/// everywhere.
pub fn disagreement_scene() -> SyntheticScene {
    let size = 16;
    let depth = 100.0;
    let px = depth / size as f64;
    let u = |col: f64| (col - size as f64 / 2.0) * px;
    let layout = WallLayout {
        depth,
        wall: Region { x: (f64::MIN, f64::MAX), y: (f64::MIN, f64::MAX), class: 0, ins: 0, color: [0.5, 0.5, 0.5] },
        regions: vec![Region { x: (u(8.0), u(12.0)), y: (u(5.0), u(11.0)), class: 1, ins: 1, color: [0.8, 0.3, 0.2] }],
    };
    let shift = 4;
    let cameras = vec![camera_at(0.0), camera_at(shift as f64 * px)];
    let gt = cast(&layout, &cameras, size);

    let nq = 4;
    let taxonomy = ClassTaxonomy::generic(2, &[1]);
    let nc = taxonomy.num_classes();
    let object = [[0.05, 0.95, 0.60, 0.0], [0.05, 0.55, 0.65, 0.0]];
    let mut mask_logits = Array4::from_elem((nq, 2, size, size), -SURE);
    for v in 0..2 {
        for (p, &r) in gt.regions[v].iter().enumerate() {
            let (i, j) = (p / size, p % size);
            if r == 0 {
                mask_logits[[0, v, i, j]] = SURE;
            } else {
                for n in 0..3 {
                    mask_logits[[n, v, i, j]] = logit(object[v][n]);
                }
            }
        }
    }
    let mut class_logits = Array2::from_elem((nq, nc), -SURE);
    for (n, c) in [(0, 0), (1, 1), (2, 1), (3, 2)] {
        class_logits[[n, c]] = SURE;
    }
    let queries = basis_queries(nq);
    let text_feats = queries.row(1).insert_axis(ndarray::Axis(0)).to_owned();
    let gt_text_masks = vec![gt.labels.ins.mapv(|i| i == 1)];
    let config = Config {
        aggregate_raster: RasterConfig { dilation: 0.0, ..RasterConfig::default() },
        ..Config::default()
    };
    SyntheticScene {
        taxonomy,
        field: wall_field(&layout, &cameras, size, 0.5, 0.5),
        cameras,
        preds: SemanticPredictions { mask_logits, class_logits, queries },
        gt: gt.labels,
        gt_depth: gt.depth,
        images: gt.images,
        text_feats,
        attention: CrossAttentionStack::zeros(crate::config::TEXT_ATTN_LAYERS, nq, nq, 4),
        gt_text_masks,
        targets: None,
        correspondences: shifted_correspondences(size, shift),
        config,
    }
}

/// Two frames of a wall at depth 2 whose frusta overlap by half along x.
pub fn half_overlap_frames(size: usize) -> (Frame, Frame) {
    let (d, fx) = (2.0, 1.0);
    let depth = Array2::from_elem((size, size), d);
    // Visible width at depth d is d / fx; shift by half of it.
    let shift = d / fx / 2.0;
    (Frame::new(depth.clone(), camera_at(0.0)), Frame::new(depth, camera_at(shift)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::{cross_view_agreement, run_lifting, AggregateOptions};
    use crate::metrics::panoptic_quality;
    use crate::scene::{validate_bundle, ValidationLimits, BACKGROUND};

    #[test]
    fn scenes_are_valid_bundles() {
        for s in [wall_scene(), disagreement_scene()] {
            let report = validate_bundle(&s.field, &s.preds, &s.cameras, &ValidationLimits::default());
            assert!(report.is_empty(), "{report:?}");
            assert!(s.gt.sem.iter().all(|&c| c != BACKGROUND));
        }
    }

    #[test]
    fn correspondences_see_the_same_region() {
        let s = wall_scene();
        let sem = s.gt.sem.as_slice().unwrap();
        for &(a, b) in &s.correspondences {
            assert_eq!(sem[a], sem[b]);
        }
        let pa = s.field.prims()[s.correspondences[0].0].mean;
        let pb = s.field.prims()[s.correspondences[0].1].mean;
        for k in 0..3 {
            assert!((pa[k] - pb[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn disagreement_flips_with_aggregation() {
        let s = disagreement_scene();
        let opts = AggregateOptions::from_config(&s.config);
        let plain = run_lifting(&s.preds, &s.field, &s.cameras, &s.taxonomy, 0.5, 0.3, false, &opts, None).unwrap();
        let fused = run_lifting(&s.preds, &s.field, &s.cameras, &s.taxonomy, 0.5, 0.3, true, &opts, None).unwrap();
        assert!(cross_view_agreement(&plain.labels, &s.correspondences) < 1.0);
        assert_eq!(cross_view_agreement(&fused.labels, &s.correspondences), 1.0);
        let pq_plain = panoptic_quality(&plain.labels, &s.gt, &s.taxonomy).unwrap().unwrap().pq;
        let pq_fused = panoptic_quality(&fused.labels, &s.gt, &s.taxonomy).unwrap().unwrap().pq;
        assert!(pq_fused > pq_plain, "{pq_plain} -> {pq_fused}");
    }
}
