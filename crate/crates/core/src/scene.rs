//! Domain types shared by every stage: pixel-aligned Gaussians, cameras,
//! per-query predictions, label maps and lifted segmentation sets.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label value for pixels that carry no class and no instance.
pub const BACKGROUND: i32 = -1;

/// Tolerance within which a stored quaternion is silently renormalized.
pub const QUAT_RENORM_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("expected {expected} primitives for dims {dims:?}, got {got}")]
    PrimitiveCount {
        dims: Dims,
        expected: usize,
        got: usize,
    },
    #[error("primitive {index} has attribute length {got}, field expects {expected}")]
    AttrLength {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("quaternion norm {norm} too far from unit")]
    BadQuaternion { norm: f64 },
    #[error("label maps violate background consistency at view {view} pixel ({row}, {col})")]
    LabelConsistency { view: usize, row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("operation requires a pixel-aligned field, got a sparse one")]
    SparseField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: [f64; 3],
    pub opacity: f64,
    /// Unit quaternion stored as (w, x, y, z).
    pub rotation: [f64; 4],
    /// Per-axis standard deviations.
    pub scale: [f64; 3],
    pub attr: Vec<f64>,
}

impl GaussianPrimitive {
    pub fn isotropic(mean: [f64; 3], sigma: f64, opacity: f64, attr: Vec<f64>) -> Self {
        Self {
            mean,
            opacity,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [sigma; 3],
            attr,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)).to_rotation_matrix().into_inner()
    }

    /// World-space covariance `R diag(s^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s = Matrix3::from_diagonal(&Vector3::new(
            self.scale[0] * self.scale[0],
            self.scale[1] * self.scale[1],
            self.scale[2] * self.scale[2],
        ));
        r * s * r.transpose()
    }
}

/// Renormalizes a (w, x, y, z) quaternion when it is within
/// [`QUAT_RENORM_TOL`] of unit length, rejects it otherwise.
pub fn normalize_rotation(q: [f64; 4]) -> Result<[f64; 4], SceneError> {
    let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > QUAT_RENORM_TOL {
        return Err(SceneError::BadQuaternion { norm });
    }
    Ok([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub views: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(views: usize, height: usize, width: usize) -> Self {
        Self {
            views,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.views * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels_per_view(&self) -> usize {
        self.height * self.width
    }

    /// Row-major flat index of pixel `(row, col)` in `view`.
    #[inline]
    pub const fn flat(&self, view: usize, row: usize, col: usize) -> usize {
        (view * self.height + row) * self.width + col
    }

    #[inline]
    pub const fn unflat(&self, index: usize) -> (usize, usize, usize) {
        let col = index % self.width;
        let rest = index / self.width;
        (rest / self.height, rest % self.height, col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// One primitive per input pixel, indexed `(view, row, col)`.
    Aligned(Dims),
    /// Arbitrary primitive list, e.g. after editing.
    Sparse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    prims: Vec<GaussianPrimitive>,
    layout: Layout,
    attr_dim: usize,
}

impl GaussianField {
    pub fn aligned(
        dims: Dims,
        attr_dim: usize,
        prims: Vec<GaussianPrimitive>,
    ) -> Result<Self, SceneError> {
        if prims.len() != dims.len() {
            return Err(SceneError::PrimitiveCount {
                dims,
                expected: dims.len(),
                got: prims.len(),
            });
        }
        check_attr_len(&prims, attr_dim)?;
        Ok(Self {
            prims,
            layout: Layout::Aligned(dims),
            attr_dim,
        })
    }

    pub fn sparse(attr_dim: usize, prims: Vec<GaussianPrimitive>) -> Result<Self, SceneError> {
        check_attr_len(&prims, attr_dim)?;
        Ok(Self {
            prims,
            layout: Layout::Sparse,
            attr_dim,
        })
    }

    pub fn prims(&self) -> &[GaussianPrimitive] {
        &self.prims
    }

    pub fn into_prims(self) -> Vec<GaussianPrimitive> {
        self.prims
    }

    pub fn len(&self) -> usize {
        self.prims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prims.is_empty()
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.layout, Layout::Sparse)
    }

    pub fn dims(&self) -> Option<Dims> {
        match self.layout {
            Layout::Aligned(d) => Some(d),
            Layout::Sparse => None,
        }
    }

    /// Dimensions of a pixel-aligned field, or an error for sparse ones.
    pub fn aligned_dims(&self) -> Result<Dims, SceneError> {
        self.dims().ok_or(SceneError::SparseField)
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn at(&self, view: usize, row: usize, col: usize) -> Option<&GaussianPrimitive> {
        let d = self.dims()?;
        if view >= d.views || row >= d.height || col >= d.width {
            return None;
        }
        self.prims.get(d.flat(view, row, col))
    }
}

fn check_attr_len(prims: &[GaussianPrimitive], attr_dim: usize) -> Result<(), SceneError> {
    match prims.iter().position(|p| p.attr.len() != attr_dim) {
        Some(index) => Err(SceneError::AttrLength {
            index,
            expected: attr_dim,
            got: prims[index].attr.len(),
        }),
        None => Ok(()),
    }
}

/// Pinhole intrinsics normalized by image width (fx, cx) and height (fy, cy).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub const fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }
}

/// Camera with an OpenCV-convention camera-to-world pose
/// (+x right, +y down, +z forward).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub c2w: Matrix4<f64>,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, c2w: Matrix4<f64>) -> Self {
        Self { intrinsics, c2w }
    }

    pub fn from_rotation_translation(
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Self {
        let mut c2w = Matrix4::identity();
        c2w.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        c2w.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self { intrinsics, c2w }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.c2w.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn position(&self) -> Vector3<f64> {
        self.c2w.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.position())
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.position()
    }

    /// Focal lengths in pixels for an image of `(height, width)`.
    pub fn focal_px(&self, height: usize, width: usize) -> (f64, f64) {
        (
            self.intrinsics.fx * width as f64,
            self.intrinsics.fy * height as f64,
        )
    }

    /// Continuous pixel coordinates `(u, v)` of a camera-frame point.
    /// Pixel `(row, col)` has its center at `(col + 0.5, row + 0.5)`.
    pub fn project_camera_point(&self, p: &Vector3<f64>, height: usize, width: usize) -> (f64, f64) {
        let k = &self.intrinsics;
        let u = (k.fx * p.x / p.z + k.cx) * width as f64;
        let v = (k.fy * p.y / p.z + k.cy) * height as f64;
        (u, v)
    }

    /// Camera-frame point at z-depth `depth` seen through pixel coordinates `(u, v)`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64, height: usize, width: usize) -> Vector3<f64> {
        let k = &self.intrinsics;
        let x = (u / width as f64 - k.cx) / k.fx;
        let y = (v / height as f64 - k.cy) / k.fy;
        Vector3::new(x * depth, y * depth, depth)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            out.push(format!("non-positive focal length ({}, {})", k.fx, k.fy));
        }
        if !(k.cx > 0.0 && k.cx < 1.0 && k.cy > 0.0 && k.cy < 1.0) {
            out.push(format!("principal point ({}, {}) outside (0,1)", k.cx, k.cy));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            out.push(format!("rotation not orthonormal (max error {err:e})"));
        }
        let det = r.determinant();
        if !((det - 1.0).abs() <= 1e-6) {
            out.push(format!("rotation determinant {det} != +1"));
        }
        let last = self.c2w.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            out.push("pose bottom row is not (0, 0, 0, 1)".to_string());
        }
        out
    }
}

/// Per-query decoder outputs: mask logits `(N_q, V, H, W)`, class logits
/// `(N_q, N_c)` with the no-object class last, and query states `(N_q, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPredictions {
    pub mask_logits: Array4<f64>,
    pub class_logits: Array2<f64>,
    pub queries: Array2<f64>,
}

impl SemanticPredictions {
    pub fn num_queries(&self) -> usize {
        self.class_logits.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.ncols()
    }

    pub fn dims(&self) -> Dims {
        let s = self.mask_logits.shape();
        Dims::new(s[1], s[2], s[3])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    /// Class names, the last entry being the no-object class.
    pub names: Vec<String>,
    /// Thing (countable) flag per class; the no-object entry is ignored.
    pub is_thing: Vec<bool>,
}

impl ClassTaxonomy {
    pub fn new(names: Vec<String>, is_thing: Vec<bool>) -> Result<Self, SceneError> {
        if names.len() != is_thing.len() || names.len() < 2 {
            return Err(SceneError::Shape(format!(
                "taxonomy needs >= 2 classes with matching flags, got {} names / {} flags",
                names.len(),
                is_thing.len()
            )));
        }
        Ok(Self { names, is_thing })
    }

    /// Taxonomy with `foreground` generic classes plus no-object; classes
    /// listed in `things` are countable.
    pub fn generic(foreground: usize, things: &[usize]) -> Self {
        let mut names: Vec<String> = (0..foreground).map(|c| format!("class{c}")).collect();
        names.push("no-object".into());
        let mut is_thing = vec![false; foreground + 1];
        for &t in things {
            is_thing[t] = true;
        }
        Self { names, is_thing }
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn no_object(&self) -> usize {
        self.names.len() - 1
    }

    pub fn num_foreground(&self) -> usize {
        self.names.len() - 1
    }

    pub fn is_thing(&self, class: i32) -> bool {
        class >= 0 && (class as usize) < self.no_object() && self.is_thing[class as usize]
    }

    pub fn is_stuff(&self, class: i32) -> bool {
        class >= 0 && (class as usize) < self.no_object() && !self.is_thing[class as usize]
    }
}

/// Per-view semantic and instance id maps, both `(V, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMaps {
    pub sem: Array3<i32>,
    pub ins: Array3<i32>,
}

impl LabelMaps {
    pub fn new(sem: Array3<i32>, ins: Array3<i32>) -> Result<Self, SceneError> {
        if sem.shape() != ins.shape() {
            return Err(SceneError::Shape(format!(
                "sem {:?} vs ins {:?}",
                sem.shape(),
                ins.shape()
            )));
        }
        for ((idx, &s), &i) in sem.indexed_iter().zip(ins.iter()) {
            if (s == BACKGROUND) != (i == BACKGROUND) {
                return Err(SceneError::LabelConsistency {
                    view: idx.0,
                    row: idx.1,
                    col: idx.2,
                });
            }
        }
        Ok(Self { sem, ins })
    }

    pub fn background(dims: Dims) -> Self {
        let shape = (dims.views, dims.height, dims.width);
        Self {
            sem: Array3::from_elem(shape, BACKGROUND),
            ins: Array3::from_elem(shape, BACKGROUND),
        }
    }

    pub fn dims(&self) -> Dims {
        let s = self.sem.shape();
        Dims::new(s[0], s[1], s[2])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSegment {
    pub ins_id: i32,
    pub members: Vec<usize>,
}

/// Lifted 3D segmentation: sets of Gaussian indices per semantic class,
/// per instance, panoptic segments and an optional text-referred instance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationField {
    pub sem_sets: BTreeMap<i32, Vec<usize>>,
    pub ins_sets: BTreeMap<i32, Vec<usize>>,
    /// Stuff-class regions keyed by class id.
    pub pano_stuff: BTreeMap<i32, Vec<usize>>,
    /// Thing instances keyed by instance id, restricted to thing-class pixels.
    pub pano_things: BTreeMap<i32, Vec<usize>>,
    pub text: Option<TextSegment>,
}

/// A broken invariant found by [`validate_bundle`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    PrimitiveCount { expected: usize, got: usize },
    Opacity { index: usize, value: f64 },
    RotationNorm { index: usize, norm: f64 },
    Scale { index: usize, value: f64 },
    NonFinite { index: usize },
    AttrLength { index: usize, got: usize, expected: usize },
    QueryCountMismatch { mask: usize, class: usize, states: usize },
    ExpectedQueryCount { expected: usize, got: usize },
    NonFiniteLogits,
    DimsMismatch { field: Dims, logits: Dims },
    CameraCount { expected: usize, got: usize },
    Camera { view: usize, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::PrimitiveCount { expected, got } => {
                write!(f, "primitive count {got} != {expected}")
            }
            Violation::Opacity { index, value } => {
                write!(f, "primitive {index}: opacity {value} outside [0,1]")
            }
            Violation::RotationNorm { index, norm } => {
                write!(f, "primitive {index}: quaternion norm {norm} != 1")
            }
            Violation::Scale { index, value } => {
                write!(f, "primitive {index}: scale {value} outside configured bounds")
            }
            Violation::NonFinite { index } => write!(f, "primitive {index}: non-finite parameter"),
            Violation::AttrLength {
                index,
                got,
                expected,
            } => write!(f, "primitive {index}: attribute length {got} != {expected}"),
            Violation::QueryCountMismatch {
                mask,
                class,
                states,
            } => write!(
                f,
                "query-count mismatch: mask_logits {mask}, class_logits {class}, queries {states}"
            ),
            Violation::ExpectedQueryCount { expected, got } => {
                write!(f, "query count {got} != configured {expected}")
            }
            Violation::NonFiniteLogits => write!(f, "non-finite logits"),
            Violation::DimsMismatch { field, logits } => {
                write!(f, "field dims {field:?} != mask logit dims {logits:?}")
            }
            Violation::CameraCount { expected, got } => {
                write!(f, "camera count {got} != view count {expected}")
            }
            Violation::Camera { view, reason } => write!(f, "camera {view}: {reason}"),
        }
    }
}

/// Bounds checked by [`validate_bundle`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationLimits {
    pub scale_min: f64,
    pub scale_max: f64,
    pub num_queries: Option<usize>,
}

impl Default for ValidationLimits {
    fn default() -> Self {
        Self {
            scale_min: crate::config::SCALE_MIN,
            scale_max: crate::config::SCALE_MAX,
            num_queries: None,
        }
    }
}

/// Lists every violated invariant; an empty report means the bundle is valid.
pub fn validate_bundle(
    field: &GaussianField,
    preds: &SemanticPredictions,
    cams: &[Camera],
    limits: &ValidationLimits,
) -> Vec<Violation> {
    let mut report = Vec::new();
    if let Some(d) = field.dims() {
        if field.len() != d.len() {
            report.push(Violation::PrimitiveCount {
                expected: d.len(),
                got: field.len(),
            });
        }
        if preds.dims() != d {
            report.push(Violation::DimsMismatch {
                field: d,
                logits: preds.dims(),
            });
        }
        if cams.len() != d.views {
            report.push(Violation::CameraCount {
                expected: d.views,
                got: cams.len(),
            });
        }
    }
    for (index, p) in field.prims().iter().enumerate() {
        let finite = p.mean.iter().chain(&p.rotation).chain(&p.scale).all(|x| x.is_finite())
            && p.opacity.is_finite()
            && p.attr.iter().all(|x| x.is_finite());
        if !finite {
            report.push(Violation::NonFinite { index });
            continue;
        }
        if !(0.0..=1.0).contains(&p.opacity) {
            report.push(Violation::Opacity {
                index,
                value: p.opacity,
            });
        }
        let norm = p.rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            report.push(Violation::RotationNorm { index, norm });
        }
        if let Some(&value) = p
            .scale
            .iter()
            .find(|&&s| !(s > 0.0 && s >= limits.scale_min && s <= limits.scale_max))
        {
            report.push(Violation::Scale { index, value });
        }
        if p.attr.len() != field.attr_dim() {
            report.push(Violation::AttrLength {
                index,
                got: p.attr.len(),
                expected: field.attr_dim(),
            });
        }
    }
    let (mask, class, states) = (
        preds.mask_logits.shape()[0],
        preds.class_logits.nrows(),
        preds.queries.nrows(),
    );
    if mask != class || class != states {
        report.push(Violation::QueryCountMismatch {
            mask,
            class,
            states,
        });
    }
    if let Some(expected) = limits.num_queries {
        if class != expected {
            report.push(Violation::ExpectedQueryCount {
                expected,
                got: class,
            });
        }
    }
    let finite = preds.mask_logits.iter().all(|x| x.is_finite())
        && preds.class_logits.iter().all(|x| x.is_finite())
        && preds.queries.iter().all(|x| x.is_finite());
    if !finite {
        report.push(Violation::NonFiniteLogits);
    }
    for (view, cam) in cams.iter().enumerate() {
        for reason in cam.violations() {
            report.push(Violation::Camera { view, reason });
        }
    }
    report
}
