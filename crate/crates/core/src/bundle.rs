//! On-disk scene bundles: a JSON manifest plus one binary blob per tensor.
//!
//! Blob layout: the 7-byte [`MAGIC`], then little-endian `u64`
//! dtype code (0 = f32, 1 = i32, 2 = u8), `u64` rank, `rank` × `u64` shape,
//! and the row-major little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::scene::{
    normalize_rotation, validate_bundle, Camera, ClassTaxonomy, Dims, GaussianField, GaussianPrimitive, Intrinsics,
    LabelMaps, SemanticPredictions, ValidationLimits,
};
use crate::synthetic::SyntheticScene;
use crate::text::{AttentionLayer, CrossAttentionStack};

pub const MAGIC: &[u8; 7] = b"SIU3R1\0";
pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;
/// Fixed Gaussian columns before the attribute payload: mean, opacity,
/// rotation (w, x, y, z), scale.
pub const GAUSSIAN_FIXED: usize = 11;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("tensor {tensor}: bad magic")]
    BadMagic { tensor: String },
    #[error("tensor {tensor}: unsupported dtype code {code}")]
    UnsupportedDtype { tensor: String, code: u64 },
    #[error("tensor {tensor}: payload length mismatch, header implies {expected} bytes, found {got}")]
    PayloadLengthMismatch { tensor: String, expected: u64, got: u64 },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {tensor}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor {tensor}: expected dtype {expected}, got {got}")]
    WrongDtype {
        tensor: String,
        expected: &'static str,
        got: &'static str,
    },
    #[error("invalid bundle: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

impl BundleError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            BundleError::Io { .. } => "io",
            BundleError::Manifest(_) => "manifest",
            BundleError::BadMagic { .. } => "bad_magic",
            BundleError::UnsupportedDtype { .. } => "unsupported_dtype",
            BundleError::PayloadLengthMismatch { .. } => "payload_length_mismatch",
            BundleError::MissingTensor(_) => "missing_tensor",
            BundleError::ShapeMismatch { .. } => "shape_mismatch",
            BundleError::WrongDtype { .. } => "wrong_dtype",
            BundleError::Invalid(_) => "invalid_bundle",
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype_code(&self) -> u64 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::I32(_) => "i32",
            TensorData::U8(_) => "u8",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn dtype_width(code: u64) -> Option<u64> {
    match code {
        0 | 1 => Some(4),
        2 => Some(1),
        _ => None,
    }
}

/// A dense row-major tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, BundleError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(BundleError::ShapeMismatch {
                tensor: String::new(),
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: TensorData::F32(a.iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn from_i32<D: ndarray::Dimension>(a: &ndarray::Array<i32, D>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: TensorData::I32(a.iter().copied().collect()),
        }
    }

    pub fn from_bool<D: ndarray::Dimension>(a: &ndarray::Array<bool, D>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: TensorData::U8(a.iter().map(|&b| b as u8).collect()),
        }
    }

    /// Widens any dtype to `f64`.
    pub fn to_f64(&self) -> ArrayD<f64> {
        let v: Vec<f64> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        ArrayD::from_shape_vec(IxDyn(&self.shape), v).expect("validated shape")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 16 + 8 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.data.dtype_code().to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u64).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(name: &str, bytes: &[u8]) -> Result<Self, BundleError> {
        let short = |expected: u64| BundleError::PayloadLengthMismatch {
            tensor: name.to_string(),
            expected,
            got: bytes.len() as u64,
        };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(BundleError::BadMagic {
                tensor: name.to_string(),
            });
        }
        let word = |k: usize| -> Option<u64> {
            let at = MAGIC.len() + 8 * k;
            bytes.get(at..at + 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        };
        let header_min = (MAGIC.len() + 16) as u64;
        let code = word(0).ok_or_else(|| short(header_min))?;
        let width = dtype_width(code).ok_or_else(|| BundleError::UnsupportedDtype {
            tensor: name.to_string(),
            code,
        })?;
        let rank = word(1).ok_or_else(|| short(header_min))?;
        let header = header_min.saturating_add(rank.saturating_mul(8));
        let mut shape = Vec::new();
        for k in 0..rank as usize {
            shape.push(word(2 + k).ok_or_else(|| short(header))? as usize);
        }
        let count = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let expected = count
            .and_then(|c| c.checked_mul(width))
            .and_then(|p| p.checked_add(header))
            .ok_or_else(|| short(u64::MAX))?;
        if expected != bytes.len() as u64 {
            return Err(short(expected));
        }
        let payload = &bytes[header as usize..];
        let data = match code {
            0 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => TensorData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { shape, data })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub intrinsics: Intrinsics,
    /// Row-major camera-to-world matrix.
    pub c2w: [[f64; 4]; 4],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = c.c2w[(r, k)];
            }
        }
        Self {
            intrinsics: c.intrinsics,
            c2w: m,
        }
    }
}

impl From<&CameraRecord> for Camera {
    fn from(r: &CameraRecord) -> Self {
        Camera::new(r.intrinsics, Matrix4::from_fn(|i, j| r.c2w[i][j]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutKind {
    Aligned,
    Sparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dims: Dims,
    pub layout: LayoutKind,
    pub attr_dim: usize,
    pub taxonomy: ClassTaxonomy,
    pub cameras: Vec<CameraRecord>,
    #[serde(default)]
    pub target_cameras: Vec<CameraRecord>,
    /// Thresholds, loss weights and rasterizer constants in effect.
    #[serde(default)]
    pub config: Config,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// In-memory bundle. Tensors are kept exactly as stored so a read/write
/// round trip is bit-identical; typed accessors convert on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub dims: Dims,
    pub layout: LayoutKind,
    pub attr_dim: usize,
    pub taxonomy: ClassTaxonomy,
    pub cameras: Vec<Camera>,
    pub target_cameras: Vec<Camera>,
    pub config: Config,
    pub tensors: BTreeMap<String, Tensor>,
}

impl SceneBundle {
    pub fn new(field: &GaussianField, dims: Dims, taxonomy: ClassTaxonomy, cameras: Vec<Camera>, config: Config) -> Self {
        let mut b = Self {
            dims,
            layout: LayoutKind::Aligned,
            attr_dim: 0,
            taxonomy,
            cameras,
            target_cameras: Vec::new(),
            config,
            tensors: BTreeMap::new(),
        };
        b.set_field(field);
        b
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, BundleError> {
        self.tensors.get(name).ok_or_else(|| BundleError::MissingTensor(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn set_field(&mut self, field: &GaussianField) {
        let k = field.attr_dim();
        let mut g = Array2::<f64>::zeros((field.len(), GAUSSIAN_FIXED + k));
        for (mut row, p) in g.outer_iter_mut().zip(field.prims()) {
            let opacity = [p.opacity];
            let fixed = p.mean.iter().chain(&opacity).chain(&p.rotation).chain(&p.scale);
            for (dst, &v) in row.iter_mut().zip(fixed.chain(&p.attr)) {
                *dst = v;
            }
        }
        self.layout = if field.is_sparse() {
            LayoutKind::Sparse
        } else {
            LayoutKind::Aligned
        };
        if let Some(d) = field.dims() {
            self.dims = d;
        }
        self.attr_dim = k;
        self.tensors.insert("gaussians".into(), Tensor::from_f64(&g));
    }

    pub fn field(&self) -> Result<GaussianField, BundleError> {
        let g = self.f64_2("gaussians")?;
        let width = GAUSSIAN_FIXED + self.attr_dim;
        if g.ncols() != width {
            return Err(BundleError::ShapeMismatch {
                tensor: "gaussians".into(),
                expected: vec![g.nrows(), width],
                got: g.shape().to_vec(),
            });
        }
        let mut prims = Vec::with_capacity(g.nrows());
        for (i, r) in g.outer_iter().enumerate() {
            let rotation = normalize_rotation([r[4], r[5], r[6], r[7]])
                .map_err(|e| BundleError::Invalid(vec![format!("primitive {i}: {e}")]))?;
            prims.push(GaussianPrimitive {
                mean: [r[0], r[1], r[2]],
                opacity: r[3],
                rotation,
                scale: [r[8], r[9], r[10]],
                attr: r.iter().skip(GAUSSIAN_FIXED).copied().collect(),
            });
        }
        let field = match self.layout {
            LayoutKind::Aligned => GaussianField::aligned(self.dims, self.attr_dim, prims),
            LayoutKind::Sparse => GaussianField::sparse(self.attr_dim, prims),
        };
        field.map_err(|e| BundleError::Invalid(vec![e.to_string()]))
    }

    pub fn set_predictions(&mut self, p: &SemanticPredictions) {
        self.tensors.insert("mask_logits".into(), Tensor::from_f64(&p.mask_logits));
        self.tensors.insert("class_logits".into(), Tensor::from_f64(&p.class_logits));
        self.tensors.insert("query_states".into(), Tensor::from_f64(&p.queries));
    }

    /// Decoder outputs; `None` when the bundle carries no logits.
    pub fn predictions(&self) -> Result<Option<SemanticPredictions>, BundleError> {
        if !self.has("mask_logits") && !self.has("class_logits") {
            return Ok(None);
        }
        let mask_logits = self.f64_4("mask_logits")?;
        let class_logits = self.f64_2("class_logits")?;
        let queries = if self.has("query_states") {
            self.f64_2("query_states")?
        } else {
            Array2::zeros((class_logits.nrows(), 0))
        };
        Ok(Some(SemanticPredictions {
            mask_logits,
            class_logits,
            queries,
        }))
    }

    /// Stores label maps as `{prefix}_sem` / `{prefix}_ins`.
    pub fn set_labels(&mut self, prefix: &str, labels: &LabelMaps) {
        self.tensors.insert(format!("{prefix}_sem"), Tensor::from_i32(&labels.sem));
        self.tensors.insert(format!("{prefix}_ins"), Tensor::from_i32(&labels.ins));
    }

    pub fn labels(&self, prefix: &str) -> Result<Option<LabelMaps>, BundleError> {
        let (s, i) = (format!("{prefix}_sem"), format!("{prefix}_ins"));
        if !self.has(&s) && !self.has(&i) {
            return Ok(None);
        }
        let sem = self.i32_3(&s)?;
        let ins = self.i32_3(&i)?;
        LabelMaps::new(sem, ins)
            .map(Some)
            .map_err(|e| BundleError::Invalid(vec![e.to_string()]))
    }

    pub fn set_array<D: ndarray::Dimension>(&mut self, name: &str, a: &ndarray::Array<f64, D>) {
        self.tensors.insert(name.to_string(), Tensor::from_f64(a));
    }

    pub fn set_masks(&mut self, name: &str, masks: &[Array3<bool>]) {
        if masks.is_empty() {
            return;
        }
        let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
        let stacked = ndarray::stack(Axis(0), &views).expect("equal mask shapes");
        self.tensors.insert(name.to_string(), Tensor::from_bool(&stacked));
    }

    /// `(P, V, H, W)` boolean masks, one per prompt.
    pub fn masks(&self, name: &str) -> Result<Vec<Array3<bool>>, BundleError> {
        if !self.has(name) {
            return Ok(Vec::new());
        }
        let a = self.f64_4(name)?;
        Ok(a.outer_iter().map(|m| m.mapv(|x| x != 0.0)).collect())
    }

    pub fn set_attention(&mut self, stack: &CrossAttentionStack) {
        for (name, pick) in [
            ("attn_wq", (|l: &AttentionLayer| l.w_q.view()) as fn(&AttentionLayer) -> ndarray::ArrayView2<'_, f64>),
            ("attn_wk", |l: &AttentionLayer| l.w_k.view()),
            ("attn_wv", |l: &AttentionLayer| l.w_v.view()),
        ] {
            let views: Vec<_> = stack.layers.iter().map(pick).collect();
            let stacked = ndarray::stack(Axis(0), &views).expect("validated stack");
            self.set_array(name, &stacked);
        }
    }

    pub fn attention(&self) -> Result<Option<CrossAttentionStack>, BundleError> {
        if !self.has("attn_wq") {
            return Ok(None);
        }
        let (q, k, v) = (self.f64_3("attn_wq")?, self.f64_3("attn_wk")?, self.f64_3("attn_wv")?);
        let layers = q
            .outer_iter()
            .zip(k.outer_iter())
            .zip(v.outer_iter())
            .map(|((q, k), v)| AttentionLayer {
                w_q: q.to_owned(),
                w_k: k.to_owned(),
                w_v: v.to_owned(),
            })
            .collect();
        CrossAttentionStack::new(layers)
            .map(Some)
            .map_err(|e| BundleError::Invalid(vec![e.to_string()]))
    }

    fn dyn_f64(&self, name: &str, rank: usize) -> Result<ArrayD<f64>, BundleError> {
        let t = self.tensor(name)?;
        if t.shape.len() != rank {
            return Err(BundleError::ShapeMismatch {
                tensor: name.to_string(),
                expected: vec![0; rank],
                got: t.shape.clone(),
            });
        }
        Ok(t.to_f64())
    }

    pub fn f64_2(&self, name: &str) -> Result<Array2<f64>, BundleError> {
        Ok(self.dyn_f64(name, 2)?.into_dimensionality().expect("rank checked"))
    }

    pub fn f64_3(&self, name: &str) -> Result<Array3<f64>, BundleError> {
        Ok(self.dyn_f64(name, 3)?.into_dimensionality().expect("rank checked"))
    }

    pub fn f64_4(&self, name: &str) -> Result<Array4<f64>, BundleError> {
        Ok(self.dyn_f64(name, 4)?.into_dimensionality().expect("rank checked"))
    }

    pub fn opt_f64_3(&self, name: &str) -> Result<Option<Array3<f64>>, BundleError> {
        self.has(name).then(|| self.f64_3(name)).transpose()
    }

    pub fn opt_f64_4(&self, name: &str) -> Result<Option<Array4<f64>>, BundleError> {
        self.has(name).then(|| self.f64_4(name)).transpose()
    }

    pub fn i32_3(&self, name: &str) -> Result<Array3<i32>, BundleError> {
        let t = self.tensor(name)?;
        let TensorData::I32(v) = &t.data else {
            return Err(BundleError::WrongDtype {
                tensor: name.to_string(),
                expected: "i32",
                got: t.data.dtype_name(),
            });
        };
        if t.shape.len() != 3 {
            return Err(BundleError::ShapeMismatch {
                tensor: name.to_string(),
                expected: vec![0; 3],
                got: t.shape.clone(),
            });
        }
        Ok(Array3::from_shape_vec((t.shape[0], t.shape[1], t.shape[2]), v.clone()).expect("validated shape"))
    }

    /// Checks the shapes that the manifest metadata implies.
    pub fn check_shapes(&self) -> Result<(), BundleError> {
        let d = self.dims;
        let g = self.tensor("gaussians")?;
        let rows = match self.layout {
            LayoutKind::Aligned => d.len(),
            LayoutKind::Sparse => g.shape.first().copied().unwrap_or(0),
        };
        expect_shape("gaussians", g, &[Some(rows), Some(GAUSSIAN_FIXED + self.attr_dim)])?;
        let (v, h, w) = (Some(d.views), Some(d.height), Some(d.width));
        let tv = Some(self.target_cameras.len());
        let nq = self.tensors.get("class_logits").and_then(|t| t.shape.first().copied());
        let rules: Vec<(&str, Vec<Option<usize>>)> = vec![
            ("mask_logits", vec![nq, v, h, w]),
            ("class_logits", vec![nq, None]),
            ("query_states", vec![nq, None]),
            ("images", vec![v, None, h, w]),
            ("gt_depth", vec![v, h, w]),
            ("gt_sem", vec![v, h, w]),
            ("gt_ins", vec![v, h, w]),
            ("gt_text_masks", vec![None, v, h, w]),
            ("pred_sem", vec![v, h, w]),
            ("pred_ins", vec![v, h, w]),
            ("pred_images", vec![v, None, h, w]),
            ("pred_depth", vec![v, h, w]),
            ("pred_text_masks", vec![None, v, h, w]),
            ("pred_scores", vec![None]),
            ("text_feats", vec![None, None]),
            ("target_images", vec![tv, None, h, w]),
            ("target_depth", vec![tv, h, w]),
            ("target_sem", vec![tv, h, w]),
            ("target_ins", vec![tv, h, w]),
            ("target_text_masks", vec![None, tv, h, w]),
            ("pred_target_images", vec![tv, None, h, w]),
            ("pred_target_depth", vec![tv, h, w]),
            ("pred_target_sem", vec![tv, h, w]),
            ("pred_target_ins", vec![tv, h, w]),
            ("pred_target_text_masks", vec![None, tv, h, w]),
        ];
        for (name, rule) in rules {
            if let Some(t) = self.tensors.get(name) {
                expect_shape(name, t, &rule)?;
            }
        }
        Ok(())
    }

    /// Scene-level invariants on the field, logits and cameras.
    pub fn validate(&self) -> Result<(), BundleError> {
        self.check_shapes()?;
        let field = self.field()?;
        let preds = self.predictions()?.unwrap_or_else(|| SemanticPredictions {
            mask_logits: Array4::zeros((0, self.dims.views, self.dims.height, self.dims.width)),
            class_logits: Array2::zeros((0, 0)),
            queries: Array2::zeros((0, 0)),
        });
        let limits = ValidationLimits {
            scale_min: self.config.scale_min,
            scale_max: self.config.scale_max,
            num_queries: None,
        };
        let cams: &[Camera] = if field.is_sparse() && self.cameras.len() != self.dims.views {
            &[]
        } else {
            &self.cameras
        };
        let report = validate_bundle(&field, &preds, cams, &limits);
        if !report.is_empty() {
            return Err(BundleError::Invalid(report.iter().map(|v| v.to_string()).collect()));
        }
        if let Some(t) = self.tensors.get("gt_text_masks") {
            if !matches!(t.data, TensorData::U8(_)) {
                return Err(BundleError::WrongDtype {
                    tensor: "gt_text_masks".into(),
                    expected: "u8",
                    got: t.data.dtype_name(),
                });
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: FORMAT_VERSION,
            dims: self.dims,
            layout: self.layout,
            attr_dim: self.attr_dim,
            taxonomy: self.taxonomy.clone(),
            cameras: self.cameras.iter().map(CameraRecord::from).collect(),
            target_cameras: self.target_cameras.iter().map(CameraRecord::from).collect(),
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| {
                    let entry = TensorEntry {
                        file: format!("{name}.bin"),
                        dtype: t.data.dtype_name().to_string(),
                        shape: t.shape.clone(),
                    };
                    (name.clone(), entry)
                })
                .collect(),
        }
    }
}

fn expect_shape(name: &str, t: &Tensor, rule: &[Option<usize>]) -> Result<(), BundleError> {
    let ok = t.shape.len() == rule.len() && t.shape.iter().zip(rule).all(|(&s, r)| r.is_none_or(|r| r == s));
    if ok {
        Ok(())
    } else {
        Err(BundleError::ShapeMismatch {
            tensor: name.to_string(),
            expected: rule.iter().map(|r| r.unwrap_or(0)).collect(),
            got: t.shape.clone(),
        })
    }
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), BundleError> {
    let dir = parent_dir(path);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(&dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| BundleError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Writes the bundle into a fresh temp directory next to `dir` and renames
/// it into place, so readers never observe a partial bundle.
pub fn write_bundle(bundle: &SceneBundle, dir: &Path) -> Result<(), BundleError> {
    let parent = parent_dir(dir);
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    let staging = tempfile::Builder::new()
        .prefix(".bundle-")
        .tempdir_in(&parent)
        .map_err(io_err(&parent))?;
    let manifest = bundle.manifest();
    for (name, t) in &bundle.tensors {
        let p = staging.path().join(&manifest.tensors[name].file);
        fs::write(&p, t.encode()).map_err(io_err(&p))?;
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| BundleError::Manifest(e.to_string()))?;
    let mp = staging.path().join(MANIFEST);
    fs::write(&mp, text).map_err(io_err(&mp))?;

    let staged = staging.keep();
    let backup = if dir.exists() {
        let b = tempfile::Builder::new()
            .prefix(".bundle-old-")
            .tempdir_in(&parent)
            .map_err(io_err(&parent))?
            .keep();
        fs::remove_dir(&b).map_err(io_err(&b))?;
        fs::rename(dir, &b).map_err(io_err(dir))?;
        Some(b)
    } else {
        None
    };
    if let Err(e) = fs::rename(&staged, dir) {
        if let Some(b) = &backup {
            let _ = fs::rename(b, dir);
        }
        let _ = fs::remove_dir_all(&staged);
        return Err(io_err(dir)(e));
    }
    if let Some(b) = backup {
        let _ = fs::remove_dir_all(b);
    }
    Ok(())
}

/// Reads and validates a bundle directory.
pub fn read_bundle(dir: &Path) -> Result<SceneBundle, BundleError> {
    let b = read_bundle_unchecked(dir)?;
    b.validate()?;
    Ok(b)
}

/// Reads a bundle, checking only the blob format and manifest agreement.
pub fn read_bundle_unchecked(dir: &Path) -> Result<SceneBundle, BundleError> {
    let mp = dir.join(MANIFEST);
    let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| BundleError::Manifest(e.to_string()))?;
    if m.version != FORMAT_VERSION {
        return Err(BundleError::Manifest(format!("unsupported version {}", m.version)));
    }
    if !m.tensors.contains_key("gaussians") {
        return Err(BundleError::MissingTensor("gaussians".into()));
    }
    let mut tensors = BTreeMap::new();
    for (name, entry) in &m.tensors {
        if entry.file.contains('/') || entry.file.contains('\\') || entry.file.starts_with('.') {
            return Err(BundleError::Manifest(format!("tensor {name}: file name {:?} escapes bundle", entry.file)));
        }
        let p = dir.join(&entry.file);
        let bytes = match fs::read(&p) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(BundleError::MissingTensor(name.clone())),
            Err(e) => return Err(io_err(&p)(e)),
        };
        let t = Tensor::decode(name, &bytes)?;
        if t.shape != entry.shape {
            return Err(BundleError::ShapeMismatch {
                tensor: name.clone(),
                expected: entry.shape.clone(),
                got: t.shape,
            });
        }
        if t.data.dtype_name() != entry.dtype {
            return Err(BundleError::Manifest(format!(
                "tensor {name}: manifest dtype {} but blob holds {}",
                entry.dtype,
                t.data.dtype_name()
            )));
        }
        tensors.insert(name.clone(), t);
    }
    Ok(SceneBundle {
        dims: m.dims,
        layout: m.layout,
        attr_dim: m.attr_dim,
        taxonomy: m.taxonomy,
        cameras: m.cameras.iter().map(Camera::from).collect(),
        target_cameras: m.target_cameras.iter().map(Camera::from).collect(),
        config: m.config,
        tensors,
    })
}

/// Packs a synthetic scene with its ground truth and held-out targets.
pub fn from_synthetic(s: &SyntheticScene) -> SceneBundle {
    let dims = s.field.dims().expect("synthetic fields are aligned");
    let mut b = SceneBundle::new(&s.field, dims, s.taxonomy.clone(), s.cameras.clone(), s.config.clone());
    b.set_predictions(&s.preds);
    b.set_labels("gt", &s.gt);
    b.set_array("gt_depth", &s.gt_depth);
    b.set_array("images", &s.images);
    b.set_array("text_feats", &s.text_feats);
    b.set_attention(&s.attention);
    b.set_masks("gt_text_masks", &s.gt_text_masks);
    if let Some(t) = &s.targets {
        b.target_cameras = t.cameras.clone();
        b.set_labels("target", &t.labels);
        b.set_array("target_depth", &t.depth);
        b.set_array("target_images", &t.images);
        b.set_masks("target_text_masks", &t.text_masks);
    }
    b
}
