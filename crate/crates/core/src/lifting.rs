//! Pixel-aligned 2D-to-3D lifting.
//!
//! Pipeline: keep confident queries, turn logits into class-wise query
//! probability maps `Z`, optionally fuse them across views by rasterizing
//! them as Gaussian attributes, derive per-view semantic/instance maps and
//! finally collect Gaussian index sets per class and per instance.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, Array4, Array5, Axis};
use thiserror::Error;

use crate::config::LOGIT_CAP;
use crate::exec;
use crate::raster::{self, RasterConfig, RasterError};
use crate::scene::{
    Camera, ClassTaxonomy, Dims, GaussianField, LabelMaps, SceneError, SegmentationField,
    SemanticPredictions, TextSegment, BACKGROUND,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LiftError {
    #[error("non-finite logits")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("aggregation needs {needed} attribute channels, limit is {limit}")]
    AttributeBudget { needed: usize, limit: usize },
    #[error("text-referred query {0} is not among the kept queries")]
    TextIdNotKept(i32),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[inline]
pub fn cap_logit(x: f64) -> f64 {
    x.clamp(-LOGIT_CAP, LOGIT_CAP)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-cap_logit(x)).exp())
}

/// Numerically stable softmax of a capped logit row.
pub fn softmax(row: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let capped: Vec<f64> = row.into_iter().map(cap_logit).collect();
    let m = capped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = capped.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the maximum, ties resolved toward the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-filtered predictions for the kept queries.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredQueries {
    /// Original query indices, ascending.
    pub kept: Vec<usize>,
    pub queries: Array2<f64>,
    pub mask_logits: Array4<f64>,
    pub class_logits: Array2<f64>,
}

/// Keeps query `n` iff its top softmax class probability exceeds `tau_c`
/// and that class is not the no-object class (the last column).
pub fn filter_queries(preds: &SemanticPredictions, tau_c: f64) -> FilteredQueries {
    let no_object = preds.num_classes().saturating_sub(1);
    let kept: Vec<usize> = preds
        .class_logits
        .outer_iter()
        .enumerate()
        .filter_map(|(n, row)| {
            let p = softmax(row.iter().copied());
            let best = argmax(&p);
            (p[best] > tau_c && best != no_object).then_some(n)
        })
        .collect();
    FilteredQueries {
        queries: preds.queries.select(Axis(0), &kept),
        mask_logits: preds.mask_logits.select(Axis(0), &kept),
        class_logits: preds.class_logits.select(Axis(0), &kept),
        kept,
    }
}

/// Class-wise query probability maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassQueryMaps {
    /// `(V, N_q', N_c, H, W)`
    pub z: Array5<f64>,
    pub kept: Vec<usize>,
    /// `(N_q', N_c)` softmaxed class scores.
    pub class_conf: Array2<f64>,
    /// `(N_q', V, H, W)` sigmoided mask probabilities.
    pub mask_prob: Array4<f64>,
}

impl ClassQueryMaps {
    pub fn dims(&self) -> Dims {
        let s = self.z.shape();
        Dims::new(s[0], s[3], s[4])
    }

    pub fn num_kept(&self) -> usize {
        self.kept.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_conf.ncols()
    }

    /// Confidence of each kept query's best foreground class, keyed by
    /// original query index.
    pub fn query_scores(&self) -> BTreeMap<i32, f64> {
        let fg = self.num_classes().saturating_sub(1);
        self.kept
            .iter()
            .zip(self.class_conf.outer_iter())
            .map(|(&q, row)| {
                let best = row.iter().take(fg).cloned().fold(0.0, f64::max);
                (q as i32, best)
            })
            .collect()
    }
}

/// `z[v, n, c, i, j] = softmax(C')[n, c] * sigmoid(M')[n, v, i, j]`.
pub fn class_query_maps(
    class_logits: &Array2<f64>,
    mask_logits: &Array4<f64>,
    kept: Vec<usize>,
) -> Result<ClassQueryMaps, LiftError> {
    let (nq, nc) = class_logits.dim();
    let (mq, v, h, w) = mask_logits.dim();
    if nq != mq || kept.len() != nq {
        return Err(LiftError::Shape(format!(
            "class logits {nq} rows, mask logits {mq}, kept {}",
            kept.len()
        )));
    }
    if !class_logits.iter().chain(mask_logits.iter()).all(|x| x.is_finite()) {
        return Err(LiftError::NonFinite);
    }
    let mut class_conf = Array2::zeros((nq, nc));
    for (n, row) in class_logits.outer_iter().enumerate() {
        for (c, p) in softmax(row.iter().copied()).into_iter().enumerate() {
            class_conf[[n, c]] = p;
        }
    }
    let mask_prob = mask_logits.mapv(sigmoid);
    let mut z = Array5::zeros((v, nq, nc, h, w));
    for view in 0..v {
        for n in 0..nq {
            let m = mask_prob.slice(s![n, view, .., ..]);
            for c in 0..nc {
                let conf = class_conf[[n, c]];
                z.slice_mut(s![view, n, c, .., ..])
                    .zip_mut_with(&m, |o, &p| *o = conf * p);
            }
        }
    }
    Ok(ClassQueryMaps {
        z,
        kept,
        class_conf,
        mask_prob,
    })
}

/// Filters queries and builds their probability maps in one step.
pub fn probability_maps(preds: &SemanticPredictions, tau_c: f64) -> Result<ClassQueryMaps, LiftError> {
    let f = filter_queries(preds, tau_c);
    class_query_maps(&f.class_logits, &f.mask_logits, f.kept)
}

/// Options for multi-view aggregation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregateOptions {
    pub raster: RasterConfig,
    /// Pixels whose accumulated alpha is below this keep their own `z`.
    pub coverage_min: f64,
    /// Upper bound on `N_q' * N_c` attribute channels.
    pub max_channels: usize,
}

impl AggregateOptions {
    pub fn from_config(cfg: &crate::config::Config) -> Self {
        Self {
            raster: cfg.aggregate_raster,
            coverage_min: cfg.coverage_min,
            ..Self::default()
        }
    }
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self {
            raster: RasterConfig::default(),
            coverage_min: 0.5,
            max_channels: 1 << 16,
        }
    }
}

/// Multi-view mask aggregation: attaches each pixel's `z` vector to its
/// pixel-aligned Gaussian, rasterizes the whole field into every view and
/// replaces `z` by the alpha-normalized render wherever coverage is at
/// least `coverage_min`.
pub fn aggregate_multiview(
    maps: &ClassQueryMaps,
    field: &GaussianField,
    cams: &[Camera],
    opts: &AggregateOptions,
) -> Result<ClassQueryMaps, LiftError> {
    let dims = field.aligned_dims()?;
    if dims != maps.dims() {
        return Err(LiftError::Shape(format!(
            "field {dims:?} vs probability maps {:?}",
            maps.dims()
        )));
    }
    if cams.len() != dims.views {
        return Err(LiftError::Shape(format!(
            "{} cameras for {} views",
            cams.len(),
            dims.views
        )));
    }
    let (nq, nc) = (maps.num_kept(), maps.num_classes());
    if nq == 0 {
        return Ok(maps.clone());
    }
    let k = nq * nc;
    if k > opts.max_channels {
        return Err(LiftError::AttributeBudget {
            needed: k,
            limit: opts.max_channels,
        });
    }
    // Spatial indexing of Z: row g = (v, i, j) holds z[v, :, :, i, j].
    let mut attrs = Array2::<f64>::zeros((dims.len(), k));
    for (g, mut row) in attrs.outer_iter_mut().enumerate() {
        let (v, i, j) = dims.unflat(g);
        for n in 0..nq {
            for c in 0..nc {
                row[n * nc + c] = maps.z[[v, n, c, i, j]];
            }
        }
    }
    let size = (dims.height, dims.width);
    let renders = exec::map_indexed(dims.views, |v| {
        raster::render_semantic(field, attrs.view(), &cams[v], size, &opts.raster)
    });
    let mut out = maps.clone();
    for (v, rendered) in renders.into_iter().enumerate() {
        let rendered = rendered?;
        for i in 0..dims.height {
            for j in 0..dims.width {
                let alpha = rendered.alpha[[i, j]];
                if alpha < opts.coverage_min {
                    continue;
                }
                for n in 0..nq {
                    for c in 0..nc {
                        let val = rendered.attr[[n * nc + c, i, j]] / alpha;
                        out.z[[v, n, c, i, j]] = val.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per pixel: best query per foreground class, best class overall, and
/// BACKGROUND wherever the winning probability is below `tau`. Instance ids
/// are original query indices. The no-object column never becomes a label.
pub fn derive_label_maps(maps: &ClassQueryMaps, tau: f64, taxonomy: &ClassTaxonomy) -> Result<LabelMaps, LiftError> {
    let dims = maps.dims();
    let nc = maps.num_classes();
    if nc != taxonomy.num_classes() {
        return Err(LiftError::Shape(format!(
            "{nc} classes in maps, taxonomy has {}",
            taxonomy.num_classes()
        )));
    }
    let mut labels = LabelMaps::background(dims);
    if maps.num_kept() == 0 {
        return Ok(labels);
    }
    let fg = taxonomy.num_foreground();
    let per_view = exec::map_indexed(dims.views, |v| {
        let mut sem = Array2::from_elem((dims.height, dims.width), BACKGROUND);
        let mut ins = sem.clone();
        for i in 0..dims.height {
            for j in 0..dims.width {
                let mut best_class = 0;
                let mut best_prob = f64::NEG_INFINITY;
                let mut best_query = 0;
                for c in 0..fg {
                    // Query axis max for this class.
                    let mut qp = f64::NEG_INFINITY;
                    let mut qi = 0;
                    for n in 0..maps.num_kept() {
                        let p = maps.z[[v, n, c, i, j]];
                        if p > qp {
                            qp = p;
                            qi = n;
                        }
                    }
                    if qp > best_prob {
                        best_prob = qp;
                        best_class = c;
                        best_query = qi;
                    }
                }
                if best_prob >= tau {
                    sem[[i, j]] = best_class as i32;
                    ins[[i, j]] = maps.kept[best_query] as i32;
                }
            }
        }
        (sem, ins)
    });
    for (v, (sem, ins)) in per_view.into_iter().enumerate() {
        labels.sem.index_axis_mut(Axis(0), v).assign(&sem);
        labels.ins.index_axis_mut(Axis(0), v).assign(&ins);
    }
    Ok(labels)
}

/// Collects Gaussian index sets from pixel-aligned label maps.
pub fn lift_to_3d(
    labels: &LabelMaps,
    field: &GaussianField,
    taxonomy: &ClassTaxonomy,
    kept: &[usize],
    text_id: Option<i32>,
) -> Result<SegmentationField, LiftError> {
    let dims = field.aligned_dims()?;
    if labels.dims() != dims {
        return Err(LiftError::Shape(format!(
            "labels {:?} vs field {dims:?}",
            labels.dims()
        )));
    }
    if let Some(t) = text_id {
        if t < 0 || !kept.contains(&(t as usize)) {
            return Err(LiftError::TextIdNotKept(t));
        }
    }
    let mut seg = SegmentationField::default();
    for (g, (&sem, &ins)) in labels.sem.iter().zip(labels.ins.iter()).enumerate() {
        if sem == BACKGROUND {
            continue;
        }
        seg.sem_sets.entry(sem).or_default().push(g);
        seg.ins_sets.entry(ins).or_default().push(g);
        if taxonomy.is_thing(sem) {
            seg.pano_things.entry(ins).or_default().push(g);
        } else {
            seg.pano_stuff.entry(sem).or_default().push(g);
        }
    }
    seg.text = text_id.map(|id| TextSegment {
        ins_id: id,
        members: seg.ins_sets.get(&id).cloned().unwrap_or_default(),
    });
    Ok(seg)
}

/// Outputs of [`run_lifting`].
#[derive(Clone, Debug, PartialEq)]
pub struct LiftResult {
    pub maps: ClassQueryMaps,
    pub labels: LabelMaps,
    pub segmentation: SegmentationField,
}

/// Full lifting pipeline; `aggregate = false` skips multi-view fusion.
#[allow(clippy::too_many_arguments)]
pub fn run_lifting(
    preds: &SemanticPredictions,
    field: &GaussianField,
    cams: &[Camera],
    taxonomy: &ClassTaxonomy,
    tau_c: f64,
    tau: f64,
    aggregate: bool,
    opts: &AggregateOptions,
    text_id: Option<i32>,
) -> Result<LiftResult, LiftError> {
    let maps = probability_maps(preds, tau_c)?;
    let maps = if aggregate {
        aggregate_multiview(&maps, field, cams, opts)?
    } else {
        maps
    };
    let labels = derive_label_maps(&maps, tau, taxonomy)?;
    let segmentation = lift_to_3d(&labels, field, taxonomy, &maps.kept, text_id)?;
    Ok(LiftResult {
        maps,
        labels,
        segmentation,
    })
}

/// Label maps of a single view as `(H, W)` arrays, for convenience.
pub fn view_labels(labels: &LabelMaps, view: usize) -> (Array2<i32>, Array2<i32>) {
    (
        labels.sem.index_axis(Axis(0), view).to_owned(),
        labels.ins.index_axis(Axis(0), view).to_owned(),
    )
}

/// Fraction of pixels, over pixel pairs that see the same physical point,
/// whose instance ids agree. `correspondences` lists `(g_a, g_b)` flat
/// indices into the label maps.
pub fn cross_view_agreement(labels: &LabelMaps, correspondences: &[(usize, usize)]) -> f64 {
    if correspondences.is_empty() {
        return 1.0;
    }
    let ins = labels.ins.as_slice().expect("standard layout");
    let agree = correspondences
        .iter()
        .filter(|&&(a, b)| ins[a] == ins[b])
        .count();
    agree as f64 / correspondences.len() as f64
}

/// Builds `(V, H, W)` label arrays from a flat per-Gaussian list.
pub fn labels_from_flat(dims: Dims, sem: Vec<i32>, ins: Vec<i32>) -> Result<LabelMaps, LiftError> {
    let shape = (dims.views, dims.height, dims.width);
    let sem = Array3::from_shape_vec(shape, sem).map_err(|e| LiftError::Shape(e.to_string()))?;
    let ins = Array3::from_shape_vec(shape, ins).map_err(|e| LiftError::Shape(e.to_string()))?;
    Ok(LabelMaps::new(sem, ins)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::scene::{GaussianPrimitive, Intrinsics};
    use nalgebra::Matrix4;
    use ndarray::{arr2, Array4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn preds_from(mask: Array4<f64>, class: Array2<f64>) -> SemanticPredictions {
        let nq = class.nrows();
        SemanticPredictions {
            mask_logits: mask,
            class_logits: class,
            queries: Array2::zeros((nq, 4)),
        }
    }

    #[test]
    fn all_no_object_queries_are_dropped() {
        let class = arr2(&[[0.0, 0.0, 9.0], [1.0, 0.0, 5.0]]);
        let p = preds_from(Array4::zeros((2, 1, 2, 2)), class);
        let f = filter_queries(&p, 0.5);
        assert!(f.kept.is_empty());
        assert_eq!(f.mask_logits.shape()[0], 0);
    }

    #[test]
    fn confident_query_is_kept() {
        // softmax(5, 0, 0)[0] = e^5 / (e^5 + 2)
        let class = arr2(&[[5.0, 0.0, 0.0]]);
        let p = preds_from(Array4::zeros((1, 1, 1, 1)), class);
        let conf = 5f64.exp() / (5f64.exp() + 2.0);
        assert!((conf - 0.9867).abs() < 1e-4);
        assert_eq!(filter_queries(&p, 0.5).kept, vec![0]);
        assert!(filter_queries(&p, 0.99).kept.is_empty());
    }

    #[test]
    fn uniform_logits_over_21_classes_are_dropped() {
        let class = Array2::from_elem((1, 21), 0.3);
        let p = preds_from(Array4::zeros((1, 1, 1, 1)), class);
        assert!(filter_queries(&p, 0.5).kept.is_empty());
    }

    #[test]
    fn zero_mask_logit_halves_class_confidence() {
        let class = arr2(&[[2.0, -1.0]]);
        let maps = class_query_maps(&class, &Array4::zeros((1, 2, 3, 3)), vec![0]).unwrap();
        let conf = softmax([2.0, -1.0]);
        for ((v, n, c, _, _), &z) in maps.z.indexed_iter() {
            assert_eq!((v < 2, n), (true, 0));
            assert!((z - 0.5 * conf[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_mask_logit_passes_class_confidence() {
        let class = arr2(&[[2.0, -1.0]]);
        let maps = class_query_maps(&class, &Array4::from_elem((1, 1, 2, 2), 30.0), vec![0]).unwrap();
        assert!((maps.mask_prob[[0, 0, 0, 0]] - 1.0).abs() < 1e-9);
        let huge = class_query_maps(&class, &Array4::from_elem((1, 1, 2, 2), 1e6), vec![0]).unwrap();
        assert_eq!(huge.z, maps.z);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let class = arr2(&[[f64::NAN, 0.0]]);
        assert_eq!(
            class_query_maps(&class, &Array4::zeros((1, 1, 1, 1)), vec![0]),
            Err(LiftError::NonFinite)
        );
    }

    #[test]
    fn random_maps_match_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let class = Array2::from_shape_fn((2, 3), |_| rng.random_range(-3.0..3.0));
        let mask = Array4::from_shape_fn((2, 2, 4, 5), |_| rng.random_range(-4.0..4.0));
        let maps = class_query_maps(&class, &mask, vec![0, 1]).unwrap();
        for ((v, n, c, i, j), &z) in maps.z.indexed_iter() {
            let row: Vec<f64> = (0..3).map(|k| class[[n, k]]).collect();
            let denom: f64 = row.iter().map(|x| x.exp()).sum();
            let expect = row[c].exp() / denom / (1.0 + (-mask[[n, v, i, j]]).exp());
            assert!((z - expect).abs() < 1e-12);
        }
    }

    fn disk_predictions(nq_classes: &[(usize, f64)], radius: f64) -> (SemanticPredictions, ClassTaxonomy) {
        // Query q predicts its class with a disk-shaped mask of logit ln(9)
        // (probability 0.9) and -30 elsewhere.
        let nc = 3;
        let (h, w) = (9, 9);
        let mut mask = Array4::from_elem((nq_classes.len(), 1, h, w), -30.0);
        let mut class = Array2::from_elem((nq_classes.len(), nc), -30.0);
        for (q, &(c, cx)) in nq_classes.iter().enumerate() {
            class[[q, c]] = 30.0;
            for i in 0..h {
                for j in 0..w {
                    let (di, dj) = (i as f64 - 4.0, j as f64 - cx);
                    if di * di + dj * dj <= radius * radius {
                        mask[[q, 0, i, j]] = 9f64.ln();
                    }
                }
            }
        }
        (preds_from(mask, class), ClassTaxonomy::generic(2, &[0, 1]))
    }

    #[test]
    fn single_query_disk_becomes_class_region() {
        let (p, tax) = disk_predictions(&[(1, 4.0)], 2.5);
        let maps = probability_maps(&p, 0.5).unwrap();
        let labels = derive_label_maps(&maps, 0.3, &tax).unwrap();
        for ((_, i, j), &s) in labels.sem.indexed_iter() {
            let inside = (i as f64 - 4.0).powi(2) + (j as f64 - 4.0).powi(2) <= 6.25;
            assert_eq!(s, if inside { 1 } else { BACKGROUND });
            assert_eq!(labels.ins[[0, i, j]], if inside { 0 } else { BACKGROUND });
        }
    }

    #[test]
    fn same_class_disjoint_masks_become_two_instances() {
        let (p, tax) = disk_predictions(&[(0, 2.0), (0, 6.5)], 1.5);
        let maps = probability_maps(&p, 0.5).unwrap();
        let labels = derive_label_maps(&maps, 0.3, &tax).unwrap();
        let ids: std::collections::BTreeSet<i32> = labels.ins.iter().copied().filter(|&x| x != BACKGROUND).collect();
        let classes: std::collections::BTreeSet<i32> = labels.sem.iter().copied().filter(|&x| x != BACKGROUND).collect();
        assert_eq!(ids.into_iter().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(classes.into_iter().collect::<Vec<_>>(), vec![0]);
    }

    fn nested4(a: &Array4<f64>) -> Vec<Vec<Vec<Vec<f64>>>> {
        a.outer_iter()
            .map(|x| x.outer_iter().map(|y| y.outer_iter().map(|r| r.to_vec()).collect()).collect())
            .collect()
    }

    #[test]
    fn random_tensors_match_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..40 {
            let nq = rng.random_range(1..=3);
            let nc = 3;
            let class = Array2::from_shape_fn((nq, nc), |_| rng.random_range(-2.0..4.0));
            let mask = Array4::from_shape_fn((nq, 2, 4, 4), |_| rng.random_range(-3.0..3.0));
            let p = preds_from(mask.clone(), class.clone());
            let tax = ClassTaxonomy::generic(nc - 1, &[0]);
            let maps = probability_maps(&p, 0.5).unwrap();
            let labels = derive_label_maps(&maps, 0.3, &tax).unwrap();
            let class_rows: Vec<Vec<f64>> = class.outer_iter().map(|r| r.to_vec()).collect();
            let oracle = reference::lift_labels_scalar(&nested4(&mask), &class_rows, 0.5, 0.3);
            assert_eq!(oracle.kept, maps.kept);
            for ((v, i, j), &s) in labels.sem.indexed_iter() {
                assert_eq!(s, oracle.sem[v][i][j]);
                assert_eq!(labels.ins[[v, i, j]], oracle.ins[v][i][j]);
            }
        }
    }

    fn self_covering_scene(h: usize, w: usize, views: usize) -> (GaussianField, Vec<Camera>) {
        let cam = Camera::new(Intrinsics::new(1.0, 1.0, 0.5, 0.5), Matrix4::identity());
        let dims = Dims::new(views, h, w);
        let z = 2.0;
        // 0.15 px standard deviation keeps each kernel's 3-sigma support
        // inside its own pixel.
        let sigma = 0.15 * z / w as f64;
        let prims = (0..dims.len())
            .map(|g| {
                let (_, i, j) = dims.unflat(g);
                let p = cam.backproject(j as f64 + 0.5, i as f64 + 0.5, z, h, w);
                GaussianPrimitive::isotropic([p.x, p.y, p.z], sigma, 1.0, vec![0.0])
            })
            .collect();
        (GaussianField::aligned(dims, 1, prims).unwrap(), vec![cam; views])
    }

    fn no_dilation() -> AggregateOptions {
        AggregateOptions {
            raster: RasterConfig { dilation: 0.0, ..RasterConfig::default() },
            ..AggregateOptions::default()
        }
    }

    #[test]
    fn single_view_self_projection_is_fixed_point() {
        let (field, cams) = self_covering_scene(6, 7, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let class = Array2::from_shape_fn((2, 3), |_| rng.random_range(-2.0..2.0));
        let mask = Array4::from_shape_fn((2, 1, 6, 7), |_| rng.random_range(-3.0..3.0));
        let maps = class_query_maps(&class, &mask, vec![0, 1]).unwrap();
        let agg = aggregate_multiview(&maps, &field, &cams, &no_dilation()).unwrap();
        let err = (&agg.z - &maps.z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-3, "{err}");

        let tax = ClassTaxonomy::generic(2, &[0]);
        let a = derive_label_maps(&agg, 0.3, &tax).unwrap();
        let b = derive_label_maps(&maps, 0.3, &tax).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicated_view_blends_both_copies() {
        let (field, cams) = self_covering_scene(4, 4, 2);
        // Same camera and geometry twice; view 0 says query 0, view 1 says query 1.
        let class = arr2(&[[30.0, -30.0], [30.0, -30.0]]);
        let mut mask = Array4::from_elem((2, 2, 4, 4), -30.0);
        mask.slice_mut(s![0, 0, .., ..]).fill(30.0);
        mask.slice_mut(s![1, 1, .., ..]).fill(30.0);
        let maps = class_query_maps(&class, &mask, vec![0, 1]).unwrap();
        let agg = aggregate_multiview(&maps, &field, &cams, &no_dilation()).unwrap();

        let dims = field.dims().unwrap();
        let mut attrs = Array2::zeros((dims.len(), 4));
        for g in 0..dims.len() {
            let (v, i, j) = dims.unflat(g);
            for n in 0..2 {
                for c in 0..2 {
                    attrs[[g, n * 2 + c]] = maps.z[[v, n, c, i, j]];
                }
            }
        }
        let brute = reference::render_brute_force(
            field.prims(),
            &|g| attrs.row(g).to_slice().unwrap(),
            4,
            &cams[0],
            (4, 4),
            &no_dilation().raster,
        );
        for v in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let alpha = brute.alpha[[i, j]];
                    for n in 0..2 {
                        let expect = brute.attr[[n * 2, i, j]] / alpha;
                        assert!((agg.z[[v, n, 0, i, j]] - expect).abs() < 1e-12);
                    }
                    // View 0 copies sort first at equal depth and dominate.
                    assert!(agg.z[[v, 0, 0, i, j]] > agg.z[[v, 1, 0, i, j]]);
                }
            }
        }
    }

    #[test]
    fn empty_kept_set_aggregation_is_noop() {
        let (field, cams) = self_covering_scene(3, 3, 1);
        let maps = class_query_maps(&Array2::zeros((0, 3)), &Array4::zeros((0, 1, 3, 3)), vec![]).unwrap();
        let agg = aggregate_multiview(&maps, &field, &cams, &AggregateOptions::default()).unwrap();
        assert_eq!(agg, maps);
        let labels = derive_label_maps(&agg, 0.3, &ClassTaxonomy::generic(2, &[])).unwrap();
        assert!(labels.sem.iter().all(|&s| s == BACKGROUND));
    }

    #[test]
    fn aggregation_budget_is_enforced() {
        let (field, cams) = self_covering_scene(2, 2, 1);
        let maps = class_query_maps(&Array2::zeros((3, 4)), &Array4::zeros((3, 1, 2, 2)), vec![0, 1, 2]).unwrap();
        let opts = AggregateOptions { max_channels: 11, ..AggregateOptions::default() };
        assert_eq!(
            aggregate_multiview(&maps, &field, &cams, &opts),
            Err(LiftError::AttributeBudget { needed: 12, limit: 11 })
        );
    }

    #[test]
    fn sparse_fields_are_rejected() {
        let (field, cams) = self_covering_scene(2, 2, 1);
        let sparse = GaussianField::sparse(1, field.prims().to_vec()).unwrap();
        let maps = class_query_maps(&Array2::zeros((1, 2)), &Array4::zeros((1, 1, 2, 2)), vec![0]).unwrap();
        assert!(matches!(
            aggregate_multiview(&maps, &sparse, &cams, &AggregateOptions::default()),
            Err(LiftError::Scene(SceneError::SparseField))
        ));
        let labels = LabelMaps::background(Dims::new(1, 2, 2));
        assert!(lift_to_3d(&labels, &sparse, &ClassTaxonomy::generic(1, &[]), &[], None).is_err());
    }

    #[test]
    fn lifting_counts_and_text_selection() {
        let (field, _) = self_covering_scene(3, 4, 2);
        let dims = field.dims().unwrap();
        let tax = ClassTaxonomy::generic(2, &[0]);
        let mut sem = vec![BACKGROUND; dims.len()];
        let mut ins = vec![BACKGROUND; dims.len()];
        // Instance 7 (thing class 0) covers 3 pixels in view 0 and 2 in view 1.
        for g in [0, 1, 5, 12, 13] {
            sem[g] = 0;
            ins[g] = 7;
        }
        for g in [20, 21] {
            sem[g] = 1;
            ins[g] = 4;
        }
        let labels = labels_from_flat(dims, sem, ins).unwrap();
        let seg = lift_to_3d(&labels, &field, &tax, &[4, 7], Some(7)).unwrap();
        assert_eq!(seg.ins_sets[&7].len(), 5);
        assert_eq!(seg.pano_things.keys().copied().collect::<Vec<_>>(), vec![7]);
        assert_eq!(seg.pano_stuff[&1], vec![20, 21]);
        assert_eq!(seg.text.as_ref().unwrap().members, seg.ins_sets[&7]);
        assert_eq!(
            lift_to_3d(&labels, &field, &tax, &[4, 7], Some(3)),
            Err(LiftError::TextIdNotKept(3))
        );
        let empty = lift_to_3d(&LabelMaps::background(dims), &field, &tax, &[], None).unwrap();
        assert!(empty.sem_sets.is_empty() && empty.ins_sets.is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn class_logit_shift_leaves_labels_unchanged(seed in 0u64..100_000, shift in -20.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let class = Array2::from_shape_fn((3, 4), |_| rng.random_range(-3.0..3.0));
            let mask = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.random_range(-3.0..3.0));
            let tax = ClassTaxonomy::generic(3, &[0, 2]);
            let (field, _) = self_covering_scene(3, 3, 2);
            let p = preds_from(mask.clone(), class.clone());
            // Shift one query's logits; keep them inside the logit cap.
            let mut shifted = class.clone();
            shifted.row_mut(1).mapv_inplace(|x| x + shift);
            let q = preds_from(mask, shifted);
            let a = probability_maps(&p, 0.5).unwrap();
            let b = probability_maps(&q, 0.5).unwrap();
            prop_assert_eq!(&a.kept, &b.kept);
            let la = derive_label_maps(&a, 0.3, &tax).unwrap();
            let lb = derive_label_maps(&b, 0.3, &tax).unwrap();
            prop_assert_eq!(&la, &lb);
            let sa = lift_to_3d(&la, &field, &tax, &a.kept, None).unwrap();
            let sb = lift_to_3d(&lb, &field, &tax, &b.kept, None).unwrap();
            prop_assert_eq!(sa, sb);
        }

        #[test]
        fn lifted_sets_partition_labeled_gaussians(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (field, _) = self_covering_scene(4, 5, 2);
            let dims = field.dims().unwrap();
            let tax = ClassTaxonomy::generic(3, &[1]);
            let mut sem = Vec::new();
            let mut ins = Vec::new();
            for _ in 0..dims.len() {
                if rng.random_bool(0.3) {
                    sem.push(BACKGROUND);
                    ins.push(BACKGROUND);
                } else {
                    sem.push(rng.random_range(0..3));
                    ins.push(rng.random_range(0..4));
                }
            }
            let labels = labels_from_flat(dims, sem, ins).unwrap();
            let seg = lift_to_3d(&labels, &field, &tax, &[0, 1, 2, 3], None).unwrap();
            let labeled = reference::members_scalar(&labels.sem, BACKGROUND);
            let mut seen = std::collections::BTreeSet::new();
            for (id, members) in &seg.ins_sets {
                let oracle = reference::members_scalar(&labels.ins, *id);
                prop_assert_eq!(members.iter().copied().collect::<std::collections::BTreeSet<_>>(), oracle);
                for g in members {
                    prop_assert!(seen.insert(*g));
                }
            }
            prop_assert_eq!(seen.len(), dims.len() - labeled.len());
            let mut pano = std::collections::BTreeSet::new();
            for m in seg.pano_stuff.values().chain(seg.pano_things.values()) {
                for g in m {
                    prop_assert!(pano.insert(*g));
                }
            }
            prop_assert_eq!(pano, seen);
        }
    }
}
