//! Image, depth and segmentation quality metrics. Segmentation metrics pool
//! pixels across all views, so an object whose id changes between views is
//! scored as two different segments.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{render, render_semantic, RasterConfig, RasterError};
use crate::scene::{Camera, ClassTaxonomy, GaussianField, LabelMaps, SceneError, SegmentationField, BACKGROUND};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Fraction of pooled coverage a rendered pixel needs to carry a label.
pub const RENDER_LABEL_ALPHA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("no valid pixels")]
    EmptyValid,
    #[error("missing input for {0}")]
    Missing(&'static str),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Peak signal-to-noise ratio in dB of `(K, H, W)` images clamped to
/// `[0, peak]`. Identical images give `+inf`.
pub fn psnr(img: &Array3<f64>, gt: &Array3<f64>, peak: f64) -> Result<f64, MetricError> {
    if img.shape() != gt.shape() {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", img.shape(), gt.shape())));
    }
    if img.is_empty() {
        return Err(MetricError::EmptyValid);
    }
    let mse = img
        .iter()
        .zip(gt.iter())
        .map(|(&a, &b)| {
            let d = a.clamp(0.0, peak) - b.clamp(0.0, peak);
            d * d
        })
        .sum::<f64>()
        / img.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the normalized Gaussian window.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h, w - n + 1), |(i, j)| (0..n).map(|t| k[t] * x[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((h - n + 1, w - n + 1), |(i, j)| (0..n).map(|t| k[t] * rows[[i + t, j]]).sum::<f64>())
}

/// Mean SSIM of the channel-mean grayscale images over all valid window
/// positions (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03, peak 1).
pub fn ssim(img: &Array3<f64>, gt: &Array3<f64>) -> Result<f64, MetricError> {
    if img.shape() != gt.shape() {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", img.shape(), gt.shape())));
    }
    let (_, h, w) = img.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW || img.shape()[0] == 0 {
        return Err(MetricError::TooSmall { height: h, width: w, window: SSIM_WINDOW });
    }
    let a = img.mean_axis(Axis(0)).expect("nonempty channels");
    let b = gt.mean_axis(Axis(0)).expect("nonempty channels");
    let k = gaussian_kernel();
    let mu_a = filter_valid(&a, &k);
    let mu_b = filter_valid(&b, &k);
    let aa = filter_valid(&(&a * &a), &k);
    let bb = filter_valid(&(&b * &b), &k);
    let ab = filter_valid(&(&a * &b), &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for idx in 0..mu_a.len() {
        let (i, j) = (idx / mu_a.ncols(), idx % mu_a.ncols());
        let (ma, mb) = (mu_a[[i, j]], mu_b[[i, j]]);
        let va = aa[[i, j]] - ma * ma;
        let vb = bb[[i, j]] - mb * mb;
        let cov = ab[[i, j]] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// `(AbsRel, RMSE)` over the valid pixels.
pub fn depth_metrics(pred: &Array3<f64>, gt: &Array3<f64>, valid: &Array3<bool>) -> Result<(f64, f64), MetricError> {
    if pred.shape() != gt.shape() || gt.shape() != valid.shape() {
        return Err(MetricError::Shape(format!(
            "pred {:?}, gt {:?}, valid {:?}",
            pred.shape(),
            gt.shape(),
            valid.shape()
        )));
    }
    let (mut rel, mut sq, mut n) = (0.0, 0.0, 0usize);
    for ((&p, &g), &ok) in pred.iter().zip(gt.iter()).zip(valid.iter()) {
        if !ok || !(g > 0.0) {
            continue;
        }
        rel += (p - g).abs() / g;
        sq += (p - g) * (p - g);
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::EmptyValid);
    }
    Ok((rel / n as f64, (sq / n as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    pub per_class: BTreeMap<i32, f64>,
}

/// Semantic mIoU over pixels pooled across views. Pixels whose ground
/// truth is background are ignored; the mean runs over classes present in
/// the ground truth. `None` when the ground truth has no labeled pixel.
pub fn miou(pred: &Array3<i32>, gt: &Array3<i32>) -> Result<Option<MiouResult>, MetricError> {
    if pred.shape() != gt.shape() {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    // (intersection, gt area, pred area) restricted to non-void pixels
    let mut stats: BTreeMap<i32, [usize; 3]> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g == BACKGROUND {
            continue;
        }
        stats.entry(g).or_default()[1] += 1;
        if p != BACKGROUND {
            stats.entry(p).or_default()[2] += 1;
        }
        if p == g {
            stats.entry(g).or_default()[0] += 1;
        }
    }
    let per_class: BTreeMap<i32, f64> = stats
        .iter()
        .filter(|(_, s)| s[1] > 0)
        .map(|(&c, s)| (c, s[0] as f64 / (s[1] + s[2] - s[0]) as f64))
        .collect();
    if per_class.is_empty() {
        return Ok(None);
    }
    let miou = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(Some(MiouResult { miou, per_class }))
}

/// Text-referred mIoU: IoU of each prompt's predicted mask with its target,
/// averaged over prompts. Two empty masks count as a perfect match.
pub fn text_miou(pred: &[Array3<bool>], gt: &[Array3<bool>]) -> Result<Option<f64>, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Shape(format!("{} predicted vs {} target masks", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if p.shape() != g.shape() {
            return Err(MetricError::Shape(format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
        let inter = p.iter().zip(g.iter()).filter(|(&a, &b)| a && b).count();
        let union = p.iter().zip(g.iter()).filter(|(&a, &b)| a || b).count();
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(Some(total / gt.len() as f64))
}

/// A segment: a set of pooled pixel indices with one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub class: i32,
    pub id: i32,
    pub pixels: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSegment {
    pub segment: Segment,
    pub score: f64,
}

/// Panoptic segments of pooled label maps: one per stuff class, one per
/// (thing class, instance id) pair.
pub fn panoptic_segments(labels: &LabelMaps, taxonomy: &ClassTaxonomy) -> Vec<Segment> {
    let mut map: BTreeMap<(i32, i32), BTreeSet<usize>> = BTreeMap::new();
    for (g, (&s, &i)) in labels.sem.iter().zip(labels.ins.iter()).enumerate() {
        if s == BACKGROUND {
            continue;
        }
        let id = if taxonomy.is_thing(s) { i } else { BACKGROUND };
        map.entry((s, id)).or_default().insert(g);
    }
    map.into_iter()
        .map(|((class, id), pixels)| Segment { class, id, pixels })
        .collect()
}

/// Thing segments of pooled label maps, scored by `scores[ins id]`
/// (1.0 when absent).
pub fn thing_instances(labels: &LabelMaps, taxonomy: &ClassTaxonomy, scores: Option<&BTreeMap<i32, f64>>) -> Vec<ScoredSegment> {
    panoptic_segments(labels, taxonomy)
        .into_iter()
        .filter(|s| taxonomy.is_thing(s.class))
        .map(|segment| {
            let score = scores.and_then(|m| m.get(&segment.id).copied()).unwrap_or(1.0);
            ScoredSegment { segment, score }
        })
        .collect()
}

fn iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Average precision of one class at one IoU threshold. Predictions are
/// ranked by descending score (stable), each greedily taking the unmatched
/// ground truth of highest IoU (lowest index on ties) with IoU >= `t`.
/// Precision is interpolated at 101 recall points.
pub fn average_precision(preds: &[ScoredSegment], gts: &[Segment], t: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut taken = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (rank, &p) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&preds[p].segment.pixels, &gt.pixels);
            if v >= t && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    // Precision envelope from the right, then sample at each recall step.
    let mut envelope = curve.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut total = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        if let Some(&(_, p)) = envelope.iter().find(|(rc, _)| *rc >= r) {
            total += p;
        }
    }
    Some(total / 101.0)
}

/// COCO-style mask mAP: AP averaged over IoU thresholds 0.50:0.05:0.95,
/// then over thing classes that have ground truth.
pub fn instance_ap(preds: &[ScoredSegment], gts: &[ScoredSegment]) -> Option<f64> {
    let classes: BTreeSet<i32> = gts.iter().map(|g| g.segment.class).collect();
    if classes.is_empty() {
        return None;
    }
    let thresholds = coco_thresholds();
    let mut total = 0.0;
    for &c in &classes {
        let p: Vec<ScoredSegment> = preds.iter().filter(|s| s.segment.class == c).cloned().collect();
        let g: Vec<Segment> = gts.iter().filter(|s| s.segment.class == c).map(|s| s.segment.clone()).collect();
        let per_t: f64 = thresholds
            .iter()
            .map(|&t| average_precision(&p, &g, t).expect("class has ground truth"))
            .sum();
        total += per_t / thresholds.len() as f64;
    }
    Some(total / classes.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PanopticClass {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticResult {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub per_class: BTreeMap<i32, PanopticClass>,
}

/// Panoptic quality over pooled label maps. Segments match when they share
/// a class and IoU > 0.5; ground-truth background is void: the void part of
/// a prediction is removed from the union, and predictions lying mostly in
/// void are not counted as false positives. Averaged over classes that
/// appear in either map.
pub fn panoptic_quality(pred: &LabelMaps, gt: &LabelMaps, taxonomy: &ClassTaxonomy) -> Result<Option<PanopticResult>, MetricError> {
    if pred.sem.shape() != gt.sem.shape() {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", pred.sem.shape(), gt.sem.shape())));
    }
    let ps = panoptic_segments(pred, taxonomy);
    let gs = panoptic_segments(gt, taxonomy);
    let gt_flat = gt.sem.as_standard_layout();
    let gt_flat = gt_flat.as_slice().expect("standard layout");
    let mut owner: HashMap<usize, usize> = HashMap::new();
    for (k, g) in gs.iter().enumerate() {
        for &px in &g.pixels {
            owner.insert(px, k);
        }
    }
    let mut stats: BTreeMap<i32, (f64, usize, usize, usize)> = BTreeMap::new();
    let mut gt_matched = vec![false; gs.len()];
    for p in &ps {
        let void = p.pixels.iter().filter(|&&px| gt_flat[px] == BACKGROUND).count();
        let mut overlaps: BTreeMap<usize, usize> = BTreeMap::new();
        for px in &p.pixels {
            if let Some(&k) = owner.get(px) {
                *overlaps.entry(k).or_default() += 1;
            }
        }
        let mut matched = false;
        for (&k, &inter) in &overlaps {
            let g = &gs[k];
            if g.class != p.class {
                continue;
            }
            let union = p.pixels.len() + g.pixels.len() - inter - void;
            let v = inter as f64 / union as f64;
            if v > 0.5 {
                gt_matched[k] = true;
                let e = stats.entry(p.class).or_default();
                e.0 += v;
                e.1 += 1;
                matched = true;
                break;
            }
        }
        if !matched && (void as f64) <= 0.5 * p.pixels.len() as f64 {
            stats.entry(p.class).or_default().2 += 1;
        }
    }
    for (k, g) in gs.iter().enumerate() {
        if !gt_matched[k] {
            stats.entry(g.class).or_default().3 += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    for (c, (iou_sum, tp, fp, fn_)) in stats {
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        if denom == 0.0 {
            continue;
        }
        let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
        let rq = tp as f64 / denom;
        per_class.insert(c, PanopticClass { pq: iou_sum / denom, sq, rq, tp, fp, fn_ });
    }
    if per_class.is_empty() {
        return Ok(None);
    }
    let n = per_class.len() as f64;
    Ok(Some(PanopticResult {
        pq: per_class.values().map(|c| c.pq).sum::<f64>() / n,
        sq: per_class.values().map(|c| c.sq).sum::<f64>() / n,
        rq: per_class.values().map(|c| c.rq).sum::<f64>() / n,
        per_class,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Label maps of the input views compared directly.
    Context,
    /// The lifted field rendered into held-out target cameras.
    Novel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub absrel: Option<f64>,
    pub rmse: Option<f64>,
    pub miou_s: Option<f64>,
    pub miou_t: Option<f64>,
    pub map: Option<f64>,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub miou_per_class: BTreeMap<String, f64>,
    pub pq_per_class: BTreeMap<String, PanopticClass>,
}

impl EvalReport {
    /// Flat `(key, value)` rows; absent metrics are skipped.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let scalars = [
            ("psnr", self.psnr),
            ("ssim", self.ssim),
            ("absrel", self.absrel),
            ("rmse", self.rmse),
            ("miou_s", self.miou_s),
            ("miou_t", self.miou_t),
            ("map", self.map),
            ("pq", self.pq),
            ("sq", self.sq),
            ("rq", self.rq),
        ];
        for (k, v) in scalars {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        }
        for (c, v) in &self.miou_per_class {
            out.push((format!("iou/{c}"), *v));
        }
        for (c, v) in &self.pq_per_class {
            out.push((format!("pq/{c}"), v.pq));
        }
        out
    }

    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v:.6}\n"))
            .collect()
    }
}

/// Inputs to [`evaluate`]. Every metric whose inputs are present is
/// reported. Image stacks are `(V, K, H, W)`, depth `(V, H, W)`.
#[derive(Clone, Debug, Default)]
pub struct EvalInputs<'a> {
    pub taxonomy: Option<&'a ClassTaxonomy>,
    pub pred_labels: Option<&'a LabelMaps>,
    pub gt_labels: Option<&'a LabelMaps>,
    pub scores: Option<&'a BTreeMap<i32, f64>>,
    pub pred_images: Option<&'a ndarray::Array4<f64>>,
    pub gt_images: Option<&'a ndarray::Array4<f64>>,
    pub pred_depth: Option<&'a Array3<f64>>,
    pub gt_depth: Option<&'a Array3<f64>>,
    pub pred_text: &'a [Array3<bool>],
    pub gt_text: &'a [Array3<bool>],
}

fn class_name(taxonomy: &ClassTaxonomy, c: i32) -> String {
    taxonomy
        .names
        .get(c as usize)
        .cloned()
        .unwrap_or_else(|| c.to_string())
}

pub fn evaluate(inputs: &EvalInputs<'_>) -> Result<EvalReport, MetricError> {
    let mut report = EvalReport::default();
    if let (Some(p), Some(g)) = (inputs.pred_images, inputs.gt_images) {
        if p.shape() != g.shape() {
            return Err(MetricError::Shape(format!("images {:?} vs {:?}", p.shape(), g.shape())));
        }
        let views = p.shape()[0];
        let (mut ps, mut ss) = (0.0, Vec::new());
        for v in 0..views {
            let a = p.index_axis(Axis(0), v).to_owned();
            let b = g.index_axis(Axis(0), v).to_owned();
            ps += psnr(&a, &b, 1.0)?;
            if let Ok(s) = ssim(&a, &b) {
                ss.push(s);
            }
        }
        report.psnr = Some(ps / views as f64);
        if !ss.is_empty() {
            report.ssim = Some(ss.iter().sum::<f64>() / ss.len() as f64);
        }
    }
    if let (Some(p), Some(g)) = (inputs.pred_depth, inputs.gt_depth) {
        let valid = g.mapv(|d| d.is_finite() && d > 0.0);
        let (absrel, rmse) = depth_metrics(p, g, &valid)?;
        report.absrel = Some(absrel);
        report.rmse = Some(rmse);
    }
    if let (Some(p), Some(g)) = (inputs.pred_labels, inputs.gt_labels) {
        let taxonomy = inputs.taxonomy.ok_or(MetricError::Missing("class taxonomy"))?;
        if let Some(m) = miou(&p.sem, &g.sem)? {
            report.miou_s = Some(m.miou);
            report.miou_per_class = m.per_class.iter().map(|(&c, &v)| (class_name(taxonomy, c), v)).collect();
        }
        if let Some(pq) = panoptic_quality(p, g, taxonomy)? {
            report.pq = Some(pq.pq);
            report.sq = Some(pq.sq);
            report.rq = Some(pq.rq);
            report.pq_per_class = pq.per_class.iter().map(|(&c, v)| (class_name(taxonomy, c), v.clone())).collect();
        }
        let pi = thing_instances(p, taxonomy, inputs.scores);
        let gi = thing_instances(g, taxonomy, None);
        report.map = instance_ap(&pi, &gi);
    }
    if !inputs.gt_text.is_empty() {
        report.miou_t = text_miou(inputs.pred_text, inputs.gt_text)?;
    }
    Ok(report)
}

/// Rendered novel views of a lifted field.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedViews {
    pub labels: LabelMaps,
    /// `(V, K, H, W)`; empty `K` when the field has no attributes.
    pub images: ndarray::Array4<f64>,
    pub depth: Array3<f64>,
    pub alpha: Array3<f64>,
    /// Pixels labeled with the text-referred instance, when there is one.
    pub text_mask: Option<Array3<bool>>,
}

/// Renders the field into each camera and assigns per-pixel labels by
/// rasterizing one-hot `(class, instance)` attributes and taking the argmax.
/// Channel 0 stands for unlabeled Gaussians so they still occlude; pixels
/// with alpha below [`RENDER_LABEL_ALPHA`] are background.
pub fn render_views(
    field: &GaussianField,
    seg: &SegmentationField,
    cams: &[Camera],
    size: (usize, usize),
    cfg: &RasterConfig,
) -> Result<RenderedViews, MetricError> {
    let n = field.len();
    let mut sem_of = vec![BACKGROUND; n];
    let mut ins_of = vec![BACKGROUND; n];
    for (&c, members) in &seg.sem_sets {
        for &g in members {
            if g < n {
                sem_of[g] = c;
            }
        }
    }
    for (&i, members) in &seg.ins_sets {
        for &g in members {
            if g < n {
                ins_of[g] = i;
            }
        }
    }
    let mut channels: Vec<(i32, i32)> = vec![(BACKGROUND, BACKGROUND)];
    let mut index: BTreeMap<(i32, i32), usize> = BTreeMap::new();
    for g in 0..n {
        let key = (sem_of[g], ins_of[g]);
        if key.0 == BACKGROUND {
            continue;
        }
        index.entry(key).or_insert_with(|| {
            channels.push(key);
            channels.len() - 1
        });
    }
    let mut onehot = Array2::zeros((n, channels.len()));
    for g in 0..n {
        let key = (sem_of[g], ins_of[g]);
        let ch = if key.0 == BACKGROUND { 0 } else { index[&key] };
        onehot[[g, ch]] = 1.0;
    }
    let (h, w) = size;
    let v = cams.len();
    let k = field.attr_dim();
    let mut sem = Array3::from_elem((v, h, w), BACKGROUND);
    let mut ins = Array3::from_elem((v, h, w), BACKGROUND);
    let mut images = ndarray::Array4::zeros((v, k, h, w));
    let mut depth = Array3::zeros((v, h, w));
    let mut alpha = Array3::zeros((v, h, w));
    for (vi, cam) in cams.iter().enumerate() {
        let out = render_semantic(field, onehot.view(), cam, size, cfg)?;
        for i in 0..h {
            for j in 0..w {
                if out.alpha[[i, j]] < RENDER_LABEL_ALPHA {
                    continue;
                }
                let mut best = 0;
                for c in 1..channels.len() {
                    if out.attr[[c, i, j]] > out.attr[[best, i, j]] {
                        best = c;
                    }
                }
                sem[[vi, i, j]] = channels[best].0;
                ins[[vi, i, j]] = channels[best].1;
            }
        }
        depth.index_axis_mut(Axis(0), vi).assign(&out.depth);
        alpha.index_axis_mut(Axis(0), vi).assign(&out.alpha);
        if k > 0 {
            let rgb = render(field, cam, size, cfg)?;
            images.index_axis_mut(Axis(0), vi).assign(&rgb.attr);
        }
    }
    let text_mask = seg.text.as_ref().map(|t| ins.mapv(|i| i == t.ins_id));
    Ok(RenderedViews {
        labels: LabelMaps::new(sem, ins)?,
        images,
        depth,
        alpha,
        text_mask,
    })
}
