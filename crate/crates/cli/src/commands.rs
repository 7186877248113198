use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde_json::{json, Value};

use splatseg_core::bundle::{atomic_write, from_synthetic, read_bundle, write_bundle, BundleError, CameraRecord, SceneBundle};
use splatseg_core::editing::{apply_plan, EditError, EditPlan};
use splatseg_core::export::{depth_png, export_ply, id_map_png, matrix_png, palette_png, rgb_png, ExportError};
use splatseg_core::lifting::{run_lifting, AggregateOptions, LiftError};
use splatseg_core::losses::{
    continuity_loss, instance_targets, mask_loss, photometric_l1, total_loss, LossComponents, LossError, PerceptualDistance,
};
use splatseg_core::metrics::{evaluate, render_views, ssim, EvalInputs, EvalReport, MetricError};
use splatseg_core::pairing::{overlap_matrix, sample_pairs, Frame, PairError};
use splatseg_core::selftest;
use splatseg_core::synthetic::{disagreement_scene, wall_scene};
use splatseg_core::text::{gt_assignment_from_masks, select_query, text_matching_loss, TextError};
use splatseg_core::{Camera, LabelMaps, SegmentationField, BACKGROUND};

use crate::{Mode, Perceptual, SceneKind};

/// A failed command: stable code, process exit status and message.
#[derive(Debug)]
pub struct Failure {
    pub code: &'static str,
    pub exit: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Display) -> Self {
        Self {
            code: "usage",
            exit: 1,
            message: message.to_string(),
        }
    }

    pub fn data(code: &'static str, message: impl Display) -> Self {
        Self {
            code,
            exit: 2,
            message: message.to_string(),
        }
    }

    pub fn json_line(&self) -> String {
        json!({"error": {"code": self.code, "exit": self.exit, "message": self.message}}).to_string()
    }
}

macro_rules! data_error {
    ($($ty:ty => $code:expr),* $(,)?) => {
        $(impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Failure::data($code(&e), e)
            }
        })*
    };
}

data_error! {
    BundleError => |e: &BundleError| e.code(),
    ExportError => |e: &ExportError| e.code(),
    LiftError => |_: &LiftError| "lift",
    MetricError => |_: &MetricError| "metrics",
    LossError => |_: &LossError| "loss",
    EditError => |_: &EditError| "edit",
    PairError => |_: &PairError| "pair",
    TextError => |_: &TextError| "text",
}

type Result<T> = std::result::Result<T, Failure>;

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::data("json", e))?;
    atomic_write(path, format!("{text}\n").as_bytes())?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data("json", format!("{what} {}: {e}", path.display())))
}

fn load(path: &Path) -> Result<SceneBundle> {
    if !path.join(splatseg_core::bundle::MANIFEST).is_file() {
        return Err(Failure::usage(format!("{} is not a bundle directory", path.display())));
    }
    Ok(read_bundle(path)?)
}

fn check_unit(name: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(0.0..=1.0).contains(&x) => Err(Failure::usage(format!("--{name} must lie in [0, 1], got {x}"))),
        _ => Ok(()),
    }
}

pub fn synth(kind: SceneKind, out: &Path) -> Result<()> {
    let scene = match kind {
        SceneKind::Wall => wall_scene(),
        SceneKind::Disagreement => disagreement_scene(),
    };
    write_bundle(&from_synthetic(&scene), out)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn write_label_pngs(dir: &Path, prefix: &str, labels: &LabelMaps) -> Result<()> {
    for v in 0..labels.dims().views {
        let sem = labels.sem.index_axis(Axis(0), v).to_owned();
        let ins = labels.ins.index_axis(Axis(0), v).to_owned();
        atomic_write(&dir.join(format!("{prefix}{v}_sem.png")), &id_map_png(&sem)?)?;
        atomic_write(&dir.join(format!("{prefix}{v}_ins.png")), &id_map_png(&ins)?)?;
        atomic_write(&dir.join(format!("{prefix}{v}_preview.png")), &palette_png(&ins)?)?;
    }
    Ok(())
}

pub fn lift(bundle: &Path, out: &Path, tau_c: Option<f64>, tau: Option<f64>, aggregate: bool) -> Result<()> {
    check_unit("tau-c", tau_c)?;
    check_unit("tau", tau)?;
    let b = load(bundle)?;
    let preds = b
        .predictions()?
        .ok_or_else(|| BundleError::MissingTensor("mask_logits".into()))?;
    let field = b.field()?;
    let mut cfg = b.config.clone();
    cfg.tau_c = tau_c.unwrap_or(cfg.tau_c);
    cfg.tau = tau.unwrap_or(cfg.tau);

    let mut result = run_lifting(&preds, &field, &b.cameras, &b.taxonomy, cfg.tau_c, cfg.tau, aggregate, &AggregateOptions::from_config(&cfg), None)?;

    // Text grounding, when the bundle carries prompts and attention weights.
    let mut text_ids: Vec<Option<i32>> = Vec::new();
    if let (true, Some(stack)) = (b.has("text_feats"), b.attention()?) {
        let feats = b.f64_2("text_feats")?;
        let sel = select_query(feats.view(), preds.queries.view(), &stack)?;
        text_ids = sel
            .text_ids
            .iter()
            .map(|&q| result.maps.kept.contains(&q).then_some(q as i32))
            .collect();
        if let Some(Some(id)) = text_ids.first() {
            result.segmentation.text = Some(splatseg_core::scene::TextSegment {
                ins_id: *id,
                members: result.segmentation.ins_sets.get(id).cloned().unwrap_or_default(),
            });
        } else if !text_ids.is_empty() {
            log::warn!("text prompt selected a query that was filtered out");
        }
    }

    let scores = result.maps.query_scores();
    let mut pred = b.clone();
    pred.config = cfg.clone();
    pred.set_labels("pred", &result.labels);
    let mut score_vec = Array1::<f64>::zeros(preds.num_queries());
    for (&q, &s) in &scores {
        score_vec[q as usize] = s;
    }
    pred.set_array("pred_scores", &score_vec);
    let text_masks: Vec<Array3<bool>> = text_ids
        .iter()
        .map(|id| result.labels.ins.mapv(|i| Some(i) == *id && i != BACKGROUND))
        .collect();
    pred.set_masks("pred_text_masks", &text_masks);
    if field.attr_dim() > 0 {
        let dims = b.dims;
        let rendered = render_views(&field, &SegmentationField::default(), &b.cameras, (dims.height, dims.width), &cfg.raster)?;
        pred.set_array("pred_images", &rendered.images);
        pred.set_array("pred_depth", &rendered.depth);
    }

    write_bundle(&pred, &out.join("bundle"))?;
    write_json(&out.join("segmentation.json"), &result.segmentation)?;
    write_label_pngs(&out.join("labels"), "view", &result.labels)?;
    let summary = json!({
        "aggregate": aggregate,
        "tau_c": cfg.tau_c,
        "tau": cfg.tau,
        "kept_queries": result.maps.kept,
        "scores": scores,
        "text_ids": text_ids,
        "instances": result.segmentation.ins_sets.keys().collect::<Vec<_>>(),
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "kept {} queries, {} instances, aggregation {}",
        result.maps.kept.len(),
        result.segmentation.ins_sets.len(),
        if aggregate { "on" } else { "off" }
    );
    Ok(())
}

pub fn render(
    bundle: &Path,
    out: &Path,
    segmentation: Option<&Path>,
    cameras: Option<&Path>,
    targets: bool,
    bundle_out: Option<&Path>,
) -> Result<()> {
    let b = load(bundle)?;
    let cams: Vec<Camera> = if let Some(p) = cameras {
        let recs: Vec<CameraRecord> = read_json(p, "camera file")?;
        recs.iter().map(Camera::from).collect()
    } else if targets {
        if b.target_cameras.is_empty() {
            return Err(Failure::usage("bundle has no target cameras"));
        }
        b.target_cameras.clone()
    } else {
        b.cameras.clone()
    };
    for (v, c) in cams.iter().enumerate() {
        if let Some(reason) = c.violations().first() {
            return Err(Failure::data("camera", format!("camera {v}: {reason}")));
        }
    }
    let seg: SegmentationField = match segmentation {
        Some(p) => read_json(p, "segmentation")?,
        None => SegmentationField::default(),
    };
    let field = b.field()?;
    let size = (b.dims.height, b.dims.width);
    let r = render_views(&field, &seg, &cams, size, &b.config.raster)?;

    let mut scales = Vec::new();
    for v in 0..cams.len() {
        if r.images.shape()[1] >= 3 {
            let img = r.images.index_axis(Axis(0), v).slice(s![0..3, .., ..]).to_owned();
            atomic_write(&out.join(format!("view{v}_rgb.png")), &rgb_png(&img)?)?;
        }
        let (png, max) = depth_png(&r.depth.index_axis(Axis(0), v).to_owned())?;
        atomic_write(&out.join(format!("view{v}_depth.png")), &png)?;
        scales.push(max);
    }
    if segmentation.is_some() {
        write_label_pngs(out, "view", &r.labels)?;
    }
    write_json(&out.join("render.json"), &json!({"views": cams.len(), "depth_png_max": scales}))?;

    if let Some(dst) = bundle_out {
        let mut nb = b.clone();
        nb.set_labels("pred_target", &r.labels);
        if r.images.shape()[1] >= 3 {
            nb.set_array("pred_target_images", &r.images.slice(s![.., 0..3, .., ..]).to_owned());
        }
        nb.set_array("pred_target_depth", &r.depth);
        if let Some(m) = &r.text_mask {
            nb.set_masks("pred_target_text_masks", std::slice::from_ref(m));
        }
        write_bundle(&nb, dst)?;
    }
    println!("rendered {} views into {}", cams.len(), out.display());
    Ok(())
}

/// Prediction tensor `name`, falling back to `fallback` in the same bundle
/// so that a ground-truth bundle can be scored against itself.
fn pick<'a>(b: &'a SceneBundle, name: &'a str, fallback: &'a str) -> &'a str {
    if b.has(name) {
        name
    } else {
        if b.has(fallback) {
            log::info!("prediction bundle has no {name}; using {fallback}");
        }
        fallback
    }
}

fn report_json(r: &EvalReport) -> Value {
    let mut m = serde_json::Map::new();
    for (k, v) in r.rows() {
        let val = if v.is_finite() { json!(v) } else { json!(v.to_string()) };
        m.insert(k, val);
    }
    Value::Object(m)
}

pub fn metrics(pred: &Path, gt: &Path, mode: Mode, out: &Path) -> Result<()> {
    let p = load(pred)?;
    let g = load(gt)?;
    let (gt_prefix, pred_prefix) = match mode {
        Mode::Context => ("gt", "pred"),
        Mode::Novel => ("target", "pred_target"),
    };
    if matches!(mode, Mode::Novel) && g.target_cameras.is_empty() {
        return Err(Failure::usage("novel mode needs a ground-truth bundle with target views"));
    }
    let (gt_img, gt_depth, gt_text) = match mode {
        Mode::Context => ("images", "gt_depth", "gt_text_masks"),
        Mode::Novel => ("target_images", "target_depth", "target_text_masks"),
    };
    let pred_sem = format!("{pred_prefix}_sem");
    let pred_labels_prefix = if p.has(&pred_sem) { pred_prefix } else { gt_prefix };
    let pred_labels = p.labels(pred_labels_prefix)?;
    let gt_labels = g.labels(gt_prefix)?;
    if pred_labels.is_none() || gt_labels.is_none() {
        return Err(Failure::data("missing_tensor", "label maps missing from prediction or ground truth"));
    }
    let img_name = format!("{pred_prefix}_images");
    let depth_name = format!("{pred_prefix}_depth");
    let text_name = format!("{pred_prefix}_text_masks");
    let pred_images = p.opt_f64_4(pick(&p, &img_name, gt_img))?;
    let pred_depth = p.opt_f64_3(pick(&p, &depth_name, gt_depth))?;
    let pred_text = p.masks(pick(&p, &text_name, gt_text))?;
    let gt_images = g.opt_f64_4(gt_img)?;
    let gt_d = g.opt_f64_3(gt_depth)?;
    let gt_t = g.masks(gt_text)?;
    let scores: Option<BTreeMap<i32, f64>> = if p.has("pred_scores") {
        let s = p.tensor("pred_scores")?.to_f64();
        Some(s.iter().enumerate().map(|(q, &v)| (q as i32, v)).collect())
    } else {
        None
    };
    let inputs = EvalInputs {
        taxonomy: Some(&g.taxonomy),
        pred_labels: pred_labels.as_ref(),
        gt_labels: gt_labels.as_ref(),
        scores: scores.as_ref(),
        pred_images: pred_images.as_ref(),
        gt_images: gt_images.as_ref(),
        pred_depth: pred_depth.as_ref(),
        gt_depth: gt_d.as_ref(),
        pred_text: if gt_t.is_empty() { &[] } else { &pred_text },
        gt_text: if pred_text.is_empty() { &[] } else { &gt_t },
    };
    let report = evaluate(&inputs)?;
    let table = report.to_table();
    atomic_write(&out.join("report.txt"), table.as_bytes())?;
    write_json(&out.join("report.json"), &report_json(&report))?;
    write_json(&out.join("report_full.json"), &report)?;
    print!("{table}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn pair(bundle: &Path, out: &Path, lo: Option<f64>, hi: Option<f64>, seed: u64, count: usize, tau_d: Option<f64>) -> Result<()> {
    check_unit("lo", lo)?;
    check_unit("hi", hi)?;
    let b = load(bundle)?;
    let lo = lo.unwrap_or(b.config.pair_lo);
    let hi = hi.unwrap_or(b.config.pair_hi);
    if lo >= hi {
        return Err(Failure::usage(format!("--lo {lo} must be below --hi {hi}")));
    }
    let tau_d = tau_d.unwrap_or(b.config.tau_depth);
    let name = pick(&b, "gt_depth", "pred_depth");
    let depth = b.f64_3(name)?;
    let frames: Vec<Frame> = depth
        .outer_iter()
        .zip(&b.cameras)
        .map(|(d, c)| Frame::new(d.to_owned(), *c))
        .collect();
    let m = overlap_matrix(&frames, tau_d);
    let sample = sample_pairs(&m, lo, hi, count, seed)?;
    let iou = m.to_array();
    let rows: Vec<Vec<f64>> = iou.outer_iter().map(|r| r.to_vec()).collect();
    let doc = json!({
        "frames": m.frames,
        "iou": rows,
        "lo": lo,
        "hi": hi,
        "tau_d": tau_d,
        "seed": seed,
        "pairs": sample.pairs,
        "warning": sample.warning,
    });
    write_json(&out.join("pairs.json"), &doc)?;
    atomic_write(&out.join("overlap.png"), &matrix_png(&iou, 16)?)?;
    println!("{} frames, {} pairs sampled", m.len(), sample.pairs.len());
    if let Some(w) = sample.warning {
        println!("warning: {w}");
    }
    Ok(())
}

pub fn edit(bundle: &Path, segmentation: &Path, plan: &Path, out: &Path, ply: Option<&Path>) -> Result<()> {
    let b = load(bundle)?;
    let seg: SegmentationField = read_json(segmentation, "segmentation")?;
    let plan: EditPlan = read_json(plan, "edit plan")?;
    let field = b.field()?;
    let (edited, new_seg) = apply_plan(&field, &seg, &plan)?;
    // Per-pixel tensors describe the unedited scene, so only geometry and
    // cameras carry over.
    let mut nb = SceneBundle::new(&edited, b.dims, b.taxonomy.clone(), b.cameras.clone(), b.config.clone());
    nb.target_cameras = b.target_cameras.clone();
    write_bundle(&nb, &out.join("bundle"))?;
    write_json(&out.join("segmentation.json"), &new_seg)?;
    if let Some(p) = ply {
        export_ply(&edited, p)?;
    }
    println!("applied {} edits, {} -> {} Gaussians", plan.ops.len(), field.len(), edited.len());
    Ok(())
}

struct SsimDistance;

impl PerceptualDistance for SsimDistance {
    fn distance(&self, img: &Array3<f64>, gt: &Array3<f64>) -> f64 {
        ssim(img, gt).map(|s| 1.0 - s).unwrap_or(0.0)
    }
}

pub fn loss(bundle: &Path, out: Option<&Path>, perceptual: Perceptual) -> Result<()> {
    let b = load(bundle)?;
    let cfg = &b.config;
    let field = b.field()?;
    let size = (b.dims.height, b.dims.width);
    let rendered = render_views(&field, &SegmentationField::default(), &b.cameras, size, &cfg.raster)?;
    let mut c = LossComponents::default();
    let mut notes: Vec<String> = Vec::new();

    match b.opt_f64_4("images")? {
        Some(gt) if rendered.images.shape()[1] >= 3 && gt.shape()[1] == 3 => {
            let views = gt.shape()[0] as f64;
            let dist = SsimDistance;
            for (r, g) in rendered.images.outer_iter().zip(gt.outer_iter()) {
                let r = r.slice(s![0..3, .., ..]).to_owned();
                let g = g.to_owned();
                c.photometric += photometric_l1(&r, &g)? / views;
                if matches!(perceptual, Perceptual::Ssim) {
                    c.perceptual += dist.distance(&r, &g) / views;
                }
            }
        }
        _ => notes.push("no RGB images: photometric and perceptual terms are 0".into()),
    }
    if matches!(perceptual, Perceptual::None) {
        notes.push("perceptual distance not supplied; term is 0".into());
    }

    let preds = b.predictions()?;
    let gt_labels = b.labels("gt")?;
    match (&preds, &gt_labels) {
        (Some(p), Some(g)) => {
            let (_, masks, classes) = instance_targets(g);
            c.mask = mask_loss(p, &masks, &classes, &cfg.match_cost)?.total();
        }
        _ => notes.push("mask loss needs logits and gt labels".into()),
    }

    let labels = match &preds {
        Some(p) => Some(run_lifting(p, &field, &b.cameras, &b.taxonomy, cfg.tau_c, cfg.tau, true, &AggregateOptions::from_config(cfg), None)?.labels),
        None => gt_labels.clone(),
    };
    match labels {
        Some(l) => c.continuity = continuity_loss(&rendered.depth, &l)?,
        None => notes.push("continuity loss needs instance masks".into()),
    }

    let gt_text = b.masks("gt_text_masks")?;
    match (&preds, b.attention()?, b.has("text_feats"), gt_text.is_empty()) {
        (Some(p), Some(stack), true, false) => {
            let feats = b.f64_2("text_feats")?;
            let sel = select_query(feats.view(), p.queries.view(), &stack)?;
            let nq = p.num_queries();
            let flat = p.mask_logits.len() / nq.max(1);
            let logits = p.mask_logits.to_shape((nq, flat)).map_err(|e| Failure::data("shape", e))?.to_owned();
            let masks: Vec<f64> = gt_text.iter().flat_map(|m| m.iter().map(|&x| x as u8 as f64)).collect();
            let gt_rows = Array2::from_shape_vec((gt_text.len(), flat), masks).map_err(|e| Failure::data("shape", e))?;
            let targets = gt_assignment_from_masks(logits.view(), gt_rows.view(), &cfg.match_cost)?;
            c.text = text_matching_loss(&sel.scores, &targets)?;
        }
        _ => notes.push("text loss needs prompts, attention weights and gt text masks".into()),
    }

    let total = total_loss(&c, &cfg.loss_weights);
    let doc = json!({
        "components": c,
        "weights": cfg.loss_weights,
        "total": total,
        "notes": notes,
    });
    for (k, v) in [
        ("photometric", c.photometric),
        ("perceptual", c.perceptual),
        ("mask", c.mask),
        ("continuity", c.continuity),
        ("text", c.text),
        ("total", total),
    ] {
        println!("{k:<12} {v:.6}");
    }
    if let Some(p) = out {
        write_json(p, &doc)?;
    }
    Ok(())
}

pub fn export(bundle: &Path, ply: &Path) -> Result<()> {
    let b = load(bundle)?;
    export_ply(&b.field()?, ply)?;
    Ok(())
}

pub fn selftest(seed: u64) -> Result<()> {
    let checks = selftest::run_all(seed);
    for c in &checks {
        println!("{}", c.line());
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::data("selftest_failed", failed.join(", ")))
    }
}
