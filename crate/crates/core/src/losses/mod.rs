//! Training objective terms: photometric L1, Hungarian-matched mask loss,
//! mask-guided depth continuity, the weighted total, and a central
//! difference gradient checker.

mod gradcheck;
mod hungarian;

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{central_difference, grad_check};
pub use hungarian::{assignment_cost, hungarian};

use crate::lifting::{cap_logit, sigmoid, softmax};
use crate::scene::{LabelMaps, SemanticPredictions, BACKGROUND};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{gt} ground-truth masks exceed {queries} queries")]
    TooManyTargets { gt: usize, queries: usize },
    #[error("class id {class} outside the foreground taxonomy of {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub photometric: f64,
    pub perceptual: f64,
    pub mask: f64,
    pub continuity: f64,
    pub text: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photometric: 1.0,
            perceptual: 0.5,
            mask: 0.05,
            continuity: 0.05,
            text: 1.0,
        }
    }
}

/// Weights of the class, BCE and Dice terms in the matching cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchCost {
    pub w_class: f64,
    pub w_bce: f64,
    pub w_dice: f64,
}

impl Default for MatchCost {
    fn default() -> Self {
        Self {
            w_class: 2.0,
            w_bce: 5.0,
            w_dice: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub photometric: f64,
    pub perceptual: f64,
    pub mask: f64,
    pub continuity: f64,
    pub text: f64,
}

/// Perceptual image distance supplied by the caller (e.g. a learned metric).
pub trait PerceptualDistance {
    fn distance(&self, img: &Array3<f64>, gt: &Array3<f64>) -> f64;
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.photometric * c.photometric
        + w.perceptual * c.perceptual
        + w.mask * c.mask
        + w.continuity * c.continuity
        + w.text * c.text
}

/// Mean absolute difference of two `(K, H, W)` images.
pub fn photometric_l1(img: &Array3<f64>, gt: &Array3<f64>) -> Result<f64, LossError> {
    if img.dim() != gt.dim() {
        return Err(LossError::Shape(format!("{:?} vs {:?}", img.dim(), gt.dim())));
    }
    if img.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = img.iter().zip(gt.iter()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / img.len() as f64)
}

/// Gradient of [`photometric_l1`] with respect to `img` (zero at kinks).
pub fn photometric_l1_grad(img: &Array3<f64>, gt: &Array3<f64>) -> Result<Array3<f64>, LossError> {
    if img.dim() != gt.dim() {
        return Err(LossError::Shape(format!("{:?} vs {:?}", img.dim(), gt.dim())));
    }
    let n = img.len().max(1) as f64;
    let mut g = img - gt;
    g.mapv_inplace(|d| {
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    });
    Ok(g)
}

/// Same-instance 4-neighbours of every labeled pixel, per view.
fn neighbourhoods(labels: &LabelMaps) -> Vec<((usize, usize, usize), Vec<(usize, usize, usize)>)> {
    let (views, h, w) = labels.ins.dim();
    let mut out = Vec::new();
    for v in 0..views {
        for i in 0..h {
            for j in 0..w {
                let id = labels.ins[[v, i, j]];
                if id == BACKGROUND {
                    continue;
                }
                let mut nb = Vec::with_capacity(4);
                let candidates = [
                    (i.wrapping_sub(1), j),
                    (i + 1, j),
                    (i, j.wrapping_sub(1)),
                    (i, j + 1),
                ];
                for (a, b) in candidates {
                    if a < h && b < w && labels.ins[[v, a, b]] == id {
                        nb.push((v, a, b));
                    }
                }
                out.push(((v, i, j), nb));
            }
        }
    }
    out
}

/// Sum over instance masks and their pixels of the squared difference
/// between a pixel's depth and the mean depth of its same-instance
/// 4-neighbours. Pixels without such neighbours contribute nothing.
pub fn continuity_loss(depth: &Array3<f64>, labels: &LabelMaps) -> Result<f64, LossError> {
    if depth.dim() != labels.ins.dim() {
        return Err(LossError::Shape(format!(
            "depth {:?} vs labels {:?}",
            depth.dim(),
            labels.ins.dim()
        )));
    }
    let mut total = 0.0;
    for (p, nb) in neighbourhoods(labels) {
        if nb.is_empty() {
            continue;
        }
        let mean = nb.iter().map(|&q| depth[q]).sum::<f64>() / nb.len() as f64;
        let r = depth[p] - mean;
        total += r * r;
    }
    Ok(total)
}

/// Analytic gradient of [`continuity_loss`] with respect to `depth`.
pub fn continuity_loss_grad(depth: &Array3<f64>, labels: &LabelMaps) -> Result<Array3<f64>, LossError> {
    if depth.dim() != labels.ins.dim() {
        return Err(LossError::Shape(format!(
            "depth {:?} vs labels {:?}",
            depth.dim(),
            labels.ins.dim()
        )));
    }
    let mut grad = Array3::zeros(depth.dim());
    for (p, nb) in neighbourhoods(labels) {
        if nb.is_empty() {
            continue;
        }
        let k = nb.len() as f64;
        let r = depth[p] - nb.iter().map(|&q| depth[q]).sum::<f64>() / k;
        grad[p] += 2.0 * r;
        for q in nb {
            grad[q] -= 2.0 * r / k;
        }
    }
    Ok(grad)
}

/// Numerically stable binary cross-entropy of a logit against a target.
#[inline]
fn bce_with_logit(x: f64, target: f64) -> f64 {
    let x = cap_logit(x);
    x.max(0.0) - x * target + (-x.abs()).exp().ln_1p()
}

/// Dice coefficient with +1 smoothing.
fn dice(prob: ArrayView1<'_, f64>, gt: ArrayView1<'_, f64>) -> f64 {
    let inter: f64 = prob.iter().zip(gt.iter()).map(|(p, g)| p * g).sum();
    (2.0 * inter + 1.0) / (prob.sum() + gt.sum() + 1.0)
}

fn mean_bce(logits: ArrayView1<'_, f64>, gt: ArrayView1<'_, f64>) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    logits
        .iter()
        .zip(gt.iter())
        .map(|(&x, &g)| bce_with_logit(x, g))
        .sum::<f64>()
        / logits.len() as f64
}

/// Mask part of the matching cost: `w_bce * meanBCE + w_dice * (1 - Dice)`
/// for flattened mask logits against a binary target.
pub fn mask_pair_cost(logits: ArrayView1<'_, f64>, gt: ArrayView1<'_, f64>, w_bce: f64, w_dice: f64) -> f64 {
    let prob: Array1<f64> = logits.mapv(sigmoid);
    w_bce * mean_bce(logits, gt) + w_dice * (1.0 - dice(prob.view(), gt))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskLoss {
    pub class_ce: f64,
    pub bce: f64,
    pub dice: f64,
    pub no_object_ce: f64,
    /// Matched `(query, gt)` pairs.
    pub assignment: Vec<(usize, usize)>,
}

impl MaskLoss {
    pub fn total(&self) -> f64 {
        self.class_ce + self.bce + self.dice + self.no_object_ce
    }
}

/// Set-prediction mask loss: Hungarian matching of queries to ground-truth
/// masks, then class cross-entropy, BCE and Dice over matched pairs plus
/// no-object cross-entropy over the unmatched queries, each mean-reduced.
pub fn mask_loss(preds: &SemanticPredictions, gt_masks: &[Array3<bool>], gt_classes: &[usize], cost: &MatchCost) -> Result<MaskLoss, LossError> {
    let nq = preds.num_queries();
    let nc = preds.num_classes();
    if gt_masks.len() != gt_classes.len() {
        return Err(LossError::Shape(format!(
            "{} masks vs {} classes",
            gt_masks.len(),
            gt_classes.len()
        )));
    }
    if gt_masks.len() > nq {
        return Err(LossError::TooManyTargets {
            gt: gt_masks.len(),
            queries: nq,
        });
    }
    if let Some(&class) = gt_classes.iter().find(|&&c| c + 1 >= nc) {
        return Err(LossError::ClassOutOfRange {
            class,
            classes: nc.saturating_sub(1),
        });
    }
    let shape = preds.mask_logits.shape();
    let pixels = shape[1] * shape[2] * shape[3];
    for m in gt_masks {
        if m.shape() != &shape[1..] {
            return Err(LossError::Shape(format!("gt mask {:?} vs logits {:?}", m.shape(), &shape[1..])));
        }
    }
    if !preds.mask_logits.iter().chain(preds.class_logits.iter()).all(|x| x.is_finite()) {
        return Err(LossError::NonFinite("logits"));
    }
    let logits = preds
        .mask_logits
        .to_shape((nq, pixels))
        .map_err(|e| LossError::Shape(e.to_string()))?
        .to_owned();
    let gts: Vec<Array1<f64>> = gt_masks
        .iter()
        .map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let probs: Vec<Vec<f64>> = preds
        .class_logits
        .outer_iter()
        .map(|r| softmax(r.iter().copied()))
        .collect();

    let mut pair_bce = Array2::zeros((nq, gts.len()));
    let mut pair_dice = Array2::zeros((nq, gts.len()));
    let mut matrix = Array2::zeros((nq, gts.len()));
    for n in 0..nq {
        let row = logits.index_axis(Axis(0), n);
        let prob = row.mapv(sigmoid);
        for (k, g) in gts.iter().enumerate() {
            let b = mean_bce(row, g.view());
            let d = 1.0 - dice(prob.view(), g.view());
            pair_bce[[n, k]] = b;
            pair_dice[[n, k]] = d;
            matrix[[n, k]] = -cost.w_class * probs[n][gt_classes[k]] + cost.w_bce * b + cost.w_dice * d;
        }
    }
    let assignment = hungarian(&matrix)?;

    let no_object = nc - 1;
    let nll = |n: usize, c: usize| -> f64 {
        let row = preds.class_logits.row(n);
        let capped: Vec<f64> = row.iter().map(|&x| cap_logit(x)).collect();
        let m = capped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + capped.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        lse - capped[c]
    };
    let mut matched = vec![false; nq];
    let (mut class_ce, mut bce, mut dice_term) = (0.0, 0.0, 0.0);
    for &(n, k) in &assignment {
        matched[n] = true;
        class_ce += nll(n, gt_classes[k]);
        bce += pair_bce[[n, k]];
        dice_term += pair_dice[[n, k]];
    }
    let pairs = assignment.len().max(1) as f64;
    let unmatched: Vec<usize> = (0..nq).filter(|&n| !matched[n]).collect();
    let no_object_ce = if unmatched.is_empty() {
        0.0
    } else {
        unmatched.iter().map(|&n| nll(n, no_object)).sum::<f64>() / unmatched.len() as f64
    };
    Ok(MaskLoss {
        class_ce: class_ce / pairs,
        bce: bce / pairs,
        dice: dice_term / pairs,
        no_object_ce,
        assignment,
    })
}

/// Ground-truth instance masks and their majority class from label maps.
pub fn instance_targets(labels: &LabelMaps) -> (Vec<i32>, Vec<Array3<bool>>, Vec<usize>) {
    let mut ids: Vec<i32> = labels.ins.iter().copied().filter(|&i| i != BACKGROUND).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut masks = Vec::with_capacity(ids.len());
    let mut classes = Vec::with_capacity(ids.len());
    for &id in &ids {
        let mask = labels.ins.mapv(|i| i == id);
        let mut counts = std::collections::BTreeMap::<i32, usize>::new();
        for (&m, &s) in mask.iter().zip(labels.sem.iter()) {
            if m {
                *counts.entry(s).or_default() += 1;
            }
        }
        let best = counts
            .iter()
            .fold((0i32, 0usize), |acc, (&c, &n)| if n > acc.1 { (c, n) } else { acc });
        masks.push(mask);
        classes.push(best.0.max(0) as usize);
    }
    (ids, masks, classes)
}
