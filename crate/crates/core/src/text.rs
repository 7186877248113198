//! Text-referred query selection: a stack of single-head cross-attention
//! layers (text rows attend over query states), dot-product scoring against
//! every query, and the cross-entropy matching loss.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use thiserror::Error;

use crate::lifting::argmax;
use crate::losses::{hungarian, mask_pair_cost, LossError, MatchCost};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TextError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("ground-truth row {0} is not one-hot")]
    NotOneHot(usize),
    #[error("{gt} ground-truth masks but only {queries} queries")]
    TooManyTargets { gt: usize, queries: usize },
    #[error("non-finite attention weights")]
    NonFinite,
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    /// `(d_text, d_k)`
    pub w_q: Array2<f64>,
    /// `(d, d_k)`
    pub w_k: Array2<f64>,
    /// `(d, d_text)`
    pub w_v: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionStack {
    pub layers: Vec<AttentionLayer>,
}

impl CrossAttentionStack {
    pub fn new(layers: Vec<AttentionLayer>) -> Result<Self, TextError> {
        if layers.is_empty() {
            return Err(TextError::Dimension("need at least one attention layer".into()));
        }
        let first = &layers[0];
        let (dt, dk) = first.w_q.dim();
        let d = first.w_k.nrows();
        for (l, layer) in layers.iter().enumerate() {
            if layer.w_q.dim() != (dt, dk) || layer.w_k.dim() != (d, dk) || layer.w_v.dim() != (d, dt) {
                return Err(TextError::Dimension(format!("layer {l} shapes disagree with layer 0")));
            }
            let finite = layer
                .w_q
                .iter()
                .chain(layer.w_k.iter())
                .chain(layer.w_v.iter())
                .all(|x| x.is_finite());
            if !finite {
                return Err(TextError::NonFinite);
            }
        }
        Ok(Self { layers })
    }

    /// Stack from `(L, d_text, d_k)`, `(L, d, d_k)` and `(L, d, d_text)` tensors.
    pub fn from_tensors(w_q: &Array3<f64>, w_k: &Array3<f64>, w_v: &Array3<f64>) -> Result<Self, TextError> {
        let l = w_q.shape()[0];
        if w_k.shape()[0] != l || w_v.shape()[0] != l {
            return Err(TextError::Dimension("layer counts differ".into()));
        }
        Self::new(
            (0..l)
                .map(|i| AttentionLayer {
                    w_q: w_q.index_axis(Axis(0), i).to_owned(),
                    w_k: w_k.index_axis(Axis(0), i).to_owned(),
                    w_v: w_v.index_axis(Axis(0), i).to_owned(),
                })
                .collect(),
        )
    }

    /// All-zero stack: uniform attention over zero values, i.e. identity.
    pub fn zeros(layers: usize, d_text: usize, d: usize, d_k: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|_| AttentionLayer {
                    w_q: Array2::zeros((d_text, d_k)),
                    w_k: Array2::zeros((d, d_k)),
                    w_v: Array2::zeros((d, d_text)),
                })
                .collect(),
        }
    }

    pub fn d_text(&self) -> usize {
        self.layers[0].w_q.nrows()
    }

    pub fn d_query(&self) -> usize {
        self.layers[0].w_k.nrows()
    }

    pub fn d_key(&self) -> usize {
        self.layers[0].w_q.ncols()
    }
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - m).exp());
        let total = row.sum();
        row /= total;
    }
    logits
}

/// Refines text features `(N_t, d_text)` by attending over query states
/// `(N_q, d)` through every layer, with a residual connection.
pub fn attend(text: ArrayView2<'_, f64>, queries: ArrayView2<'_, f64>, stack: &CrossAttentionStack) -> Result<Array2<f64>, TextError> {
    if text.ncols() != stack.d_text() || queries.ncols() != stack.d_query() {
        return Err(TextError::Dimension(format!(
            "text {:?} / queries {:?} vs stack (d_text {}, d {})",
            text.dim(),
            queries.dim(),
            stack.d_text(),
            stack.d_query()
        )));
    }
    if queries.nrows() == 0 {
        return Err(TextError::Dimension("no queries to attend over".into()));
    }
    let scale = 1.0 / (stack.d_key() as f64).sqrt();
    let mut x = text.to_owned();
    for layer in &stack.layers {
        let q = x.dot(&layer.w_q);
        let k = queries.dot(&layer.w_k);
        let v = queries.dot(&layer.w_v);
        let attn = softmax_rows(q.dot(&k.t()) * scale);
        x = x + attn.dot(&v);
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySelection {
    /// Best query index per prompt.
    pub text_ids: Vec<usize>,
    /// `(N_t, N_q)` dot-product scores.
    pub scores: Array2<f64>,
}

/// Scores every query against each attended prompt and picks the argmax
/// (lowest index on ties).
pub fn select_query(text: ArrayView2<'_, f64>, queries: ArrayView2<'_, f64>, stack: &CrossAttentionStack) -> Result<QuerySelection, TextError> {
    if stack.d_text() != stack.d_query() {
        return Err(TextError::Dimension(format!(
            "scoring needs d_text == d, got {} and {}",
            stack.d_text(),
            stack.d_query()
        )));
    }
    let refined = attend(text, queries, stack)?;
    let scores = refined.dot(&queries.t());
    let text_ids = scores
        .outer_iter()
        .map(|row| argmax(row.as_slice().expect("row-major")))
        .collect();
    Ok(QuerySelection { text_ids, scores })
}

/// Mean over prompts of the cross-entropy between `softmax(scores[t])` and
/// the one-hot row `gt[t]`.
pub fn text_matching_loss(scores: &Array2<f64>, gt: &Array2<f64>) -> Result<f64, TextError> {
    if scores.dim() != gt.dim() {
        return Err(TextError::Dimension(format!("scores {:?} vs targets {:?}", scores.dim(), gt.dim())));
    }
    if scores.nrows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (t, (s, g)) in scores.outer_iter().zip(gt.outer_iter()).enumerate() {
        let ones = g.iter().filter(|&&x| x == 1.0).count();
        let zeros = g.iter().filter(|&&x| x == 0.0).count();
        if ones != 1 || ones + zeros != g.len() {
            return Err(TextError::NotOneHot(t));
        }
        let target = g.iter().position(|&x| x == 1.0).unwrap();
        let m = s.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - s[target];
    }
    Ok(total / scores.nrows() as f64)
}

/// One-hot targets `(N_gt, N_q)`: each ground-truth text mask is assigned
/// the query whose mask matches it best under Hungarian matching.
/// `pred_logits` is `(N_q, P)` mask logits, `gt_masks` is `(N_gt, P)` binary.
pub fn gt_assignment_from_masks(pred_logits: ArrayView2<'_, f64>, gt_masks: ArrayView2<'_, f64>, weights: &MatchCost) -> Result<Array2<f64>, TextError> {
    let (nq, p) = pred_logits.dim();
    let (ng, pg) = gt_masks.dim();
    if p != pg {
        return Err(TextError::Dimension(format!("{p} prediction pixels vs {pg} target pixels")));
    }
    if ng > nq {
        return Err(TextError::TooManyTargets { gt: ng, queries: nq });
    }
    let mut cost = Array2::zeros((nq, ng));
    for (n, logits) in pred_logits.outer_iter().enumerate() {
        for (k, g) in gt_masks.outer_iter().enumerate() {
            cost[[n, k]] = mask_pair_cost(logits, g, weights.w_bce, weights.w_dice);
        }
    }
    let mut onehot = Array2::zeros((ng, nq));
    for (n, k) in hungarian(&cost)? {
        onehot[[k, n]] = 1.0;
    }
    Ok(onehot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
        a.outer_iter().map(|r| r.to_vec()).collect()
    }

    fn random_stack(rng: &mut ChaCha8Rng, layers: usize, dt: usize, d: usize, dk: usize) -> CrossAttentionStack {
        let mut m = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-0.8..0.8));
        CrossAttentionStack::new(
            (0..layers)
                .map(|_| AttentionLayer { w_q: m(dt, dk), w_k: m(d, dk), w_v: m(d, dt) })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_key_query_weights_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut stack = random_stack(&mut rng, 1, 3, 3, 2);
        stack.layers[0].w_q.fill(0.0);
        stack.layers[0].w_k.fill(0.0);
        let text = arr2(&[[0.1, 0.2, 0.3]]);
        let queries = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let out = attend(text.view(), queries.view(), &stack).unwrap();
        let mean_v = queries.dot(&stack.layers[0].w_v).mean_axis(Axis(0)).unwrap();
        let expect = &text.row(0) + &mean_v;
        assert!(out.row(0).iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn single_query_gets_full_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = random_stack(&mut rng, 1, 2, 2, 3);
        let text = arr2(&[[0.5, -0.5], [1.0, 2.0]]);
        let queries = arr2(&[[0.3, 0.7]]);
        let out = attend(text.view(), queries.view(), &stack).unwrap();
        let v = queries.dot(&stack.layers[0].w_v);
        for t in 0..2 {
            for e in 0..2 {
                assert!((out[[t, e]] - (text[[t, e]] + v[[0, e]])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stack = random_stack(&mut rng, 2, 3, 3, 4);
        let text = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        let queries = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let out = attend(text.view(), queries.view(), &stack).unwrap();
        let layers: Vec<_> = stack.layers.iter().map(|l| (to_rows(&l.w_q), to_rows(&l.w_k), to_rows(&l.w_v))).collect();
        let oracle = reference::attend_scalar(&to_rows(&text), &to_rows(&queries), &layers);
        for t in 0..2 {
            for e in 0..3 {
                assert!((out[[t, e]] - oracle[t][e]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn orthonormal_queries_select_matching_prompt() {
        let queries = Array2::<f64>::eye(5);
        let stack = CrossAttentionStack::zeros(6, 5, 5, 4);
        let text = queries.select(Axis(0), &[3]);
        let sel = select_query(text.view(), queries.view(), &stack).unwrap();
        assert_eq!(sel.text_ids, vec![3]);
        assert!((sel.scores[[0, 3]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_prompt_ties_to_first_query() {
        let queries = Array2::from_shape_fn((3, 4), |(n, e)| if e == n { 1.0 } else { 0.0 });
        let stack = CrossAttentionStack::zeros(1, 4, 4, 2);
        let text = arr2(&[[0.0, 0.0, 0.0, 2.0]]);
        let sel = select_query(text.view(), queries.view(), &stack).unwrap();
        assert!(sel.scores.iter().all(|&s| s == 0.0));
        assert_eq!(sel.text_ids, vec![0]);
    }

    #[test]
    fn selection_matches_exhaustive_scan_and_ignores_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let stack = random_stack(&mut rng, 3, 4, 4, 3);
            let text = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
            let queries = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
            let sel = select_query(text.view(), queries.view(), &stack).unwrap();
            let layers: Vec<_> = stack.layers.iter().map(|l| (to_rows(&l.w_q), to_rows(&l.w_k), to_rows(&l.w_v))).collect();
            let refined = reference::attend_scalar(&to_rows(&text), &to_rows(&queries), &layers);
            for (t, row) in refined.iter().enumerate() {
                let scores: Vec<f64> = queries.outer_iter().map(|q| q.iter().zip(row).map(|(a, b)| a * b).sum()).collect();
                let mut best = 0;
                for n in 1..scores.len() {
                    if scores[n] > scores[best] {
                        best = n;
                    }
                }
                assert_eq!(sel.text_ids[t], best);
                let scaled: Vec<f64> = sel.scores.row(t).iter().map(|s| s * 7.5).collect();
                assert_eq!(argmax(&scaled), best);
            }
        }
    }

    #[test]
    fn uniform_scores_give_log_nq() {
        let scores = Array2::from_elem((2, 100), 0.25);
        let mut gt = Array2::zeros((2, 100));
        gt[[0, 17]] = 1.0;
        gt[[1, 99]] = 1.0;
        let loss = text_matching_loss(&scores, &gt).unwrap();
        assert!((loss - 100f64.ln()).abs() < 1e-12);
        assert!((loss - 4.6052).abs() < 1e-4);
    }

    #[test]
    fn saturated_score_gives_near_zero_loss() {
        let mut scores = Array2::zeros((1, 10));
        scores[[0, 4]] = 30.0;
        let mut gt = Array2::zeros((1, 10));
        gt[[0, 4]] = 1.0;
        let loss = text_matching_loss(&scores, &gt).unwrap();
        assert!((0.0..1e-9).contains(&loss));
    }

    #[test]
    fn random_loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scores: Array2<f64> = Array2::from_shape_fn((2, 4), |_| rng.random_range(-2.0..2.0));
        let gt = arr2(&[[0.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0]]);
        let mut direct = 0.0;
        for (t, target) in [(0usize, 2usize), (1, 0)] {
            let denom: f64 = scores.row(t).iter().map(|s| s.exp()).sum();
            direct -= (scores[[t, target]].exp() / denom).ln();
        }
        direct /= 2.0;
        assert!((text_matching_loss(&scores, &gt).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn non_one_hot_targets_are_rejected() {
        let scores = Array2::zeros((1, 3));
        assert_eq!(text_matching_loss(&scores, &arr2(&[[0.5, 0.5, 0.0]])), Err(TextError::NotOneHot(0)));
        assert_eq!(text_matching_loss(&scores, &arr2(&[[1.0, 1.0, 0.0]])), Err(TextError::NotOneHot(0)));
    }

    fn logits_of(mask: &Array2<f64>) -> Array2<f64> {
        mask.mapv(|m| if m > 0.5 { 30.0 } else { -30.0 })
    }

    #[test]
    fn permuted_identical_masks_recover_permutation() {
        let gt = arr2(&[[1.0, 1.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 1.0, 1.0]]);
        let perm = [2usize, 0, 1];
        let pred = logits_of(&gt.select(Axis(0), &perm));
        let onehot = gt_assignment_from_masks(pred.view(), gt.view(), &MatchCost::default()).unwrap();
        for (n, &k) in perm.iter().enumerate() {
            assert_eq!(onehot[[k, n]], 1.0);
        }
        assert_eq!(onehot.sum(), 3.0);
    }

    #[test]
    fn overlapping_prediction_is_selected() {
        let gt = arr2(&[[0.0, 1.0, 1.0, 0.0]]);
        let pred = logits_of(&arr2(&[[0.0; 4], [0.0, 1.0, 1.0, 0.0], [0.0; 4]]));
        let onehot = gt_assignment_from_masks(pred.view(), gt.view(), &MatchCost::default()).unwrap();
        assert_eq!(onehot.row(0).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn random_masks_match_permutation_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = MatchCost::default();
        for _ in 0..25 {
            let gt = Array2::from_shape_fn((3, 10), |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            let pred = Array2::from_shape_fn((3, 10), |_| if rng.random_bool(0.5) { 30.0 } else { -30.0 });
            let onehot = gt_assignment_from_masks(pred.view(), gt.view(), &w).unwrap();
            let mut cost = Array2::zeros((3, 3));
            for n in 0..3 {
                for k in 0..3 {
                    cost[[n, k]] = mask_pair_cost(pred.row(n), gt.row(k), w.w_bce, w.w_dice);
                }
            }
            let (best, _) = reference::assignment_brute_force(&cost);
            let mut chosen = 0.0;
            for k in 0..3 {
                let n = onehot.row(k).iter().position(|&x| x == 1.0).unwrap();
                chosen += cost[[n, k]];
            }
            assert!((chosen - best).abs() < 1e-9);
        }
    }

    #[test]
    fn more_targets_than_queries_is_an_error() {
        let pred = Array2::zeros((1, 4));
        let gt = Array2::zeros((2, 4));
        assert_eq!(
            gt_assignment_from_masks(pred.view(), gt.view(), &MatchCost::default()),
            Err(TextError::TooManyTargets { gt: 2, queries: 1 })
        );
    }
}
