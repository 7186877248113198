//! Slow, direct implementations used as independent oracles by the test
//! suites and the `selftest` command. None of these share code paths with
//! the production implementations they check: no tiling, no sorting
//! shortcuts, no assignment solver, just nested loops over definitions.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};

use crate::raster::{RasterConfig, RenderOutput};
use crate::scene::{Camera, GaussianPrimitive, BACKGROUND};

/// Per-pixel renderer that evaluates every Gaussian at every pixel.
pub fn render_brute_force<'a>(
    prims: &[GaussianPrimitive],
    attr: &dyn Fn(usize) -> &'a [f64],
    k: usize,
    cam: &Camera,
    size: (usize, usize),
    cfg: &RasterConfig,
) -> RenderOutput {
    let (height, width) = size;
    let k_ = &cam.intrinsics;
    let (fx, fy) = (k_.fx * width as f64, k_.fy * height as f64);
    let rot = cam.rotation();
    let pos = cam.position();

    // (depth, index, u, v, inverse covariance entries, opacity)
    let mut projected = Vec::new();
    for (idx, g) in prims.iter().enumerate() {
        let d = nalgebra::Vector3::new(g.mean[0] - pos.x, g.mean[1] - pos.y, g.mean[2] - pos.z);
        let x = rot[(0, 0)] * d.x + rot[(1, 0)] * d.y + rot[(2, 0)] * d.z;
        let y = rot[(0, 1)] * d.x + rot[(1, 1)] * d.y + rot[(2, 1)] * d.z;
        let z = rot[(0, 2)] * d.x + rot[(1, 2)] * d.y + rot[(2, 2)] * d.z;
        if z <= cfg.near {
            continue;
        }
        let u = fx * x / z + k_.cx * width as f64;
        let v = fy * y / z + k_.cy * height as f64;
        // World covariance, then the camera-frame Jacobian rows.
        let sigma = g.covariance();
        let mut cov_cam = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                let mut s = 0.0;
                for m in 0..3 {
                    for n in 0..3 {
                        s += rot[(m, a)] * sigma[(m, n)] * rot[(n, b)];
                    }
                }
                cov_cam[a][b] = s;
            }
        }
        let j = [[fx / z, 0.0, -fx * x / (z * z)], [0.0, fy / z, -fy * y / (z * z)]];
        let mut c2 = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut s = 0.0;
                for m in 0..3 {
                    for n in 0..3 {
                        s += j[a][m] * cov_cam[m][n] * j[b][n];
                    }
                }
                c2[a][b] = s;
            }
        }
        let off = 0.5 * (c2[0][1] + c2[1][0]);
        let (a, c) = (c2[0][0] + cfg.dilation, c2[1][1] + cfg.dilation);
        let det = a * c - off * off;
        projected.push((z, idx, u, v, c / det, -off / det, a / det, g.opacity));
    }

    let mut out = RenderOutput::zeros(k, height, width);
    for r in 0..height {
        for col in 0..width {
            let (px, py) = (col as f64 + 0.5, r as f64 + 0.5);
            let mut hits: Vec<(f64, usize, f64)> = Vec::new();
            for &(z, idx, u, v, ia, ib, ic, op) in &projected {
                let (dx, dy) = (px - u, py - v);
                let power = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy;
                if power > cfg.cull_sigma * cfg.cull_sigma {
                    continue;
                }
                let a = (op * (-0.5 * power).exp()).min(cfg.opacity_cap);
                if a > 0.0 {
                    hits.push((z, idx, a));
                }
            }
            hits.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap().then(p.1.cmp(&q.1)));
            let mut t = 1.0;
            let mut depth = 0.0;
            for (z, idx, a) in hits {
                let w = a * t;
                for (ch, val) in attr(idx).iter().enumerate().take(k) {
                    out.attr[[ch, r, col]] += val * w;
                }
                depth += z * w;
                t *= 1.0 - a;
                if t < cfg.min_transmittance {
                    break;
                }
            }
            out.alpha[[r, col]] = 1.0 - t;
            out.depth[[r, col]] = depth / (1.0 - t).max(1e-8);
        }
    }
    out
}

/// Scalar-loop version of query filtering, probability maps and label
/// derivation. Inputs are plain nested vectors:
/// `mask_logits[n][v][i][j]`, `class_logits[n][c]`.
pub struct LabelOracle {
    pub kept: Vec<usize>,
    /// `z[v][n'][c][i][j]`
    pub z: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    pub sem: Vec<Vec<Vec<i32>>>,
    pub ins: Vec<Vec<Vec<i32>>>,
}

pub fn lift_labels_scalar(
    mask_logits: &[Vec<Vec<Vec<f64>>>],
    class_logits: &[Vec<f64>],
    tau_c: f64,
    tau: f64,
) -> LabelOracle {
    let cap = |x: f64| x.clamp(-30.0, 30.0);
    let nc = class_logits.first().map_or(0, |r| r.len());
    let mut kept = Vec::new();
    let mut conf = Vec::new();
    for (n, row) in class_logits.iter().enumerate() {
        let m = row.iter().cloned().map(cap).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&x| (cap(x) - m).exp()).sum();
        let p: Vec<f64> = row.iter().map(|&x| (cap(x) - m).exp() / denom).collect();
        let mut best = 0;
        for c in 1..nc {
            if p[c] > p[best] {
                best = c;
            }
        }
        if p[best] > tau_c && best != nc - 1 {
            kept.push(n);
            conf.push(p);
        }
    }
    let views = mask_logits.first().map_or(0, |m| m.len());
    let h = mask_logits.first().and_then(|m| m.first()).map_or(0, |m| m.len());
    let w = mask_logits
        .first()
        .and_then(|m| m.first())
        .and_then(|m| m.first())
        .map_or(0, |m| m.len());
    let mut z = vec![vec![vec![vec![vec![0.0; w]; h]; nc]; kept.len()]; views];
    for v in 0..views {
        for (np, &n) in kept.iter().enumerate() {
            for c in 0..nc {
                for i in 0..h {
                    for j in 0..w {
                        let s = 1.0 / (1.0 + (-cap(mask_logits[n][v][i][j])).exp());
                        z[v][np][c][i][j] = conf[np][c] * s;
                    }
                }
            }
        }
    }
    let (sem, ins) = labels_from_z_scalar(&z, &kept, nc, views, h, w, tau);
    LabelOracle { kept, z, sem, ins }
}

/// Triple-loop argmax over queries then foreground classes.
#[allow(clippy::type_complexity)]
pub fn labels_from_z_scalar(
    z: &[Vec<Vec<Vec<Vec<f64>>>>],
    kept: &[usize],
    nc: usize,
    views: usize,
    h: usize,
    w: usize,
    tau: f64,
) -> (Vec<Vec<Vec<i32>>>, Vec<Vec<Vec<i32>>>) {
    let mut sem = vec![vec![vec![BACKGROUND; w]; h]; views];
    let mut ins = vec![vec![vec![BACKGROUND; w]; h]; views];
    if kept.is_empty() {
        return (sem, ins);
    }
    for v in 0..views {
        for i in 0..h {
            for j in 0..w {
                let mut best_c = 0;
                let mut best_p = f64::NEG_INFINITY;
                let mut best_q = 0;
                for c in 0..nc - 1 {
                    let mut qp = f64::NEG_INFINITY;
                    let mut qi = 0;
                    for n in 0..kept.len() {
                        if z[v][n][c][i][j] > qp {
                            qp = z[v][n][c][i][j];
                            qi = n;
                        }
                    }
                    if qp > best_p {
                        best_p = qp;
                        best_c = c;
                        best_q = qi;
                    }
                }
                if best_p >= tau {
                    sem[v][i][j] = best_c as i32;
                    ins[v][i][j] = kept[best_q] as i32;
                }
            }
        }
    }
    (sem, ins)
}

/// Gaussian-index sets by direct membership scan of flattened labels.
pub fn members_scalar(labels: &Array3<i32>, id: i32) -> BTreeSet<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == id)
        .map(|(g, _)| g)
        .collect()
}

/// Minimum assignment cost by enumerating every injective map from the
/// smaller side into the larger side.
pub fn assignment_brute_force(cost: &Array2<f64>) -> (f64, Vec<(usize, usize)>) {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return (0.0, Vec::new());
    }
    let transpose = n > m;
    let (rows, cols) = if transpose { (m, n) } else { (n, m) };
    let at = |r: usize, c: usize| if transpose { cost[[c, r]] } else { cost[[r, c]] };
    let mut best = (f64::INFINITY, Vec::new());
    let mut used = vec![false; cols];
    let mut cur = Vec::with_capacity(rows);
    fn rec(
        r: usize,
        rows: usize,
        cols: usize,
        acc: f64,
        used: &mut [bool],
        cur: &mut Vec<usize>,
        at: &dyn Fn(usize, usize) -> f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if r == rows {
            if acc < best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                rec(r + 1, rows, cols, acc + at(r, c), used, cur, at, best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut inner = (f64::INFINITY, Vec::new());
    rec(0, rows, cols, 0.0, &mut used, &mut cur, &at, &mut inner);
    best.0 = inner.0;
    best.1 = inner
        .1
        .iter()
        .enumerate()
        .map(|(r, &c)| if transpose { (c, r) } else { (r, c) })
        .collect();
    best.1.sort_unstable();
    best
}

/// Single-head cross-attention written as explicit loops.
/// `text[t][e]`, `queries[n][e]`, weights `wq[e][k]`, `wk[e][k]`, `wv[e][e']`.
pub fn attend_scalar(
    text: &[Vec<f64>],
    queries: &[Vec<f64>],
    layers: &[(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)],
) -> Vec<Vec<f64>> {
    let mut x: Vec<Vec<f64>> = text.to_vec();
    for (wq, wk, wv) in layers {
        let dk = wq[0].len();
        let mut next = x.clone();
        for t in 0..x.len() {
            let qv: Vec<f64> = (0..dk)
                .map(|k| (0..x[t].len()).map(|e| x[t][e] * wq[e][k]).sum())
                .collect();
            let logits: Vec<f64> = queries
                .iter()
                .map(|q| {
                    let kv: Vec<f64> = (0..dk).map(|k| (0..q.len()).map(|e| q[e] * wk[e][k]).sum()).collect();
                    qv.iter().zip(&kv).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (n, q) in queries.iter().enumerate() {
                let a = (logits[n] - m).exp() / denom;
                for o in 0..next[t].len() {
                    let val: f64 = (0..q.len()).map(|e| q[e] * wv[e][o]).sum();
                    next[t][o] += a * val;
                }
            }
        }
        x = next;
    }
    x
}

/// Plain windowed SSIM on single-channel images, 11x11 Gaussian window
/// with sigma 1.5, evaluated at every valid window position.
pub fn ssim_scalar(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (h, w) = a.dim();
    let size = 11;
    let mut win = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..=h - size {
        for c in 0..=w - size {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let g = win[i][j] / total;
                    ma += g * a[[r + i, c + j]];
                    mb += g * b[[r + i, c + j]];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let g = win[i][j] / total;
                    let (da, db) = (a[[r + i, c + j]] - ma, b[[r + i, c + j]] - mb);
                    va += g * da * da;
                    vb += g * db * db;
                    cov += g * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// Average precision at one IoU threshold by walking the ranked list and
/// evaluating the interpolated precision at 101 recall points.
/// `ious[p][g]` for predictions already sorted by descending score.
pub fn ap_scalar(ious: &[Vec<f64>], num_gt: usize, threshold: f64) -> f64 {
    if num_gt == 0 {
        return f64::NAN;
    }
    let mut taken = vec![false; num_gt];
    let mut tp = Vec::new();
    for row in ious {
        let mut best: Option<usize> = None;
        let mut best_iou = threshold;
        for g in 0..num_gt {
            if !taken[g] && row[g] >= best_iou && (best.is_none() || row[g] > best_iou) {
                best = Some(g);
                best_iou = row[g];
            }
        }
        match best {
            Some(g) => {
                taken[g] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let (mut t, mut f) = (0.0, 0.0);
    for &hit in &tp {
        if hit {
            t += 1.0;
        } else {
            f += 1.0;
        }
        prec.push(t / (t + f));
        rec.push(t / num_gt as f64);
    }
    let mut total = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        // Interpolated precision: best precision at any recall >= r.
        let p = rec
            .iter()
            .zip(&prec)
            .filter(|(&rc, _)| rc >= r)
            .map(|(_, &p)| p)
            .fold(0.0, f64::max);
        total += p;
    }
    total / 101.0
}
