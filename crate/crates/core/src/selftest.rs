//! Randomized comparisons of the production code against the slow oracles
//! in [`crate::reference`]. Used by the `selftest` command and the
//! acceptance suite, which runs them at full size.

use std::time::{Duration, Instant};

use nalgebra::Matrix4;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::{from_synthetic, read_bundle, write_bundle};
use crate::export::{parse_ply, ply_bytes};
use crate::lifting::{derive_label_maps, lift_to_3d, probability_maps};
use crate::losses::{
    continuity_loss, continuity_loss_grad, grad_check, hungarian, assignment_cost, photometric_l1, photometric_l1_grad,
};
use crate::metrics::ssim;
use crate::pairing::overlap_iou;
use crate::raster::{render, RasterConfig};
use crate::reference;
use crate::scene::{Camera, ClassTaxonomy, Dims, GaussianField, GaussianPrimitive, Intrinsics, LabelMaps, SemanticPredictions, BACKGROUND};
use crate::synthetic::{half_overlap_frames, wall_scene};
use crate::text::{attend, AttentionLayer, CrossAttentionStack};

/// Outcome of one oracle comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error, where meaningful.
    pub worst: f64,
    pub detail: String,
    pub elapsed: Duration,
}

impl Check {
    fn new(name: &'static str, passed: bool, worst: f64, detail: String, start: Instant) -> Self {
        Self {
            name,
            passed,
            worst,
            detail,
            elapsed: start.elapsed(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<22} {} ({:.2?})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed
        )
    }
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn unit_quaternion(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 0.1 {
            return q.map(|c| c / n);
        }
    }
}

/// Random anisotropic Gaussians in front of a camera at the origin looking
/// down +z with unit normalized focal length.
pub fn random_field(rng: &mut ChaCha8Rng, n: usize, k: usize) -> GaussianField {
    let prims = (0..n)
        .map(|_| GaussianPrimitive {
            mean: [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(0.5..3.0)],
            opacity: rng.random_range(0.05..1.0),
            rotation: unit_quaternion(rng),
            scale: std::array::from_fn(|_| rng.random_range(0.005..0.15)),
            attr: (0..k).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
        .collect();
    GaussianField::sparse(k, prims).expect("consistent attributes")
}

pub fn origin_camera() -> Camera {
    Camera::new(Intrinsics::new(1.0, 1.0, 0.5, 0.5), Matrix4::identity())
}

/// Tile renderer vs per-pixel brute force on random fields of up to 64
/// Gaussians, 16x16 pixels, attribute width cycling through 1, 3, 8.
pub fn raster_oracle(cases: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RasterConfig::default();
    let cam = origin_camera();
    let size = (16, 16);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let k = [1, 3, 8][case % 3];
        let n = rng.random_range(1..=64);
        let field = random_field(&mut rng, n, k);
        let fast = render(&field, &cam, size, &cfg).expect("renderable field");
        let prims = field.prims();
        let slow = reference::render_brute_force(prims, &|i| prims[i].attr.as_slice(), k, &cam, size, &cfg);
        worst = worst
            .max(max_abs_diff(&fast.attr, &slow.attr))
            .max(max_abs_diff(&fast.alpha, &slow.alpha));
    }
    Check::new("raster_vs_bruteforce", worst < 1e-5, worst, format!("{cases} fields, max abs err {worst:.3e}"), start)
}

fn nested4(a: &Array4<f64>) -> Vec<Vec<Vec<Vec<f64>>>> {
    a.outer_iter()
        .map(|x| x.outer_iter().map(|y| y.outer_iter().map(|r| r.to_vec()).collect()).collect())
        .collect()
}

fn aligned_dummy_field(dims: Dims) -> GaussianField {
    let prims = (0..dims.len())
        .map(|_| GaussianPrimitive::isotropic([0.0, 0.0, 1.0], 1.0, 0.5, vec![0.0]))
        .collect();
    GaussianField::aligned(dims, 1, prims).expect("sized field")
}

/// Query filtering, probability maps, label derivation and lifting vs the
/// scalar loop oracle on random tensors (N_q <= 5, N_c <= 4, 2 views of 8x8).
pub fn lifting_oracle(cases: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (views, h, w) = (2, 8, 8);
    let field = aligned_dummy_field(Dims::new(views, h, w));
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for _ in 0..cases {
        let nq = rng.random_range(1..=5);
        let nc = rng.random_range(2..=4);
        let class_logits = Array2::from_shape_fn((nq, nc), |_| rng.random_range(-3.0..5.0));
        let mask_logits = Array4::from_shape_fn((nq, views, h, w), |_| rng.random_range(-4.0..4.0));
        let tau_c = rng.random_range(0.2..0.7);
        let tau = rng.random_range(0.05..0.6);
        let things: Vec<usize> = (0..nc - 1).filter(|_| rng.random_bool(0.5)).collect();
        let tax = ClassTaxonomy::generic(nc - 1, &things);
        let preds = SemanticPredictions {
            mask_logits: mask_logits.clone(),
            class_logits: class_logits.clone(),
            queries: Array2::zeros((nq, 1)),
        };
        let rows: Vec<Vec<f64>> = class_logits.outer_iter().map(|r| r.to_vec()).collect();
        let oracle = reference::lift_labels_scalar(&nested4(&mask_logits), &rows, tau_c, tau);

        let maps = probability_maps(&preds, tau_c).expect("valid tensors");
        if maps.kept != oracle.kept {
            mismatches += 1;
            continue;
        }
        for ((v, n, c, i, j), &z) in maps.z.indexed_iter() {
            worst = worst.max((z - oracle.z[v][n][c][i][j]).abs());
        }
        let labels = derive_label_maps(&maps, tau, &tax).expect("valid maps");
        let labels_ok = labels
            .sem
            .indexed_iter()
            .all(|((v, i, j), &s)| s == oracle.sem[v][i][j] && labels.ins[[v, i, j]] == oracle.ins[v][i][j]);
        let seg = lift_to_3d(&labels, &field, &tax, &maps.kept, None).expect("aligned labels");
        let sets_ok = seg
            .ins_sets
            .iter()
            .all(|(&id, m)| m.iter().copied().collect::<std::collections::BTreeSet<_>>() == reference::members_scalar(&labels.ins, id))
            && seg
                .sem_sets
                .iter()
                .all(|(&c, m)| m.iter().copied().collect::<std::collections::BTreeSet<_>>() == reference::members_scalar(&labels.sem, c));
        if !labels_ok || !sets_ok {
            mismatches += 1;
        }
    }
    let passed = mismatches == 0 && worst <= 1e-6;
    Check::new(
        "lifting_vs_scalar",
        passed,
        worst,
        format!("{cases} cases, {mismatches} integer mismatches, max z err {worst:.3e}"),
        start,
    )
}

/// Hungarian totals vs exhaustive enumeration on random matrices with each
/// side between 2 and 7.
pub fn hungarian_oracle(cases: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..cases {
        let (n, m) = (rng.random_range(2..=7), rng.random_range(2..=7));
        let cost = if rng.random_bool(0.3) {
            // integer costs provoke ties
            Array2::from_shape_fn((n, m), |_| rng.random_range(0..4) as f64)
        } else {
            Array2::from_shape_fn((n, m), |_| rng.random_range(-5.0..5.0))
        };
        let Ok(pairs) = hungarian(&cost) else {
            failures += 1;
            continue;
        };
        let (best, _) = reference::assignment_brute_force(&cost);
        let gap = (assignment_cost(&cost, &pairs) - best).abs();
        let complete = pairs.len() == n.min(m);
        if gap > 1e-9 || !complete {
            failures += 1;
        }
        worst = worst.max(gap);
    }
    Check::new("hungarian_optimality", failures == 0, worst, format!("{cases} matrices, {failures} suboptimal"), start)
}

fn random_labels(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> LabelMaps {
    let ins = Array3::from_shape_fn(dims, |_| if rng.random_bool(0.15) { BACKGROUND } else { rng.random_range(0..3) });
    let sem = ins.mapv(|i| if i == BACKGROUND { BACKGROUND } else { i % 2 });
    LabelMaps::new(sem, ins).expect("consistent labels")
}

/// Analytic gradients of the continuity and photometric losses vs central
/// differences.
pub fn gradient_checks(cases: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let dims = (rng.random_range(1..=2), rng.random_range(2..=6), rng.random_range(2..=6));
        let labels = random_labels(&mut rng, dims);
        let depth = Array3::from_shape_fn(dims, |_| rng.random_range(0.5..5.0));
        let grad = continuity_loss_grad(&depth, &labels).expect("shapes agree");
        let f = |x: &[f64]| continuity_loss(&Array3::from_shape_vec(dims, x.to_vec()).unwrap(), &labels).unwrap();
        let x = depth.as_slice().unwrap();
        worst = worst.max(grad_check(f, grad.as_slice().unwrap(), x, 1e-5).expect("finite"));

        let shape = (3, dims.1, dims.2);
        let gt = Array3::from_shape_fn(shape, |_| rng.random_range(0.0..1.0));
        // keep every residual away from the kink at zero
        let img = Array3::from_shape_fn(shape, |idx| {
            let off = rng.random_range(0.01..0.5);
            gt[idx] + if rng.random_bool(0.5) { off } else { -off }
        });
        let grad = photometric_l1_grad(&img, &gt).expect("shapes agree");
        let f = |x: &[f64]| photometric_l1(&Array3::from_shape_vec(shape, x.to_vec()).unwrap(), &gt).unwrap();
        worst = worst.max(grad_check(f, grad.as_slice().unwrap(), img.as_slice().unwrap(), 1e-6).expect("finite"));
    }
    Check::new("loss_gradients", worst < 1e-4, worst, format!("{cases} instances x 2 losses, max rel err {worst:.3e}"), start)
}

/// Vectorized SSIM vs the direct windowed loop.
pub fn ssim_oracle(cases: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (h, w) = (rng.random_range(11..=20), rng.random_range(11..=20));
        let a = Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.0..1.0));
        let b = a.mapv(|x: f64| (x + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0));
        let fast = ssim(&a, &b).expect("large enough");
        let slow = reference::ssim_scalar(&a.mean_axis(Axis(0)).unwrap(), &b.mean_axis(Axis(0)).unwrap());
        worst = worst.max((fast - slow).abs());
    }
    Check::new("ssim_vs_scalar", worst < 1e-9, worst, format!("{cases} image pairs, max err {worst:.3e}"), start)
}

/// Text cross-attention vs explicit loops.
pub fn attention_oracle(cases: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (t, nq, dt, d, dk, l) = (
            rng.random_range(1..=3),
            rng.random_range(1..=6),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
            rng.random_range(1..=4),
            rng.random_range(1..=3),
        );
        let mut r = |s: (usize, usize)| Array2::from_shape_fn(s, |_| rng.random_range(-1.0..1.0));
        let layers: Vec<AttentionLayer> = (0..l)
            .map(|_| AttentionLayer {
                w_q: r((dt, dk)),
                w_k: r((d, dk)),
                w_v: r((d, dt)),
            })
            .collect();
        let text = r((t, dt));
        let queries = r((nq, d));
        let stack = CrossAttentionStack::new(layers.clone()).expect("consistent layers");
        let fast = attend(text.view(), queries.view(), &stack).expect("matching dims");
        let rows = |a: &Array2<f64>| a.outer_iter().map(|x| x.to_vec()).collect::<Vec<_>>();
        let scalar_layers: Vec<_> = layers.iter().map(|l| (rows(&l.w_q), rows(&l.w_k), rows(&l.w_v))).collect();
        let slow = reference::attend_scalar(&rows(&text), &rows(&queries), &scalar_layers);
        for (a, b) in fast.outer_iter().zip(&slow) {
            worst = worst.max(max_abs_diff(a.iter(), b.iter()));
        }
    }
    Check::new("attention_vs_scalar", worst < 1e-9, worst, format!("{cases} stacks, max err {worst:.3e}"), start)
}

/// Self-overlap is exactly one and the analytic half-overlap scene is 0.5
/// within one pixel column per side.
pub fn pairing_checks(size: usize) -> Check {
    let start = Instant::now();
    let (a, b) = half_overlap_frames(size);
    let self_iou = overlap_iou(&a, &a, crate::config::TAU_DEPTH);
    let half = overlap_iou(&a, &b, crate::config::TAU_DEPTH);
    let tol = 2.0 / size as f64;
    let passed = self_iou == 1.0 && (half - 0.5).abs() <= tol;
    Check::new(
        "overlap_iou",
        passed,
        (half - 0.5).abs(),
        format!("self {self_iou}, half-overlap {half:.4} (tol {tol:.4})"),
        start,
    )
}

/// PLY export/import of random fields within 1e-6 relative.
pub fn ply_round_trip(cases: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(1..=32);
        let prims: Vec<_> = (0..n)
            .map(|_| GaussianPrimitive {
                mean: std::array::from_fn(|_| rng.random_range(-50.0..50.0)),
                opacity: rng.random_range(0.001..0.999),
                rotation: unit_quaternion(&mut rng),
                scale: std::array::from_fn(|_| rng.random_range(0.5..15.0)),
                attr: (0..3).map(|_| rng.random_range(0.0..1.0)).collect(),
            })
            .collect();
        let field = GaussianField::sparse(3, prims).expect("rgb field");
        let back = parse_ply(&ply_bytes(&field).expect("rgb field")).expect("own output parses");
        let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(1.0);
        for (p, q) in field.prims().iter().zip(back.prims()) {
            let pairs = p
                .mean
                .iter()
                .zip(&q.mean)
                .chain(p.rotation.iter().zip(&q.rotation))
                .chain(p.scale.iter().zip(&q.scale))
                .chain(p.attr.iter().zip(&q.attr))
                .chain(std::iter::once((&p.opacity, &q.opacity)));
            for (&x, &y) in pairs {
                worst = worst.max(rel(x, y));
            }
        }
    }
    Check::new("ply_round_trip", worst <= 1e-6, worst, format!("{cases} fields, max rel err {worst:.3e}"), start)
}

/// Bundle write/read of the synthetic scene is bit-identical.
pub fn bundle_round_trip() -> Check {
    let start = Instant::now();
    let result = (|| -> Result<bool, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("scene");
        let b = from_synthetic(&wall_scene());
        write_bundle(&b, &path).map_err(|e| e.to_string())?;
        let back = read_bundle(&path).map_err(|e| e.to_string())?;
        Ok(back == b)
    })();
    let (passed, detail) = match result {
        Ok(same) => (same, if same { "bit-identical".into() } else { "tensors differ".into() }),
        Err(e) => (false, e),
    };
    Check::new("bundle_round_trip", passed, 0.0, detail, start)
}

/// Every oracle at a size that runs in a few seconds.
pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        raster_oracle(60, seed),
        lifting_oracle(40, seed.wrapping_add(1)),
        hungarian_oracle(200, seed.wrapping_add(2)),
        gradient_checks(20, seed.wrapping_add(3)),
        ssim_oracle(10, seed.wrapping_add(4)),
        attention_oracle(30, seed.wrapping_add(5)),
        pairing_checks(64),
        ply_round_trip(20, seed.wrapping_add(6)),
        bundle_round_trip(),
    ]
}
