use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use splatseg_core::bundle::read_bundle;
use splatseg_core::lifting::cross_view_agreement;
use splatseg_core::synthetic::disagreement_scene;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splatseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, scene: &str) -> PathBuf {
    let p = dir.join(scene);
    ok(&["synth", "--scene", scene, "--out", s(&p)]);
    p
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("error line");
    serde_json::from_str(line).expect("machine-readable error")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn identical_bundles_score_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let wall = synth(tmp.path(), "wall");
    let out = tmp.path().join("m");
    ok(&["metrics", "--pred", s(&wall), "--gt", s(&wall), "--out", s(&out)]);
    let r = report(&out);
    assert_eq!(r["miou_s"], 1.0);
    assert_eq!(r["pq"], 1.0);
    assert_eq!(r["psnr"], "inf");
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("miou_s"));
}

#[test]
fn aggregation_makes_ids_agree_across_views() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), "disagreement");
    let corr = disagreement_scene().correspondences;
    let mut agreement = Vec::new();
    for flag in [Some("--no-aggregate"), None] {
        let out = tmp.path().join(format!("lift{}", agreement.len()));
        let mut args = vec!["lift", "--bundle", s(&scene), "--out", s(&out)];
        args.extend(flag);
        ok(&args);
        let b = read_bundle(&out.join("bundle")).unwrap();
        let labels = b.labels("pred").unwrap().unwrap();
        agreement.push(cross_view_agreement(&labels, &corr));
    }
    assert!(agreement[0] < 1.0, "{agreement:?}");
    assert_eq!(agreement[1], 1.0);
}

#[test]
fn lift_then_novel_view_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let wall = synth(tmp.path(), "wall");
    let lift = tmp.path().join("lift");
    ok(&["lift", "--bundle", s(&wall), "--out", s(&lift)]);
    for f in ["segmentation.json", "summary.json", "labels/view0_ins.png", "labels/view1_preview.png"] {
        assert!(lift.join(f).is_file(), "{f}");
    }
    let ctx = tmp.path().join("ctx");
    ok(&["metrics", "--pred", s(&lift.join("bundle")), "--gt", s(&wall), "--out", s(&ctx)]);
    assert_eq!(report(&ctx)["pq"], 1.0);

    let rb = tmp.path().join("rendered");
    let views = tmp.path().join("views");
    let seg = lift.join("segmentation.json");
    ok(&[
        "render",
        "--bundle",
        s(&lift.join("bundle")),
        "--segmentation",
        s(&seg),
        "--targets",
        "--out",
        s(&views),
        "--bundle-out",
        s(&rb),
    ]);
    assert!(views.join("view0_rgb.png").is_file());
    let novel = tmp.path().join("novel");
    ok(&["metrics", "--pred", s(&rb), "--gt", s(&wall), "--mode", "novel", "--out", s(&novel)]);
    let r = report(&novel);
    for k in ["miou_s", "pq", "map", "miou_t"] {
        assert!(r[k].as_f64().unwrap() >= 0.95, "{k}: {}", r[k]);
    }
}

#[test]
fn pair_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), "disagreement");
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("p{k}"));
        ok(&["pair", "--bundle", s(&scene), "--out", s(&out), "--seed", "5", "--lo", "0.3", "--hi", "0.8"]);
        outputs.push((fs::read(out.join("pairs.json")).unwrap(), fs::read(out.join("overlap.png")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let doc: Value = serde_json::from_slice(&outputs[0].0).unwrap();
    // 12 of 16 columns overlap
    let iou = doc["iou"][0][1].as_f64().unwrap();
    assert!((iou - 0.75).abs() < 1e-12, "{iou}");
    assert_eq!(doc["pairs"][0], serde_json::json!([0, 1]));
}

#[test]
fn edit_removes_instance_and_exports_ply() {
    let tmp = tempfile::tempdir().unwrap();
    let wall = synth(tmp.path(), "wall");
    let lift = tmp.path().join("lift");
    ok(&["lift", "--bundle", s(&wall), "--out", s(&lift)]);
    let plan = tmp.path().join("plan.json");
    fs::write(
        &plan,
        r#"{"ops": [{"kind": "remove", "ins_id": 2}, {"kind": "recolor", "ins_id": 1, "color": [0, 1, 0]}]}"#,
    )
    .unwrap();
    let out = tmp.path().join("edited");
    let ply = tmp.path().join("edited.ply");
    ok(&[
        "edit",
        "--bundle",
        s(&lift.join("bundle")),
        "--segmentation",
        s(&lift.join("segmentation.json")),
        "--plan",
        s(&plan),
        "--out",
        s(&out),
        "--ply",
        s(&ply),
    ]);
    let before = read_bundle(&wall).unwrap().field().unwrap().len();
    let after = read_bundle(&out.join("bundle")).unwrap().field().unwrap();
    assert!(after.len() < before);
    assert!(after.is_sparse());
    let imported = splatseg_core::export::import_ply(&ply).unwrap();
    assert_eq!(imported.len(), after.len());
    let seg: Value = serde_json::from_str(&fs::read_to_string(out.join("segmentation.json")).unwrap()).unwrap();
    assert!(seg["ins_sets"].get("2").is_none());
}

#[test]
fn loss_reports_weighted_total() {
    let tmp = tempfile::tempdir().unwrap();
    let wall = synth(tmp.path(), "wall");
    let out = tmp.path().join("loss.json");
    ok(&["loss", "--bundle", s(&wall), "--out", s(&out)]);
    let doc: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let c = &doc["components"];
    let w = &doc["weights"];
    let total: f64 = ["photometric", "perceptual", "mask", "continuity", "text"]
        .iter()
        .map(|k| c[k].as_f64().unwrap() * w[k].as_f64().unwrap())
        .sum();
    assert!((total - doc["total"].as_f64().unwrap()).abs() < 1e-12);
    assert_eq!(w["perceptual"], 0.5);
}

#[test]
fn usage_errors_exit_one() {
    let out = run(&["lift"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["code"], "usage");

    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), "disagreement");
    let out = run(&["pair", "--bundle", s(&scene), "--out", s(&tmp.path().join("p")), "--lo", "0.9", "--hi", "0.2"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["lift", "--bundle", s(&scene), "--out", s(&tmp.path().join("l")), "--tau", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn data_errors_exit_two_with_code() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path(), "disagreement");
    let blob = scene.join("mask_logits.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
    let out = run(&["lift", "--bundle", s(&scene), "--out", s(&tmp.path().join("l"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["code"], "payload_length_mismatch");

    let mut bad = bytes.clone();
    bad[7] = 42;
    fs::write(&blob, &bad).unwrap();
    let out = run(&["lift", "--bundle", s(&scene), "--out", s(&tmp.path().join("l"))]);
    assert_eq!(error_line(&out)["error"]["code"], "unsupported_dtype");
    assert!(!tmp.path().join("l").exists());
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 9);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}
