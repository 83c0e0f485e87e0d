mod common;

use std::path::Path;

use common::{run, scene_path, tree_hash};
use strata::compositing::IdentityHook;
use strata::metrics::{ap50, build_tracks, centroid_distance, coverage, miou_track, parse_detections};
use strata::scene::{load_scene, SceneOverrides, SceneSpec};

const SMALL: &str = r#"{
  "bg": "a coral reef in the ocean", "frames": 4, "steps": 4, "seed": 1,
  "resolution": {"width": 32, "height": 32}, "latent": {"h": 8, "w": 8, "ch": 4},
  "layers": [
    {"prompt": "a clownfish", "keyframes": [{"frame": 1, "box": [0.7, 0.6, 0.9, 0.8]}, {"frame": 4, "box": [0.1, 0.6, 0.3, 0.8]}]},
    {"prompt": "a crab", "keyframes": [{"frame": 1, "box": [0.1, 0.7, 0.3, 0.9]}, {"frame": 4, "box": [0.7, 0.7, 0.9, 0.9]}]}
  ]
}"#;

fn write_small(dir: &Path) -> String {
    let p = dir.join("small.json");
    std::fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_populates_layer_directories() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_small(dir.path());
    let out = dir.path().join("out");
    let o = run(&["generate", "--scene", &scene, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for layer in ["layer_01", "layer_02"] {
        for f in ["frame_0001.png", "frame_0004.png", "mask_0004.png"] {
            assert!(out.join(layer).join(f).is_file(), "{layer}/{f}");
        }
    }
    for sub in ["bg", "blend", "harmonized"] {
        assert!(out.join(sub).join("frame_0004.png").is_file());
    }
    assert!(out.join("trace.jsonl").is_file() && out.join("manifest.json").is_file());
}

#[test]
fn missing_scene_names_the_path() {
    let o = run(&["generate", "--scene", "/nonexistent/scene.json", "--out", "/tmp/unused"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("/nonexistent/scene.json"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn invalid_scene_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, SMALL.replace("\"frame\": 4, \"box\": [0.1, 0.6", "\"frame\": 9, \"box\": [0.1, 0.6")).unwrap();
    let o = run(&["interp", "--scene", p.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("range"), "{}", stderr(&o));
    let o = run(&["interp", "--scene", p.to_str().unwrap(), "--lambda", "-1"]);
    assert!(!o.status.success());
}

#[test]
fn seed_override_matches_library_run() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_small(dir.path());
    let cli_out = dir.path().join("cli");
    let o = run(&["generate", "--scene", &scene, "--out", cli_out.to_str().unwrap(), "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cli_out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["scene"]["seed"], 7);

    let spec: SceneSpec<f64> = load_scene::<f64>(Path::new(&scene))
        .unwrap()
        .with_overrides(&SceneOverrides {
            seed: Some(7),
            ..Default::default()
        })
        .unwrap();
    let lib_out = dir.path().join("lib");
    strata::generate_to_dir(&spec, &lib_out, &IdentityHook, "identity").unwrap();
    assert_eq!(tree_hash(&cli_out), tree_hash(&lib_out));
}

#[test]
fn rerun_into_same_directory_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_small(dir.path());
    let out = dir.path().join("out");
    let args = ["generate", "--scene", &scene, "--out", out.to_str().unwrap()];
    assert!(run(&args).status.success());
    let first = tree_hash(&out);
    assert!(run(&args).status.success());
    assert_eq!(first, tree_hash(&out));
    // re-blending reads the quantized PNG layers, so compare blend runs with each other
    let blend = ["blend", "--out", out.to_str().unwrap()];
    assert!(run(&blend).status.success());
    let reblended = tree_hash(&out);
    assert!(run(&blend).status.success());
    assert_eq!(reblended, tree_hash(&out));
}

#[test]
fn blend_with_external_hook() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_small(dir.path());
    let out = dir.path().join("out");
    assert!(run(&["generate", "--scene", &scene, "--out", out.to_str().unwrap()]).status.success());
    let hook = "f() { cp \"$1\"/frame_*.png \"$2\"/; }; f";
    let o = run(&["blend", "--out", out.to_str().unwrap(), "--hook", hook]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out.join("harmonized/frame_0001.png")).unwrap(),
        std::fs::read(out.join("blend/frame_0001.png")).unwrap()
    );
    let o = run(&["blend", "--out", out.to_str().unwrap(), "--hook", "false"]);
    assert!(!o.status.success());
    assert!(out.join("blend/frame_0001.png").is_file());
}

fn interp(scene: &str) -> Vec<Vec<f64>> {
    let o = run(&["interp", "--scene", scene_path(scene).to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    stdout(&o)
        .lines()
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn interp_reproduces_key_frames() {
    let rows = interp("clownfish_crab.json");
    assert_eq!(rows.len(), 32);
    assert_eq!(rows[0], [1.0, 1.0, 0.7, 0.6, 0.9, 0.8]);
    assert_eq!(rows[15], [1.0, 16.0, 0.1, 0.6, 0.3, 0.8]);
    assert_eq!(rows[16], [2.0, 1.0, 0.1, 0.7, 0.3, 0.9]);
    assert_eq!(rows[31], [2.0, 16.0, 0.7, 0.7, 0.9, 0.9]);

    let rows = interp("polar_bear_drone.json");
    assert_eq!(rows[7], [1.0, 8.0, 0.67, 0.26, 0.97, 0.58]);

    let rows = interp("minimal.json");
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().all(|r| r[2..] == [0.3, 0.3, 0.7, 0.7]));
}

fn metrics(detections: &str) -> (std::process::Output, serde_json::Value) {
    let dir = tempfile::tempdir().unwrap();
    let det = dir.path().join("det.jsonl");
    std::fs::write(&det, detections).unwrap();
    let out = dir.path().join("m");
    let o = run(&[
        "metrics",
        "--scene",
        scene_path("clownfish_crab.json").to_str().unwrap(),
        "--detections",
        det.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let report = std::fs::read_to_string(out.join("metrics.json"))
        .ok()
        .map(|t| serde_json::from_str(&t).unwrap())
        .unwrap_or(serde_json::Value::Null);
    (o, report)
}

fn scene_tracks() -> Vec<strata::BBoxTrack<f64>> {
    load_scene::<f64>(&scene_path("clownfish_crab.json")).unwrap().tracks().unwrap()
}

fn detection_lines(f: impl Fn(usize, usize, [f64; 4]) -> Option<([f64; 4], f64)>) -> String {
    let mut s = String::new();
    for (oi, track) in scene_tracks().iter().enumerate() {
        for (fi, b) in track.boxes.iter().enumerate() {
            if let Some((bx, conf)) = f(oi, fi, b.to_array()) {
                s.push_str(&format!(
                    "{{\"video\":\"v1\",\"object\":{},\"frame\":{},\"box\":{:?},\"confidence\":{}}}\n",
                    oi + 1,
                    fi + 1,
                    bx,
                    conf
                ));
            }
        }
    }
    s
}

#[test]
fn metrics_perfect_detections() {
    let (o, r) = metrics(&detection_lines(|_, _, b| Some((b, 1.0))));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!((r["miou"].as_f64(), r["ap50"].as_f64(), r["coverage"].as_f64(), r["cd"].as_f64()),
        (Some(1.0), Some(1.0), Some(1.0), Some(0.0)));
    assert!(stdout(&o).contains("mIoU=1 AP50=1 Cov=1 CD=0"), "{}", stdout(&o));
}

#[test]
fn metrics_empty_detections() {
    let (o, r) = metrics("");
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!((r["miou"].as_f64(), r["ap50"].as_f64(), r["coverage"].as_f64()), (Some(0.0), Some(0.0), Some(0.0)));
    assert!(r["cd"].is_null());
    assert!(stdout(&o).contains("CD=undefined"));
}

#[test]
fn metrics_mixed_match_library() {
    let text = detection_lines(|oi, fi, b| match (oi + fi) % 4 {
        0 => None,
        1 => Some(([b[0], b[1], b[2] - 0.05, b[3]], 0.3 + 0.04 * fi as f64)),
        2 => Some(([b[0], b[1], b[2], b[1] + 0.4 * (b[3] - b[1])], 0.9 - 0.02 * fi as f64)),
        _ => Some((b, 0.5)),
    });
    let (o, r) = metrics(&text);
    assert!(o.status.success(), "{}", stderr(&o));

    let gts = scene_tracks();
    let preds = build_tracks(&parse_detections::<f64>(&text).unwrap(), 2, 16).unwrap();
    let miou = (miou_track(&preds[0], &gts[0]).unwrap() + miou_track(&preds[1], &gts[1]).unwrap()) / 2.0;
    let cd = (centroid_distance(&preds[0], &gts[0]).unwrap().unwrap()
        + centroid_distance(&preds[1], &gts[1]).unwrap().unwrap())
        / 2.0;
    assert_eq!(r["miou"].as_f64().unwrap(), miou);
    assert_eq!(r["cd"].as_f64().unwrap(), cd);
    assert_eq!(r["ap50"].as_f64().unwrap(), ap50(&preds, &gts).unwrap());
    assert_eq!(r["coverage"].as_f64().unwrap(), coverage(&preds).unwrap());
    assert_eq!(r["per_object"].as_array().unwrap().len(), 2);
}

#[test]
fn metrics_malformed_line_is_named() {
    let mut text = detection_lines(|_, fi, b| (fi < 2).then_some((b, 1.0)));
    text.push_str("{\"video\": \"v1\", \"object\": 1,\n");
    let lines = text.lines().count();
    let (o, _) = metrics(&text);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(&format!("line {lines}")), "{}", stderr(&o));
}
