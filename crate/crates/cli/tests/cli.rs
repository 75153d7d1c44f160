use std::path::Path;
use std::process::{Command, Output};

fn articulate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_articulate"))
        .args(args)
        .env("HILASSIE_LOG", "error")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let o = articulate(&["synth", "--instances", "3", "--size", "40", "--seed", "1", "--out", p(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    data
}

#[test]
fn discover_optimize_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("out");
    let o = articulate(&["discover", p(&data), "--reference-index", "1", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("skeleton3d.json").exists());

    let mut manifests = Vec::new();
    for run in ["a", "b"] {
        let run = dir.path().join(run);
        let o = articulate(&[
            "--threads", "2", "optimize", p(&data), "--skeleton", p(&out.join("skeleton3d.json")),
            "--seed", "7", "--stages", "camera", "--out", p(&run),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        manifests.push(std::fs::read(run.join("manifest.json")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
    let m: serde_json::Value = serde_json::from_slice(&manifests[0]).unwrap();
    let stages = m["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 1);
    assert_eq!(stages[0]["name"], "camera");

    let run = dir.path().join("a");
    let o = articulate(&["eval", p(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics.get("pck").is_none());
    assert_eq!(metrics["iou"].as_array().unwrap().len(), 3);

    let kp_out = dir.path().join("kp");
    let o = articulate(&["eval", p(&run), "--keypoints", p(&data.join("keypoints.json")), "--out", p(&kp_out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PCK"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("out");

    let o = articulate(&["discover", p(&data), "--reference-index", "7", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let o = articulate(&["optimize", p(&data), "--skeleton", p(&dir.path().join("none.json")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(4));

    std::fs::remove_file(data.join("0.mask.png")).unwrap();
    let o = articulate(&["discover", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("0.mask.png"));

    let o = articulate(&["eval", p(&dir.path().join("no-run"))]);
    assert_eq!(o.status.code(), Some(4));
}
