use std::path::{Path, PathBuf};

use articulate::export::Keypoint;
use articulate::fixtures::{synthetic_ensemble, SyntheticEnsemble};
use articulate::ingest::EnsembleConfig;
use articulate::pipeline::{self, OptimizeOptions};
use articulate::Error;
use tempfile::TempDir;

struct Setup {
    _dir: TempDir,
    root: PathBuf,
    data: PathBuf,
    skeleton: PathBuf,
    config: EnsembleConfig,
    ensemble: SyntheticEnsemble,
}

fn setup(steps: usize) -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let ensemble = synthetic_ensemble(3, 40, 1);
    let data = root.join("data");
    ensemble.write(&data).unwrap();
    let skeleton = root.join("skeleton3d.json");
    ensemble.skeleton.save(&skeleton).unwrap();
    let mut config = ensemble.config.clone();
    for s in &mut config.stage_schedule {
        s.steps = steps;
    }
    Setup {
        _dir: dir,
        root,
        data,
        skeleton,
        config,
        ensemble,
    }
}

fn opts(stages: Option<&[&str]>, reference: Option<usize>) -> OptimizeOptions {
    OptimizeOptions {
        seed: 3,
        reference,
        stages: stages.map(|s| s.iter().map(|n| n.to_string()).collect()),
    }
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn stage_filter_runs_only_the_named_stage() {
    let s = setup(5);
    let out = s.root.join("run");
    let m = pipeline::optimize(&s.data, &s.skeleton, &s.config, &opts(Some(&["camera"]), Some(2)), &out).unwrap();
    assert_eq!(m.stages.len(), 1);
    assert_eq!(m.stages[0].name, "camera");
    assert_eq!(m.reference, 2);
    let stages: Vec<String> = std::fs::read_to_string(out.join(pipeline::LOSSES))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["stage"].as_str().unwrap().to_string())
        .collect();
    assert!(!stages.is_empty());
    assert!(stages.iter().all(|n| n == "camera"));
    for f in &m.outputs {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(out.join(pipeline::TIMINGS).exists());
}

#[test]
fn unknown_stage_is_a_validation_error() {
    let s = setup(5);
    let e = pipeline::optimize(&s.data, &s.skeleton, &s.config, &opts(Some(&["polish"]), None), &s.root.join("run")).unwrap_err();
    assert!(matches!(e, Error::Validation(_)));
    assert_eq!(pipeline::exit_code(&e), 2);
}

#[test]
fn missing_mask_names_the_file() {
    let s = setup(5);
    std::fs::remove_file(s.data.join("1.mask.png")).unwrap();
    let e = pipeline::discover(&s.data, &s.config, None, &s.root.join("out")).unwrap_err();
    assert!(e.to_string().contains("1.mask.png"), "{e}");
    assert_eq!(pipeline::exit_code(&e), 4);
}

#[test]
fn discover_writes_skeleton_for_the_chosen_reference() {
    let s = setup(5);
    let out = s.root.join("disc");
    let sk = pipeline::discover(&s.data, &s.config, Some(2), &out).unwrap();
    let saved = articulate::skeleton3d::Skeleton3D::load(&out.join(pipeline::SKELETON)).unwrap();
    assert_eq!(saved, sk);
    assert!(pipeline::discover(&s.data, &s.config, Some(3), &out).is_err());
}

#[test]
fn eval_with_and_without_keypoints() {
    let s = setup(8);
    let run = s.root.join("run");
    pipeline::optimize(&s.data, &s.skeleton, &s.config, &opts(None, None), &run).unwrap();

    let m = pipeline::eval(&run, None, &run).unwrap();
    assert!(m.pck.is_none());
    let v = json(&run.join(pipeline::METRICS));
    assert!(v.get("pck").is_none());
    assert_eq!(v["iou"].as_array().unwrap().len(), 3);

    let missing = pipeline::eval(&run, Some(&s.root.join("nope.json")), &s.root.join("m2")).unwrap();
    assert!(missing.pck.is_none());

    let m = pipeline::eval(&run, Some(&s.data.join("keypoints.json")), &s.root.join("m3")).unwrap();
    let pck = m.pck.unwrap();
    assert!(!pck.pairs.is_empty() && pck.pairs.len() <= 6);
    assert!(pck.pairs.iter().all(|p| p.src != p.dst && (0.0..=1.0).contains(&p.pck)));
    assert!(json(&s.root.join("m3").join(pipeline::METRICS)).get("pck").is_some());
}

#[test]
fn exact_correspondences_give_full_pck() {
    let s = setup(1);
    let scene = &s.ensemble.truth;
    let samples = pipeline::surface_samples(scene);
    let (h, w) = scene.dims;
    // keypoints at samples visible in every instance, so each transfer is exact
    let mut kps: Vec<Vec<Keypoint>> = vec![Vec::new(); 3];
    for i in 0..samples[0].visible.len() {
        for k in (0..samples[0].visible[i].len()).step_by(97) {
            if samples.iter().all(|smp| smp.visible[i][k]) {
                for (j, smp) in samples.iter().enumerate() {
                    let p = smp.projections[i][k];
                    kps[j].push(Keypoint {
                        name: format!("p{i}_{k}"),
                        x: p.u / w as f64,
                        y: p.v / h as f64,
                        visible: true,
                    });
                }
            }
        }
    }
    assert!(kps[0].len() >= 3);
    let m = pipeline::evaluate(scene, &s.config, &s.ensemble.records(), Some(&kps));
    let pck = m.pck.unwrap();
    assert_eq!(pck.mean, Some(1.0));
    assert!(m.iou.iter().all(|&v| v > 0.95));
}
