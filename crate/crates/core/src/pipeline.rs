//! The three top-level commands: discover, optimize and eval.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::export::{self, Metrics, SurfaceSamples};
use crate::grid::Grid;
use crate::ingest::{self, EnsembleConfig, InstanceRecord};
use crate::losses::{self, LossRecord};
use crate::mesh;
use crate::model::{ParamStore, Scene};
use crate::optim::{self, Fit, Observation, StageReport};
use crate::render::{self, MeshTopology};
use crate::skeleton2d;
use crate::skeleton3d::{self, Skeleton3D};

pub const MANIFEST: &str = "manifest.json";
pub const TIMINGS: &str = "timings.json";
pub const MODEL: &str = "model.json";
pub const LOSSES: &str = "losses.jsonl";
pub const METRICS: &str = "metrics.json";
pub const SKELETON: &str = "skeleton3d.json";

/// Minimum icosphere level of exported meshes.
pub const EXPORT_LEVEL: usize = 3;
/// Icosphere level of the dense samples used for keypoint transfer.
pub const TRANSFER_LEVEL: usize = 5;
/// Mask threshold and render sharpness used for evaluation.
pub const EVAL_SIGMA: f64 = 0.05;
pub const PCK_THRESHOLD: f64 = 0.05;

/// Process exit code for an error: 2 validation, 3 divergence, 4 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Io { .. } | Error::Image { .. } => 4,
        _ => 2,
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Loads the ensemble with an optional reference override applied.
pub fn load(dir: &Path, config: &EnsembleConfig, reference: Option<usize>) -> Result<(EnsembleConfig, Vec<InstanceRecord>, usize)> {
    let mut config = config.clone();
    if reference.is_some() {
        config.reference_index = reference;
    }
    config.validate()?;
    let records = ingest::load_ensemble(dir, &config)?;
    if let Some(r) = records.iter().position(|r| r.dims() != config.image_size) {
        return Err(Error::Validation(format!(
            "instance {r}: image size {:?} differs from configured {:?}",
            records[r].dims(),
            config.image_size
        )));
    }
    let reference = ingest::select_reference(&records, &config)?;
    Ok((config, records, reference))
}

/// Skeleton discovery on the reference instance. Writes `skeleton3d.json`
/// and the 2D debug overlay into `out`.
pub fn discover(dir: &Path, config: &EnsembleConfig, reference: Option<usize>, out: &Path) -> Result<Skeleton3D> {
    let (config, records, reference) = load(dir, config, reference)?;
    info!("discovering skeleton on instance {reference}");
    let rec = &records[reference];
    let (tree, thin, _) = skeleton2d::extract(&rec.pseudo_mask)?;
    let skeleton = skeleton3d::discover(&tree, &rec.feature_map, config.sym_lambda, config.sym_tau, config.image_size)?;
    info!(
        "{} joints, {} bones, {} symmetric pairs",
        skeleton.joints.len(),
        skeleton.num_bones(),
        skeleton.sym_pairs.len()
    );
    create_dir(out)?;
    tree.write_debug(out, &rec.pseudo_mask, &thin)?;
    write_atomic(&out.join(SKELETON), skeleton.to_json().as_bytes())?;
    Ok(skeleton)
}

/// Everything needed to rebuild the fitted scene.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SavedModel {
    pub seed: u64,
    pub feature_dim: usize,
    pub reference: usize,
    pub skeleton: Skeleton3D,
    pub params: ParamStore,
}

impl SavedModel {
    pub fn scene(&self, config: &EnsembleConfig) -> Result<Scene> {
        let mut scene = Scene::new(self.skeleton.clone(), config, self.feature_dim, self.seed);
        for (k, t) in &self.params {
            let Some(slot) = scene.params.get_mut(k) else {
                return Err(Error::Validation(format!("unknown parameter `{k}`")));
            };
            if slot.shape() != (t.rows, t.cols) || t.data.len() != t.rows * t.cols {
                return Err(Error::ShapeMismatch {
                    expected: slot.shape(),
                    actual: (t.rows, t.cols),
                });
            }
            *slot = t.clone();
        }
        Ok(scene)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub steps: usize,
    pub skipped_steps: usize,
    pub stopped_early: bool,
    pub initial_total: f64,
    pub final_total: f64,
    pub frozen_unchanged: bool,
}

impl From<&StageReport> for StageSummary {
    fn from(r: &StageReport) -> Self {
        StageSummary {
            name: r.name.clone(),
            steps: r.steps,
            skipped_steps: r.skipped_steps,
            stopped_early: r.stopped_early,
            initial_total: r.initial.total,
            final_total: r.last.total,
            frozen_unchanged: r.frozen_hash_before == r.frozen_hash_after,
        }
    }
}

/// Run record. Holds no wall-clock data so that identical runs produce
/// identical bytes; timings go to `timings.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    /// Hash over the crate version, config, seed, skeleton and stage list.
    pub version_hash: String,
    pub seed: u64,
    pub ensemble_dir: PathBuf,
    pub reference: usize,
    pub stages: Vec<StageSummary>,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub config: EnsembleConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timings {
    pub stages: BTreeMap<String, f64>,
    pub export_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct OptimizeOptions {
    pub seed: u64,
    pub reference: Option<usize>,
    /// Stage names to run, in schedule order; `None` runs all.
    pub stages: Option<Vec<String>>,
}

fn version_hash(config: &EnsembleConfig, seed: u64, skeleton: &Skeleton3D, stages: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(config.to_json().as_bytes());
    h.update(seed.to_le_bytes());
    h.update(skeleton.to_json().as_bytes());
    for s in stages {
        h.update(s.as_bytes());
        h.update([0]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Template points and faces of an icosphere at `level`.
pub fn template_points(level: usize) -> (Tensor, Vec<[usize; 3]>) {
    let m = mesh::icosphere(level);
    (Tensor::from_rows(&m.vertices), m.faces)
}

fn observation_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(j as u64 + 1)
}

/// Fits the ensemble and writes checkpoints, meshes, logs and the manifest.
pub fn optimize(dir: &Path, skeleton_path: &Path, config: &EnsembleConfig, opts: &OptimizeOptions, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let (config, records, reference) = load(dir, config, opts.reference)?;
    let skeleton = Skeleton3D::load(skeleton_path)?;
    if skeleton.image_size != config.image_size {
        warn!(
            "skeleton was discovered at {:?}, ensemble is {:?}",
            skeleton.image_size, config.image_size
        );
    }
    let schedule: Vec<(usize, &ingest::StageSpec)> = config
        .stage_schedule
        .iter()
        .enumerate()
        .filter(|(_, s)| opts.stages.as_ref().is_none_or(|want| want.contains(&s.name)))
        .collect();
    if let Some(want) = &opts.stages {
        if let Some(bad) = want.iter().find(|w| !config.stage_schedule.iter().any(|s| &s.name == *w)) {
            return Err(Error::Validation(format!("stage `{bad}` is not in the schedule")));
        }
    }
    let stage_names: Vec<String> = schedule.iter().map(|(_, s)| s.name.clone()).collect();

    create_dir(out)?;
    let ckpt_dir = out.join("checkpoints");
    let mesh_dir = out.join("meshes");
    let part_dir = out.join("parts");
    let render_dir = out.join("renders");
    for d in [&ckpt_dir, &mesh_dir, &part_dir, &render_dir] {
        create_dir(d)?;
    }

    let feature_dim = records[0].feature_map.dim;
    let obs: Vec<Observation> = optim::par_map(records.len(), |j| {
        Observation::new(&records[j], config.sem_pixels, observation_seed(opts.seed, j))
    });
    let scene = Scene::new(skeleton.clone(), &config, feature_dim, opts.seed);
    let mut fit = Fit::new(scene, &obs, &config, reference, opts.seed);

    let loss_path = out.join(LOSSES);
    let loss_file = fs::File::create(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
    let mut loss_log = std::io::BufWriter::new(loss_file);
    let mut log_err: Option<std::io::Error> = None;
    let mut outputs = vec![LOSSES.to_string()];
    let mut stages = Vec::new();
    let mut timings = Timings::default();
    for (k, spec) in schedule {
        let t = Instant::now();
        let report = fit.run_stage(k, spec, &mut |rec: &LossRecord| {
            if log_err.is_none() {
                if let Err(e) = losses::write_jsonl(&mut loss_log, rec) {
                    log_err = Some(e);
                }
            }
            if rec.step % 25 == 0 {
                info!("{} step {}: total {:.5}", rec.stage, rec.step, rec.losses.total);
            }
        });
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                let _ = loss_log.flush();
                return Err(e);
            }
        };
        timings.stages.insert(format!("{k}_{}", spec.name), t.elapsed().as_secs_f64());
        let name = format!("checkpoints/{k}_{}.json", spec.name);
        write_atomic(&out.join(&name), to_json(&fit.scene.params).as_bytes())?;
        outputs.push(name);
        stages.push(StageSummary::from(&report));
    }
    if let Some(e) = log_err {
        return Err(Error::io(&loss_path, e));
    }
    loss_log.flush().map_err(|e| Error::io(&loss_path, e))?;

    let t = Instant::now();
    let scene = &fit.scene;
    let model = SavedModel {
        seed: opts.seed,
        feature_dim,
        reference,
        skeleton: skeleton.clone(),
        params: scene.params.clone(),
    };
    write_atomic(&out.join(MODEL), to_json(&model).as_bytes())?;
    outputs.push(MODEL.to_string());

    let (points, faces) = template_points(config.icosphere_level.max(EXPORT_LEVEL));
    let topo = MeshTopology::new(&faces);
    let pairs = skeleton.bone_pairs();
    let meshes = optim::par_map(records.len(), |j| -> Result<export::TexturedMesh> {
        let parts = scene.surfaces_at(j, &points);
        let cam = scene.camera(j);
        let proj: Vec<_> = parts.iter().map(|p| render::project(&cam, p, config.image_size)).collect();
        let vis = render::visibility(&proj, &topo, config.image_size);
        export::sample_texture(&parts, &faces, &cam, &records[j].rgb, &vis, &pairs)
    });
    for (j, mesh) in meshes.into_iter().enumerate() {
        let name = format!("meshes/inst{j}.obj");
        export::export_obj(&mesh?, &out.join(&name))?;
        outputs.push(name);
        outputs.push(format!("meshes/inst{j}.parts.json"));
        for i in 0..scene.n_parts() {
            let name = format!("parts/inst{j}.part{i}.hlpm");
            scene.part_network(i, j).save(&out.join(&name))?;
            outputs.push(name);
        }
        let name = format!("renders/inst{j}.png");
        render::save_gray_png(&scene.render(j, EVAL_SIGMA).silhouette, &out.join(&name))?;
        outputs.push(name);
    }
    timings.export_seconds = t.elapsed().as_secs_f64();

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        version_hash: version_hash(&config, opts.seed, &skeleton, &stage_names),
        seed: opts.seed,
        ensemble_dir: dir.to_path_buf(),
        reference,
        stages,
        outputs,
        config,
    };
    timings.total_seconds = start.elapsed().as_secs_f64();
    write_atomic(&out.join(TIMINGS), to_json(&timings).as_bytes())?;
    write_atomic(&out.join(MANIFEST), to_json(&manifest).as_bytes())?;
    Ok(manifest)
}

pub fn load_manifest(run: &Path) -> Result<RunManifest> {
    read_json(&run.join(MANIFEST))
}

pub fn load_model(run: &Path) -> Result<SavedModel> {
    read_json(&run.join(MODEL))
}

/// Cluster image to optional zero-based labels (0 is background).
pub fn cluster_labels(clusters: &Grid<u8>) -> (Grid<Option<usize>>, usize) {
    let labels = clusters.map(|&c| (c > 0).then(|| c as usize - 1));
    let n = clusters.data().iter().copied().max().unwrap_or(0) as usize;
    (labels, n)
}

/// Dense visible samples of every instance, for keypoint transfer.
pub fn surface_samples(scene: &Scene) -> Vec<SurfaceSamples> {
    let (points, faces) = template_points(TRANSFER_LEVEL);
    optim::par_map(scene.n_instances, |j| {
        SurfaceSamples::new(&scene.surfaces_at(j, &points), &faces, &scene.camera(j), scene.dims)
    })
}

/// Per-instance and part IOU against the pseudo-masks and clusters, plus
/// all-pairs PCK when keypoints are available.
pub fn evaluate(scene: &Scene, config: &EnsembleConfig, records: &[InstanceRecord], keypoints: Option<&export::KeypointFile>) -> Metrics {
    let dims = config.image_size;
    let per = optim::par_map(records.len(), |j| {
        let rb = scene.render(j, EVAL_SIGMA);
        let iou = export::iou(&export::threshold(&rb.silhouette, 0.5), &records[j].pseudo_mask);
        let pred = export::front_part_labels(&rb.projections, &scene.topology, dims);
        let (truth, n_truth) = cluster_labels(&records[j].part_clusters);
        let parts = export::part_iou(&pred, &truth, scene.n_parts(), n_truth, None);
        (iou, parts)
    });
    let (iou, part_iou): (Vec<f64>, Vec<Vec<f64>>) = per.into_iter().unzip();
    let pck = keypoints.map(|k| export::pck_matrix(&surface_samples(scene), k, dims, PCK_THRESHOLD));
    Metrics {
        mean_iou: iou.iter().sum::<f64>() / iou.len().max(1) as f64,
        iou,
        part_iou,
        pck,
    }
}

/// Evaluates a finished run. A missing keypoint file only disables PCK.
pub fn eval(run: &Path, keypoints: Option<&Path>, out: &Path) -> Result<Metrics> {
    let manifest = load_manifest(run)?;
    let model = load_model(run)?;
    let config = manifest.config;
    let records = ingest::load_ensemble(&manifest.ensemble_dir, &config)?;
    let scene = model.scene(&config)?;
    let kps = match keypoints {
        Some(p) if p.exists() => Some(export::load_keypoints(p)?),
        Some(p) => {
            warn!("keypoint file {} not found, reporting IOU only", p.display());
            None
        }
        None => None,
    };
    let metrics = evaluate(&scene, &config, &records, kps.as_ref());
    create_dir(out)?;
    write_atomic(&out.join(METRICS), to_json(&metrics).as_bytes())?;
    Ok(metrics)
}
