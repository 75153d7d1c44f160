//! Multi-stage fitting of a [`Scene`] to an ensemble of observations.

use std::collections::BTreeMap;

use log::{debug, info, warn};

use crate::diff::{Adam, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom;
use crate::ingest::{EnsembleConfig, FeatureMap, InstanceRecord, StageSpec};
use crate::losses::{self, LossBreakdown, LossRecord, SemanticTargets};
use crate::model::{self, hash_params, Leaves, Scene};
use crate::render::{self, CameraPose};

/// Relative rise of the loss over its first value that counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Feature-network learning rate in the regression step.
pub const FEATURE_LR: f64 = 1e-2;
/// Minimum relative improvement of the best loss within the trailing
/// window for a stage to keep going.
pub const CONVERGENCE_TOL: f64 = 1e-4;

pub(crate) fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// One instance's targets in optimizer form.
#[derive(Clone, Debug)]
pub struct Observation {
    pub mask: Tensor,
    pub features: FeatureMap,
    /// Sampled foreground pixels, normalized by `max(h, w)`.
    pub sem_pixels: Vec<[f64; 2]>,
    /// Features at `sem_pixels` (`n x d`).
    pub sem_features: Tensor,
}

impl Observation {
    pub fn new(record: &InstanceRecord, sem_pixels: usize, seed: u64) -> Self {
        let (h, w) = record.dims();
        let mask = Tensor::new(
            h,
            w,
            record.pseudo_mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        );
        let fg: Vec<usize> = (0..h * w).filter(|&k| record.pseudo_mask.data()[k]).collect();
        let picked = losses::stratified_sample(&fg, sem_pixels, seed);
        let s = h.max(w) as f64;
        let d = record.feature_map.dim;
        let mut feats = Vec::with_capacity(picked.len() * d);
        let mut pixels = Vec::with_capacity(picked.len());
        for &k in &picked {
            let (x, y) = (k % w, k / w);
            pixels.push([(x as f64 + 0.5) / s, (y as f64 + 0.5) / s]);
            feats.extend(record.feature_map.at(x, y).iter().map(|&v| v as f64));
        }
        Observation {
            mask,
            features: record.feature_map.clone(),
            sem_pixels: pixels,
            sem_features: Tensor::new(picked.len(), d, feats),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.shape()
    }
}

/// Sampled template points per part and the semantic targets built from
/// the current feature networks.
#[derive(Clone, Debug)]
pub struct SemanticState {
    pub point_indices: Vec<Vec<usize>>,
    pub targets: Vec<SemanticTargets>,
}

impl SemanticState {
    pub fn new(scene: &Scene, obs: &[Observation], config: &EnsembleConfig, seed: u64) -> Self {
        let all: Vec<usize> = (0..scene.template.len()).collect();
        let point_indices = (0..scene.n_parts())
            .map(|i| losses::stratified_sample(&all, config.sem_points, seed.wrapping_add(i as u64)))
            .collect();
        let mut s = SemanticState {
            point_indices,
            targets: Vec::new(),
        };
        s.refresh(scene, obs, config.alpha_sem);
        s
    }

    /// Recomputes the feature costs after the feature networks changed.
    pub fn refresh(&mut self, scene: &Scene, obs: &[Observation], alpha: f64) {
        let mut rows = Vec::new();
        let mut dim = 0;
        for (i, idx) in self.point_indices.iter().enumerate() {
            let x = gather(&scene.template.points, idx);
            let q = scene.features[i].query_points(&x);
            dim = q.cols;
            rows.extend(q.data);
        }
        let n: usize = self.point_indices.iter().map(Vec::len).sum();
        let q = Tensor::new(n, dim, rows);
        self.targets = par_map(obs.len(), |j| {
            SemanticTargets::new(obs[j].sem_pixels.clone(), &obs[j].sem_features, &q, alpha)
        });
    }
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * t.cols);
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::new(idx.len(), t.cols, data)
}

/// Parameters a stage may change.
pub fn stage_trainable(stage: &str) -> fn(&str) -> bool {
    fn camera(k: &str) -> bool {
        k.ends_with(".camera.rot") || k.ends_with(".camera.trans")
    }
    fn shared(k: &str) -> bool {
        k == model::REST_JOINTS || k.starts_with("part") || k.ends_with(".pose") || camera(k)
    }
    fn instance(k: &str) -> bool {
        (k.starts_with("inst") && k.contains(".part")) || k.ends_with(".pose") || camera(k)
    }
    fn nothing(_: &str) -> bool {
        false
    }
    match stage {
        "camera" => camera,
        "shared" => shared,
        "instance" => instance,
        _ => nothing,
    }
}

/// What one instance's forward pass needs beyond the scene.
pub struct LossContext<'a> {
    pub config: &'a EnsembleConfig,
    pub obs: &'a [Observation],
    pub sem: &'a SemanticState,
    pub sigma: f64,
}

/// Unweighted losses of instance `j` and, if anything is trainable, the
/// gradients of the weighted total.
pub fn instance_loss(
    scene: &Scene,
    ctx: &LossContext,
    j: usize,
    trainable: &dyn Fn(&str) -> bool,
) -> (LossBreakdown, BTreeMap<String, Tensor>) {
    let cfg = ctx.config;
    let dims = scene.dims;
    let mut tape = Tape::new();
    let mut leaves = Leaves::new(&scene.params, trainable);
    let iv = scene.instance_var(&mut tape, &mut leaves, j, &scene.template.points);

    let mut proj = Vec::with_capacity(scene.n_parts());
    let mut masks = Vec::with_capacity(scene.n_parts());
    for &w in &iv.world {
        let c = render::camera_points_var(&mut tape, w, iv.camera_rotation, iv.camera_translation);
        let p = render::project_var(&mut tape, c, scene.focal, dims);
        masks.push(render::part_mask_var(&mut tape, p, &scene.topology, ctx.sigma, dims));
        proj.push(p);
    }
    let sil = render::soft_union_var(&mut tape, &masks, dims);
    let obs = &ctx.obs[j];

    let mut terms: Vec<(&str, Var)> = Vec::new();
    terms.push(("sil", losses::loss_sil_var(&mut tape, sil, &obs.mask)));
    let boxes: Vec<_> = masks
        .iter()
        .map(|&m| render::part_box(tape.value(m), 0.1))
        .collect();
    if let Some(p) = losses::loss_part_var(&mut tape, sil, &obs.mask, &boxes, cfg.zoom_factor) {
        terms.push(("part", p));
    }
    let sampled: Vec<Var> = proj
        .iter()
        .zip(&ctx.sem.point_indices)
        .map(|(&p, idx)| tape.gather_rows(p, idx))
        .collect();
    let cat = tape.concat_rows(&sampled);
    let normalized = tape.scale(cat, 1.0 / dims.0.max(dims.1) as f64);
    terms.push(("sem", losses::loss_sem_var(&mut tape, normalized, &ctx.sem.targets[j])));
    terms.push((
        "rot",
        losses::loss_rot_var(&mut tape, &iv.posed.rotations, &iv.posed.rest_rotations),
    ));
    let pairs = &scene.skeleton.sym_pairs;
    if cfg.sym_on_posed_joints {
        terms.push(("sym", losses::loss_sym_var(&mut tape, iv.posed.joints, pairs)));
    } else if j == 0 {
        terms.push(("sym", losses::loss_sym_var(&mut tape, iv.posed.rest_joints, pairs)));
    }
    let n = scene.n_parts().max(1) as f64;
    let lap: Vec<Var> = iv
        .local
        .iter()
        .map(|&l| losses::loss_lap_var(&mut tape, l, &scene.laplacian))
        .collect();
    let norm: Vec<Var> = iv
        .local
        .iter()
        .map(|&l| losses::loss_norm_var(&mut tape, l, &scene.face_pairs))
        .collect();
    for (name, parts) in [("lap", lap), ("norm", norm)] {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = tape.add(acc, p);
        }
        terms.push((name, tape.scale(acc, 1.0 / n)));
    }

    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for &(name, v) in &terms {
        breakdown.set(name, tape.value(v).item());
        let w = cfg.weight(name);
        if w != 0.0 {
            let s = tape.scale(v, w);
            total = Some(match total {
                Some(t) => tape.add(t, s),
                None => s,
            });
        }
    }
    let breakdown = breakdown.with_total(cfg);
    let trainable_leaves = leaves.trainable();
    let mut grads = BTreeMap::new();
    if let (Some(t), false) = (total, trainable_leaves.is_empty()) {
        let g = tape.backward(t).expect("scalar total");
        for (name, v) in trainable_leaves {
            grads.insert(name, g.get(v));
        }
    }
    (breakdown, grads)
}

fn sum_breakdowns(parts: &[LossBreakdown], config: &EnsembleConfig) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    for name in crate::ingest::LOSS_NAMES {
        out.set(name, parts.iter().map(|b| b.get(name)).sum());
    }
    out.with_total(config)
}

/// Losses summed over instances and gradients reduced in instance order.
pub fn ensemble_loss(
    scene: &Scene,
    ctx: &LossContext,
    trainable: &(dyn Fn(&str) -> bool + Sync),
) -> (LossBreakdown, BTreeMap<String, Tensor>) {
    let per = par_map(scene.n_instances, |j| instance_loss(scene, ctx, j, trainable));
    let parts: Vec<LossBreakdown> = per.iter().map(|p| p.0).collect();
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for (_, g) in per {
        for (k, t) in g {
            match grads.get_mut(&k) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    grads.insert(k, t);
                }
            }
        }
    }
    (sum_breakdowns(&parts, ctx.config), grads)
}

/// Camera looking at the origin from azimuth `az` and elevation `el`.
pub fn orbit_camera(az: f64, el: f64, distance: f64, focal: f64) -> CameraPose {
    let r = geom::mat_mul(&geom::rot_x(el), &geom::rot_y(az));
    CameraPose {
        rotation: geom::axis_angle(&r),
        translation: [0.0, 0.0, distance],
        focal,
    }
}

/// Azimuth of a camera in the convention of [`orbit_camera`].
pub fn camera_azimuth(cam: &CameraPose) -> f64 {
    let r = cam.rotation_matrix();
    // viewing direction in world coordinates is the third row of R
    let d = r[2];
    (-d[0]).atan2(d[2])
}

/// Absolute azimuth difference wrapped to `[0, pi]`.
pub fn azimuth_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// The `(azimuth, elevation)` grid of the camera search, azimuth-major.
pub fn camera_grid(config: &EnsembleConfig) -> Vec<(f64, f64)> {
    let (na, ne) = config.camera_grid;
    let r = config.camera_elevation_range;
    let mut out = Vec::with_capacity(na * ne);
    for a in 0..na {
        for e in 0..ne {
            let el = if ne == 1 {
                0.0
            } else {
                -r + 2.0 * r * e as f64 / (ne - 1) as f64
            };
            out.push((std::f64::consts::TAU * a as f64 / na as f64, el));
        }
    }
    out
}

/// Index of the grid camera with the lowest `w_sil L_sil + w_sem L_sem`
/// for instance `j` at its current pose; ties go to the lowest index.
pub fn camera_search(scene: &Scene, ctx: &LossContext, j: usize) -> (usize, Vec<f64>) {
    let cfg = ctx.config;
    let grid = camera_grid(cfg);
    let scores: Vec<f64> = grid
        .iter()
        .map(|&(az, el)| {
            let mut s = scene.clone();
            s.set_camera(j, &orbit_camera(az, el, cfg.camera_distance, cfg.focal));
            let (b, _) = instance_loss(&s, ctx, j, &|_| false);
            cfg.weight("sil") * b.sil + cfg.weight("sem") * b.sem
        })
        .collect();
    let mut best = 0;
    for (k, &v) in scores.iter().enumerate() {
        if v < scores[best] {
            best = k;
        }
    }
    (best, scores)
}

/// E-step plus regression of every feature network. Returns the mean
/// cosine between fitted features and targets over the points used.
pub fn em_update_features(
    scene: &mut Scene,
    obs: &[Observation],
    instances: &[usize],
    steps: usize,
) -> f64 {
    let dims = scene.dims;
    let per_instance: Vec<(Vec<Vec<render::Projection>>, Vec<Vec<bool>>)> = par_map(instances.len(), |k| {
        let j = instances[k];
        let cam = scene.camera(j);
        let proj: Vec<_> = scene
            .surfaces(j)
            .iter()
            .map(|p| render::project(&cam, p, dims))
            .collect();
        let vis = render::visibility(&proj, &scene.topology, dims);
        (proj, vis)
    });
    let m = scene.template.len();
    let scene_ref = &*scene;
    let fitted: Vec<(crate::partmodel::FeatureMLP, f64, usize)> = par_map(scene.n_parts(), |i| {
        let mut f = scene_ref.features[i].clone();
        let d = f.dim();
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        for x in 0..m {
            let mut acc = vec![0.0; d];
            let mut count = 0;
            for (k, &j) in instances.iter().enumerate() {
                let (proj, vis) = &per_instance[k];
                let p = proj[i][x];
                if !vis[i][x] || p.u < 0.0 || p.v < 0.0 {
                    continue;
                }
                let (px, py) = (p.u.floor() as usize, p.v.floor() as usize);
                if px >= dims.1 || py >= dims.0 {
                    continue;
                }
                for (a, &v) in acc.iter_mut().zip(obs[j].features.at(px, py)) {
                    *a += v as f64;
                }
                count += 1;
            }
            let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            if count == 0 || n == 0.0 {
                continue;
            }
            xs.extend_from_slice(scene_ref.template.points.row_slice(x));
            ts.extend(acc.iter().map(|v| v / n));
        }
        let rows = xs.len() / 3;
        if rows == 0 {
            return (f, 0.0, 0);
        }
        let x = Tensor::new(rows, 3, xs);
        let t = Tensor::new(rows, d, ts);
        f.fit(&x, &t, steps, FEATURE_LR);
        let q = f.query_points(&x);
        let cos: f64 = q.data.iter().zip(&t.data).map(|(a, b)| a * b).sum();
        (f, cos, rows)
    });
    let mut cos_sum = 0.0;
    let mut rows = 0;
    for (i, (f, c, r)) in fitted.into_iter().enumerate() {
        if r == 0 {
            warn!("part {i} is invisible in every instance; feature network left unchanged");
        }
        scene.features[i] = f;
        cos_sum += c;
        rows += r;
    }
    if rows == 0 {
        0.0
    } else {
        cos_sum / rows as f64
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct StageReport {
    pub name: String,
    pub steps: usize,
    pub skipped_steps: usize,
    pub stopped_early: bool,
    pub initial: LossBreakdown,
    pub last: LossBreakdown,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
}

/// Mutable optimization state shared across stages.
pub struct Fit<'a> {
    pub scene: Scene,
    pub obs: &'a [Observation],
    pub sem: SemanticState,
    pub config: &'a EnsembleConfig,
    pub reference: usize,
}

impl<'a> Fit<'a> {
    pub fn new(scene: Scene, obs: &'a [Observation], config: &'a EnsembleConfig, reference: usize, seed: u64) -> Self {
        let sem = SemanticState::new(&scene, obs, config, seed);
        Fit {
            scene,
            obs,
            sem,
            config,
            reference,
        }
    }

    pub fn sigma(&self, stage_index: usize) -> f64 {
        self.config.sigma_px * self.config.sigma_anneal.powi(stage_index as i32)
    }

    fn context(&self, sigma: f64) -> LossContext<'_> {
        LossContext {
            config: self.config,
            obs: self.obs,
            sem: &self.sem,
            sigma,
        }
    }

    pub fn evaluate(&self, sigma: f64) -> LossBreakdown {
        ensemble_loss(&self.scene, &self.context(sigma), &|_| false).0
    }

    pub fn update_features(&mut self, instances: &[usize]) -> f64 {
        let cos = em_update_features(&mut self.scene, self.obs, instances, self.config.em_inner_steps);
        self.sem.refresh(&self.scene, self.obs, self.config.alpha_sem);
        debug!("feature update over {instances:?}: mean cosine {cos:.4}");
        cos
    }

    /// Grid search for every instance's camera; the features are first
    /// fitted to the reference instance seen from the reference camera.
    pub fn initialize_cameras(&mut self, sigma: f64) {
        let reference_cam = CameraPose::reference(self.config.camera_distance);
        for j in 0..self.scene.n_instances {
            self.scene.set_camera(j, &reference_cam);
        }
        self.update_features(&[self.reference]);
        let grid = camera_grid(self.config);
        let ctx = self.context(sigma);
        let picks = par_map(self.scene.n_instances, |j| camera_search(&self.scene, &ctx, j).0);
        for (j, k) in picks.into_iter().enumerate() {
            let (az, el) = grid[k];
            info!("instance {j}: camera grid pick azimuth {:.1} deg, elevation {:.1} deg", az.to_degrees(), el.to_degrees());
            self.scene
                .set_camera(j, &orbit_camera(az, el, self.config.camera_distance, self.config.focal));
        }
    }

    /// Runs one stage of the schedule; `log` receives every step's losses.
    pub fn run_stage(
        &mut self,
        stage_index: usize,
        spec: &StageSpec,
        log: &mut dyn FnMut(&LossRecord),
    ) -> Result<StageReport> {
        let sigma = self.sigma(stage_index);
        let trainable = stage_trainable(&spec.name);
        let frozen = |k: &str| !trainable(k);
        let frozen_hash_before = hash_params(&self.scene.params, frozen);
        let all: Vec<usize> = (0..self.scene.n_instances).collect();
        if spec.name == "camera" {
            self.initialize_cameras(sigma);
        }
        self.update_features(&all);

        let names: Vec<String> = self.scene.params.keys().filter(|k| trainable(k)).cloned().collect();
        let mut adam = Adam::new(spec.lr);
        let window = self.config.convergence_window.max(1);
        let mut history: Vec<f64> = Vec::new();
        let mut initial = None;
        let mut skipped = 0;
        let mut stopped_early = false;
        let mut steps = 0;
        for step in 0..spec.steps {
            if step > 0 && step % self.config.em_period.max(1) == 0 && spec.name != "camera" {
                self.update_features(&all);
            }
            let (losses, grads) = ensemble_loss(&self.scene, &self.context(sigma), &trainable);
            log(&LossRecord {
                stage: spec.name.clone(),
                step,
                losses,
            });
            let first = *initial.get_or_insert(losses);
            if losses.total > DIVERGENCE_FACTOR * first.total && first.total > 0.0 {
                return Err(Error::Divergence {
                    stage: spec.name.clone(),
                    step,
                    total: losses.total,
                    initial: first.total,
                });
            }
            steps = step + 1;
            let finite = losses.is_finite() && grads.values().all(Tensor::all_finite);
            if !finite {
                skipped += 1;
                warn!("stage {} step {step}: non-finite loss or gradient, step skipped ({skipped} so far)", spec.name);
                continue;
            }
            let g: Vec<Tensor> = names
                .iter()
                .map(|k| {
                    grads
                        .get(k)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(self.scene.params[k].rows, self.scene.params[k].cols))
                })
                .collect();
            let mut params: Vec<&mut Tensor> = self
                .scene
                .params
                .iter_mut()
                .filter(|(k, _)| trainable(k))
                .map(|(_, v)| v)
                .collect();
            adam.step(&mut params, &g);

            history.push(losses.total);
            if history.len() > window {
                let before = history[..history.len() - window]
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                let recent = history[history.len() - window..]
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                if recent > before - CONVERGENCE_TOL * before.abs() {
                    stopped_early = true;
                    info!("stage {} converged at step {step}", spec.name);
                    break;
                }
            }
        }
        let last = self.evaluate(sigma);
        let report = StageReport {
            name: spec.name.clone(),
            steps,
            skipped_steps: skipped,
            stopped_early,
            initial: initial.unwrap_or(last),
            last,
            frozen_hash_before,
            frozen_hash_after: hash_params(&self.scene.params, frozen),
        };
        info!(
            "stage {}: {} steps, total {:.5} -> {:.5}",
            report.name, report.steps, report.initial.total, report.last.total
        );
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_sets_partition_as_declared() {
        let cam = stage_trainable("camera");
        let shared = stage_trainable("shared");
        let inst = stage_trainable("instance");
        assert!(cam("inst2.camera.rot") && !cam("inst2.pose") && !cam("part0.layer1.wh"));
        assert!(shared("part3.layer2.bo") && shared(model::REST_JOINTS) && shared("inst0.pose"));
        assert!(!shared("inst0.part3.layer5.bo"));
        assert!(inst("inst0.part3.layer5.bo") && !inst("part3.layer2.bo") && !inst(model::REST_JOINTS));
        assert!(!stage_trainable("bogus")("inst0.pose"));
    }

    #[test]
    fn orbit_azimuth_round_trip() {
        for &(az, el) in &[(0.0, 0.0), (0.7, 0.3), (-2.5, -0.4), (3.0, 0.1)] {
            let cam = orbit_camera(az, el, 5.0, 5.0);
            assert!(azimuth_error(camera_azimuth(&cam), az) < 1e-9, "{az} {el}");
        }
        assert!((azimuth_error(0.1, std::f64::consts::TAU - 0.1) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn grid_is_azimuth_major() {
        let mut cfg = EnsembleConfig::new(1, (8, 8));
        cfg.camera_grid = (4, 3);
        cfg.camera_elevation_range = 0.5;
        let g = camera_grid(&cfg);
        assert_eq!(g.len(), 12);
        assert_eq!(g[0], (0.0, -0.5));
        assert_eq!(g[1], (0.0, 0.0));
        assert!((g[3].0 - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }
}
