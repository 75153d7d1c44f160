//! Procedural test scenes: a 2D quadruped silhouette for skeleton
//! discovery and a synthetic multi-instance 3D ensemble with known
//! skeleton, poses and cameras.

use crate::diff::Tensor;
use crate::geom::{self, Vec3};
use crate::grid::{Grid, Mask};
use crate::export::{Keypoint, KeypointFile};
use crate::ingest::{self, EnsembleConfig, FeatureMap, InstanceRecord, StageSpec};
use crate::model::{self, Scene};
use crate::optim::orbit_camera;
use crate::render::{self, CameraPose};
use crate::skeleton3d::{Bone3d, Skeleton3D};

type P2 = [f64; 2];

fn segment_distance(p: P2, a: P2, b: P2) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * d[0], a[1] + t * d[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Capsule `(a, b, radius)` in normalized image coordinates.
pub type Capsule = (P2, P2, f64);

/// Index of the first capsule covering each pixel centre.
pub fn capsule_labels(dims: (usize, usize), capsules: &[Capsule]) -> Grid<Option<usize>> {
    let (h, w) = dims;
    Grid::from_fn(w, h, |x, y| {
        let (nx, ny) = crate::skeleton3d::pixel_to_normalized(x as f64 + 0.5, y as f64 + 0.5, dims);
        capsules
            .iter()
            .position(|&(a, b, r)| segment_distance([nx, ny], a, b) <= r)
    })
}

pub fn capsule_mask(dims: (usize, usize), capsules: &[Capsule]) -> Mask {
    capsule_labels(dims, capsules).map(|l| l.is_some())
}

/// Side view of a four-legged animal: body, neck and head, and two legs
/// splayed fore and aft at each shoulder.
pub fn quadruped_capsules() -> Vec<Capsule> {
    vec![
        ([-0.5, 0.0], [0.4, 0.0], 0.17),
        ([0.4, 0.0], [0.7, -0.35], 0.1),
        ([0.35, 0.05], [0.15, 0.7], 0.06),
        ([0.35, 0.05], [0.55, 0.7], 0.06),
        ([-0.45, 0.05], [-0.65, 0.7], 0.06),
        ([-0.45, 0.05], [-0.25, 0.7], 0.06),
    ]
}

pub fn quadruped_mask(size: usize) -> Mask {
    capsule_mask((size, size), &quadruped_capsules())
}

/// Feature map giving every capsule its own one-hot feature except that
/// the legs share one (`dim >= 3`).
pub fn quadruped_features(size: usize, dim: usize) -> FeatureMap {
    let labels = capsule_labels((size, size), &quadruped_capsules());
    let mut fm = FeatureMap::new(size, size, dim);
    for (x, y, l) in labels.iter_xy() {
        let k = match l {
            None => continue,
            Some(0) => 0,
            Some(1) => 1,
            Some(_) => 2,
        };
        fm.at_mut(x, y)[k] = 1.0;
    }
    fm
}

/// Ground-truth 3D quadruped: joints, bones and symmetric leg pairs.
pub fn quadruped_skeleton(image_size: (usize, usize)) -> Skeleton3D {
    let joints: Vec<Vec3> = vec![
        [0.0, -0.05, 0.0],
        [0.35, -0.05, 0.0],
        [-0.4, -0.05, 0.0],
        [0.65, -0.35, 0.0],
        [0.35, 0.55, 0.14],
        [0.35, 0.55, -0.14],
        [-0.4, 0.55, 0.14],
        [-0.4, 0.55, -0.14],
    ];
    let bone = |parent, child, radius| Bone3d {
        parent,
        child,
        radius,
    };
    let bones = vec![
        bone(0, 1, 0.16),
        bone(0, 2, 0.16),
        bone(1, 3, 0.09),
        bone(1, 4, 0.06),
        bone(1, 5, 0.06),
        bone(2, 6, 0.06),
        bone(2, 7, 0.06),
    ];
    let mut sk = Skeleton3D {
        joint_radii: vec![0.16, 0.16, 0.16, 0.09, 0.06, 0.06, 0.06, 0.06],
        joints: joints.clone(),
        bones,
        root: 0,
        sym_pairs: vec![(4, 5), (6, 7)],
        rest_transforms: vec![],
        image_size,
    };
    sk.rest_transforms = sk.rest_transforms_for(&joints).expect("non-degenerate bones");
    sk
}

pub const PART_COLORS: [[f32; 3]; 8] = [
    [0.55, 0.35, 0.2],
    [0.6, 0.4, 0.25],
    [0.9, 0.8, 0.6],
    [0.2, 0.2, 0.7],
    [0.7, 0.2, 0.2],
    [0.2, 0.6, 0.3],
    [0.8, 0.6, 0.1],
    [0.4, 0.4, 0.4],
];

/// One rendered instance with its ground truth.
#[derive(Clone, Debug)]
pub struct FixtureInstance {
    pub camera: CameraPose,
    /// Per-bone local axis-angle rotations.
    pub pose: Tensor,
    pub record: InstanceRecord,
    pub joints: Vec<Vec3>,
    /// Posed joints projected to pixels.
    pub keypoints: Vec<P2>,
    /// Per-pixel front-most part (`None` on background).
    pub part_labels: Grid<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct SyntheticEnsemble {
    pub skeleton: Skeleton3D,
    pub config: EnsembleConfig,
    pub truth: Scene,
    pub instances: Vec<FixtureInstance>,
}

impl SyntheticEnsemble {
    pub fn records(&self) -> Vec<InstanceRecord> {
        self.instances.iter().map(|i| i.record.clone()).collect()
    }
}

/// Small-scale settings that keep a full fit within a few minutes.
pub fn fixture_config(n_instances: usize, size: usize) -> EnsembleConfig {
    let mut c = EnsembleConfig::new(n_instances, (size, size));
    c.reference_index = Some(0);
    c.icosphere_level = 2;
    c.hidden_width = 16;
    c.pe_frequencies = vec![1.0, 2.0, 4.0, 8.0];
    c.shared_depth = 2;
    c.sem_pixels = 256;
    c.sem_points = 32;
    c.em_inner_steps = 50;
    c.convergence_window = 40;
    c.stage_schedule = vec![
        StageSpec {
            name: "camera".into(),
            steps: 100,
            lr: 1e-2,
        },
        StageSpec {
            name: "shared".into(),
            steps: 250,
            lr: 5e-3,
        },
        StageSpec {
            name: "instance".into(),
            steps: 100,
            lr: 2e-3,
        },
    ];
    c
}

/// Feature dimension of the synthetic ensemble.
pub const FIXTURE_FEATURE_DIM: usize = 8;

/// Constant feature of quadruped part `i`: a class direction per body
/// region, with a small left/right component on the legs so mirrored legs
/// are similar but distinguishable.
pub fn part_feature(i: usize) -> [f32; FIXTURE_FEATURE_DIM] {
    let mut f = [0.0f32; FIXTURE_FEATURE_DIM];
    match i {
        0..=2 => f[i] = 1.0,
        3..=6 => {
            f[if i < 5 { 3 } else { 4 }] = 1.0;
            f[if i % 2 == 1 { 5 } else { 6 }] = 0.35;
        }
        _ => f[7] = 1.0,
    }
    let n = f.iter().map(|v| v * v).sum::<f32>().sqrt();
    f.map(|v| v / n)
}

/// Three (or more) renders of a deformed quadruped under different poses
/// and cameras. Instance 0 is seen from the reference camera.
pub fn synthetic_ensemble(n_instances: usize, size: usize, seed: u64) -> SyntheticEnsemble {
    let config = fixture_config(n_instances, size);
    let dims = config.image_size;
    let skeleton = quadruped_skeleton(dims);
    let mut truth = Scene::new(skeleton.clone(), &config, FIXTURE_FEATURE_DIM, seed);
    // shared shape detail: a gentle bulge on every part
    for i in 0..truth.n_parts() {
        let bo = truth.params.get_mut(&model::layer_name(None, i, 1, "bo")).expect("layer 1");
        bo.data = vec![0.0, 0.0, 0.0];
        let wo = truth.params.get_mut(&model::layer_name(None, i, 1, "wo")).expect("layer 1");
        for (k, v) in wo.data.iter_mut().enumerate() {
            *v = 0.02 * (((k * 7 + i * 3) % 5) as f64 - 2.0);
        }
    }
    let views = [(0.0, 0.0), (40f64.to_radians(), 0.15), (-25f64.to_radians(), -0.1), (110f64.to_radians(), 0.2)];
    let gaits = [0.3, 0.2, -0.25, 0.35];
    let mut instances = Vec::with_capacity(n_instances);
    for j in 0..n_instances {
        let (az, el) = views[j % views.len()];
        let camera = if j == 0 {
            CameraPose::reference(config.camera_distance)
        } else {
            orbit_camera(az, el, config.camera_distance, config.focal)
        };
        truth.set_camera(j, &camera);
        let g = gaits[j % gaits.len()];
        let mut pose = Tensor::zeros(skeleton.num_bones(), 3);
        // legs swing in the sagittal plane (about z), opposite per side
        for (b, sign) in [(3, 1.0), (4, -1.0), (5, -1.0), (6, 1.0)] {
            *pose.at_mut(b, 2) = sign * g;
        }
        *pose.at_mut(2, 2) = 0.5 * g;
        truth.params.insert(model::pose_name(j), pose.clone());
        instances.push(render_instance(&truth, j, camera, pose));
    }
    SyntheticEnsemble {
        skeleton,
        config,
        truth,
        instances,
    }
}

/// Hard silhouette, front-most part labels, one-hot part features and
/// flat part colours of instance `j` of `scene`.
fn render_instance(scene: &Scene, j: usize, camera: CameraPose, pose: Tensor) -> FixtureInstance {
    let dims = scene.dims;
    let (h, w) = dims;
    let surfaces = scene.surfaces(j);
    let projections: Vec<Vec<render::Projection>> =
        surfaces.iter().map(|p| render::project(&camera, p, dims)).collect();
    let depths: Vec<Tensor> = projections
        .iter()
        .map(|p| render::depth_buffer(std::slice::from_ref(p), &scene.topology, dims))
        .collect();
    let part_labels = Grid::from_fn(w, h, |x, y| {
        let mut best: Option<(usize, f64)> = None;
        for (i, d) in depths.iter().enumerate() {
            let z = d.at(y, x);
            if z.is_finite() && best.is_none_or(|(_, b)| z < b) {
                best = Some((i, z));
            }
        }
        best.map(|b| b.0)
    });
    let mut fm = FeatureMap::new(h, w, FIXTURE_FEATURE_DIM);
    let mut rgb = Grid::new(w, h, [0.0f32; 3]);
    let mut clusters = Grid::new(w, h, 0u8);
    for (x, y, l) in part_labels.iter_xy() {
        if let Some(i) = *l {
            fm.at_mut(x, y).copy_from_slice(&part_feature(i));
            rgb.set(x, y, PART_COLORS[i % PART_COLORS.len()]);
            clusters.set(x, y, (i + 1) as u8);
        }
    }
    let mask = part_labels.map(|l| l.is_some());
    let (joints, _) = scene.posed(j);
    let keypoints = render::project(&camera, &joints, dims)
        .iter()
        .map(|p| [p.u, p.v])
        .collect();
    let record = InstanceRecord {
        rgb,
        pseudo_mask: mask,
        feature_map: fm,
        part_clusters: clusters,
    };
    FixtureInstance {
        camera,
        pose,
        record,
        joints,
        keypoints,
        part_labels,
    }
}

/// Unit-sphere fitting scene: one bone whose primitive is a sphere of
/// radius equal to the bone length.
pub fn sphere_skeleton(radius: f64, image_size: (usize, usize)) -> Skeleton3D {
    let joints = vec![[0.0, -radius / 2.0, 0.0], [0.0, radius / 2.0, 0.0]];
    let mut sk = Skeleton3D {
        joint_radii: vec![radius, radius],
        joints: joints.clone(),
        bones: vec![Bone3d {
            parent: 0,
            child: 1,
            radius,
        }],
        root: 0,
        sym_pairs: vec![],
        rest_transforms: vec![],
        image_size,
    };
    sk.rest_transforms = sk.rest_transforms_for(&joints).expect("non-degenerate");
    sk
}

/// Filled disk mask of `radius` (normalized units) centred at `centre`.
pub fn disk_mask(size: usize, centre: P2, radius: f64) -> Mask {
    capsule_mask((size, size), &[(centre, centre, radius)])
}

pub fn mask_to_tensor(m: &Mask) -> Tensor {
    let (h, w) = m.dims();
    Tensor::new(h, w, m.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
}

/// Rest-length of every bone, for checks against the fixture.
pub fn bone_lengths(sk: &Skeleton3D) -> Vec<f64> {
    sk.bones
        .iter()
        .map(|b| geom::norm(geom::sub(sk.joints[b.child], sk.joints[b.parent])))
        .collect()
}

/// Symmetric pairs whose joints are both leaves (feet, in the quadruped).
pub fn leaf_pairs(sk: &Skeleton3D) -> usize {
    let leaf = |j: usize| !sk.bones.iter().any(|b| b.parent == j);
    sk.sym_pairs.iter().filter(|&&(a, b)| leaf(a) && leaf(b)).count()
}

impl SyntheticEnsemble {
    /// Writes the ensemble files, `config.json`, and `keypoints.json` with
    /// the projected posed joints (visible when they land on the mask).
    pub fn write(&self, dir: &std::path::Path) -> crate::Result<()> {
        ingest::write_ensemble(dir, &self.records())?;
        let cfg = dir.join("config.json");
        std::fs::write(&cfg, self.config.to_json()).map_err(|e| crate::Error::io(&cfg, e))?;
        let (h, w) = self.config.image_size;
        let kps: KeypointFile = self
            .instances
            .iter()
            .map(|inst| {
                inst.keypoints
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| (0.0..w as f64).contains(&p[0]) && (0.0..h as f64).contains(&p[1]))
                    .map(|(k, p)| Keypoint {
                        name: format!("joint{k}"),
                        x: p[0] / w as f64,
                        y: p[1] / h as f64,
                        visible: *inst.record.pseudo_mask.get(p[0] as usize, p[1] as usize),
                    })
                    .collect()
            })
            .collect();
        let path = dir.join("keypoints.json");
        let json = serde_json::to_string_pretty(&kps).expect("keypoints serialize");
        std::fs::write(&path, json).map_err(|e| crate::Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton2d;
    use crate::skeleton3d;

    #[test]
    fn quadruped_discovery_finds_both_foot_pairs() {
        let size = 64;
        let mask = quadruped_mask(size);
        let (tree, _, _) = skeleton2d::extract(&mask).unwrap();
        let feat = quadruped_features(size, 4);
        let sk = skeleton3d::discover(&tree, &feat, 1.0, 0.5, (size, size)).unwrap();
        assert_eq!(leaf_pairs(&sk), 2, "{:?}", sk.sym_pairs);
    }

    #[test]
    fn ensemble_renders_are_consistent() {
        let e = synthetic_ensemble(3, 64, 1);
        for inst in &e.instances {
            let fg = inst.record.pseudo_mask.data().iter().filter(|&&b| b).count();
            assert!(fg > 100, "{fg}");
            for (x, y, &m) in inst.record.pseudo_mask.iter_xy() {
                assert_eq!(m, *inst.record.part_clusters.get(x, y) != 0);
            }
        }
        assert_eq!(e.skeleton.sym_pairs.len(), 2);
        let r = &e.instances[0].record;
        let (tree, _, _) = skeleton2d::extract(&r.pseudo_mask).unwrap();
        let sk = skeleton3d::discover(&tree, &r.feature_map, 1.0, 0.5, r.dims()).unwrap();
        assert_eq!(leaf_pairs(&sk), 2, "{:?}", sk.sym_pairs);
    }

    #[test]
    fn written_ensemble_loads_back() {
        let e = synthetic_ensemble(2, 48, 3);
        let dir = tempfile::tempdir().unwrap();
        e.write(dir.path()).unwrap();
        let cfg = EnsembleConfig::load(&dir.path().join("config.json")).unwrap();
        assert_eq!(cfg, e.config);
        let back = ingest::load_ensemble(dir.path(), &cfg).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].pseudo_mask, e.instances[1].record.pseudo_mask);
        let kps = crate::export::load_keypoints(&dir.path().join("keypoints.json")).unwrap();
        assert_eq!(kps.len(), 2);
        assert!(kps[0].iter().any(|k| k.visible));
    }
}
