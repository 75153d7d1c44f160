//! The articulated ensemble: rest skeleton, per-part networks, per-instance
//! poses and cameras, all held in a flat named parameter store.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::diff::{Tape, Tensor, Var};
use crate::geom::{self, Mat3, Vec3};
use crate::ingest::EnsembleConfig;
use crate::losses::{FacePairs, Laplacian};
use crate::partmodel::{DeformLayer, FeatureMLP, LayerVars, PartDeformMLP, PartTemplate};
use crate::render::{self, CameraPose, MeshTopology};
use crate::skeleton3d::Skeleton3D;

pub type ParamStore = BTreeMap<String, Tensor>;

pub const REST_JOINTS: &str = "rest.joints";

pub fn camera_rotation_name(j: usize) -> String {
    format!("inst{j}.camera.rot")
}

pub fn camera_translation_name(j: usize) -> String {
    format!("inst{j}.camera.trans")
}

pub fn pose_name(j: usize) -> String {
    format!("inst{j}.pose")
}

/// Name of a layer tensor; `instance` is `None` for shared layers.
pub fn layer_name(instance: Option<usize>, part: usize, layer: usize, field: &str) -> String {
    match instance {
        Some(j) => format!("inst{j}.part{part}.layer{layer}.{field}"),
        None => format!("part{part}.layer{layer}.{field}"),
    }
}

/// Hex SHA-256 over the names and bit patterns of the selected parameters.
pub fn hash_params(store: &ParamStore, select: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    for (k, t) in store.iter().filter(|(k, _)| select(k)) {
        h.update(k.as_bytes());
        h.update((t.rows as u64).to_le_bytes());
        h.update((t.cols as u64).to_le_bytes());
        for v in &t.data {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Semi-axes of the undeformed ellipsoid for a bone of `length` and
/// `radius`, in units of the bone length.
pub fn primitive_axes(length: f64, radius: f64) -> Vec3 {
    let rho = (radius / length.max(1e-9)).clamp(0.05, 1.0);
    [rho, rho, 0.5 + 0.5 * rho]
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub skeleton: Skeleton3D,
    pub template: PartTemplate,
    pub topology: MeshTopology,
    pub laplacian: Laplacian,
    pub face_pairs: FacePairs,
    /// Primitive semi-axes per part (one part per bone).
    pub axes: Vec<Vec3>,
    /// Fixed encodings per part; weights live in `params`.
    pub networks: Vec<PartDeformMLP>,
    pub features: Vec<FeatureMLP>,
    pub params: ParamStore,
    pub n_instances: usize,
    pub dims: (usize, usize),
    pub focal: f64,
}

/// Tape leaves for the parameters touched by one forward pass.
pub struct Leaves<'a> {
    store: &'a ParamStore,
    trainable: &'a dyn Fn(&str) -> bool,
    pub vars: BTreeMap<String, Var>,
}

impl<'a> Leaves<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Leaves {
            store,
            trainable,
            vars: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let t = self.store.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`")).clone();
        let v = if (self.trainable)(name) {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Only the leaves that are trainable.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| (self.trainable)(k))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}

/// Rest and posed kinematics of one instance on a tape.
pub struct PosedVars {
    /// Rest rotation per bone.
    pub rest_rotations: Vec<Var>,
    /// Posed part rotation per bone (`G_i R_rest_i`).
    pub rotations: Vec<Var>,
    /// Rest bone length per bone (`1 x 1`).
    pub scales: Vec<Var>,
    /// Posed bone midpoints (`1 x 3`).
    pub centres: Vec<Var>,
    /// Posed joints (`p x 3`).
    pub joints: Var,
    pub rest_joints: Var,
}

pub struct InstanceVars {
    pub posed: PosedVars,
    /// Part shape before placement, per part (`m x 3`).
    pub local: Vec<Var>,
    /// World-space surface per part (`m x 3`).
    pub world: Vec<Var>,
    pub camera_rotation: Var,
    pub camera_translation: Var,
}

impl Scene {
    /// Scene at rest pose with undeformed parts, reference cameras and
    /// feature networks of output size `feature_dim`.
    pub fn new(skeleton: Skeleton3D, config: &EnsembleConfig, feature_dim: usize, seed: u64) -> Self {
        let template = PartTemplate::icosphere(config.icosphere_level);
        let n_bones = skeleton.num_bones();
        let mut params = ParamStore::new();
        params.insert(REST_JOINTS.to_string(), Tensor::from_rows(&skeleton.joints));

        let axes: Vec<Vec3> = skeleton
            .bones
            .iter()
            .map(|b| {
                let len = geom::norm(geom::sub(skeleton.joints[b.child], skeleton.joints[b.parent]));
                primitive_axes(len, b.radius)
            })
            .collect();

        let mut networks = Vec::with_capacity(n_bones);
        let mut features = Vec::with_capacity(n_bones);
        let part_seed = |i: usize, salt: u64| {
            seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((i as u64) << 8)
                .wrapping_add(salt)
        };
        let k = config.shared_depth;
        for i in 0..n_bones {
            let mlp = PartDeformMLP::new(&config.pe_frequencies, config.hidden_width, k, part_seed(i, 1));
            for (l, layer) in mlp.layers.iter().enumerate() {
                let l = l + 1;
                for (field, t) in DeformLayer::NAMES.iter().zip(layer.tensors()) {
                    if l <= k {
                        params.insert(layer_name(None, i, l, field), t.clone());
                    } else {
                        for j in 0..config.n_instances {
                            params.insert(layer_name(Some(j), i, l, field), t.clone());
                        }
                    }
                }
            }
            networks.push(mlp);
            features.push(FeatureMLP::new(feature_dim, config.hidden_width, part_seed(i, 2)));
        }
        let cam = CameraPose::reference(config.camera_distance);
        for j in 0..config.n_instances {
            params.insert(camera_rotation_name(j), Tensor::row(&cam.rotation));
            params.insert(camera_translation_name(j), Tensor::row(&cam.translation));
            params.insert(pose_name(j), Tensor::zeros(n_bones, 3));
        }

        let topology = MeshTopology::new(&template.faces);
        let laplacian = Laplacian::new(template.len(), &template.faces);
        let face_pairs = FacePairs::new(&template.faces);
        Scene {
            skeleton,
            template,
            topology,
            laplacian,
            face_pairs,
            axes,
            networks,
            features,
            params,
            n_instances: config.n_instances,
            dims: config.image_size,
            focal: config.focal,
        }
    }

    pub fn n_parts(&self) -> usize {
        self.skeleton.num_bones()
    }

    pub fn depth(&self) -> usize {
        self.networks.first().map_or(0, |m| m.depth())
    }

    pub fn shared_depth(&self) -> usize {
        self.networks.first().map_or(0, |m| m.shared_depth)
    }

    pub fn camera(&self, j: usize) -> CameraPose {
        let r = &self.params[&camera_rotation_name(j)].data;
        let t = &self.params[&camera_translation_name(j)].data;
        CameraPose {
            rotation: [r[0], r[1], r[2]],
            translation: [t[0], t[1], t[2]],
            focal: self.focal,
        }
    }

    pub fn set_camera(&mut self, j: usize, cam: &CameraPose) {
        self.params.insert(camera_rotation_name(j), Tensor::row(&cam.rotation));
        self.params.insert(camera_translation_name(j), Tensor::row(&cam.translation));
    }

    pub fn rest_joints(&self) -> Vec<Vec3> {
        let t = &self.params[REST_JOINTS];
        (0..t.rows).map(|r| [t.at(r, 0), t.at(r, 1), t.at(r, 2)]).collect()
    }

    /// Deformation network of part `i` as seen by instance `j`.
    pub fn part_network(&self, i: usize, j: usize) -> PartDeformMLP {
        let mut mlp = self.networks[i].clone();
        let k = mlp.shared_depth;
        for (l, layer) in mlp.layers.iter_mut().enumerate() {
            let l = l + 1;
            let inst = if l <= k { None } else { Some(j) };
            for (field, t) in DeformLayer::NAMES.iter().zip(layer.tensors_mut()) {
                *t = self.params[&layer_name(inst, i, l, field)].clone();
            }
        }
        mlp
    }

    /// Rest transforms and posed kinematics.
    pub fn pose_var(&self, tape: &mut Tape, leaves: &mut Leaves, j: usize) -> PosedVars {
        let rest = leaves.get(tape, REST_JOINTS);
        let pose = leaves.get(tape, &pose_name(j));
        let sk = &self.skeleton;
        let nb = sk.num_bones();
        let p = sk.joints.len();
        let mut joint_vars: Vec<Option<Var>> = vec![None; p];
        joint_vars[sk.root] = Some(tape.gather_rows(rest, &[sk.root]));
        let mut global: Vec<Option<Var>> = vec![None; nb];
        let mut rest_rotations = vec![None; nb];
        let mut rotations = vec![None; nb];
        let mut scales = vec![None; nb];
        let mut centres = vec![None; nb];
        for i in sk.bone_order() {
            let b = sk.bones[i];
            let ja = tape.gather_rows(rest, &[b.parent]);
            let jb = tape.gather_rows(rest, &[b.child]);
            let d = tape.sub(jb, ja);
            let len = tape.norm_rows(d);
            let dir = tape.div(d, len);
            let rbar = geom::align_z_var(tape, dir);
            let w = tape.gather_rows(pose, &[i]);
            let local = geom::rodrigues_var(tape, w);
            let g = match sk.parent_bone(i).and_then(|pb| global[pb]) {
                Some(gp) => tape.matmul(gp, local),
                None => local,
            };
            let gt = tape.transpose(g);
            let offset = tape.matmul(d, gt);
            let pa = joint_vars[b.parent].expect("bone order visits parents first");
            let pb = tape.add(pa, offset);
            joint_vars[b.child] = Some(pb);
            let sum = tape.add(pa, pb);
            centres[i] = Some(tape.scale(sum, 0.5));
            rotations[i] = Some(tape.matmul(g, rbar));
            rest_rotations[i] = Some(rbar);
            scales[i] = Some(len);
            global[i] = Some(g);
        }
        let rows: Vec<Var> = joint_vars
            .iter()
            .enumerate()
            .map(|(k, v)| v.unwrap_or_else(|| tape.gather_rows(rest, &[k])))
            .collect();
        let joints = tape.concat_rows(&rows);
        PosedVars {
            rest_rotations: rest_rotations.into_iter().map(Option::unwrap).collect(),
            rotations: rotations.into_iter().map(Option::unwrap).collect(),
            scales: scales.into_iter().map(Option::unwrap).collect(),
            centres: centres.into_iter().map(Option::unwrap).collect(),
            joints,
            rest_joints: rest,
        }
    }

    /// Local part shape `axes * X + y(X)` on `points` (`m x 3`).
    pub fn local_var(&self, tape: &mut Tape, leaves: &mut Leaves, i: usize, j: usize, points: &Tensor) -> Var {
        let x = tape.constant(points.clone());
        let k = self.shared_depth();
        let vars: Vec<LayerVars> = (1..=self.depth())
            .map(|l| {
                let inst = if l <= k { None } else { Some(j) };
                let mut f = |field: &str| leaves.get(tape, &layer_name(inst, i, l, field));
                LayerVars {
                    wh: f("wh"),
                    bh: f("bh"),
                    wo: f("wo"),
                    bo: f("bo"),
                }
            })
            .collect();
        let y = self.networks[i].deform_var(tape, x, &vars);
        let a = tape.constant(Tensor::row(&self.axes[i]));
        let stretched = tape.mul(x, a);
        tape.add(stretched, y)
    }

    /// Full differentiable forward pass of instance `j` on `points`.
    pub fn instance_var(&self, tape: &mut Tape, leaves: &mut Leaves, j: usize, points: &Tensor) -> InstanceVars {
        let posed = self.pose_var(tape, leaves, j);
        let mut local = Vec::with_capacity(self.n_parts());
        let mut world = Vec::with_capacity(self.n_parts());
        for i in 0..self.n_parts() {
            let l = self.local_var(tape, leaves, i, j, points);
            let w = crate::partmodel::place_var(tape, l, posed.scales[i], posed.rotations[i], posed.centres[i]);
            local.push(l);
            world.push(w);
        }
        InstanceVars {
            posed,
            local,
            world,
            camera_rotation: leaves.get(tape, &camera_rotation_name(j)),
            camera_translation: leaves.get(tape, &camera_translation_name(j)),
        }
    }

    /// World-space part surfaces of instance `j` sampled at `points`.
    pub fn surfaces_at(&self, j: usize, points: &Tensor) -> Vec<Vec<Vec3>> {
        let mut tape = Tape::new();
        let frozen = |_: &str| false;
        let mut leaves = Leaves::new(&self.params, &frozen);
        let iv = self.instance_var(&mut tape, &mut leaves, j, points);
        iv.world.iter().map(|&w| rows3(tape.value(w))).collect()
    }

    pub fn surfaces(&self, j: usize) -> Vec<Vec<Vec3>> {
        self.surfaces_at(j, &self.template.points)
    }

    /// Posed joints and posed part rotations of instance `j`.
    pub fn posed(&self, j: usize) -> (Vec<Vec3>, Vec<Mat3>) {
        let mut tape = Tape::new();
        let frozen = |_: &str| false;
        let mut leaves = Leaves::new(&self.params, &frozen);
        let p = self.pose_var(&mut tape, &mut leaves, j);
        let joints = rows3(tape.value(p.joints));
        let rots = p.rotations.iter().map(|&r| geom::tensor_to_mat(tape.value(r))).collect();
        (joints, rots)
    }

    /// Plain soft render of instance `j`.
    pub fn render(&self, j: usize, sigma: f64) -> render::RenderBuffer {
        render::rasterize_soft(&self.surfaces(j), &self.topology, &self.camera(j), sigma, self.dims)
    }
}

pub fn rows3(t: &Tensor) -> Vec<Vec3> {
    (0..t.rows).map(|r| [t.at(r, 0), t.at(r, 1), t.at(r, 2)]).collect()
}
