//! Symmetric joint matching and lifting of the 2D skeleton tree to 3D.
//!
//! Coordinates are normalized image units: a pixel centre `(px, py)` maps
//! to `((px - w/2) / s, (py - h/2) / s)` with `s = max(h, w) / 2`; `z` is
//! depth and the symmetry plane is `z = 0`.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::ingest::FeatureMap;
use crate::skeleton2d::{Bone2d, Joint2d, JointKind, SkeletonTree};

/// Geometry and appearance summary of the branch leading into a joint.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneDescriptor {
    /// Path length in pixels (unit / diagonal steps).
    pub length: f64,
    pub mean_radius: f64,
    /// Unit-normalized mean of the unit-normalized path features.
    pub mean_feature: Vec<f64>,
}

fn path_length(path: &[(usize, usize)]) -> f64 {
    path.windows(2)
        .map(|w| {
            let dx = w[0].0 as f64 - w[1].0 as f64;
            let dy = w[0].1 as f64 - w[1].1 as f64;
            (dx * dx + dy * dy).sqrt()
        })
        .sum()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Descriptor of the bone path ending at each non-root joint; `None` at the
/// root. Path pixels outside the feature grid are clamped.
pub fn describe_branches(tree: &SkeletonTree, feat: &FeatureMap) -> Vec<Option<BoneDescriptor>> {
    let mut out = vec![None; tree.joints.len()];
    for b in &tree.bones {
        let mut acc = vec![0.0; feat.dim];
        for &(x, y) in &b.path {
            let f: Vec<f64> = feat
                .sample_nearest(x as f64, y as f64)
                .iter()
                .map(|&v| v as f64)
                .collect();
            for (a, v) in acc.iter_mut().zip(normalized(&f)) {
                *a += v;
            }
        }
        out[b.child] = Some(BoneDescriptor {
            length: path_length(&b.path),
            mean_radius: b.mean_radius,
            mean_feature: normalized(&acc),
        });
    }
    out
}

fn ratio_term(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

/// Pairwise symmetry distance; zero for identical descriptors.
pub fn symmetry_score(a: &BoneDescriptor, b: &BoneDescriptor, lambda: f64) -> f64 {
    let cos: f64 = a
        .mean_feature
        .iter()
        .zip(&b.mean_feature)
        .map(|(x, y)| x * y)
        .sum();
    ratio_term(a.length, b.length) + ratio_term(a.mean_radius, b.mean_radius) + lambda * (1.0 - cos)
}

/// Scored sibling pairs `(score, a, b)` with `a < b`, sorted ascending.
pub fn sibling_candidates(
    descriptors: &[Option<BoneDescriptor>],
    tree: &SkeletonTree,
    lambda: f64,
) -> Vec<(f64, usize, usize)> {
    let mut cands = Vec::new();
    for p in 0..tree.joints.len() {
        let mut kids = tree.children(p);
        kids.sort_unstable();
        for (i, &a) in kids.iter().enumerate() {
            for &b in &kids[i + 1..] {
                if let (Some(da), Some(db)) = (&descriptors[a], &descriptors[b]) {
                    cands.push((symmetry_score(da, db, lambda), a, b));
                }
            }
        }
    }
    cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    cands
}

/// Greedy disjoint pairing of siblings whose score is below `tau`.
pub fn match_symmetric(
    descriptors: &[Option<BoneDescriptor>],
    tree: &SkeletonTree,
    lambda: f64,
    tau: f64,
) -> Vec<(usize, usize)> {
    let mut used = vec![false; tree.joints.len()];
    let mut pairs = Vec::new();
    for (score, a, b) in sibling_candidates(descriptors, tree, lambda) {
        if score >= tau {
            break;
        }
        if used[a] || used[b] {
            continue;
        }
        used[a] = true;
        used[b] = true;
        pairs.push((a, b));
    }
    pairs
}

/// Duplicates every non-root parent whose only two children form a pair,
/// repeating until no such parent remains. The lower child keeps the
/// original parent; the copy becomes its mirror partner. Pairs hanging off
/// an already paired parent are dropped, so every joint ends up in at most
/// one pair.
pub fn split_shared_parents(
    tree: &SkeletonTree,
    pairs: &[(usize, usize)],
) -> (SkeletonTree, Vec<(usize, usize)>) {
    let mut tree = tree.clone();
    let mut pairs: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    let mut k = 0;
    while k < pairs.len() {
        let (a, b) = pairs[k];
        k += 1;
        let Some(p) = tree.parent(a) else { continue };
        if tree.parent(b) != Some(p) {
            continue;
        }
        let mut kids = tree.children(p);
        kids.sort_unstable();
        if kids != [a, b] {
            continue;
        }
        if p == tree.root {
            log::warn!("joint {p} is the root and cannot be split");
            continue;
        }
        // a parent that already has a mirror partner lies off the symmetry
        // plane, so its children cannot mirror each other across it
        if pairs.iter().any(|&(x, y)| x == p || y == p) {
            log::debug!("dropping pair ({a}, {b}) under paired joint {p}");
            k -= 1;
            pairs.remove(k);
            continue;
        }
        let copy = tree.joints.len();
        let mut joint: Joint2d = tree.joints[p].clone();
        joint.kind = JointKind::Junction;
        tree.joints.push(joint);
        let into_p = tree.parent_bone(p).expect("non-root has a parent bone");
        let mut dup: Bone2d = tree.bones[into_p].clone();
        dup.child = copy;
        tree.bones.push(dup);
        let into_b = tree.parent_bone(b).expect("paired joint has a parent bone");
        tree.bones[into_b].parent = copy;
        tree.bones.sort_by_key(|bone| bone.child);
        pairs.push((p, copy));
    }
    (tree, pairs)
}

/// Rest placement of one part: `v = scale * rotation * p + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestTransform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bone3d {
    pub parent: usize,
    pub child: usize,
    /// Mean branch radius in normalized units.
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton3D {
    pub joints: Vec<Vec3>,
    /// Joint radii in normalized units.
    pub joint_radii: Vec<f64>,
    pub bones: Vec<Bone3d>,
    pub root: usize,
    pub sym_pairs: Vec<(usize, usize)>,
    pub rest_transforms: Vec<RestTransform>,
    /// `(h, w)` of the reference image the skeleton was lifted from.
    pub image_size: (usize, usize),
}

/// `(px, py)` pixel centre to normalized `(x, y)`.
pub fn pixel_to_normalized(px: f64, py: f64, (h, w): (usize, usize)) -> (f64, f64) {
    let s = h.max(w) as f64 / 2.0;
    ((px - w as f64 / 2.0) / s, (py - h as f64 / 2.0) / s)
}

pub fn normalized_to_pixel(x: f64, y: f64, (h, w): (usize, usize)) -> (f64, f64) {
    let s = h.max(w) as f64 / 2.0;
    (x * s + w as f64 / 2.0, y * s + h as f64 / 2.0)
}

/// Reflection through the symmetry plane.
pub fn reflect(p: Vec3) -> Vec3 {
    [p[0], p[1], -p[2]]
}

/// Scale, midpoint and minimal-twist rotation of the segment `a -> b`.
pub fn bone_transform(a: Vec3, b: Vec3) -> Option<RestTransform> {
    let d = geom::sub(b, a);
    let len = geom::norm(d);
    if !(len > 1e-12) {
        return None;
    }
    Some(RestTransform {
        scale: len,
        rotation: geom::align_z(d),
        translation: geom::scale(geom::add(a, b), 0.5),
    })
}

/// Lifts the 2D tree: the two joints of a pair share their mean image
/// position and sit at `z = +-` their mean radius; everything else lies on
/// the symmetry plane.
pub fn uplift(
    tree: &SkeletonTree,
    pairs: &[(usize, usize)],
    image_size: (usize, usize),
) -> Result<Skeleton3D> {
    let s = image_size.0.max(image_size.1) as f64 / 2.0;
    let mut joints: Vec<Vec3> = tree
        .joints
        .iter()
        .map(|j| {
            let (x, y) = pixel_to_normalized(j.x as f64 + 0.5, j.y as f64 + 0.5, image_size);
            [x, y, 0.0]
        })
        .collect();
    let joint_radii: Vec<f64> = tree.joints.iter().map(|j| j.radius / s).collect();
    let mut sym_pairs = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let (a, b) = (a.min(b), a.max(b));
        let r = 0.5 * (joint_radii[a] + joint_radii[b]);
        let x = 0.5 * (joints[a][0] + joints[b][0]);
        let y = 0.5 * (joints[a][1] + joints[b][1]);
        joints[a] = [x, y, r];
        joints[b] = [x, y, -r];
        sym_pairs.push((a, b));
    }
    let mut bones = Vec::with_capacity(tree.bones.len());
    let mut rest_transforms = Vec::with_capacity(tree.bones.len());
    for (i, b) in tree.bones.iter().enumerate() {
        let t = bone_transform(joints[b.parent], joints[b.child])
            .ok_or(Error::ZeroLengthBone { bone: i })?;
        rest_transforms.push(t);
        bones.push(Bone3d {
            parent: b.parent,
            child: b.child,
            radius: b.mean_radius / s,
        });
    }
    Ok(Skeleton3D {
        joints,
        joint_radii,
        bones,
        root: tree.root,
        sym_pairs,
        rest_transforms,
        image_size,
    })
}

/// Full lifting step: descriptors, matching, parent splitting and uplift.
pub fn discover(
    tree: &SkeletonTree,
    feat: &FeatureMap,
    lambda: f64,
    tau: f64,
    image_size: (usize, usize),
) -> Result<Skeleton3D> {
    let desc = describe_branches(tree, feat);
    let pairs = match_symmetric(&desc, tree, lambda, tau);
    let (split, pairs) = split_shared_parents(tree, &pairs);
    uplift(&split, &pairs, image_size)
}

impl Skeleton3D {
    pub fn num_bones(&self) -> usize {
        self.bones.len()
    }

    /// Bone whose child is `joint`.
    pub fn bone_into(&self, joint: usize) -> Option<usize> {
        self.bones.iter().position(|b| b.child == joint)
    }

    /// Bone feeding into bone `i`'s parent joint (its kinematic parent).
    pub fn parent_bone(&self, i: usize) -> Option<usize> {
        self.bone_into(self.bones[i].parent)
    }

    /// Bones in breadth-first order from the root, so every bone comes
    /// after its kinematic parent.
    pub fn bone_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.bones.len());
        let mut queue = VecDeque::from([self.root]);
        while let Some(j) = queue.pop_front() {
            for (i, b) in self.bones.iter().enumerate() {
                if b.parent == j {
                    order.push(i);
                    queue.push_back(b.child);
                }
            }
        }
        order
    }

    /// Pairs of bones whose child joints are mirror partners.
    pub fn bone_pairs(&self) -> Vec<(usize, usize)> {
        self.sym_pairs
            .iter()
            .filter_map(|&(a, b)| Some((self.bone_into(a)?, self.bone_into(b)?)))
            .collect()
    }

    /// Mirror partner of each joint (itself when unpaired).
    pub fn mirror_map(&self) -> Vec<usize> {
        let mut m: Vec<usize> = (0..self.joints.len()).collect();
        for &(a, b) in &self.sym_pairs {
            m[a] = b;
            m[b] = a;
        }
        m
    }

    /// Recomputes rest transforms from the current joint positions.
    pub fn rest_transforms_for(&self, joints: &[Vec3]) -> Result<Vec<RestTransform>> {
        self.bones
            .iter()
            .enumerate()
            .map(|(i, b)| {
                bone_transform(joints[b.parent], joints[b.child])
                    .ok_or(Error::ZeroLengthBone { bone: i })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("skeleton serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("skeleton3d.json", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Skeleton3D::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joint(x: usize, y: usize, r: f64, kind: JointKind) -> Joint2d {
        Joint2d {
            x,
            y,
            radius: r,
            kind,
        }
    }

    fn line(a: (usize, usize), b: (usize, usize)) -> Vec<(usize, usize)> {
        let n = (a.0.abs_diff(b.0)).max(a.1.abs_diff(b.1));
        (0..=n)
            .map(|k| {
                let t = k as f64 / n.max(1) as f64;
                (
                    (a.0 as f64 + t * (b.0 as f64 - a.0 as f64)).round() as usize,
                    (a.1 as f64 + t * (b.1 as f64 - a.1 as f64)).round() as usize,
                )
            })
            .collect()
    }

    /// Tree from joint list and `(parent, child, radius)` bones.
    fn tree(joints: Vec<Joint2d>, bones: &[(usize, usize, f64)]) -> SkeletonTree {
        let mut bones: Vec<Bone2d> = bones
            .iter()
            .map(|&(p, c, r)| Bone2d {
                parent: p,
                child: c,
                path: line((joints[p].x, joints[p].y), (joints[c].x, joints[c].y)),
                mean_radius: r,
            })
            .collect();
        bones.sort_by_key(|b| b.child);
        let t = SkeletonTree {
            joints,
            bones,
            root: 0,
        };
        t.validate().unwrap();
        t
    }

    fn desc(len: f64, r: f64, f: &[f64]) -> Option<BoneDescriptor> {
        Some(BoneDescriptor {
            length: len,
            mean_radius: r,
            mean_feature: f.to_vec(),
        })
    }

    #[test]
    fn straight_path_length_and_radius() {
        let t = tree(
            vec![joint(0, 5, 3.0, JointKind::Root), joint(10, 5, 1.0, JointKind::Endpoint)],
            &[(0, 1, 2.0)],
        );
        let mut fm = FeatureMap::new(12, 12, 2);
        fm.data.iter_mut().step_by(2).for_each(|v| *v = 3.0);
        let d = describe_branches(&t, &fm);
        assert!(d[0].is_none());
        let d1 = d[1].as_ref().unwrap();
        assert_eq!(d1.length, 10.0);
        assert_eq!(d1.mean_radius, 2.0);
        assert_eq!(d1.mean_feature, vec![1.0, 0.0]);
    }

    #[test]
    fn scores_follow_the_formula() {
        let a = desc(10.0, 2.0, &[1.0, 0.0]).unwrap();
        assert_eq!(symmetry_score(&a, &a, 1.0), 0.0);
        let b = desc(10.0, 2.0, &[0.0, 1.0]).unwrap();
        assert_eq!(symmetry_score(&a, &b, 1.0), 1.0);
        let c = desc(5.0, 1.0, &[1.0, 0.0]).unwrap();
        assert_eq!(symmetry_score(&a, &c, 1.0), 1.0);
    }

    fn star() -> SkeletonTree {
        tree(
            vec![
                joint(10, 10, 4.0, JointKind::Root),
                joint(2, 18, 1.0, JointKind::Endpoint),
                joint(18, 18, 1.0, JointKind::Endpoint),
                joint(10, 1, 1.0, JointKind::Endpoint),
            ],
            &[(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)],
        )
    }

    #[test]
    fn orthogonal_features_pair_only_above_one() {
        let t = star();
        let d = vec![
            None,
            desc(8.0, 1.0, &[1.0, 0.0]),
            desc(8.0, 1.0, &[0.0, 1.0]),
            desc(30.0, 5.0, &[-1.0, 0.0]),
        ];
        assert!(match_symmetric(&d, &t, 1.0, 1.0).is_empty());
        assert_eq!(match_symmetric(&d, &t, 1.0, 1.0 + 1e-9), vec![(1, 2)]);
    }

    #[test]
    fn greedy_pairs_are_disjoint_and_sorted() {
        let t = star();
        let d = vec![
            None,
            desc(8.0, 1.0, &[1.0, 0.0]),
            desc(8.0, 1.0, &[1.0, 0.0]),
            desc(8.0, 1.0, &[1.0, 0.0]),
        ];
        // all three tie at zero; lowest indices win, the third is left over
        assert_eq!(match_symmetric(&d, &t, 1.0, 0.5), vec![(1, 2)]);
    }

    fn hip_tree() -> SkeletonTree {
        // 0 root - 1 hip - {2, 3} legs ; 0 - 4 tail
        tree(
            vec![
                joint(20, 10, 5.0, JointKind::Root),
                joint(10, 10, 3.0, JointKind::Junction),
                joint(6, 20, 1.0, JointKind::Endpoint),
                joint(14, 20, 1.0, JointKind::Endpoint),
                joint(30, 10, 1.0, JointKind::Endpoint),
            ],
            &[(0, 1, 3.0), (1, 2, 1.0), (1, 3, 1.0), (0, 4, 1.0)],
        )
    }

    #[test]
    fn split_duplicates_two_child_parent() {
        let t = hip_tree();
        let (s, pairs) = split_shared_parents(&t, &[(3, 2)]);
        s.validate().unwrap();
        assert_eq!(pairs, vec![(2, 3), (1, 5)]);
        assert_eq!(s.joints.len(), 6);
        assert_eq!(s.parent(2), Some(1));
        assert_eq!(s.parent(3), Some(5));
        assert_eq!(s.parent(5), Some(0));
        assert_eq!(s.endpoints(), t.endpoints());
    }

    #[test]
    fn split_skips_three_child_parent_and_root() {
        let t = star();
        let (s, pairs) = split_shared_parents(&t, &[(1, 2)]);
        assert_eq!(s, t);
        assert_eq!(pairs, vec![(1, 2)]);
        let t = tree(
            vec![
                joint(10, 10, 4.0, JointKind::Root),
                joint(2, 18, 1.0, JointKind::Endpoint),
                joint(18, 18, 1.0, JointKind::Endpoint),
            ],
            &[(0, 1, 1.0), (0, 2, 1.0)],
        );
        let (s, _) = split_shared_parents(&t, &[(1, 2)]);
        assert_eq!(s, t);
    }

    #[test]
    fn split_drops_pairs_under_a_paired_parent() {
        // 0 root - {1, 2} legs; 1 - {3, 4} toes; 0 - 5 tail
        let t = tree(
            vec![
                joint(20, 2, 5.0, JointKind::Root),
                joint(12, 10, 2.0, JointKind::Junction),
                joint(28, 10, 2.0, JointKind::Endpoint),
                joint(8, 20, 1.0, JointKind::Endpoint),
                joint(16, 20, 1.0, JointKind::Endpoint),
                joint(34, 2, 1.0, JointKind::Endpoint),
            ],
            &[(0, 1, 2.0), (0, 2, 2.0), (1, 3, 1.0), (1, 4, 1.0), (0, 5, 1.0)],
        );
        for order in [[(1, 2), (3, 4)], [(3, 4), (1, 2)]] {
            let (s, pairs) = split_shared_parents(&t, &order);
            assert_eq!(s, t);
            assert_eq!(pairs, vec![(1, 2)]);
        }
    }

    #[test]
    fn split_reaches_fixpoint_up_the_chain() {
        // 0 root - 1 - 2 - {3, 4}; 0 - 5
        let t = tree(
            vec![
                joint(20, 2, 5.0, JointKind::Root),
                joint(20, 10, 3.0, JointKind::Junction),
                joint(20, 18, 2.0, JointKind::Junction),
                joint(14, 28, 1.0, JointKind::Endpoint),
                joint(26, 28, 1.0, JointKind::Endpoint),
                joint(30, 2, 1.0, JointKind::Endpoint),
            ],
            &[(0, 1, 3.0), (1, 2, 2.0), (2, 3, 1.0), (2, 4, 1.0), (0, 5, 1.0)],
        );
        let (s, pairs) = split_shared_parents(&t, &[(3, 4)]);
        s.validate().unwrap();
        // 2 splits into (2, 6); then 1 has children {2, 6} and splits into (1, 7)
        assert_eq!(pairs, vec![(3, 4), (2, 6), (1, 7)]);
        assert_eq!(s.parent(4), Some(6));
        assert_eq!(s.parent(6), Some(7));
        assert_eq!(s.parent(7), Some(0));
        let mut kids = s.children(0);
        kids.sort_unstable();
        assert_eq!(kids, vec![1, 5, 7]);
    }

    #[test]
    fn uplift_offsets_pairs_by_mean_radius() {
        let t = hip_tree();
        let (s, pairs) = split_shared_parents(&t, &[(2, 3)]);
        let mut s = s;
        s.joints[2].radius = 0.04 * 20.0;
        s.joints[3].radius = 0.06 * 20.0;
        let sk = uplift(&s, &pairs, (40, 40)).unwrap();
        assert!((sk.joints[2][2] - 0.05).abs() < 1e-15);
        assert!((sk.joints[3][2] + 0.05).abs() < 1e-15);
        assert_eq!(sk.joints[0][2], 0.0);
        assert_eq!(sk.joints[4][2], 0.0);
        // mirror property
        let m = sk.mirror_map();
        for j in 0..sk.joints.len() {
            assert_eq!(reflect(sk.joints[m[j]]), sk.joints[j]);
        }
        for (i, b) in sk.bones.iter().enumerate() {
            let r = &sk.rest_transforms[i];
            let dir = geom::normalize(geom::sub(sk.joints[b.child], sk.joints[b.parent]));
            let img = geom::mat_vec(&r.rotation, [0.0, 0.0, 1.0]);
            assert!(geom::norm(geom::sub(img, dir)) < 1e-12);
            assert!(r.scale > 0.0);
        }
    }

    #[test]
    fn axis_aligned_rest_transform() {
        let t = bone_transform([0.0; 3], [0.0, 0.0, 2.0]).unwrap();
        assert_eq!(t.scale, 2.0);
        assert_eq!(t.translation, [0.0, 0.0, 1.0]);
        assert_eq!(t.rotation, geom::IDENTITY);
        assert!(bone_transform([1.0; 3], [1.0; 3]).is_none());
    }

    #[test]
    fn normalized_coordinates_round_trip() {
        let (x, y) = pixel_to_normalized(32.0, 16.0, (32, 64));
        assert_eq!((x, y), (0.0, 0.0));
        let (x, y) = pixel_to_normalized(64.0, 0.0, (32, 64));
        assert_eq!((x, y), (1.0, -0.5));
        assert_eq!(normalized_to_pixel(1.0, -0.5, (32, 64)), (64.0, 0.0));
    }

    #[test]
    fn json_round_trip() {
        let sk = uplift(&hip_tree(), &[(2, 3)], (40, 40)).unwrap();
        let back = Skeleton3D::from_json(&sk.to_json()).unwrap();
        assert_eq!(back, sk);
    }
}
