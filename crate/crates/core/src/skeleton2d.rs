//! 2D skeleton extraction: exact Euclidean distance transform, Zhang–Suen
//! thinning, point classification and the filtered skeleton tree.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{largest_component, Grid, Mask, NEIGHBORS8};

/// Distance from each foreground pixel to the nearest background pixel
/// (pixels outside the grid count as background). Background is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField(pub Grid<f64>);

impl DistanceField {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        *self.0.get(x, y)
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }
}

const INF: i64 = i64::MAX / 4;

/// One-dimensional squared-distance transform of a sampled function
/// (lower envelope of parabolas). `f` holds squared distances or `INF`.
fn edt_1d(f: &[i64], out: &mut [i64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    // first finite sample seeds the envelope
    let Some(first) = f.iter().position(|&x| x < INF) else {
        out.iter_mut().for_each(|o| *o = INF);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= INF {
            continue;
        }
        let s = loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as i64) - (f[p] + (p * p) as i64)) as f64
                / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never pops the last parabola
            if s <= z[k] {
                k -= 1;
            } else {
                break s;
            }
        };
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as i64 - p as i64;
        *o = f[p] + d * d;
    }
}

/// Exact Euclidean distance transform (separable two-pass algorithm on a
/// grid padded with one ring of background).
pub fn distance_transform(mask: &Mask) -> Result<DistanceField> {
    if mask.is_empty_mask() {
        return Err(Error::NoForeground);
    }
    let (w, h) = (mask.width(), mask.height());
    let (pw, ph) = (w + 2, h + 2);
    let mut sq = vec![INF; pw * ph];
    for y in 0..ph {
        for x in 0..pw {
            let inside = x >= 1 && y >= 1 && x <= w && y <= h && *mask.get(x - 1, y - 1);
            if !inside {
                sq[y * pw + x] = 0;
            }
        }
    }
    // columns
    let mut col = vec![0i64; ph];
    let mut col_out = vec![0i64; ph];
    for x in 0..pw {
        for y in 0..ph {
            col[y] = sq[y * pw + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..ph {
            sq[y * pw + x] = col_out[y];
        }
    }
    // rows
    let mut row_out = vec![0i64; pw];
    for y in 0..ph {
        edt_1d(&sq[y * pw..(y + 1) * pw], &mut row_out);
        sq[y * pw..(y + 1) * pw].copy_from_slice(&row_out);
    }
    let field = Grid::from_fn(w, h, |x, y| (sq[(y + 1) * pw + x + 1] as f64).sqrt());
    Ok(DistanceField(field))
}

/// Bit `k` set iff neighbour `NEIGHBORS8[k]` is foreground.
#[inline]
fn neighborhood(mask: &Mask, x: usize, y: usize) -> u8 {
    let mut code = 0u8;
    for (k, (dx, dy)) in NEIGHBORS8.iter().enumerate() {
        if mask.get_or_default(x as i64 + dx, y as i64 + dy) {
            code |= 1 << k;
        }
    }
    code
}

/// Deletion tables for the two Zhang–Suen sub-iterations, indexed by
/// neighbourhood code (bit 0 = N = P2, going clockwise to bit 7 = NW = P9).
fn zhang_suen_tables() -> [[bool; 256]; 2] {
    let mut tables = [[false; 256]; 2];
    for code in 0..256usize {
        let p = |k: usize| (code >> k) & 1 == 1;
        let b = code.count_ones();
        let a = (0..8).filter(|&k| !p(k) && p((k + 1) % 8)).count();
        let (n, e, s, wst) = (p(0), p(2), p(4), p(6));
        let base = (2..=6).contains(&b) && a == 1;
        tables[0][code] = base && !(n && e && s) && !(e && s && wst);
        tables[1][code] = base && !(n && e && wst) && !(n && s && wst);
    }
    tables
}

/// Zhang–Suen parallel thinning of the largest 8-connected component.
pub fn thin(mask: &Mask) -> Mask {
    if mask.is_empty_mask() {
        return mask.clone();
    }
    let mut img = largest_component(mask);
    let tables = zhang_suen_tables();
    let mut pixels: Vec<(usize, usize)> = img
        .iter_xy()
        .filter(|(_, _, &v)| v)
        .map(|(x, y, _)| (x, y))
        .collect();
    let mut doomed = Vec::new();
    loop {
        let mut changed = false;
        for table in &tables {
            doomed.clear();
            for &(x, y) in &pixels {
                if table[neighborhood(&img, x, y) as usize] {
                    doomed.push((x, y));
                }
            }
            for &(x, y) in &doomed {
                img.set(x, y, false);
            }
            if !doomed.is_empty() {
                changed = true;
                pixels.retain(|&(x, y)| *img.get(x, y));
            }
        }
        if !changed {
            break;
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PointKind {
    #[default]
    Background,
    /// Skeleton pixel with no skeleton neighbours.
    Isolated,
    Endpoint,
    Connection,
    Junction,
}

/// Labels skeleton pixels by their 8-connected skeleton neighbour count.
pub fn classify_points(skeleton: &Mask) -> Grid<PointKind> {
    Grid::from_fn(skeleton.width(), skeleton.height(), |x, y| {
        if !*skeleton.get(x, y) {
            return PointKind::Background;
        }
        match neighborhood(skeleton, x, y).count_ones() {
            0 => PointKind::Isolated,
            1 => PointKind::Endpoint,
            2 => PointKind::Connection,
            _ => PointKind::Junction,
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Root,
    Junction,
    Endpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint2d {
    pub x: usize,
    pub y: usize,
    pub radius: f64,
    pub kind: JointKind,
}

impl Joint2d {
    pub fn dist(&self, other: &Joint2d) -> f64 {
        let dx = self.x as f64 - other.x as f64;
        let dy = self.y as f64 - other.y as f64;
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bone2d {
    pub parent: usize,
    pub child: usize,
    /// Pixels from the parent joint to the child joint, both inclusive.
    pub path: Vec<(usize, usize)>,
    pub mean_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTree {
    pub joints: Vec<Joint2d>,
    pub bones: Vec<Bone2d>,
    pub root: usize,
}

impl SkeletonTree {
    /// Bone whose child is `joint`, if any.
    pub fn parent_bone(&self, joint: usize) -> Option<usize> {
        self.bones.iter().position(|b| b.child == joint)
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent_bone(joint).map(|b| self.bones[b].parent)
    }

    pub fn children(&self, joint: usize) -> Vec<usize> {
        self.bones
            .iter()
            .filter(|b| b.parent == joint)
            .map(|b| b.child)
            .collect()
    }

    pub fn endpoints(&self) -> Vec<usize> {
        (0..self.joints.len())
            .filter(|&j| self.joints[j].kind == JointKind::Endpoint)
            .collect()
    }

    /// Checks the tree invariants: `|bones| = |joints| - 1`, every non-root
    /// joint has exactly one parent, everything is reachable from the root,
    /// and bone paths start/end on their joints.
    pub fn validate(&self) -> Result<()> {
        let n = self.joints.len();
        if n == 0 || self.root >= n {
            return Err(Error::Validation("skeleton tree has no root".into()));
        }
        if self.bones.len() + 1 != n {
            return Err(Error::Validation(format!(
                "{} bones for {} joints",
                self.bones.len(),
                n
            )));
        }
        let mut parents = vec![0usize; n];
        for b in &self.bones {
            if b.parent >= n || b.child >= n {
                return Err(Error::Validation("bone references missing joint".into()));
            }
            parents[b.child] += 1;
            let (p, c) = (&self.joints[b.parent], &self.joints[b.child]);
            if b.path.first() != Some(&(p.x, p.y)) || b.path.last() != Some(&(c.x, c.y)) {
                return Err(Error::Validation(format!(
                    "bone {}->{} path does not connect its joints",
                    b.parent, b.child
                )));
            }
        }
        if parents[self.root] != 0 || (0..n).any(|j| j != self.root && parents[j] != 1) {
            return Err(Error::Validation("joint with wrong parent count".into()));
        }
        let mut seen = vec![false; n];
        let mut stack = vec![self.root];
        while let Some(j) = stack.pop() {
            if std::mem::replace(&mut seen[j], true) {
                return Err(Error::Validation("cycle in skeleton tree".into()));
            }
            stack.extend(self.children(j));
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Validation("disconnected skeleton tree".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("skeleton serializes")
    }

    /// Writes `skeleton2d.json` and a `skeleton2d.png` overlay into `dir`.
    pub fn write_debug(&self, dir: &Path, mask: &Mask, skeleton: &Mask) -> Result<()> {
        let json = dir.join("skeleton2d.json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let (w, h) = (mask.width() as u32, mask.height() as u32);
        let mut img = image::RgbImage::new(w, h);
        for (x, y, &m) in mask.iter_xy() {
            let v = if m { 90 } else { 0 };
            img.put_pixel(x as u32, y as u32, image::Rgb([v, v, v]));
        }
        for (x, y, &s) in skeleton.iter_xy() {
            if s {
                img.put_pixel(x as u32, y as u32, image::Rgb([255, 255, 255]));
            }
        }
        for b in &self.bones {
            for &(x, y) in &b.path {
                img.put_pixel(x as u32, y as u32, image::Rgb([60, 160, 255]));
            }
        }
        for j in &self.joints {
            let color = match j.kind {
                JointKind::Root => [255, 40, 40],
                JointKind::Junction => [255, 200, 0],
                JointKind::Endpoint => [40, 220, 80],
            };
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (x, y) = (j.x as i64 + dx, j.y as i64 + dy);
                    if mask.in_bounds(x, y) {
                        img.put_pixel(x as u32, y as u32, image::Rgb(color));
                    }
                }
            }
        }
        let png = dir.join("skeleton2d.png");
        img.save(&png).map_err(|e| Error::Image {
            path: png.clone(),
            message: e.to_string(),
        })
    }
}

fn mean_radius(path: &[(usize, usize)], dfield: &DistanceField) -> f64 {
    path.iter().map(|&(x, y)| dfield.at(x, y)).sum::<f64>() / path.len() as f64
}

/// Builds the skeleton tree rooted at the junction with the largest
/// distance value (or the deepest skeleton pixel when there is no junction).
///
/// Paths from the root to every endpoint are breadth-first shortest paths
/// along skeleton pixels. Joints are the root, the endpoints and those
/// junction pixels at which the union of these paths branches.
pub fn build_tree(
    skeleton: &Mask,
    kinds: &Grid<PointKind>,
    dfield: &DistanceField,
) -> Result<SkeletonTree> {
    let (w, h) = (skeleton.width(), skeleton.height());
    let idx = |x: usize, y: usize| y * w + x;
    let deepest = |want_junction: bool| {
        let mut best: Option<(usize, usize)> = None;
        for (x, y, &k) in kinds.iter_xy() {
            let ok = if want_junction {
                k == PointKind::Junction
            } else {
                k != PointKind::Background
            };
            if ok && best.is_none_or(|(bx, by)| dfield.at(x, y) > dfield.at(bx, by)) {
                best = Some((x, y));
            }
        }
        best
    };
    let root = deepest(true)
        .or_else(|| deepest(false))
        .ok_or(Error::NoForeground)?;

    // BFS over skeleton pixels from the root.
    let mut parent = vec![usize::MAX; w * h];
    let mut visited = vec![false; w * h];
    let mut queue = VecDeque::new();
    visited[idx(root.0, root.1)] = true;
    queue.push_back(root);
    while let Some((x, y)) = queue.pop_front() {
        for (dx, dy) in NEIGHBORS8 {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if !skeleton.get_or_default(nx, ny) {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if !std::mem::replace(&mut visited[idx(nx, ny)], true) {
                parent[idx(nx, ny)] = idx(x, y);
                queue.push_back((nx, ny));
            }
        }
    }

    let root_i = idx(root.0, root.1);
    let endpoints: Vec<usize> = kinds
        .iter_xy()
        .filter(|&(x, y, &k)| k == PointKind::Endpoint && visited[idx(x, y)] && idx(x, y) != root_i)
        .map(|(x, y, _)| idx(x, y))
        .collect();
    if endpoints.is_empty() {
        return Err(Error::ClosedSkeleton);
    }

    // Union of root-to-endpoint paths as a child adjacency.
    let mut on_path = vec![false; w * h];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); w * h];
    on_path[root_i] = true;
    for &e in &endpoints {
        let mut cur = e;
        while !on_path[cur] {
            on_path[cur] = true;
            let p = parent[cur];
            children[p].push(cur);
            cur = p;
        }
    }
    for c in children.iter_mut() {
        c.sort_unstable();
    }
    let is_joint = |i: usize| {
        i == root_i
            || endpoints.binary_search(&i).is_ok()
            || (*kinds.data().get(i).unwrap() == PointKind::Junction && children[i].len() >= 2)
    };

    let mut joints = vec![Joint2d {
        x: root.0,
        y: root.1,
        radius: dfield.at(root.0, root.1),
        kind: JointKind::Root,
    }];
    let mut bones = Vec::new();
    // (pixel, owning joint index, path from that joint so far)
    let mut stack: Vec<(usize, usize, Vec<(usize, usize)>)> = children[root_i]
        .iter()
        .rev()
        .map(|&c| (c, 0, vec![root]))
        .collect();
    while let Some((pix, owner, mut path)) = stack.pop() {
        let (x, y) = (pix % w, pix / w);
        path.push((x, y));
        if is_joint(pix) {
            let kind = if endpoints.binary_search(&pix).is_ok() {
                JointKind::Endpoint
            } else {
                JointKind::Junction
            };
            joints.push(Joint2d {
                x,
                y,
                radius: dfield.at(x, y),
                kind,
            });
            let j = joints.len() - 1;
            bones.push(Bone2d {
                parent: owner,
                child: j,
                mean_radius: mean_radius(&path, dfield),
                path,
            });
            for &c in children[pix].iter().rev() {
                stack.push((c, j, vec![(x, y)]));
            }
        } else {
            let next = &children[pix];
            debug_assert_eq!(next.len(), 1, "non-joint path pixel must have one child");
            for &c in next.iter().rev() {
                stack.push((c, owner, path.clone()));
            }
        }
    }
    let tree = SkeletonTree {
        joints,
        bones,
        root: 0,
    };
    tree.validate()?;
    Ok(tree)
}

/// Removes joints lying inside the coverage disk of their parent, walking
/// root-down; children of a removed joint re-attach to its parent and the
/// bone paths are concatenated.
pub fn filter_joints(tree: &SkeletonTree) -> SkeletonTree {
    let n = tree.joints.len();
    // per joint: ordered children with (path, radius sum over path)
    let mut kids: Vec<Vec<(usize, Vec<(usize, usize)>, f64)>> = vec![Vec::new(); n];
    for b in &tree.bones {
        kids[b.parent].push((b.child, b.path.clone(), b.mean_radius * b.path.len() as f64));
    }
    let mut alive = vec![false; n];
    let mut queue = VecDeque::from([tree.root]);
    alive[tree.root] = true;
    while let Some(q) = queue.pop_front() {
        let radius = tree.joints[q].radius;
        loop {
            let hit = kids[q]
                .iter()
                .position(|(c, _, _)| tree.joints[q].dist(&tree.joints[*c]) < radius);
            let Some(pos) = hit else { break };
            let (c, path, rsum) = kids[q].remove(pos);
            let grand = std::mem::take(&mut kids[c]);
            let shared = tree.joints[c].radius;
            for (k, (g, gpath, gsum)) in grand.into_iter().enumerate() {
                let mut joined = path.clone();
                joined.extend_from_slice(&gpath[1..]);
                kids[q].insert(pos + k, (g, joined, rsum + gsum - shared));
            }
        }
        for (c, _, _) in &kids[q] {
            alive[*c] = true;
            queue.push_back(*c);
        }
    }

    let mut remap = vec![usize::MAX; n];
    let mut joints = Vec::new();
    for j in 0..n {
        if alive[j] {
            remap[j] = joints.len();
            joints.push(tree.joints[j].clone());
        }
    }
    let mut bones = Vec::new();
    for p in 0..n {
        if !alive[p] {
            continue;
        }
        for (c, path, rsum) in &kids[p] {
            bones.push(Bone2d {
                parent: remap[p],
                child: remap[*c],
                mean_radius: rsum / path.len() as f64,
                path: path.clone(),
            });
        }
    }
    bones.sort_by_key(|b| b.child);
    SkeletonTree {
        joints,
        bones,
        root: remap[tree.root],
    }
}

/// Full 2D extraction: distance transform, thinning, classification, tree
/// construction and joint filtering.
pub fn extract(mask: &Mask) -> Result<(SkeletonTree, Mask, DistanceField)> {
    let main = largest_component(mask);
    let dfield = distance_transform(&main)?;
    let skeleton = thin(&main);
    let kinds = classify_points(&skeleton);
    let tree = build_tree(&skeleton, &kinds, &dfield)?;
    Ok((filter_joints(&tree), skeleton, dfield))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Grid::from_fn(w, h, |x, y| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn single_pixel_distance_is_one() {
        let mut m = Mask::new(7, 7, false);
        m.set(3, 3, true);
        let d = distance_transform(&m).unwrap();
        assert_eq!(d.at(3, 3), 1.0);
        assert_eq!(d.at(0, 0), 0.0);
    }

    #[test]
    fn block_and_full_grid_distances() {
        let mut m = Mask::new(9, 9, false);
        for y in 3..6 {
            for x in 3..6 {
                m.set(x, y, true);
            }
        }
        let d = distance_transform(&m).unwrap();
        assert_eq!(d.at(4, 4), 2.0);
        assert_eq!(d.at(3, 4), 1.0);
        assert_eq!(d.at(3, 3), 1.0);

        let full = Mask::new(5, 5, true);
        let d = distance_transform(&full).unwrap();
        assert_eq!(d.at(2, 2), 3.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(matches!(
            distance_transform(&Mask::new(4, 4, false)),
            Err(Error::NoForeground)
        ));
        assert!(thin(&Mask::new(4, 4, false)).is_empty_mask());
    }

    #[test]
    fn diagonal_line_is_already_thin() {
        let m = Grid::from_fn(10, 10, |x, y| x == y && (1..9).contains(&x));
        assert_eq!(thin(&m), m);
    }

    #[test]
    fn two_components_keep_the_largest() {
        let m = mask_from(&[
            "..........",
            ".####.....",
            ".####.....",
            ".####.....",
            "..........",
            ".......#..",
            "..........",
        ]);
        let t = thin(&m);
        assert!(!*t.get(7, 5));
        assert!(t.count() > 0);
    }

    #[test]
    fn classification_by_neighbour_count() {
        let s = mask_from(&[
            ".......", //
            ".#.#.#.", //
            "..###..", //
            "...#...", //
            "...#...", //
            ".......",
        ]);
        let k = classify_points(&s);
        assert_eq!(*k.get(3, 4), PointKind::Endpoint);
        assert_eq!(*k.get(1, 1), PointKind::Endpoint);
        assert_eq!(*k.get(3, 3), PointKind::Junction);
        let line = mask_from(&["....", ".##.", "...."]);
        let mut l = line.clone();
        l.set(3, 1, true);
        let k = classify_points(&l);
        assert_eq!(*k.get(2, 1), PointKind::Connection);
    }

    fn line_tree(radii: &[f64]) -> Result<SkeletonTree> {
        let n = radii.len();
        let skel = Grid::from_fn(n + 2, 3, |x, y| y == 1 && x >= 1 && x <= n);
        let df = DistanceField(Grid::from_fn(n + 2, 3, |x, y| {
            if y == 1 && x >= 1 && x <= n {
                radii[x - 1]
            } else {
                0.0
            }
        }));
        build_tree(&skel, &classify_points(&skel), &df)
    }

    #[test]
    fn straight_line_trees() {
        // deepest pixel at one end: root sits on an endpoint, one bone
        let t = line_tree(&[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!((t.joints.len(), t.bones.len()), (2, 1));
        assert_eq!(t.bones[0].path.len(), 5);
        assert_eq!(t.bones[0].mean_radius, 3.0);
        // deepest pixel in the middle: two bones
        let t = line_tree(&[1.0, 2.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!((t.joints.len(), t.bones.len()), (3, 2));
        assert_eq!(t.joints[t.root].radius, 3.0);
    }

    #[test]
    fn t_shape_tree() {
        // 1-px T centreline with the distance field of a 3-px-wide T
        let thick = Grid::from_fn(15, 15, |x, y| {
            ((1..=3).contains(&y) && (1..=13).contains(&x))
                || ((6..=8).contains(&x) && (1..=13).contains(&y))
        });
        let skel = Grid::from_fn(15, 15, |x, y| {
            (y == 2 && (1..=13).contains(&x)) || (x == 7 && (2..=13).contains(&y))
        });
        let df = distance_transform(&thick).unwrap();
        let t = build_tree(&skel, &classify_points(&skel), &df).unwrap();
        assert_eq!(t.joints.len(), 4);
        assert_eq!(t.bones.len(), 3);
        assert_eq!(t.endpoints().len(), 3);
        assert_eq!(t.children(t.root).len(), 3);
        t.validate().unwrap();
    }

    #[test]
    fn closed_loop_is_rejected() {
        let ring = mask_from(&[
            ".....", //
            ".###.", //
            ".#.#.", //
            ".###.", //
            ".....",
        ]);
        let df = DistanceField(ring.map(|&b| if b { 1.0 } else { 0.0 }));
        assert!(matches!(
            build_tree(&ring, &classify_points(&ring), &df),
            Err(Error::ClosedSkeleton)
        ));
    }

    fn joint(x: usize, y: usize, radius: f64, kind: JointKind) -> Joint2d {
        Joint2d { x, y, radius, kind }
    }

    fn straight(a: &Joint2d, b: &Joint2d) -> Vec<(usize, usize)> {
        assert_eq!(a.y, b.y);
        if a.x <= b.x {
            (a.x..=b.x).map(|x| (x, a.y)).collect()
        } else {
            (b.x..=a.x).rev().map(|x| (x, a.y)).collect()
        }
    }

    fn chain(joints: Vec<Joint2d>) -> SkeletonTree {
        let bones = (1..joints.len())
            .map(|i| Bone2d {
                parent: i - 1,
                child: i,
                path: straight(&joints[i - 1], &joints[i]),
                mean_radius: 1.0,
            })
            .collect();
        SkeletonTree {
            joints,
            bones,
            root: 0,
        }
    }

    #[test]
    fn child_inside_parent_radius_is_removed() {
        let t = chain(vec![
            joint(0, 0, 5.0, JointKind::Root),
            joint(3, 0, 1.0, JointKind::Junction),
            joint(12, 0, 1.0, JointKind::Endpoint),
        ]);
        let f = filter_joints(&t);
        assert_eq!(f.joints.len(), 2);
        assert_eq!(f.bones[0].parent, 0);
        assert_eq!(f.joints[f.bones[0].child].x, 12);
        assert_eq!(f.bones[0].path.len(), 13);
        f.validate().unwrap();
    }

    #[test]
    fn far_joints_are_untouched() {
        let t = chain(vec![
            joint(0, 0, 2.0, JointKind::Root),
            joint(5, 0, 2.0, JointKind::Junction),
            joint(10, 0, 1.0, JointKind::Endpoint),
        ]);
        assert_eq!(filter_joints(&t), t);
    }

    #[test]
    fn chain_fixpoint() {
        // root r=10, A at 4, B at 4 beyond A
        let base = |bx: usize| {
            chain(vec![
                joint(0, 0, 10.0, JointKind::Root),
                joint(4, 0, 1.0, JointKind::Junction),
                joint(bx, 0, 1.0, JointKind::Endpoint),
            ])
        };
        let f = filter_joints(&base(8));
        assert_eq!(f.joints.len(), 1, "B at distance 8 < 10 is removed too");
        let f = filter_joints(&base(10));
        assert_eq!(f.joints.len(), 2, "B at distance 10 survives");
        assert_eq!(f.joints[1].x, 10);
    }

    #[test]
    fn merged_path_mean_radius() {
        let mut t = chain(vec![
            joint(0, 0, 3.0, JointKind::Root),
            joint(2, 0, 1.0, JointKind::Junction),
            joint(4, 0, 1.0, JointKind::Endpoint),
        ]);
        // radii along pixels 0..=4 = [3, 2, 1, 2, 3]
        t.bones[0].mean_radius = (3.0 + 2.0 + 1.0) / 3.0;
        t.bones[1].mean_radius = (1.0 + 2.0 + 3.0) / 3.0;
        let f = filter_joints(&t);
        assert_eq!(f.bones.len(), 1);
        assert!((f.bones[0].mean_radius - 11.0 / 5.0).abs() < 1e-12);
    }
}
