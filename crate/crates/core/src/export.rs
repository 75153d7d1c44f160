//! Textured mesh export, keypoint transfer and evaluation metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::grid::{Grid, Mask};
use crate::render::{self, CameraPose, MeshTopology, Projection};

#[derive(Clone, Debug, PartialEq)]
pub struct TexturedMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Per-vertex RGB in `[0, 1]`.
    pub colors: Vec<[f64; 3]>,
    pub part_ids: Vec<usize>,
}

impl TexturedMesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.colors.len() != n || self.part_ids.len() != n {
            return Err(Error::Validation("mesh attribute counts differ".into()));
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::Validation(format!("face {f:?} references a missing vertex")));
        }
        let finite = self.vertices.iter().flatten().chain(self.colors.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("non-finite vertex or colour".into()));
        }
        Ok(())
    }
}

/// Bilinear sample at continuous pixel coordinates (pixel centres at
/// `i + 0.5`), clamped to the image.
pub fn sample_bilinear(rgb: &Grid<[f32; 3]>, u: f64, v: f64) -> [f64; 3] {
    let (h, w) = rgb.dims();
    let fx = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let px = |x: usize, y: usize| (*rgb.get(x, y)).map(|c| c as f64);
    let (a, b, c, d) = (px(x0, y0), px(x1, y0), px(x0, y1), px(x1, y1));
    std::array::from_fn(|k| {
        let top = a[k] * (1.0 - tx) + b[k] * tx;
        let bot = c[k] * (1.0 - tx) + d[k] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Per-vertex colours for posed part surfaces. Visible vertices sample the
/// image; hidden ones copy the same template vertex of the mirrored part
/// when that is visible, else the nearest visible vertex in 3D.
pub fn sample_texture(
    parts: &[Vec<Vec3>],
    faces: &[[usize; 3]],
    camera: &CameraPose,
    rgb: &Grid<[f32; 3]>,
    visibility: &[Vec<bool>],
    part_pairs: &[(usize, usize)],
) -> Result<TexturedMesh> {
    let dims = rgb.dims();
    let mut mirror: Vec<Option<usize>> = vec![None; parts.len()];
    for &(a, b) in part_pairs {
        mirror[a] = Some(b);
        mirror[b] = Some(a);
    }
    let direct: Vec<Vec<Option<[f64; 3]>>> = parts
        .iter()
        .zip(visibility)
        .map(|(pts, vis)| {
            render::project(camera, pts, dims)
                .iter()
                .zip(vis)
                .map(|(p, &v)| v.then(|| sample_bilinear(rgb, p.u, p.v)))
                .collect()
        })
        .collect();
    let visible: Vec<(Vec3, [f64; 3])> = parts
        .iter()
        .zip(&direct)
        .flat_map(|(pts, cols)| pts.iter().zip(cols).filter_map(|(p, c)| c.map(|c| (*p, c))))
        .collect();
    if visible.is_empty() {
        return Err(Error::NoVisibleVertices);
    }
    let mut mesh = TexturedMesh {
        vertices: Vec::new(),
        faces: Vec::new(),
        colors: Vec::new(),
        part_ids: Vec::new(),
    };
    for (i, pts) in parts.iter().enumerate() {
        let base = mesh.vertices.len();
        for (k, &p) in pts.iter().enumerate() {
            let c = direct[i][k]
                .or_else(|| mirror[i].and_then(|m| direct[m].get(k).copied().flatten()))
                .unwrap_or_else(|| {
                    let mut best = (f64::INFINITY, [0.0; 3]);
                    for &(q, c) in &visible {
                        let d = geom::norm(geom::sub(p, q));
                        if d < best.0 {
                            best = (d, c);
                        }
                    }
                    best.1
                });
            mesh.vertices.push(p);
            mesh.colors.push(c);
            mesh.part_ids.push(i);
        }
        mesh.faces.extend(faces.iter().map(|f| f.map(|v| v + base)));
    }
    Ok(mesh)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    part_ids: Vec<usize>,
}

pub fn sidecar_path(obj: &Path) -> PathBuf {
    obj.with_extension("parts.json")
}

/// OBJ text with `v x y z r g b` vertex lines and 1-based faces.
pub fn obj_string(mesh: &TexturedMesh) -> String {
    let mut s = String::new();
    for (p, c) in mesh.vertices.iter().zip(&mesh.colors) {
        writeln!(s, "v {} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]).unwrap();
    }
    for f in &mesh.faces {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    s
}

/// Writes `path` and its part-id sidecar.
pub fn export_obj(mesh: &TexturedMesh, path: &Path) -> Result<()> {
    mesh.validate()?;
    std::fs::write(path, obj_string(mesh)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string(&Sidecar {
        part_ids: mesh.part_ids.clone(),
    })
    .expect("sidecar serializes");
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn import_obj(path: &Path) -> Result<TexturedMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Validation(format!("{}: malformed line {line}", path.display()));
    let mut mesh = TexturedMesh {
        vertices: Vec::new(),
        faces: Vec::new(),
        colors: Vec::new(),
        part_ids: Vec::new(),
    };
    for (n, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let v: Vec<f64> = it.map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(n + 1))?;
                if v.len() != 6 {
                    return Err(bad(n + 1));
                }
                mesh.vertices.push([v[0], v[1], v[2]]);
                mesh.colors.push([v[3], v[4], v[5]]);
            }
            Some("f") => {
                let f: Vec<usize> = it.map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(n + 1))?;
                if f.len() != 3 || f.contains(&0) {
                    return Err(bad(n + 1));
                }
                mesh.faces.push([f[0] - 1, f[1] - 1, f[2] - 1]);
            }
            _ => {}
        }
    }
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&side.display().to_string(), e))?;
    mesh.part_ids = sc.part_ids;
    mesh.validate()?;
    Ok(mesh)
}

/// One named keypoint in `[0, 1]^2` image coordinates (`x / w`, `y / h`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    #[serde(default = "visible_default")]
    pub visible: bool,
}

fn visible_default() -> bool {
    true
}

/// Keypoints for every instance: the JSON file is a list (one entry per
/// instance) of lists of [`Keypoint`].
pub type KeypointFile = Vec<Vec<Keypoint>>;

pub fn load_keypoints(path: &Path) -> Result<KeypointFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kps: KeypointFile = serde_json::from_str(&text).map_err(|e| Error::json(&path.display().to_string(), e))?;
    for (j, list) in kps.iter().enumerate() {
        if let Some(k) = list.iter().find(|k| !(0.0..=1.0).contains(&k.x) || !(0.0..=1.0).contains(&k.y)) {
            return Err(Error::Validation(format!("instance {j}: keypoint `{}` outside [0, 1]^2", k.name)));
        }
    }
    Ok(kps)
}

pub fn keypoint_to_pixel(k: &Keypoint, (h, w): (usize, usize)) -> [f64; 2] {
    [k.x * w as f64, k.y * h as f64]
}

/// Dense surface samples of one instance: projections under its camera
/// and visibility, indexed by (part, template vertex).
#[derive(Clone, Debug)]
pub struct SurfaceSamples {
    pub projections: Vec<Vec<Projection>>,
    pub visible: Vec<Vec<bool>>,
}

impl SurfaceSamples {
    pub fn new(parts: &[Vec<Vec3>], faces: &[[usize; 3]], camera: &CameraPose, dims: (usize, usize)) -> Self {
        let projections: Vec<Vec<Projection>> = parts.iter().map(|p| render::project(camera, p, dims)).collect();
        let visible = render::visibility(&projections, &MeshTopology::new(faces), dims);
        SurfaceSamples {
            projections,
            visible,
        }
    }

    /// Visible sample nearest to `p` in the image, with its distance.
    pub fn nearest_visible(&self, p: [f64; 2]) -> Option<((usize, usize), f64)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for (i, (proj, vis)) in self.projections.iter().zip(&self.visible).enumerate() {
            for (k, (q, &v)) in proj.iter().zip(vis).enumerate() {
                if !v {
                    continue;
                }
                let d = ((q.u - p[0]).powi(2) + (q.v - p[1]).powi(2)).sqrt();
                if best.is_none_or(|b| d < b.1) {
                    best = Some(((i, k), d));
                }
            }
        }
        best
    }
}

/// Untransferable radius as a fraction of `max(h, w)`.
pub const TRANSFER_RADIUS: f64 = 0.02;

/// Maps pixel keypoints of the source onto the target through the shared
/// template parameterization. `None` marks keypoints with no visible
/// source sample within `radius` pixels.
pub fn transfer_keypoints(
    src: &SurfaceSamples,
    dst: &SurfaceSamples,
    keypoints: &[[f64; 2]],
    radius: f64,
) -> Vec<Option<[f64; 2]>> {
    keypoints
        .iter()
        .map(|&p| {
            let ((i, k), d) = src.nearest_visible(p)?;
            if d > radius {
                return None;
            }
            let q = dst.projections[i][k];
            Some([q.u, q.v])
        })
        .collect()
}

/// Fraction of keypoints landing strictly within `threshold * max(h, w)`
/// pixels; untransferred points count as misses. `None` for an empty list.
pub fn pck(transferred: &[Option<[f64; 2]>], truth: &[[f64; 2]], dims: (usize, usize), threshold: f64) -> Option<f64> {
    assert_eq!(transferred.len(), truth.len());
    if truth.is_empty() {
        return None;
    }
    let limit = threshold * dims.0.max(dims.1) as f64;
    let hits = transferred
        .iter()
        .zip(truth)
        .filter(|(t, g)| t.is_some_and(|p| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt() < limit))
        .count();
    Some(hits as f64 / truth.len() as f64)
}

/// Intersection over union; an empty union gives 0.
pub fn iou(pred: &Mask, truth: &Mask) -> f64 {
    assert_eq!(pred.dims(), truth.dims());
    let (mut i, mut u) = (0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        i += (a && b) as usize;
        u += (a || b) as usize;
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

pub fn threshold(t: &Tensor, level: f64) -> Mask {
    Grid::from_vec(t.cols, t.rows, t.data.iter().map(|&v| v > level).collect())
}

/// Greedy one-to-one assignment of predicted to ground-truth labels by
/// descending overlap (ties by lower indices).
pub fn best_overlap_mapping(pred: &Grid<Option<usize>>, truth: &Grid<Option<usize>>, n_pred: usize, n_truth: usize) -> Vec<Option<usize>> {
    let mut overlap = vec![vec![0usize; n_truth]; n_pred];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        if let (Some(p), Some(t)) = (p, t) {
            overlap[p][t] += 1;
        }
    }
    let mut cands: Vec<(usize, usize, usize)> = Vec::new();
    for (p, row) in overlap.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            if c > 0 {
                cands.push((c, p, t));
            }
        }
    }
    cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut map = vec![None; n_pred];
    let mut taken = vec![false; n_truth];
    for (_, p, t) in cands {
        if map[p].is_none() && !taken[t] {
            map[p] = Some(t);
            taken[t] = true;
        }
    }
    map
}

/// Per predicted label IOU against its mapped ground-truth label (0 when
/// unmapped). `mapping` overrides the greedy assignment.
pub fn part_iou(
    pred: &Grid<Option<usize>>,
    truth: &Grid<Option<usize>>,
    n_pred: usize,
    n_truth: usize,
    mapping: Option<&[Option<usize>]>,
) -> Vec<f64> {
    assert_eq!(pred.dims(), truth.dims());
    let map = match mapping {
        Some(m) => m.to_vec(),
        None => best_overlap_mapping(pred, truth, n_pred, n_truth),
    };
    (0..n_pred)
        .map(|p| {
            let Some(t) = map[p] else { return 0.0 };
            let a = pred.map(|l| *l == Some(p));
            let b = truth.map(|l| *l == Some(t));
            iou(&a, &b)
        })
        .collect()
}

/// Front-most part per pixel from per-part projections.
pub fn front_part_labels(parts: &[Vec<Projection>], topo: &MeshTopology, dims: (usize, usize)) -> Grid<Option<usize>> {
    let depths: Vec<Tensor> = parts
        .iter()
        .map(|p| render::depth_buffer(std::slice::from_ref(p), topo, dims))
        .collect();
    Grid::from_fn(dims.1, dims.0, |x, y| {
        let mut best: Option<(usize, f64)> = None;
        for (i, d) in depths.iter().enumerate() {
            let z = d.at(y, x);
            if z.is_finite() && best.is_none_or(|(_, b)| z < b) {
                best = Some((i, z));
            }
        }
        best.map(|b| b.0)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPck {
    pub src: usize,
    pub dst: usize,
    pub pck: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckBlock {
    pub threshold: f64,
    pub pairs: Vec<PairPck>,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: Vec<f64>,
    pub mean_iou: f64,
    pub part_iou: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pck: Option<PckBlock>,
}

/// All ordered pairs `src != dst`, using keypoints visible in both.
pub fn pck_matrix(
    samples: &[SurfaceSamples],
    keypoints: &KeypointFile,
    dims: (usize, usize),
    threshold: f64,
) -> PckBlock {
    let n = samples.len().min(keypoints.len());
    let radius = TRANSFER_RADIUS * dims.0.max(dims.1) as f64;
    let pairs_idx: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (0..n).filter(move |&d| d != s).map(move |d| (s, d)))
        .collect();
    let results = crate::optim::par_map(pairs_idx.len(), |k| {
        let (s, d) = pairs_idx[k];
        let mut src_pts = Vec::new();
        let mut dst_pts = Vec::new();
        for a in &keypoints[s] {
            if !a.visible {
                continue;
            }
            if let Some(b) = keypoints[d].iter().find(|b| b.name == a.name && b.visible) {
                src_pts.push(keypoint_to_pixel(a, dims));
                dst_pts.push(keypoint_to_pixel(b, dims));
            }
        }
        let t = transfer_keypoints(&samples[s], &samples[d], &src_pts, radius);
        pck(&t, &dst_pts, dims, threshold).map(|p| PairPck { src: s, dst: d, pck: p })
    });
    let pairs: Vec<PairPck> = results.into_iter().flatten().collect();
    let mean = if pairs.is_empty() {
        None
    } else {
        Some(pairs.iter().map(|p| p.pck).sum::<f64>() / pairs.len() as f64)
    };
    PckBlock {
        threshold,
        pairs,
        mean,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh;

    fn mask(w: usize, h: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Grid::new(w, h, false);
        for &(x, y) in on {
            m.set(x, y, true);
        }
        m
    }

    #[test]
    fn iou_examples() {
        let a = mask(4, 2, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        let b = mask(4, 2, &[(1, 0), (2, 0), (1, 1), (2, 1)]);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &mask(4, 2, &[(3, 0)])), 0.0);
        assert_eq!(iou(&a, &b), 1.0 / 3.0);
        assert_eq!(iou(&mask(2, 2, &[]), &mask(2, 2, &[])), 0.0);
    }

    #[test]
    fn pck_examples() {
        let truth = [[10.0, 10.0], [20.0, 20.0], [30.0, 30.0], [40.0, 40.0]];
        let exact: Vec<_> = truth.iter().map(|&p| Some(p)).collect();
        assert_eq!(pck(&exact, &truth, (100, 100), 0.05), Some(1.0));
        // 5 px is exactly the threshold at 100 x 100
        let at = [Some([15.0, 10.0])];
        assert_eq!(pck(&at, &truth[..1], (100, 100), 0.05), Some(0.0));
        let three = [Some([10.0, 10.0]), Some([21.0, 20.0]), None, Some([40.0, 44.9])];
        assert_eq!(pck(&three, &truth, (100, 100), 0.05), Some(0.75));
        assert_eq!(pck(&[], &[], (100, 100), 0.05), None);
    }

    #[test]
    fn part_iou_maps_by_overlap() {
        let pred = Grid::from_vec(3, 1, vec![Some(0), Some(1), Some(1)]);
        let truth = Grid::from_vec(3, 1, vec![Some(1), Some(0), Some(0)]);
        assert_eq!(best_overlap_mapping(&pred, &truth, 2, 2), vec![Some(1), Some(0)]);
        assert_eq!(part_iou(&pred, &truth, 2, 2, None), vec![1.0, 1.0]);
        let fixed = [Some(0), Some(1)];
        assert_eq!(part_iou(&pred, &truth, 2, 2, Some(&fixed)), vec![0.0, 0.0]);
    }

    fn sphere_part(centre: Vec3, r: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
        let m = mesh::icosphere(2);
        (m.vertices.iter().map(|v| geom::add(centre, geom::scale(*v, r))).collect(), m.faces)
    }

    fn two_colour_image(n: usize) -> Grid<[f32; 3]> {
        Grid::from_fn(n, n, |x, _| if x < n / 2 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] })
    }

    #[test]
    fn texture_visible_hidden_and_mirrored() {
        let n = 64;
        let cam = CameraPose::reference(4.0);
        let (left, faces) = sphere_part([-0.4, 0.0, 0.0], 0.3);
        let (right, _) = sphere_part([0.4, 0.0, 0.0], 0.3);
        let parts = vec![left, right];
        let proj: Vec<_> = parts.iter().map(|p| render::project(&cam, p, (n, n))).collect();
        let mut vis = render::visibility(&proj, &MeshTopology::new(&faces), (n, n));
        let img = two_colour_image(n);
        let mesh = sample_texture(&parts, &faces, &cam, &img, &vis, &[]).unwrap();
        let m = parts[0].len();
        for k in 0..m {
            if vis[0][k] {
                assert!(mesh.colors[k][0] > 0.99, "{:?}", mesh.colors[k]);
            }
            if vis[1][k] {
                assert!(mesh.colors[m + k][2] > 0.99);
            }
        }
        // hide part 0 entirely: mirrored vertices copy part 1
        let hidden_right = vis[1].clone();
        vis[0].iter_mut().for_each(|v| *v = false);
        let mesh = sample_texture(&parts, &faces, &cam, &img, &vis, &[(0, 1)]).unwrap();
        for k in 0..m {
            if hidden_right[k] {
                assert_eq!(mesh.colors[k], mesh.colors[m + k]);
            }
        }
        // a single hidden vertex without a mirror takes its nearest visible neighbour
        let mut vis = render::visibility(&proj, &MeshTopology::new(&faces), (n, n));
        let k = (0..m).find(|&k| vis[0][k]).unwrap();
        vis[0][k] = false;
        let mesh = sample_texture(&parts, &faces, &cam, &img, &vis, &[]).unwrap();
        assert!(mesh.colors[k][0] > 0.99);
        let none = vec![vec![false; m]; 2];
        assert!(matches!(
            sample_texture(&parts, &faces, &cam, &img, &none, &[]),
            Err(Error::NoVisibleVertices)
        ));
    }

    #[test]
    fn obj_round_trip_and_bytes() {
        let (pts, faces) = sphere_part([0.1, 0.2, 0.3], 0.7);
        let n = pts.len();
        let mesh = TexturedMesh {
            colors: (0..n).map(|i| [i as f64 / n as f64, 0.5, 1.0 / 3.0]).collect(),
            part_ids: vec![0; n],
            vertices: pts,
            faces: faces.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.obj");
        export_obj(&mesh, &p).unwrap();
        let back = import_obj(&p).unwrap();
        assert_eq!(back, mesh);
        assert_eq!(mesh::euler_characteristic(back.vertices.len(), &back.faces), 2);
        let first = std::fs::read(&p).unwrap();
        export_obj(&mesh, &p).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
    }

    #[test]
    fn background_keypoint_is_untransferable() {
        let n = 64;
        let cam = CameraPose::reference(4.0);
        let (pts, faces) = sphere_part([0.0, 0.0, 0.0], 0.3);
        let s = SurfaceSamples::new(&[pts], &faces, &cam, (n, n));
        let r = TRANSFER_RADIUS * n as f64;
        let t = transfer_keypoints(&s, &s, &[[1.0, 1.0], [32.0, 32.0]], r);
        assert!(t[0].is_none());
        let p = t[1].unwrap();
        assert!((p[0] - 32.0).abs() < 2.0 && (p[1] - 32.0).abs() < 2.0);
    }
}
