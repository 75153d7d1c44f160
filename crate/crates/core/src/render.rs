//! Pinhole camera, soft silhouette rasterization, depth/visibility and the
//! crop-and-upsample zoom operator.
//!
//! Camera frame: x right, y down, z forward. A camera-frame point
//! `(X, Y, Z)` lands on continuous pixel coordinates
//! `u = w/2 + s f X / Z`, `v = h/2 + s f Y / Z` with `s = max(h, w) / 2`;
//! pixel `(i, j)` covers `[i, i+1) x [j, j+1)` and is sampled at its centre.
//!
//! Each part's soft mask is `sigmoid(sd / sigma)`, where `sd` is the signed
//! distance from the pixel centre to the part's projected outline (positive
//! inside). The outline is the set of exposed contour edges: mesh edges
//! whose two faces project with opposite orientation (or that border a
//! single face) and that have uncovered space on one side. Pixels further
//! than [`CUTOFF`]` * sigma` from every outline edge take the hard 0/1
//! value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{sigmoid, CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::geom::{rodrigues_var, Mat3};

/// Distance (in units of sigma) beyond which coverage is hard.
pub const CUTOFF: f64 = 10.0;
/// Points with camera depth below this are clamped.
pub const DEPTH_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Axis-angle world-to-camera rotation.
    pub rotation: Vec3,
    pub translation: Vec3,
    pub focal: f64,
}

impl CameraPose {
    /// Camera looking down +z at the origin from `distance`, with focal
    /// equal to the distance so the `z = 0` plane maps one-to-one onto
    /// normalized image coordinates.
    pub fn reference(distance: f64) -> Self {
        CameraPose {
            rotation: [0.0; 3],
            translation: [0.0, 0.0, distance],
            focal: distance,
        }
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        geom::rodrigues(self.rotation)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        geom::add(geom::mat_vec(&self.rotation_matrix(), p), self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.rotation.iter().chain(&self.translation).all(|v| v.is_finite());
        if !(self.focal > 0.0) || !finite {
            return Err(Error::Validation(format!("invalid camera {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// Depth was at or behind [`DEPTH_EPS`] and has been clamped.
    pub clamped: bool,
}

fn image_scale((h, w): (usize, usize)) -> f64 {
    h.max(w) as f64 / 2.0
}

/// Projects camera-frame points.
pub fn project_camera_points(points: &[Vec3], focal: f64, dims: (usize, usize)) -> Vec<Projection> {
    let k = image_scale(dims) * focal;
    let (cx, cy) = (dims.1 as f64 / 2.0, dims.0 as f64 / 2.0);
    points
        .iter()
        .map(|p| {
            let clamped = !(p[2] > DEPTH_EPS);
            let z = if clamped { DEPTH_EPS } else { p[2] };
            Projection {
                u: cx + k * p[0] / z,
                v: cy + k * p[1] / z,
                depth: z,
                clamped,
            }
        })
        .collect()
}

/// Projects world points through `camera`.
pub fn project(camera: &CameraPose, points: &[Vec3], dims: (usize, usize)) -> Vec<Projection> {
    let cam: Vec<Vec3> = points.iter().map(|&p| camera.to_camera(p)).collect();
    project_camera_points(&cam, camera.focal, dims)
}

/// `points R^T + t` on the tape, with `R` from the axis-angle `rotation`.
pub fn camera_points_var(tape: &mut Tape, points: Var, rotation: Var, translation: Var) -> Var {
    let r = rodrigues_var(tape, rotation);
    let rt = tape.transpose(r);
    let p = tape.matmul(points, rt);
    tape.add(p, translation)
}

struct ProjectOp {
    k: f64,
}

impl CustomOp for ProjectOp {
    fn name(&self) -> &'static str {
        "project"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let p = inputs[0];
        let mut g = Tensor::zeros(p.rows, 3);
        for r in 0..p.rows {
            let (x, y, z) = (p.at(r, 0), p.at(r, 1), p.at(r, 2));
            if !(z > DEPTH_EPS) {
                continue;
            }
            let (gu, gv) = (grad.at(r, 0), grad.at(r, 1));
            *g.at_mut(r, 0) = gu * self.k / z;
            *g.at_mut(r, 1) = gv * self.k / z;
            *g.at_mut(r, 2) = -(gu * self.k * x + gv * self.k * y) / (z * z);
        }
        vec![g]
    }
}

/// Differentiable projection of camera-frame points (`n x 3`) to pixel
/// coordinates (`n x 2`). Clamped points get zero gradient.
pub fn project_var(tape: &mut Tape, cam_points: Var, focal: f64, dims: (usize, usize)) -> Var {
    let p = tape.value(cam_points);
    let pts: Vec<Vec3> = (0..p.rows).map(|r| [p.at(r, 0), p.at(r, 1), p.at(r, 2)]).collect();
    let proj = project_camera_points(&pts, focal, dims);
    let value = Tensor::new(p.rows, 2, proj.iter().flat_map(|q| [q.u, q.v]).collect());
    let k = image_scale(dims) * focal;
    tape.custom(&[cam_points], value, Box::new(ProjectOp { k }))
}

/// Mesh connectivity needed by the rasterizer.
#[derive(Clone, Debug)]
pub struct MeshTopology {
    pub faces: Vec<[usize; 3]>,
    /// `(a, b, faces)`: each undirected edge with its one or two faces.
    pub edges: Vec<(usize, usize, [Option<usize>; 2])>,
}

impl MeshTopology {
    pub fn new(faces: &[[usize; 3]]) -> Self {
        let mut map: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
        for (fi, f) in faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                map.entry((a.min(b), a.max(b))).or_default().push(fi);
            }
        }
        let edges = map
            .into_iter()
            .map(|((a, b), fs)| (a, b, [fs.first().copied(), fs.get(1).copied()]))
            .collect();
        MeshTopology {
            faces: faces.to_vec(),
            edges,
        }
    }
}

type P2 = [f64; 2];

fn signed_area(a: P2, b: P2, c: P2) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

const DEGENERATE_AREA: f64 = 1e-12;

fn in_triangle(p: P2, a: P2, b: P2, c: P2, area: f64) -> bool {
    let s = area.signum();
    let e0 = signed_area(a, b, p) * s;
    let e1 = signed_area(b, c, p) * s;
    let e2 = signed_area(c, a, p) * s;
    e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0
}

/// Triangles bucketed on an integer grid covering the image plus a margin.
struct Bins {
    x0: i64,
    y0: i64,
    w: usize,
    h: usize,
    cells: Vec<Vec<u32>>,
}

impl Bins {
    fn new(margin: i64, dims: (usize, usize)) -> Self {
        let w = dims.1 + 2 * margin as usize;
        let h = dims.0 + 2 * margin as usize;
        Bins {
            x0: -margin,
            y0: -margin,
            w,
            h,
            cells: vec![Vec::new(); w * h],
        }
    }

    fn insert(&mut self, id: u32, lo: P2, hi: P2) {
        let cx0 = ((lo[0].floor() as i64) - self.x0).max(0);
        let cy0 = ((lo[1].floor() as i64) - self.y0).max(0);
        let cx1 = ((hi[0].floor() as i64) - self.x0).min(self.w as i64 - 1);
        let cy1 = ((hi[1].floor() as i64) - self.y0).min(self.h as i64 - 1);
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                self.cells[cy as usize * self.w + cx as usize].push(id);
            }
        }
    }

    fn query(&self, p: P2) -> &[u32] {
        let cx = p[0].floor() as i64 - self.x0;
        let cy = p[1].floor() as i64 - self.y0;
        if cx < 0 || cy < 0 || cx >= self.w as i64 || cy >= self.h as i64 {
            return &[];
        }
        &self.cells[cy as usize * self.w + cx as usize]
    }
}

/// One soft pixel's nearest outline edge.
#[derive(Clone, Copy, Debug)]
struct SoftPixel {
    index: usize,
    a: usize,
    b: usize,
    t: f64,
    sign: f64,
    dist: f64,
}

struct Outline {
    mask: Tensor,
    soft: Vec<SoftPixel>,
}

fn point_segment(p: P2, a: P2, b: P2) -> (f64, f64) {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * d[0], a[1] + t * d[1]];
    (((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt(), t)
}

fn soft_outline(pts: &[P2], topo: &MeshTopology, sigma: f64, dims: (usize, usize)) -> Outline {
    let (h, w) = dims;
    let mut mask = Tensor::zeros(h, w);
    let reach = CUTOFF * sigma;
    let margin = reach.ceil() as i64 + 2;
    let areas: Vec<f64> = topo
        .faces
        .iter()
        .map(|f| signed_area(pts[f[0]], pts[f[1]], pts[f[2]]))
        .collect();
    let live = |fi: usize| areas[fi].abs() > DEGENERATE_AREA;

    // hard coverage and triangle bins
    let mut bins = Bins::new(margin, dims);
    for (fi, f) in topo.faces.iter().enumerate() {
        if !live(fi) {
            continue;
        }
        let [a, b, c] = f.map(|i| pts[i]);
        let lo = [a[0].min(b[0]).min(c[0]), a[1].min(b[1]).min(c[1])];
        let hi = [a[0].max(b[0]).max(c[0]), a[1].max(b[1]).max(c[1])];
        if hi[0] < -(margin as f64) || hi[1] < -(margin as f64) {
            continue;
        }
        if lo[0] > (w as i64 + margin) as f64 || lo[1] > (h as i64 + margin) as f64 {
            continue;
        }
        bins.insert(fi as u32, lo, hi);
        let x0 = (lo[0] - 0.5).ceil().max(0.0) as usize;
        let y0 = (lo[1] - 0.5).ceil().max(0.0) as usize;
        let x1 = ((hi[0] - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
        let y1 = ((hi[1] - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                if in_triangle(p, a, b, c, areas[fi]) {
                    mask.data[y * w + x] = 1.0;
                }
            }
        }
    }
    let covered = |p: P2| {
        bins.query(p).iter().any(|&fi| {
            let f = topo.faces[fi as usize];
            in_triangle(p, pts[f[0]], pts[f[1]], pts[f[2]], areas[fi as usize])
        })
    };

    // exposed contour edges
    let mut best: Vec<Option<SoftPixel>> = vec![None; h * w];
    for &(ia, ib, fs) in &topo.edges {
        let contour = match fs {
            [Some(f1), Some(f2)] => match (live(f1), live(f2)) {
                (true, true) => areas[f1].signum() != areas[f2].signum(),
                (true, false) | (false, true) => true,
                (false, false) => false,
            },
            [Some(f1), None] => live(f1),
            _ => false,
        };
        if !contour {
            continue;
        }
        let (a, b) = (pts[ia], pts[ib]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if len == 0.0 {
            continue;
        }
        let lo = [a[0].min(b[0]) - reach, a[1].min(b[1]) - reach];
        let hi = [a[0].max(b[0]) + reach, a[1].max(b[1]) + reach];
        if hi[0] < 0.0 || hi[1] < 0.0 || lo[0] > w as f64 || lo[1] > h as f64 {
            continue;
        }
        let m = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let n = [-d[1] / len, d[0] / len];
        let delta = 1e-6 * (1.0 + len);
        let p1 = [m[0] + delta * n[0], m[1] + delta * n[1]];
        let p2 = [m[0] - delta * n[0], m[1] - delta * n[1]];
        if covered(p1) && covered(p2) {
            continue;
        }
        let x0 = (lo[0] - 0.5).ceil().max(0.0) as usize;
        let y0 = (lo[1] - 0.5).ceil().max(0.0) as usize;
        let x1 = (hi[0] - 0.5).floor().min(w as f64 - 1.0);
        let y1 = (hi[1] - 0.5).floor().min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let (dist, t) = point_segment(p, a, b);
                if dist >= reach {
                    continue;
                }
                let idx = y * w + x;
                if best[idx].is_none_or(|s| dist < s.dist) {
                    best[idx] = Some(SoftPixel {
                        index: idx,
                        a: ia,
                        b: ib,
                        t,
                        sign: 0.0,
                        dist,
                    });
                }
            }
        }
    }
    let mut soft = Vec::new();
    for mut s in best.into_iter().flatten() {
        s.sign = if mask.data[s.index] > 0.5 { 1.0 } else { -1.0 };
        mask.data[s.index] = sigmoid(s.sign * s.dist / sigma);
        soft.push(s);
    }
    Outline { mask, soft }
}

/// Soft coverage (`h x w`) of one part from its projected vertices.
pub fn soft_part_mask(pts: &[P2], topo: &MeshTopology, sigma: f64, dims: (usize, usize)) -> Tensor {
    soft_outline(pts, topo, sigma, dims).mask
}

struct PartMaskOp {
    soft: Vec<SoftPixel>,
    sigma: f64,
    width: usize,
}

impl CustomOp for PartMaskOp {
    fn name(&self) -> &'static str {
        "part_mask"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let v = inputs[0];
        let mut g = Tensor::zeros(v.rows, 2);
        for s in &self.soft {
            let gi = grad.data[s.index];
            if gi == 0.0 || s.dist < 1e-12 {
                continue;
            }
            let m = output.data[s.index];
            let dd = gi * m * (1.0 - m) / self.sigma * s.sign;
            let p = [
                (s.index % self.width) as f64 + 0.5,
                (s.index / self.width) as f64 + 0.5,
            ];
            let (a, b) = ([v.at(s.a, 0), v.at(s.a, 1)], [v.at(s.b, 0), v.at(s.b, 1)]);
            let q = [a[0] + s.t * (b[0] - a[0]), a[1] + s.t * (b[1] - a[1])];
            let n = [(p[0] - q[0]) / s.dist, (p[1] - q[1]) / s.dist];
            for k in 0..2 {
                *g.at_mut(s.a, k) -= dd * n[k] * (1.0 - s.t);
                *g.at_mut(s.b, k) -= dd * n[k] * s.t;
            }
        }
        vec![g]
    }
}

/// Differentiable soft part mask from projected vertices (`n x 2`).
pub fn part_mask_var(
    tape: &mut Tape,
    projected: Var,
    topo: &MeshTopology,
    sigma: f64,
    dims: (usize, usize),
) -> Var {
    let v = tape.value(projected);
    let pts: Vec<P2> = (0..v.rows).map(|r| [v.at(r, 0), v.at(r, 1)]).collect();
    let out = soft_outline(&pts, topo, sigma, dims);
    tape.custom(
        &[projected],
        out.mask,
        Box::new(PartMaskOp {
            soft: out.soft,
            sigma,
            width: dims.1,
        }),
    )
}

/// `1 - prod(1 - m_i)`.
pub fn soft_union(masks: &[Tensor], dims: (usize, usize)) -> Tensor {
    let mut keep = Tensor::filled(dims.0, dims.1, 1.0);
    for m in masks {
        for (k, v) in keep.data.iter_mut().zip(&m.data) {
            *k *= 1.0 - v;
        }
    }
    keep.map(|k| 1.0 - k)
}

pub fn soft_union_var(tape: &mut Tape, masks: &[Var], dims: (usize, usize)) -> Var {
    let mut keep: Option<Var> = None;
    for &m in masks {
        let om = tape.one_minus(m);
        keep = Some(match keep {
            Some(k) => tape.mul(k, om),
            None => om,
        });
    }
    match keep {
        Some(k) => tape.one_minus(k),
        None => tape.constant(Tensor::zeros(dims.0, dims.1)),
    }
}

/// Nearest-surface depth per pixel (`+inf` where empty), interpolating
/// `1/z` across each projected triangle.
pub fn depth_buffer(parts: &[Vec<Projection>], topo: &MeshTopology, dims: (usize, usize)) -> Tensor {
    let (h, w) = dims;
    let mut depth = Tensor::filled(h, w, f64::INFINITY);
    for proj in parts {
        for f in &topo.faces {
            let [a, b, c] = f.map(|i| proj[i]);
            if a.clamped || b.clamped || c.clamped {
                continue;
            }
            let (pa, pb, pc) = ([a.u, a.v], [b.u, b.v], [c.u, c.v]);
            let area = signed_area(pa, pb, pc);
            if area.abs() <= DEGENERATE_AREA {
                continue;
            }
            let x0 = (pa[0].min(pb[0]).min(pc[0]) - 0.5).ceil().max(0.0) as usize;
            let y0 = (pa[1].min(pb[1]).min(pc[1]) - 0.5).ceil().max(0.0) as usize;
            let x1 = (pa[0].max(pb[0]).max(pc[0]) - 0.5).floor().min(w as f64 - 1.0);
            let y1 = (pa[1].max(pb[1]).max(pc[1]) - 0.5).floor().min(h as f64 - 1.0);
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            for y in y0..=y1 as usize {
                for x in x0..=x1 as usize {
                    let p = [x as f64 + 0.5, y as f64 + 0.5];
                    if !in_triangle(p, pa, pb, pc, area) {
                        continue;
                    }
                    let z = interpolated_depth(p, &a, &b, &c, area);
                    let d = &mut depth.data[y * w + x];
                    if z < *d {
                        *d = z;
                    }
                }
            }
        }
    }
    depth
}

/// Relative depth tolerance of the visibility test.
pub const VISIBILITY_EPS: f64 = 1e-3;

fn interpolated_depth(p: P2, a: &Projection, b: &Projection, c: &Projection, area: f64) -> f64 {
    let (pa, pb, pc) = ([a.u, a.v], [b.u, b.v], [c.u, c.v]);
    let la = signed_area(pb, pc, p) / area;
    let lb = signed_area(pc, pa, p) / area;
    let lc = 1.0 - la - lb;
    1.0 / (la / a.depth + lb / b.depth + lc / c.depth)
}

/// Per part and sample: visible when the sample projects inside the image
/// and no surface lies in front of it at its exact projected position
/// (within a relative depth tolerance).
pub fn visibility(parts: &[Vec<Projection>], topo: &MeshTopology, dims: (usize, usize)) -> Vec<Vec<bool>> {
    let (h, w) = dims;
    let mut bins = Bins::new(0, dims);
    let mut tris: Vec<(usize, usize, f64)> = Vec::new();
    for (pi, proj) in parts.iter().enumerate() {
        for (fi, f) in topo.faces.iter().enumerate() {
            let [a, b, c] = f.map(|i| proj[i]);
            if a.clamped || b.clamped || c.clamped {
                continue;
            }
            let area = signed_area([a.u, a.v], [b.u, b.v], [c.u, c.v]);
            if area.abs() <= DEGENERATE_AREA {
                continue;
            }
            let lo = [a.u.min(b.u).min(c.u), a.v.min(b.v).min(c.v)];
            let hi = [a.u.max(b.u).max(c.u), a.v.max(b.v).max(c.v)];
            if hi[0] < 0.0 || hi[1] < 0.0 || lo[0] >= w as f64 || lo[1] >= h as f64 {
                continue;
            }
            bins.insert(tris.len() as u32, lo, hi);
            tris.push((pi, fi, area));
        }
    }
    parts
        .iter()
        .map(|proj| {
            proj.iter()
                .map(|q| {
                    if q.clamped || !(q.u >= 0.0 && q.v >= 0.0 && q.u < w as f64 && q.v < h as f64) {
                        return false;
                    }
                    let p = [q.u, q.v];
                    let front = bins
                        .query(p)
                        .iter()
                        .filter_map(|&t| {
                            let (pi, fi, area) = tris[t as usize];
                            let f = topo.faces[fi];
                            let [a, b, c] = f.map(|i| parts[pi][i]);
                            in_triangle(p, [a.u, a.v], [b.u, b.v], [c.u, c.v], area)
                                .then(|| interpolated_depth(p, &a, &b, &c, area))
                        })
                        .fold(f64::INFINITY, f64::min);
                    q.depth <= front * (1.0 + VISIBILITY_EPS)
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RenderBuffer {
    pub silhouette: Tensor,
    pub parts: Vec<Tensor>,
    pub depth: Tensor,
    /// Per part, per vertex.
    pub visibility: Vec<Vec<bool>>,
    pub projections: Vec<Vec<Projection>>,
}

/// Plain (non-differentiable) render of world-space part surfaces.
pub fn rasterize_soft(
    parts: &[Vec<Vec3>],
    topo: &MeshTopology,
    camera: &CameraPose,
    sigma: f64,
    dims: (usize, usize),
) -> RenderBuffer {
    let projections: Vec<Vec<Projection>> =
        parts.iter().map(|p| project(camera, p, dims)).collect();
    let masks: Vec<Tensor> = projections
        .iter()
        .map(|proj| {
            let pts: Vec<P2> = proj.iter().map(|q| [q.u, q.v]).collect();
            soft_part_mask(&pts, topo, sigma, dims)
        })
        .collect();
    let depth = depth_buffer(&projections, topo, dims);
    let visibility = visibility(&projections, topo, dims);
    RenderBuffer {
        silhouette: soft_union(&masks, dims),
        parts: masks,
        depth,
        visibility,
        projections,
    }
}

/// Integer pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropBox {
    pub fn full(dims: (usize, usize)) -> Self {
        CropBox {
            x0: 0,
            y0: 0,
            x1: dims.1,
            y1: dims.0,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// Bounding box of `mask > 0.5`, padded by `pad` of its size on every side
/// and clipped to the image; `None` when nothing passes the threshold.
pub fn part_box(mask: &Tensor, pad: f64) -> Option<CropBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.rows {
        for x in 0..mask.cols {
            if mask.at(y, x) > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    let px = ((x1 - x0) as f64 * pad).ceil() as usize;
    let py = ((y1 - y0) as f64 * pad).ceil() as usize;
    Some(CropBox {
        x0: x0.saturating_sub(px),
        y0: y0.saturating_sub(py),
        x1: (x1 + px).min(mask.cols),
        y1: (y1 + py).min(mask.rows),
    })
}

/// Bilinear taps `(index, weight)` along one axis for output sample `o`.
fn taps(o: usize, start: usize, len: usize, factor: usize) -> [(usize, f64); 2] {
    let src = (o as f64 + 0.5) / factor as f64 - 0.5;
    let src = src.clamp(0.0, (len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    let f = src - i0 as f64;
    [(start + i0, 1.0 - f), (start + i1, f)]
}

/// Crops `b` from `grid` and bilinearly upsamples it by `factor`.
pub fn zoom_crop(grid: &Tensor, b: CropBox, factor: usize) -> Tensor {
    let (oh, ow) = (b.height() * factor, b.width() * factor);
    let mut out = Tensor::zeros(oh, ow);
    for oy in 0..oh {
        let ty = taps(oy, b.y0, b.height(), factor);
        for ox in 0..ow {
            let tx = taps(ox, b.x0, b.width(), factor);
            let mut v = 0.0;
            for &(y, wy) in &ty {
                for &(x, wx) in &tx {
                    v += wy * wx * grid.at(y, x);
                }
            }
            *out.at_mut(oy, ox) = v;
        }
    }
    out
}

struct CropOp {
    b: CropBox,
    factor: usize,
}

impl CustomOp for CropOp {
    fn name(&self) -> &'static str {
        "zoom_crop"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let mut g = Tensor::zeros(inputs[0].rows, inputs[0].cols);
        for oy in 0..output.rows {
            let ty = taps(oy, self.b.y0, self.b.height(), self.factor);
            for ox in 0..output.cols {
                let tx = taps(ox, self.b.x0, self.b.width(), self.factor);
                let go = grad.at(oy, ox);
                for &(y, wy) in &ty {
                    for &(x, wx) in &tx {
                        *g.at_mut(y, x) += wy * wx * go;
                    }
                }
            }
        }
        vec![g]
    }
}

pub fn zoom_crop_var(tape: &mut Tape, grid: Var, b: CropBox, factor: usize) -> Var {
    let value = zoom_crop(tape.value(grid), b, factor);
    tape.custom(&[grid], value, Box::new(CropOp { b, factor }))
}

/// Writes a `[0, 1]` grid as an 8-bit grayscale PNG.
pub fn save_gray_png(grid: &Tensor, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_fn(grid.cols as u32, grid.rows as u32, |x, y| {
        image::Luma([(grid.at(y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
