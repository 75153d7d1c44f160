//! Training objectives. Each has a plain `f64` form and a tape form; the
//! tape forms are what the optimizer differentiates.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::ingest::EnsembleConfig;
use crate::mesh;
use crate::render::{self, CropBox};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sil: f64,
    pub part: f64,
    pub sem: f64,
    pub rot: f64,
    pub sym: f64,
    pub lap: f64,
    pub norm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, name: &str) -> f64 {
        match name {
            "sil" => self.sil,
            "part" => self.part,
            "sem" => self.sem,
            "rot" => self.rot,
            "sym" => self.sym,
            "lap" => self.lap,
            "norm" => self.norm,
            "total" => self.total,
            _ => 0.0,
        }
    }

    pub fn set(&mut self, name: &str, v: f64) {
        match name {
            "sil" => self.sil = v,
            "part" => self.part = v,
            "sem" => self.sem = v,
            "rot" => self.rot = v,
            "sym" => self.sym = v,
            "lap" => self.lap = v,
            "norm" => self.norm = v,
            "total" => self.total = v,
            _ => panic!("unknown loss `{name}`"),
        }
    }

    /// Recomputes `total` from the configured weights.
    pub fn with_total(mut self, config: &EnsembleConfig) -> Self {
        self.total = crate::ingest::LOSS_NAMES
            .iter()
            .map(|k| config.weight(k) * self.get(k))
            .sum();
        self
    }

    pub fn is_finite(&self) -> bool {
        [self.sil, self.part, self.sem, self.rot, self.sym, self.lap, self.norm, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One line of the per-step JSON-lines log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: String,
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

pub fn write_jsonl(mut w: impl Write, rec: &LossRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, rec)?;
    w.write_all(b"\n")
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            actual: b.shape(),
        });
    }
    Ok(())
}

fn mean_sq_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Per-image mean squared difference, summed over instances.
pub fn loss_sil(rendered: &[Tensor], pseudo: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for (m, t) in rendered.iter().zip(pseudo) {
        check_same(m, t)?;
        total += mean_sq_diff(m, t);
    }
    Ok(total)
}

pub fn loss_sil_var(tape: &mut Tape, rendered: Var, pseudo: &Tensor) -> Var {
    let t = tape.constant(pseudo.clone());
    let d = tape.sub(rendered, t);
    let sq = tape.square(d);
    tape.mean(sq)
}

/// Mean squared difference of zoomed crops, averaged over the valid boxes
/// of one instance (`None` boxes are skipped; no valid box gives 0).
pub fn loss_part(rendered: &Tensor, pseudo: &Tensor, boxes: &[Option<CropBox>], factor: usize) -> Result<f64> {
    check_same(rendered, pseudo)?;
    let valid: Vec<CropBox> = boxes.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = valid
        .iter()
        .map(|&b| {
            mean_sq_diff(
                &render::zoom_crop(rendered, b, factor),
                &render::zoom_crop(pseudo, b, factor),
            )
        })
        .sum();
    Ok(s / valid.len() as f64)
}

/// Tape form of [`loss_part`]; `None` when no box is valid.
pub fn loss_part_var(
    tape: &mut Tape,
    rendered: Var,
    pseudo: &Tensor,
    boxes: &[Option<CropBox>],
    factor: usize,
) -> Option<Var> {
    let valid: Vec<CropBox> = boxes.iter().flatten().copied().collect();
    if valid.is_empty() {
        return None;
    }
    let mut acc: Option<Var> = None;
    for b in &valid {
        let c = render::zoom_crop_var(tape, rendered, *b, factor);
        let t = tape.constant(render::zoom_crop(pseudo, *b, factor));
        let d = tape.sub(c, t);
        let sq = tape.square(d);
        let m = tape.mean(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, m),
            None => m,
        });
    }
    Some(tape.scale(acc.unwrap(), 1.0 / valid.len() as f64))
}

/// `|proj - p|^2 + alpha |q - k|^2`.
pub fn semantic_distance(pixel: [f64; 2], proj: [f64; 2], q: &[f64], k: &[f64], alpha: f64) -> f64 {
    let g = (proj[0] - pixel[0]).powi(2) + (proj[1] - pixel[1]).powi(2);
    let f: f64 = q.iter().zip(k).map(|(a, b)| (a - b).powi(2)).sum();
    g + alpha * f
}

/// Fixed per-instance inputs to the semantic Chamfer term: sampled
/// foreground pixels (normalized coordinates) and the feature part of the
/// distance for every (pixel, surface point) combination.
#[derive(Clone, Debug)]
pub struct SemanticTargets {
    pub pixels: Vec<[f64; 2]>,
    /// Row-major `pixels.len() x n_points`, already multiplied by alpha.
    pub feature_cost: Vec<f64>,
    pub n_points: usize,
}

impl SemanticTargets {
    /// `pixel_features` rows match `pixels`; `point_features` rows are the
    /// surface features of the sampled points.
    pub fn new(pixels: Vec<[f64; 2]>, pixel_features: &Tensor, point_features: &Tensor, alpha: f64) -> Self {
        assert_eq!(pixel_features.rows, pixels.len());
        assert_eq!(pixel_features.cols, point_features.cols);
        let n = point_features.rows;
        let mut feature_cost = Vec::with_capacity(pixels.len() * n);
        for p in 0..pixels.len() {
            let k = pixel_features.row_slice(p);
            for x in 0..n {
                let q = point_features.row_slice(x);
                let f: f64 = q.iter().zip(k).map(|(a, b)| (a - b).powi(2)).sum();
                feature_cost.push(alpha * f);
            }
        }
        SemanticTargets {
            pixels,
            feature_cost,
            n_points: n,
        }
    }
}

/// Both Chamfer directions with their argmins.
fn chamfer(targets: &SemanticTargets, proj: &Tensor) -> (f64, Vec<usize>, Vec<usize>) {
    let (np, nx) = (targets.pixels.len(), targets.n_points);
    let mut best_x = vec![(f64::INFINITY, 0usize); np];
    let mut best_p = vec![(f64::INFINITY, 0usize); nx];
    for (p, px) in targets.pixels.iter().enumerate() {
        let row = &targets.feature_cost[p * nx..(p + 1) * nx];
        for x in 0..nx {
            let d = (proj.at(x, 0) - px[0]).powi(2) + (proj.at(x, 1) - px[1]).powi(2) + row[x];
            if d < best_x[p].0 {
                best_x[p] = (d, x);
            }
            if d < best_p[x].0 {
                best_p[x] = (d, p);
            }
        }
    }
    let a: f64 = best_x.iter().map(|b| b.0).sum::<f64>() / np as f64;
    let b: f64 = best_p.iter().map(|b| b.0).sum::<f64>() / nx as f64;
    (
        a + b,
        best_x.into_iter().map(|b| b.1).collect(),
        best_p.into_iter().map(|b| b.1).collect(),
    )
}

/// Symmetric Chamfer distance under the semantic distance.
pub fn loss_sem(targets: &SemanticTargets, proj: &Tensor) -> f64 {
    if targets.pixels.is_empty() || targets.n_points == 0 {
        return 0.0;
    }
    chamfer(targets, proj).0
}

struct ChamferOp {
    pixels: Vec<[f64; 2]>,
    nearest_point: Vec<usize>,
    nearest_pixel: Vec<usize>,
}

impl CustomOp for ChamferOp {
    fn name(&self) -> &'static str {
        "semantic_chamfer"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let proj = inputs[0];
        let go = grad.item();
        let mut g = Tensor::zeros(proj.rows, 2);
        let np = self.pixels.len() as f64;
        let nx = proj.rows as f64;
        for (p, &x) in self.nearest_point.iter().enumerate() {
            let px = self.pixels[p];
            for k in 0..2 {
                *g.at_mut(x, k) += go * 2.0 * (proj.at(x, k) - px[k]) / np;
            }
        }
        for (x, &p) in self.nearest_pixel.iter().enumerate() {
            let px = self.pixels[p];
            for k in 0..2 {
                *g.at_mut(x, k) += go * 2.0 * (proj.at(x, k) - px[k]) / nx;
            }
        }
        vec![g]
    }
}

/// Tape form of [`loss_sem`] over normalized projected points (`n x 2`).
pub fn loss_sem_var(tape: &mut Tape, proj: Var, targets: &SemanticTargets) -> Var {
    let value = tape.value(proj);
    assert_eq!(value.rows, targets.n_points);
    if targets.pixels.is_empty() || targets.n_points == 0 {
        return tape.scalar(0.0);
    }
    let (v, nearest_point, nearest_pixel) = chamfer(targets, value);
    tape.custom(
        &[proj],
        Tensor::scalar(v),
        Box::new(ChamferOp {
            pixels: targets.pixels.clone(),
            nearest_point,
            nearest_pixel,
        }),
    )
}

/// Up to `n` foreground pixel indices (row-major order), one drawn
/// uniformly from each of `n` equal strata.
pub fn stratified_sample(candidates: &[usize], n: usize, seed: u64) -> Vec<usize> {
    if candidates.len() <= n {
        return candidates.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = candidates.len();
    (0..n)
        .map(|k| {
            let lo = k * len / n;
            let hi = ((k + 1) * len / n).max(lo + 1);
            candidates[rng.random_range(lo..hi)]
        })
        .collect()
}

fn frob_sq(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> f64 {
    (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| (a[i][j] - b[i][j]).powi(2)).sum()
}

/// Mean over parts of `|R_i - Rbar_i|_F^2` for one instance.
pub fn loss_rot(rotations: &[[[f64; 3]; 3]], rest: &[[[f64; 3]; 3]]) -> f64 {
    if rotations.is_empty() {
        return 0.0;
    }
    rotations.iter().zip(rest).map(|(r, b)| frob_sq(r, b)).sum::<f64>() / rotations.len() as f64
}

pub fn loss_rot_var(tape: &mut Tape, rotations: &[Var], rest: &[Var]) -> Var {
    if rotations.is_empty() {
        return tape.scalar(0.0);
    }
    let mut acc: Option<Var> = None;
    for (&r, &b) in rotations.iter().zip(rest) {
        let d = tape.sub(r, b);
        let sq = tape.square(d);
        let s = tape.sum(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    tape.scale(acc.unwrap(), 1.0 / rotations.len() as f64)
}

/// `sum |J_a - reflect(J_b)|^2` over pairs.
pub fn loss_sym(joints: &[Vec3], pairs: &[(usize, usize)]) -> f64 {
    pairs
        .iter()
        .map(|&(a, b)| {
            let (p, q) = (joints[a], joints[b]);
            (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] + q[2]).powi(2)
        })
        .sum()
}

/// Tape form over a `p x 3` joint matrix.
pub fn loss_sym_var(tape: &mut Tape, joints: Var, pairs: &[(usize, usize)]) -> Var {
    if pairs.is_empty() {
        return tape.scalar(0.0);
    }
    let ia: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ib: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let a = tape.gather_rows(joints, &ia);
    let b = tape.gather_rows(joints, &ib);
    let flip = tape.constant(Tensor::row(&[1.0, 1.0, -1.0]));
    let rb = tape.mul(b, flip);
    let d = tape.sub(a, rb);
    let sq = tape.square(d);
    tape.sum(sq)
}

/// Uniform graph Laplacian `v - mean(neighbours(v))` as a fixed sparse
/// operator; isolated vertices are dropped.
#[derive(Clone, Debug)]
pub struct Laplacian {
    rows: Vec<(usize, Vec<usize>)>,
    n_vertices: usize,
}

impl Laplacian {
    pub fn new(n_vertices: usize, faces: &[[usize; 3]]) -> Self {
        let nb = mesh::vertex_neighbors(n_vertices, faces);
        let rows = nb
            .into_iter()
            .enumerate()
            .filter(|(_, n)| !n.is_empty())
            .collect();
        Laplacian { rows, n_vertices }
    }

    pub fn apply(&self, v: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(self.rows.len(), v.cols);
        for (r, (i, nb)) in self.rows.iter().enumerate() {
            let inv = 1.0 / nb.len() as f64;
            for c in 0..v.cols {
                let m: f64 = nb.iter().map(|&j| v.at(j, c)).sum::<f64>() * inv;
                *out.at_mut(r, c) = v.at(*i, c) - m;
            }
        }
        out
    }
}

impl CustomOp for Laplacian {
    fn name(&self) -> &'static str {
        "laplacian"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let cols = inputs[0].cols;
        let mut g = Tensor::zeros(self.n_vertices, cols);
        for (r, (i, nb)) in self.rows.iter().enumerate() {
            let inv = 1.0 / nb.len() as f64;
            for c in 0..cols {
                let gr = grad.at(r, c);
                *g.at_mut(*i, c) += gr;
                for &j in nb {
                    *g.at_mut(j, c) -= gr * inv;
                }
            }
        }
        vec![g]
    }
}

/// Mean over (non-isolated) vertices of `|v - mean(neighbours)|^2`.
pub fn loss_lap(vertices: &Tensor, lap: &Laplacian) -> f64 {
    let d = lap.apply(vertices);
    if d.rows == 0 {
        return 0.0;
    }
    d.data.iter().map(|x| x * x).sum::<f64>() / d.rows as f64
}

pub fn loss_lap_var(tape: &mut Tape, vertices: Var, lap: &Laplacian) -> Var {
    if lap.rows.is_empty() {
        return tape.scalar(0.0);
    }
    let value = lap.apply(tape.value(vertices));
    let n = value.rows;
    let d = tape.custom(&[vertices], value, Box::new(lap.clone()));
    let sq = tape.square(d);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / n as f64)
}

/// Adjacent face pairs with the face list, precomputed once per template.
#[derive(Clone, Debug)]
pub struct FacePairs {
    pub faces: Vec<[usize; 3]>,
    pub pairs: Vec<(usize, usize)>,
}

impl FacePairs {
    pub fn new(faces: &[[usize; 3]]) -> Self {
        FacePairs {
            faces: faces.to_vec(),
            pairs: mesh::face_adjacency(faces),
        }
    }
}

fn face_normal(v: &Tensor, f: [usize; 3]) -> Vec3 {
    let p = |i: usize| [v.at(i, 0), v.at(i, 1), v.at(i, 2)];
    let (a, b, c) = (p(f[0]), p(f[1]), p(f[2]));
    crate::geom::cross(crate::geom::sub(b, a), crate::geom::sub(c, a))
}

const DEGENERATE_NORMAL: f64 = 1e-12;

fn live_pairs(v: &Tensor, fp: &FacePairs) -> Vec<(usize, usize)> {
    let ok: Vec<bool> = fp
        .faces
        .iter()
        .map(|&f| crate::geom::norm(face_normal(v, f)) > DEGENERATE_NORMAL)
        .collect();
    fp.pairs.iter().copied().filter(|&(a, b)| ok[a] && ok[b]).collect()
}

/// Mean over adjacent face pairs of `1 - cos` between their normals.
pub fn loss_norm(vertices: &Tensor, fp: &FacePairs) -> f64 {
    let pairs = live_pairs(vertices, fp);
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|&(a, b)| {
            let (na, nb) = (face_normal(vertices, fp.faces[a]), face_normal(vertices, fp.faces[b]));
            1.0 - crate::geom::dot(na, nb) / (crate::geom::norm(na) * crate::geom::norm(nb))
        })
        .sum::<f64>()
        / pairs.len() as f64
}

pub fn loss_norm_var(tape: &mut Tape, vertices: Var, fp: &FacePairs) -> Var {
    let pairs = live_pairs(tape.value(vertices), fp);
    if pairs.is_empty() {
        return tape.scalar(0.0);
    }
    let idx = |k: usize| fp.faces.iter().map(|f| f[k]).collect::<Vec<_>>();
    let a = tape.gather_rows(vertices, &idx(0));
    let b = tape.gather_rows(vertices, &idx(1));
    let c = tape.gather_rows(vertices, &idx(2));
    let e1 = tape.sub(b, a);
    let e2 = tape.sub(c, a);
    let n = cross_rows(tape, e1, e2);
    let len = tape.norm_rows(n);
    let unit = tape.div(n, len);
    let u1 = tape.gather_rows(unit, &pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let u2 = tape.gather_rows(unit, &pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let prod = tape.mul(u1, u2);
    let cos = tape.sum_cols(prod);
    let one_minus = tape.one_minus(cos);
    tape.mean(one_minus)
}

/// Row-wise cross product of two `n x 3` matrices.
pub fn cross_rows(tape: &mut Tape, a: Var, b: Var) -> Var {
    let ac: Vec<Var> = (0..3).map(|k| tape.col(a, k)).collect();
    let bc: Vec<Var> = (0..3).map(|k| tape.col(b, k)).collect();
    let mut comps = Vec::with_capacity(3);
    for (i, j) in [(1, 2), (2, 0), (0, 1)] {
        let p = tape.mul(ac[i], bc[j]);
        let q = tape.mul(ac[j], bc[i]);
        comps.push(tape.sub(p, q));
    }
    tape.concat_cols(&comps)
}
