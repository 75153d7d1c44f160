//! Part surfaces: a unit-sphere template deformed by a frequency-decomposed
//! MLP, then placed by a similarity transform. Also the per-part surface
//! feature network.
//!
//! Layer `i` of the deformation network computes
//!
//! ```text
//! z_0 = PE_0(x)
//! z_i = PE_i(x) * (z_{i-1} W_i^h + b_i^h)
//! y_i = y_{i-1} + z_i W_i^o + b_i^o,   y_0 = 0
//! ```
//!
//! with `PE_i(x) = sin(x A_i + phi)`, where the columns of `A_i` are fixed
//! random unit directions scaled by `omega_i`. Because `z_i` is a product
//! of sines, `y_i` only contains frequencies up to `omega_0 + .. + omega_i`.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Adam, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::mesh;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"HLPM1";

/// Unit-sphere samples with closed, outward-oriented connectivity.
#[derive(Clone, Debug)]
pub struct PartTemplate {
    /// `m x 3`.
    pub points: Tensor,
    pub faces: Vec<[usize; 3]>,
}

impl PartTemplate {
    pub fn icosphere(level: usize) -> Self {
        let m = mesh::icosphere(level);
        let data = m.vertices.iter().flatten().copied().collect();
        PartTemplate {
            points: Tensor::new(m.vertices.len(), 3, data),
            faces: m.faces,
        }
    }

    pub fn len(&self) -> usize {
        self.points.rows
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows == 0
    }

    pub fn point(&self, i: usize) -> Vec3 {
        let r = self.points.row_slice(i);
        [r[0], r[1], r[2]]
    }
}

/// Trainable weights of one deformation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformLayer {
    pub wh: Tensor,
    pub bh: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl DeformLayer {
    pub const NAMES: [&'static str; 4] = ["wh", "bh", "wo", "bo"];

    fn init(width: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = 1.0 / (width as f64).sqrt();
        let wh = (0..width * width).map(|_| rng.random_range(-a..a)).collect();
        let bh = (0..width).map(|_| rng.random_range(-a..a)).collect();
        DeformLayer {
            wh: Tensor::new(width, width, wh),
            bh: Tensor::new(1, width, bh),
            wo: Tensor::zeros(width, 3),
            bo: Tensor::zeros(1, 3),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.wh, &self.bh, &self.wo, &self.bo]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.wh, &mut self.bh, &mut self.wo, &mut self.bo]
    }

    pub fn zero_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.rows, t.cols);
        DeformLayer {
            wh: z(&self.wh),
            bh: z(&self.bh),
            wo: z(&self.wo),
            bo: z(&self.bo),
        }
    }
}

/// Tape handles for one layer's weights.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub wh: Var,
    pub bh: Var,
    pub wo: Var,
    pub bo: Var,
}

impl LayerVars {
    pub fn constant(tape: &mut Tape, layer: &DeformLayer) -> Self {
        LayerVars {
            wh: tape.constant(layer.wh.clone()),
            bh: tape.constant(layer.bh.clone()),
            wo: tape.constant(layer.wo.clone()),
            bo: tape.constant(layer.bo.clone()),
        }
    }

    pub fn param(tape: &mut Tape, layer: &DeformLayer) -> Self {
        LayerVars {
            wh: tape.param(layer.wh.clone()),
            bh: tape.param(layer.bh.clone()),
            wo: tape.param(layer.wo.clone()),
            bo: tape.param(layer.bo.clone()),
        }
    }

    pub fn vars(&self) -> [Var; 4] {
        [self.wh, self.bh, self.wo, self.bo]
    }
}

/// Hidden activation and accumulated offset after some number of layers.
#[derive(Clone, Copy, Debug)]
pub struct DeformState {
    pub z: Var,
    pub y: Option<Var>,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartDeformMLP {
    /// `omega_0 ..= omega_L`.
    pub omegas: Vec<f64>,
    /// One phase per hidden unit, shared by every layer.
    pub phases: Vec<f64>,
    /// `3 x width` lift per encoding, columns of norm `omega_i`.
    pub lifts: Vec<Tensor>,
    /// Layers `1 ..= L`; `layers[i - 1]` is layer `i`.
    pub layers: Vec<DeformLayer>,
    pub shared_depth: usize,
}

fn unit_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

fn random_lift(width: usize, omega: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(3, width);
    for c in 0..width {
        let d = unit_direction(rng);
        for r in 0..3 {
            *t.at_mut(r, c) = d[r] * omega;
        }
    }
    t
}

fn alternating_phases(width: usize) -> Vec<f64> {
    (0..width)
        .map(|c| if c % 2 == 0 { 0.0 } else { std::f64::consts::FRAC_PI_2 })
        .collect()
}

impl PartDeformMLP {
    /// Network with `omegas.len() - 1` layers, hidden weights drawn from
    /// `U(-1/sqrt(width), 1/sqrt(width))` and zero output layers.
    pub fn new(omegas: &[f64], width: usize, shared_depth: usize, seed: u64) -> Self {
        assert!(omegas.len() >= 2, "need at least one layer");
        assert!(shared_depth >= 1 && shared_depth < omegas.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lifts = omegas
            .iter()
            .map(|&w| random_lift(width, w, &mut rng))
            .collect();
        let layers = (1..omegas.len())
            .map(|_| DeformLayer::init(width, &mut rng))
            .collect();
        PartDeformMLP {
            omegas: omegas.to_vec(),
            phases: alternating_phases(width),
            lifts,
            layers,
            shared_depth,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.phases.len()
    }

    fn phase_row(&self) -> Tensor {
        Tensor::new(1, self.width(), self.phases.clone())
    }

    /// `PE_i` for each row of `x` (`n x 3`).
    pub fn positional_encoding(&self, x: &Tensor, i: usize) -> Tensor {
        let mut a = x.matmul(&self.lifts[i]);
        let w = self.width();
        for (k, v) in a.data.iter_mut().enumerate() {
            *v = (*v + self.phases[k % w]).sin();
        }
        a
    }

    /// Offsets `y_depth` for each row of `x`.
    pub fn deform_points(&self, x: &Tensor, depth: usize) -> Tensor {
        assert!(depth <= self.depth());
        let mut y = Tensor::zeros(x.rows, 3);
        let mut z = self.positional_encoding(x, 0);
        for i in 1..=depth {
            let l = &self.layers[i - 1];
            let pe = self.positional_encoding(x, i);
            let mut h = z.matmul(&l.wh);
            for (k, v) in h.data.iter_mut().enumerate() {
                *v = (*v + l.bh.data[k % l.bh.cols]) * pe.data[k];
            }
            z = h;
            let o = z.matmul(&l.wo);
            for (k, v) in y.data.iter_mut().enumerate() {
                *v += o.data[k] + l.bo.data[k % 3];
            }
        }
        y
    }

    pub fn deform(&self, x: Vec3, depth: usize) -> Vec3 {
        let y = self.deform_points(&Tensor::row(&x), depth);
        [y.data[0], y.data[1], y.data[2]]
    }

    pub fn pe_var(&self, tape: &mut Tape, x: Var, i: usize) -> Var {
        let lift = tape.constant(self.lifts[i].clone());
        let ph = tape.constant(self.phase_row());
        let a = tape.matmul(x, lift);
        let b = tape.add(a, ph);
        tape.sin(b)
    }

    pub fn begin_var(&self, tape: &mut Tape, x: Var) -> DeformState {
        DeformState {
            z: self.pe_var(tape, x, 0),
            y: None,
            depth: 0,
        }
    }

    /// Applies the next layer using the weights in `vars`.
    pub fn layer_var(
        &self,
        tape: &mut Tape,
        x: Var,
        state: DeformState,
        vars: &LayerVars,
    ) -> DeformState {
        let i = state.depth + 1;
        let pe = self.pe_var(tape, x, i);
        let h = tape.matmul(state.z, vars.wh);
        let h = tape.add(h, vars.bh);
        let z = tape.mul(pe, h);
        let o = tape.matmul(z, vars.wo);
        let o = tape.add(o, vars.bo);
        let y = match state.y {
            Some(prev) => tape.add(prev, o),
            None => o,
        };
        DeformState {
            z,
            y: Some(y),
            depth: i,
        }
    }

    /// Offsets at `vars.len()` layers, differentiable in `x` and weights.
    pub fn deform_var(&self, tape: &mut Tape, x: Var, vars: &[LayerVars]) -> Var {
        let mut s = self.begin_var(tape, x);
        for v in vars {
            s = self.layer_var(tape, x, s, v);
        }
        match s.y {
            Some(y) => y,
            None => {
                let n = tape.shape(x).0;
                tape.constant(Tensor::zeros(n, 3))
            }
        }
    }

    /// Copy with layers above `shared_depth` replaced.
    pub fn with_instance_layers(&self, deep: &[DeformLayer]) -> Self {
        assert_eq!(deep.len(), self.depth() - self.shared_depth);
        let mut out = self.clone();
        out.layers[self.shared_depth..].clone_from_slice(deep);
        out
    }

    pub fn instance_layers(&self) -> &[DeformLayer] {
        &self.layers[self.shared_depth..]
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [self.depth(), self.width(), self.shared_depth] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        write_f64s(&mut w, &self.omegas)?;
        write_f64s(&mut w, &self.phases)?;
        for t in &self.lifts {
            write_tensor(&mut w, t)?;
        }
        for l in &self.layers {
            for t in l.tensors() {
                write_tensor(&mut w, t)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> std::io::Result<Self> {
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a part checkpoint"));
        }
        let depth = read_u32(&mut r)? as usize;
        let width = read_u32(&mut r)? as usize;
        let shared_depth = read_u32(&mut r)? as usize;
        if depth == 0 || shared_depth == 0 || shared_depth > depth || width == 0 {
            return Err(bad("inconsistent checkpoint header"));
        }
        let omegas = read_f64s(&mut r, depth + 1)?;
        let phases = read_f64s(&mut r, width)?;
        let lifts = (0..=depth)
            .map(|_| read_tensor(&mut r))
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            layers.push(DeformLayer {
                wh: read_tensor(&mut r)?,
                bh: read_tensor(&mut r)?,
                wo: read_tensor(&mut r)?,
                bo: read_tensor(&mut r)?,
            });
        }
        Ok(PartDeformMLP {
            omegas,
            phases,
            lifts,
            layers,
            shared_depth,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        PartDeformMLP::read_from(std::io::BufReader::new(f)).map_err(|e| Error::io(path, e))
    }
}

fn write_f64s(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(t.rows as u32).to_le_bytes())?;
    w.write_all(&(t.cols as u32).to_le_bytes())?;
    write_f64s(w, &t.data)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

fn read_tensor(r: &mut impl Read) -> std::io::Result<Tensor> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "tensor too large",
        ));
    }
    Ok(Tensor::new(rows, cols, read_f64s(r, rows * cols)?))
}

/// Similarity transform placing a part: `v = s R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartTransform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl PartTransform {
    pub fn identity() -> Self {
        PartTransform {
            scale: 1.0,
            rotation: geom::IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        geom::add(
            geom::scale(geom::mat_vec(&self.rotation, p), self.scale),
            self.translation,
        )
    }
}

/// Surface points `s R (x + y_depth(x)) + t` for every template sample.
pub fn assemble_part(
    template: &PartTemplate,
    mlp: &PartDeformMLP,
    transform: &PartTransform,
    depth: usize,
) -> Result<Vec<Vec3>> {
    assemble_primitive(template, [1.0; 3], mlp, transform, depth)
}

/// As [`assemble_part`], with the template first stretched per axis so
/// the undeformed part is an ellipsoid with semi-axes `axes`.
pub fn assemble_primitive(
    template: &PartTemplate,
    axes: Vec3,
    mlp: &PartDeformMLP,
    transform: &PartTransform,
    depth: usize,
) -> Result<Vec<Vec3>> {
    if !(transform.scale > 0.0) {
        return Err(Error::NonPositiveScale(transform.scale));
    }
    let y = mlp.deform_points(&template.points, depth);
    Ok((0..template.len())
        .map(|i| {
            let x = template.point(i);
            let r = y.row_slice(i);
            let p = [
                axes[0] * x[0] + r[0],
                axes[1] * x[1] + r[1],
                axes[2] * x[2] + r[2],
            ];
            transform.apply(p)
        })
        .collect())
}

/// Differentiable placement: `scale * local R^T + t` with `local` (`m x 3`),
/// `rotation` (`3 x 3`), `scale` (`1 x 1`) and `t` (`1 x 3`).
pub fn place_var(tape: &mut Tape, local: Var, scale: Var, rotation: Var, t: Var) -> Var {
    let rt = tape.transpose(rotation);
    let rotated = tape.matmul(local, rt);
    let scaled = tape.mul(rotated, scale);
    tape.add(scaled, t)
}

/// Per-part surface feature network: a single-frequency sine encoding,
/// two tanh layers and a linear head whose output is normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMLP {
    pub lift: Tensor,
    pub phases: Vec<f64>,
    /// `[w1, b1, w2, b2, w3, b3]`.
    pub weights: Vec<Tensor>,
}

pub const FEATURE_FREQUENCY: f64 = 2.0;

impl FeatureMLP {
    pub fn new(dim: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lift = random_lift(width, FEATURE_FREQUENCY, &mut rng);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            Tensor::new(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.random_range(-a..a)).collect(),
            )
        };
        let weights = vec![
            uniform(width, width, width),
            uniform(1, width, width),
            uniform(width, width, width),
            uniform(1, width, width),
            uniform(width, dim, width),
            uniform(1, dim, width),
        ];
        FeatureMLP {
            lift,
            phases: alternating_phases(width),
            weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights[4].cols
    }

    fn encode(&self, x: &Tensor) -> Tensor {
        let mut a = x.matmul(&self.lift);
        let w = self.phases.len();
        for (k, v) in a.data.iter_mut().enumerate() {
            *v = (*v + self.phases[k % w]).sin();
        }
        a
    }

    /// Unit-norm features for each row of `x` (`n x 3`).
    pub fn query_points(&self, x: &Tensor) -> Tensor {
        let mut h = self.encode(x);
        for (li, act) in [(0, true), (2, true), (4, false)] {
            let mut next = h.matmul(&self.weights[li]);
            let b = &self.weights[li + 1];
            for (k, v) in next.data.iter_mut().enumerate() {
                *v += b.data[k % b.cols];
                if act {
                    *v = v.tanh();
                }
            }
            h = next;
        }
        for r in 0..h.rows {
            let row = &mut h.data[r * h.cols..(r + 1) * h.cols];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        h
    }

    pub fn query(&self, x: Vec3) -> Vec<f64> {
        self.query_points(&Tensor::row(&x)).data
    }

    fn forward_var(&self, tape: &mut Tape, enc: Var, w: &[Var]) -> Var {
        let mut h = enc;
        for li in [0, 2, 4] {
            let m = tape.matmul(h, w[li]);
            let a = tape.add(m, w[li + 1]);
            h = if li < 4 { tape.tanh(a) } else { a };
        }
        let n = tape.norm_rows(h);
        tape.div(h, n)
    }

    /// Regresses normalized outputs onto `targets` (`n x dim`, unit rows)
    /// with Adam on the squared error; returns the final loss.
    pub fn fit(&mut self, x: &Tensor, targets: &Tensor, steps: usize, lr: f64) -> f64 {
        assert_eq!(x.rows, targets.rows);
        assert_eq!(targets.cols, self.dim());
        let enc_value = self.encode(x);
        let mut opt = Adam::new(lr);
        let mut last = f64::NAN;
        for _ in 0..steps {
            let mut tape = Tape::new();
            let enc = tape.constant(enc_value.clone());
            let w: Vec<Var> = self.weights.iter().map(|t| tape.param(t.clone())).collect();
            let out = self.forward_var(&mut tape, enc, &w);
            let tgt = tape.constant(targets.clone());
            let d = tape.sub(out, tgt);
            let sq = tape.square(d);
            let s = tape.sum_cols(sq);
            let loss = tape.mean(s);
            last = tape.value(loss).item();
            let grads = tape.backward(loss).expect("scalar loss");
            let g: Vec<Tensor> = w.iter().map(|&v| grads.get(v)).collect();
            let mut params: Vec<&mut Tensor> = self.weights.iter_mut().collect();
            opt.step(&mut params, &g);
        }
        last
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{check_gradients, GradCheck};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn omegas() -> Vec<f64> {
        (0..=6).map(|i| 2f64.powi(i)).collect()
    }

    fn randomize_outputs(mlp: &mut PartDeformMLP, seed: u64, amp: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut mlp.layers {
            for t in [&mut l.wo, &mut l.bo] {
                t.data.iter_mut().for_each(|v| *v = rng.random_range(-amp..amp));
            }
        }
    }

    #[test]
    fn encoding_identities() {
        let mlp = PartDeformMLP::new(&omegas(), 8, 4, 1);
        let zero = mlp.positional_encoding(&Tensor::zeros(1, 3), 2);
        for (k, v) in zero.data.iter().enumerate() {
            let expect = if k % 2 == 0 { 0.0 } else { 1.0 };
            assert!((v - expect).abs() < 1e-15);
        }
        // doubling the frequency equals encoding 2x
        let x = Tensor::row(&[0.3, -0.2, 0.7]);
        let mut doubled = mlp.clone();
        doubled.lifts[1] = mlp.lifts[1].map(|v| 2.0 * v);
        let a = doubled.positional_encoding(&x, 1);
        let b = mlp.positional_encoding(&x.map(|v| 2.0 * v), 1);
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-12);
        }
        // pi/2 phase columns are cosines
        for c in (1..8).step_by(2) {
            let dot: f64 = (0..3).map(|r| x.data[r] * mlp.lifts[1].at(r, c)).sum();
            assert!((a.data[c] - (2.0 * dot).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn lift_columns_have_norm_omega() {
        let mlp = PartDeformMLP::new(&omegas(), 16, 4, 3);
        for (i, lift) in mlp.lifts.iter().enumerate() {
            for c in 0..16 {
                let n: f64 = (0..3).map(|r| lift.at(r, c).powi(2)).sum::<f64>().sqrt();
                assert!((n - mlp.omegas[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_traced_single_unit() {
        let e = Tensor::new(3, 1, vec![1.0, 0.0, 0.0]);
        let mlp = PartDeformMLP {
            omegas: vec![1.0, 1.0],
            phases: vec![0.0],
            lifts: vec![e.clone(), e],
            layers: vec![DeformLayer {
                wh: Tensor::scalar(1.0),
                bh: Tensor::scalar(0.0),
                wo: Tensor::new(1, 3, vec![1.0, 0.0, 0.0]),
                bo: Tensor::zeros(1, 3),
            }],
            shared_depth: 1,
        };
        let y = mlp.deform([FRAC_PI_2, 0.0, 0.0], 1);
        assert!((y[0] - 1.0).abs() < 1e-15);
        assert_eq!(&y[1..], &[0.0, 0.0]);
        // x = pi/4: z1 = sin(pi/4)^2 = 1/2
        let y = mlp.deform([PI / 4.0, 0.0, 0.0], 1);
        assert!((y[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_outputs_give_zero_offsets() {
        let mlp = PartDeformMLP::new(&omegas(), 16, 4, 2);
        let t = PartTemplate::icosphere(1);
        for d in 0..=6 {
            assert!(mlp.deform_points(&t.points, d).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zeroed_instance_layers_match_shared_depth() {
        let mut mlp = PartDeformMLP::new(&omegas(), 16, 4, 5);
        randomize_outputs(&mut mlp, 9, 0.2);
        let zeros: Vec<DeformLayer> = mlp.instance_layers().iter().map(|l| l.zero_like()).collect();
        let cut = mlp.with_instance_layers(&zeros);
        let t = PartTemplate::icosphere(1);
        let a = cut.deform_points(&t.points, 6);
        let b = mlp.deform_points(&t.points, 4);
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_forward_matches_plain() {
        let mut mlp = PartDeformMLP::new(&omegas(), 8, 4, 7);
        randomize_outputs(&mut mlp, 1, 0.3);
        let t = PartTemplate::icosphere(0);
        let mut tape = Tape::new();
        let x = tape.constant(t.points.clone());
        let vars: Vec<LayerVars> = mlp
            .layers
            .iter()
            .map(|l| LayerVars::constant(&mut tape, l))
            .collect();
        let y = mlp.deform_var(&mut tape, x, &vars);
        let plain = mlp.deform_points(&t.points, 6);
        for (p, q) in tape.value(y).data.iter().zip(&plain.data) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn deform_gradients() {
        let mut mlp = PartDeformMLP::new(&[1.0, 2.0, 4.0], 6, 1, 11);
        randomize_outputs(&mut mlp, 2, 0.5);
        let x = Tensor::new(2, 3, vec![0.2, -0.5, 0.8, -0.6, 0.1, 0.3]);
        let mut point = vec![x];
        for l in &mlp.layers {
            point.extend(l.tensors().into_iter().cloned());
        }
        let report = check_gradients(
            |tape, v| {
                let layers: Vec<LayerVars> = v[1..]
                    .chunks(4)
                    .map(|c| LayerVars {
                        wh: c[0],
                        bh: c[1],
                        wo: c[2],
                        bo: c[3],
                    })
                    .collect();
                let y = mlp.deform_var(tape, v[0], &layers);
                let w = tape.constant(Tensor::new(2, 3, vec![1.0, -2.0, 0.5, 0.3, 0.7, -1.1]));
                let p = tape.mul(y, w);
                Ok(tape.sum(p))
            },
            &point,
            GradCheck::default(),
        )
        .unwrap();
        assert!(report.passed, "max error {}", report.max_error);
    }

    #[test]
    fn assemble_identity_and_scaled() {
        let mlp = PartDeformMLP::new(&omegas(), 8, 4, 0);
        let t = PartTemplate::icosphere(2);
        let v = assemble_part(&t, &mlp, &PartTransform::identity(), 6).unwrap();
        for (i, p) in v.iter().enumerate() {
            assert_eq!(*p, t.point(i));
        }
        let tr = PartTransform {
            scale: 2.0,
            rotation: geom::IDENTITY,
            translation: [1.0, 0.0, 0.0],
        };
        for p in assemble_part(&t, &mlp, &tr, 6).unwrap() {
            let r = geom::norm(geom::sub(p, [1.0, 0.0, 0.0]));
            assert!((r - 2.0).abs() < 1e-12);
        }
        let bad = PartTransform { scale: 0.0, ..tr };
        assert!(matches!(
            assemble_part(&t, &mlp, &bad, 6),
            Err(Error::NonPositiveScale(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut mlp = PartDeformMLP::new(&omegas(), 8, 4, 4);
        randomize_outputs(&mut mlp, 3, 0.1);
        let mut buf = Vec::new();
        mlp.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"HLPM1");
        let back = PartDeformMLP::read_from(&buf[..]).unwrap();
        assert_eq!(back, mlp);
        assert!(PartDeformMLP::read_from(&b"HLPM0xxxx"[..]).is_err());
    }

    #[test]
    fn feature_output_is_unit_and_deterministic() {
        let f = FeatureMLP::new(5, 16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let x = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            let q = f.query(x);
            let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(q, f.query(x));
        }
    }

    #[test]
    fn feature_fits_a_constant() {
        let t = PartTemplate::icosphere(1);
        let target_row = [0.6, -0.8, 0.0];
        let targets = Tensor::new(
            t.len(),
            3,
            (0..t.len()).flat_map(|_| target_row).collect(),
        );
        let mut f = FeatureMLP::new(3, 16, 2);
        f.fit(&t.points, &targets, 200, 1e-2);
        let q = f.query_points(&t.points);
        for r in 0..t.len() {
            let cos: f64 = (0..3).map(|c| q.at(r, c) * target_row[c]).sum();
            assert!(cos > 0.99, "row {r}: cos {cos}");
        }
    }
}
