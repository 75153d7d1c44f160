//! Small fixed-size vector/rotation helpers and their differentiable
//! counterparts on the tape.

use crate::diff::{CustomOp, Tape, Tensor, Var};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            *o = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

pub fn mat_to_tensor(m: &Mat3) -> Tensor {
    Tensor::new(3, 3, m.iter().flatten().copied().collect())
}

pub fn tensor_to_mat(t: &Tensor) -> Mat3 {
    assert_eq!(t.shape(), (3, 3));
    let d = &t.data;
    [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]]
}

fn skew(w: Vec3) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

/// `(A, B, dA/dt, dB/dt)` for `R = I + A K + B K^2` with `t = |w|^2`.
fn rodrigues_coeffs(t: f64) -> (f64, f64, f64, f64) {
    if t < 2.5e-3 {
        let a = 1.0 - t / 6.0 + t * t / 120.0 - t * t * t / 5040.0;
        let b = 0.5 - t / 24.0 + t * t / 720.0 - t * t * t / 40320.0;
        let da = -1.0 / 6.0 + t / 60.0 - t * t / 1680.0;
        let db = -1.0 / 24.0 + t / 360.0 - t * t / 13440.0;
        (a, b, da, db)
    } else {
        let th = t.sqrt();
        let (s, c) = th.sin_cos();
        let a = s / th;
        let b = (1.0 - c) / t;
        let da = (th * c - s) / (2.0 * th * t);
        let db = (th * s - 2.0 * (1.0 - c)) / (2.0 * t * t);
        (a, b, da, db)
    }
}

fn mat_lin(terms: &[(f64, &Mat3)]) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (c, m) in terms {
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] += c * m[i][j];
            }
        }
    }
    out
}

/// Rotation matrix of an axis-angle vector (Rodrigues' formula).
pub fn rodrigues(w: Vec3) -> Mat3 {
    let t = dot(w, w);
    let (a, b, _, _) = rodrigues_coeffs(t);
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    mat_lin(&[(1.0, &IDENTITY), (a, &k), (b, &k2)])
}

/// Axis-angle vector of a rotation matrix (inverse of [`rodrigues`]).
pub fn axis_angle(r: &Mat3) -> Vec3 {
    let cos = ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let v = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if theta < 1e-8 {
        return scale(v, 0.5);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // near pi: axis from the largest diagonal of (R + I) / 2
        let m = mat_lin(&[(0.5, r), (0.5, &IDENTITY)]);
        let i = (0..3)
            .max_by(|&a, &b| m[a][a].total_cmp(&m[b][b]))
            .unwrap();
        let mut axis = [m[i][0], m[i][1], m[i][2]];
        axis = scale(axis, 1.0 / m[i][i].sqrt());
        return scale(normalize(axis), theta);
    }
    scale(v, theta / (2.0 * theta.sin()))
}

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// Minimal-twist rotation taking the unit z-axis onto `dir`.
///
/// The antiparallel case uses a fixed half-turn about x.
pub fn align_z(dir: Vec3) -> Mat3 {
    align_z_unit(normalize(dir))
}

fn align_z_unit(n: Vec3) -> Mat3 {
    let [x, y, z] = n;
    if z <= -1.0 + 1e-12 {
        return [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
    }
    let c = 1.0 / (1.0 + z);
    [
        [1.0 - x * x * c, -x * y * c, x],
        [-x * y * c, 1.0 - y * y * c, y],
        [-x, -y, z],
    ]
}

struct RodriguesOp;

impl CustomOp for RodriguesOp {
    fn name(&self) -> &'static str {
        "rodrigues"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let w = [inputs[0].data[0], inputs[0].data[1], inputs[0].data[2]];
        let t = dot(w, w);
        let (a, b, da, db) = rodrigues_coeffs(t);
        let k = skew(w);
        let k2 = mat_mul(&k, &k);
        let g = tensor_to_mat(grad);
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let mut e = [0.0; 3];
            e[i] = 1.0;
            let ei = skew(e);
            let eik = mat_mul(&ei, &k);
            let kei = mat_mul(&k, &ei);
            let d = mat_lin(&[
                (2.0 * w[i] * da, &k),
                (2.0 * w[i] * db, &k2),
                (a, &ei),
                (b, &eik),
                (b, &kei),
            ]);
            *o = (0..3)
                .flat_map(|r| (0..3).map(move |c| (r, c)))
                .map(|(r, c)| g[r][c] * d[r][c])
                .sum();
        }
        vec![Tensor::new(inputs[0].rows, inputs[0].cols, out.to_vec())]
    }
}

/// Differentiable Rodrigues map: `1 x 3` (or `3 x 1`) axis-angle to `3 x 3`.
pub fn rodrigues_var(tape: &mut Tape, w: Var) -> Var {
    let t = tape.value(w);
    assert_eq!(t.len(), 3, "axis-angle must have 3 entries");
    let r = rodrigues([t.data[0], t.data[1], t.data[2]]);
    tape.custom(&[w], mat_to_tensor(&r), Box::new(RodriguesOp))
}

struct AlignZOp;

impl CustomOp for AlignZOp {
    fn name(&self) -> &'static str {
        "align_z"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let n = &inputs[0].data;
        let (x, y, z) = (n[0], n[1], n[2]);
        let mut out = vec![0.0; 3];
        if z > -1.0 + 1e-12 {
            let c = 1.0 / (1.0 + z);
            let c2 = c * c;
            let g = |r: usize, col: usize| grad.data[r * 3 + col];
            // d/dx
            out[0] = g(0, 0) * (-2.0 * x * c)
                + (g(0, 1) + g(1, 0)) * (-y * c)
                + g(0, 2)
                - g(2, 0);
            // d/dy
            out[1] = g(1, 1) * (-2.0 * y * c) + (g(0, 1) + g(1, 0)) * (-x * c) + g(1, 2)
                - g(2, 1);
            // d/dz
            out[2] = g(0, 0) * (x * x * c2)
                + g(1, 1) * (y * y * c2)
                + (g(0, 1) + g(1, 0)) * (x * y * c2)
                + g(2, 2);
        }
        vec![Tensor::new(inputs[0].rows, inputs[0].cols, out)]
    }
}

/// Differentiable minimal-twist rotation for a unit direction `n` (`1 x 3`).
pub fn align_z_var(tape: &mut Tape, n: Var) -> Var {
    let t = tape.value(n);
    let r = align_z_unit([t.data[0], t.data[1], t.data[2]]);
    tape.custom(&[n], mat_to_tensor(&r), Box::new(AlignZOp))
}
