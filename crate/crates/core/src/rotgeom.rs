//! Rotation representations for head pose.
//!
//! Convention: `R = Rx(yaw) · Ry(pitch) · Rz(roll)` built from the three
//! elementary matrices
//!
//! ```text
//! Rz(roll)  = [[1, 0, 0], [0, cos, -sin], [0, sin, cos]]
//! Ry(pitch) = [[cos, 0, sin], [0, 1, 0], [-sin, 0, cos]]
//! Rx(yaw)   = [[cos, -sin, 0], [sin, cos, 0], [0, 0, 1]]
//! ```
//!
//! Note that the matrix labelled `Rx` turns about the third axis and `Rz`
//! about the first, so the product is the familiar Z-Y-X (yaw, pitch, roll)
//! Tait-Bryan composition. The columns of `R` are the rotated left, bottom
//! and front basis vectors of the head, which is what the network regresses
//! in the vector-base variant.

use serde::{Deserialize, Serialize};
use std::ops::{Index, Mul};

use crate::error::{invalid, Error, Result};

/// Name of the Euler convention implemented here, written into file headers.
pub const EULER_CONVENTION: &str = "R = Rx(yaw)*Ry(pitch)*Rz(roll); yaw about axis 3, pitch about axis 2, roll about axis 1";

/// Tolerance used to validate orthonormality and determinant of rotations.
pub const ROTATION_TOL: f64 = 1e-9;

/// Below this value of `cos(pitch)` the yaw/roll split is treated as gimbal lock.
pub const GIMBAL_EPS: f64 = 1e-7;

const JACOBI_MAX_SWEEPS: usize = 30;
const JACOBI_TOL: f64 = 1e-14;
/// Relative size below which a singular value is treated as zero.
const RANK_TOL: f64 = 1e-10;

/// Head orientation as yaw, pitch and roll in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub const fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn is_finite(&self) -> bool {
        self.yaw.is_finite() && self.pitch.is_finite() && self.roll.is_finite()
    }

    /// Equivalent angles with yaw, roll in (-180, 180] and pitch in [-90, 90].
    ///
    /// A pitch beyond ±90° is folded back, which adds 180° to yaw and roll so
    /// the represented rotation is unchanged.
    pub fn normalized(&self) -> Self {
        let mut pitch = wrap_degrees(self.pitch);
        let mut yaw = self.yaw;
        let mut roll = self.roll;
        if pitch > 90.0 {
            pitch = 180.0 - pitch;
            yaw += 180.0;
            roll += 180.0;
        } else if pitch < -90.0 {
            pitch = -180.0 - pitch;
            yaw += 180.0;
            roll += 180.0;
        }
        Self { yaw: wrap_degrees(yaw), pitch, roll: wrap_degrees(roll) }
    }
}

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_degrees(deg: f64) -> f64 {
    let w = (deg + 180.0).rem_euclid(360.0) - 180.0;
    if w <= -180.0 {
        w + 360.0
    } else {
        w
    }
}

/// Unconstrained 3×3 matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Matrix3(pub [[f64; 3]; 3]);

impl Matrix3 {
    pub const IDENTITY: Matrix3 = Matrix3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    pub const ZERO: Matrix3 = Matrix3([[0.0; 3]; 3]);

    pub fn from_diagonal(d: [f64; 3]) -> Self {
        let mut m = Self::ZERO;
        for (i, v) in d.into_iter().enumerate() {
            m.0[i][i] = v;
        }
        m
    }

    pub fn from_columns(c: [[f64; 3]; 3]) -> Self {
        let mut m = Self::ZERO;
        for (j, col) in c.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                m.0[i][j] = *v;
            }
        }
        m
    }

    pub fn column(&self, j: usize) -> [f64; 3] {
        [self.0[0][j], self.0[1][j], self.0[2][j]]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                t.0[i][j] = self.0[j][i];
            }
        }
        t
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = *self;
        out.0.iter_mut().flatten().for_each(|v| *v *= s);
        out
    }

    pub fn sub(&self, other: &Matrix3) -> Self {
        let mut out = *self;
        for (a, b) in out.0.iter_mut().flatten().zip(other.0.iter().flatten()) {
            *a -= b;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius norm of `self - other`.
    pub fn distance(&self, other: &Matrix3) -> f64 {
        self.sub(other).frobenius_norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    /// Largest entry of `|mᵀm - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let g = self.transpose() * *self;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.0[i][j] - target).abs());
            }
        }
        worst
    }
}

impl Mul for Matrix3 {
    type Output = Matrix3;

    fn mul(self, rhs: Matrix3) -> Matrix3 {
        let mut out = Matrix3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        out
    }
}

impl Index<(usize, usize)> for Matrix3 {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.0[i][j]
    }
}

/// A proper rotation: orthonormal columns and determinant +1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct RotationMatrix(Matrix3);

impl RotationMatrix {
    pub const IDENTITY: RotationMatrix = RotationMatrix(Matrix3::IDENTITY);

    /// Validates `m` against the rotation invariants.
    pub fn new(m: Matrix3) -> Result<Self> {
        if !m.is_finite() {
            return Err(invalid("rotation matrix has non-finite entries"));
        }
        let ortho = m.orthogonality_error();
        if ortho > ROTATION_TOL {
            return Err(invalid(format!("matrix is not orthonormal (|MᵀM - I| = {ortho:e})")));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(invalid(format!("matrix is not a proper rotation (det = {det})")));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix3 {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix3 {
        self.0
    }
}

impl<'de> Deserialize<'de> for RotationMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = Matrix3::deserialize(d)?;
        RotationMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

pub type Vec3 = [f64; 3];

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Three direction vectors as regressed by the network; not necessarily orthonormal.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseVectors {
    pub v1: Vec3,
    pub v2: Vec3,
    pub v3: Vec3,
}

impl PoseVectors {
    pub const BASIS: PoseVectors =
        PoseVectors { v1: [1.0, 0.0, 0.0], v2: [0.0, 1.0, 0.0], v3: [0.0, 0.0, 1.0] };

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(invalid(format!("pose vectors need 9 values, got {}", v.len())));
        }
        Ok(Self {
            v1: [v[0], v[1], v[2]],
            v2: [v[3], v[4], v[5]],
            v3: [v[6], v[7], v[8]],
        })
    }

    /// `[v1, v2, v3]` concatenated.
    pub fn to_flat(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        out[..3].copy_from_slice(&self.v1);
        out[3..6].copy_from_slice(&self.v2);
        out[6..].copy_from_slice(&self.v3);
        out
    }

    pub fn vectors(&self) -> [&Vec3; 3] {
        [&self.v1, &self.v2, &self.v3]
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Builds the rotation for `a` under [`EULER_CONVENTION`].
pub fn euler_to_matrix(a: EulerAngles) -> Result<RotationMatrix> {
    if !a.is_finite() {
        return Err(invalid("Euler angles must be finite"));
    }
    let (sy, cy) = a.yaw.to_radians().sin_cos();
    let (sp, cp) = a.pitch.to_radians().sin_cos();
    let (sr, cr) = a.roll.to_radians().sin_cos();
    let rx = Matrix3([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]]);
    let ry = Matrix3([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]]);
    let rz = Matrix3([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]]);
    Ok(RotationMatrix(rx * ry * rz))
}

/// Inverse of [`euler_to_matrix`].
///
/// At gimbal lock (`cos(pitch) < GIMBAL_EPS`) roll is fixed to zero and the
/// whole in-plane rotation is reported as yaw.
pub fn matrix_to_euler(r: &RotationMatrix) -> EulerAngles {
    let m = &r.0 .0;
    let cos_pitch = m[0][0].hypot(m[1][0]);
    let pitch = (-m[2][0]).clamp(-1.0, 1.0).asin();
    let (yaw, roll) = if cos_pitch < GIMBAL_EPS {
        ((-m[0][1]).atan2(m[1][1]), 0.0)
    } else {
        (m[1][0].atan2(m[0][0]), m[2][1].atan2(m[2][2]))
    };
    let pitch = if cos_pitch < GIMBAL_EPS { pitch } else { (-m[2][0]).atan2(cos_pitch) };
    EulerAngles {
        yaw: wrap_degrees(yaw.to_degrees()),
        pitch: pitch.to_degrees(),
        roll: wrap_degrees(roll.to_degrees()),
    }
}

/// The columns of `r`: the rotated left, bottom and front vectors.
pub fn pose_vectors_from_matrix(r: &RotationMatrix) -> PoseVectors {
    PoseVectors { v1: r.0.column(0), v2: r.0.column(1), v3: r.0.column(2) }
}

/// Stacks the three vectors as columns.
pub fn matrix_from_pose_vectors(p: &PoseVectors) -> Matrix3 {
    Matrix3::from_columns([p.v1, p.v2, p.v3])
}

/// Singular value decomposition `M = U · diag(sigma) · Vᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3 {
    pub u: Matrix3,
    pub sigma: [f64; 3],
    pub v: Matrix3,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Matrix3 {
        self.u * Matrix3::from_diagonal(self.sigma) * self.v.transpose()
    }
}

/// One-sided (Hestenes) Jacobi SVD of a 3×3 matrix.
///
/// Columns of a working copy of `M` are rotated pairwise until mutually
/// orthogonal; the accumulated rotations form `V`, the column norms are the
/// singular values and the normalized columns form `U`. Singular values are
/// sorted descending. Columns of `U` belonging to zero singular values are
/// completed to an orthonormal basis.
pub fn svd3(m: &Matrix3) -> Result<Svd3> {
    if !m.is_finite() {
        return Err(invalid("svd3 input has non-finite entries"));
    }
    let mut a = m.0;
    let mut v = Matrix3::IDENTITY.0;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off: f64 = 0.0;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let mut alpha = 0.0;
            let mut beta = 0.0;
            let mut gamma = 0.0;
            for row in &a {
                alpha += row[p] * row[p];
                beta += row[q] * row[q];
                gamma += row[p] * row[q];
            }
            let scale = (alpha * beta).sqrt();
            if gamma == 0.0 || scale == 0.0 {
                continue;
            }
            let rel = gamma.abs() / scale;
            off = off.max(rel);
            if rel < JACOBI_TOL {
                continue;
            }
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for row in a.iter_mut().chain(v.iter_mut()) {
                let (xp, xq) = (row[p], row[q]);
                row[p] = c * xp - s * xq;
                row[q] = s * xp + c * xq;
            }
        }
        if off < JACOBI_TOL {
            break;
        }
    }

    let norms: [f64; 3] =
        std::array::from_fn(|j| (a[0][j] * a[0][j] + a[1][j] * a[1][j] + a[2][j] * a[2][j]).sqrt());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma = order.map(|j| norms[j]);
    let mut u_cols = [[0.0; 3]; 3];
    let mut v_cols = [[0.0; 3]; 3];
    let cutoff = sigma[0] * RANK_TOL;
    let mut rank = 0;
    for (k, &j) in order.iter().enumerate() {
        v_cols[k] = [v[0][j], v[1][j], v[2][j]];
        if sigma[k] > cutoff && sigma[k] > 0.0 {
            u_cols[k] = [a[0][j] / sigma[k], a[1][j] / sigma[k], a[2][j] / sigma[k]];
            rank += 1;
        }
    }
    complete_basis(&mut u_cols, rank);

    Ok(Svd3 { u: Matrix3::from_columns(u_cols), sigma, v: Matrix3::from_columns(v_cols) })
}

/// Fills columns `rank..3` so that `cols` becomes an orthonormal basis.
fn complete_basis(cols: &mut [[f64; 3]; 3], rank: usize) {
    match rank {
        0 => *cols = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        1 => {
            let u = cols[0];
            // Cross with the axis least aligned to u.
            let mut axis = [0.0; 3];
            let k = (0..3).min_by(|&i, &j| u[i].abs().total_cmp(&u[j].abs())).unwrap_or(0);
            axis[k] = 1.0;
            cols[1] = normalize(&cross(&u, &axis));
            cols[2] = cross(&cols[0], &cols[1]);
        }
        2 => cols[2] = normalize(&cross(&cols[0], &cols[1])),
        _ => {}
    }
}

fn normalize(v: &Vec3) -> Vec3 {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Nearest proper rotation to `m` in Frobenius norm.
///
/// Computes `U · diag(1, 1, s) · Vᵀ` with `s = det(U·Vᵀ)`, so the sign flip of
/// the last axis is applied only when the plain polar factor `U·Vᵀ` would be
/// a reflection.
pub fn nearest_rotation(m: &Matrix3) -> Result<RotationMatrix> {
    let svd = svd3(m)?;
    if svd.sigma[0] == 0.0 || svd.sigma[1] <= svd.sigma[0] * RANK_TOL {
        return Err(Error::Degenerate(format!(
            "nearest rotation needs rank >= 2 (singular values {:?})",
            svd.sigma
        )));
    }
    let s = (svd.u * svd.v.transpose()).determinant().signum();
    let r = svd.u * Matrix3::from_diagonal([1.0, 1.0, s]) * svd.v.transpose();
    RotationMatrix::new(r)
}

/// Per-angle absolute error in degrees, wrapped so every component is in [0, 180].
pub fn angular_error(pred: &EulerAngles, truth: &EulerAngles) -> [f64; 3] {
    let wrap = |d: f64| {
        let d = d.abs().rem_euclid(360.0);
        d.min(360.0 - d)
    };
    [wrap(pred.yaw - truth.yaw), wrap(pred.pitch - truth.pitch), wrap(pred.roll - truth.roll)]
}
