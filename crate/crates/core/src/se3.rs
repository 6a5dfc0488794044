//! Rigid transforms and the calculus of transformed implicit surfaces.
//!
//! Twists are ordered angular first, `[w; v]`, and wrenches moment first,
//! `[m; f]`. A geometric Jacobian `J` maps configuration rates to the body
//! twist `(g^-1 dg)^v`, so a configuration perturbation acts on the right:
//! `g -> g exp(J dq)`.

use nalgebra::{Matrix3, Matrix3xX, Matrix6, Matrix6xX, RowDVector, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shapes::ShapeEval;

/// Orthonormality tolerance applied when a rotation is ingested.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Se3Error {
    #[error("rotation is not orthonormal with unit determinant (error {error:e})")]
    NotARotation { error: f64 },
    #[error("non-finite pose entry")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
}

/// `skew(v) w = v x w`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix `exp(skew(omega))`.
pub fn rotation_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*omega).into_inner()
}

/// Relative rigid transform `g = (R, r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    /// Validates orthonormality and `det R = 1` to [`ROTATION_TOL`]. The
    /// rotation is stored as given, never re-normalized.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, Se3Error> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Se3Error::NonFinite);
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = (rotation.determinant() - 1.0).abs();
        let error = ortho.max(det);
        if error > ROTATION_TOL {
            return Err(Se3Error::NotARotation { error });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Pose from a rotation vector and a translation.
    pub fn from_rotation_vector(omega: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation_exp(omega),
            translation,
        }
    }

    /// Exponential of a twist `[w; v]`.
    pub fn exp(twist: &Vector6<f64>) -> Self {
        let w = Vector3::new(twist[0], twist[1], twist[2]);
        let v = Vector3::new(twist[3], twist[4], twist[5]);
        let theta2 = w.norm_squared();
        let k = skew(&w);
        let (b, c) = if theta2 < 1e-8 {
            (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
        } else {
            let theta = theta2.sqrt();
            ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
        };
        let left_jacobian = Matrix3::identity() + k * b + k * k * c;
        Self {
            rotation: rotation_exp(&w),
            translation: left_jacobian * v,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Rotation vector `log(R)`, accurate for small angles and near `pi`.
    pub fn rotation_vector(&self) -> Vector3<f64> {
        let r = &self.rotation;
        // sin(theta) * axis and cos(theta)
        let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
        let c = 0.5 * (r.trace() - 1.0);
        let sin = s.norm();
        let theta = sin.atan2(c);
        if theta < 1e-6 {
            return s * (1.0 + theta * theta / 6.0);
        }
        if theta < std::f64::consts::PI - 1e-3 {
            return s * (theta / sin);
        }
        // Near pi: the symmetric part is (1 - cos) a a^T + cos I.
        let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
        let k = (0..3).max_by(|&i, &j| sym[(i, i)].total_cmp(&sym[(j, j)])).unwrap_or(0);
        let mut axis = sym.column(k).normalize();
        if axis.dot(&s) < 0.0 {
            axis = -axis;
        }
        axis * theta
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `R^T (p - r)`.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Re-projects the rotation onto SO(3); used by integrators after many
    /// compositions.
    pub fn renormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        Self {
            rotation: r,
            translation: self.translation,
        }
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Pose JSON: `{"R": [[3x3 rows]], "r": [x, y, z]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseDescription {
    #[serde(rename = "R")]
    pub rotation: [[f64; 3]; 3],
    #[serde(rename = "r")]
    pub translation: [f64; 3],
}

impl TryFrom<&PoseDescription> for Pose {
    type Error = Se3Error;

    fn try_from(d: &PoseDescription) -> Result<Self, Se3Error> {
        let rows = d.rotation;
        #[rustfmt::skip]
        let rotation = Matrix3::new(
            rows[0][0], rows[0][1], rows[0][2],
            rows[1][0], rows[1][1], rows[1][2],
            rows[2][0], rows[2][1], rows[2][2],
        );
        Pose::new(rotation, Vector3::from(d.translation))
    }
}

impl From<&Pose> for PoseDescription {
    fn from(p: &Pose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

/// 6 x n_dof map from configuration rates to the body twist of body 2
/// relative to body 1, angular rows first.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricJacobian {
    matrix: Matrix6xX<f64>,
}

impl GeometricJacobian {
    pub fn new(matrix: Matrix6xX<f64>) -> Result<Self, Se3Error> {
        if matrix.ncols() == 0 {
            return Err(Se3Error::DimensionMismatch {
                expected: "at least one column".into(),
                got: "0 columns".into(),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Se3Error::NonFinite);
        }
        Ok(Self { matrix })
    }

    /// Free-body Jacobian `J = I_6`.
    pub fn identity() -> Self {
        Self {
            matrix: Matrix6xX::from_fn(6, |i, j| if i == j { 1.0 } else { 0.0 }),
        }
    }

    /// From row-major rows; there must be exactly six of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, Se3Error> {
        if rows.len() != 6 {
            return Err(Se3Error::DimensionMismatch {
                expected: "6 rows".into(),
                got: format!("{} rows", rows.len()),
            });
        }
        let n = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Se3Error::DimensionMismatch {
                expected: format!("{n} columns"),
                got: format!("{} columns", bad.len()),
            });
        }
        Self::new(Matrix6xX::from_fn(n, |i, j| rows[i][j]))
    }

    pub fn matrix(&self) -> &Matrix6xX<f64> {
        &self.matrix
    }

    pub fn ndof(&self) -> usize {
        self.matrix.ncols()
    }

    /// Angular rows.
    pub fn angular(&self) -> Matrix3xX<f64> {
        self.matrix.fixed_rows::<3>(0).into_owned()
    }

    /// Linear rows.
    pub fn linear(&self) -> Matrix3xX<f64> {
        self.matrix.fixed_rows::<3>(3).into_owned()
    }
}

/// Partials of `phi(R^T (x - r) / alpha)` with respect to `x` and `alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePartials {
    pub phi: f64,
    pub phi_x: Vector3<f64>,
    pub phi_alpha: f64,
    pub phi_xx: Matrix3<f64>,
    pub phi_xalpha: Vector3<f64>,
    pub phi_alphaalpha: f64,
}

/// `eval` must be the shape evaluated at `y = R^T (x - r) / alpha`.
pub fn surface_partials(
    eval: &ShapeEval,
    rotation: &Matrix3<f64>,
    y: &Vector3<f64>,
    alpha: f64,
) -> SurfacePartials {
    let inv = 1.0 / alpha;
    let inv2 = inv * inv;
    let g = &eval.gradient;
    let h = &eval.hessian;
    let hy = h * y;
    let yg = y.dot(g);
    let rhr = rotation * h * rotation.transpose() * inv2;
    SurfacePartials {
        phi: eval.value,
        phi_x: rotation * g * inv,
        phi_alpha: -inv * yg,
        phi_xx: (rhr + rhr.transpose()) * 0.5,
        phi_xalpha: -(rotation * (g + hy)) * inv2,
        phi_alphaalpha: (2.0 * yg + y.dot(&hy)) * inv2,
    }
}

/// Configuration-independent factors `(a^T, B, c^T)` such that
/// `phi_q = a^T J`, `phi_xq = B J` and `phi_alphaq = c^T J`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFactors {
    pub a: nalgebra::RowVector6<f64>,
    pub b: nalgebra::Matrix3x6<f64>,
    pub c: nalgebra::RowVector6<f64>,
}

pub fn pose_factors(
    eval: &ShapeEval,
    rotation: &Matrix3<f64>,
    y: &Vector3<f64>,
    alpha: f64,
) -> PoseFactors {
    let inv = 1.0 / alpha;
    let g = &eval.gradient;
    let h = &eval.hessian;
    let y_skew = skew(y);
    // y_q = [skew(y), -I/alpha] J
    let mut y_q = nalgebra::Matrix3x6::zeros();
    y_q.fixed_view_mut::<3, 3>(0, 0).copy_from(&y_skew);
    y_q.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * -inv));
    let a = g.transpose() * y_q;
    let mut b = nalgebra::Matrix3x6::zeros();
    b.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(rotation * (h * y_skew - skew(g)) * inv));
    b.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(rotation * h * (-inv * inv)));
    let c = (g + h * y).transpose() * y_q * -inv;
    PoseFactors { a, b, c }
}

/// Partials of the transformed implicit function with respect to the
/// configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigPartials {
    pub phi_q: RowDVector<f64>,
    pub phi_xq: Matrix3xX<f64>,
    pub phi_alphaq: RowDVector<f64>,
}

pub fn config_partials(
    eval: &ShapeEval,
    pose: &Pose,
    y: &Vector3<f64>,
    alpha: f64,
    jac: &GeometricJacobian,
) -> ConfigPartials {
    let f = pose_factors(eval, pose.rotation(), y, alpha);
    let j = jac.matrix();
    ConfigPartials {
        phi_q: RowDVector::from_iterator(j.ncols(), (f.a * j).iter().copied()),
        phi_xq: f.b * j,
        phi_alphaq: RowDVector::from_iterator(j.ncols(), (f.c * j).iter().copied()),
    }
}

/// Co-adjoint map of `g`: transports a wrench `[m; f]` expressed in the frame
/// of `g` into the parent frame, `[R, skew(r) R; 0, R]`.
///
/// `coadjoint(g.inverse())` therefore maps body-1 wrenches into the body-2
/// frame.
pub fn coadjoint(pose: &Pose) -> Matrix6<f64> {
    let r = pose.rotation();
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(skew(pose.translation()) * r));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    m
}

/// `-[skew(w), skew(v); skew(v), 0]` for `V = [w; v]`.
pub fn coadjoint_bar(v: &Vector6<f64>) -> Matrix6<f64> {
    let w_skew = skew(&Vector3::new(v[0], v[1], v[2]));
    let v_skew = skew(&Vector3::new(v[3], v[4], v[5]));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&-w_skew);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&-v_skew);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&-v_skew);
    m
}
