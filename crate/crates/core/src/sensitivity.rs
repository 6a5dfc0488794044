//! Derivatives of the contact solution with respect to generalized
//! coordinates.
//!
//! The relative pose depends on coordinates `q` through a geometric Jacobian
//! `J` (body twist `[w; v]` of body 2 relative to body 1, angular first).
//! Differentiating the KKT system at a root gives `J_c T_c = -G_c` and
//! `dz/dq = T_c J`, where `J_c` is the Jacobian in `(x, alpha, lambda)`
//! coordinates. Everything downstream (witness points, gap, normal, penalty
//! wrench) is chained from `dz/dq`.

use nalgebra::{Matrix3, Matrix3xX, Matrix6, Matrix6xX, RowDVector, Vector3, Vector6};
use thiserror::Error;

use crate::detector::{inverse_condition, ContactPair, Solution, ILL_CONDITIONED};
use crate::se3::{coadjoint, pose_factors, skew, GeometricJacobian, Pose};
use crate::shapes::ShapeError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensitivityError {
    #[error("solution did not converge")]
    NotConverged,
    #[error("KKT Jacobian is singular (1/rcond = {inverse_rcond:e})")]
    SingularJacobian { inverse_rcond: f64 },
    #[error("gradient of body 1 vanishes at the contact point (|grad| = {norm:e})")]
    VanishingGradient { norm: f64 },
    #[error("penalty force is not differentiable at zero penetration for p = {p}")]
    NonDifferentiableBoundary { p: f64 },
    #[error("Jacobian has {got} columns, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// `G_c` (pose-only, 6 x 6) and its product with `J`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigPartial {
    pub g_c: Matrix6<f64>,
    pub g_c_j: Matrix6xX<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityBundle {
    pub t_c: Matrix6<f64>,
    /// Rows `x (3), alpha, lambda1, lambda2`.
    pub dz_dq: Matrix6xX<f64>,
    pub g_c: Matrix6<f64>,
    /// `J_c` in `(x, alpha, lambda)` coordinates.
    pub j_c: Matrix6<f64>,
}

impl SensitivityBundle {
    pub fn dx_dq(&self) -> Matrix3xX<f64> {
        self.dz_dq.fixed_rows::<3>(0).into_owned()
    }
    pub fn dalpha_dq(&self) -> RowDVector<f64> {
        self.dz_dq.row(3).into_owned()
    }
    /// `|J_c dz/dq + G_c J|`, the residual of the linear solve.
    pub fn certificate(&self, jac: &GeometricJacobian) -> f64 {
        (self.j_c * &self.dz_dq + self.g_c * jac.matrix()).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactKinematics {
    pub p1: Vector3<f64>,
    pub p2: Vector3<f64>,
    pub gap: f64,
    pub normal: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicsSensitivity {
    pub dgap_dq: RowDVector<f64>,
    pub dnormal_dq: Matrix3xX<f64>,
    pub dp1_dq: Matrix3xX<f64>,
    pub dp2_dq: Matrix3xX<f64>,
}

/// Penalty contact wrenches `[m; f]`. `f1` acts on body 1 in its frame,
/// `f2` on body 2 in its frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactWrench {
    pub f1: Vector6<f64>,
    pub f2: Vector6<f64>,
    pub fn_: f64,
    pub penetration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WrenchSensitivity {
    pub df1_dq: Matrix6xX<f64>,
    pub df2_dq: Matrix6xX<f64>,
    /// True when the query sits exactly at zero penetration, where the
    /// one-sided derivative is reported as zero.
    pub at_boundary: bool,
}

fn require_converged(solution: &Solution) -> Result<(), SensitivityError> {
    if solution.converged {
        Ok(())
    } else {
        Err(SensitivityError::NotConverged)
    }
}

/// Partial of the KKT residual with respect to the relative body twist.
pub fn residual_config_partial(
    solution: &Solution,
    pair: &ContactPair,
    pose: &Pose,
    jac: &GeometricJacobian,
) -> Result<ConfigPartial, SensitivityError> {
    require_converged(solution)?;
    let z = &solution.unknowns;
    let alpha = solution.alpha;
    let rotation = pose.rotation();
    let y2 = rotation.transpose() * (z.x - pose.translation()) / alpha;
    let eval = pair.shape2().eval(&y2)?;
    let f = pose_factors(&eval, rotation, &y2, alpha);
    let mut g_c = Matrix6::zeros();
    g_c.fixed_view_mut::<1, 6>(1, 0).copy_from(&f.a);
    g_c.fixed_view_mut::<3, 6>(2, 0).copy_from(&(f.b * z.lambda2));
    g_c.fixed_view_mut::<1, 6>(5, 0).copy_from(&(f.c * z.lambda2));
    Ok(ConfigPartial {
        g_c,
        g_c_j: g_c * jac.matrix(),
    })
}

/// Implicit-function sensitivities `dz/dq`, reusing the factorization kept
/// in `solution`.
pub fn solution_sensitivity(
    solution: &Solution,
    pair: &ContactPair,
    pose: &Pose,
    jac: &GeometricJacobian,
) -> Result<SensitivityBundle, SensitivityError> {
    let partial = residual_config_partial(solution, pair, pose, jac)?;
    let (Some(j_s), Some(lu)) = (solution.jacobian.as_ref(), solution.factorization.as_ref()) else {
        return Err(SensitivityError::SingularJacobian {
            inverse_rcond: f64::INFINITY,
        });
    };
    let inverse_rcond = inverse_condition(j_s, lu);
    if !(inverse_rcond <= ILL_CONDITIONED) {
        return Err(SensitivityError::SingularJacobian { inverse_rcond });
    }
    let mut t_c = lu
        .solve(&-partial.g_c)
        .ok_or(SensitivityError::SingularJacobian { inverse_rcond })?;
    // The factorization is of the s-parameterized Jacobian; d(alpha) = alpha ds.
    let alpha = solution.alpha;
    t_c.row_mut(3).scale_mut(alpha);
    let mut j_c = *j_s;
    j_c.column_mut(3).scale_mut(1.0 / alpha);
    Ok(SensitivityBundle {
        t_c,
        dz_dq: t_c * jac.matrix(),
        g_c: partial.g_c,
        j_c,
    })
}

/// Witness points, gap and normal at the solution, all in the body-1 frame.
pub fn contact_kinematics(
    solution: &Solution,
    pose: &Pose,
    pair: &ContactPair,
) -> Result<ContactKinematics, SensitivityError> {
    require_converged(solution)?;
    let alpha = solution.alpha;
    let x = solution.unknowns.x;
    let r = pose.translation();
    let grad = pair.shape1().eval(&(x / alpha))?.gradient;
    let norm = grad.norm();
    if !(norm >= 1e-12) {
        return Err(SensitivityError::VanishingGradient { norm });
    }
    let shrink = 1.0 - 1.0 / alpha;
    Ok(ContactKinematics {
        p1: x / alpha,
        p2: r * shrink + x / alpha,
        gap: shrink * r.norm(),
        normal: grad / norm,
    })
}

pub fn kinematics_sensitivity(
    bundle: &SensitivityBundle,
    kin: &ContactKinematics,
    solution: &Solution,
    pose: &Pose,
    pair: &ContactPair,
    jac: &GeometricJacobian,
) -> Result<KinematicsSensitivity, SensitivityError> {
    require_converged(solution)?;
    let n = jac.ndof();
    if bundle.dz_dq.ncols() != n {
        return Err(SensitivityError::DimensionMismatch {
            expected: n,
            got: bundle.dz_dq.ncols(),
        });
    }
    let alpha = solution.alpha;
    let x = solution.unknowns.x;
    let r = pose.translation();
    let r_norm = r.norm();
    let dx = bundle.dx_dq();
    let da = bundle.dalpha_dq();
    // The translation moves along the body-2 axes: dr = R J_v.
    let dr = pose.rotation() * jac.linear();

    let shrink = 1.0 - 1.0 / alpha;
    let dgap = &da * (r_norm / (alpha * alpha)) + (r / r_norm).transpose() * &dr * shrink;

    let dp1 = &dx / alpha - x * &da / (alpha * alpha);
    let dp2 = r * &da / (alpha * alpha) + &dr * shrink + &dp1;

    let y = x / alpha;
    let eval = pair.shape1().eval(&y)?;
    let norm = eval.gradient.norm();
    if !(norm >= 1e-12) {
        return Err(SensitivityError::VanishingGradient { norm });
    }
    let nn = kin.normal;
    let projector = Matrix3::identity() - nn * nn.transpose();
    let dy = (&dx - y * &da) / alpha;
    let dnormal = projector * eval.hessian * dy / norm;

    Ok(KinematicsSensitivity {
        dgap_dq: dgap,
        dnormal_dq: dnormal,
        dp1_dq: dp1,
        dp2_dq: dp2,
    })
}

/// Hertz-type penalty wrench `f_n = k max(-gap, 0)^p` applied at `x*`
/// against the normal, with the reaction transported to body 2.
pub fn contact_wrench(
    kin: &ContactKinematics,
    solution: &Solution,
    pose: &Pose,
    k: f64,
    p: f64,
) -> Result<ContactWrench, SensitivityError> {
    require_converged(solution)?;
    let penetration = (-kin.gap).max(0.0);
    let fn_ = if penetration > 0.0 {
        k * penetration.powf(p)
    } else {
        0.0
    };
    let force = -kin.normal * fn_;
    let moment = solution.unknowns.x.cross(&force);
    let f1 = Vector6::new(moment.x, moment.y, moment.z, force.x, force.y, force.z);
    let f2 = -(coadjoint(&pose.inverse()) * f1);
    Ok(ContactWrench {
        f1,
        f2,
        fn_,
        penetration,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn wrench_sensitivity(
    bundle: &SensitivityBundle,
    kin_sens: &KinematicsSensitivity,
    kin: &ContactKinematics,
    wrench: &ContactWrench,
    solution: &Solution,
    pose: &Pose,
    jac: &GeometricJacobian,
    k: f64,
    p: f64,
) -> Result<WrenchSensitivity, SensitivityError> {
    require_converged(solution)?;
    let n = jac.ndof();
    let zeros = |at_boundary| WrenchSensitivity {
        df1_dq: Matrix6xX::zeros(n),
        df2_dq: Matrix6xX::zeros(n),
        at_boundary,
    };
    let boundary_tol = 1e-12 * pose.translation().norm().max(1.0);
    if wrench.penetration <= 0.0 {
        if kin.gap > boundary_tol {
            return Ok(zeros(false));
        }
        if p <= 1.0 {
            return Err(SensitivityError::NonDifferentiableBoundary { p });
        }
        return Ok(zeros(true));
    }

    let delta = wrench.penetration;
    let dfn = &kin_sens.dgap_dq * (-k * p * delta.powf(p - 1.0));
    let force = -kin.normal * wrench.fn_;
    let dforce = -kin.normal * &dfn - &kin_sens.dnormal_dq * wrench.fn_;
    let x = solution.unknowns.x;
    let dmoment = skew(&x) * &dforce - skew(&force) * bundle.dx_dq();

    let mut df1 = Matrix6xX::zeros(n);
    df1.fixed_rows_mut::<3>(0).copy_from(&dmoment);
    df1.fixed_rows_mut::<3>(3).copy_from(&dforce);

    let m2 = Vector3::new(wrench.f2[0], wrench.f2[1], wrench.f2[2]);
    let f2 = Vector3::new(wrench.f2[3], wrench.f2[4], wrench.f2[5]);
    let mut transport = Matrix6::zeros();
    transport.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&m2));
    transport.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&f2));
    transport.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&f2));
    let df2 = -(coadjoint(&pose.inverse()) * &df1) + transport * jac.matrix();

    Ok(WrenchSensitivity {
        df1_dq: df1,
        df2_dq: df2,
        at_boundary: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{solve, SolverConfig};
    use crate::shapes::{ShapeModel, SuperellipsoidSpec};
    use approx::assert_relative_eq;

    fn spheres() -> ContactPair {
        let s: ShapeModel = SuperellipsoidSpec::sphere(1.0).unwrap().into();
        ContactPair::new(s.clone(), s).unwrap()
    }

    fn solved(r: Vector3<f64>) -> (ContactPair, Pose, Solution) {
        let pair = spheres();
        let pose = Pose::from_translation(r);
        let sol = solve(&pair, &pose, &SolverConfig::default(), None).unwrap();
        assert!(sol.converged);
        (pair, pose, sol)
    }

    #[test]
    fn zero_jacobian_gives_zero_partial() {
        let (pair, pose, sol) = solved(Vector3::new(3.0, 0.0, 0.0));
        let jac = GeometricJacobian::new(Matrix6xX::zeros(2)).unwrap();
        let p = residual_config_partial(&sol, &pair, &pose, &jac).unwrap();
        assert_eq!(p.g_c_j, Matrix6xX::zeros(2));
        assert_eq!(p.g_c.row(0).norm(), 0.0);
    }

    #[test]
    fn separated_spheres_kinematics() {
        let (pair, pose, sol) = solved(Vector3::new(3.0, 0.0, 0.0));
        let kin = contact_kinematics(&sol, &pose, &pair).unwrap();
        assert_relative_eq!(kin.p1, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-10);
        assert_relative_eq!(kin.p2, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-10);
        assert_relative_eq!(kin.gap, 1.0, epsilon = 1e-10);
        assert_relative_eq!(kin.normal, Vector3::x(), epsilon = 1e-10);
        let w = contact_wrench(&kin, &sol, &pose, 1e3, 1.5).unwrap();
        assert_eq!(w.f1, Vector6::zeros());
        assert_eq!(w.f2, Vector6::zeros());
    }

    #[test]
    fn penetrating_spheres_force() {
        let (pair, pose, sol) = solved(Vector3::new(1.5, 0.0, 0.0));
        assert_relative_eq!(sol.alpha, 0.75, epsilon = 1e-12);
        let kin = contact_kinematics(&sol, &pose, &pair).unwrap();
        assert_relative_eq!(kin.gap, -0.5, epsilon = 1e-10);
        let w = contact_wrench(&kin, &sol, &pose, 1e3, 1.5).unwrap();
        assert_relative_eq!(w.fn_, 1000.0 * 0.5f64.powf(1.5), epsilon = 1e-8);
        assert_relative_eq!(w.fn_, 353.5533905932738, epsilon = 1e-8);
    }

    #[test]
    fn unconverged_solution_rejected() {
        let (pair, pose, mut sol) = solved(Vector3::new(3.0, 0.0, 0.0));
        sol.converged = false;
        assert_eq!(
            contact_kinematics(&sol, &pose, &pair),
            Err(SensitivityError::NotConverged)
        );
    }

    #[test]
    fn sphere_alpha_gradient_is_radial() {
        let r = Vector3::new(1.0, 2.0, -2.0);
        let (pair, pose, sol) = solved(r);
        let jac = GeometricJacobian::identity();
        let b = solution_sensitivity(&sol, &pair, &pose, &jac).unwrap();
        let da = b.dalpha_dq();
        for i in 0..3 {
            assert!(da[i].abs() < 1e-10);
            assert_relative_eq!(da[3 + i], r[i] / r.norm() / 2.0, epsilon = 1e-10);
        }
        assert!(b.certificate(&jac) < 1e-9);
    }

    #[test]
    fn boundary_handling_by_exponent() {
        let (pair, pose, sol) = solved(Vector3::new(2.0, 0.0, 0.0));
        let jac = GeometricJacobian::identity();
        let b = solution_sensitivity(&sol, &pair, &pose, &jac).unwrap();
        let mut kin = contact_kinematics(&sol, &pose, &pair).unwrap();
        kin.gap = 0.0;
        let ks = kinematics_sensitivity(&b, &kin, &sol, &pose, &pair, &jac).unwrap();
        let w = contact_wrench(&kin, &sol, &pose, 1e3, 2.0).unwrap();
        let s = wrench_sensitivity(&b, &ks, &kin, &w, &sol, &pose, &jac, 1e3, 2.0).unwrap();
        assert!(s.at_boundary);
        assert_eq!(s.df1_dq.norm(), 0.0);
        assert_eq!(
            wrench_sensitivity(&b, &ks, &kin, &w, &sol, &pose, &jac, 1e3, 1.0),
            Err(SensitivityError::NonDifferentiableBoundary { p: 1.0 })
        );
    }
}
