//! Collision detection as a 6 x 6 root-finding problem.
//!
//! For two bodies with implicit functions `phi1`, `phi2` and relative pose
//! `g = (R, r)`, the detector finds the smallest uniform scaling `alpha` of
//! both bodies about their frame origins at which they share a point `x`
//! (expressed in the body-1 frame). The KKT conditions of that program give
//! six equations in `z = (x, s, lambda1, lambda2)` with `alpha = exp(s)`:
//!
//! ```text
//! phi1(x / alpha)                          = 0
//! phi2(R^T (x - r) / alpha)                = 0
//! lambda1 phi1_x + lambda2 phi2_x          = 0
//! 1 + lambda1 phi1_alpha + lambda2 phi2_alpha = 0
//! ```
//!
//! [`solve`] runs the full pipeline: geometric scaling by the larger outer
//! radius, a surrogate problem whose bounding spheres are separated, a cold
//! or warm start, the safeguarded Newton iteration with restarts, optional
//! continuation through smoother shape instances, and recovery to the
//! original scale.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6, LU, U6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::{surface_partials, Pose, SurfacePartials};
use crate::shapes::{default_bounding_radii, BoundingRadii, ShapeError, ShapeModel};

/// `1 / rcond` above which the Newton step is replaced by a damped step.
pub const ILL_CONDITIONED: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectorError {
    #[error("body-frame origins coincide (|r| = {distance:e})")]
    CoincidentOrigins { distance: f64 },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Two bodies and their bounding spheres.
#[derive(Debug, Clone)]
pub struct ContactPair {
    level: Level,
    ladder: OnceLock<Vec<Level>>,
}

#[derive(Debug, Clone)]
struct Level {
    shape1: ShapeModel,
    shape2: ShapeModel,
    radii1: BoundingRadii,
    radii2: BoundingRadii,
}

impl ContactPair {
    /// Pair with bounding radii from the default ray sampling.
    pub fn new(shape1: ShapeModel, shape2: ShapeModel) -> Result<Self, ShapeError> {
        let radii1 = default_bounding_radii(&shape1)?;
        let radii2 = default_bounding_radii(&shape2)?;
        Ok(Self::with_radii(shape1, shape2, radii1, radii2))
    }

    /// Pair with caller-supplied radii. The radii must bound the shapes.
    pub fn with_radii(
        shape1: ShapeModel,
        shape2: ShapeModel,
        radii1: BoundingRadii,
        radii2: BoundingRadii,
    ) -> Self {
        Self {
            level: Level {
                shape1,
                shape2,
                radii1,
                radii2,
            },
            ladder: OnceLock::new(),
        }
    }

    pub fn shape1(&self) -> &ShapeModel {
        &self.level.shape1
    }
    pub fn shape2(&self) -> &ShapeModel {
        &self.level.shape2
    }
    pub fn radii1(&self) -> BoundingRadii {
        self.level.radii1
    }
    pub fn radii2(&self) -> BoundingRadii {
        self.level.radii2
    }

    /// The same pair with bodies swapped.
    pub fn swapped(&self) -> Self {
        Self::with_radii(
            self.level.shape2.clone(),
            self.level.shape1.clone(),
            self.level.radii2,
            self.level.radii1,
        )
    }

    fn is_sharp(&self) -> bool {
        self.level.shape1.is_sharp() || self.level.shape2.is_sharp()
    }

    /// Progressively smoother instances, smoothest last.
    fn ladder(&self) -> &[Level] {
        self.ladder.get_or_init(|| {
            let mut levels: Vec<Level> = Vec::new();
            let mut current = self.level.clone();
            loop {
                let s1 = current.shape1.smoothed();
                let s2 = current.shape2.smoothed();
                if s1.is_none() && s2.is_none() {
                    break;
                }
                let next = |s: Option<ShapeModel>, old: &ShapeModel, r: BoundingRadii| match s {
                    Some(s) => default_bounding_radii(&s).map(|r| (s, r)),
                    None => Ok((old.clone(), r)),
                };
                let (Ok((shape1, radii1)), Ok((shape2, radii2))) = (
                    next(s1, &current.shape1, current.radii1),
                    next(s2, &current.shape2, current.radii2),
                ) else {
                    break;
                };
                current = Level {
                    shape1,
                    shape2,
                    radii1,
                    radii2,
                };
                levels.push(current.clone());
            }
            levels
        })
    }
}

/// Solver unknowns in the body-1 frame: contact point `x`, log-scale `s`
/// and the two multipliers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unknowns {
    pub x: Vector3<f64>,
    pub s: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Unknowns {
    pub fn new(x: Vector3<f64>, alpha: f64, lambda1: f64, lambda2: f64) -> Self {
        Self {
            x,
            s: alpha.ln(),
            lambda1,
            lambda2,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.s.exp()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.x.x, self.x.y, self.x.z, self.s, self.lambda1, self.lambda2)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            x: Vector3::new(v[0], v[1], v[2]),
            s: v[3],
            lambda1: v[4],
            lambda2: v[5],
        }
    }

    fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Continuation {
    /// Enabled when either body has `n >= 4` or `beta >= 30`.
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Residual-norm tolerance in geometrically scaled units.
    pub tol: f64,
    pub k_max: usize,
    pub n_attempts: usize,
    /// Separating factor of the surrogate problem.
    pub f_s: f64,
    pub armijo_c1: f64,
    pub armijo_shrink: f64,
    pub armijo_max_backtracks: usize,
    pub lm_damping: f64,
    /// Largest accepted `|ds|`.
    pub max_step_s: f64,
    /// Largest accepted `|dx|` as a fraction of `r1_out + r2_out`.
    pub max_step_x: f64,
    pub continuation: Continuation,
    /// Solve the surrogate problem (separated bounding spheres) instead of
    /// the original translation.
    pub surrogate: bool,
    /// Divide all lengths by `max(r1_out, r2_out)` while iterating.
    pub geometric_scaling: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            k_max: 50,
            n_attempts: 3,
            f_s: 2.0,
            armijo_c1: 1e-4,
            armijo_shrink: 0.5,
            armijo_max_backtracks: 20,
            lm_damping: 1e-6,
            max_step_s: 1.0,
            max_step_x: 0.5,
            continuation: Continuation::Auto,
            surrogate: true,
            geometric_scaling: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.to_string()));
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.k_max < 1 {
            return bad("k_max must be at least 1");
        }
        if self.n_attempts < 1 {
            return bad("n_attempts must be at least 1");
        }
        if !(self.f_s >= 1.0) {
            return bad("f_s must be at least 1");
        }
        if !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            return bad("armijo_shrink must lie in (0, 1)");
        }
        if !(self.armijo_c1 > 0.0 && self.armijo_c1 < 1.0) {
            return bad("armijo_c1 must lie in (0, 1)");
        }
        if !(self.lm_damping > 0.0 && self.max_step_s > 0.0 && self.max_step_x > 0.0) {
            return bad("damping and step limits must be positive");
        }
        Ok(())
    }

    fn continuation_enabled(&self, pair: &ContactPair) -> bool {
        match self.continuation {
            Continuation::Auto => pair.is_sharp(),
            Continuation::On => true,
            Continuation::Off => false,
        }
    }
}

/// Why the last Newton attempt stopped without converging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// Iteration budget exhausted.
    MaxIterations,
    /// Neither the line search nor the damped fallback reduced the merit.
    Stalled,
    /// A NaN or infinity appeared in an iterate.
    NonFiniteIterate,
    /// Converged to a root with a negative multiplier.
    NegativeMultiplier,
}

/// Result of [`solve`]. Always carries the best iterate, even on failure.
#[derive(Debug, Clone)]
pub struct Solution {
    pub unknowns: Unknowns,
    pub alpha: f64,
    pub converged: bool,
    /// Newton iterations summed over attempts and continuation stages.
    pub iterations: usize,
    /// `|f_c|` in geometrically scaled units.
    pub residual_norm: f64,
    pub attempts: usize,
    pub failure: Option<FailureReason>,
    /// `J_c` at the returned iterate, physical units, `s` parameterization.
    pub jacobian: Option<Matrix6<f64>>,
    pub factorization: Option<LU<f64, U6, U6>>,
}

/// JSON view of a [`Solution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSummary {
    pub x: [f64; 3],
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: f64,
}

impl Solution {
    pub fn summary(&self) -> SolutionSummary {
        let x = self.unknowns.x;
        SolutionSummary {
            x: [x.x, x.y, x.z],
            alpha: self.alpha,
            lambda1: self.unknowns.lambda1,
            lambda2: self.unknowns.lambda2,
            converged: self.converged,
            iterations: self.iterations,
            residual_norm: self.residual_norm,
        }
    }
}

/// Surrogate geometry: the translation rescaled so the outer spheres are
/// separated by the factor `f_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateProblem {
    pub scaled_translation: Vector3<f64>,
    /// `alpha_min / f_s`; multiplies `alpha`, `x` and the multipliers back.
    pub recovery_scale: f64,
    pub bounds: (f64, f64),
}

// ---------------------------------------------------------------------------
// Residual system

/// One concrete instance of the residual system. Shapes are evaluated at
/// `length * y`, so a `length` other than one describes the geometrically
/// rescaled problem.
struct Problem<'a> {
    shape1: &'a ShapeModel,
    shape2: &'a ShapeModel,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    length: f64,
}

impl<'a> Problem<'a> {
    fn physical(shape1: &'a ShapeModel, shape2: &'a ShapeModel, pose: &Pose) -> Self {
        Self {
            shape1,
            shape2,
            rotation: *pose.rotation(),
            translation: *pose.translation(),
            length: 1.0,
        }
    }

    fn partials(&self, z: &Unknowns) -> Result<(SurfacePartials, SurfacePartials), ShapeError> {
        let alpha = z.alpha();
        let l = self.length;
        let eval = |shape: &ShapeModel, y: &Vector3<f64>| {
            shape.eval(&(y * l)).map(|mut e| {
                e.gradient *= l;
                e.hessian *= l * l;
                e
            })
        };
        let y1 = z.x / alpha;
        let y2 = self.rotation.transpose() * (z.x - self.translation) / alpha;
        let e1 = eval(self.shape1, &y1)?;
        let e2 = eval(self.shape2, &y2)?;
        Ok((
            surface_partials(&e1, &Matrix3::identity(), &y1, alpha),
            surface_partials(&e2, &self.rotation, &y2, alpha),
        ))
    }

    fn residual(&self, z: &Unknowns) -> Result<Vector6<f64>, ShapeError> {
        let (p1, p2) = self.partials(z)?;
        Ok(assemble_residual(z, &p1, &p2))
    }

    fn residual_and_jacobian(&self, z: &Unknowns) -> Result<(Vector6<f64>, Matrix6<f64>), ShapeError> {
        let (p1, p2) = self.partials(z)?;
        Ok((assemble_residual(z, &p1, &p2), assemble_jacobian(z, &p1, &p2)))
    }
}

fn assemble_residual(z: &Unknowns, p1: &SurfacePartials, p2: &SurfacePartials) -> Vector6<f64> {
    let st = p1.phi_x * z.lambda1 + p2.phi_x * z.lambda2;
    Vector6::new(
        p1.phi,
        p2.phi,
        st.x,
        st.y,
        st.z,
        1.0 + z.lambda1 * p1.phi_alpha + z.lambda2 * p2.phi_alpha,
    )
}

fn assemble_jacobian(z: &Unknowns, p1: &SurfacePartials, p2: &SurfacePartials) -> Matrix6<f64> {
    let alpha = z.alpha();
    let (l1, l2) = (z.lambda1, z.lambda2);
    let mut j = Matrix6::zeros();
    for (row, p) in [(0, p1), (1, p2)] {
        j.fixed_view_mut::<1, 3>(row, 0).copy_from(&p.phi_x.transpose());
        j[(row, 3)] = p.phi_alpha * alpha;
    }
    let hxx = p1.phi_xx * l1 + p2.phi_xx * l2;
    let hxa = (p1.phi_xalpha * l1 + p2.phi_xalpha * l2) * alpha;
    j.fixed_view_mut::<3, 3>(2, 0).copy_from(&hxx);
    j.fixed_view_mut::<3, 1>(2, 3).copy_from(&hxa);
    j.fixed_view_mut::<3, 1>(2, 4).copy_from(&p1.phi_x);
    j.fixed_view_mut::<3, 1>(2, 5).copy_from(&p2.phi_x);
    j.fixed_view_mut::<1, 3>(5, 0)
        .copy_from(&(p1.phi_xalpha * l1 + p2.phi_xalpha * l2).transpose());
    j[(5, 3)] = (l1 * p1.phi_alphaalpha + l2 * p2.phi_alphaalpha) * alpha;
    j[(5, 4)] = p1.phi_alpha;
    j[(5, 5)] = p2.phi_alpha;
    j
}

fn check_translation(pair: &ContactPair, r: &Vector3<f64>) -> Result<f64, DetectorError> {
    let distance = r.norm();
    let scale = pair.radii1().r_out.max(pair.radii2().r_out);
    if !(distance >= 1e-12 * scale) || !distance.is_finite() {
        return Err(DetectorError::CoincidentOrigins { distance });
    }
    Ok(distance)
}

/// KKT residual `f_c(z)` in physical units.
pub fn residual(z: &Unknowns, pair: &ContactPair, pose: &Pose) -> Result<Vector6<f64>, DetectorError> {
    check_translation(pair, pose.translation())?;
    Ok(Problem::physical(pair.shape1(), pair.shape2(), pose).residual(z)?)
}

/// Jacobian of [`residual`] with respect to `(x, s, lambda1, lambda2)`.
pub fn residual_jacobian(
    z: &Unknowns,
    pair: &ContactPair,
    pose: &Pose,
) -> Result<Matrix6<f64>, DetectorError> {
    check_translation(pair, pose.translation())?;
    Ok(Problem::physical(pair.shape1(), pair.shape2(), pose)
        .residual_and_jacobian(z)?
        .1)
}

/// Bounds `(alpha_min, alpha_max)` on the optimal scaling from the bounding
/// spheres.
pub fn scaling_bounds(pair: &ContactPair, r: &Vector3<f64>) -> Result<(f64, f64), DetectorError> {
    let distance = check_translation(pair, r)?;
    Ok(bounds_for(pair.radii1(), pair.radii2(), distance))
}

fn bounds_for(r1: BoundingRadii, r2: BoundingRadii, distance: f64) -> (f64, f64) {
    (distance / (r1.r_out + r2.r_out), distance / (r1.r_in + r2.r_in))
}

pub fn build_surrogate(
    pair: &ContactPair,
    pose: &Pose,
    f_s: f64,
) -> Result<SurrogateProblem, DetectorError> {
    if !(f_s >= 1.0) {
        return Err(DetectorError::InvalidConfig(format!("f_s must be at least 1, got {f_s}")));
    }
    let r = pose.translation();
    let distance = check_translation(pair, r)?;
    Ok(surrogate_for(pair.radii1(), pair.radii2(), r, distance, f_s))
}

fn surrogate_for(
    r1: BoundingRadii,
    r2: BoundingRadii,
    r: &Vector3<f64>,
    distance: f64,
    f_s: f64,
) -> SurrogateProblem {
    let sum_out = r1.r_out + r2.r_out;
    let sum_in = r1.r_in + r2.r_in;
    let (alpha_min, _) = bounds_for(r1, r2, distance);
    SurrogateProblem {
        scaled_translation: r * (f_s * sum_out / distance),
        recovery_scale: alpha_min / f_s,
        bounds: (f_s, f_s * sum_out / sum_in),
    }
}

/// Multipliers from the stationarity conditions at a given `(x, alpha)`,
/// falling back to one when a denominator degenerates.
fn stationary_multipliers(problem: &Problem, x: Vector3<f64>, s: f64) -> Unknowns {
    let mut z = Unknowns {
        x,
        s,
        lambda1: 1.0,
        lambda2: 1.0,
    };
    if let Ok((p1, p2)) = problem.partials(&z) {
        let alpha = z.alpha();
        let d1 = problem.translation.dot(&p1.phi_x);
        let d2 = problem.translation.dot(&p2.phi_x);
        let pick = |l: f64| if l.is_finite() && l > 0.0 { l } else { 1.0 };
        if d1.abs() >= 1e-12 {
            z.lambda1 = pick(alpha / d1);
        }
        if d2.abs() >= 1e-12 {
            z.lambda2 = pick(-alpha / d2);
        }
    }
    z
}

fn cold_guess(problem: &Problem, s0: f64, mean_radius1: f64) -> Unknowns {
    let dir = problem.translation.normalize();
    stationary_multipliers(problem, dir * (s0.exp() * mean_radius1), s0)
}

/// Cold-start initialization of the surrogate problem, in surrogate units.
///
/// `s0` is the log of the geometric mean of the surrogate bounds, `x0` lies
/// along `r` on body 1's mean bounding sphere scaled by `alpha0`, and the
/// multipliers solve the stationarity rows at `(x0, alpha0)`. For two spheres
/// this is the exact solution.
pub fn cold_start(
    pair: &ContactPair,
    surrogate: &SurrogateProblem,
    pose_rotation: &Matrix3<f64>,
) -> Unknowns {
    let problem = Problem {
        shape1: pair.shape1(),
        shape2: pair.shape2(),
        rotation: *pose_rotation,
        translation: surrogate.scaled_translation,
        length: 1.0,
    };
    let s0 = 0.5 * (surrogate.bounds.0 * surrogate.bounds.1).ln();
    cold_guess(&problem, s0, pair.radii1().mean())
}

// ---------------------------------------------------------------------------
// Newton solver

struct Attempt {
    z: Unknowns,
    jacobian: Option<Matrix6<f64>>,
    residual_norm: f64,
    converged: bool,
    iterations: usize,
    failure: Option<FailureReason>,
}

struct NewtonLimits {
    s_range: (f64, f64),
    max_step_x: f64,
}

fn lm_step(jac: &Matrix6<f64>, f: &Vector6<f64>, damping: f64) -> Option<Vector6<f64>> {
    let jtj = jac.transpose() * jac;
    let scale = jtj.diagonal().amax().max(1.0);
    let a = jtj + Matrix6::identity() * (damping * scale);
    let rhs = -(jac.transpose() * f);
    a.cholesky().map(|c| c.solve(&rhs)).filter(|d| d.iter().all(|v| v.is_finite()))
}

fn limit_step(step: &mut Vector6<f64>, limits: &NewtonLimits, max_step_s: f64) {
    let dx = Vector3::new(step[0], step[1], step[2]).norm();
    let ds = step[3].abs();
    let mut factor: f64 = 1.0;
    if dx > limits.max_step_x {
        factor = factor.min(limits.max_step_x / dx);
    }
    if ds > max_step_s {
        factor = factor.min(max_step_s / ds);
    }
    if factor < 1.0 {
        *step *= factor;
    }
}

fn clamp_s(z: &mut Unknowns, range: (f64, f64)) {
    z.s = z.s.clamp(range.0, range.1);
}

/// `1 / rcond` in the 1-norm, computed from an explicit inverse.
pub(crate) fn inverse_condition(jac: &Matrix6<f64>, lu: &LU<f64, U6, U6>) -> f64 {
    let Some(inv) = lu.try_inverse() else {
        return f64::INFINITY;
    };
    let norm1 = |m: &Matrix6<f64>| {
        m.column_iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    norm1(jac) * norm1(&inv)
}

fn newton(problem: &Problem, z0: Unknowns, cfg: &SolverConfig, limits: &NewtonLimits) -> Attempt {
    let mut z = z0;
    clamp_s(&mut z, limits.s_range);
    let mut best = Attempt {
        z,
        jacobian: None,
        residual_norm: f64::INFINITY,
        converged: false,
        iterations: 0,
        failure: Some(FailureReason::NonFiniteIterate),
    };
    let (mut f, mut jac) = match problem.residual_and_jacobian(&z) {
        Ok(v) if v.0.iter().all(|x| x.is_finite()) => v,
        _ => return best,
    };
    let mut damping = cfg.lm_damping;
    for k in 0..=cfg.k_max {
        let norm = f.norm();
        if norm < best.residual_norm {
            best.z = z;
            best.jacobian = Some(jac);
            best.residual_norm = norm;
        }
        best.iterations = k;
        if norm < cfg.tol {
            if z.lambda1 >= -cfg.tol && z.lambda2 >= -cfg.tol {
                best.converged = true;
                best.failure = None;
            } else {
                best.failure = Some(FailureReason::NegativeMultiplier);
            }
            return best;
        }
        if k == cfg.k_max {
            best.failure = Some(FailureReason::MaxIterations);
            return best;
        }

        let lu = jac.lu();
        let newton_step = lu.solve(&-f).filter(|d| d.iter().all(|v| v.is_finite()));
        let step = match newton_step {
            Some(d) if inverse_condition(&jac, &lu) <= ILL_CONDITIONED => Some(d),
            _ => lm_step(&jac, &f, damping),
        };

        let merit = 0.5 * norm * norm;
        let base = z.to_vector();
        let try_point = |dir: &Vector6<f64>, t: f64| {
            let mut trial = Unknowns::from_vector(&(base + dir * t));
            clamp_s(&mut trial, limits.s_range);
            if !trial.is_finite() {
                return None;
            }
            problem
                .residual_and_jacobian(&trial)
                .ok()
                .filter(|(ft, _)| ft.iter().all(|v| v.is_finite()))
                .map(|(ft, jt)| (trial, ft, jt))
        };

        let mut accepted = None;
        if let Some(mut dir) = step {
            limit_step(&mut dir, limits, cfg.max_step_s);
            let slope = f.dot(&(jac * dir));
            if slope < 0.0 {
                let mut t = 1.0;
                for _ in 0..cfg.armijo_max_backtracks {
                    if let Some((trial, ft, jt)) = try_point(&dir, t) {
                        if 0.5 * ft.norm_squared() <= merit + cfg.armijo_c1 * t * slope {
                            accepted = Some((trial, ft, jt));
                            break;
                        }
                    }
                    t *= cfg.armijo_shrink;
                }
            }
        }
        if accepted.is_none() {
            for _ in 0..8 {
                damping *= 10.0;
                let Some(mut dir) = lm_step(&jac, &f, damping) else { continue };
                limit_step(&mut dir, limits, cfg.max_step_s);
                if let Some((trial, ft, jt)) = try_point(&dir, 1.0) {
                    if 0.5 * ft.norm_squared() < merit {
                        accepted = Some((trial, ft, jt));
                        break;
                    }
                }
            }
        } else {
            damping = (damping * 0.1).max(cfg.lm_damping);
        }
        match accepted {
            Some((trial, ft, jt)) => {
                z = trial;
                f = ft;
                jac = jt;
            }
            None => {
                best.iterations = k + 1;
                best.failure = Some(FailureReason::Stalled);
                return best;
            }
        }
    }
    best
}

/// Outcome of one shape level, in physical units.
struct LevelOutcome {
    z: Unknowns,
    jacobian: Option<Matrix6<f64>>,
    converged: bool,
    iterations: usize,
    attempts: usize,
    residual_norm: f64,
    failure: Option<FailureReason>,
}

fn solve_level(
    level: &Level,
    pose: &Pose,
    cfg: &SolverConfig,
    warm: Option<&Unknowns>,
) -> LevelOutcome {
    let r = pose.translation();
    let distance = r.norm();
    let (r1, r2) = (level.radii1, level.radii2);
    let length = if cfg.geometric_scaling {
        r1.r_out.max(r2.r_out)
    } else {
        1.0
    };
    let (alpha_min, alpha_max) = bounds_for(r1, r2, distance);
    let (scale, bounds) = if cfg.surrogate {
        let sur = surrogate_for(r1, r2, r, distance, cfg.f_s);
        (sur.recovery_scale, sur.bounds)
    } else {
        (1.0, (alpha_min, alpha_max))
    };
    let problem = Problem {
        shape1: &level.shape1,
        shape2: &level.shape2,
        rotation: *pose.rotation(),
        translation: r / (scale * length),
        length,
    };
    let (log_lo, log_hi) = (bounds.0.ln(), bounds.1.ln());
    let limits = NewtonLimits {
        s_range: (log_lo - 0.1, log_hi + 0.1),
        max_step_x: cfg.max_step_x * (r1.r_out + r2.r_out) / length,
    };
    let to_problem = |z: &Unknowns| Unknowns {
        x: z.x / (scale * length),
        s: z.s - scale.ln(),
        lambda1: z.lambda1 / scale,
        lambda2: z.lambda2 / scale,
    };
    let to_physical = |z: &Unknowns| Unknowns {
        x: z.x * (scale * length),
        s: z.s + scale.ln(),
        lambda1: z.lambda1 * scale,
        lambda2: z.lambda2 * scale,
    };

    let mean1 = r1.mean() / length;
    let s_mid = 0.5 * (log_lo + log_hi);
    let width = log_hi - log_lo;
    let warm = warm.filter(|w| w.is_finite()).map(to_problem);
    let cold = (0..cfg.n_attempts).map(|j| {
        let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
        let s0 = s_mid + sign * j as f64 * 0.25 * width;
        cold_guess(&problem, s0, mean1)
    });
    let starts = warm.into_iter().chain(cold);

    let mut total_iterations = 0;
    let mut best: Option<Attempt> = None;
    let mut attempts = 0;
    for z0 in starts {
        attempts += 1;
        let a = newton(&problem, z0, cfg, &limits);
        total_iterations += a.iterations;
        let done = a.converged;
        if best
            .as_ref()
            .is_none_or(|b| a.converged || (!b.converged && a.residual_norm < b.residual_norm))
        {
            best = Some(a);
        }
        if done {
            break;
        }
    }
    let best = best.expect("at least one start");
    // The iteration variables are (x / (c L), s - ln c, lambda / c) and the
    // stationarity rows carry an extra factor L.
    let jacobian = best.jacobian.map(|j| {
        let rows = Vector6::new(1.0, 1.0, 1.0 / length, 1.0 / length, 1.0 / length, 1.0);
        let cols = Vector6::new(
            1.0 / (scale * length),
            1.0 / (scale * length),
            1.0 / (scale * length),
            1.0,
            1.0 / scale,
            1.0 / scale,
        );
        Matrix6::from_diagonal(&rows) * j * Matrix6::from_diagonal(&cols)
    });
    LevelOutcome {
        z: to_physical(&best.z),
        jacobian,
        converged: best.converged,
        iterations: total_iterations,
        attempts,
        residual_norm: best.residual_norm,
        failure: best.failure,
    }
}

/// Solves the contact problem for `pair` at relative pose `pose`.
///
/// Non-convergence is not an error: the best iterate is returned with
/// `converged = false` and a [`FailureReason`].
pub fn solve(
    pair: &ContactPair,
    pose: &Pose,
    config: &SolverConfig,
    warm: Option<&Unknowns>,
) -> Result<Solution, DetectorError> {
    config.validate()?;
    check_translation(pair, pose.translation())?;

    let mut outcome = solve_level(&pair.level, pose, config, warm);
    let mut iterations = outcome.iterations;
    let mut attempts = outcome.attempts;

    if !outcome.converged && config.continuation_enabled(pair) {
        let ladder = pair.ladder();
        let mut found = None;
        for (k, level) in ladder.iter().enumerate() {
            let o = solve_level(level, pose, config, None);
            iterations += o.iterations;
            attempts += o.attempts;
            if o.converged {
                found = Some((k, o));
                break;
            }
        }
        if let Some((k, mut stage)) = found {
            let sharper = ladder[..k].iter().rev().chain(std::iter::once(&pair.level));
            for level in sharper {
                let o = solve_level(level, pose, config, Some(&stage.z));
                iterations += o.iterations;
                attempts += o.attempts;
                stage = o;
                if !stage.converged {
                    break;
                }
            }
            if stage.converged {
                outcome = stage;
            }
        }
    }

    let z = outcome.z;
    let failure = if outcome.converged {
        None
    } else {
        outcome.failure.or(Some(FailureReason::MaxIterations))
    };
    Ok(Solution {
        unknowns: z,
        alpha: z.alpha(),
        converged: outcome.converged,
        iterations,
        residual_norm: outcome.residual_norm,
        attempts,
        failure,
        factorization: outcome.jacobian.map(|j| j.lu()),
        jacobian: outcome.jacobian,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::SuperellipsoidSpec;
    use approx::assert_relative_eq;

    fn spheres() -> ContactPair {
        let s: ShapeModel = SuperellipsoidSpec::sphere(1.0).unwrap().into();
        ContactPair::new(s.clone(), s).unwrap()
    }

    #[test]
    fn zero_multipliers_leave_unit_alpha_row() {
        let pair = spheres();
        let pose = Pose::from_translation(Vector3::new(3.0, 0.0, 0.0));
        let z = Unknowns::new(Vector3::new(1.0, 0.2, 0.1), 1.3, 0.0, 0.0);
        let f = residual(&z, &pair, &pose).unwrap();
        assert_eq!(f[5], 1.0);
        assert_eq!(f.fixed_rows::<3>(2).into_owned(), Vector3::zeros());
    }

    #[test]
    fn coincident_origins_rejected() {
        let pair = spheres();
        let pose = Pose::identity();
        let z = Unknowns::new(Vector3::x(), 1.0, 1.0, 1.0);
        assert!(matches!(
            residual(&z, &pair, &pose),
            Err(DetectorError::CoincidentOrigins { .. })
        ));
        assert!(matches!(
            solve(&pair, &pose, &SolverConfig::default(), None),
            Err(DetectorError::CoincidentOrigins { .. })
        ));
    }

    #[test]
    fn bounds_for_unit_spheres() {
        let s: ShapeModel = SuperellipsoidSpec::sphere(1.0).unwrap().into();
        let unit = BoundingRadii { r_in: 1.0, r_out: 1.0 };
        let pair = ContactPair::with_radii(s.clone(), s.clone(), unit, unit);
        let (lo, hi) = scaling_bounds(&pair, &Vector3::new(3.0, 0.0, 0.0)).unwrap();
        assert_eq!((lo, hi), (1.5, 1.5));
        let half = BoundingRadii { r_in: 0.5, r_out: 1.0 };
        let pair = ContactPair::with_radii(s.clone(), s, half, half);
        let (lo, hi) = scaling_bounds(&pair, &Vector3::new(0.0, 2.0, 0.0)).unwrap();
        assert_eq!((lo, hi), (1.0, 2.0));
    }

    #[test]
    fn surrogate_for_tangent_outer_spheres() {
        let s: ShapeModel = SuperellipsoidSpec::sphere(1.0).unwrap().into();
        let unit = BoundingRadii { r_in: 1.0, r_out: 1.0 };
        let pair = ContactPair::with_radii(s.clone(), s, unit, unit);
        let pose = Pose::from_translation(Vector3::new(0.3, 0.4, 0.0));
        let sur = build_surrogate(&pair, &pose, 1.0).unwrap();
        assert_relative_eq!(sur.scaled_translation.norm(), 2.0, epsilon = 1e-15);
        assert!(build_surrogate(&pair, &pose, 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            f_s: 0.9,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            k_max: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn solution_summary_fields() {
        let pair = spheres();
        let pose = Pose::from_translation(Vector3::new(3.0, 0.0, 0.0));
        let sol = solve(&pair, &pose, &SolverConfig::default(), None).unwrap();
        let s = sol.summary();
        assert!(s.converged);
        assert_relative_eq!(s.alpha, 1.5, epsilon = 1e-12);
        assert_relative_eq!(s.x[0], 1.5, epsilon = 1e-12);
    }
}
