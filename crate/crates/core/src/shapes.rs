//! Strictly convex implicit primitives.
//!
//! Every shape is described by an implicit function `phi` in its own body
//! frame, negative inside and positive outside. Evaluation returns the value
//! together with the analytic gradient and Hessian, which is everything the
//! contact solver and the sensitivity layer need from a geometry.
//!
//! Four families are provided:
//!
//! * [`SmoothPolytopeSpec`]: half-space polytope blended with a log-sum-exp
//!   smooth maximum.
//! * [`TruncatedConeSpec`]: lateral surface plus two caps, blended the same way.
//! * [`SuperellipsoidSpec`]: `(sum (y_i/a_i)^(2n))^(1/2n) - 1`.
//! * [`SuperellipticCylinderSpec`]: radial and axial superelliptic blend.
//!
//! The power families use the regularization `ybar^2 -> ybar^2 + eps` so that
//! curvature never vanishes on the coordinate planes.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default log-sum-exp sharpness.
pub const DEFAULT_BETA: f64 = 20.0;
/// Default superquadric exponent.
pub const DEFAULT_EXPONENT: u32 = 8;
/// Default curvature regularization for exponents above one.
pub const DEFAULT_REG_EPS: f64 = 1e-6;
/// Top radius used for a true cone, relative to its bottom radius.
pub const CONE_TIP_RATIO: f64 = 1e-3;
/// Default number of Fibonacci directions used by [`bounding_radii`].
pub const DEFAULT_RAY_COUNT: usize = 256;
/// Default shrink/grow factor applied to the sampled radii.
pub const DEFAULT_RADII_SAFETY: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("invalid {shape} parameter: {reason}")]
    InvalidParameter { shape: &'static str, reason: String },
    #[error("{shape} evaluation left the representable range at y = [{}, {}, {}]", y[0], y[1], y[2])]
    Domain { shape: &'static str, y: [f64; 3] },
    #[error("{shape} does not contain its frame origin (phi(0) = {value})")]
    NotContainingOrigin { shape: &'static str, value: f64 },
    #[error("{shape}: no surface crossing along direction [{}, {}, {}]", dir[0], dir[1], dir[2])]
    BracketFailure { shape: &'static str, dir: [f64; 3] },
}

fn invalid(shape: &'static str, reason: impl Into<String>) -> ShapeError {
    ShapeError::InvalidParameter {
        shape,
        reason: reason.into(),
    }
}

/// Value, gradient and Hessian of an implicit function at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeEval {
    pub value: f64,
    pub gradient: Vector3<f64>,
    pub hessian: Matrix3<f64>,
}

impl ShapeEval {
    pub fn new(value: f64, gradient: Vector3<f64>, hessian: Matrix3<f64>) -> Self {
        Self {
            value,
            gradient,
            hessian,
        }
    }

    /// Affine function `g . y + c` evaluated at `y`.
    pub fn affine(gradient: Vector3<f64>, offset: f64, y: &Vector3<f64>) -> Self {
        Self::new(gradient.dot(y) + offset, gradient, Matrix3::zeros())
    }

    fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.gradient.iter().all(|v| v.is_finite())
            && self.hessian.iter().all(|v| v.is_finite())
    }
}

/// Log-sum-exp sharpness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothMaxParams {
    pub beta: f64,
}

impl SmoothMaxParams {
    pub fn new(beta: f64) -> Result<Self, ShapeError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid("smooth max", format!("beta must be positive, got {beta}")));
        }
        Ok(Self { beta })
    }
}

impl Default for SmoothMaxParams {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA }
    }
}

/// Streaming accumulator for the shifted log-sum-exp of a set of components
/// whose maximum value is known up front.
struct SmoothMaxAccumulator {
    beta: f64,
    shift: f64,
    weight_sum: f64,
    gradient: Vector3<f64>,
    hessian: Matrix3<f64>,
    outer: Matrix3<f64>,
}

impl SmoothMaxAccumulator {
    fn new(beta: f64, shift: f64) -> Self {
        Self {
            beta,
            shift,
            weight_sum: 0.0,
            gradient: Vector3::zeros(),
            hessian: Matrix3::zeros(),
            outer: Matrix3::zeros(),
        }
    }

    fn push_affine(&mut self, value: f64, gradient: &Vector3<f64>) {
        let w = (self.beta * (value - self.shift)).exp();
        self.weight_sum += w;
        self.gradient += gradient * w;
        self.outer += gradient * gradient.transpose() * w;
    }

    fn push(&mut self, c: &ShapeEval) {
        let w = (self.beta * (c.value - self.shift)).exp();
        self.weight_sum += w;
        self.gradient += c.gradient * w;
        self.hessian += c.hessian * w;
        self.outer += c.gradient * c.gradient.transpose() * w;
    }

    fn finish(self) -> ShapeEval {
        let inv = 1.0 / self.weight_sum;
        let value = self.shift + self.weight_sum.ln() / self.beta;
        let gradient = self.gradient * inv;
        let mut hessian =
            self.hessian * inv + (self.outer * inv - gradient * gradient.transpose()) * self.beta;
        symmetrize(&mut hessian);
        ShapeEval::new(value, gradient, hessian)
    }
}

fn symmetrize(m: &mut Matrix3<f64>) {
    for i in 0..3 {
        for j in (i + 1)..3 {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Overflow-safe log-sum-exp smooth maximum of implicit components, with
/// gradient `sum w_i grad_i` and Hessian
/// `sum w_i H_i + beta (sum w_i g_i g_i^T - g g^T)`.
///
/// A single component is returned unchanged.
pub fn smooth_max(components: &[ShapeEval], params: SmoothMaxParams) -> ShapeEval {
    assert!(!components.is_empty(), "smooth_max needs at least one component");
    if components.len() == 1 {
        return components[0];
    }
    let shift = components
        .iter()
        .map(|c| c.value)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut acc = SmoothMaxAccumulator::new(params.beta, shift);
    for c in components {
        acc.push(c);
    }
    acc.finish()
}

fn smooth_max_value(values: impl Iterator<Item = f64> + Clone, beta: f64) -> f64 {
    let shift = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.map(|v| (beta * (v - shift)).exp()).sum();
    shift + sum.ln() / beta
}

// ---------------------------------------------------------------------------
// Smooth polytope

/// Convex polytope `{ y : a_i . y <= b_i }` smoothed by log-sum-exp over the
/// nondimensional face residuals `(a_i . y - b_i) / L`.
///
/// Face normals are normalized on construction, so each residual is a signed
/// plane distance divided by `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothPolytopeSpec {
    normals: Vec<Vector3<f64>>,
    offsets: Vec<f64>,
    char_length: f64,
    smax: SmoothMaxParams,
}

impl SmoothPolytopeSpec {
    /// Builds a smooth polytope. `char_length` defaults to the circumradius
    /// of the exact polytope.
    pub fn new(
        normals: Vec<Vector3<f64>>,
        offsets: Vec<f64>,
        char_length: Option<f64>,
        smax: SmoothMaxParams,
    ) -> Result<Self, ShapeError> {
        const NAME: &str = "polytope";
        if normals.len() != offsets.len() {
            return Err(invalid(
                NAME,
                format!("{} normals but {} offsets", normals.len(), offsets.len()),
            ));
        }
        if normals.len() < 4 {
            return Err(invalid(NAME, format!("need at least 4 faces, got {}", normals.len())));
        }
        let mut unit_normals = Vec::with_capacity(normals.len());
        let mut unit_offsets = Vec::with_capacity(offsets.len());
        for (i, (a, b)) in normals.iter().zip(&offsets).enumerate() {
            let len = a.norm();
            if !(len > 0.0 && len.is_finite() && b.is_finite()) {
                return Err(invalid(NAME, format!("face {i} has a degenerate normal")));
            }
            let b = b / len;
            if b <= 0.0 {
                return Err(invalid(
                    NAME,
                    format!("face {i} does not keep the origin strictly inside (offset {b})"),
                ));
            }
            unit_normals.push(a / len);
            unit_offsets.push(b);
        }
        let mut spec = Self {
            normals: unit_normals,
            offsets: unit_offsets,
            char_length: 1.0,
            smax,
        };
        spec.char_length = match char_length {
            Some(l) if l > 0.0 && l.is_finite() => l,
            Some(l) => return Err(invalid(NAME, format!("char_length must be positive, got {l}"))),
            None => spec.exact_circumradius()?,
        };
        Ok(spec)
    }

    /// Axis-aligned box with the given half extents.
    pub fn cuboid(half_extents: [f64; 3], smax: SmoothMaxParams) -> Result<Self, ShapeError> {
        let mut normals = Vec::with_capacity(6);
        let mut offsets = Vec::with_capacity(6);
        for (axis, &h) in half_extents.iter().enumerate() {
            for sign in [1.0, -1.0] {
                let mut n = Vector3::zeros();
                n[axis] = sign;
                normals.push(n);
                offsets.push(h);
            }
        }
        Self::new(normals, offsets, None, smax)
    }

    /// Regular tetrahedron centred at its centroid, with inradius `inradius`.
    pub fn tetrahedron(inradius: f64, smax: SmoothMaxParams) -> Result<Self, ShapeError> {
        let normals = vec![
            Vector3::new(1.0, 1.0, 1.0),
            Vector3::new(1.0, -1.0, -1.0),
            Vector3::new(-1.0, 1.0, -1.0),
            Vector3::new(-1.0, -1.0, 1.0),
        ];
        let offsets = normals.iter().map(|n| inradius * n.norm()).collect();
        Self::new(normals, offsets, None, smax)
    }

    /// Square pyramid with base half-width `half_base` and apex height
    /// `height`, with the frame origin at the centroid.
    pub fn square_pyramid(
        half_base: f64,
        height: f64,
        smax: SmoothMaxParams,
    ) -> Result<Self, ShapeError> {
        // base at z = -height/4, apex at z = 3 height/4
        let zb = -0.25 * height;
        let apex = Vector3::new(0.0, 0.0, 0.75 * height);
        let mut normals = vec![Vector3::new(0.0, 0.0, -1.0)];
        let mut offsets = vec![-zb];
        for (dx, dy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
            let n = Vector3::new(dx * height, dy * height, half_base);
            let edge = Vector3::new(dx * half_base, dy * half_base, zb);
            normals.push(n);
            offsets.push(n.dot(&edge).max(n.dot(&apex)));
        }
        Self::new(normals, offsets, None, smax)
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn char_length(&self) -> f64 {
        self.char_length
    }

    pub fn smax(&self) -> SmoothMaxParams {
        self.smax
    }

    /// Vertices of the exact (unsmoothed) polytope.
    pub fn exact_vertices(&self) -> Vec<Vector3<f64>> {
        let m = self.normals.len();
        let mut vertices: Vec<Vector3<f64>> = Vec::new();
        let scale = self.offsets.iter().fold(0.0_f64, |a, &b| a.max(b));
        for i in 0..m {
            for j in (i + 1)..m {
                for k in (j + 1)..m {
                    let a = Matrix3::from_rows(&[
                        self.normals[i].transpose(),
                        self.normals[j].transpose(),
                        self.normals[k].transpose(),
                    ]);
                    if a.determinant().abs() < 1e-12 {
                        continue;
                    }
                    let Some(inv) = a.try_inverse() else { continue };
                    let v = inv * Vector3::new(self.offsets[i], self.offsets[j], self.offsets[k]);
                    let feasible = self
                        .normals
                        .iter()
                        .zip(&self.offsets)
                        .all(|(n, b)| n.dot(&v) <= b + 1e-9 * scale);
                    if feasible && !vertices.iter().any(|w| (w - v).norm() <= 1e-9 * scale) {
                        vertices.push(v);
                    }
                }
            }
        }
        vertices
    }

    fn exact_circumradius(&self) -> Result<f64, ShapeError> {
        let vertices = self.exact_vertices();
        if vertices.len() < 4 {
            return Err(invalid("polytope", "half-spaces do not bound a solid"));
        }
        // FIXME: an unbounded intersection with enough vertices slips through
        // here and is only caught later by the ray bracketing in bounding_radii.
        Ok(vertices.iter().map(|v| v.norm()).fold(0.0, f64::max))
    }

    /// Largest face residual of the exact polytope: `max_i (a_i . y - b_i) / L`.
    pub fn exact_value(&self, y: &Vector3<f64>) -> f64 {
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(a, b)| (a.dot(y) - b) / self.char_length)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn value(&self, y: &Vector3<f64>) -> f64 {
        let inv_l = 1.0 / self.char_length;
        smooth_max_value(
            self.normals
                .iter()
                .zip(&self.offsets)
                .map(move |(a, b)| (a.dot(y) - b) * inv_l),
            self.smax.beta,
        )
    }

    fn eval(&self, y: &Vector3<f64>) -> ShapeEval {
        let inv_l = 1.0 / self.char_length;
        let shift = self.exact_value(y);
        let mut acc = SmoothMaxAccumulator::new(self.smax.beta, shift);
        for (a, b) in self.normals.iter().zip(&self.offsets) {
            acc.push_affine((a.dot(y) - b) * inv_l, &(a * inv_l));
        }
        acc.finish()
    }
}

// ---------------------------------------------------------------------------
// Smooth truncated cone

/// Truncated cone along the body `y1` axis, spanning `[-ext_below, ext_above]`
/// with radius varying linearly from `r_bottom` to `r_top`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedConeSpec {
    r_bottom: f64,
    r_top: f64,
    ext_below: f64,
    ext_above: f64,
    smax: SmoothMaxParams,
}

impl TruncatedConeSpec {
    /// A zero `r_top` is regularized to `CONE_TIP_RATIO * r_bottom`.
    pub fn new(
        r_bottom: f64,
        r_top: f64,
        ext_below: f64,
        ext_above: f64,
        smax: SmoothMaxParams,
    ) -> Result<Self, ShapeError> {
        const NAME: &str = "truncated_cone";
        for (name, v) in [("r_bottom", r_bottom), ("ext_below", ext_below), ("ext_above", ext_above)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(NAME, format!("{name} must be positive, got {v}")));
            }
        }
        let r_top = if r_top == 0.0 {
            CONE_TIP_RATIO * r_bottom
        } else if r_top > 0.0 && r_top.is_finite() {
            r_top
        } else {
            return Err(invalid(NAME, format!("r_top must be nonnegative, got {r_top}")));
        };
        Ok(Self {
            r_bottom,
            r_top,
            ext_below,
            ext_above,
            smax,
        })
    }

    pub fn r_bottom(&self) -> f64 {
        self.r_bottom
    }
    pub fn r_top(&self) -> f64 {
        self.r_top
    }
    pub fn ext_below(&self) -> f64 {
        self.ext_below
    }
    pub fn ext_above(&self) -> f64 {
        self.ext_above
    }
    pub fn smax(&self) -> SmoothMaxParams {
        self.smax
    }

    fn slope(&self) -> f64 {
        (self.r_top - self.r_bottom) / (self.ext_below + self.ext_above)
    }

    // Beyond the caps the linear radius can reach the apex; it is floored at
    // half the smaller cap radius, which is only reachable outside the body.
    fn radius_at(&self, y1: f64) -> (f64, f64) {
        let kappa = self.slope();
        let r = self.r_bottom + kappa * (y1 + self.ext_below);
        let floor = 0.5 * self.r_bottom.min(self.r_top);
        if r < floor {
            (floor, 0.0)
        } else {
            (r, kappa)
        }
    }

    fn components(&self, y: &Vector3<f64>) -> [ShapeEval; 3] {
        let (r, kappa) = self.radius_at(y[0]);
        let rho2 = y[1] * y[1] + y[2] * y[2];
        let r2 = r * r;
        let r3 = r2 * r;
        let r4 = r2 * r2;
        let side_grad = Vector3::new(-2.0 * kappa * rho2 / r3, 2.0 * y[1] / r2, 2.0 * y[2] / r2);
        let h12 = -4.0 * kappa * y[1] / r3;
        let h13 = -4.0 * kappa * y[2] / r3;
        #[rustfmt::skip]
        let side_hess = Matrix3::new(
            6.0 * kappa * kappa * rho2 / r4, h12, h13,
            h12, 2.0 / r2, 0.0,
            h13, 0.0, 2.0 / r2,
        );
        let side = ShapeEval::new(rho2 / r2 - 1.0, side_grad, side_hess);
        let bottom = ShapeEval::affine(Vector3::new(-1.0 / self.ext_below, 0.0, 0.0), -1.0, y);
        let top = ShapeEval::affine(Vector3::new(1.0 / self.ext_above, 0.0, 0.0), -1.0, y);
        [side, bottom, top]
    }

    fn value(&self, y: &Vector3<f64>) -> f64 {
        let (r, _) = self.radius_at(y[0]);
        let side = (y[1] * y[1] + y[2] * y[2]) / (r * r) - 1.0;
        let bottom = -y[0] / self.ext_below - 1.0;
        let top = y[0] / self.ext_above - 1.0;
        smooth_max_value([side, bottom, top].into_iter(), self.smax.beta)
    }

    fn eval(&self, y: &Vector3<f64>) -> ShapeEval {
        smooth_max(&self.components(y), self.smax)
    }
}

// ---------------------------------------------------------------------------
// Power families

/// One regularized quadratic term `u` with its gradient and Hessian.
struct PowerTerm {
    u: f64,
    grad: Vector3<f64>,
    hess: Matrix3<f64>,
}

/// `phi = (sum_k u_k^n)^(1/2n) - 1`, evaluated with every term normalized by
/// the largest one so that high exponents cannot overflow.
fn powered_sum(terms: &[PowerTerm], n: u32) -> Option<ShapeEval> {
    let m = terms.iter().map(|t| t.u).fold(0.0, f64::max);
    if !(m > 0.0 && m.is_finite()) {
        return None;
    }
    let ni = n as i32;
    let nf = n as f64;
    let inv_m = 1.0 / m;
    let mut total = 0.0;
    let mut grad_s = Vector3::zeros();
    let mut hess_s = Matrix3::zeros();
    for t in terms {
        let v = t.u * inv_m;
        let v_nm1 = v.powi(ni - 1);
        total += v_nm1 * v;
        grad_s += t.grad * (nf * v_nm1);
        hess_s += t.hess * (nf * v_nm1);
        if n > 1 {
            hess_s += t.grad * t.grad.transpose() * (nf * (nf - 1.0) * v.powi(ni - 2) * inv_m);
        }
    }
    let scale = 1.0 / (m * total);
    // grad S / S and hess S / S
    grad_s *= scale;
    hess_s *= scale;
    let p = 0.5 / nf;
    let psi = m.sqrt() * total.powf(p);
    let gradient = grad_s * (p * psi);
    let mut hessian = (hess_s + grad_s * grad_s.transpose() * (p - 1.0)) * (p * psi);
    symmetrize(&mut hessian);
    Some(ShapeEval::new(psi - 1.0, gradient, hessian))
}

fn powered_sum_value(us: &[f64], n: u32) -> f64 {
    let m = us.iter().copied().fold(0.0, f64::max);
    if m <= 0.0 {
        return -1.0;
    }
    let total: f64 = us.iter().map(|u| (u / m).powi(n as i32)).sum();
    m.sqrt() * total.powf(0.5 / n as f64) - 1.0
}

fn check_exponent(shape: &'static str, n: u32, eps: f64) -> Result<(), ShapeError> {
    if n < 1 {
        return Err(invalid(shape, "exponent must be at least 1"));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(invalid(shape, format!("reg_eps must be nonnegative, got {eps}")));
    }
    if n > 1 && eps == 0.0 {
        return Err(invalid(shape, "reg_eps must be positive when the exponent exceeds 1"));
    }
    Ok(())
}

/// Default regularization for a given exponent.
pub fn default_reg_eps(n: u32) -> f64 {
    if n > 1 {
        DEFAULT_REG_EPS
    } else {
        0.0
    }
}

/// Superellipsoid with semi-axes `(a, b, c)` and exponent `n`; `n = 1` is an
/// ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuperellipsoidSpec {
    semi_axes: [f64; 3],
    exponent: u32,
    reg_eps: f64,
}

impl SuperellipsoidSpec {
    pub fn new(semi_axes: [f64; 3], exponent: u32, reg_eps: f64) -> Result<Self, ShapeError> {
        const NAME: &str = "superellipsoid";
        for (i, a) in semi_axes.iter().enumerate() {
            if !(*a > 0.0 && a.is_finite()) {
                return Err(invalid(NAME, format!("semi_axes[{i}] must be positive, got {a}")));
            }
        }
        check_exponent(NAME, exponent, reg_eps)?;
        Ok(Self {
            semi_axes,
            exponent,
            reg_eps,
        })
    }

    pub fn sphere(radius: f64) -> Result<Self, ShapeError> {
        Self::new([radius; 3], 1, 0.0)
    }

    pub fn ellipsoid(semi_axes: [f64; 3]) -> Result<Self, ShapeError> {
        Self::new(semi_axes, 1, 0.0)
    }

    pub fn semi_axes(&self) -> [f64; 3] {
        self.semi_axes
    }
    pub fn exponent(&self) -> u32 {
        self.exponent
    }
    pub fn reg_eps(&self) -> f64 {
        self.reg_eps
    }

    fn value(&self, y: &Vector3<f64>) -> f64 {
        let us: [f64; 3] = std::array::from_fn(|i| {
            let t = y[i] / self.semi_axes[i];
            t * t + self.reg_eps
        });
        powered_sum_value(&us, self.exponent)
    }

    fn eval(&self, y: &Vector3<f64>) -> Option<ShapeEval> {
        let terms: [PowerTerm; 3] = std::array::from_fn(|i| {
            let a = self.semi_axes[i];
            let t = y[i] / a;
            let mut grad = Vector3::zeros();
            grad[i] = 2.0 * t / a;
            let mut hess = Matrix3::zeros();
            hess[(i, i)] = 2.0 / (a * a);
            PowerTerm {
                u: t * t + self.reg_eps,
                grad,
                hess,
            }
        });
        powered_sum(&terms, self.exponent)
    }
}

/// Superelliptic cylinder along the body `y1` axis, radius `R` and
/// half-length `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuperellipticCylinderSpec {
    radius: f64,
    half_length: f64,
    exponent: u32,
    reg_eps: f64,
}

impl SuperellipticCylinderSpec {
    pub fn new(radius: f64, half_length: f64, exponent: u32, reg_eps: f64) -> Result<Self, ShapeError> {
        const NAME: &str = "superelliptic_cylinder";
        for (name, v) in [("radius", radius), ("half_length", half_length)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(NAME, format!("{name} must be positive, got {v}")));
            }
        }
        check_exponent(NAME, exponent, reg_eps)?;
        Ok(Self {
            radius,
            half_length,
            exponent,
            reg_eps,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn half_length(&self) -> f64 {
        self.half_length
    }
    pub fn exponent(&self) -> u32 {
        self.exponent
    }
    pub fn reg_eps(&self) -> f64 {
        self.reg_eps
    }

    fn value(&self, y: &Vector3<f64>) -> f64 {
        let t = y[0] / self.half_length;
        let rho2 = (y[1] * y[1] + y[2] * y[2]) / (self.radius * self.radius);
        powered_sum_value(&[t * t + self.reg_eps, rho2 + self.reg_eps], self.exponent)
    }

    fn eval(&self, y: &Vector3<f64>) -> Option<ShapeEval> {
        let h = self.half_length;
        let r2 = self.radius * self.radius;
        let t = y[0] / h;
        let axial = PowerTerm {
            u: t * t + self.reg_eps,
            grad: Vector3::new(2.0 * y[0] / (h * h), 0.0, 0.0),
            hess: Matrix3::from_diagonal(&Vector3::new(2.0 / (h * h), 0.0, 0.0)),
        };
        let radial = PowerTerm {
            u: (y[1] * y[1] + y[2] * y[2]) / r2 + self.reg_eps,
            grad: Vector3::new(0.0, 2.0 * y[1] / r2, 2.0 * y[2] / r2),
            hess: Matrix3::from_diagonal(&Vector3::new(0.0, 2.0 / r2, 2.0 / r2)),
        };
        powered_sum(&[axial, radial], self.exponent)
    }
}

// ---------------------------------------------------------------------------
// Shape model

/// One strictly convex implicit primitive.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeModel {
    Polytope(SmoothPolytopeSpec),
    TruncatedCone(TruncatedConeSpec),
    Superellipsoid(SuperellipsoidSpec),
    SuperellipticCylinder(SuperellipticCylinderSpec),
}

impl From<SmoothPolytopeSpec> for ShapeModel {
    fn from(s: SmoothPolytopeSpec) -> Self {
        Self::Polytope(s)
    }
}
impl From<TruncatedConeSpec> for ShapeModel {
    fn from(s: TruncatedConeSpec) -> Self {
        Self::TruncatedCone(s)
    }
}
impl From<SuperellipsoidSpec> for ShapeModel {
    fn from(s: SuperellipsoidSpec) -> Self {
        Self::Superellipsoid(s)
    }
}
impl From<SuperellipticCylinderSpec> for ShapeModel {
    fn from(s: SuperellipticCylinderSpec) -> Self {
        Self::SuperellipticCylinder(s)
    }
}

impl ShapeModel {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Polytope(_) => "polytope",
            Self::TruncatedCone(_) => "truncated_cone",
            Self::Superellipsoid(_) => "superellipsoid",
            Self::SuperellipticCylinder(_) => "superelliptic_cylinder",
        }
    }

    /// Implicit value only.
    pub fn value(&self, y: &Vector3<f64>) -> f64 {
        match self {
            Self::Polytope(s) => s.value(y),
            Self::TruncatedCone(s) => s.value(y),
            Self::Superellipsoid(s) => s.value(y),
            Self::SuperellipticCylinder(s) => s.value(y),
        }
    }

    /// Value, gradient and Hessian at body-frame point `y`.
    pub fn eval(&self, y: &Vector3<f64>) -> Result<ShapeEval, ShapeError> {
        let out = match self {
            Self::Polytope(s) => Some(s.eval(y)),
            Self::TruncatedCone(s) => Some(s.eval(y)),
            Self::Superellipsoid(s) => s.eval(y),
            Self::SuperellipticCylinder(s) => s.eval(y),
        };
        match out {
            Some(e) if e.is_finite() => Ok(e),
            _ => Err(ShapeError::Domain {
                shape: self.kind(),
                y: [y[0], y[1], y[2]],
            }),
        }
    }

    /// Same body with every length multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, ShapeError> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(invalid(self.kind(), format!("scale factor must be positive, got {factor}")));
        }
        Ok(match self {
            Self::Polytope(s) => SmoothPolytopeSpec::new(
                s.normals.clone(),
                s.offsets.iter().map(|b| b * factor).collect(),
                Some(s.char_length * factor),
                s.smax,
            )?
            .into(),
            Self::TruncatedCone(s) => TruncatedConeSpec::new(
                s.r_bottom * factor,
                s.r_top * factor,
                s.ext_below * factor,
                s.ext_above * factor,
                s.smax,
            )?
            .into(),
            Self::Superellipsoid(s) => {
                SuperellipsoidSpec::new(s.semi_axes.map(|a| a * factor), s.exponent, s.reg_eps)?.into()
            }
            Self::SuperellipticCylinder(s) => SuperellipticCylinderSpec::new(
                s.radius * factor,
                s.half_length * factor,
                s.exponent,
                s.reg_eps,
            )?
            .into(),
        })
    }

    /// Sharpness knob of the family: `beta` for blended shapes, `n` for
    /// power shapes.
    pub fn sharpness(&self) -> f64 {
        match self {
            Self::Polytope(s) => s.smax.beta,
            Self::TruncatedCone(s) => s.smax.beta,
            Self::Superellipsoid(s) => s.exponent as f64,
            Self::SuperellipticCylinder(s) => s.exponent as f64,
        }
    }

    /// A smoother instance of the same body: `beta` halved (floor 5) or `n`
    /// halved (floor 1). `None` when already at the floor.
    pub fn smoothed(&self) -> Option<Self> {
        const BETA_FLOOR: f64 = 5.0;
        match self {
            Self::Polytope(s) if s.smax.beta > BETA_FLOOR => {
                let mut t = s.clone();
                t.smax.beta = (s.smax.beta * 0.5).max(BETA_FLOOR);
                Some(t.into())
            }
            Self::TruncatedCone(s) if s.smax.beta > BETA_FLOOR => {
                let mut t = *s;
                t.smax.beta = (s.smax.beta * 0.5).max(BETA_FLOOR);
                Some(t.into())
            }
            Self::Superellipsoid(s) if s.exponent > 1 => {
                let mut t = *s;
                t.exponent = (s.exponent / 2).max(1);
                Some(t.into())
            }
            Self::SuperellipticCylinder(s) if s.exponent > 1 => {
                let mut t = *s;
                t.exponent = (s.exponent / 2).max(1);
                Some(t.into())
            }
            _ => None,
        }
    }

    /// Whether the solver should use continuation for this body by default.
    pub fn is_sharp(&self) -> bool {
        match self {
            Self::Polytope(s) => s.smax.beta >= 30.0,
            Self::TruncatedCone(s) => s.smax.beta >= 30.0,
            Self::Superellipsoid(s) => s.exponent >= 4,
            Self::SuperellipticCylinder(s) => s.exponent >= 4,
        }
    }

    /// A rough length scale of the body, used to seed ray brackets.
    fn length_hint(&self) -> f64 {
        match self {
            Self::Polytope(s) => s.char_length,
            Self::TruncatedCone(s) => s.r_bottom.max(s.r_top).max(s.ext_below).max(s.ext_above),
            Self::Superellipsoid(s) => s.semi_axes.iter().copied().fold(0.0, f64::max),
            Self::SuperellipticCylinder(s) => s.radius.max(s.half_length),
        }
    }

    pub fn to_description(&self) -> ShapeDescription {
        match self {
            Self::Polytope(s) => ShapeDescription {
                geometry: Geometry::Polytope(PolytopeParams {
                    normals: s.normals.iter().map(|n| [n.x, n.y, n.z]).collect(),
                    offsets: s.offsets.clone(),
                    char_length: Some(s.char_length),
                }),
                beta: Some(s.smax.beta),
                n: None,
                eps: None,
            },
            Self::TruncatedCone(s) => ShapeDescription {
                geometry: Geometry::TruncatedCone(TruncatedConeParams {
                    r_bottom: s.r_bottom,
                    r_top: s.r_top,
                    ext_below: s.ext_below,
                    ext_above: s.ext_above,
                }),
                beta: Some(s.smax.beta),
                n: None,
                eps: None,
            },
            Self::Superellipsoid(s) => ShapeDescription {
                geometry: Geometry::Superellipsoid(SuperellipsoidParams {
                    semi_axes: s.semi_axes,
                }),
                beta: None,
                n: Some(s.exponent),
                eps: Some(s.reg_eps),
            },
            Self::SuperellipticCylinder(s) => ShapeDescription {
                geometry: Geometry::SuperellipticCylinder(SuperellipticCylinderParams {
                    radius: s.radius,
                    half_length: s.half_length,
                }),
                beta: None,
                n: Some(s.exponent),
                eps: Some(s.reg_eps),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// JSON description

/// Serializable shape description:
/// `{"kind": ..., "params": {...}, "beta": .., "n": .., "eps": ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDescription {
    #[serde(flatten)]
    pub geometry: Geometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Geometry {
    Polytope(PolytopeParams),
    TruncatedCone(TruncatedConeParams),
    Superellipsoid(SuperellipsoidParams),
    SuperellipticCylinder(SuperellipticCylinderParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolytopeParams {
    pub normals: Vec<[f64; 3]>,
    pub offsets: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncatedConeParams {
    pub r_bottom: f64,
    pub r_top: f64,
    pub ext_below: f64,
    pub ext_above: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperellipsoidParams {
    pub semi_axes: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperellipticCylinderParams {
    pub radius: f64,
    pub half_length: f64,
}

impl TryFrom<&ShapeDescription> for ShapeModel {
    type Error = ShapeError;

    fn try_from(d: &ShapeDescription) -> Result<Self, ShapeError> {
        let smax = SmoothMaxParams::new(d.beta.unwrap_or(DEFAULT_BETA))?;
        let n = d.n.unwrap_or(DEFAULT_EXPONENT);
        let eps = d.eps.unwrap_or_else(|| default_reg_eps(n));
        Ok(match &d.geometry {
            Geometry::Polytope(p) => SmoothPolytopeSpec::new(
                p.normals.iter().map(|a| Vector3::from(*a)).collect(),
                p.offsets.clone(),
                p.char_length,
                smax,
            )?
            .into(),
            Geometry::TruncatedCone(p) => {
                TruncatedConeSpec::new(p.r_bottom, p.r_top, p.ext_below, p.ext_above, smax)?.into()
            }
            Geometry::Superellipsoid(p) => SuperellipsoidSpec::new(p.semi_axes, n, eps)?.into(),
            Geometry::SuperellipticCylinder(p) => {
                SuperellipticCylinderSpec::new(p.radius, p.half_length, n, eps)?.into()
            }
        })
    }
}

impl TryFrom<ShapeDescription> for ShapeModel {
    type Error = ShapeError;

    fn try_from(d: ShapeDescription) -> Result<Self, ShapeError> {
        Self::try_from(&d)
    }
}

// ---------------------------------------------------------------------------
// Bounding spheres

/// Inscribed and circumscribed sphere radii about the body-frame origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingRadii {
    pub r_in: f64,
    pub r_out: f64,
}

impl BoundingRadii {
    /// Geometric mean of the two radii.
    pub fn mean(&self) -> f64 {
        (self.r_in * self.r_out).sqrt()
    }
}

/// Quasi-uniform unit directions on the sphere (Fibonacci lattice).
pub fn fibonacci_directions(count: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let theta = golden * i as f64;
            Vector3::new(rho * theta.cos(), rho * theta.sin(), z)
        })
        .collect()
}

/// Distance from the origin to the zero level set along unit direction `dir`.
pub fn ray_surface_distance(shape: &ShapeModel, dir: &Vector3<f64>) -> Result<f64, ShapeError> {
    let fail = || ShapeError::BracketFailure {
        shape: shape.kind(),
        dir: [dir[0], dir[1], dir[2]],
    };
    let mut lo = 0.0;
    let mut hi = shape.length_hint();
    let mut expansions = 0;
    while shape.value(&(dir * hi)) <= 0.0 {
        lo = hi;
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 || !hi.is_finite() {
            return Err(fail());
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = shape.value(&(dir * mid));
        if !v.is_finite() {
            return Err(fail());
        }
        if v <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Inner and outer bounding radii from ray sampling.
///
/// Directions are the Fibonacci lattice plus the 14 axis and diagonal
/// directions. The sampled extremes are padded by `safety`:
/// `r_in = safety * min t`, `r_out = max t / safety`.
pub fn bounding_radii(
    shape: &ShapeModel,
    n_dirs: usize,
    safety: f64,
) -> Result<BoundingRadii, ShapeError> {
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(invalid(shape.kind(), format!("safety must lie in (0, 1], got {safety}")));
    }
    let center = shape.value(&Vector3::zeros());
    if !(center < 0.0) {
        return Err(ShapeError::NotContainingOrigin {
            shape: shape.kind(),
            value: center,
        });
    }
    let mut dirs = fibonacci_directions(n_dirs.max(1));
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            let mut d = Vector3::zeros();
            d[axis] = sign;
            dirs.push(d);
        }
    }
    for sx in [1.0, -1.0] {
        for sy in [1.0, -1.0] {
            for sz in [1.0, -1.0] {
                dirs.push(Vector3::new(sx, sy, sz).normalize());
            }
        }
    }
    let mut t_min = f64::INFINITY;
    let mut t_max = 0.0_f64;
    for d in &dirs {
        let t = ray_surface_distance(shape, d)?;
        t_min = t_min.min(t);
        t_max = t_max.max(t);
    }
    Ok(BoundingRadii {
        r_in: safety * t_min,
        r_out: t_max / safety,
    })
}

/// [`bounding_radii`] with the default direction count and safety factor.
pub fn default_bounding_radii(shape: &ShapeModel) -> Result<BoundingRadii, ShapeError> {
    bounding_radii(shape, DEFAULT_RAY_COUNT, DEFAULT_RADII_SAFETY)
}
