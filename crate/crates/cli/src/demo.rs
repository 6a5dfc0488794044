//! Free rigid bodies with penalty contact, integrated by semi-implicit Euler.
//!
//! Broad phase tests every pair's outer bounding spheres; surviving pairs
//! are solved warm-started from their previous contact solution and
//! receive the equal-and-opposite penalty wrenches.

use idcol::detector::{solve, ContactPair, SolverConfig, Unknowns};
use idcol::se3::{rotation_exp, Pose, PoseDescription};
use idcol::sensitivity::{contact_kinematics, contact_wrench};
use idcol::shapes::{
    default_bounding_radii, BoundingRadii, ShapeModel, SmoothMaxParams,
    SmoothPolytopeSpec, SuperellipsoidSpec, SuperellipticCylinderSpec, TruncatedConeSpec,
    DEFAULT_BETA, DEFAULT_EXPONENT, DEFAULT_REG_EPS,
};
use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::scene::{body_inertia, BodySpec, ContactParams, NamedShape, Scene, SceneFile, Velocity};

/// Kinetic energy growth treated as integrator blow-up.
pub const BLOWUP_RATIO: f64 = 1e3;

#[derive(Debug, Clone, Copy)]
pub struct DemoConfig {
    pub dt: f64,
    pub duration: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            duration: 5.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalBody {
    pub name: String,
    pub pose: PoseDescription,
    pub linear_velocity: [f64; 3],
    pub angular_velocity: [f64; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoReport {
    pub steps: usize,
    pub time: f64,
    pub pairs: usize,
    pub narrow_phase_queries: usize,
    pub contact_steps: usize,
    pub solver_failures: usize,
    /// `|P(t) - P(0)| / sum_i m_i |v_i(0)|`, maximised over the run.
    pub momentum_drift: f64,
    /// Largest `|R_a f_a + R_b f_b|` over all contact evaluations.
    pub third_law_residual: f64,
    pub max_energy_ratio: f64,
    pub blew_up: bool,
    pub bodies: Vec<FinalBody>,
}

/// One trajectory sample for one body.
#[derive(Debug, Clone)]
pub struct TrajectoryRow<'a> {
    pub time: f64,
    pub body: &'a str,
    pub translation: Vector3<f64>,
    pub rotation_vector: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
    pub linear_velocity: Vector3<f64>,
    pub contacts: usize,
}

struct Body {
    name: String,
    rotation: Matrix3<f64>,
    position: Vector3<f64>,
    velocity: Vector3<f64>,
    omega: Vector3<f64>,
    mass: f64,
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
    r_out: f64,
}

impl Body {
    fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position).expect("rotation kept orthonormal")
    }

    fn kinetic_energy(&self) -> f64 {
        0.5 * self.mass * self.velocity.norm_squared()
            + 0.5 * self.omega.dot(&(self.inertia * self.omega))
    }
}

struct PairState {
    a: usize,
    b: usize,
    pair: ContactPair,
    warm: Option<Unknowns>,
}

pub fn run_demo(
    scene: &Scene,
    config: &DemoConfig,
    mut sink: impl FnMut(&TrajectoryRow),
) -> Result<DemoReport, String> {
    if !(config.dt > 0.0) || !(config.duration >= 0.0) {
        return Err("dt must be positive and duration nonnegative".into());
    }
    if scene.file.bodies.is_empty() {
        return Err("the demo needs at least one body".into());
    }
    let contact = scene.file.contact;
    let solver: SolverConfig = scene.file.solver;

    let mut radii: Vec<BoundingRadii> = Vec::new();
    let mut shapes: Vec<&ShapeModel> = Vec::new();
    for spec in &scene.file.bodies {
        let shape = scene.resolve_shape(&spec.name).map_err(|e| e.to_string())?;
        radii.push(default_bounding_radii(shape).map_err(|e| e.to_string())?);
        shapes.push(shape);
    }
    let mut bodies: Vec<Body> = scene
        .file
        .bodies
        .iter()
        .zip(&radii)
        .map(|(spec, r)| make_body(scene, spec, r))
        .collect();

    let mut pairs = Vec::new();
    for a in 0..bodies.len() {
        for b in (a + 1)..bodies.len() {
            pairs.push(PairState {
                a,
                b,
                pair: ContactPair::with_radii(shapes[a].clone(), shapes[b].clone(), radii[a], radii[b]),
                warm: None,
            });
        }
    }

    let momentum = |bodies: &[Body]| bodies.iter().map(|b| b.velocity * b.mass).sum::<Vector3<f64>>();
    let p0 = momentum(&bodies);
    let momentum_scale = bodies
        .iter()
        .map(|b| b.mass * b.velocity.norm())
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let energy = |bodies: &[Body]| bodies.iter().map(Body::kinetic_energy).sum::<f64>();
    let e0 = energy(&bodies).max(1e-12);

    let steps = (config.duration / config.dt).round() as usize;
    let mut report = DemoReport {
        steps: 0,
        time: 0.0,
        pairs: pairs.len(),
        narrow_phase_queries: 0,
        contact_steps: 0,
        solver_failures: 0,
        momentum_drift: 0.0,
        third_law_residual: 0.0,
        max_energy_ratio: 1.0,
        blew_up: false,
        bodies: Vec::new(),
    };
    let mut contacts = vec![0usize; bodies.len()];
    emit(&bodies, &contacts, 0.0, &mut sink);

    for step in 1..=steps {
        let n = bodies.len();
        let mut forces = vec![Vector3::zeros(); n];
        let mut torques = vec![Vector3::zeros(); n];
        contacts.iter_mut().for_each(|c| *c = 0);

        for ps in pairs.iter_mut() {
            let (ba, bb) = (&bodies[ps.a], &bodies[ps.b]);
            if (ba.position - bb.position).norm() > ba.r_out + bb.r_out {
                ps.warm = None;
                continue;
            }
            report.narrow_phase_queries += 1;
            let rel = ba.pose().inverse().compose(&bb.pose());
            let sol = match solve(&ps.pair, &rel, &solver, ps.warm.as_ref()) {
                Ok(s) if s.converged => s,
                other => {
                    log::warn!(
                        "narrow phase failed for {} / {} at t = {:.4}: {:?}, pose {:?}",
                        ba.name,
                        bb.name,
                        step as f64 * config.dt,
                        other.map(|s| (s.failure, s.residual_norm, s.alpha)),
                        PoseDescription::from(&rel)
                    );
                    report.solver_failures += 1;
                    ps.warm = None;
                    continue;
                }
            };
            ps.warm = Some(sol.unknowns);
            let kin = contact_kinematics(&sol, &rel, &ps.pair).map_err(|e| e.to_string())?;
            let w = contact_wrench(&kin, &sol, &rel, contact.k, contact.p).map_err(|e| e.to_string())?;
            if w.fn_ <= 0.0 {
                continue;
            }
            report.contact_steps += 1;
            contacts[ps.a] += 1;
            contacts[ps.b] += 1;
            let fa = ba.rotation * Vector3::new(w.f1[3], w.f1[4], w.f1[5]);
            let fb = bb.rotation * Vector3::new(w.f2[3], w.f2[4], w.f2[5]);
            report.third_law_residual = report.third_law_residual.max((fa + fb).norm());
            forces[ps.a] += fa;
            forces[ps.b] += fb;
            torques[ps.a] += Vector3::new(w.f1[0], w.f1[1], w.f1[2]);
            torques[ps.b] += Vector3::new(w.f2[0], w.f2[1], w.f2[2]);
        }

        for (i, body) in bodies.iter_mut().enumerate() {
            body.velocity += forces[i] * (config.dt / body.mass);
            let gyro = body.omega.cross(&(body.inertia * body.omega));
            body.omega += body.inertia_inv * (torques[i] - gyro) * config.dt;
            body.position += body.velocity * config.dt;
            body.rotation *= rotation_exp(&(body.omega * config.dt));
            if step % 100 == 0 {
                body.rotation = body.pose().renormalized().rotation().to_owned();
            }
        }

        let t = step as f64 * config.dt;
        report.steps = step;
        report.time = t;
        report.momentum_drift = report
            .momentum_drift
            .max((momentum(&bodies) - p0).norm() / momentum_scale);
        let e = energy(&bodies);
        report.max_energy_ratio = report.max_energy_ratio.max(e / e0);
        emit(&bodies, &contacts, t, &mut sink);
        if !e.is_finite() || e > BLOWUP_RATIO * e0 {
            report.blew_up = true;
            break;
        }
    }

    report.bodies = bodies
        .iter()
        .map(|b| FinalBody {
            name: b.name.clone(),
            pose: PoseDescription::from(&b.pose()),
            linear_velocity: b.velocity.into(),
            angular_velocity: b.omega.into(),
        })
        .collect();
    Ok(report)
}

fn make_body(scene: &Scene, spec: &BodySpec, radii: &BoundingRadii) -> Body {
    let pose = scene.body_pose(spec);
    let inertia = body_inertia(spec, radii.mean());
    Body {
        name: spec.name.clone(),
        rotation: *pose.rotation(),
        position: *pose.translation(),
        velocity: Vector3::from(spec.velocity.linear),
        omega: Vector3::from(spec.velocity.angular),
        mass: spec.mass,
        inertia,
        inertia_inv: inertia.try_inverse().unwrap_or_else(Matrix3::zeros),
        r_out: radii.r_out,
    }
}

fn emit(bodies: &[Body], contacts: &[usize], time: f64, sink: &mut impl FnMut(&TrajectoryRow)) {
    for (b, &c) in bodies.iter().zip(contacts) {
        sink(&TrajectoryRow {
            time,
            body: &b.name,
            translation: b.position,
            rotation_vector: b.pose().rotation_vector(),
            angular_velocity: b.omega,
            linear_velocity: b.velocity,
            contacts: c,
        });
    }
}

/// Ten bodies, one of each shape in the catalog, placed on a sphere of
/// radius 2.5 and thrown toward the origin at unit speed. No gravity.
pub fn zoo_scene() -> SceneFile {
    let smax = SmoothMaxParams::new(DEFAULT_BETA).expect("valid beta");
    let n = DEFAULT_EXPONENT;
    let eps = DEFAULT_REG_EPS;
    let models: Vec<(&str, ShapeModel)> = vec![
        ("cone", TruncatedConeSpec::new(0.3, 0.0, 0.25, 0.35, smax).unwrap().into()),
        ("cube", SmoothPolytopeSpec::cuboid([0.25; 3], smax).unwrap().into()),
        ("cuboid", SmoothPolytopeSpec::cuboid([0.35, 0.2, 0.15], smax).unwrap().into()),
        ("cylinder", SuperellipticCylinderSpec::new(0.2, 0.3, n, eps).unwrap().into()),
        ("ellipsoid", SuperellipsoidSpec::ellipsoid([0.35, 0.25, 0.2]).unwrap().into()),
        ("frustum", TruncatedConeSpec::new(0.3, 0.15, 0.2, 0.2, smax).unwrap().into()),
        ("polytope", octahedron(smax)),
        ("pyramid", SmoothPolytopeSpec::square_pyramid(0.25, 0.45, smax).unwrap().into()),
        ("sphere", SuperellipsoidSpec::sphere(0.25).unwrap().into()),
        ("tetrahedron", SmoothPolytopeSpec::tetrahedron(0.12, smax).unwrap().into()),
    ];
    let count = models.len();
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut shapes = Vec::new();
    let mut bodies = Vec::new();
    for (i, (name, model)) in models.into_iter().enumerate() {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
        let ring = (1.0 - z * z).sqrt();
        let dir = Vector3::new(ring * (golden * i as f64).cos(), ring * (golden * i as f64).sin(), z);
        let position = dir * 2.5;
        let rotation = rotation_exp(&Vector3::new(0.3 * i as f64, -0.2 * i as f64, 0.1 * i as f64));
        // Slightly off-centre aim so the pile-up is not perfectly symmetric.
        let aim = Vector3::new(0.05 * (i as f64).sin(), 0.05 * (i as f64).cos(), 0.0);
        let velocity = (aim - position).normalize();
        shapes.push(NamedShape {
            name: name.to_string(),
            shape: model.to_description(),
        });
        bodies.push(BodySpec {
            name: name.to_string(),
            shape: name.to_string(),
            pose: PoseDescription::from(&Pose::new(rotation, position).unwrap()),
            mass: 1.0,
            inertia: None,
            velocity: Velocity {
                linear: velocity.into(),
                angular: [0.0; 3],
            },
        });
    }
    SceneFile {
        shapes,
        bodies,
        contact: ContactParams::default(),
        solver: SolverConfig { k_max: 100, ..SolverConfig::default() },
    }
}

fn octahedron(smax: SmoothMaxParams) -> ShapeModel {
    let mut normals = Vec::new();
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                normals.push(Vector3::new(sx, sy, sz));
            }
        }
    }
    // Unit normals (1, 1, 1)/sqrt(3) at inradius 0.25.
    let offsets = vec![0.25 * 3f64.sqrt(); normals.len()];
    SmoothPolytopeSpec::new(normals, offsets, None, smax).unwrap().into()
}
