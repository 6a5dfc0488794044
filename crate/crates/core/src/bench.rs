//! Deterministic SE(3) sweeps and gradient audits.
//!
//! The relative pose follows a quasi-periodic trajectory whose six
//! frequencies are square roots of distinct primes, so the sweep never
//! repeats and asymptotically visits every relative orientation and a slab
//! of relative positions around the nominal touching distance.

use std::time::Instant;

use nalgebra::{DMatrix, Dim, Dyn, Matrix, RawStorage, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::detector::{solve, ContactPair, Solution, SolverConfig, Unknowns};
use crate::se3::{rotation_exp, GeometricJacobian, Pose};
use crate::sensitivity::{
    contact_kinematics, contact_wrench, kinematics_sensitivity, solution_sensitivity,
    wrench_sensitivity,
};

/// Queries solved before timing starts.
pub const WARMUP_QUERIES: usize = 100;

/// Largest motion of a body point between successive poses, as a fraction
/// of the larger outer radius.
pub const STEP_FRACTION: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub pair: ContactPair,
    pub n_poses: usize,
    pub center_distance: f64,
    pub amplitudes: Vector3<f64>,
    /// Three translational then three rotational frequencies.
    pub frequencies: [f64; 6],
    /// Trajectory parameter increment between poses.
    pub step: f64,
    pub warm_start: bool,
}

impl SweepSpec {
    /// Sweep centred on the sum of the mean bounding radii with amplitudes
    /// of 60% of that distance, so both separated and penetrating poses
    /// occur.
    pub fn for_pair(pair: ContactPair, n_poses: usize, warm_start: bool) -> Self {
        let center_distance = pair.radii1().mean() + pair.radii2().mean();
        let amplitudes = Vector3::repeat(0.6 * center_distance);
        let frequencies = [
            1.0,
            2f64.sqrt(),
            3f64.sqrt(),
            5f64.sqrt(),
            7f64.sqrt(),
            11f64.sqrt(),
        ];
        let r_out = pair.radii1().r_out.max(pair.radii2().r_out);
        let linear_speed = amplitudes
            .iter()
            .zip(&frequencies[..3])
            .map(|(a, w)| (a * w).powi(2))
            .sum::<f64>()
            .sqrt();
        let angular_speed = std::f64::consts::PI
            * frequencies[3..].iter().map(|w| w * w).sum::<f64>().sqrt();
        let step = STEP_FRACTION * r_out / (linear_speed + r_out * angular_speed);
        Self {
            pair,
            n_poses,
            center_distance,
            amplitudes,
            frequencies,
            step,
            warm_start,
        }
    }
}

pub fn pose_at(spec: &SweepSpec, t: usize) -> Pose {
    let tau = t as f64 * spec.step;
    let w = &spec.frequencies;
    let a = &spec.amplitudes;
    let r = Vector3::new(
        spec.center_distance + a.x * (w[0] * tau).sin(),
        a.y * (w[1] * tau).sin(),
        a.z * (w[2] * tau).sin(),
    );
    let pi = std::f64::consts::PI;
    let theta = Vector3::new(
        pi * (w[3] * tau).sin(),
        pi * (w[4] * tau).sin(),
        pi * (w[5] * tau).sin(),
    );
    Pose::new(rotation_exp(&theta), r).expect("exponential map yields a rotation")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub pose_index: usize,
    pub alpha: f64,
    pub converged: bool,
    pub iterations: usize,
    pub runtime_ns: u64,
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub mean: f64,
    pub median: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub mean: f64,
    pub max: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub n_poses: usize,
    pub n_converged: usize,
    pub n_failed: usize,
    pub runtime_ns: RuntimeStats,
    pub iterations: IterationStats,
    pub alpha_range: Option<(f64, f64)>,
    pub failure_poses: Vec<usize>,
    #[serde(skip)]
    pub records: Vec<SweepRecord>,
}

impl SweepReport {
    pub fn convergence_rate(&self) -> f64 {
        if self.n_poses == 0 {
            1.0
        } else {
            self.n_converged as f64 / self.n_poses as f64
        }
    }

    fn from_records(records: Vec<SweepRecord>) -> Self {
        let n_poses = records.len();
        if n_poses == 0 {
            return Self::default();
        }
        let n_converged = records.iter().filter(|r| r.converged).count();
        let failure_poses = records
            .iter()
            .filter(|r| !r.converged)
            .map(|r| r.pose_index)
            .collect();
        let mut times: Vec<u64> = records.iter().map(|r| r.runtime_ns).collect();
        times.sort_unstable();
        let quantile = |q: f64| times[((n_poses - 1) as f64 * q).round() as usize] as f64;
        let runtime_ns = RuntimeStats {
            mean: times.iter().map(|&t| t as f64).sum::<f64>() / n_poses as f64,
            median: quantile(0.5),
            p99: quantile(0.99),
        };
        let iterations = IterationStats {
            mean: records.iter().map(|r| r.iterations as f64).sum::<f64>() / n_poses as f64,
            max: records.iter().map(|r| r.iterations).max().unwrap_or(0),
        };
        let alpha_range = records.iter().filter(|r| r.converged).fold(None, |acc, r| {
            let (lo, hi) = acc.unwrap_or((r.alpha, r.alpha));
            Some((lo.min(r.alpha), hi.max(r.alpha)))
        });
        Self {
            n_poses,
            n_converged,
            n_failed: n_poses - n_converged,
            runtime_ns,
            iterations,
            alpha_range,
            failure_poses,
            records,
        }
    }
}

fn solve_record(
    spec: &SweepSpec,
    config: &SolverConfig,
    t: usize,
    warm: Option<&Unknowns>,
) -> (SweepRecord, Option<Solution>) {
    let pose = pose_at(spec, t);
    let start = Instant::now();
    let result = solve(&spec.pair, &pose, config, warm);
    let runtime_ns = start.elapsed().as_nanos() as u64;
    match result {
        Ok(sol) => {
            let record = SweepRecord {
                pose_index: t,
                alpha: sol.alpha,
                converged: sol.converged,
                iterations: sol.iterations,
                runtime_ns,
                gap: (1.0 - 1.0 / sol.alpha) * pose.translation().norm(),
            };
            (record, Some(sol))
        }
        Err(_) => (
            SweepRecord {
                pose_index: t,
                alpha: f64::NAN,
                converged: false,
                iterations: 0,
                runtime_ns,
                gap: f64::NAN,
            },
            None,
        ),
    }
}

fn sweep_range(
    spec: &SweepSpec,
    config: &SolverConfig,
    range: std::ops::Range<usize>,
) -> Vec<SweepRecord> {
    let mut records = Vec::with_capacity(range.len());
    let mut previous: Option<Unknowns> = None;
    for t in range {
        let warm = if spec.warm_start { previous.as_ref() } else { None };
        let (record, sol) = solve_record(spec, config, t, warm);
        previous = sol.filter(|s| s.converged).map(|s| s.unknowns);
        records.push(record);
    }
    records
}

fn warm_up(spec: &SweepSpec, config: &SolverConfig) {
    sweep_range(spec, config, 0..WARMUP_QUERIES.min(spec.n_poses));
}

/// Solves every pose of the sweep in order, warm-starting from the previous
/// converged solution when requested.
pub fn run_sweep(spec: &SweepSpec, config: &SolverConfig) -> SweepReport {
    warm_up(spec, config);
    SweepReport::from_records(sweep_range(spec, config, 0..spec.n_poses))
}

/// Cold sweep sharded over `jobs` threads. Warm sweeps are inherently
/// sequential and fall back to [`run_sweep`].
pub fn run_sweep_parallel(spec: &SweepSpec, config: &SolverConfig, jobs: usize) -> SweepReport {
    if spec.warm_start || jobs <= 1 || spec.n_poses < 2 * jobs {
        return run_sweep(spec, config);
    }
    warm_up(spec, config);
    let chunk = spec.n_poses.div_ceil(jobs);
    let records = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let range = (j * chunk)..((j + 1) * chunk).min(spec.n_poses);
                scope.spawn(move || sweep_range(spec, config, range))
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    SweepReport::from_records(records)
}

// ---------------------------------------------------------------------------
// Gradient audit

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub n_samples: usize,
    /// Central-difference step in geometrically scaled units.
    pub fd_step: f64,
    pub stiffness: f64,
    pub exponent: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            n_samples: 20,
            fd_step: 1e-6,
            stiffness: 1e4,
            exponent: 1.5,
        }
    }
}

/// Worst relative error per derivative kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub samples: usize,
    pub wrench_samples: usize,
    pub dz_dq: f64,
    pub dgap_dq: f64,
    pub dnormal_dq: f64,
    pub dp1_dq: f64,
    pub dp2_dq: f64,
    pub df1_dq: f64,
    pub df2_dq: f64,
}

impl AuditReport {
    pub fn max_error(&self) -> f64 {
        [
            self.dz_dq,
            self.dgap_dq,
            self.dnormal_dq,
            self.dp1_dq,
            self.dp2_dq,
            self.df1_dq,
            self.df2_dq,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Relative error `max|A - F| / max(max|F|, 1e-6)`.
pub fn relative_error(analytic: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let diff = (analytic - reference).amax();
    diff / reference.amax().max(1e-6)
}

/// Every quantity the audit differentiates, stacked into one vector:
/// `x, alpha, lambda1, lambda2, gap, normal, p1, p2, F1, F2`.
fn stacked_quantities(
    pair: &ContactPair,
    pose: &Pose,
    config: &SolverConfig,
    warm: Option<&Unknowns>,
    audit: &AuditConfig,
) -> Option<(Solution, Vec<f64>)> {
    let sol = solve(pair, pose, config, warm).ok()?;
    if !sol.converged {
        return None;
    }
    let kin = contact_kinematics(&sol, pose, pair).ok()?;
    let w = contact_wrench(&kin, &sol, pose, audit.stiffness, audit.exponent).ok()?;
    let z = sol.unknowns;
    let mut v = vec![z.x.x, z.x.y, z.x.z, sol.alpha, z.lambda1, z.lambda2, kin.gap];
    v.extend(kin.normal.iter());
    v.extend(kin.p1.iter());
    v.extend(kin.p2.iter());
    v.extend(w.f1.iter());
    v.extend(w.f2.iter());
    Some((sol, v))
}

const ROWS_Z: std::ops::Range<usize> = 0..6;
const ROWS_GAP: std::ops::Range<usize> = 6..7;
const ROWS_NORMAL: std::ops::Range<usize> = 7..10;
const ROWS_P1: std::ops::Range<usize> = 10..13;
const ROWS_P2: std::ops::Range<usize> = 13..16;
const ROWS_F1: std::ops::Range<usize> = 16..22;
const ROWS_F2: std::ops::Range<usize> = 22..28;

fn put_rows<R, S>(dst: &mut DMatrix<f64>, rows: std::ops::Range<usize>, src: &Matrix<f64, R, Dyn, S>)
where
    R: Dim,
    S: RawStorage<f64, R, Dyn>,
{
    for (i, row) in rows.enumerate() {
        for j in 0..src.ncols() {
            dst[(row, j)] = src[(i, j)];
        }
    }
}

/// Analytic and central-difference derivatives of every exposed quantity at
/// one pose, for the free-body Jacobian `g(q) = g0 exp(q)`.
pub struct DerivativeComparison {
    pub analytic: DMatrix<f64>,
    pub finite_difference: DMatrix<f64>,
    pub gap: f64,
}

pub fn compare_derivatives(
    pair: &ContactPair,
    pose: &Pose,
    config: &SolverConfig,
    audit: &AuditConfig,
) -> Option<DerivativeComparison> {
    let jac = GeometricJacobian::identity();
    let (sol, _) = stacked_quantities(pair, pose, config, None, audit)?;
    let bundle = solution_sensitivity(&sol, pair, pose, &jac).ok()?;
    let kin = contact_kinematics(&sol, pose, pair).ok()?;
    let ks = kinematics_sensitivity(&bundle, &kin, &sol, pose, pair, &jac).ok()?;
    let w = contact_wrench(&kin, &sol, pose, audit.stiffness, audit.exponent).ok()?;
    let ws = wrench_sensitivity(
        &bundle,
        &ks,
        &kin,
        &w,
        &sol,
        pose,
        &jac,
        audit.stiffness,
        audit.exponent,
    )
    .ok()?;

    let mut analytic = DMatrix::zeros(28, 6);
    put_rows(&mut analytic, ROWS_Z, &bundle.dz_dq);
    put_rows(&mut analytic, ROWS_GAP, &ks.dgap_dq);
    put_rows(&mut analytic, ROWS_NORMAL, &ks.dnormal_dq);
    put_rows(&mut analytic, ROWS_P1, &ks.dp1_dq);
    put_rows(&mut analytic, ROWS_P2, &ks.dp2_dq);
    put_rows(&mut analytic, ROWS_F1, &ws.df1_dq);
    put_rows(&mut analytic, ROWS_F2, &ws.df2_dq);

    let length = pair.radii1().r_out.max(pair.radii2().r_out);
    let tight = SolverConfig {
        tol: 1e-13,
        ..*config
    };
    let mut fd = DMatrix::zeros(28, 6);
    for j in 0..6 {
        let h = if j < 3 { audit.fd_step } else { audit.fd_step * length };
        let mut twist = Vector6::zeros();
        twist[j] = h;
        let side = |sign: f64| {
            let p = pose.compose(&Pose::exp(&(twist * sign)));
            stacked_quantities(pair, &p, &tight, Some(&sol.unknowns), audit)
                .or_else(|| stacked_quantities(pair, &p, config, Some(&sol.unknowns), audit))
                .map(|(_, v)| v)
        };
        let (plus, minus) = (side(1.0)?, side(-1.0)?);
        for i in 0..28 {
            fd[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Some(DerivativeComparison {
        analytic,
        finite_difference: fd,
        gap: kin.gap,
    })
}

/// Compares every sensitivity with central differences of full re-solves
/// at `n_samples` converged poses spread over a sweep of the pair.
pub fn gradient_audit(pair: &ContactPair, config: &SolverConfig, audit: &AuditConfig) -> AuditReport {
    let spec = SweepSpec::for_pair(pair.clone(), 0, false);
    let stride = 997;
    let mut report = AuditReport::default();
    let length = pair.radii1().r_out.max(pair.radii2().r_out);
    // Pose 0 is axis-aligned, a non-generic configuration; start one stride in.
    let mut t = stride;
    let mut tried = 0;
    while report.samples < audit.n_samples && tried < 50 * audit.n_samples.max(1) {
        let pose = pose_at(&spec, t);
        t += stride;
        tried += 1;
        let Some(cmp) = compare_derivatives(pair, &pose, config, audit) else { continue };
        report.samples += 1;
        let err = |rows: std::ops::Range<usize>| {
            relative_error(
                &cmp.analytic.rows(rows.start, rows.len()).into_owned(),
                &cmp.finite_difference.rows(rows.start, rows.len()).into_owned(),
            )
        };
        let up = |slot: &mut f64, e: f64| *slot = slot.max(e);
        up(&mut report.dz_dq, err(ROWS_Z));
        up(&mut report.dgap_dq, err(ROWS_GAP));
        up(&mut report.dnormal_dq, err(ROWS_NORMAL));
        up(&mut report.dp1_dq, err(ROWS_P1));
        up(&mut report.dp2_dq, err(ROWS_P2));
        // The penalty force has a kink at zero penetration; only audit it
        // where the stencil stays on one side.
        if cmp.gap < -1e3 * audit.fd_step * length {
            report.wrench_samples += 1;
            up(&mut report.df1_dq, err(ROWS_F1));
            up(&mut report.df2_dq, err(ROWS_F2));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{ShapeModel, SuperellipsoidSpec};

    fn spheres() -> ContactPair {
        let s: ShapeModel = SuperellipsoidSpec::sphere(1.0).unwrap().into();
        ContactPair::new(s.clone(), s).unwrap()
    }

    #[test]
    fn first_pose_is_on_axis() {
        let spec = SweepSpec::for_pair(spheres(), 10, true);
        let p = pose_at(&spec, 0);
        assert_eq!(*p.translation(), Vector3::new(spec.center_distance, 0.0, 0.0));
        assert_eq!(*p.rotation(), nalgebra::Matrix3::identity());
    }

    #[test]
    fn poses_are_reproducible() {
        let spec = SweepSpec::for_pair(spheres(), 10, true);
        assert_eq!(pose_at(&spec, 1234), pose_at(&spec, 1234));
    }

    #[test]
    fn empty_sweep() {
        let spec = SweepSpec::for_pair(spheres(), 0, false);
        let report = run_sweep(&spec, &SolverConfig::default());
        assert_eq!((report.n_poses, report.n_converged, report.n_failed), (0, 0, 0));
    }

    #[test]
    fn sphere_sweep_converges() {
        let spec = SweepSpec::for_pair(spheres(), 300, true);
        let report = run_sweep(&spec, &SolverConfig::default());
        assert_eq!(report.n_converged, 300);
        assert_eq!(report.records.len(), 300);
        let cold = run_sweep_parallel(
            &SweepSpec::for_pair(spheres(), 300, false),
            &SolverConfig::default(),
            3,
        );
        assert_eq!(cold.n_converged, 300);
        assert!(cold.records.windows(2).all(|w| w[0].pose_index + 1 == w[1].pose_index));
    }
}
