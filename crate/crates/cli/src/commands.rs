//! Subcommand implementations, independent of argument parsing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use idcol::bench::{gradient_audit, run_sweep_parallel, AuditConfig, AuditReport, SweepReport, SweepSpec};
use idcol::detector::{solve, SolutionSummary};
use idcol::se3::{GeometricJacobian, Pose, PoseDescription};
use idcol::sensitivity::{
    contact_kinematics, contact_wrench, kinematics_sensitivity, solution_sensitivity,
    wrench_sensitivity,
};
use idcol::shapes::{
    bounding_radii, fibonacci_directions, ray_surface_distance, ShapeDescription, ShapeModel,
    DEFAULT_RADII_SAFETY, DEFAULT_RAY_COUNT,
};
use nalgebra::{Dim, Matrix, RawStorage};
use serde::Serialize;
use serde_json::{json, Value};

use crate::demo::{run_demo, DemoConfig, DemoReport};
use crate::scene::{parse_json, read_text, split_pair, Scene, SceneError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_PARSE: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_BLOWUP: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn parse(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_PARSE,
            message: message.into(),
        }
    }
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Io { .. } => Self {
                code: EXIT_IO,
                message: e.to_string(),
            },
            _ => Self::parse(e.to_string()),
        }
    }
}

/// What a command printed and the exit status it asks for.
#[derive(Debug)]
pub struct Outcome {
    pub stdout: String,
    pub code: u8,
}

/// Seventeen significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Row-major nested arrays.
fn rows<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(m: &Matrix<f64, R, C, S>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn load_scene(path: &Path) -> Result<Scene, CliError> {
    Ok(Scene::load(path)?)
}

pub struct QueryArgs {
    pub scene: PathBuf,
    pub pair: String,
    pub pose: Option<String>,
    pub grad: bool,
    pub jacobian: Option<String>,
}

pub fn query(args: &QueryArgs) -> Result<Outcome, CliError> {
    let scene = load_scene(&args.scene)?;
    let (a, b) = split_pair(&args.pair)?;
    let pair = scene.pair(&a, &b)?;
    let pose = match &args.pose {
        Some(text) => {
            let d: PoseDescription = parse_json(text, "--pose")?;
            Pose::try_from(&d).map_err(|e| CliError::parse(format!("--pose: {e}")))?
        }
        None => scene.relative_pose(&a, &b)?,
    };
    let sol = solve(&pair, &pose, &scene.file.solver, None).map_err(|e| CliError::parse(e.to_string()))?;
    let summary: SolutionSummary = sol.summary();
    let mut out = json!({ "pair": [a, b], "solution": summary });
    if sol.converged {
        let contact = scene.file.contact;
        let kin = contact_kinematics(&sol, &pose, &pair).map_err(|e| CliError::parse(e.to_string()))?;
        let w = contact_wrench(&kin, &sol, &pose, contact.k, contact.p)
            .map_err(|e| CliError::parse(e.to_string()))?;
        out["kinematics"] = json!({
            "p1": kin.p1.as_slice(),
            "p2": kin.p2.as_slice(),
            "gap": kin.gap,
            "normal": kin.normal.as_slice(),
        });
        out["wrench"] = json!({
            "F1": w.f1.as_slice(),
            "F2": w.f2.as_slice(),
            "fn": w.fn_,
            "k": contact.k,
            "p": contact.p,
        });
        if args.grad {
            let jac = match &args.jacobian {
                Some(text) => {
                    let r: Vec<Vec<f64>> = parse_json(text, "--jacobian")?;
                    GeometricJacobian::from_rows(&r).map_err(|e| CliError::parse(format!("--jacobian: {e}")))?
                }
                None => GeometricJacobian::identity(),
            };
            out["sensitivity"] = sensitivities(&sol, &pair, &pose, &jac, contact.k, contact.p)?;
        }
    }
    let code = if sol.converged { EXIT_OK } else { EXIT_NOT_CONVERGED };
    Ok(Outcome {
        stdout: serde_json::to_string_pretty(&out).expect("serializable"),
        code,
    })
}

fn sensitivities(
    sol: &idcol::Solution,
    pair: &idcol::ContactPair,
    pose: &Pose,
    jac: &GeometricJacobian,
    k: f64,
    p: f64,
) -> Result<Value, CliError> {
    let err = |e: idcol::sensitivity::SensitivityError| CliError::parse(e.to_string());
    let bundle = solution_sensitivity(sol, pair, pose, jac).map_err(err)?;
    let kin = contact_kinematics(sol, pose, pair).map_err(err)?;
    let ks = kinematics_sensitivity(&bundle, &kin, sol, pose, pair, jac).map_err(err)?;
    let w = contact_wrench(&kin, sol, pose, k, p).map_err(err)?;
    let mut out = json!({
        "dz_dq": rows(&bundle.dz_dq),
        "dgap_dq": rows(&ks.dgap_dq),
        "dnormal_dq": rows(&ks.dnormal_dq),
        "dp1_dq": rows(&ks.dp1_dq),
        "dp2_dq": rows(&ks.dp2_dq),
    });
    match wrench_sensitivity(&bundle, &ks, &kin, &w, sol, pose, jac, k, p) {
        Ok(ws) => {
            out["dF1_dq"] = json!(rows(&ws.df1_dq));
            out["dF2_dq"] = json!(rows(&ws.df2_dq));
            out["at_boundary"] = json!(ws.at_boundary);
        }
        Err(e) => out["wrench_error"] = json!(e.to_string()),
    }
    Ok(out)
}

pub struct SweepArgs {
    pub scene: PathBuf,
    pub pair: String,
    pub n: usize,
    /// `None` runs both modes and reports the speedup.
    pub warm: Option<bool>,
    pub out: Option<PathBuf>,
    pub jobs: usize,
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    pair: [&'a str; 2],
    warm_start: bool,
    convergence_rate: f64,
    #[serde(flatten)]
    report: &'a SweepReport,
}

pub fn sweep(args: &SweepArgs) -> Result<Outcome, CliError> {
    let scene = load_scene(&args.scene)?;
    let (a, b) = split_pair(&args.pair)?;
    let pair = scene.pair(&a, &b)?;
    let modes: Vec<bool> = match args.warm {
        Some(w) => vec![w],
        None => vec![false, true],
    };
    let mut summaries = serde_json::Map::new();
    let mut means = Vec::new();
    let mut any_failed = false;
    for warm in modes.iter().copied() {
        let spec = SweepSpec::for_pair(pair.clone(), args.n, warm);
        let report = run_sweep_parallel(&spec, &scene.file.solver, args.jobs.max(1));
        let label = if warm { "warm" } else { "cold" };
        if let Some(prefix) = &args.out {
            let path = if modes.len() == 1 {
                prefix.with_extension("csv")
            } else {
                with_suffix(prefix, &format!("_{label}.csv"))
            };
            write_sweep_csv(&path, &report)?;
        }
        any_failed |= report.n_failed > 0;
        means.push(report.runtime_ns.mean);
        let summary = SweepSummary {
            pair: [&a, &b],
            warm_start: warm,
            convergence_rate: report.convergence_rate(),
            report: &report,
        };
        summaries.insert(label.to_string(), serde_json::to_value(summary).expect("serializable"));
    }
    if means.len() == 2 && means[1] > 0.0 {
        summaries.insert("speedup".into(), json!(means[0] / means[1]));
    }
    let text = serde_json::to_string_pretty(&Value::Object(summaries)).expect("serializable");
    if let Some(prefix) = &args.out {
        let path = prefix.with_extension("json");
        std::fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(Outcome {
        stdout: text,
        code: if any_failed { EXIT_NOT_CONVERGED } else { EXIT_OK },
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

pub fn write_sweep_csv(path: &Path, report: &SweepReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let io = |e: csv::Error| CliError::io(path, e);
    w.write_record(["pose_index", "alpha", "converged", "iterations", "runtime_ns", "gap"])
        .map_err(io)?;
    for r in &report.records {
        w.write_record([
            r.pose_index.to_string(),
            fmt_f64(r.alpha),
            r.converged.to_string(),
            r.iterations.to_string(),
            r.runtime_ns.to_string(),
            fmt_f64(r.gap),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub struct AuditArgs {
    pub scene: PathBuf,
    pub pair: String,
    pub n: usize,
    pub fd_step: f64,
}

pub fn audit(args: &AuditArgs) -> Result<Outcome, CliError> {
    let scene = load_scene(&args.scene)?;
    let (a, b) = split_pair(&args.pair)?;
    let pair = scene.pair(&a, &b)?;
    let cfg = AuditConfig {
        n_samples: args.n,
        fd_step: args.fd_step,
        stiffness: scene.file.contact.k,
        exponent: scene.file.contact.p,
    };
    let report: AuditReport = gradient_audit(&pair, &scene.file.solver, &cfg);
    let out = json!({
        "pair": [a, b],
        "fd_step": args.fd_step,
        "report": report,
        "max_rel_error": report.max_error(),
    });
    Ok(Outcome {
        stdout: serde_json::to_string_pretty(&out).expect("serializable"),
        code: EXIT_OK,
    })
}

pub struct ShapeInfoArgs {
    pub shape: PathBuf,
    pub obj: Option<PathBuf>,
    pub n_dirs: usize,
}

pub fn shape_info(args: &ShapeInfoArgs) -> Result<Outcome, CliError> {
    let text = read_text(&args.shape)?;
    let desc: ShapeDescription = parse_json(&text, &args.shape.display().to_string())?;
    let shape = ShapeModel::try_from(&desc).map_err(|e| CliError::parse(e.to_string()))?;
    let radii = bounding_radii(&shape, DEFAULT_RAY_COUNT, DEFAULT_RADII_SAFETY)
        .map_err(|e| CliError::parse(e.to_string()))?;
    if let Some(path) = &args.obj {
        let mut w = create(path)?;
        for d in fibonacci_directions(args.n_dirs) {
            let t = ray_surface_distance(&shape, &d).map_err(|e| CliError::parse(e.to_string()))?;
            let p = d * t;
            writeln!(w, "v {} {} {}", fmt_f64(p.x), fmt_f64(p.y), fmt_f64(p.z)).map_err(|e| CliError::io(path, e))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    let out = json!({
        "kind": shape.kind(),
        "r_in": radii.r_in,
        "r_out": radii.r_out,
    });
    Ok(Outcome {
        stdout: serde_json::to_string_pretty(&out).expect("serializable"),
        code: EXIT_OK,
    })
}

pub struct DemoArgs {
    pub scene: Option<PathBuf>,
    pub dt: f64,
    pub duration: f64,
    pub out: Option<PathBuf>,
    /// Write every `stride`-th step to the trajectory.
    pub stride: usize,
}

pub fn demo(args: &DemoArgs) -> Result<Outcome, CliError> {
    let scene = match &args.scene {
        Some(p) => load_scene(p)?,
        None => Scene::from_file(crate::demo::zoo_scene())?,
    };
    let cfg = DemoConfig {
        dt: args.dt,
        duration: args.duration,
    };
    let stride = args.stride.max(1);
    let mut writer = match &args.out {
        Some(prefix) => {
            let path = prefix.with_extension("csv");
            let mut w = csv::Writer::from_writer(create(&path)?);
            w.write_record([
                "t", "body", "rx", "ry", "rz", "theta_x", "theta_y", "theta_z", "wx", "wy", "wz",
                "vx", "vy", "vz", "contacts",
            ])
            .map_err(|e| CliError::io(&path, e))?;
            Some((path, w))
        }
        None => None,
    };
    let mut write_error = None;
    let dt = cfg.dt;
    let report: DemoReport = run_demo(&scene, &cfg, |row| {
        let Some((path, w)) = writer.as_mut() else { return };
        let step = (row.time / dt).round() as usize;
        if step % stride != 0 || write_error.is_some() {
            return;
        }
        let mut rec = vec![fmt_f64(row.time), row.body.to_string()];
        for v in [row.translation, row.rotation_vector, row.angular_velocity, row.linear_velocity] {
            rec.extend(v.iter().map(|x| fmt_f64(*x)));
        }
        rec.push(row.contacts.to_string());
        if let Err(e) = w.write_record(&rec) {
            write_error = Some(CliError::io(path, e));
        }
    })
    .map_err(CliError::parse)?;
    if let Some(e) = write_error {
        return Err(e);
    }
    let text = serde_json::to_string_pretty(&report).expect("serializable");
    if let Some((path, mut w)) = writer {
        w.flush().map_err(|e| CliError::io(&path, e))?;
        let json_path = path.with_extension("json");
        std::fs::write(&json_path, &text).map_err(|e| CliError::io(&json_path, e))?;
    }
    let code = if report.blew_up {
        EXIT_BLOWUP
    } else if report.solver_failures > 0 {
        EXIT_NOT_CONVERGED
    } else {
        EXIT_OK
    };
    Ok(Outcome { stdout: text, code })
}
