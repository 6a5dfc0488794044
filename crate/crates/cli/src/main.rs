use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idcol_cli::commands::{self, CliError, Outcome, EXIT_PARSE};

#[derive(Parser)]
#[command(name = "idcol", version, about = "Differentiable collision queries between convex implicit bodies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one pair and print the solution, kinematics and wrench as JSON.
    Query {
        #[arg(long)]
        scene: PathBuf,
        /// Two body names, or shape names together with --pose.
        #[arg(long)]
        pair: String,
        /// Relative pose `{"R": [[..]], "r": [..]}` of the second body in the first's frame.
        #[arg(long)]
        pose: Option<String>,
        /// Include derivatives with respect to the generalized coordinates.
        #[arg(long)]
        grad: bool,
        /// Row-major 6 x n geometric Jacobian; defaults to the identity.
        #[arg(long)]
        jacobian: Option<String>,
    },
    /// Run the deterministic pose sweep and report convergence and timing.
    Sweep {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        pair: String,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[command(flatten)]
        mode: SweepMode,
        /// Output prefix for `.csv` and `.json` files.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for cold sweeps.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare every derivative with finite differences of full re-solves.
    Audit {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        pair: String,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 1e-6)]
        fd_step: f64,
    },
    /// Print bounding radii of a shape; optionally dump surface points as OBJ.
    ShapeInfo {
        /// Shape JSON file.
        shape: PathBuf,
        #[arg(long)]
        obj: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        points: usize,
    },
    /// Simulate free bodies with penalty contact (default: the ten-body zoo).
    Demo {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 5.0)]
        duration: f64,
        /// Output prefix for the trajectory `.csv` and final-state `.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        stride: usize,
    },
}

#[derive(Args)]
#[group(multiple = false)]
struct SweepMode {
    /// Warm-start each pose from the previous solution.
    #[arg(long)]
    warm: bool,
    /// Cold-start every pose.
    #[arg(long)]
    cold: bool,
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Query {
            scene,
            pair,
            pose,
            grad,
            jacobian,
        } => commands::query(&commands::QueryArgs {
            scene,
            pair,
            pose,
            grad,
            jacobian,
        }),
        Command::Sweep {
            scene,
            pair,
            n,
            mode,
            out,
            jobs,
        } => commands::sweep(&commands::SweepArgs {
            scene,
            pair,
            n,
            warm: match (mode.warm, mode.cold) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            },
            out,
            jobs,
        }),
        Command::Audit {
            scene,
            pair,
            n,
            fd_step,
        } => commands::audit(&commands::AuditArgs {
            scene,
            pair,
            n,
            fd_step,
        }),
        Command::ShapeInfo { shape, obj, points } => commands::shape_info(&commands::ShapeInfoArgs {
            shape,
            obj,
            n_dirs: points,
        }),
        Command::Demo {
            scene,
            dt,
            duration,
            out,
            stride,
        } => commands::demo(&commands::DemoArgs {
            scene,
            dt,
            duration,
            out,
            stride,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .parse_filters(&std::env::var("IDCOL_LOG").unwrap_or_else(|_| "off".into()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_PARSE } else { 0 });
        }
    };
    match run(cli) {
        Ok(outcome) => {
            // A closed pipe (`idcol demo | head`) is not an error worth a panic.
            let _ = writeln!(std::io::stdout().lock(), "{}", outcome.stdout);
            ExitCode::from(outcome.code)
        }
        Err(e) => {
            log::debug!("command failed with exit code {}", e.code);
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
