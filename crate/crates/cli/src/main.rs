use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kinetocomp::assembly::{aggregate_stiffness, AssemblyOptions, StiffnessMode};
use kinetocomp::compensator::Scheme;
use kinetocomp::config::{demo_config, ConfigError, RunConfig};
use kinetocomp::report::{emit_report, summarize};
use kinetocomp::se3::{Pose, Wrench};
use kinetocomp::trajectory::{actuator_layout, run_sweep, trajectory_points};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CONVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "kinetocomp", version, about = "Compliance-error compensation for parallel manipulators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compensate every point of the configured trajectory and write the report.
    Compensate(RunArgs),
    /// Print the aggregate Cartesian stiffness at a pose.
    Stiffness(StiffnessArgs),
    /// Validate a configuration file.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the bundled groove-milling scenario.
    Demo(DemoArgs),
}

#[derive(Args)]
struct SchemeArgs {
    /// newton, fixed, free or linear.
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Pose tolerance, m.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    scheme: SchemeArgs,
}

#[derive(Args)]
struct DemoArgs {
    #[command(flatten)]
    scheme: SchemeArgs,
}

#[derive(Args)]
struct StiffnessArgs {
    #[arg(long)]
    config: PathBuf,
    /// Platform pose as x,y,z[,rx,ry,rz] (m, rad); defaults to the first trajectory point.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pose: Option<Vec<f64>>,
    /// Evaluate under this wrench fx,fy,fz,mx,my,mz (N, N m) instead of unloaded.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    load: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KINETOCOMP_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compensate(args) => load(&args.config).and_then(|cfg| compensate(cfg, &args.scheme)),
        Command::Demo(args) => compensate(demo_config(Path::new(".")), &args.scheme),
        Command::Check { config } => load(&config).and_then(|cfg| check(&cfg)),
        Command::Stiffness(args) => load(&args.config).and_then(|cfg| stiffness(&cfg, &args)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

type Outcome = Result<(), (u8, String)>;

fn config_error(e: ConfigError) -> (u8, String) {
    let code = match e {
        ConfigError::Io { .. } | ConfigError::Parse(_) | ConfigError::BadConfig(_) => EXIT_CONFIG,
    };
    (code, e.to_string())
}

fn load(path: &Path) -> Result<RunConfig, (u8, String)> {
    RunConfig::from_path(path).map_err(config_error)
}

fn compensate(mut cfg: RunConfig, args: &SchemeArgs) -> Outcome {
    if let Some(s) = args.scheme {
        cfg.scheme.scheme = s;
    }
    if let Some(a) = args.alpha {
        cfg.scheme.alpha = a;
    }
    if let Some(t) = args.tol {
        cfg.scheme.tol = t;
    }
    cfg.scheme.validate().map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    if let Some(dir) = &args.out {
        cfg.output.dir = dir.clone();
    }
    if args.workers == 0 {
        return Err((EXIT_CONFIG, "--workers must be at least 1".into()));
    }

    let rows = run_sweep(&cfg, args.workers).map_err(config_error)?;
    let layout = actuator_layout(&cfg.manipulator);
    let files = emit_report(
        &rows,
        &layout,
        &cfg.scheme,
        &cfg.output.dir,
        &cfg.output.csv,
        &cfg.output.summary,
        cfg.output.curves,
    )
    .map_err(|e| (EXIT_FAILURE, e.to_string()))?;
    let s = summarize(&rows, &layout, &cfg.scheme);
    println!(
        "{} points, {} converged, {} failed ({} scheme, alpha {}, tol {:e} m)",
        s.points, s.converged, s.failed, s.scheme, s.alpha, s.tol_m
    );
    println!("max uncompensated error {:.4} mm, mean {:.4} mm", s.max_uncompensated_error * 1e3, s.mean_uncompensated_error * 1e3);
    println!("max residual {:e} m, iterations {}..{} (mean {:.1})", s.max_residual, s.iterations.min, s.iterations.max, s.iterations.mean);
    let (p, r) = (&s.prismatic_actuators, &s.revolute_actuators);
    if p.count > 0 {
        println!("prismatic actuators: max |delta rho| {:.4} mm, max |tau| {:.2} N", p.max_abs_delta_rho * 1e3, p.max_abs_tau);
    }
    if r.count > 0 {
        println!("revolute actuators: max |delta rho| {:.4} deg, max |tau| {:.2} N m", r.max_abs_delta_rho.to_degrees(), r.max_abs_tau);
    }
    println!("wrote {}", files.csv.display());
    for row in rows.iter().filter(|r| !r.status.is_ok()) {
        eprintln!("phi {:.6}: {}", row.phi, row.status.label());
    }
    if s.failed > 0 {
        return Err((EXIT_CONVERGENCE, format!("{} of {} points did not converge", s.failed, s.points)));
    }
    Ok(())
}

fn check(cfg: &RunConfig) -> Outcome {
    let points = trajectory_points(&cfg.trajectory).map_err(config_error)?;
    let m = &cfg.manipulator;
    println!("configuration ok: {} chains, {} trajectory points", m.m(), points.len());
    for (i, c) in m.chains().iter().enumerate() {
        println!(
            "  chain {i}: {} actuated, {} passive, {} elastic coordinates",
            c.n_rho(),
            c.n_q(),
            c.n_theta()
        );
    }
    println!("  scheme {} (alpha {}, tol {:e} m, max {} iterations)", cfg.scheme.scheme, cfg.scheme.alpha, cfg.scheme.tol, cfg.scheme.max_iter);
    Ok(())
}

fn stiffness(cfg: &RunConfig, args: &StiffnessArgs) -> Outcome {
    let pose = match &args.pose {
        Some(v) => {
            if v.len() != 3 && v.len() != 6 {
                return Err((EXIT_CONFIG, "--pose takes 3 or 6 values".into()));
            }
            let rot = if v.len() == 6 { [v[3], v[4], v[5]] } else { [0.0; 3] };
            Pose::new([v[0], v[1], v[2]].into(), rot.into()).map_err(|e| (EXIT_CONFIG, e.to_string()))?
        }
        None => trajectory_points(&cfg.trajectory).map_err(config_error)?[0].1,
    };
    let mode = match &args.load {
        Some(w) if w.len() != 6 => return Err((EXIT_CONFIG, "--load takes 6 values".into())),
        Some(w) => StiffnessMode::Nonlinear(Wrench::new([w[0], w[1], w[2]].into(), [w[3], w[4], w[5]].into())),
        None => StiffnessMode::Linear,
    };
    let k = aggregate_stiffness(&cfg.manipulator, &pose, mode, &AssemblyOptions::default())
        .map_err(|e| (EXIT_CONVERGENCE, e.to_string()))?;
    println!("Cartesian stiffness at {pose} (rows: fx fy fz mx my mz; columns: dx dy dz rx ry rz)");
    for r in 0..6 {
        let row: Vec<String> = (0..6).map(|c| format!("{:>14.6e}", k.0[(r, c)])).collect();
        println!("{}", row.join(" "));
    }
    println!("condition number {:.3e}", k.condition_number());
    Ok(())
}
