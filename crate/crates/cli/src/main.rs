//! `packopt` command line: forward simulation, shape optimization,
//! gradient checking, mesh quality reports, and case generation.
//!
//! Exit codes: 0 success, 1 usage error, 2 solver or runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use packopt_core::casegen::{channel_with_obstacles, staggered_obstacles, ChannelObstaclesParams};
use packopt_core::config::CaseConfig;
use packopt_core::io::history::write_history;
use packopt_core::io::msh::{read_msh, write_msh};
use packopt_core::io::vtk::{write_vtk, VtkField};
use packopt_core::io::write_metrics;
use packopt_core::metrics::evaluate_case;
use packopt_core::shape::{gradient_fd_check, optimize_with_callback, StopReason};
use packopt_core::{CaseSolution, Mesh};

#[derive(Parser)]
#[command(
    name = "packopt",
    about = "Single-phase flow / mass-transfer surrogate and vertex-moving shape optimizer for packing geometries",
    disable_help_subcommand = true
)]
struct Cli {
    /// Print the full configuration (defaults plus --config overrides) and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct CaseArgs {
    /// Mesh file (MSH 2.2 ASCII).
    #[arg(long)]
    mesh: PathBuf,
    /// Configuration file (flat key = value; defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Forward solve: flow, transport, metrics; writes solution.vtk and metrics.json.
    Simulate {
        #[command(flatten)]
        case: CaseArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Shape optimization loop; writes history.csv, final.msh, final.vtk and periodic iter_NNNN.vtk.
    Optimize {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference validation of the adjoint shape gradient.
    Gradcheck {
        #[command(flatten)]
        case: CaseArgs,
        /// Number of random admissible directions.
        #[arg(long, default_value_t = 10)]
        directions: usize,
        /// Comma-separated step factors relative to the mean cell diameter.
        #[arg(long, default_value = "1e-5,1e-6,1e-7")]
        eps: String,
    },
    /// Mesh quality report: min/mean and a histogram.
    MeshQuality {
        #[arg(long)]
        mesh: PathBuf,
    },
    /// Generate a built-in case geometry and write it as MSH.
    MakeCase {
        /// Case kind; only "channel-obstacles" is available.
        kind: String,
        #[arg(long)]
        out: PathBuf,
        /// Channel length [m].
        #[arg(long, default_value_t = 0.016)]
        length: f64,
        /// Channel height [m].
        #[arg(long, default_value_t = 0.004)]
        height: f64,
        /// Number of obstacles placed on a staggered pattern.
        #[arg(long, default_value_t = 4)]
        obstacles: usize,
        /// Obstacle radius [m].
        #[arg(long, default_value_t = 4.0e-4)]
        radius: f64,
        /// Target element edge length [m].
        #[arg(long, default_value_t = 1.5e-4)]
        resolution: f64,
        /// Polygon segments per obstacle.
        #[arg(long, default_value_t = 32)]
        segments: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version are not usage errors
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> packopt_core::Result<CaseConfig> {
    match path {
        Some(p) => CaseConfig::load(p),
        None => Ok(CaseConfig::default()),
    }
}

fn run(cli: Cli) -> packopt_core::Result<ExitCode> {
    if cli.print_config {
        let cfg = match &cli.command {
            Some(Command::Simulate { case, .. })
            | Some(Command::Optimize { case, .. })
            | Some(Command::Gradcheck { case, .. }) => load_config(&case.config)?,
            _ => CaseConfig::default(),
        };
        print!("{}", cfg.print());
        return Ok(ExitCode::SUCCESS);
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (try --help)");
        return Ok(ExitCode::from(1));
    };
    match command {
        Command::Simulate { case, out } => {
            let cfg = load_config(&case.config)?;
            let mesh = read_msh(&case.mesh)?;
            let sol = evaluate_case(&mesh, &cfg.case_setup())?;
            std::fs::create_dir_all(&out)
                .map_err(|e| packopt_core::Error::io(out.display().to_string(), e))?;
            write_fields(&out.join("solution.vtk"), &mesh, &sol)?;
            write_metrics(&out.join("metrics.json"), &sol.metrics)?;
            println!(
                "beta = {:.6e} m/s, c_out = {:.4}, vdot = {:.6e}, a_geo = {:.6e}, dp = {:.6e} Pa",
                sol.metrics.beta,
                sol.metrics.c_out,
                sol.metrics.vdot,
                sol.metrics.a_geo,
                sol.metrics.dp
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Optimize { case, out } => {
            let cfg = load_config(&case.config)?;
            let mesh = read_msh(&case.mesh)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| packopt_core::Error::io(out.display().to_string(), e))?;
            let vtk_every = cfg.vtk_every;
            let out_dir = out.clone();
            let result = optimize_with_callback(
                mesh,
                &cfg.case_setup(),
                &cfg.roles,
                &cfg.optimizer,
                |it, m, sol| {
                    if vtk_every > 0 && it % vtk_every == 0 {
                        let path = out_dir.join(format!("iter_{it:04}.vtk"));
                        let _ = write_fields(&path, m, sol);
                    }
                },
            )?;
            write_history(&out.join("history.csv"), &result.history)?;
            write_msh(&out.join("final.msh"), &result.mesh)?;
            write_fields(&out.join("final.vtk"), &result.mesh, &result.solution)?;
            write_metrics(&out.join("metrics.json"), &result.solution.metrics)?;
            let first = &result.history[0];
            let last = result.history.last().unwrap();
            println!(
                "iterations: {} (stop: {:?})",
                result.history.len() - 1,
                result.stop
            );
            println!(
                "beta: {:.6e} -> {:.6e} ({:+.2}%)",
                first.beta,
                last.beta,
                100.0 * (last.beta / first.beta - 1.0)
            );
            println!(
                "dp: {:.6e} -> {:.6e} Pa, a_geo: {:.6e} -> {:.6e}",
                first.dp, last.dp, first.a_geo, last.a_geo
            );
            match result.stop {
                StopReason::Aborted(msg) => {
                    eprintln!("error: optimization aborted: {msg}");
                    Ok(ExitCode::from(2))
                }
                _ => Ok(ExitCode::SUCCESS),
            }
        }
        Command::Gradcheck {
            case,
            directions,
            eps,
        } => {
            let cfg = load_config(&case.config)?;
            let mesh = read_msh(&case.mesh)?;
            let factors: std::result::Result<Vec<f64>, _> =
                eps.split(',').map(|t| t.trim().parse::<f64>()).collect();
            let factors = factors.map_err(|_| {
                packopt_core::Error::InvalidConfig(format!("bad --eps list `{eps}`"))
            })?;
            let rows = gradient_fd_check(
                &mesh,
                &cfg.case_setup(),
                &cfg.roles,
                directions,
                &factors,
                cfg.seed,
            )?;
            println!(
                "{:>4} {:>12} {:>16} {:>16} {:>10}",
                "dir", "eps", "fd", "adjoint", "rel_err"
            );
            let mut worst = 0.0f64;
            for r in &rows {
                println!(
                    "{:>4} {:>12.4e} {:>16.8e} {:>16.8e} {:>10.3e}",
                    r.direction, r.eps, r.fd, r.adjoint, r.rel_err
                );
                worst = worst.max(r.rel_err);
            }
            println!("worst relative error: {worst:.3e}");
            if worst > 1e-2 {
                eprintln!("error: gradient check failed the 1e-2 tolerance");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::MeshQuality { mesh } => {
            let mesh = read_msh(&mesh)?;
            let min = mesh.min_quality()?;
            let mean = mesh.mean_quality();
            println!(
                "cells: {}, vertices: {}, min quality: {min:.4}, mean quality: {mean:.4}",
                mesh.cell_count(),
                mesh.vertex_count()
            );
            let mut bins = [0usize; 10];
            for c in 0..mesh.cell_count() {
                let q = mesh.cell_quality(c).clamp(0.0, 1.0 - 1e-12);
                bins[(q * 10.0) as usize] += 1;
            }
            for (k, count) in bins.iter().enumerate() {
                println!(
                    "[{:.1}, {:.1}): {count}",
                    k as f64 / 10.0,
                    (k + 1) as f64 / 10.0
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::MakeCase {
            kind,
            out,
            length,
            height,
            obstacles,
            radius,
            resolution,
            segments,
        } => {
            if kind != "channel-obstacles" {
                eprintln!("error: unknown case kind `{kind}` (available: channel-obstacles)");
                return Ok(ExitCode::from(1));
            }
            let mesh = channel_with_obstacles(&ChannelObstaclesParams {
                length,
                height,
                obstacles: staggered_obstacles(length, height, obstacles, radius),
                resolution,
                segments,
            })?;
            write_msh(&out, &mesh)?;
            println!(
                "wrote {} ({} cells, {} vertices, min quality {:.3})",
                out.display(),
                mesh.cell_count(),
                mesh.vertex_count(),
                mesh.min_quality()?
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn write_fields(path: &Path, mesh: &Mesh, sol: &CaseSolution) -> packopt_core::Result<()> {
    write_vtk(
        path,
        mesh,
        &[
            VtkField::Vector("u", &sol.flow.u),
            VtkField::Scalar("p", &sol.flow.p),
            VtkField::Scalar("c", &sol.concentration.values),
        ],
    )
}
