//! `kakeya-lab` — batch driver for the discretized tube-geometry laboratory.
//!
//! Every subcommand builds one [`ExperimentConfig`], runs it, writes a
//! deterministic artifact (family JSON or report JSON) plus a `.meta.json`
//! timing sidecar, and exits 0 on pass/completion, 1 on a failed check
//! (witness in the report), or 2 on unusable flags or inputs.

mod config;
mod formats;
mod report;
mod run;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{AxiomKind, CommandKind, ExperimentConfig, FamilyKind};

#[derive(Parser)]
#[command(
    name = "kakeya-lab",
    version,
    about = "Desk-scale laboratory for discretized tube and prism geometry",
    long_about = "Generates tube/prism families on a dyadic voxel grid, measures \
                  non-concentration constants, density exponents, overlap energies, \
                  and twisted projections, and writes deterministic JSON/CSV reports."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a named family and save it as family JSON.
    Generate {
        /// Construction to run.
        #[arg(long, value_enum)]
        kind: FamilyKind,
        /// Grid exponent k (delta = 2^-k).
        #[arg(long)]
        scale: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tree branching factor (sticky).
        #[arg(long)]
        branching: Option<u32>,
        /// Member count (random-lines) or tubes per prism (prism-clustered).
        #[arg(long)]
        count: Option<u32>,
        /// Short cross-section side in units of delta (prism-clustered).
        #[arg(long)]
        side: Option<f64>,
        /// Long cross-section side, absolute (prism-clustered).
        #[arg(long)]
        tside: Option<f64>,
        /// Also rasterize the union and save it as a KVOX voxel file.
        #[arg(long)]
        save_voxels: Option<PathBuf>,
        /// Output family JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure a non-concentration axiom on a family and verdict it.
    Check {
        #[arg(long)]
        family: PathBuf,
        #[arg(long, value_enum)]
        axiom: AxiomKind,
        /// Error budget the measured constant is checked against.
        #[arg(long, default_value_t = 100.0)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scan a voxel set (or a family's union) for its density exponent.
    Assouad {
        /// Family JSON input (rasterized at its own scale).
        #[arg(long, conflicts_with = "voxels")]
        family: Option<PathBuf>,
        /// KVOX voxel input.
        #[arg(long)]
        voxels: Option<PathBuf>,
        /// Minimal scale separation A (r >= A * rho).
        #[arg(long, default_value_t = 4.0)]
        min_sep: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pigeonhole a family's shading onto one scale pair and keep the mass
    /// on disjoint balls.
    TwoScale {
        #[arg(long)]
        family: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        min_sep: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the coarsening dichotomy (prism families) or the four-way
    /// classification (tube families).
    PrismDichotomy {
        #[arg(long)]
        family: PathBuf,
        /// Density/dichotomy exponent epsilon.
        #[arg(long)]
        eps: f64,
        /// Write the decision trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Twist-project a tube family onto the plane along a slope function.
    Project {
        #[arg(long)]
        family: PathBuf,
        /// Slope coefficients a b c for f(z) = a + b*z + c*z^2.
        #[arg(long, num_args = 3, value_names = ["A", "B", "C"])]
        slope: Option<Vec<f64>>,
        /// Save the projected union as a planar voxel file.
        #[arg(long)]
        save_voxels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a homogeneous list of configs and tabulate one CSV row each.
    Sweep {
        /// JSON file holding an array of experiment configs.
        #[arg(long)]
        configs: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn config_from_cli(cmd: &Cmd) -> Option<ExperimentConfig> {
    let mut cfg = ExperimentConfig {
        command: CommandKind::Generate,
        kind: None,
        family: None,
        voxels: None,
        out: PathBuf::new(),
        scale: None,
        seed: 0,
        eps: None,
        min_sep: None,
        threshold: None,
        axiom: None,
        branching: None,
        count: None,
        side: None,
        tside: None,
        slope: None,
        save_voxels: None,
        trace: None,
    };
    match cmd {
        Cmd::Generate {
            kind,
            scale,
            seed,
            branching,
            count,
            side,
            tside,
            save_voxels,
            out,
        } => {
            cfg.command = CommandKind::Generate;
            cfg.kind = Some(*kind);
            cfg.scale = Some(*scale);
            cfg.seed = *seed;
            cfg.branching = *branching;
            cfg.count = *count;
            cfg.side = *side;
            cfg.tside = *tside;
            cfg.save_voxels = save_voxels.clone();
            cfg.out = out.clone();
        }
        Cmd::Check {
            family,
            axiom,
            threshold,
            out,
        } => {
            cfg.command = CommandKind::Check;
            cfg.family = Some(family.clone());
            cfg.axiom = Some(*axiom);
            cfg.threshold = Some(*threshold);
            cfg.out = out.clone();
        }
        Cmd::Assouad {
            family,
            voxels,
            min_sep,
            out,
        } => {
            cfg.command = CommandKind::Assouad;
            cfg.family = family.clone();
            cfg.voxels = voxels.clone();
            cfg.min_sep = Some(*min_sep);
            cfg.out = out.clone();
        }
        Cmd::TwoScale {
            family,
            min_sep,
            out,
        } => {
            cfg.command = CommandKind::TwoScale;
            cfg.family = Some(family.clone());
            cfg.min_sep = Some(*min_sep);
            cfg.out = out.clone();
        }
        Cmd::PrismDichotomy {
            family,
            eps,
            trace,
            out,
        } => {
            cfg.command = CommandKind::PrismDichotomy;
            cfg.family = Some(family.clone());
            cfg.eps = Some(*eps);
            cfg.trace = trace.clone();
            cfg.out = out.clone();
        }
        Cmd::Project {
            family,
            slope,
            save_voxels,
            out,
        } => {
            cfg.command = CommandKind::Project;
            cfg.family = Some(family.clone());
            cfg.slope = slope.as_ref().map(|s| [s[0], s[1], s[2]]);
            cfg.save_voxels = save_voxels.clone();
            cfg.out = out.clone();
        }
        Cmd::Sweep { .. } => return None,
    }
    Some(cfg)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();

    if let Cmd::Sweep { configs, out } = &cli.cmd {
        return match sweep::sweep(configs, out) {
            Ok(code) => {
                println!("sweep table written to {}", out.display());
                ExitCode::from(code as u8)
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        };
    }

    let cfg = config_from_cli(&cli.cmd).expect("non-sweep command");
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run::run(&cfg) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            ExitCode::from(outcome.exit as u8)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
