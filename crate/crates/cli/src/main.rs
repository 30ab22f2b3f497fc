//! `clpose`: batch driver for simulation, shift refinement, pose estimation
//! and evaluation.
//!
//! Every subcommand takes the same plain-text configuration file. Artifacts
//! land in the configured output directory together with the resolved
//! configuration.

use clap::{Args, Parser, Subcommand};
use clpose::commonline::write_commonlines_csv;
use clpose::eval::fsc;
use clpose::pipeline::{
    artifacts, evaluate, read_poses_csv, read_shifts_csv, run_pipeline, run_poses, run_shifts, simulate,
    write_poses_csv, write_shifts_csv, PipelineConfig, RunOptions,
};
use clpose::simdata::io::{read_stack, read_volume, write_stack, write_volume};
use clpose::simdata::ProjectionStack;
use clpose::{Error, Result};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "clpose", version, about = "Common-line pose and shift estimation")]
struct Cli {
    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key: value` lines; defaults apply without one.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set snr=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory (overrides the `output` key).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a projection stack with ground truth.
    Simulate(ConfigArgs),
    /// Refine in-plane shifts of a stack.
    Shifts {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Per-round CSV diagnostics.
        #[arg(long)]
        shift_trace: Option<PathBuf>,
    },
    /// Detect common lines, vote dihedrals and estimate poses.
    Poses {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shifts CSV to correct for (default: `shifts.csv` in the output
        /// directory when present, else zero).
        #[arg(long)]
        shifts: Option<PathBuf>,
        /// Optimizer trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Common-line and dihedral table CSV.
        #[arg(long)]
        dump_commonlines: Option<PathBuf>,
    },
    /// Score estimated poses (and shifts) against the stack's ground truth.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Poses CSV (default: `poses.csv` in the output directory).
        #[arg(long)]
        poses: Option<PathBuf>,
        /// Shifts CSV (default: `shifts.csv` in the output directory when present).
        #[arg(long)]
        shifts: Option<PathBuf>,
    },
    /// Run every enabled stage.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        shift_trace: Option<PathBuf>,
        #[arg(long)]
        dump_commonlines: Option<PathBuf>,
    },
    /// Fourier shell correlation of two volumes.
    Fsc {
        a: PathBuf,
        b: PathBuf,
        /// CSV destination (default: stdout).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.apply_override(k, v)?;
    }
    if let Some(out) = &args.output {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

/// Creates the output directory and records the resolved configuration.
fn prepare_output(cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join(artifacts::CONFIG), cfg.to_text())?;
    Ok(())
}

fn stack_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.input.clone().unwrap_or_else(|| cfg.output.join(artifacts::STACK))
}

fn load_stack(cfg: &PipelineConfig) -> Result<ProjectionStack> {
    let p = stack_path(cfg);
    if !p.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("stack {} not found (run `simulate` or set `input`)", p.display()),
        )));
    }
    read_stack(&p)
}

fn existing(explicit: &Option<PathBuf>, fallback: PathBuf) -> Option<PathBuf> {
    explicit.clone().or_else(|| fallback.exists().then_some(fallback))
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = load_config(&args)?;
            prepare_output(&cfg)?;
            let (vol, stack) = simulate(&cfg).map_err(|e| e.in_module("simdata"))?;
            write_stack(&cfg.output.join(artifacts::STACK), &stack)?;
            write_volume(&cfg.output.join(artifacts::PHANTOM), &vol)?;
            eprintln!(
                "simulated {} projections of side {} into {}",
                stack.len(),
                stack.side(),
                cfg.output.display()
            );
        }
        Command::Shifts { cfg: args, shift_trace } => {
            let cfg = load_config(&args)?;
            let stack = load_stack(&cfg)?;
            prepare_output(&cfg)?;
            let refined = run_shifts(&stack, &cfg)?;
            write_shifts_csv(&cfg.output.join(artifacts::SHIFTS), &refined.estimate.to_shift_vector())?;
            refined.write_trace(&cfg.output.join(artifacts::SHIFT_TRACE))?;
            if let Some(p) = shift_trace {
                refined.write_trace(&p)?;
            }
            let last = refined.rounds.last().expect("at least one round");
            eprintln!(
                "shift refinement: {} rounds, residual {:.4}, converged {}",
                refined.rounds.len(),
                last.residual,
                refined.converged
            );
        }
        Command::Poses {
            cfg: args,
            shifts,
            trace,
            dump_commonlines,
        } => {
            let cfg = load_config(&args)?;
            let stack = load_stack(&cfg)?;
            let shift_vec = match existing(&shifts, cfg.output.join(artifacts::SHIFTS)) {
                Some(p) => read_shifts_csv(require(&p)?)?,
                None => clpose::polarfft::ShiftVector::zeros(stack.len()),
            };
            prepare_output(&cfg)?;
            let outcome = run_poses(&stack, &shift_vec, &cfg)?;
            write_poses_csv(&cfg.output.join(artifacts::POSES), &outcome.estimate.rotations)?;
            outcome
                .estimate
                .trace
                .write_csv(&cfg.output.join(artifacts::OPT_TRACE))?;
            if let Some(p) = trace {
                outcome.estimate.trace.write_csv(&p)?;
            }
            if let Some(p) = dump_commonlines {
                write_commonlines_csv(&p, &outcome.common_lines, &outcome.dihedrals)?;
            }
            eprintln!(
                "pose optimization: objective {:.4} -> {:.4}",
                outcome.estimate.initial_objective, outcome.estimate.final_objective
            );
        }
        Command::Evaluate {
            cfg: args,
            poses,
            shifts,
        } => {
            let cfg = load_config(&args)?;
            let stack = load_stack(&cfg)?;
            let poses = poses.unwrap_or_else(|| cfg.output.join(artifacts::POSES));
            let rotations = read_poses_csv(require(&poses)?)?;
            let shift_vec = match existing(&shifts, cfg.output.join(artifacts::SHIFTS)) {
                Some(p) => Some(read_shifts_csv(require(&p)?)?),
                None => None,
            };
            prepare_output(&cfg)?;
            let (_, report) = evaluate(&stack, &rotations, shift_vec.as_ref())?;
            report.write_csv(&cfg.output.join(artifacts::METRICS_CSV))?;
            fs::write(cfg.output.join(artifacts::METRICS_TXT), report.pretty())?;
            print!("{}", report.pretty());
        }
        Command::Pipeline {
            cfg: args,
            trace,
            shift_trace,
            dump_commonlines,
        } => {
            let cfg = load_config(&args)?;
            let opts = RunOptions {
                opt_trace: trace,
                shift_trace,
                dump_commonlines,
            };
            let report = run_pipeline(&cfg, &opts)?;
            if let Some(m) = &report.metrics {
                print!("{}", m.pretty());
            }
            eprintln!("wrote {} artifacts to {}", report.written.len(), cfg.output.display());
        }
        Command::Fsc { a, b, output } => {
            let curve =
                fsc(&read_volume(require(&a)?)?, &read_volume(require(&b)?)?).map_err(|e| e.in_module("eval"))?;
            match output {
                Some(p) => curve.write_csv(&p)?,
                None => {
                    let mut out = std::io::stdout().lock();
                    curve.write_to(&mut out)?;
                }
            }
        }
    }
    Ok(())
}

/// Exit status by error category: 2 configuration, 3 input, 4 numerical.
fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Json(_) => 3,
        Error::Numerical(_) | Error::Degenerate(_) => 4,
        Error::Module { .. } => unreachable!("root strips module tags"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_root_category() {
        let tagged = |e: Error| e.in_module("shiftfix");
        assert_eq!(exit_code(&tagged(Error::Config("k".into()))), 2);
        assert_eq!(exit_code(&tagged(Error::InvalidInput("x".into()))), 2);
        assert_eq!(exit_code(&tagged(Error::Format("f".into()))), 3);
        assert_eq!(exit_code(&Error::Io(std::io::ErrorKind::NotFound.into())), 3);
        assert_eq!(exit_code(&tagged(Error::Numerical("nan".into()))), 4);
        assert_eq!(exit_code(&tagged(Error::Degenerate("rank".into()))), 4);
    }
}
