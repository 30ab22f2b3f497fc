//! Experiment configuration and the staged batch driver.
//!
//! A configuration is a plain-text file of `key: value` lines (`#` starts a
//! comment). Every run writes the fully resolved configuration next to its
//! artifacts, so an output directory can be re-run as is.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::commonline::{
    detect_common_lines, oracle_common_lines, vote_dihedrals, write_commonlines_csv, CommonLineTable, DihedralTable,
};
use crate::eval::{align_global, fsc, gridding_reconstruct, metrics, AlignmentResult, FscCurve, MetricReport};
use crate::polarfft::{phase_correct, polar_transform, PolarParams, ShiftVector};
use crate::poseopt::{estimate_poses, Loss, ObjectiveInputs, OptimizerConfig, PoseEstimate};
use crate::shiftfix::{refine_shifts_traced, ShiftConfig, ShiftEstimate, ShiftRefinement};
use crate::simdata::io::{read_stack, read_volume, write_stack, write_volume};
use crate::simdata::{
    make_phantom, random_rotations, random_shifts, simulate_stack, GaussianBlobPhantom, ProjectionStack, Rotation,
    Volume,
};
use crate::{Error, Result};

/// Artifact file names inside an output directory.
pub mod artifacts {
    pub const CONFIG: &str = "config.txt";
    pub const STACK: &str = "stack.cps";
    pub const PHANTOM: &str = "phantom.cpv";
    pub const SHIFTS: &str = "shifts.csv";
    pub const SHIFT_TRACE: &str = "shift_trace.csv";
    pub const POSES: &str = "poses.csv";
    pub const OPT_TRACE: &str = "opt_trace.csv";
    pub const METRICS_CSV: &str = "metrics.csv";
    pub const METRICS_TXT: &str = "metrics.txt";
    pub const RECONSTRUCTION: &str = "reconstruction.cpv";
    pub const FSC: &str = "fsc.csv";
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub n: usize,
    pub side: usize,
    /// `None` for noiseless data.
    pub snr: Option<f64>,
    /// Root seed; every stage draws its own seed from it.
    pub seed: u64,
    /// Simulated shifts are uniform in `±max_shift` pixels.
    pub max_shift: f64,
    pub n_theta: usize,
    /// `None` means `side / 2`.
    pub n_r: Option<usize>,
    pub rmax: f64,
    /// Vote histogram resolution; the kernel width is `π/T`.
    pub t: usize,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub k_max: usize,
    pub tol: f64,
    pub loss: Loss,
    pub decay_patience: usize,
    pub stop_patience: usize,
    pub s_range: Option<f64>,
    pub s_step: f64,
    pub search_step: Option<f64>,
    pub epsilon: f64,
    pub max_rounds: usize,
    pub ncc_floor: Option<f64>,
    pub stage_shifts: bool,
    pub stage_poses: bool,
    pub stage_evaluate: bool,
    pub stage_reconstruct: bool,
    /// Existing stack to process instead of simulating one.
    pub input: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        let sh = ShiftConfig::default();
        let polar = PolarParams::default();
        PipelineConfig {
            n: 50,
            side: 64,
            snr: None,
            seed: 1,
            max_shift: 0.0,
            n_theta: polar.n_theta,
            n_r: None,
            rmax: polar.rmax,
            t: 60,
            alpha: opt.alpha,
            beta: opt.beta,
            k_max: opt.k_max,
            tol: opt.tol,
            loss: opt.loss,
            decay_patience: opt.decay_patience,
            stop_patience: opt.stop_patience,
            s_range: sh.s_range,
            s_step: sh.s_step,
            search_step: sh.search_step,
            epsilon: sh.epsilon,
            max_rounds: sh.max_rounds,
            ncc_floor: sh.ncc_floor,
            stage_shifts: true,
            stage_poses: true,
            stage_evaluate: true,
            stage_reconstruct: false,
            input: None,
            output: PathBuf::from("clpose-out"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`")))
}

fn parse_opt<T: FromStr>(key: &str, raw: &str) -> Result<Option<T>> {
    if raw == "none" {
        Ok(None)
    } else {
        parse_value(key, raw).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl PipelineConfig {
    /// Parses `key: value` lines over the defaults. Unknown or repeated keys
    /// are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key: value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), lineno).is_some() {
                return Err(Error::Config(format!("key `{key}` given twice")));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key`, `value` override and revalidates.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key.trim(), value.trim())?;
        self.validate()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n" => self.n = parse_value(key, v)?,
            "side" => self.side = parse_value(key, v)?,
            "snr" => self.snr = parse_opt(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "max_shift" => self.max_shift = parse_value(key, v)?,
            "n_theta" => self.n_theta = parse_value(key, v)?,
            "n_r" => self.n_r = parse_opt(key, v)?,
            "rmax" => self.rmax = parse_value(key, v)?,
            "T" => self.t = parse_value(key, v)?,
            "alpha" => self.alpha = parse_opt(key, v)?,
            "beta" => self.beta = parse_opt(key, v)?,
            "k_max" => self.k_max = parse_value(key, v)?,
            "tol" => self.tol = parse_value(key, v)?,
            "loss" => {
                self.loss = v
                    .parse()
                    .map_err(|e: Error| Error::Config(format!("key `loss`: {e}")))?
            }
            "decay_patience" => self.decay_patience = parse_value(key, v)?,
            "stop_patience" => self.stop_patience = parse_value(key, v)?,
            "s_range" => self.s_range = parse_opt(key, v)?,
            "s_step" => self.s_step = parse_value(key, v)?,
            "search_step" => self.search_step = parse_opt(key, v)?,
            "epsilon" => self.epsilon = parse_value(key, v)?,
            "max_rounds" => self.max_rounds = parse_value(key, v)?,
            "ncc_floor" => self.ncc_floor = parse_opt(key, v)?,
            "stage_shifts" => self.stage_shifts = parse_value(key, v)?,
            "stage_poses" => self.stage_poses = parse_value(key, v)?,
            "stage_evaluate" => self.stage_evaluate = parse_value(key, v)?,
            "stage_reconstruct" => self.stage_reconstruct = parse_value(key, v)?,
            "input" => self.input = parse_opt::<String>(key, v)?.map(PathBuf::from),
            "output" => self.output = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n < 3 {
            return fail(format!("n must be >= 3, got {}", self.n));
        }
        if self.side < 16 {
            return fail(format!("side must be >= 16, got {}", self.side));
        }
        if self.snr.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return fail("snr must be positive or `none`".into());
        }
        if !(0.0..=self.side as f64 / 8.0).contains(&self.max_shift) {
            return fail(format!(
                "max_shift must lie in [0, side/8 = {}]",
                self.side as f64 / 8.0
            ));
        }
        if self.t < 18 {
            return fail(format!("T must be >= 18, got {}", self.t));
        }
        if self.output.as_os_str().is_empty() {
            return fail("output path is empty".into());
        }
        Ok(())
    }

    /// Every key with its resolved value, in a form [`PipelineConfig::parse`]
    /// reads back to an equal configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        kv("n", self.n.to_string());
        kv("side", self.side.to_string());
        kv("snr", show_opt(&self.snr));
        kv("seed", self.seed.to_string());
        kv("max_shift", self.max_shift.to_string());
        kv("n_theta", self.n_theta.to_string());
        kv("n_r", show_opt(&self.n_r));
        kv("rmax", self.rmax.to_string());
        kv("T", self.t.to_string());
        kv("alpha", show_opt(&self.alpha));
        kv("beta", show_opt(&self.beta));
        kv("k_max", self.k_max.to_string());
        kv("tol", self.tol.to_string());
        kv("loss", self.loss.to_string());
        kv("decay_patience", self.decay_patience.to_string());
        kv("stop_patience", self.stop_patience.to_string());
        kv("s_range", show_opt(&self.s_range));
        kv("s_step", self.s_step.to_string());
        kv("search_step", show_opt(&self.search_step));
        kv("epsilon", self.epsilon.to_string());
        kv("max_rounds", self.max_rounds.to_string());
        kv("ncc_floor", show_opt(&self.ncc_floor));
        kv("stage_shifts", self.stage_shifts.to_string());
        kv("stage_poses", self.stage_poses.to_string());
        kv("stage_evaluate", self.stage_evaluate.to_string());
        kv("stage_reconstruct", self.stage_reconstruct.to_string());
        kv("input", show_opt(&self.input.as_ref().map(|p| p.display().to_string())));
        kv("output", self.output.display().to_string());
        s
    }

    pub fn polar_params(&self) -> PolarParams {
        PolarParams {
            n_theta: self.n_theta,
            n_r: self.n_r.unwrap_or(self.side / 2),
            rmax: self.rmax,
        }
    }

    pub fn shift_config(&self) -> ShiftConfig {
        ShiftConfig {
            epsilon: self.epsilon,
            max_rounds: self.max_rounds,
            s_range: self.s_range,
            s_step: self.s_step,
            ncc_floor: self.ncc_floor,
            search_step: self.search_step,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            alpha: self.alpha,
            beta: self.beta,
            k_max: self.k_max,
            tol: self.tol,
            seed: stage_seed(self.seed, Stage::Poses),
            loss: self.loss,
            decay_patience: self.decay_patience,
            stop_patience: self.stop_patience,
        }
    }
}

/// Pipeline stages that consume randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Rotations = 1,
    Shifts = 2,
    Noise = 3,
    Poses = 4,
}

/// Seed of one stage, drawn from its own ChaCha stream of the root seed.
pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stage as u64);
    rng.next_u64()
}

/// The phantom used by simulated experiments.
pub fn phantom(side: usize) -> Result<Volume> {
    make_phantom(&GaussianBlobPhantom::asymmetric(), side)
}

/// Simulates the configured stack with ground truth attached.
pub fn simulate(cfg: &PipelineConfig) -> Result<(Volume, ProjectionStack)> {
    let vol = phantom(cfg.side)?;
    let rots = random_rotations(cfg.n, stage_seed(cfg.seed, Stage::Rotations))?;
    let shifts = random_shifts(cfg.n, cfg.max_shift, cfg.side, stage_seed(cfg.seed, Stage::Shifts))?;
    let stack = simulate_stack(&vol, &rots, Some(&shifts), cfg.snr, stage_seed(cfg.seed, Stage::Noise))?;
    Ok((vol, stack))
}

/// Shift refinement on the raw stack.
pub fn run_shifts(stack: &ProjectionStack, cfg: &PipelineConfig) -> Result<ShiftRefinement> {
    let pol = polar_transform(stack, cfg.polar_params()).map_err(|e| e.in_module("polarfft"))?;
    let reference = match &stack.true_rotations {
        Some(r) => Some(oracle_common_lines(r, cfg.n_theta).map_err(|e| e.in_module("commonline"))?),
        None => None,
    };
    refine_shifts_traced(
        &pol,
        &ShiftEstimate::zeros(stack.len()),
        &cfg.shift_config(),
        reference.as_ref(),
    )
    .map_err(|e| e.in_module("shiftfix"))
}

pub struct PoseOutcome {
    pub common_lines: CommonLineTable,
    pub dihedrals: DihedralTable,
    pub estimate: PoseEstimate,
}

/// Common lines on the shift-corrected stack, voting and pose optimization.
pub fn run_poses(stack: &ProjectionStack, shifts: &ShiftVector, cfg: &PipelineConfig) -> Result<PoseOutcome> {
    let pol = polar_transform(stack, cfg.polar_params()).map_err(|e| e.in_module("polarfft"))?;
    let corrected = phase_correct(&pol, shifts).map_err(|e| e.in_module("polarfft"))?;
    let common_lines = detect_common_lines(&corrected).map_err(|e| e.in_module("commonline"))?;
    let dihedrals = vote_dihedrals(&common_lines, cfg.t).map_err(|e| e.in_module("commonline"))?;
    let inputs = ObjectiveInputs::from_tables(&common_lines, &dihedrals).map_err(|e| e.in_module("poseopt"))?;
    let estimate = estimate_poses(&inputs, &cfg.optimizer_config()).map_err(|e| e.in_module("poseopt"))?;
    Ok(PoseOutcome {
        common_lines,
        dihedrals,
        estimate,
    })
}

/// Aligns estimates to the stack's ground truth and scores them.
pub fn evaluate(
    stack: &ProjectionStack,
    rotations: &[Rotation],
    shifts: Option<&ShiftVector>,
) -> Result<(AlignmentResult, MetricReport)> {
    let truth = stack
        .true_rotations
        .as_ref()
        .ok_or_else(|| Error::invalid("stack carries no ground-truth rotations").in_module("eval"))?;
    let alignment = align_global(rotations, truth).map_err(|e| e.in_module("eval"))?;
    let shift_pair = match (shifts, stack.true_shifts.as_ref()) {
        (Some(est), Some(tru)) => Some((est, tru)),
        _ => None,
    };
    let report = metrics(&alignment.aligned, truth, shift_pair).map_err(|e| e.in_module("eval"))?;
    Ok((alignment, report))
}

/// Optional side outputs.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub opt_trace: Option<PathBuf>,
    pub shift_trace: Option<PathBuf>,
    pub dump_commonlines: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineReport {
    pub shifts: Option<ShiftVector>,
    pub shift_rounds: Option<usize>,
    pub shift_converged: Option<bool>,
    pub rotations: Option<Vec<Rotation>>,
    pub metrics: Option<MetricReport>,
    pub fsc: Option<FscCurve>,
    pub written: Vec<PathBuf>,
}

pub fn write_shifts_csv(path: &Path, shifts: &ShiftVector) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "k,dx,dy")?;
    for (k, [dx, dy]) in shifts.as_slice().iter().enumerate() {
        writeln!(w, "{k},{dx},{dy}")?;
    }
    w.flush()?;
    Ok(())
}

fn csv_rows(path: &Path, header: &str, width: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Error::Format(format!("{}: expected header `{header}`", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| {
            let vals: Vec<f64> = l
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("{}: bad number on row {}", path.display(), k + 1)))?;
            if vals.len() != width || vals[0] != k as f64 {
                return Err(Error::Format(format!("{}: malformed row {}", path.display(), k + 1)));
            }
            Ok(vals[1..].to_vec())
        })
        .collect()
}

pub fn read_shifts_csv(path: &Path) -> Result<ShiftVector> {
    Ok(ShiftVector::new(
        csv_rows(path, "k,dx,dy", 3)?
            .into_iter()
            .map(|r| [r[0], r[1]])
            .collect(),
    ))
}

const POSE_HEADER: &str = "k,r11,r12,r13,r21,r22,r23,r31,r32,r33";

pub fn write_poses_csv(path: &Path, rotations: &[Rotation]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{POSE_HEADER}")?;
    for (k, r) in rotations.iter().enumerate() {
        let v: Vec<String> = r.to_row_major().iter().map(f64::to_string).collect();
        writeln!(w, "{k},{}", v.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_poses_csv(path: &Path) -> Result<Vec<Rotation>> {
    csv_rows(path, POSE_HEADER, 10)?
        .into_iter()
        .map(|r| {
            let m: [f64; 9] = r.try_into().expect("width checked");
            Rotation::from_row_major(&m)
        })
        .collect()
}

/// Runs every enabled stage and writes its artifacts into `cfg.output`.
///
/// A simulated stack is written and read back before processing, so every
/// later stage sees exactly the stored data and can be re-run on its own.
pub fn run_pipeline(cfg: &PipelineConfig, opts: &RunOptions) -> Result<PipelineReport> {
    let out = &cfg.output;
    fs::create_dir_all(out)?;
    let mut report = PipelineReport::default();
    let config_path = out.join(artifacts::CONFIG);
    fs::write(&config_path, cfg.to_text())?;
    report.written.push(config_path);

    let stack_path = match &cfg.input {
        Some(p) => p.clone(),
        None => {
            let (vol, stack) = simulate(cfg).map_err(|e| e.in_module("simdata"))?;
            let p = out.join(artifacts::STACK);
            write_stack(&p, &stack)?;
            write_volume(&out.join(artifacts::PHANTOM), &vol)?;
            report.written.push(p.clone());
            report.written.push(out.join(artifacts::PHANTOM));
            p
        }
    };
    let stack = read_stack(&stack_path)?;

    let shifts = if cfg.stage_shifts {
        let refined = run_shifts(&stack, cfg)?;
        if let Some(p) = &opts.shift_trace {
            refined.write_trace(p)?;
        }
        let p = out.join(artifacts::SHIFT_TRACE);
        refined.write_trace(&p)?;
        report.written.push(p);
        let s = refined.estimate.to_shift_vector();
        report.shift_rounds = Some(refined.rounds.len());
        report.shift_converged = Some(refined.converged);
        s
    } else {
        ShiftVector::zeros(stack.len())
    };
    let p = out.join(artifacts::SHIFTS);
    write_shifts_csv(&p, &shifts)?;
    report.written.push(p);
    report.shifts = Some(shifts.clone());

    if cfg.stage_poses {
        let outcome = run_poses(&stack, &shifts, cfg)?;
        let p = out.join(artifacts::POSES);
        write_poses_csv(&p, &outcome.estimate.rotations)?;
        // Later stages use the stored poses, as a standalone run would.
        let stored = read_poses_csv(&p)?;
        report.written.push(p);
        let p = out.join(artifacts::OPT_TRACE);
        outcome.estimate.trace.write_csv(&p)?;
        report.written.push(p);
        if let Some(p) = &opts.opt_trace {
            outcome.estimate.trace.write_csv(p)?;
        }
        if let Some(p) = &opts.dump_commonlines {
            write_commonlines_csv(p, &outcome.common_lines, &outcome.dihedrals)?;
        }
        report.rotations = Some(stored);
    }

    if cfg.stage_evaluate {
        if let (Some(rots), Some(_)) = (&report.rotations, &stack.true_rotations) {
            let est_shifts = cfg.stage_shifts.then_some(&shifts);
            let (_, m) = evaluate(&stack, rots, est_shifts)?;
            let (pc, pt) = (out.join(artifacts::METRICS_CSV), out.join(artifacts::METRICS_TXT));
            m.write_csv(&pc)?;
            fs::write(&pt, m.pretty())?;
            report.written.push(pc);
            report.written.push(pt);
            report.metrics = Some(m);
        }
    }

    if cfg.stage_reconstruct {
        if let Some(rots) = report.rotations.clone() {
            let rots = &rots;
            let vol = gridding_reconstruct(&stack, rots, &shifts).map_err(|e| e.in_module("eval"))?;
            let p = out.join(artifacts::RECONSTRUCTION);
            write_volume(&p, &vol)?;
            report.written.push(p);
            let phantom_path = out.join(artifacts::PHANTOM);
            if let (None, Some(truth)) = (&cfg.input, &stack.true_rotations) {
                // Estimated poses live in an arbitrary global frame; compare
                // in the truth frame.
                let aligned = align_global(rots, truth).map_err(|e| e.in_module("eval"))?;
                let in_frame =
                    gridding_reconstruct(&stack, &aligned.aligned, &shifts).map_err(|e| e.in_module("eval"))?;
                let curve = fsc(&in_frame, &read_volume(&phantom_path)?).map_err(|e| e.in_module("eval"))?;
                let p = out.join(artifacts::FSC);
                curve.write_csv(&p)?;
                report.written.push(p);
                report.fsc = Some(curve);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_roundtrip_through_text() {
        let text =
            "n: 12\nside: 48  # small\nsnr: 0.5\nalpha: 0.01\nloss: l2\ninput: a/b.cps\nstage_reconstruct: true\n";
        let cfg = PipelineConfig::parse(text).unwrap();
        assert_eq!(cfg.n, 12);
        assert_eq!(cfg.snr, Some(0.5));
        assert_eq!(cfg.alpha, Some(0.01));
        assert_eq!(cfg.loss, Loss::L2);
        assert_eq!(cfg.input, Some(PathBuf::from("a/b.cps")));
        assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = PipelineConfig::parse("n: 10\nbogus_key: 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("bogus_key"));
        let mut cfg = PipelineConfig::default();
        assert!(cfg
            .apply_override("nope", "1")
            .unwrap_err()
            .to_string()
            .contains("nope"));
        cfg.apply_override("snr", "none").unwrap();
        assert!(cfg.apply_override("side", "4").is_err());
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(PipelineConfig::parse("n 10").is_err());
        assert!(PipelineConfig::parse("n: ten").is_err());
        assert!(PipelineConfig::parse("n: 10\nn: 11").is_err());
        assert!(PipelineConfig::parse("snr: -1").is_err());
        assert!(PipelineConfig::parse("max_shift: 100").is_err());
    }

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let seeds: Vec<u64> = [Stage::Rotations, Stage::Shifts, Stage::Noise, Stage::Poses]
            .iter()
            .map(|&s| stage_seed(7, s))
            .collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        assert_eq!(stage_seed(7, Stage::Noise), seeds[2]);
        assert_ne!(stage_seed(8, Stage::Noise), seeds[2]);
    }

    #[test]
    fn csv_artifacts_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let rots = random_rotations(5, 3).unwrap();
        let shifts = random_shifts(5, 4.0, 64, 3).unwrap();
        let (pp, ps) = (dir.path().join("p.csv"), dir.path().join("s.csv"));
        write_poses_csv(&pp, &rots).unwrap();
        write_shifts_csv(&ps, &shifts).unwrap();
        let back = read_poses_csv(&pp).unwrap();
        assert!(back.iter().zip(&rots).all(|(a, b)| a.angle_to(b) < 1e-12));
        assert_eq!(read_shifts_csv(&ps).unwrap(), shifts);
        fs::write(&ps, "k,dx,dy\n0,1.0\n").unwrap();
        assert!(matches!(read_shifts_csv(&ps), Err(Error::Format(_))));
    }

    #[test]
    fn module_tags_reach_the_message() {
        let cfg = PipelineConfig {
            n: 5,
            side: 48,
            n_theta: 35,
            stage_shifts: false,
            ..Default::default()
        };
        let (_, stack) = simulate(&cfg).unwrap();
        let err = run_poses(&stack, &ShiftVector::zeros(5), &cfg).err().unwrap();
        assert!(err.to_string().starts_with("[polarfft]"), "{err}");
        assert!(matches!(err.root(), Error::InvalidInput(_)));
    }
}
