//! Joint estimation of viewing directions `D` and in-plane axes `Q` from
//! common lines.
//!
//! Rows `d_i`, `q_i` are unit vectors with `d_i ⟂ q_i`. The robust objective
//!
//! ```text
//! J(D, Q) = Σ_{i≠j} W_ij |d_i·d_j − cos Θ_ij| + Σ_{i≠j} W_ij |q_i·q_j − Z_ij|
//! Z_ij    = cos C_ij cos C_ji + sin C_ij sin C_ji (d_i·d_j)
//! ```
//!
//! is minimized by projected subgradient steps: a two-stage initialization
//! (`D` alone, then `Q` given `D`), an alignment of the two frames, and
//! alternating coordinate descent. Step sizes are divided by the mean
//! off-diagonal weight so that rescaling `W` leaves every iterate unchanged.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::commonline::{CommonLineTable, DihedralTable};
use crate::simdata::Rotation;
use crate::{Error, Result};

/// Seed streams of the three random sources.
const STREAM_INIT_D: u64 = 1;
const STREAM_INIT_Q: u64 = 2;
const STREAM_RESEED: u64 = 3;

/// Residual penalty. `L2` exists only as an ablation baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Loss {
    #[default]
    L1,
    L2,
}

impl Loss {
    fn value(self, r: f64) -> f64 {
        match self {
            Loss::L1 => r.abs(),
            Loss::L2 => r * r,
        }
    }

    /// Derivative of the penalty, with `sign(0) = 0` for `L1`.
    fn slope(self, r: f64) -> f64 {
        match self {
            Loss::L1 => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Loss::L2 => 2.0 * r,
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::L1 => "l1",
            Loss::L2 => "l2",
        })
    }
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(Loss::L1),
            "l2" => Ok(Loss::L2),
            other => Err(Error::Config(format!("unknown loss '{other}' (expected l1 or l2)"))),
        }
    }
}

/// Pairwise tables the objective reads.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveInputs {
    n: usize,
    cos_theta: DMatrix<f64>,
    weights: DMatrix<f64>,
    angles: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl ObjectiveInputs {
    /// `theta` and `weights` are symmetric `n × n`; `angles[(i, j)] = C_ij`.
    /// Diagonals are ignored.
    pub fn new(theta: &DMatrix<f64>, weights: &DMatrix<f64>, angles: &DMatrix<f64>) -> Result<Self> {
        let n = theta.nrows();
        if n < 2 || theta.shape() != (n, n) || weights.shape() != (n, n) || angles.shape() != (n, n) {
            return Err(Error::invalid(
                "objective tables must be square, equal-sized and n >= 2",
            ));
        }
        if theta.iter().chain(angles.iter()).any(|v| !v.is_finite())
            || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::invalid("objective tables must be finite with W >= 0"));
        }
        let off = |m: DMatrix<f64>| DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { m[(i, j)] });
        let a = DMatrix::from_fn(n, n, |i, j| angles[(i, j)].cos() * angles[(j, i)].cos());
        let b = DMatrix::from_fn(n, n, |i, j| angles[(i, j)].sin() * angles[(j, i)].sin());
        Ok(ObjectiveInputs {
            n,
            cos_theta: off(theta.map(f64::cos)),
            weights: off(weights.clone()),
            angles: off(angles.clone()),
            a: off(a),
            b: off(b),
        })
    }

    pub fn from_tables(cl: &CommonLineTable, dihedral: &DihedralTable) -> Result<Self> {
        if cl.n() != dihedral.n() {
            return Err(Error::invalid("common-line and dihedral tables differ in size"));
        }
        ObjectiveInputs::new(dihedral.theta(), dihedral.weights(), &cl.angles())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn cos_theta(&self) -> &DMatrix<f64> {
        &self.cos_theta
    }

    /// `Z = A + B ⊙ (D Dᵀ)`: predicted `q_i·q_j`.
    pub fn z(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        let gram = d * d.transpose();
        let mut z = self.a.clone();
        z += self.b.component_mul(&gram);
        z.fill_diagonal(0.0);
        z
    }

    /// Mean off-diagonal weight.
    pub fn mean_weight(&self) -> f64 {
        self.weights.sum() / (self.n * (self.n - 1)) as f64
    }
}

/// Rows `d_i` (viewing directions) and `q_i` (image x-axes), each `n × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSet {
    pub d: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl PoseSet {
    pub fn new(d: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        if d.ncols() != 3 || q.ncols() != 3 || d.nrows() != q.nrows() {
            return Err(Error::invalid("D and Q must both be n x 3"));
        }
        Ok(PoseSet { d, q })
    }

    pub fn from_rotations(rotations: &[Rotation]) -> Self {
        let n = rotations.len();
        let d = DMatrix::from_fn(n, 3, |i, a| rotations[i].d()[a]);
        let q = DMatrix::from_fn(n, 3, |i, a| rotations[i].q()[a]);
        PoseSet { d, q }
    }

    pub fn len(&self) -> usize {
        self.d.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.d.nrows() == 0
    }

    pub fn d_row(&self, i: usize) -> Vector3<f64> {
        row(&self.d, i)
    }

    pub fn q_row(&self, i: usize) -> Vector3<f64> {
        row(&self.q, i)
    }

    /// Largest of `|‖d_i‖ − 1|`, `|‖q_i‖ − 1|` and `|d_i·q_i|`.
    pub fn violation(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                let (d, q) = (self.d_row(i), self.q_row(i));
                (d.norm() - 1.0).abs().max((q.norm() - 1.0).abs()).max(d.dot(&q).abs())
            })
            .fold(0.0, f64::max)
    }
}

fn row(m: &DMatrix<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(m[(i, 0)], m[(i, 1)], m[(i, 2)])
}

fn set_row(m: &mut DMatrix<f64>, i: usize, v: &Vector3<f64>) {
    for a in 0..3 {
        m[(i, a)] = v[a];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Step size for `D`; `None` means `1/n`.
    pub alpha: Option<f64>,
    /// Step size for `Q`; `None` means `1/n`.
    pub beta: Option<f64>,
    pub k_max: usize,
    /// Stop when the best objective improved by less than `tol` times the
    /// total weight over `stop_patience` iterations.
    pub tol: f64,
    pub seed: u64,
    pub loss: Loss,
    /// Steps halve, and the iterate returns to the best point, after this
    /// many consecutive iterations without a new best.
    pub decay_patience: usize,
    pub stop_patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            alpha: None,
            beta: None,
            k_max: 2000,
            tol: 1e-7,
            seed: 0,
            loss: Loss::L1,
            decay_patience: 20,
            stop_patience: 200,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        let positive = |s: Option<f64>| s.is_none_or(|v| v.is_finite() && v > 0.0);
        if !positive(self.alpha) || !positive(self.beta) {
            return Err(Error::invalid("step sizes must be positive"));
        }
        if self.k_max == 0 || self.decay_patience == 0 || self.stop_patience == 0 {
            return Err(Error::invalid("k_max and patience values must be >= 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("tol must be >= 0"));
        }
        Ok(())
    }

    fn steps(&self, inputs: &ObjectiveInputs) -> Result<(f64, f64)> {
        let wbar = inputs.mean_weight();
        if !(wbar > 0.0) {
            return Err(Error::Degenerate("all pair weights are zero".into()));
        }
        let default = 1.0 / inputs.n as f64;
        Ok((
            self.alpha.unwrap_or(default) / wbar,
            self.beta.unwrap_or(default) / wbar,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    InitD,
    InitQ,
    Descent,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::InitD => "init_d",
            Stage::InitQ => "init_q",
            Stage::Descent => "descent",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: Stage,
    pub iteration: usize,
    /// Objective of the current iterate (the stage's own objective during
    /// initialization).
    pub objective: f64,
    pub best: f64,
    pub violation: f64,
    pub alpha: f64,
    pub beta: f64,
    /// The iterate set a new best.
    pub improved: bool,
    /// Rows re-randomized by a degenerate projection.
    pub reseeded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptTrace {
    pub records: Vec<TraceRecord>,
}

impl OptTrace {
    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "stage,iteration,objective,best,violation,alpha,beta,improved,reseeded"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.stage, r.iteration, r.objective, r.best, r.violation, r.alpha, r.beta, r.improved as u8, r.reseeded
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Weighted penalty of `X Xᵀ − target` over off-diagonal entries.
fn gram_penalty(x: &DMatrix<f64>, target: &DMatrix<f64>, w: &DMatrix<f64>, loss: Loss) -> f64 {
    let gram = x * x.transpose();
    let n = x.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += w[(i, j)] * loss.value(gram[(i, j)] - target[(i, j)]);
            }
        }
    }
    total
}

/// `W ⊙ loss'(X Xᵀ − target)` with zero diagonal.
fn slope_matrix(x: &DMatrix<f64>, target: &DMatrix<f64>, w: &DMatrix<f64>, loss: Loss) -> DMatrix<f64> {
    let gram = x * x.transpose();
    let n = x.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            w[(i, j)] * loss.slope(gram[(i, j)] - target[(i, j)])
        }
    })
}

pub fn objective(pose: &PoseSet, inputs: &ObjectiveInputs, loss: Loss) -> f64 {
    gram_penalty(&pose.d, &inputs.cos_theta, &inputs.weights, loss)
        + gram_penalty(&pose.q, &inputs.z(&pose.d), &inputs.weights, loss)
}

/// Subgradients `(∇_D J, ∇_Q J)`.
///
/// For `L1`: `∇_D = 2 (W ⊙ sgn R_D) D − 2 (W ⊙ B ⊙ sgn R_Q) D` and
/// `∇_Q = 2 (W ⊙ sgn R_Q) Q`; for `L2` the signs become `2 R`.
pub fn gradients(pose: &PoseSet, inputs: &ObjectiveInputs, loss: Loss) -> (DMatrix<f64>, DMatrix<f64>) {
    let sd = slope_matrix(&pose.d, &inputs.cos_theta, &inputs.weights, loss);
    let sq = slope_matrix(&pose.q, &inputs.z(&pose.d), &inputs.weights, loss);
    let cross = inputs.b.component_mul(&sq);
    let gd = (sd - cross) * &pose.d * 2.0;
    let gq = sq * &pose.q * 2.0;
    (gd, gq)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

fn random_rows(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, 3);
    for i in 0..n {
        set_row(&mut m, i, &random_unit(rng));
    }
    m
}

/// Which row of the pair is being projected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// `d ← normalize(d − (d·q) q)`.
    D,
    /// `q ← normalize(q − (q·d) d)`.
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowProjection {
    pub d: Vector3<f64>,
    pub q: Vector3<f64>,
    /// The moved row was parallel to the fixed one and was redrawn.
    pub reseeded: bool,
}

/// Restores `‖d‖ = ‖q‖ = 1`, `d ⟂ q` by moving the row of `block` only.
pub fn project_row_pair(
    d: &Vector3<f64>,
    q: &Vector3<f64>,
    block: Block,
    rng: &mut ChaCha8Rng,
) -> Result<RowProjection> {
    let (moving, fixed) = match block {
        Block::D => (d, q),
        Block::Q => (q, d),
    };
    let fixed_norm = fixed.norm();
    if !(fixed_norm > 1e-9) {
        return Err(Error::Degenerate("cannot orthogonalize against a zero row".into()));
    }
    let f = fixed / fixed_norm;
    let mut v = moving - f * moving.dot(&f);
    let mut reseeded = false;
    while !(v.norm() > 1e-9 * moving.norm().max(1.0)) {
        reseeded = true;
        let r = random_unit(rng);
        v = r - f * r.dot(&f);
    }
    let v = v.normalize();
    Ok(match block {
        Block::D => RowProjection { d: v, q: f, reseeded },
        Block::Q => RowProjection { d: f, q: v, reseeded },
    })
}

fn normalize_rows(m: &mut DMatrix<f64>, rng: &mut ChaCha8Rng) -> usize {
    let mut reseeded = 0;
    for i in 0..m.nrows() {
        let v = row(m, i);
        let norm = v.norm();
        if norm > 1e-12 {
            set_row(m, i, &(v / norm));
        } else {
            reseeded += 1;
            set_row(m, i, &random_unit(rng));
        }
    }
    reseeded
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite {what}")))
    }
}

/// Step schedule shared by all stages: halve the steps and return to the
/// best iterate after `decay_patience` iterations without a new best; stop
/// when the best improved by less than `tol` over `stop_patience`
/// iterations.
struct Schedule {
    alpha: f64,
    beta: f64,
    best: f64,
    since_best: usize,
    history: Vec<f64>,
    tol_abs: f64,
    decay_patience: usize,
    stop_patience: usize,
}

enum Verdict {
    Improved,
    Continue,
    Restart,
    Stop,
}

impl Schedule {
    fn new(cfg: &OptimizerConfig, steps: (f64, f64), start: f64, inputs: &ObjectiveInputs) -> Self {
        Schedule {
            alpha: steps.0,
            beta: steps.1,
            best: start,
            since_best: 0,
            history: vec![start],
            tol_abs: cfg.tol * inputs.weights.sum(),
            decay_patience: cfg.decay_patience,
            stop_patience: cfg.stop_patience,
        }
    }

    fn observe(&mut self, value: f64) -> Verdict {
        let improved = value < self.best;
        if improved {
            self.best = value;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.history.push(self.best);
        let k = self.history.len() - 1;
        if k >= self.stop_patience && self.history[k - self.stop_patience] - self.best < self.tol_abs {
            return Verdict::Stop;
        }
        if improved {
            return Verdict::Improved;
        }
        if self.since_best >= self.decay_patience {
            self.alpha *= 0.5;
            self.beta *= 0.5;
            self.since_best = 0;
            return Verdict::Restart;
        }
        Verdict::Continue
    }
}

/// Projected subgradient descent of `Σ W |X Xᵀ − target|` over unit rows.
#[allow(clippy::too_many_arguments)]
fn sphere_embedding(
    start: DMatrix<f64>,
    target: &DMatrix<f64>,
    inputs: &ObjectiveInputs,
    cfg: &OptimizerConfig,
    step: f64,
    stage: Stage,
    rng: &mut ChaCha8Rng,
    trace: &mut OptTrace,
) -> Result<DMatrix<f64>> {
    let w = &inputs.weights;
    let mut x = start;
    let value = gram_penalty(&x, target, w, cfg.loss);
    let mut sched = Schedule::new(cfg, (step, step), value, inputs);
    let mut best = x.clone();
    let unit_violation = |m: &DMatrix<f64>| {
        (0..m.nrows())
            .map(|i| (row(m, i).norm() - 1.0).abs())
            .fold(0.0, f64::max)
    };
    trace.records.push(TraceRecord {
        stage,
        iteration: 0,
        objective: value,
        best: value,
        violation: unit_violation(&x),
        alpha: step,
        beta: step,
        improved: true,
        reseeded: 0,
    });
    for k in 1..=cfg.k_max {
        let g = slope_matrix(&x, target, w, cfg.loss) * &x * 2.0;
        check_finite(&g, "gradient during initialization")?;
        x -= g * sched.alpha;
        let reseeded = normalize_rows(&mut x, rng);
        let value = gram_penalty(&x, target, w, cfg.loss);
        let verdict = sched.observe(value);
        trace.records.push(TraceRecord {
            stage,
            iteration: k,
            objective: value,
            best: sched.best,
            violation: unit_violation(&x),
            alpha: sched.alpha,
            beta: sched.alpha,
            improved: matches!(verdict, Verdict::Improved),
            reseeded,
        });
        match verdict {
            Verdict::Improved => best.clone_from(&x),
            Verdict::Restart => x.clone_from(&best),
            Verdict::Stop => break,
            Verdict::Continue => {}
        }
    }
    Ok(best)
}

/// First initialization stage: unit rows `D⁰` fitted to `cos Θ` alone from a
/// random start drawn from `cfg.seed`.
pub fn init_d(inputs: &ObjectiveInputs, cfg: &OptimizerConfig, trace: &mut OptTrace) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    if inputs.n < 3 {
        return Err(Error::invalid("pose estimation needs >= 3 projections"));
    }
    let (alpha, _) = cfg.steps(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_INIT_D);
    let start = random_rows(inputs.n, &mut rng);
    sphere_embedding(
        start,
        &inputs.cos_theta,
        inputs,
        cfg,
        alpha,
        Stage::InitD,
        &mut rng,
        trace,
    )
}

/// Second initialization stage: unit rows `Q⁰` fitted to `Z(D⁰)`.
pub fn init_q(
    inputs: &ObjectiveInputs,
    d0: &DMatrix<f64>,
    cfg: &OptimizerConfig,
    trace: &mut OptTrace,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    if d0.shape() != (inputs.n, 3) {
        return Err(Error::invalid("D0 must be n x 3"));
    }
    let (_, beta) = cfg.steps(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_INIT_Q);
    let start = random_rows(inputs.n, &mut rng);
    sphere_embedding(start, &inputs.z(d0), inputs, cfg, beta, Stage::InitQ, &mut rng, trace)
}

/// Result of the frame alignment between `D⁰` and `Q⁰`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Rotated in-plane axes, rows `R q_i`.
    pub q: DMatrix<f64>,
    pub rotation: Matrix3<f64>,
    /// `Σ (d_i · R q_i)²` at the returned rotation.
    pub value: f64,
    /// The same objective at `R = I`.
    pub identity_value: f64,
    /// Best value over improper `R` (`det = −1`). Never returned.
    pub reflection_value: f64,
}

type Mat9 = SMatrix<f64, 9, 9>;

/// `Σ (d_iᵀ R q_i)²` as the quadratic form `vec(R)ᵀ M vec(R)`.
fn alignment_form(d: &DMatrix<f64>, q: &DMatrix<f64>) -> Mat9 {
    let mut m = Mat9::zeros();
    for i in 0..d.nrows() {
        let e = SVector::<f64, 9>::from_fn(|k, _| d[(i, k / 3)] * q[(i, k % 3)]);
        m += e * e.transpose();
    }
    m
}

fn form_value(m: &Mat9, r: &Matrix3<f64>) -> f64 {
    let v = SVector::<f64, 9>::from_fn(|k, _| r[(k / 3, k % 3)]);
    (v.transpose() * m * v)[(0, 0)]
}

fn zyz(a: f64, b: f64, c: f64) -> Matrix3<f64> {
    let rz = |t: f64| Rotation::about_axis(&Vector3::z(), t).matrix().to_owned();
    let ry = Rotation::about_axis(&Vector3::y(), b).matrix().to_owned();
    rz(a) * ry * rz(c)
}

fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let angle = w.norm();
    if angle < 1e-300 {
        return Matrix3::identity();
    }
    Rotation::about_axis(&(w / angle), angle).matrix().to_owned()
}

/// Minimizes `f` from `x0` with the Nelder–Mead simplex method.
fn nelder_mead(f: impl Fn(&Vector3<f64>) -> f64, x0: Vector3<f64>, scale: f64, iters: usize) -> (Vector3<f64>, f64) {
    let mut simplex: Vec<(Vector3<f64>, f64)> = (0..4)
        .map(|k| {
            let mut x = x0;
            if k > 0 {
                x[k - 1] += scale;
            }
            (x, f(&x))
        })
        .collect();
    for _ in 0..iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[3].1 - simplex[0].1 <= 1e-16 * simplex[0].1.abs().max(1e-300)
            && (simplex[3].0 - simplex[0].0).norm() < 1e-12
        {
            break;
        }
        let centroid = (simplex[0].0 + simplex[1].0 + simplex[2].0) / 3.0;
        let worst = simplex[3];
        let reflect = centroid + (centroid - worst.0);
        let fr = f(&reflect);
        if fr < simplex[0].1 {
            let expand = centroid + (centroid - worst.0) * 2.0;
            let fe = f(&expand);
            simplex[3] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (reflect, fr);
        } else {
            let contract = if fr < worst.1 {
                centroid + (reflect - centroid) * 0.5
            } else {
                centroid + (worst.0 - centroid) * 0.5
            };
            let fc = f(&contract);
            if fc < worst.1.min(fr) {
                simplex[3] = (contract, fc);
            } else {
                let best = simplex[0].0;
                for s in simplex.iter_mut().skip(1) {
                    s.0 = best + (s.0 - best) * 0.5;
                    s.1 = f(&s.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

/// Rotation `R ∈ SO(3)` minimizing `Σ (d_i · R q_i)²`, found by a 15° ZYZ
/// Euler grid followed by Nelder–Mead refinement on `R_grid · exp(ω)` from
/// the three best grid points.
pub fn align_dq(d0: &DMatrix<f64>, q0: &DMatrix<f64>) -> Result<Alignment> {
    if d0.ncols() != 3 || d0.shape() != q0.shape() {
        return Err(Error::invalid("D0 and Q0 must both be n x 3"));
    }
    let m = alignment_form(d0, q0);
    let step = PI / 12.0;
    let mut grid: Vec<(f64, Matrix3<f64>)> = Vec::with_capacity(24 * 13 * 24);
    for ia in 0..24 {
        for ib in 0..=12 {
            for ic in 0..24 {
                let r = zyz(ia as f64 * step, ib as f64 * step, ic as f64 * step);
                grid.push((form_value(&m, &r), r));
            }
        }
    }
    grid.sort_by(|a, b| a.0.total_cmp(&b.0));
    let identity_value = form_value(&m, &Matrix3::identity());
    // Candidates must beat the identity by more than rounding noise, so an
    // already aligned pair is returned unchanged.
    let noise = 1e-14 * d0.nrows() as f64;
    let mut best = (identity_value, Matrix3::identity());
    for &(_, r0) in grid.iter().take(3) {
        let (w, value) = nelder_mead(|w| form_value(&m, &(r0 * exp_so3(w))), Vector3::zeros(), 0.1, 2000);
        if value < best.0 - noise {
            best = (value, r0 * exp_so3(&w));
        }
    }
    // Improper rotations -R give the same quadratic value, so the branch
    // never wins and only its value is reported.
    let reflection_value = form_value(&m, &(-best.1));
    let r = best.1;
    let q = DMatrix::from_fn(q0.nrows(), 3, |i, a| (r * row(q0, i))[a]);
    Ok(Alignment {
        q,
        rotation: r,
        value: best.0,
        identity_value,
        reflection_value,
    })
}

/// Predicted common-line angle pair `(C_ij, C_ji)` of a feasible pose.
fn predicted_lines(pose: &PoseSet, i: usize, j: usize) -> Option<(f64, f64)> {
    let (di, dj) = (pose.d_row(i), pose.d_row(j));
    let u = di.cross(&dj);
    if u.norm() < 1e-9 {
        return None;
    }
    let u = u.normalize();
    let angle = |d: Vector3<f64>, q: Vector3<f64>| u.dot(&d.cross(&q)).atan2(u.dot(&q));
    Some((angle(di, pose.q_row(i)), angle(dj, pose.q_row(j))))
}

fn circular(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Weighted disagreement between predicted and observed common lines,
/// modulo the joint half-turn.
pub fn common_line_mismatch(pose: &PoseSet, inputs: &ObjectiveInputs) -> f64 {
    let mut total = 0.0;
    for i in 0..inputs.n {
        for j in i + 1..inputs.n {
            let w = inputs.weights[(i, j)];
            if w == 0.0 {
                continue;
            }
            if let Some((pi, pj)) = predicted_lines(pose, i, j) {
                let (ci, cj) = (inputs.angles[(i, j)], inputs.angles[(j, i)]);
                let direct = circular(pi, ci) + circular(pj, cj);
                let flipped = circular(pi + PI, ci) + circular(pj + PI, cj);
                total += w * direct.min(flipped);
            }
        }
    }
    total
}

/// Chooses the sign of `D` that reproduces the observed orientation of the
/// common lines.
///
/// `J` depends on `D` only through `D Dᵀ`, so `(−D, Q)` scores the same as
/// `(D, Q)`; it corresponds to rotations `R_i · diag(1, −1, −1)`, which mirror
/// every common line (`C → −C`) and cannot be reconciled with the data by
/// any global transform. Returns the pose and whether `D` was negated.
pub fn orient_to_common_lines(pose: &PoseSet, inputs: &ObjectiveInputs) -> (PoseSet, bool) {
    let mirrored = PoseSet {
        d: -&pose.d,
        q: pose.q.clone(),
    };
    if common_line_mismatch(&mirrored, inputs) < common_line_mismatch(pose, inputs) {
        (mirrored, true)
    } else {
        (pose.clone(), false)
    }
}

/// Projects every row pair moving the rows of `block`.
fn project_all(pose: &mut PoseSet, block: Block, rng: &mut ChaCha8Rng) -> Result<usize> {
    let mut reseeded = 0;
    for i in 0..pose.len() {
        let p = project_row_pair(&pose.d_row(i), &pose.q_row(i), block, rng)?;
        reseeded += p.reseeded as usize;
        set_row(&mut pose.d, i, &p.d);
        set_row(&mut pose.q, i, &p.q);
    }
    Ok(reseeded)
}

/// Makes an arbitrary start feasible: unit `q` rows, then `d` projected.
pub fn make_feasible(pose: &PoseSet, seed: u64) -> Result<PoseSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_RESEED);
    let mut out = pose.clone();
    normalize_rows(&mut out.q, &mut rng);
    project_all(&mut out, Block::D, &mut rng)?;
    Ok(out)
}

/// Alternating projected subgradient descent on `J` from a feasible start.
/// Returns the best iterate seen.
pub fn coordinate_descent(
    start: &PoseSet,
    inputs: &ObjectiveInputs,
    cfg: &OptimizerConfig,
) -> Result<(PoseSet, OptTrace)> {
    cfg.validate()?;
    if start.len() != inputs.n {
        return Err(Error::invalid("pose and tables differ in size"));
    }
    if start.violation() > 1e-9 {
        return Err(Error::invalid(format!(
            "start violates constraints by {:.3e}",
            start.violation()
        )));
    }
    let steps = cfg.steps(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_RESEED);
    let mut pose = start.clone();
    let mut best = start.clone();
    let value = objective(&pose, inputs, cfg.loss);
    let mut sched = Schedule::new(cfg, steps, value, inputs);
    let mut trace = OptTrace::default();
    trace.records.push(TraceRecord {
        stage: Stage::Descent,
        iteration: 0,
        objective: value,
        best: value,
        violation: pose.violation(),
        alpha: sched.alpha,
        beta: sched.beta,
        improved: true,
        reseeded: 0,
    });
    for k in 1..=cfg.k_max {
        let (gd, _) = gradients(&pose, inputs, cfg.loss);
        check_finite(&gd, "D gradient")?;
        pose.d -= gd * sched.alpha;
        let mut reseeded = project_all(&mut pose, Block::D, &mut rng)?;
        let (_, gq) = gradients(&pose, inputs, cfg.loss);
        check_finite(&gq, "Q gradient")?;
        pose.q -= gq * sched.beta;
        reseeded += project_all(&mut pose, Block::Q, &mut rng)?;
        let value = objective(&pose, inputs, cfg.loss);
        let (alpha, beta) = (sched.alpha, sched.beta);
        let verdict = sched.observe(value);
        trace.records.push(TraceRecord {
            stage: Stage::Descent,
            iteration: k,
            objective: value,
            best: sched.best,
            violation: pose.violation(),
            alpha,
            beta,
            improved: matches!(verdict, Verdict::Improved),
            reseeded,
        });
        match verdict {
            Verdict::Improved => best.clone_from(&pose),
            Verdict::Restart => pose.clone_from(&best),
            Verdict::Stop => break,
            Verdict::Continue => {}
        }
    }
    Ok((best, trace))
}

/// Rotations `[q_i | d_i × q_i | d_i]`.
pub fn assemble_rotations(pose: &PoseSet) -> Result<Vec<Rotation>> {
    let v = pose.violation();
    if !(v <= 1e-6) {
        return Err(Error::Numerical(format!("pose violates constraints by {v:.3e}")));
    }
    (0..pose.len())
        .map(|i| Rotation::from_axes(&pose.q_row(i), &pose.d_row(i)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub pose: PoseSet,
    pub rotations: Vec<Rotation>,
    /// Objective at the start of coordinate descent.
    pub initial_objective: f64,
    pub final_objective: f64,
    pub alignment: Alignment,
    /// `D` was negated to match the common-line orientation.
    pub mirrored: bool,
    pub trace: OptTrace,
}

/// Full chain: `D⁰`, `Q⁰`, frame alignment, orientation, coordinate descent
/// and assembly.
pub fn estimate_poses(inputs: &ObjectiveInputs, cfg: &OptimizerConfig) -> Result<PoseEstimate> {
    let mut trace = OptTrace::default();
    let d0 = init_d(inputs, cfg, &mut trace)?;
    let q0 = init_q(inputs, &d0, cfg, &mut trace)?;
    let alignment = align_dq(&d0, &q0)?;
    let start = make_feasible(&PoseSet::new(d0, alignment.q.clone())?, cfg.seed)?;
    let (start, mirrored) = orient_to_common_lines(&start, inputs);
    let initial_objective = objective(&start, inputs, cfg.loss);
    let (pose, descent) = coordinate_descent(&start, inputs, cfg)?;
    trace.records.extend(descent.records);
    let final_objective = objective(&pose, inputs, cfg.loss);
    let rotations = assemble_rotations(&pose)?;
    Ok(PoseEstimate {
        pose,
        rotations,
        initial_objective,
        final_objective,
        alignment,
        mirrored,
        trace,
    })
}
