//! Iterative in-plane shift refinement.
//!
//! Each round removes the current shift estimate from the polar rays,
//! re-detects common lines, measures the 1D offset `s*` between the two
//! original rays of every pair, and solves the global least-squares system
//! tying those offsets to the per-projection shifts.
//!
//! For a pair whose common line sits at ray angle `α` in image `k₁` and `β`
//! in image `k₂`, a shift `(dx, dy)` delays a ray at angle `α` by
//! `dx cos α + dy sin α`, so
//!
//! ```text
//! s* = (dy₁ sin α + dx₁ cos α) − (dy₂ sin β + dx₂ cos β).
//! ```
//!
//! The row stencil is `[sin α, cos α, −sin β, −cos β]` on the unknown pairs
//! `(X_k, Y_k)` at columns `(2k, 2k+1)`; with ray angles measured from the
//! image column axis this means `X_k = dy_k` and `Y_k = dx_k`.
//! [`ShiftEstimate::to_shift_vector`] performs the conversion.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::commonline::{agreement, detect_common_lines, detect_common_lines_shifted, CommonLineTable};
use crate::polarfft::{phase_correct, PolarStack, ShiftVector};
use crate::{Error, Result};

fn unit(ray: &[Complex64]) -> Result<Vec<Complex64>> {
    let norm = ray.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate("zero-norm ray in shift correlation".into()));
    }
    Ok(ray.iter().map(|v| v / norm).collect())
}

/// `Re⟨a ⊙ e^{−2πi s f}, b⟩` for unit-norm `a` and `b`.
fn shift_score(a: &[Complex64], b: &[Complex64], freq: &[f64], s: f64) -> f64 {
    a.iter()
        .zip(b)
        .zip(freq)
        .map(|((x, y), f)| (x * Complex64::from_polar(1.0, -2.0 * PI * s * f) * y.conj()).re)
        .sum()
}

/// Offset `s*` (pixels) maximizing the correlation of `ray1 ⊙ e^{−2πi s f}`
/// with `ray2` over the grid `[−s_range, s_range]` with spacing `s_step`,
/// followed by one parabolic refinement step around the grid maximum.
pub fn estimate_ray_shift(
    ray1: &[Complex64],
    ray2: &[Complex64],
    freq: &[f64],
    s_range: f64,
    s_step: f64,
) -> Result<f64> {
    if ray1.len() != ray2.len() || ray1.len() != freq.len() {
        return Err(Error::invalid("rays and frequency grid differ in length"));
    }
    if !(s_range >= 1.0) || !s_range.is_finite() {
        return Err(Error::invalid(format!("s_range must be >= 1 px, got {s_range}")));
    }
    if !(s_step > 0.0) || s_step > s_range {
        return Err(Error::invalid(format!("s_step must be in (0, s_range], got {s_step}")));
    }
    let (a, b) = (unit(ray1)?, unit(ray2)?);
    let half = (s_range / s_step + 1e-9).floor() as i64;
    let scores: Vec<f64> = (-half..=half)
        .map(|m| shift_score(&a, &b, freq, m as f64 * s_step))
        .collect();
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    let s0 = (best as i64 - half) as f64 * s_step;
    if best == 0 || best + 1 == scores.len() {
        return Ok(s0);
    }
    let (l, c, r) = (scores[best - 1], scores[best], scores[best + 1]);
    let curv = l - 2.0 * c + r;
    let delta = if curv < 0.0 {
        (0.5 * (l - r) / curv).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Ok(s0 + delta * s_step)
}

/// One equation of the shift system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub k1: usize,
    pub k2: usize,
    /// Common-line angle in `k1`, radians in `[0, 2π)`.
    pub alpha: f64,
    /// Common-line angle in `k2`, radians in `[0, 2π)`.
    pub beta: f64,
}

impl ShiftRow {
    /// `[sin α, cos α, −sin β, −cos β]`.
    pub fn coefficients(&self) -> [f64; 4] {
        [self.alpha.sin(), self.alpha.cos(), -self.beta.sin(), -self.beta.cos()]
    }

    /// Columns of the four coefficients.
    pub fn columns(&self) -> [usize; 4] {
        [2 * self.k1, 2 * self.k1 + 1, 2 * self.k2, 2 * self.k2 + 1]
    }

    fn apply(&self, x: &[f64]) -> f64 {
        self.coefficients()
            .iter()
            .zip(self.columns())
            .map(|(a, c)| a * x[c])
            .sum()
    }
}

/// Sparse system `A x = b` with four structural nonzeros per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSystem {
    k: usize,
    rows: Vec<ShiftRow>,
    b: Vec<f64>,
}

impl ShiftSystem {
    pub fn new(k: usize, rows: Vec<ShiftRow>, b: Vec<f64>) -> Result<Self> {
        if rows.len() != b.len() {
            return Err(Error::invalid("row count and right-hand side differ"));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("right-hand side must be finite"));
        }
        for r in &rows {
            if r.k1 >= k || r.k2 >= k || r.k1 == r.k2 {
                return Err(Error::invalid(format!(
                    "row pair ({}, {}) invalid for {k} projections",
                    r.k1, r.k2
                )));
            }
            if !(0.0..2.0 * PI).contains(&r.alpha) || !(0.0..2.0 * PI).contains(&r.beta) {
                return Err(Error::invalid("row angles must lie in [0, 2π)"));
            }
        }
        Ok(ShiftSystem { k, rows, b })
    }

    /// Number of projections `K`; the system has `2K` columns.
    pub fn n_projections(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> &[ShiftRow] {
        &self.rows
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Structural nonzeros as `(row, column, value)`.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(m, r)| {
                r.columns()
                    .into_iter()
                    .zip(r.coefficients())
                    .map(move |(c, v)| (m, c, v))
            })
            .collect()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.rows.len(), 2 * self.k);
        for (m, c, v) in self.triplets() {
            a[(m, c)] += v;
        }
        a
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.apply(x)).collect()
    }

    /// `‖A x − b‖₂`.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.apply(x)
            .iter()
            .zip(&self.b)
            .map(|(ax, b)| (ax - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Eigenpairs of `AᵀA` spanning the observable subspace.
    ///
    /// A common 3D translation of the object shifts every image consistently
    /// and leaves all offsets unchanged, so three directions are unobservable.
    /// Quantized common-line angles make them only approximately null, hence
    /// the three smallest eigenvalues are always dropped along with any below
    /// the relative rank tolerance.
    fn observable_eigen(&self) -> Vec<(f64, DVector<f64>)> {
        let n = 2 * self.k;
        let mut ata = DMatrix::zeros(n, n);
        for r in &self.rows {
            let (c, v) = (r.columns(), r.coefficients());
            for a in 0..4 {
                for b in 0..4 {
                    ata[(c[a], c[b])] += v[a] * v[b];
                }
            }
        }
        let eig = ata.symmetric_eigen();
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let tol = top * 1e-10 * n as f64;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| f64::total_cmp(&eig.eigenvalues[a], &eig.eigenvalues[b]));
        order
            .into_iter()
            .skip(TRANSLATION_DIMS)
            .filter(|&i| eig.eigenvalues[i] > tol)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
            .collect()
    }

    /// Orthogonal projector onto the observable shift components.
    pub fn row_space_projector(&self) -> DMatrix<f64> {
        let n = 2 * self.k;
        let mut p = DMatrix::zeros(n, n);
        for (_, v) in self.observable_eigen() {
            p += &v * v.transpose();
        }
        p
    }
}

/// Dimension of the unobservable global translation.
const TRANSLATION_DIMS: usize = 3;

/// Stacked shifts `(X₁, Y₁, …, X_K, Y_K)` in the stencil layout, with the
/// residual of the system they solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEstimate {
    pub x: Vec<f64>,
    pub residual: f64,
    /// Refinement round that produced the estimate (0 for an initial guess).
    pub round: usize,
}

impl ShiftEstimate {
    pub fn zeros(k: usize) -> Self {
        ShiftEstimate {
            x: vec![0.0; 2 * k],
            residual: 0.0,
            round: 0,
        }
    }

    pub fn from_shift_vector(shifts: &ShiftVector) -> Self {
        ShiftEstimate {
            x: shifts.as_slice().iter().flat_map(|&[dx, dy]| [dy, dx]).collect(),
            residual: 0.0,
            round: 0,
        }
    }

    /// Per-projection `(dx, dy)` in image column/row pixels.
    pub fn to_shift_vector(&self) -> ShiftVector {
        ShiftVector::new(self.x.chunks_exact(2).map(|p| [p[1], p[0]]).collect())
    }

    pub fn len(&self) -> usize {
        self.x.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Stencil row of a detected common line. Ray indices past `n_theta`
/// address the conjugate half, which the angle `π c / n_theta` covers.
fn row_for(cl: &CommonLineTable, k1: usize, k2: usize) -> ShiftRow {
    let nt = cl.n_theta() as f64;
    ShiftRow {
        k1,
        k2,
        alpha: PI * cl.index(k1, k2) as f64 / nt,
        beta: PI * cl.index(k2, k1) as f64 / nt,
    }
}

/// Assembles one row per non-degenerate pair from common lines detected on
/// `corrected`, measuring `s*` on the rays of `original`. Pairs whose
/// correlation is below `ncc_floor` are dropped when a floor is given.
pub fn build_system(
    original: &PolarStack,
    corrected: &PolarStack,
    cl: &CommonLineTable,
    s_range: f64,
    s_step: f64,
    ncc_floor: Option<f64>,
) -> Result<ShiftSystem> {
    if original.len() != corrected.len() || cl.n() != original.len() {
        return Err(Error::invalid("stacks and common-line table differ in size"));
    }
    if original.is_corrected() {
        return Err(Error::invalid("shift offsets must be measured on uncorrected rays"));
    }
    if cl.n_theta() != original.n_theta() {
        return Err(Error::invalid("common-line table and stack differ in n_theta"));
    }
    let pairs: Vec<(usize, usize)> = cl
        .pairs()
        .filter(|&(i, j)| !cl.is_degenerate(i, j))
        .filter(|&(i, j)| ncc_floor.is_none_or(|f| cl.ncc(i, j) >= f))
        .collect();
    let freq = original.freq_grid();
    let measured: Vec<(ShiftRow, f64)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let row = row_for(cl, i, j);
            let r1 = original.extract_ray(i, cl.index(i, j))?;
            let r2 = original.extract_ray(j, cl.index(j, i))?;
            Ok((row, estimate_ray_shift(&r1, &r2, freq, s_range, s_step)?))
        })
        .collect::<Result<_>>()?;
    let (rows, b) = measured.into_iter().unzip();
    ShiftSystem::new(original.len(), rows, b)
}

/// Minimum-norm least-squares solution through the pseudo-inverse of `AᵀA`
/// restricted to the observable subspace, so the common 3D translation
/// comes out zero.
pub fn solve_shifts(sys: &ShiftSystem) -> Result<ShiftEstimate> {
    if sys.rows.is_empty() {
        return Err(Error::Degenerate("shift system has no rows".into()));
    }
    let n = 2 * sys.k;
    let mut atb = DVector::zeros(n);
    for (r, &b) in sys.rows.iter().zip(&sys.b) {
        for (c, v) in r.columns().into_iter().zip(r.coefficients()) {
            atb[c] += v * b;
        }
    }
    let mut x = DVector::zeros(n);
    for (l, v) in sys.observable_eigen() {
        x += &v * (v.dot(&atb) / l);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite shift solution".into()));
    }
    let x: Vec<f64> = x.iter().copied().collect();
    Ok(ShiftEstimate {
        residual: sys.residual(&x),
        x,
        round: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    /// Stop when `‖x(t) − x(t−1)‖₂` falls below this (pixels).
    pub epsilon: f64,
    pub max_rounds: usize,
    /// Offset search half-width in pixels; `None` means `side / 4`.
    pub s_range: Option<f64>,
    pub s_step: f64,
    /// Drop pairs whose common-line correlation is below this.
    pub ncc_floor: Option<f64>,
    /// Detect common lines with a relative-offset search of this spacing
    /// (pixels, over `±s_range`); `None` uses plain correlation.
    pub search_step: Option<f64>,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            epsilon: 0.05,
            max_rounds: 10,
            s_range: None,
            s_step: 0.25,
            ncc_floor: None,
            search_step: Some(0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub round: usize,
    pub residual: f64,
    /// `‖x(t) − x(t−1)‖₂`, pixels.
    pub step: f64,
    pub rows: usize,
    /// Mean common-line correlation of the round's detection.
    pub mean_ncc: f64,
    /// Percentage of pairs within one ray of a reference table, when given.
    pub agreement_pct: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ShiftRefinement {
    /// Estimate of the lowest-residual round.
    pub estimate: ShiftEstimate,
    /// Common lines detected in the returned round.
    pub common_lines: CommonLineTable,
    pub rounds: Vec<RoundDiagnostics>,
    pub converged: bool,
}

impl ShiftRefinement {
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "round,residual,step,rows,mean_ncc,agreement_pct")?;
        for r in &self.rounds {
            let pct = r.agreement_pct.map_or_else(String::new, |p| p.to_string());
            writeln!(
                w,
                "{},{},{},{},{},{pct}",
                r.round, r.residual, r.step, r.rows, r.mean_ncc
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Relative residual change below which the residual counts as converged.
const RESIDUAL_RTOL: f64 = 1e-6;

/// Alternates phase correction, common-line detection, system assembly and
/// solving until the shift update drops below `epsilon` or the residual
/// stops changing, for at most `max_rounds` rounds. The lowest-residual
/// round is returned; `converged` is false when the cap was hit.
pub fn refine_shifts(pol: &PolarStack, x0: &ShiftEstimate, cfg: &ShiftConfig) -> Result<ShiftRefinement> {
    refine_shifts_traced(pol, x0, cfg, None)
}

/// [`refine_shifts`] that also scores every round's detection against a
/// reference table, typically the oracle common lines of known poses.
pub fn refine_shifts_traced(
    pol: &PolarStack,
    x0: &ShiftEstimate,
    cfg: &ShiftConfig,
    reference: Option<&CommonLineTable>,
) -> Result<ShiftRefinement> {
    if reference.is_some_and(|r| r.n() != pol.len() || r.n_theta() != pol.n_theta()) {
        return Err(Error::invalid("reference common-line table does not match the stack"));
    }
    if x0.len() != pol.len() {
        return Err(Error::invalid(format!(
            "{} initial shifts for {} projections",
            x0.len(),
            pol.len()
        )));
    }
    if x0.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial shifts must be finite"));
    }
    if cfg.max_rounds == 0 || !(cfg.epsilon >= 0.0) {
        return Err(Error::invalid("max_rounds must be >= 1 and epsilon >= 0"));
    }
    let s_range = cfg.s_range.unwrap_or(pol.side() as f64 / 4.0);
    let mut x = x0.clone();
    let mut rounds = Vec::new();
    let mut best: Option<(ShiftEstimate, CommonLineTable)> = None;
    let mut converged = false;
    let mut prev_residual: Option<f64> = None;
    for t in 1..=cfg.max_rounds {
        let corrected = phase_correct(pol, &x.to_shift_vector())?;
        let cl = match cfg.search_step {
            Some(step) => detect_common_lines_shifted(&corrected, s_range, step)?,
            None => detect_common_lines(&corrected)?,
        };
        let sys = build_system(pol, &corrected, &cl, s_range, cfg.s_step, cfg.ncc_floor)?;
        let mut next = solve_shifts(&sys)?;
        next.round = t;
        let step = next
            .x
            .iter()
            .zip(&x.x)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scores: Vec<f64> = cl
            .pairs()
            .filter(|&(i, j)| !cl.is_degenerate(i, j))
            .map(|(i, j)| cl.ncc(i, j))
            .collect();
        rounds.push(RoundDiagnostics {
            round: t,
            residual: next.residual,
            step,
            rows: sys.rows.len(),
            mean_ncc: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
            agreement_pct: reference.map(|r| 100.0 * agreement(&cl, r, 1)),
        });
        if best.as_ref().is_none_or(|(b, _)| next.residual < b.residual) {
            best = Some((next.clone(), cl));
        }
        let settled = prev_residual.is_some_and(|p| (next.residual - p).abs() <= RESIDUAL_RTOL * p.max(1e-12));
        prev_residual = Some(next.residual);
        x = next;
        if step < cfg.epsilon || settled {
            converged = true;
            break;
        }
    }
    let (estimate, common_lines) = best.expect("at least one round ran");
    Ok(ShiftRefinement {
        estimate,
        common_lines,
        rounds,
        converged,
    })
}
