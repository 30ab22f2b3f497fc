//! Common-line detection between projection pairs and dihedral-angle voting.
//!
//! Ray indices follow [`crate::polarfft`]: zero-based, `c ∈ [0, 2·n_theta)`,
//! angle `π c / n_theta`. For `i < j` the stored pair is canonical with
//! `c_ij < n_theta`; the common line of `(i, j)` is only defined up to a joint
//! flip of both indices by `n_theta`.

use nalgebra::{DMatrix, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::polarfft::PolarStack;
use crate::simdata::Rotation;
use crate::{Error, Result};

/// Pairs with `|d_i·d_j|` at or above this have no unique common line.
const PARALLEL_TOL: f64 = 1e-9;
/// Votes from triplets with `|sin γ_i sin γ_j|` below this are dropped.
const MIN_SIN_PRODUCT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CommonLineTable {
    n: usize,
    n_theta: usize,
    cl_index: Vec<usize>,
    ncc: Vec<f64>,
    degenerate: Vec<bool>,
}

impl CommonLineTable {
    /// Builds a table from the upper triangle `(i, j, c_ij, c_ji, ncc)`;
    /// pairs not listed are marked degenerate.
    pub fn from_pairs(
        n: usize,
        n_theta: usize,
        pairs: impl IntoIterator<Item = (usize, usize, usize, usize, f64)>,
    ) -> Result<Self> {
        let mut t = CommonLineTable {
            n,
            n_theta,
            cl_index: vec![0; n * n],
            ncc: vec![0.0; n * n],
            degenerate: vec![true; n * n],
        };
        for (i, j, cij, cji, score) in pairs {
            if i >= n || j >= n || i == j || cij >= 2 * n_theta || cji >= 2 * n_theta {
                return Err(Error::invalid(format!(
                    "bad common-line entry ({i}, {j}, {cij}, {cji})"
                )));
            }
            t.set(i, j, cij, cji, score, false);
        }
        Ok(t)
    }

    fn set(&mut self, i: usize, j: usize, cij: usize, cji: usize, score: f64, degenerate: bool) {
        let n = self.n;
        self.cl_index[i * n + j] = cij;
        self.cl_index[j * n + i] = cji;
        self.ncc[i * n + j] = score;
        self.ncc[j * n + i] = score;
        self.degenerate[i * n + j] = degenerate;
        self.degenerate[j * n + i] = degenerate;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    /// Ray index of the common line of `(i, j)` as seen in image `i`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        self.cl_index[i * self.n + j]
    }

    /// `C_ij` in radians, in `[0, 2π)`.
    pub fn angle(&self, i: usize, j: usize) -> f64 {
        PI * self.index(i, j) as f64 / self.n_theta as f64
    }

    pub fn ncc(&self, i: usize, j: usize) -> f64 {
        self.ncc[i * self.n + j]
    }

    pub fn is_degenerate(&self, i: usize, j: usize) -> bool {
        i == j || self.degenerate[i * self.n + j]
    }

    /// `C` as an `n × n` matrix (diagonal zero).
    pub fn angles(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| if i == j { 0.0 } else { self.angle(i, j) })
    }

    /// Upper-triangle pairs in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| (i + 1..self.n).map(move |j| (i, j)))
    }
}

/// Cyclic distance between two ray indices on `2·n_theta` rays.
fn ray_distance(a: usize, b: usize, n_theta: usize) -> usize {
    let m = 2 * n_theta;
    let d = (a + m - b) % m;
    d.min(m - d)
}

/// Whether two `(c_ij, c_ji)` detections agree within `tol` rays, allowing
/// the joint half-turn ambiguity.
pub fn pair_matches(a: (usize, usize), b: (usize, usize), n_theta: usize, tol: usize) -> bool {
    let close = |x: (usize, usize), y: (usize, usize)| {
        ray_distance(x.0, y.0, n_theta) <= tol && ray_distance(x.1, y.1, n_theta) <= tol
    };
    let flipped = ((b.0 + n_theta) % (2 * n_theta), (b.1 + n_theta) % (2 * n_theta));
    close(a, b) || close(a, flipped)
}

/// Fraction of pairs, non-degenerate in both tables, whose common lines
/// agree within `tol` rays. Returns 0 when no pair is comparable.
pub fn agreement(a: &CommonLineTable, b: &CommonLineTable, tol: usize) -> f64 {
    assert_eq!((a.n, a.n_theta), (b.n, b.n_theta), "tables must have the same shape");
    let (mut hits, mut total) = (0usize, 0usize);
    for (i, j) in a.pairs() {
        if a.is_degenerate(i, j) || b.is_degenerate(i, j) {
            continue;
        }
        total += 1;
        if pair_matches(
            (a.index(i, j), a.index(j, i)),
            (b.index(i, j), b.index(j, i)),
            a.n_theta,
            tol,
        ) {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Mean-removed, unit-norm rays of one image as real and imaginary parts
/// (`n_theta × n_r`). `None` when every ray vanishes.
fn normalized_rays(pol: &PolarStack, k: usize) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let (nt, nr) = (pol.n_theta(), pol.n_r());
    let mut re = DMatrix::zeros(nt, nr);
    let mut im = DMatrix::zeros(nt, nr);
    let mut any = false;
    for l in 0..nt {
        let ray = pol.ray(k, l);
        let mean = ray.iter().sum::<Complex64>() / nr as f64;
        let norm = ray.iter().map(|v| (v - mean).norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 1e-300) {
            continue;
        }
        any = true;
        for (m, v) in ray.iter().enumerate() {
            let z = (v - mean) / norm;
            re[(l, m)] = z.re;
            im[(l, m)] = z.im;
        }
    }
    any.then_some((re, im))
}

/// Best `(l1, l2, score)` with `l1 < n_theta`, `l2 < 2·n_theta`; the first
/// maximum in row-major order wins.
fn best_match(
    (re_i, im_i): &(DMatrix<f64>, DMatrix<f64>),
    (re_j, im_j): &(DMatrix<f64>, DMatrix<f64>),
) -> (usize, usize, f64) {
    let nt = re_i.nrows();
    let p = re_i * re_j.transpose();
    let q = im_i * im_j.transpose();
    let mut best = (0, 0, f64::NEG_INFINITY);
    for l1 in 0..nt {
        for l2 in 0..2 * nt {
            let s = if l2 < nt {
                p[(l1, l2)] + q[(l1, l2)]
            } else {
                p[(l1, l2 - nt)] - q[(l1, l2 - nt)]
            };
            if s > best.2 {
                best = (l1, l2, s);
            }
        }
    }
    best
}

/// Detects the common line of every pair by normalized cross-correlation of
/// polar rays.
pub fn detect_common_lines(pol: &PolarStack) -> Result<CommonLineTable> {
    let n = pol.len();
    if n < 3 {
        return Err(Error::invalid(format!(
            "common-line detection needs >= 3 projections, got {n}"
        )));
    }
    let nt = pol.n_theta();
    let rays: Vec<_> = (0..n).into_par_iter().map(|k| normalized_rays(pol, k)).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let found: Vec<Option<(usize, usize, f64)>> = pairs
        .par_iter()
        .map(|&(i, j)| match (&rays[i], &rays[j]) {
            (Some(a), Some(b)) => Some(best_match(a, b)),
            _ => None,
        })
        .collect();
    let mut table = CommonLineTable::from_pairs(n, nt, [])?;
    for (&(i, j), hit) in pairs.iter().zip(found) {
        match hit {
            Some((l1, l2, s)) if s.is_finite() => table.set(i, j, l1, l2, s.clamp(-1.0, 1.0), false),
            Some(_) => return Err(Error::Numerical(format!("non-finite correlation for pair ({i}, {j})"))),
            None => table.set(i, j, 0, 0, 0.0, true),
        }
    }
    Ok(table)
}

/// Unit-norm rays of one image as real and imaginary parts, without mean
/// removal so that applying a phase ramp commutes with normalization.
fn unit_rays(pol: &PolarStack, k: usize) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let (nt, nr) = (pol.n_theta(), pol.n_r());
    let mut re = DMatrix::zeros(nt, nr);
    let mut im = DMatrix::zeros(nt, nr);
    let mut any = false;
    for l in 0..nt {
        let ray = pol.ray(k, l);
        let norm = ray.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt();
        if !(norm > 1e-300) {
            continue;
        }
        any = true;
        for (m, v) in ray.iter().enumerate() {
            re[(l, m)] = v.re / norm;
            im[(l, m)] = v.im / norm;
        }
    }
    any.then_some((re, im))
}

/// Common lines of images whose relative in-plane shifts are unknown: every
/// candidate ray pair is scored at its best relative offset `s` on the grid
/// `[−s_range, s_range]` (spacing `s_step`), i.e. by
/// `max_s Re⟨r̂_{i,l1} ⊙ e^{−2πi s f}, r̂_{j,l2}⟩` with unit-norm rays.
pub fn detect_common_lines_shifted(pol: &PolarStack, s_range: f64, s_step: f64) -> Result<CommonLineTable> {
    let n = pol.len();
    if n < 3 {
        return Err(Error::invalid(format!(
            "common-line detection needs >= 3 projections, got {n}"
        )));
    }
    if !(s_range >= 0.0) || !(s_step > 0.0) || !s_range.is_finite() {
        return Err(Error::invalid("shift search needs s_range >= 0 and s_step > 0"));
    }
    let nt = pol.n_theta();
    let half = (s_range / s_step + 1e-9).floor() as i64;
    let phases: Vec<Vec<Complex64>> = (-half..=half)
        .map(|m| {
            let s = m as f64 * s_step;
            pol.freq_grid()
                .iter()
                .map(|f| Complex64::from_polar(1.0, -2.0 * PI * s * f))
                .collect()
        })
        .collect();
    let rays: Vec<_> = (0..n).into_par_iter().map(|k| unit_rays(pol, k)).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let found: Vec<Option<(usize, usize, f64)>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let ((re_i, im_i), b) = match (&rays[i], &rays[j]) {
                (Some(a), Some(b)) => (a, b),
                _ => return None,
            };
            let mut best = (0, 0, f64::NEG_INFINITY);
            for ph in &phases {
                let mut re = re_i.clone();
                let mut im = im_i.clone();
                for (m, p) in ph.iter().enumerate() {
                    for l in 0..nt {
                        let z = Complex64::new(re_i[(l, m)], im_i[(l, m)]) * p;
                        re[(l, m)] = z.re;
                        im[(l, m)] = z.im;
                    }
                }
                let hit = best_match(&(re, im), b);
                if hit.2 > best.2 {
                    best = hit;
                }
            }
            Some(best)
        })
        .collect();
    let mut table = CommonLineTable::from_pairs(n, nt, [])?;
    for (&(i, j), hit) in pairs.iter().zip(found) {
        match hit {
            Some((l1, l2, s)) if s.is_finite() => table.set(i, j, l1, l2, s.clamp(-1.0, 1.0), false),
            Some(_) => return Err(Error::Numerical(format!("non-finite correlation for pair ({i}, {j})"))),
            None => table.set(i, j, 0, 0, 0.0, true),
        }
    }
    Ok(table)
}

/// Exact common-line angles from known rotations. Each pair shares one line
/// direction `u = d_a × d_b / ‖d_a × d_b‖` with `a < b`, seen in image `i` at
/// `C_ij = atan2(u·y_i, u·q_i)` in `[0, 2π)`, so the rays at `C_ij` and
/// `C_ji` sample the same 3D Fourier line. Near-parallel pairs are `None`.
pub fn oracle_angles(rotations: &[Rotation]) -> Vec<Vec<Option<f64>>> {
    let n = rotations.len();
    let mut out = vec![vec![None; n]; n];
    let angle = |r: &Rotation, u: &Vector3<f64>| u.dot(&r.y()).atan2(u.dot(&r.q())).rem_euclid(2.0 * PI);
    for i in 0..n {
        for j in i + 1..n {
            let (ri, rj) = (&rotations[i], &rotations[j]);
            if ri.d().dot(&rj.d()).abs() >= 1.0 - PARALLEL_TOL {
                continue;
            }
            let u: Vector3<f64> = ri.d().cross(&rj.d()).normalize();
            out[i][j] = Some(angle(ri, &u));
            out[j][i] = Some(angle(rj, &u));
        }
    }
    out
}

/// Ground-truth common lines quantized to the nearest ray.
pub fn oracle_common_lines(rotations: &[Rotation], n_theta: usize) -> Result<CommonLineTable> {
    if n_theta == 0 {
        return Err(Error::invalid("n_theta must be positive"));
    }
    let n = rotations.len();
    let angles = oracle_angles(rotations);
    let m = 2 * n_theta;
    let quantize = |c: f64| ((c * n_theta as f64 / PI).round() as usize) % m;
    let mut table = CommonLineTable::from_pairs(n, n_theta, [])?;
    for i in 0..n {
        for j in i + 1..n {
            if let (Some(a), Some(b)) = (angles[i][j], angles[j][i]) {
                let (mut cij, mut cji) = (quantize(a), quantize(b));
                if cij >= n_theta {
                    cij -= n_theta;
                    cji = (cji + n_theta) % m;
                }
                table.set(i, j, cij, cji, 1.0, false);
            } else {
                table.set(i, j, 0, 0, 0.0, true);
            }
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DihedralTable {
    n: usize,
    theta: DMatrix<f64>,
    weights: DMatrix<f64>,
    sigma: f64,
    t: usize,
}

impl DihedralTable {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `Θ`, symmetric, entries in `[0, π]`, diagonal zero.
    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    /// `W`, symmetric, nonnegative, diagonal zero.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn resolution(&self) -> usize {
        self.t
    }

    /// Same angles with weights replaced (ablations and tests).
    pub fn with_weights(&self, weights: DMatrix<f64>) -> Result<Self> {
        if weights.shape() != (self.n, self.n) || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights must be n x n, finite and nonnegative"));
        }
        Ok(DihedralTable {
            weights,
            ..self.clone()
        })
    }

    /// Builds a table directly from `Θ` and `W` (tests and ablations).
    pub fn from_parts(theta: DMatrix<f64>, weights: DMatrix<f64>, t: usize) -> Result<Self> {
        let n = theta.nrows();
        if theta.shape() != (n, n) || weights.shape() != (n, n) {
            return Err(Error::invalid("theta and W must be square and equal-sized"));
        }
        let table = DihedralTable {
            n,
            theta,
            weights: DMatrix::zeros(n, n),
            sigma: PI / t.max(1) as f64,
            t,
        };
        table.with_weights(weights)
    }
}

/// Candidate dihedral angle of `(i, j)` from the third image `k`, or `None`
/// when the triplet is infeasible.
///
/// The angles between common lines are taken with orientation
/// (`γ_i = C_ij − C_ik`, `γ_j = C_jk − C_ji`, `γ_k = C_ki − C_kj`), which makes
/// the spherical law of cosines return the dihedral angle itself rather than
/// its supplement for every arrangement of the three planes.
pub fn triplet_dihedral(cl: &CommonLineTable, i: usize, j: usize, k: usize) -> Option<f64> {
    if cl.is_degenerate(i, j) || cl.is_degenerate(i, k) || cl.is_degenerate(j, k) {
        return None;
    }
    dihedral_from_lines(
        [cl.angle(i, j), cl.angle(i, k)],
        [cl.angle(j, i), cl.angle(j, k)],
        [cl.angle(k, i), cl.angle(k, j)],
    )
}

/// [`triplet_dihedral`] on raw angles: `[C_ij, C_ik]`, `[C_ji, C_jk]`,
/// `[C_ki, C_kj]`.
pub fn dihedral_from_lines(ci: [f64; 2], cj: [f64; 2], ck: [f64; 2]) -> Option<f64> {
    let gi = ci[0] - ci[1];
    let gj = cj[1] - cj[0];
    let gk = ck[0] - ck[1];
    let denom = gi.sin() * gj.sin();
    if denom.abs() < MIN_SIN_PRODUCT {
        return None;
    }
    let c = (gi.cos() * gj.cos() - gk.cos()) / denom;
    (c.abs() <= 1.0).then(|| c.acos())
}

fn gaussian(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}

fn histogram_at(votes: &[f64], norm: f64, sigma: f64, t: f64) -> f64 {
    votes.iter().map(|&v| gaussian(t - v, sigma)).sum::<f64>() / norm
}

/// Peak `(Θ, W)` of the Gaussian-kernel vote histogram normalized by
/// `norm` (the number of third images).
///
/// The peak is located on the grid `k·π/(4T)` and then polished by
/// mean-shift iterations, which climb the same kernel density and land on
/// the exact mode. Returns `(π/2, 0)` without votes.
pub fn vote_histogram(votes: &[f64], norm: f64, t: usize) -> (f64, f64) {
    if votes.is_empty() || norm <= 0.0 {
        return (PI / 2.0, 0.0);
    }
    let sigma = PI / t as f64;
    let n_grid = 4 * t + 1;
    let step = PI / (4 * t) as f64;
    let reach = (8.0 * sigma / step).ceil() as isize;
    let mut hist = vec![0.0; n_grid];
    for &v in votes {
        let centre = (v / step).round() as isize;
        for g in (centre - reach).max(0)..=(centre + reach).min(n_grid as isize - 1) {
            hist[g as usize] += gaussian(g as f64 * step - v, sigma);
        }
    }
    let mut g_best = 0;
    for (g, &h) in hist.iter().enumerate() {
        if h > hist[g_best] {
            g_best = g;
        }
    }
    let mut x = g_best as f64 * step;
    let mut h_best = histogram_at(votes, norm, sigma, x);
    for _ in 0..200 {
        let (mut num, mut den) = (0.0, 0.0);
        for &v in votes {
            let w = gaussian(x - v, sigma);
            num += w * v;
            den += w;
        }
        if den <= 0.0 {
            break;
        }
        let next = (num / den).clamp(0.0, PI);
        let h = histogram_at(votes, norm, sigma, next);
        if h < h_best {
            break;
        }
        let moved = (next - x).abs();
        x = next;
        h_best = h;
        if moved < 1e-13 {
            break;
        }
    }
    (x, h_best)
}

/// Votes dihedral angles `Θ_ij` and confidence weights `W_ij` from all third
/// images, with kernel width `σ = π/T`.
pub fn vote_dihedrals(cl: &CommonLineTable, t: usize) -> Result<DihedralTable> {
    let n = cl.n();
    if n < 3 {
        return Err(Error::invalid(format!("voting needs >= 3 projections, got {n}")));
    }
    if t < 18 {
        return Err(Error::invalid(format!("histogram resolution T must be >= 18, got {t}")));
    }
    let pairs: Vec<(usize, usize)> = cl.pairs().collect();
    let peaks: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            if cl.is_degenerate(i, j) {
                return (PI / 2.0, 0.0);
            }
            let votes: Vec<f64> = (0..n)
                .filter(|&k| k != i && k != j)
                .filter_map(|k| triplet_dihedral(cl, i, j, k))
                .collect();
            vote_histogram(&votes, (n - 2) as f64, t)
        })
        .collect();
    let mut theta = DMatrix::zeros(n, n);
    let mut weights = DMatrix::zeros(n, n);
    for (&(i, j), &(th, w)) in pairs.iter().zip(&peaks) {
        theta[(i, j)] = th;
        theta[(j, i)] = th;
        weights[(i, j)] = w;
        weights[(j, i)] = w;
    }
    Ok(DihedralTable {
        n,
        theta,
        weights,
        sigma: PI / t as f64,
        t,
    })
}

/// CSV rows `i,j,c_ij,c_ji,ncc,theta,w` over the upper triangle.
pub fn write_commonlines_csv(path: &Path, cl: &CommonLineTable, dihedral: &DihedralTable) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "i,j,c_ij,c_ji,ncc,theta,w")?;
    for (i, j) in cl.pairs() {
        writeln!(
            w,
            "{i},{j},{},{},{},{},{}",
            cl.index(i, j),
            cl.index(j, i),
            cl.ncc(i, j),
            dihedral.theta()[(i, j)],
            dihedral.weights()[(i, j)]
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polarfft::{polar_transform_images, PolarParams};
    use crate::simdata::{apply_shift, make_phantom, project, random_rotations, GaussianBlobPhantom, Image};
    use proptest::prelude::*;

    fn rot_x(angle: f64) -> Rotation {
        Rotation::about_axis(&Vector3::x(), angle)
    }

    #[test]
    fn oracle_hand_case() {
        // d_i = e_z, d_j = R_x(90°) e_z = -e_y: u = e_z × (-e_y) = e_x.
        let rots = [Rotation::identity(), rot_x(PI / 2.0)];
        let a = oracle_angles(&rots);
        assert!(a[0][1].unwrap().abs() < 1e-12);
        // In image j, q_j = e_x, so u lies on its x-axis as well.
        let c = a[1][0].unwrap();
        assert!(c.min(2.0 * PI - c) < 1e-12);
        let t = oracle_common_lines(&rots, 180).unwrap();
        assert_eq!((t.index(0, 1), t.index(1, 0)), (0, 0));
    }

    #[test]
    fn oracle_parallel_is_degenerate() {
        let r = random_rotations(1, 3).unwrap()[0];
        let t = oracle_common_lines(&[r, r, rot_x(0.3)], 90).unwrap();
        assert!(t.is_degenerate(0, 1));
        assert!(!t.is_degenerate(0, 2));
    }

    #[test]
    fn oracle_invariant_under_global_rotation() {
        let rots = random_rotations(8, 11).unwrap();
        let g = random_rotations(1, 12).unwrap()[0];
        let moved: Vec<_> = rots.iter().map(|r| g.compose(r)).collect();
        let (a, b) = (oracle_angles(&rots), oracle_angles(&moved));
        for i in 0..8 {
            for j in 0..8 {
                if let (Some(x), Some(y)) = (a[i][j], b[i][j]) {
                    let d = (x - y).rem_euclid(2.0 * PI);
                    assert!(d.min(2.0 * PI - d) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn oracle_line_lies_in_both_planes() {
        // Geometric cross-check: the ray directions map to the same lab vector.
        let rots = random_rotations(6, 4).unwrap();
        let a = oracle_angles(&rots);
        for i in 0..6 {
            for j in 0..6 {
                if i == j {
                    continue;
                }
                let (ci, cj) = (a[i][j].unwrap(), a[j][i].unwrap());
                let ui = rots[i].q() * ci.cos() + rots[i].y() * ci.sin();
                let uj = rots[j].q() * cj.cos() + rots[j].y() * cj.sin();
                assert!((ui - uj).norm() < 1e-12);
            }
        }
    }

    fn phantom_polar(rots: &[Rotation], side: usize, n_theta: usize) -> PolarStack {
        let vol = make_phantom(&GaussianBlobPhantom::asymmetric(), side).unwrap();
        let images: Vec<Image> = rots.iter().map(|r| project(&vol, r)).collect();
        polar_transform_images(
            &images,
            PolarParams {
                n_theta,
                n_r: side / 2,
                rmax: 0.35,
            },
        )
        .unwrap()
    }

    #[test]
    fn identical_images_correlate_perfectly() {
        let rots = random_rotations(2, 5).unwrap();
        let pol = phantom_polar(&[rots[0], rots[0], rots[1]], 48, 72);
        let t = detect_common_lines(&pol).unwrap();
        assert!((t.ncc(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(t.index(0, 1), t.index(1, 0));
    }

    #[test]
    fn detects_hand_case_within_one_ray() {
        let third = Rotation::about_axis(&Vector3::new(1.0, 1.0, 0.0).normalize(), 1.1);
        let rots = [Rotation::identity(), rot_x(PI / 2.0), third];
        let pol = phantom_polar(&rots, 48, 90);
        let det = detect_common_lines(&pol).unwrap();
        let truth = oracle_common_lines(&rots, 90).unwrap();
        assert!(pair_matches((det.index(0, 1), det.index(1, 0)), (0, 0), 90, 1));
        assert_eq!(agreement(&det, &truth, 1), 1.0);
    }

    #[test]
    fn zero_image_pairs_are_degenerate() {
        let rots = random_rotations(2, 6).unwrap();
        let vol = make_phantom(&GaussianBlobPhantom::asymmetric(), 48).unwrap();
        let images = vec![project(&vol, &rots[0]), Image::zeros(48), project(&vol, &rots[1])];
        let pol = polar_transform_images(
            &images,
            PolarParams {
                n_theta: 36,
                n_r: 24,
                rmax: 0.35,
            },
        )
        .unwrap();
        let t = detect_common_lines(&pol).unwrap();
        assert!(t.is_degenerate(0, 1) && t.is_degenerate(1, 2));
        assert_eq!(t.ncc(0, 1), 0.0);
        assert!(!t.is_degenerate(0, 2));
        let v = vote_dihedrals(&t, 18).unwrap();
        assert_eq!(v.weights()[(0, 1)], 0.0);
    }

    #[test]
    fn shift_search_sees_through_offsets() {
        let rots = random_rotations(8, 11).unwrap();
        let vol = make_phantom(&GaussianBlobPhantom::asymmetric(), 48).unwrap();
        let params = PolarParams {
            n_theta: 90,
            n_r: 24,
            rmax: 0.35,
        };
        let images: Vec<Image> = rots
            .iter()
            .enumerate()
            .map(|(k, r)| {
                apply_shift(&project(&vol, r), 4.0 * (k as f64).cos(), -3.5 * (k as f64 * 0.7).sin()).unwrap()
            })
            .collect();
        let pol = polar_transform_images(&images, params).unwrap();
        let truth = oracle_common_lines(&rots, 90).unwrap();
        let searched = detect_common_lines_shifted(&pol, 12.0, 0.25).unwrap();
        let plain = detect_common_lines(&pol).unwrap();
        assert!(
            agreement(&searched, &truth, 1) >= 0.9,
            "{}",
            agreement(&searched, &truth, 1)
        );
        assert!(agreement(&plain, &truth, 1) < agreement(&searched, &truth, 1));
    }

    #[test]
    fn zero_range_search_scores_unit_rays() {
        let rots = random_rotations(2, 5).unwrap();
        let pol = phantom_polar(&[rots[0], rots[0], rots[1]], 48, 72);
        let t = detect_common_lines_shifted(&pol, 0.0, 1.0).unwrap();
        assert!((t.ncc(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(t.index(0, 1), t.index(1, 0));
        assert!(detect_common_lines_shifted(&pol, 4.0, 0.0).is_err());
    }

    #[test]
    fn too_few_projections_rejected() {
        let pol = polar_transform_images(
            &[Image::zeros(32), Image::zeros(32)],
            PolarParams {
                n_theta: 36,
                n_r: 16,
                rmax: 0.35,
            },
        )
        .unwrap();
        assert!(detect_common_lines(&pol).is_err());
    }

    #[test]
    fn equal_votes_give_exact_peak() {
        let t = 60;
        let sigma = PI / t as f64;
        for t0 in [0.0, 0.4321, 1.0, PI / 2.0, 2.9, PI] {
            let (th, w) = vote_histogram(&[t0; 28], 28.0, t);
            assert!((th - t0).abs() < 1e-9);
            assert!((w - 1.0 / (sigma * (2.0 * PI).sqrt())).abs() < 1e-9, "t0={t0}: {w}");
        }
    }

    #[test]
    fn no_votes_is_uninformative() {
        assert_eq!(vote_histogram(&[], 5.0, 60), (PI / 2.0, 0.0));
    }

    #[test]
    fn voting_recovers_true_dihedrals() {
        let rots = random_rotations(30, 21).unwrap();
        let cl = oracle_common_lines(&rots, 180).unwrap();
        let v = vote_dihedrals(&cl, 60).unwrap();
        let mut err = 0.0;
        let mut count = 0;
        for (i, j) in cl.pairs() {
            let truth = rots[i].d().dot(&rots[j].d()).clamp(-1.0, 1.0).acos();
            err += (v.theta()[(i, j)] - truth).abs();
            count += 1;
            assert_eq!(v.theta()[(i, j)], v.theta()[(j, i)]);
        }
        assert!(err / (count as f64) < 0.05);
    }

    #[test]
    fn exact_triplets_give_true_dihedral() {
        // Unquantized oracle angles: every feasible vote equals the truth.
        let rots = random_rotations(12, 2).unwrap();
        let a = oracle_angles(&rots);
        for i in 0..12 {
            for j in (i + 1)..12 {
                let truth = rots[i].d().dot(&rots[j].d()).clamp(-1.0, 1.0).acos();
                for k in (0..12).filter(|&k| k != i && k != j) {
                    let c = |x: usize, y: usize| a[x][y].unwrap();
                    if let Some(th) = dihedral_from_lines([c(i, j), c(i, k)], [c(j, i), c(j, k)], [c(k, i), c(k, j)]) {
                        assert!((th - truth).abs() < 1e-6, "({i},{j},{k}): {th} vs {truth}");
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn dihedral_tables_are_symmetric(seed in 0u64..1000) {
            let rots = random_rotations(7, seed).unwrap();
            let v = vote_dihedrals(&oracle_common_lines(&rots, 90).unwrap(), 30).unwrap();
            for i in 0..7 {
                prop_assert_eq!(v.weights()[(i, i)], 0.0);
                for j in 0..7 {
                    prop_assert_eq!(v.theta()[(i, j)], v.theta()[(j, i)]);
                    prop_assert_eq!(v.weights()[(i, j)], v.weights()[(j, i)]);
                    prop_assert!(v.weights()[(i, j)] >= 0.0);
                    prop_assert!((0.0..=PI).contains(&v.theta()[(i, j)]));
                }
            }
        }

        #[test]
        fn agreement_is_reflexive_and_flip_invariant(seed in 0u64..1000, tol in 0usize..3) {
            let rots = random_rotations(6, seed).unwrap();
            let t = oracle_common_lines(&rots, 60).unwrap();
            prop_assert_eq!(agreement(&t, &t, tol), 1.0);
            let flipped = CommonLineTable::from_pairs(
                6,
                60,
                t.pairs().map(|(i, j)| (i, j, (t.index(i, j) + 60) % 120, (t.index(j, i) + 60) % 120, 1.0)),
            )
            .unwrap();
            prop_assert_eq!(agreement(&t, &flipped, tol), 1.0);
        }

        #[test]
        fn triplet_vote_ignores_joint_flips(seed in 0u64..1000) {
            let rots = random_rotations(3, seed).unwrap();
            let t = oracle_common_lines(&rots, 90).unwrap();
            let flipped = CommonLineTable::from_pairs(
                3,
                90,
                t.pairs().map(|(i, j)| (i, j, (t.index(i, j) + 90) % 180, (t.index(j, i) + 90) % 180, 1.0)),
            )
            .unwrap();
            let a = triplet_dihedral(&t, 0, 1, 2);
            let b = triplet_dihedral(&flipped, 0, 1, 2);
            match (a, b) {
                (Some(x), Some(y)) => prop_assert!((x.cos() - y.cos()).abs() < 1e-9),
                (None, None) => {}
                // Rounding may move a vote sitting exactly on the |cos| = 1 boundary.
                (Some(x), None) | (None, Some(x)) => prop_assert!(x.cos().abs() > 1.0 - 1e-9, "feasibility changed under flip"),
            }
        }
    }
}
