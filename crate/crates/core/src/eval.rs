//! Scoring of estimated poses and shifts against ground truth, Fourier shell
//! correlation, and a nearest-neighbour gridding reconstructor.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::fourier::{fft2, fft3, freq};
use crate::polarfft::ShiftVector;
use crate::simdata::{apply_shift, Image, ProjectionStack, Rotation, Volume};
use crate::{Error, Result};

/// Mirror used for the chirality branch.
fn mirror() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    /// Global rotation applied to the (possibly mirrored) estimates.
    pub g: Rotation,
    /// Estimates were conjugated by `diag(1, 1, −1)` before rotating.
    pub reflected: bool,
    /// Estimates mapped into the truth frame.
    pub aligned: Vec<Rotation>,
    /// Per-projection rotation distance to the truth, degrees.
    pub errors_deg: Vec<f64>,
}

/// `G ∈ SO(3)` maximizing `tr(G M)`.
fn procrustes(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = vt.transpose();
    let s = (v * u.transpose()).determinant().signum();
    v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, s)) * u.transpose()
}

/// Rotates (and if that fits better, mirrors) the estimates onto the truth
/// by orthogonal Procrustes on `Σ ‖G R̂_i − R_i‖_F²`.
pub fn align_global(est: &[Rotation], truth: &[Rotation]) -> Result<AlignmentResult> {
    if est.len() != truth.len() || est.len() < 2 {
        return Err(Error::invalid(
            "alignment needs two equal-length lists of >= 2 rotations",
        ));
    }
    let j = mirror();
    let branch = |reflected: bool| {
        let src: Vec<Matrix3<f64>> = est
            .iter()
            .map(|r| if reflected { j * r.matrix() * j } else { *r.matrix() })
            .collect();
        let m: Matrix3<f64> = src.iter().zip(truth).map(|(s, t)| s * t.matrix().transpose()).sum();
        let g = procrustes(&m);
        let cost: f64 = src
            .iter()
            .zip(truth)
            .map(|(s, t)| (g * s - t.matrix()).norm_squared())
            .sum();
        (cost, g, src)
    };
    let (c0, g0, s0) = branch(false);
    let (c1, g1, s1) = branch(true);
    let (reflected, g, src) = if c1 < c0 { (true, g1, s1) } else { (false, g0, s0) };
    let g = Rotation::from_matrix(g)?;
    let aligned: Vec<Rotation> = src
        .iter()
        .map(|s| Rotation::from_axes(&(g.matrix() * s.column(0)), &(g.matrix() * s.column(2))))
        .collect::<Result<_>>()?;
    let errors_deg = aligned
        .iter()
        .zip(truth)
        .map(|(a, t)| a.angle_to(t).to_degrees())
        .collect();
    Ok(AlignmentResult {
        g,
        reflected,
        aligned,
        errors_deg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean absolute error of pairwise viewing-direction angles, radians.
    pub theta_mae: f64,
    /// Mean absolute error of pairwise in-plane axis angles, radians.
    pub phi_mae: f64,
    /// Mean residual in-plane rotation, degrees.
    pub inplane_err_deg: f64,
    /// Mean angle between aligned and true viewing directions, degrees.
    pub normal_err_deg: f64,
    /// Mean squared ZYZ Euler angle differences `(α, β, γ)`, radians².
    pub euler_mse: [f64; 3],
    /// RMS shift error in the observable subspace, pixels.
    pub shift_rms_px: Option<f64>,
}

impl MetricReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "metric,value")?;
        for (k, v) in self.rows() {
            writeln!(w, "{k},{v}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn rows(&self) -> Vec<(&'static str, String)> {
        let mut rows = vec![
            ("theta_mae_rad", self.theta_mae.to_string()),
            ("phi_mae_rad", self.phi_mae.to_string()),
            ("inplane_err_deg", self.inplane_err_deg.to_string()),
            ("normal_err_deg", self.normal_err_deg.to_string()),
            ("euler_mse_alpha", self.euler_mse[0].to_string()),
            ("euler_mse_beta", self.euler_mse[1].to_string()),
            ("euler_mse_gamma", self.euler_mse[2].to_string()),
        ];
        if let Some(s) = self.shift_rms_px {
            rows.push(("shift_rms_px", s.to_string()));
        }
        rows
    }

    pub fn pretty(&self) -> String {
        let mut s = String::new();
        s += &format!("theta MAE        {:.6} rad\n", self.theta_mae);
        s += &format!("phi MAE          {:.6} rad\n", self.phi_mae);
        s += &format!("in-plane error   {:.4} deg\n", self.inplane_err_deg);
        s += &format!("normal error     {:.4} deg\n", self.normal_err_deg);
        s += &format!(
            "Euler MSE (ZYZ)  {:.3e} {:.3e} {:.3e} rad^2\n",
            self.euler_mse[0], self.euler_mse[1], self.euler_mse[2]
        );
        if let Some(r) = self.shift_rms_px {
            s += &format!("shift RMS        {r:.4} px\n");
        }
        s
    }
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    // atan2 form stays accurate near 0 and π.
    a.cross(b).norm().atan2(a.dot(b))
}

/// ZYZ angles `(α, β, γ)` with `R = R_z(α) R_y(β) R_z(γ)`.
pub fn euler_zyz(r: &Rotation) -> [f64; 3] {
    let m = r.matrix();
    let beta = m[(2, 2)].clamp(-1.0, 1.0).acos();
    let alpha = m[(1, 2)].atan2(m[(0, 2)]);
    let gamma = m[(2, 1)].atan2(-m[(2, 0)]);
    [alpha, beta, gamma]
}

/// Wraps an angle difference to `(−π, π]`.
fn wrap(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI {
        PI
    } else {
        y
    }
}

/// Residual in-plane rotation after the smallest rotation taking `d̂` onto
/// `d` is applied to `q̂`, radians in `[0, π]`.
fn inplane_residual(est: &Rotation, truth: &Rotation) -> f64 {
    let (d_hat, d) = (est.d(), truth.d());
    let axis = d_hat.cross(&d);
    let s = axis.norm();
    let turn = if s < 1e-15 {
        if d_hat.dot(&d) > 0.0 {
            Matrix3::identity()
        } else {
            // Antipodal: any half turn about an axis perpendicular to d.
            let perp = est.q();
            Rotation::about_axis(&perp, PI).matrix().to_owned()
        }
    } else {
        Rotation::about_axis(&(axis / s), s.atan2(d_hat.dot(&d)))
            .matrix()
            .to_owned()
    };
    angle_between(&(turn * est.q()), &truth.q())
}

/// Shift errors with every consistent 3D translation removed: the part of
/// `est − truth` orthogonal to `{(q_k·t, y_k·t)}_k` for `t ∈ R³`.
pub fn observable_shift_error(est: &ShiftVector, truth: &ShiftVector, rotations: &[Rotation]) -> Result<Vec<[f64; 2]>> {
    let k = rotations.len();
    if est.len() != k || truth.len() != k {
        return Err(Error::invalid("shift vectors and rotations differ in length"));
    }
    let mut basis = DMatrix::zeros(2 * k, 3);
    for (i, r) in rotations.iter().enumerate() {
        for a in 0..3 {
            basis[(2 * i, a)] = r.q()[a];
            basis[(2 * i + 1, a)] = r.y()[a];
        }
    }
    let e = DVector::from_iterator(
        2 * k,
        est.as_slice()
            .iter()
            .zip(truth.as_slice())
            .flat_map(|(a, b)| [a[0] - b[0], a[1] - b[1]]),
    );
    let gram = basis.transpose() * &basis;
    let coef = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("viewing directions do not span 3D".into()))?
        .solve(&(basis.transpose() * &e));
    let r = e - basis * coef;
    Ok((0..k).map(|i| [r[2 * i], r[2 * i + 1]]).collect())
}

/// RMS over projections of the observable 2D shift error, pixels.
pub fn observable_shift_rms(est: &ShiftVector, truth: &ShiftVector, rotations: &[Rotation]) -> Result<f64> {
    let r = observable_shift_error(est, truth, rotations)?;
    Ok((r.iter().map(|[x, y]| x * x + y * y).sum::<f64>() / r.len() as f64).sqrt())
}

/// Metrics of aligned estimates (see [`align_global`]). Shift error is
/// reported when both shift vectors are given.
pub fn metrics(
    aligned: &[Rotation],
    truth: &[Rotation],
    shifts: Option<(&ShiftVector, &ShiftVector)>,
) -> Result<MetricReport> {
    let n = aligned.len();
    if n != truth.len() || n < 2 {
        return Err(Error::invalid("metrics need two equal-length lists of >= 2 rotations"));
    }
    let (mut theta, mut phi, mut pairs) = (0.0, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            theta +=
                (angle_between(&aligned[i].d(), &aligned[j].d()) - angle_between(&truth[i].d(), &truth[j].d())).abs();
            phi +=
                (angle_between(&aligned[i].q(), &aligned[j].q()) - angle_between(&truth[i].q(), &truth[j].q())).abs();
            pairs += 1;
        }
    }
    let mean = |it: &mut dyn Iterator<Item = f64>| it.sum::<f64>() / n as f64;
    let normal = mean(
        &mut aligned
            .iter()
            .zip(truth)
            .map(|(a, t)| angle_between(&a.d(), &t.d()).to_degrees()),
    );
    let inplane = mean(
        &mut aligned
            .iter()
            .zip(truth)
            .map(|(a, t)| inplane_residual(a, t).to_degrees()),
    );
    let mut euler = [0.0; 3];
    for (a, t) in aligned.iter().zip(truth) {
        let (ea, et) = (euler_zyz(a), euler_zyz(t));
        for k in 0..3 {
            euler[k] += wrap(ea[k] - et[k]).powi(2) / n as f64;
        }
    }
    let shift_rms_px = match shifts {
        Some((est, tru)) => Some(observable_shift_rms(est, tru, truth)?),
        None => None,
    };
    Ok(MetricReport {
        theta_mae: theta / pairs as f64,
        phi_mae: phi / pairs as f64,
        inplane_err_deg: inplane,
        normal_err_deg: normal,
        euler_mse: euler,
        shift_rms_px,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FscCurve {
    /// Shell centres, cycles/voxel.
    pub frequency: Vec<f64>,
    pub correlation: Vec<f64>,
    /// Shells without power in either volume (correlation reported as 0).
    pub empty: Vec<bool>,
}

impl FscCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "frequency,fsc")?;
        for (f, c) in self.frequency.iter().zip(&self.correlation) {
            writeln!(w, "{f},{c}")?;
        }
        Ok(())
    }

    /// Smallest correlation over shells up to `max_freq` cycles/voxel.
    pub fn min_up_to(&self, max_freq: f64) -> f64 {
        self.frequency
            .iter()
            .zip(&self.correlation)
            .filter(|(f, _)| **f <= max_freq + 1e-12)
            .map(|(_, c)| *c)
            .fold(f64::INFINITY, f64::min)
    }
}

fn volume_spectrum(v: &Volume) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = v.data().iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft3(&mut data, v.side(), false);
    data
}

/// Fourier shell correlation over shells one frequency voxel wide, from DC
/// to Nyquist.
pub fn fsc(v1: &Volume, v2: &Volume) -> Result<FscCurve> {
    let n = v1.side();
    if v2.side() != n {
        return Err(Error::invalid("FSC needs volumes of the same size"));
    }
    let (f1, f2) = rayon::join(|| volume_spectrum(v1), || volume_spectrum(v2));
    let n_shells = n / 2 + 1;
    let mut cross = vec![0.0; n_shells];
    let mut p1 = vec![0.0; n_shells];
    let mut p2 = vec![0.0; n_shells];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let r = n as f64 * (freq(x, n).powi(2) + freq(y, n).powi(2) + freq(z, n).powi(2)).sqrt();
                let shell = r.round() as usize;
                if shell >= n_shells {
                    continue;
                }
                let i = (z * n + y) * n + x;
                let (a, b) = (f1[i], f2[i]);
                cross[shell] += a.re * b.re + a.im * b.im;
                p1[shell] += a.norm_sqr();
                p2[shell] += b.norm_sqr();
            }
        }
    }
    let mut correlation = Vec::with_capacity(n_shells);
    let mut empty = Vec::with_capacity(n_shells);
    for s in 0..n_shells {
        let denom = p1[s].sqrt() * p2[s].sqrt();
        if denom > 0.0 {
            correlation.push((cross[s] / denom).clamp(-1.0, 1.0));
            empty.push(false);
        } else {
            correlation.push(0.0);
            empty.push(true);
        }
    }
    Ok(FscCurve {
        frequency: (0..n_shells).map(|s| s as f64 / n as f64).collect(),
        correlation,
        empty,
    })
}

/// Sort key making the reconstruction independent of projection order.
fn canonical_key(rot: &Rotation, shift: [f64; 2], image: &Image) -> Vec<u64> {
    rot.to_row_major()
        .iter()
        .chain(&shift)
        .chain(image.data())
        .map(|v| v.to_bits())
        .collect()
}

/// Shift-corrected, zero-padded 2D spectrum of one image, `(2·side)²`,
/// origin at index 0.
fn padded_spectrum(image: &Image, shift: [f64; 2]) -> Result<Vec<Complex64>> {
    let side = image.side();
    let centred = apply_shift(image, -shift[0], -shift[1])?;
    let m = 2 * side;
    let mut data = vec![Complex64::new(0.0, 0.0); m * m];
    for row in 0..side {
        for col in 0..side {
            // Pixel side/2 lands on padded index side, then wraps to 0.
            let pr = (row + side / 2 + side) % m;
            let pc = (col + side / 2 + side) % m;
            data[pr * m + pc] = Complex64::new(centred.get(row, col), 0.0);
        }
    }
    fft2(&mut data, m, false);
    Ok(data)
}

/// Direct Fourier reconstruction: each shift-corrected projection spectrum
/// is inserted as a central slice of a 2× oversampled 3D grid (nearest
/// neighbour), cells are averaged over their hits, and the grid is inverted
/// and cropped.
pub fn gridding_reconstruct(stack: &ProjectionStack, poses: &[Rotation], shifts: &ShiftVector) -> Result<Volume> {
    let k = stack.len();
    if k < 10 {
        return Err(Error::invalid(format!(
            "reconstruction needs >= 10 projections, got {k}"
        )));
    }
    if poses.len() != k || shifts.len() != k {
        return Err(Error::invalid("poses, shifts and images differ in count"));
    }
    let side = stack.side();
    let m = 2 * side;
    let mut order: Vec<usize> = (0..k).collect();
    let keys: Vec<Vec<u64>> = (0..k)
        .map(|i| canonical_key(&poses[i], shifts.as_slice()[i], stack.image(i)))
        .collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    let spectra: Vec<Vec<Complex64>> = order
        .par_iter()
        .map(|&i| padded_spectrum(stack.image(i), shifts.as_slice()[i]))
        .collect::<Result<_>>()?;
    let mut grid = vec![Complex64::new(0.0, 0.0); m * m * m];
    let mut hits = vec![0u32; m * m * m];
    let half = (m / 2) as f64;
    let wrap_index = |v: i64| v.rem_euclid(m as i64) as usize;
    for (&i, spectrum) in order.iter().zip(&spectra) {
        let (q, y) = (poses[i].q(), poses[i].y());
        for ky in 0..m {
            let fy = freq(ky, m) * m as f64;
            for kx in 0..m {
                let fx = freq(kx, m) * m as f64;
                if fx * fx + fy * fy > half * half {
                    continue;
                }
                let p = q * fx + y * fy;
                let cell = [p.x.round() as i64, p.y.round() as i64, p.z.round() as i64];
                if cell.iter().any(|&c| c < -(m as i64) / 2 || c >= (m as i64) / 2) {
                    continue;
                }
                let idx = (wrap_index(cell[2]) * m + wrap_index(cell[1])) * m + wrap_index(cell[0]);
                grid[idx] += spectrum[ky * m + kx];
                hits[idx] += 1;
            }
        }
    }
    for (g, &h) in grid.iter_mut().zip(&hits) {
        if h > 0 {
            *g /= h as f64;
        }
    }
    fft3(&mut grid, m, true);
    let mut data = vec![0.0; side * side * side];
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let src = |c: usize| (c + side / 2 + side) % m;
                data[(z * side + y) * side + x] = grid[(src(z) * m + src(y)) * m + src(x)].re;
            }
        }
    }
    Volume::new(side, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdata::{make_phantom, random_rotations, simulate_stack, GaussianBlobPhantom};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rotate_all(g: &Rotation, rots: &[Rotation]) -> Vec<Rotation> {
        rots.iter().map(|r| g.compose(r)).collect()
    }

    #[test]
    fn identity_alignment() {
        let rots = random_rotations(10, 1).unwrap();
        let al = align_global(&rots, &rots).unwrap();
        assert!(!al.reflected);
        assert!((al.g.matrix() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(al.errors_deg.iter().all(|&e| e < 1e-6));
    }

    #[test]
    fn global_rotation_is_undone() {
        let rots = random_rotations(10, 2).unwrap();
        let g0 = random_rotations(1, 3).unwrap()[0];
        let al = align_global(&rotate_all(&g0, &rots), &rots).unwrap();
        assert!(!al.reflected);
        assert!((al.g.matrix() - g0.inverse().matrix()).abs().max() < 1e-9);
        assert!(al.errors_deg.iter().all(|&e| e < 1e-7));
    }

    #[test]
    fn mirrored_set_selects_reflection_branch() {
        let rots = random_rotations(12, 4).unwrap();
        let j = mirror();
        let g0 = random_rotations(1, 5).unwrap()[0];
        let mirrored: Vec<Rotation> = rots
            .iter()
            .map(|r| g0.compose(&Rotation::from_matrix(j * r.matrix() * j).unwrap()))
            .collect();
        let al = align_global(&mirrored, &rots).unwrap();
        assert!(al.reflected);
        assert!(al.errors_deg.iter().all(|&e| e < 1e-6));
    }

    #[test]
    fn half_turn_in_plane_is_the_mirror_class() {
        // R_i R_z(π) for all i equals a rotated mirror image of the set.
        let rots = random_rotations(12, 6).unwrap();
        let rz = Rotation::about_axis(&Vector3::z(), PI);
        let turned: Vec<Rotation> = rots.iter().map(|r| r.compose(&rz)).collect();
        let al = align_global(&turned, &rots).unwrap();
        assert!(al.reflected);
        assert!(al.errors_deg.iter().all(|&e| e < 1e-6));
    }

    #[test]
    fn exact_estimates_have_zero_metrics() {
        let rots = random_rotations(15, 7).unwrap();
        let s = ShiftVector::new((0..15).map(|i| [i as f64 * 0.1, -0.2]).collect());
        let m = metrics(&rots, &rots, Some((&s, &s))).unwrap();
        assert!(m.theta_mae < 1e-12 && m.phi_mae < 1e-12);
        assert!(m.inplane_err_deg < 1e-9 && m.normal_err_deg < 1e-9);
        assert!(m.euler_mse.iter().all(|&e| e < 1e-20));
        assert!(m.shift_rms_px.unwrap() < 1e-12);
    }

    #[test]
    fn in_plane_turn_is_isolated() {
        let rots = random_rotations(5, 8).unwrap();
        let mut est = rots.clone();
        let turn = Rotation::about_axis(&Vector3::z(), 5f64.to_radians());
        est[2] = rots[2].compose(&turn);
        let m = metrics(&est, &rots, None).unwrap();
        let per = inplane_residual(&est[2], &rots[2]).to_degrees();
        assert!((per - 5.0).abs() < 1e-9);
        assert!((m.inplane_err_deg - 1.0).abs() < 1e-9);
        assert!(m.normal_err_deg < 1e-9);
    }

    #[test]
    fn theta_mae_matches_brute_force() {
        let rots = random_rotations(12, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est: Vec<Rotation> = rots
            .iter()
            .map(|r| {
                let axis = Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                );
                r.compose(&Rotation::about_axis(&axis.normalize(), 0.05))
            })
            .collect();
        let m = metrics(&est, &rots, None).unwrap();
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..12 {
            for j in 0..12 {
                if i < j {
                    let a = est[i].d().dot(&est[j].d()).clamp(-1.0, 1.0).acos();
                    let b = rots[i].d().dot(&rots[j].d()).clamp(-1.0, 1.0).acos();
                    total += (a - b).abs();
                    count += 1.0;
                }
            }
        }
        assert!((m.theta_mae - total / count).abs() < 1e-12);
    }

    #[test]
    fn metrics_invariant_to_global_rotation_after_alignment() {
        let rots = random_rotations(12, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est: Vec<Rotation> = rots
            .iter()
            .map(|r| {
                r.compose(&Rotation::about_axis(
                    &Vector3::new(1.0, rng.random::<f64>(), 0.3).normalize(),
                    0.04,
                ))
            })
            .collect();
        let g = random_rotations(1, 11).unwrap()[0];
        let a = metrics(&align_global(&est, &rots).unwrap().aligned, &rots, None).unwrap();
        let b = metrics(
            &align_global(&rotate_all(&g, &est), &rots).unwrap().aligned,
            &rots,
            None,
        )
        .unwrap();
        assert!((a.theta_mae - b.theta_mae).abs() < 1e-9);
        assert!((a.normal_err_deg - b.normal_err_deg).abs() < 1e-9);
        assert!((a.inplane_err_deg - b.inplane_err_deg).abs() < 1e-9);
    }

    #[test]
    fn euler_roundtrip() {
        for r in random_rotations(20, 12).unwrap() {
            let [a, b, c] = euler_zyz(&r);
            let rz = |t: f64| Rotation::about_axis(&Vector3::z(), t);
            let back = rz(a).compose(&Rotation::about_axis(&Vector3::y(), b)).compose(&rz(c));
            assert!((back.matrix() - r.matrix()).abs().max() < 1e-12);
        }
        assert!((wrap(2.0 * PI - 0.1) + 0.1).abs() < 1e-12);
        assert_eq!(wrap(-PI), PI);
    }

    #[test]
    fn translation_is_unobservable() {
        let rots = random_rotations(10, 13).unwrap();
        let t = Vector3::new(0.7, -1.2, 0.4);
        let truth = ShiftVector::zeros(10);
        let est = ShiftVector::new(rots.iter().map(|r| [r.q().dot(&t), r.y().dot(&t)]).collect());
        assert!(observable_shift_rms(&est, &truth, &rots).unwrap() < 1e-12);
        let mut bumped = est.as_slice().to_vec();
        bumped[3][0] += 1.0;
        assert!(observable_shift_rms(&ShiftVector::new(bumped), &truth, &rots).unwrap() > 0.1);
    }

    fn small_phantom() -> Volume {
        make_phantom(&GaussianBlobPhantom::asymmetric(), 48).unwrap()
    }

    #[test]
    fn fsc_of_identical_volumes_is_one() {
        let v = small_phantom();
        let c = fsc(&v, &v).unwrap();
        assert!(c.correlation.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        assert!(c.frequency.windows(2).all(|w| w[1] > w[0]));
        let neg = Volume::new(48, v.data().iter().map(|x| -x).collect()).unwrap();
        assert!(fsc(&v, &neg)
            .unwrap()
            .correlation
            .iter()
            .all(|&x| (x + 1.0).abs() < 1e-12));
    }

    #[test]
    fn fsc_is_symmetric() {
        let v = small_phantom();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Volume::new(
            48,
            v.data()
                .iter()
                .map(|x| x + 0.05 * (rng.random::<f64>() - 0.5))
                .collect(),
        )
        .unwrap();
        assert_eq!(fsc(&v, &w).unwrap(), fsc(&w, &v).unwrap());
    }

    #[test]
    fn fsc_decays_with_white_noise() {
        let v = small_phantom();
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy = Volume::new(
                48,
                v.data()
                    .iter()
                    .map(|x| x + 0.02 * (rng.random::<f64>() - 0.5))
                    .collect(),
            )
            .unwrap();
            let c = fsc(&v, &noisy).unwrap();
            let rho = spearman(&c.correlation);
            assert!(rho < 0.0, "seed {seed}: rho {rho}");
        }
    }

    /// Spearman rank correlation of values against their index.
    fn spearman(values: &[f64]) -> f64 {
        let n = values.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let mut rank = vec![0.0; n];
        for (r, &i) in idx.iter().enumerate() {
            rank[i] = r as f64;
        }
        let mean = (n as f64 - 1.0) / 2.0;
        let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
        for (i, &r) in rank.iter().enumerate() {
            num += (i as f64 - mean) * (r - mean);
            da += (i as f64 - mean).powi(2);
            db += (r - mean).powi(2);
        }
        num / (da * db).sqrt()
    }

    #[test]
    fn empty_shell_is_flagged() {
        let zero = Volume::zeros(16).unwrap();
        let c = fsc(&zero, &zero).unwrap();
        assert!(c.empty.iter().all(|&e| e));
        assert!(c.correlation.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reconstruction_needs_ten_projections() {
        let vol = small_phantom();
        let rots = random_rotations(9, 1).unwrap();
        let stack = simulate_stack(&vol, &rots, None, None, 0).unwrap();
        assert!(gridding_reconstruct(&stack, &rots, &ShiftVector::zeros(9)).is_err());
    }

    #[test]
    fn reconstruction_ignores_projection_order() {
        let vol = small_phantom();
        let rots = random_rotations(12, 2).unwrap();
        let shifts = ShiftVector::new((0..12).map(|i| [0.3 * i as f64 - 1.5, 0.5]).collect());
        let stack = simulate_stack(&vol, &rots, Some(&shifts), None, 0).unwrap();
        let order: Vec<usize> = (0..12).rev().collect();
        let perm = stack.reordered(&order).unwrap();
        let prot: Vec<Rotation> = order.iter().map(|&i| rots[i]).collect();
        let pshift = ShiftVector::new(order.iter().map(|&i| shifts.as_slice()[i]).collect());
        let a = gridding_reconstruct(&stack, &rots, &shifts).unwrap();
        let b = gridding_reconstruct(&perm, &prot, &pshift).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
