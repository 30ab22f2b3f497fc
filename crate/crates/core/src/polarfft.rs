//! Polar Fourier rays of projection images.
//!
//! Ray `l` of image `k` samples the 2D Fourier integral
//! `F(f, θ) = Σ_p h(p) · exp(+2πi f (u cos θ + v sin θ))` at angle
//! `θ_l = π l / n_theta` (measured from the image x-axis towards the y-axis)
//! on a uniform frequency grid that skips DC. The kernel sign is chosen so a
//! translation by `s` multiplies the ray by `exp(+2πi f (s · e_θ))` and the
//! phase correction carries a negative exponent.
//!
//! Ray indices are zero-based: `0..n_theta` address the stored half circle,
//! `n_theta..2·n_theta` the opposite direction, obtained by conjugation.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::simdata::{Image, ProjectionStack};
use crate::{Error, Result};

/// Per-projection in-plane shifts `(dx, dy)` in pixels, with the same meaning
/// as [`crate::simdata::apply_shift`]: content moved by `dx` columns and `dy`
/// rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftVector(Vec<[f64; 2]>);

impl ShiftVector {
    pub fn new(shifts: Vec<[f64; 2]>) -> Self {
        ShiftVector(shifts)
    }

    pub fn zeros(n: usize) -> Self {
        ShiftVector(vec![[0.0; 2]; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[[f64; 2]] {
        &self.0
    }

    pub fn negated(&self) -> Self {
        ShiftVector(self.0.iter().map(|[x, y]| [-x, -y]).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|s| s[0].is_finite() && s[1].is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarParams {
    /// Rays over the half circle `[0, π)`.
    pub n_theta: usize,
    /// Radial samples per ray.
    pub n_r: usize,
    /// Highest sampled frequency, cycles/pixel.
    pub rmax: f64,
}

impl Default for PolarParams {
    fn default() -> Self {
        PolarParams {
            n_theta: 180,
            n_r: 32,
            rmax: 0.35,
        }
    }
}

impl PolarParams {
    /// Uniform grid from `2/side` to `rmax`; frequencies below `2/side`
    /// (DC included) are left out.
    pub fn freq_grid(&self, side: usize) -> Vec<f64> {
        let lo = 2.0 / side as f64;
        let step = (self.rmax - lo) / (self.n_r - 1) as f64;
        (0..self.n_r).map(|m| lo + step * m as f64).collect()
    }

    fn validate(&self, side: usize) -> Result<()> {
        if self.n_theta < 36 || !self.n_theta.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "n_theta must be even and >= 36, got {}",
                self.n_theta
            )));
        }
        if self.n_r < 2 || self.n_r < side / 2 {
            return Err(Error::invalid(format!(
                "n_r = {} must be >= max(2, side/2 = {})",
                self.n_r,
                side / 2
            )));
        }
        if !(self.rmax > 2.0 / side as f64 && self.rmax <= 0.5) {
            return Err(Error::invalid(format!("rmax {} must lie in (2/side, 0.5]", self.rmax)));
        }
        Ok(())
    }
}

/// Polar Fourier rays of every projection in a stack.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarStack {
    side: usize,
    n: usize,
    params: PolarParams,
    freq: Vec<f64>,
    /// `n × n_theta × n_r`, ray-major.
    rays: Vec<Complex64>,
    corrected: bool,
}

impl PolarStack {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn params(&self) -> PolarParams {
        self.params
    }

    pub fn n_theta(&self) -> usize {
        self.params.n_theta
    }

    pub fn n_r(&self) -> usize {
        self.params.n_r
    }

    pub fn freq_grid(&self) -> &[f64] {
        &self.freq
    }

    /// Whether shift estimates have been applied by [`phase_correct`].
    pub fn is_corrected(&self) -> bool {
        self.corrected
    }

    /// Angle of ray index `c` (either half circle), radians.
    pub fn ray_angle(&self, c: usize) -> f64 {
        PI * c as f64 / self.params.n_theta as f64
    }

    /// Stored ray `l < n_theta` of projection `k`.
    pub fn ray(&self, k: usize, l: usize) -> &[Complex64] {
        let nr = self.params.n_r;
        let start = (k * self.params.n_theta + l) * nr;
        &self.rays[start..start + nr]
    }

    /// All stored rays of projection `k`, `n_theta × n_r`.
    pub fn rays_of(&self, k: usize) -> &[Complex64] {
        let len = self.params.n_theta * self.params.n_r;
        &self.rays[k * len..(k + 1) * len]
    }

    /// Ray `c ∈ [0, 2·n_theta)` of projection `k`; indices past `n_theta`
    /// return the conjugate of ray `c - n_theta`.
    pub fn extract_ray(&self, k: usize, c: usize) -> Result<Vec<Complex64>> {
        let nt = self.params.n_theta;
        if k >= self.n {
            return Err(Error::invalid(format!("projection {k} out of range (n = {})", self.n)));
        }
        if c >= 2 * nt {
            return Err(Error::invalid(format!("ray index {c} out of range [0, {})", 2 * nt)));
        }
        Ok(if c < nt {
            self.ray(k, c).to_vec()
        } else {
            self.ray(k, c - nt).iter().map(Complex64::conj).collect()
        })
    }

    /// Debug dump: `CPP1` header (n, n_theta, n_r as u32, rmax as f32,
    /// padded to 64 bytes) followed by complex64 (`f32` re, im) samples.
    /// Not a stable format.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = [0u8; 64];
        header[0..4].copy_from_slice(b"CPP1");
        header[4..8].copy_from_slice(&(self.n as u32).to_le_bytes());
        header[8..12].copy_from_slice(&(self.params.n_theta as u32).to_le_bytes());
        header[12..16].copy_from_slice(&(self.params.n_r as u32).to_le_bytes());
        header[16..20].copy_from_slice(&(self.params.rmax as f32).to_le_bytes());
        w.write_all(&header)?;
        for v in &self.rays {
            w.write_all(&(v.re as f32).to_le_bytes())?;
            w.write_all(&(v.im as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Direct evaluation of the image's Fourier integral along direction `theta`
/// at arbitrary frequencies.
pub fn fourier_ray(image: &Image, theta: f64, freq: &[f64]) -> Vec<Complex64> {
    let n = image.side();
    let c = (n / 2) as f64;
    let (s, co) = theta.sin_cos();
    freq.iter()
        .map(|&f| {
            let mut acc = Complex64::new(0.0, 0.0);
            for row in 0..n {
                for col in 0..n {
                    let t = (col as f64 - c) * co + (row as f64 - c) * s;
                    acc += image.get(row, col) * Complex64::from_polar(1.0, 2.0 * PI * f * t);
                }
            }
            acc
        })
        .collect()
}

/// All `n_theta` rays of one image on a uniform frequency grid, using a
/// phasor recurrence along each ray.
fn image_rays(image: &Image, n_theta: usize, freq: &[f64]) -> Vec<Complex64> {
    let n = image.side();
    let c = (n / 2) as f64;
    let nr = freq.len();
    let f0 = freq[0];
    let df = if nr > 1 { freq[1] - freq[0] } else { 0.0 };
    let pixels: Vec<(f64, f64, f64)> = (0..n * n)
        .filter_map(|i| {
            let v = image.data()[i];
            (v != 0.0).then(|| ((i % n) as f64 - c, (i / n) as f64 - c, v))
        })
        .collect();
    let mut out = vec![Complex64::new(0.0, 0.0); n_theta * nr];
    for (l, ray) in out.chunks_exact_mut(nr).enumerate() {
        let (s, co) = (PI * l as f64 / n_theta as f64).sin_cos();
        for &(u, v, h) in &pixels {
            let t = u * co + v * s;
            let mut z = Complex64::from_polar(h, 2.0 * PI * f0 * t);
            let step = Complex64::from_polar(1.0, 2.0 * PI * df * t);
            for acc in ray.iter_mut() {
                *acc += z;
                z *= step;
            }
        }
    }
    out
}

pub fn polar_transform(stack: &ProjectionStack, params: PolarParams) -> Result<PolarStack> {
    polar_transform_images(stack.images(), params)
}

pub fn polar_transform_images(images: &[Image], params: PolarParams) -> Result<PolarStack> {
    let side = images
        .first()
        .map(Image::side)
        .ok_or_else(|| Error::invalid("no images to transform"))?;
    if images
        .iter()
        .any(|im| im.side() != side || im.data().len() != side * side)
    {
        return Err(Error::invalid("polar transform needs square images of one size"));
    }
    params.validate(side)?;
    let freq = params.freq_grid(side);
    let per_image: Vec<Vec<Complex64>> = images
        .par_iter()
        .map(|im| image_rays(im, params.n_theta, &freq))
        .collect();
    let rays: Vec<Complex64> = per_image.into_iter().flatten().collect();
    if !rays.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        return Err(Error::Numerical("polar transform produced non-finite values".into()));
    }
    Ok(PolarStack {
        side,
        n: images.len(),
        params,
        freq,
        rays,
        corrected: false,
    })
}

/// Undoes in-plane shifts in the Fourier domain.
///
/// Every sample of ray `θ` at frequency `f` is multiplied by
/// `exp(-2πi f (dy sin θ + dx cos θ))`: the shift's component along the ray
/// direction `(cos θ, sin θ)`. The input stack is left untouched.
pub fn phase_correct(pol: &PolarStack, shifts: &ShiftVector) -> Result<PolarStack> {
    if shifts.len() != pol.n {
        return Err(Error::invalid(format!(
            "{} shifts for {} projections",
            shifts.len(),
            pol.n
        )));
    }
    if !shifts.is_finite() {
        return Err(Error::invalid("shifts must be finite"));
    }
    let nt = pol.params.n_theta;
    let nr = pol.params.n_r;
    let mut out = pol.clone();
    out.rays
        .par_chunks_mut(nt * nr)
        .zip(shifts.as_slice())
        .for_each(|(rays, &[dx, dy])| {
            for (l, ray) in rays.chunks_exact_mut(nr).enumerate() {
                let (s, c) = (PI * l as f64 / nt as f64).sin_cos();
                let along = dy * s + dx * c;
                for (v, &f) in ray.iter_mut().zip(&pol.freq) {
                    *v *= Complex64::from_polar(1.0, -2.0 * PI * f * along);
                }
            }
        });
    out.corrected = true;
    Ok(out)
}
