use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Cubic real-valued voxel grid, indexed `(z * side + y) * side + x`.
///
/// Voxel `(x, y, z)` sits at `(x, y, z) - side/2` in grid units, so the
/// rotation center is an exact voxel for even sides.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    side: usize,
    voxel_size: f64,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if side < 8 {
            return Err(Error::invalid(format!("volume side {side} < 8")));
        }
        if data.len() != side * side * side {
            return Err(Error::invalid(format!(
                "volume data has {} values, expected {}",
                data.len(),
                side * side * side
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("volume contains non-finite values"));
        }
        Ok(Volume {
            side,
            voxel_size: 1.0,
            data,
        })
    }

    pub fn zeros(side: usize) -> Result<Self> {
        Self::new(side, vec![0.0; side * side * side])
    }

    pub fn with_voxel_size(mut self, voxel_size: f64) -> Self {
        self.voxel_size = voxel_size;
        self
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn center(&self) -> f64 {
        (self.side / 2) as f64
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.side + y) * self.side + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Volume, b: f64) -> Result<Volume> {
        if other.side != self.side {
            return Err(Error::invalid("volume sides differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Volume::new(self.side, data)
    }

    /// Trilinear interpolation at continuous grid position `p` (voxel
    /// indices, not centered). Zero outside the grid.
    #[inline]
    pub(crate) fn trilinear(&self, p: &Vector3<f64>) -> f64 {
        let n = self.side;
        let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
        if fx < -1.0 || fy < -1.0 || fz < -1.0 {
            return 0.0;
        }
        let (x0, y0, z0) = (fx as isize, fy as isize, fz as isize);
        if x0 >= n as isize || y0 >= n as isize || z0 >= n as isize {
            return 0.0;
        }
        let (tx, ty, tz) = (p.x - fx, p.y - fy, p.z - fz);
        let at = |x: isize, y: isize, z: isize| -> f64 {
            if x < 0 || y < 0 || z < 0 || x >= n as isize || y >= n as isize || z >= n as isize {
                0.0
            } else {
                self.data[(z as usize * n + y as usize) * n + x as usize]
            }
        };
        let c00 = at(x0, y0, z0) * (1.0 - tx) + at(x0 + 1, y0, z0) * tx;
        let c10 = at(x0, y0 + 1, z0) * (1.0 - tx) + at(x0 + 1, y0 + 1, z0) * tx;
        let c01 = at(x0, y0, z0 + 1) * (1.0 - tx) + at(x0 + 1, y0, z0 + 1) * tx;
        let c11 = at(x0, y0 + 1, z0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1, z0 + 1) * tx;
        let c0 = c00 * (1.0 - ty) + c10 * ty;
        let c1 = c01 * (1.0 - ty) + c11 * ty;
        c0 * (1.0 - tz) + c1 * tz
    }
}

/// Isotropic Gaussian `amplitude · exp(-|p - center|² / 2σ²)`.
///
/// `center` and `sigma` are fractions of the volume side; the center must
/// lie in the unit cube `[-0.5, 0.5]³` around the volume center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBlob {
    pub center: [f64; 3],
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBlobPhantom {
    pub blobs: Vec<GaussianBlob>,
}

impl GaussianBlobPhantom {
    /// Eight blobs of distinct widths and amplitudes with no rotational or
    /// mirror symmetry, spread over the central half of the frame. Valid for
    /// sides of 48 voxels and above.
    pub fn asymmetric() -> Self {
        let blob = |c: [f64; 3], sigma: f64, amplitude: f64| GaussianBlob {
            center: c,
            sigma,
            amplitude,
        };
        GaussianBlobPhantom {
            blobs: vec![
                blob([0.17, 0.03, -0.06], 0.045, 1.00),
                blob([-0.12, 0.15, 0.07], 0.038, 0.80),
                blob([0.02, -0.18, 0.11], 0.034, 1.25),
                blob([-0.09, -0.08, -0.16], 0.042, 0.60),
                blob([0.06, 0.11, 0.18], 0.033, 0.90),
                blob([-0.19, -0.02, 0.01], 0.035, 0.70),
                blob([0.10, -0.10, -0.02], 0.040, 0.85),
                blob([-0.03, 0.05, -0.12], 0.036, 1.10),
            ],
        }
    }

    /// A single blob at the volume center.
    pub fn centered(sigma: f64, amplitude: f64) -> Self {
        GaussianBlobPhantom {
            blobs: vec![GaussianBlob {
                center: [0.0; 3],
                sigma,
                amplitude,
            }],
        }
    }

    /// Analytic density at grid-unit position `p` (centered coordinates).
    pub fn evaluate(&self, p: &Vector3<f64>, side: usize) -> f64 {
        let s = side as f64;
        self.blobs
            .iter()
            .map(|b| {
                let c = Vector3::from(b.center) * s;
                let sig = b.sigma * s;
                b.amplitude * (-(p - c).norm_squared() / (2.0 * sig * sig)).exp()
            })
            .sum()
    }

    /// Same phantom translated by `offset` grid units.
    pub fn translated(&self, offset: &Vector3<f64>, side: usize) -> Self {
        let s = side as f64;
        GaussianBlobPhantom {
            blobs: self
                .blobs
                .iter()
                .map(|b| GaussianBlob {
                    center: [
                        b.center[0] + offset.x / s,
                        b.center[1] + offset.y / s,
                        b.center[2] + offset.z / s,
                    ],
                    ..*b
                })
                .collect(),
        }
    }
}

/// Samples the analytic blob sum on a `side³` grid.
pub fn make_phantom(spec: &GaussianBlobPhantom, side: usize) -> Result<Volume> {
    if side < 8 {
        return Err(Error::invalid(format!("phantom side {side} < 8")));
    }
    if spec.blobs.is_empty() {
        return Err(Error::invalid("phantom needs at least one blob"));
    }
    for (i, b) in spec.blobs.iter().enumerate() {
        if b.center.iter().any(|c| !c.is_finite() || c.abs() > 0.5) {
            return Err(Error::invalid(format!(
                "blob {i} center {:?} outside the unit cube",
                b.center
            )));
        }
        if !(b.sigma * side as f64 >= 1.5) {
            return Err(Error::invalid(format!(
                "blob {i} sigma {} voxels < 1.5",
                b.sigma * side as f64
            )));
        }
        if !b.amplitude.is_finite() {
            return Err(Error::invalid(format!("blob {i} amplitude not finite")));
        }
    }
    let c = (side / 2) as f64;
    let mut data = vec![0.0; side * side * side];
    data.par_chunks_mut(side * side).enumerate().for_each(|(z, plane)| {
        for y in 0..side {
            for x in 0..side {
                let p = Vector3::new(x as f64 - c, y as f64 - c, z as f64 - c);
                plane[y * side + x] = spec.evaluate(&p, side);
            }
        }
    });
    Volume::new(side, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_blob_peaks_at_center() {
        let side = 32;
        let vol = make_phantom(&GaussianBlobPhantom::centered(0.1, 1.0), side).unwrap();
        let (imax, _) = vol.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!(imax, vol.index(16, 16, 16));
    }

    #[test]
    fn empty_spec_rejected() {
        let spec = GaussianBlobPhantom { blobs: vec![] };
        assert!(make_phantom(&spec, 16).is_err());
    }

    #[test]
    fn out_of_cube_and_narrow_blobs_rejected() {
        let mut spec = GaussianBlobPhantom::centered(0.1, 1.0);
        spec.blobs[0].center = [0.6, 0.0, 0.0];
        assert!(make_phantom(&spec, 32).is_err());
        let narrow = GaussianBlobPhantom::centered(0.01, 1.0);
        assert!(make_phantom(&narrow, 32).is_err());
        assert!(make_phantom(&GaussianBlobPhantom::centered(0.1, 1.0), 4).is_err());
    }

    #[test]
    fn voxels_match_analytic_sum() {
        // Independent pointwise evaluation of the four-blob Gaussian sum.
        let side = 24;
        let spec = GaussianBlobPhantom {
            blobs: vec![
                GaussianBlob {
                    center: [0.1, -0.05, 0.02],
                    sigma: 0.08,
                    amplitude: 1.0,
                },
                GaussianBlob {
                    center: [-0.12, 0.09, 0.0],
                    sigma: 0.07,
                    amplitude: 0.5,
                },
                GaussianBlob {
                    center: [0.0, 0.13, -0.1],
                    sigma: 0.1,
                    amplitude: -0.3,
                },
                GaussianBlob {
                    center: [0.04, 0.0, 0.15],
                    sigma: 0.065,
                    amplitude: 2.0,
                },
            ],
        };
        let vol = make_phantom(&spec, side).unwrap();
        for &(x, y, z) in &[
            (0usize, 0usize, 0usize),
            (12, 12, 12),
            (14, 9, 15),
            (23, 1, 7),
            (5, 20, 11),
        ] {
            let mut expected = 0.0;
            for b in &spec.blobs {
                let s = side as f64;
                let dx = x as f64 - 12.0 - b.center[0] * s;
                let dy = y as f64 - 12.0 - b.center[1] * s;
                let dz = z as f64 - 12.0 - b.center[2] * s;
                let sig = b.sigma * s;
                expected += b.amplitude * (-(dx * dx + dy * dy + dz * dz) / (2.0 * sig * sig)).exp();
            }
            assert!((vol.get(x, y, z) - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn default_phantom_valid_and_deterministic() {
        let spec = GaussianBlobPhantom::asymmetric();
        let a = make_phantom(&spec, 48).unwrap();
        let b = make_phantom(&spec, 48).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trilinear_hits_grid_values() {
        let vol = make_phantom(&GaussianBlobPhantom::asymmetric(), 48).unwrap();
        let v = vol.trilinear(&Vector3::new(20.0, 25.0, 30.0));
        assert_eq!(v, vol.get(20, 25, 30));
        assert_eq!(vol.trilinear(&Vector3::new(-2.0, 3.0, 3.0)), 0.0);
        let mid = vol.trilinear(&Vector3::new(20.5, 25.0, 30.0));
        assert!((mid - 0.5 * (vol.get(20, 25, 30) + vol.get(21, 25, 30))).abs() < 1e-15);
    }
}
