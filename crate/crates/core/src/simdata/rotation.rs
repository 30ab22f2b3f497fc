use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

const ORTHO_TOL: f64 = 1e-12;

/// A proper rotation whose columns are the lab-frame image x-axis `q`, image
/// y-axis `y = d × q` and viewing direction `d`.
///
/// A point `(u, v)` of the projection image sits at `u·q + v·y` in the lab
/// frame and the projection integrates along `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and `det = +1` to 1e-12.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("rotation has non-finite entries"));
        }
        let gram = m.transpose() * m;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ORTHO_TOL {
            return Err(Error::invalid(format!(
                "rotation columns not orthonormal (deviation {dev:.3e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid(format!("rotation determinant {det}")));
        }
        Ok(Rotation(m))
    }

    /// Builds `[q | d×q | d]` after normalizing `d` and orthogonalizing `q`
    /// against it.
    pub fn from_axes(q: &Vector3<f64>, d: &Vector3<f64>) -> Result<Self> {
        let dn = d.norm();
        if dn < 1e-12 || !dn.is_finite() {
            return Err(Error::invalid("viewing direction has zero length"));
        }
        let d = d / dn;
        let q = q - d * d.dot(q);
        let qn = q.norm();
        if qn < 1e-12 || !qn.is_finite() {
            return Err(Error::invalid("in-plane axis parallel to viewing direction"));
        }
        let q = q / qn;
        let y = d.cross(&q);
        Ok(Rotation(Matrix3::from_columns(&[q, y, d])))
    }

    /// Rotation by `angle` radians about `axis` (right-handed).
    pub fn about_axis(axis: &Vector3<f64>, angle: f64) -> Self {
        let unit = nalgebra::Unit::new_normalize(*axis);
        Rotation(*nalgebra::Rotation3::from_axis_angle(&unit, angle).matrix())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn q(&self) -> Vector3<f64> {
        self.0.column(0).into_owned()
    }

    pub fn y(&self) -> Vector3<f64> {
        self.0.column(1).into_owned()
    }

    pub fn d(&self) -> Vector3<f64> {
        self.0.column(2).into_owned()
    }

    /// `self · other`.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn inverse(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    /// Geodesic distance to `other` in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        // ‖R − S‖_F = 2√2 sin(φ/2) stays accurate for small φ, unlike the trace form.
        let chord = (self.0 - other.0).norm() / (2.0 * std::f64::consts::SQRT_2);
        2.0 * chord.min(1.0).asin()
    }

    /// Row-major entries, as stored in the stack metadata.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Inverse of [`Rotation::to_row_major`]. Values that went through f32 or
    /// text are re-orthonormalized, so the 1e-12 check is applied after that.
    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        let m = Matrix3::from_row_slice(v);
        Self::from_axes(&m.column(0).into_owned(), &m.column(2).into_owned())
    }
}

/// Haar-uniform random rotations from normalized Gaussian quaternions.
pub fn random_rotations(n: usize, seed: u64) -> Result<Vec<Rotation>> {
    if n == 0 {
        return Err(Error::invalid("random_rotations needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let quat = Quaternion::new(c[0], c[1], c[2], c[3]);
        if quat.norm() < 1e-6 {
            continue;
        }
        let m = *UnitQuaternion::from_quaternion(quat).to_rotation_matrix().matrix();
        // Re-orthonormalize through the column constructor so d = q × y
        // holds to rounding.
        out.push(Rotation::from_axes(
            &m.column(0).into_owned(),
            &m.column(2).into_owned(),
        )?);
    }
    Ok(out)
}
