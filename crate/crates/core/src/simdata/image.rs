use num_complex::Complex64;
use std::f64::consts::PI;

use crate::fourier::{fft2, freq};
use crate::{Error, Result};

/// Square real image, row-major: pixel `(row, col)` at `row * side + col`.
///
/// Columns run along the image x-axis and rows along the image y-axis;
/// pixel `(side/2, side/2)` is the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side {
            return Err(Error::invalid(format!(
                "image has {} pixels, expected {side}x{side}",
                data.len()
            )));
        }
        Ok(Image { side, data })
    }

    pub fn zeros(side: usize) -> Self {
        Image {
            side,
            data: vec![0.0; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.side + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.side + col] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Translates the image content by `dx` columns and `dy` rows through the
/// Fourier shift theorem (periodic boundary, subpixel allowed).
pub fn apply_shift(image: &Image, dx: f64, dy: f64) -> Result<Image> {
    let n = image.side;
    let limit = n as f64 / 8.0;
    if !(dx.abs() <= limit && dy.abs() <= limit) {
        return Err(Error::invalid(format!("shift ({dx}, {dy}) exceeds side/8 = {limit}")));
    }
    if dx == 0.0 && dy == 0.0 {
        return Ok(image.clone());
    }
    let mut buf: Vec<Complex64> = image.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut buf, n, false);
    for row in 0..n {
        let ky = freq(row, n);
        for col in 0..n {
            let kx = freq(col, n);
            buf[row * n + col] *= Complex64::from_polar(1.0, -2.0 * PI * (kx * dx + ky * dy));
        }
    }
    fft2(&mut buf, n, true);
    Image::new(n, buf.iter().map(|c| c.re).collect())
}
