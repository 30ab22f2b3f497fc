//! Multi-dimensional FFT helpers over row-major complex buffers.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    }
}

/// In-place 2D FFT of an `n × n` row-major buffer. The inverse is normalized
/// by `1/n²`.
pub(crate) fn fft2(data: &mut [Complex64], n: usize, inverse: bool) {
    debug_assert_eq!(data.len(), n * n);
    let fft = plan(n, inverse);
    for row in data.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = data[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            data[y * n + x] = col[y];
        }
    }
    if inverse {
        let s = 1.0 / (n * n) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// In-place 3D FFT of an `n³` buffer indexed `(z * n + y) * n + x`. The
/// inverse is normalized by `1/n³`.
pub(crate) fn fft3(data: &mut [Complex64], n: usize, inverse: bool) {
    debug_assert_eq!(data.len(), n * n * n);
    let fft = plan(n, inverse);
    for line in data.chunks_exact_mut(n) {
        fft.process(line);
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for z in 0..n {
        for x in 0..n {
            for y in 0..n {
                buf[y] = data[(z * n + y) * n + x];
            }
            fft.process(&mut buf);
            for y in 0..n {
                data[(z * n + y) * n + x] = buf[y];
            }
        }
    }
    for y in 0..n {
        for x in 0..n {
            for z in 0..n {
                buf[z] = data[(z * n + y) * n + x];
            }
            fft.process(&mut buf);
            for z in 0..n {
                data[(z * n + y) * n + x] = buf[z];
            }
        }
    }
    if inverse {
        let s = 1.0 / (n * n * n) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Signed frequency (cycles/sample) of FFT bin `m` for length `n`.
pub(crate) fn freq(m: usize, n: usize) -> f64 {
    if m < n.div_ceil(2) {
        m as f64 / n as f64
    } else {
        m as f64 / n as f64 - 1.0
    }
}
