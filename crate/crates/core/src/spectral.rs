//! Small 2D DFT helpers over row-major buffers.

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

/// Unnormalized 2D DFT in place (`direction` picks the sign of the exponent).
pub fn fft2_inplace(buf: &mut [Complex64], height: usize, width: usize, direction: FftDirection) {
    assert_eq!(buf.len(), height * width);
    let mut planner = FftPlanner::<f64>::new();
    let row = planner.plan_fft(width, direction);
    row.process(buf);
    let col = planner.plan_fft(height, direction);
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for j in 0..width {
        for i in 0..height {
            column[i] = buf[i * width + j];
        }
        col.process(&mut column);
        for i in 0..height {
            buf[i * width + j] = column[i];
        }
    }
}

pub fn fft2_real(values: &[f64], height: usize, width: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, height, width, FftDirection::Forward);
    buf
}

/// Inverse DFT normalized by `1 / (height * width)`, keeping the real part.
pub fn ifft2_real(mut spectrum: Vec<Complex64>, height: usize, width: usize) -> Vec<f64> {
    fft2_inplace(&mut spectrum, height, width, FftDirection::Inverse);
    let scale = 1.0 / (height * width) as f64;
    spectrum.iter().map(|c| c.re * scale).collect()
}

/// Signed integer frequency of DFT index `i` along an axis of length `n`.
pub fn signed_freq(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Isotropic wavenumber magnitude of DFT cell (i, j).
pub fn wavenumber(i: usize, j: usize, height: usize, width: usize) -> f64 {
    let ky = signed_freq(i, height) as f64;
    let kx = signed_freq(j, width) as f64;
    (kx * kx + ky * ky).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let v: Vec<f64> = (0..48).map(|i| ((i * 7) % 11) as f64 - 3.0).collect();
        let back = ifft2_real(fft2_real(&v, 6, 8), 6, 8);
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn freqs() {
        assert_eq!(signed_freq(0, 8), 0);
        assert_eq!(signed_freq(4, 8), 4);
        assert_eq!(signed_freq(5, 8), -3);
        assert_eq!(signed_freq(3, 5), -2);
    }
}
