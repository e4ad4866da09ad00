//! Shared non-autodiff DSP primitives: windows, windowed-sinc kernels, DFT
//! bases and mel filterbanks.

use std::f64::consts::PI;

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_sq = x * x / 4.0;
    for k in 1..64 {
        term *= half_sq / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    sum
}

/// Symmetric Kaiser window of length `n`.
pub fn kaiser_window(n: usize, beta: f64) -> Vec<f64> {
    let denom = bessel_i0(beta);
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| {
            let t = 2.0 * i as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - t * t).max(0.0).sqrt()) / denom
        })
        .collect()
}

/// Periodic Hann window: `0.5 - 0.5*cos(2*pi*n/N)`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser-windowed sinc low-pass FIR, DC gain 1.
///
/// `cutoff` is in cycles/sample of the signal the filter runs at. Even-length
/// kernels are sampled at half-integer offsets. Beta follows the Kaiser design
/// formula for a transition band of `4*half_width`.
pub fn kaiser_sinc_taps(kernel_size: usize, cutoff: f64, half_width: f64) -> Vec<f64> {
    let even = kernel_size % 2 == 0;
    let half_size = kernel_size / 2;
    let delta_f = 4.0 * half_width;
    let a = 2.285 * (half_size.max(1) - 1) as f64 * PI * delta_f + 7.95;
    let beta = if a > 50.0 {
        0.1102 * (a - 8.7)
    } else if a >= 21.0 {
        0.5842 * (a - 21.0).powf(0.4) + 0.07886 * (a - 21.0)
    } else {
        0.0
    };
    let window = kaiser_window(kernel_size, beta);
    let mut taps: Vec<f64> = (0..kernel_size)
        .map(|i| {
            let t = if even {
                i as f64 - half_size as f64 + 0.5
            } else {
                i as f64 - half_size as f64
            };
            2.0 * cutoff * window[i] * sinc(2.0 * cutoff * t)
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Real-DFT basis matrices for a `win`-point frame: `(win, win/2+1)` each,
/// `X[k] = sum_n x[n] (cos - i sin)(2 pi k n / win)`.
pub fn dft_basis(win: usize) -> (Vec<f64>, Vec<f64>) {
    let bins = win / 2 + 1;
    let mut cos = vec![0.0; win * bins];
    let mut sin = vec![0.0; win * bins];
    for n in 0..win {
        for k in 0..bins {
            let phase = 2.0 * PI * (k * n) as f64 / win as f64;
            cos[n * bins + k] = phase.cos();
            sin[n * bins + k] = -phase.sin();
        }
    }
    (cos, sin)
}

fn hz_to_mel_slaney(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

fn mel_to_hz_slaney(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * ((m - min_log_mel) * logstep).exp()
    } else {
        f_sp * m
    }
}

/// Slaney-style mel filterbank `(n_mels, n_fft/2 + 1)` with area
/// normalization, matching the common librosa defaults.
pub fn mel_filterbank(sample_rate: f64, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let mel_min = hz_to_mel_slaney(fmin);
    let mel_max = hz_to_mel_slaney(fmax);
    let pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz_slaney(mel_min + (mel_max - mel_min) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![vec![0.0; bins]; n_mels];
    for (m, row) in fb.iter_mut().enumerate() {
        let (lo, ctr, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        let norm = 2.0 / (hi - lo);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * sample_rate / n_fft as f64;
            let lower = (f - lo) / (ctr - lo).max(1e-12);
            let upper = (hi - f) / (hi - ctr).max(1e-12);
            let tri = lower.min(upper).max(0.0);
            *w = tri * norm;
        }
    }
    fb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_i0_known_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        // I0(1) = 1.2660658777520083, I0(5) = 27.239871823604442 (Abramowitz & Stegun)
        assert!((bessel_i0(1.0) - 1.2660658777520083).abs() < 1e-12);
        assert!((bessel_i0(5.0) - 27.239871823604442).abs() < 1e-10);
    }

    #[test]
    fn kaiser_window_symmetric_unit_peak() {
        let w = kaiser_window(33, 14.77);
        assert!((w[16] - 1.0).abs() < 1e-12);
        for i in 0..16 {
            assert!((w[i] - w[32 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn low_pass_taps_dc_gain_one() {
        let taps = kaiser_sinc_taps(12, 0.25, 0.3);
        assert_eq!(taps.len(), 12);
        let dc: f64 = taps.iter().sum();
        assert!((dc - 1.0).abs() < 1e-12);
        // symmetric even-length kernel
        for i in 0..6 {
            assert!((taps[i] - taps[11 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mel_filterbank_shapes_and_coverage() {
        let fb = mel_filterbank(16000.0, 1024, 80, 0.0, 8000.0);
        assert_eq!(fb.len(), 80);
        assert_eq!(fb[0].len(), 513);
        // every filter is nonnegative and at least one is nonzero per region
        let col_sum: f64 = fb.iter().flat_map(|r| r.iter()).sum();
        assert!(col_sum > 0.0);
        assert!(fb.iter().flat_map(|r| r.iter()).all(|&v| v >= 0.0));
    }

    #[test]
    fn dft_basis_matches_naive_dft() {
        let win = 16;
        let (cos, sin) = dft_basis(win);
        let x: Vec<f64> = (0..win).map(|i| ((i * i) as f64 * 0.37).sin()).collect();
        let bins = win / 2 + 1;
        for k in 0..bins {
            let re: f64 = (0..win).map(|n| x[n] * cos[n * bins + k]).sum();
            let im: f64 = (0..win).map(|n| x[n] * sin[n * bins + k]).sum();
            let mut re_ref = 0.0;
            let mut im_ref = 0.0;
            for (n, &xn) in x.iter().enumerate() {
                let ph = 2.0 * PI * (k * n) as f64 / win as f64;
                re_ref += xn * ph.cos();
                im_ref -= xn * ph.sin();
            }
            assert!((re - re_ref).abs() < 1e-10);
            assert!((im - im_ref).abs() < 1e-10);
        }
    }
}
