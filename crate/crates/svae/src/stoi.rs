//! Short-Time Objective Intelligibility (STOI): 1/3-octave band envelopes at
//! 10 kHz, 384 ms analysis segments, clipped and normalized band
//! correlations. Reference-directional: the first argument is the clean
//! signal.

use crate::audio::{resample, AudioSegment};
use crate::error::{Error, Result};

pub const STOI_FS: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = 128;
const NFFT: usize = 512;
const NUM_BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEG_FRAMES: usize = 30; // 384 ms at 10 kHz / 128 hop
const BETA: f64 = -15.0;
const DYN_RANGE: f64 = 40.0;
const EPS: f64 = 1e-15;

/// Analysis window: nonzero Hann-like taper (endpoint-free Hann of length
/// `FRAME + 2` with the zero endpoints dropped).
fn analysis_window() -> Vec<f64> {
    (0..FRAME)
        .map(|n| {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * (n + 1) as f64 / (FRAME + 1) as f64).cos()
        })
        .collect()
}

fn frame_starts(len: usize) -> Vec<usize> {
    if len < FRAME {
        return Vec::new();
    }
    (0..len - FRAME).step_by(HOP).collect()
}

/// Drop frames more than 40 dB below the loudest reference frame, then
/// overlap-add the kept (windowed) frames back into signals.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = analysis_window();
    let starts = frame_starts(x.len());
    let mut energies = Vec::with_capacity(starts.len());
    for &s in &starts {
        let e: f64 = (0..FRAME).map(|n| (w[n] * x[s + n]).powi(2)).sum();
        energies.push(20.0 * (e.sqrt() + EPS).log10());
    }
    let max_e = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| max_e - DYN_RANGE - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    let out_len = if kept.is_empty() { 0 } else { (kept.len() - 1) * HOP + FRAME };
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (i, &s) in kept.iter().enumerate() {
        for n in 0..FRAME {
            xs[i * HOP + n] += w[n] * x[s + n];
            ys[i * HOP + n] += w[n] * y[s + n];
        }
    }
    (xs, ys)
}

/// 1/3-octave band bin ranges `[lo, hi)` over the 257 rfft bins, band edges
/// snapped to the nearest bin center.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let bins = NFFT / 2 + 1;
    let bin_freq = |k: usize| k as f64 * STOI_FS as f64 / NFFT as f64;
    let nearest = |f: f64| -> usize {
        (0..bins)
            .min_by(|&a, &b| {
                let da = (bin_freq(a) - f).powi(2);
                let db = (bin_freq(b) - f).powi(2);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
    };
    (0..NUM_BANDS)
        .map(|k| {
            let lo = MIN_FREQ * 2f64.powf((2.0 * k as f64 - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k as f64 + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Band envelope matrix `(NUM_BANDS, frames)`: root of summed spectral power
/// per band.
fn band_envelopes(sig: &[f64]) -> Vec<Vec<f64>> {
    let w = analysis_window();
    let starts = frame_starts(sig.len());
    let bins = NFFT / 2 + 1;
    // DFT of the zero-padded windowed frame, evaluated directly.
    let mut cos_t = vec![0.0; FRAME * bins];
    let mut sin_t = vec![0.0; FRAME * bins];
    for n in 0..FRAME {
        for k in 0..bins {
            let ph = 2.0 * std::f64::consts::PI * (k * n) as f64 / NFFT as f64;
            cos_t[n * bins + k] = ph.cos();
            sin_t[n * bins + k] = ph.sin();
        }
    }
    let bands = third_octave_bands();
    let mut out = vec![vec![0.0; starts.len()]; NUM_BANDS];
    for (fi, &s) in starts.iter().enumerate() {
        let frame: Vec<f64> = (0..FRAME).map(|n| w[n] * sig[s + n]).collect();
        let mut power = vec![0.0; bins];
        for (k, p) in power.iter_mut().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for (n, &v) in frame.iter().enumerate() {
                re += v * cos_t[n * bins + k];
                im -= v * sin_t[n * bins + k];
            }
            *p = re * re + im * im;
        }
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            let e: f64 = power[lo..hi].iter().sum();
            out[b][fi] = e.sqrt();
        }
    }
    out
}

/// STOI of `degraded` against `reference`. Both must share a sample rate;
/// they are trimmed to the shorter length and resampled to 10 kHz internally.
pub fn stoi(reference: &AudioSegment, degraded: &AudioSegment) -> Result<f64> {
    if reference.sample_rate != degraded.sample_rate {
        return Err(Error::Contract(format!(
            "stoi inputs have different sample rates: {} vs {}",
            reference.sample_rate, degraded.sample_rate
        )));
    }
    let n = reference.samples.len().min(degraded.samples.len());
    if n == 0 {
        return Err(Error::Contract("stoi: empty input".into()));
    }
    let trim = |seg: &AudioSegment| AudioSegment {
        samples: seg.samples[..n].to_vec(),
        sample_rate: seg.sample_rate,
        source_id: seg.source_id.clone(),
    };
    let x10 = resample(&trim(reference), STOI_FS);
    let y10 = resample(&trim(degraded), STOI_FS);
    let (xs, ys) = remove_silent_frames(&x10.samples, &y10.samples);
    let x_env = band_envelopes(&xs);
    let y_env = band_envelopes(&ys);
    let frames = x_env[0].len();
    if frames < SEG_FRAMES {
        return Err(Error::Contract(format!(
            "stoi: {frames} spectral frames after silence removal, need at least {SEG_FRAMES} \
             (about 384 ms of active speech)"
        )));
    }
    let clip = 1.0 + 10f64.powf(-BETA / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for m in SEG_FRAMES..=frames {
        for b in 0..NUM_BANDS {
            let xseg = &x_env[b][m - SEG_FRAMES..m];
            let yseg = &y_env[b][m - SEG_FRAMES..m];
            let xn: f64 = xseg.iter().map(|v| v * v).sum::<f64>().sqrt();
            let yn: f64 = yseg.iter().map(|v| v * v).sum::<f64>().sqrt();
            let alpha = xn / (yn + EPS);
            let clipped: Vec<f64> = yseg
                .iter()
                .zip(xseg)
                .map(|(&y, &x)| (alpha * y).min(clip * x))
                .collect();
            let xm = xseg.iter().sum::<f64>() / SEG_FRAMES as f64;
            let ym = clipped.iter().sum::<f64>() / SEG_FRAMES as f64;
            let mut dot = 0.0;
            let mut nx = 0.0;
            let mut ny = 0.0;
            for i in 0..SEG_FRAMES {
                let a = xseg[i] - xm;
                let c = clipped[i] - ym;
                dot += a * c;
                nx += a * a;
                ny += c * c;
            }
            total += dot / (nx.sqrt() * ny.sqrt() + EPS);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn speechlike(seconds: f64, seed: u64) -> AudioSegment {
        // Harmonic stack with slow amplitude modulation plus a broadband
        // component, so every 1/3-octave band carries signal energy.
        let n = (seconds * STOI_FS as f64) as usize;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let f0 = 110.0 + r.random::<f64>() * 60.0;
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / STOI_FS as f64;
                let env = 0.4 + 0.35 * (2.0 * std::f64::consts::PI * 2.7 * t).sin();
                let mut v = 0.0;
                for h in 1..24 {
                    v += (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64;
                }
                let hiss = (r.random::<f64>() - 0.5) * 0.5;
                env * (v / 3.0 + hiss)
            })
            .collect();
        AudioSegment { samples, sample_rate: STOI_FS, source_id: format!("synt{seed}") }
    }

    #[test]
    fn self_stoi_is_one() {
        let x = speechlike(1.2, 3);
        let v = stoi(&x, &x).unwrap();
        assert!(v >= 0.999, "self STOI {v}");
    }

    #[test]
    fn independent_noise_scores_low() {
        let x = speechlike(1.2, 4);
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let noise = AudioSegment {
            samples: (0..x.samples.len()).map(|_| (r.random::<f64>() - 0.5) * 0.6).collect(),
            sample_rate: STOI_FS,
            source_id: "noise".into(),
        };
        let v = stoi(&x, &noise).unwrap();
        assert!(v <= 0.2, "noise STOI {v}");
    }

    #[test]
    fn monotone_in_snr() {
        let x = speechlike(1.5, 5);
        let mut r = ChaCha8Rng::seed_from_u64(123);
        let noise: Vec<f64> = (0..x.samples.len()).map(|_| (r.random::<f64>() - 0.5) * 2.0).collect();
        let sig_rms = (x.samples.iter().map(|v| v * v).sum::<f64>() / x.samples.len() as f64).sqrt();
        let noise_rms = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt();
        let mut prev = -1.0;
        for snr_db in [-10.0, 0.0, 10.0, 25.0] {
            let gain = sig_rms / noise_rms * 10f64.powf(-snr_db / 20.0);
            let deg = AudioSegment {
                samples: x
                    .samples
                    .iter()
                    .zip(&noise)
                    .map(|(&s, &n)| s + gain * n)
                    .collect(),
                sample_rate: STOI_FS,
                source_id: "deg".into(),
            };
            let v = stoi(&x, &deg).unwrap();
            assert!(v > prev, "STOI must increase with SNR: {v} after {prev}");
            prev = v;
        }
        assert!(prev > 0.85, "high-SNR STOI should be high, got {prev}");
    }

    #[test]
    fn too_short_input_errors() {
        let x = speechlike(0.2, 6);
        assert!(matches!(stoi(&x, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn sixteen_khz_inputs_resample_internally() {
        let x10 = speechlike(1.0, 7);
        let x16 = resample(&x10, 16_000);
        let v = stoi(&x16, &x16).unwrap();
        assert!(v >= 0.999);
    }

    #[test]
    fn band_edges_cover_150hz_to_near_nyquist() {
        let bands = third_octave_bands();
        assert_eq!(bands.len(), 15);
        // first band centered near 150 Hz: lo bin ~ 133.9 Hz -> bin 7
        assert_eq!(bands[0].0, 7);
        // last band: center 150*2^(14/3) ~ 3807 Hz, hi edge ~ 4273 Hz
        let hi = bands[14].1;
        let hz = hi as f64 * STOI_FS as f64 / NFFT as f64;
        assert!((4200.0..4400.0).contains(&hz), "top edge {hz} Hz");
    }
}
