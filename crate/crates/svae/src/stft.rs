//! Differentiable STFT and log-mel spectrograms, built from framing + DFT
//! basis matmuls so gradients flow through the autodiff engine.

use autodiff::Tensor;

use crate::dsp;

/// Precomputed window + real-DFT basis for one STFT configuration.
pub struct StftBasis {
    pub win: usize,
    pub hop: usize,
    window: Tensor,
    cos: Tensor,
    sin: Tensor,
}

impl StftBasis {
    pub fn new(win: usize, hop: usize) -> Self {
        let (cos, sin) = dsp::dft_basis(win);
        let bins = win / 2 + 1;
        Self {
            win,
            hop,
            window: Tensor::from_vec(dsp::hann_window(win), &[win]),
            cos: Tensor::from_vec(cos, &[win, bins]),
            sin: Tensor::from_vec(sin, &[win, bins]),
        }
    }

    pub fn bins(&self) -> usize {
        self.win / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        1 + (len.max(self.win) - self.win) / self.hop
    }

    /// `(B, T)` waveforms -> `(re, im)` each `(B, F, bins)`. Inputs shorter
    /// than one window are right-padded with zeros.
    pub fn stft(&self, x: &Tensor) -> (Tensor, Tensor) {
        assert_eq!(x.dims().len(), 2, "stft expects (B, T)");
        let len = x.dims()[1];
        let x = if len < self.win { x.pad_zeros(1, 0, self.win - len) } else { x.clone() };
        let frames = x.unfold_frames(self.win, self.hop);
        let windowed = frames.mul(&self.window);
        (windowed.bmm_shared(&self.cos), windowed.bmm_shared(&self.sin))
    }

    /// Magnitude spectrogram `sqrt(re^2 + im^2 + 1e-12)`, `(B, F, bins)`.
    pub fn magnitude(&self, x: &Tensor) -> Tensor {
        let (re, im) = self.stft(x);
        re.sqr().add(&im.sqr()).add_scalar(1e-12).sqrt()
    }
}

/// Mel-spectrogram basis: STFT magnitude through a mel filterbank, log10 with
/// a fixed floor.
pub struct MelBasis {
    pub stft: StftBasis,
    pub n_mels: usize,
    fb_t: Tensor, // (bins, n_mels)
}

pub const LOG_MEL_FLOOR: f64 = 1e-5;

impl MelBasis {
    pub fn new(sample_rate: f64, win: usize, hop: usize, n_mels: usize) -> Self {
        let stft = StftBasis::new(win, hop);
        let fb = dsp::mel_filterbank(sample_rate, win, n_mels, 0.0, sample_rate / 2.0);
        let bins = stft.bins();
        let mut fb_t = vec![0.0; bins * n_mels];
        for (m, row) in fb.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                fb_t[k * n_mels + m] = v;
            }
        }
        Self { stft, n_mels, fb_t: Tensor::from_vec(fb_t, &[bins, n_mels]) }
    }

    /// `(B, T)` -> log10 mel `(B, F, n_mels)`, floored at 1e-5.
    pub fn log_mel(&self, x: &Tensor) -> Tensor {
        let mag = self.stft.magnitude(x);
        let mel = mag.bmm_shared(&self.fb_t);
        mel.clamp(LOG_MEL_FLOOR, f64::INFINITY).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stft_frame_count_and_sine_peak_bin() {
        let basis = StftBasis::new(512, 128);
        let sr = 16_000.0;
        let f0 = 1000.0;
        let x: Vec<f64> = (0..4096).map(|n| (2.0 * std::f64::consts::PI * f0 * n as f64 / sr).sin()).collect();
        let t = Tensor::from_vec(x, &[1, 4096]);
        let mag = basis.magnitude(&t);
        let frames = 1 + (4096 - 512) / 128;
        assert_eq!(mag.dims(), &[1, frames, 257]);
        // peak bin should be k = f0/sr*win = 32
        let v = mag.to_vec();
        let row = &v[0..257];
        let peak = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, 32);
    }

    #[test]
    fn short_input_is_padded_to_one_frame() {
        let basis = StftBasis::new(256, 64);
        let t = Tensor::from_vec(vec![0.5; 100], &[1, 100]);
        let (re, _) = basis.stft(&t);
        assert_eq!(re.dims()[1], 1);
    }

    #[test]
    fn log_mel_floor_applies_on_silence() {
        let mel = MelBasis::new(16_000.0, 256, 64, 20);
        let x = Tensor::zeros(&[1, 1024]);
        let lm = mel.log_mel(&x);
        // sqrt(1e-12) = 1e-6 magnitudes, mel sums stay below the 1e-5 floor
        assert!(lm.to_vec().iter().all(|&v| (v - (-5.0)).abs() < 1e-6));
    }
}
