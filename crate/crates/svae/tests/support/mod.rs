//! Shared helpers for the integration and acceptance suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svae::audio::AudioSegment;
use svae::config::RunConfig;

/// Speech-like 16 kHz test clip: drifting harmonic stack with amplitude
/// modulation and a broadband component.
pub fn speechlike_16k(seconds: f64, seed: u64) -> AudioSegment {
    let sr = 16_000.0;
    let n = (seconds * sr) as usize;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let f0 = 100.0 + r.random::<f64>() * 80.0;
    let drift = 0.8 + r.random::<f64>() * 0.4;
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.4 + 0.3 * (2.0 * std::f64::consts::PI * (2.0 + drift) * t).sin();
            let mut v = 0.0;
            for h in 1..20 {
                v += (2.0 * std::f64::consts::PI * f0 * (1.0 + 0.05 * drift * t) * h as f64 * t)
                    .sin()
                    / h as f64;
            }
            let hiss = (r.random::<f64>() - 0.5) * 0.4;
            (env * (v / 3.0 + hiss)).clamp(-0.99, 0.99)
        })
        .collect();
    AudioSegment { samples, sample_rate: 16_000, source_id: format!("clip{seed}") }
}

/// Write `n` clips and a manifest listing them; returns the manifest path.
pub fn make_dataset(dir: &Path, n: usize, seconds: f64) -> PathBuf {
    let mut lines = Vec::new();
    for i in 0..n {
        let seg = speechlike_16k(seconds, 1000 + i as u64);
        let path = dir.join(format!("clip{i}.wav"));
        svae::audio::save_wav(&path, &seg).unwrap();
        lines.push(format!("clip{i}.wav"));
    }
    let manifest = dir.join("manifest.txt");
    std::fs::write(&manifest, lines.join("\n")).unwrap();
    manifest
}

/// Desk-scale configuration: full architecture shape (strides, 64-dim 40 Hz
/// latent, AMP decoder, 8 discriminator heads) at widths sized for CPU tests.
pub fn desk_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.base_channels = 8;
    cfg.model.amp_kernel_sizes = vec![3];
    cfg.model.amp_dilations = vec![1];
    cfg.discriminator.mpd_channels = vec![4, 8];
    cfg.discriminator.stft_channels = 4;
    cfg.train.batch_size = 2;
    cfg.train.segment_seconds = 1.0;
    cfg.train.total_steps = 10;
    cfg.train.checkpoint_every = 5;
    cfg.train.seed = 7;
    cfg.train.data_workers = 1;
    cfg
}
