//! Audio ingestion: WAV loading, windowed-sinc resampling, and deterministic
//! segmentation of clips into fixed-length training batches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;

use ndarray::Array2;
use rand::RngExt;

use crate::error::{Error, Result};
use crate::{dsp, rng};

pub const MODEL_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform with its sample rate; values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct AudioSegment {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioSegment {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Segmentation policy for training windows.
#[derive(Debug, Clone)]
pub struct BatchSpec {
    pub segment_seconds: f64,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl BatchSpec {
    pub fn new(segment_seconds: f64, batch_size: usize, shuffle_seed: u64) -> Result<Self> {
        let samples = segment_seconds * MODEL_SAMPLE_RATE as f64;
        if (samples - samples.round()).abs() > 1e-9 || samples < 1.0 {
            return Err(Error::Config(format!(
                "segment_seconds {segment_seconds} is not an integer sample count at 16 kHz"
            )));
        }
        if batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(Self { segment_seconds, batch_size, shuffle_seed })
    }

    pub fn window_samples(&self) -> usize {
        (self.segment_seconds * MODEL_SAMPLE_RATE as f64).round() as usize
    }
}

/// A batch of equal-length 16 kHz windows plus their provenance ids.
#[derive(Debug, Clone)]
pub struct SegmentBatch {
    /// `(batch, window_samples)`
    pub samples: Array2<f64>,
    pub source_ids: Vec<String>,
    pub sample_rate: u32,
}

/// Read a PCM WAV file (16-bit int or 32-bit float, any channel count) as a
/// channel-averaged mono segment. The original sample rate is preserved.
pub fn load_audio(path: &Path) -> Result<AudioSegment> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavFormat(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::WavFormat(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::WavFormat(format!("{}: {e}", path.display())))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::WavFormat(format!("{}: {e}", path.display())))?,
        (fmt, bits) => {
            return Err(Error::WavFormat(format!(
                "{}: unsupported encoding {fmt:?}/{bits}-bit (expected 16-bit PCM or 32-bit float)",
                path.display()
            )))
        }
    };
    if interleaved.iter().any(|v| !v.is_finite()) {
        return Err(Error::WavFormat(format!("{}: non-finite samples", path.display())));
    }
    let frames = interleaved.len() / channels;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0;
        for c in 0..channels {
            acc += interleaved[f * channels + c];
        }
        samples.push(acc / channels as f64);
    }
    // Clipping guard: float inputs may exceed full scale.
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        let scale = 0.95 / peak;
        for s in &mut samples {
            *s *= scale;
        }
    }
    Ok(AudioSegment {
        samples,
        sample_rate: spec.sample_rate,
        source_id: path.display().to_string(),
    })
}

/// Write a segment as 16-bit PCM WAV.
pub fn save_wav(path: &Path, seg: &AudioSegment) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: seg.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::WavFormat(e.to_string()))?;
    for &s in &seg.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| Error::WavFormat(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::WavFormat(e.to_string()))?;
    Ok(())
}

/// Band-limited windowed-sinc resampler (Kaiser beta = 14.77, 64 zero
/// crossings). Output length is `round(len * target / source)`; equal rates
/// return the input bit-identically.
pub fn resample(seg: &AudioSegment, target_rate: u32) -> AudioSegment {
    assert!(seg.sample_rate > 0 && target_rate > 0, "sample rates must be positive");
    if target_rate == seg.sample_rate {
        return seg.clone();
    }
    const BETA: f64 = 14.77;
    const ZERO_CROSSINGS: usize = 64;
    let ratio = target_rate as f64 / seg.sample_rate as f64;
    let cutoff = 0.5 * ratio.min(1.0); // cycles per source sample
    let half_width = ZERO_CROSSINGS as f64 / (2.0 * cutoff);
    let out_len = ((seg.samples.len() as f64) * ratio).round() as usize;
    let x = &seg.samples;
    let i0_beta = dsp::bessel_i0(BETA);
    let samples: Vec<f64> = (0..out_len)
        .map(|n| {
            let center = n as f64 / ratio;
            let lo = ((center - half_width).ceil() as isize).max(0) as usize;
            let hi = ((center + half_width).floor() as isize).min(x.len() as isize - 1);
            if hi < 0 {
                return 0.0;
            }
            let mut acc = 0.0;
            for m in lo..=(hi as usize) {
                let t = m as f64 - center;
                let u = t / half_width;
                let win = dsp::bessel_i0(BETA * (1.0 - u * u).max(0.0).sqrt()) / i0_beta;
                acc += x[m] * 2.0 * cutoff * dsp::sinc(2.0 * cutoff * t) * win;
            }
            acc
        })
        .collect();
    AudioSegment {
        samples,
        sample_rate: target_rate,
        source_id: seg.source_id.clone(),
    }
}

/// Dataset manifest: UTF-8 text, one path per line (absolute, or relative to
/// the manifest's directory). Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

/// The `k`-th training batch as a pure function of `(segs, spec, k)`:
/// clip indices and crop offsets come from a ChaCha stream keyed by
/// `(shuffle_seed, k)`, windows are right-padded with zeros.
pub fn batch_at(segs: &[AudioSegment], spec: &BatchSpec, k: u64) -> SegmentBatch {
    let win = spec.window_samples();
    let mut out = Array2::<f64>::zeros((spec.batch_size, win));
    let mut ids = Vec::with_capacity(spec.batch_size);
    let mut r = rng::stream_at(spec.shuffle_seed, "batch", k);
    for j in 0..spec.batch_size {
        let idx = r.random_range(0..segs.len());
        let seg = &segs[idx];
        debug_assert_eq!(seg.sample_rate, MODEL_SAMPLE_RATE);
        let max_off = seg.samples.len().saturating_sub(win);
        let off = if max_off == 0 { 0 } else { r.random_range(0..=max_off) };
        let n = win.min(seg.samples.len() - off);
        for t in 0..n {
            out[(j, t)] = seg.samples[off + t];
        }
        ids.push(format!("{}#{off}", seg.source_id));
    }
    SegmentBatch { samples: out, source_ids: ids, sample_rate: MODEL_SAMPLE_RATE }
}

/// Endless deterministic batch iterator (empty input gives an empty iterator).
pub fn segment_stream<'a>(
    segs: &'a [AudioSegment],
    spec: &'a BatchSpec,
) -> impl Iterator<Item = SegmentBatch> + 'a {
    (0u64..).map_while(move |k| {
        if segs.is_empty() {
            None
        } else {
            Some(batch_at(segs, spec, k))
        }
    })
}

/// Multi-worker prefetching variant over batch indices `start..total`:
/// `workers` threads compute batches ahead; a sequencer re-orders so the
/// consumed order equals the single-threaded order exactly.
pub fn segment_stream_prefetched(
    segs: Arc<Vec<AudioSegment>>,
    spec: BatchSpec,
    workers: usize,
    start: u64,
    total: u64,
) -> impl Iterator<Item = SegmentBatch> {
    let workers = workers.max(1);
    let (tx, rx) = mpsc::sync_channel::<(u64, SegmentBatch)>(workers * 4);
    for w in 0..workers {
        let segs = Arc::clone(&segs);
        let spec = spec.clone();
        let tx = tx.clone();
        std::thread::spawn(move || {
            if segs.is_empty() {
                return;
            }
            let mut k = start + w as u64;
            while k < total {
                if tx.send((k, batch_at(&segs, &spec, k))).is_err() {
                    return;
                }
                k += workers as u64;
            }
        });
    }
    drop(tx);
    let mut pending: BTreeMap<u64, SegmentBatch> = BTreeMap::new();
    let mut next: u64 = start;
    std::iter::from_fn(move || {
        if next >= total {
            return None;
        }
        loop {
            if let Some(b) = pending.remove(&next) {
                next += 1;
                return Some(b);
            }
            match rx.recv() {
                Ok((k, b)) => {
                    pending.insert(k, b);
                }
                Err(_) => return None,
            }
        }
    })
}
