//! Evaluation tools: checkpointed reconstruction, latent export/import for
//! downstream TTS, STOI-based reconstruction reports with optional external
//! metric providers (PESQ/UTMOS).

use std::path::{Path, PathBuf};
use std::process::Command;

use autodiff::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioSegment, SegmentBatch, MODEL_SAMPLE_RATE};
use crate::ckpt::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::latent::{TensorFile, LATENT_CHANNELS};
use crate::model::{reparameterize, LatentSequence, Vae, LATENT_FRAME_RATE};
use crate::nn::{Graph, ParamStore};
use crate::rng;
use crate::stoi::stoi;

/// Inference-side model: VAE weights restored from a checkpoint.
pub struct EvalModel {
    pub cfg: RunConfig,
    pub vae: Vae,
    pub store: ParamStore,
}

impl EvalModel {
    pub fn load(ckpt_path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(ckpt_path)?;
        let cfg = ck.manifest.config.clone();
        let vae = Vae::new(cfg.model.clone())?;
        let mut store = ParamStore::new();
        vae.register(&mut store, cfg.train.seed);
        let names: Vec<String> = store.names().cloned().collect();
        for name in &names {
            if !(name.starts_with("enc.") || name.starts_with("dec.")) {
                continue;
            }
            let key = format!("param.{name}");
            let value = ck.tensors.get(&key).ok_or_else(|| {
                Error::IncompatibleCheckpoint(format!("checkpoint missing parameter {name}"))
            })?;
            if value.shape() != store.get(name).shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    value.shape(),
                    store.get(name).shape()
                )));
            }
            *store.get_mut(name) = value.clone();
        }
        Ok(Self { cfg, vae, store })
    }

    fn batch_for(&self, seg: &AudioSegment) -> SegmentBatch {
        SegmentBatch {
            samples: Array2::from_shape_vec((1, seg.samples.len()), seg.samples.clone()).unwrap(),
            source_ids: vec![seg.source_id.clone()],
            sample_rate: seg.sample_rate,
        }
    }

    /// Posterior-mean latents for one utterance, `(T, 64)`.
    pub fn encode_mean(&self, seg: &AudioSegment) -> Result<Array2<f64>> {
        let g = Graph::inference(&self.store);
        let post = self.vae.encode(&g, &self.batch_for(seg))?;
        let z = post.mean;
        let (c, t) = (z.dims()[1], z.dims()[2]);
        let mut out = Array2::<f64>::zeros((t, c));
        let data = z.data();
        for ti in 0..t {
            for ci in 0..c {
                out[(ti, ci)] = data[[0, ci, ti]];
            }
        }
        Ok(out)
    }

    /// Sampled latents for one utterance, `(T, 64)`.
    pub fn encode_sample(&self, seg: &AudioSegment, seed: u64) -> Result<Array2<f64>> {
        let g = Graph::inference(&self.store);
        let post = self.vae.encode(&g, &self.batch_for(seg))?;
        let z = reparameterize(&post, Some(seed));
        let (c, t) = (z.frames.dims()[1], z.frames.dims()[2]);
        let data = z.frames.data();
        let mut out = Array2::<f64>::zeros((t, c));
        for ti in 0..t {
            for ci in 0..c {
                out[(ti, ci)] = data[[0, ci, ti]];
            }
        }
        Ok(out)
    }

    /// decode(encode-mean(x)), trimmed to the input length.
    pub fn reconstruct(&self, seg: &AudioSegment) -> Result<AudioSegment> {
        if seg.sample_rate != MODEL_SAMPLE_RATE {
            return Err(Error::Contract(format!(
                "reconstruction requires 16 kHz input, got {}",
                seg.sample_rate
            )));
        }
        let g = Graph::inference(&self.store);
        let post = self.vae.encode(&g, &self.batch_for(seg))?;
        let z = reparameterize(&post, None);
        let y = self.vae.decode(&g, &z)?;
        let samples: Vec<f64> = y.to_vec().into_iter().take(seg.samples.len()).collect();
        Ok(AudioSegment {
            samples,
            sample_rate: MODEL_SAMPLE_RATE,
            source_id: format!("{}_recon", seg.source_id),
        })
    }
}

/// Reconstruct one file to `<out_dir>/<stem>_recon.wav` (input is resampled
/// to 16 kHz if needed).
pub fn reconstruct_file(input: &Path, model: &EvalModel, out_dir: &Path) -> Result<PathBuf> {
    let seg = audio::resample(&audio::load_audio(input)?, MODEL_SAMPLE_RATE);
    let rec = model.reconstruct(&seg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("audio");
    let out = out_dir.join(format!("{stem}_recon.wav"));
    audio::save_wav(&out, &rec)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportMode {
    Mean,
    Sample,
}

impl std::str::FromStr for ExportMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ExportMode::Mean),
            "sample" => Ok(ExportMode::Sample),
            other => Err(Error::Config(format!("bad export mode {other:?} (mean | sample)"))),
        }
    }
}

/// Export latents for every manifest entry as `<stem>.svl` tensor files.
/// I/O failures are reported per file and the run continues.
pub fn export_latents(
    manifest: &Path,
    model: &EvalModel,
    mode: ExportMode,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<(PathBuf, Result<PathBuf>)>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = audio::read_manifest(manifest)?;
    let mut results = Vec::with_capacity(paths.len());
    for p in paths {
        let one = (|| -> Result<PathBuf> {
            let seg = audio::resample(&audio::load_audio(&p)?, MODEL_SAMPLE_RATE);
            let z = match mode {
                ExportMode::Mean => model.encode_mean(&seg)?,
                ExportMode::Sample => {
                    let per_file = rng::splitmix64(seed ^ rng::fnv1a(seg.source_id.as_bytes()));
                    model.encode_sample(&seg, per_file)?
                }
            };
            debug_assert_eq!(z.ncols(), LATENT_CHANNELS);
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("utt");
            let out = out_dir.join(format!("{stem}.svl"));
            TensorFile::new(z.mapv(|v| v as f32), LATENT_FRAME_RATE as f32).write(&out)?;
            Ok(out)
        })();
        if let Err(e) = &one {
            eprintln!("warning: export failed for {}: {e}", p.display());
        }
        results.push((p, one));
    }
    Ok(results)
}

/// External metric provider: a command invoked as `cmd <ref.wav> <deg.wav>`
/// whose stdout parses as a float score.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricProvider {
    pub name: String,
    pub command: String,
    pub model_id: String,
}

impl MetricProvider {
    fn score(&self, reference: &Path, degraded: &Path) -> Result<f64> {
        let out = Command::new(&self.command)
            .arg(reference)
            .arg(degraded)
            .output()
            .map_err(|e| Error::Provider(format!("{}: {e}", self.command)))?;
        if !out.status.success() {
            return Err(Error::Provider(format!(
                "{} exited with {}",
                self.command, out.status
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim()
            .parse::<f64>()
            .map_err(|_| Error::Provider(format!("{}: unparseable output {text:?}", self.command)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileMetrics {
    pub path: String,
    pub stoi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pesq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utmos: Option<f64>,
}

/// Per-file metrics plus corpus means; provider identifiers are recorded so
/// scores stay attributable to a specific external model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReconReport {
    pub files: Vec<FileMetrics>,
    pub mean_stoi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_pesq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_utmos: Option<f64>,
    pub providers: Vec<String>,
}

pub struct EvalProviders {
    pub pesq: Option<MetricProvider>,
    pub utmos: Option<MetricProvider>,
}

/// Reconstruct every manifest entry with `model` and score it. `reconstruct`
/// may be `None` to evaluate an identity "model" (x_hat = x), which bounds
/// the metric pipeline from above.
pub fn eval_reconstruction(
    manifest: &Path,
    model: Option<&EvalModel>,
    providers: &EvalProviders,
    work_dir: &Path,
) -> Result<ReconReport> {
    std::fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
    let paths = audio::read_manifest(manifest)?;
    if paths.is_empty() {
        return Err(Error::Config("empty evaluation manifest".into()));
    }
    let mut files = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let seg = audio::resample(&audio::load_audio(p)?, MODEL_SAMPLE_RATE);
        let rec = match model {
            Some(m) => m.reconstruct(&seg)?,
            None => seg.clone(),
        };
        let stoi_v = stoi(&seg, &rec)?;
        let mut pesq = None;
        let mut utmos = None;
        if providers.pesq.is_some() || providers.utmos.is_some() {
            let ref_path = work_dir.join(format!("ref_{i}.wav"));
            let deg_path = work_dir.join(format!("deg_{i}.wav"));
            audio::save_wav(&ref_path, &seg)?;
            audio::save_wav(&deg_path, &rec)?;
            if let Some(prov) = &providers.pesq {
                match prov.score(&ref_path, &deg_path) {
                    Ok(v) => pesq = Some(v),
                    Err(e) => eprintln!("warning: pesq provider failed on {}: {e}", p.display()),
                }
            }
            if let Some(prov) = &providers.utmos {
                match prov.score(&ref_path, &deg_path) {
                    Ok(v) => utmos = Some(v),
                    Err(e) => eprintln!("warning: utmos provider failed on {}: {e}", p.display()),
                }
            }
        }
        files.push(FileMetrics { path: p.display().to_string(), stoi: stoi_v, pesq, utmos });
    }
    let mean = |get: fn(&FileMetrics) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = files.iter().filter_map(get).collect();
        if vals.len() == files.len() && !vals.is_empty() {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        } else {
            None
        }
    };
    let mean_stoi = files.iter().map(|f| f.stoi).sum::<f64>() / files.len() as f64;
    let mut provider_ids = Vec::new();
    if let Some(p) = &providers.pesq {
        provider_ids.push(format!("pesq:{}:{}", p.command, p.model_id));
    }
    if let Some(p) = &providers.utmos {
        provider_ids.push(format!("utmos:{}:{}", p.command, p.model_id));
    }
    Ok(ReconReport {
        mean_stoi,
        mean_pesq: mean(|f| f.pesq),
        mean_utmos: mean(|f| f.utmos),
        files,
        providers: provider_ids,
    })
}

impl ReconReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad report: {e}")))
    }
}

/// Read exported latents back as an `(T, 64)` f32 tensor plus the frame rate.
pub fn import_latents(path: &Path) -> Result<TensorFile> {
    let tf = TensorFile::read(path)?;
    if tf.channels() != LATENT_CHANNELS {
        return Err(Error::Contract(format!(
            "latent file has {} channels, expected {LATENT_CHANNELS}",
            tf.channels()
        )));
    }
    Ok(tf)
}

/// Decode an imported latent file back to a waveform (for downstream
/// consumers that hold latents only).
pub fn decode_latents(model: &EvalModel, tf: &TensorFile) -> Result<AudioSegment> {
    let (t, c) = (tf.frames(), tf.channels());
    let mut data = vec![0.0f64; c * t];
    for ti in 0..t {
        for ci in 0..c {
            data[ci * t + ti] = tf.data[(ti, ci)] as f64;
        }
    }
    let z = LatentSequence {
        frames: Tensor::from_vec(data, &[1, c, t]),
        frame_rate: tf.frame_rate as f64,
    };
    let g = Graph::inference(&model.store);
    let y = model.vae.decode(&g, &z)?;
    Ok(AudioSegment {
        samples: y.to_vec(),
        sample_rate: MODEL_SAMPLE_RATE,
        source_id: "decoded_latents".into(),
    })
}
