//! Alternating discriminator/generator optimization with exponential lr
//! decay, NaN firewalls, JSONL metric logging and bit-exact checkpoint
//! resume.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use autodiff::optim::{clip_global_norm, Adam, AdamConfig};
use autodiff::Tensor;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::align::{alignment_loss, interp_to_latent_grid, make_provider, AlignmentHead, SslProvider};
use crate::audio::{self, AudioSegment, BatchSpec, SegmentBatch, MODEL_SAMPLE_RATE};
use crate::ckpt::Checkpoint;
use crate::config::{AlignTarget, RunConfig, TrainConfig};
use crate::disc::Discriminators;
use crate::error::{Error, Result};
use crate::model::{reparameterize, LatentSequence, Vae};
use crate::objectives::{
    adv_loss_discriminator, adv_loss_generator, feature_matching_loss, kl_loss,
    total_generator_loss, GeneratorLossTerms, MelLoss,
};
use crate::nn::{Graph, ParamStore};
use crate::rng;

/// Learning rate after `step` decay applications: `lr * gamma^step`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay_gamma.powi(step.min(i32::MAX as u64) as i32)
}

/// One JSONL log record per training step.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub recon: f64,
    pub kl: f64,
    pub adv_gen: f64,
    pub adv_disc: f64,
    pub feat: f64,
    pub align: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub vae: Vae,
    pub disc: Discriminators,
    pub align_head: AlignmentHead,
    pub mel: MelLoss,
    pub provider: Box<dyn SslProvider>,
    /// Generator-side parameters (`enc.`, `dec.`, `align.`).
    pub store_g: ParamStore,
    /// Discriminator parameters (`disc.`), a distinct namespace in the same
    /// checkpoint.
    pub store_d: ParamStore,
    opt_g: Adam,
    opt_d: Adam,
    pub step: u64,
    pub best_total: f64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let provider = make_provider(&cfg.ssl)?;
        let vae = Vae::new(cfg.model.clone())?;
        let disc = Discriminators::new(cfg.discriminator.clone())?;
        let align_head = AlignmentHead::new(
            provider.ssl_dim(),
            cfg.model.latent_dim,
            cfg.align.kernel_size,
        )?;
        let mut store_g = ParamStore::new();
        let mut store_d = ParamStore::new();
        let seed = cfg.train.seed;
        vae.register(&mut store_g, seed);
        align_head.register(&mut store_g, seed);
        disc.register(&mut store_d, seed);
        let adam = |b1, b2| Adam::new(AdamConfig { beta1: b1, beta2: b2, eps: 1e-8 });
        Ok(Self {
            mel: MelLoss::new(&cfg.mel)?,
            opt_g: adam(cfg.train.adam_beta1, cfg.train.adam_beta2),
            opt_d: adam(cfg.train.adam_beta1, cfg.train.adam_beta2),
            cfg,
            vae,
            disc,
            align_head,
            provider,
            store_g,
            store_d,
            step: 0,
            best_total: f64::INFINITY,
        })
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &SegmentBatch) -> Result<StepRecord> {
        let s = self.step;
        let lr = lr_at(s, &self.cfg.train);
        let w = &self.cfg.loss_weights;
        let (b, t_in) = (batch.samples.nrows(), batch.samples.ncols());
        let x = Tensor::from_array(
            batch
                .samples
                .clone()
                .into_shape_with_order((b, t_in))
                .unwrap()
                .into_dyn(),
        );

        // Generator forward (its graph stays alive across the discriminator
        // update; the D step only touches store_d).
        let g_gen = Graph::train(&self.store_g);
        let post = self.vae.encode(&g_gen, batch)?;
        let noise_seed = rng::splitmix64(self.cfg.train.seed ^ rng::fnv1a(b"reparam-noise") ^ s);
        let z = reparameterize(&post, Some(noise_seed));
        let x_hat_full = self.vae.decode(&g_gen, &z)?;
        let x_hat = if x_hat_full.dims()[1] > t_in {
            x_hat_full.narrow(1, 0, t_in)
        } else {
            x_hat_full
        };
        let feats = self.provider.extract(batch, self.cfg.ssl.layer)?;
        let aligned = interp_to_latent_grid(&feats, post.frames());
        let h = self.align_head.project(&g_gen, &aligned)?;
        let align_target = match self.cfg.align.target {
            AlignTarget::Sample => LatentSequence { frames: z.frames.clone(), frame_rate: z.frame_rate },
            AlignTarget::Mean => LatentSequence { frames: post.mean.clone(), frame_rate: post.frame_rate },
        };

        // Discriminator step on (real, detached fake).
        let mut d_grads = {
            let g_d = Graph::train(&self.store_d);
            let real_out = self.disc.discriminate(&g_d, &x);
            let fake_out = self.disc.discriminate(&g_d, &x_hat.detach());
            let d_loss = adv_loss_discriminator(&real_out, &fake_out)?;
            if !d_loss.item().is_finite() {
                return Err(Error::TrainingAbort { term: "adv_disc".into(), step: s });
            }
            let mut grads = d_loss.backward();
            (d_loss.item(), g_d.grads(&mut grads, &[]))
        };
        let adv_disc = d_grads.0;
        clip_global_norm(&mut d_grads.1, self.cfg.train.grad_clip);
        self.opt_d.step(lr, self.store_d.map_mut(), &d_grads.1);

        // Generator step against the updated discriminator.
        let (adv_gen, feat) = {
            let g_d2 = Graph::train(&self.store_d);
            let fake_out_g = self.disc.discriminate(&g_d2, &x_hat);
            let real_out_g = {
                let gi = Graph::inference(&self.store_d);
                self.disc.discriminate(&gi, &x)
            };
            (
                adv_loss_generator(&fake_out_g),
                feature_matching_loss(&real_out_g, &fake_out_g)?,
            )
        };
        let terms = GeneratorLossTerms {
            recon: self.mel.mel_recon_loss(&x, &x_hat)?,
            kl: kl_loss(&post),
            adv_gen,
            feat,
            align: alignment_loss(&h, &align_target, self.cfg.align.variant)?,
        };
        let (total_tensor, brk) = total_generator_loss(&terms, w, s)?;
        let mut grads = total_tensor.backward();
        let mut g_grads = g_gen.grads(&mut grads, &[]);
        drop(g_gen);
        clip_global_norm(&mut g_grads, self.cfg.train.grad_clip);
        self.opt_g.step(lr, self.store_g.map_mut(), &g_grads);

        self.step += 1;
        if brk.total < self.best_total {
            self.best_total = brk.total;
        }
        Ok(StepRecord {
            step: s,
            recon: brk.recon,
            kl: brk.kl,
            adv_gen: brk.adv_gen,
            adv_disc,
            feat: brk.feat,
            align: brk.align,
            total: brk.total,
            lr,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
        for store in [&self.store_g, &self.store_d] {
            for (name, value) in store.iter() {
                tensors.insert(format!("param.{name}"), value.clone());
            }
        }
        for (pfx, opt) in [("optg", &self.opt_g), ("optd", &self.opt_d)] {
            for (name, value) in &opt.m {
                tensors.insert(format!("{pfx}.m.{name}"), value.clone());
            }
            for (name, value) in &opt.v {
                tensors.insert(format!("{pfx}.v.{name}"), value.clone());
            }
        }
        Checkpoint::save(
            path,
            &tensors,
            self.step,
            self.opt_g.step,
            self.opt_d.step,
            self.best_total,
            &self.cfg,
        )
    }

    /// Restore a trainer from a checkpoint. `cfg` drives the new run
    /// (schedule fields may differ) but must be architecture-compatible.
    pub fn load_checkpoint(path: &Path, cfg: RunConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.check_compatible(&cfg)?;
        let mut trainer = Trainer::new(cfg)?;
        for store in [&mut trainer.store_g, &mut trainer.store_d] {
            let expected: Vec<String> = store.names().cloned().collect();
            for name in &expected {
                let key = format!("param.{name}");
                let value = ck.tensors.get(&key).ok_or_else(|| {
                    Error::IncompatibleCheckpoint(format!("checkpoint missing parameter {name}"))
                })?;
                if value.shape() != store.get(name).shape() {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        value.shape(),
                        store.get(name).shape()
                    )));
                }
                *store.get_mut(name) = value.clone();
            }
        }
        for (pfx, opt) in [("optg", &mut trainer.opt_g), ("optd", &mut trainer.opt_d)] {
            for (key, value) in &ck.tensors {
                if let Some(rest) = key.strip_prefix(&format!("{pfx}.m.")) {
                    opt.m.insert(rest.to_string(), value.clone());
                } else if let Some(rest) = key.strip_prefix(&format!("{pfx}.v.")) {
                    opt.v.insert(rest.to_string(), value.clone());
                }
            }
        }
        trainer.opt_g.step = ck.manifest.opt_g_step;
        trainer.opt_d.step = ck.manifest.opt_d_step;
        trainer.step = ck.manifest.step;
        trainer.best_total = ck.manifest.best_total;
        Ok(trainer)
    }
}

/// Load the manifest's audio files, resampled to 16 kHz mono.
pub fn load_dataset(manifest: &Path) -> Result<Vec<AudioSegment>> {
    let paths = audio::read_manifest(manifest)?;
    if paths.is_empty() {
        return Err(Error::Config(format!("manifest {} lists no files", manifest.display())));
    }
    paths
        .iter()
        .map(|p| Ok(audio::resample(&audio::load_audio(p)?, MODEL_SAMPLE_RATE)))
        .collect()
}

/// Run (or resume) training, appending JSONL records to
/// `<out_dir>/train_log.jsonl` and checkpointing to
/// `<out_dir>/checkpoint_last.svck`.
pub fn run_training(
    cfg: RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<Vec<StepRecord>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("no data manifest configured".into()))?;
    let segs = Arc::new(load_dataset(&manifest)?);
    let mut trainer = match resume {
        Some(path) => Trainer::load_checkpoint(path, cfg)?,
        None => Trainer::new(cfg)?,
    };
    let spec = BatchSpec::new(
        trainer.cfg.train.segment_seconds,
        trainer.cfg.train.batch_size,
        trainer.cfg.train.seed,
    )?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let ckpt_path = out_dir.join("checkpoint_last.svck");
    let total = trainer.cfg.train.total_steps;
    let every = trainer.cfg.train.checkpoint_every.max(1);
    let mut records = Vec::new();
    let stream = audio::segment_stream_prefetched(
        Arc::clone(&segs),
        spec,
        trainer.cfg.train.data_workers,
        trainer.step,
        total,
    );
    for batch in stream {
        let rec = trainer.train_step(&batch)?;
        writeln!(log, "{}", serde_json::to_string(&rec).expect("record serializes"))
            .map_err(|e| Error::io(&log_path, e))?;
        records.push(rec);
        if trainer.step % every == 0 || trainer.step == total {
            trainer.save_checkpoint(&ckpt_path)?;
        }
    }
    trainer.save_checkpoint(&ckpt_path)?;
    Ok(records)
}

/// Convenience for tests: build a trainer and drive it over `n` deterministic
/// batches of the given dataset.
pub fn train_n_steps(
    trainer: &mut Trainer,
    segs: &[AudioSegment],
    n: u64,
) -> Result<Vec<StepRecord>> {
    let spec = BatchSpec::new(
        trainer.cfg.train.segment_seconds,
        trainer.cfg.train.batch_size,
        trainer.cfg.train.seed,
    )?;
    let mut out = Vec::new();
    for _ in 0..n {
        let batch = audio::batch_at(segs, &spec, trainer.step);
        out.push(trainer.train_step(&batch)?);
    }
    Ok(out)
}

/// Build a `PathBuf` for step-tagged checkpoints.
pub fn step_checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("checkpoint_{step:08}.svck"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert!((lr_at(1, &cfg) - 9.996e-5).abs() < 1e-19);
        let closed = 1e-4 * 0.9996f64.powi(10_000);
        assert_eq!(lr_at(10_000, &cfg), closed);
        assert!((closed - 1.83e-6).abs() < 2e-9, "closed form {closed}");
    }

    #[test]
    fn lr_strictly_decreasing_for_gamma_below_one() {
        let cfg = TrainConfig::default();
        let mut prev = lr_at(0, &cfg);
        for s in 1..200 {
            let cur = lr_at(s, &cfg);
            assert!(cur < prev, "lr must strictly decrease at step {s}");
            prev = cur;
        }
    }
}
