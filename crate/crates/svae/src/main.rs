use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use svae::align::{AlignVariant, LayerSpec};
use svae::config::RunConfig;
use svae::eval::{
    eval_reconstruction, export_latents, reconstruct_file, EvalModel, EvalProviders, ExportMode,
    MetricProvider,
};
use svae::trainer::run_training;

#[derive(Parser)]
#[command(name = "svae", about = "Speech VAE with semantic alignment: train, reconstruct, export latents, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Shared {
    /// Run configuration (TOML). Evaluation subcommands default to the
    /// config embedded in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint file (.svck).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset manifest: one WAV path per line.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory (or report path for eval-recon).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train (or resume) a model.
    Train {
        #[command(flatten)]
        shared: Shared,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured dataset manifest.
        #[arg(long)]
        data_manifest: Option<PathBuf>,
        /// Alignment loss variant: cos | l1 | l2.
        #[arg(long)]
        align_variant: Option<String>,
        /// SSL layer selection: <index> | last | avg.
        #[arg(long)]
        ssl_layer: Option<String>,
        /// Override total training steps.
        #[arg(long)]
        total_steps: Option<u64>,
    },
    /// Reconstruct one file or a manifest of files through a checkpoint.
    Reconstruct {
        #[command(flatten)]
        shared: Shared,
        /// Single input WAV (alternative to --manifest).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Export per-utterance latent files for downstream TTS.
    ExportLatents {
        #[command(flatten)]
        shared: Shared,
        /// mean (deterministic) or sample.
        #[arg(long, default_value = "mean")]
        mode: String,
        /// Sampling seed for --mode sample.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score reconstructions (STOI natively; PESQ/UTMOS via external commands).
    EvalRecon {
        #[command(flatten)]
        shared: Shared,
        /// External PESQ command invoked as `cmd ref.wav deg.wav`.
        #[arg(long)]
        pesq_cmd: Option<String>,
        /// External UTMOS command invoked as `cmd ref.wav deg.wav`.
        #[arg(long)]
        utmos_cmd: Option<String>,
        /// Evaluate the identity model (x_hat = x) instead of a checkpoint.
        #[arg(long, default_value_t = false)]
        identity: bool,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Cmd::Train { shared, resume, data_manifest, align_variant, ssl_layer, total_steps } => {
            let config_path = shared.config.context("train requires --config")?;
            let mut cfg = RunConfig::load(&config_path)?;
            if let Some(m) = data_manifest.or(shared.manifest) {
                cfg.data.manifest = Some(m);
            }
            if let Some(v) = align_variant {
                cfg.align.variant = v.parse::<AlignVariant>()?;
            }
            if let Some(l) = ssl_layer {
                cfg.ssl.layer = l.parse::<LayerSpec>()?;
            }
            if let Some(t) = total_steps {
                cfg.train.total_steps = t;
            }
            let out = shared.out.unwrap_or_else(|| PathBuf::from("runs/default"));
            let records = run_training(cfg, &out, resume.as_deref())?;
            if let Some(last) = records.last() {
                println!(
                    "trained to step {}: total {:.4} recon {:.4} align {:.4}",
                    last.step + 1,
                    last.total,
                    last.recon,
                    last.align
                );
            }
            println!("log: {}", out.join("train_log.jsonl").display());
            println!("checkpoint: {}", out.join("checkpoint_last.svck").display());
            Ok(())
        }
        Cmd::Reconstruct { shared, input } => {
            let ckpt = shared.ckpt.context("reconstruct requires --ckpt")?;
            let model = EvalModel::load(&ckpt)?;
            let out = shared.out.unwrap_or_else(|| PathBuf::from("recon_out"));
            let inputs: Vec<PathBuf> = match (input, shared.manifest) {
                (Some(p), _) => vec![p],
                (None, Some(m)) => svae::audio::read_manifest(&m)?,
                (None, None) => bail!("reconstruct requires --input or --manifest"),
            };
            for p in inputs {
                let written = reconstruct_file(&p, &model, &out)?;
                println!("{} -> {}", p.display(), written.display());
            }
            Ok(())
        }
        Cmd::ExportLatents { shared, mode, seed } => {
            let ckpt = shared.ckpt.context("export-latents requires --ckpt")?;
            let manifest = shared.manifest.context("export-latents requires --manifest")?;
            let out = shared.out.unwrap_or_else(|| PathBuf::from("latents"));
            let model = EvalModel::load(&ckpt)?;
            let mode = mode.parse::<ExportMode>()?;
            let results = export_latents(&manifest, &model, mode, seed, &out)?;
            let ok = results.iter().filter(|(_, r)| r.is_ok()).count();
            println!("exported {ok}/{} latent files to {}", results.len(), out.display());
            if ok < results.len() {
                bail!("{} exports failed", results.len() - ok);
            }
            Ok(())
        }
        Cmd::EvalRecon { shared, pesq_cmd, utmos_cmd, identity } => {
            let manifest = shared.manifest.context("eval-recon requires --manifest")?;
            let model = if identity {
                None
            } else {
                let ckpt = shared.ckpt.context("eval-recon requires --ckpt (or --identity)")?;
                Some(EvalModel::load(&ckpt)?)
            };
            let providers = EvalProviders {
                pesq: pesq_cmd.map(|command| MetricProvider {
                    name: "pesq".into(),
                    model_id: command.clone(),
                    command,
                }),
                utmos: utmos_cmd.map(|command| MetricProvider {
                    name: "utmos".into(),
                    model_id: command.clone(),
                    command,
                }),
            };
            let work = std::env::temp_dir().join("svae_eval_work");
            let report = eval_reconstruction(&manifest, model.as_ref(), &providers, &work)?;
            let json = report.to_json();
            match shared.out {
                Some(path) => {
                    std::fs::write(&path, &json)
                        .with_context(|| format!("writing {}", path.display()))?;
                    println!("report: {} (mean STOI {:.4})", path.display(), report.mean_stoi);
                }
                None => println!("{json}"),
            }
            Ok(())
        }
    }
}
