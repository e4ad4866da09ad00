//! Loss terms: multi-scale log-mel reconstruction, Gaussian KL, hinge
//! adversarial (both sides), normalized L1 feature matching, and the weighted
//! totals.

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::disc::DiscriminatorOutput;
use crate::error::{Error, Result};
use crate::model::LatentPosterior;
use crate::stft::MelBasis;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_kl: f64,
    pub lambda_adv: f64,
    pub lambda_feat: f64,
    pub lambda_align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_recon: 15.0,
            lambda_kl: 0.01,
            lambda_adv: 1.0,
            lambda_feat: 2.0,
            lambda_align: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_recon,
            self.lambda_kl,
            self.lambda_adv,
            self.lambda_feat,
            self.lambda_align,
        ];
        if all.iter().any(|l| *l < 0.0 || !l.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Named scalar components plus the weighted totals:
/// `total_vae = lr*recon + lkl*kl + ladv*adv_gen + lfeat*feat`,
/// `total = total_vae + lalign*align`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub adv_gen: f64,
    pub feat: f64,
    pub align: f64,
    pub total_vae: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MelScaleConfig {
    pub window_lengths: Vec<usize>,
    pub mel_bins: Vec<usize>,
    pub sample_rate: f64,
}

impl Default for MelScaleConfig {
    fn default() -> Self {
        Self {
            window_lengths: vec![32, 64, 128, 256, 512, 1024, 2048],
            mel_bins: vec![5, 10, 20, 40, 80, 160, 320],
            sample_rate: 16_000.0,
        }
    }
}

impl MelScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_lengths.len() != self.mel_bins.len() || self.window_lengths.is_empty() {
            return Err(Error::Config(
                "mel window_lengths and mel_bins must be equal-length and non-empty".into(),
            ));
        }
        let mut prev = 0;
        for (&w, &m) in self.window_lengths.iter().zip(&self.mel_bins) {
            if m <= prev {
                return Err(Error::Config("mel_bins must increase with window length".into()));
            }
            if w % 4 != 0 {
                return Err(Error::Config("window lengths must be divisible by 4 (hop = w/4)".into()));
            }
            prev = m;
        }
        Ok(())
    }
}

/// Precomputed mel bases for every scale of the reconstruction loss.
pub struct MelLoss {
    bases: Vec<MelBasis>,
}

impl MelLoss {
    pub fn new(cfg: &MelScaleConfig) -> Result<Self> {
        cfg.validate()?;
        let bases = cfg
            .window_lengths
            .iter()
            .zip(&cfg.mel_bins)
            .map(|(&w, &m)| MelBasis::new(cfg.sample_rate, w, w / 4, m))
            .collect();
        Ok(Self { bases })
    }

    /// Mean over scales of the mean-|.| distance between log-mel spectrograms
    /// of `x` and `x_hat`, both `(B, T)`.
    pub fn mel_recon_loss(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        if x.dims() != x_hat.dims() {
            return Err(Error::Contract(format!(
                "mel_recon_loss shape mismatch: {:?} vs {:?}",
                x.dims(),
                x_hat.dims()
            )));
        }
        let mut acc: Option<Tensor> = None;
        for basis in &self.bases {
            let d = basis.log_mel(x).sub(&basis.log_mel(x_hat)).abs().mean_all();
            acc = Some(match acc {
                None => d,
                Some(a) => a.add(&d),
            });
        }
        Ok(acc.unwrap().mul_scalar(1.0 / self.bases.len() as f64))
    }
}

/// KL divergence of the posterior from the standard normal prior:
/// `0.5 * (mu^2 + sigma^2 - 1 - log sigma^2)`, summed over channels and
/// averaged over batch and time.
pub fn kl_loss(post: &LatentPosterior) -> Tensor {
    let mu2 = post.mean.sqr();
    let lv = &post.log_var;
    let term = mu2.add(&lv.exp()).add_scalar(-1.0).sub(lv);
    term.sum_axes_keepdim(&[1]).mean_all().mul_scalar(0.5)
}

fn check_heads(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<()> {
    if real.logits.len() != fake.logits.len() {
        return Err(Error::Contract(format!(
            "discriminator head mismatch: {} vs {}",
            real.logits.len(),
            fake.logits.len()
        )));
    }
    Ok(())
}

/// Hinge discriminator loss: mean over heads of
/// `E[relu(1 - D(x))] + E[relu(1 + D(x_hat))]`.
pub fn adv_loss_discriminator(
    real: &DiscriminatorOutput,
    fake: &DiscriminatorOutput,
) -> Result<Tensor> {
    check_heads(real, fake)?;
    let mut acc: Option<Tensor> = None;
    for (r, f) in real.logits.iter().zip(&fake.logits) {
        let lr = r.neg().add_scalar(1.0).relu().mean_all();
        let lf = f.add_scalar(1.0).relu().mean_all();
        let head = lr.add(&lf);
        acc = Some(match acc {
            None => head,
            Some(a) => a.add(&head),
        });
    }
    Ok(acc.unwrap().mul_scalar(1.0 / real.logits.len() as f64))
}

/// Hinge generator loss: mean over heads of `-E[D(x_hat)]`.
pub fn adv_loss_generator(fake: &DiscriminatorOutput) -> Tensor {
    let mut acc: Option<Tensor> = None;
    for f in &fake.logits {
        let head = f.mean_all().neg();
        acc = Some(match acc {
            None => head,
            Some(a) => a.add(&head),
        });
    }
    acc.expect("no discriminator heads").mul_scalar(1.0 / fake.logits.len() as f64)
}

/// L1 feature matching normalized by the real-map magnitude:
/// mean over heads of mean over layers of
/// `mean|r - f| / (mean|r| + 1e-9)`. Real maps are treated as constants.
pub fn feature_matching_loss(
    real: &DiscriminatorOutput,
    fake: &DiscriminatorOutput,
) -> Result<Tensor> {
    check_heads(real, fake)?;
    let mut acc: Option<Tensor> = None;
    for (rh, fh) in real.feature_maps.iter().zip(&fake.feature_maps) {
        if rh.len() != fh.len() {
            return Err(Error::Contract(format!(
                "feature-map layer mismatch: {} vs {}",
                rh.len(),
                fh.len()
            )));
        }
        let mut head_acc: Option<Tensor> = None;
        for (r, f) in rh.iter().zip(fh) {
            if r.dims() != f.dims() {
                return Err(Error::Contract(format!(
                    "feature-map shape mismatch: {:?} vs {:?}",
                    r.dims(),
                    f.dims()
                )));
            }
            let r = r.detach();
            let num = r.sub(f).abs().mean_all();
            let denom = r.abs().mean_all().item() + 1e-9;
            let layer = num.mul_scalar(1.0 / denom);
            head_acc = Some(match head_acc {
                None => layer,
                Some(a) => a.add(&layer),
            });
        }
        let head = head_acc.unwrap().mul_scalar(1.0 / rh.len() as f64);
        acc = Some(match acc {
            None => head,
            Some(a) => a.add(&head),
        });
    }
    Ok(acc.unwrap().mul_scalar(1.0 / real.feature_maps.len() as f64))
}

/// Scalar loss tensors entering the generator total.
pub struct GeneratorLossTerms {
    pub recon: Tensor,
    pub kl: Tensor,
    pub adv_gen: Tensor,
    pub feat: Tensor,
    pub align: Tensor,
}

/// Combine components into the weighted total (one graph node) plus the
/// numeric breakdown. Non-finite components abort with the term name.
pub fn total_generator_loss(
    terms: &GeneratorLossTerms,
    w: &LossWeights,
    step: u64,
) -> Result<(Tensor, LossBreakdown)> {
    let named: [(&str, &Tensor); 5] = [
        ("recon", &terms.recon),
        ("kl", &terms.kl),
        ("adv_gen", &terms.adv_gen),
        ("feat", &terms.feat),
        ("align", &terms.align),
    ];
    for (name, t) in named {
        if !t.item().is_finite() {
            return Err(Error::TrainingAbort { term: name.to_string(), step });
        }
    }
    let recon = terms.recon.item();
    let kl = terms.kl.item();
    let adv_gen = terms.adv_gen.item();
    let feat = terms.feat.item();
    let align = terms.align.item();
    let total_vae = w.lambda_recon * recon + w.lambda_kl * kl + w.lambda_adv * adv_gen + w.lambda_feat * feat;
    let total = total_vae + w.lambda_align * align;
    let tensor = terms
        .recon
        .mul_scalar(w.lambda_recon)
        .add(&terms.kl.mul_scalar(w.lambda_kl))
        .add(&terms.adv_gen.mul_scalar(w.lambda_adv))
        .add(&terms.feat.mul_scalar(w.lambda_feat))
        .add(&terms.align.mul_scalar(w.lambda_align));
    Ok((tensor, LossBreakdown { recon, kl, adv_gen, feat, align, total_vae, total }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LATENT_FRAME_RATE;

    fn out_with_logits(vals: &[f64]) -> DiscriminatorOutput {
        DiscriminatorOutput {
            logits: vals.iter().map(|&v| Tensor::from_vec(vec![v; 6], &[1, 6])).collect(),
            feature_maps: vals.iter().map(|_| vec![]).collect(),
        }
    }

    #[test]
    fn kl_zero_for_standard_normal_posterior() {
        let post = LatentPosterior {
            mean: Tensor::zeros(&[2, 64, 3]),
            log_var: Tensor::zeros(&[2, 64, 3]),
            frame_rate: LATENT_FRAME_RATE,
        };
        assert_eq!(kl_loss(&post).item(), 0.0);
    }

    #[test]
    fn kl_matches_closed_form_unit_mean() {
        // mu = 1, log_var = 0 everywhere: 0.5 per element, x64 channels = 32/frame
        let post = LatentPosterior {
            mean: Tensor::from_vec(vec![1.0; 2 * 64 * 3], &[2, 64, 3]),
            log_var: Tensor::zeros(&[2, 64, 3]),
            frame_rate: LATENT_FRAME_RATE,
        };
        assert!((kl_loss(&post).item() - 32.0).abs() < 1e-10);
    }

    #[test]
    fn kl_matches_closed_form_unit_logvar() {
        // mu = 0, log_var = 1: 0.5*(e - 2) per element
        let post = LatentPosterior {
            mean: Tensor::zeros(&[1, 64, 2]),
            log_var: Tensor::from_vec(vec![1.0; 64 * 2], &[1, 64, 2]),
            frame_rate: LATENT_FRAME_RATE,
        };
        let per_elem = 0.5 * (std::f64::consts::E - 2.0);
        assert!((kl_loss(&post).item() - 64.0 * per_elem).abs() < 1e-10);
    }

    #[test]
    fn kl_gradient_matches_analytic() {
        // d/dmu of kl = mu / (B*T) under the sum-channels mean-batch-time reduction
        let (b, c, t) = (2usize, 64usize, 3usize);
        let mean_data: Vec<f64> = (0..b * c * t).map(|i| (i as f64 * 0.31).sin()).collect();
        let mean = Tensor::var(
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[b, c, t]), mean_data.clone()).unwrap(),
        );
        let post = LatentPosterior {
            mean: mean.clone(),
            log_var: Tensor::zeros(&[b, c, t]),
            frame_rate: LATENT_FRAME_RATE,
        };
        let grads = kl_loss(&post).backward();
        let g = grads.get(&mean).unwrap();
        let scale = 1.0 / (b * t) as f64;
        for (i, gv) in g.iter().enumerate() {
            assert!((gv - mean_data[i] * scale).abs() < 1e-6);
        }
    }

    #[test]
    fn hinge_discriminator_examples() {
        // margins satisfied
        let l = adv_loss_discriminator(&out_with_logits(&[1.0; 4]), &out_with_logits(&[-1.0; 4])).unwrap();
        assert_eq!(l.item(), 0.0);
        // all logits zero: relu(1) + relu(1) per head
        let l = adv_loss_discriminator(&out_with_logits(&[0.0; 4]), &out_with_logits(&[0.0; 4])).unwrap();
        assert!((l.item() - 2.0).abs() < 1e-12);
        // beyond margin
        let l = adv_loss_discriminator(&out_with_logits(&[2.0; 4]), &out_with_logits(&[-2.0; 4])).unwrap();
        assert_eq!(l.item(), 0.0);
        // head mismatch is a contract violation
        assert!(adv_loss_discriminator(&out_with_logits(&[0.0; 3]), &out_with_logits(&[0.0; 4])).is_err());
    }

    #[test]
    fn hinge_generator_examples() {
        assert_eq!(adv_loss_generator(&out_with_logits(&[0.0; 4])).item(), 0.0);
        assert!((adv_loss_generator(&out_with_logits(&[1.0; 4])).item() + 1.0).abs() < 1e-12);
        // mean over heads of per-head means: heads {1, -1} cancel
        assert!(adv_loss_generator(&out_with_logits(&[1.0, -1.0])).item().abs() < 1e-12);
    }

    fn out_with_maps(vals: &[f64]) -> DiscriminatorOutput {
        DiscriminatorOutput {
            logits: vec![Tensor::zeros(&[1, 2]); 2],
            feature_maps: vec![
                vals.iter().map(|&v| Tensor::from_vec(vec![v; 8], &[1, 2, 4])).collect(),
                vals.iter().map(|&v| Tensor::from_vec(vec![v; 6], &[1, 6])).collect(),
            ],
        }
    }

    #[test]
    fn feature_matching_examples() {
        let real = out_with_maps(&[1.0, 1.0]);
        // identical maps
        let l = feature_matching_loss(&real, &out_with_maps(&[1.0, 1.0])).unwrap();
        assert_eq!(l.item(), 0.0);
        // real 1, fake 0: |1-0|/|1| per layer
        let l = feature_matching_loss(&real, &out_with_maps(&[0.0, 0.0])).unwrap();
        assert!((l.item() - 1.0).abs() < 1e-8);
        // scaling both sides by 10 leaves it unchanged
        let l10 = feature_matching_loss(&out_with_maps(&[10.0, 10.0]), &out_with_maps(&[0.0, 0.0])).unwrap();
        assert!((l10.item() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn total_loss_examples() {
        let ones = GeneratorLossTerms {
            recon: Tensor::scalar(1.0),
            kl: Tensor::scalar(1.0),
            adv_gen: Tensor::scalar(1.0),
            feat: Tensor::scalar(1.0),
            align: Tensor::scalar(1.0),
        };
        let w = LossWeights::default();
        let (t, brk) = total_generator_loss(&ones, &w, 0).unwrap();
        assert!((brk.total - 19.01).abs() < 1e-12);
        assert!((t.item() - brk.total).abs() < 1e-15);

        let zeros = GeneratorLossTerms {
            recon: Tensor::scalar(0.0),
            kl: Tensor::scalar(0.0),
            adv_gen: Tensor::scalar(0.0),
            feat: Tensor::scalar(0.0),
            align: Tensor::scalar(0.0),
        };
        let (_, brk) = total_generator_loss(&zeros, &w, 0).unwrap();
        assert_eq!(brk.total, 0.0);

        // perfect alignment alone gives a negative total
        let aligned = GeneratorLossTerms {
            align: Tensor::scalar(-1.0),
            ..zeros_terms()
        };
        let (_, brk) = total_generator_loss(&aligned, &w, 0).unwrap();
        assert_eq!(brk.total, -1.0);

        // NaN aborts with the term name
        let bad = GeneratorLossTerms {
            feat: Tensor::scalar(f64::NAN),
            ..zeros_terms()
        };
        match total_generator_loss(&bad, &w, 7) {
            Err(Error::TrainingAbort { term, step }) => {
                assert_eq!(term, "feat");
                assert_eq!(step, 7);
            }
            other => panic!("expected TrainingAbort, got {other:?}"),
        }
    }

    fn zeros_terms() -> GeneratorLossTerms {
        GeneratorLossTerms {
            recon: Tensor::scalar(0.0),
            kl: Tensor::scalar(0.0),
            adv_gen: Tensor::scalar(0.0),
            feat: Tensor::scalar(0.0),
            align: Tensor::scalar(0.0),
        }
    }

    #[test]
    fn mel_loss_identity_and_positivity() {
        let cfg = MelScaleConfig {
            window_lengths: vec![64, 128],
            mel_bins: vec![10, 20],
            sample_rate: 16_000.0,
        };
        let mel = MelLoss::new(&cfg).unwrap();
        let sine: Vec<f64> = (0..4000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin())
            .collect();
        let x = Tensor::from_vec(sine, &[1, 4000]);
        assert_eq!(mel.mel_recon_loss(&x, &x).unwrap().item(), 0.0);
        let silence = Tensor::zeros(&[1, 4000]);
        assert!(mel.mel_recon_loss(&x, &silence).unwrap().item() > 0.0);
        // symmetry
        let a = mel.mel_recon_loss(&x, &silence).unwrap().item();
        let b = mel.mel_recon_loss(&silence, &x).unwrap().item();
        assert_eq!(a, b);
        // shape mismatch is a contract violation
        assert!(mel.mel_recon_loss(&x, &Tensor::zeros(&[1, 100])).is_err());
    }
}
