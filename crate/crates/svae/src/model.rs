//! Waveform VAE: convolutional encoder to a per-frame diagonal Gaussian
//! posterior, reparameterized sampling, and an AMP-block decoder back to the
//! waveform.

use autodiff::Tensor;
use ndarray::{Array3, ArrayD};
use serde::{Deserialize, Serialize};

use crate::audio::{SegmentBatch, MODEL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn::{AaSnake, AmpResBlock, Graph, ParamStore, Snake, WnConv1d, WnConvT1d};
use crate::rng;

pub const LATENT_FRAME_RATE: f64 = 40.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_strides: Vec<usize>,
    pub latent_dim: usize,
    pub decoder_strides: Vec<usize>,
    pub base_channels: usize,
    pub channel_growth: usize,
    pub amp_kernel_sizes: Vec<usize>,
    pub amp_dilations: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_strides: vec![4, 4, 5, 5],
            latent_dim: 64,
            decoder_strides: vec![5, 5, 4, 4],
            base_channels: 64,
            channel_growth: 2,
            amp_kernel_sizes: vec![3, 7, 11],
            amp_dilations: vec![1, 3, 5],
        }
    }
}

impl ModelConfig {
    /// Encoder hop: total downsampling factor (400 for the default strides).
    pub fn hop(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop() != 400 {
            return Err(Error::Config(format!(
                "encoder strides {:?} must multiply to 400 (40 Hz at 16 kHz)",
                self.encoder_strides
            )));
        }
        let mut rev = self.encoder_strides.clone();
        rev.reverse();
        if rev != self.decoder_strides {
            return Err(Error::Config(
                "decoder_strides must be encoder_strides reversed".into(),
            ));
        }
        if self.latent_dim == 0 || self.base_channels == 0 || self.channel_growth == 0 {
            return Err(Error::Config("zero-sized model dimensions".into()));
        }
        if self.amp_kernel_sizes.is_empty()
            || self.amp_dilations.is_empty()
            || self.amp_kernel_sizes.iter().any(|k| k % 2 == 0)
        {
            return Err(Error::Config(
                "amp_kernel_sizes must be non-empty odd kernels, amp_dilations non-empty".into(),
            ));
        }
        Ok(())
    }

    /// Channel width entering encoder stage `i` (0-based).
    fn enc_width(&self, stage: usize) -> usize {
        self.base_channels * self.channel_growth.pow(stage as u32)
    }

    fn bottleneck_width(&self) -> usize {
        self.enc_width(self.encoder_strides.len())
    }
}

/// Per-frame diagonal Gaussian over the latent. Tensors are `(B, C, T)`;
/// `log_var` is clamped to `[-30, 20]` at construction.
pub struct LatentPosterior {
    pub mean: Tensor,
    pub log_var: Tensor,
    pub frame_rate: f64,
}

impl LatentPosterior {
    pub fn frames(&self) -> usize {
        self.mean.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.mean.dims()[1]
    }

    pub fn batch(&self) -> usize {
        self.mean.dims()[0]
    }
}

/// Sampled (or deterministic) latent frames, `(B, C, T)` at 40 Hz.
pub struct LatentSequence {
    pub frames: Tensor,
    pub frame_rate: f64,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.frames.dims()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct ResidualUnit {
    snake1: Snake,
    conv1: WnConv1d,
    snake2: Snake,
    conv2: WnConv1d,
}

impl ResidualUnit {
    fn new(name: &str, dim: usize, dilation: usize) -> Self {
        Self {
            snake1: Snake::new(format!("{name}.snake1"), dim),
            conv1: WnConv1d::same(format!("{name}.conv1"), dim, dim, 7, dilation),
            snake2: Snake::new(format!("{name}.snake2"), dim),
            conv2: WnConv1d::same(format!("{name}.conv2"), dim, dim, 1, 1),
        }
    }

    fn register(&self, store: &mut ParamStore, seed: u64) {
        self.snake1.register(store, seed);
        self.conv1.register(store, seed);
        self.snake2.register(store, seed);
        self.conv2.register(store, seed);
    }

    fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let y = self.snake1.forward(g, x);
        let y = self.conv1.forward(g, &y);
        let y = self.snake2.forward(g, &y);
        let y = self.conv2.forward(g, &y);
        x.add(&y)
    }
}

struct EncoderBlock {
    res: Vec<ResidualUnit>,
    snake: Snake,
    down: WnConv1d,
}

impl EncoderBlock {
    fn new(name: &str, in_dim: usize, out_dim: usize, stride: usize) -> Self {
        let res = [1usize, 3, 9]
            .iter()
            .enumerate()
            .map(|(i, &d)| ResidualUnit::new(&format!("{name}.res{i}"), in_dim, d))
            .collect();
        Self {
            res,
            snake: Snake::new(format!("{name}.snake"), in_dim),
            down: WnConv1d::new(
                format!("{name}.down"),
                in_dim,
                out_dim,
                2 * stride,
                stride,
                stride.div_ceil(2),
                1,
            ),
        }
    }

    fn register(&self, store: &mut ParamStore, seed: u64) {
        for r in &self.res {
            r.register(store, seed);
        }
        self.snake.register(store, seed);
        self.down.register(store, seed);
    }

    fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let mut x = x.clone();
        for r in &self.res {
            x = r.forward(g, &x);
        }
        self.down.forward(g, &self.snake.forward(g, &x))
    }
}

struct DecoderStage {
    up: WnConvT1d,
    blocks: Vec<AmpResBlock>,
}

pub struct Vae {
    pub cfg: ModelConfig,
    enc_in: WnConv1d,
    enc_blocks: Vec<EncoderBlock>,
    enc_snake: Snake,
    enc_out: WnConv1d,
    dec_in: WnConv1d,
    dec_stages: Vec<DecoderStage>,
    dec_snake: AaSnake,
    dec_out: WnConv1d,
}

impl Vae {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.encoder_strides.len();
        let enc_in = WnConv1d::same("enc.in", 1, cfg.base_channels, 7, 1);
        let enc_blocks = (0..n)
            .map(|i| {
                EncoderBlock::new(
                    &format!("enc.block{i}"),
                    cfg.enc_width(i),
                    cfg.enc_width(i + 1),
                    cfg.encoder_strides[i],
                )
            })
            .collect();
        let bott = cfg.bottleneck_width();
        let enc_snake = Snake::new("enc.snake", bott);
        // mean and log-variance, stacked on the channel axis
        let enc_out = WnConv1d::same("enc.out", bott, 2 * cfg.latent_dim, 3, 1);
        let dec_in = WnConv1d::same("dec.in", cfg.latent_dim, bott, 7, 1);
        let mut dec_stages = Vec::new();
        let mut ch = bott;
        for (i, &r) in cfg.decoder_strides.iter().enumerate() {
            let out_ch = (ch / cfg.channel_growth).max(1);
            let up = WnConvT1d::upsampler(format!("dec.stage{i}.up"), ch, out_ch, r);
            let blocks = cfg
                .amp_kernel_sizes
                .iter()
                .enumerate()
                .map(|(j, &k)| {
                    AmpResBlock::new(&format!("dec.stage{i}.amp{j}"), out_ch, k, &cfg.amp_dilations)
                })
                .collect();
            dec_stages.push(DecoderStage { up, blocks });
            ch = out_ch;
        }
        let dec_snake = AaSnake::new("dec.snake", ch);
        let dec_out = WnConv1d::same("dec.out", ch, 1, 7, 1);
        Ok(Self { cfg, enc_in, enc_blocks, enc_snake, enc_out, dec_in, dec_stages, dec_snake, dec_out })
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        self.enc_in.register(store, seed);
        for b in &self.enc_blocks {
            b.register(store, seed);
        }
        self.enc_snake.register(store, seed);
        self.enc_out.register(store, seed);
        self.dec_in.register(store, seed);
        for s in &self.dec_stages {
            s.up.register(store, seed);
            for b in &s.blocks {
                b.register(store, seed);
            }
        }
        self.dec_snake.register(store, seed);
        self.dec_out.register(store, seed);
    }

    /// Exact trainable-parameter count of encoder + decoder.
    pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
        let vae = Vae::new(cfg.clone())?;
        let mut store = ParamStore::new();
        vae.register(&mut store, 0);
        Ok(store.total_len())
    }

    /// Encode a 16 kHz batch into the latent posterior. Input is right-padded
    /// internally to a multiple of the 400-sample hop, giving
    /// `T = ceil(samples / 400)` frames.
    pub fn encode(&self, g: &Graph, batch: &SegmentBatch) -> Result<LatentPosterior> {
        if batch.sample_rate != MODEL_SAMPLE_RATE {
            return Err(Error::Contract(format!(
                "encoder requires 16 kHz input, got {} Hz",
                batch.sample_rate
            )));
        }
        let (b, len) = (batch.samples.nrows(), batch.samples.ncols());
        if len == 0 {
            return Err(Error::Contract("empty input".into()));
        }
        let x = Tensor::from_array(
            batch.samples.clone().into_shape_with_order((b, 1, len)).unwrap().into_dyn(),
        );
        self.encode_tensor(g, &x)
    }

    /// Encode an already-built `(B, 1, T)` constant tensor.
    pub fn encode_tensor(&self, g: &Graph, x: &Tensor) -> Result<LatentPosterior> {
        let hop = self.cfg.hop();
        let len = x.dims()[2];
        let padded = len.div_ceil(hop) * hop;
        let x = if padded > len { x.pad_zeros(2, 0, padded - len) } else { x.clone() };
        let mut h = self.enc_in.forward(g, &x);
        for b in &self.enc_blocks {
            h = b.forward(g, &h);
        }
        let h = self.enc_out.forward(g, &self.enc_snake.forward(g, &h));
        let d = self.cfg.latent_dim;
        let mean = h.narrow(1, 0, d);
        let log_var = h.narrow(1, d, d).clamp(-30.0, 20.0);
        Ok(LatentPosterior { mean, log_var, frame_rate: LATENT_FRAME_RATE })
    }

    /// Decode `(B, 64, T)` latents to exactly `T * 400` samples per item,
    /// squashed to `[-1, 1]` by a final tanh. Returns `(B, samples)`.
    pub fn decode(&self, g: &Graph, z: &LatentSequence) -> Result<Tensor> {
        if z.frames.dims()[1] != self.cfg.latent_dim {
            return Err(Error::Contract(format!(
                "latent has {} channels, model expects {}",
                z.frames.dims()[1],
                self.cfg.latent_dim
            )));
        }
        let mut h = self.dec_in.forward(g, &z.frames);
        for s in &self.dec_stages {
            h = s.up.forward(g, &h);
            let mut acc: Option<Tensor> = None;
            for blk in &s.blocks {
                let y = blk.forward(g, &h);
                acc = Some(match acc {
                    None => y,
                    Some(a) => a.add(&y),
                });
            }
            h = acc.unwrap().mul_scalar(1.0 / s.blocks.len() as f64);
        }
        let h = self.dec_snake.forward(g, &h);
        let y = self.dec_out.forward(g, &h).tanh();
        let (b, t) = (y.dims()[0], y.dims()[2]);
        Ok(y.reshape(&[b, t]))
    }
}

/// `z = mean + exp(0.5 * log_var) * eps` with `eps ~ N(0, I)` drawn from
/// `noise_seed`; `None` is the deterministic mode and returns the mean
/// exactly.
pub fn reparameterize(post: &LatentPosterior, noise_seed: Option<u64>) -> LatentSequence {
    let frames = match noise_seed {
        None => post.mean.clone(),
        Some(seed) => {
            let (b, c, t) = (post.batch(), post.channels(), post.frames());
            let mut r = rng::stream(seed, "reparam");
            let eps_arr = Array3::from_shape_fn((b, c, t), |_| rng::normal(&mut r));
            let eps = Tensor::from_array(eps_arr.into_dyn());
            let std = post.log_var.mul_scalar(0.5).exp();
            post.mean.add(&std.mul(&eps))
        }
    };
    LatentSequence { frames, frame_rate: post.frame_rate }
}

/// Standalone sampling used by tests: draw from `N(mean, exp(log_var))`.
pub fn sample_posterior_array(
    mean: &ArrayD<f64>,
    log_var: &ArrayD<f64>,
    seed: u64,
) -> ArrayD<f64> {
    let mut r = rng::stream(seed, "reparam");
    let mut out = mean.clone();
    ndarray::Zip::from(&mut out).and(log_var).for_each(|m, &lv| {
        *m += (0.5 * lv.clamp(-30.0, 20.0)).exp() * rng::normal(&mut r);
    });
    out
}
