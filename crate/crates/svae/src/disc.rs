//! Adversarial discriminators: multi-period waveform heads and multi-band,
//! multi-scale STFT heads, all weight-normalized with LeakyReLU(0.1).

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, WnConv2d};
use crate::stft::StftBasis;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub mpd_periods: Vec<usize>,
    pub stft_window_sizes: Vec<usize>,
    /// Fractional band edges over the positive-frequency bins.
    pub band_splits: Vec<(f64, f64)>,
    /// Channel ladder of the period heads (cited defaults; shrink for desk-scale runs).
    pub mpd_channels: Vec<usize>,
    /// Channel width of the STFT band conv stacks.
    pub stft_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            mpd_periods: vec![2, 3, 5, 7, 11],
            stft_window_sizes: vec![2048, 1024, 512],
            band_splits: vec![(0.0, 0.1), (0.1, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)],
            mpd_channels: vec![32, 128, 512, 1024, 1024],
            stft_channels: 32,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, &a) in self.mpd_periods.iter().enumerate() {
            for &b in &self.mpd_periods[i + 1..] {
                if gcd(a, b) != 1 {
                    return Err(Error::Config(format!(
                        "mpd_periods must be pairwise coprime, got {a} and {b}"
                    )));
                }
            }
        }
        let mut edge = 0.0;
        for &(lo, hi) in &self.band_splits {
            if (lo - edge).abs() > 1e-9 || hi <= lo {
                return Err(Error::Config("band_splits must partition [0, 1]".into()));
            }
            edge = hi;
        }
        if (edge - 1.0).abs() > 1e-9 {
            return Err(Error::Config("band_splits must end at 1.0".into()));
        }
        if self.mpd_channels.is_empty() || self.stft_channels == 0 {
            return Err(Error::Config("discriminator channels must be non-empty".into()));
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.mpd_periods.len() + self.stft_window_sizes.len()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Per-head logits and per-head intermediate activations.
pub struct DiscriminatorOutput {
    pub logits: Vec<Tensor>,
    pub feature_maps: Vec<Vec<Tensor>>,
}

impl DiscriminatorOutput {
    /// Detach all tensors from the graph (used for the real path of the
    /// feature-matching loss and for discriminator-step fakes).
    pub fn detach(&self) -> Self {
        Self {
            logits: self.logits.iter().map(Tensor::detach).collect(),
            feature_maps: self
                .feature_maps
                .iter()
                .map(|fs| fs.iter().map(Tensor::detach).collect())
                .collect(),
        }
    }
}

struct PeriodHead {
    period: usize,
    convs: Vec<WnConv2d>,
    post: WnConv2d,
}

impl PeriodHead {
    fn new(name: &str, period: usize, channels: &[usize]) -> Self {
        let mut convs = Vec::new();
        let mut in_c = 1;
        for (i, &out_c) in channels.iter().enumerate() {
            let stride = if i + 1 < channels.len() { (3, 1) } else { (1, 1) };
            convs.push(WnConv2d::new(
                format!("{name}.conv{i}"),
                in_c,
                out_c,
                (5, 1),
                stride,
                (2, 0),
            ));
            in_c = out_c;
        }
        let post = WnConv2d::new(format!("{name}.post"), in_c, 1, (3, 1), (1, 1), (1, 0));
        Self { period, convs, post }
    }

    fn register(&self, store: &mut ParamStore, seed: u64) {
        for c in &self.convs {
            c.register(store, seed);
        }
        self.post.register(store, seed);
    }

    /// `(B, L)` -> logits; the waveform is reflect-padded to a multiple of the
    /// period and viewed as `(B, 1, L/p, p)`.
    fn forward(&self, g: &Graph, x: &Tensor) -> (Tensor, Vec<Tensor>) {
        let (b, l) = (x.dims()[0], x.dims()[1]);
        let rem = l % self.period;
        let x = if rem != 0 { x.pad_reflect_last(0, self.period - rem) } else { x.clone() };
        let l_pad = x.dims()[1];
        let mut h = x.reshape(&[b, 1, l_pad / self.period, self.period]);
        let mut maps = Vec::new();
        for conv in &self.convs {
            h = conv.forward(g, &h).leaky_relu(0.1);
            maps.push(h.clone());
        }
        let logits = self.post.forward(g, &h);
        maps.push(logits.clone());
        (logits, maps)
    }
}

struct BandStack {
    convs: Vec<WnConv2d>,
}

impl BandStack {
    fn new(name: &str, channels: usize) -> Self {
        // (3, 9) kernels over (time, freq), stride 2 along freq in the middle
        let specs: [((usize, usize), (usize, usize), (usize, usize)); 5] = [
            ((3, 9), (1, 1), (1, 4)),
            ((3, 9), (1, 2), (1, 4)),
            ((3, 9), (1, 2), (1, 4)),
            ((3, 9), (1, 2), (1, 4)),
            ((3, 3), (1, 1), (1, 1)),
        ];
        let mut convs = Vec::new();
        let mut in_c = 2;
        for (i, &(k, s, p)) in specs.iter().enumerate() {
            convs.push(WnConv2d::new(format!("{name}.conv{i}"), in_c, channels, k, s, p));
            in_c = channels;
        }
        Self { convs }
    }

    fn register(&self, store: &mut ParamStore, seed: u64) {
        for c in &self.convs {
            c.register(store, seed);
        }
    }

    fn forward(&self, g: &Graph, x: &Tensor, maps: &mut Vec<Tensor>) -> Tensor {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(g, &h).leaky_relu(0.1);
            maps.push(h.clone());
        }
        h
    }
}

struct StftHead {
    basis: StftBasis,
    bands: Vec<(usize, usize)>,
    stacks: Vec<BandStack>,
    post: WnConv2d,
}

impl StftHead {
    fn new(name: &str, window: usize, cfg: &DiscriminatorConfig) -> Self {
        let basis = StftBasis::new(window, window / 4);
        let bins = basis.bins();
        let mut bands = Vec::new();
        for (i, &(lo, hi)) in cfg.band_splits.iter().enumerate() {
            let lo_bin = (lo * bins as f64).floor() as usize;
            let hi_bin = if i + 1 == cfg.band_splits.len() {
                bins
            } else {
                (hi * bins as f64).floor() as usize
            };
            bands.push((lo_bin, hi_bin));
        }
        let stacks = (0..bands.len())
            .map(|i| BandStack::new(&format!("{name}.band{i}"), cfg.stft_channels))
            .collect();
        let post = WnConv2d::new(format!("{name}.post"), cfg.stft_channels, 1, (3, 3), (1, 1), (1, 1));
        Self { basis, bands, stacks, post }
    }

    fn register(&self, store: &mut ParamStore, seed: u64) {
        for s in &self.stacks {
            s.register(store, seed);
        }
        self.post.register(store, seed);
    }

    fn forward(&self, g: &Graph, x: &Tensor) -> (Tensor, Vec<Tensor>) {
        let (re, im) = self.basis.stft(x); // (B, F, bins)
        let (b, f, bins) = (re.dims()[0], re.dims()[1], re.dims()[2]);
        let spec = Tensor::cat(
            &[re.reshape(&[b, 1, f, bins]), im.reshape(&[b, 1, f, bins])],
            1,
        );
        let mut maps = Vec::new();
        let mut band_outs = Vec::new();
        for ((lo, hi), stack) in self.bands.iter().zip(&self.stacks) {
            let band = spec.narrow(3, *lo, hi - lo);
            band_outs.push(stack.forward(g, &band, &mut maps));
        }
        let joined = Tensor::cat(&band_outs, 3);
        let logits = self.post.forward(g, &joined);
        maps.push(logits.clone());
        (logits, maps)
    }
}

pub struct Discriminators {
    pub cfg: DiscriminatorConfig,
    period_heads: Vec<PeriodHead>,
    stft_heads: Vec<StftHead>,
}

impl Discriminators {
    pub fn new(cfg: DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let period_heads = cfg
            .mpd_periods
            .iter()
            .map(|&p| PeriodHead::new(&format!("disc.mpd.p{p}"), p, &cfg.mpd_channels))
            .collect();
        let stft_heads = cfg
            .stft_window_sizes
            .iter()
            .map(|&w| StftHead::new(&format!("disc.stft.w{w}"), w, &cfg))
            .collect();
        Ok(Self { cfg, period_heads, stft_heads })
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        for h in &self.period_heads {
            h.register(store, seed);
        }
        for h in &self.stft_heads {
            h.register(store, seed);
        }
    }

    /// Run every head on a `(B, L)` waveform tensor.
    pub fn discriminate(&self, g: &Graph, x: &Tensor) -> DiscriminatorOutput {
        let mut logits = Vec::new();
        let mut feature_maps = Vec::new();
        for h in &self.period_heads {
            let (l, m) = h.forward(g, x);
            logits.push(l);
            feature_maps.push(m);
        }
        for h in &self.stft_heads {
            let (l, m) = h.forward(g, x);
            logits.push(l);
            feature_maps.push(m);
        }
        DiscriminatorOutput { logits, feature_maps }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            stft_window_sizes: vec![256, 128],
            mpd_channels: vec![4, 8],
            stft_channels: 4,
            ..DiscriminatorConfig::default()
        }
    }

    fn wave(b: usize, l: usize) -> Tensor {
        Tensor::from_vec(
            (0..b * l).map(|i| (i as f64 * 0.01).sin() * 0.3).collect(),
            &[b, l],
        )
    }

    #[test]
    fn head_count_is_periods_plus_windows() {
        let cfg = tiny_cfg();
        let disc = Discriminators::new(cfg.clone()).unwrap();
        let mut store = ParamStore::new();
        disc.register(&mut store, 11);
        let g = Graph::inference(&store);
        let out = disc.discriminate(&g, &wave(2, 2000));
        assert_eq!(out.logits.len(), 7); // 5 periods + 2 windows
        assert_eq!(out.feature_maps.len(), out.logits.len());
    }

    #[test]
    fn default_config_has_eight_heads() {
        assert_eq!(DiscriminatorConfig::default().num_heads(), 8);
    }

    #[test]
    fn period_head_pads_to_multiple() {
        let cfg = tiny_cfg();
        let disc = Discriminators::new(cfg).unwrap();
        let mut store = ParamStore::new();
        disc.register(&mut store, 11);
        let g = Graph::inference(&store);
        // length 2001 is odd: the period-2 head must reflect-pad to 2002
        let out = disc.discriminate(&g, &wave(1, 2001));
        assert!(out.logits.iter().all(|l| l.to_vec().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn zeroed_final_convs_give_zero_logits() {
        let cfg = tiny_cfg();
        let disc = Discriminators::new(cfg).unwrap();
        let mut store = ParamStore::new();
        disc.register(&mut store, 11);
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            if n.contains(".post.") && (n.ends_with(".g") || n.ends_with(".b")) {
                store.get_mut(&n).fill(0.0);
            }
        }
        let g = Graph::inference(&store);
        let out = disc.discriminate(&g, &wave(1, 1000));
        for l in &out.logits {
            assert!(l.to_vec().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn coprime_validation_rejects_shared_factor() {
        let cfg = DiscriminatorConfig {
            mpd_periods: vec![2, 4],
            ..tiny_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn output_counts_are_config_functions(
            n_periods in 1usize..4,
            n_windows in 1usize..3,
        ) {
            let primes = [2usize, 3, 5, 7];
            let windows = [64usize, 128];
            let cfg = DiscriminatorConfig {
                mpd_periods: primes[..n_periods].to_vec(),
                stft_window_sizes: windows[..n_windows].to_vec(),
                mpd_channels: vec![2, 4],
                stft_channels: 2,
                ..DiscriminatorConfig::default()
            };
            let disc = Discriminators::new(cfg).unwrap();
            let mut store = ParamStore::new();
            disc.register(&mut store, 3);
            let g = Graph::inference(&store);
            let out = disc.discriminate(&g, &wave(1, 700));
            prop_assert_eq!(out.logits.len(), n_periods + n_windows);
            prop_assert_eq!(out.feature_maps.len(), n_periods + n_windows);
        }
    }
}
