//! Semantic alignment: frozen SSL feature providers, time interpolation onto
//! the latent grid, the trained channel projection `h = Conv1D(Interp(f(x)))`,
//! and the per-frame alignment loss.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use autodiff::Tensor;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::SegmentBatch;
use crate::error::{Error, Result};
use crate::latent::TensorFile;
use crate::model::LatentSequence;
use crate::nn::{Graph, Init, ParamStore};
use crate::rng;

/// Frozen SSL hidden states for one batch: `(B, ssl_dim, L)` plus their rate.
#[derive(Debug, Clone)]
pub struct SslFeatureSequence {
    pub frames: Array3<f64>,
    pub frame_rate: f64,
}

impl SslFeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ssl_dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Which transformer layer feeds the alignment loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSpec {
    Index(usize),
    Last,
    Avg,
}

impl Default for LayerSpec {
    /// Layer 23 of a 24-layer large SSL model.
    fn default() -> Self {
        LayerSpec::Index(23)
    }
}

impl std::str::FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(LayerSpec::Last),
            "avg" => Ok(LayerSpec::Avg),
            other => other
                .parse::<usize>()
                .map(LayerSpec::Index)
                .map_err(|_| Error::Config(format!("bad ssl layer spec {other:?} (k | last | avg)"))),
        }
    }
}

impl TryFrom<String> for LayerSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerSpec> for String {
    fn from(l: LayerSpec) -> String {
        match l {
            LayerSpec::Index(k) => k.to_string(),
            LayerSpec::Last => "last".into(),
            LayerSpec::Avg => "avg".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SslProviderConfig {
    /// "deterministic-stub" or "pretrained".
    pub provider: String,
    pub model_path: Option<PathBuf>,
    pub layer: LayerSpec,
    pub stub_seed: u64,
    /// Optional on-disk feature cache keyed by content hash.
    pub cache_dir: Option<PathBuf>,
}

impl Default for SslProviderConfig {
    fn default() -> Self {
        Self {
            provider: "deterministic-stub".into(),
            model_path: None,
            layer: LayerSpec::default(),
            stub_seed: 0,
            cache_dir: None,
        }
    }
}

/// A frozen SSL model: per-layer feature extraction over a batch. Gradients
/// never flow into a provider; outputs are plain arrays.
pub trait SslProvider: Send + Sync {
    fn model_id(&self) -> String;
    fn ssl_dim(&self) -> usize;
    fn frame_rate(&self) -> f64;
    fn n_layers(&self) -> usize;
    fn extract_layer(&self, batch: &SegmentBatch, layer: usize) -> Result<SslFeatureSequence>;

    /// Resolve a [`LayerSpec`]: a fixed layer, the last layer, or the
    /// arithmetic mean over all layers.
    fn extract(&self, batch: &SegmentBatch, spec: LayerSpec) -> Result<SslFeatureSequence> {
        match spec {
            LayerSpec::Index(k) => {
                if k >= self.n_layers() {
                    return Err(Error::Config(format!(
                        "ssl layer {k} out of range (model has {} layers)",
                        self.n_layers()
                    )));
                }
                self.extract_layer(batch, k)
            }
            LayerSpec::Last => self.extract_layer(batch, self.n_layers() - 1),
            LayerSpec::Avg => {
                let mut acc: Option<SslFeatureSequence> = None;
                for k in 0..self.n_layers() {
                    let f = self.extract_layer(batch, k)?;
                    acc = Some(match acc {
                        None => f,
                        Some(mut a) => {
                            a.frames += &f.frames;
                            a
                        }
                    });
                }
                let mut a = acc.expect("provider has zero layers");
                a.frames /= self.n_layers() as f64;
                Ok(a)
            }
        }
    }
}

pub const STUB_SSL_DIM: usize = 1024;
pub const STUB_FRAME_RATE: f64 = 50.0;
pub const STUB_LAYERS: usize = 24;

/// Deterministic test double for the frozen SSL model: per-frame standard
/// normal vectors derived from a seeded hash of `(source_id, frame, layer)`.
pub struct StubSslProvider {
    pub seed: u64,
}

impl StubSslProvider {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

/// Frame count of a 50 Hz provider for `samples` at 16 kHz.
pub fn stub_frames_for(samples: usize) -> usize {
    samples * STUB_FRAME_RATE as usize / 16_000
}

impl SslProvider for StubSslProvider {
    fn model_id(&self) -> String {
        format!("stub-ssl-seed{}", self.seed)
    }

    fn ssl_dim(&self) -> usize {
        STUB_SSL_DIM
    }

    fn frame_rate(&self) -> f64 {
        STUB_FRAME_RATE
    }

    fn n_layers(&self) -> usize {
        STUB_LAYERS
    }

    fn extract_layer(&self, batch: &SegmentBatch, layer: usize) -> Result<SslFeatureSequence> {
        let samples = batch.samples.ncols();
        let frames = stub_frames_for(samples);
        if frames == 0 {
            return Err(Error::Provider("input shorter than one ssl frame".into()));
        }
        let b = batch.samples.nrows();
        let mut out = Array3::<f64>::zeros((b, STUB_SSL_DIM, frames));
        for (i, sid) in batch.source_ids.iter().enumerate() {
            let sid_hash = rng::fnv1a(sid.as_bytes());
            for t in 0..frames {
                let key = self
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    ^ sid_hash
                    ^ rng::splitmix64((t as u64) << 32 | layer as u64);
                let mut r = rng::stream(key, "stub-ssl");
                for c in 0..STUB_SSL_DIM {
                    out[(i, c, t)] = rng::normal(&mut r);
                }
            }
        }
        Ok(SslFeatureSequence { frames: out, frame_rate: STUB_FRAME_RATE })
    }
}

/// Convenience used by tests: stub features for a batch at the default layer.
pub fn stub_features(batch: &SegmentBatch, seed: u64) -> Result<SslFeatureSequence> {
    StubSslProvider::new(seed).extract_layer(batch, STUB_LAYERS - 1)
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    model_id: String,
    ssl_dim: usize,
    frame_rate: f64,
    n_layers: usize,
}

/// Provider backed by frozen pretrained-model features precomputed by an
/// external extractor into a bundle directory:
/// `manifest.json` + `<sha256(source_id)>.layer<k>.svt` tensor files.
pub struct PretrainedSslProvider {
    dir: PathBuf,
    manifest: BundleManifest,
}

fn hex_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

impl PretrainedSslProvider {
    pub fn open(model_path: &Path) -> Result<Self> {
        if !model_path.exists() {
            return Err(Error::Provider(format!(
                "ssl model bundle {} does not exist",
                model_path.display()
            )));
        }
        let manifest_path = model_path.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Provider(format!("missing bundle manifest: {e}")))?;
        let manifest: BundleManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Provider(format!("bad bundle manifest: {e}")))?;
        if manifest.n_layers == 0 || manifest.ssl_dim == 0 {
            return Err(Error::Provider("bundle manifest has zero layers or dim".into()));
        }
        Ok(Self { dir: model_path.to_path_buf(), manifest })
    }

    fn feature_path(&self, source_id: &str, layer: usize) -> PathBuf {
        self.dir.join(format!("{}.layer{layer}.svt", hex_sha256(source_id.as_bytes())))
    }

    /// Write features for one utterance into the bundle (used by external
    /// extraction pipelines and tests).
    pub fn write_features(
        dir: &Path,
        source_id: &str,
        layer: usize,
        frames: &Array2<f64>, // (L, ssl_dim)
        frame_rate: f64,
    ) -> Result<PathBuf> {
        let path = dir.join(format!("{}.layer{layer}.svt", hex_sha256(source_id.as_bytes())));
        TensorFile::new(frames.mapv(|v| v as f32), frame_rate as f32).write(&path)?;
        Ok(path)
    }

    pub fn write_manifest(
        dir: &Path,
        model_id: &str,
        ssl_dim: usize,
        frame_rate: f64,
        n_layers: usize,
    ) -> Result<()> {
        let m = BundleManifest {
            model_id: model_id.to_string(),
            ssl_dim,
            frame_rate,
            n_layers,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&m).expect("manifest serializes"),
        )
        .map_err(|e| Error::io(dir, e))
    }
}

impl SslProvider for PretrainedSslProvider {
    fn model_id(&self) -> String {
        self.manifest.model_id.clone()
    }

    fn ssl_dim(&self) -> usize {
        self.manifest.ssl_dim
    }

    fn frame_rate(&self) -> f64 {
        self.manifest.frame_rate
    }

    fn n_layers(&self) -> usize {
        self.manifest.n_layers
    }

    fn extract_layer(&self, batch: &SegmentBatch, layer: usize) -> Result<SslFeatureSequence> {
        let b = batch.samples.nrows();
        let mut per_item = Vec::with_capacity(b);
        for sid in &batch.source_ids {
            let path = self.feature_path(sid, layer);
            let tf = TensorFile::read(&path).map_err(|e| {
                Error::Provider(format!("no precomputed features for {sid:?} layer {layer}: {e}"))
            })?;
            if tf.data.ncols() != self.manifest.ssl_dim {
                return Err(Error::Provider(format!(
                    "feature dim {} does not match bundle dim {}",
                    tf.data.ncols(),
                    self.manifest.ssl_dim
                )));
            }
            per_item.push(tf.data.mapv(|v| v as f64));
        }
        let frames = per_item.iter().map(|a| a.nrows()).min().unwrap_or(0);
        if frames == 0 {
            return Err(Error::Provider("empty feature files".into()));
        }
        let dim = self.manifest.ssl_dim;
        let mut out = Array3::<f64>::zeros((b, dim, frames));
        for (i, item) in per_item.iter().enumerate() {
            for t in 0..frames {
                for c in 0..dim {
                    out[(i, c, t)] = item[(t, c)];
                }
            }
        }
        Ok(SslFeatureSequence { frames: out, frame_rate: self.manifest.frame_rate })
    }
}

/// Cache wrapper: stores per-(utterance, layer) features as tensor files
/// keyed by a content hash of the samples, avoiding repeated provider calls.
pub struct CachedSslProvider<P: SslProvider> {
    inner: P,
    dir: PathBuf,
}

impl<P: SslProvider> CachedSslProvider<P> {
    pub fn new(inner: P, dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { inner, dir })
    }

    fn key(&self, samples: &[f64], layer: usize) -> String {
        let mut bytes = Vec::with_capacity(samples.len() * 8 + 64);
        for s in samples {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        bytes.extend_from_slice(self.inner.model_id().as_bytes());
        bytes.extend_from_slice(&(layer as u64).to_le_bytes());
        hex_sha256(&bytes)
    }
}

impl<P: SslProvider> SslProvider for CachedSslProvider<P> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }

    fn ssl_dim(&self) -> usize {
        self.inner.ssl_dim()
    }

    fn frame_rate(&self) -> f64 {
        self.inner.frame_rate()
    }

    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    fn extract_layer(&self, batch: &SegmentBatch, layer: usize) -> Result<SslFeatureSequence> {
        let b = batch.samples.nrows();
        let mut missing = false;
        let mut items: Vec<Option<Array2<f32>>> = Vec::with_capacity(b);
        for i in 0..b {
            let row: Vec<f64> = batch.samples.row(i).to_vec();
            let path = self.dir.join(format!("{}.svt", self.key(&row, layer)));
            match TensorFile::read(&path) {
                Ok(tf) => items.push(Some(tf.data)),
                Err(_) => {
                    items.push(None);
                    missing = true;
                }
            }
        }
        if !missing {
            let frames = items.iter().map(|a| a.as_ref().unwrap().nrows()).min().unwrap();
            let dim = self.inner.ssl_dim();
            let mut out = Array3::<f64>::zeros((b, dim, frames));
            for (i, item) in items.iter().enumerate() {
                let item = item.as_ref().unwrap();
                for t in 0..frames {
                    for c in 0..dim {
                        out[(i, c, t)] = item[(t, c)] as f64;
                    }
                }
            }
            return Ok(SslFeatureSequence { frames: out, frame_rate: self.inner.frame_rate() });
        }
        let feats = self.inner.extract_layer(batch, layer)?;
        for i in 0..b {
            let row: Vec<f64> = batch.samples.row(i).to_vec();
            let path = self.dir.join(format!("{}.svt", self.key(&row, layer)));
            let (l, d) = (feats.len(), feats.ssl_dim());
            let mut item = Array2::<f32>::zeros((l, d));
            for t in 0..l {
                for c in 0..d {
                    item[(t, c)] = feats.frames[(i, c, t)] as f32;
                }
            }
            TensorFile::new(item, feats.frame_rate as f32).write(&path)?;
        }
        Ok(feats)
    }
}

/// Build the configured provider.
pub fn make_provider(cfg: &SslProviderConfig) -> Result<Box<dyn SslProvider>> {
    let base: Box<dyn SslProvider> = match cfg.provider.as_str() {
        "deterministic-stub" => Box::new(StubSslProvider::new(cfg.stub_seed)),
        "pretrained" => {
            let path = cfg.model_path.as_ref().ok_or_else(|| {
                Error::Config("pretrained ssl provider requires model_path".into())
            })?;
            Box::new(PretrainedSslProvider::open(path)?)
        }
        other => return Err(Error::Config(format!("unknown ssl provider {other:?}"))),
    };
    // validate fixed layer indices eagerly
    if let LayerSpec::Index(k) = cfg.layer {
        if k >= base.n_layers() {
            return Err(Error::Config(format!(
                "ssl layer {k} out of range (model has {} layers)",
                base.n_layers()
            )));
        }
    }
    match &cfg.cache_dir {
        None => Ok(base),
        Some(dir) => Ok(Box::new(CachedSslProvider::new(BoxedProvider(base), dir.clone())?)),
    }
}

/// Adapter so a boxed provider can be wrapped by the cache.
pub struct BoxedProvider(pub Box<dyn SslProvider>);

impl SslProvider for BoxedProvider {
    fn model_id(&self) -> String {
        self.0.model_id()
    }
    fn ssl_dim(&self) -> usize {
        self.0.ssl_dim()
    }
    fn frame_rate(&self) -> f64 {
        self.0.frame_rate()
    }
    fn n_layers(&self) -> usize {
        self.0.n_layers()
    }
    fn extract_layer(&self, batch: &SegmentBatch, layer: usize) -> Result<SslFeatureSequence> {
        self.0.extract_layer(batch, layer)
    }
}

/// Linear time interpolation with endpoint alignment: output frame `i` samples
/// the input at `i * (L-1) / (T-1)` (identity when `L == T`).
pub fn interp_to_latent_grid(f: &SslFeatureSequence, target_t: usize) -> SslFeatureSequence {
    assert!(target_t >= 1 && f.len() >= 1);
    let (b, c, l) = (f.frames.shape()[0], f.frames.shape()[1], f.frames.shape()[2]);
    if l == target_t {
        return f.clone();
    }
    let mut out = Array3::<f64>::zeros((b, c, target_t));
    for t in 0..target_t {
        let pos = if target_t == 1 {
            0.0
        } else {
            t as f64 * (l - 1) as f64 / (target_t - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(l - 1);
        let frac = pos - lo as f64;
        for i in 0..b {
            for ch in 0..c {
                out[(i, ch, t)] =
                    f.frames[(i, ch, lo)] * (1.0 - frac) + f.frames[(i, ch, hi)] * frac;
            }
        }
    }
    SslFeatureSequence { frames: out, frame_rate: f.frame_rate }
}

/// The trained projection `h = Conv1D(Interp(f(x)))`: 1-D conv from `ssl_dim`
/// to the latent width. Kernel size 1 by default (a per-frame linear map).
pub struct AlignmentHead {
    pub ssl_dim: usize,
    pub latent_dim: usize,
    pub kernel_size: usize,
}

impl AlignmentHead {
    pub fn new(ssl_dim: usize, latent_dim: usize, kernel_size: usize) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::Config("alignment conv kernel size must be odd".into()));
        }
        Ok(Self { ssl_dim, latent_dim, kernel_size })
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        store.register(
            "align.proj.w",
            &[self.latent_dim, self.ssl_dim, self.kernel_size],
            Init::FanInUniform(self.ssl_dim * self.kernel_size),
            seed,
        );
        store.register("align.proj.b", &[self.latent_dim], Init::Const(0.0), seed);
    }

    /// Project time-aligned SSL features `(B, ssl_dim, T)` to `(B, latent, T)`.
    pub fn project(&self, g: &Graph, f: &SslFeatureSequence) -> Result<Tensor> {
        if f.ssl_dim() != self.ssl_dim {
            return Err(Error::Contract(format!(
                "projection expects {} ssl channels, got {}",
                self.ssl_dim,
                f.ssl_dim()
            )));
        }
        let x = Tensor::from_array(f.frames.clone().into_dyn());
        let w = g.var("align.proj.w");
        let y = x.conv1d(&w, 1, (self.kernel_size - 1) / 2, 1);
        let b = g.var("align.proj.b").reshape(&[1, self.latent_dim, 1]);
        Ok(y.add(&b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignVariant {
    Cos,
    L1,
    L2,
}

impl std::str::FromStr for AlignVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cos" => Ok(AlignVariant::Cos),
            "l1" => Ok(AlignVariant::L1),
            "l2" => Ok(AlignVariant::L2),
            other => Err(Error::Config(format!("bad align variant {other:?} (cos | l1 | l2)"))),
        }
    }
}

/// Alignment loss between projected semantics `h` and latents `z`, both
/// `(B, C, T)`. The cosine variant is `-mean_t cos(h[t], z[t])` with `1e-8`
/// in the denominator; `l1` and `l2` are elementwise means.
pub fn alignment_loss(h: &Tensor, z: &LatentSequence, variant: AlignVariant) -> Result<Tensor> {
    let zf = &z.frames;
    if h.dims() != zf.dims() {
        return Err(Error::Contract(format!(
            "alignment shapes differ: {:?} vs {:?}",
            h.dims(),
            zf.dims()
        )));
    }
    Ok(match variant {
        AlignVariant::Cos => {
            let dot = h.mul(zf).sum_axes_keepdim(&[1]);
            // 1e-24 under the root keeps gradients finite on all-zero frames;
            // the 1e-8 denominator floor defines cos(0-vector, .) = 0.
            let nh = h.sqr().sum_axes_keepdim(&[1]).add_scalar(1e-24).sqrt();
            let nz = zf.sqr().sum_axes_keepdim(&[1]).add_scalar(1e-24).sqrt();
            let cos = dot.div(&nh.mul(&nz).clamp(1e-8, f64::INFINITY));
            cos.mean_all().neg()
        }
        AlignVariant::L1 => h.sub(zf).abs().mean_all(),
        AlignVariant::L2 => h.sub(zf).sqr().mean_all(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LATENT_FRAME_RATE;
    use ndarray::Array2 as A2;

    fn batch(b: usize, samples: usize) -> SegmentBatch {
        SegmentBatch {
            samples: A2::from_shape_fn((b, samples), |(i, t)| ((i + t) as f64 * 0.01).sin()),
            source_ids: (0..b).map(|i| format!("utt{i}")).collect(),
            sample_rate: 16_000,
        }
    }

    #[test]
    fn stub_is_deterministic_and_seed_sensitive() {
        let b = batch(2, 16_000);
        let f1 = stub_features(&b, 5).unwrap();
        let f2 = stub_features(&b, 5).unwrap();
        assert_eq!(f1.frames, f2.frames);
        assert_eq!(f1.len(), 50, "1 s at 50 Hz");
        assert_eq!(f1.ssl_dim(), 1024);
        let f3 = stub_features(&b, 6).unwrap();
        let total = f1.frames.len();
        let differing = f1
            .frames
            .iter()
            .zip(f3.frames.iter())
            .filter(|(a, b)| a != b)
            .count();
        assert!(
            differing as f64 >= 0.99 * total as f64,
            "only {differing}/{total} entries differ across seeds"
        );
    }

    #[test]
    fn stub_avg_equals_mean_of_layers() {
        let p = StubSslProvider::new(3);
        let b = batch(1, 3200);
        let avg = p.extract(&b, LayerSpec::Avg).unwrap();
        let mut acc = p.extract_layer(&b, 0).unwrap().frames;
        for k in 1..p.n_layers() {
            acc += &p.extract_layer(&b, k).unwrap().frames;
        }
        acc /= p.n_layers() as f64;
        let diff = (&avg.frames - &acc).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn layer_out_of_range_is_config_error() {
        let p = StubSslProvider::new(0);
        let b = batch(1, 3200);
        assert!(matches!(
            p.extract(&b, LayerSpec::Index(24)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn interp_identity_and_midpoint() {
        let mut f = SslFeatureSequence {
            frames: Array3::zeros((1, 4, 2)),
            frame_rate: 50.0,
        };
        for c in 0..4 {
            f.frames[(0, c, 1)] = 1.0;
        }
        // L == T: bit-equal identity
        let same = interp_to_latent_grid(&f, 2);
        assert_eq!(same.frames, f.frames);
        // L=2 (0-vector, 1-vector) -> T=3 puts 0.5 in the middle
        let up = interp_to_latent_grid(&f, 3);
        for c in 0..4 {
            assert_eq!(up.frames[(0, c, 0)], 0.0);
            assert!((up.frames[(0, c, 1)] - 0.5).abs() < 1e-12);
            assert_eq!(up.frames[(0, c, 2)], 1.0);
        }
        // 150 -> 120 keeps endpoints aligned
        let f150 = SslFeatureSequence {
            frames: Array3::from_shape_fn((1, 2, 150), |(_, _, t)| t as f64),
            frame_rate: 50.0,
        };
        let g = interp_to_latent_grid(&f150, 120);
        assert_eq!(g.len(), 120);
        assert_eq!(g.frames[(0, 0, 0)], 0.0);
        assert!((g.frames[(0, 0, 119)] - 149.0).abs() < 1e-9);
    }

    #[test]
    fn projection_matches_matmul_oracle() {
        let mut store = ParamStore::new();
        let head = AlignmentHead::new(8, 3, 1).unwrap();
        head.register(&mut store, 7);
        let g = Graph::inference(&store);
        let f = SslFeatureSequence {
            frames: Array3::from_shape_fn((2, 8, 5), |(b, c, t)| ((b + c + t) as f64 * 0.37).sin()),
            frame_rate: 50.0,
        };
        let h = head.project(&g, &f).unwrap();
        // kernel size 1 is a per-frame linear map
        let w = store.get("align.proj.w");
        let bias = store.get("align.proj.b");
        for b in 0..2 {
            for o in 0..3 {
                for t in 0..5 {
                    let mut want = bias[[o]];
                    for c in 0..8 {
                        want += w[[o, c, 0]] * f.frames[(b, c, t)];
                    }
                    let got = h.data()[[b, o, t]];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn projection_identity_slice_and_zero() {
        let mut store = ParamStore::new();
        let head = AlignmentHead::new(8, 4, 1).unwrap();
        head.register(&mut store, 7);
        // identity slice: w[o, c, 0] = 1 if o == c
        {
            let w = store.get_mut("align.proj.w");
            w.fill(0.0);
            for o in 0..4 {
                w[[o, o, 0]] = 1.0;
            }
            store.get_mut("align.proj.b").fill(0.0);
        }
        let g = Graph::inference(&store);
        let f = SslFeatureSequence {
            frames: Array3::from_shape_fn((1, 8, 3), |(_, c, t)| (c * 10 + t) as f64),
            frame_rate: 50.0,
        };
        let h = head.project(&g, &f).unwrap();
        for o in 0..4 {
            for t in 0..3 {
                assert_eq!(h.data()[[0, o, t]], f.frames[(0, o, t)]);
            }
        }
        // zero weights and bias give all-zero h
        {
            let w = store.get_mut("align.proj.w");
            w.fill(0.0);
        }
        let g = Graph::inference(&store);
        let h = head.project(&g, &f).unwrap();
        assert!(h.to_vec().iter().all(|&v| v == 0.0));
    }

    fn latent_from(frames: Array3<f64>) -> LatentSequence {
        LatentSequence {
            frames: Tensor::from_array(frames.into_dyn()),
            frame_rate: LATENT_FRAME_RATE,
        }
    }

    #[test]
    fn alignment_loss_worked_examples() {
        let z = Array3::from_shape_fn((1, 4, 3), |(_, c, t)| 1.0 + (c * 3 + t) as f64 * 0.1);
        let h = Tensor::from_array(z.clone().into_dyn());
        // h = z (nonzero) -> -1
        let l = alignment_loss(&h, &latent_from(z.clone()), AlignVariant::Cos).unwrap();
        assert!((l.item() + 1.0).abs() < 1e-9);
        // h = -z -> +1
        let l = alignment_loss(&h.neg(), &latent_from(z.clone()), AlignVariant::Cos).unwrap();
        assert!((l.item() - 1.0).abs() < 1e-9);
        // orthogonal per-frame pairs -> 0 (dot-product oracle)
        let mut ha = Array3::zeros((1, 4, 3));
        let mut za = Array3::zeros((1, 4, 3));
        for t in 0..3 {
            ha[(0, 0, t)] = 2.0 + t as f64;
            za[(0, 1, t)] = -1.0 - t as f64;
        }
        for t in 0..3 {
            let dot: f64 = (0..4).map(|c| ha[(0, c, t)] * za[(0, c, t)]).sum();
            assert_eq!(dot, 0.0);
        }
        let l = alignment_loss(
            &Tensor::from_array(ha.into_dyn()),
            &latent_from(za),
            AlignVariant::Cos,
        )
        .unwrap();
        assert!(l.item().abs() < 1e-9);
        // shape mismatch is a contract violation
        let bad = latent_from(Array3::zeros((1, 4, 2)));
        assert!(alignment_loss(&h, &bad, AlignVariant::Cos).is_err());
    }

    #[test]
    fn alignment_l1_l2_variants() {
        let z = Array3::from_elem((1, 2, 2), 1.0);
        let h = Tensor::from_array(Array3::from_elem((1, 2, 2), 3.0).into_dyn());
        let l1 = alignment_loss(&h, &latent_from(z.clone()), AlignVariant::L1).unwrap();
        assert!((l1.item() - 2.0).abs() < 1e-12);
        let l2 = alignment_loss(&h, &latent_from(z), AlignVariant::L2).unwrap();
        assert!((l2.item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_is_safe() {
        let z = latent_from(Array3::zeros((1, 4, 2)));
        let h = Tensor::from_array(Array3::from_elem((1, 4, 2), 1.0).into_dyn());
        let l = alignment_loss(&h, &z, AlignVariant::Cos).unwrap();
        assert!(l.item().abs() < 1e-9, "cos against zero vector should be ~0");
    }
}
