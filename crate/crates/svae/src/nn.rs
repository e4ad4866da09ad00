//! Parameter storage and the layer vocabulary shared by the encoder, decoder
//! and discriminators: weight-normalized convolutions, Snake activations and
//! the anti-aliased activation used by AMP blocks.

use std::cell::RefCell;
use std::collections::BTreeMap;

use autodiff::Tensor;
use ndarray::{ArrayD, IxDyn};

use crate::dsp;
use crate::rng;

/// Named persistent parameters. Initialization is keyed by `(seed, name)` so
/// values never depend on registration order.
#[derive(Default, Clone)]
pub struct ParamStore {
    values: BTreeMap<String, ArrayD<f64>>,
}

pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform(usize),
    Const(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.values.insert(name.to_string(), value);
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) {
        assert!(
            !self.values.contains_key(name),
            "parameter {name} registered twice"
        );
        let value = match init {
            Init::Const(c) => ArrayD::from_elem(IxDyn(shape), c),
            Init::FanInUniform(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut r = rng::stream(seed, name);
                ArrayD::from_shape_fn(IxDyn(shape), |_| rng::uniform_sym(&mut r, bound))
            }
        };
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.values.iter()
    }

    /// Parameters under a dotted prefix, e.g. `"disc."`.
    pub fn map_mut(&mut self) -> &mut BTreeMap<String, ArrayD<f64>> {
        &mut self.values
    }

    pub fn total_len(&self) -> usize {
        self.values.values().map(|v| v.len()).sum()
    }

    pub fn total_len_prefixed(&self, prefix: &str) -> usize {
        self.values
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }
}

/// One forward pass's view of a [`ParamStore`]. In training mode each
/// parameter becomes a `var` tensor (created once, cached), so gradients can
/// be mapped back to names; in inference mode parameters are constants and no
/// graph is retained.
pub struct Graph<'a> {
    store: &'a ParamStore,
    train: bool,
    used: RefCell<BTreeMap<String, Tensor>>,
}

impl<'a> Graph<'a> {
    pub fn train(store: &'a ParamStore) -> Self {
        Self { store, train: true, used: RefCell::new(BTreeMap::new()) }
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Self { store, train: false, used: RefCell::new(BTreeMap::new()) }
    }

    pub fn var(&self, name: &str) -> Tensor {
        if let Some(t) = self.used.borrow().get(name) {
            return t.clone();
        }
        let data = self.store.get(name).clone();
        let t = if self.train { Tensor::var(data) } else { Tensor::from_array(data) };
        self.used.borrow_mut().insert(name.to_string(), t.clone());
        t
    }

    /// Collect gradients (by parameter name) out of a backward pass, keeping
    /// only names under `prefixes`.
    pub fn grads(
        &self,
        grads: &mut autodiff::Grads,
        prefixes: &[&str],
    ) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, tensor) in self.used.borrow().iter() {
            if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            if let Some(g) = grads.take(tensor) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Weight-normalized 1-D convolution: `w = g * v / ||v||` with the norm taken
/// over all but the first weight axis, plus a bias.
pub struct WnConv1d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

fn weight_norm(g: &Tensor, v: &Tensor) -> Tensor {
    let axes: Vec<usize> = (1..v.dims().len()).collect();
    let norm = v.sqr().sum_axes_keepdim(&axes).add_scalar(1e-12).sqrt();
    v.mul(&g.div(&norm))
}

/// Initialize `(v, g, bias)` for a weight-normed conv so the effective weight
/// equals `v` at initialization (`g = ||v||`), matching common practice.
/// `bias_len` is the output-channel count (axis 0 for conv, axis 1 for
/// transposed conv).
fn register_wn(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    bias_len: usize,
    seed: u64,
) {
    store.register(&format!("{name}.v"), shape, Init::FanInUniform(fan_in), seed);
    let v = store.get(&format!("{name}.v")).clone();
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let v2 = v.into_shape_with_order((rows, cols)).unwrap();
    let mut g_shape = vec![1usize; shape.len()];
    g_shape[0] = rows;
    let g = ArrayD::from_shape_vec(
        IxDyn(&g_shape),
        (0..rows)
            .map(|r| v2.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect(),
    )
    .unwrap();
    store.insert(&format!("{name}.g"), g);
    store.register(&format!("{name}.b"), &[bias_len], Init::FanInUniform(fan_in), seed);
}

impl WnConv1d {
    pub fn new(
        name: impl Into<String>,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        Self { name: name.into(), in_c, out_c, k, stride, padding, dilation }
    }

    pub fn same(name: impl Into<String>, in_c: usize, out_c: usize, k: usize, dilation: usize) -> Self {
        assert!(k % 2 == 1, "same-padding conv needs odd kernel");
        let padding = dilation * (k - 1) / 2;
        Self::new(name, in_c, out_c, k, 1, padding, dilation)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        register_wn(
            store,
            &self.name,
            &[self.out_c, self.in_c, self.k],
            self.in_c * self.k,
            self.out_c,
            seed,
        );
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let w = weight_norm(&g.var(&format!("{}.g", self.name)), &g.var(&format!("{}.v", self.name)));
        let y = x.conv1d(&w, self.stride, self.padding, self.dilation);
        let b = g.var(&format!("{}.b", self.name)).reshape(&[1, self.out_c, 1]);
        y.add(&b)
    }
}

/// Weight-normalized transposed 1-D convolution (weight `(C_in, C_out, K)`,
/// norm over all but axis 0, as in the PyTorch default).
pub struct WnConvT1d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl WnConvT1d {
    /// Exact `stride`-fold upsampler: kernel `2*stride`, padding
    /// `ceil(stride/2)`, output padding `stride % 2`.
    pub fn upsampler(name: impl Into<String>, in_c: usize, out_c: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            in_c,
            out_c,
            k: 2 * stride,
            stride,
            padding: stride.div_ceil(2),
            output_padding: stride % 2,
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        register_wn(
            store,
            &self.name,
            &[self.in_c, self.out_c, self.k],
            self.in_c * self.k,
            self.out_c,
            seed,
        );
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let w = weight_norm(&g.var(&format!("{}.g", self.name)), &g.var(&format!("{}.v", self.name)));
        let y = x.conv_transpose1d(&w, self.stride, self.padding, self.output_padding);
        let b = g.var(&format!("{}.b", self.name)).reshape(&[1, self.out_c, 1]);
        y.add(&b)
    }
}

/// Weight-normalized 2-D convolution for the discriminators.
pub struct WnConv2d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl WnConv2d {
    pub fn new(
        name: impl Into<String>,
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        Self { name: name.into(), in_c, out_c, kernel, stride, padding }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        register_wn(
            store,
            &self.name,
            &[self.out_c, self.in_c, self.kernel.0, self.kernel.1],
            self.in_c * self.kernel.0 * self.kernel.1,
            self.out_c,
            seed,
        );
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let w = weight_norm(&g.var(&format!("{}.g", self.name)), &g.var(&format!("{}.v", self.name)));
        let y = x.conv2d(&w, self.stride, self.padding);
        let b = g.var(&format!("{}.b", self.name)).reshape(&[1, self.out_c, 1, 1]);
        y.add(&b)
    }
}

/// Snake activation `x + sin^2(alpha x) / (alpha + 1e-9)` with a trainable
/// per-channel `alpha`.
pub struct Snake {
    pub name: String,
    pub channels: usize,
}

impl Snake {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels }
    }

    pub fn register(&self, store: &mut ParamStore, _seed: u64) {
        store.register(&format!("{}.alpha", self.name), &[1, self.channels, 1], Init::Const(1.0), 0);
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let alpha = g.var(&format!("{}.alpha", self.name));
        let s = x.mul(&alpha).sin().sqr();
        x.add(&s.div(&alpha.add_scalar(1e-9)))
    }
}

/// 12-tap Kaiser-sinc low-pass used around the anti-aliased activation.
pub fn anti_alias_taps() -> Vec<f64> {
    dsp::kaiser_sinc_taps(12, 0.25, 0.3)
}

/// Anti-aliased Snake: 2x zero-stuff upsample -> low-pass -> snake ->
/// low-pass -> 2x decimate. Length-preserving.
pub struct AaSnake {
    snake: Snake,
    taps: Vec<f64>,
}

impl AaSnake {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { snake: Snake::new(name, channels), taps: anti_alias_taps() }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        self.snake.register(store, seed);
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let up_taps: Vec<f64> = self.taps.iter().map(|t| t * 2.0).collect();
        let k = self.taps.len();
        let (pl, pr) = (k / 2 - 1, k / 2);
        let up = x.zero_stuff(2).depthwise_fir(&up_taps, pl, pr);
        let act = self.snake.forward(g, &up);
        act.depthwise_fir(&self.taps, pl, pr).decimate(2)
    }
}

/// One AMP residual block: for each dilation, `x += conv_k1(aa(conv_kd(aa(x))))`.
pub struct AmpResBlock {
    aa1: Vec<AaSnake>,
    conv1: Vec<WnConv1d>,
    aa2: Vec<AaSnake>,
    conv2: Vec<WnConv1d>,
}

impl AmpResBlock {
    pub fn new(name: &str, channels: usize, kernel: usize, dilations: &[usize]) -> Self {
        let mut aa1 = Vec::new();
        let mut conv1 = Vec::new();
        let mut aa2 = Vec::new();
        let mut conv2 = Vec::new();
        for (i, &d) in dilations.iter().enumerate() {
            aa1.push(AaSnake::new(format!("{name}.d{i}.aa1"), channels));
            conv1.push(WnConv1d::same(format!("{name}.d{i}.conv1"), channels, channels, kernel, d));
            aa2.push(AaSnake::new(format!("{name}.d{i}.aa2"), channels));
            conv2.push(WnConv1d::same(format!("{name}.d{i}.conv2"), channels, channels, kernel, 1));
        }
        Self { aa1, conv1, aa2, conv2 }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        for i in 0..self.aa1.len() {
            self.aa1[i].register(store, seed);
            self.conv1[i].register(store, seed);
            self.aa2[i].register(store, seed);
            self.conv2[i].register(store, seed);
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let mut x = x.clone();
        for i in 0..self.aa1.len() {
            let xt = self.conv1[i].forward(g, &self.aa1[i].forward(g, &x));
            let xt = self.conv2[i].forward(g, &self.aa2[i].forward(g, &xt));
            x = x.add(&xt);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_is_order_independent() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let c1 = WnConv1d::new("x.conv", 2, 4, 3, 1, 1, 1);
        let c2 = WnConv1d::new("y.conv", 4, 4, 5, 1, 2, 1);
        c1.register(&mut a, 7);
        c2.register(&mut a, 7);
        c2.register(&mut b, 7);
        c1.register(&mut b, 7);
        for (name, va) in a.iter() {
            assert_eq!(va, b.get(name), "param {name} differs");
        }
    }

    #[test]
    fn weight_norm_initial_weight_equals_v() {
        let mut store = ParamStore::new();
        let c = WnConv1d::new("c", 3, 5, 7, 1, 3, 1);
        c.register(&mut store, 1);
        let g = Graph::inference(&store);
        let w = weight_norm(&g.var("c.g"), &g.var("c.v"));
        let v = store.get("c.v");
        let diff = (w.data() - v).iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn snake_zero_is_identity_at_zero() {
        let mut store = ParamStore::new();
        let s = Snake::new("s", 2);
        s.register(&mut store, 0);
        let g = Graph::inference(&store);
        let x = Tensor::zeros(&[1, 2, 4]);
        let y = s.forward(&g, &x);
        assert!(y.to_vec().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn aa_snake_preserves_length() {
        let mut store = ParamStore::new();
        let a = AaSnake::new("a", 3);
        a.register(&mut store, 0);
        let g = Graph::inference(&store);
        for len in [40, 41, 100] {
            let x = Tensor::from_vec(
                (0..3 * len).map(|i| (i as f64 * 0.1).sin()).collect(),
                &[1, 3, len],
            );
            assert_eq!(a.forward(&g, &x).dims(), &[1, 3, len]);
        }
    }

    #[test]
    fn graph_collects_grads_by_prefix() {
        let mut store = ParamStore::new();
        let c = WnConv1d::new("enc.c", 1, 2, 3, 1, 1, 1);
        c.register(&mut store, 3);
        let g = Graph::train(&store);
        let x = Tensor::from_vec((0..8).map(|i| i as f64 * 0.3).collect(), &[1, 1, 8]);
        let loss = c.forward(&g, &x).sqr().sum_all();
        let mut grads = loss.backward();
        let named = g.grads(&mut grads, &["enc."]);
        assert!(named.contains_key("enc.c.v"));
        assert!(named.contains_key("enc.c.g"));
        assert!(named.contains_key("enc.c.b"));
    }
}
