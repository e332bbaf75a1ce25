use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use super::{
    join, softmax_rows, visit_array1, visit_array1_mut, visit_array2, visit_array2_mut,
    xavier_uniform, Parameters,
};

/// Affine map `x W + b` applied to each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(in, out)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: xavier_uniform(input, output, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, d_out: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(d_out);
        grad.bias += &d_out.sum_axis(Axis(0));
        d_out.dot(&self.weight.t())
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array2(&self.weight, &join(prefix, "weight"), f);
        visit_array1(&self.bias, &join(prefix, "bias"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array2_mut(&mut self.weight, &join(prefix, "weight"), f);
        visit_array1_mut(&mut self.bias, &join(prefix, "bias"), f);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let dim = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, istd) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / dim;
            row -= mean;
            let var = row.dot(&row) / dim;
            *istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *istd;
        }
        let out = &normalized * &self.gain + &self.bias;
        (out, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, d_out: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gain += &(d_out * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &d_out.sum_axis(Axis(0));
        let dim = d_out.ncols() as f64;
        let d_norm = d_out * &self.gain;
        let mut dx = Array2::zeros(d_out.raw_dim());
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            let dn = d_norm.row(i);
            let xn = cache.normalized.row(i);
            let sum_dn = dn.sum();
            let sum_dn_xn = dn.dot(&xn);
            let scale = cache.inv_std[i] / dim;
            for j in 0..row.len() {
                row[j] = scale * (dim * dn[j] - sum_dn - xn[j] * sum_dn_xn);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array1(&self.gain, &join(prefix, "gain"), f);
        visit_array1(&self.bias, &join(prefix, "bias"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array1_mut(&mut self.gain, &join(prefix, "gain"), f);
        visit_array1_mut(&mut self.bias, &join(prefix, "bias"), f);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Position-wise two-layer network with GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    input: Array2<f64>,
    pre_activation: Array2<f64>,
    activation: Array2<f64>,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            inner: Linear::new(dim, hidden, rng),
            outer: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let pre_activation = self.inner.forward(x);
        let activation = pre_activation.mapv(gelu);
        let out = self.outer.forward(&activation);
        (
            out,
            FeedForwardCache {
                input: x.clone(),
                pre_activation,
                activation,
            },
        )
    }

    pub fn backward(&self, cache: &FeedForwardCache, d_out: &Array2<f64>, grad: &mut FeedForward) -> Array2<f64> {
        let d_act = self.outer.backward(&cache.activation, d_out, &mut grad.outer);
        let d_pre = d_act * cache.pre_activation.mapv(gelu_grad);
        self.inner.backward(&cache.input, &d_pre, &mut grad.inner)
    }
}

impl Parameters for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.inner.visit(&join(prefix, "inner"), f);
        self.outer.visit(&join(prefix, "outer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.inner.visit_mut(&join(prefix, "inner"), f);
        self.outer.visit_mut(&join(prefix, "outer"), f);
    }
}

/// Unmasked multi-head scaled dot-product self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
        Self {
            heads,
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            output: Linear::new(dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.input_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut concat = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let out = self.output.forward(&concat);
        (
            out,
            AttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                probs,
                concat,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        d_out: &Array2<f64>,
        grad: &mut MultiHeadAttention,
    ) -> Array2<f64> {
        let d_concat = self.output.backward(&cache.concat, d_out, &mut grad.output);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let p = &cache.probs[h];
            let d_head = d_concat.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&d_head));
            let dp = d_head.dot(&cache.v.slice(cols).t());
            // softmax backward, row by row
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = p * &(dp - &row_dot) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut dx = self.query.backward(&cache.input, &dq, &mut grad.query);
        dx += &self.key.backward(&cache.input, &dk, &mut grad.key);
        dx += &self.value.backward(&cache.input, &dv, &mut grad.value);
        dx
    }
}

impl Parameters for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Post-norm encoder layer: attention, add & norm, feed-forward, add & norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub feed_forward: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerCache {
    attention: AttentionCache,
    norm1: LayerNormCache,
    feed_forward: FeedForwardCache,
    norm2: LayerNormCache,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, ffn_dim: usize, rng: &mut R) -> Self {
        Self {
            attention: MultiHeadAttention::new(dim, heads, rng),
            norm1: LayerNorm::identity(dim),
            feed_forward: FeedForward::new(dim, ffn_dim, rng),
            norm2: LayerNorm::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.attention.dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, EncoderLayerCache) {
        let (attended, attention) = self.attention.forward(x);
        let (h1, norm1) = self.norm1.forward(&(x + &attended));
        let (ff, feed_forward) = self.feed_forward.forward(&h1);
        let (out, norm2) = self.norm2.forward(&(&h1 + &ff));
        (
            out,
            EncoderLayerCache {
                attention,
                norm1,
                feed_forward,
                norm2,
            },
        )
    }

    pub fn backward(&self, cache: &EncoderLayerCache, d_out: &Array2<f64>, grad: &mut EncoderLayer) -> Array2<f64> {
        let d_r2 = self.norm2.backward(&cache.norm2, d_out, &mut grad.norm2);
        let d_h1 = &d_r2 + &self.feed_forward.backward(&cache.feed_forward, &d_r2, &mut grad.feed_forward);
        let d_r1 = self.norm1.backward(&cache.norm1, &d_h1, &mut grad.norm1);
        &d_r1 + &self.attention.backward(&cache.attention, &d_r1, &mut grad.attention)
    }
}

impl Parameters for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.feed_forward.visit(&join(prefix, "feed_forward"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.feed_forward.visit_mut(&join(prefix, "feed_forward"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{numeric_grad, relative_error};
    use crate::nn::zeros_like;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
    }

    #[test]
    fn gelu_derivative_matches_fd() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ln = LayerNorm::identity(6);
        ln.gain = Array1::from_shape_simple_fn(6, || { let z: f64 = StandardNormal.sample(&mut rng); 1.0 + 0.1 * z });
        let x = randn(3, 6, &mut rng);
        let r = randn(3, 6, &mut rng);
        let (_, cache) = ln.forward(&x);
        let mut grad = zeros_like(&ln);
        let dx = ln.backward(&cache, &r, &mut grad);
        let num = numeric_grad(&ln, 1e-5, |p| (p.forward(&x).0 * &r).sum());
        assert!(relative_error(&grad.flatten(), &num) < 1e-6);
        // input gradient, one coordinate at a time
        for i in 0..3 {
            for j in 0..6 {
                let mut up = x.clone();
                up[[i, j]] += 1e-5;
                let mut down = x.clone();
                down[[i, j]] -= 1e-5;
                let fd = ((ln.forward(&up).0 * &r).sum() - (ln.forward(&down).0 * &r).sum()) / 2e-5;
                assert!((fd - dx[[i, j]]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let attn = MultiHeadAttention::new(4, 2, &mut rng);
        let x = randn(5, 4, &mut rng);
        let r = randn(5, 4, &mut rng);
        let (_, cache) = attn.forward(&x);
        let mut grad = zeros_like(&attn);
        let dx = attn.backward(&cache, &r, &mut grad);
        let num = numeric_grad(&attn, 1e-5, |p| (p.forward(&x).0 * &r).sum());
        assert!(relative_error(&grad.flatten(), &num) < 1e-6);
        let mut num_dx = Vec::new();
        for i in 0..5 {
            for j in 0..4 {
                let mut up = x.clone();
                up[[i, j]] += 1e-5;
                let mut down = x.clone();
                down[[i, j]] -= 1e-5;
                num_dx.push(((attn.forward(&up).0 * &r).sum() - (attn.forward(&down).0 * &r).sum()) / 2e-5);
            }
        }
        assert!(relative_error(dx.as_slice().unwrap(), &num_dx) < 1e-6);
    }

    #[test]
    fn encoder_layer_shape_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = EncoderLayer::new(8, 2, 16, &mut rng);
        let x = randn(7, 8, &mut rng);
        let r = randn(7, 8, &mut rng);
        let (out, cache) = layer.forward(&x);
        assert_eq!(out.dim(), (7, 8));
        let mut grad = zeros_like(&layer);
        layer.backward(&cache, &r, &mut grad);
        let num = numeric_grad(&layer, 1e-5, |p| (p.forward(&x).0 * &r).sum());
        assert!(relative_error(&grad.flatten(), &num) < 1e-5);
    }

    #[test]
    fn parameter_names_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = EncoderLayer::new(4, 2, 8, &mut rng);
        let names: Vec<String> = layer.named_tensors("enc").into_iter().map(|t| t.name).collect();
        assert_eq!(names[0], "enc.attention.query.weight");
        assert!(names.contains(&"enc.norm2.bias".to_string()));
        assert_eq!(layer.num_params(), 4 * (16 + 4) + 4 * 2 + (4 * 8 + 8 + 8 * 4 + 4) + 4 * 2);
    }
}
