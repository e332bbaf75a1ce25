//! Small dense layers with explicit backward passes.
//!
//! Every parameterized type implements [`Parameters`], which walks its
//! tensors in a fixed order. Gradients are stored in a value of the same type,
//! so optimizers, clipping and checkpoints all work on the flattened walk.

mod layers;
mod lstm;
mod optim;

pub use layers::{
    gelu, gelu_grad, AttentionCache, EncoderLayer, EncoderLayerCache, FeedForward,
    FeedForwardCache, LayerNorm, LayerNormCache, Linear, MultiHeadAttention,
};
pub use lstm::{Lstm, LstmCache};
pub use optim::{clip_global_norm, Adam};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

/// A named tensor as written to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    /// Overwrites all parameters from a flat vector produced by [`flatten`].
    ///
    /// [`flatten`]: Parameters::flatten
    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, _, d| {
            d.copy_from_slice(&flat[offset..offset + d.len()]);
            offset += d.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn fill_zero(&mut self) {
        self.visit_mut("", &mut |_, _, d| d.fill(0.0));
    }

    fn named_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, shape, data| {
            out.push(NamedTensor {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        });
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }
}

/// A zeroed copy, used as a gradient accumulator.
pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut g = p.clone();
    g.fill_zero();
    g
}

pub(crate) fn visit_array2(
    a: &Array2<f64>,
    name: &str,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    f(
        name,
        a.shape(),
        a.as_slice().expect("parameters are kept in standard layout"),
    );
}

pub(crate) fn visit_array2_mut(
    a: &mut Array2<f64>,
    name: &str,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = a.shape().to_vec();
    f(
        name,
        &shape,
        a.as_slice_mut().expect("parameters are kept in standard layout"),
    );
}

pub(crate) fn visit_array1(
    a: &Array1<f64>,
    name: &str,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    f(name, a.shape(), a.as_slice().expect("contiguous"));
}

pub(crate) fn visit_array1_mut(
    a: &mut Array1<f64>,
    name: &str,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = a.shape().to_vec();
    f(name, &shape, a.as_slice_mut().expect("contiguous"));
}

/// Glorot-uniform matrix of shape `(fan_in, fan_out)`.
pub fn xavier_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a vector.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Fixed sinusoidal position table of shape `(len, dim)`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, j)| {
        let pair = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences over any [`Parameters`] value.

    use super::Parameters;

    /// Numerical gradient of `loss` w.r.t. every parameter of `p`, ε-step
    /// central differences.
    pub fn numeric_grad<P: Parameters + Clone>(p: &P, eps: f64, loss: impl Fn(&P) -> f64) -> Vec<f64> {
        let base = p.flatten();
        let mut probe = p.clone();
        let mut out = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + eps;
            probe.load_flat(&v);
            let up = loss(&probe);
            v[i] = base[i] - eps;
            probe.load_flat(&v);
            let down = loss(&probe);
            out.push((up - down) / (2.0 * eps));
        }
        out
    }

    /// ‖a − b‖ / max(‖a‖, ‖b‖), zero when both vanish.
    pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nb);
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }
}
