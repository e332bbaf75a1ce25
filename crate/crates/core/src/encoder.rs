//! Dialog-level contextual encoder.
//!
//! A dialog of `U` utterances becomes a `(2U + 1) x d` sequence
//! `[SEP, u1, SEP, u2, ..., uU, SEP]` where `SEP` is a learned vector and the
//! `u_i` are frozen sentence embeddings. Sinusoidal positions are added to
//! every row, the encoder layers attend over the whole dialog, and the
//! utterance rows are read back out as contextual representations.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::corpus::Dialog;
use crate::embedding::{utterance_key, SentenceEmbeddingStore};
use crate::nn::{
    join, sinusoidal_positions, visit_array1, visit_array1_mut, EncoderLayer, EncoderLayerCache,
    Parameters,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("no embedding for utterance `{0}`")]
    MissingEmbedding(String),
    #[error("shape mismatch: expected {expected:?}, got {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("separator positions {positions:?} do not alternate over {rows} rows")]
    InconsistentPositions { positions: Vec<usize>, rows: usize },
    #[error("dimension {dim} is not divisible by {heads} heads")]
    BadHeadCount { dim: usize, heads: usize },
    #[error("a dialog needs at least one utterance")]
    EmptyDialog,
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

/// Trainable contextual encoder: a stack of encoder layers (one by default)
/// plus the separator vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayer>,
    pub sep_vector: Array1<f64>,
}

impl EncoderParams {
    pub fn dim(&self) -> usize {
        self.sep_vector.len()
    }

    pub fn heads(&self) -> usize {
        self.layers.first().map_or(1, |l| l.attention.heads)
    }

    pub fn ffn_dim(&self) -> usize {
        self.layers
            .first()
            .map_or(0, |l| l.feed_forward.inner.output_dim())
    }
}

impl Parameters for EncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        visit_array1(&self.sep_vector, &join(prefix, "sep_vector"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        visit_array1_mut(&mut self.sep_vector, &join(prefix, "sep_vector"), f);
    }
}

/// Initializes a single-layer encoder.
pub fn init_encoder(dim: usize, heads: usize, ffn_dim: usize, seed: u64) -> Result<EncoderParams> {
    init_encoder_layers(dim, heads, ffn_dim, 1, seed)
}

pub fn init_encoder_layers(
    dim: usize,
    heads: usize,
    ffn_dim: usize,
    n_layers: usize,
    seed: u64,
) -> Result<EncoderParams> {
    if heads == 0 || dim == 0 || dim % heads != 0 {
        return Err(EncoderError::BadHeadCount { dim, heads });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..n_layers.max(1))
        .map(|_| EncoderLayer::new(dim, heads, ffn_dim, &mut rng))
        .collect();
    let bound = 1.0 / (dim as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let sep_vector = (0..dim).map(|_| dist.sample(&mut rng)).collect();
    Ok(EncoderParams { layers, sep_vector })
}

/// Interleaved separator / utterance rows of one dialog.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogSequence {
    pub tokens: Array2<f64>,
    pub positions: Array2<f64>,
    pub sep_positions: Vec<usize>,
}

impl DialogSequence {
    pub fn n_utterances(&self) -> usize {
        self.tokens.nrows() / 2
    }

    /// Encoder input: tokens plus positional encodings.
    pub fn input(&self) -> Array2<f64> {
        &self.tokens + &self.positions
    }
}

pub fn build_dialog_sequence(
    dialog: &Dialog,
    store: &SentenceEmbeddingStore,
    params: &EncoderParams,
) -> Result<DialogSequence> {
    let vectors = dialog
        .utterances
        .iter()
        .map(|u| {
            let key = utterance_key(&dialog.id, u.index);
            store
                .get(&key)
                .ok_or(EncoderError::MissingEmbedding(key))
        })
        .collect::<Result<Vec<_>>>()?;
    sequence_from_vectors(&vectors, &params.sep_vector)
}

/// Builds the interleaved sequence from already-looked-up utterance vectors.
pub fn sequence_from_vectors(vectors: &[&Array1<f64>], sep: &Array1<f64>) -> Result<DialogSequence> {
    if vectors.is_empty() {
        return Err(EncoderError::EmptyDialog);
    }
    let dim = sep.len();
    let rows = 2 * vectors.len() + 1;
    let mut tokens = Array2::zeros((rows, dim));
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(EncoderError::ShapeMismatch {
                expected: (1, dim),
                found: (1, v.len()),
            });
        }
        tokens.row_mut(2 * i + 1).assign(v);
    }
    let sep_positions: Vec<usize> = (0..rows).step_by(2).collect();
    for &p in &sep_positions {
        tokens.row_mut(p).assign(sep);
    }
    Ok(DialogSequence {
        tokens,
        positions: sinusoidal_positions(rows, dim),
        sep_positions,
    })
}

/// Forward-pass intermediates needed for [`encoder_backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    layers: Vec<EncoderLayerCache>,
    sep_positions: Vec<usize>,
}

pub fn encoder_layer_forward(seq: &DialogSequence, params: &EncoderParams) -> Result<Array2<f64>> {
    encoder_forward_cached(seq, params).map(|(out, _)| out)
}

pub fn encoder_forward_cached(
    seq: &DialogSequence,
    params: &EncoderParams,
) -> Result<(Array2<f64>, EncoderCache)> {
    let dim = params.dim();
    if seq.tokens.ncols() != dim || seq.positions.dim() != seq.tokens.dim() {
        return Err(EncoderError::ShapeMismatch {
            expected: (seq.tokens.nrows(), dim),
            found: seq.tokens.dim(),
        });
    }
    let mut x = seq.input();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (out, cache) = layer.forward(&x);
        caches.push(cache);
        x = out;
    }
    Ok((
        x,
        EncoderCache {
            layers: caches,
            sep_positions: seq.sep_positions.clone(),
        },
    ))
}

/// Backpropagates `d_out` (gradient w.r.t. the encoder output) into `grad`.
/// Separator rows route their input gradient into `grad.sep_vector`; the
/// utterance rows' input gradient is discarded because embeddings are frozen.
pub fn encoder_backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    d_out: &Array2<f64>,
    grad: &mut EncoderParams,
) {
    let mut d = d_out.clone();
    for ((layer, layer_cache), layer_grad) in params
        .layers
        .iter()
        .zip(&cache.layers)
        .zip(grad.layers.iter_mut())
        .rev()
    {
        d = layer.backward(layer_cache, &d, layer_grad);
    }
    for &p in &cache.sep_positions {
        grad.sep_vector += &d.row(p);
    }
}

fn check_positions(sep_positions: &[usize], rows: usize) -> Result<()> {
    let ok = rows % 2 == 1
        && sep_positions.len() == rows / 2 + 1
        && sep_positions.iter().enumerate().all(|(i, &p)| p == 2 * i);
    if ok {
        Ok(())
    } else {
        Err(EncoderError::InconsistentPositions {
            positions: sep_positions.to_vec(),
            rows,
        })
    }
}

/// Returns the non-separator rows, in dialog order.
pub fn split_contextual(encoded: &Array2<f64>, sep_positions: &[usize]) -> Result<Array2<f64>> {
    check_positions(sep_positions, encoded.nrows())?;
    let u = encoded.nrows() / 2;
    let mut out = Array2::zeros((u, encoded.ncols()));
    for i in 0..u {
        out.row_mut(i).assign(&encoded.row(2 * i + 1));
    }
    Ok(out)
}

/// Scatters per-utterance gradients back onto the full sequence rows.
pub fn unsplit_gradient(d_utterances: &Array2<f64>) -> Array2<f64> {
    let u = d_utterances.nrows();
    let mut out = Array2::zeros((2 * u + 1, d_utterances.ncols()));
    for i in 0..u {
        out.row_mut(2 * i + 1).assign(&d_utterances.row(i));
    }
    out
}

/// Convenience: contextual representations of one dialog.
pub fn contextual_representations(
    dialog: &Dialog,
    store: &SentenceEmbeddingStore,
    params: &EncoderParams,
) -> Result<Array2<f64>> {
    let seq = build_dialog_sequence(dialog, store, params)?;
    let encoded = encoder_layer_forward(&seq, params)?;
    split_contextual(&encoded, &seq.sep_positions)
}
