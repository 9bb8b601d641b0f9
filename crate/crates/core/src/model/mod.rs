// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal decoder-only transformer with per-head instrumentation.
//!
//! Layer update, with layers indexed from 0:
//!
//! ```text
//! A(l,n)  = softmax(causal(Q(l,n) h · (K(l,n) h)ᵀ / sqrt(d_k)))
//! H(l,n)  = A(l,n) · V(l,n) h · O(l,n)
//! m       = h + Σ_n H(l,n)
//! F(l)    = W_out · gelu(W_in · m + b_in) + b_out
//! h'      = m + F(l)
//! ```
//!
//! There is no normalization inside the blocks; an optional RMS norm sits in
//! front of the unembedding. Weights and activations are `f32`, every
//! reduction accumulates in `f64`.

mod config;
mod forward;
mod generate;
mod io;
mod sequence;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use forward::{forward, forward_with, CaptureSpec, Hooks, Trace};
pub use generate::{generate, generate_with, Decode, GenerateOptions};
pub use io::{load_model, save_model, Manifest, TensorEntry};
pub use sequence::{Annotation, Polarity, Segment, TokenSequence};

use crate::error::{Error, Result};

/// Half-width of the uniform distribution used by [`init_random`].
pub const INIT_RANGE: f32 = 0.08;
/// Epsilon inside the RMS normalizer.
pub const NORM_EPS: f64 = 1e-5;

/// Row-major `rows × cols` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// `self · x`, accumulated in f64.
    pub fn matvec(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x) as f32).collect()
    }

    /// `xᵀ · self` for `x` of length `rows`, accumulated in f64.
    pub fn vecmat(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.rows);
        let mut acc = vec![0.0f64; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            let xr = xr as f64;
            for (a, &w) in acc.iter_mut().zip(self.row(r)) {
                *a += xr * w as f64;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Projections of one attention head. All four are `d_k × d`; the output
/// projection maps a `d_k` row vector back to the residual width.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    /// `ffn_hidden × d`
    pub w_in: Matrix,
    pub b_in: Vec<f32>,
    /// `d × ffn_hidden`
    pub w_out: Matrix,
    pub b_out: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub ffn: FfnWeights,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// `V × d`
    pub token_embedding: Matrix,
    /// `max_seq_len × d`
    pub positional_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `V × d`
    pub unembed: Matrix,
    pub unembed_bias: Vec<f32>,
    forward_calls: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            token_embedding: self.token_embedding.clone(),
            positional_embedding: self.positional_embedding.clone(),
            layers: self.layers.clone(),
            final_norm: self.final_norm.clone(),
            unembed: self.unembed.clone(),
            unembed_bias: self.unembed_bias.clone(),
            forward_calls: AtomicU64::new(self.forward_count()),
        }
    }
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.token_embedding == other.token_embedding
            && self.positional_embedding == other.positional_embedding
            && self.layers == other.layers
            && self.final_norm == other.final_norm
            && self.unembed == other.unembed
            && self.unembed_bias == other.unembed_bias
    }
}

impl Model {
    /// All-zero weights with unit norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let dk = config.head_dim();
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                heads: (0..config.num_heads)
                    .map(|_| HeadWeights {
                        w_q: Matrix::zeros(dk, d),
                        w_k: Matrix::zeros(dk, d),
                        w_v: Matrix::zeros(dk, d),
                        w_o: Matrix::zeros(dk, d),
                    })
                    .collect(),
                ffn: FfnWeights {
                    w_in: Matrix::zeros(config.ffn_hidden, d),
                    b_in: vec![0.0; config.ffn_hidden],
                    w_out: Matrix::zeros(d, config.ffn_hidden),
                    b_out: vec![0.0; d],
                },
            })
            .collect();
        Ok(Model {
            token_embedding: Matrix::zeros(config.vocab_size, d),
            positional_embedding: Matrix::zeros(config.max_seq_len, d),
            layers,
            final_norm: vec![1.0; d],
            unembed: Matrix::zeros(config.vocab_size, d),
            unembed_bias: vec![0.0; config.vocab_size],
            forward_calls: AtomicU64::new(0),
            config,
        })
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadWeights {
        &self.layers[layer].heads[head]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut HeadWeights {
        &mut self.layers[layer].heads[head]
    }

    /// Number of forward passes run against this model since construction
    /// (or the last [`reset_forward_count`](Self::reset_forward_count)).
    pub fn forward_count(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forward_calls.store(0, Ordering::Relaxed);
    }

    pub(crate) fn count_forward(&self) {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
    }

    /// Every weight tensor in canonical order: name, shape, data.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        fn mat(name: String, m: &Matrix) -> (String, Vec<usize>, &[f32]) {
            (name, vec![m.rows, m.cols], &m.data[..])
        }
        out.push(mat("token_embedding".into(), &self.token_embedding));
        out.push(mat("positional_embedding".into(), &self.positional_embedding));
        for (l, layer) in self.layers.iter().enumerate() {
            for (n, h) in layer.heads.iter().enumerate() {
                out.push(mat(format!("layers.{l}.heads.{n}.w_q"), &h.w_q));
                out.push(mat(format!("layers.{l}.heads.{n}.w_k"), &h.w_k));
                out.push(mat(format!("layers.{l}.heads.{n}.w_v"), &h.w_v));
                out.push(mat(format!("layers.{l}.heads.{n}.w_o"), &h.w_o));
            }
            out.push(mat(format!("layers.{l}.ffn.w_in"), &layer.ffn.w_in));
            out.push((
                format!("layers.{l}.ffn.b_in"),
                vec![layer.ffn.b_in.len()],
                &layer.ffn.b_in[..],
            ));
            out.push(mat(format!("layers.{l}.ffn.w_out"), &layer.ffn.w_out));
            out.push((
                format!("layers.{l}.ffn.b_out"),
                vec![layer.ffn.b_out.len()],
                &layer.ffn.b_out[..],
            ));
        }
        out.push((
            "final_norm.weight".into(),
            vec![self.final_norm.len()],
            &self.final_norm[..],
        ));
        out.push(mat("unembed.weight".into(), &self.unembed));
        out.push((
            "unembed.bias".into(),
            vec![self.unembed_bias.len()],
            &self.unembed_bias[..],
        ));
        out
    }

    /// Mutable views in the same order as [`tensors`](Self::tensors).
    pub(crate) fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut out: Vec<(String, &mut Vec<f32>)> = Vec::new();
        out.push(("token_embedding".into(), &mut self.token_embedding.data));
        out.push((
            "positional_embedding".into(),
            &mut self.positional_embedding.data,
        ));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (n, h) in layer.heads.iter_mut().enumerate() {
                out.push((format!("layers.{l}.heads.{n}.w_q"), &mut h.w_q.data));
                out.push((format!("layers.{l}.heads.{n}.w_k"), &mut h.w_k.data));
                out.push((format!("layers.{l}.heads.{n}.w_v"), &mut h.w_v.data));
                out.push((format!("layers.{l}.heads.{n}.w_o"), &mut h.w_o.data));
            }
            out.push((format!("layers.{l}.ffn.w_in"), &mut layer.ffn.w_in.data));
            out.push((format!("layers.{l}.ffn.b_in"), &mut layer.ffn.b_in));
            out.push((format!("layers.{l}.ffn.w_out"), &mut layer.ffn.w_out.data));
            out.push((format!("layers.{l}.ffn.b_out"), &mut layer.ffn.b_out));
        }
        out.push(("final_norm.weight".into(), &mut self.final_norm));
        out.push(("unembed.weight".into(), &mut self.unembed.data));
        out.push(("unembed.bias".into(), &mut self.unembed_bias));
        out
    }

    /// First tensor holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, _, data)| data.iter().any(|v| !v.is_finite()))
            .map(|(name, _, _)| name)
    }

    /// Applies the final normalization (if configured) to a hidden vector.
    pub fn normalize(&self, hidden: &[f32]) -> Vec<f32> {
        if !self.config.final_norm {
            return hidden.to_vec();
        }
        let ms = hidden.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / hidden.len() as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        hidden
            .iter()
            .zip(&self.final_norm)
            .map(|(&v, &g)| (v as f64 * inv * g as f64) as f32)
            .collect()
    }

    /// Unembedding logits of a hidden vector (after optional normalization).
    pub fn logits(&self, hidden: &[f32]) -> Result<Vec<f64>> {
        if hidden.len() != self.config.model_dim {
            return Err(Error::Numeric(format!(
                "hidden vector has length {}, expected {}",
                hidden.len(),
                self.config.model_dim
            )));
        }
        if hidden.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("hidden vector contains NaN or infinity".into()));
        }
        let x = self.normalize(hidden);
        Ok((0..self.config.vocab_size)
            .map(|v| self.unembed_bias[v] as f64 + dot(self.unembed.row(v), &x))
            .collect())
    }

    /// Log-softmax of the unembedding logits.
    pub fn log_probs(&self, hidden: &[f32]) -> Result<Vec<f64>> {
        let logits = self.logits(hidden)?;
        let lse = log_sum_exp(logits.iter().copied());
        Ok(logits.into_iter().map(|z| z - lse).collect())
    }
}

/// Numerically stable `ln Σ exp(x)`. Returns `-inf` for an empty input.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Seeded model with every weight uniform in `[-INIT_RANGE, INIT_RANGE]`,
/// drawn in canonical tensor order. Norm gains are 1 and biases 0.
pub fn init_random(config: ModelConfig) -> Result<Model> {
    let mut model = Model::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    for (name, data) in model.tensors_mut() {
        if name.ends_with("b_in")
            || name.ends_with("b_out")
            || name == "unembed.bias"
            || name == "final_norm.weight"
        {
            continue;
        }
        for v in data.iter_mut() {
            *v = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
        }
    }
    Ok(model)
}

/// `softmax(Unembed(norm?(hidden)))` over the vocabulary.
pub fn next_token_distribution(model: &Model, hidden: &[f32]) -> Result<Vec<f64>> {
    let logits = model.logits(hidden)?;
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
