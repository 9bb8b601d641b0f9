// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use super::{dot, Model, Segment, TokenSequence};
use crate::error::{Error, Result};

/// Which intermediate tensors a forward pass keeps. Capturing never changes
/// the numbers, only what is retained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureSpec {
    /// Residual inputs `h(l-1)` of every layer, the pre-FFN residuals and
    /// the final hidden state.
    pub residuals: bool,
    pub attention: bool,
    pub head_outputs: bool,
    pub ffn_outputs: bool,
    pub logits: bool,
    /// Restrict per-position captures to these positions. `None` keeps all.
    pub positions: Option<BTreeSet<usize>>,
}

impl CaptureSpec {
    pub fn all() -> Self {
        CaptureSpec {
            residuals: true,
            attention: true,
            head_outputs: true,
            ffn_outputs: true,
            logits: true,
            positions: None,
        }
    }

    pub fn none() -> Self {
        CaptureSpec {
            residuals: false,
            attention: false,
            head_outputs: false,
            ffn_outputs: false,
            logits: false,
            positions: None,
        }
    }

    /// Only the logits (all positions), as needed by decoding.
    pub fn logits_only() -> Self {
        CaptureSpec {
            logits: true,
            ..CaptureSpec::none()
        }
    }

    pub fn at_positions(mut self, positions: impl IntoIterator<Item = usize>) -> Self {
        self.positions = Some(positions.into_iter().collect());
        self
    }

    fn keeps(&self, t: usize) -> bool {
        self.positions.as_ref().is_none_or(|p| p.contains(&t))
    }
}

impl Default for CaptureSpec {
    fn default() -> Self {
        CaptureSpec::all()
    }
}

/// Modifications applied inside a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct Hooks<'a> {
    /// Per-head output scale, `layer * num_heads + head`.
    pub head_scale: Option<&'a [f32]>,
    /// Blocked attention edges `(query segment, key segment)`. A position's
    /// attention to itself is never blocked.
    pub blocked: &'a [(Segment, Segment)],
}

type Slot = Option<Vec<f32>>;

/// Captured activations of one forward pass. Layers are 0-based: the input
/// of layer `l` is `residual(l, t)` and its output is `residual(l + 1, t)`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub len: usize,
    residuals: Vec<Slot>,
    pre_ffn: Vec<Slot>,
    attention: Vec<Slot>,
    head_outputs: Vec<Slot>,
    ffn_outputs: Vec<Slot>,
    logits: Vec<Slot>,
}

fn fetch(slots: &[Slot], idx: usize, what: impl FnOnce() -> String) -> Result<&[f32]> {
    slots
        .get(idx)
        .and_then(|s| s.as_deref())
        .ok_or_else(|| Error::Capture(format!("{} was not captured", what())))
}

impl Trace {
    fn new(num_layers: usize, num_heads: usize, model_dim: usize, len: usize) -> Self {
        Trace {
            num_layers,
            num_heads,
            model_dim,
            len,
            residuals: vec![None; (num_layers + 1) * len],
            pre_ffn: vec![None; num_layers * len],
            attention: vec![None; num_layers * num_heads * len],
            head_outputs: vec![None; num_layers * num_heads * len],
            ffn_outputs: vec![None; num_layers * len],
            logits: vec![None; len],
        }
    }

    fn head_idx(&self, layer: usize, head: usize, t: usize) -> usize {
        (layer * self.num_heads + head) * self.len + t
    }

    /// `h(index)` at position `t`; `index` runs `0..=num_layers`.
    pub fn residual(&self, index: usize, t: usize) -> Result<&[f32]> {
        if index > self.num_layers || t >= self.len {
            return Err(Error::Capture(format!("residual ({index}, {t}) out of range")));
        }
        fetch(&self.residuals, index * self.len + t, || {
            format!("residual h({index}) at position {t}")
        })
    }

    /// `h(l-1) + Σ_n λ H(l,n)` at position `t`, the FFN input.
    pub fn pre_ffn(&self, layer: usize, t: usize) -> Result<&[f32]> {
        if layer >= self.num_layers || t >= self.len {
            return Err(Error::Capture(format!("pre-FFN ({layer}, {t}) out of range")));
        }
        fetch(&self.pre_ffn, layer * self.len + t, || {
            format!("pre-FFN residual of layer {layer} at position {t}")
        })
    }

    /// Attention row of head `(layer, head)` at query `t`; length `t + 1`.
    pub fn attention(&self, layer: usize, head: usize, t: usize) -> Result<&[f32]> {
        self.check_head(layer, head, t)?;
        fetch(&self.attention, self.head_idx(layer, head, t), || {
            format!("attention of head ({layer}, {head}) at position {t}")
        })
    }

    /// Output of head `(layer, head)` at `t` as added to the residual
    /// (already multiplied by its scale when hooks were active).
    pub fn head_output(&self, layer: usize, head: usize, t: usize) -> Result<&[f32]> {
        self.check_head(layer, head, t)?;
        fetch(&self.head_outputs, self.head_idx(layer, head, t), || {
            format!("output of head ({layer}, {head}) at position {t}")
        })
    }

    pub fn ffn_output(&self, layer: usize, t: usize) -> Result<&[f32]> {
        if layer >= self.num_layers || t >= self.len {
            return Err(Error::Capture(format!("FFN ({layer}, {t}) out of range")));
        }
        fetch(&self.ffn_outputs, layer * self.len + t, || {
            format!("FFN output of layer {layer} at position {t}")
        })
    }

    pub fn final_hidden(&self, t: usize) -> Result<&[f32]> {
        self.residual(self.num_layers, t)
    }

    pub fn logits(&self, t: usize) -> Result<&[f32]> {
        fetch(&self.logits, t, || format!("logits at position {t}"))
    }

    fn check_head(&self, layer: usize, head: usize, t: usize) -> Result<()> {
        if layer >= self.num_layers || head >= self.num_heads || t >= self.len {
            return Err(Error::Capture(format!(
                "head ({layer}, {head}) at position {t} out of range"
            )));
        }
        Ok(())
    }
}

/// Plain forward pass.
pub fn forward(model: &Model, seq: &TokenSequence, capture: &CaptureSpec) -> Result<Trace> {
    forward_with(model, seq, capture, Hooks::default())
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Forward pass with optional head scaling and attention-edge blocking.
/// [`forward`] is this function with empty hooks.
pub fn forward_with(
    model: &Model,
    seq: &TokenSequence,
    capture: &CaptureSpec,
    hooks: Hooks<'_>,
) -> Result<Trace> {
    let cfg = &model.config;
    let len = seq.len();
    if len == 0 {
        return Err(Error::Sequence("empty sequence".into()));
    }
    if len > cfg.max_seq_len {
        return Err(Error::Sequence(format!(
            "sequence of {len} tokens exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    seq.validate(cfg.vocab_size)?;
    if let Some(scale) = hooks.head_scale {
        if scale.len() != cfg.num_total_heads() {
            return Err(Error::Validation(format!(
                "head scale has {} entries, model has {} heads",
                scale.len(),
                cfg.num_total_heads()
            )));
        }
    }
    model.count_forward();

    let d = cfg.model_dim;
    let dk = cfg.head_dim();
    let nh = cfg.num_heads;
    let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();
    let mut trace = Trace::new(cfg.num_layers, nh, d, len);

    let mut h: Vec<Vec<f32>> = seq
        .tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            model
                .token_embedding
                .row(tok as usize)
                .iter()
                .zip(model.positional_embedding.row(t))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();

    let blocked = |q: usize, k: usize| {
        q != k
            && hooks
                .blocked
                .iter()
                .any(|&(src, dst)| seq.segments[q] == src && seq.segments[k] == dst)
    };

    for (l, layer) in model.layers.iter().enumerate() {
        if capture.residuals {
            for (t, ht) in h.iter().enumerate() {
                if capture.keeps(t) {
                    trace.residuals[l * len + t] = Some(ht.clone());
                }
            }
        }

        // Σ_n λ H(l,n), accumulated in f64 per position.
        let mut mha = vec![vec![0.0f64; d]; len];
        for (n, head) in layer.heads.iter().enumerate() {
            let scale = hooks.head_scale.map_or(1.0f32, |s| s[l * nh + n]);
            let q: Vec<Vec<f32>> = h.iter().map(|x| head.w_q.matvec(x)).collect();
            let k: Vec<Vec<f32>> = h.iter().map(|x| head.w_k.matvec(x)).collect();
            let v: Vec<Vec<f32>> = h.iter().map(|x| head.w_v.matvec(x)).collect();
            for t in 0..len {
                let scores: Vec<f64> = (0..=t)
                    .map(|i| {
                        if blocked(t, i) {
                            f64::NEG_INFINITY
                        } else {
                            dot(&q[t], &k[i]) * inv_sqrt_dk
                        }
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateMask(format!(
                        "every key is blocked for query position {t}"
                    )));
                }
                let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
                let norm: f64 = exps.iter().sum();
                let row: Vec<f32> = exps.iter().map(|&e| (e / norm) as f32).collect();

                let mut z = vec![0.0f64; dk];
                for (i, &a) in row.iter().enumerate() {
                    let a = a as f64;
                    for (zj, &vj) in z.iter_mut().zip(&v[i]) {
                        *zj += a * vj as f64;
                    }
                }
                let z: Vec<f32> = z.into_iter().map(|x| x as f32).collect();
                let mut out = head.w_o.vecmat(&z);
                if scale != 1.0 {
                    for o in out.iter_mut() {
                        *o *= scale;
                    }
                }
                for (m, &o) in mha[t].iter_mut().zip(&out) {
                    *m += o as f64;
                }
                if capture.keeps(t) {
                    let idx = trace.head_idx(l, n, t);
                    if capture.attention {
                        trace.attention[idx] = Some(row);
                    }
                    if capture.head_outputs {
                        trace.head_outputs[idx] = Some(out);
                    }
                }
            }
        }

        let ffn = &layer.ffn;
        for t in 0..len {
            let mid: Vec<f32> = h[t]
                .iter()
                .zip(&mha[t])
                .map(|(&x, &m)| (x as f64 + m) as f32)
                .collect();
            let hidden: Vec<f32> = (0..ffn.w_in.rows)
                .map(|r| gelu(dot(ffn.w_in.row(r), &mid) + ffn.b_in[r] as f64) as f32)
                .collect();
            let f: Vec<f32> = (0..d)
                .map(|r| (dot(ffn.w_out.row(r), &hidden) + ffn.b_out[r] as f64) as f32)
                .collect();
            let next: Vec<f32> = mid
                .iter()
                .zip(&f)
                .map(|(&m, &fv)| (m as f64 + fv as f64) as f32)
                .collect();
            if capture.keeps(t) {
                if capture.residuals {
                    trace.pre_ffn[l * len + t] = Some(mid);
                }
                if capture.ffn_outputs {
                    trace.ffn_outputs[l * len + t] = Some(f);
                }
            }
            h[t] = next;
        }
    }

    let last = cfg.num_layers;
    for (t, ht) in h.iter().enumerate() {
        if !capture.keeps(t) {
            continue;
        }
        if capture.residuals {
            trace.residuals[last * len + t] = Some(ht.clone());
        }
        if capture.logits {
            let logits = model.logits(ht)?;
            trace.logits[t] = Some(logits.into_iter().map(|z| z as f32).collect());
        }
    }
    Ok(trace)
}
