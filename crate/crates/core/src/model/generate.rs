// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_with, softmax, CaptureSpec, Hooks, Model, TokenSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    /// Plain temperature sampling from a seeded stream.
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub decode: Decode,
    pub max_new: usize,
    #[serde(default)]
    pub eos: Option<u32>,
}

impl GenerateOptions {
    pub fn greedy(max_new: usize) -> Self {
        GenerateOptions {
            decode: Decode::Greedy,
            max_new,
            eos: None,
        }
    }
}

pub fn generate(model: &Model, seq: &TokenSequence, opts: &GenerateOptions) -> Result<TokenSequence> {
    generate_with(model, seq, opts, Hooks::default())
}

/// Appends up to `max_new` OutputText tokens. Each step runs a full forward
/// pass over the sequence so far; hooks apply at every step and position.
/// Generation stops after emitting `eos`.
pub fn generate_with(
    model: &Model,
    seq: &TokenSequence,
    opts: &GenerateOptions,
    hooks: Hooks<'_>,
) -> Result<TokenSequence> {
    if seq.len() + opts.max_new > model.config.max_seq_len {
        return Err(Error::Sequence(format!(
            "prompt of {} tokens plus max_new {} exceeds max_seq_len {}",
            seq.len(),
            opts.max_new,
            model.config.max_seq_len
        )));
    }
    let mut out = seq.clone();
    if opts.max_new == 0 {
        return Ok(out);
    }
    let mut rng = match opts.decode {
        Decode::Sample { temperature, seed } => {
            if temperature.is_nan() || temperature <= 0.0 {
                return Err(Error::Contract(format!(
                    "sampling temperature must be positive, got {temperature}"
                )));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        Decode::Greedy => None,
    };
    let capture = CaptureSpec::logits_only();
    for _ in 0..opts.max_new {
        let last = out.len() - 1;
        let trace = forward_with(model, &out, &capture.clone().at_positions([last]), hooks)?;
        let logits = trace.logits(last)?;
        let next = match (opts.decode, rng.as_mut()) {
            (Decode::Sample { temperature, .. }, Some(rng)) => {
                let scaled: Vec<f64> = logits.iter().map(|&z| z as f64 / temperature).collect();
                let probs = softmax(&scaled);
                let dist = WeightedIndex::new(&probs)
                    .map_err(|e| Error::Numeric(format!("sampling distribution: {e}")))?;
                dist.sample(rng) as u32
            }
            _ => argmax(logits),
        };
        out.push_output(next);
        if opts.eos == Some(next) {
            break;
        }
    }
    Ok(out)
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(xs: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}
