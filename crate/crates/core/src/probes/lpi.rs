// SPDX-License-Identifier: MIT OR Apache-2.0

//! Log-probability increase of a single head.
//!
//! For head `(l, n)` at position `t` and a token set `B`:
//!
//! ```text
//! lpi(B) = log Σ_{b∈B} P(b | h(l-1)_t + H(l,n)_t) − log Σ_{b∈B} P(b | h(l-1)_t)
//! ```
//!
//! with `P(· | x) = softmax(Unembed(norm?(x)))`. Both terms come from the
//! captured trace; nothing is re-run.

use crate::error::{Error, Result};
use crate::model::{log_sum_exp, Model, Trace};

pub(crate) fn check_set(model: &Model, set: &[u32]) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Contract(
            "log-probability increase needs a non-empty token set".into(),
        ));
    }
    if let Some(t) = set.iter().find(|&&t| t as usize >= model.config.vocab_size) {
        return Err(Error::Contract(format!(
            "token {t} outside vocabulary of {}",
            model.config.vocab_size
        )));
    }
    Ok(())
}

/// `log Σ_{b∈set} P(b)` from a log-probability vector. Duplicate ids count
/// once.
pub(crate) fn set_log_prob(log_probs: &[f64], set: &[u32]) -> f64 {
    let mut ids: Vec<u32> = set.to_vec();
    ids.sort_unstable();
    ids.dedup();
    log_sum_exp(ids.iter().map(|&b| log_probs[b as usize]))
}

pub(crate) fn with_head(base: &[f32], head_out: &[f32]) -> Vec<f32> {
    base.iter().zip(head_out).map(|(a, b)| a + b).collect()
}

/// Log-probability increase of `set` due to head `(layer, head)` at `t`.
pub fn lpi_set(
    trace: &Trace,
    model: &Model,
    layer: usize,
    head: usize,
    t: usize,
    set: &[u32],
) -> Result<f64> {
    check_set(model, set)?;
    let base = trace.residual(layer, t)?;
    let out = trace.head_output(layer, head, t)?;
    let before = model.log_probs(base)?;
    let after = model.log_probs(&with_head(base, out))?;
    Ok(set_log_prob(&after, set) - set_log_prob(&before, set))
}

/// [`lpi_set`] for a single token.
pub fn lpi_token(
    trace: &Trace,
    model: &Model,
    layer: usize,
    head: usize,
    t: usize,
    token: u32,
) -> Result<f64> {
    check_set(model, &[token])?;
    let base = trace.residual(layer, t)?;
    let out = trace.head_output(layer, head, t)?;
    let before = model.log_probs(base)?;
    let after = model.log_probs(&with_head(base, out))?;
    Ok(after[token as usize] - before[token as usize])
}
