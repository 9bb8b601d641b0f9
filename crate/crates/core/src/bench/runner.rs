// SPDX-License-Identifier: MIT OR Apache-2.0

//! Generating responses for a split and scoring them.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::metrics::{chair, eval_discriminative, slot_accuracy, ChairResult, DiscriminativeMetrics, ObjectVocab};
use super::Lexicon;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::exec;
use crate::intervene::Intervention;
use crate::model::{Decode, GenerateOptions, Model, TokenSequence};

/// What the model is given: the prompt for short-answer questions, the
/// whole stored sequence (prompt plus any response prefix) otherwise.
pub fn generation_input(sample: &Sample) -> TokenSequence {
    if sample.format.is_short_answer() {
        sample.prompt()
    } else {
        sample.sequence.clone()
    }
}

/// Newly generated tokens for every sample, in dataset order. With
/// sampling, sample `i` uses seed `seed + i`.
pub fn generate_responses(
    model: &Model,
    samples: &[Sample],
    intervention: &Intervention,
    opts: &GenerateOptions,
) -> Result<Vec<Vec<u32>>> {
    exec::try_map_ordered(samples, |i, s| {
        let mut o = *opts;
        if let Decode::Sample { temperature, seed } = o.decode {
            o.decode = Decode::Sample {
                temperature,
                seed: seed.wrapping_add(i as u64),
            };
        }
        let input = generation_input(s);
        let out = intervention.generate(model, &input, &o)?;
        Ok::<_, Error>(out.tokens[input.len()..].to_vec())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortAnswerReport {
    pub metrics: DiscriminativeMetrics,
    pub responses: Vec<String>,
}

pub fn evaluate_short_answer(
    model: &Model,
    samples: &[Sample],
    lexicon: &Lexicon,
    intervention: &Intervention,
    opts: &GenerateOptions,
) -> Result<ShortAnswerReport> {
    let responses: Vec<String> = generate_responses(model, samples, intervention, opts)?
        .iter()
        .map(|t| lexicon.decode(t))
        .collect();
    Ok(ShortAnswerReport {
        metrics: eval_discriminative(&responses, samples)?,
        responses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionReport {
    /// Share of reference words reproduced in place.
    pub slot_accuracy: f64,
    pub chair: ChairResult,
    pub responses: Vec<String>,
}

/// Ground truth for CHAIR is each sample's present objects.
pub fn evaluate_captions(
    model: &Model,
    samples: &[Sample],
    lexicon: &Lexicon,
    intervention: &Intervention,
    opts: &GenerateOptions,
    vocab: &ObjectVocab,
) -> Result<CaptionReport> {
    let generated = generate_responses(model, samples, intervention, opts)?;
    let references: Vec<Vec<u32>> = samples.iter().map(|s| s.reference.clone()).collect();
    let words: Vec<Vec<String>> = generated.iter().map(|g| lexicon.decode_words(g)).collect();
    let truth: Vec<BTreeSet<String>> = samples
        .iter()
        .map(|s| s.objects.iter().filter(|o| o.present).map(|o| o.name.clone()).collect())
        .collect();
    Ok(CaptionReport {
        slot_accuracy: slot_accuracy(&generated, &references)?,
        chair: chair(&words, &truth, vocab)?,
        responses: words.iter().map(|w| w.join(" ")).collect(),
    })
}
