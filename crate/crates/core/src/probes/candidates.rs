// SPDX-License-Identifier: MIT OR Apache-2.0

//! Which tokens and positions each sample contributes to the scores.

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::{Polarity, Segment};

/// Candidate sets at one decoding step. `position` is the query position
/// whose residual predicts the step's token (the token before it).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateStep {
    pub step: usize,
    pub position: usize,
    pub plus: Vec<u32>,
    pub minus: Vec<u32>,
}

/// Non-hallucination (`plus`) and hallucination (`minus`) token sets per
/// decoding step. Steps not listed have both sets empty.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CandidateSets {
    pub steps: Vec<CandidateStep>,
}

impl CandidateSets {
    pub fn nonempty_plus(&self) -> usize {
        self.steps.iter().filter(|s| !s.plus.is_empty()).count()
    }

    pub fn nonempty_minus(&self) -> usize {
        self.steps.iter().filter(|s| !s.minus.is_empty()).count()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|s| s.position)
    }
}

/// Short-answer protocol: only the first decoding step is scored. The
/// correct option's first token goes to `plus`, every other option's first
/// token to `minus`.
pub fn build_candidate_sets_short(sample: &Sample) -> Result<CandidateSets> {
    let answer = sample.answer.ok_or_else(|| {
        Error::Validation(format!("sample `{}` has no correct option", sample.id))
    })?;
    if answer >= sample.options.len() {
        return Err(Error::Validation(format!(
            "sample `{}`: answer index {answer} but {} options",
            sample.id,
            sample.options.len()
        )));
    }
    let mut firsts = Vec::with_capacity(sample.options.len());
    for opt in &sample.options {
        let first = *opt.tokens.first().ok_or_else(|| {
            Error::Validation(format!(
                "sample `{}`: option `{}` has no tokens",
                sample.id, opt.label
            ))
        })?;
        if let Some(j) = firsts.iter().position(|&f| f == first) {
            return Err(Error::Validation(format!(
                "sample `{}`: options `{}` and `{}` share first token {first}",
                sample.id, sample.options[j].label, opt.label
            )));
        }
        firsts.push(first);
    }
    let start = sample.sequence.output_start();
    if start == 0 {
        return Err(Error::Validation(format!(
            "sample `{}` has no prompt to answer from",
            sample.id
        )));
    }
    let minus = firsts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != answer)
        .map(|(_, &f)| f)
        .collect();
    Ok(CandidateSets {
        steps: vec![CandidateStep {
            step: 0,
            position: start - 1,
            plus: vec![firsts[answer]],
            minus,
        }],
    })
}

/// Open-ended protocol: each annotated OutputText token goes to `minus`
/// when its object is absent (a hallucinated mention) and to `plus` when
/// present; the other set at that step stays empty.
pub fn build_candidate_sets_open(sample: &Sample) -> Result<CandidateSets> {
    let seq = &sample.sequence;
    let start = seq.output_start();
    let mut annotations: Vec<_> = seq.annotations.iter().collect();
    annotations.sort_by_key(|a| a.position);
    let mut steps = Vec::new();
    for a in annotations {
        if seq.segments.get(a.position) != Some(&Segment::OutputText) || a.position == 0 {
            return Err(Error::Validation(format!(
                "sample `{}`: annotation at {} is not an output token",
                sample.id, a.position
            )));
        }
        let token = seq.tokens[a.position];
        let (plus, minus) = match a.polarity {
            Polarity::Present => (vec![token], vec![]),
            Polarity::Absent => (vec![], vec![token]),
        };
        steps.push(CandidateStep {
            step: a.position - start,
            position: a.position - 1,
            plus,
            minus,
        });
    }
    Ok(CandidateSets { steps })
}

/// Picks the protocol from the sample's format.
pub fn build_candidate_sets(sample: &Sample) -> Result<CandidateSets> {
    if sample.format.is_short_answer() {
        build_candidate_sets_short(sample)
    } else {
        build_candidate_sets_open(sample)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeToken {
    pub position: usize,
    pub object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
}

/// First-mention positions of present (`plus`) and absent (`minus`) objects.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProbeTokenSet {
    pub plus: Vec<ProbeToken>,
    pub minus: Vec<ProbeToken>,
    /// Objects that never occur in the text.
    pub skipped: Vec<String>,
}

impl ProbeTokenSet {
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.plus.iter().chain(&self.minus).map(|p| p.position)
    }

    pub fn is_empty(&self) -> bool {
        self.plus.is_empty() && self.minus.is_empty()
    }
}

/// For each declared object, the first token of its first occurrence in the
/// prompt text, then the response.
pub fn select_probe_tokens(sample: &Sample) -> Result<ProbeTokenSet> {
    let seq = &sample.sequence;
    let text_start = seq
        .segments
        .iter()
        .position(|s| *s != Segment::Image)
        .unwrap_or(seq.len());
    let mut set = ProbeTokenSet::default();
    for obj in &sample.objects {
        if obj.present {
            match &obj.region {
                None => {
                    return Err(Error::Validation(format!(
                        "sample `{}`: present object `{}` has no region",
                        sample.id, obj.name
                    )))
                }
                Some(r) if !seq.region_masks.contains_key(r) => {
                    return Err(Error::Validation(format!(
                        "sample `{}`: object `{}` names unknown region `{r}`",
                        sample.id, obj.name
                    )))
                }
                _ => {}
            }
        }
        if obj.span.is_empty() {
            return Err(Error::Validation(format!(
                "sample `{}`: object `{}` has an empty span",
                sample.id, obj.name
            )));
        }
        let found = (text_start..seq.len())
            .find(|&p| seq.tokens[p..].starts_with(&obj.span));
        let Some(position) = found else {
            log::warn!(
                "sample `{}`: object `{}` never occurs in the text; skipped",
                sample.id,
                obj.name
            );
            set.skipped.push(obj.name.clone());
            continue;
        };
        let probe = ProbeToken {
            position,
            object: obj.name.clone(),
            region: obj.region.clone(),
        };
        if obj.present {
            set.plus.push(probe);
        } else {
            set.minus.push(probe);
        }
    }
    Ok(set)
}
