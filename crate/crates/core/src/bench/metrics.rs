// SPDX-License-Identifier: MIT OR Apache-2.0

//! Accuracy/F1 for short-answer benchmarks and CHAIR for captions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{Sample, TaskFormat};
use crate::error::{Error, Result};
use crate::exec;

fn clean(word: &str) -> String {
    word.chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase()
}

/// First whitespace-delimited token, lowercased and stripped of
/// punctuation, if it reads `yes` or `no`.
pub fn parse_yes_no(response: &str) -> Option<&'static str> {
    match clean(response.split_whitespace().next()?).as_str() {
        "yes" => Some("yes"),
        "no" => Some("no"),
        _ => None,
    }
}

/// First standalone letter A–D (either case, punctuation ignored).
pub fn parse_letter(response: &str) -> Option<char> {
    response.split_whitespace().find_map(|w| {
        let w = clean(w);
        match w.as_str() {
            "a" | "b" | "c" | "d" => w.chars().next().map(|c| c.to_ascii_uppercase()),
            _ => None,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeMetrics {
    pub format: TaskFormat,
    pub n: usize,
    pub correct: usize,
    pub unparseable: usize,
    pub accuracy: f64,
    /// Positive class `yes` for yes/no questions; macro averages over
    /// A–D for multiple choice.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Default, Clone, Copy)]
struct ClassCounts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl ClassCounts {
    fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
    fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
    fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn gold_class(sample: &Sample) -> Result<String> {
    let label = sample
        .answer
        .and_then(|a| sample.options.get(a))
        .map(|o| o.label.clone())
        .ok_or_else(|| Error::Validation(format!("sample {} has no gold answer", sample.id)))?;
    match sample.format {
        TaskFormat::YesNo => {
            let l = label.to_lowercase();
            if l == "yes" || l == "no" {
                Ok(l)
            } else {
                Err(Error::Validation(format!("sample {}: gold `{label}` is not yes/no", sample.id)))
            }
        }
        TaskFormat::Mcq => {
            let l = label.to_uppercase();
            if ["A", "B", "C", "D"].contains(&l.as_str()) {
                Ok(l)
            } else {
                Err(Error::Validation(format!("sample {}: gold `{label}` is not A-D", sample.id)))
            }
        }
        _ => Err(Error::Validation(format!("sample {} is not a short-answer question", sample.id))),
    }
}

/// Scores parsed responses against gold answers. All samples must share one
/// short-answer format; unparseable responses count as wrong.
pub fn eval_discriminative(responses: &[String], dataset: &[Sample]) -> Result<DiscriminativeMetrics> {
    if responses.len() != dataset.len() {
        return Err(Error::Validation(format!(
            "{} responses for {} samples",
            responses.len(),
            dataset.len()
        )));
    }
    let format = dataset
        .first()
        .map(|s| s.format)
        .ok_or_else(|| Error::Validation("empty dataset".into()))?;
    if let Some(s) = dataset.iter().find(|s| s.format != format) {
        return Err(Error::Validation(format!(
            "sample {} has format {:?}, expected {:?}",
            s.id, s.format, format
        )));
    }
    let classes: Vec<&str> = match format {
        TaskFormat::YesNo => vec!["yes", "no"],
        TaskFormat::Mcq => vec!["A", "B", "C", "D"],
        _ => return Err(Error::Validation("discriminative metrics need yes/no or MCQ samples".into())),
    };
    let pairs = exec::try_map_ordered(dataset, |i, s| {
        let gold = gold_class(s)?;
        let pred = match format {
            TaskFormat::YesNo => parse_yes_no(&responses[i]).map(str::to_string),
            _ => parse_letter(&responses[i]).map(String::from),
        };
        Ok::<_, Error>((gold, pred))
    })?;

    let mut counts: BTreeMap<&str, ClassCounts> = classes.iter().map(|&c| (c, ClassCounts::default())).collect();
    let (mut correct, mut unparseable) = (0, 0);
    for (gold, pred) in &pairs {
        match pred {
            Some(p) if p == gold => {
                correct += 1;
                counts.get_mut(gold.as_str()).expect("class").tp += 1;
            }
            Some(p) => {
                counts.get_mut(p.as_str()).expect("class").fp += 1;
                counts.get_mut(gold.as_str()).expect("class").fn_ += 1;
            }
            None => {
                unparseable += 1;
                counts.get_mut(gold.as_str()).expect("class").fn_ += 1;
            }
        }
    }
    let k = classes.len() as f64;
    let macro_f1 = counts.values().map(ClassCounts::f1).sum::<f64>() / k;
    let (precision, recall, f1_score) = match format {
        TaskFormat::YesNo => {
            let yes = counts["yes"];
            (yes.precision(), yes.recall(), yes.f1())
        }
        _ => (
            counts.values().map(ClassCounts::precision).sum::<f64>() / k,
            counts.values().map(ClassCounts::recall).sum::<f64>() / k,
            macro_f1,
        ),
    };
    Ok(DiscriminativeMetrics {
        format,
        n: dataset.len(),
        correct,
        unparseable,
        accuracy: ratio(correct, dataset.len()),
        precision,
        recall,
        f1: f1_score,
        macro_f1,
    })
}

/// Fraction of reference slots reproduced at the same position, averaged
/// over captions.
pub fn slot_accuracy(generated: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if generated.len() != references.len() || generated.is_empty() {
        return Err(Error::Validation(format!(
            "{} generations for {} references",
            generated.len(),
            references.len()
        )));
    }
    let per: Vec<f64> = generated
        .iter()
        .zip(references)
        .map(|(g, r)| {
            if r.is_empty() {
                return 1.0;
            }
            let hits = r.iter().zip(g).filter(|(a, b)| a == b).count();
            hits as f64 / r.len() as f64
        })
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Surface phrases (lowercase, space-separated words) mapped to canonical
/// object names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectVocab {
    pub synonyms: BTreeMap<String, String>,
}

impl ObjectVocab {
    /// Each name is its own canonical form.
    pub fn from_objects<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Self {
        let mut v = ObjectVocab::default();
        for n in names {
            v.add(n.as_ref(), [n.as_ref()]);
        }
        v
    }

    pub fn add<S: AsRef<str>>(&mut self, canonical: &str, surfaces: impl IntoIterator<Item = S>) {
        let canonical = canonical.to_lowercase();
        self.synonyms.insert(canonical.clone(), canonical.clone());
        for s in surfaces {
            let key = s.as_ref().split_whitespace().map(clean).collect::<Vec<_>>().join(" ");
            self.synonyms.insert(key, canonical.clone());
        }
    }

    pub fn canonical(&self, phrase: &str) -> Option<&str> {
        let key = phrase.split_whitespace().map(clean).collect::<Vec<_>>().join(" ");
        self.synonyms.get(&key).map(String::as_str)
    }

    fn longest_phrase(&self) -> usize {
        self.synonyms
            .keys()
            .map(|k| k.split(' ').count())
            .max()
            .unwrap_or(1)
    }

    /// Distinct canonical objects mentioned in `words`, matching the longest
    /// phrase first at each position.
    pub fn mentions<S: AsRef<str>>(&self, words: &[S]) -> BTreeSet<String> {
        let words: Vec<String> = words.iter().map(|w| clean(w.as_ref())).collect();
        let max = self.longest_phrase();
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < words.len() {
            let mut step = 1;
            for n in (1..=max.min(words.len() - i)).rev() {
                if let Some(c) = self.synonyms.get(&words[i..i + n].join(" ")) {
                    found.insert(c.clone());
                    step = n;
                    break;
                }
            }
            i += step;
        }
        found
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairResult {
    /// Fraction of captions with at least one hallucinated object.
    pub c_s: f64,
    /// Fraction of mentioned objects that are hallucinated.
    pub c_i: f64,
    pub captions: usize,
    pub hallucinated_captions: usize,
    pub mentions: usize,
    pub hallucinated_mentions: usize,
    pub hallucinated: Vec<bool>,
    pub mean_length: f64,
}

/// CHAIR over captions given as word lists. Each canonical object counts at
/// most once per caption.
pub fn chair<S: AsRef<str>>(
    captions: &[Vec<S>],
    ground_truth: &[BTreeSet<String>],
    vocab: &ObjectVocab,
) -> Result<ChairResult> {
    if captions.is_empty() {
        return Err(Error::Validation("CHAIR needs at least one caption".into()));
    }
    if captions.len() != ground_truth.len() {
        return Err(Error::Validation(format!(
            "{} captions but {} ground-truth sets",
            captions.len(),
            ground_truth.len()
        )));
    }
    let (mut mentions, mut bad_mentions) = (0, 0);
    let mut flags = Vec::with_capacity(captions.len());
    for (cap, gt) in captions.iter().zip(ground_truth) {
        let gt: BTreeSet<String> = gt
            .iter()
            .map(|g| vocab.canonical(g).map_or_else(|| g.to_lowercase(), str::to_string))
            .collect();
        let found = vocab.mentions(cap);
        let bad = found.iter().filter(|o| !gt.contains(*o)).count();
        mentions += found.len();
        bad_mentions += bad;
        flags.push(bad > 0);
    }
    let bad_caps = flags.iter().filter(|&&f| f).count();
    let total_len: usize = captions.iter().map(Vec::len).sum();
    Ok(ChairResult {
        c_s: ratio(bad_caps, captions.len()),
        c_i: ratio(bad_mentions, mentions),
        captions: captions.len(),
        hallucinated_captions: bad_caps,
        mentions,
        hallucinated_mentions: bad_mentions,
        hallucinated: flags,
        mean_length: total_len as f64 / captions.len() as f64,
    })
}
