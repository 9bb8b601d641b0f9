// SPDX-License-Identifier: MIT OR Apache-2.0

//! Yes/no object-existence questions and their four-option reformulation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, Lexicon};
use crate::dataset::{AnswerOption, ObjectMention, Sample, TaskFormat};
use crate::error::{Error, Result};
use crate::model::{Segment, TokenSequence};

pub const POPE_TEMPLATE: &str = "Is there a(n) {object} in the image?";
pub const MCQ_TEMPLATE: &str = "Which of the following {appears | does not appear} in the image?\n\
A. {object1}\nB. {object2}\nC. {object3}\nD. {object4}";
const PREDICATE_SLOT: &str = "{appears | does not appear}";
pub const MCQ_LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// Prompt templates. `{object}` and `{object1}`..`{object4}` are replaced by
/// the object's token span, `a(n)` by the matching article, and the
/// `{appears | does not appear}` slot by the question predicate. A suffix,
/// when set, is appended after a space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub yes_no: String,
    pub mcq: String,
    #[serde(default)]
    pub yes_no_suffix: Option<String>,
    #[serde(default)]
    pub mcq_suffix: Option<String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            yes_no: POPE_TEMPLATE.into(),
            mcq: MCQ_TEMPLATE.into(),
            yes_no_suffix: None,
            mcq_suffix: None,
        }
    }
}

/// An object as it enters a prompt.
#[derive(Debug, Clone, Copy)]
struct Filler<'a> {
    name: &'a str,
    span: &'a [u32],
}

fn article(name: &str) -> &'static str {
    match name.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Renders `template` to display text and token ids.
fn render(
    template: &str,
    suffix: Option<&str>,
    objects: &[Filler<'_>],
    predicate: Option<&str>,
    lexicon: &Lexicon,
) -> Result<(String, Vec<u32>)> {
    let mut template = template.to_string();
    if let Some(p) = predicate {
        template = template.replace(PREDICATE_SLOT, p);
    }
    if let Some(first) = objects.first() {
        template = template.replace("a(n)", article(first.name));
    }
    if let Some(s) = suffix {
        template.push(' ');
        template.push_str(s);
    }
    let (mut text, mut tokens) = (String::new(), Vec::new());
    let mut rest = template.as_str();
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| Error::Validation(format!("unclosed placeholder in template `{template}`")))?;
        let literal = &rest[..open];
        text.push_str(literal);
        tokens.extend(lexicon.encode(literal)?);
        let key = &rest[open + 1..close];
        let idx = match key {
            "object" => 0,
            _ => key
                .strip_prefix("object")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(|n| n - 1)
                .ok_or_else(|| Error::Validation(format!("unknown placeholder `{{{key}}}`")))?,
        };
        let obj = objects
            .get(idx)
            .ok_or_else(|| Error::Validation(format!("template needs object {}", idx + 1)))?;
        text.push_str(obj.name);
        tokens.extend_from_slice(obj.span);
        rest = &rest[close + 1..];
    }
    text.push_str(rest);
    tokens.extend(lexicon.encode(rest)?);
    Ok((text, tokens))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Random,
    Popular,
    Adversarial,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::Popular => "popular",
            Strategy::Adversarial => "adversarial",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "popular" => Ok(Strategy::Popular),
            "adversarial" => Ok(Strategy::Adversarial),
            _ => Err(Error::Validation(format!(
                "unknown strategy `{s}` (expected random, popular or adversarial)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeOptions {
    pub strategy: Strategy,
    pub per_image_pos: usize,
    pub per_image_neg: usize,
    pub seed: u64,
}

impl PopeOptions {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        PopeOptions {
            strategy,
            per_image_pos: 3,
            per_image_neg: 3,
            seed,
        }
    }
}

/// Corpus-wide object statistics: how many images contain each object and
/// each unordered pair of objects.
#[derive(Debug, Clone, Default)]
pub struct ObjectStats {
    pub frequency: BTreeMap<String, usize>,
    pub cooccurrence: BTreeMap<(String, String), usize>,
    pub spans: BTreeMap<String, Vec<u32>>,
}

impl ObjectStats {
    pub fn from_records(records: &[AnnotationRecord]) -> Self {
        let mut s = ObjectStats::default();
        for r in records {
            for a in &r.absent {
                s.spans.entry(a.name.clone()).or_insert_with(|| a.span.clone());
                s.frequency.entry(a.name.clone()).or_insert(0);
            }
            let names: BTreeSet<&str> = r.present.iter().map(|p| p.name.as_str()).collect();
            for p in &r.present {
                s.spans.entry(p.name.clone()).or_insert_with(|| p.span.clone());
                *s.frequency.entry(p.name.clone()).or_insert(0) += 1;
            }
            for a in &names {
                for b in &names {
                    if a < b {
                        *s.cooccurrence.entry((a.to_string(), b.to_string())).or_insert(0) += 1;
                    }
                }
            }
        }
        s
    }

    pub fn cooccurrence(&self, a: &str, b: &str) -> usize {
        let key = if a < b { (a, b) } else { (b, a) };
        self.cooccurrence
            .get(&(key.0.to_string(), key.1.to_string()))
            .copied()
            .unwrap_or(0)
    }
}

fn yes_no_options(lexicon: &Lexicon) -> Result<Vec<AnswerOption>> {
    ["yes", "no"]
        .iter()
        .map(|&w| {
            Ok(AnswerOption {
                label: w.into(),
                tokens: vec![lexicon.id(w)?],
            })
        })
        .collect()
}

/// Balanced yes/no questions: per image, `per_image_pos` present objects and
/// `per_image_neg` absent ones chosen by `strategy`, interleaved. Images
/// without enough of either are skipped with a warning.
pub fn build_pope(
    records: &[AnnotationRecord],
    lexicon: &Lexicon,
    templates: &PromptTemplates,
    opts: &PopeOptions,
) -> Result<Vec<Sample>> {
    let stats = ObjectStats::from_records(records);
    let options = yes_no_options(lexicon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    for r in records {
        r.validate()?;
        if r.present.len() < opts.per_image_pos {
            log::warn!(
                "skipping image {}: {} present objects, need {}",
                r.image_id,
                r.present.len(),
                opts.per_image_pos
            );
            continue;
        }
        let present_names: BTreeSet<&str> = r.present.iter().map(|p| p.name.as_str()).collect();
        let mut eligible: Vec<(String, Vec<u32>)> = if r.absent.is_empty() {
            stats
                .spans
                .iter()
                .filter(|(n, _)| !present_names.contains(n.as_str()))
                .map(|(n, s)| (n.clone(), s.clone()))
                .collect()
        } else {
            r.absent.iter().map(|a| (a.name.clone(), a.span.clone())).collect()
        };
        if eligible.len() < opts.per_image_neg {
            log::warn!(
                "skipping image {}: {} eligible absent objects, need {}",
                r.image_id,
                eligible.len(),
                opts.per_image_neg
            );
            continue;
        }
        let mut pos: Vec<usize> = (0..r.present.len()).collect();
        pos.shuffle(&mut rng);
        pos.truncate(opts.per_image_pos);

        // Shuffle first so that ties in the stable sort fall in seeded order.
        eligible.shuffle(&mut rng);
        match opts.strategy {
            Strategy::Random => {}
            Strategy::Popular => {
                eligible.sort_by_key(|(n, _)| std::cmp::Reverse(stats.frequency.get(n).copied().unwrap_or(0)))
            }
            Strategy::Adversarial => eligible.sort_by_key(|(n, _)| {
                std::cmp::Reverse(
                    present_names
                        .iter()
                        .map(|p| stats.cooccurrence(p, n))
                        .sum::<usize>(),
                )
            }),
        }
        eligible.truncate(opts.per_image_neg);

        let mut questions: Vec<ObjectMention> = Vec::new();
        for i in 0..opts.per_image_pos.max(opts.per_image_neg) {
            if let Some(&p) = pos.get(i) {
                let p = &r.present[p];
                questions.push(ObjectMention {
                    name: p.name.clone(),
                    span: p.span.clone(),
                    present: true,
                    region: Some(p.region.clone()),
                });
            }
            if let Some((name, span)) = eligible.get(i) {
                questions.push(ObjectMention {
                    name: name.clone(),
                    span: span.clone(),
                    present: false,
                    region: None,
                });
            }
        }
        for obj in questions {
            let filler = Filler {
                name: &obj.name,
                span: &obj.span,
            };
            let (text, tokens) = render(
                &templates.yes_no,
                templates.yes_no_suffix.as_deref(),
                &[filler],
                None,
                lexicon,
            )?;
            let mut seq = TokenSequence::from_parts(&r.image, &tokens, &[]);
            seq.region_masks = r.region_masks.clone();
            let mut s = Sample::new(format!("{}-q{}", r.image_id, out.len()), TaskFormat::YesNo, seq);
            s.image_id = Some(r.image_id.clone());
            s.question = Some(text);
            s.options = options.clone();
            s.answer = Some(if obj.present { 0 } else { 1 });
            s.objects = vec![obj];
            out.push(s);
        }
    }
    Ok(out)
}

/// One four-option question per yes/no question: the target object plus
/// three objects with the opposite label, shuffled.
pub fn build_mcq_pope(
    pope: &[Sample],
    lexicon: &Lexicon,
    templates: &PromptTemplates,
    seed: u64,
) -> Result<Vec<Sample>> {
    let letters: Vec<AnswerOption> = MCQ_LETTERS
        .iter()
        .map(|&l| {
            Ok(AnswerOption {
                label: l.into(),
                tokens: vec![lexicon.id(l)?],
            })
        })
        .collect::<Result<_>>()?;
    let mut groups: Vec<(String, Vec<&Sample>)> = Vec::new();
    for s in pope {
        let key = s.image_id.clone().unwrap_or_else(|| s.id.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(s),
            None => groups.push((key, vec![s])),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (image_id, group) in groups {
        let mut objects: Vec<(&ObjectMention, &Sample)> = Vec::new();
        for s in &group {
            let obj = match (s.format, s.objects.as_slice(), s.answer) {
                (TaskFormat::YesNo, [obj], Some(a)) if obj.present == (a == 0) => obj,
                _ => {
                    return Err(Error::Validation(format!(
                        "sample {} is not a yes/no question about one object",
                        s.id
                    )))
                }
            };
            objects.push((obj, s));
        }
        let yes = objects.iter().filter(|(o, _)| o.present).count();
        let no = objects.len() - yes;
        if yes != no || yes < 3 {
            log::warn!("skipping image {image_id}: {yes} yes-labeled and {no} no-labeled objects");
            continue;
        }
        for &(target, source) in &objects {
            let mut distractors: Vec<&ObjectMention> = objects
                .iter()
                .map(|(o, _)| *o)
                .filter(|o| o.present != target.present)
                .collect();
            distractors.shuffle(&mut rng);
            distractors.truncate(3);
            let mut four = vec![target];
            four.extend(distractors);
            four.shuffle(&mut rng);
            let answer = four.iter().position(|o| std::ptr::eq(*o, target)).expect("target");
            let predicate = if target.present { "appears" } else { "does not appear" };
            let fillers: Vec<Filler<'_>> = four
                .iter()
                .map(|o| Filler {
                    name: &o.name,
                    span: &o.span,
                })
                .collect();
            let (text, tokens) = render(
                &templates.mcq,
                templates.mcq_suffix.as_deref(),
                &fillers,
                Some(predicate),
                lexicon,
            )?;
            let image: Vec<u32> = source
                .sequence
                .positions_of(Segment::Image)
                .map(|i| source.sequence.tokens[i])
                .collect();
            let mut seq = TokenSequence::from_parts(&image, &tokens, &[]);
            seq.region_masks = source.sequence.region_masks.clone();
            let mut s = Sample::new(format!("{image_id}-m{}", out.len()), TaskFormat::Mcq, seq);
            s.image_id = source.image_id.clone();
            s.question = Some(text);
            s.options = letters.clone();
            s.answer = Some(answer);
            s.objects = four.into_iter().cloned().collect();
            out.push(s);
        }
    }
    Ok(out)
}

/// Whether option `i` of an MCQ sample satisfies its question's predicate.
pub fn mcq_option_holds(sample: &Sample, i: usize) -> bool {
    let appears = sample
        .question
        .as_deref()
        .is_none_or(|q| !q.contains("does not appear"));
    sample.objects.get(i).is_some_and(|o| o.present == appears)
}
