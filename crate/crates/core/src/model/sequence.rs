// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token sequences with segment labels and image-region maps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Image,
    InputText,
    OutputText,
}

impl Segment {
    fn order(self) -> u8 {
        match self {
            Segment::Image => 0,
            Segment::InputText => 1,
            Segment::OutputText => 2,
        }
    }
}

/// Whether the object behind an annotated mention is present in the image.
/// A mention of an absent object in generated text is a hallucination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Present,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub position: usize,
    pub polarity: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub region_masks: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

impl TokenSequence {
    /// Builds a sequence from the three segments in order.
    pub fn from_parts(image: &[u32], input: &[u32], output: &[u32]) -> Self {
        let mut tokens = Vec::with_capacity(image.len() + input.len() + output.len());
        let mut segments = Vec::with_capacity(tokens.capacity());
        for (part, seg) in [
            (image, Segment::Image),
            (input, Segment::InputText),
            (output, Segment::OutputText),
        ] {
            tokens.extend_from_slice(part);
            segments.extend(std::iter::repeat_n(seg, part.len()));
        }
        TokenSequence {
            tokens,
            segments,
            region_masks: BTreeMap::new(),
            annotations: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn positions_of(&self, segment: Segment) -> impl Iterator<Item = usize> + '_ {
        self.segments
            .iter()
            .enumerate()
            .filter(move |(_, s)| **s == segment)
            .map(|(i, _)| i)
    }

    /// Index of the first OutputText position, or `len()` if there is none.
    pub fn output_start(&self) -> usize {
        self.segments
            .iter()
            .position(|s| *s == Segment::OutputText)
            .unwrap_or(self.tokens.len())
    }

    pub fn push_output(&mut self, token: u32) {
        self.tokens.push(token);
        self.segments.push(Segment::OutputText);
    }

    /// Checks the structural invariants. `vocab_size` bounds token ids.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.len() != self.segments.len() {
            return Err(Error::Sequence(format!(
                "{} tokens but {} segment labels",
                self.tokens.len(),
                self.segments.len()
            )));
        }
        if let Some((i, t)) = self
            .tokens
            .iter()
            .enumerate()
            .find(|(_, t)| **t as usize >= vocab_size)
        {
            return Err(Error::Sequence(format!(
                "token id {t} at position {i} is outside the vocabulary of {vocab_size}"
            )));
        }
        if let Some(i) = self
            .segments
            .windows(2)
            .position(|w| w[0].order() > w[1].order())
        {
            return Err(Error::Sequence(format!(
                "segments out of order at position {}: {:?} after {:?}",
                i + 1,
                self.segments[i + 1],
                self.segments[i]
            )));
        }
        for (region, positions) in &self.region_masks {
            for &p in positions {
                if self.segments.get(p) != Some(&Segment::Image) {
                    return Err(Error::Sequence(format!(
                        "region `{region}` references position {p}, which is not an image token"
                    )));
                }
            }
        }
        for a in &self.annotations {
            match self.segments.get(a.position) {
                None => {
                    return Err(Error::Sequence(format!(
                        "annotation position {} is past the end of the sequence",
                        a.position
                    )))
                }
                Some(Segment::Image) => {
                    return Err(Error::Sequence(format!(
                        "annotation position {} is an image token",
                        a.position
                    )))
                }
                Some(_) => {}
            }
            if let Some(r) = &a.region {
                if !self.region_masks.contains_key(r) {
                    return Err(Error::Sequence(format!(
                        "annotation at {} names unknown region `{r}`",
                        a.position
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_parts_labels_segments() {
        let s = TokenSequence::from_parts(&[1, 2], &[3], &[4, 5]);
        assert_eq!(
            s.segments,
            vec![
                Segment::Image,
                Segment::Image,
                Segment::InputText,
                Segment::OutputText,
                Segment::OutputText
            ]
        );
        assert_eq!(s.output_start(), 3);
        s.validate(8).unwrap();
    }

    #[test]
    fn rejects_out_of_order_segments() {
        let mut s = TokenSequence::from_parts(&[1], &[2], &[]);
        s.segments.swap(0, 1);
        assert!(s.validate(8).is_err());
    }

    #[test]
    fn rejects_region_on_text() {
        let mut s = TokenSequence::from_parts(&[1], &[2], &[]);
        s.region_masks.insert("r0".into(), vec![1]);
        assert!(s.validate(8).is_err());
    }

    #[test]
    fn rejects_annotation_on_image() {
        let mut s = TokenSequence::from_parts(&[1], &[2], &[]);
        s.annotations.push(Annotation {
            position: 0,
            polarity: Polarity::Present,
            region: None,
        });
        assert!(s.validate(8).is_err());
    }

    #[test]
    fn rejects_token_out_of_vocab() {
        let s = TokenSequence::from_parts(&[9], &[], &[]);
        assert!(s.validate(8).is_err());
    }
}
