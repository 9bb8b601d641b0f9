// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-image object annotations and a small synthetic world that produces
//! them.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Lexicon;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentObject {
    pub name: String,
    pub span: Vec<u32>,
    pub region: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbsentObject {
    pub name: String,
    pub span: Vec<u32>,
}

/// Ground truth for one image. `image` holds the image's token ids when the
/// annotations are meant to be turned into model inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image: Vec<u32>,
    pub present: Vec<PresentObject>,
    #[serde(default)]
    pub absent: Vec<AbsentObject>,
    #[serde(default)]
    pub region_masks: BTreeMap<String, Vec<usize>>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        let present: BTreeSet<&str> = self.present.iter().map(|o| o.name.as_str()).collect();
        if present.len() != self.present.len() {
            return Err(Error::Validation(format!(
                "image {}: an object is listed as present twice",
                self.image_id
            )));
        }
        for a in &self.absent {
            if present.contains(a.name.as_str()) {
                return Err(Error::Validation(format!(
                    "image {}: `{}` is both present and absent",
                    self.image_id, a.name
                )));
            }
        }
        for p in &self.present {
            if !self.region_masks.contains_key(&p.region) {
                return Err(Error::Validation(format!(
                    "image {}: object `{}` refers to unknown region `{}`",
                    self.image_id, p.name, p.region
                )));
            }
        }
        Ok(())
    }
}

pub const PATCHES_PER_REGION: usize = 4;
pub const REGIONS: usize = 4;
pub const IMAGE_LEN: usize = PATCHES_PER_REGION * REGIONS;
pub const OBJECTS_PER_IMAGE: usize = 3;

pub const TOY_OBJECTS: [&str; 12] = [
    "person", "dog", "bicycle", "cat", "chair", "cup", "car", "bird", "umbrella", "bottle",
    "apple", "oven",
];
/// Object groups that tend to appear together; indices into `TOY_OBJECTS`.
const SCENES: [[usize; 3]; 4] = [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9, 10, 11]];
const SCENE_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
const SCENE_AFFINITY: f64 = 0.65;

const WORDS: [&str; 30] = [
    "Is", "there", "a", "an", "in", "the", "image", "?", "Which", "of", "following", "appears",
    "does", "not", "appear", "A", "B", "C", "D", ".", "Answer", ":", "Please", "help", "me",
    "describe", "detail", "yes", "no", "<cap>",
];

pub const TOY_VOCAB_SIZE: usize = 64;
pub const BACKGROUND_WORD: &str = "background";
pub const CAPTION_START: &str = "<cap>";

/// A 16-patch image world with 12 object kinds. Each image holds three
/// objects in three of its four 4-patch regions; the fourth region is
/// background. Patch tokens are `<img:{object}>` and `<img:bg>`.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub lexicon: Lexicon,
}

impl Default for ToyWorld {
    fn default() -> Self {
        ToyWorld::new()
    }
}

impl ToyWorld {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = vec!["<pad>".into(), "<img:bg>".into()];
        tokens.extend(TOY_OBJECTS.iter().map(|o| format!("<img:{o}>")));
        tokens.extend(TOY_OBJECTS.iter().map(|o| o.to_string()));
        tokens.push(BACKGROUND_WORD.into());
        tokens.extend(WORDS.iter().map(|w| w.to_string()));
        let mut i = 0;
        while tokens.len() < TOY_VOCAB_SIZE {
            tokens.push(format!("<unused:{i}>"));
            i += 1;
        }
        ToyWorld {
            lexicon: Lexicon::new(tokens).expect("toy tokens are distinct"),
        }
    }

    pub fn object_word(&self, k: usize) -> u32 {
        self.lexicon.id(TOY_OBJECTS[k]).expect("object word")
    }

    pub fn object_patch(&self, k: usize) -> u32 {
        self.lexicon.id(&format!("<img:{}>", TOY_OBJECTS[k])).expect("patch token")
    }

    pub fn background_patch(&self) -> u32 {
        self.lexicon.id("<img:bg>").expect("patch token")
    }

    pub fn background_word(&self) -> u32 {
        self.lexicon.id(BACKGROUND_WORD).expect("background word")
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        TOY_OBJECTS.iter().position(|o| *o == name)
    }

    pub fn region_name(j: usize) -> String {
        format!("r{j}")
    }

    /// `num_images` random images named `{prefix}{index}`.
    pub fn annotations(&self, num_images: usize, seed: u64, prefix: &str) -> Vec<AnnotationRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..num_images)
            .map(|i| self.random_image(&mut rng, format!("{prefix}{i}")))
            .collect()
    }

    fn random_image(&self, rng: &mut ChaCha8Rng, image_id: String) -> AnnotationRecord {
        let scene = weighted(rng, &SCENE_WEIGHTS);
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < OBJECTS_PER_IMAGE {
            let from_scene: Vec<usize> = SCENES[scene]
                .iter()
                .copied()
                .filter(|k| !chosen.contains(k))
                .collect();
            let k = if !from_scene.is_empty() && rng.gen_bool(SCENE_AFFINITY) {
                *from_scene.choose(rng).expect("nonempty")
            } else {
                let rest: Vec<usize> = (0..TOY_OBJECTS.len()).filter(|k| !chosen.contains(k)).collect();
                *rest.choose(rng).expect("nonempty")
            };
            chosen.push(k);
        }
        let mut slots: Vec<usize> = (0..REGIONS).collect();
        slots.shuffle(rng);

        let mut image = vec![self.background_patch(); IMAGE_LEN];
        let mut region_masks = BTreeMap::new();
        for j in 0..REGIONS {
            region_masks.insert(
                Self::region_name(j),
                (j * PATCHES_PER_REGION..(j + 1) * PATCHES_PER_REGION).collect(),
            );
        }
        let mut present = Vec::new();
        for (&k, &slot) in chosen.iter().zip(&slots) {
            for p in &mut image[slot * PATCHES_PER_REGION..(slot + 1) * PATCHES_PER_REGION] {
                *p = self.object_patch(k);
            }
            present.push(PresentObject {
                name: TOY_OBJECTS[k].into(),
                span: vec![self.object_word(k)],
                region: Self::region_name(slot),
            });
        }
        let absent = (0..TOY_OBJECTS.len())
            .filter(|k| !chosen.contains(k))
            .map(|k| AbsentObject {
                name: TOY_OBJECTS[k].into(),
                span: vec![self.object_word(k)],
            })
            .collect();
        AnnotationRecord {
            image_id,
            image,
            present,
            absent,
            region_masks,
        }
    }

    /// Word ids of the ideal caption: region contents in region order.
    pub fn reference_caption(&self, record: &AnnotationRecord) -> Vec<u32> {
        (0..REGIONS)
            .map(|j| {
                let r = Self::region_name(j);
                record
                    .present
                    .iter()
                    .find(|p| p.region == r)
                    .map_or(self.background_word(), |p| p.span[0])
            })
            .collect()
    }
}

fn weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_images_are_valid() {
        let w = ToyWorld::new();
        assert_eq!(w.lexicon.len(), TOY_VOCAB_SIZE);
        let recs = w.annotations(50, 3, "img");
        for r in &recs {
            r.validate().unwrap();
            assert_eq!(r.present.len(), 3);
            assert_eq!(r.absent.len(), 9);
            assert_eq!(r.image.len(), IMAGE_LEN);
            let caption = w.reference_caption(r);
            assert_eq!(caption.iter().filter(|&&t| t == w.background_word()).count(), 1);
        }
        assert_eq!(recs, w.annotations(50, 3, "img"));
    }

    #[test]
    fn validation_catches_overlap() {
        let w = ToyWorld::new();
        let mut r = w.annotations(1, 0, "x").remove(0);
        r.absent.push(AbsentObject {
            name: r.present[0].name.clone(),
            span: r.present[0].span.clone(),
        });
        assert!(r.validate().is_err());
    }
}
