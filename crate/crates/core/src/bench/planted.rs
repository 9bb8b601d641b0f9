// SPDX-License-Identifier: MIT OR Apache-2.0

//! A hand-wired model whose attention heads have known roles, plus the
//! datasets that exercise them.
//!
//! The residual stream is split into named feature coordinates. Image
//! patches carry their object's identity, question words carry the asked
//! object, and a chain of heads computes the answer:
//!
//! * copy heads, at the object word, attend to the patches of that object
//!   (or to text when it is absent) and write a presence flag;
//! * a mover head carries the flag from the object word to the final `?`;
//! * promoter heads push the answer away from what the flag says and
//!   suppressor heads push it toward it, with equal strength, on top of a
//!   constant bias toward `yes`;
//! * a caption head copies region contents into caption-word logits at
//!   output positions;
//! * letter heads bias multiple-choice answers toward `A`.
//!
//! The untouched model therefore answers `yes` to every question. Removing
//! the promoters and amplifying the suppressors and copy heads makes it
//! answer from the image.

use serde::{Deserialize, Serialize};

use super::annotations::{ToyWorld, CAPTION_START, IMAGE_LEN, PATCHES_PER_REGION, REGIONS, TOY_OBJECTS, TOY_VOCAB_SIZE};
use super::pope::{build_mcq_pope, build_pope, PopeOptions, PromptTemplates, Strategy};
use crate::dataset::{ObjectMention, Sample, TaskFormat};
use crate::error::{Error, Result};
use crate::model::{init_random, Model, ModelConfig, TokenSequence};
use crate::probes::HeadId;

pub const CAPTION_PROMPT: &str = "Please help me describe the image in detail.";

const NUM_OBJECTS: usize = TOY_OBJECTS.len();

// Residual coordinates.
const ANCHOR: usize = 0;
const TXT_OBJ: usize = 1;
const IMG_OBJ: usize = TXT_OBJ + NUM_OBJECTS;
const OBJPATCH: usize = IMG_OBJ + NUM_OBJECTS;
const IMG_BG: usize = OBJPATCH + 1;
const OBJTEXT: usize = IMG_BG + 1;
const TEXT: usize = OBJTEXT + 1;
const SUMMARY: usize = TEXT + 1;
const MCQ_SUMMARY: usize = SUMMARY + 1;
const CAPFLAG: usize = MCQ_SUMMARY + 1;
const FLAG: usize = CAPFLAG + 1;
const FLAG_S: usize = FLAG + 1;
const ANS: usize = FLAG_S + 1;
const ANSWER_SLOT: usize = ANS + 1;
const LETTER_SLOT: usize = ANSWER_SLOT + 1;
const LET_A: usize = LETTER_SLOT + 1;
const SLOT_Q: usize = LET_A + 1;
const SLOT_K: usize = SLOT_Q + REGIONS;
const CAPTION: usize = SLOT_K + REGIONS;
const CAPTION_BG: usize = CAPTION + NUM_OBJECTS;
const FEATURES: usize = CAPTION_BG + 1;

// Pre-softmax score margins.
const MATCH: f32 = 12.0;
const SINK: f32 = 6.0;
const CAPTION_SINK: f32 = 24.0;

// Unembedding gains.
const U_SLOT: f32 = 10.0;
const U_ANSWER: f32 = 4.0;
const U_CAPTION: f32 = 10.0;
const U_LETTER_A: f32 = 1.0;
const BACKGROUND_BIAS: f32 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub config: ModelConfig,
    pub copy_heads: Vec<HeadId>,
    pub promoters: Vec<HeadId>,
    pub suppressors: Vec<HeadId>,
    pub mover: HeadId,
    pub caption_head: HeadId,
    pub letter_heads: Vec<HeadId>,
    /// Constant push toward `yes` at the answer position.
    pub yes_bias: f64,
    pub promoter_gain: f64,
    pub suppressor_gain: f64,
    /// Scale applied to the random weights of every unplanted head and FFN.
    pub noise_scale: f64,
    pub probe_samples: usize,
    pub test_samples: usize,
    pub caption_samples: usize,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        let h = |l, n| HeadId::new(l, n);
        PlantedSpec {
            config: ModelConfig {
                num_layers: 8,
                num_heads: 8,
                model_dim: 128,
                vocab_size: TOY_VOCAB_SIZE,
                ffn_hidden: 128,
                max_seq_len: 64,
                final_norm: false,
                seed: 7,
            },
            copy_heads: vec![h(0, 2), h(1, 5), h(2, 3)],
            promoters: vec![h(4, 1), h(5, 6), h(6, 3)],
            suppressors: vec![h(4, 4), h(5, 2), h(7, 0)],
            mover: h(3, 6),
            caption_head: h(1, 1),
            letter_heads: vec![h(4, 7), h(6, 0), h(7, 5)],
            yes_bias: 1.0,
            promoter_gain: 1.0,
            suppressor_gain: 1.0,
            noise_scale: 0.1,
            probe_samples: 200,
            test_samples: 300,
            caption_samples: 100,
            seed: 11,
        }
    }
}

/// Which heads were planted with which role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub copy_heads: Vec<HeadId>,
    pub promoters: Vec<HeadId>,
    pub suppressors: Vec<HeadId>,
    pub mover: HeadId,
    pub caption_head: HeadId,
    pub letter_heads: Vec<HeadId>,
}

impl PlantedSpec {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            copy_heads: self.copy_heads.clone(),
            promoters: self.promoters.clone(),
            suppressors: self.suppressors.clone(),
            mover: self.mover,
            caption_head: self.caption_head,
            letter_heads: self.letter_heads.clone(),
        }
    }

    fn all_heads(&self) -> Vec<HeadId> {
        let mut v = self.copy_heads.clone();
        v.extend(&self.promoters);
        v.extend(&self.suppressors);
        v.push(self.mover);
        v.push(self.caption_head);
        v.extend(&self.letter_heads);
        v
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let heads = self.all_heads();
        if heads.len() > c.num_total_heads() {
            return Err(Error::Validation(format!(
                "{} planted heads do not fit in {} heads",
                heads.len(),
                c.num_total_heads()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for h in &heads {
            if h.layer >= c.num_layers || h.head >= c.num_heads {
                return Err(Error::Validation(format!(
                    "planted head {h} is outside the {}x{} model",
                    c.num_layers, c.num_heads
                )));
            }
            if !seen.insert(*h) {
                return Err(Error::Validation(format!("head {h} is planted twice")));
            }
        }
        if self.copy_heads.is_empty() {
            return Err(Error::Validation("at least one copy head is required".into()));
        }
        if self.copy_heads.iter().any(|h| h.layer >= self.mover.layer) {
            return Err(Error::Validation("copy heads must sit below the mover".into()));
        }
        if self.promoters.iter().chain(&self.suppressors).any(|h| h.layer <= self.mover.layer) {
            return Err(Error::Validation("promoters and suppressors must sit above the mover".into()));
        }
        if c.model_dim < FEATURES {
            return Err(Error::Validation(format!("model_dim must be at least {FEATURES}")));
        }
        if c.head_dim() < NUM_OBJECTS + 2 {
            return Err(Error::Validation(format!("head_dim must be at least {}", NUM_OBJECTS + 2)));
        }
        if c.vocab_size != TOY_VOCAB_SIZE {
            return Err(Error::Validation(format!("vocab_size must be {TOY_VOCAB_SIZE}")));
        }
        let world = ToyWorld::new();
        let needed = caption_start(&world) + REGIONS + 1;
        if c.max_seq_len < needed.max(48) {
            return Err(Error::Validation(format!("max_seq_len must be at least {}", needed.max(48))));
        }
        Ok(())
    }
}

/// Templates the planted model understands: MCQ prompts end in `Answer:`,
/// whose `:` is the multiple-choice answer position.
pub fn planted_templates() -> PromptTemplates {
    PromptTemplates {
        mcq_suffix: Some("Answer:".into()),
        ..PromptTemplates::default()
    }
}

fn caption_start(world: &ToyWorld) -> usize {
    IMAGE_LEN + world.lexicon.encode(CAPTION_PROMPT).expect("caption prompt").len()
}

struct Wiring<'a> {
    model: &'a mut Model,
    scale: f32,
}

impl Wiring<'_> {
    fn clear(&mut self, h: HeadId) {
        let w = self.model.head_mut(h.layer, h.head);
        for m in [&mut w.w_q, &mut w.w_k, &mut w.w_v, &mut w.w_o] {
            m.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    /// Query row `r` reads `feature` with a score gain (the 1/√d_k factor
    /// of attention is undone here).
    fn q(&mut self, h: HeadId, r: usize, feature: usize, gain: f32) {
        let s = self.scale;
        self.model.head_mut(h.layer, h.head).w_q.set(r, feature, gain * s);
    }
    fn k(&mut self, h: HeadId, r: usize, feature: usize, v: f32) {
        self.model.head_mut(h.layer, h.head).w_k.set(r, feature, v);
    }
    fn v(&mut self, h: HeadId, r: usize, feature: usize, v: f32) {
        self.model.head_mut(h.layer, h.head).w_v.set(r, feature, v);
    }
    fn o(&mut self, h: HeadId, r: usize, feature: usize, v: f32) {
        self.model.head_mut(h.layer, h.head).w_o.set(r, feature, v);
    }
}

/// Builds the planted model.
pub fn plant_model(spec: &PlantedSpec) -> Result<Model> {
    spec.validate()?;
    let world = ToyWorld::new();
    let lex = &world.lexicon;
    let mut model = init_random(spec.config.clone())?;
    let noise = spec.noise_scale as f32;
    for (_, data) in model.tensors_mut() {
        data.iter_mut().for_each(|x| *x *= noise);
    }
    for m in [&mut model.token_embedding, &mut model.positional_embedding, &mut model.unembed] {
        m.data.iter_mut().for_each(|x| *x = 0.0);
    }
    model.unembed_bias.iter_mut().for_each(|x| *x = 0.0);

    // Token features.
    let emb = &mut model.token_embedding;
    emb.set(world.background_patch() as usize, IMG_BG, 1.0);
    for k in 0..NUM_OBJECTS {
        let p = world.object_patch(k) as usize;
        emb.set(p, IMG_OBJ + k, 1.0);
        emb.set(p, OBJPATCH, 1.0);
        let w = world.object_word(k) as usize;
        emb.set(w, TXT_OBJ + k, 1.0);
        emb.set(w, OBJTEXT, 1.0);
        emb.set(w, CAPFLAG, 1.0);
    }
    for id in 0..lex.len() as u32 {
        let tok = lex.token(id).expect("id in range");
        let is_word = !tok.starts_with('<') || tok == CAPTION_START;
        if is_word && world.object_index(tok).is_none() {
            emb.set(id as usize, TEXT, 1.0);
        }
    }
    let bg_word = world.background_word() as usize;
    emb.set(bg_word, CAPFLAG, 1.0);
    emb.set(lex.id(CAPTION_START)? as usize, CAPFLAG, 1.0);
    let question = lex.id("?")? as usize;
    emb.set(question, SUMMARY, 1.0);
    emb.set(question, ANSWER_SLOT, 1.0);
    emb.set(question, ANS, spec.yes_bias as f32);
    let colon = lex.id(":")? as usize;
    emb.set(colon, MCQ_SUMMARY, 1.0);
    emb.set(colon, LETTER_SLOT, 1.0);

    // Position features: a constant anchor, region slots on image patches,
    // and caption slots on the positions that predict caption words.
    let cap = caption_start(&world);
    for t in 0..spec.config.max_seq_len {
        let pos = &mut model.positional_embedding;
        pos.set(t, ANCHOR, 1.0);
        if t < IMAGE_LEN {
            pos.set(t, SLOT_K + t / PATCHES_PER_REGION, 1.0);
        }
        if (cap..cap + REGIONS).contains(&t) {
            pos.set(t, SLOT_Q + t - cap, 1.0);
        }
    }

    let scale = (spec.config.head_dim() as f32).sqrt();
    let mut w = Wiring { model: &mut model, scale };
    for h in spec.all_heads() {
        w.clear(h);
    }
    let share = 1.0 / spec.copy_heads.len() as f32;
    for &h in &spec.copy_heads {
        for k in 0..NUM_OBJECTS {
            w.q(h, k, TXT_OBJ + k, MATCH);
            w.k(h, k, IMG_OBJ + k, 1.0);
        }
        w.q(h, NUM_OBJECTS, ANCHOR, SINK);
        w.k(h, NUM_OBJECTS, TEXT, 1.0);
        w.v(h, 0, OBJPATCH, 1.0);
        w.o(h, 0, FLAG, share);
    }
    let m = spec.mover;
    w.q(m, 0, SUMMARY, MATCH);
    w.k(m, 0, OBJTEXT, 1.0);
    w.v(m, 0, FLAG, 1.0);
    w.o(m, 0, FLAG_S, 1.0);
    for (heads, gain) in [
        (&spec.promoters, -spec.promoter_gain as f32),
        (&spec.suppressors, spec.suppressor_gain as f32),
    ] {
        for &h in heads {
            w.q(h, 0, SUMMARY, MATCH);
            w.k(h, 0, SUMMARY, 1.0);
            w.v(h, 0, FLAG_S, 1.0);
            w.v(h, 0, SUMMARY, -0.5);
            w.o(h, 0, ANS, gain);
        }
    }
    let c = spec.caption_head;
    for j in 0..REGIONS {
        w.q(c, j, SLOT_Q + j, MATCH);
        w.k(c, j, SLOT_K + j, 1.0);
    }
    w.q(c, REGIONS, ANCHOR, CAPTION_SINK);
    w.q(c, REGIONS, CAPFLAG, -CAPTION_SINK);
    w.k(c, REGIONS, TEXT, 1.0);
    for k in 0..NUM_OBJECTS {
        w.v(c, k, IMG_OBJ + k, 1.0);
        w.o(c, k, CAPTION + k, 1.0);
    }
    w.v(c, NUM_OBJECTS, IMG_BG, 1.0);
    w.o(c, NUM_OBJECTS, CAPTION_BG, 1.0);
    for &h in &spec.letter_heads {
        w.q(h, 0, MCQ_SUMMARY, MATCH);
        w.k(h, 0, MCQ_SUMMARY, 1.0);
        w.v(h, 0, MCQ_SUMMARY, 1.0);
        w.o(h, 0, LET_A, 1.0);
    }

    let un = &mut model.unembed;
    let yes = lex.id("yes")? as usize;
    let no = lex.id("no")? as usize;
    un.set(yes, ANSWER_SLOT, U_SLOT);
    un.set(yes, ANS, U_ANSWER);
    un.set(no, ANSWER_SLOT, U_SLOT);
    un.set(no, ANS, -U_ANSWER);
    for k in 0..NUM_OBJECTS {
        un.set(world.object_word(k) as usize, CAPTION + k, U_CAPTION);
    }
    un.set(bg_word, CAPTION_BG, U_CAPTION);
    model.unembed_bias[bg_word] = BACKGROUND_BIAS;
    for (i, letter) in ["A", "B", "C", "D"].iter().enumerate() {
        let id = lex.id(letter)? as usize;
        model.unembed.set(id, LETTER_SLOT, U_SLOT);
        if i == 0 {
            model.unembed.set(id, LET_A, U_LETTER_A);
        }
    }
    Ok(model)
}

/// `n` yes/no questions over fresh images named `{prefix}{i}`.
pub fn yes_no_split(world: &ToyWorld, n: usize, strategy: Strategy, seed: u64, prefix: &str) -> Result<Vec<Sample>> {
    let images = n.div_ceil(6);
    let records = world.annotations(images, seed, prefix);
    let mut out = build_pope(&records, &world.lexicon, &planted_templates(), &PopeOptions::new(strategy, seed))?;
    out.truncate(n);
    Ok(out)
}

/// `n` four-option questions over fresh images.
pub fn mcq_split(world: &ToyWorld, n: usize, seed: u64, prefix: &str) -> Result<Vec<Sample>> {
    let pope = yes_no_split(world, n.div_ceil(6) * 6, Strategy::Adversarial, seed, prefix)?;
    let mut out = build_mcq_pope(&pope, &world.lexicon, &planted_templates(), seed)?;
    out.truncate(n);
    Ok(out)
}

/// Caption prompts ending in the caption start token; `reference` holds the
/// four region words.
pub fn caption_split(world: &ToyWorld, n: usize, seed: u64, prefix: &str) -> Result<Vec<Sample>> {
    let prompt = world.lexicon.encode(CAPTION_PROMPT)?;
    let start = world.lexicon.id(CAPTION_START)?;
    Ok(world
        .annotations(n, seed, prefix)
        .into_iter()
        .map(|r| {
            let mut seq = TokenSequence::from_parts(&r.image, &prompt, &[start]);
            seq.region_masks = r.region_masks.clone();
            let mut s = Sample::new(format!("{}-c", r.image_id), TaskFormat::Caption, seq);
            s.image_id = Some(r.image_id.clone());
            s.question = Some(CAPTION_PROMPT.into());
            s.reference = world.reference_caption(&r);
            s.objects = r
                .present
                .iter()
                .map(|p| ObjectMention {
                    name: p.name.clone(),
                    span: p.span.clone(),
                    present: true,
                    region: Some(p.region.clone()),
                })
                .collect();
            s
        })
        .collect())
}

/// The datasets that go with a planted model. Every split draws its own
/// images, so no image is shared between splits.
#[derive(Debug, Clone)]
pub struct PlantedData {
    /// Yes/no questions with adversarially chosen absent objects, for
    /// identifying heads.
    pub probe: Vec<Sample>,
    /// Yes/no questions with randomly chosen absent objects, for evaluation.
    pub test: Vec<Sample>,
    pub captions: Vec<Sample>,
    pub mcq: Vec<Sample>,
}

pub fn planted_data(spec: &PlantedSpec) -> Result<PlantedData> {
    let world = ToyWorld::new();
    let s = spec.seed;
    Ok(PlantedData {
        probe: yes_no_split(&world, spec.probe_samples, Strategy::Adversarial, s, "probe-")?,
        test: yes_no_split(&world, spec.test_samples, Strategy::Random, s.wrapping_add(1), "test-")?,
        captions: caption_split(&world, spec.caption_samples, s.wrapping_add(2), "cap-")?,
        mcq: mcq_split(&world, spec.probe_samples, s.wrapping_add(3), "mcq-")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, CaptureSpec};
    use crate::probes::lpi_set;

    #[test]
    fn default_spec_is_valid() {
        PlantedSpec::default().validate().unwrap();
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut s = PlantedSpec::default();
        s.promoters.push(s.copy_heads[0]);
        assert!(s.validate().is_err());
        let mut s = PlantedSpec::default();
        s.suppressors[0] = HeadId::new(9, 0);
        assert!(s.validate().is_err());
        let mut s = PlantedSpec::default();
        s.config.num_layers = 2;
        s.config.num_heads = 4;
        s.config.model_dim = 128;
        assert!(s.validate().is_err());
    }

    #[test]
    fn copy_heads_focus_on_the_region() {
        let spec = PlantedSpec::default();
        let model = plant_model(&spec).unwrap();
        let world = ToyWorld::new();
        let data = yes_no_split(&world, 12, Strategy::Random, 5, "t-").unwrap();
        for s in data.iter().filter(|s| s.objects[0].present) {
            let obj = &s.objects[0];
            let t = s.sequence.tokens.iter().position(|&x| x == obj.span[0]).unwrap();
            let trace = forward(&model, &s.sequence, &CaptureSpec::all()).unwrap();
            let region = &s.sequence.region_masks[obj.region.as_ref().unwrap()];
            for h in &spec.copy_heads {
                let row = trace.attention(h.layer, h.head, t).unwrap();
                let m: f32 = region.iter().map(|&i| row[i]).sum();
                assert!(m >= 0.9, "head {h} puts {m} on the region");
            }
        }
    }

    #[test]
    fn promoters_raise_the_wrong_answer() {
        let spec = PlantedSpec::default();
        let model = plant_model(&spec).unwrap();
        let world = ToyWorld::new();
        let data = yes_no_split(&world, 12, Strategy::Random, 5, "t-").unwrap();
        for s in &data {
            let t = s.sequence.len() - 1;
            let wrong = s.options[1 - s.answer.unwrap()].tokens.clone();
            let trace = forward(&model, &s.sequence, &CaptureSpec::all()).unwrap();
            for h in &spec.promoters {
                assert!(lpi_set(&trace, &model, h.layer, h.head, t, &wrong).unwrap() > 0.0);
            }
        }
    }
}
