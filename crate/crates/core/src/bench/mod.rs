// SPDX-License-Identifier: MIT OR Apache-2.0

//! Benchmark construction, evaluation metrics, and the planted-head model.

mod annotations;
mod lexicon;
mod metrics;
mod planted;
mod runner;
mod pope;

pub use annotations::{
    AbsentObject, AnnotationRecord, PresentObject, ToyWorld, BACKGROUND_WORD, CAPTION_START, IMAGE_LEN,
    OBJECTS_PER_IMAGE, PATCHES_PER_REGION, REGIONS, TOY_OBJECTS, TOY_VOCAB_SIZE,
};
pub use lexicon::{split_words, Lexicon};
pub use metrics::{
    chair, eval_discriminative, parse_letter, parse_yes_no, slot_accuracy, ChairResult, DiscriminativeMetrics,
    ObjectVocab,
};
pub use pope::{
    build_mcq_pope, build_pope, mcq_option_holds, ObjectStats, PopeOptions, PromptTemplates, Strategy,
    MCQ_LETTERS, MCQ_TEMPLATE, POPE_TEMPLATE,
};
pub use planted::{
    caption_split, mcq_split, plant_model, planted_data, planted_templates, yes_no_split, GroundTruth, PlantedData,
    PlantedSpec, CAPTION_PROMPT,
};
pub use runner::{
    evaluate_captions, evaluate_short_answer, generate_responses, generation_input, CaptionReport, ShortAnswerReport,
};
