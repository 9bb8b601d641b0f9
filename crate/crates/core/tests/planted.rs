// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end checks on the planted-head harness, where the heads that
//! matter are known by construction.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use headscope::analysis::{attention_summary, table_correlation, AttentionSite};
use headscope::bench::{
    evaluate_captions, evaluate_short_answer, plant_model, planted_data, yes_no_split, ObjectVocab, PlantedData,
    PlantedSpec, Strategy, ToyWorld, TOY_OBJECTS,
};
use headscope::intervene::{lambda_map, select_heads, Intervention, PathEdge, PathMaskSpec};
use headscope::model::{forward, CaptureSpec, GenerateOptions, Segment};
use headscope::probes::{score_dataset, select_probe_tokens, HeadId, I2tVariant, ScoreTable};
use headscope::Model;

struct Fixture {
    spec: PlantedSpec,
    model: Model,
    data: PlantedData,
    t2t: ScoreTable,
    i2t: ScoreTable,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = PlantedSpec::default();
        let model = plant_model(&spec).unwrap();
        let data = planted_data(&spec).unwrap();
        let (t2t, i2t) = score_dataset(&model, &data.probe, I2tVariant::Difference).unwrap();
        Fixture { spec, model, data, t2t, i2t }
    })
}

fn set(v: &[HeadId]) -> BTreeSet<HeadId> {
    v.iter().copied().collect()
}

#[test]
fn scores_recover_planted_heads() {
    let f = fixture();
    assert_eq!(set(&f.i2t.top_k(3, true)), set(&f.spec.copy_heads));
    assert_eq!(set(&f.t2t.top_k(3, false)), set(&f.spec.promoters));
    assert!(set(&f.t2t.top_k(3, true)).is_superset(&set(&f.spec.suppressors)));
}

#[test]
fn scaling_selected_heads_fixes_answers() {
    let f = fixture();
    let world = ToyWorld::new();
    let greedy = GenerateOptions::greedy(1);
    let test = &f.data.test[..120];
    let base = evaluate_short_answer(&f.model, test, &world.lexicon, &Intervention::default(), &greedy).unwrap();
    let sel = select_heads(&f.t2t, &f.i2t, 3, 3).unwrap();
    let fixed = evaluate_short_answer(
        &f.model,
        test,
        &world.lexicon,
        &Intervention::scaling(lambda_map(&sel, 2.0, 0.0).unwrap()),
        &greedy,
    )
    .unwrap();
    assert!(base.metrics.accuracy <= 0.6, "{:?}", base.metrics);
    assert!(fixed.metrics.accuracy >= 0.95, "{:?}", fixed.metrics);
    let same = evaluate_short_answer(
        &f.model,
        test,
        &world.lexicon,
        &Intervention::scaling(lambda_map(&sel, 1.0, 1.0).unwrap()),
        &greedy,
    )
    .unwrap();
    assert_eq!(same.metrics, base.metrics);
    assert_eq!(same.responses, base.responses);
}

#[test]
fn output_to_image_mask_breaks_captions_only() {
    let f = fixture();
    let world = ToyWorld::new();
    let healthy = plant_model(&PlantedSpec { promoter_gain: 0.0, ..f.spec.clone() }).unwrap();
    let vocab = ObjectVocab::from_objects(TOY_OBJECTS);
    let four = GenerateOptions::greedy(4);
    let masked = Intervention::masking(PathMaskSpec::new([PathEdge::OutputToImage]));
    let caps = &f.data.captions[..40];
    let c0 = evaluate_captions(&healthy, caps, &world.lexicon, &Intervention::default(), &four, &vocab).unwrap();
    let c1 = evaluate_captions(&healthy, caps, &world.lexicon, &masked, &four, &vocab).unwrap();
    assert!(c0.slot_accuracy - c1.slot_accuracy >= 0.30);

    let greedy = GenerateOptions::greedy(1);
    let test = &f.data.test[..120];
    let y0 = evaluate_short_answer(&healthy, test, &world.lexicon, &Intervention::default(), &greedy).unwrap();
    let y1 = evaluate_short_answer(&healthy, test, &world.lexicon, &masked, &greedy).unwrap();
    assert!(y0.metrics.accuracy - y1.metrics.accuracy <= 0.05);
    let input = Intervention::masking(PathMaskSpec::new([PathEdge::InputToImage]));
    let y2 = evaluate_short_answer(&healthy, test, &world.lexicon, &input, &greedy).unwrap();
    assert!((y2.metrics.accuracy - 0.5).abs() <= 0.05, "{:?}", y2.metrics);
}

#[test]
fn same_format_tables_agree_more_than_cross_format() {
    let f = fixture();
    let world = ToyWorld::new();
    let other = yes_no_split(&world, 120, Strategy::Adversarial, 99, "other-").unwrap();
    let (t2t_b, _) = score_dataset(&f.model, &other, I2tVariant::Difference).unwrap();
    let (t2t_m, _) = score_dataset(&f.model, &f.data.mcq[..120], I2tVariant::Difference).unwrap();
    let same = table_correlation(&f.t2t, &t2t_b).unwrap();
    let cross = table_correlation(&f.t2t, &t2t_m).unwrap();
    assert!(same > cross, "same {same} cross {cross}");
}

#[test]
fn copy_heads_concentrate_on_the_image() {
    let f = fixture();
    let samples = &f.data.probe[..20];
    let traces: Vec<_> = samples
        .iter()
        .map(|s| forward(&f.model, &s.sequence, &CaptureSpec::all()).unwrap())
        .collect();
    let positions: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| select_probe_tokens(s).unwrap().plus.iter().map(|p| p.position).collect())
        .collect();
    let sites: Vec<AttentionSite> = traces
        .iter()
        .zip(samples)
        .zip(&positions)
        .filter(|(_, p)| !p.is_empty())
        .map(|((trace, s), p)| AttentionSite { trace, sequence: &s.sequence, positions: p })
        .collect();
    assert!(!sites.is_empty());
    let summary = attention_summary(&sites, &f.spec.copy_heads, Segment::Image).unwrap();
    assert!(summary.selected > summary.all, "{summary:?}");
}
