// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeSet;

use common::*;
use headscope::analysis::{average_ranks, rank_correlation, rank_scores, top_overlap, Direction};
use headscope::bench::{
    build_mcq_pope, build_pope, chair, mcq_option_holds, ObjectVocab, PopeOptions, PromptTemplates, Strategy,
    ToyWorld,
};
use headscope::dataset::to_jsonl;
use headscope::exec::with_jobs;
use headscope::intervene::{
    forward_intervened, lambda_map, mask_path, select_heads, LambdaMap, PathEdge, PathMaskSpec,
};
use headscope::model::{forward, init_random, CaptureSpec, Segment, TokenSequence};
use headscope::probes::{
    i2t_scores, lpi_set, score_dataset, HeadId, I2tVariant, ScoreAccumulator, ScoreKind, ScoreTable,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(seed: u64) -> headscope::Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = random_config(&mut rng, 3, 3, 24);
    cfg.vocab_size = cfg.vocab_size.max(16);
    let mut model = init_random(cfg).unwrap();
    sharpen(&mut model, 5.0);
    model
}

fn table(values: &[Option<f64>], l: usize, n: usize) -> ScoreTable {
    ScoreTable::from_values(ScoreKind::T2t, l, n, values.to_vec()).unwrap()
}

fn segmented(model: &headscope::Model, seed: u64) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let toks = random_tokens(&mut rng, model.config.vocab_size, 12);
    TokenSequence::from_parts(&toks[..4], &toks[4..8], &toks[8..])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn silenced_head_has_zero_lpi(seed in 0u64..1000, pick in 0usize..100) {
        let mut model = small_model(seed);
        let (l, n) = (pick % model.config.num_layers, pick % model.config.num_heads);
        model.head_mut(l, n).w_o.data.iter_mut().for_each(|v| *v = 0.0);
        let seq = segmented(&model, seed);
        let trace = forward(&model, &seq, &CaptureSpec::all()).unwrap();
        for t in 0..seq.len() {
            let v = lpi_set(&trace, &model, l, n, t, &[1, 3]).unwrap();
            prop_assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn i2t_components_are_probability_masses(seed in 0u64..1000) {
        let model = oracle_model(seed);
        let data = random_dataset(seed, 24, 6);
        let t = i2t_scores(&model, &data, I2tVariant::Difference).unwrap();
        for i in 0..t.values.len() {
            for c in [t.s_plus[i], t.s_minus[i]].into_iter().flatten() {
                prop_assert!((-1e-9..=1.0 + 1e-9).contains(&c));
            }
            let v = t.values[i].unwrap();
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
        }
    }

    #[test]
    fn wider_regions_never_lower_present_mass(seed in 0u64..1000) {
        let model = oracle_model(seed);
        let data = random_dataset(seed, 24, 6);
        let mut wide = data.clone();
        for s in &mut wide {
            for mask in s.sequence.region_masks.values_mut() {
                *mask = (0..6).collect();
            }
        }
        let a = i2t_scores(&model, &data, I2tVariant::PositiveOnly).unwrap();
        let b = i2t_scores(&model, &wide, I2tVariant::PositiveOnly).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!(y.unwrap() >= x.unwrap() - 1e-12);
        }
    }

    #[test]
    fn identity_lambda_is_a_no_op(seed in 0u64..1000) {
        let model = small_model(seed);
        let seq = segmented(&model, seed + 1);
        let cfg = &model.config;
        let plain = forward(&model, &seq, &CaptureSpec::all()).unwrap();
        let id = LambdaMap::identity(cfg.num_layers, cfg.num_heads);
        let scaled = forward_intervened(&model, &seq, &id, &CaptureSpec::all()).unwrap();
        for t in 0..seq.len() {
            prop_assert_eq!(plain.logits(t).unwrap(), scaled.logits(t).unwrap());
        }
    }

    #[test]
    fn head_outputs_scale_linearly_in_first_layer(seed in 0u64..1000, c in 0.0f32..4.0) {
        let model = small_model(seed);
        let seq = segmented(&model, seed + 2);
        let cfg = &model.config;
        let mut lambda = LambdaMap::identity(cfg.num_layers, cfg.num_heads);
        lambda.lambda.iter_mut().for_each(|v| *v = c);
        let plain = forward(&model, &seq, &CaptureSpec::all()).unwrap();
        let scaled = forward_intervened(&model, &seq, &lambda, &CaptureSpec::all()).unwrap();
        for n in 0..cfg.num_heads {
            for t in 0..seq.len() {
                let a = plain.head_output(0, n, t).unwrap();
                let b = scaled.head_output(0, n, t).unwrap();
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((x * c - y).abs() <= 1e-5 * (1.0 + x.abs()));
                }
            }
        }
    }

    #[test]
    fn masked_edges_carry_no_attention_and_stay_local(seed in 0u64..1000, which in 0usize..3) {
        let model = small_model(seed);
        let seq = segmented(&model, seed + 3);
        let edge = [PathEdge::OutputToImage, PathEdge::InputToImage, PathEdge::OutputToInput][which];
        let (query, key) = edge.segments();
        let plain = forward(&model, &seq, &CaptureSpec::all()).unwrap();
        let masked = mask_path(&model, &seq, &PathMaskSpec::new([edge]), &CaptureSpec::all()).unwrap();
        let first = seq.segments.iter().position(|s| *s == query).unwrap();
        for l in 0..model.config.num_layers {
            for n in 0..model.config.num_heads {
                for t in 0..seq.len() {
                    let row = masked.attention(l, n, t).unwrap();
                    if seq.segments[t] == query {
                        for (i, a) in row.iter().enumerate() {
                            if seq.segments[i] == key {
                                prop_assert_eq!(*a, 0.0);
                            }
                        }
                    }
                    if t < first {
                        prop_assert_eq!(row, plain.attention(l, n, t).unwrap());
                    }
                }
            }
        }
        for t in 0..first {
            prop_assert_eq!(masked.logits(t).unwrap(), plain.logits(t).unwrap());
        }
    }

    #[test]
    fn average_ranks_sum_and_order(values in prop::collection::vec(-5i32..5, 2..40)) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        let r = average_ranks(&v, Direction::Descending);
        let n = v.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] > v[j] {
                    prop_assert!(r[i] < r[j]);
                }
                if v[i] == v[j] {
                    prop_assert_eq!(r[i], r[j]);
                }
            }
        }
        let up = average_ranks(&v, Direction::Ascending);
        for (a, b) in r.iter().zip(&up) {
            prop_assert!((a + b - (n + 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_correlation_matches_brute_force(
        pairs in prop::collection::vec((-3i32..4, -3i32..4), 3..30)
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        prop_assume!(a.iter().any(|&x| x != a[0]) && b.iter().any(|&x| x != b[0]));
        let ta = table(&a.iter().map(|&x| Some(x)).collect::<Vec<_>>(), 1, a.len());
        let tb = table(&b.iter().map(|&x| Some(x)).collect::<Vec<_>>(), 1, b.len());
        let rho = rank_correlation(
            &rank_scores(&ta, Direction::Descending).unwrap(),
            &rank_scores(&tb, Direction::Descending).unwrap(),
        )
        .unwrap();
        prop_assert!((rho - brute_rank_pearson(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn selection_invariants(
        t in prop::collection::vec(-3i32..3, 12),
        i in prop::collection::vec(-3i32..3, 12),
        xi in 0usize..6,
        zeta in 0usize..6,
    ) {
        let tt = table(&t.iter().map(|&x| Some(x as f64)).collect::<Vec<_>>(), 3, 4);
        let it = table(&i.iter().map(|&x| Some(x as f64)).collect::<Vec<_>>(), 3, 4);
        let sel = select_heads(&tt, &it, xi, zeta).unwrap();
        let minus: BTreeSet<HeadId> = sel.z_minus.iter().copied().collect();
        let plus: BTreeSet<HeadId> = sel.z_plus.iter().copied().collect();
        prop_assert_eq!(minus.len(), xi);
        prop_assert!(minus.is_disjoint(&plus));
        prop_assert!(plus.len() <= xi + zeta);
        // every Z- head scores no higher than any unselected head
        let worst_in = minus.iter().map(|h| tt.get(*h).unwrap()).fold(f64::NEG_INFINITY, f64::max);
        for k in 0..12 {
            let h = tt.head_at(k);
            if !minus.contains(&h) {
                prop_assert!(tt.get(h).unwrap() >= worst_in);
            }
        }
        prop_assert_eq!(&sel, &select_heads(&tt, &it, xi, zeta).unwrap());
        let lm = lambda_map(&sel, 2.0, 0.0).unwrap();
        for k in 0..12 {
            let h = tt.head_at(k);
            let want = if minus.contains(&h) { 0.0 } else if plus.contains(&h) { 2.0 } else { 1.0 };
            prop_assert_eq!(lm.get(h), want);
        }
    }

    #[test]
    fn top_overlap_matches_brute_force(
        a in prop::collection::vec(-4i32..4, 10),
        b in prop::collection::vec(-4i32..4, 10),
        k in 0usize..=10,
    ) {
        let ta = table(&a.iter().map(|&x| Some(x as f64)).collect::<Vec<_>>(), 2, 5);
        let tb = table(&b.iter().map(|&x| Some(x as f64)).collect::<Vec<_>>(), 2, 5);
        // brute force: sort indices by (-score, index)
        let top = |v: &[i32]| -> BTreeSet<usize> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by_key(|&i| (-v[i], i));
            idx.into_iter().take(k).collect()
        };
        let want = top(&a).intersection(&top(&b)).count();
        prop_assert_eq!(top_overlap(&ta, &tb, k).unwrap(), want);
    }

    #[test]
    fn chair_rates_are_bounded_and_monotone(
        caps in prop::collection::vec(prop::collection::vec(0usize..6, 0..5), 1..8)
    ) {
        let names = ["cat", "dog", "car", "cup", "tree", "lamp"];
        let vocab = ObjectVocab::from_objects(names);
        let gt: Vec<BTreeSet<String>> = caps.iter().map(|_| ["cat", "dog"].iter().map(|s| s.to_string()).collect()).collect();
        let words: Vec<Vec<&str>> = caps.iter().map(|c| c.iter().map(|&i| names[i]).collect()).collect();
        let base = chair(&words, &gt, &vocab).unwrap();
        prop_assert!((0.0..=1.0).contains(&base.c_s) && (0.0..=1.0).contains(&base.c_i));
        // one more hallucinated object in the first caption
        let mut more = words.clone();
        if let Some(extra) = ["lamp", "tree", "cup", "car"].iter().find(|w| !more[0].contains(w)) {
            more[0].push(extra);
            let worse = chair(&more, &gt, &vocab).unwrap();
            prop_assert!(worse.c_s >= base.c_s);
            prop_assert!(worse.c_i >= base.c_i);
        }
    }

    #[test]
    fn merge_is_order_independent(parts in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..6)) {
        let accs: Vec<ScoreAccumulator> = parts
            .iter()
            .map(|p| {
                let mut a = ScoreAccumulator::new(2, 2);
                for (i, &v) in p.iter().enumerate() {
                    if v > 0.0 { a.add_plus(i, v) } else { a.add_minus(i, v) }
                }
                a
            })
            .collect();
        let mut fwd = ScoreAccumulator::new(2, 2);
        accs.iter().for_each(|a| fwd.merge(a));
        let mut back = ScoreAccumulator::new(2, 2);
        accs.iter().rev().for_each(|a| back.merge(a));
        prop_assert_eq!(&fwd.plus_count, &back.plus_count);
        prop_assert_eq!(&fwd.minus_count, &back.minus_count);
        for (x, y) in fwd.plus_sum.iter().zip(&back.plus_sum).chain(fwd.minus_sum.iter().zip(&back.minus_sum)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_lambda_leaves_embedding_plus_ffn() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cfg = random_config(&mut rng, 1, 3, 24);
    cfg.num_layers = 1;
    let mut model = init_random(cfg.clone()).unwrap();
    sharpen(&mut model, 4.0);
    let tokens = random_tokens(&mut rng, cfg.vocab_size, 9);
    let seq = TokenSequence::from_parts(&[], &tokens, &[]);
    let mut lambda = LambdaMap::identity(1, cfg.num_heads);
    lambda.lambda.iter_mut().for_each(|v| *v = 0.0);
    let trace = forward_intervened(&model, &seq, &lambda, &CaptureSpec::all()).unwrap();
    // a zero-head layer is the FFN alone: run the monolithic oracle on a
    // copy whose value projections are zero
    let mut silent = model.clone();
    for h in &mut silent.layers[0].heads {
        h.w_v.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let want = monolithic_layer(&silent, 0, &embed(&model, &tokens));
    for (t, w) in want.iter().enumerate() {
        let got: Vec<f64> = trace.final_hidden(t).unwrap().iter().map(|&v| v as f64).collect();
        assert!(rel_err(&got, w) < 1e-5);
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let model = oracle_model(21);
    let data = random_dataset(22, 24, 15);
    let one = with_jobs(1, || score_dataset(&model, &data, I2tVariant::Difference).unwrap());
    let four = with_jobs(4, || score_dataset(&model, &data, I2tVariant::Difference).unwrap());
    assert_eq!(one, four);
}

#[test]
fn split_scoring_recombines_to_whole() {
    let model = oracle_model(31);
    let data = random_dataset(32, 24, 12);
    let (whole, _) = score_dataset(&model, &data, I2tVariant::Difference).unwrap();
    let (a, _) = score_dataset(&model, &data[..5], I2tVariant::Difference).unwrap();
    let (b, _) = score_dataset(&model, &data[5..], I2tVariant::Difference).unwrap();
    let pooled = |x: Option<f64>, cx: u64, y: Option<f64>, cy: u64| {
        (x.unwrap_or(0.0) * cx as f64 + y.unwrap_or(0.0) * cy as f64) / (cx + cy) as f64
    };
    for i in 0..whole.values.len() {
        let p = pooled(a.s_plus[i], a.count_plus[i], b.s_plus[i], b.count_plus[i]);
        let m = pooled(a.s_minus[i], a.count_minus[i], b.s_minus[i], b.count_minus[i]);
        assert!((whole.values[i].unwrap() - (p - m)).abs() < 1e-9);
    }
}

#[test]
fn pope_is_balanced_and_reproducible() {
    let world = ToyWorld::new();
    let records = world.annotations(40, 5, "img-");
    let templates = PromptTemplates::default();
    for strategy in [Strategy::Random, Strategy::Popular, Strategy::Adversarial] {
        let opts = PopeOptions::new(strategy, 17);
        let a = build_pope(&records, &world.lexicon, &templates, &opts).unwrap();
        let b = build_pope(&records, &world.lexicon, &templates, &opts).unwrap();
        assert_eq!(to_jsonl(&a), to_jsonl(&b));
        assert_eq!(a.len(), 240);
        assert_eq!(a.iter().filter(|s| s.answer == Some(0)).count(), 120);
        let mcq = build_mcq_pope(&a, &world.lexicon, &templates, 17).unwrap();
        assert_eq!(mcq.len(), a.len());
        assert_eq!(to_jsonl(&mcq), to_jsonl(&build_mcq_pope(&a, &world.lexicon, &templates, 17).unwrap()));
        for s in &mcq {
            let truths: Vec<usize> = (0..4).filter(|&i| mcq_option_holds(s, i)).collect();
            assert_eq!(truths, vec![s.answer.unwrap()], "{}", s.id);
        }
    }
}

#[test]
fn segment_masks_reach_every_listed_edge() {
    let spec = PathMaskSpec::new([PathEdge::OutputToImage, PathEdge::InputToImage]);
    let blocked = spec.blocked();
    assert!(blocked.contains(&(Segment::OutputText, Segment::Image)));
    assert!(blocked.contains(&(Segment::InputText, Segment::Image)));
    assert_eq!(blocked.len(), 2);
}
