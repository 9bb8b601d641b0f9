// SPDX-License-Identifier: MIT OR Apache-2.0

//! Naive reference implementations and random fixtures shared by the
//! integration tests. Everything here works in f64 straight from the weight
//! matrices, without the library's forward pass.

#![allow(dead_code)]

use std::collections::BTreeMap;

use headscope::dataset::{AnswerOption, ObjectMention, Sample, TaskFormat};
use headscope::model::{Annotation, Model, ModelConfig, Polarity, Segment, TokenSequence};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn row(m: &headscope::model::Matrix, r: usize) -> Vec<f64> {
    m.row(r).iter().map(|&v| v as f64).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// One full layer with all heads' projections stacked into single
/// `(N·d_k) × d` matrices and the output projection concatenated.
pub fn monolithic_layer(model: &Model, l: usize, h: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cfg = &model.config;
    let (nh, dk, d) = (cfg.num_heads, cfg.head_dim(), cfg.model_dim);
    let layer = &model.layers[l];
    let stack = |pick: fn(&headscope::model::HeadWeights) -> &headscope::model::Matrix| -> Vec<Vec<f64>> {
        layer
            .heads
            .iter()
            .flat_map(|hw| (0..dk).map(move |r| row(pick(hw), r)))
            .collect()
    };
    let wq = stack(|hw| &hw.w_q);
    let wk = stack(|hw| &hw.w_k);
    let wv = stack(|hw| &hw.w_v);
    // O_cat is d × (N·d_k): column n·d_k + j is row j of head n's W_o.
    let o_cat: Vec<Vec<f64>> = (0..d)
        .map(|c| {
            layer
                .heads
                .iter()
                .flat_map(|hw| (0..dk).map(move |j| hw.w_o.get(j, c) as f64))
                .collect()
        })
        .collect();
    let proj = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> { w.iter().map(|r| dot(r, x)).collect() };
    let q: Vec<Vec<f64>> = h.iter().map(|x| proj(&wq, x)).collect();
    let k: Vec<Vec<f64>> = h.iter().map(|x| proj(&wk, x)).collect();
    let v: Vec<Vec<f64>> = h.iter().map(|x| proj(&wv, x)).collect();
    let mut out = Vec::with_capacity(h.len());
    for t in 0..h.len() {
        let mut z = vec![0.0; nh * dk];
        for n in 0..nh {
            let s = n * dk..(n + 1) * dk;
            let scores: Vec<f64> = (0..=t)
                .map(|i| dot(&q[t][s.clone()], &k[i][s.clone()]) / (dk as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for (i, ai) in a.iter().enumerate() {
                for j in s.clone() {
                    z[j] += ai * v[i][j];
                }
            }
        }
        let mid: Vec<f64> = (0..d).map(|c| h[t][c] + dot(&o_cat[c], &z)).collect();
        let f = &layer.ffn;
        let hidden: Vec<f64> = (0..f.w_in.rows)
            .map(|r| gelu(dot(&row(&f.w_in, r), &mid) + f.b_in[r] as f64))
            .collect();
        out.push(
            (0..d)
                .map(|c| mid[c] + dot(&row(&f.w_out, c), &hidden) + f.b_out[c] as f64)
                .collect(),
        );
    }
    out
}

pub fn embed(model: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            (0..model.config.model_dim)
                .map(|c| model.token_embedding.get(tok as usize, c) as f64 + model.positional_embedding.get(t, c) as f64)
                .collect()
        })
        .collect()
}

/// Per-head quantities of a plain forward pass.
pub struct NaiveRun {
    /// `residuals[l][t]` is the input of layer `l`; index `L` is the output.
    pub residuals: Vec<Vec<Vec<f64>>>,
    /// `heads[l][n][t]`.
    pub heads: Vec<Vec<Vec<Vec<f64>>>>,
    /// `attention[l][n][t]`, length `t + 1`.
    pub attention: Vec<Vec<Vec<Vec<f64>>>>,
}

pub fn naive_forward(model: &Model, tokens: &[u32]) -> NaiveRun {
    let cfg = &model.config;
    let (nh, dk, d) = (cfg.num_heads, cfg.head_dim(), cfg.model_dim);
    let mut h = embed(model, tokens);
    let len = tokens.len();
    let mut run = NaiveRun {
        residuals: vec![h.clone()],
        heads: vec![],
        attention: vec![],
    };
    for layer in &model.layers {
        let mut heads = vec![];
        let mut atts = vec![];
        for hw in &layer.heads {
            let mat = |m: &headscope::model::Matrix, x: &[f64]| -> Vec<f64> {
                (0..dk).map(|r| dot(&row(m, r), x)).collect()
            };
            let q: Vec<Vec<f64>> = h.iter().map(|x| mat(&hw.w_q, x)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|x| mat(&hw.w_k, x)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|x| mat(&hw.w_v, x)).collect();
            let mut outs: Vec<Vec<f64>> = vec![];
            let mut rows = vec![];
            for (t, qt) in q.iter().enumerate().take(len) {
                let a = softmax(&(0..=t).map(|i| dot(qt, &k[i]) / (dk as f64).sqrt()).collect::<Vec<_>>());
                let z: Vec<f64> = (0..dk).map(|j| (0..=t).map(|i| a[i] * v[i][j]).sum()).collect();
                outs.push((0..d).map(|c| (0..dk).map(|j| z[j] * hw.w_o.get(j, c) as f64).sum()).collect());
                rows.push(a);
            }
            heads.push(outs);
            atts.push(rows);
        }
        let mut next = vec![];
        for t in 0..len {
            let mid: Vec<f64> = (0..d).map(|c| h[t][c] + (0..nh).map(|n| heads[n][t][c]).sum::<f64>()).collect();
            let f = &layer.ffn;
            let hidden: Vec<f64> = (0..f.w_in.rows)
                .map(|r| gelu(dot(&row(&f.w_in, r), &mid) + f.b_in[r] as f64))
                .collect();
            next.push(
                (0..d)
                    .map(|c| mid[c] + dot(&row(&f.w_out, c), &hidden) + f.b_out[c] as f64)
                    .collect::<Vec<f64>>(),
            );
        }
        h = next;
        run.heads.push(heads);
        run.attention.push(atts);
        run.residuals.push(h.clone());
    }
    run
}

/// Full next-token distribution of a hidden vector.
pub fn distribution(model: &Model, hidden: &[f64]) -> Vec<f64> {
    let x: Vec<f64> = if model.config.final_norm {
        let ms = hidden.iter().map(|v| v * v).sum::<f64>() / hidden.len() as f64;
        let inv = 1.0 / (ms + 1e-5).sqrt();
        hidden.iter().zip(&model.final_norm).map(|(v, &g)| v * inv * g as f64).collect()
    } else {
        hidden.to_vec()
    };
    let logits: Vec<f64> = (0..model.config.vocab_size)
        .map(|v| model.unembed_bias[v] as f64 + dot(&row(&model.unembed, v), &x))
        .collect();
    softmax(&logits)
}

/// `log Σ_B P(b | h + H) − log Σ_B P(b | h)` from materialized
/// distributions; repeated ids in `set` count once.
pub fn naive_lpi(model: &Model, h: &[f64], head_out: &[f64], set: &[u32]) -> f64 {
    let mut ids = set.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let with: Vec<f64> = h.iter().zip(head_out).map(|(a, b)| a + b).collect();
    let p0 = distribution(model, h);
    let p1 = distribution(model, &with);
    let s0: f64 = ids.iter().map(|&b| p0[b as usize]).sum();
    let s1: f64 = ids.iter().map(|&b| p1[b as usize]).sum();
    s1.ln() - s0.ln()
}

/// Text-to-text and image-to-text (difference variant) scores per head,
/// recomputed from their definitions.
pub fn naive_scores(model: &Model, dataset: &[Sample]) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let cfg = &model.config;
    let heads = cfg.num_layers * cfg.num_heads;
    let mut t_sum = vec![(0.0, 0usize, 0.0, 0usize); heads];
    let mut i_sum = vec![(0.0, 0usize, 0.0, 0usize); heads];
    for s in dataset {
        let seq = &s.sequence;
        let run = naive_forward(model, &seq.tokens);
        let out_start = seq.segments.iter().position(|g| *g == Segment::OutputText).unwrap_or(seq.len());
        // (position, plus, minus)
        let mut steps: Vec<(usize, Vec<u32>, Vec<u32>)> = vec![];
        if s.format.is_short_answer() {
            let firsts: Vec<u32> = s.options.iter().map(|o| o.tokens[0]).collect();
            let a = s.answer.unwrap();
            let minus = firsts.iter().enumerate().filter(|(i, _)| *i != a).map(|(_, &f)| f).collect();
            steps.push((out_start - 1, vec![firsts[a]], minus));
        } else {
            for an in &seq.annotations {
                let tok = seq.tokens[an.position];
                match an.polarity {
                    Polarity::Present => steps.push((an.position - 1, vec![tok], vec![])),
                    Polarity::Absent => steps.push((an.position - 1, vec![], vec![tok])),
                }
            }
        }
        for (t, plus, minus) in &steps {
            for l in 0..cfg.num_layers {
                for n in 0..cfg.num_heads {
                    let e = &mut t_sum[l * cfg.num_heads + n];
                    let h = &run.residuals[l][*t];
                    let o = &run.heads[l][n][*t];
                    if !plus.is_empty() {
                        e.0 += naive_lpi(model, h, o, plus);
                        e.1 += 1;
                    }
                    if !minus.is_empty() {
                        e.2 += naive_lpi(model, h, o, minus);
                        e.3 += 1;
                    }
                }
            }
        }
        let image: Vec<usize> = (0..seq.len()).filter(|&i| seq.segments[i] == Segment::Image).collect();
        let text_start = seq.segments.iter().position(|g| *g != Segment::Image).unwrap_or(seq.len());
        for obj in &s.objects {
            let Some(p) = (text_start..seq.len()).find(|&p| seq.tokens[p..].starts_with(&obj.span)) else {
                continue;
            };
            for l in 0..cfg.num_layers {
                for n in 0..cfg.num_heads {
                    let row = &run.attention[l][n][p];
                    let e = &mut i_sum[l * cfg.num_heads + n];
                    if obj.present {
                        let region = &seq.region_masks[obj.region.as_ref().unwrap()];
                        e.0 += region.iter().filter(|&&i| i <= p).map(|&i| row[i]).sum::<f64>();
                        e.1 += 1;
                    } else {
                        e.2 += image.iter().filter(|&&i| i <= p).map(|&i| row[i]).sum::<f64>();
                        e.3 += 1;
                    }
                }
            }
        }
    }
    let mean = |s: f64, c: usize| (c > 0).then(|| s / c as f64);
    let t2t = t_sum
        .iter()
        .map(|&(a, b, c, d)| Some(mean(a, b)? - mean(c, d)?))
        .collect();
    let i2t = i_sum
        .iter()
        .map(|&(a, b, c, d)| {
            if b == 0 && d == 0 {
                None
            } else {
                Some(mean(a, b).unwrap_or(0.0) - mean(c, d).unwrap_or(0.0))
            }
        })
        .collect();
    (t2t, i2t)
}

pub fn random_config(rng: &mut ChaCha8Rng, max_layers: usize, max_heads: usize, max_dim: usize) -> ModelConfig {
    let num_heads = rng.gen_range(1..=max_heads);
    let per_head = rng.gen_range(1..=(max_dim / num_heads).max(1));
    ModelConfig {
        num_layers: rng.gen_range(1..=max_layers),
        num_heads,
        model_dim: num_heads * per_head,
        vocab_size: rng.gen_range(8..=40),
        ffn_hidden: rng.gen_range(1..=32),
        max_seq_len: 32,
        final_norm: rng.gen_bool(0.5),
        seed: rng.gen(),
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Mixed short-answer and open-ended samples over a 16-token layout:
/// 6 image tokens, 5 prompt tokens, 5 response tokens. Image tokens use ids
/// below 4 and text tokens ids 4 and up, so object spans never match the
/// image. Requires `vocab >= 16`.
pub fn random_dataset(seed: u64, vocab: usize, n: usize) -> Vec<Sample> {
    assert!(vocab >= 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = |rng: &mut ChaCha8Rng| rng.gen_range(4..vocab as u32);
    (0..n)
        .map(|i| {
            let image: Vec<u32> = (0..6).map(|_| rng.gen_range(0..4)).collect();
            let input: Vec<u32> = (0..5).map(|_| text(&mut rng)).collect();
            let output: Vec<u32> = (0..5).map(|_| text(&mut rng)).collect();
            let mut regions = BTreeMap::new();
            regions.insert("left".to_string(), vec![0, 1, 2]);
            regions.insert("right".to_string(), vec![3, 4, 5]);
            let mut objects = vec![
                ObjectMention {
                    name: "p".into(),
                    span: vec![input[1]],
                    present: true,
                    region: Some(if rng.gen_bool(0.5) { "left" } else { "right" }.into()),
                },
                ObjectMention {
                    name: "q".into(),
                    span: vec![input[3]],
                    present: false,
                    region: None,
                },
            ];
            objects.shuffle(&mut rng);
            let (format, seq, options, answer) = match i % 3 {
                0 | 1 => {
                    let mut ids: Vec<u32> = (4..vocab as u32).collect();
                    ids.shuffle(&mut rng);
                    let k = if i % 3 == 0 { 2 } else { 4 };
                    let options = (0..k)
                        .map(|j| AnswerOption {
                            label: format!("o{j}"),
                            tokens: vec![ids[j], ids[k + j]],
                        })
                        .collect();
                    let format = if k == 2 { TaskFormat::YesNo } else { TaskFormat::Mcq };
                    let mut seq = TokenSequence::from_parts(&image, &input, &[]);
                    seq.region_masks = regions;
                    (format, seq, options, Some(rng.gen_range(0..k)))
                }
                _ => {
                    let mut seq = TokenSequence::from_parts(&image, &input, &output);
                    seq.region_masks = regions;
                    seq.annotations = vec![
                        Annotation {
                            position: 12,
                            polarity: Polarity::Present,
                            region: None,
                        },
                        Annotation {
                            position: 14,
                            polarity: Polarity::Absent,
                            region: None,
                        },
                        Annotation {
                            position: 15,
                            polarity: if rng.gen_bool(0.5) { Polarity::Present } else { Polarity::Absent },
                            region: None,
                        },
                    ];
                    (TaskFormat::Caption, seq, vec![], None)
                }
            };
            let mut s = Sample::new(format!("s{i}"), format, seq);
            s.options = options;
            s.answer = answer;
            s.objects = objects;
            s
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Pearson correlation of average ranks (rank 1 = largest), computed the
/// slow way.
pub fn brute_rank_pearson(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let greater = v.iter().filter(|&&y| y > x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                greater + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

/// Largest relative error over layers and positions between the library's
/// `h + Σ_n H + F` and the monolithic layer applied to the captured `h`.
pub fn decomposition_error(model: &Model, tokens: &[u32]) -> f64 {
    use headscope::model::{forward, CaptureSpec};
    let seq = TokenSequence::from_parts(&[], tokens, &[]);
    let trace = forward(model, &seq, &CaptureSpec::all()).unwrap();
    let cfg = &model.config;
    let mut worst = 0.0f64;
    for l in 0..cfg.num_layers {
        let h: Vec<Vec<f64>> = (0..tokens.len())
            .map(|t| trace.residual(l, t).unwrap().iter().map(|&v| v as f64).collect())
            .collect();
        let mono = monolithic_layer(model, l, &h);
        for t in 0..tokens.len() {
            let f = trace.ffn_output(l, t).unwrap();
            let sum: Vec<f64> = (0..cfg.model_dim)
                .map(|c| {
                    h[t][c]
                        + (0..cfg.num_heads).map(|n| trace.head_output(l, n, t).unwrap()[c] as f64).sum::<f64>()
                        + f[c] as f64
                })
                .collect();
            worst = worst.max(rel_err(&sum, &mono[t]));
        }
    }
    worst
}

/// Largest `|lpi_set(V)|` over every head and position.
pub fn full_vocab_lpi_max(model: &Model, tokens: &[u32]) -> f64 {
    use headscope::model::{forward, CaptureSpec};
    use headscope::probes::lpi_set;
    let seq = TokenSequence::from_parts(&[], tokens, &[]);
    let trace = forward(model, &seq, &CaptureSpec::all()).unwrap();
    let vocab: Vec<u32> = (0..model.config.vocab_size as u32).collect();
    let mut worst = 0.0f64;
    for l in 0..model.config.num_layers {
        for n in 0..model.config.num_heads {
            for t in 0..tokens.len() {
                worst = worst.max(lpi_set(&trace, model, l, n, t, &vocab).unwrap().abs());
            }
        }
    }
    worst
}

/// Largest per-entry gap between the library's score tables and
/// [`naive_scores`]; `None` on a mismatch in which heads are scored.
pub fn oracle_gap(model: &Model, dataset: &[Sample]) -> Option<f64> {
    use headscope::probes::{i2t_scores, t2t_scores, I2tVariant};
    let t2t = t2t_scores(model, dataset).unwrap();
    let i2t = i2t_scores(model, dataset, I2tVariant::Difference).unwrap();
    let (nt, ni) = naive_scores(model, dataset);
    let mut worst = 0.0f64;
    for (lib, naive) in [(&t2t.values, &nt), (&i2t.values, &ni)] {
        for (a, b) in lib.iter().zip(naive) {
            match (a, b) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return None,
            }
        }
    }
    Some(worst)
}

/// Multiplies every projection and embedding by `factor` so that head
/// contributions are far from negligible.
pub fn sharpen(model: &mut Model, factor: f32) {
    let mut mats = vec![&mut model.token_embedding, &mut model.positional_embedding, &mut model.unembed];
    for layer in &mut model.layers {
        for h in &mut layer.heads {
            mats.extend([&mut h.w_q, &mut h.w_k, &mut h.w_v, &mut h.w_o]);
        }
        mats.extend([&mut layer.ffn.w_in, &mut layer.ffn.w_out]);
    }
    for m in mats {
        m.data.iter_mut().for_each(|v| *v *= factor);
    }
}

pub fn oracle_model(seed: u64) -> Model {
    let mut model = headscope::model::init_random(ModelConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 16,
        vocab_size: 24,
        ffn_hidden: 32,
        max_seq_len: 16,
        final_norm: true,
        seed,
    })
    .unwrap();
    sharpen(&mut model, 6.0);
    model
}
