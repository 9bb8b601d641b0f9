// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head text-to-text and image-to-text scores.
//!
//! Both scores read only local quantities from one captured forward pass
//! per sample: the layer input and head output at a decoding position
//! (text-to-text), or a head's attention row at an object's first mention
//! (image-to-text).

mod candidates;
mod lpi;
mod table;

use std::collections::BTreeSet;

pub use candidates::{
    build_candidate_sets, build_candidate_sets_open, build_candidate_sets_short,
    select_probe_tokens, CandidateSets, CandidateStep, ProbeToken, ProbeTokenSet,
};
pub use lpi::{lpi_set, lpi_token};
pub use table::{HeadId, I2tVariant, ScoreAccumulator, ScoreKind, ScoreTable};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{forward, CaptureSpec, Model, Segment, Trace};

/// Adds one sample's LPI contributions for every head.
fn accumulate_t2t(
    model: &Model,
    trace: &Trace,
    sets: &CandidateSets,
    acc: &mut ScoreAccumulator,
) -> Result<()> {
    let cfg = &model.config;
    for step in &sets.steps {
        let t = step.position;
        for l in 0..cfg.num_layers {
            let base = trace.residual(l, t)?;
            let before = model.log_probs(base)?;
            let plus_before = (!step.plus.is_empty()).then(|| lpi::set_log_prob(&before, &step.plus));
            let minus_before =
                (!step.minus.is_empty()).then(|| lpi::set_log_prob(&before, &step.minus));
            for n in 0..cfg.num_heads {
                let after = model.log_probs(&lpi::with_head(base, trace.head_output(l, n, t)?))?;
                let idx = l * cfg.num_heads + n;
                if let Some(b) = plus_before {
                    acc.add_plus(idx, lpi::set_log_prob(&after, &step.plus) - b);
                }
                if let Some(b) = minus_before {
                    acc.add_minus(idx, lpi::set_log_prob(&after, &step.minus) - b);
                }
            }
        }
    }
    Ok(())
}

/// Adds one sample's attention-mass contributions for every head.
fn accumulate_i2t(
    model: &Model,
    sample: &Sample,
    trace: &Trace,
    probes: &ProbeTokenSet,
    acc: &mut ScoreAccumulator,
) -> Result<()> {
    let cfg = &model.config;
    let seq = &sample.sequence;
    let image: Vec<usize> = seq.positions_of(Segment::Image).collect();
    for l in 0..cfg.num_layers {
        for n in 0..cfg.num_heads {
            let idx = l * cfg.num_heads + n;
            for p in &probes.plus {
                let row = trace.attention(l, n, p.position)?;
                let region = p
                    .region
                    .as_ref()
                    .and_then(|r| seq.region_masks.get(r))
                    .expect("validated by select_probe_tokens");
                acc.add_plus(idx, mass(row, region));
            }
            for p in &probes.minus {
                let row = trace.attention(l, n, p.position)?;
                acc.add_minus(idx, mass(row, &image));
            }
        }
    }
    Ok(())
}

/// Σ of `row[i]` over `positions` that are keys of the row.
pub(crate) fn mass(row: &[f32], positions: &[usize]) -> f64 {
    let mut seen = BTreeSet::new();
    positions
        .iter()
        .filter(|&&i| i < row.len() && seen.insert(i))
        .map(|&i| row[i] as f64)
        .sum()
}

fn capture_for(positions: impl IntoIterator<Item = usize>, lpi: bool, attention: bool) -> CaptureSpec {
    CaptureSpec {
        residuals: lpi,
        head_outputs: lpi,
        attention,
        ..CaptureSpec::none()
    }
    .at_positions(positions)
}

fn fold(model: &Model, partials: Vec<ScoreAccumulator>) -> ScoreAccumulator {
    let mut acc = ScoreAccumulator::new(model.config.num_layers, model.config.num_heads);
    for p in &partials {
        acc.merge(p);
    }
    acc
}

/// Text-to-text score table: one forward pass per sample.
pub fn t2t_scores(model: &Model, dataset: &[Sample]) -> Result<ScoreTable> {
    let partials = exec::try_map_ordered(dataset, |_, sample| {
        let sets = build_candidate_sets(sample)?;
        let mut acc = ScoreAccumulator::new(model.config.num_layers, model.config.num_heads);
        let trace = forward(model, &sample.sequence, &capture_for(sets.positions(), true, false))?;
        accumulate_t2t(model, &trace, &sets, &mut acc)?;
        Ok::<_, Error>(acc)
    })?;
    Ok(fold(model, partials).finish_t2t())
}

/// Image-to-text score table: one forward pass per sample.
pub fn i2t_scores(model: &Model, dataset: &[Sample], variant: I2tVariant) -> Result<ScoreTable> {
    let partials = exec::try_map_ordered(dataset, |_, sample| {
        let probes = select_probe_tokens(sample)?;
        let mut acc = ScoreAccumulator::new(model.config.num_layers, model.config.num_heads);
        let trace = forward(model, &sample.sequence, &capture_for(probes.positions(), false, true))?;
        accumulate_i2t(model, sample, &trace, &probes, &mut acc)?;
        Ok::<_, Error>(acc)
    })?;
    finish_i2t(fold(model, partials), variant)
}

fn finish_i2t(acc: ScoreAccumulator, variant: I2tVariant) -> Result<ScoreTable> {
    if acc.plus_count.iter().all(|&c| c == 0) && acc.minus_count.iter().all(|&c| c == 0) {
        return Err(Error::EmptyTable(
            "no present or absent object mentions in the dataset".into(),
        ));
    }
    Ok(acc.finish_i2t(variant))
}

/// Both tables from a single forward pass per sample.
pub fn score_dataset(
    model: &Model,
    dataset: &[Sample],
    variant: I2tVariant,
) -> Result<(ScoreTable, ScoreTable)> {
    let (l, n) = (model.config.num_layers, model.config.num_heads);
    let partials = exec::try_map_ordered(dataset, |_, sample| {
        let sets = build_candidate_sets(sample)?;
        let probes = select_probe_tokens(sample)?;
        let lpi_pos: BTreeSet<usize> = sets.positions().collect();
        let att_pos: BTreeSet<usize> = probes.positions().collect();
        let mut capture = capture_for(lpi_pos.union(&att_pos).copied(), true, true);
        capture.residuals = !lpi_pos.is_empty();
        capture.head_outputs = !lpi_pos.is_empty();
        capture.attention = !att_pos.is_empty();
        let trace = forward(model, &sample.sequence, &capture)?;
        let mut t2t = ScoreAccumulator::new(l, n);
        let mut i2t = ScoreAccumulator::new(l, n);
        accumulate_t2t(model, &trace, &sets, &mut t2t)?;
        accumulate_i2t(model, sample, &trace, &probes, &mut i2t)?;
        Ok::<_, Error>((t2t, i2t))
    })?;
    let mut t2t = ScoreAccumulator::new(l, n);
    let mut i2t = ScoreAccumulator::new(l, n);
    for (a, b) in &partials {
        t2t.merge(a);
        i2t.merge(b);
    }
    Ok((t2t.finish_t2t(), finish_i2t(i2t, variant)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mass_ignores_duplicates_and_future_keys() {
        let row = [0.25f32, 0.5, 0.25];
        assert_eq!(mass(&row, &[0, 0, 2, 7]), 0.5);
    }

    #[test]
    fn uniform_row_region_mass() {
        // query at t = 9 with uniform attention, 4 region tokens
        let row = vec![0.1f32; 10];
        assert!((mass(&row, &[0, 1, 2, 3]) - 0.4).abs() < 1e-7);
    }
}
