// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rank correlation between head score tables and attention-mass summaries.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Segment, TokenSequence, Trace};
use crate::probes::{mass, HeadId, ScoreTable};
use crate::provenance::{hash_json, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Rank 1 is the highest score.
    #[default]
    Descending,
    /// Rank 1 is the lowest score.
    Ascending,
}

/// Per-head ranks; tied scores share their average rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankVector {
    pub heads: Vec<HeadId>,
    pub ranks: Vec<f64>,
    pub source_hash: String,
}

impl RankVector {
    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn rank_of(&self, h: HeadId) -> Option<f64> {
        self.heads.binary_search(&h).ok().map(|i| self.ranks[i])
    }
}

/// Average ranks of `values`, 1-based.
pub fn average_ranks(values: &[f64], direction: Direction) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| match direction {
        Direction::Descending => values[b].total_cmp(&values[a]),
        Direction::Ascending => values[a].total_cmp(&values[b]),
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn rank_heads(table: &ScoreTable, heads: &[HeadId], direction: Direction) -> Result<RankVector> {
    if heads.len() < 2 {
        return Err(Error::Validation(format!(
            "ranking needs at least 2 scored heads, got {}",
            heads.len()
        )));
    }
    let values: Vec<f64> = heads
        .iter()
        .map(|&h| table.get(h).expect("head is scored"))
        .collect();
    Ok(RankVector {
        heads: heads.to_vec(),
        ranks: average_ranks(&values, direction),
        source_hash: hash_json(table),
    })
}

/// Ranks every scored head of `table`. Heads are listed in `(layer, head)`
/// order.
pub fn rank_scores(table: &ScoreTable, direction: Direction) -> Result<RankVector> {
    let heads: Vec<HeadId> = table.scored().into_iter().map(|(h, _)| h).collect();
    rank_heads(table, &heads, direction)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Domain(format!(
            "correlation needs two equal-length vectors of at least 2 entries, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numeric("correlation of a constant vector is undefined".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of two rank vectors over the same heads.
pub fn rank_correlation(a: &RankVector, b: &RankVector) -> Result<f64> {
    if a.heads != b.heads {
        return Err(Error::Domain(
            "rank vectors cover different heads".into(),
        ));
    }
    pearson(&a.ranks, &b.ranks)
}

/// Heads scored in both tables, re-ranked within that intersection.
pub fn paired_ranks(a: &ScoreTable, b: &ScoreTable) -> Result<(RankVector, RankVector)> {
    if !a.same_geometry(b) {
        return Err(Error::Domain(format!(
            "tables have different geometries: {}x{} vs {}x{}",
            a.num_layers, a.num_heads, b.num_layers, b.num_heads
        )));
    }
    let heads: Vec<HeadId> = a
        .scored()
        .into_iter()
        .map(|(h, _)| h)
        .filter(|&h| b.get(h).is_some())
        .collect();
    Ok((
        rank_heads(a, &heads, Direction::Descending)?,
        rank_heads(b, &heads, Direction::Descending)?,
    ))
}

/// Rank correlation of two score tables on the heads both of them score.
pub fn table_correlation(a: &ScoreTable, b: &ScoreTable) -> Result<f64> {
    let (ra, rb) = paired_ranks(a, b)?;
    rank_correlation(&ra, &rb)
}

/// `|top-k(a) ∩ top-k(b)|`, highest scores first, ties to the smaller head.
pub fn top_overlap(a: &ScoreTable, b: &ScoreTable, k: usize) -> Result<usize> {
    if !a.same_geometry(b) {
        return Err(Error::Domain("tables have different geometries".into()));
    }
    if k == 0 {
        return Ok(0);
    }
    let domain = a.scored().len().min(b.scored().len());
    if k > domain {
        return Err(Error::Selection(format!("k = {k} exceeds the {domain} scored heads")));
    }
    let ta: BTreeSet<HeadId> = a.top_k(k, true).into_iter().collect();
    Ok(b.top_k(k, true).into_iter().filter(|h| ta.contains(h)).count())
}

/// Square ρ matrix over named tables.
pub fn correlation_matrix(tables: &[(String, ScoreTable)]) -> Result<Vec<Vec<f64>>> {
    let n = tables.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let r = table_correlation(&tables[i].1, &tables[j].1)?;
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

pub fn correlation_csv(names: &[String], matrix: &[Vec<f64>], provenance: &Provenance) -> String {
    let mut s = provenance.csv_header();
    s.push_str("table");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for (name, row) in names.iter().zip(matrix) {
        s.push_str(name);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Per-head `(rank_a, rank_b)` pairs for plotting.
pub fn scatter_csv(a: &ScoreTable, b: &ScoreTable, provenance: &Provenance) -> Result<String> {
    let (ra, rb) = paired_ranks(a, b)?;
    let mut s = provenance.csv_header();
    s.push_str("layer,head,rank_a,rank_b\n");
    for (i, h) in ra.heads.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", h.layer, h.head, ra.ranks[i], rb.ranks[i]);
    }
    Ok(s)
}

/// A captured forward pass and the query positions to summarize.
#[derive(Debug, Clone, Copy)]
pub struct AttentionSite<'a> {
    pub trace: &'a Trace,
    pub sequence: &'a TokenSequence,
    pub positions: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    /// Mean attention mass on the segment over the selected heads.
    pub selected: f64,
    /// The same mean over every head.
    pub all: f64,
    pub rows: usize,
}

/// Mean over (site, position, head) of the attention mass that query
/// position puts on `segment`, for `heads` and for all heads.
pub fn attention_summary(
    sites: &[AttentionSite<'_>],
    heads: &[HeadId],
    segment: Segment,
) -> Result<AttentionSummary> {
    if heads.is_empty() {
        return Err(Error::Validation("attention summary needs at least one head".into()));
    }
    if sites.is_empty() {
        return Err(Error::Validation("attention summary needs at least one trace".into()));
    }
    let (mut sel, mut sel_n, mut all, mut all_n) = (0.0, 0usize, 0.0, 0usize);
    let (nl, nh) = (sites[0].trace.num_layers, sites[0].trace.num_heads);
    let chosen: BTreeSet<HeadId> = heads.iter().copied().collect();
    for h in &chosen {
        if h.layer >= nl || h.head >= nh {
            return Err(Error::Domain(format!("head {h} is outside the {nl}x{nh} model")));
        }
    }
    for site in sites {
        let keys: Vec<usize> = site.sequence.positions_of(segment).collect();
        for &t in site.positions {
            for l in 0..nl {
                for n in 0..nh {
                    let m = mass(site.trace.attention(l, n, t)?, &keys);
                    all += m;
                    all_n += 1;
                    if chosen.contains(&HeadId::new(l, n)) {
                        sel += m;
                        sel_n += 1;
                    }
                }
            }
        }
    }
    if all_n == 0 {
        return Err(Error::Validation("no query positions to summarize".into()));
    }
    Ok(AttentionSummary {
        selected: sel / sel_n as f64,
        all: all / all_n as f64,
        rows: all_n / (nl * nh),
    })
}

/// Binary grayscale PGM of one head's attention pattern; row `t` is the
/// query, column `i` the key, white = weight 1.
pub fn attention_heatmap_pgm(trace: &Trace, layer: usize, head: usize) -> Result<Vec<u8>> {
    let n = trace.len;
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    for t in 0..n {
        let row = trace.attention(layer, head, t)?;
        out.extend((0..n).map(|i| {
            row.get(i)
                .map_or(0, |&w| (w.clamp(0.0, 1.0) * 255.0).round() as u8)
        }));
    }
    Ok(out)
}
