// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head score tables, their mergeable accumulators, and CSV/JSON export.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provenance::Provenance;

/// An attention head, 0-based. Orders by `(layer, head)`; serializes as a
/// `[layer, head]` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }
}

impl From<(usize, usize)> for HeadId {
    fn from((layer, head): (usize, usize)) -> Self {
        HeadId { layer, head }
    }
}

impl From<HeadId> for (usize, usize) {
    fn from(h: HeadId) -> Self {
        (h.layer, h.head)
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    T2t,
    I2t,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::T2t => "t2t",
            ScoreKind::I2t => "i2t",
        })
    }
}

/// How the image-to-text score combines its components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum I2tVariant {
    /// `S⁺ − S⁻`
    #[default]
    Difference,
    /// `S⁺` alone, for models that spread attention over most patches.
    PositiveOnly,
}

impl std::str::FromStr for I2tVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "difference" => Ok(I2tVariant::Difference),
            "positive_only" | "positive-only" => Ok(I2tVariant::PositiveOnly),
            other => Err(Error::Validation(format!("unknown I2T variant `{other}`"))),
        }
    }
}

/// Sums and counts per head. Partial accumulators merge associatively; the
/// division happens once in `finish_*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreAccumulator {
    pub num_layers: usize,
    pub num_heads: usize,
    pub plus_sum: Vec<f64>,
    pub plus_count: Vec<u64>,
    pub minus_sum: Vec<f64>,
    pub minus_count: Vec<u64>,
}

impl ScoreAccumulator {
    pub fn new(num_layers: usize, num_heads: usize) -> Self {
        let k = num_layers * num_heads;
        ScoreAccumulator {
            num_layers,
            num_heads,
            plus_sum: vec![0.0; k],
            plus_count: vec![0; k],
            minus_sum: vec![0.0; k],
            minus_count: vec![0; k],
        }
    }

    pub fn add_plus(&mut self, idx: usize, v: f64) {
        self.plus_sum[idx] += v;
        self.plus_count[idx] += 1;
    }

    pub fn add_minus(&mut self, idx: usize, v: f64) {
        self.minus_sum[idx] += v;
        self.minus_count[idx] += 1;
    }

    pub fn merge(&mut self, other: &ScoreAccumulator) {
        for i in 0..self.plus_sum.len() {
            self.plus_sum[i] += other.plus_sum[i];
            self.plus_count[i] += other.plus_count[i];
            self.minus_sum[i] += other.minus_sum[i];
            self.minus_count[i] += other.minus_count[i];
        }
    }

    fn means(&self) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
        let mean = |s: &[f64], c: &[u64]| -> Vec<Option<f64>> {
            s.iter()
                .zip(c)
                .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
                .collect()
        };
        (
            mean(&self.plus_sum, &self.plus_count),
            mean(&self.minus_sum, &self.minus_count),
        )
    }

    /// `S⁺ − S⁻`; missing when either component has no observations.
    pub fn finish_t2t(&self) -> ScoreTable {
        let (s_plus, s_minus) = self.means();
        let values = s_plus
            .iter()
            .zip(&s_minus)
            .map(|(p, m)| match (p, m) {
                (Some(p), Some(m)) => Some(p - m),
                _ => None,
            })
            .collect();
        self.table(ScoreKind::T2t, None, s_plus, s_minus, values)
    }

    /// An empty component counts as 0 in the difference; a head with no
    /// probes at all is missing.
    pub fn finish_i2t(&self, variant: I2tVariant) -> ScoreTable {
        let (s_plus, s_minus) = self.means();
        let values = s_plus
            .iter()
            .zip(&s_minus)
            .map(|(p, m)| match variant {
                I2tVariant::PositiveOnly => *p,
                I2tVariant::Difference => {
                    if p.is_none() && m.is_none() {
                        None
                    } else {
                        Some(p.unwrap_or(0.0) - m.unwrap_or(0.0))
                    }
                }
            })
            .collect();
        self.table(ScoreKind::I2t, Some(variant), s_plus, s_minus, values)
    }

    fn table(
        &self,
        kind: ScoreKind,
        variant: Option<I2tVariant>,
        s_plus: Vec<Option<f64>>,
        s_minus: Vec<Option<f64>>,
        values: Vec<Option<f64>>,
    ) -> ScoreTable {
        ScoreTable {
            kind,
            variant,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            s_plus,
            s_minus,
            values,
            count_plus: self.plus_count.clone(),
            count_minus: self.minus_count.clone(),
        }
    }
}

/// `L × N` head scores, flattened as `layer * num_heads + head`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub kind: ScoreKind,
    pub variant: Option<I2tVariant>,
    pub num_layers: usize,
    pub num_heads: usize,
    pub s_plus: Vec<Option<f64>>,
    pub s_minus: Vec<Option<f64>>,
    pub values: Vec<Option<f64>>,
    pub count_plus: Vec<u64>,
    pub count_minus: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct JsonEntry {
    layer: usize,
    head: usize,
    s_plus: Option<f64>,
    s_minus: Option<f64>,
    score: Option<f64>,
    count_plus: u64,
    count_minus: u64,
}

#[derive(Serialize, Deserialize)]
struct JsonTable {
    provenance: Provenance,
    kind: ScoreKind,
    variant: Option<I2tVariant>,
    num_layers: usize,
    num_heads: usize,
    entries: Vec<JsonEntry>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ScoreTable {
    /// A table with explicit values and unit counts; convenient for tests
    /// and for tables assembled outside the probes.
    pub fn from_values(
        kind: ScoreKind,
        num_layers: usize,
        num_heads: usize,
        values: Vec<Option<f64>>,
    ) -> Result<Self> {
        if values.len() != num_layers * num_heads {
            return Err(Error::Validation(format!(
                "{} values for a {num_layers}x{num_heads} table",
                values.len()
            )));
        }
        let counts: Vec<u64> = values.iter().map(|v| v.is_some() as u64).collect();
        Ok(ScoreTable {
            kind,
            variant: None,
            num_layers,
            num_heads,
            s_plus: values.clone(),
            s_minus: vec![Some(0.0); values.len()],
            values,
            count_plus: counts.clone(),
            count_minus: counts,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn head_at(&self, idx: usize) -> HeadId {
        HeadId::new(idx / self.num_heads, idx % self.num_heads)
    }

    pub fn index_of(&self, h: HeadId) -> usize {
        h.layer * self.num_heads + h.head
    }

    pub fn get(&self, h: HeadId) -> Option<f64> {
        self.values.get(self.index_of(h)).copied().flatten()
    }

    /// Heads with a defined score, in `(layer, head)` order.
    pub fn scored(&self) -> Vec<(HeadId, f64)> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (self.head_at(i), v)))
            .collect()
    }

    /// Scored heads sorted by score (descending or ascending); ties go to
    /// the smaller `(layer, head)`.
    pub fn ranked(&self, descending: bool) -> Vec<(HeadId, f64)> {
        let mut v = self.scored();
        v.sort_by(|a, b| {
            let by_score = if descending {
                b.1.total_cmp(&a.1)
            } else {
                a.1.total_cmp(&b.1)
            };
            by_score.then(a.0.cmp(&b.0))
        });
        v
    }

    /// The first `k` heads of [`ranked`](Self::ranked).
    pub fn top_k(&self, k: usize, descending: bool) -> Vec<HeadId> {
        self.ranked(descending).into_iter().take(k).map(|(h, _)| h).collect()
    }

    pub fn same_geometry(&self, other: &ScoreTable) -> bool {
        self.num_layers == other.num_layers && self.num_heads == other.num_heads
    }

    pub fn to_csv(&self, provenance: &Provenance) -> String {
        let mut s = provenance.csv_header();
        s.push_str(&format!(
            "# kind={}\n# layers={}\n# heads={}\n",
            self.kind, self.num_layers, self.num_heads
        ));
        if let Some(v) = self.variant {
            s.push_str(&format!(
                "# variant={}\n",
                match v {
                    I2tVariant::Difference => "difference",
                    I2tVariant::PositiveOnly => "positive_only",
                }
            ));
        }
        s.push_str("layer,head,s_plus,s_minus,score,count_plus,count_minus\n");
        for i in 0..self.len() {
            let h = self.head_at(i);
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                h.layer,
                h.head,
                fmt_opt(self.s_plus[i]),
                fmt_opt(self.s_minus[i]),
                fmt_opt(self.values[i]),
                self.count_plus[i],
                self.count_minus[i]
            ));
        }
        s
    }

    pub fn to_json(&self, provenance: &Provenance) -> String {
        let t = JsonTable {
            provenance: provenance.clone(),
            kind: self.kind,
            variant: self.variant,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            entries: (0..self.len())
                .map(|i| {
                    let h = self.head_at(i);
                    JsonEntry {
                        layer: h.layer,
                        head: h.head,
                        s_plus: self.s_plus[i],
                        s_minus: self.s_minus[i],
                        score: self.values[i],
                        count_plus: self.count_plus[i],
                        count_minus: self.count_minus[i],
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&t).expect("table serializes") + "\n"
    }

    /// Parses the CSV written by [`to_csv`](Self::to_csv). Geometry comes
    /// from the `# layers=` / `# heads=` header lines when present, else
    /// from the largest indices seen.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut kind = ScoreKind::T2t;
        let mut variant = None;
        let mut layers = None;
        let mut heads = None;
        for line in text.lines().filter_map(|l| l.strip_prefix("# ")) {
            if let Some((k, v)) = line.split_once('=') {
                match k {
                    "kind" => kind = if v == "i2t" { ScoreKind::I2t } else { ScoreKind::T2t },
                    "variant" => variant = Some(v.parse::<I2tVariant>()?),
                    "layers" => layers = v.parse::<usize>().ok(),
                    "heads" => heads = v.parse::<usize>().ok(),
                    _ => {}
                }
            }
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let bad = |e: String| Error::Validation(format!("score CSV: {e}"));
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 7 {
                return Err(bad(format!("expected 7 columns, got {}", rec.len())));
            }
            let int = |i: usize| rec[i].parse::<u64>().map_err(|e| bad(format!("{e}: `{}`", &rec[i])));
            let opt = |i: usize| -> Result<Option<f64>> {
                if rec[i].is_empty() {
                    Ok(None)
                } else {
                    rec[i]
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|e| bad(format!("{e}: `{}`", &rec[i])))
                }
            };
            rows.push((
                int(0)? as usize,
                int(1)? as usize,
                opt(2)?,
                opt(3)?,
                opt(4)?,
                int(5)?,
                int(6)?,
            ));
        }
        let nl = layers.unwrap_or_else(|| rows.iter().map(|r| r.0 + 1).max().unwrap_or(0));
        let nh = heads.unwrap_or_else(|| rows.iter().map(|r| r.1 + 1).max().unwrap_or(0));
        let k = nl * nh;
        let mut t = ScoreTable {
            kind,
            variant,
            num_layers: nl,
            num_heads: nh,
            s_plus: vec![None; k],
            s_minus: vec![None; k],
            values: vec![None; k],
            count_plus: vec![0; k],
            count_minus: vec![0; k],
        };
        for (l, h, sp, sm, v, cp, cm) in rows {
            if l >= nl || h >= nh {
                return Err(bad(format!("head ({l}, {h}) outside {nl}x{nh}")));
            }
            let i = l * nh + h;
            t.s_plus[i] = sp;
            t.s_minus[i] = sm;
            t.values[i] = v;
            t.count_plus[i] = cp;
            t.count_minus[i] = cm;
        }
        Ok(t)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}
