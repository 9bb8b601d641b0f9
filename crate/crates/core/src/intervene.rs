// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head selection, per-head output scaling, and attention path masking.
//!
//! Selection: `Z⁻` is the bottom-ξ heads by text-to-text score; `Z⁺` is the
//! union of the top-ξ text-to-text heads and the top-ζ image-to-text heads,
//! minus anything already in `Z⁻`. Each head's output is then multiplied by
//! `γ⁺` (in `Z⁺`), `γ⁻` (in `Z⁻`) or 1 before it joins the residual stream,
//! at every layer, position and decoding step.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward_with, generate_with, CaptureSpec, GenerateOptions, Hooks, Model, Segment,
    TokenSequence, Trace,
};
use crate::probes::{HeadId, ScoreTable};

pub const DEFAULT_GAMMA_PLUS: f64 = 2.0;
pub const DEFAULT_GAMMA_MINUS: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub num_layers: usize,
    pub num_heads: usize,
    pub xi: usize,
    pub zeta: usize,
    pub z_minus: Vec<HeadId>,
    pub z_plus: Vec<HeadId>,
    /// Heads that ranked into `Z⁺` but were kept in `Z⁻`.
    pub conflicts: Vec<HeadId>,
}

impl HeadSelection {
    pub fn empty(num_layers: usize, num_heads: usize) -> Self {
        HeadSelection {
            num_layers,
            num_heads,
            xi: 0,
            zeta: 0,
            z_minus: vec![],
            z_plus: vec![],
            conflicts: vec![],
        }
    }
}

/// Picks `Z⁻` and `Z⁺` from the two score tables. Heads without a score are
/// never selected.
pub fn select_heads(t2t: &ScoreTable, i2t: &ScoreTable, xi: usize, zeta: usize) -> Result<HeadSelection> {
    if !t2t.same_geometry(i2t) {
        return Err(Error::Domain(format!(
            "T2T table is {}x{} but I2T table is {}x{}",
            t2t.num_layers, t2t.num_heads, i2t.num_layers, i2t.num_heads
        )));
    }
    let t2t_scored = t2t.scored().len();
    let i2t_scored = i2t.scored().len();
    if xi > t2t_scored {
        return Err(Error::Selection(format!(
            "xi = {xi} but only {t2t_scored} heads have a T2T score"
        )));
    }
    if zeta > i2t_scored {
        return Err(Error::Selection(format!(
            "zeta = {zeta} but only {i2t_scored} heads have an I2T score"
        )));
    }
    let z_minus: BTreeSet<HeadId> = t2t.top_k(xi, false).into_iter().collect();
    let candidates: BTreeSet<HeadId> = t2t
        .top_k(xi, true)
        .into_iter()
        .chain(i2t.top_k(zeta, true))
        .collect();
    let conflicts: Vec<HeadId> = candidates.intersection(&z_minus).copied().collect();
    for h in &conflicts {
        log::info!("head {h} is both a Z- and a Z+ candidate; keeping it in Z-");
    }
    let z_plus = candidates.difference(&z_minus).copied().collect();
    Ok(HeadSelection {
        num_layers: t2t.num_layers,
        num_heads: t2t.num_heads,
        xi,
        zeta,
        z_minus: z_minus.into_iter().collect(),
        z_plus,
        conflicts,
    })
}

/// Per-head output scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaMap {
    pub num_layers: usize,
    pub num_heads: usize,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub z_plus: Vec<HeadId>,
    pub z_minus: Vec<HeadId>,
    /// Flattened `layer * num_heads + head`.
    pub lambda: Vec<f32>,
}

impl LambdaMap {
    pub fn identity(num_layers: usize, num_heads: usize) -> Self {
        LambdaMap {
            num_layers,
            num_heads,
            gamma_plus: 1.0,
            gamma_minus: 1.0,
            z_plus: vec![],
            z_minus: vec![],
            lambda: vec![1.0; num_layers * num_heads],
        }
    }

    pub fn get(&self, h: HeadId) -> f32 {
        self.lambda[h.layer * self.num_heads + h.head]
    }

    fn check(&self, model: &Model) -> Result<()> {
        if self.num_layers != model.config.num_layers || self.num_heads != model.config.num_heads {
            return Err(Error::Domain(format!(
                "lambda map is {}x{} but the model has {}x{} heads",
                self.num_layers, self.num_heads, model.config.num_layers, model.config.num_heads
            )));
        }
        Ok(())
    }
}

pub fn lambda_map(selection: &HeadSelection, gamma_plus: f64, gamma_minus: f64) -> Result<LambdaMap> {
    for (name, g) in [("gamma_plus", gamma_plus), ("gamma_minus", gamma_minus)] {
        if !g.is_finite() || g < 0.0 {
            return Err(Error::Contract(format!("{name} must be a non-negative number, got {g}")));
        }
    }
    let nh = selection.num_heads;
    let mut lambda = vec![1.0f32; selection.num_layers * nh];
    for h in &selection.z_plus {
        lambda[h.layer * nh + h.head] = gamma_plus as f32;
    }
    for h in &selection.z_minus {
        lambda[h.layer * nh + h.head] = gamma_minus as f32;
    }
    Ok(LambdaMap {
        num_layers: selection.num_layers,
        num_heads: nh,
        gamma_plus,
        gamma_minus,
        z_plus: selection.z_plus.clone(),
        z_minus: selection.z_minus.clone(),
        lambda,
    })
}

/// A causal path between segments that can be cut: `(query, key)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathEdge {
    OutputToImage,
    InputToImage,
    OutputToInput,
}

impl PathEdge {
    pub fn segments(self) -> (Segment, Segment) {
        match self {
            PathEdge::OutputToImage => (Segment::OutputText, Segment::Image),
            PathEdge::InputToImage => (Segment::InputText, Segment::Image),
            PathEdge::OutputToInput => (Segment::OutputText, Segment::InputText),
        }
    }
}

impl fmt::Display for PathEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathEdge::OutputToImage => "output->image",
            PathEdge::InputToImage => "input->image",
            PathEdge::OutputToInput => "output->input",
        })
    }
}

impl FromStr for PathEdge {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', ' '], "-").as_str() {
            "output->image" | "output-image" | "output-to-image" => Ok(PathEdge::OutputToImage),
            "input->image" | "input-image" | "input-to-image" => Ok(PathEdge::InputToImage),
            "output->input" | "output-input" | "output-to-input" => Ok(PathEdge::OutputToInput),
            _ => Err(Error::Validation(format!(
                "unknown mask edge `{s}` (expected output->image, input->image or output->input)"
            ))),
        }
    }
}

/// Attention edges to knock out. Blocked logits are set to −∞ before the
/// softmax, so the remaining weights of each row renormalize to 1.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PathMaskSpec {
    pub edges: BTreeSet<PathEdge>,
}

impl PathMaskSpec {
    pub fn new(edges: impl IntoIterator<Item = PathEdge>) -> Self {
        PathMaskSpec {
            edges: edges.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn blocked(&self) -> Vec<(Segment, Segment)> {
        self.edges.iter().map(|e| e.segments()).collect()
    }
}

/// Scaling and masking applied together.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Intervention {
    pub lambda: Option<LambdaMap>,
    pub mask: PathMaskSpec,
}

impl Intervention {
    pub fn scaling(lambda: LambdaMap) -> Self {
        Intervention {
            lambda: Some(lambda),
            mask: PathMaskSpec::default(),
        }
    }

    pub fn masking(mask: PathMaskSpec) -> Self {
        Intervention { lambda: None, mask }
    }

    /// Runs `f` with the forward hooks this intervention describes.
    pub fn with_hooks<R>(&self, model: &Model, f: impl FnOnce(Hooks<'_>) -> Result<R>) -> Result<R> {
        if let Some(l) = &self.lambda {
            l.check(model)?;
        }
        let blocked = self.mask.blocked();
        f(Hooks {
            head_scale: self.lambda.as_ref().map(|l| &l.lambda[..]),
            blocked: &blocked,
        })
    }

    pub fn forward(&self, model: &Model, seq: &TokenSequence, capture: &CaptureSpec) -> Result<Trace> {
        self.with_hooks(model, |hooks| forward_with(model, seq, capture, hooks))
    }

    pub fn generate(&self, model: &Model, seq: &TokenSequence, opts: &GenerateOptions) -> Result<TokenSequence> {
        self.with_hooks(model, |hooks| generate_with(model, seq, opts, hooks))
    }
}

/// Forward pass with every head output scaled by its λ. Attention weights
/// are unchanged.
pub fn forward_intervened(
    model: &Model,
    seq: &TokenSequence,
    lambda: &LambdaMap,
    capture: &CaptureSpec,
) -> Result<Trace> {
    Intervention::scaling(lambda.clone()).forward(model, seq, capture)
}

/// Forward pass with the given attention edges knocked out at every layer
/// and head.
pub fn mask_path(
    model: &Model,
    seq: &TokenSequence,
    spec: &PathMaskSpec,
    capture: &CaptureSpec,
) -> Result<Trace> {
    Intervention::masking(spec.clone()).forward(model, seq, capture)
}
