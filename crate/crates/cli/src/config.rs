// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: built-in defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use headscope::dataset::Sample;
use headscope::intervene::{PathEdge, DEFAULT_GAMMA_MINUS, DEFAULT_GAMMA_PLUS};
use headscope::model::{Decode, GenerateOptions};
use headscope::probes::I2tVariant;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "HEADSCOPE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    ShortAnswer,
    OpenEnded,
}

impl TaskKind {
    pub fn default_xi(self) -> usize {
        match self {
            TaskKind::ShortAnswer => 20,
            TaskKind::OpenEnded => 40,
        }
    }

    pub fn default_zeta(self) -> usize {
        match self {
            TaskKind::ShortAnswer => 10,
            TaskKind::OpenEnded => 50,
        }
    }

    pub fn default_max_new(self) -> usize {
        match self {
            TaskKind::ShortAnswer => 1,
            TaskKind::OpenEnded => 16,
        }
    }

    /// Short-answer when every sample is, open-ended otherwise.
    pub fn of_dataset(samples: &[Sample]) -> Self {
        if samples.iter().all(|s| s.format.is_short_answer()) {
            TaskKind::ShortAnswer
        } else {
            TaskKind::OpenEnded
        }
    }
}

/// One layer of settings; every field is optional so that layers can be
/// stacked. This is also the schema of the JSON config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub model: Option<PathBuf>,
    pub probe: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub t2t: Option<PathBuf>,
    pub i2t: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub task: Option<TaskKind>,
    pub xi: Option<usize>,
    pub zeta: Option<usize>,
    pub gamma_plus: Option<f64>,
    pub gamma_minus: Option<f64>,
    pub variant: Option<I2tVariant>,
    /// Each entry is one edge set, edges separated by commas.
    pub mask_edges: Option<Vec<String>>,
    pub max_new_tokens: Option<usize>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub allow_overlap: Option<bool>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),*) => {
        ConfigLayer { $($f: $top.$f.or($base.$f)),* }
    };
}

impl ConfigLayer {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| headscope::Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Fields set in `top` win.
    pub fn overlay(self, top: ConfigLayer) -> ConfigLayer {
        overlay!(
            self, top, model, probe, test, lexicon, t2t, i2t, out, task, xi, zeta, gamma_plus, gamma_minus,
            variant, mask_edges, max_new_tokens, temperature, seed, jobs, allow_overlap
        )
    }
}

/// Fully resolved settings for one run. The serialized form feeds the
/// config hash, so it leaves out settings that cannot change results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub probe: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub t2t: Option<PathBuf>,
    pub i2t: Option<PathBuf>,
    #[serde(skip)]
    pub out: PathBuf,
    pub task: Option<TaskKind>,
    pub xi: Option<usize>,
    pub zeta: Option<usize>,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub variant: I2tVariant,
    pub edge_sets: Vec<Vec<PathEdge>>,
    pub max_new_tokens: Option<usize>,
    pub temperature: Option<f64>,
    pub seed: u64,
    #[serde(skip)]
    pub jobs: usize,
    pub allow_overlap: bool,
}

/// Flag or config value, then `HEADSCOPE_SEED`, then 0.
pub fn resolve_seed(explicit: Option<u64>, env: Option<&str>) -> Result<u64> {
    match (explicit, env) {
        (Some(s), _) => Ok(s),
        (None, Some(v)) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        (None, None) => Ok(0),
    }
}

pub fn parse_edge_set(spec: &str) -> Result<Vec<PathEdge>> {
    let mut edges = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let e: PathEdge = part.parse()?;
        if !edges.contains(&e) {
            edges.push(e);
        }
    }
    Ok(edges)
}

impl RunConfig {
    pub fn resolve(layer: ConfigLayer, env_seed: Option<&str>) -> Result<Self> {
        let edge_sets = layer
            .mask_edges
            .unwrap_or_default()
            .iter()
            .map(|s| parse_edge_set(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunConfig {
            model: layer.model,
            probe: layer.probe,
            test: layer.test,
            lexicon: layer.lexicon,
            t2t: layer.t2t,
            i2t: layer.i2t,
            out: layer.out.unwrap_or_else(|| PathBuf::from(".")),
            task: layer.task,
            xi: layer.xi,
            zeta: layer.zeta,
            gamma_plus: layer.gamma_plus.unwrap_or(DEFAULT_GAMMA_PLUS),
            gamma_minus: layer.gamma_minus.unwrap_or(DEFAULT_GAMMA_MINUS),
            variant: layer.variant.unwrap_or_default(),
            edge_sets,
            max_new_tokens: layer.max_new_tokens,
            temperature: layer.temperature,
            seed: resolve_seed(layer.seed, env_seed)?,
            jobs: layer.jobs.unwrap_or(0),
            allow_overlap: layer.allow_overlap.unwrap_or(false),
        })
    }

    /// Defaults plus `layer`, reading the seed fallback from the environment.
    pub fn from_layer(layer: ConfigLayer) -> Result<Self> {
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(layer, env.as_deref())
    }

    pub fn hash(&self) -> String {
        headscope::provenance::hash_json(self)
    }

    pub fn xi_for(&self, kind: TaskKind) -> usize {
        self.xi.unwrap_or(kind.default_xi())
    }

    pub fn zeta_for(&self, kind: TaskKind) -> usize {
        self.zeta.unwrap_or(kind.default_zeta())
    }

    pub fn generate_options(&self, kind: TaskKind) -> GenerateOptions {
        let decode = match self.temperature {
            Some(t) if t > 0.0 => Decode::Sample {
                temperature: t,
                seed: self.seed,
            },
            _ => Decode::Greedy,
        };
        GenerateOptions {
            decode,
            max_new: self.max_new_tokens.unwrap_or(kind.default_max_new()),
            eos: None,
        }
    }

    /// Every edge from every set; the mask an intervention run applies.
    pub fn all_edges(&self) -> Vec<PathEdge> {
        let mut v: Vec<PathEdge> = self.edge_sets.iter().flatten().copied().collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("missing --{flag} (or `{}` in the config file)", flag.replace('-', "_"))))
    }
}
