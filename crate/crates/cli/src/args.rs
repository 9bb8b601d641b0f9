// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use headscope::bench::Strategy;
use headscope::probes::I2tVariant;

use crate::config::{ConfigLayer, TaskKind};

#[derive(Debug, Parser)]
#[command(
    name = "headscope",
    version,
    about = "Per-head hallucination scores, head scaling and attention-path ablation for small decoder-only models"
)]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every head on the probe split; writes t2t.csv and i2t.csv.
    Score(RunArgs),
    /// Scale selected heads and compare against the unscaled model.
    Intervene(RunArgs),
    /// Mask attention paths and compare against the unmasked model.
    Ablate(RunArgs),
    /// Rank correlations between score tables.
    Correlate(CorrelateArgs),
    /// Dataset builders, metrics and the planted harness.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Model manifest.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Split used to identify heads.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Split used for evaluation.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Lexicon for decoding responses.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// T2T table (default <out>/t2t.csv).
    #[arg(long)]
    pub t2t: Option<PathBuf>,
    /// I2T table (default <out>/i2t.csv).
    #[arg(long)]
    pub i2t: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Task kind; picks ξ, ζ and response length defaults. Inferred from
    /// the test split when absent.
    #[arg(long, value_enum)]
    pub task: Option<TaskKind>,
    /// Number of lowest-T2T heads to suppress.
    #[arg(long)]
    pub xi: Option<usize>,
    /// Number of highest-I2T heads to amplify.
    #[arg(long)]
    pub zeta: Option<usize>,
    #[arg(long)]
    pub gamma_plus: Option<f64>,
    #[arg(long)]
    pub gamma_minus: Option<f64>,
    /// I2T variant: difference or positive-only.
    #[arg(long)]
    pub variant: Option<I2tVariant>,
    /// Attention edge set to mask, e.g. `output->image` or
    /// `output->image,input->image`. Repeatable.
    #[arg(long = "mask-edge")]
    pub mask_edges: Vec<String>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow the probe and test splits to be identical.
    #[arg(long)]
    pub allow_overlap: bool,
}

impl RunArgs {
    pub fn layer(&self, jobs: Option<usize>) -> ConfigLayer {
        ConfigLayer {
            model: self.model.clone(),
            probe: self.probe.clone(),
            test: self.test.clone(),
            lexicon: self.lexicon.clone(),
            t2t: self.t2t.clone(),
            i2t: self.i2t.clone(),
            out: self.out.clone(),
            task: self.task,
            xi: self.xi,
            zeta: self.zeta,
            gamma_plus: self.gamma_plus,
            gamma_minus: self.gamma_minus,
            variant: self.variant,
            mask_edges: (!self.mask_edges.is_empty()).then(|| self.mask_edges.clone()),
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            seed: self.seed,
            jobs,
            allow_overlap: self.allow_overlap.then_some(true),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CorrelateArgs {
    /// Score table as `name=path` or a bare path. Repeatable.
    #[arg(long = "table", required = true)]
    pub tables: Vec<String>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Synthetic annotation file over the toy object world.
    ToyAnnotations {
        #[arg(long, default_value_t = 500)]
        images: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the toy lexicon here.
        #[arg(long)]
        lexicon_out: Option<PathBuf>,
    },
    /// Balanced yes/no object questions from annotations.
    BuildPope {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value_t = Strategy::Random)]
        strategy: Strategy,
        /// Questions per label per image.
        #[arg(long, default_value_t = 3)]
        per_image: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Four-option questions from a yes/no split.
    BuildMcq {
        #[arg(long)]
        pope: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, precision, recall and F1 of stored responses.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// One JSON string per line, in dataset order.
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// CHAIR over captions with ground-truth objects.
    Chair {
        /// JSONL of `{"caption": ..., "objects": [...]}`.
        #[arg(long)]
        captions: PathBuf,
        /// Object names, or canonical name to synonyms, as JSON.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Planted-head model with its ground truth and data splits.
    Plant {
        /// Planted spec as JSON (default spec otherwise).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}
