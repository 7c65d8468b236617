//! Command-line surface and configuration resolution.
//!
//! Precedence for every setting: command-line flag, then `MASSRANK_*`
//! environment variable, then the TOML file given by `--config`, then the
//! built-in default.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use massrank_core::metrics::MixedPolicy;
use massrank_core::scoring::Similarity;
use massrank_core::{MarginalMethod, TlMode};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(name = "massrank", version, about = "Language-debiased image-text scoring and evaluation")]
pub struct Cli {
    /// TOML file with default settings.
    #[arg(long, global = true, env = "MASSRANK_CONFIG")]
    pub config: Option<PathBuf>,

    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "MASSRANK_JOBS")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score (image, text) pairs of a conditional table.
    Score(ScoreArgs),
    /// Compute evaluation metrics from score files and a manifest.
    Eval(EvalArgs),
    /// Collect recall/bias points from results documents into a CSV with a frontier flag.
    Pareto(ParetoArgs),
    /// Toy models: generate, export tables, build biased foil families.
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
    /// Check an adapter endpoint for protocol conformance.
    Probe(ProbeArgs),
    /// Gender word classification and caption neutralization.
    Lexicon {
        #[command(subcommand)]
        command: LexiconCommand,
    },
    /// Reference adapter on stdin/stdout.
    #[command(hide = true)]
    EchoAdapter {
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityArg {
    Itc,
    Itm,
    ItmVqa,
    Tl,
    Mass,
}

impl From<SimilarityArg> for Similarity {
    fn from(s: SimilarityArg) -> Self {
        match s {
            SimilarityArg::Itc => Similarity::Itc,
            SimilarityArg::Itm => Similarity::Itm,
            SimilarityArg::ItmVqa => Similarity::ItmVqa,
            SimilarityArg::Tl => Similarity::Tl,
            SimilarityArg::Mass => Similarity::Mass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TlModeArg {
    ProbMean,
    LogprobMean,
}

impl From<TlModeArg> for TlMode {
    fn from(m: TlModeArg) -> Self {
        match m {
            TlModeArg::ProbMean => TlMode::ProbMean,
            TlModeArg::LogprobMean => TlMode::LogprobMean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginalArg {
    NullImage,
    McAvgLog,
    McLogMeanExp,
}

impl From<MarginalArg> for MarginalMethod {
    fn from(m: MarginalArg) -> Self {
        match m {
            MarginalArg::NullImage => MarginalMethod::NullImage,
            MarginalArg::McAvgLog => MarginalMethod::McAvgLog,
            MarginalArg::McLogMeanExp => MarginalMethod::McLogMeanExp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixedPolicyArg {
    Both,
    Neither,
}

impl From<MixedPolicyArg> for MixedPolicy {
    fn from(m: MixedPolicyArg) -> Self {
        match m {
            MixedPolicyArg::Both => MixedPolicy::Both,
            MixedPolicyArg::Neither => MixedPolicy::Neither,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Retrieval,
    Winoground,
    Foil,
    Color,
}

#[derive(Debug, Args)]
pub struct ScoringFlags {
    #[arg(long, value_enum, env = "MASSRANK_SIMILARITY")]
    pub similarity: Option<SimilarityArg>,
    #[arg(long, value_enum, env = "MASSRANK_TL_MODE")]
    pub tl_mode: Option<TlModeArg>,
    #[arg(long, value_enum, env = "MASSRANK_MARGINAL")]
    pub marginal: Option<MarginalArg>,
    /// Images drawn per caption for Monte-Carlo marginals.
    #[arg(long, env = "MASSRANK_MC_N")]
    pub mc_n: Option<usize>,
    #[arg(long, env = "MASSRANK_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub table: PathBuf,
    /// `{image, text}` lines; defaults to every pair the table can score.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub scoring: ScoringFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub metric: MetricArg,
    /// Score file (for retrieval: the second-stage scores when `--first-stage` is given).
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// First-stage score file for two-stage retrieval.
    #[arg(long)]
    pub first_stage: Option<PathBuf>,
    #[arg(long, env = "MASSRANK_SHORTLIST")]
    pub shortlist: Option<usize>,
    /// Cutoffs, comma separated.
    #[arg(long, value_delimiter = ',', env = "MASSRANK_K")]
    pub k: Option<Vec<usize>>,
    #[arg(long, env = "MASSRANK_ABSOLUTE_BIAS", num_args = 0..=1, default_missing_value = "true")]
    pub absolute_bias: Option<bool>,
    #[arg(long, value_enum, env = "MASSRANK_MIXED_POLICY")]
    pub mixed_policy: Option<MixedPolicyArg>,
}

#[derive(Debug, Args)]
pub struct ParetoArgs {
    /// Results documents; the label of each point is the file stem.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Cutoff whose recall and bias are compared.
    #[arg(long, env = "MASSRANK_K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum OracleCommand {
    /// Random toy model with Dirichlet rows.
    Gen {
        #[arg(long)]
        images: usize,
        /// Vocabulary size including the end token.
        #[arg(long)]
        vocab: usize,
        #[arg(long, default_value_t = 3)]
        max_len: usize,
        #[arg(long, env = "MASSRANK_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Table of every terminal caption under every image, with exact marginal null rows.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Language-prior-biased foil instances with their exact outcomes.
    Family {
        #[arg(long)]
        strength: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, env = "MASSRANK_SEED")]
        seed: Option<u64>,
        /// Output directory for table.jsonl, foil.jsonl and family.json.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// `stdio:<command>` or `http(s)://host:port/path`.
    #[arg(long, env = "MASSRANK_ADAPTER")]
    pub adapter: Option<String>,
    /// Image used in the non-null canary item.
    #[arg(long, default_value = "probe.jpg")]
    pub image: String,
    #[arg(long, default_value_t = 30.0)]
    pub timeout_secs: f64,
    #[arg(long, default_value_t = 2)]
    pub retries: u32,
}

#[derive(Debug, Subcommand)]
pub enum LexiconCommand {
    /// Print masculine/feminine/both/neutral for each caption (stdin lines without --caption).
    Classify(LexiconArgs),
    /// Print the neutralized form of each caption.
    Neutralize(LexiconArgs),
}

#[derive(Debug, Args)]
pub struct LexiconArgs {
    /// Tab-separated word list; the bundled list when omitted.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub caption: Vec<String>,
}

/// Contents of the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub similarity: Option<SimilarityArg>,
    pub tl_mode: Option<TlModeArg>,
    pub marginal: Option<MarginalArg>,
    pub mc_n: Option<usize>,
    pub seed: Option<u64>,
    pub shortlist: Option<usize>,
    #[serde(alias = "k_list")]
    pub k: Option<Vec<usize>>,
    pub absolute_bias: Option<bool>,
    pub mixed_policy: Option<MixedPolicyArg>,
    pub jobs: Option<usize>,
    pub adapter: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        toml::from_str(&body).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }
}

pub const DEFAULT_K: [usize; 3] = [1, 5, 10];
