use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "biaspath",
    version,
    about = "Causal-intervention analysis and targeted debiasing of small transformers"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for every random choice; a fresh one is drawn and recorded when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true, env = "BIASPATH_THREADS")]
    pub threads: Option<usize>,
    /// Directory for reports and other artifacts.
    #[arg(long, global = true, env = "BIASPATH_OUT", default_value = "biaspath-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create, train or inspect checkpoints.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Run one experiment and write its report.
    #[command(subcommand)]
    Run(RunCmd),
    /// Masked fine-tuning on a counterfactual corpus, with preference and perplexity before and after.
    Debias(DebiasArgs),
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Dataset generation and filtering.
    #[command(subcommand)]
    Data(DataCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 4 layers, 4 heads, d_model 64, with zero-centroid gendered embeddings.
    Toy,
    /// The toy shape with plain Gaussian initialization.
    Random,
}

#[derive(Debug, Args)]
pub struct ModelFiles {
    /// Checkpoint manifest (JSON; the blob sits next to it).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ModelCmd {
    /// Write a freshly initialized checkpoint.
    Init {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
        /// Manifest path of the new checkpoint.
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a checkpoint on a text corpus (one line per sequence).
    Train(TrainArgs),
    /// Print the config and parameter count.
    Info {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate the synthetic corpus and train the reference toy model.
    Toy {
        /// Probability that a profession line's pronoun matches the planted gender.
        #[arg(long, default_value_t = 0.95)]
        bias: f64,
        /// Override the number of training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Directory for model.json, model.bin, vocab.txt and recipe.json.
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub files: ModelFiles,
    /// Training text, one sequence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// `full`, `none`, `mlp:0..4`, `mlp:0,2` or `heads:1.2,3.0`.
    #[arg(long, default_value = "full")]
    pub mask: String,
    /// Keep the embedding matrix frozen on top of the mask.
    #[arg(long)]
    pub freeze_embeddings: bool,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Training-time probability of silencing each attention head.
    #[arg(long, default_value_t = 0.0)]
    pub head_dropout: f64,
    /// Training-time probability of silencing each MLP in --dropout-layers.
    #[arg(long, default_value_t = 0.0)]
    pub mlp_dropout: f64,
    #[arg(long, default_value = "")]
    pub dropout_layers: String,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    /// Manifest path of the trained checkpoint.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    LastToken,
    AllTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Pairing {
    Anchor,
    SameLength,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub files: ModelFiles,
    /// Template file, one template per line with a `[profession]` placeholder.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Professions JSON: {"male": [...], "female": [...]}.
    #[arg(long)]
    pub professions: Option<PathBuf>,
    /// Span alignment between clean and corrupt prompts.
    #[arg(long, value_enum, default_value = "all-tokens")]
    pub mode: Mode,
    #[arg(long, value_enum, default_value = "anchor")]
    pub pairing: Pairing,
    /// Arithmetic precision of the analysis.
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Family {
    MlpOut,
    AttnOut,
    ResidPre,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Site {
    Span,
    Final,
}

#[derive(Debug, Subcommand)]
pub enum RunCmd {
    /// MLP-output patching at the profession span over layer prefixes.
    MlpSweep {
        #[command(flatten)]
        samples: SampleArgs,
        /// Layers to sweep, `a..b` or a comma list.
        #[arg(long)]
        layers: String,
        /// Patch each layer alone instead of growing prefixes.
        #[arg(long)]
        single: bool,
    },
    /// Attribution-ranked head patching, direct and grouped by layer.
    AttnTopk {
        #[command(flatten)]
        samples: SampleArgs,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        k: Vec<usize>,
        /// Highest layer considered (default: last layer).
        #[arg(long)]
        ceiling: Option<usize>,
    },
    /// MLP patching at the final position for layers at or above the floor.
    UpperMlp {
        #[command(flatten)]
        samples: SampleArgs,
        /// Lowest patched layer (default: half the depth).
        #[arg(long)]
        floor: Option<usize>,
    },
    /// Per-layer logit lens on every template sample.
    LogitLens {
        #[command(flatten)]
        samples: SampleArgs,
    },
    /// Greedy generations with and without the span patch on sampled reversal cases.
    GenCheck {
        #[command(flatten)]
        samples: SampleArgs,
        #[arg(long, value_enum, default_value = "mlp-out")]
        family: Family,
        #[arg(long, default_value = "0..3")]
        layers: String,
        #[arg(long, default_value_t = 20)]
        n_samples: usize,
        #[arg(long, default_value_t = 30)]
        n_tokens: usize,
        /// Gender word filter JSON (default: shipped lists).
        #[arg(long)]
        filter: Option<PathBuf>,
    },
    /// Top next-token lists before and after patching one prompt with another.
    FeatureProbe {
        #[command(flatten)]
        files: ModelFiles,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        counter: String,
        #[arg(long, value_enum, default_value = "mlp-out")]
        family: Family,
        #[arg(long, default_value = "0")]
        layers: String,
        #[arg(long, value_enum, default_value = "span")]
        site: Site,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Attribution scores against exhaustive single-head patching deltas.
    AttributionOracle {
        #[command(flatten)]
        samples: SampleArgs,
        #[arg(long)]
        ceiling: Option<usize>,
        /// Evaluate a seeded subset of at most this many pairs.
        #[arg(long)]
        max_pairs: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct DebiasArgs {
    #[command(flatten)]
    pub files: ModelFiles,
    /// Counterfactual training text, one sequence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Evaluation pair sets as `name=path.jsonl`; repeatable.
    #[arg(long = "eval", required = true)]
    pub eval: Vec<String>,
    /// Gender-neutral text for perplexity.
    #[arg(long)]
    pub neutral: PathBuf,
    #[arg(long, default_value = "mlp:0..4")]
    pub mask: String,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    /// Manifest path of the fine-tuned checkpoint.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Fraction of minimal pairs whose stereotypical sentence scores higher.
    Preference {
        #[command(flatten)]
        files: ModelFiles,
        /// JSON-lines pair files; repeatable.
        #[arg(long = "pairs", required = true)]
        pairs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
}

#[derive(Debug, Subcommand)]
pub enum DataCmd {
    /// Synthetic planted-bias corpus, evaluation pairs and the toy vocabulary.
    Synth {
        #[arg(long, default_value_t = 0.95)]
        bias: f64,
        #[arg(long, default_value_t = 4000)]
        profession_lines: usize,
        #[arg(long, default_value_t = 600)]
        object_lines: usize,
        #[arg(long, default_value_t = 800)]
        neutral_lines: usize,
    },
    /// Keep perturbation records that only swap binary gender words.
    FilterPerturb {
        /// JSON-lines records {"original": .., "perturbed": ..}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        filter: Option<PathBuf>,
    },
}
