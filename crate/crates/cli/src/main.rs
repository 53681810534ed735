//! `vitseg`: layer/head analysis and training-free segmentation with CLIP vision encoders.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "vitseg", version, about = "CLIP ViT analysis and training-free open-vocabulary segmentation")]
pub struct Cli {
    /// Vision encoder container (.lhtw).
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Class text-embedding container (.lhtw).
    #[arg(long, global = true)]
    pub text: Option<PathBuf>,
    /// Strategy config (.toml or .json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for sample selection.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-layer discriminability AUC and alignment accuracy -> layer_auc.csv
    AnalyzeLayers(AnalyzeArgs),
    /// Per-head discriminability AUC and ranking -> head_auc.csv, head_ranking.csv
    AnalyzeHeads(HeadArgs),
    /// Per-token Hoyer scores at every layer -> hoyer_map.csv
    Hoyer(HoyerArgs),
    /// Sliding-window segmentation of one image or a sample list
    Segment(SegmentArgs),
    /// mIoU of a prediction directory against ground truth -> metrics.csv
    Eval(EvalArgs),
    /// Turn a head ranking into a strategy config selecting its top-k heads
    RankExport(RankExportArgs),
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Sample list: `image label [dataset]` per line.
    #[arg(long)]
    pub samples: PathBuf,
    /// Seeded random subset of this many samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 255)]
    pub ignore: u32,
    /// Square input side (defaults to the model's native size).
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct HeadArgs {
    #[command(flatten)]
    pub common: AnalyzeArgs,
    /// Skip abnormal-token replacement on head features.
    #[arg(long)]
    pub no_atr: bool,
}

#[derive(Args, Debug)]
pub struct HoyerArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long, conflicts_with = "samples", required_unless_present = "samples")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Output map for a single image (defaults to <out-dir>/<stem>.png).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// vitb | vitl | custom; replaces the config file's profile.
    #[arg(long)]
    pub profile: Option<String>,
    /// vanilla | identity_no_ffn_no_residual | sclip_qqkk | clearclip
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value_t = 336)]
    pub short_side: usize,
    #[arg(long, default_value_t = 224)]
    pub crop: usize,
    #[arg(long, default_value_t = 112)]
    pub stride: usize,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 255)]
    pub ignore: u32,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Class names, one per line (defaults to the --text container's names).
    #[arg(long)]
    pub classes: Option<PathBuf>,
    #[arg(long, default_value_t = 255)]
    pub ignore: u32,
    /// Defaults to <out-dir>/metrics.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RankExportArgs {
    #[arg(long)]
    pub ranking: PathBuf,
    #[arg(long)]
    pub top_k: usize,
    #[arg(long, default_value = "custom")]
    pub profile: String,
    /// Defaults to <out-dir>/she_heads.toml.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vitseg: {e}");
            match e {
                io::CliError::Config(_) => ExitCode::from(2),
                io::CliError::Data(_) => ExitCode::from(3),
            }
        }
    }
}
