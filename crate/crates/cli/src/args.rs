//! Flag definitions. Every subcommand's flags are optional at parse time so a
//! `--config` file can fill the gaps; flags given on the command line win.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "recal", version, about = "Recurrent TPS calibration harness")]
pub struct Cli {
    /// JSON file whose keys mirror the subcommand's flags.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Raise log verbosity (-v info, -vv debug). Overrides RCN_LOG.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic ribbon corpus.
    Gen(GenArgs),
    /// Calibrate one image.
    Calibrate(CalibrateArgs),
    /// Evaluate a localizer over a corpus.
    Eval(EvalArgs),
    /// Render a calibration trace as a strip of panels.
    Viz(VizArgs),
    /// Apply a single TPS warp.
    Warp(WarpArgs),
}

/// Fills every `None` field of `self` from `other`.
pub trait Merge {
    fn merge(self, other: Self) -> Self;
}

macro_rules! mergeable {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl Merge for $ty {
            fn merge(self, other: Self) -> Self {
                Self { $($field: self.$field.or(other.$field)),* }
            }
        }
    };
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenArgs {
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Corpus seed; every sample derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Family weights, e.g. `curve:1,sine:2`.
    #[arg(long)]
    pub families: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Image size, HxW.
    #[arg(long, value_name = "HxW")]
    pub size: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
mergeable!(GenArgs { n, seed, families, k, size, out });

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct CalibrateArgs {
    /// Image to calibrate.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// `heuristic`, `oracle:alpha=A`, `crop:alpha=A,crop=F` or
    /// `descent:template=PATH,steps=N,step=S`.
    #[arg(long)]
    pub localizer: Option<String>,
    /// Ground-truth sidecar for oracle localizers. Defaults to the input
    /// with a `.json` extension.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// `fp-refine` or `direct`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Where outputs go. Defaults to the input's directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Number of fiducial points (even, at least 4).
    #[arg(long)]
    pub k: Option<usize>,
    /// Inset of the base points from the frame border.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Size of intermediate outputs, HxW.
    #[arg(long, value_name = "HxW")]
    pub intermediate_size: Option<String>,
    /// Size of the final output, HxW.
    #[arg(long, value_name = "HxW")]
    pub final_size: Option<String>,
    /// Size of the localizer's input, HxW.
    #[arg(long, value_name = "HxW")]
    pub localizer_input_size: Option<String>,
}
mergeable!(CalibrateArgs { input, localizer, sidecar, iters, mode, out_dir, k, margin, intermediate_size, final_size, localizer_input_size });

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub localizer: Option<String>,
    /// Comma-separated iteration counts.
    #[arg(long)]
    pub iters: Option<String>,
    /// Comma-separated modes.
    #[arg(long)]
    pub modes: Option<String>,
    /// Worker threads; 0 means one per logical core.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Directory for report.csv and report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of fiducial points (even, at least 4).
    #[arg(long)]
    pub k: Option<usize>,
    /// Inset of the base points from the frame border.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Size of intermediate outputs, HxW.
    #[arg(long, value_name = "HxW")]
    pub intermediate_size: Option<String>,
    /// Size of the final output, HxW.
    #[arg(long, value_name = "HxW")]
    pub final_size: Option<String>,
    /// Size of the localizer's input, HxW.
    #[arg(long, value_name = "HxW")]
    pub localizer_input_size: Option<String>,
}
mergeable!(EvalArgs { manifest, localizer, iters, modes, jobs, out, k, margin, intermediate_size, final_size, localizer_input_size });

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct VizArgs {
    /// Trace JSON written by `calibrate`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// The original image the trace was computed on.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output PNG. Defaults to the trace path with a `.viz.png` suffix.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
mergeable!(VizArgs { trace, input, out });

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct WarpArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// JSON list of `[x, y]` targets, or an object with `gt_fiducials`.
    #[arg(long)]
    pub fiducials: Option<PathBuf>,
    /// Expected number of fiducials; checked against the file.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Output size, HxW.
    #[arg(long, value_name = "HxW")]
    pub size: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
mergeable!(WarpArgs { input, fiducials, k, margin, size, out });

/// Reads a config file into the subcommand's flag struct.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("--config: cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))
}

pub fn parse_size(flag: &str, text: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--{flag}: expected HxW with both at least 2, got '{text}'"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let (h, w): (usize, usize) = (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?);
    if h < 2 || w < 2 {
        return Err(bad());
    }
    Ok((h, w))
}

pub fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = text
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| CliError::Usage(format!("--{flag}: '{s}': {e}"))))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("--{flag} is empty")));
    }
    Ok(items)
}

pub fn required<T>(flag: &str, value: Option<T>) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}
