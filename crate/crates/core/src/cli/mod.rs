//! Command-line surface: `train`, `generate`, `inpaint`, `expand`, `bench`,
//! `grad-demo` and `attn-export`.
//!
//! Every command takes `--config FILE` (flat JSON with dotted keys such as
//! `"train.lr"`) and any number of `--key=value` overrides using the same
//! keys. Exit codes: 0 success, 1 runtime or assertion failure, 2 usage or
//! configuration error.

mod bench;
mod commands;
mod config;
mod render;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use bench::{run_bench, BenchReport, BenchRow};
pub use commands::{
    cmd_attn_export, cmd_bench, cmd_expand, cmd_generate, cmd_grad_demo, cmd_inpaint, cmd_train, parse_known_mask,
};
pub use config::{flatten, parse_overrides, resolve, BenchConfig, Resolved, RunConfig};
pub use render::{ppm_bytes, write_ppm, PALETTE};

use crate::decoding::ExpandMode;
use crate::error::{ArpgError, Result};

#[derive(Debug, Parser)]
#[command(name = "arpg", version, about = "Two-pass randomized parallel decoder for token grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (same as `--out_dir=DIR`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the synthetic shape dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a training snapshot.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Class-conditional generation.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class id; the number of classes selects the null condition.
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Fill the cells a mask file marks with 0.
    Inpaint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Token grid text file.
        #[arg(long)]
        input: PathBuf,
        /// 0/1 grid text file, 1 = known.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 0)]
        class: usize,
    },
    /// Outpaint or upsample a token grid.
    Expand {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// `outpaint` or `resolution`.
        #[arg(long, default_value = "outpaint")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        row: usize,
        #[arg(long, default_value_t = 0)]
        col: usize,
        #[arg(long, default_value_t = 0)]
        class: usize,
    },
    /// Decode timing sweep over step counts and attention patterns.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint; a random model is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Query-gradient sparsity of a masked baseline versus the two-pass model.
    GradDemo {
        #[command(flatten)]
        common: Common,
    },
    /// Final-layer attention probabilities of both passes as CSV.
    AttnExport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Token grid text file; a dataset sample when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        class: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Generate { common, .. }
            | Command::Inpaint { common, .. }
            | Command::Expand { common, .. }
            | Command::Bench { common, .. }
            | Command::GradDemo { common }
            | Command::AttnExport { common, .. } => common,
        }
    }
}

/// Whether `arg` is a `--key=value` configuration override rather than a
/// command flag.
fn is_override(arg: &OsString) -> bool {
    let Some(s) = arg.to_str() else { return false };
    let Some(body) = s.strip_prefix("--") else { return false };
    match body.split_once('=') {
        Some((key, _)) => key.contains('.') || key == "seed" || key == "out_dir",
        None => false,
    }
}

fn exit_code(err: &ArpgError) -> i32 {
    match err {
        ArpgError::Config(_) => 2,
        _ => 1,
    }
}

fn dispatch(command: Command, overrides: Vec<String>) -> Result<i32> {
    let common = command.common();
    let mut overrides = overrides;
    if let Some(out) = &common.out {
        overrides.push(format!("--out_dir={}", serde_json::Value::String(out.display().to_string())));
    }
    let resolved = resolve(common.config.as_deref(), &overrides)?;
    match command {
        Command::Train { resume, .. } => cmd_train(&resolved, resume.as_deref())?,
        Command::Generate { checkpoint, class, count, .. } => cmd_generate(&resolved, &checkpoint, class, count)?,
        Command::Inpaint { checkpoint, input, mask, class, .. } => {
            cmd_inpaint(&resolved, &checkpoint, &input, &mask, class)?
        }
        Command::Expand { checkpoint, input, height, width, mode, row, col, class, .. } => {
            let mode = match mode.as_str() {
                "outpaint" => ExpandMode::Outpaint { row, col },
                "resolution" => ExpandMode::Resolution,
                other => return Err(ArpgError::Config(format!("unknown expand mode '{other}'"))),
            };
            cmd_expand(&resolved, &checkpoint, &input, height, width, mode, class)?
        }
        Command::Bench { checkpoint, .. } => {
            cmd_bench(&resolved, checkpoint.as_deref())?;
        }
        Command::GradDemo { .. } => {
            if !cmd_grad_demo(&resolved)? {
                return Ok(1);
            }
        }
        Command::AttnExport { checkpoint, input, class, .. } => {
            cmd_attn_export(&resolved, &checkpoint, input.as_deref(), class)?;
        }
    }
    Ok(0)
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString>,
{
    let (overrides, rest): (Vec<OsString>, Vec<OsString>) = args.into_iter().map(Into::into).partition(is_override);
    let overrides: Vec<String> = overrides.into_iter().filter_map(|a| a.into_string().ok()).collect();
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command, overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
