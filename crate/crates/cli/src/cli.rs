//! Argument parsing and dispatch for the `csanet` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use csanet::data::{BoundingBox, Split};

use crate::commands::{
    cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_predict, cmd_train, gradcheck_verdict, EvalData,
    GenDataArgs,
};
use crate::config::{parse_difficulty, RunConfig};
use crate::error::CliResult;

/// Prints a line, ignoring a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Debug, Parser)]
#[command(
    name = "csanet",
    version,
    about = "Train, evaluate and inspect pose networks"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Config file, or a preset name (desk, overfit, baseline-sbn, cap-only, ...).
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Overrides the run seed (the data seed for gen-data).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Do not echo log lines to stdout.
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint with OKS-based AP.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by gen-data; defaults to the configured split.
        #[arg(long, conflicts_with = "split")]
        data: Option<PathBuf>,
        /// Generated split to score: train or val.
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        /// Average with predictions on the mirrored crops.
        #[arg(long)]
        flip_test: bool,
    },
    /// Predict keypoints for one person box in an image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Person box as x,y,w,h in image pixels.
        #[arg(long = "box", value_parser = parse_box)]
        bbox: BoundingBox,
        #[arg(long)]
        flip_test: bool,
        /// Also write the 17 heatmaps as grayscale PGM files.
        #[arg(long)]
        dump_heatmaps: bool,
    },
    /// Finite-difference gradient checks of every op and the micro network.
    Gradcheck {
        /// Accepted for clarity; the network check always uses the micro config.
        #[arg(long)]
        micro_config: bool,
        /// Check the deliberately broken op as a regular op (the run must fail).
        #[arg(long)]
        corrupt: bool,
    },
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "easy", value_parser = parse_difficulty)]
        difficulty: csanet::data::Difficulty,
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: Split,
        /// Crop size HxW.
        #[arg(long, default_value = "128x96", value_parser = parse_size)]
        input_size: (usize, usize),
        /// Store one augmented view per sample.
        #[arg(long)]
        augment: bool,
    },
}

fn parse_split(v: &str) -> Result<Split, String> {
    match v {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(format!("expected train or val, got `{v}`")),
    }
}

fn parse_box(v: &str) -> Result<BoundingBox, String> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("{e}"))?;
    match parts[..] {
        [x, y, w, h] if w > 0.0 && h > 0.0 && x.is_finite() && y.is_finite() => {
            Ok(BoundingBox::new(x, y, w, h))
        }
        [_, _, _, _] => Err("box width and height must be positive".into()),
        _ => Err(format!("expected x,y,w,h, got `{v}`")),
    }
}

fn parse_size(v: &str) -> Result<(usize, usize), String> {
    let (h, w) = v
        .split_once('x')
        .ok_or_else(|| format!("expected HxW, got `{v}`"))?;
    Ok((
        h.parse().map_err(|_| format!("bad height `{h}`"))?,
        w.parse().map_err(|_| format!("bad width `{w}`"))?,
    ))
}

fn config_from(global: &GlobalArgs) -> CliResult<RunConfig> {
    let mut cfg = match &global.config {
        Some(c) => RunConfig::load(c)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.io.out = out.clone();
    }
    Ok(cfg)
}

/// Executes a parsed command, printing results to stdout.
pub fn execute(cli: Cli) -> CliResult<()> {
    let cfg = config_from(&cli.global)?;
    let expected = cli.global.config.is_some().then_some(&cfg);
    let out = cfg.io.out.clone();
    match cli.command {
        Command::Train { resume, quiet } => {
            let summary = cmd_train(cfg.clone(), resume.as_deref(), &mut |line| {
                if !quiet {
                    say!("{line}");
                }
            })?;
            if let (Some(a), Some(b)) = (summary.first_loss, summary.last_loss) {
                say!(
                    "trained {} steps: l_total {} -> {}",
                    summary.state.global_step,
                    a.l_total,
                    b.l_total
                );
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            flip_test,
        } => {
            let data = match data {
                Some(d) => EvalData::Dir(d),
                None => EvalData::Generated(split.unwrap_or(Split::Val)),
            };
            let flip = flip_test || cfg.eval.flip_test && expected.is_some();
            let report = cmd_eval(&checkpoint, expected, &data, flip, &out)?;
            say!("{}", report.summary());
        }
        Command::Predict {
            checkpoint,
            image,
            bbox,
            flip_test,
            dump_heatmaps,
        } => {
            let record = cmd_predict(
                &checkpoint,
                expected,
                &image,
                bbox,
                flip_test,
                dump_heatmaps,
                &out,
            )?;
            say!("{}", serde_json::to_string(&record)?);
        }
        Command::Gradcheck {
            micro_config: _,
            corrupt,
        } => {
            let rows = cmd_gradcheck(cli.global.seed.unwrap_or(0), corrupt)?;
            for r in &rows {
                say!("{}", r.line());
            }
            gradcheck_verdict(&rows)?;
            say!("all gradient checks passed");
        }
        Command::GenData {
            n,
            difficulty,
            split,
            input_size,
            augment,
        } => {
            let args = GenDataArgs {
                n,
                seed: cli.global.seed.unwrap_or(cfg.data.seed),
                split,
                difficulty,
                input_size,
                augment,
            };
            let ds = cmd_gen_data(&args, &out)?;
            say!("wrote {} samples to {}", ds.samples.len(), out.display());
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code (0 ok, 1 usage or runtime
/// error, 2 failed numerical check).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_parsing() {
        assert_eq!(
            parse_box("1,2.5,30,40").unwrap(),
            BoundingBox::new(1.0, 2.5, 30.0, 40.0)
        );
        assert!(parse_box("1,2,0,4").is_err());
        assert!(parse_box("1,2,3").is_err());
        assert!(parse_box("a,b,c,d").is_err());
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["csanet", "frobnicate"]), 1);
        assert_eq!(run(["csanet", "eval"]), 1);
        assert_eq!(run(["csanet", "--help"]), 0);
    }

    #[test]
    fn bad_config_exits_with_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "optim.batch_size = 0\n").unwrap();
        let args = ["csanet", "--config", path.to_str().unwrap(), "train"];
        assert_eq!(run(args), 1);
    }
}
