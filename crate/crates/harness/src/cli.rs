//! Command-line front end. Every subcommand reads the same experiment
//! configuration and writes its results into `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ctxtrack_core::backbone::CropJitter;
use ctxtrack_core::ParamStore;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::paramfile;
use crate::respmap::{layer_count, respmap_dump};
use crate::synthetic::{gen_sequence, read_sequence, write_sequence, SyntheticSequence};
use crate::tracker::{events_csv, metrics_csv, run_tracker, summary_csv};
use crate::train::{build_model, toy_train_from};
use crate::triplet::build_triplet;
use crate::updatesim::{decisions_csv, run_update_sim, summarize};

#[derive(Debug, Parser)]
#[command(name = "ctxtrack", version, about = "Toy tracker: synthetic data, training, tracking and diagnostics")]
pub struct Cli {
    /// TOML experiment configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sequence with annotations.
    Gen(OutArgs),
    /// Train on one sequence; writes params.bin and loss.csv.
    Train(TrainArgs),
    /// Track a sequence; writes metrics.csv, events.csv and summary.csv.
    Track(TrackArgs),
    /// Compare update thresholds on synthetic confidence traces.
    UpdateSim(OutArgs),
    /// Write channel-mean graymaps of LCA layer outputs.
    Respmap(RespmapArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SequenceArgs {
    /// Sequence directory written by `gen`; generated from the config if absent.
    #[arg(long)]
    pub sequence: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub sequence: SequenceArgs,
    /// Evaluation-loss interval in steps (0: first and last step only).
    #[arg(long, default_value_t = 50)]
    pub eval_every: usize,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub sequence: SequenceArgs,
    /// Parameter file from `train`; seed-initialized parameters if absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Overrides the configured update strategy.
    #[arg(long)]
    pub strategy: Option<String>,
}

#[derive(Debug, Args)]
pub struct RespmapArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub sequence: SequenceArgs,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Comma-separated full LCA layer indices; all layers if absent.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Frame used as the search image.
    #[arg(long, default_value_t = 1)]
    pub frame: usize,
}

pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sequence(cfg: &ExperimentConfig, args: &SequenceArgs) -> Result<SyntheticSequence> {
    match &args.sequence {
        Some(dir) => read_sequence(dir),
        None => gen_sequence(&cfg.sequence),
    }
}

fn params(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<(ctxtrack_core::model::TrackerModel, ParamStore)> {
    let (model, init) = build_model(cfg)?;
    let Some(path) = path else { return Ok((model, init)) };
    let loaded = paramfile::load(path)?;
    paramfile::check_compatible(&loaded, &init)?;
    Ok((model, loaded))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(HarnessError::io(path))
}

fn out_dir(args: &OutArgs) -> Result<&Path> {
    fs::create_dir_all(&args.out).map_err(HarnessError::io(&args.out))?;
    Ok(&args.out)
}

/// Runs one parsed command; messages for the user go to stdout.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Gen(args) => {
            let seq = gen_sequence(&cfg.sequence)?;
            write_sequence(&seq, &args.out)?;
            println!("wrote {} frames to {}", seq.len(), args.out.display());
        }
        Command::Train(args) => {
            let seq = sequence(&cfg, &args.sequence)?;
            let (model, init) = build_model(&cfg)?;
            let outcome = toy_train_from(&cfg, &seq, &model, init, args.eval_every)?;
            let dir = out_dir(&args.out)?;
            paramfile::save(&outcome.params, &dir.join("params.bin"))?;
            write(&dir.join("loss.csv"), &outcome.curve_csv())?;
            println!(
                "eval loss {:.6} -> {:.6} ({:.1}%)",
                outcome.initial_eval,
                outcome.final_eval,
                100.0 * outcome.final_eval / outcome.initial_eval
            );
        }
        Command::Track(args) => {
            if let Some(s) = args.strategy {
                cfg.update.strategy = s;
                cfg.validate()?;
            }
            let seq = sequence(&cfg, &args.sequence)?;
            let (model, params) = params(&cfg, args.params.as_deref())?;
            let run = run_tracker(&model, &params, &seq, &cfg, &format!("seq{:04}", cfg.sequence.seed))?;
            let runs = [run];
            let dir = out_dir(&args.out)?;
            write(&dir.join("metrics.csv"), &metrics_csv(&runs))?;
            write(&dir.join("events.csv"), &events_csv(&runs))?;
            write(&dir.join("summary.csv"), &summary_csv(&runs))?;
            let m = runs[0].metrics;
            println!("AO {:.4}  SR50 {:.4}  SR75 {:.4}  updates {}", m.ao, m.sr50, m.sr75, runs[0].updates());
        }
        Command::UpdateSim(args) => {
            let outcomes = run_update_sim(&cfg.update_sim, cfg.update_policy()?)?;
            let s = summarize(&outcomes);
            let dir = out_dir(&args)?;
            write(&dir.join("decisions.csv"), &decisions_csv(&outcomes))?;
            write(
                &dir.join("summary.csv"),
                &format!(
                    "drop_traces,p_mean_drop_violations,mean_drop_updates,stable_traces,\
                     stable_mean_at_least_p_mean,stable_mean_updates,stable_p_mean_updates\n{},{},{},{},{},{},{}\n",
                    s.drop_traces,
                    s.p_mean_drop_violations,
                    s.mean_drop_updates,
                    s.stable_traces,
                    s.stable_mean_at_least_p_mean,
                    s.stable_mean_updates,
                    s.stable_p_mean_updates
                ),
            )?;
            println!(
                "drop traces: p-mean updated in {}/{}, mean in {}/{}; stable traces: mean >= p-mean in {}/{}",
                s.p_mean_drop_violations,
                s.drop_traces,
                s.mean_drop_updates,
                s.drop_traces,
                s.stable_mean_at_least_p_mean,
                s.stable_traces
            );
        }
        Command::Respmap(args) => {
            let seq = sequence(&cfg, &args.sequence)?;
            if args.frame >= seq.len() {
                return Err(HarnessError::config(format!("frame {} outside a {}-frame sequence", args.frame, seq.len())));
            }
            let (model, params) = params(&cfg, args.params.as_deref())?;
            let layers = args.layers.unwrap_or_else(|| (0..layer_count(&model)).collect());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let triplet = build_triplet(
                &seq,
                model.config(),
                &cfg.crop,
                (0, CropJitter::NONE),
                (args.frame, CropJitter::NONE),
                &mut rng,
            )?;
            let written = respmap_dump(&model, &params, &triplet, &layers, &args.out.out)?;
            println!("wrote {} graymaps to {}", written.len(), args.out.out.display());
        }
    }
    Ok(())
}
