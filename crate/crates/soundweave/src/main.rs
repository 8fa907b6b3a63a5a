//! Thin command-line front end over the library pipeline.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use soundweave::config::RunConfig;
use soundweave::pipeline::{
    cmd_eval, cmd_gen_data, cmd_generate, cmd_train_acoustic, cmd_train_semantic, write_report,
    GenerateArgs, SpeechSource, TrainArgs,
};

#[derive(Parser)]
#[command(
    name = "soundweave",
    version,
    about = "Two-stage masked generative token pipeline on a synthetic audio-visual world",
    long_about = "Generate paired synthetic data, train the two-stage token pipeline \
                  (video+speech -> semantic tokens -> acoustic code layers), run two-stage \
                  generation, and evaluate. Shipped decoding defaults: semantic stage 16 steps \
                  at guidance scale 5.0; acoustic stage [20, 10, 1, 1] steps at guidance scale 2.5."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (key = value lines); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Worker threads for data-parallel work.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of samples to generate.
        #[arg(long)]
        n: usize,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
        /// Master seed override (defaults to world.seed from the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one pipeline stage.
    Train {
        #[command(flatten)]
        common: Common,
        /// Which stage to train.
        #[arg(long)]
        stage: Stage,
        /// Training dataset path.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path (a .log file is written alongside).
        #[arg(long)]
        out: PathBuf,
        /// Training step count override.
        #[arg(long)]
        steps: Option<usize>,
        /// Training seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Ablation: train stage one with the speech condition permanently dropped.
        #[arg(long, default_value_t = false)]
        no_speech_condition: bool,
    },
    /// Run two-stage generation over a dataset's videos.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Stage-one checkpoint.
        #[arg(long)]
        v2as: PathBuf,
        /// Stage-two bundle checkpoint.
        #[arg(long)]
        vs2a: PathBuf,
        /// Dataset providing video conditions (and transcripts or source audio).
        #[arg(long)]
        data: PathBuf,
        /// Output file of generated token sequences.
        #[arg(long)]
        out: PathBuf,
        /// Where the speech condition comes from: each sample's transcript via
        /// the text-to-speech-token oracle, or extraction from its audio.
        #[arg(long, value_enum, default_value_t = Mode::Transcript)]
        mode: Mode,
        /// Comma-separated word ids applied to every sample instead of its
        /// own transcript; an empty string means silence.
        #[arg(long)]
        transcript: Option<String>,
        /// Generate only the first N samples.
        #[arg(long)]
        n: Option<usize>,
        /// Decoding seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Stage-one decoding steps (default 16).
        #[arg(long)]
        steps: Option<usize>,
        /// Stage-one guidance scale (default 5.0).
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Stage-two per-layer decoding steps, comma separated (default 20,10,1,1).
        #[arg(long)]
        vs2a_steps: Option<String>,
        /// Stage-two guidance scale (default 2.5).
        #[arg(long)]
        vs2a_cfg_scale: Option<f64>,
    },
    /// Evaluate generated tokens against a reference dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Generated-token file (or a dataset, for self-evaluation).
        #[arg(long)]
        generated: PathBuf,
        /// Reference dataset path.
        #[arg(long)]
        data: PathBuf,
        /// Report output path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    V2as,
    Vs2a,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Transcript,
    Audio,
}

fn load_config(path: &Option<PathBuf>) -> soundweave::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_id_list(text: &str) -> Result<Vec<u32>, String> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<u32>()
                .map_err(|_| format!("cannot parse word id '{part}'"))
        })
        .collect()
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>, String> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| format!("cannot parse step count '{part}'"))
        })
        .collect()
}

fn usage_error(message: &str) -> ExitCode {
    eprintln!("usage error: {message}");
    ExitCode::from(2)
}

fn run() -> Result<ExitCode, soundweave::Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            common,
            n,
            out,
            seed,
        } => {
            if n == 0 {
                return Ok(usage_error("--n must be at least 1"));
            }
            let mut config = load_config(&common.config)?;
            if let Some(seed) = seed {
                config.world.master_seed = seed;
            }
            let summary = cmd_gen_data(&config, n, &out, common.workers)?;
            println!(
                "wrote {} samples ({} bytes) to {} [config {}]",
                summary.samples,
                summary.bytes,
                out.display(),
                summary.config_hash
            );
            println!(
                "speech/background chi-square sanity: {:.2} (dof {})",
                summary.chi_square, summary.chi_square_dof
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            common,
            stage,
            data,
            out,
            steps,
            seed,
            resume,
            no_speech_condition,
        } => {
            if matches!(steps, Some(0)) {
                return Ok(usage_error("--steps must be at least 1"));
            }
            let config = load_config(&common.config)?;
            let args = TrainArgs {
                config: &config,
                dataset_path: &data,
                out_checkpoint: &out,
                steps_override: steps,
                seed_override: seed,
                workers: common.workers,
                resume: resume.as_deref(),
                disable_speech_condition: no_speech_condition,
            };
            let summary = match stage {
                Stage::V2as => cmd_train_semantic(&args)?,
                Stage::Vs2a => cmd_train_acoustic(&args)?,
            };
            println!(
                "trained {} steps (final loss {:.6}); checkpoint {}, log {}",
                summary.steps_done,
                summary.final_loss,
                out.display(),
                summary.log_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Generate {
            common,
            v2as,
            vs2a,
            data,
            out,
            mode,
            transcript,
            n,
            seed,
            steps,
            cfg_scale,
            vs2a_steps,
            vs2a_cfg_scale,
        } => {
            if matches!(n, Some(0)) {
                return Ok(usage_error("--n must be at least 1"));
            }
            let transcript_override = match &transcript {
                Some(text) => match parse_id_list(text) {
                    Ok(ids) => Some(ids),
                    Err(message) => return Ok(usage_error(&message)),
                },
                None => None,
            };
            let vs2a_steps = match &vs2a_steps {
                Some(text) => match parse_usize_list(text) {
                    Ok(steps) => Some(steps),
                    Err(message) => return Ok(usage_error(&message)),
                },
                None => None,
            };
            let config = load_config(&common.config)?;
            let summary = cmd_generate(&GenerateArgs {
                config: &config,
                v2as_checkpoint: &v2as,
                vs2a_checkpoint: &vs2a,
                dataset_path: &data,
                out: &out,
                mode: match mode {
                    Mode::Transcript => SpeechSource::Transcript,
                    Mode::Audio => SpeechSource::Audio,
                },
                transcript_override,
                limit: n,
                seed_override: seed,
                v2as_steps: steps,
                v2as_cfg_scale: cfg_scale,
                vs2a_steps,
                vs2a_cfg_scale,
                workers: common.workers,
            })?;
            println!(
                "generated {} samples ({} bytes) to {}",
                summary.samples,
                summary.out_bytes,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            common,
            generated,
            data,
            out,
        } => {
            let config = load_config(&common.config)?;
            let report = cmd_eval(&config, &generated, &data, common.workers)?;
            write_report(&report, &out)?;
            print!("{}", report.to_text());
            println!("report written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::FAILURE
        }
    }
}
