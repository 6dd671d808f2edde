//! `electric`: train, verify, score and re-rank with energy-based cloze
//! models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use electric_core::data::synth;
use electric_core::scoring::{
    default_lambda_grid, read_nbest, run_rerank, synthetic_harness, write_nbest, HarnessConfig, ScoreMode,
    SequenceScorer,
};
use electric_core::train::{run_train, Checkpoint, RunConfig, Trainer};
use electric_core::verify;
use electric_core::Error;

const CONFIG_ENV: &str = "ELECTRIC_CONFIG";

#[derive(Parser)]
#[command(name = "electric", version, about = "Energy-based cloze models trained with noise-contrastive estimation")]
struct Cli {
    /// key=value config file; falls back to $ELECTRIC_CONFIG, then defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) a run; overrides look like --train.steps=500.
    Train(TrainArgs),
    /// Print the PLL of each line of a text file.
    Score(ScoreArgs),
    /// Re-rank n-best lists, selecting λ per subset on dev.
    Rerank(RerankArgs),
    /// Run the built-in consistency checks; exits 2 on any failure.
    Verify(SeedArgs),
    /// Finite-difference check of the NCE loss gradient.
    Gradcheck(SeedArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
    /// Generate synthetic data.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(allow_hyphen_values = true, trailing_var_arg = true, value_name = "--SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// electric, mlm or electra_tt.
    #[arg(long, default_value = "electric")]
    mode: String,
}

#[derive(Args)]
struct RerankArgs {
    /// Not needed for mode none.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    nbest: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    /// electric, mlm, electra_tt or none.
    #[arg(long, default_value = "electric")]
    mode: String,
    /// Comma-separated λ values; defaults to 0.05, 0.10, ..., 1.00.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
}

#[derive(Args)]
struct SeedArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
    /// List every array with its shape.
    #[arg(long)]
    arrays: bool,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// A one-sentence-per-line corpus from the toy grammar.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        max_chars: usize,
    },
    /// Dev and test n-best lists with references.
    Nbest {
        #[arg(long)]
        nbest_out: PathBuf,
        #[arg(long)]
        refs_out: PathBuf,
        /// Per portion and subset.
        #[arg(long, default_value_t = 200)]
        utterances: usize,
        #[arg(long, default_value_t = 100)]
        hypotheses: usize,
        #[arg(long, value_delimiter = ',', default_value = "clean")]
        subsets: Vec<String>,
        #[arg(long, default_value_t = 1.0)]
        acoustic_noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        max_chars: usize,
    },
}

/// Reported failure of a `verify` check, mapped to exit code 2.
#[derive(Debug)]
struct VerificationFailed;

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for VerificationFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<VerificationFailed>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. } | Error::Divergence(_)) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config_path = cli.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    match cli.command {
        Command::Train(a) => train(config_path.as_deref(), &a.overrides),
        Command::Score(a) => score(&a),
        Command::Rerank(a) => rerank(&a),
        Command::Verify(a) => run_verify(a.seed),
        Command::Gradcheck(a) => {
            let err = verify::nce_gradient_error(a.seed)?;
            println!("max relative error {err:.3e}");
            if err < 1e-4 {
                Ok(())
            } else {
                Err(VerificationFailed.into())
            }
        }
        Command::Inspect(a) => inspect(&a),
        Command::Synth(s) => synth_data(s),
    }
}

/// Defaults, then the config file, then `--section.key=value` overrides.
fn load_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        config.apply_text(&text).with_context(|| format!("in config {}", p.display()))?;
    }
    for o in overrides {
        let Some((key, value)) = o.strip_prefix("--").and_then(|kv| kv.split_once('=')) else {
            bail!("override {o:?} is not of the form --section.key=value");
        };
        config.set(key, value)?;
    }
    config.validate()?;
    Ok(config)
}

fn train(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<()> {
    let config = load_config(path, overrides)?;
    let summary = run_train(&config, |m| {
        if m.name.starts_with("heldout") {
            eprintln!("{m}");
        }
    })?;
    if let Some(s) = summary.resumed_from {
        eprintln!("resumed from step {s}");
    }
    println!("final step {}", summary.final_step);
    println!("checkpoint {}", summary.final_checkpoint.display());
    Ok(())
}

fn load_trainer(path: &Path) -> anyhow::Result<Trainer> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Trainer::from_checkpoint(&ckpt)?)
}

fn score(a: &ScoreArgs) -> anyhow::Result<()> {
    let mode: ScoreMode = a.mode.parse()?;
    let trainer = load_trainer(&a.checkpoint)?;
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut scorer = SequenceScorer::new(&trainer, mode)?;
    for line in text.lines() {
        let pll = scorer.score(line)?;
        println!("{pll}\t{line}");
    }
    eprintln!(
        "sequences {} tokens {} passes {} noise_passes {}",
        scorer.sequences,
        scorer.tokens,
        scorer.main_passes(),
        scorer.noise_passes()
    );
    Ok(())
}

fn rerank(a: &RerankArgs) -> anyhow::Result<()> {
    let mode: ScoreMode = a.mode.parse()?;
    let lists = read_nbest(&a.nbest, &a.refs)?;
    let trainer = a.checkpoint.as_deref().map(load_trainer).transpose()?;
    let grid = a.lambda_grid.clone().unwrap_or_else(default_lambda_grid);
    let report = run_rerank(trainer.as_ref(), mode, &lists, &grid)?;
    print!("{report}");
    Ok(())
}

fn run_verify(seed: u64) -> anyhow::Result<()> {
    let checks = verify::run_all(seed)?;
    for c in &checks {
        println!("{c}");
    }
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(VerificationFailed.into())
    }
}

fn inspect(a: &InspectArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    let c = trainer.config();
    println!("step\t{}", trainer.step());
    println!("objective\t{}", c.objective);
    println!("vocab\t{} ({}, {} reserved)", trainer.vocab().len(), c.vocab_mode, electric_core::data::NUM_RESERVED);
    println!(
        "encoder\t{} layers, hidden {}, {} heads, ffn {}, max_seq_len {}",
        c.num_layers, c.hidden_size, c.num_heads, c.ffn_size, c.max_seq_len
    );
    if let Some(n) = trainer.noise() {
        let t = n.config();
        println!("towers\thidden {}, {} heads, ffn {}", t.hidden_size, t.num_heads, t.ffn_size);
    }
    println!("parameters\t{}", trainer.store().num_scalars());
    println!("arrays\t{}", ckpt.arrays.len());
    if a.arrays {
        for arr in &ckpt.arrays {
            println!("  {}\t{:?}", arr.name, arr.shape);
        }
    }
    Ok(())
}

fn synth_data(s: SynthCommand) -> anyhow::Result<()> {
    match s {
        SynthCommand::Corpus {
            out,
            bytes,
            seed,
            max_chars,
        } => {
            let lines = synth::corpus(seed, bytes, max_chars);
            let mut text = lines.join("\n");
            text.push('\n');
            std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            println!("{} lines", lines.len());
        }
        SynthCommand::Nbest {
            nbest_out,
            refs_out,
            utterances,
            hypotheses,
            subsets,
            acoustic_noise,
            seed,
            max_chars,
        } => {
            let config = HarnessConfig {
                hypotheses,
                acoustic_noise,
                seed,
                ..HarnessConfig::default()
            };
            let subsets: Vec<&str> = subsets.iter().map(String::as_str).collect();
            let lists = synthetic_harness(utterances, &subsets, max_chars, &config);
            write_nbest(&lists, &nbest_out, &refs_out)?;
            println!("{} lists", lists.len());
        }
    }
    Ok(())
}
