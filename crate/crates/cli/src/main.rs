use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use eventlm::pipeline::{self, PipelineConfig, PipelineError};
use eventlm::synth::parse_proportions;

#[derive(Parser)]
#[command(name = "eventlm", version, about = "Eventuality graph walks, masking and encoder pretraining")]
struct Cli {
    /// TOML pipeline config; defaults apply when omitted
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Dotted override such as `walk.num_sequences=20000`; repeatable
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Global seed, replacing every stage seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Walk sampler threads
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph with a planted relation structure
    SynthKg(SynthArgs),
    /// Validate the graph and write a summary
    Ingest,
    /// Sample walk paths and build the vocabulary
    Sample,
    /// Verbalize and mask the corpus into training instances
    Mask,
    /// Train the encoder and write a checkpoint and loss trace
    Train,
    /// Rank connectives for probe queries
    Probe,
    /// Held-out relation accuracy and choice accuracy
    Eval,
    /// Finite-difference gradient check
    Gradcheck,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    num_nodes: Option<usize>,

    /// Relation proportions as `Reason=2,Result=1,...`
    #[arg(long, value_name = "SPEC")]
    relations: Option<String>,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(w) = cli.workers {
        overrides.push(format!("walk.workers={w}"));
    }
    if let Command::SynthKg(args) = &cli.command {
        if let Some(n) = args.num_nodes {
            overrides.push(format!("synth.num_nodes={n}"));
        }
    }
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    if let Command::SynthKg(SynthArgs {
        relations: Some(spec), ..
    }) = &cli.command
    {
        cfg.synth.relation_proportions = parse_proportions(spec).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string(value).context("serializing stage summary")?);
    Ok(())
}

fn run(cli: &Cli, cfg: &PipelineConfig) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthKg(_) => print_json(&pipeline::run_synth(cfg)?),
        Command::Ingest => print_json(&pipeline::run_ingest(cfg)?),
        Command::Sample => {
            let s = pipeline::run_sample(cfg)?;
            println!(
                "{{\"paths\":{},\"vocab_size\":{},\"histogram\":{}}}",
                s.paths,
                s.vocab_size,
                s.histogram.to_json()
            );
            Ok(())
        }
        Command::Mask => print_json(&pipeline::run_mask(cfg)?),
        Command::Train => print_json(&pipeline::run_train(cfg)?),
        Command::Probe => {
            for r in pipeline::run_probe(cfg)? {
                print_json(&r)?;
            }
            Ok(())
        }
        Command::Eval => {
            let out = pipeline::run_eval(cfg)?;
            print_json(&serde_json::json!({
                "relation_accuracy": out.relation.accuracy,
                "cloze_accuracy": out.relation.cloze_accuracy,
                "heldout_edges": out.relation.total,
                "choice": out.choice,
            }))
        }
        Command::Gradcheck => {
            let r = pipeline::run_gradcheck(cfg)?;
            print_json(&serde_json::json!({
                "coordinates": r.checks.len(),
                "tensors_checked": r.tensors_checked,
                "tensors_total": r.tensors_total,
                "max_rel_error": r.max_rel_error,
            }))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.downcast_ref::<PipelineError>()
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    log::info!("seed {}", cfg.seed);
    log::info!("resolved config:\n{}", cfg.to_toml());

    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
