//! `sythia`: command-line front door for the synthetic agentic-data
//! pipelines. Each subcommand runs one pipeline; `all` chains them in order.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sythia_core::config::{env_snapshot, load_config, Overrides};
use sythia_core::driver::{run, Command as Pipeline};

#[derive(Parser)]
#[command(name = "sythia", version, about = "Synthetic agentic tool-use data generation")]
struct Cli {
    /// TOML configuration file; flags and environment override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// JSONL file of scripted backend replies (deterministic offline mode).
    #[arg(long, global = true)]
    script: Option<String>,

    /// Completion endpoint; SYTHIA_ENDPOINT also works.
    #[arg(long, global = true)]
    endpoint: Option<String>,

    /// Model name sent to the backend.
    #[arg(long, global = true)]
    model: Option<String>,

    /// Maximum concurrent backend requests.
    #[arg(long, global = true)]
    max_in_flight: Option<usize>,

    /// Root seed; every derived generator is seeded from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Backend attempts per generation gate.
    #[arg(long, global = true)]
    retry_budget: Option<usize>,

    /// Output directory for artifacts and manifests.
    #[arg(long, global = true)]
    out: Option<String>,

    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Args)]
struct RecordArgs {
    /// Enterprise domain to generate for.
    #[arg(long)]
    domain: Option<String>,

    /// Fixed use case; skips use-case generation.
    #[arg(long)]
    use_case: Option<String>,

    /// Number of records to synthesize.
    #[arg(long)]
    records: Option<usize>,

    /// Alternative scenarios generated per record.
    #[arg(long)]
    expand_scenarios: Option<usize>,
}

#[derive(Args)]
struct DagArgs {
    /// Records to derive workflows from.
    #[arg(long)]
    dags: Option<usize>,

    /// Largest workflow size considered.
    #[arg(long)]
    max_nodes: Option<usize>,

    /// Judge rating threshold (1..5); lower-rated samples are filtered.
    #[arg(long)]
    threshold: Option<u8>,

    /// Utterance repair attempts after a non-executable verdict.
    #[arg(long)]
    max_repairs: Option<usize>,

    /// Existing record JSONL to read instead of generating.
    #[arg(long = "in")]
    input: Option<String>,
}

#[derive(Args)]
struct DialogueArgs {
    /// Conversations to simulate.
    #[arg(long)]
    conversations: Option<usize>,

    /// Maximum user turns per conversation.
    #[arg(long)]
    turns: Option<usize>,

    /// Injected tool-failure probability (0..1).
    #[arg(long)]
    failure_rate: Option<f64>,

    /// Existing record JSONL to read instead of generating.
    #[arg(long = "in")]
    input: Option<String>,
}

#[derive(Args)]
struct RolloutArgs {
    /// Record JSONL to roll out.
    #[arg(long = "in")]
    input: Option<String>,

    /// JSON file with prompt templates; defaults to the built-in.
    #[arg(long)]
    templates: Option<String>,

    /// Ascending token-bucket boundaries.
    #[arg(long, value_delimiter = ',')]
    buckets: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Synthesize complete agentic records.
    Records(RecordArgs),
    /// Derive workflow-grounded atomic triples from records.
    Dag(DagArgs),
    /// Simulate multi-turn conversations over records.
    Dialogue(DialogueArgs),
    /// Assemble token-bucketed training entries from records.
    Rollout(RolloutArgs),
    /// Run records, dag, dialogue, and rollout in order.
    All {
        #[command(flatten)]
        records: RecordArgs,
        #[command(flatten)]
        dag: DagArgs,
        #[command(flatten)]
        dialogue: DialogueArgs,
        #[command(flatten)]
        rollout: RolloutArgs,
    },
    /// Replay the golden fixtures and report divergences.
    Fixtures {
        /// Verify the stored fixtures against a fresh replay.
        #[arg(long, default_value_t = true)]
        verify: bool,
    },
}

fn overrides(cli: &Cli) -> Overrides {
    let mut flags = Overrides {
        endpoint: cli.endpoint.clone(),
        script: cli.script.clone(),
        model: cli.model.clone(),
        max_in_flight: cli.max_in_flight,
        seed: cli.seed,
        retry_budget: cli.retry_budget,
        out_dir: cli.out.clone(),
        ..Overrides::default()
    };
    let apply_records = |args: &RecordArgs, flags: &mut Overrides| {
        flags.domain = args.domain.clone();
        flags.use_case = args.use_case.clone();
        flags.records = args.records;
        flags.expand_scenarios = args.expand_scenarios;
    };
    let apply_dag = |args: &DagArgs, flags: &mut Overrides| {
        flags.dags = args.dags;
        flags.max_nodes = args.max_nodes;
        flags.threshold = args.threshold;
        flags.max_repairs = args.max_repairs;
        if args.input.is_some() {
            flags.input = args.input.clone();
        }
    };
    let apply_dialogue = |args: &DialogueArgs, flags: &mut Overrides| {
        flags.conversations = args.conversations;
        flags.turns = args.turns;
        flags.failure_rate = args.failure_rate;
        if args.input.is_some() {
            flags.input = args.input.clone();
        }
    };
    let apply_rollout = |args: &RolloutArgs, flags: &mut Overrides| {
        if args.input.is_some() {
            flags.input = args.input.clone();
        }
        flags.templates = args.templates.clone();
        flags.buckets = args.buckets.clone();
    };
    match &cli.command {
        CliCommand::Records(args) => apply_records(args, &mut flags),
        CliCommand::Dag(args) => apply_dag(args, &mut flags),
        CliCommand::Dialogue(args) => apply_dialogue(args, &mut flags),
        CliCommand::Rollout(args) => apply_rollout(args, &mut flags),
        CliCommand::All { records, dag, dialogue, rollout } => {
            apply_records(records, &mut flags);
            apply_dag(dag, &mut flags);
            apply_dialogue(dialogue, &mut flags);
            apply_rollout(rollout, &mut flags);
        }
        CliCommand::Fixtures { .. } => {}
    }
    flags
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pipeline = match &cli.command {
        CliCommand::Records(_) => Pipeline::Records,
        CliCommand::Dag(_) => Pipeline::Dag,
        CliCommand::Dialogue(_) => Pipeline::Dialogue,
        CliCommand::Rollout(_) => Pipeline::Rollout,
        CliCommand::All { .. } => Pipeline::All,
        CliCommand::Fixtures { .. } => Pipeline::Fixtures,
    };
    let flags = overrides(&cli);
    let config = match load_config(cli.config.as_deref(), &env_snapshot(), &flags) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    match run(pipeline, &config) {
        Ok((exit, manifest)) => {
            for error in &manifest.errors {
                eprintln!("{error}");
            }
            if let Some(cause) = &manifest.aborted {
                eprintln!("aborted: {cause}");
            }
            for (gate, count) in &manifest.counts {
                println!("{gate}: emitted {} rejected {}", count.emitted, count.rejected);
            }
            ExitCode::from(exit as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}
