//! `sgrag`: scene-graph-grounded retrieval for visual question answering.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 transport error,
//! 5 internal error.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::debug;

use crate::commands::CliError;
use crate::config::{resolve_config, CONFIG_ENV};

#[derive(Debug, Parser)]
#[command(
    name = "sgrag",
    version,
    about = "Scene-graph-grounded retrieval for visual question answering"
)]
struct Cli {
    /// TOML configuration file (keys mirror the flags, dotted for nesting).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<String>,
    /// Seed for pseudo-features, pseudo-prototypes and seeded weights [default: 42].
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Worker threads [default: number of processors, at most 8].
    #[arg(long, global = true)]
    jobs: Option<String>,
    /// Validate inputs and configuration without writing files or calling the generator.
    #[arg(long, global = true)]
    dry_run: bool,
    /// off, error, warn, info, debug or trace [default: warn].
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    /// Dataset: a directory of documents or a line-delimited file.
    #[arg(long, value_name = "PATH")]
    dataset: Option<String>,
    /// dir or lines [default: dir].
    #[arg(long)]
    format: Option<String>,
    /// canonical, aug or vg150 [default: canonical].
    #[arg(long)]
    adapter: Option<String>,
    /// Drop objects and relations scoring below this value [default: 0].
    #[arg(long)]
    min_score: Option<String>,
    /// annotated or penet-toy [default: annotated].
    #[arg(long)]
    relation_model: Option<String>,
    /// Minimum top-1 predicate score for inferred relations [default: 0.5].
    #[arg(long)]
    relation_threshold: Option<String>,
    /// Relation model weight file (text tensor dump).
    #[arg(long, value_name = "FILE")]
    weights: Option<String>,
    /// Word-vector file for label prototypes.
    #[arg(long, value_name = "FILE")]
    prototypes: Option<String>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// local or remote [default: local].
    #[arg(long)]
    embedder: Option<String>,
    /// Local hash embedder dimension [default: 256].
    #[arg(long)]
    embed_dim: Option<String>,
    /// Remote embedding endpoint.
    #[arg(long, value_name = "URL")]
    embed_url: Option<String>,
    /// Remote embedding model identifier.
    #[arg(long)]
    embed_model: Option<String>,
    /// Remote embedding request timeout [default: 30000].
    #[arg(long)]
    embed_timeout_ms: Option<String>,
}

#[derive(Debug, Args)]
struct GenerationArgs {
    /// stub or remote [default: stub].
    #[arg(long)]
    backend: Option<String>,
    /// echo, scripted or template [default: template].
    #[arg(long)]
    stub_mode: Option<String>,
    /// Question/answer table for the scripted stub (JSON lines).
    #[arg(long, value_name = "FILE")]
    stub_script: Option<String>,
    /// Chat-completions endpoint.
    #[arg(long, value_name = "URL")]
    llm_url: Option<String>,
    /// Model identifier [default: Qwen2-72B-Instruct].
    #[arg(long)]
    llm_model: Option<String>,
    /// Sampling temperature [default: 0].
    #[arg(long)]
    temperature: Option<String>,
    /// Maximum answer length in tokens [default: 512].
    #[arg(long)]
    max_tokens: Option<String>,
    /// Generation request timeout [default: 60000].
    #[arg(long)]
    timeout_ms: Option<String>,
    /// Concurrent generation requests [default: 4].
    #[arg(long)]
    max_in_flight: Option<String>,
    /// File replacing the default prompt head.
    #[arg(long, value_name = "FILE")]
    prompt_head: Option<String>,
    /// Directory receiving every assembled prompt.
    #[arg(long, value_name = "DIR")]
    dump_prompts: Option<String>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// md or csv [default: md].
    #[arg(long)]
    out: Option<String>,
    /// Write the table here instead of standard output.
    #[arg(long, value_name = "FILE")]
    output: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a dataset and write it as canonical line-delimited documents.
    Ingest {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Output file [default: standard output].
        #[arg(long, value_name = "FILE")]
        output: Option<String>,
    },
    /// Build knowledge chunks and write the chunk dump.
    Chunk {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Output file [default: standard output].
        #[arg(long, value_name = "FILE")]
        output: Option<String>,
    },
    /// Embed chunks and write index files (one per image, or one pooled file with --corpus).
    Index {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Chunk dump to index instead of chunking --dataset.
        #[arg(long, value_name = "FILE")]
        chunks: Option<String>,
        /// Index directory (per image) or file (--corpus).
        #[arg(long, value_name = "PATH")]
        index: Option<String>,
        /// Pool all images into one index.
        #[arg(long)]
        corpus: bool,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Answer questions about images.
    Ask {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Read indexes written by `index` instead of indexing --dataset.
        #[arg(long, value_name = "PATH")]
        index: Option<String>,
        /// Retrieve from one pooled index.
        #[arg(long)]
        corpus: bool,
        /// Image to ask about.
        #[arg(long)]
        image: Option<String>,
        /// Question text.
        #[arg(long)]
        question: Option<String>,
        /// Question file (JSON lines) instead of --image/--question.
        #[arg(long, value_name = "FILE")]
        questions: Option<String>,
        /// Chunks to retrieve [default: 4].
        #[arg(long)]
        k: Option<String>,
        /// Append answer records to this file.
        #[arg(long, value_name = "FILE")]
        transcript: Option<String>,
        #[command(flatten)]
        embed: EmbedArgs,
        #[command(flatten)]
        generation: GenerationArgs,
    },
    /// Score a transcript against the dataset.
    Eval {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Transcript written by `ask`.
        #[arg(long, value_name = "FILE")]
        transcript: Option<String>,
        /// Question file with focus categories and human answers.
        #[arg(long, value_name = "FILE")]
        questions: Option<String>,
        /// Write the score rows as JSON for `report`.
        #[arg(long, value_name = "FILE")]
        scores_output: Option<String>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Run the pipeline once per k and tabulate the scores.
    Ablate {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Question file [default: one descriptive question per image].
        #[arg(long, value_name = "FILE")]
        questions: Option<String>,
        /// Comma-separated k values [default: 1,2,4,8,16].
        #[arg(long)]
        k_values: Option<String>,
        /// Write the score rows as JSON for `report`.
        #[arg(long, value_name = "FILE")]
        scores_output: Option<String>,
        #[command(flatten)]
        embed: EmbedArgs,
        #[command(flatten)]
        generation: GenerationArgs,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Render score rows written by `eval` or `ablate`.
    Report {
        /// Score rows (JSON).
        #[arg(long, value_name = "FILE")]
        scores: Option<String>,
        #[command(flatten)]
        report: ReportArgs,
    },
}

/// Flags given explicitly on the command line, keyed by long name.
fn explicit_flags(matches: &ArgMatches, out: &mut BTreeMap<String, String>) {
    for id in matches.ids() {
        let name = id.as_str().replace('_', "-");
        if !config::is_flag(&name)
            || matches.value_source(id.as_str()) != Some(ValueSource::CommandLine)
        {
            continue;
        }
        if let Some(raw) = matches.get_raw(id.as_str()) {
            let values: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            out.insert(name, values.join(","));
        }
    }
    if let Some((_, sub)) = matches.subcommand() {
        explicit_flags(sub, out);
    }
}

fn run(args: Vec<OsString>) -> Result<(), CliError> {
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(()),
                _ => Err(CliError::Reported(2)),
            };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;

    let mut flags = BTreeMap::new();
    explicit_flags(&matches, &mut flags);
    let env: BTreeMap<String, String> = std::env::vars()
        .filter(|(k, _)| k.starts_with("SGRAG_"))
        .collect();
    let config_path = cli.config.clone().or_else(|| env.get(CONFIG_ENV).cloned());
    let file_text = match &config_path {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("reading config file {p}: {e}")))?,
        ),
        None => None,
    };
    let cfg = resolve_config(&flags, &env, file_text.as_deref())?;

    env_logger::Builder::new()
        .filter_level(cfg.log_level)
        .target(env_logger::Target::Stderr)
        .init();
    debug!("resolved configuration:\n{}", cfg.dump());
    debug!(
        "retrieval.k = {} (from {:?})",
        cfg.k,
        cfg.source_of("retrieval.k")
    );

    commands::run(&cli.command, &cfg)
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Reported(code)) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
