use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

mod commands;
mod config;

use commands::Failure;
use config::{
    overlay, CaptionSection, CoverageSection, EvalSection, ExtractSection, GatewaySection, ScrapeSection, SimSection,
    WikiSection,
};

/// Build taxonomy-aware image captions from encyclopedia text and evaluate
/// contrastive models trained on them.
///
/// Every flag of a subcommand is also a key of its config section: for
/// example `--word-limit` on `caption` is `caption.word_limit`. Precedence
/// is flag, then `--set`, then the `--config` file, then the default.
///
/// Exit status: 0 success, 1 runtime error, 2 configuration or input error
/// (reported before any work), 3 partial failure (failures listed on
/// standard error).
#[derive(Debug, Parser)]
#[command(name = "taxocap", version)]
struct Cli {
    /// TOML config file with one table per section.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set caption.word_limit=30`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for all randomness (config key `seed`) [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output on standard error (-v debug, -vv trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fetch and validate a wiki page per taxon and write its descriptive
    /// paragraphs (sections [scrape] and [wiki]).
    Scrape {
        #[command(flatten)]
        scrape: ScrapeSection,
        #[command(flatten)]
        wiki: WikiSection,
    },
    /// Keep the visual paragraphs and extract their visual content into a
    /// description store (sections [extract] and [gateway]).
    Extract {
        #[command(flatten)]
        extract: ExtractSection,
        #[command(flatten)]
        gateway: GatewaySection,
    },
    /// Generate one validated caption per manifest sample (sections
    /// [caption] and [gateway]).
    Caption {
        #[command(flatten)]
        caption: CaptionSection,
        #[command(flatten)]
        gateway: GatewaySection,
    },
    /// Print taxa and sample coverage of a description store per rank
    /// (section [coverage]).
    Coverage {
        #[command(flatten)]
        coverage: CoverageSection,
    },
    /// Train taxonomy-only, faithful-caption and noisy-caption models on a
    /// synthetic world and compare them (section [sim]).
    Sim {
        #[command(flatten)]
        sim: SimSection,
    },
    /// Score embeddings: top-1 classification, two-way Recall@k, or mAP@k
    /// (section [eval]).
    Eval {
        #[command(flatten)]
        eval: EvalSection,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::INFO,
        1 => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .with_target(false)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
}

fn run(cli: Cli) -> Result<(), Failure> {
    let overlays = match &cli.command {
        Command::Scrape { scrape, wiki } => vec![overlay("scrape", scrape)?, overlay("wiki", wiki)?],
        Command::Extract { extract, gateway } => vec![overlay("extract", extract)?, overlay("gateway", gateway)?],
        Command::Caption { caption, gateway } => vec![overlay("caption", caption)?, overlay("gateway", gateway)?],
        Command::Coverage { coverage } => vec![overlay("coverage", coverage)?],
        Command::Sim { sim } => vec![overlay("sim", sim)?],
        Command::Eval { eval } => vec![overlay("eval", eval)?],
    };
    let cfg = config::load(cli.config.as_deref(), &cli.sets, cli.seed, overlays)?;
    match cli.command {
        Command::Scrape { .. } => commands::scrape(&cfg),
        Command::Extract { .. } => commands::extract(&cfg),
        Command::Caption { .. } => commands::caption(&cfg),
        Command::Coverage { .. } => commands::coverage(&cfg),
        Command::Sim { .. } => commands::sim(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            tracing::error!("{msg}");
            ExitCode::from(2)
        }
        Err(Failure::Partial(failures)) => {
            tracing::error!("{} item(s) failed", failures.len());
            for f in &failures {
                tracing::error!("  {f}");
            }
            ExitCode::from(3)
        }
        Err(Failure::Runtime(msg)) => {
            tracing::error!("{msg}");
            ExitCode::from(1)
        }
    }
}
