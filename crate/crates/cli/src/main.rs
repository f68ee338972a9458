use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cytocap_cli::{stages, CliError, LlmMode, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "cytocap", version, about = "Weakly supervised captioning pipeline for cytoarchitecture embeddings")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use the deterministic offline text generator.
    #[arg(long, global = true, conflicts_with = "http_llm")]
    stub_llm: bool,
    /// Use the HTTP chat-completions client from `[llm.http]`.
    #[arg(long, global = true)]
    http_llm: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic literature corpus (documents, citations, seeds).
    InitCorpus {
        #[arg(long, default_value = "corpus")]
        dir: PathBuf,
    },
    /// Print the effective configuration as TOML.
    Config,
    /// Extract per-area statements from the corpus.
    Distill,
    /// Generate and classify synthetic patch embeddings.
    Synth,
    /// Build weak image-caption pairs and the train/val/test split.
    Pair,
    /// Train the adapter on the frozen language model.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Caption the test split and score label consistency and discriminability.
    Eval,
    /// Generate multiple-choice questions from the corpus.
    QaGen,
    /// Score answerers on the generated questions.
    QaScore,
    /// Collate every stage output into report.md and report.json.
    Report,
    /// Run every stage, then the report.
    All,
}

fn load_config(g: &Global) -> Result<RunConfig, CliError> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let llm_mode = if g.http_llm {
        Some(LlmMode::Http)
    } else if g.stub_llm {
        Some(LlmMode::Stub)
    } else {
        None
    };
    cfg.apply(&Overrides { seed: g.seed, out_dir: g.out.clone(), llm_mode });
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::InitCorpus { dir } => {
            let n = stages::init_corpus(&dir, cfg.seed)?;
            println!("wrote {n} documents to {}", dir.display());
        }
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Distill => {
            let s = stages::distill(&cfg)?;
            println!("{} statements for {} areas", s.counts.statements, s.counts.per_area_statements.len());
        }
        Command::Synth => {
            let s = stages::synth(&cfg)?;
            println!("{} embeddings of dimension {}", s.records, s.dim);
        }
        Command::Pair => {
            let m = stages::pair(&cfg)?;
            println!(
                "ratio {}:{} (exact: {}); splits {}/{}/{}",
                m.audit.known,
                m.audit.unknown,
                m.audit.exact,
                m.train.len(),
                m.val.len(),
                m.test.len()
            );
        }
        Command::Train { resume } => {
            let s = stages::train(&cfg, resume.as_deref())?;
            if let Some(last) = s.history.last() {
                println!("{} epochs, final mean loss {:.4}", last.epoch, last.mean_loss);
            }
        }
        Command::Eval => print!("{}", stages::eval(&cfg)?.to_markdown()),
        Command::QaGen => {
            let s = stages::qa_gen(&cfg)?;
            println!("{} items kept of {} generated", s.kept, s.generated);
        }
        Command::QaScore => {
            for m in stages::qa_score(&cfg)?.measured {
                println!("{}: {:.1}% of {} answered", m.model, 100.0 * m.share, m.n_answered);
            }
        }
        Command::Report => {
            stages::report(&cfg)?;
            println!("{}", cfg.out_dir.join(cytocap_cli::artifacts::REPORT).display());
        }
        Command::All => {
            stages::run_all(&cfg)?;
            println!("{}", cfg.out_dir.join(cytocap_cli::artifacts::REPORT).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
