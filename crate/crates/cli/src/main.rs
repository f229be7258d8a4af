use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use dialoflow_cli::commands::{self, load_model, DecodeArgs, TrainArgs};
use dialoflow_cli::server::{self, AppState, ServerConfig};
use dialoflow_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "dialoflow",
    version,
    about = "Train, decode and evaluate utterance-flow dialogue models"
)]
struct Cli {
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Ckpt {
    /// Model checkpoint.
    #[arg(long, env = "DIALOFLOW_CKPT")]
    ckpt: PathBuf,
}

#[derive(Args)]
struct Decode {
    /// Beam search with this width.
    #[arg(long, conflicts_with = "greedy")]
    beam: Option<usize>,
    /// Greedy decoding (the default).
    #[arg(long)]
    greedy: bool,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Length penalty exponent for beam ranking.
    #[arg(long)]
    alpha: Option<f64>,
}

impl Decode {
    fn args(&self) -> DecodeArgs {
        DecodeArgs {
            beam: self.beam,
            max_tokens: self.max_tokens,
            alpha: self.alpha,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a JSONL corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and metrics.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Validation corpus used to pick best.dflw.
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reply to a dialogue context.
    Generate {
        #[command(flatten)]
        ckpt: Ckpt,
        /// JSON array of turns, the first spoken by the user.
        #[arg(long)]
        context: String,
        #[command(flatten)]
        decode: Decode,
    },
    /// Flow-score conversation logs.
    Score {
        #[command(flatten)]
        ckpt: Ckpt,
        #[arg(long)]
        logs: PathBuf,
        /// Append the chatbot-level correlation table.
        #[arg(long)]
        with_correlation: bool,
    },
    /// Decode a test set and report NIST, BLEU, entropy and length.
    Eval {
        #[command(flatten)]
        ckpt: Ckpt,
        #[arg(long)]
        testset: PathBuf,
        #[command(flatten)]
        decode: Decode,
        #[arg(long, default_value = "dialoflow")]
        label: String,
        /// Write the decoded replies here, one per line.
        #[arg(long)]
        hypotheses: Option<PathBuf>,
    },
    /// Project the contexts of a logged conversation to 2-D.
    ProjectFlow {
        #[command(flatten)]
        ckpt: Ckpt,
        #[arg(long)]
        log: PathBuf,
        /// Which log of the file to project.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start the HTTP service.
    Serve {
        #[command(flatten)]
        ckpt: Ckpt,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Allowed CORS origin (any when omitted).
        #[arg(long)]
        cors_origin: Option<String>,
        #[arg(long, default_value_t = 1800)]
        idle_timeout_secs: u64,
        #[arg(long, default_value_t = 256)]
        max_sessions: usize,
        /// Append each session's exchanges to <dir>/<id>.jsonl.
        #[arg(long)]
        persist_dir: Option<PathBuf>,
    },
}

fn run(command: Command) -> CliResult<String> {
    match command {
        Command::Train {
            corpus,
            config,
            out,
            valid,
            resume,
        } => commands::train(&TrainArgs {
            corpus: &corpus,
            config: &config,
            out: &out,
            validation: valid.as_deref(),
            resume: resume.as_deref(),
        }),
        Command::Generate { ckpt, context, decode } => {
            commands::generate(&load_model(&ckpt.ckpt)?, &context, decode.args())
        }
        Command::Score {
            ckpt,
            logs,
            with_correlation,
        } => commands::score(&load_model(&ckpt.ckpt)?, &logs, with_correlation),
        Command::Eval {
            ckpt,
            testset,
            decode,
            label,
            hypotheses,
        } => commands::eval(
            &load_model(&ckpt.ckpt)?,
            &testset,
            decode.args(),
            &label,
            hypotheses.as_deref(),
        ),
        Command::ProjectFlow { ckpt, log, index, out } => {
            commands::project_flow(&load_model(&ckpt.ckpt)?, &log, index, &out)
        }
        Command::Serve {
            ckpt,
            port,
            host,
            cors_origin,
            idle_timeout_secs,
            max_sessions,
            persist_dir,
        } => {
            if max_sessions == 0 {
                return Err(CliError::Usage("--max-sessions must be positive".into()));
            }
            let model = load_model(&ckpt.ckpt)?;
            if let Some(dir) = &persist_dir {
                std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
            }
            let config = ServerConfig {
                idle_timeout: Duration::from_secs(idle_timeout_secs),
                max_sessions,
                cors_origin,
                persist_dir,
            };
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .map_err(|e| CliError::Usage(format!("cannot bind {host}:{port}: {e}")))?;
                server::serve(listener, AppState::new(model, config))
                    .await
                    .map_err(|e| CliError::Internal(e.to_string()))
            })?;
            Ok(String::new())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if std::env::args().any(|a| a == "--json") {
                eprintln!(
                    "{}",
                    CliError::Usage(e.render().to_string().trim().to_string()).to_json()
                );
            } else {
                let _ = e.print();
            }
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            if cli.json {
                eprintln!("{}", e.to_json());
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
