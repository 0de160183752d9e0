//! `gradepipe`: ingest → transcribe → grade → analyze → message → serve.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "gradepipe",
    version,
    about = "Batch grading of handwritten quiz answers"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command.
#[derive(Args, Clone)]
pub struct Common {
    /// JSON configuration file. Missing keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory of prompt and message templates replacing the built-in set.
    #[arg(long, global = true, value_name = "DIR")]
    pub templates: Option<PathBuf>,
    /// Worker threads for transcribe and grade; overrides `parallelism`.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BackendKind {
    /// OpenAI-compatible endpoint from GRADEPIPE_API_BASE and GRADEPIPE_API_KEY.
    Live,
    /// Recorded responses read from --replay-dir.
    Replay,
}

/// Backend selection for commands that call a model.
#[derive(Args, Clone)]
pub struct BackendArgs {
    /// Which backend answers model calls.
    #[arg(long, value_enum, default_value = "replay")]
    pub backend: BackendKind,
    /// Directory of recorded responses (required with --backend replay).
    #[arg(long, value_name = "DIR")]
    pub replay_dir: Option<PathBuf>,
    /// With --backend live, also store every response here for later replay.
    #[arg(long, value_name = "DIR")]
    pub record: Option<PathBuf>,
    /// Model id; overrides `model_id` from the configuration.
    #[arg(long, value_name = "ID")]
    pub model: Option<String>,
    /// Retries after the first attempt; overrides `max_retries`.
    #[arg(long, value_name = "N")]
    pub max_retries: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Load a quiz manifest, link TA scores and apply exclusions into a batch state dir.
    Ingest {
        /// Quiz manifest (JSON) with questions, rubric ids and regions.
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// TA score export with header test_code,quiz_id,question_id,score.
        #[arg(long, value_name = "CSV")]
        ta: PathBuf,
        /// Exclusion policy (JSON rules over quiz, section, code, question, kind).
        #[arg(long, value_name = "FILE")]
        exclusions: Option<PathBuf>,
        /// Batch state directory to create or update.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Transcribe every pending region of a batch.
    Transcribe {
        /// Batch state directory written by `ingest`.
        #[arg(long, value_name = "DIR")]
        batch: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Grade transcribed questions and write the results file.
    Grade {
        /// Batch state directory.
        #[arg(long, value_name = "DIR")]
        batch: PathBuf,
        /// single, dual, stabilized or dual+stabilized.
        #[arg(long, default_value = "dual+stabilized")]
        mode: String,
        /// Runs per rubric for the stabilized modes (at least 2).
        #[arg(long, default_value_t = 3)]
        runs: u32,
        /// Results file (JSON Lines). Existing records with the same
        /// provenance are kept instead of being graded again.
        #[arg(long, value_name = "FILE")]
        results: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Compare results with TA scores and write the report directory.
    Analyze {
        /// Results file written by `grade`.
        #[arg(long, value_name = "FILE")]
        results: PathBuf,
        /// TA score export.
        #[arg(long, value_name = "CSV")]
        ta: PathBuf,
        /// Reviewer verdicts (test_code,question_id,ocr_verdict,grading_verdict,reviewer_score).
        #[arg(long, value_name = "CSV")]
        verdicts: Option<PathBuf>,
        /// Second results file over the same items for a cross-model comparison.
        #[arg(long, value_name = "FILE")]
        compare: Option<PathBuf>,
        /// Histogram bin width in points.
        #[arg(long, default_value = "0.5")]
        bin_width: String,
        /// Report directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Render one message per student.
    Message {
        /// Results file written by `grade`.
        #[arg(long, value_name = "FILE")]
        results: PathBuf,
        /// Roster with header test_code,name; missing names fall back to "Student".
        #[arg(long, value_name = "CSV")]
        roster: Option<PathBuf>,
        /// Flags that hold a question back for review; overrides the default set.
        #[arg(long, value_name = "FLAG", value_delimiter = ',')]
        withhold: Option<Vec<String>>,
        /// Show every score even when flagged; overrides `withhold_flagged`.
        #[arg(long)]
        no_withhold: bool,
        /// Messages directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Queue flagged results and run the review service.
    Serve {
        /// Results file written by `grade`.
        #[arg(long, value_name = "FILE")]
        results: PathBuf,
        /// Batch state directory, for rubric text and region images.
        #[arg(long, value_name = "DIR")]
        batch: Option<PathBuf>,
        /// Directory holding the review logs.
        #[arg(long, value_name = "DIR")]
        state: PathBuf,
        /// Only queue results carrying one of these flags (default: any flag).
        #[arg(long, value_name = "FLAG", value_delimiter = ',')]
        flags: Option<Vec<String>>,
        /// Address to bind.
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Port to listen on.
        #[arg(long, default_value_t = gradepipe_review::DEFAULT_PORT)]
        port: u16,
        /// Built review console served under /ui.
        #[arg(long, value_name = "DIR")]
        ui_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let common = cli.common;
    match cli.command {
        Command::Ingest {
            manifest,
            ta,
            exclusions,
            out,
        } => commands::ingest(&manifest, &ta, exclusions.as_deref(), &out),
        Command::Transcribe { batch, backend } => commands::transcribe(&common, &batch, &backend),
        Command::Grade {
            batch,
            mode,
            runs,
            results,
            backend,
        } => commands::grade(&common, &batch, &mode, runs, &results, &backend),
        Command::Analyze {
            results,
            ta,
            verdicts,
            compare,
            bin_width,
            out,
        } => commands::analyze(
            &results,
            &ta,
            verdicts.as_deref(),
            compare.as_deref(),
            &bin_width,
            &out,
        ),
        Command::Message {
            results,
            roster,
            withhold,
            no_withhold,
            out,
        } => commands::message(
            &common,
            &results,
            roster.as_deref(),
            withhold,
            no_withhold,
            &out,
        ),
        Command::Serve {
            results,
            batch,
            state,
            flags,
            host,
            port,
            ui_dir,
        } => commands::serve(
            &results,
            batch.as_deref(),
            &state,
            flags,
            &host,
            port,
            ui_dir,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::to_string(&e).expect("error record serializes");
            eprintln!("{record}");
            ExitCode::from(e.class.exit_code() as u8)
        }
    }
}
