use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gradepipe_core::analytics::read_verdicts;
use gradepipe_core::backend::{
    Backend, CallLog, HttpBackend, HttpConfig, RecordingBackend, ReplayBackend,
};
use gradepipe_core::config::{Config, Provenance};
use gradepipe_core::grade::{GradeMode, Grader};
use gradepipe_core::ingest::{
    link_ta_scores, load_manifest, read_ta_export_file, write_exclusion_ledger, Batch,
    ExclusionPolicy,
};
use gradepipe_core::messaging::{read_roster, write_messages, MessagePolicy};
use gradepipe_core::pipeline::{grade_batch, transcribe_batch};
use gradepipe_core::prompting::Prompter;
use gradepipe_core::report::{write_report, ReportInputs};
use gradepipe_core::results::{read_results, write_results, ResultRecord};
use gradepipe_core::template::TemplateSet;
use gradepipe_core::Score;
use gradepipe_review::{
    router, serve as serve_router, FlagFilter, ReviewStore, RubricView, ServerOptions, TOKEN_ENV,
};
use serde_json::{json, Value};

use crate::error::{CliError, ErrorClass};
use crate::{BackendArgs, BackendKind, Common};

const EXCLUSION_LEDGER: &str = "exclusions.tsv";
const CALL_LOG: &str = "calls.jsonl";
const FLAG_NAMES: [&str; 5] = [
    "FullCreditSplit",
    "HighVariance",
    "CorrectAnswerUnderCredited",
    "OffGridScore",
    "OcrSuspect",
];

struct Settings {
    config: Config,
    templates: TemplateSet,
}

impl Settings {
    fn load(common: &Common) -> Result<Self, CliError> {
        let mut config = match &common.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(threads) = common.threads {
            config.parallelism = threads;
        }
        let templates = match &common.templates {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::builtin(),
        };
        Ok(Settings { config, templates })
    }

    fn apply_backend_overrides(&mut self, args: &BackendArgs) -> Result<(), CliError> {
        if let Some(model) = &args.model {
            self.config.model_id = model.clone();
        }
        if let Some(n) = args.max_retries {
            self.config.max_retries = n;
        }
        self.config.validate()?;
        Ok(())
    }

    fn prompter(&self) -> Result<Prompter, CliError> {
        match &self.config.principles {
            Some(p) => Prompter::with_principles(self.templates.clone(), p)
                .map_err(|e| CliError::validation(e.to_string())),
            None => Ok(Prompter::new(self.templates.clone())),
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            template_version: self.templates.version().to_string(),
            config_hash: self.config.hash(),
        }
    }
}

fn make_backend(config: &Config, args: &BackendArgs) -> Result<Box<dyn Backend>, CliError> {
    match args.backend {
        BackendKind::Replay => {
            let dir = args
                .replay_dir
                .as_ref()
                .ok_or_else(|| CliError::validation("--backend replay needs --replay-dir"))?;
            if !dir.is_dir() {
                return Err(CliError::new(
                    "IoError",
                    ErrorClass::Io,
                    format!("{}: replay directory not found", dir.display()),
                ));
            }
            Ok(Box::new(ReplayBackend::new(dir, config.model_id.clone())))
        }
        BackendKind::Live => {
            let live = HttpBackend::new(HttpConfig::from_env(&config.model_id)?)?;
            match &args.record {
                Some(dir) => Ok(Box::new(
                    RecordingBackend::new(live, dir).map_err(|e| CliError::io(dir, e))?,
                )),
                None => Ok(Box::new(live)),
            }
        }
    }
}

fn call_log(batch_dir: &Path) -> Result<CallLog, CliError> {
    let path = batch_dir.join(CALL_LOG);
    CallLog::with_sink(&path).map_err(|e| CliError::io(&path, e))
}

/// Carries transcriptions and status over from an earlier ingest of the same
/// regions so that re-running ingest does not discard finished work.
fn carry_over(batch: &mut Batch, previous: &Batch) {
    for record in &mut batch.records {
        if record.is_excluded() {
            continue;
        }
        let old = previous.records.iter().find(|o| {
            o.key() == record.key() && o.image_ref == record.image_ref && !o.is_excluded()
        });
        if let Some(old) = old {
            record.transcription = old.transcription.clone();
            record.status = old.status;
        }
    }
}

pub fn ingest(
    manifest: &Path,
    ta: &Path,
    exclusions: Option<&Path>,
    out: &Path,
) -> Result<Value, CliError> {
    let batch = load_manifest(manifest)?;
    let export = read_ta_export_file(ta)?;
    let mut batch = link_ta_scores(batch, &export)?;
    if let Some(path) = exclusions {
        batch.mark_exclusions(&ExclusionPolicy::load(path)?);
    }
    if out.join("batch.json").exists() {
        let previous = Batch::load_state(out)?;
        carry_over(&mut batch, &previous);
    }
    batch.save(out)?;

    let mut ledger = Vec::new();
    write_exclusion_ledger(&mut ledger, batch.excluded()).expect("in-memory write");
    let ledger_path = out.join(EXCLUSION_LEDGER);
    fs::write(&ledger_path, ledger).map_err(|e| CliError::io(&ledger_path, e))?;

    let excluded = batch.excluded().count();
    Ok(json!({
        "command": "ingest",
        "regions": batch.records.len(),
        "included": batch.records.len() - excluded,
        "excluded": excluded,
    }))
}

pub fn transcribe(
    common: &Common,
    batch_dir: &Path,
    args: &BackendArgs,
) -> Result<Value, CliError> {
    let mut settings = Settings::load(common)?;
    settings.apply_backend_overrides(args)?;
    let mut batch = Batch::load_state(batch_dir)?;
    let backend = make_backend(&settings.config, args)?;
    let prompter = settings.prompter()?;
    let log = call_log(batch_dir)?;
    let summary = transcribe_batch(
        &mut batch,
        &prompter,
        backend.as_ref(),
        &log,
        settings.config.max_retries,
        settings.config.parallelism,
    );
    let _ = log.flush();
    batch.save(batch_dir)?;
    if !summary.failures.is_empty() {
        return Err(CliError::from_failures("transcription", summary.failures));
    }
    Ok(json!({
        "command": "transcribe",
        "transcribed": summary.transcribed,
        "skipped": summary.skipped,
    }))
}

pub fn grade(
    common: &Common,
    batch_dir: &Path,
    mode: &str,
    runs: u32,
    results: &Path,
    args: &BackendArgs,
) -> Result<Value, CliError> {
    let mode = GradeMode::parse(mode, runs)?;
    let mut settings = Settings::load(common)?;
    settings.apply_backend_overrides(args)?;
    let mut batch = Batch::load_state(batch_dir)?;
    let previous = if results.exists() {
        read_results(results)?
    } else {
        Vec::new()
    };
    let backend = make_backend(&settings.config, args)?;
    let prompter = settings.prompter()?;
    let log = call_log(batch_dir)?;
    let mut grader = Grader::new(&prompter, backend.as_ref(), &log);
    grader.options = settings.config.grading_options();
    grader.max_retries = settings.config.max_retries;

    let summary = grade_batch(
        &mut batch,
        &grader,
        mode,
        &settings.config.flag_config(),
        &settings.provenance(),
        &previous,
        settings.config.parallelism,
    );
    let _ = log.flush();
    write_results(results, &summary.records)?;
    batch.save(batch_dir)?;
    if !summary.failures.is_empty() {
        return Err(CliError::from_failures("grading", summary.failures));
    }
    let flagged = summary
        .records
        .iter()
        .filter(|r| !r.flags.is_empty())
        .count();
    Ok(json!({
        "command": "grade",
        "records": summary.records.len(),
        "graded": summary.graded,
        "reused": summary.reused,
        "flagged": flagged,
    }))
}

fn read_file<T>(
    path: &Path,
    parse: impl FnOnce(fs::File) -> Result<T, CliError>,
) -> Result<T, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    parse(file)
}

pub fn analyze(
    results: &Path,
    ta: &Path,
    verdicts: Option<&Path>,
    compare: Option<&Path>,
    bin_width: &str,
    out: &Path,
) -> Result<Value, CliError> {
    let width = Score::from_decimal(bin_width)
        .map_err(|e| CliError::validation(format!("--bin-width {bin_width}: {e}")))?;
    if width == Score::ZERO {
        return Err(CliError::validation("--bin-width must be positive"));
    }
    let records = read_results(results)?;
    let ta_rows = read_ta_export_file(ta)?;
    let verdict_rows = verdicts
        .map(|p| read_file(p, |f| read_verdicts(f).map_err(CliError::from)))
        .transpose()?;
    let compare_rows = compare.map(read_results).transpose()?;
    let written = write_report(
        out,
        &ReportInputs {
            results: &records,
            ta: &ta_rows,
            verdicts: verdict_rows.as_deref(),
            compare: compare_rows.as_deref(),
            bin_width_tenths: i64::from(width.tenths()),
        },
    )?;
    let files: Vec<String> = written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    Ok(json!({"command": "analyze", "files": files}))
}

fn flag_set(names: Vec<String>, option: &str) -> Result<BTreeSet<String>, CliError> {
    let mut out = BTreeSet::new();
    for name in names {
        let name = name.trim().to_string();
        if !FLAG_NAMES.contains(&name.as_str()) {
            return Err(CliError::validation(format!(
                "{option}: unknown flag `{name}` (known: {})",
                FLAG_NAMES.join(", ")
            )));
        }
        out.insert(name);
    }
    Ok(out)
}

pub fn message(
    common: &Common,
    results: &Path,
    roster: Option<&Path>,
    withhold: Option<Vec<String>>,
    no_withhold: bool,
    out: &Path,
) -> Result<Value, CliError> {
    let settings = Settings::load(common)?;
    let mut policy = MessagePolicy {
        withhold_flagged: settings.config.withhold_flagged && !no_withhold,
        ..MessagePolicy::default()
    };
    if let Some(names) = withhold {
        policy.withhold_flags = flag_set(names, "--withhold")?;
    }
    let records = read_results(results)?;
    let roster = match roster {
        Some(p) => read_file(p, |f| read_roster(f).map_err(CliError::from))?,
        None => Default::default(),
    };
    let index = write_messages(out, &records, &roster, &policy, &settings.templates)?;
    let provisional = index.iter().filter(|r| r.provisional_flag).count();
    Ok(json!({
        "command": "message",
        "messages": index.len(),
        "provisional": provisional,
    }))
}

fn rubric_views(batch: Option<&Batch>) -> impl Fn(&ResultRecord) -> Vec<RubricView> + '_ {
    move |record| {
        batch
            .filter(|b| b.quiz_id == record.quiz_id)
            .map(|b| {
                b.rubrics_for(&record.question_id)
                    .into_iter()
                    .map(|r| RubricView {
                        rubric_id: r.rubric_id.clone(),
                        kind: r.kind,
                        body: r.body.clone(),
                    })
                    .collect()
            })
            .unwrap_or_default()
    }
}

pub fn serve(
    results: &Path,
    batch_dir: Option<&Path>,
    state: &Path,
    flags: Option<Vec<String>>,
    host: &str,
    port: u16,
    ui_dir: Option<PathBuf>,
) -> Result<Value, CliError> {
    let records = read_results(results)?;
    let batch = batch_dir.map(Batch::load_state).transpose()?;
    let filter = match flags {
        Some(names) => FlagFilter::Named(flag_set(names, "--flags")?),
        None => FlagFilter::AnyFlag,
    };
    let store = ReviewStore::open(state)?;
    let added = store.enqueue_flagged(&records, &filter, &rubric_views(batch.as_ref()))?;
    let options = ServerOptions {
        token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        image_root: batch.as_ref().map(|b| b.image_root.clone()),
        ui_dir,
    };
    let app = router(Arc::new(store), options);

    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| CliError::new("IoError", ErrorClass::Io, e.to_string()))?;
    let address = format!("{host}:{port}");
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&address)
            .await
            .map_err(|e| CliError::new("IoError", ErrorClass::Io, format!("{address}: {e}")))?;
        eprintln!(
            "{}",
            json!({"event": "listening", "address": address, "queued": added})
        );
        serve_router(listener, app)
            .await
            .map_err(|e| CliError::new("IoError", ErrorClass::Io, e.to_string()))
    })?;
    Ok(json!({"command": "serve", "queued": added}))
}
