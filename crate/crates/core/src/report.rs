//! Writes the analysis report directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::analytics::{
    cross_model, histogram, link_gaps, quiz_table, stability, summarize_gaps, AnalyticsError, Bin,
    CrossModelDelta, StabilityStats, SummaryStats, VerdictDistribution, VerdictRecord,
};
use crate::config::Provenance;
use crate::ingest::TaScoreRecord;
use crate::results::ResultRecord;
use crate::score::{normalize_test_code, score_gap, Score};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

pub struct ReportInputs<'a> {
    pub results: &'a [ResultRecord],
    pub ta: &'a [TaScoreRecord],
    pub verdicts: Option<&'a [VerdictRecord]>,
    /// A second results file over the same items, graded by another model.
    pub compare: Option<&'a [ResultRecord]>,
    pub bin_width_tenths: i64,
}

/// Signed tenths as a decimal string with one fractional digit.
pub fn format_tenths(t: i64) -> String {
    let sign = if t < 0 { "-" } else { "" };
    format!("{sign}{}.{}", t.unsigned_abs() / 10, t.unsigned_abs() % 10)
}

fn provenances(results: &[ResultRecord]) -> Vec<Provenance> {
    results
        .iter()
        .map(ResultRecord::provenance)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn csv_preamble(prov: &[Provenance]) -> String {
    let mut out = String::new();
    for p in prov {
        out.push_str(&format!(
            "# template_version={} config_hash={}\n",
            p.template_version, p.config_hash
        ));
    }
    out
}

fn write(
    dir: &Path,
    name: &str,
    text: &str,
    written: &mut Vec<PathBuf>,
) -> Result<(), ReportError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    written.push(path);
    Ok(())
}

fn write_json<T: Serialize>(
    dir: &Path,
    name: &str,
    value: &T,
    written: &mut Vec<PathBuf>,
) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write(dir, name, &text, written)
}

fn histogram_csv(prov: &[Provenance], bins: &[Bin]) -> String {
    let mut out = csv_preamble(prov);
    out.push_str("center_points,count\n");
    for b in bins {
        out.push_str(&format!("{},{}\n", format_tenths(b.center_tenths), b.count));
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    provenance: &'a [Provenance],
    results: usize,
    linked: usize,
    unmatched: usize,
    summary: Option<SummaryStats>,
}

#[derive(Serialize)]
struct Stability<'a> {
    provenance: &'a [Provenance],
    models: Vec<StabilityStats>,
    /// Models whose items do not share one run count.
    skipped: Vec<String>,
}

#[derive(Serialize)]
struct CrossModel<'a> {
    provenance: &'a [Provenance],
    model_a: Vec<String>,
    model_b: Vec<String>,
    delta: CrossModelDelta,
}

#[derive(Serialize)]
struct Verdicts<'a> {
    provenance: &'a [Provenance],
    distribution: VerdictDistribution,
    /// Verdicts whose (test code, question) matched a result.
    matched_results: usize,
}

type ItemKey = String;

fn item_key(r: &ResultRecord) -> ItemKey {
    format!(
        "{}/{}/{}",
        r.quiz_id,
        normalize_test_code(&r.test_code),
        r.question_id
    )
}

/// Per model: item/rubric → run scores ordered by run index, for groups
/// that were run more than once.
fn repeated_runs(results: &[ResultRecord]) -> BTreeMap<String, BTreeMap<ItemKey, Vec<Score>>> {
    let mut out: BTreeMap<String, BTreeMap<ItemKey, Vec<(u32, Score)>>> = BTreeMap::new();
    for r in results {
        for run in &r.runs {
            out.entry(run.model_id.clone())
                .or_default()
                .entry(format!("{}/{}", item_key(r), run.rubric_id))
                .or_default()
                .push((run.run_index, run.score));
        }
    }
    out.into_iter()
        .map(|(model, groups)| {
            let groups = groups
                .into_iter()
                .filter(|(_, runs)| runs.len() >= 2)
                .map(|(k, mut runs)| {
                    runs.sort_by_key(|(i, _)| *i);
                    (k, runs.into_iter().map(|(_, s)| s).collect())
                })
                .collect::<BTreeMap<_, _>>();
            (model, groups)
        })
        .filter(|(_, groups)| !groups.is_empty())
        .collect()
}

fn all_runs(results: &[ResultRecord]) -> BTreeMap<ItemKey, Vec<Score>> {
    results
        .iter()
        .map(|r| (item_key(r), r.runs.iter().map(|run| run.score).collect()))
        .collect()
}

fn models(results: &[ResultRecord]) -> Vec<String> {
    results
        .iter()
        .flat_map(|r| r.runs.iter().map(|run| run.model_id.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Writes summary.json, quiz_table.csv, histogram_gap.csv and
/// stability.json always; cross_model.json with a comparison file; and
/// verdicts.json plus histogram_reviewer.csv with a verdict table.
pub fn write_report(dir: &Path, inputs: &ReportInputs<'_>) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    let prov = provenances(inputs.results);
    let (gaps, unmatched) = link_gaps(inputs.results, inputs.ta);

    let summary = if gaps.is_empty() {
        None
    } else {
        Some(summarize_gaps(&gaps)?)
    };
    write_json(
        dir,
        "summary.json",
        &Summary {
            provenance: &prov,
            results: inputs.results.len(),
            linked: gaps.len(),
            unmatched: unmatched.len(),
            summary,
        },
        &mut written,
    )?;

    let mut table = csv_preamble(&prov);
    table.push_str("quiz_id,n,mean_gap,std_gap,mae,within1_pct\n");
    if !gaps.is_empty() {
        for row in quiz_table(&gaps)? {
            let s = &row.stats;
            table.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.2}\n",
                row.quiz_id, s.n, s.mean_gap, s.std_gap, s.mae, s.within1_pct
            ));
        }
    }
    write(dir, "quiz_table.csv", &table, &mut written)?;

    let values: Vec<i64> = gaps.iter().map(|g| g.gap_tenths).collect();
    let bins = histogram(&values, inputs.bin_width_tenths)?;
    write(
        dir,
        "histogram_gap.csv",
        &histogram_csv(&prov, &bins),
        &mut written,
    )?;

    let mut stab = Stability {
        provenance: &prov,
        models: Vec::new(),
        skipped: Vec::new(),
    };
    for (model, groups) in repeated_runs(inputs.results) {
        match stability(&groups, &model) {
            Ok(s) => stab.models.push(s),
            Err(AnalyticsError::RaggedRuns(..)) => stab.skipped.push(model),
            Err(e) => return Err(e.into()),
        }
    }
    write_json(dir, "stability.json", &stab, &mut written)?;

    if let Some(other) = inputs.compare {
        let delta = cross_model(&all_runs(inputs.results), &all_runs(other))?;
        write_json(
            dir,
            "cross_model.json",
            &CrossModel {
                provenance: &prov,
                model_a: models(inputs.results),
                model_b: models(other),
                delta,
            },
            &mut written,
        )?;
    }

    if let Some(verdicts) = inputs.verdicts {
        let by_item: HashMap<(String, String), &ResultRecord> = inputs
            .results
            .iter()
            .map(|r| {
                (
                    (normalize_test_code(&r.test_code), r.question_id.clone()),
                    r,
                )
            })
            .collect();
        let mut diffs = Vec::new();
        for v in verdicts {
            if let Some(r) =
                by_item.get(&(normalize_test_code(&v.test_code), v.question_id.clone()))
            {
                diffs.push(score_gap(r.selected_score, v.reviewer_score));
            }
        }
        write_json(
            dir,
            "verdicts.json",
            &Verdicts {
                provenance: &prov,
                distribution: VerdictDistribution::from_verdicts(
                    verdicts.iter().map(|v| (v.ocr_verdict, v.grading_verdict)),
                ),
                matched_results: diffs.len(),
            },
            &mut written,
        )?;
        let bins = histogram(&diffs, inputs.bin_width_tenths)?;
        write(
            dir,
            "histogram_reviewer.csv",
            &histogram_csv(&prov, &bins),
            &mut written,
        )?;
    }
    Ok(written)
}
