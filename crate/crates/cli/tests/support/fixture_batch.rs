//! Builds the bundled replay batch: one quiz of three questions answered by
//! 57 included students, plus one unmatched code and one late-section sheet.
//!
//! Model responses come from a scripted backend keyed on what each student
//! wrote, recorded through the real pipeline so that `--backend replay`
//! reproduces them. Everything is derived from a fixed seed, so running the
//! generator twice gives identical files.

use std::collections::BTreeMap;
use std::error::Error;
use std::fs;
use std::path::Path;

use gradepipe_core::analytics::{write_verdicts, GradingVerdict, OcrVerdict, VerdictRecord};
use gradepipe_core::backend::{Backend, BackendError, CallLog, RecordingBackend};
use gradepipe_core::config::{Config, Provenance};
use gradepipe_core::grade::{GradeMode, Grader};
use gradepipe_core::ingest::{
    load_manifest, ExclusionPolicy, ExclusionReason, ExclusionRule, PolicyField,
};
use gradepipe_core::pipeline::{grade_batch, transcribe_batch};
use gradepipe_core::prompting::{PromptBundle, Prompter};
use gradepipe_core::results::ResultRecord;
use gradepipe_core::template::TemplateSet;
use gradepipe_core::Score;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const SEED: u64 = 0x5eed_0057;
pub const QUIZ: &str = "Q7";
pub const SECTION: &str = "S2";
pub const INCLUDED: usize = 57;
/// Present in the scans but missing from the TA export.
pub const UNMATCHED_CODE: &str = "zz-unmatched";
/// Sheet from a make-up sitting, dropped by the exclusion policy.
pub const LATE_CODE: &str = "late-01";
pub const LATE_SECTION: &str = "S2-late";

struct Question {
    id: &'static str,
    statement: &'static str,
    reference_solution: &'static str,
    reference_final: &'static str,
    max_tenths: u32,
    flexible: &'static str,
    fixed: &'static str,
    /// Solution text per variant; the final answer follows after `||`.
    work: [(Variant, &'static str); 9],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Variant {
    Correct,
    Terse,
    Partial,
    Wrong,
    Split,
    Noisy,
    Under,
    OffGrid,
    OcrSuspect,
}

const WEIGHTS: [(Variant, u32); 9] = [
    (Variant::Correct, 34),
    (Variant::Terse, 12),
    (Variant::Partial, 20),
    (Variant::Wrong, 10),
    (Variant::Split, 6),
    (Variant::Noisy, 5),
    (Variant::Under, 6),
    (Variant::OffGrid, 3),
    (Variant::OcrSuspect, 4),
];

const QUESTIONS: [Question; 3] = [
    Question {
        id: "P1",
        statement: "Differentiate f(x) = x^2 e^{3x} and simplify.",
        reference_solution: "By the product rule f'(x) = 2x e^{3x} + 3x^2 e^{3x} = e^{3x}(3x^2 + 2x).",
        reference_final: "e^{3x}(3x^2+2x)",
        max_tenths: 30,
        flexible: "Award 3 points for a correct derivative reached by any valid method.\n\
                   Award 2 points when the method is right but one term is lost or miscopied.\n\
                   Award 1 point for naming the product rule without carrying it through.",
        fixed: "(1 pt) states the product rule with u = x^2 and v = e^{3x}.\n\
                (1 pt) differentiates e^{3x} with the chain rule.\n\
                (1 pt) factors the result as e^{3x}(3x^2+2x).",
        work: [
            (Variant::Correct, "u = x^2, v = e^{3x}\nf' = u'v + uv' = 2x e^{3x} + x^2 \\cdot 3e^{3x}\n= e^{3x}(3x^2+2x)||$e^{3x}(3x^2+2x)$"),
            (Variant::Terse, "f' = 2xe^{3x} + 3x^2e^{3x}||e^{3x}(3x^2+2x)"),
            (Variant::Partial, "product rule: 2x e^{3x} + x^2 e^{3x}\n= e^{3x}(x^2+2x)||$e^{3x}(x^2+2x)$"),
            (Variant::Wrong, "f' = 2x \\cdot 3e^{3x} = 6x e^{3x}||$6xe^{3x}$"),
            (Variant::Split, "d/dx[x^2] e^{3x} + x^2 d/dx[e^{3x}]\n= 2xe^{3x} + 3x^2e^{3x}, factor out e^{3x}||$e^{3x}(3x^2+2x)$"),
            (Variant::Noisy, "f' = 2x e^{3x} + x^2 (e^{3x})' ... = 2x e^{3x} + 3 x^2 e^{3x}?||$(3x^2+2x)e^{3x}$"),
            (Variant::Under, "(x^2)' e^{3x} + x^2 (e^{3x})'\nanswer by inspection||$e^{3x}(3x^2+2x)$"),
            (Variant::OffGrid, "chain rule on e^{3x} gives 3e^{3x}, so f' = 3x^2 e^{3x}||$3x^2e^{3x}$"),
            (Variant::OcrSuspect, "2x e^{3x} + 3x^2 e^{3x}||e^{3x}\n(3x^2\n+\n2x\n)"),
        ],
    },
    Question {
        id: "P2",
        statement: "Evaluate \\int_0^1 x\\sqrt{1+x^2}\\,dx exactly.",
        reference_solution: "Substitute u = 1 + x^2, du = 2x dx: (1/2)\\int_1^2 u^{1/2} du = (1/3)(2^{3/2} - 1) = (2\\sqrt{2}-1)/3.",
        reference_final: "\\frac{2\\sqrt{2}-1}{3}",
        max_tenths: 30,
        flexible: "Award 3 points for the exact value with a valid substitution or antiderivative.\n\
                   Award 2 points for a correct antiderivative with an arithmetic slip in the bounds.\n\
                   Award 1 point for a sensible substitution that is not completed.",
        fixed: "(1 pt) substitutes u = 1 + x^2 and rewrites dx.\n\
                (1 pt) changes the limits to u = 1 and u = 2.\n\
                (1 pt) evaluates (1/3)(2^{3/2} - 1) exactly.",
        work: [
            (Variant::Correct, "u = 1+x^2, du = 2x dx\n\\frac12 \\int_1^2 u^{1/2} du = \\frac13 [u^{3/2}]_1^2 = \\frac{2\\sqrt2 - 1}{3}||$\\frac{2\\sqrt{2}-1}{3}$"),
            (Variant::Terse, "\\frac13 (1+x^2)^{3/2} \\Big|_0^1||\\frac{2\\sqrt{2}-1}{3}"),
            (Variant::Partial, "u = 1+x^2, \\int u^{1/2} du = \\frac23 u^{3/2}\n= \\frac23(2\\sqrt2 - 1)||$\\frac{2(2\\sqrt{2}-1)}{3}$"),
            (Variant::Wrong, "\\int x \\sqrt{1+x^2} = \\frac{x^2}{2} \\cdot \\sqrt{2}||$\\frac{\\sqrt{2}}{2}$"),
            (Variant::Split, "let u = 1 + x^2 so x dx = du/2, limits 1 to 2\n\\frac12 \\cdot \\frac23 (2^{3/2} - 1)||$\\frac{2\\sqrt{2}-1}{3}$"),
            (Variant::Noisy, "u-sub?? u=1+x^2 ... \\frac13 u^{3/2} from 1 to 2||$\\frac{2\\sqrt{2}-1}{3}$"),
            (Variant::Under, "antiderivative \\frac13(1+x^2)^{3/2}||$\\frac{2\\sqrt{2}-1}{3}$"),
            (Variant::OffGrid, "u = 1+x^2, \\frac12\\int_0^1 u^{1/2} du = \\frac13||$\\frac{1}{3}$"),
            (Variant::OcrSuspect, "\\frac13 (1+x^2)^{3/2} from 0 to 1||\\frac{2\n\\sqrt{2}\n-1}\n{\n3}"),
        ],
    },
    Question {
        id: "P3",
        statement: "Find the sum of the series \\sum_{n=1}^{\\infty} \\frac{n}{2^n}.",
        reference_solution: "For |x| < 1, \\sum n x^n = x/(1-x)^2. At x = 1/2 this gives (1/2)/(1/4) = 2.",
        reference_final: "2",
        max_tenths: 40,
        flexible: "Award 4 points for the value 2 with any convincing argument.\n\
                   Award 3 points when the method is right and the last step slips.\n\
                   Award 2 points for a correct setup such as differentiating a geometric series.\n\
                   Award 1 point for showing the series converges.",
        fixed: "(1 pt) writes the geometric series \\sum x^n = 1/(1-x).\n\
                (1 pt) differentiates term by term to get \\sum n x^{n-1}.\n\
                (1 pt) multiplies by x and substitutes x = 1/2.\n\
                (1 pt) obtains 2.",
        work: [
            (Variant::Correct, "\\sum x^n = \\frac{1}{1-x}, differentiate: \\sum n x^{n-1} = \\frac{1}{(1-x)^2}\ntimes x, x = 1/2: \\frac{1/2}{1/4} = 2||$2$"),
            (Variant::Terse, "S - S/2 = 1/2 + 1/4 + ... = 1 so S = 2||2"),
            (Variant::Partial, "\\sum n x^{n-1} = \\frac{1}{(1-x)^2}, at x = 1/2 get 4||$4$"),
            (Variant::Wrong, "ratio test: limit 1/2 < 1 so converges to 1/2||$\\frac12$"),
            (Variant::Split, "S = \\sum n/2^n, S/2 = \\sum n/2^{n+1}\nS - S/2 = \\sum_{n\\ge1} 1/2^n = 1||$2$"),
            (Variant::Noisy, "terms 1/2, 2/4, 3/8, 4/16 ... partial sums approach 2||$2$"),
            (Variant::Under, "known formula x/(1-x)^2||2"),
            (Variant::OffGrid, "geometric with r = 1/2 so sum is 1||$1$"),
            (Variant::OcrSuspect, "x/(1-x)^2 at 1/2||1\n/\n2\n/\n(1/4) = 2"),
        ],
    },
];

fn text_for(q: &Question, v: Variant) -> (&'static str, &'static str) {
    let raw = q
        .work
        .iter()
        .find(|(w, _)| *w == v)
        .expect("every variant has text")
        .1;
    raw.split_once("||").expect("work has a final answer")
}

/// Per-run scores in tenths for (Flexible, Fixed).
fn script(v: Variant, m: u32) -> ([u32; 3], [u32; 3]) {
    match v {
        Variant::Correct => ([m; 3], [m; 3]),
        Variant::Terse => ([m; 3], [m - 5; 3]),
        Variant::Partial | Variant::OcrSuspect => ([15, 15, 20], [10, 15, 15]),
        Variant::Wrong => ([5, 0, 5], [0; 3]),
        Variant::Split => ([m, m - 10, m - 10], [m - 10; 3]),
        Variant::Noisy => ([0, 15, 30], [10; 3]),
        Variant::Under => ([m - 10; 3], [m - 10, m - 10, m - 5]),
        Variant::OffGrid => ([13; 3], [10; 3]),
    }
}

fn feedback(v: Variant, flexible: bool, score: u32, m: u32) -> String {
    let lead = match v {
        Variant::Correct | Variant::Split | Variant::Noisy | Variant::Under => {
            "The final result agrees with the reference value."
        }
        Variant::Terse => "The result is right, though intermediate steps are brief.",
        Variant::Partial | Variant::OcrSuspect => {
            "The approach is sound but an error changes the final value."
        }
        Variant::Wrong => "The method does not apply to this problem.",
        Variant::OffGrid => "Only a fragment of the argument holds up.",
    };
    let basis = if flexible {
        "judged on the overall argument"
    } else {
        "checked item by item against the rubric"
    };
    let points = Score::from_tenths(score).render_compact();
    let max = Score::from_tenths(m).render_compact();
    format!("{lead} Work {basis}; {points} of {max} points.")
}

/// Answers transcription from a file-name table and grading from the
/// student text found in the prompt.
struct Oracle {
    images: BTreeMap<String, String>,
}

impl Oracle {
    fn locate(&self, user_message: &str) -> Option<(&'static Question, Variant)> {
        let mut best: Option<(usize, &'static Question, Variant)> = None;
        for q in &QUESTIONS {
            if !user_message.contains(q.statement) {
                continue;
            }
            for (v, _) in q.work {
                let (solution, _) = text_for(q, v);
                if user_message.contains(solution) && best.is_none_or(|b| solution.len() > b.0) {
                    best = Some((solution.len(), q, v));
                }
            }
        }
        best.map(|(_, q, v)| (q, v))
    }
}

impl Backend for Oracle {
    fn model_id(&self) -> &str {
        "gpt-4.1-mini"
    }

    fn transcribe(&self, image: &Path, _bundle: &PromptBundle) -> Result<String, BackendError> {
        let name = image.file_name().unwrap_or_default().to_string_lossy();
        self.images
            .get(name.as_ref())
            .cloned()
            .ok_or_else(|| BackendError::Config(format!("no script for {name}")))
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        let (q, v) = self
            .locate(&bundle.user_message)
            .ok_or_else(|| BackendError::Config("prompt matches no scripted work".into()))?;
        let flexible = bundle.user_message.contains(q.flexible);
        let (flex, fixed) = script(v, q.max_tenths);
        let score = if flexible { flex } else { fixed }[bundle.sample_index as usize % 3];
        Ok(json!({
            "score": f64::from(score) / 10.0,
            "feedback": feedback(v, flexible, score, q.max_tenths),
        })
        .to_string())
    }
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// A stand-in scan: the text as typeset lines plus a pen stroke unique to
/// the sheet, so that equal answers from different students differ in bytes.
fn svg(text: &str, rng: &mut ChaCha8Rng) -> String {
    let mut out =
        String::from("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"200\">\n");
    for (i, line) in text.lines().enumerate() {
        out.push_str(&format!(
            "  <text x=\"12\" y=\"{}\" font-family=\"serif\" font-size=\"18\">{}</text>\n",
            28 + 24 * i,
            xml_escape(line)
        ));
    }
    let points: Vec<String> = (0..8)
        .map(|i| format!("{},{}", 20 + 75 * i, 180 + rng.random_range(-6..=6)))
        .collect();
    out.push_str(&format!(
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"#335\"/>\n</svg>\n",
        points.join(" ")
    ));
    out
}

fn test_code(rng: &mut ChaCha8Rng, taken: &mut Vec<String>) -> String {
    const WORDS: [&str; 16] = [
        "fox", "owl", "elk", "yak", "ant", "bee", "cod", "eel", "gnu", "hen", "jay", "koi", "lark",
        "mole", "newt", "wren",
    ];
    loop {
        let code = format!(
            "{}-{:02}",
            WORDS.choose(rng).expect("non-empty"),
            rng.random_range(0..100)
        );
        if !taken.contains(&code) {
            taken.push(code.clone());
            return code;
        }
    }
}

const NAMES: [&str; 20] = [
    "Alex", "Sam", "Jordan", "Riley", "Casey", "Morgan", "Taylor", "Jamie", "Avery", "Quinn",
    "Rowan", "Emery", "Hayden", "Reese", "Sky", "Parker", "Drew", "Kai", "Noa", "Robin",
];

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), Box<dyn Error>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

struct Student {
    code: String,
    section: &'static str,
    variants: Vec<Variant>,
    blank: Option<usize>,
}

/// Writes the whole fixture under `out`, which must not exist yet or be empty.
pub fn generate(out: &Path) -> Result<(), Box<dyn Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut taken = Vec::new();
    let mut students = Vec::new();
    for _ in 0..INCLUDED {
        let variants = QUESTIONS
            .iter()
            .map(|_| {
                WEIGHTS
                    .choose_weighted(&mut rng, |w| w.1)
                    .expect("positive weights")
                    .0
            })
            .collect();
        students.push(Student {
            code: test_code(&mut rng, &mut taken),
            section: SECTION,
            variants,
            blank: None,
        });
    }
    students[INCLUDED / 2].blank = Some(1);
    for (code, section) in [(UNMATCHED_CODE, SECTION), (LATE_CODE, LATE_SECTION)] {
        students.push(Student {
            code: code.into(),
            section,
            variants: vec![Variant::Correct; QUESTIONS.len()],
            blank: None,
        });
    }

    // rubrics and questions
    let mut questions = Vec::new();
    for q in &QUESTIONS {
        let flex_id = format!("{}-flexible", q.id);
        let fixed_id = format!("{}-fixed", q.id);
        for (id, kind, body) in [
            (&flex_id, "Flexible", q.flexible),
            (&fixed_id, "Fixed", q.fixed),
        ] {
            let rubric = json!({
                "rubric_id": id, "question_id": q.id, "kind": kind,
                "body": body, "max_points": q.max_tenths / 10,
            });
            let text = serde_json::to_string_pretty(&rubric)?;
            write(&out.join("rubrics").join(format!("{id}.json")), text + "\n")?;
        }
        questions.push(json!({
            "question_id": q.id,
            "statement": q.statement,
            "reference_solution": q.reference_solution,
            "reference_final_answer": q.reference_final,
            "max_points": q.max_tenths / 10,
            "rubric_ids": [flex_id, fixed_id],
        }));
    }

    // scans
    let mut images = BTreeMap::new();
    let mut regions = Vec::new();
    for (s_index, s) in students.iter().enumerate() {
        for (qi, q) in QUESTIONS.iter().enumerate() {
            let (solution, answer) = if s.blank == Some(qi) {
                ("", "")
            } else {
                text_for(q, s.variants[qi])
            };
            for (kind, text) in [("Solution", solution), ("FinalAnswer", answer)] {
                let name = format!("{}-{}-{}.svg", s.code, q.id, kind);
                write(&out.join("images").join(&name), svg(text, &mut rng))?;
                images.insert(name.clone(), text.to_string());
                // one sheet was keyed in with stray case and spaces
                let code = if s_index == 3 {
                    format!(" {} ", s.code.to_uppercase())
                } else {
                    s.code.clone()
                };
                let mut region = json!({
                    "test_code": code, "question_id": q.id, "kind": kind,
                    "image_ref": format!("images/{name}"),
                });
                if s.section != SECTION {
                    region["section_id"] = json!(s.section);
                }
                regions.push(region);
            }
        }
    }
    let manifest = json!({
        "quiz_id": QUIZ, "section_id": SECTION, "questions": questions, "regions": regions,
    });
    write(
        &out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;

    let policy =
        json!({"rules": [{"when": {"section_id": LATE_SECTION}, "reason": "SectionArtifact"}]});
    write(
        &out.join("exclusions.json"),
        serde_json::to_string_pretty(&policy)? + "\n",
    )?;
    let config = json!({"model_id": "gpt-4.1-mini", "parallelism": 4});
    write(
        &out.join("config.json"),
        serde_json::to_string_pretty(&config)? + "\n",
    )?;

    // record model responses through the real pipeline
    let config = Config::load(&out.join("config.json"))?;
    let mut batch = load_manifest(&out.join("manifest.json"))?;
    let mut recording_policy = ExclusionPolicy::load(&out.join("exclusions.json"))?;
    recording_policy.rules.push(
        ExclusionRule::new(ExclusionReason::UnmatchedTestCode)
            .when(PolicyField::TestCode, UNMATCHED_CODE),
    );
    batch.mark_exclusions(&recording_policy);

    let replay_dir = out.join("replay");
    let backend = RecordingBackend::new(Oracle { images }, &replay_dir)?;
    let prompter = Prompter::new(TemplateSet::builtin());
    let log = CallLog::new();
    let t = transcribe_batch(&mut batch, &prompter, &backend, &log, config.max_retries, 1);
    if !t.failures.is_empty() {
        return Err(format!("transcription failed: {:?}", t.failures).into());
    }
    let mut grader = Grader::new(&prompter, &backend, &log);
    grader.options = config.grading_options();
    grader.max_retries = config.max_retries;
    let provenance = Provenance {
        template_version: prompter.template_version().to_string(),
        config_hash: config.hash(),
    };
    let g = grade_batch(
        &mut batch,
        &grader,
        GradeMode::DualStabilized { runs: 3 },
        &config.flag_config(),
        &provenance,
        &[],
        1,
    );
    if !g.failures.is_empty() {
        return Err(format!("grading failed: {:?}", g.failures).into());
    }
    let results: BTreeMap<(String, String), ResultRecord> = g
        .records
        .into_iter()
        .map(|r| ((r.test_code.to_lowercase(), r.question_id.clone()), r))
        .collect();

    // TA scores sit near the selected score, on the half-point grid
    let mut ta = String::from("test_code,quiz_id,question_id,score\n");
    let mut verdicts = Vec::new();
    for s in students.iter().filter(|s| s.code != UNMATCHED_CODE) {
        for (qi, q) in QUESTIONS.iter().enumerate() {
            let selected = results
                .get(&(s.code.clone(), q.id.to_string()))
                .map(|r| r.selected_score.tenths())
                .unwrap_or(q.max_tenths);
            let offset: i64 = *[-10, -5, -5, 0, 0, 0, 0, 0, 5]
                .choose(&mut rng)
                .expect("non-empty");
            let on_grid = (selected as i64 / 5) * 5;
            let ta_score = (on_grid + offset).clamp(0, q.max_tenths as i64) as u32;
            ta.push_str(&format!(
                "{},{QUIZ},{},{}\n",
                s.code,
                q.id,
                Score::from_tenths(ta_score)
            ));

            if s.section != SECTION || s.blank == Some(qi) {
                continue;
            }
            let v = s.variants[qi];
            let ocr_verdict = if v == Variant::OcrSuspect {
                OcrVerdict::Problematic
            } else {
                OcrVerdict::Acceptable
            };
            let grading_verdict = match (v, rng.random_range(0..10)) {
                (Variant::Split | Variant::Under | Variant::OffGrid, _) => {
                    GradingVerdict::Incorrect
                }
                (Variant::Noisy, _) | (_, 0) => GradingVerdict::Acceptable,
                _ => GradingVerdict::Correct,
            };
            let reviewer_score = match grading_verdict {
                GradingVerdict::Incorrect => Score::from_tenths(ta_score),
                _ => Score::from_tenths(selected),
            };
            verdicts.push(VerdictRecord {
                test_code: s.code.clone(),
                question_id: q.id.into(),
                ocr_verdict,
                grading_verdict,
                reviewer_score,
            });
        }
    }
    write(&out.join("ta.csv"), ta)?;
    let mut buf = Vec::new();
    write_verdicts(&mut buf, &verdicts)?;
    write(&out.join("verdicts.csv"), buf)?;

    // some students never filled in the roster
    let mut roster = String::from("test_code,name\n");
    for (i, s) in students.iter().take(INCLUDED).enumerate() {
        if i % 19 != 7 {
            roster.push_str(&format!("{},{}\n", s.code, NAMES[i % NAMES.len()]));
        }
    }
    write(&out.join("roster.csv"), roster)?;
    Ok(())
}
