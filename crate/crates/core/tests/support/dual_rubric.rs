//! A geometric-series answer graded under both rubric styles. The two
//! recorded model responses are stored by role and written into a replay
//! directory under the digests of the bundles the grader will send.

use std::fs;
use std::path::Path;

use gradepipe_core::prompting::{GradingOptions, Prompter, RubricSpec, Transcription};
use gradepipe_core::QuestionSpec;

pub struct Case {
    pub question: QuestionSpec,
    pub flexible: RubricSpec,
    pub fixed: RubricSpec,
    pub transcription: Transcription,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

pub fn load(fixture_dir: &Path) -> Case {
    Case {
        question: read_json(&fixture_dir.join("question.json")),
        flexible: read_json(&fixture_dir.join("P2-flexible.json")),
        fixed: read_json(&fixture_dir.join("P2-fixed.json")),
        transcription: read_json(&fixture_dir.join("transcription.json")),
    }
}

/// Fills `replay_dir` with the two responses keyed by bundle digest.
pub fn materialize(case: &Case, fixture_dir: &Path, prompter: &Prompter, replay_dir: &Path) {
    fs::create_dir_all(replay_dir).unwrap();
    for (rubric, file) in [
        (&case.flexible, "response-flexible.txt"),
        (&case.fixed, "response-fixed.txt"),
    ] {
        let bundle = prompter
            .build_grading_prompt(
                &case.transcription,
                &case.question,
                rubric,
                &GradingOptions::default(),
            )
            .unwrap()
            .with_sample_index(0);
        fs::copy(
            fixture_dir.join(file),
            replay_dir.join(format!("{}.txt", bundle.digest())),
        )
        .unwrap();
    }
}
