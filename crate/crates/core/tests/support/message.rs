//! A two-question student message with hand-written evaluations.

use std::collections::BTreeSet;

use gradepipe_core::grade::Flag;
use gradepipe_core::messaging::{render_message, MessagePolicy, QuestionResult};
use gradepipe_core::template::{TemplateKind, TemplateSet};
use gradepipe_core::Score;

pub const FIRST_EVALUATION: &str = "The substitution u = x^2 + 1 is set up correctly and the \
bounds are converted. The antiderivative and the evaluation at both limits are right, giving \
the stated value.";

pub const SECOND_EVALUATION: &str = "The ratio test is a good choice and the limit of the \
ratio is computed correctly as 1/2. The conclusion states divergence even though the limit is \
below 1, so the final claim does not follow from the work.";

pub fn render() -> String {
    let none = BTreeSet::<Flag>::new();
    let questions = [
        QuestionResult {
            question_id: "P1",
            number: 1,
            score: Score::from_points(5),
            feedback: FIRST_EVALUATION,
            flags: &none,
        },
        QuestionResult {
            question_id: "P2",
            number: 2,
            score: Score::from_points(2),
            feedback: SECOND_EVALUATION,
            flags: &none,
        },
    ];
    let templates = TemplateSet::builtin();
    render_message(
        "maple-42",
        &questions,
        Some("Jordan"),
        &MessagePolicy::default(),
        templates.get(TemplateKind::Message),
    )
    .unwrap()
    .text
}
