//! Rule-based answer extraction and exact-match verification.
//!
//! The prediction is whatever follows the last answer marker. Multiple-choice
//! answers match on the first character; close-ended answers match when the
//! lowercased, quote-stripped gold phrase occurs inside the prediction.

use serde::{Deserialize, Serialize};

use crate::backend::FORCED_ANSWER_TOKEN_LIMIT;
use crate::engine::{ProblemInstance, TaskKind};
use crate::prompts::ANSWER_MARKER;

const TERMINAL_PUNCTUATION: &[char] = &[
    '.', ',', ';', ':', '!', '?', '"', '\'', '\u{201d}', '\u{2019}', ')', ']', '}',
];

const QUOTE_CHARS: &[char] = &[
    '"', '\'', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}', '`',
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    ChoiceMatch,
    PhraseMatch,
    Unextractable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub extracted: Option<String>,
    pub correct: bool,
    pub method: MatchMethod,
}

impl Verdict {
    fn unextractable() -> Self {
        Self {
            extracted: None,
            correct: false,
            method: MatchMethod::Unextractable,
        }
    }
}

/// Returns the text after the final (case-insensitive) answer marker, with
/// surrounding whitespace and terminal punctuation stripped. `None` when the
/// marker is absent or nothing remains.
pub fn extract_answer(response: &str) -> Option<String> {
    let marker = ANSWER_MARKER.to_lowercase();
    let lowered = response.to_lowercase();
    let position = lowered.rfind(&marker)?;
    let tail = &response[position + marker.len()..];
    let mut answer = tail.trim();
    loop {
        let stripped = answer
            .trim_end()
            .trim_end_matches(|c| TERMINAL_PUNCTUATION.contains(&c));
        if stripped == answer {
            break;
        }
        answer = stripped;
    }
    let answer = answer.trim();
    if answer.is_empty() {
        None
    } else {
        Some(answer.to_string())
    }
}

/// Lowercases, removes quote characters, and collapses whitespace runs.
pub fn normalize_phrase(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !QUOTE_CHARS.contains(c))
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Matches an extracted answer against the gold answer.
///
/// Multiple choice compares the first non-whitespace character of the
/// prediction against the gold choice letter, case-insensitively. Close-ended
/// tasks succeed when the normalized gold phrase is a substring of the
/// normalized prediction.
pub fn verify(extracted: &str, problem: &ProblemInstance) -> Verdict {
    match problem.task_kind {
        TaskKind::MultipleChoice => {
            let predicted = extracted.chars().find(|c| !c.is_whitespace());
            let gold = problem.gold_answer.chars().find(|c| !c.is_whitespace());
            let correct = match (predicted, gold) {
                (Some(p), Some(g)) => p.eq_ignore_ascii_case(&g),
                _ => false,
            };
            Verdict {
                extracted: Some(extracted.to_string()),
                correct,
                method: MatchMethod::ChoiceMatch,
            }
        }
        TaskKind::CloseEnded => {
            let prediction = normalize_phrase(extracted);
            let gold = normalize_phrase(&problem.gold_answer);
            let correct = !gold.is_empty() && prediction.contains(&gold);
            Verdict {
                extracted: Some(extracted.to_string()),
                correct,
                method: MatchMethod::PhraseMatch,
            }
        }
    }
}

/// Extraction followed by verification; an absent marker yields an
/// unextractable (incorrect) verdict.
pub fn verify_response(response: &str, problem: &ProblemInstance) -> Verdict {
    match extract_answer(response) {
        Some(extracted) => verify(&extracted, problem),
        None => Verdict::unextractable(),
    }
}

/// Prompt plus generation constraints for a forced answer continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcedContinuation {
    pub prompt: String,
    pub max_new_tokens: u32,
    /// Restriction on the first generated token, for multiple choice the
    /// option letters. Backends translate this to their own bias mechanism.
    pub allowed_first_tokens: Option<Vec<String>>,
}

/// Appends the answer marker to a finished trajectory so the model is forced
/// to state its answer, under a small token limit.
pub fn build_forced_continuation(
    trajectory: &str,
    problem: &ProblemInstance,
) -> ForcedContinuation {
    let allowed_first_tokens = match (&problem.task_kind, &problem.options) {
        (TaskKind::MultipleChoice, Some(options)) => Some(option_letters(options.len())),
        _ => None,
    };
    ForcedContinuation {
        prompt: format!("{}\n\n{ANSWER_MARKER}", trajectory.trim_end()),
        max_new_tokens: FORCED_ANSWER_TOKEN_LIMIT,
        allowed_first_tokens,
    }
}

/// `["A", "B", ...]` for the first `count` options (capped at 26).
pub fn option_letters(count: usize) -> Vec<String> {
    (0..count.min(26))
        .map(|i| ((b'A' + i as u8) as char).to_string())
        .collect()
}
