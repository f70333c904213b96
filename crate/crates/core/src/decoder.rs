//! Inference-time strategies: greedy chain-of-thought, self-consistency,
//! reward-guided best-of-N (min over step scores), and reward-guided
//! vote-sum, plus reflective-token instrumentation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ScoreRequest, Scorer};
use crate::engine::ProblemInstance;
use crate::prompts::{join_steps, split_steps};
use crate::verifier::{extract_answer, normalize_phrase};

/// Sampling defaults for multi-candidate decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub n: usize,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            n: 32,
            temperature: 1.0,
            top_p: 0.9,
        }
    }
}

/// Tokens whose presence marks a response as reflective
/// (matched case-insensitively on word boundaries).
pub const REFLECTIVE_TOKENS: &[&str] = &["wait", "reevaluate", "recheck", "however", "but"];

/// One decoded response: its step split, extracted answer, and (once scored)
/// per-step probabilities aggregated by minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub text: String,
    pub steps: Vec<String>,
    pub extracted_answer: Option<String>,
    pub step_scores: Option<Vec<f64>>,
    pub aggregate: Option<f64>,
}

impl Candidate {
    pub fn from_text(index: usize, text: impl Into<String>) -> Self {
        let text = text.into();
        let steps = split_steps(&text);
        let extracted_answer = extract_answer(&text);
        Self {
            index,
            text,
            steps,
            extracted_answer,
            step_scores: None,
            aggregate: None,
        }
    }

    /// Installs externally computed step scores (test fixtures).
    pub fn with_scores(mut self, scores: Vec<f64>) -> Self {
        self.aggregate = min_score(&scores);
        self.step_scores = Some(scores);
        self
    }
}

fn min_score(scores: &[f64]) -> Option<f64> {
    scores.iter().copied().reduce(f64::min)
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("no candidates to decode")]
    NoCandidates,
    #[error("no candidate produced an extractable answer")]
    NoAnswer,
    #[error("candidate {0} has no step scores")]
    MissingScores(usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Scores each step on the cumulative prefix of steps up to it, conditioned
/// on the problem prompt, and aggregates by minimum.
pub fn score_candidate(
    candidate: Candidate,
    scorer: &dyn Scorer,
    problem: &ProblemInstance,
) -> Result<Candidate, DecodeError> {
    assert!(!candidate.steps.is_empty(), "candidate has no steps");
    let requests: Vec<ScoreRequest> = (1..=candidate.steps.len())
        .map(|k| ScoreRequest {
            prompt: problem.prompt.clone(),
            prefix: join_steps(&candidate.steps[..k], 1),
            boundary_index: k,
        })
        .collect();
    let scores = scorer.score_steps(&requests)?;
    Ok(candidate.with_scores(scores))
}

/// Index of the candidate with the highest aggregate; ties break to the
/// lowest index.
pub fn select_best(candidates: &[Candidate]) -> Result<usize, DecodeError> {
    if candidates.is_empty() {
        return Err(DecodeError::NoCandidates);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, candidate) in candidates.iter().enumerate() {
        let aggregate = candidate
            .aggregate
            .ok_or(DecodeError::MissingScores(candidate.index))?;
        if best.is_none_or(|(_, best_score)| aggregate > best_score) {
            best = Some((i, aggregate));
        }
    }
    Ok(best.expect("candidates checked non-empty").0)
}

/// Scores all candidates and returns the one whose minimum step score is
/// highest.
pub fn best_of_n(
    candidates: Vec<Candidate>,
    scorer: &dyn Scorer,
    problem: &ProblemInstance,
) -> Result<Candidate, DecodeError> {
    if candidates.is_empty() {
        return Err(DecodeError::NoCandidates);
    }
    let scored: Vec<Candidate> = candidates
        .into_iter()
        .map(|c| {
            if c.aggregate.is_some() {
                Ok(c)
            } else {
                score_candidate(c, scorer, problem)
            }
        })
        .collect::<Result<_, _>>()?;
    let winner = select_best(&scored)?;
    Ok(scored.into_iter().nth(winner).expect("index in range"))
}

/// Answer groups in first-occurrence order: `(normalized answer, indices)`.
fn answer_groups(candidates: &[Candidate]) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, candidate) in candidates.iter().enumerate() {
        let Some(answer) = &candidate.extracted_answer else {
            continue;
        };
        let key = normalize_phrase(answer);
        if key.is_empty() {
            continue;
        }
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key.clone());
                Vec::new()
            })
            .push(i);
    }
    order
        .into_iter()
        .map(|key| {
            let indices = groups.remove(&key).expect("group recorded");
            (key, indices)
        })
        .collect()
}

/// Majority vote over normalized extracted answers; ties break to the
/// answer seen first. Unextractable candidates are skipped.
pub fn self_consistency(candidates: &[Candidate]) -> Result<String, DecodeError> {
    if candidates.is_empty() {
        return Err(DecodeError::NoCandidates);
    }
    let mut best: Option<(String, usize)> = None;
    for (answer, indices) in answer_groups(candidates) {
        // Strict comparison keeps the first-seen answer on ties.
        if best
            .as_ref()
            .is_none_or(|(_, count)| indices.len() > *count)
        {
            best = Some((answer, indices.len()));
        }
    }
    best.map(|(answer, _)| answer).ok_or(DecodeError::NoAnswer)
}

/// Groups candidates by normalized answer, sums each group's aggregate
/// score, and returns the answer of the top group; ties break to the
/// answer seen first.
pub fn vote_sum(candidates: &[Candidate]) -> Result<String, DecodeError> {
    if candidates.is_empty() {
        return Err(DecodeError::NoCandidates);
    }
    let groups = answer_groups(candidates);
    if groups.is_empty() {
        return Err(DecodeError::NoAnswer);
    }
    let mut best: Option<(String, f64)> = None;
    for (answer, indices) in groups {
        let mut total = 0.0;
        for i in indices {
            total += candidates[i]
                .aggregate
                .ok_or(DecodeError::MissingScores(candidates[i].index))?;
        }
        if best.as_ref().is_none_or(|(_, score)| total > *score) {
            best = Some((answer, total));
        }
    }
    Ok(best.expect("groups non-empty").0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectiveStats {
    /// Size of the counted set (the correct responses).
    pub counted: usize,
    pub reflective: usize,
    /// Fraction of counted responses containing a reflective token;
    /// 0 when the set is empty (see `empty_denominator`).
    pub ratio: f64,
    pub empty_denominator: bool,
}

/// Whole-word, case-insensitive test for any reflective token.
pub fn contains_reflective_token(text: &str) -> bool {
    let lowered = text.to_lowercase();
    lowered
        .split(|c: char| !c.is_alphanumeric())
        .any(|word| REFLECTIVE_TOKENS.contains(&word))
}

/// Fraction of correct responses that contain at least one reflective token.
pub fn reflective_ratio(responses: &[(String, bool)]) -> ReflectiveStats {
    let correct: Vec<&String> = responses
        .iter()
        .filter(|(_, is_correct)| *is_correct)
        .map(|(text, _)| text)
        .collect();
    let reflective = correct
        .iter()
        .filter(|text| contains_reflective_token(text))
        .count();
    let counted = correct.len();
    ReflectiveStats {
        counted,
        reflective,
        ratio: if counted == 0 {
            0.0
        } else {
            reflective as f64 / counted as f64
        },
        empty_denominator: counted == 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockScorer;
    use crate::engine::TaskKind;
    use proptest::prelude::*;

    fn problem() -> ProblemInstance {
        ProblemInstance {
            id: "p".into(),
            prompt: "q".into(),
            gold_answer: "C".into(),
            task_kind: TaskKind::MultipleChoice,
            options: Some(vec!["1".into(), "2".into(), "3".into()]),
        }
    }

    fn candidate(index: usize, answer: &str, scores: &[f64]) -> Candidate {
        Candidate::from_text(
            index,
            format!("Step 1: thinking\n\nStep 2: The answer is {answer}."),
        )
        .with_scores(scores.to_vec())
    }

    #[test]
    fn aggregate_is_min_of_step_scores() {
        let c = candidate(0, "C", &[0.9, 0.4, 0.8]);
        assert_eq!(c.aggregate, Some(0.4));
    }

    #[test]
    fn single_step_aggregate_is_itself() {
        let c = candidate(0, "C", &[0.7]);
        assert_eq!(c.aggregate, Some(0.7));
    }

    #[test]
    fn aggregate_ignores_score_order() {
        let a = candidate(0, "C", &[0.2, 0.6, 0.9]);
        let b = candidate(0, "C", &[0.9, 0.2, 0.6]);
        assert_eq!(a.aggregate, b.aggregate);
    }

    #[test]
    fn score_candidate_builds_cumulative_prefixes() {
        struct Recorder;
        impl Scorer for Recorder {
            fn score_steps(&self, reqs: &[ScoreRequest]) -> Result<Vec<f64>, BackendError> {
                assert_eq!(reqs.len(), 2);
                assert_eq!(reqs[0].prefix, "Step 1: alpha");
                assert!(reqs[1].prefix.starts_with("Step 1: alpha\n\nStep 2: beta"));
                assert_eq!(reqs[1].boundary_index, 2);
                Ok(vec![0.8, 0.6])
            }
        }
        let c = Candidate::from_text(0, "alpha\n\nStep 2: beta The answer is C.");
        let scored = score_candidate(c, &Recorder, &problem()).unwrap();
        assert_eq!(scored.aggregate, Some(0.6));
    }

    #[test]
    fn best_of_n_returns_argmax_of_min() {
        let candidates = vec![
            candidate(0, "A", &[0.9, 0.4]),
            candidate(1, "B", &[0.9, 0.9]),
            candidate(2, "C", &[0.7, 0.6]),
        ];
        let best = best_of_n(candidates, &MockScorer::default(), &problem()).unwrap();
        assert_eq!(best.index, 1);
    }

    #[test]
    fn best_of_single_candidate_is_itself() {
        let candidates = vec![candidate(7, "A", &[0.1])];
        let best = best_of_n(candidates, &MockScorer::default(), &problem()).unwrap();
        assert_eq!(best.index, 7);
    }

    #[test]
    fn best_of_n_ties_break_to_lowest_index() {
        let candidates = vec![candidate(0, "A", &[0.5]), candidate(1, "B", &[0.5])];
        assert_eq!(select_best(&candidates).unwrap(), 0);
    }

    #[test]
    fn self_consistency_majority() {
        let candidates = vec![
            candidate(0, "C", &[0.5]),
            candidate(1, "C", &[0.5]),
            candidate(2, "B", &[0.5]),
        ];
        assert_eq!(self_consistency(&candidates).unwrap(), "c");
    }

    #[test]
    fn self_consistency_single_candidate() {
        let candidates = vec![candidate(0, "A", &[0.5])];
        assert_eq!(self_consistency(&candidates).unwrap(), "a");
    }

    #[test]
    fn self_consistency_tie_breaks_to_earliest() {
        let candidates = vec![candidate(0, "A", &[0.5]), candidate(1, "B", &[0.5])];
        assert_eq!(self_consistency(&candidates).unwrap(), "a");
    }

    #[test]
    fn self_consistency_without_answers_errors() {
        let candidates = vec![Candidate::from_text(0, "no conclusion")];
        assert!(matches!(
            self_consistency(&candidates),
            Err(DecodeError::NoAnswer)
        ));
    }

    #[test]
    fn vote_sum_prefers_highest_group_total() {
        let candidates = vec![
            candidate(0, "C", &[0.4]),
            candidate(1, "C", &[0.5]),
            candidate(2, "B", &[0.8]),
        ];
        assert_eq!(vote_sum(&candidates).unwrap(), "c");
    }

    #[test]
    fn vote_sum_single_group() {
        let candidates = vec![candidate(0, "B", &[0.3]), candidate(1, "B", &[0.2])];
        assert_eq!(vote_sum(&candidates).unwrap(), "b");
    }

    #[test]
    fn vote_sum_tie_breaks_to_earliest() {
        let candidates = vec![candidate(0, "A", &[0.5]), candidate(1, "B", &[0.5])];
        assert_eq!(vote_sum(&candidates).unwrap(), "a");
    }

    #[test]
    fn reflective_ratio_counts_correct_responses_with_tokens() {
        let responses = vec![
            ("However, the second option fits.".to_string(), true),
            ("The first option fits.".to_string(), true),
            ("Wait, reconsider.".to_string(), true),
            ("plain".to_string(), true),
            ("however wrong".to_string(), false),
        ];
        let stats = reflective_ratio(&responses);
        assert_eq!(stats.counted, 4);
        assert_eq!(stats.reflective, 2);
        assert!((stats.ratio - 0.5).abs() < 1e-12);
        assert!(!stats.empty_denominator);
    }

    #[test]
    fn reflective_ratio_with_no_correct_responses() {
        let responses = vec![("however".to_string(), false)];
        let stats = reflective_ratio(&responses);
        assert_eq!(stats.ratio, 0.0);
        assert!(stats.empty_denominator);
    }

    #[test]
    fn token_inside_larger_word_does_not_count() {
        assert!(!contains_reflective_token("spread butter on bread"));
        assert!(contains_reflective_token("all but one"));
    }

    #[test]
    fn n_equal_one_strategies_agree() {
        let candidates = vec![candidate(0, "C", &[0.6])];
        let bon = best_of_n(candidates.clone(), &MockScorer::default(), &problem()).unwrap();
        assert_eq!(
            normalize_phrase(bon.extracted_answer.as_deref().unwrap()),
            "c"
        );
        assert_eq!(self_consistency(&candidates).unwrap(), "c");
        assert_eq!(vote_sum(&candidates).unwrap(), "c");
    }

    proptest! {
        #[test]
        fn selection_invariant_under_increasing_transform(
            raw in proptest::collection::vec(
                proptest::collection::vec(0.0f64..1.0, 1..6),
                1..8,
            ),
            scale in 0.1f64..3.0,
            shift in -1.0f64..1.0,
        ) {
            let candidates: Vec<Candidate> = raw
                .iter()
                .enumerate()
                .map(|(i, scores)| candidate(i, "A", scores))
                .collect();
            let before = select_best(&candidates).unwrap();
            let transformed: Vec<Candidate> = raw
                .iter()
                .enumerate()
                .map(|(i, scores)| {
                    let mapped: Vec<f64> =
                        scores.iter().map(|s| scale * s + s.powi(3) + shift).collect();
                    candidate(i, "A", &mapped)
                })
                .collect();
            let after = select_best(&transformed).unwrap();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn self_consistency_permutation_invariant_without_ties(
            counts in proptest::collection::vec(1usize..5, 2..4),
        ) {
            // Make group sizes strictly distinct so no tie rule is involved.
            let mut sizes: Vec<usize> = counts
                .iter()
                .enumerate()
                .map(|(i, c)| c + i * 5)
                .collect();
            let answers: Vec<String> = (0..sizes.len()).map(|i| format!("opt{i}")).collect();
            let mut candidates = Vec::new();
            let mut index = 0;
            for (answer, size) in answers.iter().zip(&sizes) {
                for _ in 0..*size {
                    candidates.push(candidate(index, answer, &[0.5]));
                    index += 1;
                }
            }
            let expected = {
                let max = *sizes.iter().max().unwrap();
                let at = sizes.iter().position(|&s| s == max).unwrap();
                normalize_phrase(&answers[at])
            };
            prop_assert_eq!(self_consistency(&candidates).unwrap(), expected.clone());
            candidates.reverse();
            prop_assert_eq!(self_consistency(&candidates).unwrap(), expected);
            sizes.clear();
        }
    }
}
