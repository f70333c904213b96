//! Deterministic scripted backend for desk-scale runs and tests.
//!
//! Outcomes are keyed by request content, never by arrival order: every
//! sample is derived from a hash of the script seed, the prompt, the tag,
//! and the sample index, so identical request sequences reproduce identical
//! outputs under any interleaving.

use super::{truncate_at_stop, BackendError, GenerationRequest, Generator, ScoreRequest, Scorer};
use crate::engine::{ProblemInstance, TaskKind};
use crate::prompts::{split_steps, ANSWER_MARKER};

/// Phrase embedded in the steps of candidates scripted to be correct; the
/// mock scorer keys on it.
pub const SOUND_STEP_PHRASE: &str = "which is consistent with the presented evidence";

/// Counterpart phrase for candidates scripted to be wrong.
pub const SHAKY_STEP_PHRASE: &str = "though this requires a leap of inference";

const CANNED_STEPS: &[&str] = &[
    "Weigh the presenting findings against each candidate explanation",
    "Rule out the options that contradict the given history",
    "Compare the remaining options on mechanism and typical course",
    "Check the quantitative details against reference ranges",
    "Reassess which option the strongest evidence converges on",
];

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for part in parts {
        for &byte in *part {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

/// Uniform draw in `[0, 1)` from a hash.
fn unit(hash: u64) -> f64 {
    (hash >> 11) as f64 / (1u64 << 53) as f64
}

/// Accuracy override for requests whose prompt embeds a given fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptOverride {
    pub problem_id: String,
    /// Applies when the rendered prompt contains this fragment (empty
    /// matches every request for the problem).
    pub prompt_contains: String,
    pub accuracy: f64,
}

/// Behavior table for the mock: a seed, a global correctness probability,
/// optional per-problem overrides, and the chance that a sampled reasoning
/// step concludes with a final answer.
#[derive(Debug, Clone, PartialEq)]
pub struct MockScript {
    pub seed: u64,
    pub accuracy: f64,
    pub finish_ratio: f64,
    pub overrides: Vec<ScriptOverride>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            seed: 0,
            accuracy: 1.0,
            finish_ratio: 0.0,
            overrides: Vec::new(),
        }
    }
}

impl MockScript {
    pub fn with_accuracy(accuracy: f64) -> Self {
        Self {
            accuracy,
            ..Self::default()
        }
    }

    pub fn seeded(seed: u64, accuracy: f64) -> Self {
        Self {
            seed,
            accuracy,
            ..Self::default()
        }
    }
}

pub struct MockBackend {
    script: MockScript,
    problems: Vec<ProblemInstance>,
}

impl MockBackend {
    pub fn new(script: MockScript, problems: &[ProblemInstance]) -> Self {
        Self {
            script,
            problems: problems.to_vec(),
        }
    }

    fn find_problem(&self, prompt: &str) -> Option<&ProblemInstance> {
        self.problems
            .iter()
            .find(|p| prompt.contains(p.prompt.as_str()))
    }

    fn accuracy_for(&self, problem: Option<&ProblemInstance>, prompt: &str) -> f64 {
        if let Some(problem) = problem {
            for rule in &self.script.overrides {
                if rule.problem_id == problem.id
                    && (rule.prompt_contains.is_empty() || prompt.contains(&rule.prompt_contains))
                {
                    return rule.accuracy;
                }
            }
        }
        self.script.accuracy
    }

    fn draw(&self, prompt: &str, tag: &str, index: usize, salt: &str) -> u64 {
        fnv1a(&[
            &self.script.seed.to_le_bytes(),
            prompt.as_bytes(),
            tag.as_bytes(),
            &index.to_le_bytes(),
            salt.as_bytes(),
        ])
    }

    fn answer_text(
        &self,
        problem: Option<&ProblemInstance>,
        correct: bool,
        allowed: Option<&[String]>,
    ) -> String {
        let Some(problem) = problem else {
            return if correct { "A" } else { "B" }.to_string();
        };
        if correct {
            if let Some(allowed) = allowed {
                let gold_first = problem
                    .gold_answer
                    .chars()
                    .find(|c| !c.is_whitespace())
                    .unwrap_or('A');
                if let Some(tok) = allowed.iter().find(|t| {
                    t.chars()
                        .next()
                        .is_some_and(|c| c.eq_ignore_ascii_case(&gold_first))
                }) {
                    return tok.clone();
                }
            }
            return problem.gold_answer.clone();
        }
        match problem.task_kind {
            TaskKind::MultipleChoice => {
                let letters: Vec<char> = ('A'..='Z')
                    .take(problem.options.as_ref().map_or(5, Vec::len).max(2))
                    .collect();
                let gold = problem
                    .gold_answer
                    .chars()
                    .find(|c| !c.is_whitespace())
                    .map(|c| c.to_ascii_uppercase())
                    .unwrap_or('A');
                let wrong = letters.iter().copied().find(|&c| c != gold).unwrap_or('B');
                if let Some(allowed) = allowed {
                    if let Some(tok) = allowed.iter().find(|t| {
                        t.chars()
                            .next()
                            .is_some_and(|c| !c.eq_ignore_ascii_case(&gold))
                    }) {
                        return tok.clone();
                    }
                }
                wrong.to_string()
            }
            TaskKind::CloseEnded => {
                let gold = problem.gold_answer.to_lowercase();
                let candidate = "an unrelated incidental finding";
                if candidate.contains(&gold) {
                    "something else entirely".to_string()
                } else {
                    candidate.to_string()
                }
            }
        }
    }

    fn reasoning_step(&self, prompt: &str, tag: &str, index: usize) -> String {
        let h = self.draw(prompt, tag, index, "step");
        let base = CANNED_STEPS[(h % CANNED_STEPS.len() as u64) as usize];
        format!("{base} (consideration {:04x}).", h & 0xffff)
    }

    fn one_sample(&self, req: &GenerationRequest, index: usize) -> String {
        let problem = self.find_problem(&req.prompt);
        let accuracy = self.accuracy_for(problem, &req.prompt);
        let correct = unit(self.draw(&req.prompt, &req.tag, index, "correct")) < accuracy;
        let allowed = req.allowed_first_tokens.as_deref();
        let tag = req.tag.as_str();
        let text = if tag.starts_with("rollout") || tag.starts_with("forced") {
            // Continuation after the bare answer marker.
            format!(" {}.", self.answer_text(problem, correct, allowed))
        } else if tag.starts_with("reason") {
            let step = self.reasoning_step(&req.prompt, tag, index);
            let concludes =
                unit(self.draw(&req.prompt, tag, index, "finish")) < self.script.finish_ratio;
            if concludes {
                let answer = self.answer_text(problem, correct, allowed);
                format!("{step} {ANSWER_MARKER} {answer}.")
            } else {
                step
            }
        } else if tag.starts_with("reflect") {
            format!(
                " Reconsidering the alternatives more carefully. {}",
                self.reasoning_step(&req.prompt, tag, index)
            )
        } else if tag.starts_with("finish") || tag.starts_with("fastpath") {
            let answer = self.answer_text(problem, correct, allowed);
            format!(
                "{} {ANSWER_MARKER} {answer}.",
                self.reasoning_step(&req.prompt, tag, index)
            )
        } else {
            // Full chain-of-thought response (decode / profile / cot).
            let answer = self.answer_text(problem, correct, allowed);
            let quality = if correct {
                SOUND_STEP_PHRASE
            } else {
                SHAKY_STEP_PHRASE
            };
            let step_count = 2 + (self.draw(&req.prompt, tag, index, "len") % 3) as usize;
            let mut parts = Vec::new();
            for k in 0..step_count {
                let h = self.draw(&req.prompt, tag, index, &format!("body{k}"));
                let base = CANNED_STEPS[(h % CANNED_STEPS.len() as u64) as usize];
                let reflective =
                    unit(self.draw(&req.prompt, tag, index, &format!("refl{k}"))) < 0.3;
                let opener = if reflective && k > 0 { "However, " } else { "" };
                let step = format!("{opener}{base} ({:04x}), {quality}.", h & 0xffff);
                if k == 0 {
                    parts.push(step);
                } else {
                    parts.push(format!("Step {}: {step}", k + 1));
                }
            }
            format!(
                "{}\n\nStep {}: {ANSWER_MARKER} {answer}, {quality}.",
                parts.join("\n\n"),
                step_count + 1
            )
        };
        truncate_at_stop(&text, &req.stop)
    }
}

impl Generator for MockBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        Ok((0..req.sample_count)
            .map(|i| self.one_sample(req, i))
            .collect())
    }
}

/// Scripted step scorer. Steps carrying the sound phrase score in
/// `[hi - jitter, hi]`, steps carrying the shaky phrase in
/// `[lo, lo + jitter]`, anything else at the neutral midpoint.
pub struct MockScorer {
    pub seed: u64,
    pub hi: f64,
    pub lo: f64,
    pub jitter: f64,
}

impl Default for MockScorer {
    fn default() -> Self {
        Self {
            seed: 0,
            hi: 0.95,
            lo: 0.25,
            jitter: 0.2,
        }
    }
}

impl MockScorer {
    pub fn fixed(hi: f64, lo: f64) -> Self {
        Self {
            seed: 0,
            hi,
            lo,
            jitter: 0.0,
        }
    }
}

impl Scorer for MockScorer {
    fn score_steps(&self, reqs: &[ScoreRequest]) -> Result<Vec<f64>, BackendError> {
        Ok(reqs
            .iter()
            .map(|req| {
                let steps = split_steps(&req.prefix);
                let last = steps.last().map(String::as_str).unwrap_or("");
                let h = fnv1a(&[
                    &self.seed.to_le_bytes(),
                    req.prompt.as_bytes(),
                    req.prefix.as_bytes(),
                ]);
                let u = unit(h);
                if last.contains(SOUND_STEP_PHRASE) {
                    self.hi - self.jitter * u
                } else if last.contains(SHAKY_STEP_PHRASE) {
                    self.lo + self.jitter * u
                } else {
                    0.5
                }
            })
            .collect())
    }
}
