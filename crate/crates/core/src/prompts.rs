//! Prompt rendering and step splitting.
//!
//! Prompts are plain text; chat-format scaffolding (role headers, special
//! tokens) is the HTTP adapter's concern. Trajectory steps are joined by a
//! blank line plus a `Step k:` header, and generations are split back into
//! steps on the same markers.

use std::fmt;
use std::fs;
use std::path::Path;

/// Separator between consecutive steps in rendered prompts and corpora.
pub const STEP_SEPARATOR: &str = "\n\n";

/// Fixed opening of a reflective step.
pub const REFLECT_PREAMBLE: &str =
    "Wait, the previous answer maybe incorrect and I need to reconsider other options.";

/// Final-answer marker; matching is case-insensitive.
pub const ANSWER_MARKER: &str = "The answer is";

const EXPERT_HEADER: &str =
    "You are a professional medical expert majored at reasoning in hard medical-related problems.";

const REASON_INSTRUCTION: &str = "Think critically about the problem and answer with concise, \
     accurate reasoning. Please ensure your reasoning is thorough and elaborate, breaking down \
     each step of your thought process.";

const FINISH_INSTRUCTION: &str = "Use thorough and elaborate steps to complete your reasoning. \
     Conclude the task by stating: \"The answer is {answer}\".";

const ANSWER_INSTRUCTION: &str = "Based on the reasoning steps so far, directly state the final \
     answer, concluding with: \"The answer is {answer}\".";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptKind {
    /// Sample the next reasoning step.
    Reason,
    /// Reason through to a final answer in one generation.
    Finish,
    /// Retry from a wrong step, opening with the reflect preamble.
    Reflect,
    /// Force a direct answer for a rollout simulation.
    AnsPrompt,
    /// Append the bare answer marker to an existing trajectory.
    ForcedAnswer,
}

impl PromptKind {
    pub fn parse(name: &str) -> Result<Self, PromptError> {
        match name {
            "reason" => Ok(Self::Reason),
            "finish" => Ok(Self::Finish),
            "reflect" => Ok(Self::Reflect),
            "ans_prompt" => Ok(Self::AnsPrompt),
            "forced_answer" => Ok(Self::ForcedAnswer),
            other => Err(PromptError::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Reason => "reason",
            Self::Finish => "finish",
            Self::Reflect => "reflect",
            Self::AnsPrompt => "ans_prompt",
            Self::ForcedAnswer => "forced_answer",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("unknown prompt kind `{0}`")]
    UnknownKind(String),
    #[error("trajectory is empty: the fixed root step is mandatory")]
    EmptyTrajectory,
    #[error("template for `{kind}` left placeholder `{placeholder}` unfilled")]
    UnfilledPlaceholder {
        kind: PromptKind,
        placeholder: String,
    },
    #[error("failed to read template `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Instruction templates for each prompt kind plus an optional few-shot
/// exemplar. Embedded defaults are used unless a template directory
/// overrides them.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    reason: String,
    finish: String,
    reflect: String,
    ans_prompt: String,
    few_shot: Option<String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        let body = |instruction: &str| {
            format!("{{few_shot}}{EXPERT_HEADER}\n\n{instruction}\n\nProblem: {{problem}}\n\n{{trajectory}}")
        };
        Self {
            reason: body(REASON_INSTRUCTION),
            finish: body(FINISH_INSTRUCTION),
            reflect: body(FINISH_INSTRUCTION),
            ans_prompt: body(ANSWER_INSTRUCTION),
            few_shot: None,
        }
    }
}

impl PromptSet {
    pub fn with_few_shot(mut self, exemplar: impl Into<String>) -> Self {
        self.few_shot = Some(exemplar.into());
        self
    }

    /// Loads overrides from a directory holding `reason.txt`, `finish.txt`,
    /// `reflect.txt`, `ans_prompt.txt` and/or `few_shot.txt`. Missing files
    /// keep their embedded defaults.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::default();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            if path.exists() {
                fs::read_to_string(&path)
                    .map(Some)
                    .map_err(|source| PromptError::Io {
                        path: path.display().to_string(),
                        source,
                    })
            } else {
                Ok(None)
            }
        };
        if let Some(body) = read("reason.txt")? {
            set.reason = body;
        }
        if let Some(body) = read("finish.txt")? {
            set.finish = body;
        }
        if let Some(body) = read("reflect.txt")? {
            set.reflect = body;
        }
        if let Some(body) = read("ans_prompt.txt")? {
            set.ans_prompt = body;
        }
        if let Some(exemplar) = read("few_shot.txt")? {
            set.few_shot = Some(exemplar.trim_end().to_string());
        }
        Ok(set)
    }

    /// Renders a prompt for `kind` over the trajectory so far. Steps are
    /// numbered `Step 0:`, `Step 1:`, ... and joined by blank lines; the
    /// prompt ends with the cue appropriate for the kind: the next step
    /// header (`Reason`/`Finish`), the header plus reflect preamble
    /// (`Reflect`), or the bare answer marker (`AnsPrompt`/`ForcedAnswer`).
    pub fn render(
        &self,
        kind: PromptKind,
        problem_prompt: &str,
        trajectory: &[&str],
    ) -> Result<String, PromptError> {
        if trajectory.is_empty() {
            return Err(PromptError::EmptyTrajectory);
        }
        let steps = join_steps(trajectory, 0);
        let trajectory_block = match kind {
            PromptKind::Reason | PromptKind::Finish => {
                format!("{steps}{STEP_SEPARATOR}Step {}:", trajectory.len())
            }
            PromptKind::Reflect => format!(
                "{steps}{STEP_SEPARATOR}Step {}: {REFLECT_PREAMBLE}",
                trajectory.len()
            ),
            PromptKind::AnsPrompt => format!("{steps}{STEP_SEPARATOR}{ANSWER_MARKER}"),
            PromptKind::ForcedAnswer => {
                // Raw continuation: no instruction header, no few-shot block.
                return Ok(format!("{steps}{STEP_SEPARATOR}{ANSWER_MARKER}"));
            }
        };
        let template = match kind {
            PromptKind::Reason => &self.reason,
            PromptKind::Finish => &self.finish,
            PromptKind::Reflect => &self.reflect,
            PromptKind::AnsPrompt => &self.ans_prompt,
            PromptKind::ForcedAnswer => unreachable!(),
        };
        let few_shot_block = match &self.few_shot {
            Some(exemplar) => format!("Reasoning Example:\n{exemplar}\n\n"),
            None => String::new(),
        };
        let rendered = template
            .replace("{few_shot}", &few_shot_block)
            .replace("{problem}", problem_prompt)
            .replace("{trajectory}", &trajectory_block);
        for placeholder in ["{few_shot}", "{problem}", "{trajectory}"] {
            if rendered.contains(placeholder) {
                return Err(PromptError::UnfilledPlaceholder {
                    kind,
                    placeholder: placeholder.to_string(),
                });
            }
        }
        Ok(rendered)
    }
}

/// Joins steps with `Step k:` headers starting at `start`, separated by
/// blank lines.
pub fn join_steps<S: AsRef<str>>(steps: &[S], start: usize) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Step {}: {}", start + i, s.as_ref()))
        .collect::<Vec<_>>()
        .join(STEP_SEPARATOR)
}

/// Locates `Step <digits>:` markers. Returns `(marker_start, text_start)`
/// pairs in order.
fn step_markers(text: &str) -> Vec<(usize, usize)> {
    let mut markers = Vec::new();
    let mut offset = 0;
    while let Some(found) = text[offset..].find("Step ") {
        let start = offset + found;
        let after = &text[start + 5..];
        let digits = after.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 && after[digits..].starts_with(':') {
            let text_start = start + 5 + digits + 1;
            markers.push((start, text_start));
            offset = text_start;
        } else {
            offset = start + 5;
        }
    }
    markers
}

/// Splits a generation into step texts on `Step k:` markers. Markers are
/// stripped and each segment is trimmed; text before the first marker
/// becomes its own step, and markerless text yields a single step.
pub fn split_steps(generation: &str) -> Vec<String> {
    let markers = step_markers(generation);
    let mut segments = Vec::new();
    if markers.is_empty() {
        let trimmed = generation.trim();
        if !trimmed.is_empty() {
            segments.push(trimmed.to_string());
        }
        return segments;
    }
    let lead = generation[..markers[0].0].trim();
    if !lead.is_empty() {
        segments.push(lead.to_string());
    }
    for (i, &(_, text_start)) in markers.iter().enumerate() {
        let end = markers
            .get(i + 1)
            .map(|&(next_start, _)| next_start)
            .unwrap_or(generation.len());
        let segment = generation[text_start..end].trim();
        if !segment.is_empty() {
            segments.push(segment.to_string());
        }
    }
    segments
}
