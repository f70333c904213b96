//! Per-step binary training labels for the process reward model.
//!
//! The soft dual-side rule keeps a step positive when its value is positive
//! and did not drop below the previous step's value; a dropping step is
//! penalized by the surrounding value loss and goes to 0 once the adjusted
//! value falls to or below zero. Two harder ablation variants are provided
//! for comparison corpora.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    SoftDual,
    HardSingle,
    HardDual,
}

impl LabelScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SoftDual => "soft_dual",
            Self::HardSingle => "hard_single",
            Self::HardDual => "hard_dual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    pub beta: f64,
    pub scheme: LabelScheme,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            scheme: LabelScheme::SoftDual,
        }
    }
}

/// A root-to-finish trace with the node values recorded by the search.
/// `steps` excludes the fixed root step; `root_value` supplies the
/// previous-value boundary for the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuedTrajectory {
    pub problem_id: String,
    pub root_value: f64,
    pub steps: Vec<(String, f64)>,
    pub terminal_correct: bool,
}

/// Soft dual-side label:
/// `ceil(v - beta * max(0, v_prev - v_next))` when `v < v_prev`, else
/// `ceil(v)`, clamped into `{0, 1}`. A value drop that the next step
/// recovers (`v_next >= v_prev`) carries no penalty, so valid reflection
/// keeps the step positive.
pub fn soft_dual_label(v_prev: f64, v: f64, v_next: f64, beta: f64) -> u8 {
    let adjusted = if v < v_prev {
        v - beta * (v_prev - v_next).max(0.0)
    } else {
        v
    };
    adjusted.ceil().clamp(0.0, 1.0) as u8
}

/// 1 whenever the rollout value is strictly positive.
pub fn hard_single_label(v: f64) -> u8 {
    u8::from(v > 0.0)
}

/// 1 only for a positive value that did not degrade the trajectory.
pub fn hard_dual_label(v_prev: f64, v: f64) -> u8 {
    u8::from(v > 0.0 && v >= v_prev)
}

/// One label per step, in step order. Boundary handling: the first step's
/// previous value is the root's value, and the final step's next value is
/// its own value (so the penalty reduces to `max(0, v_prev - v)`).
pub fn label_trajectory(trajectory: &ValuedTrajectory, config: &LabelConfig) -> Vec<u8> {
    let steps = &trajectory.steps;
    let mut labels = Vec::with_capacity(steps.len());
    for (i, &(_, value)) in steps.iter().enumerate() {
        let v_prev = if i == 0 {
            trajectory.root_value
        } else {
            steps[i - 1].1
        };
        let label = match config.scheme {
            LabelScheme::SoftDual => {
                let v_next = if i + 1 < steps.len() {
                    steps[i + 1].1
                } else {
                    value
                };
                soft_dual_label(v_prev, value, v_next, config.beta)
            }
            LabelScheme::HardSingle => hard_single_label(value),
            LabelScheme::HardDual => hard_dual_label(v_prev, value),
        };
        labels.push(label);
    }
    labels
}
