//! Search-based synthesis of step-wise reasoning trajectories against a
//! pluggable generation backend, with rule-based verification, per-step
//! reward labeling, training-corpus extraction, curriculum sampling, and
//! reward-guided decoding strategies.

pub mod backend;
pub mod decoder;
pub mod engine;
pub mod forge;
pub mod labeler;
pub mod prompts;
pub mod tree;
pub mod verifier;

pub use backend::{BackendError, GenerationRequest, Generator, ScoreRequest, Scorer};
pub use engine::{run_search, run_search_logged, EngineError, ProblemInstance, TaskKind};
pub use labeler::{LabelConfig, LabelScheme};
pub use prompts::PromptSet;
pub use tree::{SearchConfig, SearchTree};
