//! Search orchestration: selection, expansion, rollout, verification,
//! backpropagation, and termination.
//!
//! Each iteration selects a non-finish leaf by UCB descent. An unvisited
//! leaf is rolled out (its value becomes the simulation accuracy); a visited
//! leaf is expanded once, with the expansion mode picked by its value:
//! straight to an answer above the fast-path threshold, a single reflective
//! retry for a wrong node, otherwise a batch of sampled next steps. Finish
//! children are verified against the gold answer the moment they appear.

use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendError, GenerationRequest, Generator, FORCED_ANSWER_TOKEN_LIMIT, MAX_GENERATION_TOKENS,
};
use crate::prompts::{split_steps, PromptError, PromptKind, PromptSet, STEP_SEPARATOR};
use crate::tree::{
    backpropagate, select_path, NodeId, NodeKind, RolloutRecord, SearchConfig, SearchTree,
    TreeError,
};
use crate::verifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultipleChoice,
    CloseEnded,
}

/// One seed question with its gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub id: String,
    pub prompt: String,
    /// Wire name `answer`, matching the seed-file schema.
    #[serde(rename = "answer")]
    pub gold_answer: String,
    pub task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

impl ProblemInstance {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.gold_answer.trim().is_empty() {
            return Err(EngineError::InvalidProblem(format!(
                "problem `{}` has an empty gold answer",
                self.id
            )));
        }
        if self.task_kind == TaskKind::MultipleChoice
            && self.options.as_ref().is_none_or(Vec::is_empty)
        {
            return Err(EngineError::InvalidProblem(format!(
                "multiple-choice problem `{}` has no options",
                self.id
            )));
        }
        Ok(())
    }
}

/// How a selected node is grown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpansionAction {
    /// Sample `samples` alternative next steps.
    Reason { samples: usize },
    /// Sample one introspective retry step.
    Reflect,
    /// Generate straight through to a final answer in one completion.
    FinishFastPath,
}

/// Tree mutation trace of one search run, for replay against independent
/// recomputations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SearchEvent {
    /// A child node was attached.
    Added { id: NodeId, parent: NodeId },
    /// A node's value was set (rollout accuracy or finish verification)
    /// and backpropagation ran from it.
    Evaluated { id: NodeId, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Enough correct finish leaves were found.
    CorrectCountReached,
    /// The expansion budget ran out.
    BudgetExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationCheck {
    Continue,
    Stop(StopReason),
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend returned only whitespace for node {0}")]
    EmptyGeneration(NodeId),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("search did not settle within {0} iterations")]
    IterationGuard(usize),
}

/// Stop sequences bounding a generation to a single reasoning step.
pub fn step_stop_sequences() -> Vec<String> {
    (1..=100).map(|k| format!("Step {k}:")).collect()
}

/// Picks the expansion mode for a node: fast path at or above the threshold,
/// one reflective retry for a node whose rollout came back wrong, otherwise
/// an ordinary batch of sampled steps.
pub fn choose_action(tree: &SearchTree, node_id: NodeId, config: &SearchConfig) -> ExpansionAction {
    let node = tree.node(node_id);
    debug_assert!(node.kind != NodeKind::Finish);
    if node.value >= config.fast_path_threshold {
        return ExpansionAction::FinishFastPath;
    }
    let wrong = node.rollout.is_some() && node.value == 0.0;
    let has_reflect_child = node
        .children
        .iter()
        .any(|&c| tree.node(c).kind == NodeKind::Reflect);
    if wrong && !has_reflect_child {
        return ExpansionAction::Reflect;
    }
    ExpansionAction::Reason {
        samples: config.branch_factor,
    }
}

/// Simulation budget for a node at `depth`: `max(floor, ceil(base / depth))`.
pub fn rollout_budget(depth: u32, config: &SearchConfig) -> u32 {
    assert!(depth >= 1, "rollout depth starts at 1");
    let scaled = (config.rollout_base as f64 / depth as f64).ceil() as u32;
    scaled.max(config.rollout_floor)
}

/// Renders the action's prompt, samples the backend, and attaches each
/// non-empty sample as a child. A sample containing the final-answer marker
/// becomes a finish node regardless of the action. Returns the new children
/// in request order.
pub fn expand(
    tree: &mut SearchTree,
    node_id: NodeId,
    action: ExpansionAction,
    generator: &dyn Generator,
    config: &SearchConfig,
    prompts: &PromptSet,
) -> Result<Vec<NodeId>, EngineError> {
    let steps = tree.steps_to(node_id);
    let problem_prompt = tree.problem.prompt.clone();
    let (kind, prompt_kind, samples, tag) = match action {
        ExpansionAction::Reason { samples } => {
            (NodeKind::Reason, PromptKind::Reason, samples, "reason")
        }
        ExpansionAction::Reflect => (NodeKind::Reflect, PromptKind::Reflect, 1, "reflect"),
        ExpansionAction::FinishFastPath => (NodeKind::Finish, PromptKind::Finish, 1, "fastpath"),
    };
    let prompt = prompts.render(prompt_kind, &problem_prompt, &steps)?;
    let mut request = GenerationRequest::new(prompt, samples, tag)
        .with_temperature(config.temperature)
        .with_max_new_tokens(MAX_GENERATION_TOKENS);
    if !matches!(action, ExpansionAction::FinishFastPath) {
        // Fast-path completions run until an answer; step generations stop
        // at the next step header.
        request = request.with_stop(step_stop_sequences());
    }
    let completions = generator.generate(&request)?;
    tree.expansion_trials += 1;

    let mut children = Vec::new();
    for completion in completions {
        if completion.trim().is_empty() {
            continue;
        }
        // A completion may span several steps; fold it into one step with
        // the markers stripped.
        let folded = split_steps(&completion).join(STEP_SEPARATOR);
        let step_text = match action {
            ExpansionAction::Reflect => {
                format!("{} {folded}", crate::prompts::REFLECT_PREAMBLE)
            }
            _ => folded,
        };
        if step_text.trim().is_empty() {
            continue;
        }
        let child_kind = if verifier::extract_answer(&step_text).is_some() {
            NodeKind::Finish
        } else {
            kind
        };
        children.push(tree.add_child(node_id, child_kind, step_text));
    }
    if children.is_empty() {
        return Err(EngineError::EmptyGeneration(node_id));
    }
    Ok(children)
}

/// Simulates the node by forcing `L` direct answers conditioned on the
/// trajectory so far, and sets the node's value to their accuracy.
pub fn rollout(
    tree: &mut SearchTree,
    node_id: NodeId,
    generator: &dyn Generator,
    config: &SearchConfig,
    prompts: &PromptSet,
) -> Result<RolloutRecord, EngineError> {
    debug_assert!(
        tree.node(node_id).rollout.is_none(),
        "node already rolled out"
    );
    debug_assert!(tree.node(node_id).kind != NodeKind::Finish);
    let depth = tree.depth(node_id);
    let budget = rollout_budget(depth.max(1), config) as usize;
    let steps = tree.steps_to(node_id);
    let prompt = prompts.render(PromptKind::AnsPrompt, &tree.problem.prompt, &steps)?;
    let request = GenerationRequest::new(prompt, budget, "rollout")
        .with_temperature(config.temperature)
        .with_max_new_tokens(FORCED_ANSWER_TOKEN_LIMIT);
    let completions = generator.generate(&request)?;

    let mut simulated_answers = Vec::with_capacity(budget);
    let mut correct_count = 0usize;
    for completion in &completions {
        // The prompt ends with the answer marker; the completion is the
        // answer itself. Re-attach the marker so extraction applies.
        let full = format!("{} {completion}", crate::prompts::ANSWER_MARKER);
        let extracted = verifier::extract_answer(&full);
        if let Some(answer) = &extracted {
            if verifier::verify(answer, &tree.problem).correct {
                correct_count += 1;
            }
        }
        simulated_answers.push(extracted);
    }
    let record = RolloutRecord {
        budget,
        simulated_answers,
        correct_count,
        accuracy: correct_count as f64 / budget as f64,
    };
    let node = tree.node_mut(node_id);
    node.value = record.accuracy;
    node.rollout = Some(record.clone());
    Ok(record)
}

/// Verifies a finish node against the gold answer, setting its value to 1
/// or 0 and updating the tree's correct-leaf counter.
pub fn verify_finish(tree: &mut SearchTree, node_id: NodeId) -> f64 {
    debug_assert_eq!(tree.node(node_id).kind, NodeKind::Finish);
    let verdict = verifier::verify_response(&tree.node(node_id).step_text, &tree.problem);
    let value = if verdict.correct { 1.0 } else { 0.0 };
    tree.node_mut(node_id).value = value;
    if verdict.correct {
        tree.correct_leaf_count += 1;
    }
    value
}

/// Stops once enough correct finish leaves exist, or once the expansion
/// budget is spent.
pub fn should_terminate(tree: &SearchTree, config: &SearchConfig) -> TerminationCheck {
    if tree.correct_leaf_count >= config.min_correct {
        return TerminationCheck::Stop(StopReason::CorrectCountReached);
    }
    if tree.expansion_trials >= config.max_expansion_trials {
        return TerminationCheck::Stop(StopReason::BudgetExhausted);
    }
    TerminationCheck::Continue
}

/// Runs the full search loop for one problem and returns the finished tree.
/// Deterministic given a fixed seed and a deterministic backend.
pub fn run_search(
    problem: &ProblemInstance,
    generator: &dyn Generator,
    config: &SearchConfig,
    prompts: &PromptSet,
) -> Result<SearchTree, EngineError> {
    run_search_logged(problem, generator, config, prompts).map(|(tree, _)| tree)
}

/// As [`run_search`], additionally returning the tree mutation trace.
pub fn run_search_logged(
    problem: &ProblemInstance,
    generator: &dyn Generator,
    config: &SearchConfig,
    prompts: &PromptSet,
) -> Result<(SearchTree, Vec<SearchEvent>), EngineError> {
    problem.validate()?;
    let mut tree = SearchTree::new(problem.clone());
    let mut log = Vec::new();
    // Generous bound: every iteration either rolls out a fresh node or
    // spends an expansion trial, both of which are finite.
    let max_iterations = 64 * (config.max_expansion_trials + 1) * (config.branch_factor + 1);
    for _ in 0..max_iterations {
        match should_terminate(&tree, config) {
            TerminationCheck::Stop(StopReason::CorrectCountReached) => {
                return Ok((tree, log));
            }
            TerminationCheck::Stop(StopReason::BudgetExhausted) => {
                finish_all_leaves(&mut tree, generator, config, prompts, &mut log)?;
                return Ok((tree, log));
            }
            TerminationCheck::Continue => {}
        }
        let path = match select_path(&tree, config) {
            Ok(path) => path,
            // Every remaining leaf is already a finish node.
            Err(TreeError::TreeExhausted) => return Ok((tree, log)),
            Err(other) => return Err(other.into()),
        };
        let target = *path.last().expect("path is never empty");
        let node = tree.node(target);
        if node.kind != NodeKind::Root && node.visits == 0 {
            rollout(&mut tree, target, generator, config, prompts)?;
            log.push(SearchEvent::Evaluated {
                id: target,
                value: tree.node(target).value,
            });
            backpropagate(&mut tree, target)?;
        } else {
            let action = choose_action(&tree, target, config);
            let children = expand(&mut tree, target, action, generator, config, prompts)?;
            settle_new_children(&mut tree, target, children, &mut log)?;
        }
    }
    Err(EngineError::IterationGuard(max_iterations))
}

/// Records the new children and verifies any that are finish nodes.
fn settle_new_children(
    tree: &mut SearchTree,
    parent: NodeId,
    children: Vec<NodeId>,
    log: &mut Vec<SearchEvent>,
) -> Result<(), EngineError> {
    for child in children {
        log.push(SearchEvent::Added { id: child, parent });
        if tree.node(child).kind == NodeKind::Finish {
            let value = verify_finish(tree, child);
            log.push(SearchEvent::Evaluated { id: child, value });
            backpropagate(tree, child)?;
        }
    }
    Ok(())
}

/// Final pass for an exhausted search: every non-finish leaf is driven to an
/// answer so the tree ends with finish nodes on all leaves.
fn finish_all_leaves(
    tree: &mut SearchTree,
    generator: &dyn Generator,
    config: &SearchConfig,
    prompts: &PromptSet,
    log: &mut Vec<SearchEvent>,
) -> Result<(), EngineError> {
    let pending: Vec<NodeId> = tree
        .leaves()
        .filter(|n| n.kind != NodeKind::Finish)
        .map(|n| n.id)
        .collect();
    for node_id in pending {
        let children = expand(
            tree,
            node_id,
            ExpansionAction::FinishFastPath,
            generator,
            config,
            prompts,
        )?;
        settle_new_children(tree, node_id, children, log)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockScript};
    use crate::tree::ROOT_STEP_TEXT;

    fn problem() -> ProblemInstance {
        ProblemInstance {
            id: "p1".into(),
            prompt: "Which artery supplies the lesion?".into(),
            gold_answer: "C".into(),
            task_kind: TaskKind::MultipleChoice,
            options: Some(vec![
                "a".into(),
                "b".into(),
                "c".into(),
                "d".into(),
                "e".into(),
            ]),
        }
    }

    fn rolled_out(tree: &mut SearchTree, id: NodeId, value: f64) {
        let node = tree.node_mut(id);
        node.value = value;
        node.rollout = Some(RolloutRecord {
            budget: 4,
            simulated_answers: vec![None; 4],
            correct_count: (value * 4.0) as usize,
            accuracy: value,
        });
    }

    #[test]
    fn high_value_node_takes_fast_path() {
        let mut tree = SearchTree::new(problem());
        let id = tree.add_child(tree.root_id(), NodeKind::Reason, "s".into());
        rolled_out(&mut tree, id, 0.95);
        assert_eq!(
            choose_action(&tree, id, &SearchConfig::default()),
            ExpansionAction::FinishFastPath
        );
    }

    #[test]
    fn wrong_node_without_reflect_child_reflects() {
        let mut tree = SearchTree::new(problem());
        let id = tree.add_child(tree.root_id(), NodeKind::Reason, "s".into());
        rolled_out(&mut tree, id, 0.0);
        assert_eq!(
            choose_action(&tree, id, &SearchConfig::default()),
            ExpansionAction::Reflect
        );
    }

    #[test]
    fn wrong_node_with_reflect_child_reasons() {
        let mut tree = SearchTree::new(problem());
        let id = tree.add_child(tree.root_id(), NodeKind::Reason, "s".into());
        rolled_out(&mut tree, id, 0.0);
        tree.add_child(id, NodeKind::Reflect, "retry".into());
        assert_eq!(
            choose_action(&tree, id, &SearchConfig::default()),
            ExpansionAction::Reason { samples: 3 }
        );
    }

    #[test]
    fn middling_node_reasons_with_branch_factor() {
        let mut tree = SearchTree::new(problem());
        let id = tree.add_child(tree.root_id(), NodeKind::Reason, "s".into());
        rolled_out(&mut tree, id, 0.5);
        assert_eq!(
            choose_action(&tree, id, &SearchConfig::default()),
            ExpansionAction::Reason { samples: 3 }
        );
    }

    #[test]
    fn budget_table_under_defaults() {
        let config = SearchConfig::default();
        for (depth, expected) in [(1, 15), (2, 8), (3, 5), (4, 4), (5, 3), (10, 3)] {
            assert_eq!(rollout_budget(depth, &config), expected, "depth {depth}");
        }
    }

    #[test]
    fn reason_expansion_appends_branch_factor_children() {
        let mut tree = SearchTree::new(problem());
        let root = tree.root_id();
        let backend = MockBackend::new(MockScript::default(), &[problem()]);
        let children = expand(
            &mut tree,
            root,
            ExpansionAction::Reason { samples: 3 },
            &backend,
            &SearchConfig::default(),
            &PromptSet::default(),
        )
        .unwrap();
        assert_eq!(children.len(), 3);
        assert_eq!(tree.expansion_trials, 1);
        for id in children {
            assert_eq!(tree.node(id).kind, NodeKind::Reason);
        }
    }

    #[test]
    fn sampled_step_with_answer_marker_becomes_finish() {
        struct Scripted;
        impl Generator for Scripted {
            fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, BackendError> {
                Ok((0..req.sample_count)
                    .map(|_| "Collating the findings. The answer is B.".to_string())
                    .collect())
            }
        }
        let mut tree = SearchTree::new(problem());
        let root = tree.root_id();
        let children = expand(
            &mut tree,
            root,
            ExpansionAction::Reason { samples: 1 },
            &Scripted,
            &SearchConfig::default(),
            &PromptSet::default(),
        )
        .unwrap();
        assert_eq!(tree.node(children[0]).kind, NodeKind::Finish);
    }

    #[test]
    fn reflect_expansion_yields_one_child_opening_with_preamble() {
        let mut tree = SearchTree::new(problem());
        let id = tree.add_child(tree.root_id(), NodeKind::Reason, "s".into());
        let backend = MockBackend::new(MockScript::default(), &[problem()]);
        let children = expand(
            &mut tree,
            id,
            ExpansionAction::Reflect,
            &backend,
            &SearchConfig::default(),
            &PromptSet::default(),
        )
        .unwrap();
        assert_eq!(children.len(), 1);
        let child = tree.node(children[0]);
        assert_eq!(child.kind, NodeKind::Reflect);
        assert!(child
            .step_text
            .starts_with(crate::prompts::REFLECT_PREAMBLE));
    }

    #[test]
    fn whitespace_only_generation_is_an_error() {
        struct Blank;
        impl Generator for Blank {
            fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, BackendError> {
                Ok(vec!["   ".to_string(); req.sample_count])
            }
        }
        let mut tree = SearchTree::new(problem());
        let root = tree.root_id();
        let err = expand(
            &mut tree,
            root,
            ExpansionAction::Reason { samples: 2 },
            &Blank,
            &SearchConfig::default(),
            &PromptSet::default(),
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::EmptyGeneration(_)));
    }

    #[test]
    fn rollout_accuracy_is_correct_fraction() {
        struct Mixed;
        impl Generator for Mixed {
            fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, BackendError> {
                let answers = [" C.", " C.", " B.", " C."];
                Ok(answers
                    .iter()
                    .take(req.sample_count)
                    .map(|s| s.to_string())
                    .collect())
            }
        }
        let mut tree = SearchTree::new(problem());
        let config = SearchConfig {
            rollout_base: 4,
            rollout_floor: 4,
            ..SearchConfig::default()
        };
        let id = tree.add_child(tree.root_id(), NodeKind::Reason, "s".into());
        let record = rollout(&mut tree, id, &Mixed, &config, &PromptSet::default()).unwrap();
        assert_eq!(record.budget, 4);
        assert_eq!(record.correct_count, 3);
        assert!((tree.node(id).value - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rollout_extremes() {
        let config = SearchConfig::default();
        for (accuracy, expected) in [(1.0, 1.0), (0.0, 0.0)] {
            let backend = MockBackend::new(MockScript::with_accuracy(accuracy), &[problem()]);
            let mut tree = SearchTree::new(problem());
            let id = tree.add_child(tree.root_id(), NodeKind::Reason, "s".into());
            rollout(&mut tree, id, &backend, &config, &PromptSet::default()).unwrap();
            assert_eq!(tree.node(id).value, expected);
        }
    }

    #[test]
    fn finish_verification_sets_binary_value() {
        let mut tree = SearchTree::new(problem());
        let good = tree.add_child(tree.root_id(), NodeKind::Finish, "The answer is C.".into());
        let bad = tree.add_child(tree.root_id(), NodeKind::Finish, "The answer is B.".into());
        let empty = tree.add_child(tree.root_id(), NodeKind::Finish, "no conclusion".into());
        assert_eq!(verify_finish(&mut tree, good), 1.0);
        assert_eq!(verify_finish(&mut tree, bad), 0.0);
        assert_eq!(verify_finish(&mut tree, empty), 0.0);
        assert_eq!(tree.correct_leaf_count, 1);
    }

    #[test]
    fn termination_checks() {
        let config = SearchConfig::default();
        let mut tree = SearchTree::new(problem());
        assert_eq!(should_terminate(&tree, &config), TerminationCheck::Continue);
        tree.correct_leaf_count = 3;
        assert_eq!(
            should_terminate(&tree, &config),
            TerminationCheck::Stop(StopReason::CorrectCountReached)
        );
        tree.correct_leaf_count = 0;
        tree.expansion_trials = config.max_expansion_trials;
        assert_eq!(
            should_terminate(&tree, &config),
            TerminationCheck::Stop(StopReason::BudgetExhausted)
        );
    }

    #[test]
    fn always_correct_backend_terminates_quickly() {
        let config = SearchConfig::default();
        let backend = MockBackend::new(MockScript::with_accuracy(1.0), &[problem()]);
        let tree = run_search(&problem(), &backend, &config, &PromptSet::default()).unwrap();
        assert!(tree.correct_leaf_count >= config.min_correct);
        assert!(tree.expansion_trials <= config.min_correct * config.branch_factor);
    }

    #[test]
    fn always_wrong_backend_exhausts_and_finishes_all_leaves() {
        let config = SearchConfig {
            max_expansion_trials: 12,
            ..SearchConfig::default()
        };
        let backend = MockBackend::new(MockScript::with_accuracy(0.0), &[problem()]);
        let tree = run_search(&problem(), &backend, &config, &PromptSet::default()).unwrap();
        assert_eq!(tree.correct_leaf_count, 0);
        for leaf in tree.leaves() {
            assert_eq!(leaf.kind, NodeKind::Finish, "leaf {} not finished", leaf.id);
        }
    }

    #[test]
    fn same_seed_gives_identical_trees() {
        let config = SearchConfig::default();
        let script = MockScript::seeded(11, 0.6);
        let run = || {
            let backend = MockBackend::new(script.clone(), &[problem()]);
            let tree = run_search(&problem(), &backend, &config, &PromptSet::default()).unwrap();
            crate::tree::tree_record_to_json(&crate::tree::serialize_tree(&tree, "cfg", 1)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trees_start_from_the_fixed_root_step() {
        let tree = SearchTree::new(problem());
        assert_eq!(tree.node(tree.root_id()).step_text, ROOT_STEP_TEXT);
    }

    #[test]
    fn rolled_out_nodes_precede_their_expansion() {
        // On a correct-terminating run, every non-root internal node must
        // carry a rollout record from before its expansion.
        let backend = MockBackend::new(MockScript::seeded(3, 0.7), &[problem()]);
        let tree = run_search(
            &problem(),
            &backend,
            &SearchConfig::default(),
            &PromptSet::default(),
        )
        .unwrap();
        if tree.correct_leaf_count >= 3 {
            for node in tree.iter() {
                if node.kind != NodeKind::Root && !node.children.is_empty() {
                    assert!(node.rollout.is_some(), "node {} expanded unrolled", node.id);
                }
            }
        }
    }
}
