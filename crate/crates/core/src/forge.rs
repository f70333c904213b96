//! Training-corpus extraction from finished trees, plus the curriculum
//! sampler used to pick seed problems.
//!
//! Three corpora come out of a tree: full correct trajectories (SFT),
//! sibling step pairs ordered by value (preference pairs), and per-step
//! binary labels (reward-model targets). All extractors are deterministic
//! functions of the serialized tree.

use serde::{Deserialize, Serialize};

use crate::backend::{GenerationRequest, Generator, MAX_GENERATION_TOKENS};
use crate::engine::{EngineError, ProblemInstance};
use crate::labeler::{label_trajectory, LabelConfig, ValuedTrajectory};
use crate::prompts::{join_steps, PromptKind, PromptSet};
use crate::tree::{NodeId, NodeKind, SearchTree, TreeNode};
use crate::verifier;

/// One supervised fine-tuning sample: a prompt and a fully correct
/// root-to-answer trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub problem_id: String,
    pub prompt: String,
    pub response: String,
}

/// One step-level preference pair: sibling steps under a byte-identical
/// prefix, ordered by node value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub problem_id: String,
    pub prompt: String,
    pub prefix: String,
    pub chosen: String,
    pub rejected: String,
    pub gap: f64,
}

/// One reward-model sample: the steps of a finish trace and their binary
/// labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmRecord {
    pub problem_id: String,
    pub prompt: String,
    pub steps: Vec<String>,
    pub labels: Vec<u8>,
    pub scheme: String,
}

/// Rejection-sampling result for one seed problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyProfile {
    pub problem_id: String,
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
}

fn finish_leaves(tree: &SearchTree) -> impl Iterator<Item = &TreeNode> {
    tree.iter().filter(|n| n.kind == NodeKind::Finish)
}

/// The valued trace of a finish leaf: step texts and values from the tree,
/// excluding the root step (the root's value seeds the boundary).
pub fn trajectory_of_leaf(tree: &SearchTree, leaf: NodeId) -> ValuedTrajectory {
    let path = tree.path_from_root(leaf);
    let steps = path
        .into_iter()
        .skip(1)
        .map(|id| {
            let node = tree.node(id);
            (node.step_text.clone(), node.value)
        })
        .collect();
    ValuedTrajectory {
        problem_id: tree.problem.id.clone(),
        root_value: tree.node(tree.root_id()).value,
        steps,
        terminal_correct: tree.node(leaf).value == 1.0,
    }
}

/// One record per correct finish leaf; the response is the root-to-leaf
/// step sequence rendered with step markers.
pub fn extract_sft(tree: &SearchTree) -> Vec<SftRecord> {
    finish_leaves(tree)
        .filter(|leaf| leaf.value == 1.0)
        .map(|leaf| SftRecord {
            problem_id: tree.problem.id.clone(),
            prompt: tree.problem.prompt.clone(),
            response: join_steps(&tree.steps_to(leaf.id), 0),
        })
        .collect()
}

/// All ordered sibling pairs whose value difference exceeds
/// `max(0, min_gap)`, one record each, higher value chosen. Only evaluated
/// (visited) siblings participate; unvisited nodes carry no evidence.
pub fn extract_dpo(tree: &SearchTree, min_gap: f64) -> Vec<DpoRecord> {
    let threshold = min_gap.max(0.0);
    let mut records = Vec::new();
    for parent in tree.iter() {
        if parent.kind == NodeKind::Finish || parent.children.len() < 2 {
            continue;
        }
        let prefix = join_steps(&tree.steps_to(parent.id), 0);
        let siblings: Vec<&TreeNode> = parent
            .children
            .iter()
            .map(|&id| tree.node(id))
            .filter(|n| n.visits > 0)
            .collect();
        for chosen in &siblings {
            for rejected in &siblings {
                let gap = chosen.value - rejected.value;
                if gap > threshold {
                    records.push(DpoRecord {
                        problem_id: tree.problem.id.clone(),
                        prompt: tree.problem.prompt.clone(),
                        prefix: prefix.clone(),
                        chosen: chosen.step_text.clone(),
                        rejected: rejected.step_text.clone(),
                        gap,
                    });
                }
            }
        }
    }
    records
}

/// True when the tree has both a correct and an incorrect finish leaf.
/// Single-outcome trees carry extreme value bias and yield no labels.
pub fn has_mixed_outcomes(tree: &SearchTree) -> bool {
    let mut correct = false;
    let mut incorrect = false;
    for leaf in finish_leaves(tree) {
        if leaf.value == 1.0 {
            correct = true;
        } else {
            incorrect = true;
        }
    }
    correct && incorrect
}

/// One labeled record per finish leaf, or nothing if the tree fails the
/// mixed-outcome filter.
pub fn extract_prm(tree: &SearchTree, config: &LabelConfig) -> Vec<PrmRecord> {
    if !has_mixed_outcomes(tree) {
        return Vec::new();
    }
    finish_leaves(tree)
        .map(|leaf| {
            let trajectory = trajectory_of_leaf(tree, leaf.id);
            let labels = label_trajectory(&trajectory, config);
            PrmRecord {
                problem_id: tree.problem.id.clone(),
                prompt: tree.problem.prompt.clone(),
                steps: trajectory.steps.into_iter().map(|(text, _)| text).collect(),
                labels,
                scheme: config.scheme.as_str().to_string(),
            }
        })
        .collect()
}

/// Rejection-samples each problem with direct chain-of-thought completions
/// and records the per-problem accuracy.
pub fn profile_accuracy(
    problems: &[ProblemInstance],
    generator: &dyn Generator,
    prompts: &PromptSet,
    samples: usize,
    temperature: f64,
) -> Result<Vec<AccuracyProfile>, EngineError> {
    assert!(samples >= 1, "at least one sample per problem");
    let mut profiles = Vec::with_capacity(problems.len());
    for problem in problems {
        problem.validate()?;
        let prompt = prompts.render(
            PromptKind::Finish,
            &problem.prompt,
            &[crate::tree::ROOT_STEP_TEXT],
        )?;
        let request = GenerationRequest::new(prompt, samples, "profile")
            .with_temperature(temperature)
            .with_max_new_tokens(MAX_GENERATION_TOKENS);
        let completions = generator.generate(&request)?;
        let correct = completions
            .iter()
            .filter(|text| verifier::verify_response(text, problem).correct)
            .count();
        profiles.push(AccuracyProfile {
            problem_id: problem.id.clone(),
            samples,
            correct,
            accuracy: correct as f64 / samples as f64,
        });
    }
    Ok(profiles)
}

/// Picks up to `k` problems for evolution: always-solved problems are
/// dropped, the rest are taken in ascending accuracy order (ties by id),
/// and never-solved problems are capped at `floor(k / 3)` of the selection,
/// backfilled by the next-lowest solvable ones.
pub fn curriculum_sample(profiles: &[AccuracyProfile], k: usize) -> Vec<String> {
    assert!(k >= 1, "selection size must be positive");
    let mut eligible: Vec<&AccuracyProfile> =
        profiles.iter().filter(|p| p.accuracy < 1.0).collect();
    eligible.sort_by(|a, b| {
        a.accuracy
            .partial_cmp(&b.accuracy)
            .unwrap()
            .then_with(|| a.problem_id.cmp(&b.problem_id))
    });
    let zero_cap = k / 3;
    let mut selected = Vec::new();
    let mut zeros_taken = 0usize;
    for profile in eligible {
        if selected.len() == k {
            break;
        }
        if profile.accuracy == 0.0 {
            if zeros_taken < zero_cap {
                zeros_taken += 1;
                selected.push(profile.problem_id.clone());
            }
        } else {
            selected.push(profile.problem_id.clone());
        }
    }
    selected
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockScript};
    use crate::engine::TaskKind;
    use crate::labeler::LabelScheme;
    use crate::tree::ROOT_STEP_TEXT;

    fn problem() -> ProblemInstance {
        ProblemInstance {
            id: "p1".into(),
            prompt: "Pick the treatment.".into(),
            gold_answer: "C".into(),
            task_kind: TaskKind::MultipleChoice,
            options: Some(vec!["a".into(), "b".into(), "c".into(), "d".into()]),
        }
    }

    /// root -> step -> {correct finish, wrong finish}, with values set.
    fn mixed_tree() -> SearchTree {
        let mut tree = SearchTree::new(problem());
        let step = tree.add_child(tree.root_id(), NodeKind::Reason, "Compare options.".into());
        tree.node_mut(step).value = 0.5;
        tree.node_mut(step).visits = 3;
        tree.node_mut(tree.root_id()).value = 0.4;
        tree.node_mut(tree.root_id()).visits = 4;
        let good = tree.add_child(step, NodeKind::Finish, "The answer is C.".into());
        tree.node_mut(good).value = 1.0;
        tree.node_mut(good).visits = 1;
        let bad = tree.add_child(step, NodeKind::Finish, "The answer is B.".into());
        tree.node_mut(bad).value = 0.0;
        tree.node_mut(bad).visits = 1;
        tree.correct_leaf_count = 1;
        tree
    }

    #[test]
    fn sft_keeps_only_correct_leaves() {
        let tree = mixed_tree();
        let records = extract_sft(&tree);
        assert_eq!(records.len(), 1);
        assert!(records[0].response.contains("The answer is C."));
        assert!(records[0]
            .response
            .starts_with(&format!("Step 0: {ROOT_STEP_TEXT}")));
    }

    #[test]
    fn sft_of_all_wrong_tree_is_empty() {
        let mut tree = SearchTree::new(problem());
        let leaf = tree.add_child(tree.root_id(), NodeKind::Finish, "The answer is B.".into());
        tree.node_mut(leaf).visits = 1;
        assert!(extract_sft(&tree).is_empty());
    }

    #[test]
    fn sft_records_reverify_correct() {
        let tree = mixed_tree();
        for record in extract_sft(&tree) {
            assert!(verifier::verify_response(&record.response, &tree.problem).correct);
        }
    }

    #[test]
    fn dpo_pairs_siblings_with_positive_gap() {
        let tree = mixed_tree();
        let records = extract_dpo(&tree, 0.0);
        assert_eq!(records.len(), 1);
        let rec = &records[0];
        assert!(rec.chosen.contains('C'));
        assert!(rec.rejected.contains('B'));
        assert!((rec.gap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_values_make_no_pair() {
        let mut tree = SearchTree::new(problem());
        for text in ["x", "y"] {
            let id = tree.add_child(tree.root_id(), NodeKind::Reason, text.into());
            tree.node_mut(id).value = 0.5;
            tree.node_mut(id).visits = 1;
        }
        assert!(extract_dpo(&tree, 0.0).is_empty());
    }

    #[test]
    fn three_distinct_siblings_make_three_pairs() {
        let mut tree = SearchTree::new(problem());
        for (text, value) in [("a", 0.9), ("b", 0.5), ("c", 0.1)] {
            let id = tree.add_child(tree.root_id(), NodeKind::Reason, text.into());
            tree.node_mut(id).value = value;
            tree.node_mut(id).visits = 1;
        }
        let records = extract_dpo(&tree, 0.0);
        assert_eq!(records.len(), 3);
        for rec in &records {
            assert!(rec.gap > 0.0);
        }
    }

    #[test]
    fn unvisited_siblings_are_ignored() {
        let mut tree = SearchTree::new(problem());
        let a = tree.add_child(tree.root_id(), NodeKind::Reason, "a".into());
        tree.node_mut(a).value = 0.8;
        tree.node_mut(a).visits = 1;
        tree.add_child(tree.root_id(), NodeKind::Reason, "b".into());
        assert!(extract_dpo(&tree, 0.0).is_empty());
    }

    #[test]
    fn min_gap_filters_close_pairs() {
        let mut tree = SearchTree::new(problem());
        for (text, value) in [("a", 0.6), ("b", 0.5)] {
            let id = tree.add_child(tree.root_id(), NodeKind::Reason, text.into());
            tree.node_mut(id).value = value;
            tree.node_mut(id).visits = 1;
        }
        assert_eq!(extract_dpo(&tree, 0.0).len(), 1);
        assert!(extract_dpo(&tree, 0.2).is_empty());
    }

    #[test]
    fn prm_skips_single_outcome_trees() {
        let mut all_correct = SearchTree::new(problem());
        let leaf = all_correct.add_child(
            all_correct.root_id(),
            NodeKind::Finish,
            "The answer is C.".into(),
        );
        all_correct.node_mut(leaf).value = 1.0;
        assert!(extract_prm(&all_correct, &LabelConfig::default()).is_empty());
    }

    #[test]
    fn prm_emits_one_record_per_finish_leaf() {
        let tree = mixed_tree();
        let records = extract_prm(&tree, &LabelConfig::default());
        assert_eq!(records.len(), 2);
        for record in &records {
            assert_eq!(record.scheme, LabelScheme::SoftDual.as_str());
            assert_eq!(record.steps.len(), record.labels.len());
            assert!(record.labels.iter().all(|&l| l <= 1));
            // Steps exclude the fixed root text.
            assert!(!record.steps.iter().any(|s| s == ROOT_STEP_TEXT));
        }
    }

    #[test]
    fn profile_counts_correct_fraction() {
        let problems = vec![problem()];
        let backend = MockBackend::new(MockScript::seeded(5, 0.5), &problems);
        let profiles =
            profile_accuracy(&problems, &backend, &PromptSet::default(), 8, 1.0).unwrap();
        assert_eq!(profiles.len(), 1);
        let p = &profiles[0];
        assert_eq!(p.samples, 8);
        assert!((p.accuracy - p.correct as f64 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn profile_extremes() {
        let problems = vec![problem()];
        for (accuracy, expected) in [(1.0, 1.0), (0.0, 0.0)] {
            let backend = MockBackend::new(MockScript::with_accuracy(accuracy), &problems);
            let profiles =
                profile_accuracy(&problems, &backend, &PromptSet::default(), 4, 1.0).unwrap();
            assert_eq!(profiles[0].accuracy, expected);
        }
    }

    fn profile(id: &str, accuracy: f64) -> AccuracyProfile {
        AccuracyProfile {
            problem_id: id.into(),
            samples: 10,
            correct: (accuracy * 10.0) as usize,
            accuracy,
        }
    }

    #[test]
    fn curriculum_caps_zero_accuracy_items() {
        let profiles = vec![
            profile("a", 1.0),
            profile("b", 0.6),
            profile("c", 0.0),
            profile("d", 0.0),
            profile("e", 0.0),
            profile("f", 0.3),
        ];
        let picked = curriculum_sample(&profiles, 3);
        assert_eq!(picked, vec!["c", "f", "b"]);
    }

    #[test]
    fn curriculum_drops_always_solved() {
        let profiles = vec![profile("a", 1.0), profile("b", 1.0)];
        assert!(curriculum_sample(&profiles, 3).is_empty());
    }

    #[test]
    fn curriculum_without_zeros_is_ascending_prefix() {
        let profiles = vec![profile("a", 0.7), profile("b", 0.2), profile("c", 0.5)];
        assert_eq!(curriculum_sample(&profiles, 2), vec!["b", "c"]);
    }
}
