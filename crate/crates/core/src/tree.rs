//! The n-ary search tree: UCB child scoring, value backpropagation, and a
//! serializable dump format.
//!
//! Node values live in `[0, 1]` and are produced by rollouts (leaf accuracy)
//! or finish verification (exactly 0 or 1). Backpropagation folds each
//! ancestor's value with the visit-weighted mean of its visited children,
//! so values stay inside `[0, 1]` under any event sequence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::ProblemInstance;

/// Fixed text of the root step every tree starts from.
pub const ROOT_STEP_TEXT: &str = "Let's break down this problem step by step.";

/// Identifier of a node inside one tree. Ids are dense and assigned in
/// creation order, so sorting children by id reproduces insertion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// The unique tree root carrying the fixed opening step.
    Root,
    /// An ordinary sampled reasoning step.
    Reason,
    /// The single allowed introspective retry under a wrong node.
    Reflect,
    /// A terminal step that states the final answer. Never has children.
    Finish,
}

/// Outcome of simulating a node: the answers drawn, and their accuracy
/// against the gold answer. `accuracy = correct_count / budget`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub budget: usize,
    /// One entry per simulation; `None` when no answer could be extracted.
    pub simulated_answers: Vec<Option<String>>,
    pub correct_count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub kind: NodeKind,
    pub step_text: String,
    /// Estimated probability that this prefix reaches a correct answer.
    pub value: f64,
    pub visits: u32,
    pub rollout: Option<RolloutRecord>,
    /// Children in creation order (ascending id).
    pub children: Vec<NodeId>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Search hyperparameters. Defaults follow the reference configuration:
/// exploration constant 2, branch factor 3, fast-path threshold 0.9,
/// simulation base 15 with floor 3, minimum correct count 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// UCB exploration constant (gamma).
    pub gamma: f64,
    /// Number of steps sampled per ordinary expansion (B).
    pub branch_factor: usize,
    /// Node value at or above which expansion jumps straight to an answer.
    pub fast_path_threshold: f64,
    /// Simulation budget at depth 1 (L0); deeper nodes get `ceil(L0 / depth)`.
    pub rollout_base: u32,
    /// Lower bound on the simulation budget.
    pub rollout_floor: u32,
    /// Correct finish leaves required to stop the search (tau).
    pub min_correct: usize,
    /// Expansion budget per tree before the search is forced to finish.
    pub max_expansion_trials: usize,
    /// Sampling temperature for step and simulation generation.
    pub temperature: f64,
    /// Global seed; per-problem streams are derived from it.
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            branch_factor: 3,
            fast_path_threshold: 0.9,
            rollout_base: 15,
            rollout_floor: 3,
            min_correct: 3,
            max_expansion_trials: 64,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TreeError {
    #[error("tree exhausted: every remaining leaf is a finish node")]
    TreeExhausted,
    #[error("corrupt tree: missing node {0}")]
    MissingNode(NodeId),
    #[error("corrupt tree: parent cycle through node {0}")]
    ParentCycle(NodeId),
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("malformed tree record: {0}")]
    Malformed(#[from] serde_json::Error),
}

fn schema_violation(path: impl Into<String>, message: impl Into<String>) -> TreeError {
    TreeError::SchemaViolation {
        path: path.into(),
        message: message.into(),
    }
}

/// One MCTS state: a problem plus its node store and termination counters.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    pub problem: ProblemInstance,
    nodes: Vec<TreeNode>,
    root_id: NodeId,
    /// Number of finish leaves whose value is exactly 1.
    pub correct_leaf_count: usize,
    /// Number of expansions performed on this tree.
    pub expansion_trials: usize,
}

impl SearchTree {
    pub fn new(problem: ProblemInstance) -> Self {
        let root = TreeNode {
            id: NodeId(0),
            parent: None,
            kind: NodeKind::Root,
            step_text: ROOT_STEP_TEXT.to_string(),
            value: 0.0,
            visits: 0,
            rollout: None,
            children: Vec::new(),
        };
        Self {
            problem,
            nodes: vec![root],
            root_id: NodeId(0),
            correct_leaf_count: 0,
            expansion_trials: 0,
        }
    }

    pub fn root_id(&self) -> NodeId {
        self.root_id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: NodeId) -> Option<&TreeNode> {
        self.nodes.get(id.index())
    }

    pub fn get_mut(&mut self, id: NodeId) -> Option<&mut TreeNode> {
        self.nodes.get_mut(id.index())
    }

    /// Panics on an unknown id; engine code only holds ids it created.
    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id.index()]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut TreeNode {
        &mut self.nodes[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    pub fn add_child(&mut self, parent: NodeId, kind: NodeKind, step_text: String) -> NodeId {
        debug_assert!(
            self.node(parent).kind != NodeKind::Finish,
            "finish nodes cannot have children"
        );
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(TreeNode {
            id,
            parent: Some(parent),
            kind,
            step_text,
            value: 0.0,
            visits: 0,
            rollout: None,
            children: Vec::new(),
        });
        self.node_mut(parent).children.push(id);
        id
    }

    /// Depth of a node; the root has depth 0.
    pub fn depth(&self, id: NodeId) -> u32 {
        let mut depth = 0;
        let mut cur = self.node(id);
        while let Some(parent) = cur.parent {
            depth += 1;
            cur = self.node(parent);
        }
        depth
    }

    /// Node ids from the root down to `id`, inclusive.
    pub fn path_from_root(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = self.node(id);
        while let Some(parent) = cur.parent {
            path.push(parent);
            cur = self.node(parent);
        }
        path.reverse();
        path
    }

    /// Step texts from the root down to `id`, inclusive.
    pub fn steps_to(&self, id: NodeId) -> Vec<&str> {
        self.path_from_root(id)
            .into_iter()
            .map(|nid| self.node(nid).step_text.as_str())
            .collect()
    }

    /// True when no descendant of `id` can still be rolled out or expanded.
    pub fn is_subtree_exhausted(&self, id: NodeId) -> bool {
        let node = self.node(id);
        if node.kind == NodeKind::Finish {
            return true;
        }
        if node.children.is_empty() {
            return false;
        }
        node.children
            .iter()
            .all(|&child| self.is_subtree_exhausted(child))
    }

    /// Recount of finish leaves with value 1, for integrity checks.
    pub fn recount_correct_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Finish && n.value == 1.0)
            .count()
    }
}

/// UCB selection score: `value + gamma * sqrt(ln(parent_visits) / visits)`.
/// Unvisited nodes get `+inf` so they are explored before any visited sibling.
pub fn ucb_score(node: &TreeNode, parent_visits: u32, gamma: f64) -> f64 {
    if node.visits == 0 {
        return f64::INFINITY;
    }
    node.value + gamma * ((parent_visits as f64).ln() / node.visits as f64).sqrt()
}

/// Descends from the root to the node the next event applies to: a non-finish
/// leaf, reached by repeatedly taking the child with the highest UCB score.
/// Ties and all other argmax ties break toward the lowest child index.
///
/// Children whose entire subtree is finished are skipped; if the whole tree
/// is in that state the search cannot proceed and `TreeExhausted` is raised.
pub fn select_path(tree: &SearchTree, config: &SearchConfig) -> Result<Vec<NodeId>, TreeError> {
    let mut path = vec![tree.root_id()];
    let mut current = tree.root_id();
    if tree.is_subtree_exhausted(current) {
        return Err(TreeError::TreeExhausted);
    }
    loop {
        let node = tree.node(current);
        if node.children.is_empty() {
            return Ok(path);
        }
        let mut best: Option<(NodeId, f64)> = None;
        for &child_id in &node.children {
            if tree.is_subtree_exhausted(child_id) {
                continue;
            }
            let score = ucb_score(tree.node(child_id), node.visits, config.gamma);
            let better = match best {
                None => true,
                Some((_, best_score)) => score > best_score,
            };
            if better {
                best = Some((child_id, score));
            }
        }
        match best {
            Some((child_id, _)) => {
                path.push(child_id);
                current = child_id;
            }
            // Unreachable for a non-exhausted subtree, but kept as a guard.
            None => return Err(TreeError::TreeExhausted),
        }
    }
}

/// Walks from `from` up to the root, incrementing each visit count and
/// folding each node's value with the visit-weighted mean of its visited
/// children: `v <- (v + sum(v_ch * n_ch) / sum(n_ch)) / 2`.
///
/// `from` itself gains a visit but keeps its value when it has no visited
/// children (its value was just set by rollout or verification). Returns the
/// changed nodes as `(value, visits)` after the update.
pub fn backpropagate(
    tree: &mut SearchTree,
    from: NodeId,
) -> Result<BTreeMap<NodeId, (f64, u32)>, TreeError> {
    let mut changed = BTreeMap::new();
    let mut cursor = Some(from);
    let mut hops = 0usize;
    while let Some(id) = cursor {
        if hops > tree.len() {
            return Err(TreeError::ParentCycle(id));
        }
        hops += 1;
        if tree.get(id).is_none() {
            return Err(TreeError::MissingNode(id));
        }
        let children = tree.node(id).children.clone();
        let mut weighted_sum = 0.0;
        let mut visit_sum = 0u32;
        for child_id in children {
            let child = tree.get(child_id).ok_or(TreeError::MissingNode(child_id))?;
            if child.visits > 0 {
                weighted_sum += child.value * child.visits as f64;
                visit_sum += child.visits;
            }
        }
        let node = tree.node_mut(id);
        node.visits += 1;
        if visit_sum > 0 {
            node.value = 0.5 * (node.value + weighted_sum / visit_sum as f64);
        }
        changed.insert(id, (node.value, node.visits));
        cursor = tree.node(id).parent;
    }
    Ok(changed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub kind: NodeKind,
    pub step_text: String,
    pub value: f64,
    pub visits: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout: Option<RolloutRecord>,
}

/// Self-contained dump of one finished (or in-progress) tree. Children are
/// not stored; they are rebuilt from parent links in id order, which matches
/// creation order exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub iteration: u32,
    pub problem: ProblemInstance,
    pub config_hash: String,
    pub root_id: NodeId,
    pub correct_leaf_count: usize,
    pub expansion_trials: usize,
    pub nodes: Vec<NodeRecord>,
}

pub fn serialize_tree(tree: &SearchTree, config_hash: &str, iteration: u32) -> TreeRecord {
    TreeRecord {
        iteration,
        problem: tree.problem.clone(),
        config_hash: config_hash.to_string(),
        root_id: tree.root_id(),
        correct_leaf_count: tree.correct_leaf_count,
        expansion_trials: tree.expansion_trials,
        nodes: tree
            .iter()
            .map(|n| NodeRecord {
                id: n.id,
                parent: n.parent,
                kind: n.kind,
                step_text: n.step_text.clone(),
                value: n.value,
                visits: n.visits,
                rollout: n.rollout.clone(),
            })
            .collect(),
    }
}

pub fn deserialize_tree(record: &TreeRecord) -> Result<SearchTree, TreeError> {
    if record.nodes.is_empty() {
        return Err(schema_violation("nodes", "tree has no nodes"));
    }
    let mut nodes = Vec::with_capacity(record.nodes.len());
    for (i, rec) in record.nodes.iter().enumerate() {
        if rec.id.index() != i {
            return Err(schema_violation(
                format!("nodes[{i}].id"),
                format!("expected dense id {i}, found {}", rec.id),
            ));
        }
        if let Some(parent) = rec.parent {
            if parent.index() >= record.nodes.len() {
                return Err(schema_violation(
                    format!("nodes[{i}].parent"),
                    format!("unknown node id {parent}"),
                ));
            }
            if parent.index() >= i {
                // Parents must precede children; this also rules out cycles.
                return Err(schema_violation(
                    format!("nodes[{i}].parent"),
                    format!("parent {parent} does not precede node {}", rec.id),
                ));
            }
        }
        if !(0.0..=1.0).contains(&rec.value) {
            return Err(schema_violation(
                format!("nodes[{i}].value"),
                format!("value {} outside [0, 1]", rec.value),
            ));
        }
        if let Some(rollout) = &rec.rollout {
            if rollout.simulated_answers.len() != rollout.budget {
                return Err(schema_violation(
                    format!("nodes[{i}].rollout.simulated_answers"),
                    format!(
                        "expected {} entries, found {}",
                        rollout.budget,
                        rollout.simulated_answers.len()
                    ),
                ));
            }
            if rollout.budget == 0 {
                return Err(schema_violation(
                    format!("nodes[{i}].rollout.budget"),
                    "budget must be positive",
                ));
            }
            let expected = rollout.correct_count as f64 / rollout.budget as f64;
            if (rollout.accuracy - expected).abs() > 1e-12 {
                return Err(schema_violation(
                    format!("nodes[{i}].rollout.accuracy"),
                    format!("accuracy {} != correct/budget {expected}", rollout.accuracy),
                ));
            }
        }
        nodes.push(TreeNode {
            id: rec.id,
            parent: rec.parent,
            kind: rec.kind,
            step_text: rec.step_text.clone(),
            value: rec.value,
            visits: rec.visits,
            rollout: rec.rollout.clone(),
            children: Vec::new(),
        });
    }
    if record.root_id.index() >= nodes.len() {
        return Err(schema_violation(
            "root_id",
            format!("references missing node {}", record.root_id),
        ));
    }
    let mut root_count = 0usize;
    for (i, node) in nodes.iter().enumerate() {
        match (node.kind, node.parent) {
            (NodeKind::Root, Some(_)) => {
                return Err(schema_violation(
                    format!("nodes[{i}].parent"),
                    "root node cannot have a parent",
                ));
            }
            (NodeKind::Root, None) => root_count += 1,
            (_, None) => {
                return Err(schema_violation(
                    format!("nodes[{i}].parent"),
                    "non-root node is missing its parent",
                ));
            }
            _ => {}
        }
    }
    if root_count != 1 {
        return Err(schema_violation(
            "nodes",
            format!("expected exactly one root node, found {root_count}"),
        ));
    }
    if nodes[record.root_id.index()].kind != NodeKind::Root {
        return Err(schema_violation(
            "root_id",
            format!("node {} is not a root node", record.root_id),
        ));
    }
    // Rebuild children in id order (= creation order).
    for i in 0..nodes.len() {
        if let Some(parent) = nodes[i].parent {
            if nodes[parent.index()].kind == NodeKind::Finish {
                return Err(schema_violation(
                    format!("nodes[{i}].parent"),
                    format!("parent {parent} is a finish node"),
                ));
            }
            let id = nodes[i].id;
            nodes[parent.index()].children.push(id);
        }
    }
    for (i, node) in nodes.iter().enumerate() {
        let reflect_children = node
            .children
            .iter()
            .filter(|&&c| nodes[c.index()].kind == NodeKind::Reflect)
            .count();
        if reflect_children > 1 {
            return Err(schema_violation(
                format!("nodes[{i}]"),
                format!("{reflect_children} reflect children; at most one is allowed"),
            ));
        }
    }
    Ok(SearchTree {
        problem: record.problem.clone(),
        nodes,
        root_id: record.root_id,
        correct_leaf_count: record.correct_leaf_count,
        expansion_trials: record.expansion_trials,
    })
}

/// Serializes a record to one JSON line (used for `.json` dumps and tests).
pub fn tree_record_to_json(record: &TreeRecord) -> Result<String, TreeError> {
    Ok(serde_json::to_string(record)?)
}

pub fn tree_record_from_json(json: &str) -> Result<TreeRecord, TreeError> {
    Ok(serde_json::from_str(json)?)
}
