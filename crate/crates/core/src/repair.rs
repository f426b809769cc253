//! Program repair: scripted edits and constraint-guided local search.
//!
//! Edit scripts are line-oriented:
//!
//! ```text
//! set-threshold <node_id> <float>
//! set-leaf-action <node_id> <0|1>
//! set-feature <node_id> <x|xdot|theta|thetadot>
//! replace-subtree <node_id> <inline program>
//! ```
//!
//! Node ids are pre-order positions in the tree the edit is applied to, so
//! an edit that changes the tree's shape renumbers the nodes after it.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::env::{rollout, stream, Action, EnvConfig, State};
use crate::error::{MorlError, Result};
use crate::synthesis::mean_return;
use crate::tree::{parse, parse_expr, DecisionTreePolicy, Expr, Feature, TreeNode, FEATURE_BOX};

#[derive(Debug, Clone, PartialEq)]
pub enum Edit {
    SetThreshold { node: usize, value: f64 },
    SetLeafAction { node: usize, action: Action },
    SetFeature { node: usize, feature: Feature },
    ReplaceSubtree { node: usize, subtree: DecisionTreePolicy },
}

impl Edit {
    pub fn node(&self) -> usize {
        match self {
            Edit::SetThreshold { node, .. }
            | Edit::SetLeafAction { node, .. }
            | Edit::SetFeature { node, .. }
            | Edit::ReplaceSubtree { node, .. } => *node,
        }
    }
}

impl fmt::Display for Edit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Edit::SetThreshold { node, value } => write!(f, "set-threshold {node} {value:?}"),
            Edit::SetLeafAction { node, action } => write!(f, "set-leaf-action {node} {}", action.index()),
            Edit::SetFeature { node, feature } => write!(f, "set-feature {node} {feature}"),
            Edit::ReplaceSubtree { node, subtree } => {
                let inline = subtree.serialize().split_whitespace().collect::<Vec<_>>().join(" ");
                write!(f, "replace-subtree {node} {inline}")
            }
        }
    }
}

fn parse_edit_line(line: &str, line_no: usize) -> Result<Edit> {
    let err = |message: String| MorlError::EditScript { line: line_no, message };
    let mut parts = line.splitn(3, char::is_whitespace);
    let op = parts.next().unwrap_or_default();
    let node_raw = parts.next().ok_or_else(|| err(format!("`{op}` needs a node id")))?;
    let node: usize = node_raw
        .parse()
        .map_err(|_| err(format!("invalid node id `{node_raw}`")))?;
    let arg = parts.next().map(str::trim).filter(|a| !a.is_empty()).ok_or_else(|| err(format!("`{op}` needs an argument")))?;
    match op {
        "set-threshold" => {
            let value: f64 = arg.parse().map_err(|_| err(format!("invalid threshold `{arg}`")))?;
            if !value.is_finite() {
                return Err(err(format!("threshold `{arg}` is not finite")));
            }
            Ok(Edit::SetThreshold { node, value })
        }
        "set-leaf-action" => {
            let action = match arg {
                "0" => Action::Left,
                "1" => Action::Right,
                _ => return Err(err(format!("action must be 0 or 1, found `{arg}`"))),
            };
            Ok(Edit::SetLeafAction { node, action })
        }
        "set-feature" => {
            let feature = arg.parse::<Feature>().map_err(|_| err(format!("unknown feature `{arg}`")))?;
            Ok(Edit::SetFeature { node, feature })
        }
        "replace-subtree" => {
            let subtree = parse(arg).map_err(|e| err(format!("invalid subtree: {e}")))?;
            Ok(Edit::ReplaceSubtree { node, subtree })
        }
        other => Err(err(format!("unknown edit `{other}`"))),
    }
}

impl FromStr for Edit {
    type Err = MorlError;

    fn from_str(s: &str) -> Result<Self> {
        parse_edit_line(s.trim(), 1)
    }
}

/// Ordered list of edits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EditScript(pub Vec<Edit>);

impl EditScript {
    pub fn parse(text: &str) -> Result<Self> {
        let mut edits = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            edits.push(parse_edit_line(line, i + 1)?);
        }
        Ok(Self(edits))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for EditScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for edit in &self.0 {
            writeln!(f, "{edit}")?;
        }
        Ok(())
    }
}

fn rewrite(expr: &Expr, target: usize, next_id: &mut usize, edit: &Edit) -> Result<Expr> {
    let id = *next_id;
    *next_id += 1;
    if id == target {
        return match (edit, expr) {
            (Edit::SetLeafAction { action, .. }, Expr::Act(_)) => Ok(Expr::Act(*action)),
            (Edit::SetLeafAction { .. }, _) => Err(MorlError::KindMismatch { node: id, expected: "a leaf" }),
            (Edit::SetThreshold { value, .. }, Expr::If { feature, left, right, .. }) => {
                Ok(Expr::split(*feature, *value, (**left).clone(), (**right).clone()))
            }
            (Edit::SetFeature { feature, .. }, Expr::If { threshold, left, right, .. }) => {
                Ok(Expr::split(*feature, *threshold, (**left).clone(), (**right).clone()))
            }
            (Edit::SetThreshold { .. } | Edit::SetFeature { .. }, _) => {
                Err(MorlError::KindMismatch { node: id, expected: "an internal" })
            }
            (Edit::ReplaceSubtree { subtree, .. }, _) => Ok(subtree.to_expr()),
        };
    }
    match expr {
        Expr::Act(a) => Ok(Expr::Act(*a)),
        Expr::If {
            feature,
            threshold,
            left,
            right,
        } => {
            let l = rewrite(left, target, next_id, edit)?;
            let r = rewrite(right, target, next_id, edit)?;
            Ok(Expr::split(*feature, *threshold, l, r))
        }
    }
}

/// Apply one edit, returning a new tree.
pub fn apply_edit(tree: &DecisionTreePolicy, edit: &Edit) -> Result<DecisionTreePolicy> {
    tree.node(edit.node())?;
    if let Edit::SetThreshold { value, .. } = edit {
        if !value.is_finite() {
            return Err(MorlError::MalformedTree("threshold must be finite".into()));
        }
    }
    let mut next_id = 0;
    let expr = rewrite(&tree.to_expr(), edit.node(), &mut next_id, edit)?;
    DecisionTreePolicy::from_expr(&expr)
}

/// Apply a script left to right. The input tree is never modified.
pub fn apply_edits(tree: &DecisionTreePolicy, script: &EditScript) -> Result<DecisionTreePolicy> {
    script.0.iter().try_fold(tree.clone(), |t, e| apply_edit(&t, e))
}

type StatePredicate = dyn Fn(&State) -> bool + Send + Sync;
type ActionPredicate = dyn Fn(&State, Action) -> bool + Send + Sync;

/// A named behavioral rule over (state, action) pairs. The rule is only
/// checked on states where `applies` holds.
#[derive(Clone)]
pub struct Constraint {
    pub name: String,
    pub description: String,
    applies: Arc<StatePredicate>,
    violated: Arc<ActionPredicate>,
}

impl fmt::Debug for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Constraint").field("name", &self.name).finish_non_exhaustive()
    }
}

impl Constraint {
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        applies: impl Fn(&State) -> bool + Send + Sync + 'static,
        violated: impl Fn(&State, Action) -> bool + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            applies: Arc::new(applies),
            violated: Arc::new(violated),
        }
    }

    pub fn applies(&self, state: &State) -> bool {
        (self.applies)(state)
    }

    /// True when the constraint applies to `state` and `action` breaks it.
    pub fn is_violated(&self, state: &State, action: Action) -> bool {
        self.applies(state) && (self.violated)(state, action)
    }
}

/// Angular speed below which the pole counts as still.
pub const POLE_MOTION_GUARD: f64 = 0.01;

/// Push the cart the way the pole is moving.
pub fn same_direction_as_pole() -> Constraint {
    Constraint::new(
        "SameDirectionAsPole",
        "push the cart in the direction the pole is moving (sign of thetadot) whenever |thetadot| > 0.01",
        |s| s.theta_dot.abs() > POLE_MOTION_GUARD,
        |s, a| (s.theta_dot < 0.0 && a == Action::Right) || (s.theta_dot > 0.0 && a == Action::Left),
    )
}

pub fn builtin_constraints() -> Vec<Constraint> {
    vec![same_direction_as_pole()]
}

pub fn builtin_constraint(name: &str) -> Option<Constraint> {
    builtin_constraints().into_iter().find(|c| c.name == name)
}

/// Look up constraints by name; `builtin` expands to every builtin one.
pub fn resolve_constraints(names: &[String]) -> Result<Vec<Constraint>> {
    let mut out = Vec::new();
    for name in names {
        if name == "builtin" {
            out.extend(builtin_constraints());
        } else {
            out.push(builtin_constraint(name).ok_or_else(|| MorlError::InvalidConfig(format!("unknown constraint `{name}`")))?);
        }
    }
    Ok(out)
}

/// Where constraint checks draw their states from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateSampler {
    /// `points_per_dim` evenly spaced values per feature over the feature box.
    Grid { points_per_dim: usize },
    Uniform { n: usize, seed: u64 },
    /// States visited by rolling the checked tree out in the environment.
    Rollout { episodes: usize, seed: u64 },
}

impl Default for StateSampler {
    fn default() -> Self {
        StateSampler::Grid { points_per_dim: 11 }
    }
}

impl StateSampler {
    pub fn states(&self, tree: &DecisionTreePolicy, env: &EnvConfig) -> Vec<State> {
        match *self {
            StateSampler::Grid { points_per_dim } => grid_states(points_per_dim),
            StateSampler::Uniform { n, seed } => {
                let mut rng = stream(seed);
                (0..n).map(|_| crate::imitation::uniform_box_state(&mut rng)).collect()
            }
            StateSampler::Rollout { episodes, seed } => {
                let mut rng = stream(seed);
                (0..episodes)
                    .flat_map(|_| rollout(tree, env, &mut rng, env.max_episode_steps).steps)
                    .map(|t| t.state)
                    .collect()
            }
        }
    }
}

pub fn grid_states(points_per_dim: usize) -> Vec<State> {
    let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
        match points_per_dim {
            0 => vec![],
            1 => vec![(lo + hi) / 2.0],
            n => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
        }
    };
    let axes = FEATURE_BOX.map(axis);
    let mut out = Vec::with_capacity(points_per_dim.pow(4));
    for &a in &axes[0] {
        for &b in &axes[1] {
            for &c in &axes[2] {
                for &d in &axes[3] {
                    out.push(State::new(a, b, c, d));
                }
            }
        }
    }
    out
}

/// Counterexamples kept per report.
pub const MAX_COUNTEREXAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub state: State,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub constraint: String,
    pub sampled_states_checked: usize,
    pub applicable_states_checked: usize,
    pub violations_found: usize,
    pub violations: Vec<Counterexample>,
    pub violation_rate: f64,
}

pub fn check_states(tree: &DecisionTreePolicy, constraints: &[Constraint], states: &[State]) -> Vec<ViolationReport> {
    let actions: Vec<Action> = states.iter().map(|s| tree.evaluate(s)).collect();
    constraints
        .iter()
        .map(|c| {
            let mut applicable = 0;
            let mut found = 0;
            let mut violations = Vec::new();
            for (s, &a) in states.iter().zip(&actions) {
                if !c.applies(s) {
                    continue;
                }
                applicable += 1;
                if c.is_violated(s, a) {
                    found += 1;
                    if violations.len() < MAX_COUNTEREXAMPLES {
                        violations.push(Counterexample { state: *s, action: a });
                    }
                }
            }
            ViolationReport {
                constraint: c.name.clone(),
                sampled_states_checked: states.len(),
                applicable_states_checked: applicable,
                violations_found: found,
                violations,
                violation_rate: if applicable > 0 { found as f64 / applicable as f64 } else { 0.0 },
            }
        })
        .collect()
}

pub fn check_constraints(
    tree: &DecisionTreePolicy,
    constraints: &[Constraint],
    sampler: &StateSampler,
    env: &EnvConfig,
) -> Vec<ViolationReport> {
    if constraints.is_empty() {
        return Vec::new();
    }
    check_states(tree, constraints, &sampler.states(tree, env))
}

/// Sum of violation rates.
pub fn total_violation_rate(reports: &[ViolationReport]) -> f64 {
    reports.iter().map(|r| r.violation_rate).sum()
}

/// Perturbations tried on each threshold during search.
pub const THRESHOLD_STEPS: [f64; 6] = [-0.1, -0.05, -0.01, 0.01, 0.05, 0.1];

/// Episodes per return estimate during search.
pub const REPAIR_EVAL_EPISODES: usize = 10;

/// Single-edit neighbors in enumeration order: all leaf flips, then all
/// feature swaps, then all threshold perturbations, each in pre-order.
pub fn neighbors(tree: &DecisionTreePolicy) -> Vec<Edit> {
    let nodes = tree.nodes().iter().enumerate();
    let flips = nodes.clone().filter_map(|(node, n)| match *n {
        TreeNode::Leaf { action } => Some(Edit::SetLeafAction {
            node,
            action: action.flipped(),
        }),
        _ => None,
    });
    let swaps = nodes.clone().flat_map(|(node, n)| match *n {
        TreeNode::Internal { feature, .. } => Feature::ALL
            .into_iter()
            .filter(|f| *f != feature)
            .map(|f| Edit::SetFeature { node, feature: f })
            .collect(),
        _ => Vec::new(),
    });
    let shifts = nodes.flat_map(|(node, n)| match *n {
        TreeNode::Internal { threshold, .. } => THRESHOLD_STEPS
            .iter()
            .map(|d| Edit::SetThreshold {
                node,
                value: threshold + d,
            })
            .collect(),
        _ => Vec::new(),
    });
    flips.chain(swaps).chain(shifts).collect()
}

/// Search objective: violations first (lower is better), then return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepairObjective {
    pub violation_rate: f64,
    pub mean_return: f64,
}

impl RepairObjective {
    pub fn better_than(&self, other: &RepairObjective) -> bool {
        self.violation_rate < other.violation_rate
            || (self.violation_rate == other.violation_rate && self.mean_return > other.mean_return)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairOutcome {
    pub tree: DecisionTreePolicy,
    pub script: EditScript,
    pub objective: RepairObjective,
    pub initial_objective: RepairObjective,
    pub evaluations: usize,
}

struct Evaluator<'a> {
    constraints: &'a [Constraint],
    env: &'a EnvConfig,
    grid: Vec<State>,
    eval_seed: u64,
    used: usize,
    budget: usize,
}

impl Evaluator<'_> {
    fn exhausted(&self) -> bool {
        self.used >= self.budget
    }

    fn evaluate(&mut self, tree: &DecisionTreePolicy) -> RepairObjective {
        self.used += 1;
        let reports = check_states(tree, self.constraints, &self.grid);
        let (mean_return, _) = mean_return(tree, self.env, &mut stream(self.eval_seed), REPAIR_EVAL_EPISODES);
        RepairObjective {
            violation_rate: total_violation_rate(&reports),
            mean_return,
        }
    }
}

/// Hill-climb over single-edit neighbors on the grid-violation / return
/// objective. Each step takes the first strictly improving neighbor in
/// enumeration order. When stuck with violations
/// left, a random neighbor of the best tree so far restarts the climb. The
/// search ends when `budget` objective evaluations are spent, or when the
/// current tree has no violations and no improving neighbor.
pub fn auto_repair(
    tree: &DecisionTreePolicy,
    constraints: &[Constraint],
    env: &EnvConfig,
    budget: usize,
    rng: &mut dyn RngCore,
) -> Result<RepairOutcome> {
    if budget == 0 {
        return Err(MorlError::InvalidConfig("auto-repair budget must be >= 1".into()));
    }
    let mut eval = Evaluator {
        constraints,
        env,
        grid: grid_states(11),
        eval_seed: rng.gen(),
        used: 0,
        budget,
    };
    let initial = eval.evaluate(tree);
    let mut current = (tree.clone(), EditScript::default(), initial);
    let mut best = current.clone();

    'search: while !eval.exhausted() {
        let mut step: Option<(DecisionTreePolicy, Edit, RepairObjective)> = None;
        for edit in neighbors(&current.0) {
            if eval.exhausted() {
                break;
            }
            let candidate = apply_edit(&current.0, &edit)?;
            let objective = eval.evaluate(&candidate);
            if objective.better_than(&current.2) {
                step = Some((candidate, edit, objective));
                break;
            }
        }
        match step {
            Some((t, edit, objective)) => {
                current.1 .0.push(edit);
                current = (t, current.1, objective);
                if current.2.better_than(&best.2) {
                    best = current.clone();
                }
            }
            None if eval.exhausted() => break 'search,
            None if current.2.violation_rate == 0.0 => break 'search,
            None => {
                let options = neighbors(&best.0);
                let edit = options[rng.gen_range(0..options.len())].clone();
                let t = apply_edit(&best.0, &edit)?;
                let objective = eval.evaluate(&t);
                let mut script = best.1.clone();
                script.0.push(edit);
                current = (t, script, objective);
                if current.2.better_than(&best.2) {
                    best = current.clone();
                }
            }
        }
    }
    log::debug!("auto-repair used {} evaluations", eval.used);
    Ok(RepairOutcome {
        tree: best.0,
        script: best.1,
        objective: best.2,
        initial_objective: initial,
        evaluations: eval.used,
    })
}

/// Parse an inline program for `replace-subtree`.
pub fn parse_subtree(text: &str) -> Result<DecisionTreePolicy> {
    DecisionTreePolicy::from_expr(&parse_expr(text)?)
}
