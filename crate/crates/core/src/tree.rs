//! Decision-tree programs over cart-pole features.
//!
//! Programs are written in a small S-expression language:
//!
//! ```text
//! program := expr
//! expr    := "(" "act" INT ")" | "(" "if" cond expr expr ")"
//! cond    := "(" "<=" FEATURE FLOAT ")"
//! FEATURE := "x" | "xdot" | "theta" | "thetadot"
//! ```
//!
//! `;` starts a comment that runs to the end of the line. An internal node
//! sends a state to its left child iff `state[feature] <= threshold`.
//!
//! Nodes are stored in pre-order, so a node id is its pre-order position.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Actor, State, FEATURE_NAMES};
use crate::error::{MorlError, Result};

/// State feature tested by an internal node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    X,
    XDot,
    Theta,
    ThetaDot,
}

impl Feature {
    pub const ALL: [Feature; 4] = [Feature::X, Feature::XDot, Feature::Theta, Feature::ThetaDot];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        FEATURE_NAMES[self.index()]
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Feature::ALL.into_iter().find(|f| f.name() == s).ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Internal {
        feature: Feature,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        action: Action,
    },
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf { .. })
    }
}

/// A binary decision tree whose leaves carry actions.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTreePolicy {
    nodes: Vec<TreeNode>,
    root: usize,
}

/// Owned recursive form, convenient for building and rewriting trees.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    If {
        feature: Feature,
        threshold: f64,
        left: Box<Expr>,
        right: Box<Expr>,
    },
    Act(Action),
}

impl Expr {
    pub fn split(feature: Feature, threshold: f64, left: Expr, right: Expr) -> Self {
        Expr::If {
            feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralStats {
    pub depth: usize,
    pub node_count: usize,
    pub leaf_count: usize,
}

impl DecisionTreePolicy {
    /// Single-leaf program.
    pub fn leaf(action: Action) -> Self {
        Self {
            nodes: vec![TreeNode::Leaf { action }],
            root: 0,
        }
    }

    /// Build from an arbitrary node array. The result is re-laid-out in
    /// pre-order; dangling ids, shared children, cycles and orphan nodes are
    /// rejected.
    pub fn from_nodes(nodes: Vec<TreeNode>, root: usize) -> Result<Self> {
        if nodes.is_empty() {
            return Err(MorlError::MalformedTree("tree has no nodes".into()));
        }
        let mut visited = vec![false; nodes.len()];
        let expr = Self::expr_from_arena(&nodes, root, &mut visited)?;
        if let Some(orphan) = visited.iter().position(|v| !v) {
            return Err(MorlError::MalformedTree(format!(
                "node {orphan} is not reachable from the root"
            )));
        }
        Self::from_expr(&expr)
    }

    fn expr_from_arena(nodes: &[TreeNode], id: usize, visited: &mut [bool]) -> Result<Expr> {
        let node = nodes
            .get(id)
            .ok_or_else(|| MorlError::MalformedTree(format!("dangling child id {id}")))?;
        if std::mem::replace(&mut visited[id], true) {
            return Err(MorlError::MalformedTree(format!(
                "node {id} is reached twice (shared child or cycle)"
            )));
        }
        Ok(match *node {
            TreeNode::Leaf { action } => Expr::Act(action),
            TreeNode::Internal {
                feature,
                threshold,
                left,
                right,
            } => {
                if !threshold.is_finite() {
                    return Err(MorlError::MalformedTree(format!("node {id} has a non-finite threshold")));
                }
                Expr::split(
                    feature,
                    threshold,
                    Self::expr_from_arena(nodes, left, visited)?,
                    Self::expr_from_arena(nodes, right, visited)?,
                )
            }
        })
    }

    pub fn from_expr(expr: &Expr) -> Result<Self> {
        fn push(expr: &Expr, nodes: &mut Vec<TreeNode>) -> Result<usize> {
            let id = nodes.len();
            match expr {
                Expr::Act(action) => nodes.push(TreeNode::Leaf { action: *action }),
                Expr::If {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if !threshold.is_finite() {
                        return Err(MorlError::MalformedTree(format!("node {id} has a non-finite threshold")));
                    }
                    nodes.push(TreeNode::Leaf { action: Action::Left });
                    let l = push(left, nodes)?;
                    let r = push(right, nodes)?;
                    nodes[id] = TreeNode::Internal {
                        feature: *feature,
                        threshold: *threshold,
                        left: l,
                        right: r,
                    };
                }
            }
            Ok(id)
        }
        let mut nodes = Vec::new();
        push(expr, &mut nodes)?;
        Ok(Self { nodes, root: 0 })
    }

    pub fn to_expr(&self) -> Expr {
        self.expr_at(self.root)
    }

    /// Recursive form of the subtree rooted at `id`.
    pub fn expr_at(&self, id: usize) -> Expr {
        match self.nodes[id] {
            TreeNode::Leaf { action } => Expr::Act(action),
            TreeNode::Internal {
                feature,
                threshold,
                left,
                right,
            } => Expr::split(feature, threshold, self.expr_at(left), self.expr_at(right)),
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, id: usize) -> Result<&TreeNode> {
        self.nodes.get(id).ok_or(MorlError::UnknownNode(id))
    }

    /// Leaf action reached by `state`.
    pub fn evaluate(&self, state: &State) -> Action {
        let mut id = self.root;
        loop {
            match self.nodes[id] {
                TreeNode::Leaf { action } => return action,
                TreeNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    id = if state.feature(feature.index()) <= threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn structural_stats(&self) -> StructuralStats {
        fn depth(tree: &DecisionTreePolicy, id: usize) -> usize {
            match tree.nodes[id] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Internal { left, right, .. } => 1 + depth(tree, left).max(depth(tree, right)),
            }
        }
        StructuralStats {
            depth: depth(self, self.root),
            node_count: self.nodes.len(),
            leaf_count: self.nodes.iter().filter(|n| n.is_leaf()).count(),
        }
    }

    /// Ids of leaves that no state inside `bounds` can reach.
    pub fn unreachable_leaves_in(&self, bounds: [(f64, f64); 4]) -> Vec<usize> {
        // Per feature: (lower, lower_is_open, upper); upper is always closed.
        let start = bounds.map(|(lo, hi)| (lo, false, hi));
        let mut out = Vec::new();
        let mut stack = vec![(self.root, start, true)];
        while let Some((id, region, reachable)) = stack.pop() {
            match self.nodes[id] {
                TreeNode::Leaf { .. } => {
                    if !reachable {
                        out.push(id);
                    }
                }
                TreeNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let f = feature.index();
                    let (lo, lo_open, hi) = region[f];
                    let mut left_region = region;
                    left_region[f] = (lo, lo_open, hi.min(threshold));
                    let left_ok = if lo_open { lo < threshold } else { lo <= threshold };
                    let mut right_region = region;
                    let right_ok = hi > threshold;
                    if threshold >= lo {
                        right_region[f] = (threshold, true, hi);
                    }
                    stack.push((right, right_region, reachable && right_ok));
                    stack.push((left, left_region, reachable && left_ok));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Unreachable leaves over the standard feature box, logging a warning
    /// for each.
    pub fn unreachable_leaves(&self) -> Vec<usize> {
        let leaves = self.unreachable_leaves_in(FEATURE_BOX);
        for id in &leaves {
            log::warn!("leaf node {id} is unreachable inside the feature box");
        }
        leaves
    }

    /// Canonical program text.
    pub fn serialize(&self) -> String {
        self.render(false)
    }

    /// Program text with `; node N` comments after every node.
    pub fn serialize_annotated(&self) -> String {
        self.render(true)
    }

    fn render(&self, annotate: bool) -> String {
        let mut lines: Vec<(String, Option<usize>)> = Vec::new();
        self.render_node(self.root, 0, &mut lines, annotate);
        let mut out = String::new();
        for (i, (line, id)) in lines.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(line);
            if let Some(id) = id {
                let _ = write!(out, " ; node {id}");
            }
        }
        out
    }

    fn render_node(&self, id: usize, indent: usize, lines: &mut Vec<(String, Option<usize>)>, annotate: bool) {
        let pad = "  ".repeat(indent);
        let tag = annotate.then_some(id);
        match self.nodes[id] {
            TreeNode::Leaf { action } => lines.push((format!("{pad}(act {})", action.index()), tag)),
            TreeNode::Internal {
                feature,
                threshold,
                left,
                right,
            } => {
                lines.push((format!("{pad}(if (<= {feature} {threshold:?})"), tag));
                self.render_node(left, indent + 1, lines, annotate);
                self.render_node(right, indent + 1, lines, annotate);
                lines.last_mut().expect("children rendered").0.push(')');
            }
        }
    }
}

impl fmt::Display for DecisionTreePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

impl FromStr for DecisionTreePolicy {
    type Err = MorlError;

    fn from_str(s: &str) -> Result<Self> {
        parse(s)
    }
}

impl Actor for DecisionTreePolicy {
    fn act(&self, state: &State, _rng: &mut dyn RngCore) -> Action {
        self.evaluate(state)
    }
}

/// Feature box used for reachability, constraint grids and uniform sampling.
pub const FEATURE_BOX: [(f64, f64); 4] = [(-2.4, 2.4), (-4.0, 4.0), (-0.21, 0.21), (-4.0, 4.0)];

#[derive(Debug, Clone, PartialEq)]
enum Token<'a> {
    Open,
    Close,
    Atom(&'a str),
}

#[derive(Debug, Clone)]
struct Spanned<'a> {
    token: Token<'a>,
    line: usize,
    column: usize,
}

fn tokenize(text: &str) -> Vec<Spanned<'_>> {
    let mut tokens = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.split(';').next().unwrap_or("");
        let mut chars = line.char_indices().peekable();
        while let Some((start, c)) = chars.next() {
            let column = line[..start].chars().count() + 1;
            let token = match c {
                '(' => Token::Open,
                ')' => Token::Close,
                c if c.is_whitespace() => continue,
                _ => {
                    let mut end = start + c.len_utf8();
                    while let Some(&(i, c)) = chars.peek() {
                        if c.is_whitespace() || c == '(' || c == ')' {
                            break;
                        }
                        end = i + c.len_utf8();
                        chars.next();
                    }
                    Token::Atom(&line[start..end])
                }
            };
            tokens.push(Spanned {
                token,
                line: line_no + 1,
                column,
            });
        }
    }
    tokens
}

struct Parser<'a> {
    tokens: Vec<Spanned<'a>>,
    pos: usize,
    end: (usize, usize),
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let line_count = text.lines().count().max(1);
        let last_len = text.lines().last().map(|l| l.chars().count()).unwrap_or(0);
        Self {
            tokens: tokenize(text),
            pos: 0,
            end: (line_count, last_len + 1),
        }
    }

    fn here(&self) -> (usize, usize) {
        self.tokens
            .get(self.pos)
            .map(|t| (t.line, t.column))
            .unwrap_or(self.end)
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T> {
        let (line, column) = self.here();
        Err(MorlError::Syntax {
            line,
            column,
            message: message.into(),
        })
    }

    fn next(&mut self) -> Option<Token<'a>> {
        let t = self.tokens.get(self.pos).map(|t| t.token.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect_open(&mut self) -> Result<()> {
        match self.tokens.get(self.pos).map(|t| &t.token) {
            Some(Token::Open) => {
                self.pos += 1;
                Ok(())
            }
            Some(other) => self.error(format!("expected `(`, found {}", describe(other))),
            None => self.error("expected `(`, found end of input"),
        }
    }

    fn expect_close(&mut self) -> Result<()> {
        match self.tokens.get(self.pos).map(|t| &t.token) {
            Some(Token::Close) => {
                self.pos += 1;
                Ok(())
            }
            Some(other) => self.error(format!("expected `)`, found {}", describe(other))),
            None => self.error("expected `)`, found end of input"),
        }
    }

    fn atom(&mut self, what: &str) -> Result<&'a str> {
        match self.tokens.get(self.pos).map(|t| &t.token) {
            Some(Token::Atom(a)) => {
                let a = *a;
                self.pos += 1;
                Ok(a)
            }
            Some(other) => self.error(format!("expected {what}, found {}", describe(other))),
            None => self.error(format!("expected {what}, found end of input")),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        self.expect_open()?;
        let head_pos = self.here();
        match self.atom("`act` or `if`")? {
            "act" => {
                let (line, column) = self.here();
                let raw = self.atom("action 0 or 1")?;
                let action = match raw {
                    "0" => Action::Left,
                    "1" => Action::Right,
                    other => {
                        return Err(MorlError::Syntax {
                            line,
                            column,
                            message: format!("action must be 0 or 1, found `{other}`"),
                        })
                    }
                };
                self.expect_close()?;
                Ok(Expr::Act(action))
            }
            "if" => {
                self.expect_open()?;
                let op = self.atom("`<=`")?;
                if op != "<=" {
                    self.pos -= 1;
                    return self.error(format!("expected `<=`, found `{op}`"));
                }
                let (line, column) = self.here();
                let name = self.atom("feature name")?;
                let feature = name.parse::<Feature>().map_err(|_| MorlError::UnknownFeature {
                    line,
                    column,
                    name: name.to_string(),
                })?;
                let (line, column) = self.here();
                let raw = self.atom("threshold")?;
                let threshold = match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        return Err(MorlError::Syntax {
                            line,
                            column,
                            message: format!("invalid threshold `{raw}`"),
                        })
                    }
                };
                self.expect_close()?;
                let left = self.expr()?;
                let right = self.expr()?;
                self.expect_close()?;
                Ok(Expr::split(feature, threshold, left, right))
            }
            other => Err(MorlError::Syntax {
                line: head_pos.0,
                column: head_pos.1,
                message: format!("expected `act` or `if`, found `{other}`"),
            }),
        }
    }
}

fn describe(token: &Token<'_>) -> String {
    match token {
        Token::Open => "`(`".into(),
        Token::Close => "`)`".into(),
        Token::Atom(a) => format!("`{a}`"),
    }
}

/// Parse a single expression from program text.
pub fn parse_expr(text: &str) -> Result<Expr> {
    let mut parser = Parser::new(text);
    let expr = parser.expr()?;
    if parser.next().is_some() {
        parser.pos -= 1;
        return parser.error("trailing input after program");
    }
    Ok(expr)
}

/// Parse program text into a tree.
pub fn parse(text: &str) -> Result<DecisionTreePolicy> {
    DecisionTreePolicy::from_expr(&parse_expr(text)?)
}

/// Reference program that pushes against the pole's motion.
pub const WORST_PROGRAM: &str = "(if (<= thetadot 0.06) (act 1) (act 0))";

/// The worst program with both leaves flipped: push the cart the way the
/// pole is moving.
pub const INTERMEDIATE_PROGRAM: &str = "(if (<= thetadot 0.06) (act 0) (act 1))";

/// Depth-3 approximation of "push right iff 3·theta + thetadot > 0".
pub const NEAR_OPTIMAL_PROGRAM: &str = "\
(if (<= thetadot 0.0)
  (if (<= thetadot -0.3)
    (if (<= theta 0.1) (act 0) (act 1))
    (if (<= theta 0.02) (act 0) (act 1)))
  (if (<= thetadot 0.3)
    (if (<= theta -0.02) (act 0) (act 1))
    (if (<= theta -0.1) (act 0) (act 1))))";

/// Edit script that turns the worst program into the intermediate one.
pub const WORST_TO_INTERMEDIATE_EDITS: &str = "set-leaf-action 1 0\nset-leaf-action 2 1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct SeedPrograms {
    pub worst: DecisionTreePolicy,
    pub intermediate: DecisionTreePolicy,
    pub near_optimal: DecisionTreePolicy,
}

impl SeedPrograms {
    pub fn get(&self, name: &str) -> Option<&DecisionTreePolicy> {
        match name {
            "worst" => Some(&self.worst),
            "intermediate" => Some(&self.intermediate),
            "near_optimal" | "near-optimal" => Some(&self.near_optimal),
            _ => None,
        }
    }
}

pub fn seed_programs() -> SeedPrograms {
    SeedPrograms {
        worst: parse(WORST_PROGRAM).expect("worst seed parses"),
        intermediate: parse(INTERMEDIATE_PROGRAM).expect("intermediate seed parses"),
        near_optimal: parse(NEAR_OPTIMAL_PROGRAM).expect("near-optimal seed parses"),
    }
}
