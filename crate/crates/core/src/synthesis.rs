//! Program extraction: fit decision trees to a black-box policy's actions.
//!
//! Trees are grown greedily top-down (CART, Gini impurity) on states labeled
//! by the oracle. Extraction runs a DAgger loop: the first round follows the
//! oracle, later rounds follow the current tree while the oracle keeps
//! labeling, and every round refits on the aggregated data.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::env::{rollout, Action, Actor, EnvConfig, State};
use crate::error::{MorlError, Result};
use crate::tree::{DecisionTreePolicy, Expr, Feature};

/// States with oracle action labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    /// Per-sample weights; `None` means all ones.
    pub weights: Option<Vec<f64>>,
}

impl LabeledDataset {
    pub fn new(states: Vec<State>, actions: Vec<Action>) -> Self {
        assert_eq!(states.len(), actions.len(), "states and labels must align");
        Self {
            states,
            actions,
            weights: None,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn push(&mut self, state: State, action: Action) {
        self.states.push(state);
        self.actions.push(action);
        if let Some(w) = self.weights.as_mut() {
            w.push(1.0);
        }
    }

    pub fn extend(&mut self, other: LabeledDataset) {
        match (&mut self.weights, other.weights) {
            (None, None) => {}
            (mine, theirs) => {
                let mut w = mine.take().unwrap_or_else(|| vec![1.0; self.states.len()]);
                w.extend(theirs.unwrap_or_else(|| vec![1.0; other.states.len()]));
                *mine = Some(w);
            }
        }
        self.states.extend(other.states);
        self.actions.extend(other.actions);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub dagger_iterations: usize,
    pub traces_per_iteration: usize,
    pub max_tree_depth: usize,
    pub min_samples_leaf: usize,
    pub eval_episodes: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            dagger_iterations: 5,
            traces_per_iteration: 20,
            max_tree_depth: 3,
            min_samples_leaf: 5,
            eval_episodes: 25,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.dagger_iterations,
            self.traces_per_iteration,
            self.max_tree_depth,
            self.min_samples_leaf,
            self.eval_episodes,
        ];
        if all.contains(&0) {
            return Err(MorlError::InvalidConfig("synthesis settings must all be >= 1".into()));
        }
        Ok(())
    }
}

/// Roll out `behavior` for `n_traces` episodes and label every visited
/// state with the oracle's action.
pub fn collect_labeled_states(
    oracle: &dyn Actor,
    behavior: &dyn Actor,
    env: &EnvConfig,
    rng: &mut dyn RngCore,
    n_traces: usize,
) -> LabeledDataset {
    let mut data = LabeledDataset::default();
    for _ in 0..n_traces {
        let traj = rollout(behavior, env, rng, env.max_episode_steps);
        for t in &traj.steps {
            let label = oracle.act(&t.state, rng);
            data.push(t.state, label);
        }
    }
    data
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts([f64; 2]);

impl Counts {
    fn total(&self) -> f64 {
        self.0[0] + self.0[1]
    }

    fn gini(&self) -> f64 {
        let n = self.total();
        if n <= 0.0 {
            return 0.0;
        }
        let (p0, p1) = (self.0[0] / n, self.0[1] / n);
        1.0 - p0 * p0 - p1 * p1
    }

    fn majority(&self) -> Action {
        if self.0[1] > self.0[0] {
            Action::Right
        } else {
            Action::Left
        }
    }

    fn is_pure(&self) -> bool {
        self.0[0] == 0.0 || self.0[1] == 0.0
    }
}

struct Split {
    feature: Feature,
    threshold: f64,
    impurity: f64,
}

fn best_split(data: &LabeledDataset, idx: &[usize], min_samples_leaf: usize, parent: &Counts) -> Option<Split> {
    let n = idx.len();
    let mut best: Option<Split> = None;
    let mut sorted = idx.to_vec();
    for feature in Feature::ALL {
        let f = feature.index();
        sorted.sort_by(|&a, &b| {
            data.states[a]
                .feature(f)
                .total_cmp(&data.states[b].feature(f))
                .then(data.actions[a].cmp(&data.actions[b]))
        });
        let mut left = Counts::default();
        for pos in 0..n - 1 {
            let i = sorted[pos];
            left.0[data.actions[i].index()] += data.weight(i);
            let here = data.states[i].feature(f);
            let next = data.states[sorted[pos + 1]].feature(f);
            if here == next {
                continue;
            }
            let n_left = pos + 1;
            if n_left < min_samples_leaf || n - n_left < min_samples_leaf {
                continue;
            }
            let right = Counts([parent.0[0] - left.0[0], parent.0[1] - left.0[1]]);
            let impurity = (left.total() * left.gini() + right.total() * right.gini()) / parent.total();
            if best.as_ref().map_or(true, |b| impurity < b.impurity - 1e-12) {
                best = Some(Split {
                    feature,
                    threshold: here + (next - here) / 2.0,
                    impurity,
                });
            }
        }
    }
    best
}

fn grow(data: &LabeledDataset, idx: &[usize], depth: usize, max_depth: usize, min_samples_leaf: usize) -> Expr {
    let mut counts = Counts::default();
    for &i in idx {
        counts.0[data.actions[i].index()] += data.weight(i);
    }
    let leaf = Expr::Act(counts.majority());
    if depth >= max_depth || counts.is_pure() || idx.len() < 2 * min_samples_leaf.max(1) {
        return leaf;
    }
    let Some(split) = best_split(data, idx, min_samples_leaf.max(1), &counts) else {
        return leaf;
    };
    if split.impurity >= counts.gini() - 1e-12 {
        return leaf;
    }
    let f = split.feature.index();
    let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| data.states[i].feature(f) <= split.threshold);
    let left = grow(data, &l, depth + 1, max_depth, min_samples_leaf);
    let right = grow(data, &r, depth + 1, max_depth, min_samples_leaf);
    match (&left, &right) {
        // Both sides agree: the test is dead weight.
        (Expr::Act(a), Expr::Act(b)) if a == b => left,
        _ => Expr::split(split.feature, split.threshold, left, right),
    }
}

/// Greedy CART fit. Candidate thresholds are midpoints between consecutive
/// distinct sorted values; leaves take the weighted majority label, ties
/// going to action 0.
pub fn fit_tree(dataset: &LabeledDataset, max_depth: usize, min_samples_leaf: usize) -> Result<DecisionTreePolicy> {
    if dataset.is_empty() {
        return Err(MorlError::InvalidConfig("cannot fit a tree to an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    DecisionTreePolicy::from_expr(&grow(dataset, &idx, 0, max_depth, min_samples_leaf))
}

/// Weighted fraction of samples the tree labels correctly.
pub fn accuracy(tree: &DecisionTreePolicy, dataset: &LabeledDataset) -> f64 {
    let (mut hit, mut total) = (0.0, 0.0);
    for i in 0..dataset.len() {
        let w = dataset.weight(i);
        total += w;
        if tree.evaluate(&dataset.states[i]) == dataset.actions[i] {
            hit += w;
        }
    }
    if total > 0.0 {
        hit / total
    } else {
        0.0
    }
}

/// Mean and (population) standard deviation of episode returns.
pub fn mean_return(actor: &dyn Actor, env: &EnvConfig, rng: &mut dyn RngCore, episodes: usize) -> (f64, f64) {
    let returns: Vec<f64> = (0..episodes)
        .map(|_| rollout(actor, env, rng, env.max_episode_steps).total_return)
        .collect();
    mean_std(&returns)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionIterate {
    pub dataset_size: usize,
    pub mean_return: f64,
    pub training_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub tree: DecisionTreePolicy,
    /// Agreement with the oracle on held-out oracle-visited states.
    pub fidelity: f64,
    pub best_iteration: usize,
    pub iterates: Vec<ExtractionIterate>,
}

/// DAgger-style extraction of a tree from a greedy oracle. Returns the
/// iterate with the best evaluation return (earliest on ties).
pub fn extract_program(
    oracle: &dyn Actor,
    env: &EnvConfig,
    cfg: &SynthesisConfig,
    rng: &mut dyn RngCore,
) -> Result<Extraction> {
    cfg.validate()?;
    let mut data = LabeledDataset::default();
    let mut iterates = Vec::with_capacity(cfg.dagger_iterations);
    let mut best: Option<(usize, f64, DecisionTreePolicy)> = None;
    let mut current: Option<DecisionTreePolicy> = None;
    for iteration in 0..cfg.dagger_iterations {
        let batch = match &current {
            None => collect_labeled_states(oracle, oracle, env, rng, cfg.traces_per_iteration),
            Some(tree) => collect_labeled_states(oracle, tree, env, rng, cfg.traces_per_iteration),
        };
        data.extend(batch);
        let tree = fit_tree(&data, cfg.max_tree_depth, cfg.min_samples_leaf)?;
        let (ret, _) = mean_return(&tree, env, rng, cfg.eval_episodes);
        iterates.push(ExtractionIterate {
            dataset_size: data.len(),
            mean_return: ret,
            training_accuracy: accuracy(&tree, &data),
        });
        log::debug!("dagger iteration {iteration}: {} states, return {ret:.2}", data.len());
        if best.as_ref().map_or(true, |(_, r, _)| ret > *r) {
            best = Some((iteration, ret, tree.clone()));
        }
        current = Some(tree);
    }
    let (best_iteration, _, tree) = best.expect("at least one iteration");
    let held_out = collect_labeled_states(oracle, oracle, env, rng, cfg.traces_per_iteration);
    let fidelity = accuracy(&tree, &held_out);
    Ok(Extraction {
        tree,
        fidelity,
        best_iteration,
        iterates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{default_config, stream};
    use crate::tree::{parse, seed_programs};

    fn theta_state(theta: f64) -> State {
        State::new(0.0, 0.0, theta, 0.0)
    }

    #[test]
    fn pure_dataset_gives_leaf() {
        let data = LabeledDataset::new(vec![theta_state(0.1), theta_state(-0.3)], vec![Action::Right; 2]);
        assert_eq!(fit_tree(&data, 3, 1).unwrap(), DecisionTreePolicy::leaf(Action::Right));
    }

    #[test]
    fn midpoint_split_on_theta() {
        let mut data = LabeledDataset::default();
        for _ in 0..50 {
            data.push(theta_state(-0.1), Action::Left);
            data.push(theta_state(0.1), Action::Right);
        }
        let tree = fit_tree(&data, 3, 5).unwrap();
        assert_eq!(tree, parse("(if (<= theta 0.0) (act 0) (act 1))").unwrap());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(fit_tree(&LabeledDataset::default(), 3, 5).is_err());
    }

    #[test]
    fn majority_tie_goes_to_left() {
        let data = LabeledDataset::new(vec![theta_state(0.0), theta_state(0.0)], vec![Action::Left, Action::Right]);
        assert_eq!(fit_tree(&data, 3, 1).unwrap(), DecisionTreePolicy::leaf(Action::Left));
    }

    #[test]
    fn weights_shift_the_majority() {
        let mut data = LabeledDataset::new(vec![theta_state(0.0); 3], vec![Action::Left, Action::Left, Action::Right]);
        data.weights = Some(vec![1.0, 1.0, 5.0]);
        assert_eq!(fit_tree(&data, 3, 1).unwrap(), DecisionTreePolicy::leaf(Action::Right));
    }

    #[test]
    fn min_samples_leaf_is_respected() {
        let mut data = LabeledDataset::default();
        for i in 0..10 {
            data.push(theta_state(i as f64), if i < 2 { Action::Right } else { Action::Left });
        }
        // The only pure split leaves 2 samples on one side.
        let coarse = fit_tree(&data, 3, 3).unwrap();
        assert_eq!(accuracy(&coarse, &data), 0.9);
        assert_eq!(coarse.evaluate(&theta_state(2.0)), Action::Right);
        let fine = fit_tree(&data, 3, 2).unwrap();
        assert_eq!(accuracy(&fine, &data), 1.0);
        assert_eq!(fine.structural_stats().node_count, 3);
    }

    #[test]
    fn collect_counts_and_labels() {
        let env = default_config();
        let seeds = seed_programs();
        let data = collect_labeled_states(&seeds.intermediate, &seeds.intermediate, &env, &mut stream(1), 3);
        for (s, a) in data.states.iter().zip(&data.actions) {
            assert_eq!(seeds.intermediate.evaluate(s), *a);
        }
        let constant = |_: &State| Action::Right;
        let mut rng = stream(2);
        let lens: usize = {
            let mut r = stream(2);
            (0..1).map(|_| rollout(&seeds.worst, &env, &mut r, 200).len()).sum()
        };
        let data = collect_labeled_states(&constant, &seeds.worst, &env, &mut rng, 1);
        assert_eq!(data.len(), lens);
        assert!(data.actions.iter().all(|&a| a == Action::Right));
    }

    #[test]
    fn extract_single_iteration_matches_plain_fit() {
        let env = default_config();
        let seeds = seed_programs();
        let cfg = SynthesisConfig {
            dagger_iterations: 1,
            traces_per_iteration: 5,
            eval_episodes: 3,
            ..Default::default()
        };
        let ex = extract_program(&seeds.intermediate, &env, &cfg, &mut stream(3)).unwrap();
        let data = collect_labeled_states(&seeds.intermediate, &seeds.intermediate, &env, &mut stream(3), 5);
        assert_eq!(ex.tree, fit_tree(&data, 3, 5).unwrap());
        assert_eq!(ex.iterates.len(), 1);
        assert_eq!(ex.best_iteration, 0);
    }
}
