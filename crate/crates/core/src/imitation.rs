//! Behavioral cloning of tree programs into softmax policies.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::env::{rollout, stream, EnvConfig, State};
use crate::error::{MorlError, Result};
use crate::policy::{
    backward_batch, forward_batch, log_softmax_rows, states_matrix, MlpArchitecture, MlpPolicy, ParamVector,
};
use crate::synthesis::{mean_return, LabeledDataset};
use crate::tree::{DecisionTreePolicy, FEATURE_BOX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub dataset_size: usize,
    /// Share of the dataset drawn from program rollouts; the rest is uniform
    /// over the feature box.
    pub rollout_fraction: f64,
    pub holdout_fraction: f64,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 15_000,
            learning_rate: 0.01,
            dataset_size: 2_000,
            rollout_fraction: 0.5,
            holdout_fraction: 0.1,
            eval_episodes: 25,
            seed: 0,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        let fractions_ok = (0.0..=1.0).contains(&self.rollout_fraction) && (0.0..=1.0).contains(&self.holdout_fraction);
        if self.epochs == 0 || self.dataset_size < 10 || !fractions_ok || !(self.learning_rate > 0.0) {
            return Err(MorlError::InvalidConfig(
                "bc needs epochs >= 1, dataset_size >= 10, learning_rate > 0 and fractions in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    pub final_loss: f64,
    pub initial_holdout_agreement: f64,
    pub holdout_agreement: f64,
    /// Training loss before each epoch's update.
    pub loss_curve: Vec<f64>,
    pub cloned_policy_return: f64,
    pub cloned_policy_return_std: f64,
}

/// Sample a state uniformly from the feature box.
pub fn uniform_box_state(rng: &mut dyn RngCore) -> State {
    State::from_array([0, 1, 2, 3].map(|i| {
        let (lo, hi) = FEATURE_BOX[i];
        rng.gen_range(lo..=hi)
    }))
}

/// Program-labeled states: a `rollout_fraction` share from program
/// rollouts, the rest uniform over the feature box.
pub fn make_bc_dataset(tree: &DecisionTreePolicy, env: &EnvConfig, cfg: &BcConfig, rng: &mut dyn RngCore) -> LabeledDataset {
    let from_rollouts = ((cfg.dataset_size as f64) * cfg.rollout_fraction).round() as usize;
    let mut states = Vec::with_capacity(cfg.dataset_size);
    while states.len() < from_rollouts {
        let traj = rollout(tree, env, rng, env.max_episode_steps);
        let take = (from_rollouts - states.len()).min(traj.len());
        states.extend(traj.steps[..take].iter().map(|t| t.state));
    }
    while states.len() < cfg.dataset_size {
        states.push(uniform_box_state(rng));
    }
    let actions = states.iter().map(|s| tree.evaluate(s)).collect();
    LabeledDataset::new(states, actions)
}

fn one_hot(labels: &[usize]) -> Array2<f64> {
    let mut m = Array2::zeros((labels.len(), 2));
    for (i, &l) in labels.iter().enumerate() {
        m[[i, l]] = 1.0;
    }
    m
}

/// Mean cross-entropy and its gradient on a batch.
pub fn cross_entropy_grad(
    params: &ParamVector,
    arch: &MlpArchitecture,
    inputs: &Array2<f64>,
    targets: &Array2<f64>,
) -> (f64, ParamVector) {
    let n = inputs.nrows() as f64;
    let cache = forward_batch(params, arch, inputs.clone());
    let logp = log_softmax_rows(&cache.output);
    let loss = -(&logp * targets).sum() / n;
    let d = (logp.mapv(f64::exp) - targets) / n;
    (loss, backward_batch(params, arch, &cache, d))
}

/// Fraction of `states` where the greedy policy picks the tree's action.
pub fn agreement(params: &ParamVector, arch: &MlpArchitecture, tree: &DecisionTreePolicy, states: &[State]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let logits = forward_batch(params, arch, states_matrix(states)).output;
    let hits = states
        .iter()
        .zip(logits.rows())
        .filter(|(s, row)| {
            let greedy = if row[1] > row[0] { 1 } else { 0 };
            greedy == tree.evaluate(s).index()
        })
        .count();
    hits as f64 / states.len() as f64
}

/// Full-batch gradient descent on cross-entropy against the program's
/// labels. The report's agreement is measured on a held-out split.
pub fn behavioral_clone(
    init: &ParamVector,
    arch: &MlpArchitecture,
    tree: &DecisionTreePolicy,
    dataset: &LabeledDataset,
    env: &EnvConfig,
    cfg: &BcConfig,
) -> Result<(ParamVector, BcReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(MorlError::InvalidConfig("cannot clone from an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut stream(cfg.seed));
    let n_holdout = ((dataset.len() as f64) * cfg.holdout_fraction).round() as usize;
    let n_holdout = n_holdout.min(dataset.len() - 1);
    let (holdout_idx, train_idx) = order.split_at(n_holdout);
    let pick = |idx: &[usize]| -> Vec<State> { idx.iter().map(|&i| dataset.states[i]).collect() };
    let train_states = pick(train_idx);
    let holdout_states = if holdout_idx.is_empty() { train_states.clone() } else { pick(holdout_idx) };
    let inputs = states_matrix(&train_states);
    let labels: Vec<usize> = train_idx.iter().map(|&i| dataset.actions[i].index()).collect();
    let targets = one_hot(&labels);

    let initial_holdout_agreement = agreement(init, arch, tree, &holdout_states);
    let mut params = init.clone();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = cross_entropy_grad(&params, arch, &inputs, &targets);
        if !loss.is_finite() || !grad.is_finite() {
            return Err(MorlError::Diverged(format!(
                "behavioral cloning loss became non-finite at epoch {epoch} (lr {})",
                cfg.learning_rate
            )));
        }
        loss_curve.push(loss);
        params = params.add_scaled(-cfg.learning_rate, &grad);
    }
    let (final_loss, _) = cross_entropy_grad(&params, arch, &inputs, &targets);
    let holdout_agreement = agreement(&params, arch, tree, &holdout_states);
    let policy = MlpPolicy {
        arch: arch.clone(),
        params,
    };
    let (ret, ret_std) = mean_return(&policy.greedy(), env, &mut stream(cfg.seed ^ 0xB0C5), cfg.eval_episodes);
    Ok((
        policy.params,
        BcReport {
            final_loss,
            initial_holdout_agreement,
            holdout_agreement,
            loss_curve,
            cloned_policy_return: ret,
            cloned_policy_return_std: ret_std,
        },
    ))
}
