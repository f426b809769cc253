//! Trust-region policy optimization with GAE advantages.
//!
//! Each iteration samples a batch of trajectories from the current policy,
//! estimates advantages against a small learned value baseline, and takes a
//! natural-gradient step: conjugate gradient against the damped Fisher
//! operator gives the direction, the KL radius gives the length, and a
//! backtracking line search enforces both surrogate improvement and the KL
//! bound. A failed line search leaves the policy untouched.

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::env::{step, stream, Action, EnvConfig, State, TerminationReason};
use crate::error::{MorlError, Result};
use crate::policy::{
    backward_batch, forward_batch, forward_single, init_params, log_softmax_rows, mean_kl, states_matrix,
    ActionDistribution, FisherOperator, MlpArchitecture, ParamVector,
};
use crate::synthesis::mean_std;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub kl_delta: f64,
    pub cg_iterations: usize,
    pub cg_residual_tol: f64,
    pub fvp_damping: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    pub trajectories_per_iteration: usize,
    pub max_trajectory_length: usize,
    pub value_fit_epochs: usize,
    pub value_lr: f64,
    pub value_hidden: Vec<usize>,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.97,
            kl_delta: 0.01,
            cg_iterations: 10,
            cg_residual_tol: 1e-10,
            fvp_damping: 0.1,
            backtrack_ratio: 0.5,
            max_backtracks: 10,
            trajectories_per_iteration: 10,
            max_trajectory_length: 200,
            value_fit_epochs: 50,
            value_lr: 0.01,
            value_hidden: vec![32],
        }
    }
}

impl TrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.gamma <= 1.0
            && (0.0..=1.0).contains(&self.gae_lambda)
            && self.kl_delta > 0.0
            && self.fvp_damping >= 0.0
            && self.backtrack_ratio > 0.0
            && self.backtrack_ratio < 1.0
            && self.trajectories_per_iteration >= 1
            && self.max_trajectory_length >= 1;
        if !ok {
            return Err(MorlError::InvalidConfig(
                "trpo needs 0 < gamma <= 1, 0 <= lambda <= 1, kl_delta > 0, damping >= 0, 0 < backtrack_ratio < 1 and non-empty batches"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// One sampled episode with behavior log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub final_state: State,
    /// Ended inside the environment (no bootstrapping past the last step).
    pub done: bool,
}

impl SampledTrajectory {
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub trajectories: Vec<SampledTrajectory>,
    /// Per-step advantages in trajectory order, filled by
    /// [`compute_advantages`].
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl RolloutBatch {
    pub fn transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.states.len()).sum()
    }

    pub fn states(&self) -> Vec<State> {
        self.trajectories.iter().flat_map(|t| t.states.iter().copied()).collect()
    }

    pub fn actions(&self) -> Vec<Action> {
        self.trajectories.iter().flat_map(|t| t.actions.iter().copied()).collect()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.trajectories.iter().flat_map(|t| t.log_probs.iter().copied()).collect()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.total_return()).collect()
    }
}

/// Baseline network with a single linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub arch: MlpArchitecture,
    pub params: ParamVector,
}

impl ValueFunction {
    pub fn new(hidden: Vec<usize>, rng: &mut dyn RngCore) -> Self {
        let arch = MlpArchitecture::value(hidden);
        let params = init_params(&arch, rng, 1.0);
        Self { arch, params }
    }

    /// The constant-zero baseline.
    pub fn zero(hidden: Vec<usize>) -> Self {
        let arch = MlpArchitecture::value(hidden);
        let params = ParamVector::zeros(arch.param_count());
        Self { arch, params }
    }

    pub fn value(&self, state: &State) -> f64 {
        forward_single(&self.params, &self.arch, state)[0]
    }

    pub fn values(&self, states: &[State]) -> Vec<f64> {
        forward_batch(&self.params, &self.arch, states_matrix(states)).output.column(0).to_vec()
    }

    /// Mean squared error to `targets` and its gradient.
    pub fn loss_grad(&self, inputs: &Array2<f64>, targets: &[f64]) -> (f64, ParamVector) {
        let n = targets.len() as f64;
        let cache = forward_batch(&self.params, &self.arch, inputs.clone());
        let mut d = Array2::zeros((targets.len(), 1));
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let err = cache.output[[i, 0]] - t;
            loss += err * err;
            d[[i, 0]] = 2.0 * err / n;
        }
        (loss / n, backward_batch(&self.params, &self.arch, &cache, d))
    }

    /// Plain gradient descent on squared error.
    pub fn fit(&mut self, states: &[State], targets: &[f64], epochs: usize, lr: f64) -> Result<f64> {
        let inputs = states_matrix(states);
        let mut loss = 0.0;
        for _ in 0..epochs {
            let (l, g) = self.loss_grad(&inputs, targets);
            if !l.is_finite() || !g.is_finite() {
                return Err(MorlError::Diverged("value function loss became non-finite".into()));
            }
            loss = l;
            self.params = self.params.add_scaled(-lr, &g);
        }
        Ok(loss)
    }
}

/// Sample `trajectories_per_iteration` episodes from the stochastic policy.
pub fn collect_batch(
    params: &ParamVector,
    arch: &MlpArchitecture,
    env: &EnvConfig,
    cfg: &TrpoConfig,
    rng: &mut dyn RngCore,
) -> RolloutBatch {
    let cap = cfg.max_trajectory_length.min(env.max_episode_steps);
    let trajectories = (0..cfg.trajectories_per_iteration)
        .map(|_| {
            let mut state = crate::env::reset(rng);
            let mut traj = SampledTrajectory {
                states: Vec::new(),
                actions: Vec::new(),
                rewards: Vec::new(),
                log_probs: Vec::new(),
                final_state: state,
                done: false,
            };
            while traj.states.len() < cap {
                let out = forward_single(params, arch, &state);
                let dist = ActionDistribution::from_logits([out[0], out[1]]);
                let action = dist.sample(rng);
                let result = step(&state, action, traj.states.len(), env).expect("finite dynamics");
                traj.states.push(state);
                traj.actions.push(action);
                traj.rewards.push(result.reward);
                traj.log_probs.push(dist.probs[action.index()].ln());
                state = result.next_state;
                if result.done {
                    traj.done = result.termination_reason != TerminationReason::None;
                    break;
                }
            }
            traj.final_state = state;
            traj
        })
        .collect();
    RolloutBatch {
        trajectories,
        advantages: Vec::new(),
        value_targets: Vec::new(),
    }
}

/// Generalized advantage estimates for one trajectory, computed backwards.
/// `values` holds `V(s_t)` for each step and `bootstrap` is `V(s_T)` for the
/// state after the last step (ignored when `done`).
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, done: bool, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n {
            values[t + 1]
        } else if done {
            0.0
        } else {
            bootstrap
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    adv
}

/// Fill advantages (normalized across the batch) and value targets
/// (unnormalized advantage plus baseline).
pub fn compute_advantages(mut batch: RolloutBatch, value_fn: &ValueFunction, cfg: &TrpoConfig) -> RolloutBatch {
    let mut raw = Vec::with_capacity(batch.transitions());
    let mut targets = Vec::with_capacity(batch.transitions());
    for traj in &batch.trajectories {
        let values = value_fn.values(&traj.states);
        let bootstrap = value_fn.value(&traj.final_state);
        let adv = gae(&traj.rewards, &values, bootstrap, traj.done, cfg.gamma, cfg.gae_lambda);
        targets.extend(adv.iter().zip(&values).map(|(a, v)| a + v));
        raw.extend(adv);
    }
    let (mean, std) = mean_std(&raw);
    batch.advantages = raw.iter().map(|a| (a - mean) / (std + 1e-8)).collect();
    batch.value_targets = targets;
    batch
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: ParamVector,
    /// Residual norm before each iteration and after the last one.
    pub residual_norms: Vec<f64>,
}

/// Conjugate gradient for `A x = b` from `x = 0`.
pub fn conjugate_gradient(apply: impl Fn(&ParamVector) -> ParamVector, b: &ParamVector, iterations: usize, tol: f64) -> CgSolution {
    let mut x = ParamVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = b.clone();
    let mut rr = r.dot(&r);
    let mut residual_norms = vec![rr.sqrt()];
    for _ in 0..iterations {
        if rr.sqrt() < tol {
            break;
        }
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        x = x.add_scaled(alpha, &p);
        r = r.add_scaled(-alpha, &ap);
        let rr_new = r.dot(&r);
        residual_norms.push(rr_new.sqrt());
        p = r.add_scaled(rr_new / rr, &p);
        rr = rr_new;
    }
    CgSolution { x, residual_norms }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub surrogate_improvement: f64,
    /// Mean KL between the old and the returned policy on batch states.
    pub mean_kl: f64,
    pub accepted_backtrack_index: Option<usize>,
    pub mean_return: f64,
    /// `‖(F + damping·I)x − g‖ / ‖g‖` for the CG solution.
    pub cg_relative_residual: f64,
    pub value_loss: f64,
}

/// Surrogate objective `mean(π_new(a|s)/π_old(a|s) · A)` on a batch.
pub fn surrogate(params: &ParamVector, arch: &MlpArchitecture, inputs: &Array2<f64>, actions: &[Action], old_log_probs: &[f64], advantages: &[f64]) -> f64 {
    let logp = log_softmax_rows(&forward_batch(params, arch, inputs.clone()).output);
    let total: f64 = actions
        .iter()
        .enumerate()
        .map(|(i, a)| (logp[[i, a.index()]] - old_log_probs[i]).exp() * advantages[i])
        .sum();
    total / actions.len() as f64
}

/// Gradient of the surrogate at the behavior parameters.
pub fn surrogate_grad(params: &ParamVector, arch: &MlpArchitecture, inputs: &Array2<f64>, actions: &[Action], advantages: &[f64]) -> ParamVector {
    let n = actions.len() as f64;
    let cache = forward_batch(params, arch, inputs.clone());
    let p = log_softmax_rows(&cache.output).mapv(f64::exp);
    let mut d = -p;
    for (i, a) in actions.iter().enumerate() {
        d[[i, a.index()]] += 1.0;
        d[[i, 0]] *= advantages[i] / n;
        d[[i, 1]] *= advantages[i] / n;
    }
    backward_batch(params, arch, &cache, d)
}

/// One trust-region step followed by a value-function refit.
pub fn trpo_update(
    params: &ParamVector,
    arch: &MlpArchitecture,
    batch: &RolloutBatch,
    value_fn: &mut ValueFunction,
    cfg: &TrpoConfig,
) -> Result<(ParamVector, UpdateDiagnostics)> {
    if batch.transitions() == 0 {
        return Err(MorlError::InvalidConfig("trpo update needs at least one transition".into()));
    }
    assert_eq!(batch.advantages.len(), batch.transitions(), "compute_advantages must run before trpo_update");
    let states = batch.states();
    let inputs = states_matrix(&states);
    let actions = batch.actions();
    let old_log_probs = batch.log_probs();
    let advantages = &batch.advantages;

    let g = surrogate_grad(params, arch, &inputs, &actions, advantages);
    if !g.is_finite() {
        return Err(MorlError::Diverged("policy gradient is not finite".into()));
    }
    let base = surrogate(params, arch, &inputs, &actions, &old_log_probs, advantages);
    let mut diag = UpdateDiagnostics {
        surrogate_improvement: 0.0,
        mean_kl: 0.0,
        accepted_backtrack_index: None,
        mean_return: mean_std(&batch.returns()).0,
        cg_relative_residual: 0.0,
        value_loss: 0.0,
    };
    let mut new_params = params.clone();
    let g_norm = g.norm();
    if g_norm > 0.0 {
        let fisher = FisherOperator::new(params, arch, &inputs, cfg.fvp_damping);
        let cg = conjugate_gradient(|v| fisher.apply(v), &g, cfg.cg_iterations, cfg.cg_residual_tol);
        let fx = fisher.apply(&cg.x);
        diag.cg_relative_residual = fx.add_scaled(-1.0, &g).norm() / g_norm;
        let shs = cg.x.dot(&fx);
        if shs > 0.0 && shs.is_finite() {
            let beta = (2.0 * cfg.kl_delta / shs).sqrt();
            let mut scale = beta;
            for k in 0..cfg.max_backtracks {
                let candidate = params.add_scaled(scale, &cg.x);
                let improvement = surrogate(&candidate, arch, &inputs, &actions, &old_log_probs, advantages) - base;
                let kl = mean_kl(params, &candidate, arch, &inputs);
                if improvement > 0.0 && kl <= cfg.kl_delta {
                    diag.surrogate_improvement = improvement;
                    diag.mean_kl = kl;
                    diag.accepted_backtrack_index = Some(k);
                    new_params = candidate;
                    break;
                }
                scale *= cfg.backtrack_ratio;
            }
        }
    }
    diag.value_loss = value_fn.fit(&states, &batch.value_targets, cfg.value_fit_epochs, cfg.value_lr)?;
    Ok((new_params, diag))
}

/// One metrics record per training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrpoRecord {
    pub iteration: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_kl: f64,
    pub surrogate_improvement: f64,
    pub accepted_backtrack_index: Option<usize>,
}

/// Run `n_iterations` of collect → advantages → update, reporting each
/// iteration to `sink`. The value baseline is initialized from `rng`.
pub fn train(
    params: &ParamVector,
    arch: &MlpArchitecture,
    env: &EnvConfig,
    cfg: &TrpoConfig,
    n_iterations: usize,
    rng: &mut dyn RngCore,
    sink: &mut dyn FnMut(&TrpoRecord),
) -> Result<ParamVector> {
    cfg.validate()?;
    if n_iterations == 0 {
        return Err(MorlError::InvalidConfig("train needs at least one iteration".into()));
    }
    let mut value_fn = ValueFunction::new(cfg.value_hidden.clone(), &mut stream(rand::Rng::gen(rng)));
    let mut params = params.clone();
    for iteration in 0..n_iterations {
        let batch = collect_batch(&params, arch, env, cfg, rng);
        let (mean_return, std_return) = mean_std(&batch.returns());
        let batch = compute_advantages(batch, &value_fn, cfg);
        let (next, diag) = trpo_update(&params, arch, &batch, &mut value_fn, cfg)?;
        params = next;
        sink(&TrpoRecord {
            iteration,
            mean_return,
            std_return,
            mean_kl: diag.mean_kl,
            surrogate_improvement: diag.surrogate_improvement,
            accepted_backtrack_index: diag.accepted_backtrack_index,
        });
    }
    Ok(params)
}
