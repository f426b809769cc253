//! CartPole-v0 dynamics.
//!
//! A pole is hinged on a cart that moves along a frictionless track. The
//! agent pushes the cart left or right with a fixed force, and receives a
//! reward of 1 for every step taken, including the step that ends the
//! episode. Episodes end when the cart leaves the track, the pole tilts past
//! 12 degrees, or the 200-step cap is hit.
//!
//! Constants and integration order follow the classic-control reference
//! implementation, so returns are directly comparable with published numbers.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{MorlError, Result};

/// Random stream used throughout the crate.
pub type RandomStream = rand_chacha::ChaCha8Rng;

/// Build a seeded random stream.
pub fn stream(seed: u64) -> RandomStream {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Bound of the uniform initial-state distribution on every component.
pub const RESET_BOUND: f64 = 0.05;

/// Feature names in index order.
pub const FEATURE_NAMES: [&str; 4] = ["x", "xdot", "theta", "thetadot"];

/// Cart-pole observation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl State {
    pub const fn new(x: f64, x_dot: f64, theta: f64, theta_dot: f64) -> Self {
        Self {
            x,
            x_dot,
            theta,
            theta_dot,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    /// Feature by index: x→0, x_dot→1, theta→2, theta_dot→3.
    ///
    /// # Panics
    /// If `index > 3`.
    pub fn feature(&self, index: usize) -> f64 {
        match index {
            0 => self.x,
            1 => self.x_dot,
            2 => self.theta,
            3 => self.theta_dot,
            _ => panic!("feature index {index} out of range"),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl std::ops::Neg for State {
    type Output = State;

    fn neg(self) -> State {
        State::new(-self.x, -self.x_dot, -self.theta, -self.theta_dot)
    }
}

/// Discrete push direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Action {
    Left = 0,
    Right = 1,
}

impl Action {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        match index {
            0 => Ok(Action::Left),
            1 => Ok(Action::Right),
            other => Err(MorlError::InvalidAction(other as i64)),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Action::Left => Action::Right,
            Action::Right => Action::Left,
        }
    }
}

impl From<Action> for u8 {
    fn from(a: Action) -> u8 {
        a as u8
    }
}

impl TryFrom<u8> for Action {
    type Error = MorlError;

    fn try_from(v: u8) -> Result<Self> {
        Action::from_index(v as usize)
    }
}

/// Physical constants and episode limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub gravity: f64,
    pub mass_cart: f64,
    pub mass_pole: f64,
    pub pole_half_length: f64,
    pub force_magnitude: f64,
    pub time_step: f64,
    pub x_limit: f64,
    pub theta_limit: f64,
    pub max_episode_steps: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            mass_cart: 1.0,
            mass_pole: 0.1,
            pole_half_length: 0.5,
            force_magnitude: 10.0,
            time_step: 0.02,
            x_limit: 2.4,
            theta_limit: 12.0 * 2.0 * std::f64::consts::PI / 360.0,
            max_episode_steps: 200,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.gravity,
            self.mass_cart,
            self.mass_pole,
            self.pole_half_length,
            self.force_magnitude,
            self.time_step,
            self.x_limit,
            self.theta_limit,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.max_episode_steps == 0 {
            return Err(MorlError::InvalidConfig(
                "environment constants must be positive and max_episode_steps >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// CartPole-v0 constants.
pub fn default_config() -> EnvConfig {
    EnvConfig::default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    None,
    XOutOfBounds,
    ThetaOutOfBounds,
    StepLimit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next_state: State,
    pub reward: f64,
    pub done: bool,
    pub termination_reason: TerminationReason,
}

/// Draw an initial state, each component uniform in `[-0.05, 0.05]`.
pub fn reset(rng: &mut dyn RngCore) -> State {
    let mut draw = || rng.gen_range(-RESET_BOUND..=RESET_BOUND);
    let x = draw();
    let x_dot = draw();
    let theta = draw();
    let theta_dot = draw();
    State::new(x, x_dot, theta, theta_dot)
}

/// Advance one time step. `steps_so_far` counts steps already taken in the
/// episode and drives the step-limit termination.
pub fn step(state: &State, action: Action, steps_so_far: usize, cfg: &EnvConfig) -> Result<StepResult> {
    if !state.is_finite() {
        return Err(MorlError::NonFiniteState);
    }
    let force = match action {
        Action::Right => cfg.force_magnitude,
        Action::Left => -cfg.force_magnitude,
    };
    let total_mass = cfg.mass_cart + cfg.mass_pole;
    let pole_mass_length = cfg.mass_pole * cfg.pole_half_length;
    let (sin, cos) = state.theta.sin_cos();

    let temp = (force + pole_mass_length * state.theta_dot * state.theta_dot * sin) / total_mass;
    let theta_acc = (cfg.gravity * sin - cos * temp)
        / (cfg.pole_half_length * (4.0 / 3.0 - cfg.mass_pole * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;

    let tau = cfg.time_step;
    let next_state = State {
        x: state.x + tau * state.x_dot,
        x_dot: state.x_dot + tau * x_acc,
        theta: state.theta + tau * state.theta_dot,
        theta_dot: state.theta_dot + tau * theta_acc,
    };

    let termination_reason = if next_state.x.abs() > cfg.x_limit {
        TerminationReason::XOutOfBounds
    } else if next_state.theta.abs() > cfg.theta_limit {
        TerminationReason::ThetaOutOfBounds
    } else if steps_so_far + 1 >= cfg.max_episode_steps {
        TerminationReason::StepLimit
    } else {
        TerminationReason::None
    };

    Ok(StepResult {
        next_state,
        reward: 1.0,
        done: termination_reason != TerminationReason::None,
        termination_reason,
    })
}

/// Anything that picks an action for a state. Stochastic actors draw from
/// the supplied stream; deterministic ones ignore it.
pub trait Actor {
    fn act(&self, state: &State, rng: &mut dyn RngCore) -> Action;
}

impl<F> Actor for F
where
    F: Fn(&State) -> Action,
{
    fn act(&self, state: &State, _rng: &mut dyn RngCore) -> Action {
        self(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: State,
    pub action: Action,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    pub total_return: f64,
    /// State reached after the last step.
    pub final_state: State,
    pub termination_reason: TerminationReason,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// True when the episode ended inside the environment rather than by
    /// the caller's length cap.
    pub fn done(&self) -> bool {
        self.termination_reason != TerminationReason::None
    }
}

/// Run one episode from a fresh reset.
pub fn rollout(actor: &dyn Actor, cfg: &EnvConfig, rng: &mut dyn RngCore, max_len: usize) -> Trajectory {
    let max_len = max_len.min(cfg.max_episode_steps);
    let mut state = reset(rng);
    let mut steps = Vec::with_capacity(max_len);
    let mut total_return = 0.0;
    let mut termination_reason = TerminationReason::None;
    while steps.len() < max_len {
        let action = actor.act(&state, rng);
        let result = step(&state, action, steps.len(), cfg).expect("reset and dynamics keep states finite");
        steps.push(Transition {
            state,
            action,
            reward: result.reward,
        });
        total_return += result.reward;
        state = result.next_state;
        if result.done {
            termination_reason = result.termination_reason;
            break;
        }
    }
    Trajectory {
        steps,
        total_return,
        final_state: state,
        termination_reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_constants() {
        let cfg = default_config();
        assert_eq!(cfg.max_episode_steps, 200);
        assert_eq!(cfg.time_step, 0.02);
        assert!((cfg.theta_limit - 0.2094395).abs() < 1e-7);
        cfg.validate().unwrap();
    }

    #[test]
    fn push_right_from_rest() {
        // temp = 10/1.1, theta_acc = -temp / (0.5 * (4/3 - 0.1/1.1)),
        // x_acc = temp - 0.05 * theta_acc / 1.1
        let temp = 10.0 / 1.1;
        let theta_acc = -temp / (0.5 * (4.0 / 3.0 - 0.1 / 1.1));
        let x_acc = temp - 0.05 * theta_acc / 1.1;
        let r = step(&State::default(), Action::Right, 0, &default_config()).unwrap();
        assert_eq!(r.reward, 1.0);
        assert!(!r.done);
        assert!((r.next_state.x_dot - 0.02 * x_acc).abs() < 1e-15);
        assert!((r.next_state.theta_dot - 0.02 * theta_acc).abs() < 1e-15);
        assert!((r.next_state.x_dot - 0.1951220).abs() < 1e-6);
        assert!((r.next_state.theta_dot + 0.2926829).abs() < 1e-6);
        assert_eq!(r.next_state.x, 0.0);
        assert_eq!(r.next_state.theta, 0.0);
    }

    #[test]
    fn push_left_is_exact_mirror() {
        let cfg = default_config();
        let right = step(&State::default(), Action::Right, 0, &cfg).unwrap();
        let left = step(&State::default(), Action::Left, 0, &cfg).unwrap();
        assert_eq!(left.next_state, -right.next_state);
    }

    #[test]
    fn cart_leaving_track() {
        let cfg = default_config();
        for action in [Action::Left, Action::Right] {
            let r = step(&State::new(2.39, 1.0, 0.0, 0.0), action, 0, &cfg).unwrap();
            assert!(r.done);
            assert_eq!(r.termination_reason, TerminationReason::XOutOfBounds);
            assert_eq!(r.reward, 1.0);
        }
    }

    #[test]
    fn step_limit() {
        let cfg = default_config();
        let r = step(&State::default(), Action::Left, 199, &cfg).unwrap();
        assert!(r.done);
        assert_eq!(r.termination_reason, TerminationReason::StepLimit);
    }

    #[test]
    fn non_finite_state_rejected() {
        let s = State::new(f64::NAN, 0.0, 0.0, 0.0);
        assert!(matches!(
            step(&s, Action::Left, 0, &default_config()),
            Err(MorlError::NonFiniteState)
        ));
    }

    #[test]
    fn reset_is_seeded_and_bounded() {
        let a = reset(&mut stream(11));
        let b = reset(&mut stream(11));
        assert_eq!(a, b);
        let mut distinct = 0;
        for seed in 0..100u64 {
            let s = reset(&mut stream(seed));
            assert!(s.to_array().iter().all(|v| v.abs() <= RESET_BOUND));
            if s != reset(&mut stream(seed + 1000)) {
                distinct += 1;
            }
        }
        assert_eq!(distinct, 100);
    }

    #[test]
    fn constant_policy_falls_fast() {
        let cfg = default_config();
        let mut rng = stream(3);
        let total: f64 = (0..100)
            .map(|_| rollout(&|_: &State| Action::Right, &cfg, &mut rng, 200).total_return)
            .sum();
        let mean = total / 100.0;
        assert!((8.0..=11.0).contains(&mean), "mean {mean}");
    }

    #[test]
    fn rollout_truncates() {
        let traj = rollout(&|_: &State| Action::Left, &default_config(), &mut stream(0), 5);
        assert!(traj.len() <= 5);
        assert_eq!(traj.total_return, traj.len() as f64);
    }
}
