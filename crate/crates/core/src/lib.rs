//! Mixed symbolic/neural policy optimization for CartPole.

pub mod env;
pub mod error;
pub mod imitation;
pub mod morl;
pub mod persist;
pub mod policy;
pub mod repair;
pub mod synthesis;
pub mod tree;
pub mod trpo;

pub use error::{MorlError, Result};
