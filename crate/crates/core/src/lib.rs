//! Joint policy and prompt optimization on synthetic verifiable tasks.
//!
//! A factorized softmax policy is trained with group-relative policy
//! optimization. Samples the policy cannot solve are mined each epoch and
//! handed to an evolutionary template search; the winning templates help
//! the policy find rewarded rollouts, and the gradient is taken on the
//! template-free input so the skill ends up in the weights.

pub mod distill;
pub mod env;
pub mod error;
pub mod gepa;
pub mod grpo;
pub mod harness;
pub mod oracle;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
