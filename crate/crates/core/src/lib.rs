//! Desk-scale reference implementations of sparse latent attention with a
//! lightning indexer, the indexer alignment losses, a stabilized GRPO
//! objective with routing and sampling-mask replay, and test-time context
//! management for tool-using agents. Every mechanism ships with an
//! independent oracle so its behaviour can be checked exactly.

pub mod context_sim;
pub mod dsa_attention;
pub mod error;
pub mod grpo_core;
pub mod indexer_training;
pub mod mla_attention;
pub mod numerics;
pub mod policy_sim;
pub mod rng;
pub mod verify;

pub use error::{LabError, Result};
