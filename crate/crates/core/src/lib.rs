//! Contrastive-signal-augmented PPO fine-tuning of a tiny autoregressive
//! policy on a synthetic arithmetic chain-of-thought task.
//!
//! The crate is organized around independently testable pieces: a
//! reverse-mode autodiff tape ([`autodiff`]), a small causal transformer
//! with value and projection heads ([`model`]), the synthetic task
//! ([`task`]), on-policy rollouts with GAE ([`rollout`]), pooled CoT
//! embeddings ([`cot_embed`]), masked InfoNCE signals ([`contrast`]), and
//! the two-stage trainer ([`trainer`]).

pub mod autodiff;
pub mod contrast;
pub mod cot_embed;
pub mod exec;
pub mod model;
pub mod rollout;
pub mod seeding;
pub mod task;
pub mod trainer;

pub use autodiff::{Array, NodeId, Op, Tape};
