//! Adaptive latent-reasoning control for autoregressive token generation.
//!
//! A toy decoder generates a token canvas while condensers watch its hidden
//! states. An RL-trained invoker decides at fixed checkpoints whether to run
//! a latent reasoner; when it does, the reasoner's thought vector is
//! translated into control tokens and appended to the decoder's key-value
//! cache, steering the rest of the sequence.

pub mod numerics;
pub mod synthtask;
pub mod generator;
pub mod control;
pub mod condenser;
pub mod invoker;
pub mod reasoner;
pub mod training;
pub mod harness;
