//! Desk-scale reinforcement learning from verifiable rewards.
//!
//! A linear autoregressive policy over a small token vocabulary is trained on
//! synthetic tasks whose answers are checked by a rule-based verifier. The
//! optimizer is a clipped sequence-level surrogate with group-standardized
//! advantages, optionally corrected for rollout/trainer disagreement by
//! geometric-mean masked importance sampling, and driven by a pass-rate
//! curriculum that tightens difficulty while widening exploration.

pub mod curriculum;
pub mod engine;
pub mod estimators;
pub mod expr;
pub mod harness;
pub mod policy;
pub mod seed;
pub mod tasks;
pub mod verifier;
