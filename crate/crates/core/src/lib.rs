//! Dual-model, length-penalized policy-gradient laboratory.
//!
//! A capable policy emits a short reasoning signal, a lightweight policy (or
//! an analytic channel) decodes it into an answer, and a projected
//! dual-ascent multiplier steers the expected signal length to a budget.

pub mod envs;
pub mod policy;
pub mod rng;
pub mod grpo;
pub mod baselines;
pub mod eval;
pub mod runtime;
pub mod trainer;
