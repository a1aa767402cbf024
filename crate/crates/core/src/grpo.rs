//! Group-relative advantages and the KL-regularized policy-gradient step
//! shared by both models.
//!
//! Every batch is freshly sampled and used for exactly one step, so the
//! importance ratios of a clipped surrogate would all be 1 and the clipped
//! objective reduces to the plain score-function estimator implemented here.
//! A multi-epoch variant would have to reintroduce ratio clipping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{TaskInstance, Token, TokenSeq};
use crate::policy::{GenerationContext, Policy, PolicyError, PolicyParams};

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvantageConfig {
    pub eps: f64,
    pub normalize_std: bool,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self { eps: 1e-6, normalize_std: true }
    }
}

/// Standardizes rewards within one group using the population standard
/// deviation. Zero-variance groups get all-zero advantages.
pub fn group_advantages(rewards: &[f64], cfg: &AdvantageConfig) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::Config(format!("group size {} < 2", rewards.len())));
    }
    if !(cfg.eps > 0.0) {
        return Err(GrpoError::Config(format!("eps must be positive, got {}", cfg.eps)));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::Numeric("non-finite reward".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    let denom = if cfg.normalize_std { std + cfg.eps } else { 1.0 };
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// One joint rollout: a signal from the capable model and the lightweight
/// model's response to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub task_id: usize,
    pub signal: TokenSeq,
    pub response: TokenSeq,
    pub reward: f64,
    pub signal_len: usize,
    pub signal_logprobs: Vec<f64>,
    pub response_logprobs: Vec<f64>,
}

/// The `G` rollouts for one task plus the lightweight model's standalone
/// attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task_id: usize,
    pub task: TaskInstance,
    pub rollouts: Vec<Rollout>,
    pub baseline_response: TokenSeq,
    pub baseline_reward: f64,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    pub fn signal_lens(&self) -> Vec<usize> {
        self.rollouts.iter().map(|r| r.signal_len).collect()
    }
}

/// A generated sequence with its context and advantage, ready for a step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub ctx: GenerationContext,
    pub seq: TokenSeq,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub params: PolicyParams,
    /// Mean KL to the reference at the visited contexts, before the step.
    pub mean_kl: f64,
}

/// The ascent direction `mean(A · ∇log π) − kl_coef · ∇ mean KL(π ‖ π_ref)`.
pub fn pg_gradient(
    policy: &Policy,
    batch: &[Trajectory],
    kl_coef: f64,
    reference: &PolicyParams,
    eos: Token,
) -> Result<(Vec<f64>, f64), GrpoError> {
    if batch.is_empty() {
        return Err(GrpoError::Config("empty batch".into()));
    }
    let mut grad = vec![0.0; policy.params.weights().len()];
    let n = batch.len() as f64;
    for t in batch.iter().filter(|t| t.advantage != 0.0) {
        policy.accumulate_score(&t.ctx, &t.seq, eos, t.advantage / n, &mut grad)?;
    }
    let mut kl_grad = vec![0.0; grad.len()];
    let mut kl_total = 0.0;
    let mut contexts = 0usize;
    for t in batch {
        let (k, c) = policy.accumulate_kl(reference, &t.ctx, &t.seq, eos, 1.0, Some(&mut kl_grad))?;
        kl_total += k;
        contexts += c;
    }
    let mean_kl = if contexts > 0 { kl_total / contexts as f64 } else { 0.0 };
    if kl_coef != 0.0 && contexts > 0 {
        let scale = kl_coef / contexts as f64;
        grad.iter_mut().zip(&kl_grad).for_each(|(g, k)| *g -= scale * k);
    }
    if grad.iter().any(|g| !g.is_finite()) || !mean_kl.is_finite() {
        return Err(GrpoError::Numeric("non-finite gradient".into()));
    }
    Ok((grad, mean_kl))
}

/// One on-policy gradient-ascent step. On error the caller's parameters
/// are untouched.
pub fn pg_update(
    policy: &Policy,
    batch: &[Trajectory],
    lr: f64,
    kl_coef: f64,
    reference: &PolicyParams,
    eos: Token,
) -> Result<UpdateOutcome, GrpoError> {
    if !(lr > 0.0) {
        return Err(GrpoError::Config(format!("learning rate must be positive, got {lr}")));
    }
    if !(kl_coef >= 0.0) {
        return Err(GrpoError::Config(format!("kl_coef must be >= 0, got {kl_coef}")));
    }
    let (grad, mean_kl) = pg_gradient(policy, batch, kl_coef, reference, eos)?;
    let params = policy
        .params
        .stepped(&grad, lr)
        .map_err(|e| GrpoError::Numeric(e.to_string()))?;
    Ok(UpdateOutcome { params, mean_kl })
}

/// Arithmetic mean of the exact KL over the given contexts.
pub fn mean_kl(policy: &Policy, reference: &PolicyParams, contexts: &[GenerationContext]) -> Result<f64, GrpoError> {
    if contexts.is_empty() {
        return Err(GrpoError::Config("mean_kl needs at least one context".into()));
    }
    let mut total = 0.0;
    for c in contexts {
        total += policy.kl_exact(reference, c)?;
    }
    Ok(total / contexts.len() as f64)
}
