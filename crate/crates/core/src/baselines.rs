//! Comparison methods: naive truncation, a shrinking length limit
//! (ThinkPrune), a group-relative length penalty (L-GRPO) and the
//! single-model trainer that shares DUET's length-penalized reward.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{final_answer, reward, Environment, TaskInstance, Token, TokenSeq};
use crate::eval::{evaluate, CostModels, EvalError, EvalMode, MetricsRecord};
use crate::grpo::{group_advantages, pg_update, GrpoError, Trajectory};
use crate::policy::PolicyPair;
use crate::rng::{purpose, RngTree};
use crate::trainer::{
    lambda_update, signal_context, train, Algorithm, DuetConfig, EvalPlan, GroupDiagnostics, LambdaState, References,
    StepOutcome, StepReport, TrainError, TrainOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    pub budget: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThinkPruneSchedule {
    pub start_limit: usize,
    pub decrement: usize,
    pub interval_steps: usize,
    pub floor: usize,
}

impl ThinkPruneSchedule {
    /// 8000 tokens, minus 1000 every 20 steps, never below 1000.
    pub const PAPER: Self = Self { start_limit: 8000, decrement: 1000, interval_steps: 20, floor: 1000 };
    pub const DESK: Self = Self { start_limit: 32, decrement: 4, interval_steps: 20, floor: 4 };

    pub fn validate(&self) -> Result<(), String> {
        if self.floor < 1 || self.start_limit < self.floor {
            return Err(format!("need start_limit >= floor >= 1, got {} and {}", self.start_limit, self.floor));
        }
        if self.interval_steps < 1 {
            return Err("interval_steps must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgrpoConfig {
    pub beta: f64,
}

impl Default for LgrpoConfig {
    fn default() -> Self {
        Self { beta: 0.5 }
    }
}

/// First `min(len, budget)` non-`eos` tokens, without an `eos`.
pub fn truncate(z: &TokenSeq, budget: usize, eos: Token) -> TokenSeq {
    let content = z.content(eos);
    TokenSeq::new(content[..content.len().min(budget)].to_vec())
}

/// Greedy reasoning cut at `budget`, then a one-token answer from the
/// capable model. Reported length counts kept reasoning plus answer tokens.
pub fn naive_truncation_eval(
    pair: &PolicyPair,
    env: &Environment,
    tasks: &[TaskInstance],
    budget: usize,
    costs: &CostModels,
) -> Result<MetricsRecord, EvalError> {
    evaluate(pair, env, tasks, EvalMode::Truncation(budget), costs)
}

/// `max(floor, start − decrement·⌊step/interval⌋)`.
pub fn thinkprune_limit(schedule: &ThinkPruneSchedule, step: usize) -> usize {
    let cut = schedule.decrement.saturating_mul(step / schedule.interval_steps.max(1));
    schedule.start_limit.saturating_sub(cut).max(schedule.floor)
}

/// 1 iff the answer read from the first `limit` tokens is correct.
pub fn thinkprune_reward(instance: &TaskInstance, full_generation: &TokenSeq, limit: usize, eos: Token) -> f64 {
    reward(instance, &final_answer(&truncate(full_generation, limit, eos), eos))
}

/// Subtracts `β·ℓ/L*` from correct rollouts, where `L*` is the longest
/// correct rollout in the group. Incorrect rollouts are untouched; a group
/// whose correct rollouts all have length zero is penalized as if every
/// ratio were 1.
pub fn lgrpo_rewards(rewards: &[f64], lengths: &[usize], correct: &[bool], cfg: &LgrpoConfig) -> Vec<f64> {
    let longest = lengths
        .iter()
        .zip(correct)
        .filter(|(_, &c)| c)
        .map(|(&l, _)| l)
        .max();
    let Some(longest) = longest else {
        return rewards.to_vec();
    };
    rewards
        .iter()
        .zip(lengths)
        .zip(correct)
        .map(|((&r, &l), &c)| {
            if !c {
                r
            } else if longest == 0 {
                r - cfg.beta
            } else {
                r - cfg.beta * l as f64 / longest as f64
            }
        })
        .collect()
}

/// Reward shaping for a capable model trained alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleShaping {
    /// `R − λℓ/B` with the same multiplier schedule as DUET.
    LengthPenalty,
    ThinkPrune(ThinkPruneSchedule),
    Lgrpo(LgrpoConfig),
}

struct SingleSample {
    seq: TokenSeq,
    len: usize,
    correct: f64,
}

/// One step of the single-model trainer: `G` single-pass generations per
/// task, each answered by its last token.
#[allow(clippy::too_many_arguments)]
pub fn single_step(
    cfg: &DuetConfig,
    env: &Environment,
    shaping: &SingleShaping,
    pair: &PolicyPair,
    refs: &References,
    lambda: &LambdaState,
    step: usize,
    rngs: &RngTree,
) -> Result<StepOutcome, TrainError> {
    let vocab = env.vocab();
    let eos = vocab.eos();
    let capable = &pair.capable;
    let cap = env.signal_cap(capable.params.max_gen_len());
    let tasks = {
        let mut rng = rngs.stream(&[purpose::TASKS, step as u64]);
        env.sample_tasks(cfg.batch_size, &mut rng)
    };
    if !matches!(shaping, SingleShaping::LengthPenalty) && env.channel_spec().is_some() {
        return Err(TrainError::Config("length-limit baselines need the chain environment".into()));
    }
    let samples: Vec<Vec<SingleSample>> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let ctx = signal_context(pair, task);
            (0..cfg.rollouts)
                .map(|j| {
                    let mut rng = rngs.stream(&[purpose::ROLLOUT, step as u64, i as u64, j as u64]);
                    let (seq, _) = capable.sample_sequence(&ctx, cfg.temperature_train, &mut rng, cap, eos)?;
                    let len = seq.signal_len(eos);
                    let correct = match env.channel_spec() {
                        Some(ch) => ch.joint_reward(len, &mut rng)?,
                        None => reward(task, &final_answer(&seq, eos)),
                    };
                    Ok(SingleSample { seq, len, correct })
                })
                .collect::<Result<Vec<_>, TrainError>>()
        })
        .collect::<Result<_, _>>()?;

    let wrap = |source: GrpoError| TrainError::Step { step, source };
    let mut batch = Vec::new();
    let mut groups = Vec::new();
    for (i, (task, group)) in tasks.iter().zip(&samples).enumerate() {
        let correct: Vec<f64> = group.iter().map(|s| s.correct).collect();
        let lens: Vec<usize> = group.iter().map(|s| s.len).collect();
        let shaped: Vec<f64> = match shaping {
            SingleShaping::LengthPenalty => {
                correct.iter().zip(&lens).map(|(r, &l)| r - lambda.lambda * l as f64 / lambda.budget).collect()
            }
            SingleShaping::ThinkPrune(schedule) => {
                let limit = thinkprune_limit(schedule, step - 1);
                group.iter().map(|s| thinkprune_reward(task, &s.seq, limit, eos)).collect()
            }
            SingleShaping::Lgrpo(lcfg) => {
                let flags: Vec<bool> = correct.iter().map(|&r| r > 0.5).collect();
                lgrpo_rewards(&correct, &lens, &flags, lcfg)
            }
        };
        let adv = group_advantages(&shaped, &cfg.advantage).map_err(wrap)?;
        let ctx = signal_context(pair, task);
        for (s, a) in group.iter().zip(adv) {
            batch.push(Trajectory { ctx: ctx.clone(), seq: s.seq.clone(), advantage: a });
        }
        groups.push(GroupDiagnostics { task_id: i, rewards: correct, signal_lens: lens, baseline_reward: 0.0 });
    }
    let out = pg_update(capable, &batch, cfg.lr_capable, cfg.kl_coef, &refs.capable, eos).map_err(wrap)?;

    let n = (tasks.len() * cfg.rollouts) as f64;
    let mean_len = groups.iter().flat_map(|g| g.signal_lens.iter()).sum::<usize>() as f64 / n;
    let next_lambda = if matches!(shaping, SingleShaping::LengthPenalty) && cfg.adaptive_schedule {
        lambda_update(lambda, mean_len)
    } else {
        lambda.hold(mean_len)
    };
    let report = StepReport {
        step,
        mean_reward: groups.iter().flat_map(|g| g.rewards.iter()).sum::<f64>() / n,
        mean_baseline_reward: 0.0,
        mean_signal_len: mean_len,
        mean_response_len: 0.0,
        lambda_used: lambda.lambda,
        lambda: next_lambda.lambda,
        mean_kl_capable: out.mean_kl,
        mean_kl_light: None,
        groups,
    };
    Ok(StepOutcome {
        pair: PolicyPair { capable: capable.with_params(out.params), light: pair.light.clone() },
        lambda: next_lambda,
        report,
    })
}

/// Trains the capable model alone with the length-penalized reward.
pub fn single_model_train(
    cfg: &DuetConfig,
    env: &Environment,
    pair: PolicyPair,
    plan: Option<&EvalPlan>,
) -> Result<TrainOutput, TrainError> {
    train(cfg, env, Algorithm::Single(SingleShaping::LengthPenalty), pair, plan)
}
