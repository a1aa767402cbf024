//! The alternating two-model training loop.
//!
//! Each step samples a batch of tasks, draws `G` signals per task from the
//! capable model, one or more standalone attempts and `G` signal-conditioned
//! responses from the lightweight model, then updates the lightweight model,
//! the capable model and finally the length multiplier, in that order. Both
//! updates use the same batch, and the capable model's length penalty uses
//! the multiplier from before this step's update.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, SingleShaping};
use crate::envs::{reward, EnvError, Environment, TaskInstance, TokenSeq};
use crate::eval::{evaluate, CostModels, EvalError, EvalMode, MetricsRecord};
use crate::grpo::{group_advantages, pg_update, AdvantageConfig, GrpoError, Rollout, RolloutGroup, Trajectory};
use crate::policy::{FeatureMap, GenerationContext, Policy, PolicyError, PolicyPair, PolicyParams};
use crate::rng::{purpose, RngTree};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("step {step}: {source}")]
    Step { step: usize, source: GrpoError },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// `R(x, y_Mm) − R(x, y_m)`.
pub fn marginal_utility(r_joint: f64, r_base: f64) -> f64 {
    r_joint - r_base
}

/// Capable-model reward: task term (marginal or raw) minus `λ·ℓ/B`.
pub fn capable_reward(r_joint: f64, r_base: f64, signal_len: f64, lambda: f64, budget: f64, use_mu: bool) -> f64 {
    let task = if use_mu { marginal_utility(r_joint, r_base) } else { r_joint };
    task - lambda * signal_len / budget
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub step: usize,
    pub lambda: f64,
    pub mean_length: f64,
}

/// Lagrange multiplier for the length budget, kept in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaState {
    pub lambda: f64,
    pub eta: f64,
    pub budget: f64,
    pub history: Vec<LambdaPoint>,
}

impl LambdaState {
    pub fn new(lambda0: f64, eta: f64, budget: f64) -> Result<Self, TrainError> {
        if !(0.0..=1.0).contains(&lambda0) {
            return Err(TrainError::Config(format!("lambda0 {lambda0} outside [0, 1]")));
        }
        if !(eta > 0.0) || !(budget > 0.0) || !eta.is_finite() || !budget.is_finite() {
            return Err(TrainError::Config(format!("need eta > 0 and budget > 0, got {eta}, {budget}")));
        }
        Ok(Self { lambda: lambda0, eta, budget, history: Vec::new() })
    }

    fn next_step(&self) -> usize {
        self.history.last().map_or(1, |p| p.step + 1)
    }

    /// Records a step without moving the multiplier.
    pub fn hold(&self, mean_length: f64) -> Self {
        let mut next = self.clone();
        next.history.push(LambdaPoint { step: self.next_step(), lambda: self.lambda, mean_length });
        next
    }
}

/// Projected dual ascent `λ ← clamp(λ + η(E[L]/B − 1), 0, 1)`.
pub fn lambda_update(state: &LambdaState, mean_length: f64) -> LambdaState {
    let raw = state.lambda + state.eta * (mean_length / state.budget - 1.0);
    let mut next = state.clone();
    next.lambda = raw.clamp(0.0, 1.0);
    next.history.push(LambdaPoint { step: state.next_step(), lambda: next.lambda, mean_length });
    next
}

/// Architecture and initial biases of one policy.
///
/// The biases stand in for pretraining: `answer_bias` lets a scratch-privileged
/// model emit the running-fold digit, `copy_bias` makes a model repeat the
/// most recent digit it sees, and `stop_bias` favours `eos` after the first
/// generated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub window: usize,
    pub use_scratch: bool,
    pub position_buckets: usize,
    pub max_gen_len: usize,
    pub answer_bias: f64,
    pub copy_bias: f64,
    pub stop_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::capable()
    }
}

impl ModelConfig {
    pub fn capable() -> Self {
        Self {
            window: 4,
            use_scratch: true,
            position_buckets: 8,
            max_gen_len: 64,
            answer_bias: 1.0,
            copy_bias: 0.0,
            stop_bias: 0.0,
        }
    }

    pub fn light() -> Self {
        Self {
            window: 2,
            use_scratch: false,
            position_buckets: 4,
            max_gen_len: 16,
            answer_bias: 0.0,
            copy_bias: 2.0,
            stop_bias: 2.5,
        }
    }

    /// A policy whose only features are generation positions: its length
    /// distribution is categorical and enumerable.
    pub fn length_only(max_len: usize) -> Self {
        Self {
            window: 0,
            use_scratch: false,
            position_buckets: max_len + 1,
            max_gen_len: max_len,
            answer_bias: 0.0,
            copy_bias: 0.0,
            stop_bias: 0.0,
        }
    }

    pub fn build(&self, env: &Environment) -> Result<Policy, PolicyError> {
        let vocab = env.vocab();
        let p = env.digit_base();
        let fmap = FeatureMap::new(vocab.size(), self.window, self.use_scratch.then_some(p), self.position_buckets)?;
        let mut params = PolicyParams::zeros(&fmap, self.max_gen_len)?;
        for d in 0..p {
            if let Some(row) = fmap.scratch_index(d) {
                params.set(row, d, params.get(row, d) + self.answer_bias);
            }
            if fmap.window() > 0 {
                let row = fmap.window_index(0, d);
                params.set(row, d, params.get(row, d) + self.copy_bias);
            }
        }
        for pos in 1..self.position_buckets {
            if let Some(row) = fmap.position_index(pos) {
                params.set(row, vocab.eos(), params.get(row, vocab.eos()) + self.stop_bias);
            }
        }
        if params.weights().iter().any(|w| !w.is_finite()) {
            return Err(PolicyError::NonFinite("initial biases"));
        }
        Policy::new(fmap, params)
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DuetConfig {
    pub batch_size: usize,
    pub rollouts: usize,
    pub steps: usize,
    pub lr_capable: f64,
    pub lr_light: f64,
    pub kl_coef: f64,
    pub lambda0: f64,
    pub eta: f64,
    pub budget: f64,
    pub use_marginal_utility: bool,
    pub adaptive_schedule: bool,
    pub train_light: bool,
    pub temperature_train: f64,
    pub temperature_eval: f64,
    pub baseline_samples: usize,
    pub advantage: AdvantageConfig,
    /// Supplied by the run configuration's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl DuetConfig {
    /// Large-scale defaults: S=64, G=4, η=0.01, B=1000, lr=1e-6, KL 0.001.
    pub fn paper() -> Self {
        Self {
            batch_size: 64,
            rollouts: 4,
            steps: 200,
            lr_capable: 1e-6,
            lr_light: 1e-6,
            kl_coef: 0.001,
            lambda0: 0.0,
            eta: 0.01,
            budget: 1000.0,
            use_marginal_utility: true,
            adaptive_schedule: true,
            train_light: true,
            temperature_train: 1.0,
            temperature_eval: 0.0,
            baseline_samples: 1,
            advantage: AdvantageConfig::default(),
            seed: 0,
        }
    }

    /// Desk-scale rescaling for signals of a few tokens.
    pub fn desk() -> Self {
        Self { batch_size: 32, eta: 0.05, budget: 8.0, lr_capable: 0.05, lr_light: 0.05, steps: 3000, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.rollouts < 2 {
            return bad("rollouts must be >= 2 for group-relative advantages".into());
        }
        if self.baseline_samples == 0 {
            return bad("baseline_samples must be >= 1".into());
        }
        for (name, v) in [("lr_capable", self.lr_capable), ("lr_light", self.lr_light)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return bad("kl_coef must be >= 0".into());
        }
        if !(self.temperature_train > 0.0) || !(self.temperature_eval >= 0.0) {
            return bad("temperatures must be positive (train) and non-negative (eval)".into());
        }
        LambdaState::new(self.lambda0, self.eta, self.budget).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDiagnostics {
    pub task_id: usize,
    pub rewards: Vec<f64>,
    pub signal_lens: Vec<usize>,
    pub baseline_reward: f64,
}

/// Quantities logged for one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Mean task reward of the joint (or single-model) rollouts.
    pub mean_reward: f64,
    pub mean_baseline_reward: f64,
    /// `E[L] = (1/(G·S)) ΣΣ ℓ`.
    pub mean_signal_len: f64,
    pub mean_response_len: f64,
    /// Multiplier used in this step's rewards.
    pub lambda_used: f64,
    /// Multiplier after this step's update.
    pub lambda: f64,
    pub mean_kl_capable: f64,
    pub mean_kl_light: Option<f64>,
    #[serde(skip)]
    pub groups: Vec<GroupDiagnostics>,
}

/// Frozen reference parameters for the KL penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct References {
    pub capable: PolicyParams,
    pub light: Option<PolicyParams>,
}

impl References {
    pub fn of(pair: &PolicyPair) -> Self {
        Self { capable: pair.capable.params.clone(), light: pair.light.as_ref().map(|l| l.params.clone()) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub pair: PolicyPair,
    pub lambda: LambdaState,
    pub report: StepReport,
}

/// Builds both initial policies. Channel environments have no lightweight
/// policy.
pub fn init_pair(env: &Environment, capable: &ModelConfig, light: &ModelConfig) -> Result<PolicyPair, TrainError> {
    let light = match env.channel_spec() {
        Some(_) => None,
        None => Some(light.build(env)?),
    };
    Ok(PolicyPair { capable: capable.build(env)?, light })
}

fn sample_step_tasks(env: &Environment, n: usize, step: usize, rngs: &RngTree) -> Vec<TaskInstance> {
    let mut rng = rngs.stream(&[purpose::TASKS, step as u64]);
    env.sample_tasks(n, &mut rng)
}

pub(crate) fn signal_context(pair: &PolicyPair, task: &TaskInstance) -> GenerationContext {
    let scratch = pair.capable.fmap.uses_scratch().then(|| task.final_scratch());
    GenerationContext::signal(&task.prompt, scratch)
}

fn collect_group(
    cfg: &DuetConfig,
    env: &Environment,
    pair: &PolicyPair,
    task: TaskInstance,
    task_id: usize,
    step: usize,
    rngs: &RngTree,
) -> Result<RolloutGroup, TrainError> {
    let vocab = env.vocab();
    let eos = vocab.eos();
    let temp = cfg.temperature_train;
    let capable = &pair.capable;
    let sig_ctx = signal_context(pair, &task);
    let cap = env.signal_cap(capable.params.max_gen_len());
    let key = |j: usize| [purpose::ROLLOUT, step as u64, task_id as u64, j as u64];

    let mut rollouts = Vec::with_capacity(cfg.rollouts);
    for j in 0..cfg.rollouts {
        let mut rng = rngs.stream(&key(j));
        let (signal, signal_logprobs) = capable.sample_sequence(&sig_ctx, temp, &mut rng, cap, eos)?;
        let signal_len = signal.signal_len(eos);
        let (response, response_logprobs, r) = match (env.channel_spec(), &pair.light) {
            (Some(ch), _) => (TokenSeq::empty(), Vec::new(), ch.joint_reward(signal_len, &mut rng)?),
            (None, Some(light)) => {
                let ctx = GenerationContext::response(&task.prompt, &signal, vocab);
                let (y, lps) = light.sample_sequence(&ctx, temp, &mut rng, light.params.max_gen_len(), eos)?;
                let r = reward(&task, &y);
                (y, lps, r)
            }
            (None, None) => return Err(TrainError::Config("chain environment needs a lightweight policy".into())),
        };
        rollouts.push(Rollout {
            task_id,
            signal,
            response,
            reward: r,
            signal_len,
            signal_logprobs,
            response_logprobs,
        });
    }

    let mut baseline_response = TokenSeq::empty();
    let mut base_total = 0.0;
    for k in 0..cfg.baseline_samples {
        let mut rng = rngs.stream(&key(cfg.rollouts + k));
        let r = match (env.channel_spec(), &pair.light) {
            (Some(ch), _) => ch.baseline_reward(&mut rng),
            (None, Some(light)) => {
                let ctx = GenerationContext::response(&task.prompt, &TokenSeq::empty(), vocab);
                let (y, _) = light.sample_sequence(&ctx, temp, &mut rng, light.params.max_gen_len(), eos)?;
                let r = reward(&task, &y);
                if k == 0 {
                    baseline_response = y;
                }
                r
            }
            (None, None) => unreachable!("checked above"),
        };
        base_total += r;
    }
    Ok(RolloutGroup {
        task_id,
        task,
        rollouts,
        baseline_response,
        baseline_reward: base_total / cfg.baseline_samples as f64,
    })
}

/// One full training step. Fails atomically: on error nothing is returned
/// and the caller's state is unchanged.
pub fn duet_step(
    cfg: &DuetConfig,
    env: &Environment,
    pair: &PolicyPair,
    refs: &References,
    lambda: &LambdaState,
    step: usize,
    rngs: &RngTree,
) -> Result<StepOutcome, TrainError> {
    let eos = env.vocab().eos();
    let tasks = sample_step_tasks(env, cfg.batch_size, step, rngs);
    let groups: Vec<RolloutGroup> = tasks
        .into_par_iter()
        .enumerate()
        .map(|(i, t)| collect_group(cfg, env, pair, t, i, step, rngs))
        .collect::<Result<_, _>>()?;
    let wrap = |source: GrpoError| TrainError::Step { step, source };

    // Lightweight model: plain task rewards.
    let mut new_light = pair.light.clone();
    let mut mean_kl_light = None;
    if let (true, Some(light), Some(light_ref)) = (cfg.train_light, &pair.light, &refs.light) {
        let mut batch = Vec::new();
        for g in &groups {
            let adv = group_advantages(&g.rewards(), &cfg.advantage).map_err(wrap)?;
            for (r, a) in g.rollouts.iter().zip(adv) {
                batch.push(Trajectory {
                    ctx: GenerationContext::response(&g.task.prompt, &r.signal, env.vocab()),
                    seq: r.response.clone(),
                    advantage: a,
                });
            }
        }
        let out = pg_update(light, &batch, cfg.lr_light, cfg.kl_coef, light_ref, eos).map_err(wrap)?;
        mean_kl_light = Some(out.mean_kl);
        new_light = Some(light.with_params(out.params));
    }

    // Capable model: shaped rewards with the pre-update multiplier.
    let mut batch = Vec::new();
    for g in &groups {
        let shaped: Vec<f64> = g
            .rollouts
            .iter()
            .map(|r| {
                capable_reward(
                    r.reward,
                    g.baseline_reward,
                    r.signal_len as f64,
                    lambda.lambda,
                    lambda.budget,
                    cfg.use_marginal_utility,
                )
            })
            .collect();
        let adv = group_advantages(&shaped, &cfg.advantage).map_err(wrap)?;
        let ctx = signal_context(pair, &g.task);
        for (r, a) in g.rollouts.iter().zip(adv) {
            batch.push(Trajectory { ctx: ctx.clone(), seq: r.signal.clone(), advantage: a });
        }
    }
    let out = pg_update(&pair.capable, &batch, cfg.lr_capable, cfg.kl_coef, &refs.capable, eos).map_err(wrap)?;
    let new_capable = pair.capable.with_params(out.params);

    let n = (groups.len() * cfg.rollouts) as f64;
    let mean_signal_len = groups.iter().flat_map(|g| g.signal_lens()).sum::<usize>() as f64 / n;
    let next_lambda = if cfg.adaptive_schedule {
        lambda_update(lambda, mean_signal_len)
    } else {
        lambda.hold(mean_signal_len)
    };

    let report = StepReport {
        step,
        mean_reward: groups.iter().flat_map(|g| g.rewards()).sum::<f64>() / n,
        mean_baseline_reward: groups.iter().map(|g| g.baseline_reward).sum::<f64>() / groups.len() as f64,
        mean_signal_len,
        mean_response_len: groups
            .iter()
            .flat_map(|g| g.rollouts.iter().map(|r| r.response.signal_len(eos)))
            .sum::<usize>() as f64
            / n,
        lambda_used: lambda.lambda,
        lambda: next_lambda.lambda,
        mean_kl_capable: out.mean_kl,
        mean_kl_light,
        groups: groups
            .iter()
            .map(|g| GroupDiagnostics {
                task_id: g.task_id,
                rewards: g.rewards(),
                signal_lens: g.signal_lens(),
                baseline_reward: g.baseline_reward,
            })
            .collect(),
    };
    Ok(StepOutcome {
        pair: PolicyPair { capable: new_capable, light: new_light },
        lambda: next_lambda,
        report,
    })
}

/// Which objective the trainer optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Algorithm {
    Duet,
    Single(SingleShaping),
}

/// Stateful driver around [`duet_step`] and the single-model step.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: DuetConfig,
    pub env: Environment,
    pub algorithm: Algorithm,
    pub pair: PolicyPair,
    pub refs: References,
    pub lambda: LambdaState,
    /// Number of completed steps.
    pub step: usize,
    pub rngs: RngTree,
}

impl Trainer {
    pub fn new(cfg: DuetConfig, env: Environment, algorithm: Algorithm, pair: PolicyPair) -> Result<Self, TrainError> {
        cfg.validate()?;
        let lambda = LambdaState::new(cfg.lambda0, cfg.eta, cfg.budget)?;
        let refs = References::of(&pair);
        let rngs = RngTree::new(cfg.seed);
        Ok(Self { cfg, env, algorithm, pair, refs, lambda, step: 0, rngs })
    }

    /// Runs the next step and commits its result.
    pub fn step(&mut self) -> Result<StepReport, TrainError> {
        let t = self.step + 1;
        let out = match &self.algorithm {
            Algorithm::Duet => duet_step(&self.cfg, &self.env, &self.pair, &self.refs, &self.lambda, t, &self.rngs)?,
            Algorithm::Single(shaping) => baselines::single_step(
                &self.cfg,
                &self.env,
                shaping,
                &self.pair,
                &self.refs,
                &self.lambda,
                t,
                &self.rngs,
            )?,
        };
        self.pair = out.pair;
        self.lambda = out.lambda;
        self.step = t;
        Ok(out.report)
    }
}

/// Periodic greedy evaluation during training.
#[derive(Debug, Clone)]
pub struct EvalPlan {
    pub name: String,
    pub tasks: Vec<TaskInstance>,
    pub every: usize,
    pub mode: EvalMode,
    pub costs: CostModels,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub pair: PolicyPair,
    pub lambda: LambdaState,
    pub reports: Vec<StepReport>,
    pub evals: Vec<MetricsRecord>,
}

/// Runs `cfg.steps` steps from freshly built policies.
pub fn train(
    cfg: &DuetConfig,
    env: &Environment,
    algorithm: Algorithm,
    pair: PolicyPair,
    plan: Option<&EvalPlan>,
) -> Result<TrainOutput, TrainError> {
    let mut trainer = Trainer::new(cfg.clone(), env.clone(), algorithm, pair)?;
    let mut reports = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    for _ in 0..cfg.steps {
        let report = trainer.step()?;
        if let Some(plan) = plan {
            if plan.every > 0 && (trainer.step % plan.every == 0 || trainer.step == cfg.steps) {
                let rec = evaluate(&trainer.pair, env, &plan.tasks, plan.mode, &plan.costs)?;
                evals.push(rec.tagged(&plan.mode.name(), &plan.name, trainer.step, trainer.lambda.lambda));
            }
        }
        reports.push(report);
    }
    Ok(TrainOutput { pair: trainer.pair, lambda: trainer.lambda, reports, evals })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_worked_examples() {
        assert_eq!(marginal_utility(1.0, 1.0), 0.0);
        assert_eq!(marginal_utility(1.0, 0.0), 1.0);
        assert_eq!(marginal_utility(0.0, 1.0), -1.0);
        assert_eq!(capable_reward(1.0, 0.0, 500.0, 0.5, 1000.0, true), 0.75);
        assert_eq!(capable_reward(1.0, 1.0, 0.0, 0.37, 1000.0, true), 0.0);
        assert_eq!(capable_reward(1.0, 0.3, 1000.0, 0.5, 1000.0, false), 0.5);
    }

    #[test]
    fn lambda_worked_examples() {
        let s = LambdaState::new(0.5, 0.01, 1000.0).unwrap();
        assert!((lambda_update(&s, 2000.0).lambda - 0.51).abs() < 1e-12);
        assert_eq!(lambda_update(&s, 1000.0).lambda, 0.5);
        let s = LambdaState::new(0.005, 0.01, 1000.0).unwrap();
        assert_eq!(lambda_update(&s, 0.0).lambda, 0.0);
        let s = LambdaState::new(0.999, 0.05, 10.0).unwrap();
        assert_eq!(lambda_update(&s, 20.0).lambda, 1.0);
    }

    #[test]
    fn lambda_history_and_validation() {
        let s = LambdaState::new(0.0, 0.1, 4.0).unwrap();
        let s = lambda_update(&s, 8.0);
        let s = s.hold(3.0);
        let s = lambda_update(&s, 4.0);
        let steps: Vec<usize> = s.history.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![1, 2, 3]);
        assert_eq!(s.history[1].lambda, s.history[0].lambda);
        assert!(LambdaState::new(1.5, 0.1, 4.0).is_err());
        assert!(LambdaState::new(0.1, 0.0, 4.0).is_err());
        assert!(LambdaState::new(0.1, 0.1, 0.0).is_err());
    }

    #[test]
    fn model_biases_land_on_expected_weights() {
        use crate::envs::{ChainArithSpec, Op};
        let env = Environment::chain(ChainArithSpec::new(2, 10, vec![Op::Add]).unwrap()).unwrap();
        let m = ModelConfig::light().build(&env).unwrap();
        assert_eq!(m.params.get(m.fmap.window_index(0, 7), 7), 2.0);
        assert_eq!(m.params.get(m.fmap.window_index(1, 7), 7), 0.0);
        assert_eq!(m.params.get(m.fmap.position_index(0).unwrap(), 10), 0.0);
        assert_eq!(m.params.get(m.fmap.position_index(3).unwrap(), 10), 2.5);
        let big = ModelConfig::capable().build(&env).unwrap();
        assert_eq!(big.params.get(big.fmap.scratch_index(4).unwrap(), 4), 1.0);
        assert_eq!(big.fmap.dim(), 4 * 16 + 10 + 8);
    }
}
