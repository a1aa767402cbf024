use duet_core::envs::{ChainArithSpec, ChannelSpec, Environment, Op};
use duet_core::eval::{evaluate, CostModels, EvalMode};
use duet_core::policy::PolicyPair;
use duet_core::trainer::{init_pair, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env() -> Environment {
    Environment::chain(ChainArithSpec::new(4, 10, vec![Op::Add, Op::Mul]).unwrap()).unwrap()
}

fn tasks(env: &Environment, n: usize) -> Vec<duet_core::envs::TaskInstance> {
    env.sample_tasks(n, &mut ChaCha8Rng::seed_from_u64(17))
}

fn uniform_light() -> ModelConfig {
    ModelConfig { copy_bias: 0.0, stop_bias: 0.0, ..ModelConfig::light() }
}

/// A capable model that ends every signal immediately.
fn silent_pair(env: &Environment, light: &ModelConfig) -> PolicyPair {
    let mut pair = init_pair(env, &ModelConfig::capable(), light).unwrap();
    let row = pair.capable.fmap.position_index(0).unwrap();
    let eos = env.vocab().eos();
    pair.capable.params.set(row, eos, 50.0);
    pair
}

#[test]
fn small_alone_sits_at_chance() {
    // Add-only chains have uniform gold digits; multiplication skews them toward 0.
    let env = Environment::chain(ChainArithSpec::new(4, 10, vec![Op::Add]).unwrap()).unwrap();
    let ts = tasks(&env, 1000);
    let pair = init_pair(&env, &ModelConfig::capable(), &uniform_light()).unwrap();
    let rec = evaluate(&pair, &env, &ts, EvalMode::SmallAlone, &CostModels::default()).unwrap();
    assert!((rec.accuracy - 0.1).abs() <= 0.03, "accuracy {}", rec.accuracy);
    assert_eq!(rec.mean_len_capable, 0.0);
    assert_eq!(rec.flops_capable, 0.0);
}

#[test]
fn empty_signal_reduces_duet_to_small_alone() {
    let env = env();
    let ts = tasks(&env, 300);
    for light in [uniform_light(), ModelConfig::light()] {
        let pair = silent_pair(&env, &light);
        let costs = CostModels::default();
        let duet = evaluate(&pair, &env, &ts, EvalMode::Duet, &costs).unwrap();
        let alone = evaluate(&pair, &env, &ts, EvalMode::SmallAlone, &costs).unwrap();
        assert_eq!(duet.mean_len_capable, 0.0);
        assert_eq!(duet.accuracy, alone.accuracy);
        assert_eq!(duet.mean_len_light, alone.mean_len_light);
    }
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let env = env();
    let ts = tasks(&env, 200);
    let pair = init_pair(&env, &ModelConfig::capable(), &ModelConfig::light()).unwrap();
    for mode in [EvalMode::Duet, EvalMode::SmallAlone, EvalMode::LargeAlone, EvalMode::Truncation(3)] {
        let a = evaluate(&pair, &env, &ts, mode, &CostModels::default()).unwrap();
        let b = evaluate(&pair, &env, &ts, mode, &CostModels::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[test]
fn truncation_budget_extremes() {
    let env = env();
    let ts = tasks(&env, 200);
    let pair = init_pair(&env, &ModelConfig::capable(), &ModelConfig::light()).unwrap();
    let costs = CostModels::default();
    let cap = pair.capable.params.max_gen_len();
    let wide = evaluate(&pair, &env, &ts, EvalMode::Truncation(cap), &costs).unwrap();
    let wider = evaluate(&pair, &env, &ts, EvalMode::Truncation(10 * cap), &costs).unwrap();
    assert_eq!(wide.accuracy, wider.accuracy);
    assert_eq!(wide.mean_len_capable, wider.mean_len_capable);

    // Budget 0: only the one answer token is generated.
    let zero = evaluate(&pair, &env, &ts, EvalMode::Truncation(0), &costs).unwrap();
    assert_eq!(zero.mean_len_capable, 1.0);
    // The scratch prior answers the fold directly.
    assert_eq!(zero.accuracy, 1.0);
}

#[test]
fn empty_task_set_is_a_domain_error() {
    let env = env();
    let pair = init_pair(&env, &ModelConfig::capable(), &ModelConfig::light()).unwrap();
    assert!(evaluate(&pair, &env, &[], EvalMode::Duet, &CostModels::default()).is_err());
}

#[test]
fn channel_scores_are_success_probabilities() {
    let env = Environment::channel(ChannelSpec::new(0.2, 0.9, 8.0, 32, true).unwrap()).unwrap();
    let mut pair = init_pair(&env, &ModelConfig::length_only(32), &ModelConfig::light()).unwrap();
    let eos = env.vocab().eos();
    // Emit exactly 8 tokens: favour a digit before position 8, then stop.
    for t in 0..8 {
        let row = pair.capable.fmap.position_index(t).unwrap();
        pair.capable.params.set(row, 1, 30.0);
    }
    let row = pair.capable.fmap.position_index(8).unwrap();
    pair.capable.params.set(row, eos, 30.0);
    let ts = env.sample_tasks(3, &mut ChaCha8Rng::seed_from_u64(0));
    let rec = evaluate(&pair, &env, &ts, EvalMode::Duet, &CostModels::default()).unwrap();
    assert_eq!(rec.mean_len_capable, 8.0);
    let p8 = 0.2 + 0.7 * (1.0 - (-1.0f64).exp());
    assert!((rec.accuracy - p8).abs() < 1e-12);
}
