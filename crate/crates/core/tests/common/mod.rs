//! Oracles shared by the integration tests. Nothing here calls the code it
//! checks except to read policy weights.

#![allow(dead_code)]

use duet_core::envs::Token;
use duet_core::policy::{FeatureMap, GenerationContext, Policy, PolicyParams};
use rand::Rng;

pub const EOS: Token = 10;

/// Success probability of the channel, written out directly.
pub fn channel_p(p0: f64, p_max: f64, tau: f64, len: usize) -> f64 {
    p0 + (p_max - p0) * (1.0 - (-(len as f64) / tau).exp())
}

/// A policy with random architecture and weights in `[-scale, scale]`.
pub fn random_policy<R: Rng>(rng: &mut R, vocab: usize, scale: f64) -> Policy {
    let window = rng.gen_range(0..=3);
    let scratch = rng.gen_bool(0.5).then(|| rng.gen_range(1..=4));
    let buckets = rng.gen_range(1..=4);
    let fmap = FeatureMap::new(vocab, window, scratch, buckets).unwrap();
    let n = fmap.dim() * vocab;
    let weights = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    let params = PolicyParams::from_weights(weights, fmap.dim(), vocab, 8).unwrap();
    Policy::new(fmap, params).unwrap()
}

pub fn random_context<R: Rng>(rng: &mut R, policy: &Policy) -> GenerationContext {
    let v = policy.fmap.vocab_size();
    let tokens = |rng: &mut R, n: usize| duet_core::envs::TokenSeq::new((0..n).map(|_| rng.gen_range(0..v)).collect());
    let prompt_len = rng.gen_range(0..5);
    let cond_len = rng.gen_range(0..3);
    GenerationContext {
        prompt: tokens(rng, prompt_len),
        conditioning: tokens(rng, cond_len),
        generated: duet_core::envs::TokenSeq::empty(),
        scratch_view: policy.fmap.uses_scratch().then(|| rng.gen_range(0..4)),
    }
}

/// Log-probability of `seq` computed from the raw weights: for each step,
/// sum the active rows, log-softmax, pick the emitted token.
pub fn reference_logprob(policy: &Policy, ctx: &GenerationContext, seq: &[Token], eos: Token, w: &[f64]) -> f64 {
    let fm = &policy.fmap;
    let v = fm.vocab_size();
    let mut history: Vec<Token> = ctx.prompt.tokens().iter().chain(ctx.conditioning.tokens()).copied().collect();
    history.extend_from_slice(ctx.generated.tokens());
    let mut total = 0.0;
    for (i, &tok) in seq.iter().enumerate() {
        let mut rows = Vec::new();
        for (slot, &t) in history.iter().rev().take(fm.window()).enumerate() {
            rows.push(slot * v + t);
        }
        if let Some(s) = ctx.scratch_view {
            if let Some(r) = fm.scratch_index(s) {
                rows.push(r);
            }
        }
        if let Some(r) = fm.position_index(ctx.generated.len() + i) {
            rows.push(r);
        }
        let logits: Vec<f64> = (0..v).map(|k| rows.iter().map(|r| w[r * v + k]).sum()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += logits[tok] - lse;
        history.push(tok);
        if tok == eos {
            break;
        }
    }
    total
}

/// Largest norm-relative error between `analytic` and central differences
/// of `reference_logprob`.
pub fn fd_relative_error(policy: &Policy, ctx: &GenerationContext, seq: &[Token], eos: Token, analytic: &[f64]) -> f64 {
    let h = 1e-5;
    let mut w = policy.params.weights().to_vec();
    let mut diff2 = 0.0;
    let mut norm2 = 0.0;
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + h;
        let up = reference_logprob(policy, ctx, seq, eos, &w);
        w[i] = orig - h;
        let down = reference_logprob(policy, ctx, seq, eos, &w);
        w[i] = orig;
        let fd = (up - down) / (2.0 * h);
        diff2 += (fd - analytic[i]).powi(2);
        norm2 += fd.powi(2).max(analytic[i].powi(2));
    }
    if norm2 == 0.0 {
        diff2.sqrt()
    } else {
        (diff2 / norm2).sqrt()
    }
}

/// Exact length law of a length-only policy (one weight row per position,
/// no other features) capped at `max_len` tokens.
pub struct LengthLaw {
    /// `probs[t][k]`: token distribution at position `t`.
    pub probs: Vec<Vec<f64>>,
    /// `mass[l]`: probability that the signal has `l` non-`eos` tokens.
    pub mass: Vec<f64>,
}

pub fn length_law(weights: &[f64], vocab: usize, max_len: usize, eos: Token) -> LengthLaw {
    let probs: Vec<Vec<f64>> = (0..max_len)
        .map(|t| {
            let row = &weights[t * vocab..(t + 1) * vocab];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect();
    let mut mass = vec![0.0; max_len + 1];
    let mut survive = 1.0;
    for t in 0..max_len {
        mass[t] = survive * probs[t][eos];
        survive *= 1.0 - probs[t][eos];
    }
    mass[max_len] = survive;
    LengthLaw { probs, mass }
}

/// `Σ_ℓ P(ℓ) f(ℓ)` and its exact gradient with respect to the position
/// rows, as a flat `rows × vocab` vector.
pub fn length_objective_grad(
    weights: &[f64],
    rows: usize,
    vocab: usize,
    max_len: usize,
    eos: Token,
    f: impl Fn(usize) -> f64,
) -> (f64, Vec<f64>) {
    let law = length_law(weights, vocab, max_len, eos);
    let mut grad = vec![0.0; rows * vocab];
    let mut value = 0.0;
    for l in 0..=max_len {
        let w = law.mass[l] * f(l);
        value += w;
        if w == 0.0 {
            continue;
        }
        // ∇ log P(ℓ): continue at every t < ℓ, stop at ℓ (unless capped).
        for t in 0..l.min(max_len) {
            let pi = &law.probs[t];
            let cont = 1.0 - pi[eos];
            for k in 0..vocab {
                let d = if k == eos { 0.0 } else { pi[k] / cont } - pi[k];
                grad[t * vocab + k] += w * d;
            }
        }
        if l < max_len {
            let pi = &law.probs[l];
            for k in 0..vocab {
                let d = if k == eos { 1.0 } else { 0.0 } - pi[k];
                grad[l * vocab + k] += w * d;
            }
        }
    }
    (value, grad)
}
