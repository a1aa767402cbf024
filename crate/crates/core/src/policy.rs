//! Linear-softmax autoregressive sequence policies.
//!
//! A policy scores the next token as `softmax(Wᵀ φ(ctx) / T)` where `φ` is a
//! sparse one-hot feature vector built from the most recent context tokens,
//! an optional privileged scratch value and a generation-position bucket.
//! Everything here is exact: log-probabilities, score-function gradients and
//! categorical KL divergences are computed in closed form.

use rand::Rng;
use thiserror::Error;

use crate::envs::{Token, TokenSeq, Vocab};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("invalid feature map: {0}")]
    InvalidFeatureMap(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("temperature must be >= 0, got {0}")]
    Temperature(f64),
}

/// Feature layout: `window · V` one-hot slots (slot 0 is the most recent
/// token), then `scratch_base` scratch slots when enabled, then
/// `position_buckets` generation-position slots.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureMap {
    vocab_size: usize,
    window: usize,
    scratch_base: Option<usize>,
    position_buckets: usize,
}

impl FeatureMap {
    /// `scratch_base` is `Some(p)` to append the running-fold value as a
    /// one-hot over `p`. A zero window is accepted for length-only policies.
    pub fn new(
        vocab_size: usize,
        window: usize,
        scratch_base: Option<usize>,
        position_buckets: usize,
    ) -> Result<Self, PolicyError> {
        if vocab_size < 2 {
            return Err(PolicyError::InvalidFeatureMap("vocabulary needs at least 2 tokens".into()));
        }
        if scratch_base == Some(0) {
            return Err(PolicyError::InvalidFeatureMap("scratch base must be positive".into()));
        }
        let fm = Self { vocab_size, window, scratch_base, position_buckets };
        if fm.dim() == 0 {
            return Err(PolicyError::InvalidFeatureMap("feature dimension is zero".into()));
        }
        Ok(fm)
    }

    pub fn dim(&self) -> usize {
        self.window * self.vocab_size + self.scratch_base.unwrap_or(0) + self.position_buckets
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
    pub fn window(&self) -> usize {
        self.window
    }
    pub fn uses_scratch(&self) -> bool {
        self.scratch_base.is_some()
    }
    pub fn position_buckets(&self) -> usize {
        self.position_buckets
    }

    /// Index of the one-hot for `token` in window slot `slot`.
    pub fn window_index(&self, slot: usize, token: Token) -> usize {
        slot * self.vocab_size + token
    }

    pub fn scratch_index(&self, value: usize) -> Option<usize> {
        self.scratch_base
            .filter(|&b| value < b)
            .map(|_| self.window * self.vocab_size + value)
    }

    pub fn position_index(&self, position: usize) -> Option<usize> {
        (self.position_buckets > 0).then(|| {
            self.window * self.vocab_size
                + self.scratch_base.unwrap_or(0)
                + position.min(self.position_buckets - 1)
        })
    }

    /// Active feature indices for a history whose last `position` tokens
    /// were generated by the policy.
    pub fn active(&self, history: &[Token], position: usize, scratch: Option<usize>, out: &mut Vec<usize>) {
        out.clear();
        for (slot, &tok) in history.iter().rev().take(self.window).enumerate() {
            out.push(self.window_index(slot, tok));
        }
        if let Some(i) = scratch.and_then(|s| self.scratch_index(s)) {
            out.push(i);
        }
        if let Some(i) = self.position_index(position) {
            out.push(i);
        }
    }
}

/// Weight matrix (`feature_dim × vocab`, row-major) and generation cap.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    weights: Vec<f64>,
    rows: usize,
    cols: usize,
    max_gen_len: usize,
}

impl PolicyParams {
    pub fn zeros(fmap: &FeatureMap, max_gen_len: usize) -> Result<Self, PolicyError> {
        Self::from_weights(vec![0.0; fmap.dim() * fmap.vocab_size()], fmap.dim(), fmap.vocab_size(), max_gen_len)
    }

    pub fn from_weights(weights: Vec<f64>, rows: usize, cols: usize, max_gen_len: usize) -> Result<Self, PolicyError> {
        if weights.len() != rows * cols {
            return Err(PolicyError::InvalidParams(format!(
                "{} weights for a {rows}x{cols} matrix",
                weights.len()
            )));
        }
        if max_gen_len == 0 {
            return Err(PolicyError::InvalidParams("max_gen_len must be >= 1".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(PolicyError::NonFinite("weights"));
        }
        Ok(Self { weights, rows, cols, max_gen_len })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn max_gen_len(&self) -> usize {
        self.max_gen_len
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.weights[row * self.cols + col] = value;
    }

    /// `self + scale · delta`, rejecting non-finite results.
    pub fn stepped(&self, delta: &[f64], scale: f64) -> Result<Self, PolicyError> {
        if delta.len() != self.weights.len() {
            return Err(PolicyError::InvalidParams("gradient shape mismatch".into()));
        }
        let weights: Vec<f64> = self.weights.iter().zip(delta).map(|(w, d)| w + scale * d).collect();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(PolicyError::NonFinite("updated weights"));
        }
        Ok(Self { weights, ..self.clone() })
    }

    fn check_fmap(&self, fmap: &FeatureMap) {
        debug_assert_eq!(self.rows, fmap.dim(), "feature map does not match parameters");
        debug_assert_eq!(self.cols, fmap.vocab_size());
    }
}

/// What a policy conditions on while generating.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationContext {
    pub prompt: TokenSeq,
    /// Extra tokens placed between the prompt and the generation.
    pub conditioning: TokenSeq,
    pub generated: TokenSeq,
    pub scratch_view: Option<usize>,
}

impl GenerationContext {
    /// Capable model emitting a reasoning signal from the prompt.
    pub fn signal(prompt: &TokenSeq, scratch: Option<usize>) -> Self {
        Self {
            prompt: prompt.clone(),
            conditioning: TokenSeq::empty(),
            generated: TokenSeq::empty(),
            scratch_view: scratch,
        }
    }

    /// Lightweight model answering from `prompt ⧺ sep ⧺ z`. An empty `z`
    /// gives the standalone baseline.
    pub fn response(prompt: &TokenSeq, signal: &TokenSeq, vocab: &Vocab) -> Self {
        let mut cond = vec![vocab.sep()];
        cond.extend_from_slice(signal.content(vocab.eos()));
        Self {
            prompt: prompt.clone(),
            conditioning: TokenSeq::new(cond),
            generated: TokenSeq::empty(),
            scratch_view: None,
        }
    }

    /// Capable model answering its own (possibly truncated) reasoning:
    /// `prompt ⧺ sep ⧺ z ⧺ ans`.
    pub fn answer(prompt: &TokenSeq, signal: &TokenSeq, vocab: &Vocab, scratch: Option<usize>) -> Self {
        let mut cond = vec![vocab.sep()];
        cond.extend_from_slice(signal.content(vocab.eos()));
        cond.push(vocab.ans_marker());
        Self {
            prompt: prompt.clone(),
            conditioning: TokenSeq::new(cond),
            generated: TokenSeq::empty(),
            scratch_view: scratch,
        }
    }

    fn history(&self) -> Vec<Token> {
        let mut h = Vec::with_capacity(self.prompt.len() + self.conditioning.len() + self.generated.len() + 8);
        h.extend_from_slice(self.prompt.tokens());
        h.extend_from_slice(self.conditioning.tokens());
        h.extend_from_slice(self.generated.tokens());
        h
    }
}

/// Numerically stable softmax of `logits / temperature`. Zero temperature
/// is a point mass on the first maximal logit.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>, PolicyError> {
    if !(temperature >= 0.0) {
        return Err(PolicyError::Temperature(temperature));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(PolicyError::NonFinite("logits"));
    }
    if temperature == 0.0 {
        let best = argmax(logits);
        let mut p = vec![0.0; logits.len()];
        p[best] = 1.0;
        return Ok(p);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// Log-softmax at temperature 1.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// First index of the maximum; ties go to the lowest token id.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// A feature map together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub fmap: FeatureMap,
    pub params: PolicyParams,
}

impl Policy {
    pub fn new(fmap: FeatureMap, params: PolicyParams) -> Result<Self, PolicyError> {
        if params.rows != fmap.dim() || params.cols != fmap.vocab_size() {
            return Err(PolicyError::InvalidParams(format!(
                "parameters are {}x{}, feature map needs {}x{}",
                params.rows,
                params.cols,
                fmap.dim(),
                fmap.vocab_size()
            )));
        }
        Ok(Self { fmap, params })
    }

    pub fn zeros(fmap: FeatureMap, max_gen_len: usize) -> Result<Self, PolicyError> {
        let params = PolicyParams::zeros(&fmap, max_gen_len)?;
        Ok(Self { fmap, params })
    }

    pub fn with_params(&self, params: PolicyParams) -> Self {
        Self { fmap: self.fmap.clone(), params }
    }

    fn logits_into(params: &PolicyParams, active: &[usize], out: &mut Vec<f64>) {
        out.clear();
        out.resize(params.cols, 0.0);
        for &f in active {
            let row = &params.weights[f * params.cols..(f + 1) * params.cols];
            out.iter_mut().zip(row).for_each(|(o, w)| *o += w);
        }
    }

    /// Next-token distribution at the context's current position.
    pub fn next_token_dist(&self, ctx: &GenerationContext, temperature: f64) -> Result<Vec<f64>, PolicyError> {
        self.params.check_fmap(&self.fmap);
        let mut active = Vec::new();
        self.fmap.active(&ctx.history(), ctx.generated.len(), ctx.scratch_view, &mut active);
        let mut logits = Vec::new();
        Self::logits_into(&self.params, &active, &mut logits);
        softmax(&logits, temperature)
    }

    /// Draws tokens until `eos` or `max_len` tokens. Returns the sequence and
    /// the log-probability of each drawn token under the sampling
    /// distribution.
    pub fn sample_sequence<R: Rng + ?Sized>(
        &self,
        ctx: &GenerationContext,
        temperature: f64,
        rng: &mut R,
        max_len: usize,
        eos: Token,
    ) -> Result<(TokenSeq, Vec<f64>), PolicyError> {
        let mut history = ctx.history();
        let start = history.len();
        let mut active = Vec::new();
        let mut logits = Vec::new();
        let mut logprobs = Vec::new();
        for pos in ctx.generated.len()..ctx.generated.len() + max_len {
            self.fmap.active(&history, pos, ctx.scratch_view, &mut active);
            Self::logits_into(&self.params, &active, &mut logits);
            let probs = softmax(&logits, temperature)?;
            let tok = if temperature == 0.0 { argmax(&probs) } else { draw(&probs, rng) };
            logprobs.push(probs[tok].ln());
            history.push(tok);
            if tok == eos {
                break;
            }
        }
        Ok((TokenSeq::new(history.split_off(start)), logprobs))
    }

    /// Visits each generation step of `seq` (up to and including the first
    /// `eos`) with the active features and the emitted token.
    fn for_each_step<F>(&self, ctx: &GenerationContext, seq: &TokenSeq, eos: Token, mut f: F) -> Result<(), PolicyError>
    where
        F: FnMut(&[usize], &[f64], Token) -> Result<(), PolicyError>,
    {
        let mut history = ctx.history();
        let mut active = Vec::new();
        let mut logits = Vec::new();
        for (i, &tok) in seq.tokens().iter().enumerate() {
            self.fmap.active(&history, ctx.generated.len() + i, ctx.scratch_view, &mut active);
            Self::logits_into(&self.params, &active, &mut logits);
            if logits.iter().any(|l| !l.is_finite()) {
                return Err(PolicyError::NonFinite("logits"));
            }
            f(&active, &logits, tok)?;
            history.push(tok);
            if tok == eos {
                break;
            }
        }
        Ok(())
    }

    /// Sum of per-step log-probabilities of `seq`; tokens after the first
    /// `eos` are not counted.
    pub fn sequence_logprob(
        &self,
        ctx: &GenerationContext,
        seq: &TokenSeq,
        temperature: f64,
        eos: Token,
    ) -> Result<f64, PolicyError> {
        let mut total = 0.0;
        self.for_each_step(ctx, seq, eos, |_, logits, tok| {
            if temperature == 1.0 {
                total += log_softmax(logits)[tok];
            } else {
                total += softmax(logits, temperature)?[tok].ln();
            }
            Ok(())
        })?;
        Ok(total)
    }

    /// Adds `scale · ∇_W log π(seq | ctx)` (temperature 1) into `grad`.
    pub fn accumulate_score(
        &self,
        ctx: &GenerationContext,
        seq: &TokenSeq,
        eos: Token,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<(), PolicyError> {
        let cols = self.params.cols;
        self.for_each_step(ctx, seq, eos, |active, logits, tok| {
            let probs = softmax(logits, 1.0)?;
            for &f in active {
                let row = &mut grad[f * cols..(f + 1) * cols];
                for (k, g) in row.iter_mut().enumerate() {
                    let onehot = if k == tok { 1.0 } else { 0.0 };
                    *g += scale * (onehot - probs[k]);
                }
            }
            Ok(())
        })
    }

    /// Score function `∑_t φ(ctx_t) ⊗ (onehot(token_t) − π(·|ctx_t))`.
    pub fn grad_logprob(&self, ctx: &GenerationContext, seq: &TokenSeq, eos: Token) -> Result<Vec<f64>, PolicyError> {
        let mut grad = vec![0.0; self.params.weights.len()];
        self.accumulate_score(ctx, seq, eos, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Exact `KL(π_self(·|ctx) ‖ π_ref(·|ctx))` at one context.
    pub fn kl_exact(&self, reference: &PolicyParams, ctx: &GenerationContext) -> Result<f64, PolicyError> {
        let mut active = Vec::new();
        self.fmap.active(&ctx.history(), ctx.generated.len(), ctx.scratch_view, &mut active);
        kl_at(&self.params, reference, &active)
    }

    /// Every context visited while generating `seq` from `ctx`.
    pub fn visited_contexts(&self, ctx: &GenerationContext, seq: &TokenSeq, eos: Token) -> Vec<GenerationContext> {
        let mut out = Vec::new();
        let mut cur = ctx.clone();
        let mut generated = ctx.generated.tokens().to_vec();
        for &tok in seq.tokens() {
            out.push(cur.clone());
            if tok == eos {
                break;
            }
            generated.push(tok);
            cur.generated = TokenSeq::new(generated.clone());
        }
        out
    }

    /// Sum over visited contexts of KL to `reference`, and the number of
    /// contexts. Adds `scale · ∇_W KL` per context into `grad` when given.
    pub fn accumulate_kl(
        &self,
        reference: &PolicyParams,
        ctx: &GenerationContext,
        seq: &TokenSeq,
        eos: Token,
        scale: f64,
        mut grad: Option<&mut [f64]>,
    ) -> Result<(f64, usize), PolicyError> {
        let cols = self.params.cols;
        let mut total = 0.0;
        let mut count = 0;
        let mut ref_logits = Vec::new();
        self.for_each_step(ctx, seq, eos, |active, logits, _| {
            Self::logits_into(reference, active, &mut ref_logits);
            let lp = log_softmax(logits);
            let lq = log_softmax(&ref_logits);
            let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
            total += kl;
            count += 1;
            if let Some(g) = grad.as_deref_mut() {
                // ∂KL/∂logit_k = π_k (log π_k − log ρ_k − KL)
                let dk: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b - kl)).collect();
                for &f in active {
                    let row = &mut g[f * cols..(f + 1) * cols];
                    row.iter_mut().zip(&dk).for_each(|(x, d)| *x += scale * d);
                }
            }
            Ok(())
        })?;
        Ok((total, count))
    }
}

/// The capable policy and, when the environment has one, the lightweight
/// policy. Channel environments replace the lightweight model analytically.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPair {
    pub capable: Policy,
    pub light: Option<Policy>,
}

fn kl_at(params: &PolicyParams, reference: &PolicyParams, active: &[usize]) -> Result<f64, PolicyError> {
    let mut lp = Vec::new();
    let mut lq = Vec::new();
    Policy::logits_into(params, active, &mut lp);
    Policy::logits_into(reference, active, &mut lq);
    if lp.iter().chain(&lq).any(|l| !l.is_finite()) {
        return Err(PolicyError::NonFinite("logits"));
    }
    let lp = log_softmax(&lp);
    let lq = log_softmax(&lq);
    Ok(kl_log(&lp, &lq))
}

/// Categorical KL from log-probabilities. Returns `+∞` when the reference
/// has zero mass where the policy does not.
pub fn kl_log(log_p: &[f64], log_q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&a, &b) in log_p.iter().zip(log_q) {
        let p = a.exp();
        if p == 0.0 {
            continue;
        }
        if b == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        kl += p * (a - b);
    }
    kl.max(0.0)
}

/// Categorical KL from probabilities, with the same zero-mass convention.
pub fn kl_probs(p: &[f64], q: &[f64]) -> f64 {
    let lp: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    let lq: Vec<f64> = q.iter().map(|x| x.ln()).collect();
    kl_log(&lp, &lq)
}

/// Inverse-CDF draw.
fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the last cumulative sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EOS: Token = 10;

    fn vocab() -> Vocab {
        Vocab::desk(10).unwrap()
    }

    fn random_policy(seed: u64, window: usize, scratch: bool, buckets: usize) -> Policy {
        let fmap = FeatureMap::new(16, window, scratch.then_some(10), buckets).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..fmap.dim() * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params = PolicyParams::from_weights(w, fmap.dim(), 16, 12).unwrap();
        Policy::new(fmap, params).unwrap()
    }

    #[test]
    fn feature_dimension_formula() {
        let f = FeatureMap::new(16, 4, Some(10), 8).unwrap();
        assert_eq!(f.dim(), 4 * 16 + 10 + 8);
        let f = FeatureMap::new(16, 2, None, 0).unwrap();
        assert_eq!(f.dim(), 32);
        assert!(FeatureMap::new(16, 0, None, 0).is_err());
    }

    #[test]
    fn active_features_follow_recency() {
        let f = FeatureMap::new(16, 2, Some(10), 3).unwrap();
        let mut out = Vec::new();
        f.active(&[1, 2, 3], 5, Some(7), &mut out);
        assert_eq!(out, vec![3, 16 + 2, 32 + 7, 42 + 2]);
        f.active(&[4], 0, None, &mut out);
        assert_eq!(out, vec![4, 42]);
    }

    #[test]
    fn zero_weights_give_uniform() {
        let fmap = FeatureMap::new(8, 1, None, 0).unwrap();
        let p = Policy::zeros(fmap, 4).unwrap();
        let ctx = GenerationContext::signal(&TokenSeq::new(vec![1]), None);
        let d = p.next_token_dist(&ctx, 1.0).unwrap();
        assert!(d.iter().all(|&x| (x - 0.125).abs() < 1e-15));
    }

    #[test]
    fn single_raised_logit() {
        let d = softmax(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1.0).unwrap();
        let e = 1f64.exp();
        assert!((d[0] - e / (e + 7.0)).abs() < 1e-15);
        assert!((d[0] - 0.2797).abs() < 1e-4);
    }

    #[test]
    fn zero_temperature_is_point_mass_with_low_id_ties() {
        assert_eq!(softmax(&[0.0, 2.0, 2.0, 1.0], 0.0).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(argmax(&[3.0, 3.0]), 0);
        assert!(softmax(&[0.0, 1.0], -1.0).is_err());
        assert_eq!(softmax(&[f64::NAN, 1.0], 1.0), Err(PolicyError::NonFinite("logits")));
    }

    #[test]
    fn distributions_normalize() {
        let p = random_policy(1, 4, true, 6);
        let ctx = GenerationContext::signal(&TokenSeq::new(vec![1, 13, 4]), Some(5));
        for t in [0.1, 0.5, 1.0, 3.0] {
            let s: f64 = p.next_token_dist(&ctx, t).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_sample_logprob() {
        let fmap = FeatureMap::new(8, 1, None, 0).unwrap();
        let p = Policy::zeros(fmap, 4).unwrap();
        let ctx = GenerationContext::signal(&TokenSeq::new(vec![1]), None);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (seq, lps) = p.sample_sequence(&ctx, 1.0, &mut rng, 4, 7).unwrap();
        assert!((lps[0] - (1.0f64 / 8.0).ln()).abs() < 1e-12);
        assert!((lps[0] + 2.0794).abs() < 1e-4);
        assert!(seq.len() <= 4);
        let three = TokenSeq::new(vec![1, 2, 3]);
        let lp = p.sequence_logprob(&ctx, &three, 1.0, 7).unwrap();
        assert!((lp - 3.0 * (1.0f64 / 8.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy_sampling_is_repeated_argmax() {
        let p = random_policy(3, 3, true, 4);
        let ctx = GenerationContext::signal(&TokenSeq::new(vec![2, 13, 5]), Some(7));
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let (a, la) = p.sample_sequence(&ctx, 0.0, &mut r1, 12, EOS).unwrap();
        let (b, _) = p.sample_sequence(&ctx, 0.0, &mut r2, 12, EOS).unwrap();
        assert_eq!(a, b);
        assert!(la.iter().all(|&l| l == 0.0));
        let mut step = ctx.clone();
        let mut gen = Vec::new();
        for &tok in a.tokens() {
            let d = p.next_token_dist(&step, 1.0).unwrap();
            assert_eq!(tok, argmax(&d));
            gen.push(tok);
            step.generated = TokenSeq::new(gen.clone());
        }
    }

    #[test]
    fn sampled_logprobs_match_sequence_logprob() {
        let p = random_policy(4, 2, false, 3);
        let v = vocab();
        let ctx = GenerationContext::response(&TokenSeq::new(vec![3, 13, 1]), &TokenSeq::new(vec![4, 10]), &v);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            for t in [1.0, 0.7] {
                let (seq, lps) = p.sample_sequence(&ctx, t, &mut rng, 12, EOS).unwrap();
                assert!(lps.iter().all(|l| *l <= 0.0 && l.is_finite()));
                let total: f64 = lps.iter().sum();
                assert!((total - p.sequence_logprob(&ctx, &seq, t, EOS).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logprob_stops_at_eos() {
        let p = random_policy(5, 2, false, 2);
        let ctx = GenerationContext::signal(&TokenSeq::new(vec![1]), None);
        let a = p.sequence_logprob(&ctx, &TokenSeq::new(vec![3, EOS]), 1.0, EOS).unwrap();
        let b = p.sequence_logprob(&ctx, &TokenSeq::new(vec![3, EOS, 4, 5]), 1.0, EOS).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.sequence_logprob(&ctx, &TokenSeq::empty(), 1.0, EOS).unwrap(), 0.0);
    }

    #[test]
    fn score_of_single_token_under_uniform_vocab2() {
        let fmap = FeatureMap::new(2, 1, None, 0).unwrap();
        let p = Policy::zeros(fmap, 1).unwrap();
        let ctx = GenerationContext::signal(&TokenSeq::new(vec![1]), None);
        let g = p.grad_logprob(&ctx, &TokenSeq::new(vec![0]), 5).unwrap();
        // Only the feature "slot 0 = token 1" is active (row 1).
        assert_eq!(g, vec![0.0, 0.0, 0.5, -0.5]);
    }

    #[test]
    fn score_vanishes_at_certainty() {
        let fmap = FeatureMap::new(4, 1, None, 0).unwrap();
        let mut params = PolicyParams::zeros(&fmap, 3).unwrap();
        for row in 0..4 {
            params.set(row, 2, 60.0);
        }
        let p = Policy::new(fmap, params).unwrap();
        let ctx = GenerationContext::signal(&TokenSeq::new(vec![1]), None);
        let g = p.grad_logprob(&ctx, &TokenSeq::new(vec![2, 2, 2]), 3).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-20));
    }

    #[test]
    fn kl_properties() {
        let p = random_policy(6, 2, true, 2);
        let ctx = GenerationContext::signal(&TokenSeq::new(vec![1, 13, 2]), Some(3));
        assert_eq!(p.kl_exact(&p.params, &ctx).unwrap(), 0.0);
        let q = random_policy(7, 2, true, 2);
        assert!(p.kl_exact(&q.params, &ctx).unwrap() > 0.0);

        let uniform = [0.25; 4];
        let peaked = [0.97, 0.01, 0.01, 0.01];
        let kl = kl_probs(&uniform, &peaked);
        let want = 0.25 * ((0.25f64 / 0.97).ln() + 3.0 * (0.25f64 / 0.01).ln());
        assert!((kl - want).abs() < 1e-12 && kl.is_finite() && kl > 0.0);
        assert_eq!(kl_probs(&uniform, &[1.0, 0.0, 0.0, 0.0]), f64::INFINITY);
        assert_eq!(kl_probs(&[1.0, 0.0], &[0.5, 0.5]), 2f64.ln());
    }

    #[test]
    fn visited_contexts_count_eos_step() {
        let p = random_policy(8, 2, false, 2);
        let ctx = GenerationContext::signal(&TokenSeq::new(vec![1]), None);
        let seq = TokenSeq::new(vec![3, 4, EOS]);
        let v = p.visited_contexts(&ctx, &seq, EOS);
        assert_eq!(v.len(), 3);
        assert_eq!(v[2].generated.tokens(), &[3, 4]);
        let (_, n) = p.accumulate_kl(&p.params, &ctx, &seq, EOS, 0.0, None).unwrap();
        assert_eq!(n, 3);
    }
}
