//! Analytic channel: the joint pipeline succeeds with a probability that
//! saturates exponentially in the signal length.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    p0: f64,
    p_max: f64,
    tau: f64,
    max_len: usize,
    expectation_mode: bool,
}

impl ChannelSpec {
    pub fn new(p0: f64, p_max: f64, tau: f64, max_len: usize, expectation_mode: bool) -> Result<Self, EnvError> {
        if !(0.0..=1.0).contains(&p0) || !(0.0..=1.0).contains(&p_max) || p0 > p_max {
            return Err(EnvError::InvalidSpec(format!(
                "need 0 <= p0 <= p_max <= 1, got p0={p0}, p_max={p_max}"
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(EnvError::InvalidSpec(format!("tau must be positive, got {tau}")));
        }
        if max_len == 0 {
            return Err(EnvError::InvalidSpec("max_len must be >= 1".into()));
        }
        Ok(Self { p0, p_max, tau, max_len, expectation_mode })
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }
    pub fn p_max(&self) -> f64 {
        self.p_max
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn max_len(&self) -> usize {
        self.max_len
    }
    pub fn expectation_mode(&self) -> bool {
        self.expectation_mode
    }

    /// `p(ℓ) = p_max − (p_max − p0)·exp(−ℓ/τ)`.
    pub fn success(&self, signal_len: usize) -> Result<f64, EnvError> {
        if signal_len > self.max_len {
            return Err(EnvError::Domain(format!(
                "signal length {signal_len} exceeds max_len {}",
                self.max_len
            )));
        }
        // Written as p0 + gap·(1 − e^{−ℓ/τ}) so ℓ = 0 returns p0 exactly.
        Ok(self.p0 - (self.p_max - self.p0) * (-(signal_len as f64) / self.tau).exp_m1())
    }

    /// Reward for one joint rollout: the probability itself in expectation
    /// mode, otherwise a Bernoulli draw.
    pub fn joint_reward<R: Rng + ?Sized>(&self, signal_len: usize, rng: &mut R) -> Result<f64, EnvError> {
        let p = self.success(signal_len)?;
        Ok(self.realize(p, rng))
    }

    /// Reward for the lightweight model answering without a signal.
    pub fn baseline_reward<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.realize(self.p0, rng)
    }

    fn realize<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> f64 {
        if self.expectation_mode {
            p
        } else if rng.gen::<f64>() < p {
            1.0
        } else {
            0.0
        }
    }
}

/// Free-function form of [`ChannelSpec::success`].
pub fn channel_success(spec: &ChannelSpec, signal_len: usize) -> Result<f64, EnvError> {
    spec.success(signal_len)
}
