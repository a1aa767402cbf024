//! Checkpoints: a JSON envelope whose floats are stored as IEEE-754 bit
//! patterns in hex, guarded by a SHA-256 checksum of the body.
//!
//! ```text
//! {"format_version":1,
//!  "body":{"config_digest":"..","step":50,
//!          "rng":{"algorithm":"chacha8-splitmix64","version":1,"seed":0,"next_step":51},
//!          "capable":{"rows":..,"cols":..,"max_gen_len":..,"weights":["3ff0000000000000",..]},
//!          "light":null | {..},
//!          "lambda":{"lambda":"..","eta":"..","budget":"..","history":[{"step":1,"lambda":"..","mean_length":".."}]}},
//!  "checksum":"<sha256 of the body's compact JSON>"}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::hex;
use crate::policy::PolicyParams;
use crate::rng::{RNG_ALGORITHM, RNG_VERSION};
use crate::trainer::{LambdaPoint, LambdaState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("config drift: checkpoint was written for config {expected}, current config is {actual}")]
    ConfigDrift { expected: String, actual: String },
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Position in the seeded stream family. Streams are keyed by step, so the
/// seed and the next step number determine every later draw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub version: u32,
    pub seed: u64,
    pub next_step: usize,
}

impl RngState {
    pub fn at(seed: u64, next_step: usize) -> Self {
        Self { algorithm: RNG_ALGORITHM.into(), version: RNG_VERSION, seed, next_step }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    pub step: usize,
    pub capable: PolicyParams,
    pub light: Option<PolicyParams>,
    pub lambda: LambdaState,
    pub rng: RngState,
}

fn f2h(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn h2f(s: &str) -> Result<f64, CheckpointError> {
    if s.len() != 16 {
        return Err(CheckpointError::Integrity(format!("bad float encoding {s:?}")));
    }
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| CheckpointError::Integrity(format!("bad float encoding {s:?}")))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsDoc {
    rows: usize,
    cols: usize,
    max_gen_len: usize,
    weights: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointDoc {
    step: usize,
    lambda: String,
    mean_length: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LambdaDoc {
    lambda: String,
    eta: String,
    budget: String,
    history: Vec<PointDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Body {
    config_digest: String,
    step: usize,
    rng: RngState,
    capable: ParamsDoc,
    light: Option<ParamsDoc>,
    lambda: LambdaDoc,
}

#[derive(Deserialize)]
struct Version {
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format_version: u32,
    body: Body,
    checksum: String,
}

impl ParamsDoc {
    fn encode(p: &PolicyParams) -> Self {
        Self {
            rows: p.rows(),
            cols: p.cols(),
            max_gen_len: p.max_gen_len(),
            weights: p.weights().iter().map(|&w| f2h(w)).collect(),
        }
    }

    fn decode(&self) -> Result<PolicyParams, CheckpointError> {
        let weights = self.weights.iter().map(|s| h2f(s)).collect::<Result<Vec<_>, _>>()?;
        PolicyParams::from_weights(weights, self.rows, self.cols, self.max_gen_len)
            .map_err(|e| CheckpointError::Integrity(e.to_string()))
    }
}

fn body_checksum(body: &Body) -> String {
    hex(&Sha256::digest(serde_json::to_vec(body).expect("checkpoint body serializes")))
}

impl Checkpoint {
    fn to_body(&self) -> Body {
        Body {
            config_digest: self.config_digest.clone(),
            step: self.step,
            rng: self.rng.clone(),
            capable: ParamsDoc::encode(&self.capable),
            light: self.light.as_ref().map(ParamsDoc::encode),
            lambda: LambdaDoc {
                lambda: f2h(self.lambda.lambda),
                eta: f2h(self.lambda.eta),
                budget: f2h(self.lambda.budget),
                history: self
                    .lambda
                    .history
                    .iter()
                    .map(|p| PointDoc { step: p.step, lambda: f2h(p.lambda), mean_length: f2h(p.mean_length) })
                    .collect(),
            },
        }
    }

    fn from_body(body: Body) -> Result<Self, CheckpointError> {
        let l = &body.lambda;
        let history = l
            .history
            .iter()
            .map(|p| Ok(LambdaPoint { step: p.step, lambda: h2f(&p.lambda)?, mean_length: h2f(&p.mean_length)? }))
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        Ok(Self {
            config_digest: body.config_digest.clone(),
            step: body.step,
            capable: body.capable.decode()?,
            light: body.light.as_ref().map(ParamsDoc::decode).transpose()?,
            lambda: LambdaState { lambda: h2f(&l.lambda)?, eta: h2f(&l.eta)?, budget: h2f(&l.budget)?, history },
            rng: body.rng,
        })
    }

    pub fn to_json(&self) -> String {
        let body = self.to_body();
        let checksum = body_checksum(&body);
        let env = Envelope { format_version: FORMAT_VERSION, body, checksum };
        serde_json::to_string(&env).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let version: Version = serde_json::from_str(text)
            .map_err(|e| CheckpointError::Integrity(format!("unreadable envelope: {e}")))?;
        if version.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Incompatible(format!(
                "format version {} (this build reads {FORMAT_VERSION})",
                version.format_version
            )));
        }
        let env: Envelope =
            serde_json::from_str(text).map_err(|e| CheckpointError::Integrity(format!("malformed body: {e}")))?;
        if body_checksum(&env.body) != env.checksum {
            return Err(CheckpointError::Integrity("checksum mismatch".into()));
        }
        if env.body.rng.algorithm != RNG_ALGORITHM || env.body.rng.version != RNG_VERSION {
            return Err(CheckpointError::Incompatible(format!(
                "rng {} v{} (this build uses {RNG_ALGORITHM} v{RNG_VERSION})",
                env.body.rng.algorithm, env.body.rng.version
            )));
        }
        Self::from_body(env.body)
    }

    /// Fails with a drift error unless the checkpoint was written for a
    /// configuration with this digest.
    pub fn check_digest(&self, digest: &str) -> Result<(), CheckpointError> {
        if self.config_digest != digest {
            return Err(CheckpointError::ConfigDrift { expected: self.config_digest.clone(), actual: digest.into() });
        }
        Ok(())
    }
}

/// Writes through a temporary file so a crash never leaves a partial
/// checkpoint under the final name.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, ckpt.to_json())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let weights = vec![0.1, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0, 1e300, -2.5];
        let capable = PolicyParams::from_weights(weights, 2, 3, 7).unwrap();
        let light = PolicyParams::from_weights(vec![0.7; 4], 2, 2, 3).unwrap();
        let lambda = crate::trainer::lambda_update(&LambdaState::new(0.1, 0.05, 8.0).unwrap(), 9.123456789);
        Checkpoint {
            config_digest: "abc".into(),
            step: 12,
            capable,
            light: Some(light),
            lambda,
            rng: RngState::at(42, 13),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.capable.weights().iter().zip(c.capable.weights()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn damaged_files_are_rejected() {
        let text = sample().to_json();
        let cut = &text[..text.len() / 2];
        assert!(matches!(Checkpoint::from_json(cut), Err(CheckpointError::Integrity(_))));
        let tampered = text.replacen("\"step\":12", "\"step\":13", 1);
        assert!(matches!(Checkpoint::from_json(&tampered), Err(CheckpointError::Integrity(_))));
        let future = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(matches!(Checkpoint::from_json(&future), Err(CheckpointError::Incompatible(_))));
    }

    #[test]
    fn digest_mismatch_is_drift() {
        let c = sample();
        assert!(c.check_digest("abc").is_ok());
        assert!(matches!(c.check_digest("abd"), Err(CheckpointError::ConfigDrift { .. })));
    }
}
