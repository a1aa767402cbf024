//! Modular chain-arithmetic tasks: a start digit folded through `k`
//! `(operator, operand)` pairs modulo `p`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Op, TaskInstance, Token, TokenSeq, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainArithSpec {
    chain_length: usize,
    modulus: u32,
    ops: Vec<Op>,
}

impl ChainArithSpec {
    pub fn new(chain_length: usize, modulus: u32, mut ops: Vec<Op>) -> Result<Self, EnvError> {
        if chain_length == 0 {
            return Err(EnvError::InvalidSpec("chain_length must be >= 1".into()));
        }
        if !(2..=10).contains(&modulus) {
            return Err(EnvError::InvalidSpec(format!("modulus {modulus} outside 2..=10")));
        }
        ops.sort_by_key(|op| *op as u8);
        ops.dedup();
        if ops.is_empty() {
            return Err(EnvError::InvalidSpec("op_set must be non-empty".into()));
        }
        Ok(Self { chain_length, modulus, ops })
    }

    pub fn chain_length(&self) -> usize {
        self.chain_length
    }
    pub fn modulus(&self) -> u32 {
        self.modulus
    }
    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    /// Draws a random task.
    pub fn generate<R: Rng + ?Sized>(&self, vocab: &Vocab, rng: &mut R) -> TaskInstance {
        let start = rng.gen_range(0..self.modulus);
        let steps: Vec<(Op, u32)> = (0..self.chain_length)
            .map(|_| {
                let op = self.ops[rng.gen_range(0..self.ops.len())];
                (op, rng.gen_range(0..self.modulus))
            })
            .collect();
        self.from_draw(vocab, start, &steps)
    }

    /// Builds the task for a fixed draw. The fold is tracked alongside the
    /// prompt so `scratch` has one entry per prompt token.
    pub fn from_draw(&self, vocab: &Vocab, start: u32, steps: &[(Op, u32)]) -> TaskInstance {
        let p = self.modulus;
        let mut acc = start % p;
        let mut prompt = vec![acc as Token];
        let mut scratch = vec![acc];
        for &(op, operand) in steps {
            let operand = operand % p;
            prompt.push(vocab.op_token(op));
            scratch.push(acc);
            acc = op.apply(acc, operand, p);
            prompt.push(operand as Token);
            scratch.push(acc);
        }
        TaskInstance { prompt: TokenSeq::new(prompt), gold: acc as Token, scratch }
    }
}

/// Recomputes the answer from the rendered prompt text alone.
///
/// Works on the printed form (`"2 + 3 × 4"`) with signed arithmetic, so it
/// shares nothing with [`ChainArithSpec::from_draw`].
pub fn chain_oracle(instance: &TaskInstance, vocab: &Vocab, modulus: u32) -> Result<Token, EnvError> {
    let text = instance.prompt.render(vocab);
    let mut words = text.split_whitespace();
    let first = words.next().ok_or_else(|| EnvError::Malformed("empty prompt".into()))?;
    let mut value: i64 = first
        .parse()
        .map_err(|_| EnvError::Malformed(format!("expected leading digit, found {first:?}")))?;
    let m = i64::from(modulus);
    loop {
        let Some(op) = words.next() else { break };
        let operand: i64 = words
            .next()
            .ok_or_else(|| EnvError::Malformed(format!("operator {op:?} has no operand")))?
            .parse()
            .map_err(|_| EnvError::Malformed("operand is not a digit".into()))?;
        value = match op {
            "+" => value + operand,
            "×" => value * operand,
            other => return Err(EnvError::Malformed(format!("unknown operator {other:?}"))),
        }
        .rem_euclid(m);
    }
    Ok(value.rem_euclid(m) as Token)
}
