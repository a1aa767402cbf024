//! Vocabularies, synthetic task generators, the exact-match reward and the
//! analytic channel environment.

mod chain;
mod channel;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chain::{chain_oracle, ChainArithSpec};
pub use channel::{channel_success, ChannelSpec};
pub use vocab::{Op, Token, TokenSeq, Vocab};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("token {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: Token, size: usize },
    #[error("malformed sequence: {0}")]
    Malformed(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("task file line {line}: {message}")]
    TaskFile { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A prompt, its gold answer digit and the running fold value at every
/// prompt position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: TokenSeq,
    pub gold: Token,
    pub scratch: Vec<u32>,
}

impl TaskInstance {
    pub fn validate(&self, vocab: &Vocab) -> Result<(), EnvError> {
        self.prompt.validate(vocab)?;
        if !vocab.is_digit(self.gold) {
            return Err(EnvError::Malformed(format!("gold {} is not a digit", self.gold)));
        }
        if self.scratch.len() != self.prompt.len() {
            return Err(EnvError::Malformed(format!(
                "scratch has {} entries for {} prompt tokens",
                self.scratch.len(),
                self.prompt.len()
            )));
        }
        if self.scratch.last().map(|&s| s as Token) != Some(self.gold) {
            return Err(EnvError::Malformed("final scratch entry does not decode to gold".into()));
        }
        Ok(())
    }

    /// Running fold value after the whole prompt has been read.
    pub fn final_scratch(&self) -> usize {
        self.scratch.last().copied().unwrap_or(0) as usize
    }
}

/// Exact-match reward: 1 iff the first response token is the gold digit.
pub fn reward(instance: &TaskInstance, response: &TokenSeq) -> f64 {
    if response.first() == Some(instance.gold) {
        1.0
    } else {
        0.0
    }
}

/// Answer of a single-pass generation: its last non-`eos` token.
pub fn final_answer(seq: &TokenSeq, eos: Token) -> TokenSeq {
    TokenSeq::new(seq.content(eos).last().map(|&t| vec![t]).unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvKind {
    ChainArith(ChainArithSpec),
    Channel(ChannelSpec),
}

/// An environment together with the vocabulary both policies share.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    vocab: Vocab,
    kind: EnvKind,
}

impl Environment {
    pub fn chain(spec: ChainArithSpec) -> Result<Self, EnvError> {
        let vocab = Vocab::desk(spec.modulus() as usize)?;
        Ok(Self { vocab, kind: EnvKind::ChainArith(spec) })
    }

    pub fn channel(spec: ChannelSpec) -> Result<Self, EnvError> {
        Ok(Self { vocab: Vocab::desk(10)?, kind: EnvKind::Channel(spec) })
    }

    pub fn from_kind(kind: EnvKind) -> Result<Self, EnvError> {
        match kind {
            EnvKind::ChainArith(s) => Self::chain(s),
            EnvKind::Channel(s) => Self::channel(s),
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn kind(&self) -> &EnvKind {
        &self.kind
    }

    pub fn channel_spec(&self) -> Option<&ChannelSpec> {
        match &self.kind {
            EnvKind::Channel(c) => Some(c),
            EnvKind::ChainArith(_) => None,
        }
    }

    /// Modulus for digit-valued scratch features.
    pub fn digit_base(&self) -> usize {
        self.vocab.digit_base()
    }

    /// Channel tasks carry a single padding token; the channel ignores it.
    pub fn sample_task<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskInstance {
        match &self.kind {
            EnvKind::ChainArith(spec) => spec.generate(&self.vocab, rng),
            EnvKind::Channel(_) => TaskInstance {
                prompt: TokenSeq::new(vec![self.vocab.pad()]),
                gold: 0,
                scratch: vec![0],
            },
        }
    }

    pub fn sample_tasks<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<TaskInstance> {
        (0..n).map(|_| self.sample_task(rng)).collect()
    }

    /// Signal generation cap: the channel bounds lengths by its own `max_len`.
    pub fn signal_cap(&self, policy_cap: usize) -> usize {
        match &self.kind {
            EnvKind::Channel(c) => policy_cap.min(c.max_len()),
            EnvKind::ChainArith(_) => policy_cap,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskLine {
    prompt: Vec<Token>,
    gold: Token,
    scratch: Vec<u32>,
}

/// Writes one JSON object per line: `{"prompt":[..],"gold":g,"scratch":[..]}`.
pub fn save_task_set(path: &Path, tasks: &[TaskInstance]) -> Result<(), EnvError> {
    let mut out = BufWriter::new(File::create(path)?);
    for t in tasks {
        let line = TaskLine {
            prompt: t.prompt.tokens().to_vec(),
            gold: t.gold,
            scratch: t.scratch.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_task_set(path: &Path, vocab: &Vocab) -> Result<Vec<TaskInstance>, EnvError> {
    let reader = BufReader::new(File::open(path)?);
    let mut tasks = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: TaskLine = serde_json::from_str(&line)
            .map_err(|e| EnvError::TaskFile { line: i + 1, message: e.to_string() })?;
        let task = TaskInstance { prompt: TokenSeq::new(raw.prompt), gold: raw.gold, scratch: raw.scratch };
        task.validate(vocab)
            .map_err(|e| EnvError::TaskFile { line: i + 1, message: e.to_string() })?;
        tasks.push(task);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task(gold: Token) -> TaskInstance {
        TaskInstance { prompt: TokenSeq::new(vec![gold, 13, 0]), gold, scratch: vec![gold as u32; 3] }
    }

    #[test]
    fn reward_worked_examples() {
        let t = task(4);
        assert_eq!(reward(&t, &TokenSeq::new(vec![4, 10])), 1.0);
        assert_eq!(reward(&t, &TokenSeq::new(vec![5, 10])), 0.0);
        assert_eq!(reward(&t, &TokenSeq::empty()), 0.0);
        assert_eq!(reward(&t, &TokenSeq::new(vec![4, 4, 4])), 1.0);
    }

    #[test]
    fn task_file_round_trip_and_line_errors() {
        let env = Environment::chain(ChainArithSpec::new(4, 10, vec![Op::Add, Op::Mul]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tasks = env.sample_tasks(25, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        save_task_set(&path, &tasks).unwrap();
        assert_eq!(load_task_set(&path, env.vocab()).unwrap(), tasks);

        std::fs::write(&path, "{\"prompt\":[1],\"gold\":2,\"scratch\":[1]}\n").unwrap();
        match load_task_set(&path, env.vocab()) {
            Err(EnvError::TaskFile { line: 1, .. }) => {}
            other => panic!("expected task-file error, got {other:?}"),
        }
    }

    #[test]
    fn channel_tasks_are_valid() {
        let env = Environment::channel(ChannelSpec::new(0.2, 0.9, 8.0, 32, true).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.sample_task(&mut rng).validate(env.vocab()).unwrap();
        assert_eq!(env.signal_cap(64), 32);
    }

    proptest! {
        #[test]
        fn generated_tasks_validate_and_prompts_round_trip(
            seed in any::<u64>(), k in 1usize..10, p in 2u32..=10, both in any::<bool>()
        ) {
            let ops = if both { vec![Op::Add, Op::Mul] } else { vec![Op::Add] };
            let spec = ChainArithSpec::new(k, p, ops).unwrap();
            let vocab = Vocab::desk(p as usize).unwrap();
            let t = spec.generate(&vocab, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(t.validate(&vocab).is_ok());
            prop_assert_eq!(t.prompt.len(), 2 * k + 1);
            let text = t.prompt.render(&vocab);
            prop_assert_eq!(TokenSeq::parse(&text, &vocab).unwrap(), t.prompt.clone());
            prop_assert_eq!(reward(&t, &TokenSeq::new(vec![t.gold])), reward(&t, &TokenSeq::new(vec![t.gold])));
        }
    }
}
