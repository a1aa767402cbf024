//! Token vocabulary and token sequences shared by both policies.

use serde::{Deserialize, Serialize};

use super::EnvError;

/// A token id. Digits occupy ids `0..digit_base`.
pub type Token = usize;

/// Arithmetic operator tokens used by the chain task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Add,
    Mul,
}

impl Op {
    pub fn apply(self, acc: u32, operand: u32, modulus: u32) -> u32 {
        match self {
            Op::Add => (acc + operand) % modulus,
            Op::Mul => (acc * operand) % modulus,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Mul => "×",
        }
    }
}

/// Shared vocabulary layout.
///
/// The desk layout has 16 ids: ten digits, `eos`, `sep`, the answer marker,
/// two operators and a padding token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos: Token,
    sep: Token,
    ans_marker: Token,
    digit_base: usize,
    op_add: Token,
    op_mul: Token,
    pad: Token,
}

impl Vocab {
    pub const DESK_SIZE: usize = 16;

    /// The default 16-token layout with digits `0..digit_base` (at most 10).
    pub fn desk(digit_base: usize) -> Result<Self, EnvError> {
        if digit_base == 0 || digit_base > 10 {
            return Err(EnvError::InvalidVocab(format!(
                "digit base {digit_base} outside 1..=10"
            )));
        }
        Self::new(Self::DESK_SIZE, 10, 11, 12, digit_base, 13, 14, 15)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        size: usize,
        eos: Token,
        sep: Token,
        ans_marker: Token,
        digit_base: usize,
        op_add: Token,
        op_mul: Token,
        pad: Token,
    ) -> Result<Self, EnvError> {
        let specials = [eos, sep, ans_marker, op_add, op_mul, pad];
        for (i, &a) in specials.iter().enumerate() {
            if a >= size {
                return Err(EnvError::InvalidVocab(format!("special id {a} >= size {size}")));
            }
            if a < digit_base {
                return Err(EnvError::InvalidVocab(format!(
                    "special id {a} collides with digit range 0..{digit_base}"
                )));
            }
            if specials[..i].contains(&a) {
                return Err(EnvError::InvalidVocab(format!("special id {a} used twice")));
            }
        }
        if digit_base == 0 || digit_base + 3 > size {
            return Err(EnvError::InvalidVocab(format!(
                "digit base {digit_base} must be in 1..={}",
                size.saturating_sub(3)
            )));
        }
        Ok(Self { size, eos, sep, ans_marker, digit_base, op_add, op_mul, pad })
    }

    pub fn size(&self) -> usize {
        self.size
    }
    pub fn eos(&self) -> Token {
        self.eos
    }
    pub fn sep(&self) -> Token {
        self.sep
    }
    pub fn ans_marker(&self) -> Token {
        self.ans_marker
    }
    pub fn pad(&self) -> Token {
        self.pad
    }
    pub fn digit_base(&self) -> usize {
        self.digit_base
    }

    pub fn is_digit(&self, t: Token) -> bool {
        t < self.digit_base
    }

    pub fn op_token(&self, op: Op) -> Token {
        match op {
            Op::Add => self.op_add,
            Op::Mul => self.op_mul,
        }
    }

    pub fn token_op(&self, t: Token) -> Option<Op> {
        if t == self.op_add {
            Some(Op::Add)
        } else if t == self.op_mul {
            Some(Op::Mul)
        } else {
            None
        }
    }

    /// Human-readable rendering of one token.
    pub fn render(&self, t: Token) -> String {
        if self.is_digit(t) {
            t.to_string()
        } else if let Some(op) = self.token_op(t) {
            op.symbol().to_string()
        } else if t == self.eos {
            "<eos>".into()
        } else if t == self.sep {
            "<sep>".into()
        } else if t == self.ans_marker {
            "<ans>".into()
        } else {
            "<pad>".into()
        }
    }

    /// Inverse of [`Vocab::render`].
    pub fn parse(&self, word: &str) -> Option<Token> {
        match word {
            "+" => Some(self.op_add),
            "×" | "*" => Some(self.op_mul),
            "<eos>" => Some(self.eos),
            "<sep>" => Some(self.sep),
            "<ans>" => Some(self.ans_marker),
            "<pad>" => Some(self.pad),
            w => w.parse::<usize>().ok().filter(|&d| d < self.digit_base),
        }
    }
}

/// An ordered token sequence. At most one `eos`, and only in final position.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<Token>);

impl TokenSeq {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// Checks the sequence against a vocabulary.
    pub fn validate(&self, vocab: &Vocab) -> Result<(), EnvError> {
        if let Some(&t) = self.0.iter().find(|&&t| t >= vocab.size()) {
            return Err(EnvError::TokenOutOfRange { token: t, size: vocab.size() });
        }
        if let Some(pos) = self.0.iter().position(|&t| t == vocab.eos()) {
            if pos + 1 != self.0.len() {
                return Err(EnvError::Malformed(format!("eos at position {pos} is not final")));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> Option<Token> {
        self.0.first().copied()
    }

    /// Number of non-`eos` tokens, the signal length `L(z)`.
    pub fn signal_len(&self, eos: Token) -> usize {
        self.0.iter().filter(|&&t| t != eos).count()
    }

    /// Tokens before the first `eos`.
    pub fn content(&self, eos: Token) -> &[Token] {
        let end = self.0.iter().position(|&t| t == eos).unwrap_or(self.0.len());
        &self.0[..end]
    }

    pub fn ends_with_eos(&self, eos: Token) -> bool {
        self.0.last() == Some(&eos)
    }

    pub fn render(&self, vocab: &Vocab) -> String {
        self.0.iter().map(|&t| vocab.render(t)).collect::<Vec<_>>().join(" ")
    }

    pub fn parse(text: &str, vocab: &Vocab) -> Result<Self, EnvError> {
        text.split_whitespace()
            .map(|w| vocab.parse(w).ok_or_else(|| EnvError::Malformed(format!("unknown word {w:?}"))))
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }

    pub fn into_vec(self) -> Vec<Token> {
        self.0
    }
}

impl From<Vec<Token>> for TokenSeq {
    fn from(v: Vec<Token>) -> Self {
        Self(v)
    }
}
