//! Greedy evaluation, the intelligence-per-token metric, the FLOPs cost
//! model and comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::truncate;
use crate::envs::{final_answer, reward, EnvError, Environment, TaskInstance, TokenSeq};
use crate::policy::{GenerationContext, PolicyError, PolicyPair};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Accuracy per 1000 capable-model tokens.
///
/// Zero tokens with zero accuracy is defined as 0; zero tokens with positive
/// accuracy is a domain error.
pub fn ipt(accuracy: f64, mean_tokens: f64) -> Result<f64, EvalError> {
    if !(mean_tokens >= 0.0) || !accuracy.is_finite() {
        return Err(EvalError::Domain(format!("ipt({accuracy}, {mean_tokens})")));
    }
    if mean_tokens == 0.0 {
        return if accuracy == 0.0 {
            Ok(0.0)
        } else {
            Err(EvalError::Domain("ipt undefined for zero tokens with positive accuracy".into()))
        };
    }
    Ok(1000.0 * accuracy / mean_tokens)
}

/// Transformer cost parameters: parameter count, layers, hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsModel {
    pub params: u64,
    pub layers: u64,
    pub hidden: u64,
}

impl FlopsModel {
    /// Fictitious costs mimicking a 4B / 0.6B pair.
    pub const CAPABLE_DEFAULT: FlopsModel = FlopsModel { params: 4_000_000_000, layers: 36, hidden: 2560 };
    pub const LIGHT_DEFAULT: FlopsModel = FlopsModel { params: 600_000_000, layers: 28, hidden: 1024 };

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.params == 0 || self.layers == 0 || self.hidden == 0 {
            return Err(EvalError::Domain("flops model fields must be positive".into()));
        }
        Ok(())
    }
}

/// `2BL + 4nd(LP + L(L−1)/2)` for a prompt of `prompt_len` and `gen_len`
/// generated tokens.
pub fn flops_exact(model: &FlopsModel, prompt_len: usize, gen_len: usize) -> f64 {
    let (p, l) = (prompt_len as f64, gen_len as f64);
    let attn = 4.0 * model.layers as f64 * model.hidden as f64 * (l * p + l * (l - 1.0) / 2.0);
    2.0 * model.params as f64 * l + if gen_len == 0 { 0.0 } else { attn }
}

/// The dominant `2BL` term.
pub fn flops_approx(model: &FlopsModel, gen_len: usize) -> f64 {
    2.0 * model.params as f64 * gen_len as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "budget")]
pub enum EvalMode {
    /// Capable signal, lightweight answer.
    Duet,
    /// Lightweight model from the prompt alone.
    SmallAlone,
    /// Capable model alone, single pass; the answer is its last token.
    LargeAlone,
    /// Capable model reasons, the reasoning is cut at the budget, then the
    /// capable model answers with one token.
    Truncation(usize),
}

impl EvalMode {
    pub fn name(&self) -> String {
        match self {
            EvalMode::Duet => "duet".into(),
            EvalMode::SmallAlone => "small_alone".into(),
            EvalMode::LargeAlone => "large_alone".into(),
            EvalMode::Truncation(b) => format!("truncation@{b}"),
        }
    }
}

/// One evaluation (or training-step) summary line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: String,
    pub eval_set: String,
    pub step: usize,
    pub accuracy: f64,
    pub mean_len_capable: f64,
    pub mean_len_light: f64,
    /// `None` when the capable model emitted no tokens yet accuracy is positive.
    pub ipt: Option<f64>,
    pub flops_capable: f64,
    pub flops_light: f64,
    pub lambda: f64,
}

impl MetricsRecord {
    pub fn new(accuracy: f64, mean_len_capable: f64, mean_len_light: f64) -> Self {
        Self {
            variant: String::new(),
            eval_set: String::new(),
            step: 0,
            accuracy,
            mean_len_capable,
            mean_len_light,
            ipt: ipt(accuracy, mean_len_capable).ok(),
            flops_capable: 0.0,
            flops_light: 0.0,
            lambda: 0.0,
        }
    }

    pub fn tagged(mut self, variant: &str, eval_set: &str, step: usize, lambda: f64) -> Self {
        self.variant = variant.to_string();
        self.eval_set = eval_set.to_string();
        self.step = step;
        self.lambda = lambda;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModels {
    pub capable: FlopsModel,
    pub light: FlopsModel,
}

impl Default for CostModels {
    fn default() -> Self {
        Self { capable: FlopsModel::CAPABLE_DEFAULT, light: FlopsModel::LIGHT_DEFAULT }
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct TaskOutcome {
    score: f64,
    len_capable: usize,
    len_light: usize,
    flops_capable: f64,
    flops_light: f64,
}

/// Greedy evaluation over a fixed task set.
///
/// On the channel environment the per-task score is the analytic success
/// probability of the decoded signal length, so the result stays a pure
/// function of the parameters and the task set.
pub fn evaluate(
    pair: &PolicyPair,
    env: &Environment,
    tasks: &[TaskInstance],
    mode: EvalMode,
    costs: &CostModels,
) -> Result<MetricsRecord, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::Domain("empty evaluation set".into()));
    }
    let outcomes: Vec<TaskOutcome> = tasks
        .par_iter()
        .map(|t| eval_task(pair, env, t, mode, costs))
        .collect::<Result<_, _>>()?;
    let n = outcomes.len() as f64;
    let mean = |f: fn(&TaskOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
    let mut rec = MetricsRecord::new(
        mean(|o| o.score),
        mean(|o| o.len_capable as f64),
        mean(|o| o.len_light as f64),
    );
    rec.flops_capable = mean(|o| o.flops_capable);
    rec.flops_light = mean(|o| o.flops_light);
    rec.variant = mode.name();
    Ok(rec)
}

fn eval_task(
    pair: &PolicyPair,
    env: &Environment,
    task: &TaskInstance,
    mode: EvalMode,
    costs: &CostModels,
) -> Result<TaskOutcome, EvalError> {
    let vocab = env.vocab();
    let eos = vocab.eos();
    let capable = &pair.capable;
    let scratch = capable.fmap.uses_scratch().then(|| task.final_scratch());
    let signal_cap = env.signal_cap(capable.params.max_gen_len());
    let prompt_len = task.prompt.len();
    let mut out = TaskOutcome::default();

    let greedy_capable = |ctx: &GenerationContext, cap: usize| -> Result<TokenSeq, EvalError> {
        // Greedy decoding never consumes randomness.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(capable.sample_sequence(ctx, 0.0, &mut rng, cap, eos)?.0)
    };
    let light_answer = |signal: &TokenSeq| -> Result<Option<(TokenSeq, usize)>, EvalError> {
        match &pair.light {
            None => Ok(None),
            Some(light) => {
                let ctx = GenerationContext::response(&task.prompt, signal, vocab);
                let input_len = ctx.prompt.len() + ctx.conditioning.len();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let y = light.sample_sequence(&ctx, 0.0, &mut rng, light.params.max_gen_len(), eos)?.0;
                Ok(Some((y, input_len)))
            }
        }
    };

    match mode {
        EvalMode::Duet | EvalMode::SmallAlone => {
            let z = if mode == EvalMode::Duet {
                greedy_capable(&GenerationContext::signal(&task.prompt, scratch), signal_cap)?
            } else {
                TokenSeq::empty()
            };
            let len = z.signal_len(eos);
            out.len_capable = len;
            if mode == EvalMode::Duet {
                out.flops_capable = flops_exact(&costs.capable, prompt_len, len);
            }
            match env.channel_spec() {
                Some(ch) => out.score = ch.success(len)?,
                None => {
                    let (y, input_len) = light_answer(&z)?
                        .ok_or_else(|| EvalError::Domain("chain environment needs a lightweight policy".into()))?;
                    out.score = reward(task, &y);
                    out.len_light = y.signal_len(eos);
                    out.flops_light = flops_exact(&costs.light, input_len, out.len_light);
                }
            }
        }
        EvalMode::LargeAlone => {
            let y = greedy_capable(&GenerationContext::signal(&task.prompt, scratch), signal_cap)?;
            let len = y.signal_len(eos);
            out.len_capable = len;
            out.flops_capable = flops_exact(&costs.capable, prompt_len, len);
            out.score = match env.channel_spec() {
                Some(ch) => ch.success(len)?,
                None => reward(task, &final_answer(&y, eos)),
            };
        }
        EvalMode::Truncation(budget) => {
            let z = greedy_capable(&GenerationContext::signal(&task.prompt, scratch), signal_cap)?;
            let cut = truncate(&z, budget, eos);
            let kept = cut.len();
            match env.channel_spec() {
                Some(ch) => {
                    out.score = ch.success(kept)?;
                    out.len_capable = kept;
                }
                None => {
                    let ctx = GenerationContext::answer(&task.prompt, &cut, vocab, scratch);
                    let answer = greedy_capable(&ctx, 1)?;
                    out.score = reward(task, &answer);
                    out.len_capable = kept + answer.signal_len(eos);
                }
            }
            out.flops_capable = flops_exact(&costs.capable, prompt_len, out.len_capable);
        }
    }
    Ok(out)
}

/// Rows are variants, columns eval sets, both in first-seen order. Each
/// cell reads `IPT (accuracy, tokens)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<String>>)>,
}

pub fn format_cell(rec: &MetricsRecord) -> String {
    let ipt = rec.ipt.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
    format!("{ipt} ({:.2}, {:.0})", rec.accuracy, rec.mean_len_capable)
}

pub fn report_table(records: &[MetricsRecord]) -> ReportTable {
    let mut columns: Vec<String> = Vec::new();
    let mut row_order: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), String> = BTreeMap::new();
    for r in records {
        let c = match columns.iter().position(|x| *x == r.eval_set) {
            Some(i) => i,
            None => {
                columns.push(r.eval_set.clone());
                columns.len() - 1
            }
        };
        let v = match row_order.iter().position(|x| *x == r.variant) {
            Some(i) => i,
            None => {
                row_order.push(r.variant.clone());
                row_order.len() - 1
            }
        };
        cells.insert((v, c), format_cell(r));
    }
    let rows = row_order
        .into_iter()
        .enumerate()
        .map(|(v, name)| (name, (0..columns.len()).map(|c| cells.get(&(v, c)).cloned()).collect()))
        .collect();
    ReportTable { columns, rows }
}

impl ReportTable {
    pub fn to_text(&self) -> String {
        let mut header = vec!["variant".to_string()];
        header.extend(self.columns.iter().cloned());
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(name, cells)| {
                std::iter::once(name.clone())
                    .chain(cells.iter().map(|c| c.clone().unwrap_or_else(|| "-".into())))
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| body.iter().map(|r| r[i].chars().count()).chain([header[i].chars().count()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |cols: &[String], out: &mut String| {
            let padded: Vec<String> = cols.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", padded.join(" | ").trim_end());
        };
        line(&header, &mut out);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(out, "{}", rule.join("-+-"));
        for r in &body {
            line(r, &mut out);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let quote = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let mut out = String::new();
        let mut header = vec!["variant".to_string()];
        header.extend(self.columns.iter().map(|c| quote(c)));
        let _ = writeln!(out, "{}", header.join(","));
        for (name, cells) in &self.rows {
            let mut cols = vec![quote(name)];
            cols.extend(cells.iter().map(|c| quote(c.as_deref().unwrap_or(""))));
            let _ = writeln!(out, "{}", cols.join(","));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ipt_edge_cases() {
        assert_eq!(ipt(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(ipt(0.0, 512.0).unwrap(), 0.0);
        assert!(matches!(ipt(0.5, 0.0), Err(EvalError::Domain(_))));
        assert!((ipt(0.9, 6948.0).unwrap() - 0.1295).abs() < 1e-4);
        assert!((ipt(0.88, 1800.0).unwrap() - 0.4889).abs() < 1e-4);
    }

    #[test]
    fn flops_worked_examples() {
        let small = FlopsModel { params: 10, layers: 1, hidden: 1 };
        assert_eq!(flops_exact(&small, 2, 3), 96.0);
        assert_eq!(flops_exact(&small, 7, 0), 0.0);
        let big = FlopsModel::CAPABLE_DEFAULT;
        assert_eq!(flops_exact(&big, 0, 1), 8e9);
        assert_eq!(flops_approx(&big, 1000), 8e12);
        assert_eq!(flops_approx(&big, 0), 0.0);
    }

    #[test]
    fn approx_never_exceeds_exact() {
        let m = FlopsModel { params: 123, layers: 3, hidden: 7 };
        for p in 0..20 {
            for l in 0..40 {
                assert!(flops_approx(&m, l) <= flops_exact(&m, p, l));
            }
        }
    }

    fn rec(variant: &str, set: &str, acc: f64, tokens: f64) -> MetricsRecord {
        MetricsRecord::new(acc, tokens, 0.0).tagged(variant, set, 0, 0.0)
    }

    #[test]
    fn table_cell_format_and_shape() {
        let t = report_table(&[rec("duet", "amc", 0.88, 1800.0)]);
        assert_eq!(t.rows[0].1[0].as_deref(), Some("0.489 (0.88, 1800)"));

        let empty = report_table(&[]);
        assert!(empty.rows.is_empty());
        assert_eq!(empty.to_csv(), "variant\n");
        assert_eq!(empty.to_text().lines().next(), Some("variant"));

        let t = report_table(&[
            rec("a", "x", 0.5, 10.0),
            rec("b", "x", 0.5, 20.0),
            rec("a", "y", 0.2, 10.0),
            rec("b", "y", 0.1, 10.0),
        ]);
        assert_eq!(t.columns, vec!["x", "y"]);
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows.iter().all(|(_, c)| c.len() == 2 && c.iter().all(Option::is_some)));
        assert_eq!(t.to_csv().lines().count(), 3);
        assert_eq!(t.to_text().lines().count(), 4);
    }
}
