//! Append-only JSON-lines metrics stream.
//!
//! Every line is one self-contained record. `kind` is `"step"` for a training
//! step, `"eval"` for a greedy evaluation and `"error"` for a failed step. The
//! metric fields are always present (null on error lines); training-only
//! diagnostics appear on step lines only.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::{CostModels, MetricsRecord};
use crate::trainer::StepReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineKind {
    Step,
    Eval,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub kind: LineKind,
    pub variant: String,
    pub eval_set: String,
    pub step: usize,
    pub accuracy: Option<f64>,
    pub mean_len_capable: Option<f64>,
    pub mean_len_light: Option<f64>,
    pub ipt: Option<f64>,
    pub flops_capable: Option<f64>,
    pub flops_light: Option<f64>,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_used: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_baseline_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_kl_capable: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_kl_light: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl MetricsLine {
    /// A training step. Accuracy is the mean sampled reward and FLOPs use
    /// the `2BL` approximation at the mean lengths.
    pub fn from_step(variant: &str, report: &StepReport, costs: &CostModels) -> Self {
        let rec = MetricsRecord::new(report.mean_reward, report.mean_signal_len, report.mean_response_len);
        Self {
            kind: LineKind::Step,
            variant: variant.into(),
            eval_set: "train".into(),
            step: report.step,
            accuracy: Some(rec.accuracy),
            mean_len_capable: Some(rec.mean_len_capable),
            mean_len_light: Some(rec.mean_len_light),
            ipt: rec.ipt,
            flops_capable: Some(2.0 * costs.capable.params as f64 * report.mean_signal_len),
            flops_light: Some(2.0 * costs.light.params as f64 * report.mean_response_len),
            lambda: report.lambda,
            lambda_used: Some(report.lambda_used),
            mean_baseline_reward: Some(report.mean_baseline_reward),
            mean_kl_capable: Some(report.mean_kl_capable),
            mean_kl_light: report.mean_kl_light,
            message: None,
        }
    }

    pub fn from_eval(rec: &MetricsRecord) -> Self {
        Self {
            kind: LineKind::Eval,
            variant: rec.variant.clone(),
            eval_set: rec.eval_set.clone(),
            step: rec.step,
            accuracy: Some(rec.accuracy),
            mean_len_capable: Some(rec.mean_len_capable),
            mean_len_light: Some(rec.mean_len_light),
            ipt: rec.ipt,
            flops_capable: Some(rec.flops_capable),
            flops_light: Some(rec.flops_light),
            lambda: rec.lambda,
            lambda_used: None,
            mean_baseline_reward: None,
            mean_kl_capable: None,
            mean_kl_light: None,
            message: None,
        }
    }

    pub fn error(variant: &str, step: usize, lambda: f64, message: String) -> Self {
        Self {
            kind: LineKind::Error,
            variant: variant.into(),
            eval_set: "train".into(),
            step,
            accuracy: None,
            mean_len_capable: None,
            mean_len_light: None,
            ipt: None,
            flops_capable: None,
            flops_light: None,
            lambda,
            lambda_used: None,
            mean_baseline_reward: None,
            mean_kl_capable: None,
            mean_kl_light: None,
            message: Some(message),
        }
    }

    /// The evaluation record carried by an `eval` line.
    pub fn to_record(&self) -> Option<MetricsRecord> {
        if self.kind != LineKind::Eval {
            return None;
        }
        Some(MetricsRecord {
            variant: self.variant.clone(),
            eval_set: self.eval_set.clone(),
            step: self.step,
            accuracy: self.accuracy?,
            mean_len_capable: self.mean_len_capable?,
            mean_len_light: self.mean_len_light?,
            ipt: self.ipt,
            flops_capable: self.flops_capable?,
            flops_light: self.flops_light?,
            lambda: self.lambda,
        })
    }
}

/// Single writer appending whole lines.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    /// Starts an empty stream.
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = File::create(path)?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    /// Reopens a stream for a run resumed after `step`: keeps the complete
    /// lines with `step <= step` and drops everything after them.
    pub fn resume(path: &Path, step: usize) -> std::io::Result<Self> {
        let kept = if path.exists() {
            let mut kept = String::new();
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                match serde_json::from_str::<MetricsLine>(&line) {
                    Ok(rec) if rec.step <= step && rec.kind != LineKind::Error => {
                        kept.push_str(&line);
                        kept.push('\n');
                    }
                    Ok(_) => {}
                    Err(_) => break,
                }
            }
            kept
        } else {
            String::new()
        };
        fs::write(path, kept)?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, line: &MetricsLine) -> std::io::Result<()> {
        let mut text = serde_json::to_string(line).map_err(std::io::Error::from)?;
        text.push('\n');
        self.file.write_all(text.as_bytes())?;
        self.file.flush()
    }
}

/// Reads every complete line; a torn final line is ignored.
pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricsLine>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(rec) => out.push(rec),
            Err(_) => break,
        }
    }
    Ok(out)
}
