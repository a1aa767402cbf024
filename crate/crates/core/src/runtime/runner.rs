//! The four run commands and the output directory they share.
//!
//! ```text
//! <out>/config.toml         resolved configuration
//! <out>/metrics.jsonl       metrics stream
//! <out>/checkpoints/        step_00000050.json, ...
//! <out>/reports/            report tables and plotting CSVs
//! <out>/ablate/<cell>/      one run directory per ablation cell
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngState};
use super::config::{RunConfig, Variant};
use super::metrics::{read_metrics, LineKind, MetricsLine, MetricsWriter};
use crate::envs::{EnvError, Environment, TaskInstance};
use crate::eval::{evaluate, report_table, EvalError, EvalMode, MetricsRecord, ReportTable};
use crate::policy::{Policy, PolicyError, PolicyPair};
use crate::rng::{purpose, RngTree};
use crate::trainer::{init_pair, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] super::config::ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn create(root: &Path) -> std::io::Result<Self> {
        let l = Self::new(root);
        fs::create_dir_all(l.checkpoints())?;
        fs::create_dir_all(l.reports())?;
        Ok(l)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.checkpoints().join(format!("step_{step:08}.json"))
    }
    pub fn ablation(&self, slug: &str) -> PathBuf {
        self.root.join("ablate").join(slug)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop after this step (checkpointing there) instead of running to the end.
    pub until: Option<usize>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub step: usize,
    pub lambda: f64,
    pub last_eval: Option<MetricsRecord>,
    pub checkpoint: Option<PathBuf>,
}

/// The fixed evaluation tasks of a run, drawn from their own stream.
pub fn eval_set(cfg: &RunConfig, env: &Environment) -> Vec<TaskInstance> {
    let mut rng = RngTree::new(cfg.seed).stream(&[purpose::EVAL_SET]);
    env.sample_tasks(cfg.eval_tasks, &mut rng)
}

fn restore_policy(template: &Policy, params: crate::policy::PolicyParams) -> Result<Policy, RunError> {
    Ok(Policy::new(template.fmap.clone(), params)?)
}

fn restore(trainer: &mut Trainer, ck: Checkpoint, seed: u64) -> Result<(), RunError> {
    if ck.rng.seed != seed || ck.rng.next_step != ck.step + 1 {
        return Err(CheckpointError::Integrity("rng state does not match the checkpoint step".into()).into());
    }
    let capable = restore_policy(&trainer.pair.capable, ck.capable)?;
    let light = match (&trainer.pair.light, ck.light) {
        (Some(t), Some(p)) => Some(restore_policy(t, p)?),
        (None, None) => None,
        _ => return Err(CheckpointError::Integrity("lightweight policy presence differs from config".into()).into()),
    };
    trainer.pair = PolicyPair { capable, light };
    trainer.lambda = ck.lambda;
    trainer.step = ck.step;
    Ok(())
}

fn snapshot(trainer: &Trainer, digest: &str, seed: u64) -> Checkpoint {
    Checkpoint {
        config_digest: digest.into(),
        step: trainer.step,
        capable: trainer.pair.capable.params.clone(),
        light: trainer.pair.light.as_ref().map(|l| l.params.clone()),
        lambda: trainer.lambda.clone(),
        rng: RngState::at(seed, trainer.step + 1),
    }
}

fn write_report(layout: &Layout, name: &str, records: &[MetricsRecord]) -> Result<ReportTable, RunError> {
    let table = report_table(records);
    fs::write(layout.reports().join(format!("{name}.txt")), table.to_text())?;
    fs::write(layout.reports().join(format!("{name}.csv")), table.to_csv())?;
    Ok(table)
}

/// Trains per the configuration, appending to `<out>/metrics.jsonl`.
///
/// Any failure is recorded as an `error` line before it is returned.
pub fn train_run(cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<TrainSummary, RunError> {
    let layout = Layout::create(out)?;
    fs::write(layout.config(), cfg.to_toml())?;
    let env = cfg.environment()?;
    let digest = cfg.digest();
    let dcfg = cfg.effective_train();
    let pair = init_pair(&env, &cfg.capable, &cfg.light)?;
    let mut trainer = Trainer::new(dcfg.clone(), env.clone(), cfg.algorithm(), pair)?;
    let variant = cfg.variant.name();
    let mode = cfg.eval_mode();
    let tasks = eval_set(cfg, &env);

    let mut writer = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.check_digest(&digest)?;
            restore(&mut trainer, ck, cfg.seed)?;
            MetricsWriter::resume(&layout.metrics(), trainer.step)?
        }
        None => MetricsWriter::create(&layout.metrics())?,
    };

    let eval_now = |trainer: &Trainer| -> Result<MetricsRecord, EvalError> {
        let rec = evaluate(&trainer.pair, &env, &tasks, mode, &cfg.costs)?;
        Ok(rec.tagged(variant, "eval", trainer.step, trainer.lambda.lambda))
    };

    if cfg.variant == Variant::Truncation {
        // Evaluation-only baseline: the untrained capable model, cut at the budget.
        let rec = match eval_now(&trainer) {
            Ok(r) => r,
            Err(e) => {
                writer.append(&MetricsLine::error(variant, 0, trainer.lambda.lambda, e.to_string()))?;
                return Err(e.into());
            }
        };
        writer.append(&MetricsLine::from_eval(&rec))?;
        write_report(&layout, "final", std::slice::from_ref(&rec))?;
        return Ok(TrainSummary { step: 0, lambda: trainer.lambda.lambda, last_eval: Some(rec), checkpoint: None });
    }

    let end = opts.until.map_or(dcfg.steps, |u| u.min(dcfg.steps));
    let mut last_eval = None;
    let mut last_ckpt = None;
    while trainer.step < end {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                let line = MetricsLine::error(variant, trainer.step + 1, trainer.lambda.lambda, e.to_string());
                writer.append(&line)?;
                return Err(e.into());
            }
        };
        writer.append(&MetricsLine::from_step(variant, &report, &cfg.costs))?;
        let t = trainer.step;
        if (cfg.eval_every > 0 && t % cfg.eval_every == 0) || t == dcfg.steps {
            match eval_now(&trainer) {
                Ok(rec) => {
                    writer.append(&MetricsLine::from_eval(&rec))?;
                    last_eval = Some(rec);
                }
                Err(e) => {
                    writer.append(&MetricsLine::error(variant, t, trainer.lambda.lambda, e.to_string()))?;
                    return Err(e.into());
                }
            }
        }
        if (cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0) || t == end {
            let path = layout.checkpoint(t);
            save_checkpoint(&path, &snapshot(&trainer, &digest, cfg.seed))?;
            last_ckpt = Some(path);
        }
    }

    let evals: Vec<MetricsRecord> = read_metrics(&layout.metrics())?
        .iter()
        .filter_map(MetricsLine::to_record)
        .collect();
    if let Some(last) = evals.last() {
        write_report(&layout, "final", std::slice::from_ref(last))?;
        last_eval.get_or_insert_with(|| last.clone());
    }
    Ok(TrainSummary { step: trainer.step, lambda: trainer.lambda.lambda, last_eval, checkpoint: last_ckpt })
}

/// Greedy evaluation of a checkpoint (or of the initial policies) on the
/// run's evaluation set. Writes `reports/eval_<mode>.{txt,csv}`.
pub fn eval_run(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    mode: Option<EvalMode>,
) -> Result<MetricsRecord, RunError> {
    let layout = Layout::create(out)?;
    let env = cfg.environment()?;
    let mut pair = init_pair(&env, &cfg.capable, &cfg.light)?;
    let (mut step, mut lambda) = (0, cfg.effective_train().lambda0);
    if let Some(path) = checkpoint {
        let ck = load_checkpoint(path)?;
        ck.check_digest(&cfg.digest())?;
        let capable = restore_policy(&pair.capable, ck.capable)?;
        let light = match (&pair.light, ck.light) {
            (Some(t), Some(p)) => Some(restore_policy(t, p)?),
            (_, _) => None,
        };
        pair = PolicyPair { capable, light };
        step = ck.step;
        lambda = ck.lambda.lambda;
    }
    let mode = mode.unwrap_or_else(|| cfg.eval_mode());
    let tasks = eval_set(cfg, &env);
    let rec = evaluate(&pair, &env, &tasks, mode, &cfg.costs)?.tagged(cfg.variant.name(), "eval", step, lambda);
    let name = format!("eval_{}", mode.name().replace('@', "_"));
    write_report(&layout, &name, std::slice::from_ref(&rec))?;
    Ok(rec)
}

/// One cell of the ablation grid.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub label: String,
    pub slug: String,
    pub config: RunConfig,
}

/// `{±MU} × {±LPS}` plus the frozen-lightweight run. Cells without the
/// length-penalty schedule hold λ at the configured constant (0.5 unless a
/// `const_lambda` section says otherwise).
pub fn ablation_cells(base: &RunConfig) -> Vec<AblationCell> {
    let lambda = base.const_lambda.map(|c| c.lambda).unwrap_or(0.5);
    let mut root = base.clone();
    root.const_lambda = None;
    root.thinkprune = None;
    root.lgrpo = None;
    root.truncation = None;
    root.train.use_marginal_utility = true;
    root.train.adaptive_schedule = true;
    root.train.train_light = true;
    let cell = |label: &str, slug: &str, variant: Variant, mu: bool| {
        let mut c = root.clone();
        c.variant = variant;
        c.train.use_marginal_utility = mu;
        if variant == Variant::ConstLambda {
            c.const_lambda = Some(super::config::ConstLambdaConfig { lambda });
        }
        AblationCell { label: label.into(), slug: slug.into(), config: c }
    };
    vec![
        cell("+MU +LPS", "mu_lps", Variant::Duet, true),
        cell("-MU +LPS", "nomu_lps", Variant::NoMu, true),
        cell("+MU -LPS", "mu_nolps", Variant::ConstLambda, true),
        cell("-MU -LPS", "nomu_nolps", Variant::ConstLambda, false),
        cell("fix_m", "fix_m", Variant::FixM, true),
    ]
}

/// Runs every ablation cell under the base seed and writes
/// `reports/ablation.{txt,csv}` from each cell's final evaluation.
pub fn ablate_run(base: &RunConfig, out: &Path) -> Result<(Vec<MetricsRecord>, ReportTable), RunError> {
    let layout = Layout::create(out)?;
    fs::write(layout.config(), base.to_toml())?;
    let mut records = Vec::new();
    for cell in ablation_cells(base) {
        let summary = train_run(&cell.config, &layout.ablation(&cell.slug), &TrainOptions::default())?;
        if let Some(mut rec) = summary.last_eval {
            rec.variant = cell.label.clone();
            records.push(rec);
        }
    }
    let table = write_report(&layout, "ablation", &records)?;
    Ok((records, table))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes plotting CSVs from a run's metrics stream (and from every
/// ablation cell below it). Returns the files written.
pub fn export_run(out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let layout = Layout::new(out);
    let mut written = Vec::new();
    if layout.metrics().exists() {
        fs::create_dir_all(layout.reports())?;
        let lines = read_metrics(&layout.metrics())?;
        let steps = lines.iter().filter(|l| l.kind == LineKind::Step);
        let evals = lines.iter().filter(|l| l.kind == LineKind::Eval);

        let mut length = String::from("step,mean_len_capable,mean_len_light\n");
        let mut lambda = String::from("step,lambda_used,lambda\n");
        for l in steps {
            length.push_str(&format!("{},{},{}\n", l.step, opt(l.mean_len_capable), opt(l.mean_len_light)));
            lambda.push_str(&format!("{},{},{}\n", l.step, opt(l.lambda_used), l.lambda));
        }
        let mut acc = String::from("step,eval_set,accuracy,mean_len_capable,ipt\n");
        for l in evals {
            acc.push_str(&format!(
                "{},{},{},{},{}\n",
                l.step,
                l.eval_set,
                opt(l.accuracy),
                opt(l.mean_len_capable),
                opt(l.ipt)
            ));
        }
        for (name, body) in [
            ("length_vs_step.csv", length),
            ("accuracy_vs_tokens.csv", acc),
            ("lambda_trajectory.csv", lambda),
        ] {
            let path = layout.reports().join(name);
            fs::write(&path, body)?;
            written.push(path);
        }
    }
    let ablate = out.join("ablate");
    if ablate.is_dir() {
        let mut cells: Vec<PathBuf> = fs::read_dir(&ablate)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        cells.sort();
        for cell in cells {
            written.extend(export_run(&cell)?);
        }
    }
    if written.is_empty() {
        return Err(RunError::Usage(format!("no metrics stream under {}", out.display())));
    }
    Ok(written)
}
