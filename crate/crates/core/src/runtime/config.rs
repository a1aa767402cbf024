//! Run configuration: a TOML document layered over a named preset.
//!
//! Resolution order is preset defaults, then the document, then command-line
//! overrides. The resolved document is deserialized strictly (unknown keys
//! are errors) and range-checked field by field.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{LgrpoConfig, SingleShaping, ThinkPruneSchedule, TruncationConfig};
use crate::envs::{ChainArithSpec, ChannelSpec, EnvError, Environment, Op};
use crate::eval::{CostModels, EvalMode};
use crate::trainer::{Algorithm, DuetConfig, ModelConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config field {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid config: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ConfigError {
    /// Paths of every offending field.
    pub fn paths(&self) -> Vec<String> {
        match self {
            ConfigError::Schema { path, .. } => vec![path.clone()],
            ConfigError::Invalid(errs) => errs.iter().map(|e| e.path.clone()).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Preset::Paper),
            "desk" => Some(Preset::Desk),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    fn duet(self) -> DuetConfig {
        match self {
            Preset::Paper => DuetConfig::paper(),
            Preset::Desk => DuetConfig::desk(),
        }
    }

    fn eval_every(self) -> usize {
        match self {
            Preset::Paper => 50,
            Preset::Desk => 250,
        }
    }

    fn thinkprune(self) -> ThinkPruneSchedule {
        match self {
            Preset::Paper => ThinkPruneSchedule::PAPER,
            Preset::Desk => ThinkPruneSchedule::DESK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Duet,
    NoMu,
    ConstLambda,
    FixM,
    Single,
    Thinkprune,
    Lgrpo,
    Truncation,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Duet,
        Variant::NoMu,
        Variant::ConstLambda,
        Variant::FixM,
        Variant::Single,
        Variant::Thinkprune,
        Variant::Lgrpo,
        Variant::Truncation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Duet => "duet",
            Variant::NoMu => "no_mu",
            Variant::ConstLambda => "const_lambda",
            Variant::FixM => "fix_m",
            Variant::Single => "single",
            Variant::Thinkprune => "thinkprune",
            Variant::Lgrpo => "lgrpo",
            Variant::Truncation => "truncation",
        }
    }

    /// Name of the table holding this variant's own settings, if any.
    fn section(self) -> Option<&'static str> {
        match self {
            Variant::ConstLambda => Some("const_lambda"),
            Variant::Thinkprune => Some("thinkprune"),
            Variant::Lgrpo => Some("lgrpo"),
            Variant::Truncation => Some("truncation"),
            _ => None,
        }
    }

    /// Variants that train the capable model alone.
    pub fn is_single_model(self) -> bool {
        matches!(self, Variant::Single | Variant::Thinkprune | Variant::Lgrpo | Variant::Truncation)
    }
}

const VARIANT_SECTIONS: [&str; 4] = ["const_lambda", "thinkprune", "lgrpo", "truncation"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstLambdaConfig {
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    ChainArith { chain_length: usize, modulus: u32, ops: Vec<Op> },
    Channel { p0: f64, p_max: f64, tau: f64, max_len: usize, expectation_mode: bool },
}

impl EnvConfig {
    fn default_for(kind: &str) -> Option<Self> {
        match kind {
            "chain_arith" => Some(EnvConfig::ChainArith { chain_length: 6, modulus: 10, ops: vec![Op::Add] }),
            "channel" => {
                Some(EnvConfig::Channel { p0: 0.2, p_max: 0.9, tau: 8.0, max_len: 32, expectation_mode: true })
            }
            _ => None,
        }
    }

    pub fn build(&self) -> Result<Environment, EnvError> {
        match self {
            EnvConfig::ChainArith { chain_length, modulus, ops } => {
                Environment::chain(ChainArithSpec::new(*chain_length, *modulus, ops.clone())?)
            }
            EnvConfig::Channel { p0, p_max, tau, max_len, expectation_mode } => {
                Environment::channel(ChannelSpec::new(*p0, *p_max, *tau, *max_len, *expectation_mode)?)
            }
        }
    }
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Steps between greedy evaluations; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval_tasks: usize,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub env: EnvConfig,
    pub train: DuetConfig,
    pub capable: ModelConfig,
    pub light: ModelConfig,
    pub costs: CostModels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub const_lambda: Option<ConstLambdaConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thinkprune: Option<ThinkPruneSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lgrpo: Option<LgrpoConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<TruncationConfig>,
}

/// Command-line values that take precedence over the document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    parse_config_with(text, &Overrides::default())
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    parse_config_with(&std::fs::read_to_string(path)?, overrides)
}

/// The built-in configuration of a preset on the default chain task.
pub fn default_config(overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    parse_config_with("[env]\nkind = \"chain_arith\"\n", overrides)
}

fn schema_error(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Schema { path: path.into(), message: message.into() }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config types serialize to JSON")
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn str_field<'a>(doc: &'a Map<String, Value>, key: &str, path: &str) -> Result<Option<&'a str>, ConfigError> {
    match doc.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(schema_error(path, "expected a string")),
    }
}

pub fn parse_config_with(text: &str, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let Value::Object(mut doc) = to_value(&table) else {
        unreachable!("a TOML document is a table")
    };
    if let Some(p) = overrides.preset {
        doc.insert("preset".into(), Value::String(p.name().into()));
    }
    if let Some(s) = overrides.seed {
        doc.insert("seed".into(), Value::from(s));
    }
    if let Some(o) = &overrides.out_dir {
        doc.insert("out_dir".into(), Value::String(o.to_string_lossy().into_owned()));
    }

    let preset = match str_field(&doc, "preset", "preset")? {
        None => Preset::Paper,
        Some(name) => Preset::parse(name).ok_or_else(|| schema_error("preset", format!("unknown preset {name:?}")))?,
    };
    let variant = match str_field(&doc, "variant", "variant")? {
        None => Variant::Duet,
        Some(name) => Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| schema_error("variant", format!("unknown variant {name:?}")))?,
    };
    let env_doc = match doc.get("env") {
        Some(Value::Object(e)) => e,
        Some(_) => return Err(schema_error("env", "expected a table")),
        None => return Err(schema_error("env", "missing required table")),
    };
    let kind = str_field(env_doc, "kind", "env.kind")?.ok_or_else(|| schema_error("env.kind", "missing field"))?;
    let env_default =
        EnvConfig::default_for(kind).ok_or_else(|| schema_error("env.kind", format!("unknown environment {kind:?}")))?;
    if let Some(Value::Object(train)) = doc.get("train") {
        if train.contains_key("seed") {
            return Err(schema_error("train.seed", "set the run seed at the top level"));
        }
    }
    for section in VARIANT_SECTIONS {
        if doc.contains_key(section) && variant.section() != Some(section) {
            return Err(schema_error(section, format!("only allowed with variant = \"{section}\"")));
        }
    }

    let capable_default = match (&env_default, env_doc.get("max_len").and_then(Value::as_u64)) {
        (EnvConfig::Channel { .. }, Some(n)) => ModelConfig::length_only(n as usize),
        (EnvConfig::Channel { max_len, .. }, None) => ModelConfig::length_only(*max_len),
        _ => ModelConfig::capable(),
    };
    let eval_every = preset.eval_every();
    let defaults = RunConfig {
        preset,
        variant,
        seed: 0,
        out_dir: None,
        eval_every,
        eval_tasks: 500,
        checkpoint_every: eval_every,
        env: env_default,
        train: preset.duet(),
        capable: capable_default,
        light: ModelConfig::light(),
        costs: CostModels::default(),
        const_lambda: (variant == Variant::ConstLambda).then_some(ConstLambdaConfig { lambda: 0.5 }),
        thinkprune: (variant == Variant::Thinkprune).then(|| preset.thinkprune()),
        lgrpo: (variant == Variant::Lgrpo).then(LgrpoConfig::default),
        truncation: (variant == Variant::Truncation)
            .then(|| TruncationConfig { budget: preset.duet().budget.round() as usize }),
    };
    let mut merged = to_value(&defaults);
    merge(&mut merged, Value::Object(doc));

    let mut cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        schema_error(if path == "." { String::new() } else { path }, e.into_inner().to_string())
    })?;
    cfg.train.seed = cfg.seed;
    let errors = cfg.field_errors();
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(errors))
    }
}

impl RunConfig {
    /// Every range violation, each tagged with its dotted path.
    pub fn field_errors(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, path: &str, msg: &str| {
            if !ok {
                errs.push(FieldError { path: path.into(), message: msg.into() });
            }
        };
        let t = &self.train;
        let finite_pos = |x: f64| x > 0.0 && x.is_finite();
        check(t.batch_size >= 1, "train.batch_size", "must be >= 1");
        check(t.rollouts >= 2, "train.rollouts", "must be >= 2");
        check(finite_pos(t.lr_capable), "train.lr_capable", "must be positive");
        check(finite_pos(t.lr_light), "train.lr_light", "must be positive");
        check(t.kl_coef >= 0.0 && t.kl_coef.is_finite(), "train.kl_coef", "must be >= 0");
        check((0.0..=1.0).contains(&t.lambda0), "train.lambda0", "must lie in [0, 1]");
        check(finite_pos(t.eta), "train.eta", "must be positive");
        check(finite_pos(t.budget), "train.budget", "must be positive");
        check(finite_pos(t.temperature_train), "train.temperature_train", "must be positive");
        check(t.temperature_eval >= 0.0 && t.temperature_eval.is_finite(), "train.temperature_eval", "must be >= 0");
        check(t.baseline_samples >= 1, "train.baseline_samples", "must be >= 1");
        check(finite_pos(t.advantage.eps), "train.advantage.eps", "must be positive");
        check(self.eval_tasks >= 1, "eval_tasks", "must be >= 1");
        for (name, m) in [("capable", &self.capable), ("light", &self.light)] {
            check(m.position_buckets >= 1, &format!("{name}.position_buckets"), "must be >= 1");
            check(m.max_gen_len >= 1, &format!("{name}.max_gen_len"), "must be >= 1");
            for (field, v) in [("answer_bias", m.answer_bias), ("copy_bias", m.copy_bias), ("stop_bias", m.stop_bias)] {
                check(v.is_finite(), &format!("{name}.{field}"), "must be finite");
            }
        }
        for (name, f) in [("costs.capable", &self.costs.capable), ("costs.light", &self.costs.light)] {
            check(f.validate().is_ok(), name, "params, layers and hidden must be positive");
        }
        if let Some(c) = &self.const_lambda {
            check((0.0..=1.0).contains(&c.lambda), "const_lambda.lambda", "must lie in [0, 1]");
        }
        if let Some(s) = &self.thinkprune {
            if let Err(m) = s.validate() {
                check(false, "thinkprune", &m);
            }
        }
        if let Some(l) = &self.lgrpo {
            check(l.beta >= 0.0 && l.beta.is_finite(), "lgrpo.beta", "must be >= 0");
        }
        if let Err(e) = self.env.build() {
            check(false, "env", &e.to_string());
        }
        if let EnvConfig::Channel { .. } = self.env {
            check(
                !matches!(self.variant, Variant::Thinkprune | Variant::Lgrpo | Variant::Truncation),
                "variant",
                "needs a chain_arith environment",
            );
        }
        errs
    }

    pub fn environment(&self) -> Result<Environment, EnvError> {
        self.env.build()
    }

    /// Training hyperparameters after the variant's switches are applied.
    pub fn effective_train(&self) -> DuetConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        match self.variant {
            Variant::NoMu => t.use_marginal_utility = false,
            Variant::ConstLambda => {
                t.adaptive_schedule = false;
                t.lambda0 = self.const_lambda.map(|c| c.lambda).unwrap_or(0.5);
            }
            Variant::FixM => t.train_light = false,
            _ => {}
        }
        t
    }

    pub fn algorithm(&self) -> Algorithm {
        match self.variant {
            Variant::Single | Variant::Truncation => Algorithm::Single(SingleShaping::LengthPenalty),
            Variant::Thinkprune => {
                Algorithm::Single(SingleShaping::ThinkPrune(self.thinkprune.unwrap_or(self.preset.thinkprune())))
            }
            Variant::Lgrpo => Algorithm::Single(SingleShaping::Lgrpo(self.lgrpo.unwrap_or_default())),
            _ => Algorithm::Duet,
        }
    }

    /// Evaluation mode matching how the variant answers.
    pub fn eval_mode(&self) -> EvalMode {
        match self.variant {
            Variant::Truncation => EvalMode::Truncation(
                self.truncation.map(|t| t.budget).unwrap_or(self.train.budget.round() as usize),
            ),
            v if v.is_single_model() => EvalMode::LargeAlone,
            _ => EvalMode::Duet,
        }
    }

    /// SHA-256 over the canonical JSON form, ignoring the output directory.
    pub fn digest(&self) -> String {
        let mut v = to_value(self);
        if let Value::Object(m) = &mut v {
            m.remove("out_dir");
        }
        hex(&Sha256::digest(serde_json::to_vec(&v).expect("JSON value serializes")))
    }

    /// The resolved configuration as a TOML document that parses back to
    /// itself.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_channel_config_gets_documented_defaults() {
        let cfg = parse_config("[env]\nkind = \"channel\"\n").unwrap();
        assert_eq!(cfg.train.eta, 0.01);
        assert_eq!(cfg.train.lambda0, 0.0);
        assert_eq!(cfg.train.rollouts, 4);
        assert_eq!(cfg.variant, Variant::Duet);
        assert_eq!(cfg.capable, ModelConfig::length_only(32));
    }

    #[test]
    fn negative_eta_names_the_field() {
        let err = parse_config("[env]\nkind = \"channel\"\n[train]\neta = -1.0\n").unwrap_err();
        assert_eq!(err.paths(), vec!["train.eta".to_string()]);
    }

    #[test]
    fn all_range_errors_are_listed() {
        let err = parse_config("[env]\nkind = \"channel\"\n[train]\neta = -1.0\nrollouts = 1\n").unwrap_err();
        let paths = err.paths();
        assert!(paths.contains(&"train.eta".into()) && paths.contains(&"train.rollouts".into()));
    }

    #[test]
    fn duplicate_and_unknown_keys_are_rejected() {
        let dup = parse_config("seed = 1\nseed = 2\n[env]\nkind = \"channel\"\n");
        assert!(matches!(dup, Err(ConfigError::Parse(_))));
        let unknown = parse_config("[env]\nkind = \"channel\"\n[train]\netta = 0.1\n").unwrap_err();
        assert!(unknown.to_string().contains("etta"), "{unknown}");
        assert_eq!(unknown.paths(), vec!["train.etta".to_string()]);
        let top = parse_config("colour = 1\n[env]\nkind = \"channel\"\n").unwrap_err();
        assert!(top.to_string().contains("colour"));
    }

    #[test]
    fn variant_sections_follow_the_variant() {
        let bad = parse_config("[env]\nkind = \"chain_arith\"\n[lgrpo]\nbeta = 0.2\n").unwrap_err();
        assert_eq!(bad.paths(), vec!["lgrpo".to_string()]);
        let ok = parse_config("variant = \"lgrpo\"\n[env]\nkind = \"chain_arith\"\n[lgrpo]\nbeta = 0.2\n").unwrap();
        assert_eq!(ok.lgrpo, Some(LgrpoConfig { beta: 0.2 }));
        let filled = parse_config("variant = \"const_lambda\"\n[env]\nkind = \"channel\"\n").unwrap();
        assert_eq!(filled.const_lambda, Some(ConstLambdaConfig { lambda: 0.5 }));
        assert!(!filled.effective_train().adaptive_schedule);
        assert_eq!(filled.effective_train().lambda0, 0.5);
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let cfg = parse_config_with(
            "variant = \"thinkprune\"\n[env]\nkind = \"chain_arith\"\nops = [\"add\", \"mul\"]\n",
            &Overrides { preset: Some(Preset::Desk), seed: Some(9), out_dir: Some("x".into()) },
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.thinkprune, Some(ThinkPruneSchedule::DESK));
        assert_eq!(parse_config(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn digest_tracks_semantic_fields_only() {
        let base = parse_config("[env]\nkind = \"channel\"\n").unwrap();
        let mut moved = base.clone();
        moved.out_dir = Some("elsewhere".into());
        assert_eq!(base.digest(), moved.digest());
        let mut edited = base.clone();
        edited.train.eta = 0.02;
        assert_ne!(base.digest(), edited.digest());
        let mut reseeded = base.clone();
        reseeded.seed = 1;
        assert_ne!(base.digest(), reseeded.digest());
    }

    #[test]
    fn missing_env_is_a_schema_error() {
        assert_eq!(parse_config("seed = 3\n").unwrap_err().paths(), vec!["env".to_string()]);
        assert_eq!(parse_config("[env]\nkind = \"maze\"\n").unwrap_err().paths(), vec!["env.kind".to_string()]);
    }
}
