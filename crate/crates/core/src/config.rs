//! Experiment configuration: a line-oriented `key = value` file. Lists are
//! comma-separated and `#` starts a comment. Every omitted key keeps its
//! default; unknown keys are rejected.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::calinet::{Activation, NetMode, TrainConfig, DEFAULT_EPSILON};
use crate::channel::{ScenarioKind, TanhMode};
use crate::error::{CalibError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Dnn,
    Argos,
    LsDiag,
    LsFull,
    Crb,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Dnn,
        Method::Argos,
        Method::LsDiag,
        Method::LsFull,
        Method::Crb,
    ];

    /// Name used in configs and on the command line.
    pub fn key(&self) -> &'static str {
        match self {
            Method::Dnn => "dnn",
            Method::Argos => "argos",
            Method::LsDiag => "ls_diag",
            Method::LsFull => "ls_full",
            Method::Crb => "crb",
        }
    }

    /// Label written to reports.
    pub fn label(&self) -> &'static str {
        match self {
            Method::Dnn => "DNN",
            Method::Argos => "Argos",
            Method::LsDiag => "LS-diag (NPC-class)",
            Method::LsFull => "LS-full",
            Method::Crb => "CRB",
        }
    }

    /// Baselines and the bound assume a linear UL→DL relationship.
    pub fn requires_linear(&self) -> bool {
        !matches!(self, Method::Dnn)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Method {
    type Err = CalibError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| CalibError::invalid(format!("unknown method `{s}`")))
    }
}

/// Parses a comma-separated method list, e.g. `dnn,ls_full`.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let methods = list
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Method>>>()?;
    if methods.is_empty() {
        return Err(CalibError::invalid("method list is empty"));
    }
    Ok(methods)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub m: usize,
    pub n: usize,
    /// Pairs per dataset (training and held-out together).
    pub p: usize,
    pub scenario: ScenarioKind,
    pub crosstalk: f64,
    pub tanh_mode: TanhMode,
    pub snr_grid_db: Vec<f64>,
    /// SNR of the training pairs when it differs from the operating SNR.
    pub train_snr_db: Option<f64>,
    /// Train one network per trial on pairs with SNRs drawn across the grid.
    pub train_once_mixed_snr: bool,
    pub trials: usize,
    pub methods: Vec<Method>,
    /// Reject baselines on nonlinear scenarios instead of running them.
    pub strict: bool,
    pub reference_antenna: usize,
    pub master_seed: u64,
    pub output_path: String,

    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub train_seed: u64,
    pub hidden_dims: Vec<usize>,
    pub output_activation: Activation,
    /// Target scaling for a tanh output layer.
    pub target_scale: f64,
    pub net_mode: NetMode,

    pub convergence_snr_db: Vec<f64>,
    pub suite_scenarios: Vec<ScenarioKind>,
    pub trace_antenna: usize,
    pub trace_user: usize,
    pub trace_snr_db: f64,
    pub trace_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            m: 32,
            n: 4,
            p: 10240,
            scenario: ScenarioKind::LinearTdd,
            crosstalk: 1.0,
            tanh_mode: TanhMode::Split,
            snr_grid_db: (0..=8).map(|i| 5.0 * i as f64).collect(),
            train_snr_db: None,
            train_once_mixed_snr: false,
            trials: 100,
            methods: Method::ALL.to_vec(),
            strict: true,
            reference_antenna: 1,
            master_seed: 1,
            output_path: "report.csv".into(),
            learning_rate: 0.01,
            epochs: 256,
            batch_size: 4,
            validation_fraction: 0.4,
            train_seed: 1,
            hidden_dims: vec![128, 128, 128],
            output_activation: Activation::Linear,
            target_scale: 1.0 / 3.0,
            net_mode: NetMode::PerUser,
            convergence_snr_db: vec![10.0, 20.0, 30.0],
            suite_scenarios: vec![
                ScenarioKind::LinearSynthetic,
                ScenarioKind::TanhType,
                ScenarioKind::PowerType,
            ],
            trace_antenna: 2,
            trace_user: 3,
            trace_snr_db: 20.0,
            trace_samples: 50,
        }
    }
}

fn config_err(field: &str, message: impl Into<String>) -> CalibError {
    CalibError::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| format!("`{s}` is not valid here")))
        .collect()
}

fn parse_scalar<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("`{value}` is not valid here"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{value}` is not true or false")),
    }
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CalibError::Parse {
                line: line_no,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CalibError::Parse {
                    line: line_no,
                    message: format!("`{key}` is set twice"),
                });
            }
            cfg.set(key, value).map_err(|message| match message {
                SetError::Unknown => config_err(key, format!("unknown key (line {line_no})")),
                SetError::Value(m) => CalibError::Parse {
                    line: line_no,
                    message: format!("{key}: {m}"),
                },
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CalibError::Io(format!("{}: {e}", path.display())))?;
        ExperimentConfig::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), SetError> {
        match key {
            "m" => self.m = parse_scalar(v)?,
            "n" => self.n = parse_scalar(v)?,
            "p" => self.p = parse_scalar(v)?,
            "scenario" => self.scenario = parse_scalar(v)?,
            "crosstalk" => self.crosstalk = parse_scalar(v)?,
            "tanh_mode" => self.tanh_mode = parse_scalar(v)?,
            "snr_grid_db" => self.snr_grid_db = parse_list(v)?,
            "train_snr_db" => {
                self.train_snr_db = if v.is_empty() {
                    None
                } else {
                    Some(parse_scalar(v)?)
                }
            }
            "train_once_mixed_snr" => self.train_once_mixed_snr = parse_bool(v)?,
            "trials" => self.trials = parse_scalar(v)?,
            "methods" => self.methods = parse_list(v)?,
            "strict" => self.strict = parse_bool(v)?,
            "reference_antenna" => self.reference_antenna = parse_scalar(v)?,
            "master_seed" => self.master_seed = parse_scalar(v)?,
            "output_path" => self.output_path = v.to_string(),
            "learning_rate" => self.learning_rate = parse_scalar(v)?,
            "epochs" => self.epochs = parse_scalar(v)?,
            "batch_size" => self.batch_size = parse_scalar(v)?,
            "validation_fraction" => self.validation_fraction = parse_scalar(v)?,
            "train_seed" => self.train_seed = parse_scalar(v)?,
            "hidden_dims" => self.hidden_dims = parse_list(v)?,
            "output_activation" => self.output_activation = parse_scalar(v)?,
            "target_scale" => self.target_scale = parse_scalar(v)?,
            "net_mode" => self.net_mode = parse_scalar(v)?,
            "convergence_snr_db" => self.convergence_snr_db = parse_list(v)?,
            "suite_scenarios" => self.suite_scenarios = parse_list(v)?,
            "trace_antenna" => self.trace_antenna = parse_scalar(v)?,
            "trace_user" => self.trace_user = parse_scalar(v)?,
            "trace_snr_db" => self.trace_snr_db = parse_scalar(v)?,
            "trace_samples" => self.trace_samples = parse_scalar(v)?,
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(config_err(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("m", self.m)?;
        positive("n", self.n)?;
        positive("trials", self.trials)?;
        positive("epochs", self.epochs)?;
        positive("batch_size", self.batch_size)?;
        positive("trace_samples", self.trace_samples)?;
        if self.p < 2 {
            return Err(config_err("p", "need at least 2 pairs to split"));
        }
        if !(0.0..=1.0).contains(&self.crosstalk) {
            return Err(config_err("crosstalk", "must lie in [0, 1]"));
        }
        check_grid("snr_grid_db", &self.snr_grid_db)?;
        check_grid("convergence_snr_db", &self.convergence_snr_db)?;
        if let Some(db) = self.train_snr_db {
            if !db.is_finite() {
                return Err(config_err("train_snr_db", "must be finite"));
            }
        }
        if !self.trace_snr_db.is_finite() {
            return Err(config_err("trace_snr_db", "must be finite"));
        }
        if self.methods.is_empty() {
            return Err(config_err("methods", "no methods selected"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(config_err("methods", format!("`{m}` listed twice")));
            }
        }
        if self.suite_scenarios.is_empty() {
            return Err(config_err("suite_scenarios", "no scenarios selected"));
        }
        if self.reference_antenna == 0 || self.reference_antenna > self.m {
            return Err(config_err("reference_antenna", format!("must lie in [1, {}]", self.m)));
        }
        if self.trace_antenna == 0 || self.trace_antenna > self.m {
            return Err(config_err("trace_antenna", format!("must lie in [1, {}]", self.m)));
        }
        if self.trace_user == 0 || self.trace_user > self.n {
            return Err(config_err("trace_user", format!("must lie in [1, {}]", self.n)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("learning_rate", "must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(config_err("validation_fraction", "must lie in (0, 1)"));
        }
        if !(self.target_scale > 0.0 && self.target_scale.is_finite()) {
            return Err(config_err("target_scale", "must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(config_err("hidden_dims", "widths must be positive"));
        }
        Ok(())
    }

    /// Rejects method/scenario combinations the baselines cannot handle.
    pub fn check_methods_for(&self, scenario: ScenarioKind) -> Result<()> {
        let linear = matches!(scenario, ScenarioKind::LinearTdd | ScenarioKind::LinearSynthetic);
        if self.strict && !linear {
            if let Some(m) = self.methods.iter().find(|m| m.requires_linear()) {
                return Err(config_err(
                    "methods",
                    format!("`{m}` assumes a linear model and cannot run on {scenario}"),
                ));
            }
        }
        Ok(())
    }

    /// Network training settings. The target scale only applies to a tanh
    /// output layer.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            validation_fraction: self.validation_fraction,
            seed: self.train_seed,
            hidden_dims: self.hidden_dims.clone(),
            output_activation: self.output_activation,
            target_scale: match self.output_activation {
                Activation::Tanh => self.target_scale,
                Activation::Linear => 1.0,
            },
            mode: self.net_mode,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// Canonical text form; parsing it yields an identical config.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("m", self.m.to_string());
        kv("n", self.n.to_string());
        kv("p", self.p.to_string());
        kv("scenario", self.scenario.to_string());
        kv("crosstalk", self.crosstalk.to_string());
        kv("tanh_mode", self.tanh_mode.to_string());
        kv("snr_grid_db", join(&self.snr_grid_db));
        kv(
            "train_snr_db",
            self.train_snr_db.map_or(String::new(), |v| v.to_string()),
        );
        kv("train_once_mixed_snr", self.train_once_mixed_snr.to_string());
        kv("trials", self.trials.to_string());
        kv("methods", join(&self.methods));
        kv("strict", self.strict.to_string());
        kv("reference_antenna", self.reference_antenna.to_string());
        kv("master_seed", self.master_seed.to_string());
        kv("output_path", self.output_path.clone());
        kv("learning_rate", self.learning_rate.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("validation_fraction", self.validation_fraction.to_string());
        kv("train_seed", self.train_seed.to_string());
        kv("hidden_dims", join(&self.hidden_dims));
        kv("output_activation", self.output_activation.to_string());
        kv("target_scale", self.target_scale.to_string());
        kv("net_mode", self.net_mode.to_string());
        kv("convergence_snr_db", join(&self.convergence_snr_db));
        kv("suite_scenarios", join(&self.suite_scenarios));
        kv("trace_antenna", self.trace_antenna.to_string());
        kv("trace_user", self.trace_user.to_string());
        kv("trace_snr_db", self.trace_snr_db.to_string());
        kv("trace_samples", self.trace_samples.to_string());
        s
    }
}

fn check_grid(field: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(config_err(field, "must not be empty"));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(config_err(field, "values must be finite"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(config_err(field, "must be strictly increasing"));
    }
    Ok(())
}

enum SetError {
    Unknown,
    Value(String),
}

impl From<String> for SetError {
    fn from(m: String) -> Self {
        SetError::Value(m)
    }
}
