//! Experiment configuration: a flat `key = value` text format with dotted
//! section keys.
//!
//! Grammar, in full:
//!   - one `key = value` pair per line;
//!   - `#` starts a comment (whole line or trailing);
//!   - blank lines are ignored;
//!   - keys are dotted lowercase identifiers, values are bare tokens
//!     (numbers, mode names, paths) — no quoting;
//!   - an empty value unsets an optional key.
//!
//! Every key has a default; `effective_echo` renders the complete effective
//! configuration, which the harness writes next to the outputs of every run.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ddp::DdpConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config line {line} is not `key = value`: {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?} ({expected})")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    DpOnly,
    SecaggOnly,
    DpSecaggDdp,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "BASELINE",
            Mode::DpOnly => "DP_ONLY",
            Mode::SecaggOnly => "SECAGG_ONLY",
            Mode::DpSecaggDdp => "DP_SECAGG_DDP",
        }
    }

    fn parse(s: &str) -> Option<Mode> {
        match s {
            "BASELINE" => Some(Mode::Baseline),
            "DP_ONLY" => Some(Mode::DpOnly),
            "SECAGG_ONLY" => Some(Mode::SecaggOnly),
            "DP_SECAGG_DDP" => Some(Mode::DpSecaggDdp),
            _ => None,
        }
    }

    /// Does the aggregation path run over the masked integer wire?
    pub fn uses_secagg(&self) -> bool {
        matches!(self, Mode::SecaggOnly | Mode::DpSecaggDdp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub rounds: u64,
    pub population_size: usize,
    pub report_goal: usize,
    pub min_aggregation: usize,
    pub min_separation: u64,
    pub dropout_rate: f64,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub top_k: usize,
    pub client_epochs: u32,
    pub client_lr: f64,
    pub server_lr: f64,
    pub server_momentum: f64,
    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    pub corpus_path: Option<PathBuf>,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub tree_restarts: u64,
    pub budget_rho: Option<f64>,
    pub delta: f64,
    pub ddp_scale: f64,
    pub ddp_field_bits: u8,
    pub ddp_noise_mu: f64,
    pub secagg_degree_k: Option<usize>,
    pub secagg_threshold_t: Option<usize>,
    pub secagg_transcript: bool,
    pub compare_tolerance: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Baseline,
            seed: 42,
            rounds: 20,
            population_size: 100,
            report_goal: 20,
            min_aggregation: 10,
            min_separation: 4,
            dropout_rate: 0.0,
            vocab_size: 50,
            embed_dim: 16,
            top_k: 3,
            client_epochs: 1,
            client_lr: 0.5,
            server_lr: 1.0,
            server_momentum: 0.0,
            pretrain_steps: 0,
            pretrain_lr: 0.1,
            corpus_path: None,
            clip_norm: 1.0,
            noise_multiplier: 0.0,
            tree_restarts: 1,
            budget_rho: None,
            delta: 1e-10,
            ddp_scale: 65536.0,
            ddp_field_bits: 32,
            ddp_noise_mu: 0.0,
            secagg_degree_k: None,
            secagg_threshold_t: None,
            secagg_transcript: false,
            compare_tolerance: 0.02,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: idx + 1, text: raw.to_string() });
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "mode" => {
                self.mode = Mode::parse(value).ok_or_else(|| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    expected: "one of BASELINE, DP_ONLY, SECAGG_ONLY, DP_SECAGG_DDP",
                })?;
            }
            "seed" => self.seed = parse_num(key, value, "unsigned integer")?,
            "rounds" => self.rounds = parse_num(key, value, "unsigned integer")?,
            "population.size" => self.population_size = parse_num(key, value, "unsigned integer")?,
            "cohort.report_goal" => self.report_goal = parse_num(key, value, "unsigned integer")?,
            "cohort.min_aggregation" => self.min_aggregation = parse_num(key, value, "unsigned integer")?,
            "cohort.min_separation" => self.min_separation = parse_num(key, value, "unsigned integer")?,
            "cohort.dropout_rate" => self.dropout_rate = parse_num(key, value, "real in [0,1)")?,
            "model.vocab_size" => self.vocab_size = parse_num(key, value, "unsigned integer")?,
            "model.embed_dim" => self.embed_dim = parse_num(key, value, "unsigned integer")?,
            "eval.top_k" => self.top_k = parse_num(key, value, "unsigned integer")?,
            "client.epochs" => self.client_epochs = parse_num(key, value, "unsigned integer")?,
            "client.lr" => self.client_lr = parse_num(key, value, "nonnegative real")?,
            "server.lr" => self.server_lr = parse_num(key, value, "real")?,
            "server.momentum" => self.server_momentum = parse_num(key, value, "real in [0,1)")?,
            "pretrain.steps" => self.pretrain_steps = parse_num(key, value, "unsigned integer")?,
            "pretrain.lr" => self.pretrain_lr = parse_num(key, value, "nonnegative real")?,
            "corpus.path" => {
                self.corpus_path = if value.is_empty() { None } else { Some(PathBuf::from(value)) };
            }
            "dp.clip_norm" => self.clip_norm = parse_num(key, value, "positive real")?,
            "dp.noise_multiplier" => self.noise_multiplier = parse_num(key, value, "nonnegative real")?,
            "dp.tree_restarts" => self.tree_restarts = parse_num(key, value, "unsigned integer >= 1")?,
            "dp.budget_rho" => {
                self.budget_rho =
                    if value.is_empty() { None } else { Some(parse_num(key, value, "positive real")?) };
            }
            "dp.delta" => self.delta = parse_num(key, value, "real in (0,1)")?,
            "ddp.scale" => self.ddp_scale = parse_num(key, value, "positive real")?,
            "ddp.field_bits" => self.ddp_field_bits = parse_num(key, value, "16 or 32")?,
            "ddp.noise_mu" => self.ddp_noise_mu = parse_num(key, value, "nonnegative real")?,
            "secagg.degree_k" => {
                self.secagg_degree_k =
                    if value.is_empty() { None } else { Some(parse_num(key, value, "unsigned integer")?) };
            }
            "secagg.threshold_t" => {
                self.secagg_threshold_t =
                    if value.is_empty() { None } else { Some(parse_num(key, value, "unsigned integer")?) };
            }
            "secagg.transcript" => {
                self.secagg_transcript = match value {
                    "true" => true,
                    "false" => false,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "true or false",
                        })
                    }
                };
            }
            "compare.tolerance" => self.compare_tolerance = parse_num(key, value, "nonnegative real")?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Effective degree and threshold for the SecAgg graph over a cohort of
    /// `report_goal`: k defaults to min(n-1, 50), t to min(ceil(2n/3), k).
    pub fn secagg_params(&self) -> (usize, usize) {
        let n = self.report_goal;
        let k = self.secagg_degree_k.unwrap_or_else(|| n.saturating_sub(1).clamp(1, 50));
        let t = self.secagg_threshold_t.unwrap_or_else(|| (2 * n).div_ceil(3).min(k).max(1));
        (k, t)
    }

    pub fn ddp_config(&self) -> DdpConfig {
        DdpConfig {
            clip_norm: self.clip_norm,
            scale: self.ddp_scale,
            field_bits: self.ddp_field_bits,
            noise_mu: self.ddp_noise_mu,
            expected_clients: self.report_goal as u64,
            min_clients: self.min_aggregation as u64,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.rounds == 0 {
            return fail("rounds must be >= 1".into());
        }
        if self.min_aggregation == 0 || self.report_goal < self.min_aggregation {
            return fail(format!(
                "cohort.report_goal ({}) must be >= cohort.min_aggregation ({}) >= 1",
                self.report_goal, self.min_aggregation
            ));
        }
        if self.population_size < self.report_goal {
            return fail(format!(
                "population.size ({}) must be >= cohort.report_goal ({})",
                self.population_size, self.report_goal
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("cohort.dropout_rate ({}) must lie in [0, 1)", self.dropout_rate));
        }
        if self.vocab_size < 2 {
            return fail(format!("model.vocab_size ({}) must be >= 2", self.vocab_size));
        }
        if self.embed_dim == 0 {
            return fail("model.embed_dim must be >= 1".into());
        }
        if self.top_k == 0 || self.top_k > self.vocab_size {
            return fail(format!(
                "eval.top_k ({}) must lie in [1, model.vocab_size ({})]",
                self.top_k, self.vocab_size
            ));
        }
        if self.client_epochs == 0 {
            return fail("client.epochs must be >= 1".into());
        }
        if self.client_lr < 0.0 || self.pretrain_lr < 0.0 {
            return fail("client.lr and pretrain.lr must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.server_momentum) {
            return fail(format!("server.momentum ({}) must lie in [0, 1)", self.server_momentum));
        }
        if !(self.clip_norm > 0.0) {
            return fail(format!("dp.clip_norm ({}) must be positive", self.clip_norm));
        }
        if self.noise_multiplier < 0.0 {
            return fail(format!("dp.noise_multiplier ({}) must be >= 0", self.noise_multiplier));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail(format!("dp.delta ({}) must lie in (0, 1)", self.delta));
        }
        if self.tree_restarts == 0 || self.tree_restarts > self.rounds {
            return fail(format!(
                "dp.tree_restarts ({}) must lie in [1, rounds ({})]",
                self.tree_restarts, self.rounds
            ));
        }
        if let Some(b) = self.budget_rho {
            if !(b > 0.0) {
                return fail(format!("dp.budget_rho ({b}) must be positive when set"));
            }
        }
        if self.ddp_noise_mu < 0.0 {
            return fail(format!("ddp.noise_mu ({}) must be >= 0", self.ddp_noise_mu));
        }
        if self.compare_tolerance < 0.0 {
            return fail(format!("compare.tolerance ({}) must be >= 0", self.compare_tolerance));
        }

        match self.mode {
            Mode::Baseline | Mode::SecaggOnly => {
                if self.noise_multiplier != 0.0 {
                    return fail(format!(
                        "mode {} requires dp.noise_multiplier = 0, got {}",
                        self.mode.as_str(),
                        self.noise_multiplier
                    ));
                }
                if self.ddp_noise_mu != 0.0 {
                    return fail(format!(
                        "mode {} requires ddp.noise_mu = 0, got {}",
                        self.mode.as_str(),
                        self.ddp_noise_mu
                    ));
                }
            }
            Mode::DpOnly => {
                if !(self.noise_multiplier > 0.0) {
                    return fail("mode DP_ONLY requires dp.noise_multiplier > 0".into());
                }
                if self.ddp_noise_mu != 0.0 {
                    return fail(format!(
                        "mode DP_ONLY requires ddp.noise_mu = 0, got {}",
                        self.ddp_noise_mu
                    ));
                }
            }
            Mode::DpSecaggDdp => {}
        }

        if self.mode.uses_secagg() {
            let (k, t) = self.secagg_params();
            let n = self.report_goal;
            if n < 2 {
                return fail("SecAgg modes need cohort.report_goal >= 2".into());
            }
            if !(1 <= t && t <= k && k < n) {
                return fail(format!(
                    "SecAgg parameters need 1 <= secagg.threshold_t ({t}) <= secagg.degree_k ({k}) <= report_goal - 1 ({})",
                    n - 1
                ));
            }
            // Headroom: the n-client sum must not wrap mod q.
            if let Err(e) = self.ddp_config().validate() {
                return fail(e.to_string());
            }
        }
        Ok(())
    }

    /// Render the full effective configuration in config-file syntax.
    pub fn effective_echo(&self) -> String {
        let opt_u = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "mode = {}\n\
             seed = {}\n\
             rounds = {}\n\
             population.size = {}\n\
             cohort.report_goal = {}\n\
             cohort.min_aggregation = {}\n\
             cohort.min_separation = {}\n\
             cohort.dropout_rate = {}\n\
             model.vocab_size = {}\n\
             model.embed_dim = {}\n\
             eval.top_k = {}\n\
             client.epochs = {}\n\
             client.lr = {}\n\
             server.lr = {}\n\
             server.momentum = {}\n\
             pretrain.steps = {}\n\
             pretrain.lr = {}\n\
             corpus.path = {}\n\
             dp.clip_norm = {}\n\
             dp.noise_multiplier = {}\n\
             dp.tree_restarts = {}\n\
             dp.budget_rho = {}\n\
             dp.delta = {}\n\
             ddp.scale = {}\n\
             ddp.field_bits = {}\n\
             ddp.noise_mu = {}\n\
             secagg.degree_k = {}\n\
             secagg.threshold_t = {}\n\
             secagg.transcript = {}\n\
             compare.tolerance = {}\n",
            self.mode.as_str(),
            self.seed,
            self.rounds,
            self.population_size,
            self.report_goal,
            self.min_aggregation,
            self.min_separation,
            self.dropout_rate,
            self.vocab_size,
            self.embed_dim,
            self.top_k,
            self.client_epochs,
            self.client_lr,
            self.server_lr,
            self.server_momentum,
            self.pretrain_steps,
            self.pretrain_lr,
            self.corpus_path.as_deref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.clip_norm,
            self.noise_multiplier,
            self.tree_restarts,
            self.budget_rho.map(|b| b.to_string()).unwrap_or_default(),
            self.delta,
            self.ddp_scale,
            self.ddp_field_bits,
            self.ddp_noise_mu,
            opt_u(self.secagg_degree_k),
            opt_u(self.secagg_threshold_t),
            self.secagg_transcript,
            self.compare_tolerance,
        )
    }
}
