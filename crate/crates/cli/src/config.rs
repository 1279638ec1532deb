//! Experiment configuration: a TOML document with every section optional.
//!
//! ```toml
//! name = "bursty"
//!
//! [phy]
//! snr0_db = 8.0
//! modes = ["2dh3", "3dh3"]
//!
//! [[sensors]]
//! kind = "geometric"
//! q = 0.1
//! rate = 0.04
//!
//! [policy]
//! kind = ["opportunistic", "opportunistic_sleep"]
//! v = [10.0, 100.0, 1000.0]
//! tau = [1.0, 2.0, 5.0, 10.0]
//! ```

use std::fmt;
use std::path::Path;

use piconet_core::channel::{ChannelModel, DEFAULT_RICE_FACTOR_DB, DEFAULT_S_MIN};
use piconet_core::phy::{PhyModeSet, DEFAULT_CORRELATOR_MARGIN, DEFAULT_SNR0_DB};
use piconet_core::policy::PolicyKind;
use piconet_core::sim::ArrivalProcess;
use serde::{Deserialize, Serialize};

/// A config problem, with the 1-based line it points at when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhyConfig {
    pub snr0_db: f64,
    pub modes: Vec<String>,
    pub correlator_margin: u32,
    /// Simulations read success probabilities from a 0.005 dB table.
    pub tabulate: bool,
}

impl Default for PhyConfig {
    fn default() -> Self {
        Self {
            snr0_db: DEFAULT_SNR0_DB,
            modes: vec!["2dh3".into(), "3dh3".into()],
            correlator_margin: DEFAULT_CORRELATOR_MARGIN,
            tabulate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub rice_factor_db: f64,
    pub s_min: f64,
    pub mean_power: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { rice_factor_db: DEFAULT_RICE_FACTOR_DB, s_min: DEFAULT_S_MIN, mean_power: 1.0 }
    }
}

/// A scalar or a list in the document; always a list after parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x.clone()],
            OneOrMany::Many(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub kind: OneOrMany<PolicyKind>,
    pub v: Vec<f64>,
    pub p_max: f64,
    pub tau: OneOrMany<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: OneOrMany::One(PolicyKind::Opportunistic),
            v: vec![10.0, 100.0, 1000.0, 10000.0],
            p_max: 1e4,
            tau: OneOrMany::One(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub slots: u64,
    /// Defaults to a tenth of `slots`.
    pub warmup: Option<u64>,
    pub replicates: usize,
    pub seed: u64,
    pub trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { slots: 1_000_000, warmup: None, replicates: 5, seed: 1, trace: false }
    }
}

impl RunConfig {
    pub fn warmup(&self) -> u64 {
        self.warmup.unwrap_or(self.slots / 10)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    pub lambda: Vec<f64>,
    /// Each of this many sensors carries the same rate.
    pub sensors: usize,
    pub grid_per_dim: usize,
    pub n_samples: usize,
    pub screen_samples: usize,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            lambda: vec![0.1, 0.5, 1.0, 1.5, 2.0, 2.5],
            sensors: 1,
            grid_per_dim: 15,
            n_samples: 100_000,
            screen_samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhyCurvesConfig {
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub step_db: f64,
}

impl Default for PhyCurvesConfig {
    fn default() -> Self {
        Self { snr_db_min: -5.0, snr_db_max: 30.0, step_db: 0.5 }
    }
}

impl PhyCurvesConfig {
    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.snr_db_max - self.snr_db_min) / self.step_db + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.snr_db_min + self.step_db * i as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Output directory; `--out` takes precedence.
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub phy: PhyConfig,
    pub channel: ChannelConfig,
    pub sensors: Vec<ArrivalProcess>,
    pub policy: PolicyConfig,
    pub run: RunConfig,
    pub bounds: BoundsConfig,
    pub phy_curves: PhyCurvesConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            phy: PhyConfig::default(),
            channel: ChannelConfig::default(),
            sensors: Vec::new(),
            policy: PolicyConfig::default(),
            run: RunConfig::default(),
            bounds: BoundsConfig::default(),
            phy_curves: PhyCurvesConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// One simulated curve: a policy and, for the sleep policy, its `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curve {
    pub policy: PolicyKind,
    pub tau: f64,
}

impl Curve {
    pub fn label(&self) -> String {
        match self.policy {
            PolicyKind::OpportunisticSleep => format!("{}_tau{}", self.policy.label(), self.tau),
            p => p.label().to_string(),
        }
    }
}

impl ExperimentConfig {
    pub fn modes(&self) -> Result<PhyModeSet, ConfigError> {
        let labels: Vec<&str> = self.phy.modes.iter().map(String::as_str).collect();
        PhyModeSet::new(&labels, self.phy.snr0_db, self.phy.correlator_margin)
            .map_err(|e| ConfigError { line: None, column: None, message: e.to_string() })
    }

    pub fn channel_model(&self) -> Result<ChannelModel, ConfigError> {
        let c = &self.channel;
        ChannelModel::with_mean_power(c.rice_factor_db, c.s_min, c.mean_power)
            .map_err(|e| ConfigError { line: None, column: None, message: e.to_string() })
    }

    /// Policy kinds crossed with `tau` values; `tau` only splits the sleep policy.
    pub fn curves(&self) -> Vec<Curve> {
        let taus = self.policy.tau.to_vec();
        let mut out = Vec::new();
        for policy in self.policy.kind.to_vec() {
            match policy {
                PolicyKind::OpportunisticSleep => out.extend(taus.iter().map(|&tau| Curve { policy, tau })),
                _ => out.push(Curve { policy, tau: taus[0] }),
            }
        }
        out
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        line: None,
        column: None,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| from_toml_error(text, &e))?;
    validate(&cfg, text)?;
    Ok(cfg)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

fn from_toml_error(text: &str, e: &toml::de::Error) -> ConfigError {
    let (line, column) = match e.span() {
        Some(sp) => {
            let (l, c) = line_col(text, sp.start);
            (Some(l), Some(c))
        }
        None => (None, None),
    };
    let mut message = e.message().trim_end().to_string();
    if let Some(hint) = nearest_key_hint(&message) {
        message.push_str(&format!("; did you mean `{hint}`?"));
    }
    ConfigError { line, column, message }
}

/// For serde's "unknown field `x`, expected one of `a`, `b`" messages, the
/// closest expected name by edit distance.
fn nearest_key_hint(message: &str) -> Option<String> {
    if !message.starts_with("unknown field") && !message.starts_with("unknown variant") {
        return None;
    }
    let ticked: Vec<&str> = message.split('`').skip(1).step_by(2).collect();
    let (bad, candidates) = ticked.split_first()?;
    candidates
        .iter()
        .map(|c| (strsim::levenshtein(bad, c), *c))
        .min()
        .map(|(_, c)| c.to_string())
}

/// First line assigning `key` inside `section` (`""` for the top level,
/// `sensors#i` for the i-th sensor table), else the section header.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let (name, index) = match section.split_once('#') {
        Some((n, i)) => (n, i.parse::<usize>().ok()),
        None => (section, None),
    };
    let mut current = String::new();
    let mut seen = 0usize;
    let mut header_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if line.starts_with("[[") && current == name {
                seen += 1;
            }
        }
        let in_section = current == name && index.is_none_or(|k| seen == k + 1);
        if !in_section {
            continue;
        }
        if line.starts_with('[') {
            header_line = Some(i + 1);
        } else if let Some((lhs, _)) = line.split_once('=') {
            if lhs.trim() == key {
                return Some(i + 1);
            }
        }
    }
    header_line
}

fn range_error(text: &str, section: &str, key: &str, message: String) -> ConfigError {
    let path = match section.split_once('#') {
        _ if section.is_empty() => key.to_string(),
        Some((n, i)) => format!("{n}[{i}].{key}"),
        None => format!("{section}.{key}"),
    };
    ConfigError { line: locate(text, section, key), column: None, message: format!("{path}: {message}") }
}

fn validate(cfg: &ExperimentConfig, text: &str) -> Result<(), ConfigError> {
    let err = |section: &str, key: &str, msg: String| Err(range_error(text, section, key, msg));
    if !cfg.phy.snr0_db.is_finite() {
        return err("phy", "snr0_db", format!("must be a finite number, got {}", cfg.phy.snr0_db));
    }
    if cfg.phy.modes.is_empty() {
        return err("phy", "modes", "at least one mode is required".into());
    }
    if let Err(e) = cfg.modes() {
        return err("phy", "modes", e.message);
    }
    if let Err(e) = cfg.channel_model() {
        return err("channel", "rice_factor_db", e.message);
    }
    for (k, a) in cfg.sensors.iter().enumerate() {
        let key = match a {
            ArrivalProcess::Deterministic { period: 0, .. } => "period",
            ArrivalProcess::Deterministic { .. } => "size",
            ArrivalProcess::Geometric { q, .. } if !(*q > 0.0 && *q <= 1.0) => "q",
            ArrivalProcess::Geometric { .. } => "rate",
        };
        if let Err(e) = a.validate() {
            return err(&format!("sensors#{k}"), key, e);
        }
    }
    let p = &cfg.policy;
    if p.v.is_empty() {
        return err("policy", "v", "the V list is empty".into());
    }
    if let Some(v) = p.v.iter().find(|v| !(**v > 1.0) || !v.is_finite()) {
        return err("policy", "v", format!("every V must be a finite number above 1, got {v}"));
    }
    if p.kind.to_vec().is_empty() {
        return err("policy", "kind", "at least one policy is required".into());
    }
    let taus = p.tau.to_vec();
    if taus.is_empty() {
        return err("policy", "tau", "at least one tau is required".into());
    }
    if let Some(t) = taus.iter().find(|t| !(**t >= 1.0) || !t.is_finite()) {
        return err("policy", "tau", format!("tau must be at least 1, got {t}"));
    }
    let snr0 = 10f64.powf(cfg.phy.snr0_db / 10.0);
    if !(p.p_max > 0.0) || p.p_max * cfg.channel.s_min < snr0 {
        return err(
            "policy",
            "p_max",
            format!("p_max * s_min = {} must reach the NULL threshold {snr0}", p.p_max * cfg.channel.s_min),
        );
    }
    let r = &cfg.run;
    if r.slots == 0 || r.warmup() >= r.slots {
        return err("run", "slots", format!("slots ({}) must exceed warmup ({})", r.slots, r.warmup()));
    }
    if r.replicates == 0 {
        return err("run", "replicates", "at least one replicate is required".into());
    }
    let b = &cfg.bounds;
    if b.lambda.is_empty() {
        return err("bounds", "lambda", "the lambda list is empty".into());
    }
    if let Some(l) = b.lambda.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return err("bounds", "lambda", format!("rates must be non-negative, got {l}"));
    }
    if b.sensors == 0 {
        return err("bounds", "sensors", "at least one sensor is required".into());
    }
    if b.grid_per_dim < 2 {
        return err("bounds", "grid_per_dim", "needs at least 2 points".into());
    }
    if b.n_samples == 0 || b.screen_samples == 0 {
        return err("bounds", "n_samples", "sample counts must be positive".into());
    }
    let c = &cfg.phy_curves;
    if !(c.step_db > 0.0) || !(c.snr_db_max >= c.snr_db_min) || !c.snr_db_min.is_finite() || !c.snr_db_max.is_finite() {
        return err("phy_curves", "step_db", "needs snr_db_min <= snr_db_max and step_db > 0".into());
    }
    Ok(())
}
