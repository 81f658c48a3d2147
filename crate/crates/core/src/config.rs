//! Study configuration: variables, prompted environments, the query grid and
//! sampling parameters, validated once and then shared immutably.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::EndpointSpec;
use crate::oracle::OracleSpec;

/// Id of the implicit environment that adds no cohort text to prompts.
pub const DEFAULT_ENV: &str = "default";

const DECIMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("could not parse config: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub id: String,
    #[serde(default)]
    pub display_name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub modality: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub id: String,
    #[serde(default)]
    pub description: String,
    /// Variable id -> prompted population mean (z-score).
    #[serde(default)]
    pub shifted_means: BTreeMap<String, f64>,
}

impl Environment {
    pub fn default_env() -> Self {
        Self { id: DEFAULT_ENV.to_string(), description: String::new(), shifted_means: BTreeMap::new() }
    }

    /// True when the environment contributes nothing to a prompt.
    pub fn is_empty(&self) -> bool {
        self.description.trim().is_empty() && self.shifted_means.is_empty()
    }

    pub fn mean_of(&self, var: &str) -> f64 {
        self.shifted_means.get(var).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub core_half_span: f64,
    pub margin: f64,
    pub step: f64,
    pub anchor_offset: f64,
    pub ref_center_j: f64,
    pub center_k: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { core_half_span: 1.0, margin: 0.4, step: 0.2, anchor_offset: 0.5, ref_center_j: 0.0, center_k: 0.0 }
    }
}

impl GridSpec {
    pub fn half_span(&self) -> f64 {
        self.core_half_span + self.margin
    }

    /// Number of steps on each side of the center.
    fn steps_per_side(&self) -> usize {
        (self.half_span() / self.step).round() as usize
    }

    /// Values per axis, `2 * half_span / step + 1`.
    pub fn axis_len(&self) -> usize {
        2 * self.steps_per_side() + 1
    }

    /// Patient 1 and Patient 2 values, symmetric around the reference.
    pub fn anchors(&self) -> (f64, f64) {
        (round_tenth(self.ref_center_j - self.anchor_offset), round_tenth(self.ref_center_j + self.anchor_offset))
    }

    pub fn with_ref_center(&self, center: f64) -> Self {
        Self { ref_center_j: center, ..*self }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let fields = [
            ("grid.core_half_span", self.core_half_span),
            ("grid.margin", self.margin),
            ("grid.step", self.step),
            ("grid.anchor_offset", self.anchor_offset),
            ("grid.ref_center_j", self.ref_center_j),
            ("grid.center_k", self.center_k),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(ConfigError::invalid(name, "must be finite"));
            }
            if !is_one_decimal(v) {
                return Err(ConfigError::invalid(name, format!("{v} is not a multiple of 0.1")));
            }
        }
        if self.step <= 0.0 {
            return Err(ConfigError::invalid("grid.step", "must be positive"));
        }
        if self.core_half_span < 0.0 || self.margin < 0.0 {
            return Err(ConfigError::invalid("grid.core_half_span", "span and margin must be nonnegative"));
        }
        if self.anchor_offset <= 0.0 {
            return Err(ConfigError::invalid("grid.anchor_offset", "must be positive"));
        }
        let ratio = self.half_span() / self.step;
        if (ratio - ratio.round()).abs() > DECIMAL_TOL {
            return Err(ConfigError::invalid(
                "grid.step",
                format!("{} does not divide the half-span {}", self.step, self.half_span()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSpec {
    pub initial_replicates: usize,
    pub max_replicates: usize,
    pub temperature: f64,
    pub max_parallel: usize,
    pub retry_limit: usize,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self { initial_replicates: 3, max_replicates: 6, temperature: 1.0, max_parallel: 8, retry_limit: 3 }
    }
}

/// Candidate parents and targets for invariant causal prediction. The two
/// lists must be disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpDesign {
    pub candidates: Vec<String>,
    pub targets: Vec<String>,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_direct_repetitions() -> usize {
    50
}

/// Validated study configuration. Construct with [`validate_config`] or
/// [`StudyConfig::from_toml_str`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub persona: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Variables spanned by the default correlation matrix; all variables when empty.
    #[serde(default)]
    pub matrix_variables: Vec<String>,
    #[serde(default = "default_direct_repetitions")]
    pub direct_repetitions: usize,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub endpoint: EndpointSpec,
    pub variables: Vec<Variable>,
    #[serde(default)]
    pub environments: Vec<Environment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icp: Option<IcpDesign>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSpec>,
}

/// An ordered pair of variables: `j` is reported for all three patients,
/// `k` only for Patient 3.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DirectedPair {
    pub j: String,
    pub k: String,
}

impl DirectedPair {
    pub fn new(j: impl Into<String>, k: impl Into<String>) -> Self {
        Self { j: j.into(), k: k.into() }
    }

    pub fn reversed(&self) -> Self {
        Self { j: self.k.clone(), k: self.j.clone() }
    }
}

impl std::fmt::Display for DirectedPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}->{}", self.j, self.k)
    }
}

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: StudyConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        validate_config(raw)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("validated config serializes")
    }

    /// Hex SHA-256 over the canonical JSON form of the validated config.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn variable(&self, id: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.id == id)
    }

    pub fn variable_index(&self, id: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.id == id)
    }

    pub fn environment(&self, id: &str) -> Option<&Environment> {
        self.environments.iter().find(|e| e.id == id)
    }

    /// Unordered pairs over `matrix_variables`, in config order.
    pub fn matrix_pairs(&self) -> Vec<(String, String)> {
        unordered_pairs(&self.matrix_variables)
    }

    /// Pairs needed by ICP: candidate-candidate and candidate-target.
    pub fn icp_pairs(&self) -> Vec<(String, String)> {
        let Some(design) = &self.icp else { return Vec::new() };
        let mut pairs = unordered_pairs(&design.candidates);
        for c in &design.candidates {
            for t in &design.targets {
                pairs.push((c.clone(), t.clone()));
            }
        }
        pairs
    }
}

fn unordered_pairs(ids: &[String]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (a, x) in ids.iter().enumerate() {
        for y in &ids[a + 1..] {
            out.push((x.clone(), y.clone()));
        }
    }
    out
}

/// Enforces every configuration invariant and fills defaults.
pub fn validate_config(mut raw: StudyConfig) -> Result<StudyConfig, ConfigError> {
    if raw.persona.trim().is_empty() {
        return Err(ConfigError::invalid("persona", "must not be empty"));
    }
    if raw.variables.len() < 2 {
        return Err(ConfigError::invalid("variables", "at least two variables are required"));
    }
    let mut seen = HashSet::new();
    for (i, v) in raw.variables.iter_mut().enumerate() {
        if v.id.trim().is_empty() {
            return Err(ConfigError::invalid(format!("variables[{i}].id"), "must not be empty"));
        }
        if !seen.insert(v.id.clone()) {
            return Err(ConfigError::invalid(format!("variables[{i}].id"), format!("duplicate id \"{}\"", v.id)));
        }
        if v.display_name.trim().is_empty() {
            v.display_name = v.id.clone();
        }
    }

    if !raw.environments.iter().any(|e| e.id == DEFAULT_ENV) {
        raw.environments.insert(0, Environment::default_env());
    }
    let mut env_ids = HashSet::new();
    for (i, env) in raw.environments.iter().enumerate() {
        if env.id.trim().is_empty() {
            return Err(ConfigError::invalid(format!("environments[{i}].id"), "must not be empty"));
        }
        if !env_ids.insert(env.id.clone()) {
            return Err(ConfigError::invalid(
                format!("environments[{i}].id"),
                format!("duplicate environment id \"{}\"", env.id),
            ));
        }
        for (var, &mean) in &env.shifted_means {
            let field = format!("environments[{}].shifted_means.{var}", env.id);
            if !seen.contains(var) {
                return Err(ConfigError::invalid(field, format!("unknown variable \"{var}\"")));
            }
            if !mean.is_finite() {
                return Err(ConfigError::invalid(field, "mean must be finite"));
            }
            if !is_one_decimal(mean) {
                return Err(ConfigError::invalid(field, format!("{mean} cannot be rendered with one decimal")));
            }
        }
    }

    if !(raw.alpha > 0.0 && raw.alpha < 1.0) {
        return Err(ConfigError::invalid("alpha", format!("{} is not in (0, 1)", raw.alpha)));
    }
    raw.grid.validate()?;

    let s = &raw.sampling;
    if s.initial_replicates < 1 || s.initial_replicates > s.max_replicates {
        return Err(ConfigError::invalid(
            "sampling.initial_replicates",
            "need 1 <= initial_replicates <= max_replicates",
        ));
    }
    if s.max_parallel < 1 {
        return Err(ConfigError::invalid("sampling.max_parallel", "must be at least 1"));
    }
    if !(s.temperature.is_finite() && s.temperature >= 0.0) {
        return Err(ConfigError::invalid("sampling.temperature", "must be finite and nonnegative"));
    }
    if raw.direct_repetitions < 1 {
        return Err(ConfigError::invalid("direct_repetitions", "must be at least 1"));
    }

    raw.endpoint.validate()?;

    if raw.matrix_variables.is_empty() {
        raw.matrix_variables = raw.variables.iter().map(|v| v.id.clone()).collect();
    }
    check_id_list("matrix_variables", &raw.matrix_variables, &seen)?;

    if let Some(design) = &raw.icp {
        check_id_list("icp.candidates", &design.candidates, &seen)?;
        check_id_list("icp.targets", &design.targets, &seen)?;
        if design.candidates.is_empty() || design.candidates.len() > 20 {
            return Err(ConfigError::invalid("icp.candidates", "need between 1 and 20 candidates"));
        }
        if let Some(t) = design.targets.iter().find(|t| design.candidates.contains(t)) {
            return Err(ConfigError::invalid("icp.targets", format!("\"{t}\" is also a candidate")));
        }
    }

    if let Some(oracle) = &raw.oracle {
        oracle.validate(&raw)?;
    }
    Ok(raw)
}

fn check_id_list(field: &str, ids: &[String], known: &HashSet<String>) -> Result<(), ConfigError> {
    let mut dup = HashSet::new();
    for id in ids {
        if !known.contains(id) {
            return Err(ConfigError::invalid(field, format!("unknown variable \"{id}\"")));
        }
        if !dup.insert(id) {
            return Err(ConfigError::invalid(field, format!("duplicate variable \"{id}\"")));
        }
    }
    Ok(())
}

/// Rounds to the nearest tenth, mapping `-0.0` to `0.0`.
pub fn round_tenth(v: f64) -> f64 {
    (v * 10.0).round() / 10.0 + 0.0
}

/// True when `v` is representable with exactly one decimal place.
pub fn is_one_decimal(v: f64) -> bool {
    v.is_finite() && ((v * 10.0) - (v * 10.0).round()).abs() <= DECIMAL_TOL * (1.0 + v.abs() * 10.0)
}

/// Axis values `center - half_span, ..., center + half_span` in steps of `step`.
pub fn axis_values(grid: &GridSpec, center: f64) -> Vec<f64> {
    let n = grid.steps_per_side() as i64;
    (-n..=n).map(|i| round_tenth(center + i as f64 * grid.step)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestBudget {
    pub min_requests: u64,
    pub max_requests: u64,
}

/// Request counts for `n_pairs` unordered pairs in `n_envs` environments,
/// both query directions, every grid point.
pub fn estimate_request_budget(cfg: &StudyConfig, n_pairs: usize, n_envs: usize) -> RequestBudget {
    let points = (cfg.grid.axis_len() * cfg.grid.axis_len()) as u64;
    let per_rep = n_envs as u64 * n_pairs as u64 * 2 * points;
    RequestBudget {
        min_requests: per_rep * cfg.sampling.initial_replicates as u64,
        max_requests: per_rep * cfg.sampling.max_replicates as u64,
    }
}
