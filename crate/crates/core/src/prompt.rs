//! Prompt text for triplet comparisons and direct correlation queries.
//!
//! Layout is fixed; golden copies live in `tests/fixtures/`. Every number is
//! rendered with exactly one decimal and a sign only when negative.
//!
//! Environment block (omitted entirely for an empty environment):
//!
//! ```text
//! <description>
//! mean <display name> = <value>
//! ...
//! ```
//!
//! with mean lines in config variable order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{is_one_decimal, round_tenth, DirectedPair, Environment, StudyConfig, Variable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("unknown variable \"{0}\"")]
    UnknownVariable(String),
    #[error("unknown environment \"{0}\"")]
    UnknownEnvironment(String),
    #[error("{field} = {value} cannot be rendered with one decimal place")]
    NotOneDecimal { field: &'static str, value: f64 },
    #[error("Patient 1 value {lower} must be below Patient 2 value {upper}")]
    AnchorOrder { lower: f64, upper: f64 },
    #[error("a variable cannot be paired with itself: \"{0}\"")]
    SelfPair(String),
    #[error("replicate index {index} out of range (limit {limit})")]
    ReplicateOutOfRange { index: usize, limit: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletQuery {
    pub pair: DirectedPair,
    pub env: String,
    pub x_j_1: f64,
    pub x_j_2: f64,
    pub x_j_3: f64,
    pub x_k_3: f64,
    pub replicate_index: usize,
}

impl TripletQuery {
    pub fn reference(&self) -> f64 {
        (self.x_j_1 + self.x_j_2) / 2.0
    }

    pub fn with_replicate(&self, replicate_index: usize) -> Self {
        Self { replicate_index, ..self.clone() }
    }
}

/// Direct request for the Pearson correlation of an unordered pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectQuery {
    pub a: String,
    pub b: String,
    pub env: String,
    pub replicate_index: usize,
}

pub const Z_SCORE_LINE: &str =
    "All values are population-normalized z-scores: 0.0 = population mean, 1.0 = one population standard deviation.";

/// Formats a z-score with one decimal, e.g. `-0.5`, `1.5`, `0.0`.
pub fn format_z(v: f64) -> String {
    format!("{:.1}", round_tenth(v))
}

fn checked(field: &'static str, value: f64) -> Result<String, RenderError> {
    if is_one_decimal(value) {
        Ok(format_z(value))
    } else {
        Err(RenderError::NotOneDecimal { field, value })
    }
}

fn lookup<'a>(cfg: &'a StudyConfig, id: &str) -> Result<&'a Variable, RenderError> {
    cfg.variable(id).ok_or_else(|| RenderError::UnknownVariable(id.to_string()))
}

fn lookup_env<'a>(cfg: &'a StudyConfig, id: &str) -> Result<&'a Environment, RenderError> {
    cfg.environment(id).ok_or_else(|| RenderError::UnknownEnvironment(id.to_string()))
}

/// Cohort description followed by one `mean <name> = <value>` line per
/// shifted variable. Empty for the default environment.
pub fn render_environment_block(env: &Environment, vars: &[Variable]) -> String {
    if env.is_empty() {
        return String::new();
    }
    let mut lines = Vec::new();
    if !env.description.trim().is_empty() {
        lines.push(env.description.trim().to_string());
    }
    for var in vars {
        if let Some(&mean) = env.shifted_means.get(&var.id) {
            lines.push(format!("mean {} = {}", var.display_name, format_z(mean)));
        }
    }
    lines.join("\n")
}

pub fn render_triplet(cfg: &StudyConfig, q: &TripletQuery) -> Result<String, RenderError> {
    if q.pair.j == q.pair.k {
        return Err(RenderError::SelfPair(q.pair.j.clone()));
    }
    let vj = lookup(cfg, &q.pair.j)?;
    let vk = lookup(cfg, &q.pair.k)?;
    let env = lookup_env(cfg, &q.env)?;
    let x1 = checked("x_j_1", q.x_j_1)?;
    let x2 = checked("x_j_2", q.x_j_2)?;
    let x3 = checked("x_j_3", q.x_j_3)?;
    let xk = checked("x_k_3", q.x_k_3)?;
    if q.x_j_1 >= q.x_j_2 {
        return Err(RenderError::AnchorOrder { lower: q.x_j_1, upper: q.x_j_2 });
    }
    if q.replicate_index >= cfg.sampling.max_replicates {
        return Err(RenderError::ReplicateOutOfRange { index: q.replicate_index, limit: cfg.sampling.max_replicates });
    }
    let (j, k) = (&vj.display_name, &vk.display_name);

    let mut out = String::new();
    out.push_str(cfg.persona.trim());
    out.push('\n');
    out.push_str(Z_SCORE_LINE);
    out.push('\n');
    let block = render_environment_block(env, &cfg.variables);
    if !block.is_empty() {
        out.push_str(&block);
        out.push('\n');
    }
    out.push('\n');
    out.push_str(&format!("Patient 1: {j} = {x1}, {k} = missing\n"));
    out.push_str(&format!("Patient 2: {j} = {x2}, {k} = missing\n"));
    out.push_str(&format!("Patient 3: {j} = {x3}, {k} = {xk}\n"));
    out.push('\n');
    out.push_str(&format!("Infer the missing {k} values for Patients 1 and 2 from their observed {j} values.\n"));
    out.push_str("Be mindful that clinical variables and biomarkers tend to be highly correlated.\n");
    out.push_str("Then choose which patient (1 or 2) is more similar to Patient 3.\n");
    out.push('\n');
    out.push_str("Respond with exactly one line containing only:\n1\nor\n2");
    Ok(out)
}

pub fn render_direct(cfg: &StudyConfig, q: &DirectQuery) -> Result<String, RenderError> {
    if q.a == q.b {
        return Err(RenderError::SelfPair(q.a.clone()));
    }
    let va = lookup(cfg, &q.a)?;
    let vb = lookup(cfg, &q.b)?;
    let env = lookup_env(cfg, &q.env)?;

    let mut out = String::new();
    out.push_str(cfg.persona.trim());
    out.push_str("\n\n");
    out.push_str(&format!(
        "What is the Pearson correlation coefficient between {} and {} in the relevant patient population?\n",
        va.display_name, vb.display_name
    ));
    let block = render_environment_block(env, &cfg.variables);
    if !block.is_empty() {
        out.push_str(&block);
        out.push('\n');
    }
    out.push('\n');
    out.push_str(
        "Reason through this carefully. Consider the physiological or clinical relationship between the two \
         variables, draw on specific studies, cohorts, or reference ranges you are aware of, and discuss any \
         factors that might strengthen or attenuate the association. Weigh conflicting evidence if it exists.\n",
    );
    out.push('\n');
    out.push_str("On the very last line of your response, write exactly (and nothing else):\ncorrelation: X.XX");
    Ok(out)
}
