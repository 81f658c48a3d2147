#![allow(dead_code)]

pub mod mock_http;
pub mod reference;
pub mod scm;

use tripcorr::{OracleParams, StudyConfig};

/// Two-variable study with an oracle section.
pub fn pair_config(rho: f64, sigma: f64, beta_s: f64) -> StudyConfig {
    let text = format!(
        r#"
persona = "You are a clinician."

[[variables]]
id = "A"
description = "first marker"

[[variables]]
id = "B"
description = "second marker"

[oracle]
beta_s = {beta_s}
sigma = {sigma}
correlations = [{{ a = "A", b = "B", rho = {rho} }}]
"#
    );
    StudyConfig::from_toml_str(&text).expect("valid test config")
}

pub fn oracle(cfg: &StudyConfig) -> OracleParams {
    OracleParams::from_spec(cfg.oracle.as_ref().expect("oracle section"), cfg).expect("valid oracle")
}

/// ρσ² / (σ² + s²(1 − ρ²)).
pub fn estimand(rho: f64, sigma: f64, s: f64) -> f64 {
    rho * sigma * sigma / (sigma * sigma + s * s * (1.0 - rho * rho))
}
