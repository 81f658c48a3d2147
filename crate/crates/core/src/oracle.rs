//! Synthetic rational answerer.
//!
//! Models the respondent as combining the shown value `X_j` of Patient 3 with
//! the value implied by `X_k` through the population regression, weighting
//! both by inverse variance, and choosing Patient 2 with probability
//! `logistic(beta_s * (combined - reference))`. Because every parameter is
//! known, the pipeline's output can be compared against closed forms.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, DirectedPair, StudyConfig};
use crate::gateway::{
    AnswerError, AnswerSource, Choice, DirectAnswer, RequestCounters, RequestStats, TripletAnswer,
};
use crate::glm::TripletTally;
use crate::linalg::Matrix;
use crate::prompt::{DirectQuery, TripletQuery};
use crate::scalar::{logistic, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("oracle has no variable \"{0}\"")]
    UnknownVariable(String),
    #[error("invalid oracle parameter {field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> OracleError {
    OracleError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub a: String,
    pub b: String,
    pub rho: f64,
}

fn default_beta_s() -> f64 {
    4.0
}

fn one() -> f64 {
    1.0
}

/// `[oracle]` section of the study config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    #[serde(default = "default_beta_s")]
    pub beta_s: f64,
    /// Measurement noise SD used for variables without an override.
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sigma_by_var: BTreeMap<String, f64>,
    /// Population SD used for variables without an override.
    #[serde(default = "one")]
    pub s: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub s_by_var: BTreeMap<String, f64>,
    /// Off-diagonal correlations; unlisted pairs are 0.
    #[serde(default)]
    pub correlations: Vec<CorrelationEntry>,
    /// Per-environment mean overrides; otherwise the prompted means are used.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub env_means: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub seed: u64,
    /// SD of the oracle's direct-query answers around the true correlation.
    #[serde(default)]
    pub direct_sd: f64,
    /// Pseudo-count per grid point in expected-tally mode.
    #[serde(default = "one")]
    pub expected_weight: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            beta_s: default_beta_s(),
            sigma: 1.0,
            sigma_by_var: BTreeMap::new(),
            s: 1.0,
            s_by_var: BTreeMap::new(),
            correlations: Vec::new(),
            env_means: BTreeMap::new(),
            seed: 0,
            direct_sd: 0.0,
            expected_weight: 1.0,
        }
    }
}

impl OracleSpec {
    pub(crate) fn validate(&self, cfg: &StudyConfig) -> Result<(), ConfigError> {
        OracleParams::from_spec(self, cfg).map(|_| ()).map_err(|e| match e {
            OracleError::UnknownVariable(v) => ConfigError::invalid("oracle", format!("unknown variable \"{v}\"")),
            OracleError::Invalid { field, message } => ConfigError::invalid(format!("oracle.{field}"), message),
        })
    }
}

/// Fully resolved oracle parameters over an ordered variable list.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleParams {
    ids: Vec<String>,
    rho: Matrix<f64>,
    sigma: Vec<f64>,
    s: Vec<f64>,
    beta_s: f64,
    env_means: HashMap<String, Vec<f64>>,
    seed: u64,
    direct_sd: f64,
}

impl OracleParams {
    pub fn new(
        ids: Vec<String>,
        rho: Matrix<f64>,
        sigma: Vec<f64>,
        s: Vec<f64>,
        beta_s: f64,
        env_means: HashMap<String, Vec<f64>>,
        seed: u64,
    ) -> Result<Self, OracleError> {
        let n = ids.len();
        if rho.rows() != n || !rho.is_square() || sigma.len() != n || s.len() != n {
            return Err(invalid("rho", "dimensions do not match the variable list"));
        }
        for i in 0..n {
            if (rho[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(invalid("rho", format!("diagonal entry for {} is not 1", ids[i])));
            }
            for j in 0..n {
                let r = rho[(i, j)];
                if !(-1.0..=1.0).contains(&r) {
                    return Err(invalid("rho", format!("{}/{} = {r} outside [-1, 1]", ids[i], ids[j])));
                }
            }
        }
        if rho.max_abs_asymmetry() > 1e-12 {
            return Err(invalid("rho", "matrix is not symmetric"));
        }
        let (eig, _) = rho.symmetric_eigen();
        if eig.first().is_some_and(|&l| l < -1e-10) {
            return Err(invalid("rho", "matrix is not positive semidefinite"));
        }
        for (i, (&sg, &sd)) in sigma.iter().zip(&s).enumerate() {
            if !(sg > 0.0 && sg.is_finite()) {
                return Err(invalid("sigma", format!("{}: must be positive", ids[i])));
            }
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(invalid("s", format!("{}: must be positive", ids[i])));
            }
        }
        if !(beta_s > 0.0 && beta_s.is_finite()) {
            return Err(invalid("beta_s", "must be positive"));
        }
        for (env, means) in &env_means {
            if means.len() != n || means.iter().any(|m| !m.is_finite()) {
                return Err(invalid(format!("env_means.{env}"), "need one finite mean per variable"));
            }
        }
        Ok(Self { ids, rho, sigma, s, beta_s, env_means, seed, direct_sd: 0.0 })
    }

    pub fn from_spec(spec: &OracleSpec, cfg: &StudyConfig) -> Result<Self, OracleError> {
        let ids: Vec<String> = cfg.variables.iter().map(|v| v.id.clone()).collect();
        let pos = |id: &str| ids.iter().position(|x| x == id).ok_or_else(|| OracleError::UnknownVariable(id.into()));
        let n = ids.len();
        let mut rho = Matrix::identity(n);
        let mut seen = std::collections::HashSet::new();
        for (i, e) in spec.correlations.iter().enumerate() {
            let (a, b) = (pos(&e.a)?, pos(&e.b)?);
            if a == b {
                return Err(invalid(format!("correlations[{i}]"), "a variable cannot correlate with itself here"));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(invalid(format!("correlations[{i}]"), format!("pair {}/{} listed twice", e.a, e.b)));
            }
            if !(-1.0..=1.0).contains(&e.rho) {
                return Err(invalid(format!("correlations[{i}].rho"), format!("{} outside [-1, 1]", e.rho)));
            }
            rho[(a, b)] = e.rho;
            rho[(b, a)] = e.rho;
        }
        let mut sigma = vec![spec.sigma; n];
        for (id, &v) in &spec.sigma_by_var {
            sigma[pos(id)?] = v;
        }
        let mut s = vec![spec.s; n];
        for (id, &v) in &spec.s_by_var {
            s[pos(id)?] = v;
        }
        let mut env_means = HashMap::new();
        for env in &cfg.environments {
            let mut means: Vec<f64> = ids.iter().map(|id| env.mean_of(id)).collect();
            if let Some(over) = spec.env_means.get(&env.id) {
                for (id, &m) in over {
                    means[pos(id)?] = m;
                }
            }
            env_means.insert(env.id.clone(), means);
        }
        if let Some(unknown) = spec.env_means.keys().find(|e| cfg.environment(e).is_none()) {
            return Err(invalid("env_means", format!("unknown environment \"{unknown}\"")));
        }
        if !(spec.direct_sd >= 0.0 && spec.direct_sd.is_finite()) {
            return Err(invalid("direct_sd", "must be finite and nonnegative"));
        }
        if !(spec.expected_weight > 0.0 && spec.expected_weight.is_finite()) {
            return Err(invalid("expected_weight", "must be positive"));
        }
        let mut params = Self::new(ids, rho, sigma, s, spec.beta_s, env_means, spec.seed)?;
        params.direct_sd = spec.direct_sd;
        Ok(params)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_direct_sd(mut self, sd: f64) -> Self {
        self.direct_sd = sd;
        self
    }

    pub fn with_beta_s(mut self, beta_s: f64) -> Self {
        self.beta_s = beta_s;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn beta_s(&self) -> f64 {
        self.beta_s
    }

    fn index(&self, id: &str) -> Result<usize, OracleError> {
        self.ids.iter().position(|x| x == id).ok_or_else(|| OracleError::UnknownVariable(id.into()))
    }

    pub fn rho(&self, a: &str, b: &str) -> Result<f64, OracleError> {
        Ok(self.rho[(self.index(a)?, self.index(b)?)])
    }

    fn means(&self, env: &str) -> Option<&Vec<f64>> {
        self.env_means.get(env)
    }

    /// Logistic coefficients `(β0, β1, β2)` the oracle implies for a directed
    /// pair, environment and reference midpoint.
    pub fn implied_coefficients(&self, pair: &DirectedPair, env: &str, reference: f64) -> Result<[f64; 3], OracleError> {
        let (j, k) = (self.index(&pair.j)?, self.index(&pair.k)?);
        let rho = self.rho[(j, k)];
        let w = evidence_weights(self.sigma[j], self.s[j], rho);
        let a1 = rho * self.s[j] / self.s[k];
        let (mu_j, mu_k) = self.means(env).map_or((0.0, 0.0), |m| (m[j], m[k]));
        let b = self.beta_s;
        Ok([b * (w.w2 * (mu_j - a1 * mu_k) - reference), b * w.w1, b * w.w2 * a1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvidenceWeights<T> {
    pub w1: T,
    pub w2: T,
}

/// Inverse-variance weights for the direct measurement (`w1`) and the value
/// projected from the second variable (`w2`).
pub fn evidence_weights<T: Scalar>(sigma_j: T, s_j: T, rho_jk: T) -> EvidenceWeights<T> {
    let sigma2 = sigma_j * sigma_j;
    let tau2 = s_j * s_j * (T::one() - rho_jk * rho_jk);
    let v2 = sigma2 + tau2;
    let denom = sigma2 + v2;
    EvidenceWeights { w1: v2 / denom, w2: sigma2 / denom }
}

/// Probability that the oracle answers "Patient 2".
pub fn choice_probability(params: &OracleParams, q: &TripletQuery) -> Result<f64, OracleError> {
    let [b0, b1, b2] = params.implied_coefficients(&q.pair, &q.env, q.reference())?;
    Ok(logistic(b0 + b1 * q.x_j_3 + b2 * q.x_k_3))
}

fn keyed_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

fn triplet_rng(seed: u64, q: &TripletQuery) -> ChaCha8Rng {
    keyed_rng(&[
        b"triplet",
        &seed.to_le_bytes(),
        q.pair.j.as_bytes(),
        q.pair.k.as_bytes(),
        q.env.as_bytes(),
        &q.x_j_1.to_bits().to_le_bytes(),
        &q.x_j_2.to_bits().to_le_bytes(),
        &q.x_j_3.to_bits().to_le_bytes(),
        &q.x_k_3.to_bits().to_le_bytes(),
        &(q.replicate_index as u64).to_le_bytes(),
    ])
}

/// Bernoulli draw keyed on `(seed, query, replicate)`: the same query always
/// gets the same answer, independent of scheduling.
pub fn sample_answer(params: &OracleParams, q: &TripletQuery) -> Result<TripletAnswer, OracleError> {
    let p = choice_probability(params, q)?;
    let u: f64 = triplet_rng(params.seed, q).gen();
    let choice = if u < p { Choice::Patient2 } else { Choice::Patient1 };
    let raw = if choice == Choice::Patient2 { "2" } else { "1" };
    Ok(TripletAnswer { choice, raw: raw.into() })
}

/// Direct answer: true correlation plus keyed Gaussian noise of SD
/// `direct_sd`; values outside [-1, 1] come back invalid, as from the gateway.
pub fn direct_answer(params: &OracleParams, q: &DirectQuery) -> Result<DirectAnswer, OracleError> {
    let rho = params.rho(&q.a, &q.b)?;
    let value = if params.direct_sd > 0.0 {
        let mut rng = keyed_rng(&[
            b"direct",
            &params.seed.to_le_bytes(),
            q.a.as_bytes(),
            q.b.as_bytes(),
            q.env.as_bytes(),
            &(q.replicate_index as u64).to_le_bytes(),
        ]);
        let noise = Normal::new(0.0, params.direct_sd).expect("finite sd").sample(&mut rng);
        rho + noise
    } else {
        rho
    };
    let valid = (-1.0..=1.0).contains(&value);
    Ok(DirectAnswer { value: valid.then_some(value), raw: format!("correlation: {value:.2}") })
}

/// Fractional tallies at each query point: `count2 = weight * p`,
/// `count1 = weight * (1 - p)`.
pub fn expected_tally(params: &OracleParams, points: &[TripletQuery], weight: f64) -> Result<Vec<TripletTally<f64>>, OracleError> {
    if !(weight > 0.0) {
        return Err(invalid("expected_weight", "must be positive"));
    }
    points
        .iter()
        .map(|q| {
            let p = choice_probability(params, q)?;
            Ok(TripletTally { x_j3: q.x_j_3, x_k3: q.x_k_3, count1: weight * (1.0 - p), count2: weight * p })
        })
        .collect()
}

/// The oracle behind the [`AnswerSource`] interface.
pub struct OracleSource {
    params: OracleParams,
    counters: RequestCounters,
    log: Option<Mutex<Vec<TripletQuery>>>,
}

impl OracleSource {
    pub fn new(params: OracleParams) -> Self {
        Self { params, counters: RequestCounters::default(), log: None }
    }

    /// Keeps a copy of every triplet query asked, for protocol tests.
    pub fn recording(mut self) -> Self {
        self.log = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn asked(&self) -> Vec<TripletQuery> {
        self.log.as_ref().map(|l| l.lock().expect("log poisoned").clone()).unwrap_or_default()
    }

    pub fn params(&self) -> &OracleParams {
        &self.params
    }
}

impl AnswerSource for OracleSource {
    fn triplet(&self, _cfg: &StudyConfig, query: &TripletQuery) -> Result<TripletAnswer, AnswerError> {
        self.counters.bump_sent();
        if let Some(log) = &self.log {
            log.lock().expect("log poisoned").push(query.clone());
        }
        sample_answer(&self.params, query).map_err(|e| AnswerError::Protocol(e.to_string()))
    }

    fn direct(&self, _cfg: &StudyConfig, query: &DirectQuery) -> Result<DirectAnswer, AnswerError> {
        self.counters.bump_sent();
        let a = direct_answer(&self.params, query).map_err(|e| AnswerError::Protocol(e.to_string()))?;
        if a.value.is_none() {
            self.counters.bump_invalid();
        }
        Ok(a)
    }

    fn stats(&self) -> RequestStats {
        self.counters.snapshot()
    }
}
