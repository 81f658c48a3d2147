//! Grid protocol, directed surrogate fits and the symmetric correlation
//! estimator with delta-method standard errors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{axis_values, is_one_decimal, DirectedPair, GridSpec, StudyConfig};
use crate::gateway::{run_batch, AnswerError, AnswerSource, Choice};
use crate::glm::{fit_logistic, GlmError, GlmFit, TripletTally};
use crate::oracle::{expected_tally, OracleParams};
use crate::prompt::{DirectQuery, TripletQuery};
use crate::scalar::Scalar;

/// Below this |β1| the slope ratio is undefined.
pub const MIN_BETA1: f64 = 1e-8;
/// Floor on |p| in the delta-method denominator for ρ̂.
pub const PRODUCT_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("slope ratio undefined: |beta1| = {0:e} is below the threshold")]
    UndefinedRatio(f64),
    #[error("surrogate fit failed: {0}")]
    Fit(#[from] GlmError),
    #[error("unknown environment \"{0}\"")]
    UnknownEnvironment(String),
    #[error("unknown variable \"{0}\"")]
    UnknownVariable(String),
    #[error("reference center {0} cannot be rendered with one decimal place")]
    CenterNotOneDecimal(f64),
    #[error("answer source failed: {0}")]
    Source(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectedRatio<T> {
    /// β2 / β1.
    pub ratio: T,
    pub var_ratio: T,
    /// β1 / SE(β1).
    pub beta1_t: T,
    pub fit: GlmFit<T>,
}

/// Ratio β2/β1 with its delta-method variance from the (β1, β2) covariance block.
pub fn slope_ratio<T: Scalar>(fit: &GlmFit<T>) -> Result<DirectedRatio<T>, EstimateError> {
    let [_, b1, b2] = fit.beta;
    if !(b1.abs() >= T::lit(MIN_BETA1)) {
        return Err(EstimateError::UndefinedRatio(b1.to_f64_lossy()));
    }
    let g = [-b2 / (b1 * b1), T::one() / b1];
    let c = &fit.cov;
    let var = g[0] * g[0] * c[(1, 1)] + T::lit(2.0) * g[0] * g[1] * c[(1, 2)] + g[1] * g[1] * c[(2, 2)];
    let se1 = fit.se(1);
    Ok(DirectedRatio {
        ratio: b2 / b1,
        var_ratio: var.max(T::zero()),
        beta1_t: if se1 > T::zero() { b1 / se1 } else { T::infinity() },
        fit: fit.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate<T> {
    pub rho_hat: T,
    pub se: T,
    /// The two directed ratios disagree in sign.
    pub sign_conflict: bool,
    /// The |p| floor was used in the SE denominator.
    pub unstable: bool,
    /// |ρ̂| exceeded 1 and was clamped.
    pub clamped: bool,
}

/// Signed square root of the product of the two directed ratios.
pub fn symmetric_rho<T: Scalar>(r_jk: &DirectedRatio<T>, r_kj: &DirectedRatio<T>) -> RhoEstimate<T> {
    let (a, b) = (r_jk.ratio, r_kj.ratio);
    let product = a * b;
    let magnitude = product.abs().sqrt();
    let zero = T::zero();
    let conflict = (a > zero && b < zero) || (a < zero && b > zero);
    let sign = if conflict {
        let z = |r: &DirectedRatio<T>| {
            if r.var_ratio > zero { r.ratio.abs() / r.var_ratio.sqrt() } else { T::infinity() }
        };
        let dominant = if z(r_jk) >= z(r_kj) { a } else { b };
        dominant.signum()
    } else if a < zero || b < zero {
        -T::one()
    } else {
        T::one()
    };
    let var_p = b * b * r_jk.var_ratio + a * a * r_kj.var_ratio;
    let floor = T::lit(PRODUCT_FLOOR);
    let unstable = product.abs() < floor;
    let var_rho = var_p / (T::lit(4.0) * product.abs().max(floor));
    let raw = sign * magnitude;
    let clamped = raw.abs() > T::one();
    RhoEstimate {
        rho_hat: raw.max(-T::one()).min(T::one()),
        se: var_rho.max(zero).sqrt(),
        sign_conflict: conflict,
        unstable,
        clamped,
    }
}

/// Counts from one directed grid run, before and after replicate extension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectedTallies {
    pub pair: DirectedPair,
    pub env: String,
    /// Tallies from the initial replicates only.
    pub initial: Vec<TripletTally<f64>>,
    pub tallies: Vec<TripletTally<f64>>,
    pub diagnostics: ElicitDiagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ElicitDiagnostics {
    pub queries: usize,
    pub invalid: usize,
    pub failed: usize,
    pub extended_points: usize,
    pub dropped_points: usize,
    /// First few source errors, verbatim.
    pub errors: Vec<String>,
}

impl ElicitDiagnostics {
    fn note_error(&mut self, e: &AnswerError) {
        self.failed += 1;
        if self.errors.len() < 5 {
            self.errors.push(e.to_string());
        }
    }
}

/// All grid points of a directed pair at replicate 0, `x_j3` outer and
/// `x_k3` inner, both ascending.
pub fn grid_queries(grid: &GridSpec, pair: &DirectedPair, env: &str) -> Vec<TripletQuery> {
    let (x1, x2) = grid.anchors();
    let xs = axis_values(grid, grid.ref_center_j);
    let ks = axis_values(grid, grid.center_k);
    let mut out = Vec::with_capacity(xs.len() * ks.len());
    for &x3 in &xs {
        for &xk in &ks {
            out.push(TripletQuery {
                pair: pair.clone(),
                env: env.to_string(),
                x_j_1: x1,
                x_j_2: x2,
                x_j_3: x3,
                x_k_3: xk,
                replicate_index: 0,
            });
        }
    }
    out
}

#[derive(Default, Clone, Copy)]
struct PointCounts {
    p1: usize,
    p2: usize,
}

impl PointCounts {
    fn tally(&self, q: &TripletQuery) -> TripletTally<f64> {
        TripletTally { x_j3: q.x_j_3, x_k3: q.x_k_3, count1: self.p1 as f64, count2: self.p2 as f64 }
    }
}

/// Runs the replication protocol for one directed pair: `initial_replicates`
/// answers per point, extended to `max_replicates` only where the valid
/// initial answers are not unanimous.
pub fn elicit_directed<S: AnswerSource + ?Sized>(
    cfg: &StudyConfig,
    grid: &GridSpec,
    pair: &DirectedPair,
    env: &str,
    source: &S,
) -> Result<DirectedTallies, EstimateError> {
    check_ids(cfg, pair, env)?;
    let points = grid_queries(grid, pair, env);
    let s = &cfg.sampling;
    let mut diag = ElicitDiagnostics::default();

    let first: Vec<(usize, TripletQuery)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, q)| (0..s.initial_replicates).map(move |r| (i, q.with_replicate(r))))
        .collect();
    let answers = run_batch(&first, s.max_parallel, |(_, q)| source.triplet(cfg, q));
    let mut counts = vec![PointCounts::default(); points.len()];
    record(&first, &answers, &mut counts, &mut diag);
    let initial: Vec<_> = points.iter().zip(&counts).map(|(q, c)| c.tally(q)).collect();

    let split: Vec<usize> = (0..points.len()).filter(|&i| counts[i].p1 > 0 && counts[i].p2 > 0).collect();
    diag.extended_points = split.len();
    let second: Vec<(usize, TripletQuery)> = split
        .iter()
        .flat_map(|&i| (s.initial_replicates..s.max_replicates).map(move |r| (i, r)))
        .map(|(i, r)| (i, points[i].with_replicate(r)))
        .collect();
    let answers = run_batch(&second, s.max_parallel, |(_, q)| source.triplet(cfg, q));
    record(&second, &answers, &mut counts, &mut diag);

    let tallies: Vec<_> = points.iter().zip(&counts).map(|(q, c)| c.tally(q)).collect();
    diag.dropped_points = counts.iter().filter(|c| c.p1 + c.p2 == 0).count();
    Ok(DirectedTallies { pair: pair.clone(), env: env.to_string(), initial, tallies, diagnostics: diag })
}

fn record(
    asked: &[(usize, TripletQuery)],
    answers: &[Result<crate::gateway::TripletAnswer, AnswerError>],
    counts: &mut [PointCounts],
    diag: &mut ElicitDiagnostics,
) {
    for ((i, _), a) in asked.iter().zip(answers) {
        diag.queries += 1;
        match a {
            Ok(a) => match a.choice {
                Choice::Patient1 => counts[*i].p1 += 1,
                Choice::Patient2 => counts[*i].p2 += 1,
                Choice::Invalid => diag.invalid += 1,
            },
            Err(e) => diag.note_error(e),
        }
    }
}

fn check_ids(cfg: &StudyConfig, pair: &DirectedPair, env: &str) -> Result<(), EstimateError> {
    if cfg.environment(env).is_none() {
        return Err(EstimateError::UnknownEnvironment(env.to_string()));
    }
    for id in [&pair.j, &pair.k] {
        if cfg.variable(id).is_none() {
            return Err(EstimateError::UnknownVariable(id.clone()));
        }
    }
    Ok(())
}

/// Produces directed tallies for a pair in an environment.
pub trait TallyProvider: Sync {
    fn directed_tallies(
        &self,
        cfg: &StudyConfig,
        grid: &GridSpec,
        pair: &DirectedPair,
        env: &str,
    ) -> Result<DirectedTallies, EstimateError>;
}

/// Tallies by asking an [`AnswerSource`] under the replication protocol.
pub struct Elicitor<'a, S: AnswerSource + ?Sized> {
    pub source: &'a S,
}

impl<S: AnswerSource + ?Sized> TallyProvider for Elicitor<'_, S> {
    fn directed_tallies(
        &self,
        cfg: &StudyConfig,
        grid: &GridSpec,
        pair: &DirectedPair,
        env: &str,
    ) -> Result<DirectedTallies, EstimateError> {
        elicit_directed(cfg, grid, pair, env, self.source)
    }
}

/// Exact-probability tallies from the oracle, `weight` pseudo-answers per point.
pub struct ExpectedOracle<'a> {
    pub params: &'a OracleParams,
    pub weight: f64,
}

impl TallyProvider for ExpectedOracle<'_> {
    fn directed_tallies(
        &self,
        cfg: &StudyConfig,
        grid: &GridSpec,
        pair: &DirectedPair,
        env: &str,
    ) -> Result<DirectedTallies, EstimateError> {
        check_ids(cfg, pair, env)?;
        let points = grid_queries(grid, pair, env);
        let tallies =
            expected_tally(self.params, &points, self.weight).map_err(|e| EstimateError::Source(e.to_string()))?;
        Ok(DirectedTallies {
            pair: pair.clone(),
            env: env.to_string(),
            initial: tallies.clone(),
            tallies,
            diagnostics: ElicitDiagnostics::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationEstimate {
    pub a: String,
    pub b: String,
    pub env: String,
    pub rho: RhoEstimate<f64>,
    /// `a -> b` then `b -> a`.
    pub directed: [DirectedRatio<f64>; 2],
}

/// Everything produced for one unordered pair in one environment.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub a: String,
    pub b: String,
    pub env: String,
    pub tallies: Vec<DirectedTallies>,
    pub fits: Vec<Result<GlmFit<f64>, EstimateError>>,
    pub estimate: Result<CorrelationEstimate, EstimateError>,
}

pub fn estimate_pair<P: TallyProvider + ?Sized>(
    cfg: &StudyConfig,
    grid: &GridSpec,
    provider: &P,
    a: &str,
    b: &str,
    env: &str,
) -> PairOutcome {
    let mut outcome = PairOutcome {
        a: a.to_string(),
        b: b.to_string(),
        env: env.to_string(),
        tallies: Vec::new(),
        fits: Vec::new(),
        estimate: Err(EstimateError::Source("not run".into())),
    };
    let forward = DirectedPair::new(a, b);
    let mut ratios = Vec::new();
    for pair in [forward.clone(), forward.reversed()] {
        match provider.directed_tallies(cfg, grid, &pair, env) {
            Ok(t) => {
                let fit = fit_logistic(&t.tallies).map_err(EstimateError::from);
                ratios.push(fit.clone().and_then(|f| slope_ratio(&f)));
                outcome.fits.push(fit);
                outcome.tallies.push(t);
            }
            Err(e) => {
                outcome.estimate = Err(e);
                return outcome;
            }
        }
    }
    let mut it = ratios.into_iter();
    outcome.estimate = match (it.next().expect("forward"), it.next().expect("reverse")) {
        (Ok(r1), Ok(r2)) => Ok(CorrelationEstimate {
            a: a.to_string(),
            b: b.to_string(),
            env: env.to_string(),
            rho: symmetric_rho(&r1, &r2),
            directed: [r1, r2],
        }),
        (Err(e), _) | (_, Err(e)) => Err(e),
    };
    outcome
}

/// Symmetric correlation and SE matrices for one environment. Entries for
/// pairs without an estimate are `None`.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub env: String,
    pub variables: Vec<String>,
    pub rho: Vec<Vec<Option<f64>>>,
    pub se: Vec<Vec<Option<f64>>>,
    pub pairs: Vec<PairOutcome>,
}

impl CorrelationMatrix {
    pub fn index(&self, id: &str) -> Option<usize> {
        self.variables.iter().position(|v| v == id)
    }

    pub fn get(&self, a: &str, b: &str) -> Option<(f64, f64)> {
        let (i, j) = (self.index(a)?, self.index(b)?);
        Some((self.rho[i][j]?, self.se[i][j]?))
    }
}

pub fn build_matrix<P: TallyProvider + ?Sized>(
    cfg: &StudyConfig,
    env: &str,
    provider: &P,
    pairs: &[(String, String)],
) -> CorrelationMatrix {
    let mut variables: Vec<String> = cfg
        .variables
        .iter()
        .map(|v| v.id.clone())
        .filter(|id| pairs.iter().any(|(a, b)| a == id || b == id))
        .collect();
    // ids unknown to the config still get a row so their failure is visible
    for (a, b) in pairs {
        for id in [a, b] {
            if !variables.contains(id) {
                variables.push(id.clone());
            }
        }
    }
    let n = variables.len();
    let mut rho = vec![vec![None; n]; n];
    let mut se = vec![vec![None; n]; n];
    for i in 0..n {
        rho[i][i] = Some(1.0);
        se[i][i] = Some(0.0);
    }
    let outcomes: Vec<PairOutcome> =
        pairs.iter().map(|(a, b)| estimate_pair(cfg, &cfg.grid, provider, a, b, env)).collect();
    for o in &outcomes {
        if let Ok(e) = &o.estimate {
            let i = variables.iter().position(|v| *v == o.a).expect("listed");
            let j = variables.iter().position(|v| *v == o.b).expect("listed");
            rho[i][j] = Some(e.rho.rho_hat);
            rho[j][i] = Some(e.rho.rho_hat);
            se[i][j] = Some(e.rho.se);
            se[j][i] = Some(e.rho.se);
        }
    }
    CorrelationMatrix { env: env.to_string(), variables, rho, se, pairs: outcomes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectSummary {
    pub a: String,
    pub b: String,
    pub env: String,
    pub n_requested: usize,
    pub n_valid: usize,
    pub n_failed: usize,
    /// `(replicate_index, value)` for every valid answer.
    pub samples: Vec<(usize, f64)>,
    pub mean: Option<f64>,
    /// Sample SD (n - 1 denominator); 0 for a single sample.
    pub sd: Option<f64>,
}

impl DirectSummary {
    pub fn is_empty(&self) -> bool {
        self.n_valid == 0
    }
}

/// Asks the direct correlation question `repetitions` times.
pub fn direct_baseline<S: AnswerSource + ?Sized>(
    cfg: &StudyConfig,
    env: &str,
    pair: (&str, &str),
    repetitions: usize,
    source: &S,
) -> DirectSummary {
    let queries: Vec<DirectQuery> = (0..repetitions)
        .map(|r| DirectQuery { a: pair.0.to_string(), b: pair.1.to_string(), env: env.to_string(), replicate_index: r })
        .collect();
    let answers = run_batch(&queries, cfg.sampling.max_parallel, |q| source.direct(cfg, q));
    let mut samples = Vec::new();
    let mut failed = 0;
    for (q, a) in queries.iter().zip(answers) {
        match a {
            Ok(a) => {
                if let Some(v) = a.value.filter(|v| (-1.0..=1.0).contains(v)) {
                    samples.push((q.replicate_index, v));
                }
            }
            Err(_) => failed += 1,
        }
    }
    let n = samples.len();
    // shifted by the first sample so constant answers give exactly sd 0
    let (mean, sd) = match samples.first() {
        None => (None, None),
        Some(&(_, origin)) => {
            let d: Vec<f64> = samples.iter().map(|s| s.1 - origin).collect();
            let dm = d.iter().sum::<f64>() / n as f64;
            let ss = d.iter().map(|x| (x - dm).powi(2)).sum::<f64>();
            let sd = if n < 2 { 0.0 } else { (ss / (n - 1) as f64).sqrt() };
            (Some(origin + dm), Some(sd))
        }
    };
    DirectSummary {
        a: pair.0.to_string(),
        b: pair.1.to_string(),
        env: env.to_string(),
        n_requested: repetitions,
        n_valid: n,
        n_failed: failed,
        samples,
        mean,
        sd,
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub center: f64,
    pub outcome: Result<PairOutcome, EstimateError>,
}

/// Repeats the pair protocol with the `X_j` reference moved to each center;
/// the `X_k` axis stays where the config puts it.
pub fn reference_sweep<P: TallyProvider + ?Sized>(
    cfg: &StudyConfig,
    pair: (&str, &str),
    env: &str,
    centers: &[f64],
    provider: &P,
) -> Vec<SweepPoint> {
    centers
        .iter()
        .map(|&center| {
            let outcome = if is_one_decimal(center) {
                let grid = cfg.grid.with_ref_center(crate::config::round_tenth(center));
                Ok(estimate_pair(cfg, &grid, provider, pair.0, pair.1, env))
            } else {
                Err(EstimateError::CenterNotOneDecimal(center))
            };
            SweepPoint { center, outcome }
        })
        .collect()
}
