//! Invariant causal prediction on per-environment correlation matrices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{bilinear, Matrix};
use crate::scalar::Scalar;
use crate::special::chi2_sf;

/// Above this condition number R_SS gets a small diagonal ridge.
pub const MAX_CONDITION: f64 = 1e6;
pub const CONDITION_RIDGE: f64 = 1e-8;
/// Relative eigenvalue cutoff when inverting slope covariances.
pub const PINV_TOL: f64 = 1e-12;
pub const MAX_CANDIDATES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcpError {
    #[error("ICP needs at least two environments, got {0}")]
    TooFewEnvironments(usize),
    #[error("ICP needs between 1 and {MAX_CANDIDATES} candidates, got {0}")]
    CandidateCount(usize),
    #[error("target \"{0}\" is also a candidate")]
    TargetIsCandidate(String),
    #[error("duplicate candidate \"{0}\"")]
    DuplicateCandidate(String),
    #[error("environment {env}: missing correlation for {a} / {b}")]
    MissingEntry { env: String, a: String, b: String },
    #[error("correlation block is singular even after the ridge")]
    Singular,
    #[error("slope covariance has no usable directions")]
    DegenerateCovariance,
    #[error("pooled precision is singular")]
    SingularPooling,
    #[error("invalid variance: {0}")]
    InvalidVariance(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slopes<T> {
    pub beta: Vec<T>,
    /// The inverse actually used, after any ridge.
    pub r_inv: Matrix<T>,
    pub conditioning_flag: bool,
}

/// β = R_SS⁻¹ r_St in standardized units.
pub fn standardized_slopes<T: Scalar>(r_ss: &Matrix<T>, r_st: &[T]) -> Result<Slopes<T>, IcpError> {
    let cond = r_ss.symmetric_condition();
    let conditioning_flag = !(cond <= T::lit(MAX_CONDITION));
    let r = if conditioning_flag { r_ss.add_diag(T::lit(CONDITION_RIDGE)) } else { r_ss.clone() };
    let r_inv = r.inverse().ok_or(IcpError::Singular)?;
    if !r_inv.is_finite() {
        return Err(IcpError::Singular);
    }
    Ok(Slopes { beta: r_inv.matvec(r_st), r_inv, conditioning_flag })
}

/// First-order covariance of the slopes, treating every correlation estimate
/// as independent. `var_r_ss` is read above the diagonal only.
pub fn slope_covariance<T: Scalar>(slopes: &Slopes<T>, var_r_ss: &Matrix<T>, var_r_st: &[T]) -> Result<Matrix<T>, IcpError> {
    let n = slopes.beta.len();
    let check = |v: T| if v.is_finite() && v >= T::zero() { Ok(v) } else { Err(IcpError::InvalidVariance(format!("{v}"))) };
    let mut cov = Matrix::zeros(n, n);
    let mut add = |g: &[T], var: T| {
        for i in 0..n {
            for j in 0..n {
                cov[(i, j)] = cov[(i, j)] + var * g[i] * g[j];
            }
        }
    };
    let inv = &slopes.r_inv;
    for a in 0..n {
        let g: Vec<T> = (0..n).map(|i| inv[(i, a)]).collect();
        add(&g, check(var_r_st[a])?);
    }
    let beta = &slopes.beta;
    for a in 0..n {
        for b in a + 1..n {
            let var = check(var_r_ss[(a, b)])?;
            if var == T::zero() {
                continue;
            }
            // (E_ab + E_ba) β has β_b in slot a and β_a in slot b
            let g: Vec<T> = (0..n).map(|i| -(inv[(i, a)] * beta[b] + inv[(i, b)] * beta[a])).collect();
            add(&g, var);
        }
    }
    Ok(cov.symmetrized())
}

/// Inverse of a slope covariance, falling back to the pseudo-inverse. The
/// flag reports whether any direction was dropped.
pub fn precision<T: Scalar>(cov: &Matrix<T>) -> Result<(Matrix<T>, bool), IcpError> {
    let (p, dropped) = cov.symmetric_pinv(T::lit(PINV_TOL));
    if dropped == cov.rows() {
        return Err(IcpError::DegenerateCovariance);
    }
    Ok((p, dropped > 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaldResult<T> {
    pub pooled: Vec<T>,
    pub w: T,
    pub p_value: T,
}

/// Precision-weighted pooled slope and the Wald statistic for equality of
/// slopes across environments.
pub fn wald_test<T: Scalar>(slopes: &[Vec<T>], precisions: &[Matrix<T>], df: usize) -> Result<WaldResult<T>, IcpError> {
    if slopes.len() < 2 {
        return Err(IcpError::TooFewEnvironments(slopes.len()));
    }
    let n = slopes[0].len();
    let mut sum_l = Matrix::zeros(n, n);
    let mut sum_lb = vec![T::zero(); n];
    for (b, l) in slopes.iter().zip(precisions) {
        sum_l = sum_l.add(l);
        for (acc, v) in sum_lb.iter_mut().zip(l.matvec(b)) {
            *acc = *acc + v;
        }
    }
    let pooled = sum_l.solve(&sum_lb).ok_or(IcpError::SingularPooling)?;
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(IcpError::SingularPooling);
    }
    let mut w = T::zero();
    for (b, l) in slopes.iter().zip(precisions) {
        let d: Vec<T> = b.iter().zip(&pooled).map(|(&x, &y)| x - y).collect();
        w = w + bilinear(&d, l, &d);
    }
    let w = w.max(T::zero());
    let p_value = chi2_sf(w, df).map_err(|e| IcpError::InvalidVariance(e.to_string()))?;
    Ok(WaldResult { pooled, w, p_value })
}

/// Correlations and their standard errors for one environment; NaN marks a
/// missing entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvCorrelations<T> {
    pub env: String,
    pub variables: Vec<String>,
    pub rho: Matrix<T>,
    pub se: Matrix<T>,
}

impl<T: Scalar> EnvCorrelations<T> {
    fn lookup(&self, a: &str, b: &str) -> Option<(T, T)> {
        let i = self.variables.iter().position(|v| v == a)?;
        let j = self.variables.iter().position(|v| v == b)?;
        let (r, s) = (self.rho[(i, j)], self.se[(i, j)]);
        (r.is_finite() && s.is_finite()).then_some((r, s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpProblem<T> {
    pub targets: Vec<String>,
    pub candidates: Vec<String>,
    pub environments: Vec<EnvCorrelations<T>>,
    pub alpha: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult<T> {
    pub subset: Vec<String>,
    /// Inclusion bitmask, first candidate in the most significant bit.
    pub mask: u32,
    pub slopes_per_env: Vec<Vec<T>>,
    pub precisions: Vec<Vec<Vec<T>>>,
    pub pooled: Vec<T>,
    pub wald: T,
    pub df: usize,
    pub p_value: T,
    pub accepted: bool,
    pub conditioning_flag: bool,
    /// A slope covariance needed the pseudo-inverse.
    pub pinv_flag: bool,
    /// Why the subset could not be tested, if it could not.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport<T> {
    pub target: String,
    pub subsets: Vec<SubsetResult<T>>,
    pub parents: Vec<String>,
    pub all_rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpReport<T> {
    pub alpha: T,
    pub candidates: Vec<String>,
    pub environments: Vec<String>,
    pub targets: Vec<TargetReport<T>>,
}

/// Non-empty subset masks by size, then by mask value. With three candidates
/// this is 001, 010, 100, 011, 101, 110, 111.
pub fn subset_order(n: usize) -> Vec<u32> {
    let mut masks: Vec<u32> = (1..(1u32 << n)).collect();
    masks.sort_by_key(|&m| (m.count_ones(), m));
    masks
}

/// Whether candidate `i` (0 = first) is in `mask`.
pub fn mask_contains(mask: u32, n: usize, i: usize) -> bool {
    mask & (1 << (n - 1 - i)) != 0
}

impl<T: Scalar> IcpProblem<T> {
    pub fn validate(&self) -> Result<(), IcpError> {
        let m = self.environments.len();
        if m < 2 {
            return Err(IcpError::TooFewEnvironments(m));
        }
        let c = self.candidates.len();
        if c == 0 || c > MAX_CANDIDATES {
            return Err(IcpError::CandidateCount(c));
        }
        for (i, cand) in self.candidates.iter().enumerate() {
            if self.candidates[..i].contains(cand) {
                return Err(IcpError::DuplicateCandidate(cand.clone()));
            }
        }
        for t in &self.targets {
            if self.candidates.contains(t) {
                return Err(IcpError::TargetIsCandidate(t.clone()));
            }
        }
        for e in &self.environments {
            for (i, a) in self.candidates.iter().enumerate() {
                for b in self.candidates[i + 1..].iter().chain(&self.targets) {
                    if e.lookup(a, b).is_none() {
                        return Err(IcpError::MissingEntry { env: e.env.clone(), a: a.clone(), b: b.clone() });
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn run_icp<T: Scalar>(problem: &IcpProblem<T>) -> Result<IcpReport<T>, IcpError> {
    problem.validate()?;
    let n = problem.candidates.len();
    let masks = subset_order(n);
    let targets = problem
        .targets
        .iter()
        .map(|t| {
            let subsets: Vec<_> = masks.iter().map(|&m| test_subset(problem, t, m)).collect();
            let accepted: Vec<&SubsetResult<T>> = subsets.iter().filter(|s| s.accepted).collect();
            let parents = if accepted.is_empty() {
                Vec::new()
            } else {
                let common = accepted.iter().fold(u32::MAX, |acc, s| acc & s.mask);
                members(&problem.candidates, common)
            };
            TargetReport { target: t.clone(), parents, all_rejected: accepted.is_empty(), subsets }
        })
        .collect();
    Ok(IcpReport {
        alpha: problem.alpha,
        candidates: problem.candidates.clone(),
        environments: problem.environments.iter().map(|e| e.env.clone()).collect(),
        targets,
    })
}

fn members(candidates: &[String], mask: u32) -> Vec<String> {
    let n = candidates.len();
    (0..n).filter(|&i| mask_contains(mask, n, i)).map(|i| candidates[i].clone()).collect()
}

fn test_subset<T: Scalar>(problem: &IcpProblem<T>, target: &str, mask: u32) -> SubsetResult<T> {
    let subset = members(&problem.candidates, mask);
    let k = subset.len();
    let m = problem.environments.len();
    let mut out = SubsetResult {
        subset,
        mask,
        slopes_per_env: Vec::new(),
        precisions: Vec::new(),
        pooled: Vec::new(),
        wald: T::nan(),
        df: (m - 1) * k,
        p_value: T::nan(),
        accepted: false,
        conditioning_flag: false,
        pinv_flag: false,
        skipped: None,
    };
    let mut lambdas = Vec::new();
    for env in &problem.environments {
        let entry = |a: &str, b: &str| if a == b { (T::one(), T::zero()) } else { env.lookup(a, b).expect("validated") };
        let mut r_ss = Matrix::zeros(k, k);
        let mut var_ss = Matrix::zeros(k, k);
        for (i, a) in out.subset.iter().enumerate() {
            for (j, b) in out.subset.iter().enumerate() {
                let (r, s) = entry(a, b);
                r_ss[(i, j)] = r;
                var_ss[(i, j)] = s * s;
            }
        }
        let (r_st, var_st): (Vec<T>, Vec<T>) = out
            .subset
            .iter()
            .map(|a| {
                let (r, s) = entry(a, target);
                (r, s * s)
            })
            .unzip();
        let step = standardized_slopes(&r_ss, &r_st).and_then(|sl| {
            let cov = slope_covariance(&sl, &var_ss, &var_st)?;
            let (lambda, pinv) = precision(&cov)?;
            Ok((sl, lambda, pinv))
        });
        match step {
            Ok((sl, lambda, pinv)) => {
                out.conditioning_flag |= sl.conditioning_flag;
                out.pinv_flag |= pinv;
                out.slopes_per_env.push(sl.beta);
                out.precisions.push(lambda.to_rows());
                lambdas.push(lambda);
            }
            Err(e) => {
                out.skipped = Some(format!("{}: {e}", env.env));
                return out;
            }
        }
    }
    match wald_test(&out.slopes_per_env, &lambdas, out.df) {
        Ok(w) => {
            out.pooled = w.pooled;
            out.wald = w.w;
            out.p_value = w.p_value;
            out.accepted = w.p_value > problem.alpha;
        }
        Err(e) => out.skipped = Some(e.to_string()),
    }
    out
}
