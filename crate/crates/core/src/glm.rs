//! Binomial-logit surrogate fit: P(Patient 2) = logistic(β0 + β1·x_j3 + β2·x_k3),
//! fitted by penalized IRLS with step-halving.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::{logistic, softplus, Scalar};

pub use crate::special::{chi2_sf, DomainError};

/// Ridge on the two slopes; keeps separated fits finite.
pub const RIDGE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 100;
pub const STEP_TOL: f64 = 1e-8;
pub const MAX_HALVINGS: usize = 30;
/// Any |β| above this marks the fit as (quasi-)separated.
pub const SEPARATION_BOUND: f64 = 15.0;

/// Aggregated answers at one grid point. Counts may be fractional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletTally<T> {
    pub x_j3: T,
    pub x_k3: T,
    /// Answers "Patient 1".
    pub count1: T,
    /// Answers "Patient 2".
    pub count2: T,
}

impl<T: Scalar> TripletTally<T> {
    pub fn total(&self) -> T {
        self.count1 + self.count2
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("need at least 3 grid points with answers, got {0}")]
    TooFewPoints(usize),
    #[error("design matrix is rank deficient (grid points are collinear)")]
    DesignRank,
    #[error("tally counts must be finite and nonnegative")]
    InvalidCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit<T> {
    /// `(β0, β1, β2)`.
    pub beta: [T; 3],
    /// Inverse penalized Fisher information at the optimum.
    pub cov: Matrix<T>,
    pub converged: bool,
    pub iterations: usize,
    pub separation_flag: bool,
    pub deviance: T,
    pub n_points: usize,
}

impl<T: Scalar> GlmFit<T> {
    pub fn se(&self, i: usize) -> T {
        self.cov[(i, i)].max(T::zero()).sqrt()
    }
}

struct Design<T> {
    x: Vec<[T; 3]>,
    y: Vec<T>,
    n: Vec<T>,
}

impl<T: Scalar> Design<T> {
    fn eta(&self, i: usize, beta: &[T; 3]) -> T {
        let x = &self.x[i];
        x[0] * beta[0] + x[1] * beta[1] + x[2] * beta[2]
    }

    fn penalized_loglik(&self, beta: &[T; 3]) -> T {
        let lam = T::lit(RIDGE);
        let ll: T = (0..self.x.len()).map(|i| {
            let eta = self.eta(i, beta);
            self.y[i] * eta - self.n[i] * softplus(eta)
        }).sum();
        ll - lam / T::lit(2.0) * (beta[1] * beta[1] + beta[2] * beta[2])
    }

    /// Gradient and negative Hessian of the penalized log-likelihood.
    fn score_and_information(&self, beta: &[T; 3]) -> ([T; 3], Matrix<T>) {
        let lam = T::lit(RIDGE);
        let mut grad = [T::zero(); 3];
        let mut info = Matrix::zeros(3, 3);
        for i in 0..self.x.len() {
            let p = logistic(self.eta(i, beta));
            let resid = self.y[i] - self.n[i] * p;
            let w = self.n[i] * p * (T::one() - p);
            let x = &self.x[i];
            for a in 0..3 {
                grad[a] = grad[a] + x[a] * resid;
                for b in 0..3 {
                    info[(a, b)] = info[(a, b)] + w * x[a] * x[b];
                }
            }
        }
        for a in 1..3 {
            grad[a] = grad[a] - lam * beta[a];
            info[(a, a)] = info[(a, a)] + lam;
        }
        (grad, info)
    }

    fn deviance(&self, beta: &[T; 3]) -> T {
        let term = |obs: T, fit: T| if obs > T::zero() { obs * (obs / fit).ln() } else { T::zero() };
        let two = T::lit(2.0);
        (0..self.x.len())
            .map(|i| {
                let p = logistic(self.eta(i, beta));
                let fit2 = self.n[i] * p;
                let fit1 = self.n[i] * (T::one() - p);
                two * (term(self.y[i], fit2) + term(self.n[i] - self.y[i], fit1))
            })
            .sum::<T>()
            .max(T::zero())
    }
}

fn solve_information<T: Scalar>(info: &Matrix<T>, rhs: &[T]) -> Option<Vec<T>> {
    info.solve(rhs).or_else(|| {
        let mut bumped = info.clone();
        bumped[(0, 0)] = bumped[(0, 0)] + T::lit(RIDGE);
        bumped.solve(rhs)
    })
}

/// Maximizes the ridge-penalized binomial log-likelihood.
///
/// Zero-total tallies are ignored. All-one-sided data is not an error; it
/// yields a finite fit with `separation_flag` set.
pub fn fit_logistic<T: Scalar>(tallies: &[TripletTally<T>]) -> Result<GlmFit<T>, GlmError> {
    let mut design = Design { x: Vec::new(), y: Vec::new(), n: Vec::new() };
    for t in tallies {
        let ok = |v: T| v.is_finite() && v >= T::zero();
        if !(ok(t.count1) && ok(t.count2)) || !t.x_j3.is_finite() || !t.x_k3.is_finite() {
            return Err(GlmError::InvalidCount);
        }
        let total = t.total();
        if total > T::zero() {
            design.x.push([T::one(), t.x_j3, t.x_k3]);
            design.y.push(t.count2);
            design.n.push(total);
        }
    }
    if design.x.len() < 3 {
        return Err(GlmError::TooFewPoints(design.x.len()));
    }
    let mut gram = Matrix::<T>::zeros(3, 3);
    for x in &design.x {
        for a in 0..3 {
            for b in 0..3 {
                gram[(a, b)] = gram[(a, b)] + x[a] * x[b];
            }
        }
    }
    let (eig, _) = gram.symmetric_eigen();
    if eig[0] <= eig[2] * T::lit(1e-10) {
        return Err(GlmError::DesignRank);
    }

    let tol = T::lit(STEP_TOL).max(T::epsilon() * T::lit(100.0));
    let mut beta = [T::zero(); 3];
    let mut objective = design.penalized_loglik(&beta);
    let mut converged = false;
    let mut separation = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (grad, info) = design.score_and_information(&beta);
        let Some(step) = solve_information(&info, &grad) else {
            separation = true;
            break;
        };
        let slack = T::epsilon() * T::lit(16.0) * (T::one() + objective.abs());
        let mut scale = T::one();
        let mut halvings = 0;
        let (candidate, cand_obj) = loop {
            let cand = [beta[0] + scale * step[0], beta[1] + scale * step[1], beta[2] + scale * step[2]];
            let obj = design.penalized_loglik(&cand);
            if obj.is_finite() && obj + slack >= objective {
                break (Some(cand), obj);
            }
            halvings += 1;
            if halvings > MAX_HALVINGS {
                break (None, objective);
            }
            scale = scale / T::lit(2.0);
        };
        let Some(candidate) = candidate else {
            separation = true;
            break;
        };
        let max_step = (0..3).map(|i| (candidate[i] - beta[i]).abs()).fold(T::zero(), T::max);
        beta = candidate;
        objective = cand_obj;
        if max_step < tol {
            converged = true;
            break;
        }
    }

    let (_, info) = design.score_and_information(&beta);
    let cov = info
        .inverse()
        .or_else(|| {
            let mut bumped = info.clone();
            bumped[(0, 0)] = bumped[(0, 0)] + T::lit(RIDGE);
            bumped.inverse()
        })
        .unwrap_or_else(|| Matrix::from_diag(&[T::infinity(); 3]))
        .symmetrized();
    if beta.iter().any(|b| b.abs() > T::lit(SEPARATION_BOUND)) {
        separation = true;
    }
    Ok(GlmFit {
        beta,
        cov,
        converged,
        iterations,
        separation_flag: separation,
        deviance: design.deviance(&beta),
        n_points: design.x.len(),
    })
}

/// The p = 0.5 locus `β0 + β1·x + β2·y = 0` in the (x_j3, x_k3) plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecisionBoundary<T> {
    /// `y = intercept + slope · x`.
    Line { intercept: T, slope: T },
    /// `x = x`.
    Vertical { x: T },
    /// Both slopes are zero; the surface is flat.
    NoBoundary,
}

pub fn decision_boundary<T: Scalar>(beta: &[T; 3]) -> DecisionBoundary<T> {
    let [b0, b1, b2] = *beta;
    if b2 != T::zero() {
        DecisionBoundary::Line { intercept: -b0 / b2 + T::zero(), slope: -b1 / b2 + T::zero() }
    } else if b1 != T::zero() {
        DecisionBoundary::Vertical { x: -b0 / b1 + T::zero() }
    } else {
        DecisionBoundary::NoBoundary
    }
}
