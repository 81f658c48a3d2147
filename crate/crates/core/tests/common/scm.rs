//! Linear structural model with three environment-shifted inputs and targets
//! that each depend on exactly one input. Correlations are computed in closed
//! form, then perturbed with Gaussian estimation noise of a known SD.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use tripcorr::icp::{EnvCorrelations, IcpProblem};
use tripcorr::linalg::Matrix;

/// Mean-shift vectors shaped like the prompted exposure environments.
pub const SHIFTS: [[f64; 3]; 3] = [[1.5, 0.0, 0.0], [-0.5, 1.5, -0.2], [-0.5, -0.8, 1.5]];

pub struct Scm {
    /// Index of the true parent for each target.
    pub parents: Vec<usize>,
    /// Standardized effect of the parent on its target.
    pub effect: f64,
}

impl Scm {
    pub fn candidates(&self) -> Vec<String> {
        (1..=3).map(|i| format!("X{i}")).collect()
    }

    pub fn targets(&self) -> Vec<String> {
        (1..=self.parents.len()).map(|i| format!("T{i}")).collect()
    }

    /// Input correlation: I + μμᵀ rescaled to unit diagonal.
    pub fn input_correlation(shift: &[f64; 3]) -> [[f64; 3]; 3] {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = if i == j { 1.0 } else { 0.0 } + shift[i] * shift[j];
            }
        }
        let d: Vec<f64> = (0..3).map(|i| c[i][i].sqrt()).collect();
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] /= d[i] * d[j];
            }
        }
        c
    }

    /// Exact correlations over inputs then targets. Each target has unit
    /// variance, so its standardized slope on the parent is `effect` in
    /// every environment.
    pub fn correlations(&self, shift: &[f64; 3]) -> Vec<Vec<f64>> {
        let r = Self::input_correlation(shift);
        let b = self.effect;
        let n = 3 + self.parents.len();
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                out[i][j] = match (i < 3, j < 3) {
                    (true, true) => r[i][j],
                    (true, false) => b * r[i][self.parents[j - 3]],
                    (false, true) => b * r[self.parents[i - 3]][j],
                    (false, false) if i == j => 1.0,
                    (false, false) => b * b * r[self.parents[i - 3]][self.parents[j - 3]],
                };
            }
        }
        out
    }

    pub fn environment<R: Rng>(&self, name: &str, shift: &[f64; 3], se: f64, rng: &mut R) -> EnvCorrelations<f64> {
        let exact = self.correlations(shift);
        let n = exact.len();
        let noise = Normal::new(0.0, se).unwrap();
        let mut rho = Matrix::identity(n);
        let mut sd = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let v = exact[i][j] + noise.sample(rng);
                rho[(i, j)] = v;
                rho[(j, i)] = v;
                sd[(i, j)] = se;
                sd[(j, i)] = se;
            }
        }
        let mut variables = self.candidates();
        variables.extend(self.targets());
        EnvCorrelations { env: name.into(), variables, rho, se: sd }
    }

    pub fn problem<R: Rng>(&self, shifts: &[[f64; 3]], se: f64, alpha: f64, rng: &mut R) -> IcpProblem<f64> {
        IcpProblem {
            targets: self.targets(),
            candidates: self.candidates(),
            environments: shifts
                .iter()
                .enumerate()
                .map(|(e, s)| self.environment(&format!("E{}", e + 1), s, se, rng))
                .collect(),
            alpha,
        }
    }
}
