//! Slow, independent reference computations for checking the fast paths.

use tripcorr::glm::TripletTally;

/// Nine points on {-1, 0, 1}², 20 answers each, counts rounded from the
/// logistic model with β = (0.2, 1.0, -0.5).
pub fn nine_point_fixture() -> Vec<TripletTally<f64>> {
    let beta = [0.2, 1.0, -0.5];
    let mut out = Vec::new();
    for x in [-1.0, 0.0, 1.0] {
        for y in [-1.0, 0.0, 1.0] {
            let eta: f64 = beta[0] + beta[1] * x + beta[2] * y;
            let p = 1.0 / (1.0 + (-eta).exp());
            let c2 = (20.0 * p).round();
            out.push(TripletTally { x_j3: x, x_k3: y, count1: 20.0 - c2, count2: c2 });
        }
    }
    out
}

pub fn log_likelihood(t: &[TripletTally<f64>], b: &[f64; 3]) -> f64 {
    t.iter()
        .map(|p| {
            let eta = b[0] + b[1] * p.x_j3 + b[2] * p.x_k3;
            // log p = -log(1 + e^-eta), log(1 - p) = -log(1 + e^eta)
            -p.count2 * (-eta).exp().ln_1p() - p.count1 * eta.exp().ln_1p()
        })
        .sum()
}

/// Cyclic golden-section coordinate ascent; no derivatives.
pub fn brute_force_mle(t: &[TripletTally<f64>]) -> [f64; 3] {
    let mut b = [0.0; 3];
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..400 {
        let before = b;
        for i in 0..3 {
            let f = |v: f64| {
                let mut c = b;
                c[i] = v;
                log_likelihood(t, &c)
            };
            let (mut lo, mut hi) = (b[i] - 5.0, b[i] + 5.0);
            let mut x1 = hi - phi * (hi - lo);
            let mut x2 = lo + phi * (hi - lo);
            let (mut f1, mut f2) = (f(x1), f(x2));
            while hi - lo > 1e-13 {
                if f1 < f2 {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = lo + phi * (hi - lo);
                    f2 = f(x2);
                } else {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = hi - phi * (hi - lo);
                    f1 = f(x1);
                }
            }
            b[i] = (lo + hi) / 2.0;
        }
        if before.iter().zip(&b).all(|(a, c)| (a - c).abs() < 1e-13) {
            break;
        }
    }
    b
}

/// Central-difference Hessian of the negative log-likelihood.
pub fn fd_neg_hessian(t: &[TripletTally<f64>], b: &[f64; 3], h: f64) -> [[f64; 3]; 3] {
    let f = |d: [f64; 3]| -log_likelihood(t, &[b[0] + d[0], b[1] + d[1], b[2] + d[2]]);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let shift = |si: f64, sj: f64| {
                let mut d = [0.0; 3];
                d[i] += si * h;
                d[j] += sj * h;
                f(d)
            };
            out[i][j] = (shift(1.0, 1.0) - shift(1.0, -1.0) - shift(-1.0, 1.0) + shift(-1.0, -1.0)) / (4.0 * h * h);
        }
    }
    out
}

/// 3×3 inverse by cofactors.
pub fn inverse3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
        [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
        [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
    ];
    let det: f64 = (0..3).map(|j| m[0][j] * cof[0][j]).sum();
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = cof[j][i] / det;
        }
    }
    out
}
