mod common;

use common::scm::{Scm, SHIFTS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tripcorr::icp::{
    mask_contains, run_icp, slope_covariance, standardized_slopes, EnvCorrelations, IcpError, IcpProblem,
};
use tripcorr::linalg::Matrix;

fn slopes_of(r: &[[f64; 2]; 2], t: &[f64; 2]) -> Vec<f64> {
    let m = Matrix::from_rows(&[r[0].to_vec(), r[1].to_vec()]);
    standardized_slopes(&m, t).unwrap().beta
}

#[test]
fn covariance_matches_finite_differences() {
    let r = [[1.0, 0.5], [0.5, 1.0]];
    let t = [0.5, 0.25];
    let var_r = [0.01, 0.04];
    let var_rr = 0.02;
    let m = Matrix::from_rows(&[r[0].to_vec(), r[1].to_vec()]);
    let s = standardized_slopes(&m, &t).unwrap();
    let mut var_ss = Matrix::zeros(2, 2);
    var_ss[(0, 1)] = var_rr;
    var_ss[(1, 0)] = var_rr;
    let cov = slope_covariance(&s, &var_ss, &var_r).unwrap();

    // numeric Jacobian over (r_0, r_1, R_01)
    let h = 1e-6;
    let mut jac = [[0.0; 3]; 2];
    for k in 0..3 {
        let bump = |sign: f64| {
            let (mut rr, mut tt) = (r, t);
            match k {
                0 | 1 => tt[k] += sign * h,
                _ => {
                    rr[0][1] += sign * h;
                    rr[1][0] += sign * h;
                }
            }
            slopes_of(&rr, &tt)
        };
        let (up, down) = (bump(1.0), bump(-1.0));
        for i in 0..2 {
            jac[i][k] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    let vars = [var_r[0], var_r[1], var_rr];
    for i in 0..2 {
        for j in 0..2 {
            let expected: f64 = (0..3).map(|k| jac[i][k] * vars[k] * jac[j][k]).sum();
            assert!((cov[(i, j)] - expected).abs() <= 1e-3 * expected.abs().max(1e-12), "[{i}][{j}]");
        }
    }
}

#[test]
fn fixed_r_covariance_is_sandwich() {
    let m: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]);
    let s = standardized_slopes(&m, &[0.5, 0.25]).unwrap();
    let cov = slope_covariance(&s, &Matrix::zeros(2, 2), &[0.01, 0.03]).unwrap();
    let inv = m.inverse().unwrap();
    let sandwich = inv.matmul(&Matrix::from_diag(&[0.01, 0.03])).matmul(&inv);
    for i in 0..2 {
        for j in 0..2 {
            assert!((cov[(i, j)] - sandwich[(i, j)]).abs() < 1e-14);
        }
    }
}

fn env(name: &str, vars: &[&str], rho: Vec<Vec<f64>>, se: f64) -> EnvCorrelations<f64> {
    let n = vars.len();
    let mut s = Matrix::from_rows(&vec![vec![se; n]; n]);
    for i in 0..n {
        s[(i, i)] = 0.0;
    }
    EnvCorrelations { env: name.into(), variables: vars.iter().map(|v| v.to_string()).collect(), rho: Matrix::from_rows(&rho), se: s }
}

#[test]
fn single_candidate_identical_environments() {
    let rho = vec![vec![1.0, 0.4, 0.0], vec![0.4, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let vars = ["A", "T", "B"];
    let p = IcpProblem {
        targets: vec!["T".into()],
        candidates: vec!["A".into()],
        environments: vec![env("E1", &vars, rho.clone(), 1e-3), env("E2", &vars, rho, 1e-3)],
        alpha: 0.05,
    };
    let r = run_icp(&p).unwrap();
    assert_eq!(r.targets[0].subsets.len(), 1);
    assert!(r.targets[0].subsets[0].accepted);
    assert_eq!(r.targets[0].parents, vec!["A"]);
}

#[test]
fn everything_rejected_reports_no_parents() {
    let vars = ["A", "T"];
    let e1 = env("E1", &vars, vec![vec![1.0, 0.1], vec![0.1, 1.0]], 0.01);
    let e2 = env("E2", &vars, vec![vec![1.0, 0.8], vec![0.8, 1.0]], 0.01);
    let p = IcpProblem { targets: vec!["T".into()], candidates: vec!["A".into()], environments: vec![e1, e2], alpha: 0.05 };
    let r = run_icp(&p).unwrap();
    assert!(r.targets[0].all_rejected);
    assert!(r.targets[0].parents.is_empty());
}

#[test]
fn missing_entries_are_named() {
    let vars = ["A", "B", "T"];
    let mut rho = vec![vec![1.0, 0.2, 0.3], vec![0.2, 1.0, 0.1], vec![0.3, 0.1, 1.0]];
    let good = env("E1", &vars, rho.clone(), 0.01);
    rho[1][2] = f64::NAN;
    rho[2][1] = f64::NAN;
    let bad = env("E2", &vars, rho, 0.01);
    let p = IcpProblem {
        targets: vec!["T".into()],
        candidates: vec!["A".into(), "B".into()],
        environments: vec![good.clone(), bad],
        alpha: 0.05,
    };
    match run_icp(&p) {
        Err(IcpError::MissingEntry { env, a, b }) => assert_eq!((env.as_str(), a.as_str(), b.as_str()), ("E2", "B", "T")),
        other => panic!("unexpected {other:?}"),
    }
    let one = IcpProblem { environments: vec![good], ..p.clone() };
    assert!(matches!(run_icp(&one), Err(IcpError::TooFewEnvironments(1))));
    let clash = IcpProblem { targets: vec!["A".into()], ..p };
    assert!(matches!(run_icp(&clash), Err(IcpError::TargetIsCandidate(_))));
}

#[test]
fn report_shape_and_invariants() {
    let scm = Scm { parents: vec![0, 1, 2], effect: 0.6 };
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = run_icp(&scm.problem(&SHIFTS, 0.02, 0.05, &mut rng)).unwrap();
        for t in &r.targets {
            assert_eq!(t.subsets.len(), 7);
            assert_eq!(t.subsets.iter().map(|s| s.mask).collect::<Vec<_>>(), vec![1, 2, 4, 3, 5, 6, 7]);
            for s in &t.subsets {
                assert_eq!(s.df, 2 * s.subset.len());
                assert_eq!(s.accepted, s.p_value > 0.05);
                if s.accepted {
                    assert!(t.parents.iter().all(|p| s.subset.contains(p)));
                }
            }
            assert_eq!(t.all_rejected, !t.subsets.iter().any(|s| s.accepted));
        }
    }
}

#[test]
fn discovers_single_parents() {
    let scm = Scm { parents: vec![0, 1, 2], effect: 0.6 };
    let mut exact = 0;
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let r = run_icp(&scm.problem(&SHIFTS, 0.02, 0.05, &mut rng)).unwrap();
        if r.targets.iter().zip(["X1", "X2", "X3"]).all(|(t, p)| t.parents == vec![p]) {
            exact += 1;
        }
    }
    assert!(exact >= 36, "{exact}/40");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn candidate_order_does_not_matter(seed in 0u64..10_000, perm in 0usize..6) {
        let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let order = orders[perm];
        let scm = Scm { parents: vec![0, 2], effect: 0.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = scm.problem(&SHIFTS, 0.02, 0.05, &mut rng);
        let q = IcpProblem { candidates: order.iter().map(|&i| p.candidates[i].clone()).collect(), ..p.clone() };
        let (a, b) = (run_icp(&p).unwrap(), run_icp(&q).unwrap());
        for (ta, tb) in a.targets.iter().zip(&b.targets) {
            let mut pa = ta.parents.clone();
            let mut pb = tb.parents.clone();
            pa.sort();
            pb.sort();
            prop_assert_eq!(pa, pb);
            for sa in &ta.subsets {
                let mut key = sa.subset.clone();
                key.sort();
                let sb = tb.subsets.iter().find(|s| { let mut k = s.subset.clone(); k.sort(); k == key }).unwrap();
                prop_assert!((sa.wald - sb.wald).abs() < 1e-10 * sa.wald.max(1.0));
                prop_assert!((sa.p_value - sb.p_value).abs() < 1e-10);
                for (e, slopes) in sa.slopes_per_env.iter().enumerate() {
                    for (i, name) in sa.subset.iter().enumerate() {
                        let j = sb.subset.iter().position(|n| n == name).unwrap();
                        prop_assert!((slopes[i] - sb.slopes_per_env[e][j]).abs() < 1e-10);
                    }
                }
            }
        }
        let n = 3;
        for s in &a.targets[0].subsets {
            let members: Vec<usize> = (0..n).filter(|&i| mask_contains(s.mask, n, i)).collect();
            prop_assert_eq!(members.len(), s.subset.len());
        }
    }
}
