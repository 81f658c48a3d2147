//! Run artifacts: delimited tables, matrix and report JSON, and the run
//! manifest. Every artifact carries the digest of the config that produced it.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::{CorrelationMatrix, DirectSummary, PairOutcome, SweepPoint};
use crate::gateway::RequestStats;
use crate::glm::decision_boundary;
use crate::icp::{mask_contains, EnvCorrelations, IcpReport};
use crate::linalg::Matrix;

pub const DIGEST_PREFIX: &str = "# config_digest=";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("artifacts come from different configs: {0} and {1}")]
    DigestMismatch(String, String),
}

/// Shortest round-trip decimal form; `NaN` and `inf` spelled out.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "NA".into())
}

fn flag(b: bool) -> String {
    if b { "1".into() } else { "0".into() }
}

/// A tab-separated table preceded by the digest comment line.
pub fn tsv(digest: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields");
    format!("{DIGEST_PREFIX}{digest}\n{body}")
}

/// Reads the digest line of a TSV artifact.
pub fn tsv_digest(text: &str) -> Option<&str> {
    text.lines().next()?.strip_prefix(DIGEST_PREFIX)
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), ArtifactError> {
    let err = |source| ArtifactError::Io { path: path.display().to_string(), source };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(err)?;
    }
    fs::write(path, contents).map_err(err)
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// One environment's correlation matrix as written to `matrix_<env>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixArtifact {
    pub config_digest: String,
    pub env: String,
    pub variables: Vec<String>,
    pub rho: Vec<Vec<Option<f64>>>,
    pub se: Vec<Vec<Option<f64>>>,
}

impl MatrixArtifact {
    pub fn new(digest: &str, m: &CorrelationMatrix) -> Self {
        Self {
            config_digest: digest.to_string(),
            env: m.env.clone(),
            variables: m.variables.clone(),
            rho: m.rho.clone(),
            se: m.se.clone(),
        }
    }

    pub fn file_name(env: &str) -> String {
        format!("matrix_{env}.json")
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn read(path: &Path) -> Result<Self, ArtifactError> {
        let text = fs::read_to_string(path).map_err(|source| ArtifactError::Io { path: path.display().to_string(), source })?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| ArtifactError::Format { path: path.display().to_string(), message: e.to_string() })?;
        let n = m.variables.len();
        let square = |x: &Vec<Vec<Option<f64>>>| x.len() == n && x.iter().all(|r| r.len() == n);
        if !square(&m.rho) || !square(&m.se) {
            return Err(ArtifactError::Format {
                path: path.display().to_string(),
                message: format!("matrices are not {n}x{n}"),
            });
        }
        Ok(m)
    }

    pub fn to_env_correlations(&self) -> EnvCorrelations<f64> {
        let conv = |x: &Vec<Vec<Option<f64>>>| {
            Matrix::from_rows(&x.iter().map(|r| r.iter().map(|v| v.unwrap_or(f64::NAN)).collect()).collect::<Vec<_>>())
        };
        EnvCorrelations { env: self.env.clone(), variables: self.variables.clone(), rho: conv(&self.rho), se: conv(&self.se) }
    }
}

/// All artifacts must share one digest.
pub fn check_digests<'a>(digests: impl IntoIterator<Item = &'a str>) -> Result<Option<String>, ArtifactError> {
    let mut first: Option<&str> = None;
    for d in digests {
        match first {
            None => first = Some(d),
            Some(f) if f != d => return Err(ArtifactError::DigestMismatch(f.to_string(), d.to_string())),
            _ => {}
        }
    }
    Ok(first.map(str::to_string))
}

fn pair_label(o: &PairOutcome) -> [String; 3] {
    [o.env.clone(), o.a.clone(), o.b.clone()]
}

pub fn estimates_tsv(digest: &str, pairs: &[&PairOutcome]) -> String {
    let header = [
        "env", "a", "b", "rho_hat", "se", "ratio_ab", "var_ratio_ab", "ratio_ba", "var_ratio_ba", "beta1_t_ab",
        "beta1_t_ba", "sign_conflict", "unstable", "clamped", "converged", "separation", "status",
    ];
    let rows: Vec<Vec<String>> = pairs
        .iter()
        .map(|o| {
            let mut row = pair_label(o).to_vec();
            match &o.estimate {
                Ok(e) => {
                    let [d1, d2] = &e.directed;
                    row.extend([
                        fmt_f64(e.rho.rho_hat),
                        fmt_f64(e.rho.se),
                        fmt_f64(d1.ratio),
                        fmt_f64(d1.var_ratio),
                        fmt_f64(d2.ratio),
                        fmt_f64(d2.var_ratio),
                        fmt_f64(d1.beta1_t),
                        fmt_f64(d2.beta1_t),
                        flag(e.rho.sign_conflict),
                        flag(e.rho.unstable),
                        flag(e.rho.clamped),
                        flag(d1.fit.converged && d2.fit.converged),
                        flag(d1.fit.separation_flag || d2.fit.separation_flag),
                        "ok".into(),
                    ]);
                }
                Err(err) => {
                    row.extend(std::iter::repeat_n("NA".to_string(), 13));
                    row.push(err.to_string());
                }
            }
            row
        })
        .collect();
    tsv(digest, &header, &rows)
}

/// Per grid point counts for both directions of every pair, before and after
/// replicate extension.
pub fn surfaces_tsv(digest: &str, pairs: &[&PairOutcome]) -> String {
    let header = ["env", "j", "k", "x_j3", "x_k3", "initial_count1", "initial_count2", "count1", "count2", "frac_patient2"];
    let mut rows = Vec::new();
    for o in pairs {
        for t in &o.tallies {
            for (i, f) in t.initial.iter().zip(&t.tallies) {
                let total = f.count1 + f.count2;
                rows.push(vec![
                    t.env.clone(),
                    t.pair.j.clone(),
                    t.pair.k.clone(),
                    fmt_f64(f.x_j3),
                    fmt_f64(f.x_k3),
                    fmt_f64(i.count1),
                    fmt_f64(i.count2),
                    fmt_f64(f.count1),
                    fmt_f64(f.count2),
                    if total > 0.0 { fmt_f64(f.count2 / total) } else { "NA".into() },
                ]);
            }
        }
    }
    tsv(digest, &header, &rows)
}

/// Fitted surrogate coefficients and the p = 0.5 boundary per direction.
pub fn boundaries_tsv(digest: &str, pairs: &[&PairOutcome]) -> String {
    let header = [
        "env", "j", "k", "beta0", "beta1", "beta2", "se0", "se1", "se2", "converged", "iterations", "separation",
        "boundary", "intercept", "slope", "status",
    ];
    let mut rows = Vec::new();
    for o in pairs {
        for (t, fit) in o.tallies.iter().zip(&o.fits) {
            let mut row = vec![t.env.clone(), t.pair.j.clone(), t.pair.k.clone()];
            match fit {
                Ok(f) => {
                    row.extend(f.beta.iter().map(|&b| fmt_f64(b)));
                    row.extend((0..3).map(|i| fmt_f64(f.se(i))));
                    row.extend([flag(f.converged), f.iterations.to_string(), flag(f.separation_flag)]);
                    let (kind, a, b) = match decision_boundary(&f.beta) {
                        crate::glm::DecisionBoundary::Line { intercept, slope } => ("line", fmt_f64(intercept), fmt_f64(slope)),
                        crate::glm::DecisionBoundary::Vertical { x } => ("vertical", fmt_f64(x), "NA".into()),
                        crate::glm::DecisionBoundary::NoBoundary => ("none", "NA".into(), "NA".into()),
                    };
                    row.extend([kind.to_string(), a, b, "ok".into()]);
                }
                Err(e) => {
                    row.extend(std::iter::repeat_n("NA".to_string(), 12));
                    row.push(e.to_string());
                }
            }
            rows.push(row);
        }
    }
    tsv(digest, &header, &rows)
}

pub fn diagnostics_tsv(digest: &str, pairs: &[&PairOutcome]) -> String {
    let header = ["env", "j", "k", "queries", "invalid", "failed", "extended_points", "dropped_points", "errors"];
    let mut rows = Vec::new();
    for o in pairs {
        for t in &o.tallies {
            let d = &t.diagnostics;
            rows.push(vec![
                t.env.clone(),
                t.pair.j.clone(),
                t.pair.k.clone(),
                d.queries.to_string(),
                d.invalid.to_string(),
                d.failed.to_string(),
                d.extended_points.to_string(),
                d.dropped_points.to_string(),
                d.errors.join(" | "),
            ]);
        }
    }
    tsv(digest, &header, &rows)
}

pub fn direct_samples_tsv(digest: &str, groups: &[DirectSummary]) -> String {
    let rows: Vec<Vec<String>> = groups
        .iter()
        .flat_map(|g| {
            g.samples
                .iter()
                .map(|(r, v)| vec![g.env.clone(), g.a.clone(), g.b.clone(), r.to_string(), fmt_f64(*v)])
        })
        .collect();
    tsv(digest, &["env", "a", "b", "replicate", "value"], &rows)
}

pub fn direct_summary_tsv(digest: &str, groups: &[DirectSummary]) -> String {
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|g| {
            vec![
                g.env.clone(),
                g.a.clone(),
                g.b.clone(),
                g.n_requested.to_string(),
                g.n_valid.to_string(),
                g.n_failed.to_string(),
                fmt_opt(g.mean),
                fmt_opt(g.sd),
            ]
        })
        .collect();
    tsv(digest, &["env", "a", "b", "n_requested", "n_valid", "n_failed", "mean", "sd"], &rows)
}

pub fn sweep_tsv(digest: &str, points: &[SweepPoint]) -> String {
    let header = ["center", "env", "a", "b", "rho_hat", "se", "sign_conflict", "unstable", "clamped", "status"];
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            let mut row = vec![fmt_f64(p.center)];
            let est = p.outcome.as_ref().map_err(|e| e.to_string()).and_then(|o| {
                row.extend(pair_label(o));
                o.estimate.as_ref().map_err(|e| e.to_string())
            });
            if row.len() == 1 {
                row.extend(["NA".to_string(), "NA".into(), "NA".into()]);
            }
            match est {
                Ok(e) => row.extend([
                    fmt_f64(e.rho.rho_hat),
                    fmt_f64(e.rho.se),
                    flag(e.rho.sign_conflict),
                    flag(e.rho.unstable),
                    flag(e.rho.clamped),
                    "ok".into(),
                ]),
                Err(msg) => {
                    row.extend(std::iter::repeat_n("NA".to_string(), 5));
                    row.push(msg);
                }
            }
            row
        })
        .collect();
    tsv(digest, &header, &rows)
}

/// The p-value grid: one row per subset with an inclusion marker column per
/// candidate, then each target's p-value and whether it is rejected at alpha.
pub fn icp_pvalues_tsv(digest: &str, report: &IcpReport<f64>) -> String {
    let n = report.candidates.len();
    let mut header: Vec<String> = report.candidates.clone();
    for t in &report.targets {
        header.push(t.target.clone());
        header.push(format!("{}_rejected", t.target));
    }
    let n_rows = report.targets.first().map_or(0, |t| t.subsets.len());
    let rows: Vec<Vec<String>> = (0..n_rows)
        .map(|r| {
            let mask = report.targets[0].subsets[r].mask;
            let mut row: Vec<String> = (0..n).map(|i| flag(mask_contains(mask, n, i))).collect();
            for t in &report.targets {
                let s = &t.subsets[r];
                row.push(fmt_f64(s.p_value));
                row.push(if s.skipped.is_some() { "NA".into() } else { flag(!s.accepted) });
            }
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    tsv(digest, &header, &rows)
}

pub fn icp_parents_tsv(digest: &str, report: &IcpReport<f64>) -> String {
    let rows: Vec<Vec<String>> = report
        .targets
        .iter()
        .map(|t| {
            let parents = if t.parents.is_empty() { "-".to_string() } else { t.parents.join(",") };
            let skipped = t.subsets.iter().filter(|s| s.skipped.is_some()).count();
            vec![t.target.clone(), parents, flag(t.all_rejected), skipped.to_string()]
        })
        .collect();
    tsv(digest, &["target", "parents", "all_rejected", "skipped_subsets"], &rows)
}

#[derive(Serialize)]
struct IcpReportFile<'a> {
    config_digest: &'a str,
    #[serde(flatten)]
    report: &'a IcpReport<f64>,
}

pub fn icp_report_json(digest: &str, report: &IcpReport<f64>) -> String {
    to_json(&IcpReportFile { config_digest: digest, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub command: String,
    pub cache_path: Option<String>,
    pub started: DateTime<Utc>,
    pub finished: Option<DateTime<Utc>>,
    pub requests: RequestStats,
    pub cache_records_before: usize,
    pub cache_records_after: usize,
    pub artifacts: Vec<String>,
    pub versions: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn start(digest: &str, command: &str, cache_path: Option<&Path>, cache_records: usize) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert(env!("CARGO_PKG_NAME").to_string(), env!("CARGO_PKG_VERSION").to_string());
        Self {
            config_digest: digest.to_string(),
            command: command.to_string(),
            cache_path: cache_path.map(|p| p.display().to_string()),
            started: Utc::now(),
            finished: None,
            requests: RequestStats::default(),
            cache_records_before: cache_records,
            cache_records_after: cache_records,
            artifacts: Vec::new(),
            versions,
        }
    }

    pub fn finish(&mut self, requests: RequestStats, cache_records: usize) {
        self.finished = Some(Utc::now());
        self.requests = requests;
        self.cache_records_after = cache_records;
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }
}
