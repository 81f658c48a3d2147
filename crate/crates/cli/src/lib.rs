//! Command implementations behind the `tripcorr` binary.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use tripcorr::config::{estimate_request_budget, is_one_decimal, ConfigError, DirectedPair, StudyConfig};
use tripcorr::estimate::{
    build_matrix, direct_baseline, reference_sweep, CorrelationMatrix, DirectSummary, Elicitor, ExpectedOracle,
    PairOutcome, TallyProvider,
};
use tripcorr::gateway::{AnswerSource, Gateway, RequestStats, ResponseCache};
use tripcorr::icp::{run_icp, IcpError, IcpProblem};
use tripcorr::oracle::{OracleParams, OracleSource};
use tripcorr::prompt::{render_direct, render_triplet, DirectQuery, TripletQuery};
use tripcorr::report::{self, ArtifactError, MatrixArtifact, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "tripcorr", version, about = "Elicit correlations from a language model with triplet comparisons")]
pub struct Cli {
    /// Study configuration (TOML).
    #[arg(long, global = true, default_value = "study.toml")]
    pub config: PathBuf,
    /// Response cache; defaults to `<out-dir>/cache.jsonl`.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// Answer from the cache only; misses are reported as failures.
    #[arg(long, global = true)]
    pub offline: bool,
    /// Overrides the oracle seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub max_parallel: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Overrides `endpoint.base_url`.
    #[arg(long, global = true)]
    pub endpoint_url: Option<String>,
    /// Overrides `endpoint.model_name`.
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the config and print its digest.
    Validate,
    /// Print one prompt: `triplet:J:K:X3:XK[@ENV]` or `direct:A:B[@ENV]`.
    Render {
        #[arg(long, allow_hyphen_values = true)]
        query: String,
    },
    /// Build correlation matrices by querying the endpoint.
    Elicit(Selection),
    /// Build correlation matrices from the oracle in the config.
    Simulate {
        #[arg(long, value_enum, default_value_t = Mode::Expected)]
        mode: Mode,
        #[command(flatten)]
        selection: Selection,
    },
    /// Ask for correlations directly, repeatedly.
    Direct {
        #[command(flatten)]
        selection: Selection,
        /// Defaults to `direct_repetitions` from the config.
        #[arg(long)]
        repetitions: Option<usize>,
        /// Answer from the oracle instead of the endpoint.
        #[arg(long)]
        oracle: bool,
    },
    /// Invariance tests over matrices from two or more environments.
    Icp {
        /// A `matrix_<env>.json` file; repeat per environment.
        #[arg(long = "matrix", required = true)]
        matrices: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<String>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Re-estimate one pair with the reference value moved.
    SweepRef {
        /// `A:B`.
        #[arg(long)]
        pair: String,
        #[arg(long, default_value = "default")]
        env: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,-0.5,0,0.5,1")]
        centers: Vec<f64>,
        /// Use the oracle instead of the endpoint.
        #[arg(long, value_enum)]
        oracle: Option<Mode>,
    },
    /// Print the request count range for a study.
    Budget {
        /// Unordered pairs; defaults to all pairs of the matrix variables.
        #[arg(long)]
        pairs: Option<usize>,
        /// Defaults to the number of environments in the config.
        #[arg(long)]
        envs: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Expected,
    Sampled,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Selection {
    /// Environments to run; all when omitted.
    #[arg(long = "env", value_delimiter = ',')]
    pub envs: Vec<String>,
    /// Pairs as `A:B`; all matrix pairs when omitted.
    #[arg(long, value_delimiter = ',')]
    pub pairs: Vec<String>,
    /// Use the pairs needed by the `[icp]` design instead of the matrix pairs.
    #[arg(long)]
    pub icp: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing data for ICP: {0}")]
    IcpData(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::IcpData(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ArtifactError> for CliError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::DigestMismatch(..) => CliError::IcpData(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

/// How a command finished when it did not error out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Complete,
    /// Some pairs or queries failed; artifacts for the rest were written.
    Partial,
}

impl Completion {
    pub fn exit_code(self) -> i32 {
        match self {
            Completion::Complete => 0,
            Completion::Partial => 3,
        }
    }
}

pub fn exit_code(result: &Result<Completion, CliError>) -> i32 {
    match result {
        Ok(c) => c.exit_code(),
        Err(e) => e.exit_code(),
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<Completion, CliError> {
    match &cli.command {
        Command::Validate => {
            let (cfg, digest) = load_config(cli)?;
            say(out, format!("ok: {} variables, {} environments", cfg.variables.len(), cfg.environments.len()))?;
            say(out, format!("config_digest={digest}"))?;
            Ok(Completion::Complete)
        }
        Command::Render { query } => {
            let (cfg, _) = load_config(cli)?;
            say(out, render_query(&cfg, query)?)?;
            Ok(Completion::Complete)
        }
        Command::Budget { pairs, envs } => {
            let (cfg, _) = load_config(cli)?;
            let n_pairs = pairs.unwrap_or_else(|| cfg.matrix_pairs().len());
            let n_envs = envs.unwrap_or(cfg.environments.len());
            let b = estimate_request_budget(&cfg, n_pairs, n_envs);
            say(out, format!("pairs\t{n_pairs}\nenvironments\t{n_envs}\nmin_requests\t{}\nmax_requests\t{}", b.min_requests, b.max_requests))?;
            Ok(Completion::Complete)
        }
        Command::Elicit(sel) => {
            let (cfg, digest) = load_config(cli)?;
            let gateway = open_gateway(cli, &cfg)?;
            let cache_before = gateway.cache().len();
            let mut manifest = RunManifest::start(&digest, "elicit", gateway.cache().path(), cache_before);
            let provider = Elicitor { source: &gateway };
            let completion = matrices_command(cli, &cfg, &digest, sel, &provider, &mut manifest)?;
            finish(cli, &mut manifest, gateway.stats(), gateway.cache().len())?;
            report_stats(out, &gateway.stats())?;
            Ok(completion)
        }
        Command::Simulate { mode, selection } => {
            let (cfg, digest) = load_config(cli)?;
            let params = oracle_params(&cfg)?;
            let mut manifest = RunManifest::start(&digest, &format!("simulate --mode {mode:?}").to_lowercase(), None, 0);
            let completion = match mode {
                Mode::Expected => {
                    let weight = cfg.oracle.as_ref().map_or(1.0, |o| o.expected_weight);
                    let provider = ExpectedOracle { params: &params, weight };
                    matrices_command(cli, &cfg, &digest, selection, &provider, &mut manifest)?
                }
                Mode::Sampled => {
                    let source = OracleSource::new(params.clone());
                    let provider = Elicitor { source: &source };
                    matrices_command(cli, &cfg, &digest, selection, &provider, &mut manifest)?
                }
            };
            finish(cli, &mut manifest, RequestStats::default(), 0)?;
            Ok(completion)
        }
        Command::Direct { selection, repetitions, oracle } => {
            let (cfg, digest) = load_config(cli)?;
            let reps = repetitions.unwrap_or(cfg.direct_repetitions);
            let envs = select_envs(&cfg, &selection.envs)?;
            let pairs = select_pairs(&cfg, selection)?;
            let run = |source: &dyn AnswerSource| -> Vec<DirectSummary> {
                envs.iter()
                    .flat_map(|env| pairs.iter().map(move |(a, b)| (env, a, b)))
                    .map(|(env, a, b)| direct_baseline(&cfg, env, (a, b), reps, source))
                    .collect()
            };
            let (groups, stats, cache) = if *oracle {
                let source = OracleSource::new(oracle_params(&cfg)?);
                (run(&source), RequestStats::default(), None)
            } else {
                let gateway = open_gateway(cli, &cfg)?;
                let before = gateway.cache().len();
                let groups = run(&gateway);
                (groups, gateway.stats(), Some((gateway.cache().path().map(Path::to_path_buf), before, gateway.cache().len())))
            };
            let (path, before, after) = cache.unwrap_or((None, 0, 0));
            let mut manifest = RunManifest::start(&digest, "direct", path.as_deref(), before);
            write_artifact(cli, &mut manifest, "direct_samples.tsv", &report::direct_samples_tsv(&digest, &groups))?;
            write_artifact(cli, &mut manifest, "direct_summary.tsv", &report::direct_summary_tsv(&digest, &groups))?;
            finish(cli, &mut manifest, stats, after)?;
            let partial = groups.iter().any(|g| g.n_failed > 0 || g.is_empty());
            Ok(if partial { Completion::Partial } else { Completion::Complete })
        }
        Command::Icp { matrices, targets, candidates, alpha } => {
            icp_command(cli, matrices, targets, candidates, *alpha, out)
        }
        Command::SweepRef { pair, env, centers, oracle } => {
            let (cfg, digest) = load_config(cli)?;
            let (a, b) = parse_pair(&cfg, pair)?;
            if cfg.environment(env).is_none() {
                return Err(CliError::Config(format!("unknown environment \"{env}\"")));
            }
            if let Some(c) = centers.iter().find(|c| !is_one_decimal(**c)) {
                return Err(CliError::Config(format!("reference center {c} is not a multiple of 0.1")));
            }
            let sweep = |p: &dyn TallyProvider| reference_sweep(&cfg, (&a, &b), env, centers, p);
            let (points, stats, cache) = match oracle {
                Some(Mode::Expected) => {
                    let params = oracle_params(&cfg)?;
                    let weight = cfg.oracle.as_ref().map_or(1.0, |o| o.expected_weight);
                    (sweep(&ExpectedOracle { params: &params, weight }), RequestStats::default(), None)
                }
                Some(Mode::Sampled) => {
                    let source = OracleSource::new(oracle_params(&cfg)?);
                    (sweep(&Elicitor { source: &source }), RequestStats::default(), None)
                }
                None => {
                    let gateway = open_gateway(cli, &cfg)?;
                    let before = gateway.cache().len();
                    let points = sweep(&Elicitor { source: &gateway });
                    (points, gateway.stats(), Some((gateway.cache().path().map(Path::to_path_buf), before, gateway.cache().len())))
                }
            };
            let (path, before, after) = cache.unwrap_or((None, 0, 0));
            let mut manifest = RunManifest::start(&digest, "sweep-ref", path.as_deref(), before);
            write_artifact(cli, &mut manifest, "sweep.tsv", &report::sweep_tsv(&digest, &points))?;
            finish(cli, &mut manifest, stats, after)?;
            let partial = points.iter().any(|p| match &p.outcome {
                Ok(o) => !pair_ok(o),
                Err(_) => true,
            });
            Ok(if partial { Completion::Partial } else { Completion::Complete })
        }
    }
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| CliError::Other(e.to_string()))
}

/// Loads the config and applies the command-line overrides that change
/// outputs; the digest covers those overrides.
pub fn load_config(cli: &Cli) -> Result<(StudyConfig, String), CliError> {
    let mut cfg = StudyConfig::load(&cli.config)?;
    if let Some(url) = &cli.endpoint_url {
        cfg.endpoint.base_url = url.clone();
    }
    if let Some(model) = &cli.model {
        cfg.endpoint.model_name = model.clone();
    }
    if let Some(seed) = cli.seed {
        if let Some(o) = cfg.oracle.as_mut() {
            o.seed = seed;
        }
    }
    let cfg = tripcorr::config::validate_config(cfg)?;
    let digest = cfg.digest();
    let mut cfg = cfg;
    if let Some(p) = cli.max_parallel {
        if p == 0 {
            return Err(CliError::Config("--max-parallel must be at least 1".into()));
        }
        cfg.sampling.max_parallel = p;
    }
    Ok((cfg, digest))
}

fn cache_path(cli: &Cli) -> PathBuf {
    cli.cache.clone().unwrap_or_else(|| cli.out_dir.join("cache.jsonl"))
}

fn open_gateway(cli: &Cli, cfg: &StudyConfig) -> Result<Gateway, CliError> {
    let path = cache_path(cli);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?;
    }
    let cache = ResponseCache::open(&path).map_err(|e| CliError::Other(e.to_string()))?;
    let gateway = Gateway::http(cfg.endpoint.clone(), cfg.sampling, cache).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(gateway.offline(cli.offline))
}

fn oracle_params(cfg: &StudyConfig) -> Result<OracleParams, CliError> {
    let spec = cfg.oracle.as_ref().ok_or_else(|| CliError::Config("the config has no [oracle] section".into()))?;
    OracleParams::from_spec(spec, cfg).map_err(|e| CliError::Config(e.to_string()))
}

fn select_envs(cfg: &StudyConfig, wanted: &[String]) -> Result<Vec<String>, CliError> {
    if wanted.is_empty() {
        return Ok(cfg.environments.iter().map(|e| e.id.clone()).collect());
    }
    for e in wanted {
        if cfg.environment(e).is_none() {
            return Err(CliError::Config(format!("unknown environment \"{e}\"")));
        }
    }
    Ok(wanted.to_vec())
}

fn parse_pair(cfg: &StudyConfig, spec: &str) -> Result<(String, String), CliError> {
    let (a, b) = spec
        .split_once(':')
        .ok_or_else(|| CliError::Config(format!("pair \"{spec}\" is not of the form A:B")))?;
    for id in [a, b] {
        if cfg.variable(id).is_none() {
            return Err(CliError::Config(format!("unknown variable \"{id}\"")));
        }
    }
    if a == b {
        return Err(CliError::Config(format!("pair \"{spec}\" repeats a variable")));
    }
    Ok((a.to_string(), b.to_string()))
}

fn select_pairs(cfg: &StudyConfig, sel: &Selection) -> Result<Vec<(String, String)>, CliError> {
    if !sel.pairs.is_empty() {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for p in &sel.pairs {
            let (a, b) = parse_pair(cfg, p)?;
            let key = if a < b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
            if seen.insert(key) {
                out.push((a, b));
            }
        }
        return Ok(out);
    }
    if sel.icp {
        if cfg.icp.is_none() {
            return Err(CliError::Config("--icp needs an [icp] section in the config".into()));
        }
        return Ok(cfg.icp_pairs());
    }
    Ok(cfg.matrix_pairs())
}

fn pair_ok(o: &PairOutcome) -> bool {
    o.estimate.is_ok() && o.tallies.iter().all(|t| t.diagnostics.failed == 0)
}

fn write_artifact(cli: &Cli, manifest: &mut RunManifest, name: &str, contents: &str) -> Result<(), CliError> {
    report::write_file(&cli.out_dir.join(name), contents)?;
    manifest.artifacts.push(name.to_string());
    Ok(())
}

fn finish(cli: &Cli, manifest: &mut RunManifest, stats: RequestStats, cache_records: usize) -> Result<(), CliError> {
    manifest.finish(stats, cache_records);
    report::write_file(&cli.out_dir.join("manifest.json"), &manifest.to_json())?;
    Ok(())
}

fn report_stats(out: &mut dyn Write, s: &RequestStats) -> Result<(), CliError> {
    say(
        out,
        format!(
            "requests: sent={} cache_hits={} invalid={} transient_failures={} offline_misses={}",
            s.sent, s.cache_hits, s.invalid, s.transient_failures, s.offline_misses
        ),
    )
}

fn matrices_command<P: TallyProvider>(
    cli: &Cli,
    cfg: &StudyConfig,
    digest: &str,
    sel: &Selection,
    provider: &P,
    manifest: &mut RunManifest,
) -> Result<Completion, CliError> {
    let envs = select_envs(cfg, &sel.envs)?;
    let pairs = select_pairs(cfg, sel)?;
    let matrices: Vec<CorrelationMatrix> = envs.iter().map(|env| build_matrix(cfg, env, provider, &pairs)).collect();
    for m in &matrices {
        let artifact = MatrixArtifact::new(digest, m);
        write_artifact(cli, manifest, &MatrixArtifact::file_name(&m.env), &artifact.to_json())?;
    }
    let all: Vec<&PairOutcome> = matrices.iter().flat_map(|m| &m.pairs).collect();
    write_artifact(cli, manifest, "estimates.tsv", &report::estimates_tsv(digest, &all))?;
    write_artifact(cli, manifest, "surfaces.tsv", &report::surfaces_tsv(digest, &all))?;
    write_artifact(cli, manifest, "boundaries.tsv", &report::boundaries_tsv(digest, &all))?;
    write_artifact(cli, manifest, "diagnostics.tsv", &report::diagnostics_tsv(digest, &all))?;
    for o in all.iter().filter(|o| !pair_ok(o)) {
        if let Err(e) = &o.estimate {
            eprintln!("warning: {} {}/{}: {e}", o.env, o.a, o.b);
        } else {
            eprintln!("warning: {} {}/{}: some queries failed", o.env, o.a, o.b);
        }
    }
    Ok(if all.iter().all(|o| pair_ok(o)) { Completion::Complete } else { Completion::Partial })
}

fn icp_command(
    cli: &Cli,
    paths: &[PathBuf],
    targets: &[String],
    candidates: &[String],
    alpha: Option<f64>,
    out: &mut dyn Write,
) -> Result<Completion, CliError> {
    let cfg = if targets.is_empty() || candidates.is_empty() || alpha.is_none() {
        Some(load_config(cli)?.0)
    } else {
        None
    };
    let design = cfg.as_ref().and_then(|c| c.icp.clone());
    let pick = |given: &[String], from: Option<Vec<String>>, what: &str| -> Result<Vec<String>, CliError> {
        if !given.is_empty() {
            return Ok(given.to_vec());
        }
        from.ok_or_else(|| CliError::Config(format!("no {what} given and the config has no [icp] section")))
    };
    let targets = pick(targets, design.as_ref().map(|d| d.targets.clone()), "targets")?;
    let candidates = pick(candidates, design.as_ref().map(|d| d.candidates.clone()), "candidates")?;
    let alpha = alpha.or(cfg.as_ref().map(|c| c.alpha)).unwrap_or(0.05);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CliError::Config(format!("alpha {alpha} must be in (0, 1)")));
    }

    let artifacts = paths.iter().map(|p| MatrixArtifact::read(p)).collect::<Result<Vec<_>, _>>()?;
    let digest = report::check_digests(artifacts.iter().map(|a| a.config_digest.as_str()))?.unwrap_or_default();
    let mut envs = BTreeSet::new();
    if let Some(dup) = artifacts.iter().find(|a| !envs.insert(a.env.clone())) {
        return Err(CliError::IcpData(format!("environment \"{}\" given twice", dup.env)));
    }
    let problem = IcpProblem {
        targets,
        candidates,
        environments: artifacts.iter().map(MatrixArtifact::to_env_correlations).collect(),
        alpha,
    };
    let report = run_icp(&problem).map_err(|e| match e {
        IcpError::MissingEntry { .. } | IcpError::TooFewEnvironments(_) => CliError::IcpData(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    let mut manifest = RunManifest::start(&digest, "icp", None, 0);
    write_artifact(cli, &mut manifest, "icp_pvalues.tsv", &report::icp_pvalues_tsv(&digest, &report))?;
    write_artifact(cli, &mut manifest, "icp_parents.tsv", &report::icp_parents_tsv(&digest, &report))?;
    write_artifact(cli, &mut manifest, "icp_report.json", &report::icp_report_json(&digest, &report))?;
    finish(cli, &mut manifest, RequestStats::default(), 0)?;
    for t in &report.targets {
        let parents = if t.all_rejected {
            "all subsets rejected".to_string()
        } else if t.parents.is_empty() {
            "none".to_string()
        } else {
            t.parents.join(", ")
        };
        say(out, format!("{}: {parents}", t.target))?;
    }
    let skipped = report.targets.iter().flat_map(|t| &t.subsets).any(|s| s.skipped.is_some());
    Ok(if skipped { Completion::Partial } else { Completion::Complete })
}

/// Parses `triplet:J:K:X3:XK[@ENV]` or `direct:A:B[@ENV]` and renders the
/// prompt. Triplet anchors come from the config grid.
pub fn render_query(cfg: &StudyConfig, spec: &str) -> Result<String, CliError> {
    let bad = || CliError::Config(format!("cannot parse query \"{spec}\""));
    let (body, env) = match spec.rsplit_once('@') {
        Some((b, e)) => (b, e.to_string()),
        None => (spec, tripcorr::config::DEFAULT_ENV.to_string()),
    };
    let parts: Vec<&str> = body.split(':').collect();
    let rendered = match parts.as_slice() {
        ["triplet", j, k, x3, xk] => {
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            let (x1, x2) = cfg.grid.anchors();
            let q = TripletQuery {
                pair: DirectedPair::new(*j, *k),
                env,
                x_j_1: x1,
                x_j_2: x2,
                x_j_3: num(x3)?,
                x_k_3: num(xk)?,
                replicate_index: 0,
            };
            render_triplet(cfg, &q)
        }
        ["direct", a, b] => render_direct(cfg, &DirectQuery { a: a.to_string(), b: b.to_string(), env, replicate_index: 0 }),
        _ => return Err(bad()),
    };
    rendered.map_err(|e| CliError::Config(e.to_string()))
}
