#![allow(dead_code)]

#[path = "../../../core/tests/common/mod.rs"]
pub mod shared;

pub use shared::mock_http;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use mock_http::{completion, serve, MockServer, Request};
use tripcorr_cli::{run, Cli, Completion, CliError};

pub const PAIR_CONFIG: &str = r#"
persona = "You are a clinician."

[[variables]]
id = "A"
description = "first marker"

[[variables]]
id = "B"
description = "second marker"

[[variables]]
id = "C"
description = "third marker"

[[environments]]
id = "E1"
description = "Population one."

[[environments]]
id = "E2"
description = "Population two."

[oracle]
beta_s = 4.0
sigma = 10.0
correlations = [
  { a = "A", b = "B", rho = 0.6 },
  { a = "A", b = "C", rho = 0.2 },
  { a = "B", b = "C", rho = 0.4 },
]
"#;

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("study.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Runs the CLI in-process with `args` after the program name.
pub fn invoke(args: &[&str]) -> (Result<Completion, CliError>, String) {
    let mut argv = vec!["tripcorr"];
    argv.extend_from_slice(args);
    let cli = <Cli as clap::Parser>::try_parse_from(argv).expect("arguments parse");
    let mut out = Vec::new();
    let result = run(&cli, &mut out);
    (result, String::from_utf8(out).unwrap())
}

fn value_of(line: &str, var: &str) -> Option<f64> {
    let rest = line.split_once(':')?.1;
    rest.split(',').find_map(|field| {
        let (name, value) = field.split_once('=')?;
        (name.trim() == var).then(|| value.trim().parse().ok()).flatten()
    })
}

/// Parses the numbers out of a rendered triplet prompt:
/// (x_j for patients 1, 2, 3; x_k for patient 3).
pub fn triplet_values(prompt: &str) -> Option<([f64; 3], f64)> {
    let lines: Vec<&str> = prompt.lines().filter(|l| l.starts_with("Patient ")).collect();
    if lines.len() != 3 {
        return None;
    }
    let j = lines[2].split_once(':')?.1.split('=').next()?.trim().to_string();
    let k = lines[2].split(',').nth(1)?.split('=').next()?.trim().to_string();
    let xj = [value_of(lines[0], &j)?, value_of(lines[1], &j)?, value_of(lines[2], &j)?];
    Some((xj, value_of(lines[2], &k)?))
}

/// Simulated model behind HTTP: imputes the missing value as `rho * x_j`
/// and picks the closer patient with logistic noise. Draws come from a
/// counter, so answers differ across replicates of the same prompt.
pub fn respondent(rho: f64) -> MockServer {
    let counter = AtomicU64::new(0x9e37_79b9);
    serve(move |req: &Request| {
        let prompt = req.prompt();
        let Some((xj, xk3)) = triplet_values(&prompt) else {
            return (200, completion("0.3"));
        };
        let d = |i: usize| (xj[i] - xj[2]).powi(2) + (rho * xj[i] - xk3).powi(2);
        let p2 = 1.0 / (1.0 + (-2.0 * (d(0) - d(1))).exp());
        let n = counter.fetch_add(0x9e37_79b9_7f4a_7c15, Ordering::SeqCst);
        let u = (splitmix(n) >> 11) as f64 / (1u64 << 53) as f64;
        (200, completion(if u < p2 { "2" } else { "1" }))
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Every artifact in `dir` except the manifest and the cache, by name.
pub fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name != "manifest.json" && name != "cache.jsonl"
        })
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}
