mod common;

use std::process::Command;

use common::{artifacts, invoke, respondent, write_config, PAIR_CONFIG};
use tripcorr_cli::Completion;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tripcorr"))
}

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bundled_configs_validate() {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    for name in ["copd.toml", "ms.toml", "oracle-demo.toml"] {
        let path = format!("{root}/{name}");
        let (res, out) = invoke(&["--config", &path, "validate"]);
        assert_eq!(res.unwrap(), Completion::Complete, "{name}");
        assert!(out.contains("config_digest="), "{out}");
    }
}

#[test]
fn budget_for_a_full_nine_variable_matrix() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/copd.toml");
    let (res, out) = invoke(&["--config", path, "budget", "--pairs", "36", "--envs", "1"]);
    res.unwrap();
    assert!(out.contains("min_requests\t48600"), "{out}");
    assert!(out.contains("max_requests\t97200"), "{out}");
}

#[test]
fn render_matches_library_prompt() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/copd.toml");
    let (res, out) = invoke(&["--config", path, "render", "--query", "triplet:FEV1:DLCO:0.4:-1.2"]);
    res.unwrap();
    let golden = include_str!("../../core/tests/fixtures/copd_triplet_default.txt");
    assert_eq!(out, golden);

    let (res, _) = invoke(&["--config", path, "render", "--query", "triplet:FEV1:nope:0.4:-1.2"]);
    assert_eq!(res.unwrap_err().exit_code(), 2);
}

#[test]
fn exit_codes_from_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "persona = \"x\"\n[[variables]]\nid = \"A\"\n").unwrap();
    let status = bin().args(["--config", s(&bad), "validate"]).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let missing = dir.path().join("missing.toml");
    let status = bin().args(["--config", s(&missing), "validate"]).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let cfg = write_config(dir.path(), PAIR_CONFIG);
    let status = bin().args(["--config", s(&cfg), "validate"]).status().unwrap();
    assert_eq!(status.code(), Some(0));
}

#[test]
fn simulate_is_deterministic_and_carries_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PAIR_CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let (res, _) = invoke(&["--config", s(&cfg), "--out-dir", s(out), "simulate", "--mode", "sampled", "--env", "E1"]);
        assert_eq!(res.unwrap(), Completion::Complete);
    }
    let (left, right) = (artifacts(&a), artifacts(&b));
    assert_eq!(left, right);
    let names: Vec<&str> = left.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["boundaries.tsv", "diagnostics.tsv", "estimates.tsv", "matrix_E1.json", "surfaces.tsv"]);

    let (_, validate) = invoke(&["--config", s(&cfg), "validate"]);
    let digest = validate.lines().find_map(|l| l.strip_prefix("config_digest=")).unwrap();
    let estimates = String::from_utf8(left[2].1.clone()).unwrap();
    assert_eq!(estimates.lines().next().unwrap(), format!("# config_digest={digest}"));

    let (res, _) = invoke(&["--config", s(&cfg), "--seed", "99", "--out-dir", s(&a), "simulate", "--mode", "sampled", "--env", "E1"]);
    res.unwrap();
    assert_ne!(artifacts(&a), right);
}

#[test]
fn icp_over_simulated_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PAIR_CONFIG);
    let out = dir.path().join("out");
    let (res, _) = invoke(&["--config", s(&cfg), "--out-dir", s(&out), "simulate"]);
    res.unwrap();
    let (m1, m2) = (out.join("matrix_E1.json"), out.join("matrix_E2.json"));
    let (res, stdout) = invoke(&[
        "--config", s(&cfg), "--out-dir", s(&out), "icp", "--matrix", s(&m1), "--matrix", s(&m2),
        "--targets", "C", "--candidates", "A,B", "--alpha", "0.05",
    ]);
    assert_eq!(res.unwrap(), Completion::Complete);
    assert!(stdout.starts_with("C: "), "{stdout}");
    let pvalues = std::fs::read_to_string(out.join("icp_pvalues.tsv")).unwrap();
    let rows: Vec<&str> = pvalues.lines().skip(1).collect();
    assert_eq!(rows[0], "A\tB\tC\tC_rejected");
    assert_eq!(rows.len(), 1 + 3);
    assert!(rows[1].starts_with("0\t1\t") && rows[3].starts_with("1\t1\t"), "{pvalues}");
    assert!(out.join("icp_parents.tsv").exists() && out.join("icp_report.json").exists());
}

#[test]
fn icp_needs_every_entry_and_one_digest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PAIR_CONFIG);
    let out = dir.path().join("out");
    let (res, _) = invoke(&["--config", s(&cfg), "--out-dir", s(&out), "simulate", "--pairs", "A:B,A:C"]);
    res.unwrap();
    let (m1, m2) = (out.join("matrix_E1.json"), out.join("matrix_E2.json"));
    let args = ["--config", s(&cfg), "--out-dir", s(&out), "icp", "--matrix", s(&m1), "--matrix", s(&m2), "--targets", "C", "--candidates", "A,B"];
    let (res, _) = invoke(&args);
    let err = res.unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains('B') && err.to_string().contains('C'), "{err}");

    let status = bin().args(args).status().unwrap();
    assert_eq!(status.code(), Some(4));

    let other = dir.path().join("other");
    let (res, _) = invoke(&["--config", s(&cfg), "--seed", "5", "--out-dir", s(&other), "simulate", "--env", "E2"]);
    res.unwrap();
    let (full1, _) = invoke(&["--config", s(&cfg), "--out-dir", s(&out), "simulate", "--env", "E1"]);
    full1.unwrap();
    let (res, _) = invoke(&[
        "--config", s(&cfg), "--out-dir", s(&out), "icp", "--matrix", s(&m1), "--matrix", s(&other.join("matrix_E2.json")),
        "--targets", "C", "--candidates", "A,B",
    ]);
    let err = res.unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("different configs"), "{err}");
}

#[test]
fn sweep_rejects_off_grid_centers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PAIR_CONFIG);
    let out = dir.path().join("out");
    let (res, _) = invoke(&["--config", s(&cfg), "--out-dir", s(&out), "sweep-ref", "--pair", "A:B", "--env", "E1", "--centers", "0,0.25", "--oracle", "expected"]);
    assert_eq!(res.unwrap_err().exit_code(), 2);

    let (res, _) = invoke(&["--config", s(&cfg), "--out-dir", s(&out), "sweep-ref", "--pair", "A:B", "--env", "E1", "--centers", "-1,0,1", "--oracle", "expected"]);
    assert_eq!(res.unwrap(), Completion::Complete);
    let sweep = std::fs::read_to_string(out.join("sweep.tsv")).unwrap();
    assert_eq!(sweep.lines().count(), 2 + 3);
}

#[test]
fn direct_oracle_writes_samples_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PAIR_CONFIG);
    let out = dir.path().join("out");
    let (res, _) = invoke(&["--config", s(&cfg), "--out-dir", s(&out), "direct", "--oracle", "--repetitions", "4", "--env", "E1", "--pairs", "A:B"]);
    assert_eq!(res.unwrap(), Completion::Complete);
    let samples = std::fs::read_to_string(out.join("direct_samples.tsv")).unwrap();
    assert_eq!(samples.lines().count(), 2 + 4);
    let summary = std::fs::read_to_string(out.join("direct_summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn elicit_then_rerun_from_warm_cache() {
    let server = respondent(0.6);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PAIR_CONFIG);
    let out = dir.path().join("out");
    let base = ["--config", s(&cfg), "--out-dir", s(&out), "--endpoint-url", &server.url];
    let mut args = base.to_vec();
    args.extend(["elicit", "--env", "E1", "--pairs", "A:B"]);
    let (res, first) = invoke(&args);
    assert_eq!(res.unwrap(), Completion::Complete);
    assert!(first.contains("cache_hits=0"), "{first}");
    let hits = server.hits();
    assert!((1350..=2700).contains(&hits), "{hits}");
    let cold = artifacts(&out);

    let mut args = base.to_vec();
    args.extend(["--offline", "elicit", "--env", "E1", "--pairs", "A:B"]);
    let (res, second) = invoke(&args);
    assert_eq!(res.unwrap(), Completion::Complete);
    assert!(second.contains("sent=0 "), "{second}");
    assert_eq!(server.hits(), hits);
    assert_eq!(artifacts(&out), cold);

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["requests"]["sent"], 0);
    assert_eq!(manifest["cache_records_before"], manifest["cache_records_after"]);

    let mut args = base.to_vec();
    args.extend(["--offline", "elicit", "--env", "E2", "--pairs", "A:B"]);
    let (res, _) = invoke(&args);
    assert_eq!(res.unwrap(), Completion::Partial);
}
