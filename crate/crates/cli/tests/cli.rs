use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"name = "small rotation"
seed = 3

[field]
name = "rotation"
horizon = 1.0

[grid]
radius = 0.5
dy = 0.1
dt = 0.25
step = 0.01

[datum]
kind = "gaussian"
center = [0.2, 0.0]
sigma = 0.3

[test_function]
kind = "bump"
t_center = 0.5
t_radius = 0.45
center = [0.1, 0.0]
radius = 0.4

[metric]
lambdas = [0.4, 0.2, 0.1]
queries = [{ p = [0.0, 0.3, 0.0], q = [0.5, 0.2633, 0.1438] }]

[residual]
levels = [0.1, 0.05]

[fv]
box_radius = 1.0
dx = [0.1, 0.05, 0.025]
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlf-lab")).args(args).output().unwrap()
}

fn scenario(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_ok(cmd: &str, scenario: &Path, out: &Path) -> Vec<PathBuf> {
    let o = run(&[cmd, scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap().lines().map(PathBuf::from).collect()
}

/// Rows of a CSV table after the metadata line, keyed by header.
fn table(path: &Path) -> Vec<HashMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let (meta, body) = text.split_once('\n').unwrap();
    assert!(meta.starts_with("# scenario_sha256="), "{meta}");
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    r.records()
        .map(|rec| header.iter().cloned().zip(rec.unwrap().iter().map(String::from)).collect())
        .collect()
}

fn col(rows: &[HashMap<String, String>], key: &str) -> Vec<f64> {
    rows.iter().map(|r| r[key].parse().unwrap()).collect()
}

#[test]
fn rotation_flow_has_unit_lusin_constant() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "s.toml", SMALL);
    let files = run_ok("flow", &s, &dir.path().join("out"));
    assert!(files.iter().any(|f| f.ends_with("flow_grid.csv")));
    let lusin = table(&dir.path().join("out/lusin.csv"));
    assert_eq!(lusin.len(), 3);
    for l in col(&lusin, "lip_constant") {
        assert!((l - 1.0).abs() < 1e-6, "{l}");
    }
    let rt = table(&dir.path().join("out/round_trip.csv"));
    assert_eq!(rt.len(), 100);
    assert!(col(&rt, "round_trip_error").iter().all(|e| *e < 1e-9));
    let comp = table(&dir.path().join("out/compressibility.csv"));
    assert_eq!(comp[0]["within_bound"], "true");
}

#[test]
fn outputs_are_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "s.toml", SMALL);
    for cmd in ["flow", "metric-scan", "extend"] {
        let a = run_ok(cmd, &s, &dir.path().join("a"));
        let b = run_ok(cmd, &s, &dir.path().join("b"));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.file_name(), y.file_name());
            assert!(fs::read(x).unwrap() == fs::read(y).unwrap(), "{} differs", x.display());
        }
    }
}

#[test]
fn every_table_carries_the_metadata_row() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "s.toml", SMALL);
    let out = dir.path().join("out");
    let o = run(&["transport", s.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "99"]);
    assert!(o.status.success());
    let files: Vec<PathBuf> = String::from_utf8(o.stdout).unwrap().lines().map(PathBuf::from).collect();
    assert!(!files.is_empty());
    for f in files {
        let text = fs::read_to_string(&f).unwrap();
        match f.extension().and_then(|e| e.to_str()) {
            Some("csv") => {
                let meta = text.lines().next().unwrap();
                assert!(meta.contains("rlf-core=") && meta.contains("rlf-lab="), "{meta}");
                assert!(meta.contains("seed=99;"), "{meta}");
                assert!(meta.contains("tolerances=roundoff:1e-12|cfl_limit:0.9"), "{meta}");
            }
            Some("svg") => assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>")),
            _ => panic!("unexpected output {}", f.display()),
        }
    }
    let defect = table(&out.join("lagrangian_property.csv"));
    assert!(col(&defect, "defect")[0] <= 1e-12);
}

#[test]
fn config_errors_exit_2_with_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL.replace("dy = 0.1", "dy = 0.0");
    let s = scenario(dir.path(), "bad.toml", &bad);
    let o = run(&["flow", s.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 10") && err.contains("dy"), "{err}");

    let typo = SMALL.replace("[residual]", "[residual]\nlevles = [0.1]");
    let s = scenario(dir.path(), "typo.toml", &typo);
    let o = run(&["residual", s.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line "));

    let o = run(&["flow", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_sections_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let start = SMALL.find("[datum]").unwrap();
    let end = SMALL.find("[metric]").unwrap();
    let bare = format!("{}{}", &SMALL[..start], &SMALL[end..]);
    let s = scenario(dir.path(), "bare.toml", &bare);
    let o = run(&["uniqueness", s.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[datum]"));
}

#[test]
fn cfl_violation_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("dx = [0.1, 0.05, 0.025]", "dx = [0.1, 0.05, 0.025]\ncfl = 0.95");
    let s = scenario(dir.path(), "s.toml", &text);
    let o = run(&["uniqueness", s.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("CFL"));
}

#[test]
fn infeasible_lusin_budget_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL
        .replace("name = \"rotation\"", "name = \"swirl_power\"")
        .replace("[residual]", "[lusin]\nmethod = \"threshold\"\nepsilons = [0.001]\nthresholds = [0.0]\n\n[residual]");
    let s = scenario(dir.path(), "s.toml", &text);
    let o = run(&["lusin", s.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn uniqueness_distances_decrease_and_vanish_for_zero_data() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "s.toml", SMALL);
    run_ok("uniqueness", &s, &dir.path().join("g"));
    let d = col(&table(&dir.path().join("g/uniqueness.csv")), "l1_distance");
    assert_eq!(d.len(), 3);
    assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
    assert!(col(&table(&dir.path().join("g/uniqueness.csv")), "cfl").iter().all(|c| (c - 0.8).abs() < 1e-12));

    let zero = SMALL.replace(
        "kind = \"gaussian\"\ncenter = [0.2, 0.0]\nsigma = 0.3",
        "kind = \"zero\"",
    );
    let s = scenario(dir.path(), "z.toml", &zero);
    run_ok("uniqueness", &s, &dir.path().join("z"));
    let rows = table(&dir.path().join("z/uniqueness.csv"));
    assert!(col(&rows, "l1_distance").iter().all(|d| *d == 0.0));
    let res = table(&dir.path().join("z/fv_residuals.csv"));
    assert!(col(&res, "eulerian").iter().chain(&col(&res, "lagrangian")).all(|r| *r == 0.0));
}

#[test]
fn extend_bound_dominates_and_constant_test_function_gives_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "s.toml", SMALL);
    run_ok("extend", &s, &dir.path().join("e"));
    let rows = table(&dir.path().join("e/tube_error.csv"));
    assert_eq!(rows.len(), 3);
    let (err, bound) = (col(&rows, "error_term"), col(&rows, "bound"));
    for (e, b) in err.iter().zip(&bound) {
        assert!(e <= b, "{e} > {b}");
    }
    assert!(bound.windows(2).all(|w| w[1] < w[0]), "{bound:?}");
    let certs = table(&dir.path().join("e/certificates.csv"));
    for r in &certs {
        let (m, l): (f64, f64) = (r["mcshane_lip"].parse().unwrap(), r["l_lambda"].parse().unwrap());
        assert!(m <= l * (1.0 + 1e-12));
    }
    assert_eq!(table(&dir.path().join("e/change_of_variables.csv")).len(), 2);

    let constant = SMALL.replace(
        "kind = \"bump\"\nt_center = 0.5\nt_radius = 0.45\ncenter = [0.1, 0.0]\nradius = 0.4",
        "kind = \"constant\"\nvalue = 2.5",
    );
    let s = scenario(dir.path(), "c.toml", &constant);
    run_ok("extend", &s, &dir.path().join("c"));
    let rows = table(&dir.path().join("c/tube_error.csv"));
    for key in ["lhs", "error_term", "bound", "l", "l_prime"] {
        assert!(col(&rows, key).iter().all(|v| *v == 0.0), "{key}");
    }
}

#[test]
fn metric_scan_reports_queries_and_graph_stats() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "s.toml", SMALL);
    run_ok("metric-scan", &s, &dir.path().join("m"));
    let scan = table(&dir.path().join("m/scan.csv"));
    let l = col(&scan, "l_lambda");
    assert_eq!(l.len(), 3);
    assert!(l.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    let d = table(&dir.path().join("m/distances.csv"));
    assert_eq!(d.len(), 3);
    // The query pair lies on one trajectory half a time unit apart.
    for r in &d {
        let dl: f64 = r["d_lambda"].parse().unwrap();
        assert!(dl >= 0.5 - 1e-9, "{dl}");
        assert_eq!(r["d0"], "0.5");
    }
    let dl = col(&d, "d_lambda");
    assert!(dl.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(table(&dir.path().join("m/graph_stats.csv")).len(), 3);
}

#[test]
fn residual_tables_refine() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "s.toml", SMALL);
    run_ok("residual", &s, &dir.path().join("r"));
    let cov = col(&table(&dir.path().join("r/change_of_variables.csv")), "difference");
    assert!(cov[1] < cov[0], "{cov:?}");
    let lag = col(&table(&dir.path().join("r/lagrangian_residual.csv")), "value");
    assert!(lag[0].abs() <= 1e-10);
}
