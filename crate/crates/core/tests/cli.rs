use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use equipoise::balance::{BalanceReport, CovariateBalance, MethodBalance};
use equipoise::cli::{parse_metrics_csv, sig6, AnalysisReport, SimulationOutput, ESTIMATE_COLUMNS};
use equipoise::svg::{emit_svg_forest, emit_svg_love};
use equipoise::{EffectEstimate, Method, TiltSpec};
use tempfile::TempDir;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/synthetic500.csv");
const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden");

fn equipoise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equipoise")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn analyze(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["analyze", "--input", FIXTURE, "--out-dir", path(dir)];
    args.extend_from_slice(extra);
    equipoise(&args)
}

fn read_report(dir: &Path) -> AnalysisReport {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn scenario(dir: &Path, cell: &str, extra: &str) -> PathBuf {
    let p = dir.join("scenario.json");
    fs::write(&p, format!(r#"{{"schema_version": 1, "cells": [{cell}]{extra}}}"#)).unwrap();
    p
}

fn cell(overlap: &str, n: usize, replicates: usize) -> String {
    format!(
        r#"{{"dgp": "omission", "overlap": "{overlap}", "prevalence": "medium", "effect": "heterogeneous", "misspec": "none", "n": {n}, "replicates": {replicates}, "seed": 11}}"#
    )
}

#[test]
fn analyze_reports_every_requested_method() {
    let dir = TempDir::new().unwrap();
    let out = analyze(dir.path(), &["--methods", "standard,sipw"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_report(dir.path());
    assert_eq!(report.estimates.len(), 8);
    assert_eq!(report.estimates[7].method, Method::StabilizedIpw);
    for e in &report.estimates {
        assert!(e.delta.is_finite() && e.ci_low.is_finite() && e.ci_high.is_finite());
        assert!(e.ci_low < e.delta && e.delta < e.ci_high);
    }
    for s in [report.ps_treated, report.ps_control] {
        assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
    }
    let csv = fs::read_to_string(dir.path().join("estimates.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), ESTIMATE_COLUMNS.join(","));
    assert_eq!(lines.count(), 8);
}

#[test]
fn single_method_request_gives_single_row() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&analyze(dir.path(), &["--methods", "ow", "--level", "0.95"])), 0);
    let report = read_report(dir.path());
    assert_eq!(report.estimates.len(), 1);
    assert_eq!(report.estimates[0].method, Method::Balancing(TiltSpec::Overlap));
    assert_eq!(report.balance.methods.len(), 1);
}

#[test]
fn wider_trimming_band_retains_fewer_units() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&analyze(dir.path(), &["--methods", "ipw", "--alpha", "0.05", "--alpha", "0.15"])), 0);
    let report = read_report(dir.path());
    let by_alpha = |a: f64| report.trimming.iter().find(|t| t.alpha == a).unwrap();
    let (narrow, wide) = (by_alpha(0.05), by_alpha(0.15));
    assert!(wide.retained < narrow.retained && narrow.retained < report.n);
    assert_eq!(wide.retained, wide.retained_treated + wide.retained_control);
    assert!((wide.pct_retained - 100.0 * wide.retained as f64 / report.n as f64).abs() < 1e-12);
    let est = |a: f64| report.estimates.iter().find(|e| e.method == Method::Balancing(TiltSpec::TrimmedIpw(a))).unwrap();
    assert_eq!(est(0.15).n_retained, wide.retained);
}

#[test]
fn plots_match_golden_files() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&analyze(dir.path(), &[])), 0);
    for name in ["love.svg", "forest.svg"] {
        let got = fs::read(dir.path().join(name)).unwrap();
        let want = fs::read(Path::new(GOLDEN).join(name)).unwrap();
        assert!(got == want, "{name} differs from golden copy");
    }
}

fn estimate(method: Method, delta: f64) -> EffectEstimate {
    EffectEstimate {
        method,
        delta,
        delta1: delta + 1.0,
        delta0: 1.0,
        se: 0.1,
        ci_low: delta - 0.196,
        ci_high: delta + 0.196,
        vi: 1.2,
        n_retained: 100,
        n: 100,
    }
}

#[test]
fn minimal_plots_have_one_mark_each() {
    let forest = emit_svg_forest(&[estimate(Method::Balancing(TiltSpec::Overlap), 0.4)]).unwrap();
    assert_eq!(forest.matches("<circle").count(), 1);
    assert_eq!(forest.matches(r#"class="ci""#).count(), 1);
    assert!(forest.starts_with("<svg") && forest.trim_end().ends_with("</svg>"));

    let row = |smd| CovariateBalance { covariate: "age".into(), in_model: true, smd };
    let report = BalanceReport {
        baseline: vec![row(0.3)],
        n_treated: 40,
        n_control: 60,
        methods: vec![MethodBalance { method: TiltSpec::Overlap, rows: vec![row(0.0)], ess_treated: 30.0, ess_control: 50.0 }],
    };
    let love = emit_svg_love(&report).unwrap();
    assert_eq!(love.matches(r#"data-method="OW""#).count(), 1);
    assert_eq!(love.matches(r#"class="ref""#).count(), 1);
    assert!(emit_svg_forest(&[]).is_err());
}

#[test]
fn simulate_output_is_identical_across_worker_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(dir.path(), &cell("moderate", 300, 40), r#", "superpop_n": 100000"#);
    let mut outputs = Vec::new();
    for workers in ["1", "8"] {
        let out_dir = dir.path().join(format!("w{workers}"));
        let out = equipoise(&["simulate", "--config", path(&cfg), "--workers", workers, "--out-dir", path(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let csv = fs::read(out_dir.join("cell00_omission_moderate_medium_heterogeneous_none_n300.csv")).unwrap();
        let json = fs::read(out_dir.join("metrics.json")).unwrap();
        outputs.push((csv, json, out.stdout));
    }
    assert!(outputs[0] == outputs[1]);
}

#[test]
fn metrics_csv_reads_back_as_rounded_json_values() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(dir.path(), &cell("good", 200, 10), r#", "superpop_n": 100000, "methods": ["standard", "sipw"]"#);
    assert_eq!(code(&equipoise(&["simulate", "--config", path(&cfg), "--out-dir", path(dir.path())])), 0);
    let json: SimulationOutput = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    let csv = fs::read_to_string(dir.path().join("cell00_omission_good_medium_heterogeneous_none_n200.csv")).unwrap();
    let rows = parse_metrics_csv(&csv).unwrap();
    let metrics = &json.cells[0].metrics;
    assert_eq!(rows.len(), 8);
    for (r, m) in rows.iter().zip(metrics) {
        assert_eq!(r.method, m.method);
        assert_eq!(r.overlap, "good");
        for (got, want) in [
            (r.true_value, m.true_value),
            (r.rel_bias_pct, m.rel_bias_pct),
            (r.rmse, m.rmse),
            (r.sd, m.sd),
            (r.mean_se, m.mean_se),
            (r.coverage, m.coverage),
        ] {
            assert_eq!(sig6(got), sig6(want));
        }
        assert_eq!(r.n_failed, m.n_failed);
    }
}

#[test]
fn emitted_replicate_reanalyzes_to_the_same_estimates() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(dir.path(), &cell("poor", 500, 3), r#", "superpop_n": 100000"#);
    let sim = equipoise(&[
        "simulate", "--config", path(&cfg), "--methods", "standard,sipw", "--emit-data", "--out-dir", path(dir.path()),
    ]);
    assert_eq!(code(&sim), 0);
    let json: SimulationOutput = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    let data = dir.path().join("cell00_omission_poor_medium_heterogeneous_none_n500_data.csv");
    let an_dir = dir.path().join("analysis");
    let out = equipoise(&["analyze", "--input", path(&data), "--methods", "standard,sipw", "--out-dir", path(&an_dir)]);
    assert_eq!(code(&out), 0);
    let report = read_report(&an_dir);
    for (a, s) in report.estimates.iter().zip(&json.cells[0].first_replicate) {
        let s = s.as_ref().unwrap();
        assert_eq!(a.method, s.method);
        assert!((a.delta - s.delta).abs() <= 1e-10 && (a.se - s.se).abs() <= 1e-10, "{}", a.method);
    }
}

#[test]
fn malformed_inputs_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.csv");
    assert_eq!(code(&equipoise(&["analyze", "--input", path(&missing)])), 2);
    assert_eq!(code(&analyze(dir.path(), &["--methods", "bogus"])), 2);
    assert_eq!(code(&analyze(dir.path(), &["--level", "1.5"])), 2);
    assert_eq!(code(&equipoise(&["frobnicate"])), 2);

    let bad_z = dir.path().join("bad.csv");
    fs::write(&bad_z, "Y,Z,X\n1,2,0.5\n0,1,0.1\n").unwrap();
    assert_eq!(code(&equipoise(&["analyze", "--input", path(&bad_z), "--out-dir", path(dir.path())])), 2);

    for (c, extra) in [
        (cell("good", 200, 0), ""),
        (cell("good", 10, 5), ""),
        (cell("good", 200, 5), r#", "unknown": 1"#),
    ] {
        let cfg = scenario(dir.path(), &c, extra);
        assert_eq!(code(&equipoise(&["simulate", "--config", path(&cfg), "--out-dir", path(dir.path())])), 2);
    }
    let v2 = dir.path().join("v2.json");
    fs::write(&v2, format!(r#"{{"schema_version": 2, "cells": [{}]}}"#, cell("good", 200, 5))).unwrap();
    assert_eq!(code(&equipoise(&["simulate", "--config", path(&v2)])), 2);
}

#[test]
fn separated_data_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("sep.csv");
    let mut text = String::from("Y,Z,X\n");
    for i in 0..60 {
        let x = f64::from(i) - 29.5;
        text.push_str(&format!("{},{},{x}\n", i % 7, u8::from(x > 0.0)));
    }
    fs::write(&input, text).unwrap();
    assert_eq!(code(&equipoise(&["analyze", "--input", path(&input), "--out-dir", path(dir.path())])), 3);
}

#[test]
fn trimming_away_an_arm_exits_with_four() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("skewed.csv");
    let mut text = String::from("Y,Z,X\n");
    // 95% treated and an uninformative covariate: every score is near 0.95.
    for i in 0..200u32 {
        let x = f64::from((i * 37) % 101) / 50.0 - 1.0;
        text.push_str(&format!("{},{},{x}\n", f64::from(i % 5), u8::from(i % 20 != 0)));
    }
    fs::write(&input, text).unwrap();
    let out = equipoise(&["analyze", "--input", path(&input), "--methods", "ipw(0.1)", "--out-dir", path(dir.path())]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn widespread_replicate_failure_exits_with_five() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(dir.path(), &cell("poor", 50, 20), r#", "superpop_n": 100000"#);
    let out = equipoise(&["simulate", "--config", path(&cfg), "--methods", "ipw(0.49)", "--out-dir", path(dir.path())]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

fn table_rows(stdout: &[u8]) -> Vec<(String, f64, f64)> {
    String::from_utf8_lossy(stdout)
        .lines()
        .filter_map(|l| {
            let parts: Vec<&str> = l.split_whitespace().collect();
            match parts.as_slice() {
                [name, v, "±", se] => Some((name.to_string(), v.parse().ok()?, se.parse().ok()?)),
                _ => None,
            }
        })
        .collect()
}

#[test]
fn estimand_command_prints_unit_effect_for_homogeneous_cells() {
    let dir = TempDir::new().unwrap();
    let c = cell("poor", 200, 1).replace("heterogeneous", "homogeneous");
    let cfg = scenario(dir.path(), &c, "");
    let out = equipoise(&["estimand", "--config", path(&cfg), "--superpop-n", "1000000"]);
    assert_eq!(code(&out), 0);
    let rows = table_rows(&out.stdout);
    assert_eq!(rows.len(), 7);
    for (name, v, se) in rows {
        assert!((v - 1.0).abs() <= 3.0 * se + 1e-9, "{name}: {v} ± {se}");
    }
}

#[test]
fn theory_command_reports_each_method() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(dir.path(), &cell("poor", 200, 1), "");
    let out = equipoise(&["theory", "--config", path(&cfg), "--methods", "ipw,ow", "--mc-n", "100000"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let av = |name: &str| -> f64 {
        let line = text.lines().find(|l| l.split_whitespace().next() == Some(name)).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert!(av("IPW") / av("OW") > 10.0);
    assert_eq!(code(&equipoise(&["theory", "--config", path(&cfg), "--mc-n", "10"])), 2);
}
