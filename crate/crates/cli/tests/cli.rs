use std::fs;
use std::process::Command;

use fbsde_lab::builtins;
use fbsde_lab::expr::{Env, Expr, Var};
use fbsde_lab::report::{emit_results, Artifact, Format, Report};
use fbsde_lab::run::run_scenario;
use fbsde_lab::scenario::{parse_problem, parse_str, Overrides, Target};

const MINIMAL_FORWARD: &str = r#"{
  "name": "minimal",
  "target": "forward",
  "grid": { "t_end": 1.0, "n_steps": 10 },
  "mc": { "n_paths": 8 },
  "coefficients": { "b": "-x", "x0": 1 }
}"#;

fn env_y(y: f64) -> Env {
    Env { y, ..Env::default() }
}

#[test]
fn expression_for_the_two_regime_drift() {
    let e = Expr::parse("-2*y + sin(y)").unwrap();
    for y in [-1.3, 0.0, 0.4, 2.0] {
        assert_eq!(e.eval(&env_y(y)), -2.0 * y + y.sin());
    }
    assert_eq!(e.source(), "-2*y + sin(y)");
}

#[test]
fn expression_precedence() {
    let v = |s: &str| Expr::parse(s).unwrap().eval(&Env { t: 2.0, x: 3.0, regime: 1, ..Env::default() });
    assert_eq!(v("1 + 2 * 3"), 7.0);
    assert_eq!(v("(1 + 2) * 3"), 9.0);
    assert_eq!(v("-2^2"), -4.0);
    assert_eq!(v("2^3^2"), 512.0);
    assert_eq!(v("2^-1"), 0.5);
    assert_eq!(v("8 / 4 / 2"), 1.0);
    assert_eq!(v("1.5e1 - 5"), 10.0);
    assert_eq!(v("abs(-x) * exp(0) + cos(0)"), 4.0);
    assert_eq!(v("regime"), 2.0);
    assert_eq!(v("t*x"), 6.0);
}

#[test]
fn expression_errors_carry_positions() {
    let e = Expr::parse("1 + * 2").unwrap_err();
    assert_eq!(e.pos, 4);
    assert!(e.to_string().contains("column 5"), "{e}");
    assert!(e.to_string().contains("    ^"), "{e}");
    let e = Expr::parse("sin(x").unwrap_err();
    assert_eq!(e.pos, 5);
    let e = Expr::parse("2 * w").unwrap_err();
    assert_eq!(e.pos, 4);
    assert!(e.message.contains("`w`"));
    let e = Expr::parse("3 $ 1").unwrap_err();
    assert_eq!(e.pos, 2);
    assert!(Expr::parse("").is_err());
    assert!(Expr::parse("(1 + 2))").is_err());
}

#[test]
fn expression_restriction() {
    let e = Expr::parse("t + 2*y").unwrap();
    assert!(e.restrict(&[Var::T, Var::Y]).is_ok());
    let err = e.restrict(&[Var::T, Var::X]).unwrap_err();
    assert_eq!(err.pos, 6);
    assert!(err.message.contains("allowed: t, x"), "{}", err.message);
}

#[test]
fn minimal_forward_scenario_gets_defaults() {
    let s = parse_str(MINIMAL_FORWARD).unwrap();
    assert_eq!(s.name, "minimal");
    assert_eq!(s.target, Target::Forward);
    assert_eq!(s.setups.len(), 1);
    let st = &s.setups[0];
    assert_eq!(st.label, None);
    assert_eq!(st.grid.t0(), 0.0);
    assert_eq!(st.grid.n_steps(), 10);
    assert_eq!(st.seed, 0);
    assert_eq!(st.hurst.value(), 0.7);
    assert_eq!(st.k, 0.0);
    assert_eq!(st.m(), 1);
    assert_eq!(st.initial_regime, 0);
    assert_eq!(st.brownian_dim, 1);
    assert!(st.checks.is_empty());
    assert!(st.has("b") && !st.has("sigma"));
    assert_eq!(st.coef("sigma").scalar(&Env::default()), 0.0);
    assert_eq!(st.coef("b").scalar(&Env { x: 2.0, ..Env::default() }), -2.0);
}

#[test]
fn hurst_out_of_range_is_rejected() {
    let text = MINIMAL_FORWARD.replace(r#""mc""#, r#""H": 0.4, "mc""#);
    let err = parse_str(&text).unwrap_err().to_string();
    assert!(err.contains("hurst"), "{err}");
    let text = MINIMAL_FORWARD.replace(r#""mc""#, r#""hurst": 1.0, "mc""#);
    assert!(parse_str(&text).is_err());
}

#[test]
fn schema_errors_name_the_field() {
    let text = MINIMAL_FORWARD.replace("n_steps", "n_step");
    let err = format!("{:#}", parse_str(&text).unwrap_err());
    assert!(err.contains("grid"), "{err}");
    let text = MINIMAL_FORWARD.replace(r#""n_paths": 8"#, r#""n_paths": "many""#);
    let err = format!("{:#}", parse_str(&text).unwrap_err());
    assert!(err.contains("mc.n_paths"), "{err}");
    let text = MINIMAL_FORWARD.replace(r#""x0": 1"#, r#""x0": 1, "drift": "x""#);
    let err = format!("{:#}", parse_str(&text).unwrap_err());
    assert!(err.contains("drift"), "{err}");
    let text = MINIMAL_FORWARD.replace(r#""-x""#, r#""-x + y""#);
    let err = format!("{:#}", parse_str(&text).unwrap_err());
    assert!(err.contains("coefficients.b") && err.contains("`y`"), "{err}");
    let text = MINIMAL_FORWARD.replace(r#""-x""#, r#""-x +""#);
    let err = format!("{:#}", parse_str(&text).unwrap_err());
    assert!(err.contains("column"), "{err}");
    let text = MINIMAL_FORWARD.replace(r#""x0": 1"#, r#""x0": 1 }, "params": { "picard": { "b": 1 }"#);
    let err = format!("{:#}", parse_str(&text).unwrap_err());
    assert!(err.contains("params.picard"), "{err}");
    let text = MINIMAL_FORWARD.replace(r#""x0": 1 }"#, r#""x0": 1 }, "checks": ["y0"]"#);
    let err = format!("{:#}", parse_str(&text).unwrap_err());
    assert!(err.contains("y0"), "{err}");
}

#[test]
fn regime_validation() {
    let base = MINIMAL_FORWARD.replace(
        r#""coefficients""#,
        r#""regimes": { "m": 2, "generator": [[-1, 1], [1, -1]], "initial": 2 }, "coefficients""#,
    );
    let s = parse_str(&base).unwrap();
    assert_eq!(s.setups[0].initial_regime, 1);
    let per = base.replace(r#""-x""#, r#"{ "per_regime": ["-x", "-2*x"] }"#);
    let s = parse_str(&per).unwrap();
    let b = s.setups[0].coef("b");
    assert_eq!(b.scalar(&Env { x: 1.0, regime: 1, ..Env::default() }), -2.0);
    let short = base.replace(r#""-x""#, r#"{ "per_regime": ["-x"] }"#);
    assert!(parse_str(&short).is_err());
    let bad = base.replace(r#"[[-1, 1], [1, -1]]"#, r#"[[-1, 2], [1, -1]]"#);
    assert!(parse_str(&bad).is_err());
    let out_of_range = base.replace(r#""initial": 2"#, r#""initial": 3"#);
    assert!(parse_str(&out_of_range).is_err());
}

#[test]
fn overrides_replace_grid_and_paths() {
    let s = parse_str(MINIMAL_FORWARD).unwrap();
    let o = Overrides { paths: Some(5), steps: Some(4), horizon: Some(2.0), seed: Some(9) };
    let s = s.with_overrides(&o).unwrap();
    let st = &s.setups[0];
    assert_eq!((st.n_paths, st.grid.n_steps(), st.grid.t_end(), st.seed), (5, 4, 2.0, 9));
    let bad = Overrides { paths: Some(1), ..Overrides::default() };
    assert!(parse_str(MINIMAL_FORWARD).unwrap().with_overrides(&bad).is_err());
}

#[test]
fn forward_scenario_emits_paths_and_summary() {
    let report = run_scenario(&parse_str(MINIMAL_FORWARD).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_results(&report, Format::Csv, dir.path()).unwrap();
    let names: Vec<_> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, vec!["minimal.summary.json", "minimal.paths.csv"]);
    let csv = fs::read_to_string(&files[1]).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("time,path_id,x"));
    assert_eq!(lines.next(), Some("0,0,1"));
    assert_eq!(csv.lines().count(), 1 + 8 * 11);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(&files[0]).unwrap()).unwrap();
    assert_eq!(summary["target"], "forward");
    assert_eq!(summary["passed"], true);
    let x_end = summary["results"]["x_end_mean"].as_f64().unwrap();
    assert!((x_end - 0.9f64.powi(10)).abs() < 1e-12, "{x_end}");
}

#[test]
fn lqgame_scenario_emits_solution_residual_and_saddle() {
    let s = builtins::load("example-sec6").unwrap();
    let s = s.with_overrides(&Overrides { paths: Some(60), steps: Some(10), ..Overrides::default() }).unwrap();
    let report = run_scenario(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_results(&report, Format::Csv, dir.path()).unwrap();
    for want in [
        "example-sec6.summary.json",
        "example-sec6.solution.json",
        "example-sec6.residual.csv",
        "example-sec6.saddle.json",
        "example-sec6.paths.csv",
    ] {
        assert!(dir.path().join(want).exists(), "{want} missing from {files:?}");
    }
    let residual = fs::read_to_string(dir.path().join("example-sec6.residual.csv")).unwrap();
    assert!(residual.starts_with("time,"));
    let saddle: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("example-sec6.saddle.json")).unwrap()).unwrap();
    assert_eq!(saddle["entries"].as_array().unwrap().len(), 20 * 3 * 2);
    let files = emit_results(&report, Format::Json, dir.path()).unwrap();
    assert!(files.iter().all(|f| f.extension().unwrap() == "json"));
}

#[test]
fn empty_report_writes_only_the_summary() {
    let report = Report::new("nothing", Target::Drivers, 3);
    let dir = tempfile::tempdir().unwrap();
    let files = emit_results(&report, Format::Csv, dir.path()).unwrap();
    assert_eq!(files, vec![dir.path().join("nothing.summary.json")]);
    assert!(report.passed());
    assert_eq!(report.summary()["checks"], serde_json::json!({}));
}

#[test]
fn csv_formatting() {
    let a = Artifact::Table { columns: vec!["time".into(), "v".into()], rows: vec![vec![0.0, 1.5], vec![0.5, -2.0]] };
    assert_eq!(a.csv().unwrap(), "time,v\n0,1.5\n0.5,-2\n");
    assert_eq!(Artifact::Document(serde_json::json!({})).csv(), None);
}

#[test]
fn summary_keys_are_sorted() {
    let report = run_scenario(&parse_str(MINIMAL_FORWARD).unwrap()).unwrap();
    let text = report.summary_json();
    let pos = |k: &str| text.find(&format!("\"{k}\"")).unwrap();
    assert!(pos("checks") < pos("name") && pos("name") < pos("passed") && pos("passed") < pos("results"));
    assert!(pos("seed") < pos("target"));
    assert!(pos("x_end_mean") < pos("x_end_std_error"));
}

#[test]
fn every_builtin_parses_and_lists_its_checks() {
    let names: Vec<_> = builtins::names().collect();
    assert_eq!(names.len(), 8);
    for name in names {
        let s = builtins::load(name).unwrap();
        assert_eq!(s.name, name);
        assert!(s.setups.iter().all(|st| !st.checks.is_empty()), "{name}");
    }
    assert!(builtins::load("no-such").is_err());
}

#[test]
fn every_builtin_runs_at_reduced_size() {
    let o = Overrides { paths: Some(120), steps: Some(40), ..Overrides::default() };
    for name in builtins::names() {
        let s = builtins::load(name).unwrap().with_overrides(&o).unwrap();
        let report = run_scenario(&s).unwrap_or_else(|e| panic!("{name}: {e:#}"));
        assert!(!report.checks.is_empty(), "{name}");
        let wanted: usize = s.setups.iter().map(|st| st.checks.len()).sum();
        assert_eq!(report.checks.len(), wanted, "{name}");
    }
}

#[test]
fn module_errors_carry_scenario_context() {
    let text = r#"{
      "name": "bad-mono",
      "target": "backward",
      "grid": { "t_end": 2.0, "n_steps": 20 },
      "mc": { "n_paths": 10 },
      "K": 1.0,
      "coefficients": { "g": "exp(-t)" },
      "params": { "schedule": [2.0], "l_mono": 0.6, "mu": 0.5 },
      "checks": ["estimate"]
    }"#;
    let err = format!("{:#}", run_scenario(&parse_str(text).unwrap()).unwrap_err());
    assert!(err.contains("bad-mono"), "{err}");
    let missing = text.replace(r#", "mu": 0.5"#, "");
    let err = format!("{:#}", run_scenario(&parse_str(&missing).unwrap()).unwrap_err());
    assert!(err.contains("params.mu"), "{err}");
}

#[test]
fn parse_problem_reports_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    fs::write(&path, "{ \"name\": ").unwrap();
    let err = format!("{:#}", parse_problem(&path).unwrap_err());
    assert!(err.contains("broken.json"), "{err}");
    assert!(parse_problem(&dir.path().join("absent.json")).is_err());
}

fn lab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fbsde-lab"))
}

#[test]
fn binary_list_and_errors() {
    let out = lab().arg("list").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in builtins::names() {
        assert!(text.contains(name), "{text}");
    }
    let out = lab().args(["builtin", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no builtin named"));
}

#[test]
fn binary_runs_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("minimal.json");
    fs::write(&path, MINIMAL_FORWARD).unwrap();
    let out_dir = dir.path().join("out");
    let out = lab()
        .args(["run", path.to_str().unwrap(), "--paths", "4", "--steps", "5", "--seed", "7", "--format", "json", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("minimal: passed"), "{stdout}");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("minimal.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 7);
    assert!(out_dir.join("minimal.paths.json").exists());
}

#[test]
fn binary_builtin_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab()
        .args(["builtin", "continuation-linear", "--paths", "50", "--steps", "20", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("PASS reaches_one"), "{stdout}");
    assert!(dir.path().join("continuation-linear.trace.csv").exists());
}
