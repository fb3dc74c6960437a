use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

struct Run {
    out: PathBuf,
    output: Output,
}

impl Run {
    fn code(&self) -> i32 {
        self.output.status.code().expect("exited normally")
    }

    fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.output.stderr).into_owned()
    }

    fn report(&self) -> Value {
        let text = std::fs::read_to_string(self.out.join("report.json")).expect("report written");
        serde_json::from_str(&text).unwrap()
    }

    fn csv(&self, file: &str) -> Vec<Vec<String>> {
        let mut r = csv::Reader::from_path(self.out.join(file)).unwrap();
        r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect()
    }
}

fn run(dir: &Path, command: &str, config: &Value, extra: &[&str]) -> Run {
    let path = dir.join(format!("{command}.json"));
    std::fs::write(&path, config.to_string()).unwrap();
    let out = dir.join(format!("out-{command}-{}", extra.join("")));
    let output = Command::new(env!("CARGO_BIN_EXE_fbsvie"))
        .arg(command)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .arg("--quiet")
        .args(extra)
        .output()
        .unwrap();
    Run { out, output }
}

fn value(cell: &str) -> f64 {
    cell.parse().unwrap()
}

#[test]
fn zero_family_gives_zero_series() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({ "grid": { "steps": 3 }, "problem": { "family": "zero", "params": { "n": 2 } } });
    let r = run(dir.path(), "solve-forward", &cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let rows = r.csv("forward.csv");
    assert_eq!(rows.len(), 4 * 2 * 2);
    assert!(rows.iter().all(|row| value(&row[2]) == 0.0));
}

#[test]
fn forward_example_reaches_two_and_a_quarter() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "grid": { "steps": 2 },
        "problem": { "family": "linear_volterra", "params": { "phi": [1.0], "b_x": [[1.0]] } }
    });
    let r = run(dir.path(), "solve-forward", &cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let rows = r.csv("forward.csv");
    let last = rows.iter().find(|row| row[0] == "1.0" && row[1] == "mean_x0").unwrap();
    assert!((value(&last[2]) - 2.25).abs() < 1e-14);
    assert_eq!(r.report()["summary"]["terminal"]["var_x0"], json!(0.0));
}

#[test]
fn malformed_config_exits_two_naming_the_key() {
    let dir = TempDir::new().unwrap();
    for (cfg, key) in [
        (json!({ "grid": { "steps": 13 } }), "grid.steps"),
        (json!({ "grid": { "steps": 2 }, "duality": { "seeed": 1 } }), "duality.seeed"),
        (json!({ "grid": { "steps": 2 }, "solver": { "picard_tol": -1.0 } }), "solver.picard_tol"),
    ] {
        let r = run(dir.path(), "check-duality", &cfg, &[]);
        assert_eq!(r.code(), 2);
        let err = r.stderr();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("fbsvie: config error:") && err.contains(key), "{err}");
    }
    let r = run(
        dir.path(),
        "solve-forward",
        &json!({ "grid": { "steps": 2 }, "problem": { "family": "linear_volterra", "params": { "b_q": 1 } } }),
        &[],
    );
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("b_q"), "{}", r.stderr());
    let r = run(dir.path(), "optimize", &json!({ "grid": { "steps": 2 } }), &[]);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("`problem`"), "{}", r.stderr());
}

#[test]
fn one_zero_instance_passes_with_zero_pairings() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "grid": { "steps": 3 },
        "duality": { "instances": 1, "bound": 0.0, "data_scale": 0.0 }
    });
    let r = run(dir.path(), "check-duality", &cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let report = r.report();
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 2);
    for c in checks {
        assert_eq!((c["lhs"].as_f64(), c["rhs"].as_f64()), (Some(0.0), Some(0.0)));
        assert_eq!(c["pass"], json!(true));
    }
}

#[test]
fn default_duality_run_passes_at_five_steps() {
    let dir = TempDir::new().unwrap();
    let r = run(dir.path(), "check-duality", &json!({ "grid": { "steps": 5 } }), &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let report = r.report();
    assert_eq!(report["checks"].as_array().unwrap().len(), 40);
    assert_eq!(report["pass"], json!(true));
}

#[test]
fn fixed_seed_gives_identical_reports() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({ "grid": { "steps": 4 }, "duality": { "instances": 3 } });
    let a = run(dir.path(), "check-duality", &cfg, &["--seed", "7"]);
    let b = run(dir.path(), "check-duality", &cfg, &["--seed=7"]);
    assert_eq!(a.code(), 0, "{}", a.stderr());
    let read = |r: &Run| std::fs::read(r.out.join("report.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(a.report()["config"]["duality"]["seed"], json!(7));
    let c = run(dir.path(), "check-duality", &cfg, &["--seed", "8"]);
    assert_ne!(read(&a), read(&c));
}

fn lq_problem(kind: &str) -> Value {
    json!({
        "kind": kind,
        "family": "lq_tracking",
        "params": {
            "n": 2, "m": 2, "l": 2,
            "b_x": [[0.3, 0.1], [0.0, -0.2]],
            "b_u": [[1.0, 0.0], [0.5, 1.0]],
            "sigma_x": [[0.2, 0.0], [0.1, 0.1]],
            "sigma_u": [[0.1, 0.3], [0.0, 0.2]],
            "g_x": [[0.5, 0.0], [0.0, 0.5]],
            "g_y": [[0.2, 0.0], [0.1, -0.1]],
            "g_z": [[0.3, 0.0], [0.0, 0.2]],
            "g_u": [[0.2, 0.1], [0.0, 0.3]],
            "psi_x": [[1.0, 0.0], [0.0, 1.0]],
            "h_y": [1.0, -0.5],
            "h_quad": [[1.0, 0, 0, 0], [0, 0.5, 0, 0], [0, 0, 1.0, 0], [0, 0, 0, 0]],
            "f_uu": [[2.0, 0.0], [0.0, 1.0]],
            "f_lin": [0.1, 0, 0.2, 0, 0, 0, -0.3, 0.4]
        }
    })
}

#[test]
fn lq_gradient_checks_pass_for_both_kinds() {
    for kind in ["C1", "C2"] {
        let dir = TempDir::new().unwrap();
        let cfg = json!({ "grid": { "steps": 3 }, "problem": lq_problem(kind), "gradient": { "pairs": 3 } });
        let r = run(dir.path(), "check-gradient", &cfg, &[]);
        assert_eq!(r.code(), 0, "{kind}: {}", r.stderr());
        let report = r.report();
        for c in report["checks"].as_array().unwrap() {
            assert!(c["rel_err"].as_f64().unwrap() <= 1e-8, "{kind}: {c}");
        }
    }
}

#[test]
fn zero_direction_gives_zero_derivatives() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "grid": { "steps": 2 },
        "problem": lq_problem("C2"),
        "gradient": { "pairs": 2, "direction": "zero" }
    });
    let r = run(dir.path(), "check-gradient", &cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    for c in r.report()["checks"].as_array().unwrap() {
        assert_eq!(c["lhs"].as_f64(), Some(0.0), "{c}");
        assert_eq!(c["rhs"].as_f64(), Some(0.0), "{c}");
    }
}

#[test]
fn nonlinear_gradient_is_richardson_consistent() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "grid": { "steps": 3 },
        "problem": { "family": "smooth_nonlinear", "params": {
            "b_x": [[0.3]], "b_u": [[1.0]], "b_sin": 0.4, "sigma_tanh": 0.3, "sigma_u": [[0.2]],
            "g_sin": 0.3, "g_u": [[0.5]], "psi_x": [[1.0]], "h_cos": 0.5, "f_cos": 0.7, "f_uu": [[1.0]]
        } },
        "gradient": { "pairs": 3, "eps": [0.2, 0.1], "fd_tolerance": 1e-3 }
    });
    let r = run(dir.path(), "check-gradient", &cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let report = r.report();
    for ratio in report["summary"]["fd_error_ratios"].as_array().unwrap() {
        let ratio = ratio.as_f64().unwrap();
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }
    let checks = report["checks"].as_array().unwrap();
    let worst = |prefix: &str| {
        checks
            .iter()
            .filter(|c| c["name"].as_str().unwrap().starts_with(prefix))
            .map(|c| c["rel_err"].as_f64().unwrap())
            .fold(0.0_f64, f64::max)
    };
    assert!(worst("richardson") < worst("fd_vs_variational") / 100.0);
}

#[test]
fn failed_check_exits_one() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "grid": { "steps": 3 },
        "problem": { "family": "smooth_nonlinear", "params": { "f_cos": 1.0 } },
        "gradient": { "pairs": 1, "eps": [0.5], "fd_tolerance": 1e-12 }
    });
    let r = run(dir.path(), "check-gradient", &cfg, &[]);
    assert_eq!(r.code(), 1);
    assert!(r.stderr().starts_with("fbsvie: check failed:"), "{}", r.stderr());
    assert_eq!(r.report()["pass"], json!(false));
}

fn clamped_quadratic(control: Value) -> Value {
    // running cost (u − 2)² on U = [−1, 1]
    json!({
        "grid": { "steps": 3 },
        "problem": {
            "family": "lq_tracking",
            "params": { "f_uu": [[2.0]], "f_lin": [0, 0, 0, -4.0], "f0": 4.0 },
            "control": control
        }
    })
}

#[test]
fn optimizer_reaches_the_clamped_minimizer() {
    let dir = TempDir::new().unwrap();
    let r = run(dir.path(), "optimize", &clamped_quadratic(json!({ "random_seed": 5 })), &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let history = r.csv("history.csv");
    let costs: Vec<f64> = history.iter().map(|row| value(&row[1])).collect();
    assert!(costs.windows(2).all(|w| w[1] <= w[0]));
    assert!(value(&history.last().unwrap()[2]) <= 1e-6);
    let control = r.csv("control.csv");
    assert_eq!(control.len(), 1 + 2 + 4);
    assert!(control.iter().all(|row| (value(&row[3]) - 1.0).abs() < 1e-12));
    // six pairs i ≤ j, each costing (1 − 2)² dt²
    let cost = r.report()["summary"]["cost"].as_f64().unwrap();
    assert!((cost - 6.0 / 9.0).abs() < 1e-12, "{cost}");
}

#[test]
fn optimizer_started_at_the_optimum_stops_at_once() {
    let dir = TempDir::new().unwrap();
    let r = run(dir.path(), "optimize", &clamped_quadratic(json!({ "constant": [1.0] })), &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    assert!(r.csv("history.csv").len() <= 2);
}

#[test]
fn json_only_output_skips_tables() {
    let dir = TempDir::new().unwrap();
    let mut cfg = clamped_quadratic(json!({}));
    cfg["output"] = json!({ "formats": ["json"] });
    let r = run(dir.path(), "solve-bsvie", &cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    assert!(r.out.join("report.json").exists());
    assert!(!r.out.join("bsvie.csv").exists());
    assert!(r.report().get("timing").is_none());
}

#[test]
fn usage_errors_are_one_line() {
    let output = Command::new(env!("CARGO_BIN_EXE_fbsvie")).arg("optimize").output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err = String::from_utf8_lossy(&output.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("fbsvie: usage error:") && err.contains("--config"), "{err}");
}
