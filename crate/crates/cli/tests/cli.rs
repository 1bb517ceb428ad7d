use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfg"))
}

fn shipped(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Writes `text` with its output directory redirected to `out` and returns the config path.
fn config_in(dir: &Path, name: &str, text: &str, out: &Path) -> PathBuf {
    let redirected: String = text
        .lines()
        .map(|l| {
            if l.trim_start().starts_with("directory") {
                format!("directory = {:?}", out.display().to_string())
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let path = dir.join(name);
    std::fs::write(&path, redirected).unwrap();
    path
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (
        status.code().expect("exit code"),
        String::from_utf8(stdout).unwrap(),
        String::from_utf8(stderr).unwrap(),
    )
}

fn assert_json_error(stderr: &str, code: i32) -> serde_json::Value {
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["exit_code"], code);
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    v
}

#[test]
fn wasserstein_on_identical_files_prints_zero() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    let text = "time_index,x0,mass\n-1,0.0,0.25\n-1,1.0,0.75\n";
    std::fs::write(&a, text).unwrap();
    std::fs::write(&b, text).unwrap();
    let (code, out, _) = run(bin().args(["wasserstein"]).arg(&a).arg(&b));
    assert_eq!(code, 0);
    assert_eq!(out.trim().parse::<f64>().unwrap(), 0.0);

    // the monotone coupling moves a quarter of the mass 0 → 1 and another
    // quarter 1 → 2: W1 = 0.5 and W2 = √0.5
    std::fs::write(&b, "time_index,x0,mass\n-1,2.0,0.25\n-1,1.0,0.75\n").unwrap();
    let (_, out, _) = run(bin().args(["wasserstein"]).arg(&a).arg(&b));
    assert!((out.trim().parse::<f64>().unwrap() - 0.5).abs() < 1e-15);
    let (_, out, _) = run(bin().args(["wasserstein", "--p", "2"]).arg(&a).arg(&b));
    assert!((out.trim().parse::<f64>().unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn bad_inputs_exit_three_with_one_json_line() {
    let tmp = TempDir::new().unwrap();
    let (code, _, err) = run(bin().arg("frobnicate"));
    assert_eq!(code, 3);
    assert_eq!(assert_json_error(&err, 3)["error"], "usage");

    let text = shipped("lq-quick.toml");
    let start = text.find("[lattice]").unwrap();
    let end = text.find("[time]").unwrap();
    let no_lattice = format!("{}{}", &text[..start], &text[end..]);
    let cfg = config_in(tmp.path(), "no-lattice.toml", &no_lattice, &tmp.path().join("out"));
    let (code, _, err) = run(bin().arg("solve").arg(&cfg));
    assert_eq!(code, 3);
    assert_eq!(assert_json_error(&err, 3)["error"], "invalid-config");
    assert!(!tmp.path().join("out").exists());

    let (code, _, err) = run(bin().arg("solve").arg(tmp.path().join("missing.toml")));
    assert_eq!(code, 3);
    assert_json_error(&err, 3);

    let negative_h = text.replace("h = 0.1", "h = -0.1");
    let cfg = config_in(tmp.path(), "neg.toml", &negative_h, &tmp.path().join("out"));
    let (code, _, err) = run(bin().arg("solve").arg(&cfg));
    assert_eq!(code, 3);
    assert_json_error(&err, 3);
}

#[test]
fn cfl_violation_exits_four() {
    let tmp = TempDir::new().unwrap();
    // |a| = 2 on h = 0.1 with dt = 0.05 leaves a negative stay probability
    let text = shipped("lq-quick.toml").replace("cfl = \"restrict\"", "cfl = \"error\"");
    let cfg = config_in(tmp.path(), "cfl.toml", &text, &tmp.path().join("out"));
    let (code, _, err) = run(bin().arg("solve").arg(&cfg));
    assert_eq!(code, 4);
    assert_eq!(assert_json_error(&err, 4)["error"], "cfl-violation");
}

#[test]
fn solve_writes_artifacts_and_is_thread_count_independent() {
    let tmp = TempDir::new().unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = tmp.path().join(format!("out-{threads}"));
        let cfg = config_in(tmp.path(), &format!("q{threads}.toml"), &shipped("lq-quick.toml"), &out);
        let (code, stdout, _) = run(bin().env("RAYON_NUM_THREADS", threads).arg("solve").arg(&cfg));
        assert_eq!(code, 0, "{stdout}");
        assert!(stdout.starts_with("status=CONVERGED"));
        outputs.push(out);
    }
    for name in ["trace.csv", "summary.toml", "flow.csv", "policy.csv", "strict_policy.csv"] {
        let a = std::fs::read(outputs[0].join(name)).unwrap();
        let b = std::fs::read(outputs[1].join(name)).unwrap();
        assert!(a == b, "{name} differs across thread counts");
    }

    let trace = std::fs::read_to_string(outputs[0].join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iter,flow_residual,exploitability,value,mean_T"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    // 17 significant digits: one leading digit and sixteen after the point
    let mantissa = first[1].split('e').next().unwrap();
    assert_eq!(mantissa.trim_start_matches('-').len(), 18, "{}", first[1]);

    let summary: toml::Table = toml::from_str(&std::fs::read_to_string(outputs[0].join("summary.toml")).unwrap()).unwrap();
    assert_eq!(summary["status"].as_str(), Some("CONVERGED"));
    let mean_t = summary["mean_T"].as_float().unwrap();
    assert!((mean_t - 1.0 / 3.0).abs() < 0.02, "{mean_t}");
    assert!(summary["strict"]["computed"].as_bool().unwrap());

    // the resolved config fills every default and parses back
    let resolved = std::fs::read_to_string(outputs[0].join("config.resolved.toml")).unwrap();
    let table: toml::Table = toml::from_str(&resolved).unwrap();
    assert_eq!(table["solver"]["method"].as_str(), Some("dp"));
    assert_eq!(table["solver"]["p"].as_float(), Some(1.0));
    assert_eq!(table["model"]["controls"]["convex"].as_bool(), Some(true));
}

#[test]
fn best_response_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let text = shipped("custom-table.toml").replace("terms = [{ functional = \"mean\", weight = -1.0 }]", "");
    let base = tmp.path().join("base");
    let cfg = config_in(tmp.path(), "table.toml", &text, &base);
    let (code, _, err) = run(bin().arg("solve").arg(&cfg));
    assert_eq!(code, 0, "{err}");
    let flow = base.join("flow.csv");

    let mut runs = Vec::new();
    for name in ["br1", "br2"] {
        let out = tmp.path().join(name);
        let cfg = config_in(tmp.path(), &format!("{name}.toml"), &text, &out);
        let (code, stdout, err) = run(bin().arg("best-response").arg(&cfg).arg(&flow));
        assert_eq!(code, 0, "{err}");
        assert!(stdout.starts_with("value="));
        runs.push(out);
    }
    for name in ["flow.csv", "policy.csv", "summary.toml"] {
        assert_eq!(
            std::fs::read(runs[0].join(name)).unwrap(),
            std::fs::read(runs[1].join(name)).unwrap(),
            "{name}"
        );
    }
    // the solved flow is (close to) a fixed point of the best-response map
    let summary: toml::Table = toml::from_str(&std::fs::read_to_string(runs[0].join("summary.toml")).unwrap()).unwrap();
    assert!(summary["flow_residual"].as_float().unwrap() < 1e-3);
}

#[test]
fn validate_reports_the_moment_exponent_note() {
    let (code, out, _) = run(bin().arg("validate").arg(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/lq.toml"),
    ));
    assert_eq!(code, 0);
    assert!(out.contains("note,the assumption p' > p is violated"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("drift-growth,") && l.ends_with(",true")));
    assert_eq!(out.lines().filter(|l| l.contains(",pass,")).count(), 3, "{out}");
}

#[test]
fn lq_check_prints_the_comparison_table() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_in(tmp.path(), "q.toml", &shipped("lq-quick.toml"), &tmp.path().join("out"));
    let (code, out, _) = run(bin().arg("lq-check").arg(&cfg));
    assert_eq!(code, 0);
    let mean = out.lines().find(|l| l.starts_with("mean_T,")).unwrap();
    let fields: Vec<f64> = mean.split(',').skip(1).map(|f| f.parse().unwrap()).collect();
    assert!((fields[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!(fields[2] < 0.02);
    assert!(out.contains("critical_c,-2.0000000000000000e0"));
    assert!(tmp.path().join("out/lq_check.csv").exists());

    let table = shipped("custom-table.toml");
    let cfg = config_in(tmp.path(), "t.toml", &table, &tmp.path().join("t"));
    let (code, _, err) = run(bin().arg("lq-check").arg(&cfg));
    assert_eq!(code, 3);
    assert_json_error(&err, 3);
}
