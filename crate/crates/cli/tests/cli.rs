use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nball_core::Kernel;
use tempfile::TempDir;

const THREE_BALL: &str = r#"{"problem": {"n": 3, "epsilon": 1.0, "c": 3.0, "lambda_even_coeffs": [50.0, 50.0, 10.0]}}"#;

fn quick(loop_mode: &str, t_end: f64) -> String {
    format!(
        r#"{{"problem": {{"n": 3, "epsilon": 1.0, "c": 3.0, "lambda_even_coeffs": [50.0, 50.0, 10.0]}},
            "sim": {{"grid_points": 60, "dt": 1e-3, "t_end": {t_end}, "loop": "{loop_mode}",
                     "band_limit": 4, "sample_every": 10}}}}"#
    )
}

fn nball(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nball"));
    cmd.args(args).env_remove("NBALL_OUT_DIR");
    if let Some(dir) = env_out {
        cmd.env("NBALL_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

struct Case {
    dir: TempDir,
}

impl Case {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), config).unwrap();
        Self { dir }
    }

    fn config(&self) -> String {
        self.dir.path().join("config.json").display().to_string()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> Output {
        let out = self.out(out).display().to_string();
        let config = self.config();
        let mut args = vec![cmd, "--config", &config, "--out", &out];
        args.extend_from_slice(extra);
        nball(&args, None)
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Column `name` of a CSV file.
fn column(path: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn modeplan_reports_cutoff() {
    let c = Case::new(THREE_BALL);
    let o = c.run("modeplan", "out", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.out("out/plan.json")).unwrap()).unwrap();
    assert_eq!(plan["l_cutoff"], 11);
    assert_eq!(plan["controlled_degrees"].as_array().unwrap().len(), 11);
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"l_cutoff\": 11"));
}

#[test]
fn kernel_writes_eleven_round_trippable_files() {
    let c = Case::new(THREE_BALL);
    let o = c.run("kernel", "out", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for l in 0..=10 {
        let text = fs::read_to_string(c.out(&format!("out/kernels/kernel_l{l}.json"))).unwrap();
        let k = Kernel::from_json(&text).unwrap();
        assert_eq!(k.l(), l);
        assert_eq!(k.order(), 15);
        assert_eq!(k.to_json(), text);
    }
    assert!(!c.out("out/kernels/kernel_l11.json").exists());
    let res: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.out("out/residuals.json")).unwrap()).unwrap();
    assert_eq!(res["pass"], true);
    assert_eq!(res["kernels"].as_array().unwrap().len(), 11);
}

#[test]
fn zero_reaction_gives_trivial_kernels() {
    let c = Case::new(
        r#"{"problem": {"n": 3, "epsilon": 1.0, "c": 0.0, "lambda_even_coeffs": [0.0]},
            "solver": {"order": 6, "degrees": [0, 1, 2]}}"#,
    );
    let o = c.run("kernel", "out", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for l in 0..=2 {
        let k = Kernel::from_json(&fs::read_to_string(c.out(&format!("out/kernels/kernel_l{l}.json"))).unwrap()).unwrap();
        assert_eq!(k.max_abs(), 0.0);
    }
    let res: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.out("out/residuals.json")).unwrap()).unwrap();
    for k in res["kernels"].as_array().unwrap() {
        assert_eq!(k["max_boundary_residual"].as_f64(), Some(0.0));
        assert_eq!(k["max_pde_residual"].as_f64(), Some(0.0));
    }
}

#[test]
fn odd_reaction_term_is_a_validation_error() {
    let c = Case::new(r#"{"problem": {"n": 3, "epsilon": 1.0, "c": 3.0, "lambda_coeffs": [1.0, 0.1]}}"#);
    let o = c.run("kernel", "out", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("only even powers"), "{}", stderr(&o));
    assert!(!c.out("out/kernels").exists());
}

#[test]
fn bad_configs_are_validation_errors() {
    for bad in [
        r#"{"problem": {"n": 3, "epsilon": 1.0, "c": 3.0, "lambda_even_coeffs": [1.0], "extra": 1}}"#,
        r#"{"problem": {"n": 3, "epsilon": 0.0, "c": 3.0, "lambda_even_coeffs": [1.0]}}"#,
        r#"{"problem": {"n": 3, "radius": -1.0, "epsilon": 1.0, "c": 3.0, "lambda_even_coeffs": [1.0]}}"#,
        r#"{"problem": {"n": 3, "epsilon": 1.0, "c": -1.0, "lambda_even_coeffs": [1.0]}}"#,
        "not json",
    ] {
        let c = Case::new(bad);
        let o = c.run("modeplan", "out", &[]);
        assert_eq!(code(&o), 2, "{bad}: {}", stderr(&o));
    }
}

#[test]
fn residual_failure_is_numerical() {
    let c = Case::new(
        r#"{"problem": {"n": 3, "epsilon": 1.0, "c": 3.0, "lambda_even_coeffs": [50.0, 50.0, 10.0]},
            "solver": {"tolerance": 1e-30}}"#,
    );
    let o = c.run("kernel", "out", &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("residual check failed"));
    // The report is still written for inspection.
    assert!(c.out("out/residuals.json").exists());
}

#[test]
fn missing_config_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json").display().to_string();
    let o = nball(&["kernel", "--config", &missing, "--out", &dir.path().display().to_string()], None);
    assert_eq!(code(&o), 1);
}

#[test]
fn zero_threads_rejected() {
    let c = Case::new(THREE_BALL);
    let o = c.run("modeplan", "out", &["--threads", "0"]);
    assert_eq!(code(&o), 2);
    let o = c.run("modeplan", "out", &["--threads", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn environment_overrides_output_directory() {
    let c = Case::new(THREE_BALL);
    let env = c.out("from_env");
    let o = nball(&["modeplan", "--config", &c.config()], Some(&env));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(env.join("plan.json").exists());
    // --out still wins.
    let flag = c.out("from_flag");
    let o = nball(&["modeplan", "--config", &c.config(), "--out", &flag.display().to_string()], Some(&env));
    assert_eq!(code(&o), 0);
    assert!(flag.join("plan.json").exists());
}

#[test]
fn open_loop_grows() {
    let c = Case::new(&quick("open", 0.2));
    let o = c.run("simulate", "out", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mean = column(&c.out("out/merged.csv"), "mean_norm");
    assert!(mean.last().unwrap() > &(10.0 * mean[0]));
    assert!(c.out("out/modes/mode_l4_m-4.csv").exists());
    assert!(c.out("out/summary.json").exists());
}

#[test]
fn output_feedback_decays_with_observer() {
    let c = Case::new(&quick("output-feedback", 1.0));
    let o = c.run("simulate", "out", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let merged = c.out("out/merged.csv");
    let mean = column(&merged, "mean_norm");
    let err = column(&merged, "observer_error_mean");
    assert!(mean.last().unwrap() < &(1e-3 * mean[0]));
    assert!(err.last().unwrap() < &(1e-3 * err[0]));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.out("out/summary.json")).unwrap()).unwrap();
    assert_eq!(s["loop_mode"], "output-feedback");
    assert!(s["observer_law"].as_str().unwrap().contains("Gaussian"));
    assert_eq!(s["modes"].as_array().unwrap().len(), 25);
}

#[test]
fn zero_horizon_keeps_initial_sample_only() {
    let c = Case::new(&quick("full-state", 0.0));
    let o = c.run("simulate", "out", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(column(&c.out("out/merged.csv"), "time"), vec![0.0]);
}

#[test]
fn closed_loop_without_needed_kernel_fails() {
    let config = quick("full-state", 0.1).replacen(
        r#""problem""#,
        r#""solver": {"degrees": [0]}, "problem""#,
        1,
    );
    let c = Case::new(&config);
    let o = c.run("simulate", "out", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("l = 1"), "{}", stderr(&o));
}

#[test]
fn seed_changes_initial_field() {
    let c = Case::new(&quick("open", 0.0));
    assert_eq!(code(&c.run("simulate", "a", &["--seed", "1"])), 0);
    assert_eq!(code(&c.run("simulate", "b", &["--seed", "2"])), 0);
    let a = fs::read(c.out("a/modes/mode_l1_m1.csv")).unwrap();
    let b = fs::read(c.out("b/modes/mode_l1_m1.csv")).unwrap();
    assert_ne!(a, b);
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.out("b/summary.json")).unwrap()).unwrap();
    assert_eq!(s["seed"], 2);
}

#[test]
fn reproduction_bundle_is_complete_and_deterministic() {
    let mut config = quick("output-feedback", 0.4).replace(r#""t_end": 0.4"#, r#""t_end": 0.4, "open_loop_t_end": 0.2"#);
    config.push('\n');
    let c = Case::new(&config);
    let first = c.run("reproduce-paper", "one", &["--threads", "3"]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let second = c.run("reproduce-paper", "two", &["--threads", "1"]);
    assert_eq!(code(&second), 0, "{}", stderr(&second));
    let (one, two) = (tree(&c.out("one")), tree(&c.out("two")));
    assert_eq!(one.keys().collect::<Vec<_>>(), two.keys().collect::<Vec<_>>());
    for (k, v) in &one {
        assert!(v == &two[k], "{} differs between runs", k.display());
    }

    let has = |p: &str| one.contains_key(Path::new(p));
    for l in 0..=10 {
        assert!(has(&format!("kernels/kernel_l{l}.json")));
        for kind in ["control", "observer"] {
            assert!(has(&format!("gains/{kind}_l{l}.csv")) && has(&format!("gains/{kind}_l{l}.json")));
        }
    }
    for t in ["0", "0.18", "0.2"] {
        for r in ["0.5", "0.9"] {
            assert!(has(&format!("open_loop/fields/u_t{t}_r{r}.csv")));
        }
    }
    // 2 s lies beyond this horizon and is dropped.
    for t in ["0.1", "0.2", "0.4"] {
        for name in ["u", "error"] {
            assert!(has(&format!("output_feedback/fields/{name}_t{t}_r0.5.csv")));
        }
    }
    assert!(!has("output_feedback/fields/u_t2_r0.5.csv"));
    for f in ["traces.csv", "observer_error_traces.csv", "control_effort.csv", "merged.csv", "summary.json"] {
        assert!(has(&format!("output_feedback/{f}")), "{f}");
    }
    let run: serde_json::Value = serde_json::from_slice(&one[Path::new("run.json")]).unwrap();
    assert_eq!(run["seed"], 20_240_617);
    assert!(run["initial_law"].as_str().unwrap().contains("U[-1,1]"));

    // Gain magnitude falls with the degree.
    let mass = |l: usize| -> f64 {
        let p = c.out(&format!("one/gains/control_l{l}.csv"));
        column(&p, "value").iter().zip(column(&p, "weight")).map(|(v, w)| v.abs() * w).sum()
    };
    for l in 0..5 {
        assert!(mass(l + 1) < mass(l), "l = {l}");
    }

    // The open-loop field grows, and stays within [0, 10] at the start.
    let u0 = column(&c.out("one/open_loop/fields/u_t0_r0.5.csv"), "value");
    assert!(u0.iter().all(|v| (0.0..=10.0).contains(v)));
    let mean = column(&c.out("one/open_loop/merged.csv"), "mean_norm");
    assert!(mean.last().unwrap() > &mean[0]);
}
