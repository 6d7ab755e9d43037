use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SCALAR_LCS: &str = "n_x = 1\nn_u = 1\nn_lambda = 1\ndt = 0.1\nA = [[1.0]]\nB = [[0.1]]\nD = [[0.1]]\nE = [[1.0]]\nF = [[1.0]]\n";

fn c3(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn with_config(text: &str) -> (TempDir, String) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, text).unwrap();
    let p = path.to_str().unwrap().to_string();
    (dir, p)
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn scalar_rollout_matches_hand_computation() {
    let (dir, cfg) = with_config(
        "[system]\nkind = \"lcs\"\npath = \"sys.toml\"\n[controller]\nq = [1.0]\nr = [1.0]\n\
         [run]\nsteps = 3\ninitial_state = [-1.0]\ninputs = [[1.0], [1.0], [1.0]]\n",
    );
    fs::write(dir.path().join("sys.toml"), SCALAR_LCS).unwrap();
    let out = c3(dir.path(), &["simulate", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&dir.path().join("out/trajectory.csv"));
    assert_eq!(header, ["step", "time", "x0", "u0", "lambda0"]);
    // λ_k = -x_k while x_k < 0; x_{k+1} = x_k + 0.1 (u_k + λ_k)
    let states = [-1.0, -0.8, -0.62, -0.458];
    let forces = [1.0, 0.8, 0.62];
    assert_eq!(rows.len(), 4);
    for (k, row) in rows.iter().enumerate() {
        let x: f64 = row[2].parse().unwrap();
        assert!((x - states[k]).abs() < 1e-12, "step {k}: {x}");
        if k < 3 {
            let lambda: f64 = row[4].parse().unwrap();
            assert!((lambda - forces[k]).abs() < 1e-12);
        }
    }
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/trajectory.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 0);
    assert!(meta["config"].as_str().unwrap().contains("kind = \"lcs\""));
}

#[test]
fn cartpole_at_rest_stays_at_rest() {
    let (dir, cfg) = with_config("[system]\nkind = \"cartpole\"\n[run]\nduration = 0.5\n");
    let out = c3(dir.path(), &["simulate", "--config", &cfg]);
    assert!(out.status.success());
    let (_, rows) = read_csv(&dir.path().join("out/trajectory.csv"));
    assert_eq!(rows.len(), 51);
    for row in rows {
        assert!(row[2..].iter().filter(|v| !v.is_empty()).all(|v| v.parse::<f64>().unwrap() == 0.0));
    }
}

#[test]
fn malformed_configs_exit_2_and_name_the_field() {
    let (dir, cfg) = with_config("[system]\nkind = \"cartpole\"\n[controller]\nrhoo = 1.0\n");
    let out = c3(dir.path(), &["control", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rhoo"));

    let (dir, cfg) = with_config("[system]\nkind = \"cartpole\"\n[controller]\nrho = -1.0\n");
    let out = c3(dir.path(), &["control", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("controller.rho"));

    let (dir, cfg) = with_config("[system]\nkind = \"cartpole\"\n[run]\ninitial_state = [0.0]\n");
    let out = c3(dir.path(), &["simulate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.initial_state"));

    let out = c3(dir.path(), &["control"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unsolvable_contact_exits_3() {
    // y = -λ - 1 can never be non-negative
    let (dir, cfg) = with_config(
        "[system]\nkind = \"lcs\"\npath = \"bad.toml\"\n[controller]\nq = [1.0]\nr = [1.0]\n[run]\nsteps = 2\n",
    );
    fs::write(dir.path().join("bad.toml"), SCALAR_LCS.replace("E = [[1.0]]\nF = [[1.0]]", "E = [[0.0]]\nF = [[-1.0]]\nc = [-1.0]")).unwrap();
    let out = c3(dir.path(), &["simulate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn repeated_seed_gives_identical_logs() {
    let text = "[system]\nkind = \"cartpole\"\n[run]\nduration = 1.0\n\
                disturbance = { input = 0, low = 10.0, high = 15.0, duration = 0.25 }\n";
    let (dir, cfg) = with_config(text);
    let first = c3(dir.path(), &["control", "--config", &cfg, "--seed", "7"]);
    assert!(first.status.success());
    let a = fs::read(dir.path().join("out/control.csv")).unwrap();
    let second = c3(dir.path(), &["control", "--config", &cfg, "--seed", "7"]);
    assert!(second.status.success());
    assert_eq!(a, fs::read(dir.path().join("out/control.csv")).unwrap());

    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/control.json")).unwrap()).unwrap();
    let trial = &meta["trials"][0];
    assert_eq!(trial["seed"], 7);
    assert!(trial["contact_events"].as_u64().unwrap() > 0);
    let mag = trial["disturbance_magnitude"].as_f64().unwrap();
    assert!((10.0..=15.0).contains(&mag));

    let batch = c3(dir.path(), &["control", "--config", &cfg, "--seed", "7", "--trials", "2", "--parallel", "2"]);
    assert!(batch.status.success());
    assert_eq!(a, fs::read(dir.path().join("out/control_seed7.csv")).unwrap());
    assert!(dir.path().join("out/control_seed8.csv").exists());
}

#[test]
fn projection_table_has_one_row_per_method() {
    let (dir, cfg) = with_config("[system]\nkind = \"cartpole\"\n[bench]\ntrials = 1\nduration = 0.2\n");
    let out = c3(dir.path(), &["bench-projections", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&dir.path().join("out/projections.csv"));
    assert_eq!(header, ["method", "mean_s", "std_s", "cost"]);
    let methods: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(methods, ["lcp", "miqp", "admm"]);
    for r in &rows {
        assert!(r[1..].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn cost_to_go_from_origin_is_zero() {
    let (dir, cfg) = with_config("[system]\nkind = \"cartpole\"\n[run]\nduration = 0.15\n");
    let out = c3(dir.path(), &["compare-miqp", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&dir.path().join("out/cost_to_go.csv"));
    assert_eq!(header, ["step", "c3", "miqp", "realized", "miqp_gap"]);
    assert_eq!(rows.len(), 6);
    for r in rows {
        for v in &r[1..4] {
            assert!(v.parse::<f64>().unwrap().abs() < 1e-9);
        }
        assert!(r[4].is_empty());
    }
}

#[test]
fn compare_needs_a_fixed_lcs() {
    let (dir, cfg) = with_config("[system]\nkind = \"pivoting\"\n[run]\nduration = 0.2\n");
    let out = c3(dir.path(), &["compare-miqp", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("system.kind"));
}
