use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ndm_cli::output::{read_table, COMPARISON_FILE, ORACLE_FILE, SUMMARY_FILE, TRAJECTORY_FILE};
use ndm_cli::RunConfig;
use tempfile::TempDir;

fn ndm(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ndm"));
    cmd.args(args).env("RUST_LOG", "warn");
    match threads {
        Some(t) => cmd.env("NDM_THREADS", t),
        None => cmd.env_remove("NDM_THREADS"),
    };
    cmd.output().expect("spawn ndm")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn benchmark_config(out: &Path, seed: u64) -> String {
    small_config("benchmark", out, seed)
}

fn small_config(mode: &str, out: &Path, seed: u64) -> String {
    format!(
        r#"
mode = "{mode}"
seed = {seed}
output_dir = "{}"

[model]
n_sites = 2
B = 1.0
Jx = 2.0
Jz = 1.0

[ndm]
n_hidden = 2
n_mixing = 2
strength = 0.5
sigma = 0.1

[sampler]
n_samples = 200
n_chains = 2

[integrator]
dt = 1e-3
t_end = 0.01
record_every = 0.002
lambda = 1e-4
"#,
        out.display()
    )
}

#[test]
fn benchmark_run_writes_consistent_tables() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "bench.toml", &benchmark_config(&out, 3));
    let res = ndm(&["run", &cfg], Some("1"));
    assert!(res.status.success(), "{}", stderr(&res));

    let (_, cols, rows) = read_table(&out.join(TRAJECTORY_FILE)).unwrap();
    assert_eq!(cols[0], "t");
    assert!(cols.contains(&"mz_mean".to_string()));
    assert!(cols.contains(&"delta_l_stderr".to_string()));
    assert!(cols.contains(&"acceptance_q".to_string()));
    assert_eq!(rows.len(), 6);
    let times: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert!(times.windows(2).all(|w| w[1] > w[0]));
    assert!((times[5] - 0.01).abs() < 1e-12);

    // the oracle file shares the trajectory schema
    let (_, oracle_cols, oracle_rows) = read_table(&out.join(ORACLE_FILE)).unwrap();
    assert_eq!(oracle_cols, cols);
    assert_eq!(oracle_rows.len(), rows.len());

    let (_, ccols, crows) = read_table(&out.join(COMPARISON_FILE)).unwrap();
    let k = ccols.iter().position(|c| c == "delta_rho").unwrap();
    for r in &crows {
        let d: f64 = r[k].parse().unwrap();
        assert!((0.0..1e-2).contains(&d), "delta_rho {d}");
    }
    let (_, _, srows) = read_table(&out.join(SUMMARY_FILE)).unwrap();
    let psd = srows.iter().find(|r| r[0] == "min_relative_eigenvalue").unwrap();
    assert!(psd[1].parse::<f64>().unwrap() >= -1e-8);
}

#[test]
fn every_output_file_starts_with_provenance_line() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let body = benchmark_config(&out, 5) + "\n[output]\ncheckpoint_every_record = true\n";
    let cfg = write_config(tmp.path(), "bench.toml", &body);
    let res = ndm(&["run", &cfg], Some("1"));
    assert!(res.status.success(), "{}", stderr(&res));

    let expected = RunConfig::load(Path::new(&cfg)).unwrap().header();
    assert!(expected.starts_with(&format!("# ndm {} seed=5 config_sha256=", env!("CARGO_PKG_VERSION"))));
    let listed: Vec<String> = String::from_utf8(res.stdout).unwrap().lines().map(String::from).collect();
    assert!(listed.len() >= 6, "{listed:?}");
    for f in &listed {
        let text = fs::read_to_string(f).unwrap();
        if f.ends_with(".json") {
            let v: serde_json::Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["header"].as_str(), Some(expected.as_str()), "{f}");
        } else {
            assert_eq!(text.lines().next(), Some(expected.as_str()), "{f}");
        }
    }
    assert!(listed.iter().any(|f| f.contains("checkpoints")));
}

#[test]
fn identical_seed_gives_identical_bytes_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let mut tables = Vec::new();
    for (i, threads) in ["1", "2", "1"].into_iter().enumerate() {
        let out = tmp.path().join(format!("out{i}"));
        let cfg = write_config(tmp.path(), &format!("run{i}.toml"), &small_config("dynamics", &out, 11));
        let res = ndm(&["run", &cfg], Some(threads));
        assert!(res.status.success(), "{}", stderr(&res));
        tables.push(fs::read(out.join(TRAJECTORY_FILE)).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
    assert_eq!(tables[0], tables[2]);
}

#[test]
fn different_seed_changes_the_trajectory() {
    let tmp = TempDir::new().unwrap();
    let mut tables = Vec::new();
    for seed in [1, 2] {
        let out = tmp.path().join(format!("out{seed}"));
        let cfg = write_config(tmp.path(), &format!("s{seed}.toml"), &benchmark_config(&out, seed));
        assert!(ndm(&["run", &cfg], Some("1")).status.success());
        tables.push(fs::read(out.join(TRAJECTORY_FILE)).unwrap());
    }
    assert_ne!(tables[0], tables[1]);
}

#[test]
fn unknown_key_exits_one_with_suggestion() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "typo.toml",
        "mode = \"dynamics\"\n[model]\nn_sites = 2\n[integrator]\nlamda = 1e-4\n",
    );
    let res = ndm(&["validate", &cfg], None);
    assert_eq!(res.status.code(), Some(1));
    let err = stderr(&res);
    assert!(err.contains("lamda") && err.contains("integrator.lambda"), "{err}");

    let res = ndm(&["run", &cfg], None);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn invalid_value_exits_one_naming_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.toml",
        "mode = \"dynamics\"\n[model]\nn_sites = 2\n[integrator]\ndt = -1.0\n",
    );
    let res = ndm(&["run", &cfg], None);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("integrator.dt"), "{}", stderr(&res));
}

#[test]
fn missing_config_file_exits_one() {
    let res = ndm(&["validate", "/nonexistent/ndm.toml"], None);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn oversized_oracle_exits_two() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(
        tmp.path(),
        "big.toml",
        &format!("mode = \"oracle\"\noutput_dir = \"{}\"\n[model]\nn_sites = 8\n", out.display()),
    );
    let res = ndm(&["run", &cfg], Some("1"));
    assert_eq!(res.status.code(), Some(2), "{}", stderr(&res));
}

#[test]
fn default_config_round_trips_through_validate() {
    let tmp = TempDir::new().unwrap();
    let res = ndm(&["default-config"], None);
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    let path = write_config(tmp.path(), "default.toml", &text);
    let res = ndm(&["validate", &path], None);
    assert!(res.status.success(), "{}", stderr(&res));
    let resolved = String::from_utf8(res.stdout).unwrap();
    assert_eq!(RunConfig::from_toml(&resolved).unwrap(), RunConfig::from_toml(&text).unwrap());
}

#[test]
fn bad_thread_variable_exits_one() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "b.toml", &benchmark_config(&out, 1));
    let res = ndm(&["run", &cfg], Some("many"));
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("NDM_THREADS"));
}

#[test]
fn oracle_mode_matches_library_propagation() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(
        tmp.path(),
        "oracle.toml",
        &format!(
            "mode = \"oracle\"\noutput_dir = \"{}\"\n[model]\nn_sites = 1\n[ndm]\nstrength = 3.0\n\
             [integrator]\nt_end = 1.0\nrecord_every = 0.25\n[observables]\nnames = [\"mz\"]\n",
            out.display()
        ),
    );
    let res = ndm(&["run", &cfg], Some("1"));
    assert!(res.status.success(), "{}", stderr(&res));
    let (_, cols, rows) = read_table(&out.join(ORACLE_FILE)).unwrap();
    let m = cols.iter().position(|c| c == "mz_mean").unwrap();
    let m0: f64 = rows[0][m].parse().unwrap();
    for r in &rows {
        let t: f64 = r[0].parse().unwrap();
        let exact = -1.0 + (m0 + 1.0) * (-t).exp();
        assert!((r[m].parse::<f64>().unwrap() - exact).abs() < 1e-10);
    }
}
