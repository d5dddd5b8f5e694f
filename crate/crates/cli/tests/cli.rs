use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "rounds": 2,
  "clients": 4,
  "local_epochs": 2,
  "batch_size": 16,
  "seeds": [1, 2],
  "model": { "hidden": [8] },
  "dataset": { "source": { "synthetic": { "domains": 2, "classes": 3, "dims": 5, "samples_per_domain": 200 } } }
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dapperfl"));
    c.env_remove("DAPPERFL_THREADS");
    c
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn run_writes_csv_to_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("m.csv");
    let o = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--output")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "framework,seed,round,alpha,acc_domain_0,acc_domain_1,acc_global,\
         params_client_0,params_client_1,params_client_2,params_client_3,\
         flops_client_0,flops_client_1,flops_client_2,flops_client_3,wall_ms"
    );
    assert_eq!(lines.count(), 4);
}

#[test]
fn flags_override_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "7", "--rounds", "3", "--framework", "fedavg"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert!(r.starts_with(&format!("fedavg,7,{},0,", i + 1)), "{r}");
    }
}

#[test]
fn runs_are_reproducible_and_thread_count_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = |threads: Option<&str>| {
        let mut c = bin();
        c.args(["run", "--config"]).arg(&cfg);
        if let Some(t) = threads {
            c.env("DAPPERFL_THREADS", t);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let a = run(None);
    assert_eq!(a, run(None));
    assert_eq!(a, run(Some("1")));
}

#[test]
fn sweep_prefixes_parameter_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("s.csv");
    let o = bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--param", "gamma", "--values", "0,0.01", "--output"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("sweep_param,sweep_value,framework,seed,round,alpha,"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("gamma,0,")).count(), 4);
    assert_eq!(csv.lines().filter(|l| l.starts_with("gamma,0.01,")).count(), 4);
}

fn expect_failure(args: &[&str], config: Option<&str>, env: Option<(&str, &str)>) -> String {
    let dir = tempfile::tempdir().unwrap();
    let mut c = bin();
    c.args(args);
    if let Some(text) = config {
        c.arg("--config").arg(write_config(dir.path(), text));
    }
    if let Some((k, v)) = env {
        c.env(k, v);
    }
    let o = c.output().unwrap();
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(!err.is_empty());
    err
}

#[test]
fn invalid_value_is_reported_with_its_key() {
    let err = expect_failure(&["run"], Some(r#"{"gamma": -1}"#), None);
    assert!(err.contains("gamma"), "{err}");
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let err = expect_failure(&["run"], Some(r#"{"gama": 0.01}"#), None);
    assert!(err.contains("gama"), "{err}");
    let err = expect_failure(&["run"], Some(r#"{"fusion": {"alpha": 0.5}}"#), None);
    assert!(err.contains("fusion") && err.contains("alpha"), "{err}");
}

#[test]
fn malformed_inputs_fail() {
    expect_failure(&["run"], Some("{ not json"), None);
    expect_failure(&["run", "--config", "/nonexistent/cfg.json"], None, None);
    expect_failure(&["run", "--framework", "fedprox"], Some(TINY), None);
    expect_failure(&["sweep", "--param", "beta", "--values", "1"], Some(TINY), None);
    expect_failure(&["sweep", "--param", "gamma", "--values", "x"], Some(TINY), None);
    expect_failure(&["sweep", "--param", "rho", "--values", "1.5"], Some(TINY), None);
    expect_failure(&["run"], Some(TINY), Some(("DAPPERFL_THREADS", "0")));
}

fn write_idx(dir: &Path, name: &str, n: usize, offset: usize) -> (PathBuf, PathBuf) {
    let (rows, cols) = (6u32, 6u32);
    let mut images = vec![0, 0, 8, 3];
    for v in [n as u32, rows, cols] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let y = (i % 2) as u8;
        labels.push(y);
        for p in 0..(rows * cols) as usize {
            // Class 0 lights the left half, class 1 the right half.
            let right = p % cols as usize >= 3;
            let lit = right == (y == 1);
            images.push(if lit { 200 - ((i + offset + p) % 50) as u8 } else { ((i * 7 + p) % 30) as u8 });
        }
    }
    let (ip, lp) = (dir.join(format!("{name}-img")), dir.join(format!("{name}-lbl")));
    fs::write(&ip, images).unwrap();
    fs::write(&lp, labels).unwrap();
    (ip, lp)
}

#[test]
fn idx_domains_train_a_small_cnn() {
    let dir = tempfile::tempdir().unwrap();
    let (a_img, a_lbl) = write_idx(dir.path(), "a", 60, 0);
    let (b_img, b_lbl) = write_idx(dir.path(), "b", 60, 17);
    let cfg = format!(
        r#"{{
  "rounds": 2, "clients": 2, "local_epochs": 2, "batch_size": 8, "seeds": [3],
  "model": {{ "conv": [4], "hidden": [6] }},
  "dataset": {{ "proportion": 0.5, "source": {{ "idx": [
    {{ "images": {:?}, "labels": {:?} }},
    {{ "images": {:?}, "labels": {:?} }} ] }} }}
}}"#,
        a_img, a_lbl, b_img, b_lbl
    );
    let path = write_config(dir.path(), &cfg);
    let o = bin().args(["run", "--config"]).arg(&path).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let last: Vec<&str> = text.lines().last().unwrap().split(',').collect();
    // Client 1 is level 2: one of four conv channels and one of six hidden
    // units are dropped, which also removes the matching input columns.
    let dense = 4 * 9 + 4 + 6 * 4 + 6 + 2 * 6 + 2;
    let pruned = 3 * 9 + 3 + 5 * 3 + 5 + 2 * 5 + 2;
    assert_eq!(last[7], dense.to_string());
    assert_eq!(last[8], pruned.to_string());
}
