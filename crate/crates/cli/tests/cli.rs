use std::path::Path;
use std::process::{Command, Output};

fn rimesa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rimesa"))
        .args(args)
        .env_remove("RIMESA_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.txt"), dir.path().join("b.txt"), dir.path().join("c.txt"));
    for (out, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        let o = rimesa(&["generate", "--length", "20", "--seed", seed, "--out", path(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn run_writes_summary_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = rimesa(&["run", "--length", "15", "--methods", "rimesa,independent", "--out-dir", path(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("method,dataset,seed,status"));
    assert!(lines[1].starts_with("rimesa,") && lines[1].contains(",ok,"));
    assert!(lines[2].starts_with("independent,") && lines[2].contains(",ok,"));
    for f in ["summary.csv", "series.csv", "timing.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("summary.csv")).unwrap(), text);
}

#[test]
fn env_out_dir_takes_precedence() {
    let (env_dir, flag_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o = Command::new(env!("CARGO_BIN_EXE_rimesa"))
        .args(["run", "--length", "10", "--methods", "independent", "--out-dir", path(flag_dir.path())])
        .env("RIMESA_OUT_DIR", env_dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_dir.path().join("summary.csv").is_file());
    assert!(!flag_dir.path().join("summary.csv").exists());
}

#[test]
fn dataset_file_history_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds.txt");
    let out = dir.path().join("out");
    assert!(rimesa(&["generate", "--length", "15", "--seed", "2", "--out", path(&ds)]).status.success());
    let o = rimesa(&["run", "--dataset", path(&ds), "--methods", "kimesa", "--history", "--out-dir", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let hist = out.join("history_kimesa.txt");
    assert!(hist.is_file());
    let m = rimesa(&["metrics", "--history", path(&hist), "--dataset", path(&ds)]);
    assert!(m.status.success(), "{}", String::from_utf8_lossy(&m.stderr));
    let text = stdout(&m);
    let iate: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("iate "))
        .expect("iate line")
        .parse()
        .unwrap();
    assert!(iate.is_finite() && iate >= 0.0);
    let summary_iate: f64 = stdout(&o).lines().nth(1).unwrap().split(',').nth(4).unwrap().parse().unwrap();
    assert!((iate - summary_iate).abs() < 1e-9, "{iate} vs {summary_iate}");
}

#[test]
fn sweep_emits_one_row_per_cell_trial_and_method() {
    let o = rimesa(&["sweep", "--length", "10", "--trials", "2", "--methods", "independent,rimesa", "--axis", "sigma_rz=0.5,1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(rows.iter().all(|r| r.split(',').nth(5) == Some("ok")));
    assert!(rows[0].starts_with("sigma_rz=0.5,0,independent,"));
}

#[test]
fn config_file_and_overrides_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\nlength = 12\nmethods = independent\nseed = 9\n").unwrap();
    let o = rimesa(&["run", "--config", path(&cfg), "--set", "seed=11"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[0], row[2]), ("independent", "11"));
}

#[test]
fn usage_and_input_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.txt");
    for args in [
        vec!["run", "--bogus"],
        vec!["run", "--set", "robotz=3"],
        vec!["run", "--methods", "nothing"],
        vec!["run", "--dataset", path(&missing)],
        vec!["sweep", "--axis", "speed=1,2"],
        vec![],
    ] {
        let o = rimesa(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn help_lists_settings_and_exits_0() {
    let o = rimesa(&["run", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for key in ["sigma_rz", "outliers", "net", "Exit codes"] {
        assert!(text.contains(key), "{key}");
    }
}
