use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "seed = 3\n[graph]\nbenchmark = \"chain3\"\nn = 300\n[graph.params]\nslate_dim = 1\n\
                    [train]\nhidden = [8]\nepochs = 2\nmin_steps = 20\n\
                    [inference]\nn1 = 200\nn2 = 100\nm_mc = 9\nmmd_perm = 0\n";

fn cedm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cedm"))
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn with_config(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let mut all = vec!["--config", cfg.to_str().unwrap()];
    all.extend_from_slice(args);
    cedm(dir, &all)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cedm(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(cedm(dir.path(), &["simulate", "--benchmark", "lattice"]).status.code(), Some(2));
    let o = with_config(dir.path(), &["test-edge", "--replicates", "1", "--edge", "Y1->Y9"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("Y9"));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "Y1,Y2,Y3\n1,2,3\n4,oops,6\n").unwrap();
    let o = with_config(dir.path(), &["train", "--data", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    fs::write(dir.path().join("junk.cedm"), "not an archive").unwrap();
    let o = cedm(dir.path(), &["sample", "--model", dir.path().join("junk.cedm").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn simulate_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(with_config(d.path(), &["simulate", "--interventional"]).status.success());
    }
    for f in ["observational.csv", "interventional.csv", "graph.toml", "observational.csv.meta.json"] {
        assert_eq!(fs::read(a.path().join("out").join(f)).unwrap(), fs::read(b.path().join("out").join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    assert!(with_config(c.path(), &["--seed", "4", "simulate"]).status.success());
    assert_ne!(fs::read(a.path().join("out/observational.csv")).unwrap(), fs::read(c.path().join("out/observational.csv")).unwrap());
}

#[test]
fn sachs_benchmark_has_eleven_proteins() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cedm(dir.path(), &["simulate", "--benchmark", "sachs", "-n", "50"]).status.success());
    let text = fs::read_to_string(dir.path().join("out/observational.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 11);
    assert_eq!(lines.count(), 50);
}

#[test]
fn train_sample_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert!(with_config(dir.path(), &["simulate"]).status.success());
    let obs = out.join("observational.csv");
    let o = with_config(dir.path(), &["train", "--data", obs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model = out.join("model.cedm");
    let o = cedm(dir.path(), &["sample", "--model", model.to_str().unwrap(), "-n", "40", "--do", "Y2=0.25"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("samples.csv")).unwrap();
    for line in text.lines().skip(1) {
        assert_eq!(line.split(',').nth(1).unwrap().parse::<f64>().unwrap(), 0.25);
    }
    let meta = fs::read_to_string(out.join("samples.csv.meta.json")).unwrap();
    assert!(meta.contains("model_hash"), "{meta}");

    let mut bytes = fs::read(&model).unwrap();
    let k = bytes.len() - 10;
    bytes[k] = if bytes[k] == b'3' { b'4' } else { b'3' };
    fs::write(&model, bytes).unwrap();
    let o = cedm(dir.path(), &["sample", "--model", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("corrupted"), "{}", stderr(&o));
}

#[test]
fn test_edge_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = with_config(dir.path(), &["test-edge", "--replicates", "2", "--edge", "Y1->Y3", "--correction", "bh"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("out/test_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(report.lines().next().unwrap().starts_with("replicate,hypothesis,observed,p_value"));
    let nulls = fs::read_to_string(dir.path().join("out/null_stats.csv")).unwrap();
    assert_eq!(nulls.lines().count(), 1 + 2 * 9);
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cedm(dir.path(), &["selfcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
}
