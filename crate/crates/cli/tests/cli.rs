use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rareopt"))
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg(config).arg("--out").arg(out).args(extra).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Rows of a CSV as header-keyed maps.
fn read_csv(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    r.records()
        .map(|rec| header.iter().cloned().zip(rec.unwrap().iter().map(String::from)).collect())
        .collect()
}

fn num(row: &std::collections::HashMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

const SMALL: &str = r#"
experiment = "small"
kind = "estimate"
theta = [[0.2], [0.4], [0.5], [0.6], [0.7], [0.8], [1.0], [1.2]]

[model]
family = "hinge_componentwise"
b = [0.4]
c = [1.5]
lower = [0.0]
upper = [1.5]

[distribution]
kind = "standard_normal"
dim = 1

[phi]
lambda = 1e5
eps = 0.01

[simulation]
scheme = "is_x"
n = 20
replications = 20000
seeds = [1]
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn bundled_table4_first_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&bundled("example1_table4.toml"), dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&dir.path().join("decay_rates.csv"));
    assert_eq!(rows.len(), 8);
    assert_eq!(num(&rows[0], "theta_1"), 0.0);
    assert!((num(&rows[0], "w_bar_origin") - 0.0829).abs() <= 0.005);
    assert!((num(&rows[0], "two_gamma") - 0.1012).abs() <= 0.005);
}

#[test]
fn bundled_table3_middle_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&bundled("example1_table3.toml"), dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&dir.path().join("estimates.csv"));
    let mid = rows.iter().find(|r| num(r, "theta_1") == 0.6).unwrap();
    assert!((num(mid, "log_mean") + 11.6375).abs() <= 0.2, "{}", mid["log_mean"]);
}

#[test]
fn every_bundled_config_parses_and_validates() {
    // `--jobs 0` is rejected after validation, so nothing runs.
    for entry in std::fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let dir = tempfile::tempdir().unwrap();
        let o = run(&path, dir.path(), &["--jobs", "0"]);
        assert_eq!(o.status.code(), Some(2), "{}", path.display());
        assert!(stderr(&o).contains("--jobs must be positive"), "{}: {}", path.display(), stderr(&o));
    }
}

#[test]
fn negative_replications_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", &SMALL.replace("replications = 20000", "replications = -5"));
    let o = run(&cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 24") && err.contains("-5"), "{err}");
    assert!(!dir.path().join("estimates.csv").exists());
}

#[test]
fn dimension_mismatch_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", &SMALL.replace("theta = [[0.2],", "theta = [[0.2, 0.1],"));
    let o = run(&cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 4") && err.contains("theta[0]"), "{err}");

    let cfg = write(dir.path(), "zero.toml", &SMALL.replace("n = 20", "n = 0"));
    let o = run(&cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("field `simulation.n`: must be positive"), "{}", stderr(&o));
}

#[test]
fn numeric_failures_exit_with_three() {
    // The U sampler covers scalar inputs only.
    let text = SMALL
        .replace("scheme = \"is_x\"", "scheme = \"is_u\"")
        .replace("b = [0.4]", "b = [0.4, 0.3]")
        .replace("c = [1.5]", "c = [1.5, 2.0]")
        .replace("lower = [0.0]", "lower = [0.0, 0.0]")
        .replace("upper = [1.5]", "upper = [1.5, 2.0]")
        .replace("dim = 1", "dim = 2")
        .replace("theta = [[0.2], [0.4], [0.5], [0.6], [0.7], [0.8], [1.0], [1.2]]", "theta = [[0.6, 1.1]]");
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "u2.toml", &text);
    let o = run(&cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("experiment `small` (estimate)"), "{}", stderr(&o));
}

#[test]
fn reruns_are_bitwise_identical_across_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&cfg, &a, &["--jobs", "1"]).status.success());
    assert!(run(&cfg, &b, &["--jobs", "4"]).status.success());
    let (ra, rb) = (read_csv(&a.join("estimates.csv")), read_csv(&b.join("estimates.csv")));
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x["log_mean"], y["log_mean"]);
        assert_eq!(x["log_std"], y["log_std"]);
    }
    let (ha, hb) = (read_csv(&a.join("run_record.csv")), read_csv(&b.join("run_record.csv")));
    assert_eq!(ha[0]["config_hash"], hb[0]["config_hash"]);
    assert_eq!(ha[0]["config_hash"].len(), 64);
}

#[test]
fn seed_override_changes_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", &SMALL.replace("replications = 20000", "replications = 100"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&cfg, &a, &[]).status.success());
    assert!(run(&cfg, &b, &["--seed", "9"]).status.success());
    let (ha, hb) = (read_csv(&a.join("run_record.csv")), read_csv(&b.join("run_record.csv")));
    assert_ne!(ha[0]["config_hash"], hb[0]["config_hash"]);
    assert!(read_csv(&b.join("estimates.csv")).iter().all(|r| r["seed"] == "9"));
}

fn compare(a: &Path, b: &Path) -> Output {
    bin().arg("compare").arg(a).arg(b).output().unwrap()
}

fn z_scores(o: &Output) -> Vec<f64> {
    let mut r = csv::Reader::from_reader(o.stdout.as_slice());
    r.records().filter_map(|rec| rec.unwrap()[5].parse().ok()).collect()
}

#[test]
fn compare_reports_diffs_and_z_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&cfg, &a, &[]).status.success());
    assert!(run(&cfg, &b, &["--seed", "2"]).status.success());
    let (fa, fb) = (a.join("estimates.csv"), b.join("estimates.csv"));

    let same = compare(&fa, &fa);
    assert!(same.status.success());
    let mut r = csv::Reader::from_reader(same.stdout.as_slice());
    let diffs: Vec<f64> = r.records().map(|rec| rec.unwrap()[4].parse().unwrap()).collect();
    assert!(!diffs.is_empty() && diffs.iter().all(|d| *d == 0.0));

    let other = compare(&fa, &fb);
    assert!(other.status.success(), "{}", stderr(&other));
    let z = z_scores(&other);
    assert_eq!(z.len(), 8);
    assert!(z.iter().filter(|z| z.abs() < 3.0).count() >= 7, "{z:?}");
}

#[test]
fn compare_rejects_different_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let small = SMALL.replace("replications = 20000", "replications = 100");
    let c1 = write(dir.path(), "n20.toml", &small);
    let c2 = write(dir.path(), "n30.toml", &small.replace("n = 20", "n = 30"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&c1, &a, &[]).status.success());
    assert!(run(&c2, &b, &[]).status.success());
    let o = compare(&a.join("estimates.csv"), &b.join("estimates.csv"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("shape mismatch") && stderr(&o).contains("column `n`"), "{}", stderr(&o));
}
