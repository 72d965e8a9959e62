use std::fs;
use std::path::Path;
use std::process::Command;

fn ridgelab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ridgelab"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn identity_config(dir: &Path, out: &str) -> std::path::PathBuf {
    let body = format!(
        r#"{{"experiment":"burnin_cost","link":{{"kind":"identity"}},"d_list":[256],"T":1000000000000,
            "sigma":0.0,"trials":1,"seed":7,"algorithm":{{"kind":"two_stage"}},"output_dir":{:?}}}"#,
        dir.join(out)
    );
    write_config(dir, &format!("{out}.json"), &body)
}

/// records.csv with the wall-time column removed.
fn records_without_wall_time(dir: &Path) -> Vec<String> {
    let text = fs::read_to_string(dir.join("records.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let skip = header.iter().position(|h| *h == "wall_time_ms").unwrap();
    text.lines()
        .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != skip).map(|(_, c)| c).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn validate_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "a.json", r#"{"experiment":"burnin_cost","link":{"kind":"cubic"},"d_list":[64],"T":10,"bogus":1}"#);
    let small_d = write_config(dir.path(), "b.json", r#"{"experiment":"burnin_cost","link":{"kind":"cubic"},"d_list":[8],"T":10}"#);
    for path in [unknown, small_d, dir.path().join("missing.json")] {
        let out = ridgelab().arg("validate").arg(&path).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{}", path.display());
    }
    let good = write_config(dir.path(), "c.json", r#"{"experiment":"burnin_cost","link":{"kind":"cubic"},"d_list":[64],"T":10}"#);
    assert!(ridgelab().arg("validate").arg(&good).status().unwrap().success());
}

#[test]
fn noiseless_identity_run_succeeds_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let mut tables = Vec::new();
    for out in ["first", "second"] {
        let cfg = identity_config(dir.path(), out);
        let status = ridgelab().arg("run").arg(&cfg).status().unwrap();
        assert!(status.success());
        let run_dir = dir.path().join(out);
        assert!(run_dir.join("summary.json").exists());
        tables.push(records_without_wall_time(&run_dir));
    }
    assert_eq!(tables[0], tables[1]);
    let header: Vec<&str> = tables[0][0].split(',').collect();
    let row: Vec<&str> = tables[0][1].split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("success"), "true");
    assert!(col("final_inner_product").parse::<f64>().unwrap() >= 0.5);
}

#[test]
fn theory_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curves.csv");
    let status = ridgelab()
        .args(["theory", "--link", "abs_power:2", "--d", "64", "--t-max", "1000000000", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("t,x,kind,d,link,c,delta"));
    assert!(text.lines().count() > 10);
    assert!(text.contains(",lower_bound_recursion,64,"));
    assert!(text.contains(",upper_bound_ode,64,"));

    let bad = ridgelab().args(["theory", "--link", "nope", "--d", "64", "--out"]).arg(&out).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
