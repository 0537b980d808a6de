use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_segregate"))
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> PathBuf {
    repo().join("configs").join(name)
}

fn run_smoke(out: &Path, extra: &[&str]) -> Output {
    bin().args(["--threads", "2", "--output"]).arg(out).args(extra).arg("run").arg(config("smoke.toml")).output().unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

/// Relative path and bytes of every file below `dir`.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

#[test]
fn sample_configs_validate() {
    for name in ["smoke.toml", "annulus.toml", "strip.toml", "disk_obstacle.toml"] {
        let o = bin().arg("validate").arg(config(name)).output().unwrap();
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn malformed_config_names_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("smoke.toml")).unwrap().replace("f_outer = 1.0", "f_outer = 1.0\nf_middle = 0.5");
    let line = text.lines().position(|l| l.starts_with("f_middle")).unwrap() + 1;
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let o = bin().arg("validate").arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(&format!("bad.toml:{line}:")), "{err}");
    assert!(err.contains("f_middle"), "{err}");
}

#[test]
fn smoke_run_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run_smoke(&a, &[]);
    assert!(o.status.success(), "{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    for stage in ["stage_00", "stage_01", "stage_02"] {
        for f in ["u0.bin", "u0.json", "u1.bin", "u1.json", "interfaces_0.csv", "interfaces_1.csv", "metrics.json", "stage.json"] {
            assert!(a.join(stage).join(f).is_file(), "{stage}/{f}");
        }
    }
    let r = report(&a);
    assert_eq!(r["pass"], true);
    assert_eq!(r["stages"].as_array().unwrap().len(), 3);
    for c in r["checks"].as_array().unwrap() {
        for key in ["measured", "target", "tol", "pass", "basis"] {
            assert!(c.get(key).is_some(), "{c}");
        }
    }
    let bytes = std::fs::metadata(a.join("stage_00/u0.bin")).unwrap().len();
    let header: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("stage_00/u0.json")).unwrap()).unwrap();
    assert_eq!(bytes, 8 * header["nx"].as_u64().unwrap() * header["ny"].as_u64().unwrap());
    assert_eq!(header["epsilon"], 0.4);

    assert!(run_smoke(&b, &[]).status.success());
    assert!(tree(&a) == tree(&b), "rerun differs");
}

#[test]
fn interrupted_run_resumes_to_the_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let (full, cut) = (dir.path().join("full"), dir.path().join("cut"));
    assert!(run_smoke(&full, &[]).status.success());
    assert!(run_smoke(&cut, &[]).status.success());
    // as if stopped while solving the last stage
    std::fs::remove_file(cut.join("stage_02/stage.json")).unwrap();
    std::fs::remove_file(cut.join("stage_02/u1.bin")).unwrap();
    std::fs::remove_file(cut.join("report.json")).unwrap();
    let o = run_smoke(&cut, &[]);
    assert!(o.status.success());
    assert!(tree(&full) == tree(&cut), "resumed run differs");
}

#[test]
fn analyze_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let (run, again) = (dir.path().join("run"), dir.path().join("again"));
    assert!(run_smoke(&run, &[]).status.success());
    let o = bin().arg("--output").arg(&again).arg("analyze").arg(&run).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(run.join("report.json")).unwrap(), std::fs::read(again.join("report.json")).unwrap());
    let missing = bin().arg("analyze").arg(dir.path().join("nowhere")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn power_two_downgrades_the_fb_check() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("smoke.toml"))
        .unwrap()
        .replace("fb_condition = false", "fb_condition = true")
        .replace("[solver]", "[interaction]\nform = \"integral\"\np = 2.0\nkernel = { kind = \"constant\" }\n\n[solver]");
    let path = dir.path().join("p2.toml");
    std::fs::write(&path, text).unwrap();
    let out = dir.path().join("out");
    let o = bin().arg("--output").arg(&out).arg("run").arg(&path).output().unwrap();
    assert_ne!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert!(r["warnings"].as_array().unwrap().iter().any(|w| w == "analysis assumes p=1"), "{r}");
    let fb: Vec<&serde_json::Value> =
        r["checks"].as_array().unwrap().iter().filter(|c| c["name"].as_str().unwrap().starts_with("fb_")).collect();
    assert!(!fb.is_empty());
    assert!(fb.iter().all(|c| c["informational"] == true));
}

#[test]
fn strict_mode_gates_informational_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run_smoke(&out, &["--strict"]);
    let r = report(&out);
    assert_eq!(r["strict"], true);
    assert!(r["checks"].as_array().unwrap().iter().any(|c| c["informational"] == true));
    let all_pass = r["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true);
    assert_eq!(o.status.success(), all_pass);
}

#[test]
fn radial_oracle_reports_the_limit_radius() {
    let o = bin().args(["oracle", "radial", "--a", "1", "--b", "6", "--fa", "1", "--fb", "1"]).output().unwrap();
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["limit"]["radius"].as_f64().unwrap() - 2.0).abs() < 1e-9);
    let o = bin().args(["oracle", "radial", "--a", "1", "--b", "6", "--fa", "2", "--fb", "1"]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["limit"]["radius"].as_f64().unwrap() - 2.67114991).abs() < 1e-6);
    let thin = bin().args(["oracle", "radial", "--a", "1", "--b", "2.5", "--fa", "1", "--fb", "1"]).output().unwrap();
    assert_eq!(thin.status.code(), Some(2));
}

#[test]
fn radial_oracle_solves_an_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("--output")
        .arg(dir.path())
        .args(["oracle", "radial", "--a", "1", "--b", "6", "--fa", "1", "--fb", "1", "--epsilon", "0.1", "--n-r", "500"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let e = &v["epsilon"];
    assert!(e["edge1"].as_f64().unwrap() > e["edge2"].as_f64().unwrap(), "{e}");
    assert!(dir.path().join("radial.csv").is_file());
}

#[test]
fn published_schema_is_current() {
    let o = bin().arg("schema").output().unwrap();
    let file = std::fs::read_to_string(repo().join("schema/experiment.schema.json")).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), file);
}
