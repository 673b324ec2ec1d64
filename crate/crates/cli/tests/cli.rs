use std::path::Path;
use std::process::{Command, Output};

fn lntune(dir: &Path, args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lntune"));
    cmd.arg("--out-dir").arg(dir).args(args).env_remove("LNTUNE_SEED");
    if let Some(v) = seed_env {
        cmd.env("LNTUNE_SEED", v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lntune(dir.path(), &["no-such-command"], None).status.code(), Some(2));
    assert_eq!(lntune(dir.path(), &["mask", "--mode", "task", "x.bin"], None).status.code(), Some(2));
    assert_eq!(lntune(dir.path(), &["count-params", "--strategy", "sideways"], None).status.code(), Some(2));
    assert_eq!(lntune(dir.path(), &["--help"], None).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    let o = lntune(dir.path(), &["heatmap", missing.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn counts_parameters_of_a_preset() {
    let dir = tempfile::tempdir().unwrap();
    let o = lntune(dir.path(), &["count-params", "--preset", "bert-large-cased", "--strategy", "layernorm"], None);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "51202");
    assert!(dir.path().join("count-params.manifest.json").exists());
}

#[test]
fn kwtest_writes_statistic_and_p_value() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    std::fs::write(&a, "1\n2\n").unwrap();
    std::fs::write(&b, "3,4\n").unwrap();
    let o = lntune(dir.path(), &["kwtest", a.to_str().unwrap(), b.to_str().unwrap()], None);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("H = 2.40000"));
    let csv = std::fs::read_to_string(dir.path().join("kwtest.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("h,df,p"));
}

#[test]
fn environment_seed_overrides_the_default_but_not_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, extra: &[&str], env: Option<&str>| {
        let out = dir.path().join(sub);
        let mut args = vec!["count-params", "--preset", "toy", "--strategy", "random"];
        args.extend_from_slice(extra);
        let o = lntune(&out, &args, env);
        assert!(o.status.success());
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("count-params.manifest.json")).unwrap()).unwrap();
        let seeds: Vec<u64> = m["seeds"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).collect();
        assert!(!seeds.is_empty());
        seeds
    };
    assert!(run("default", &[], None).iter().all(|&s| s == 0));
    assert!(run("env", &[], Some("41")).iter().all(|&s| s == 41));
    assert!(run("flag", &["--seed", "5"], Some("41")).iter().all(|&s| s == 5));
}

#[test]
fn malformed_environment_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = lntune(dir.path(), &["count-params"], Some("seven"));
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn replay_detects_changed_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = lntune(dir.path(), &["init", "--preset", "toy", "--head", "regression", "--seed", "2"], None);
    assert!(o.status.success());
    let manifest = dir.path().join("init.manifest.json");
    let r = lntune(dir.path(), &["replay", manifest.to_str().unwrap()], None);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    // a manifest whose recorded output hash is wrong must fail on replay
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    for out in m["outputs"].as_array_mut().unwrap() {
        if out["path"] == "model.ckpt" {
            out["sha256"] = serde_json::Value::String("0".repeat(64));
        }
    }
    let tampered = dir.path().join("tampered.json");
    std::fs::write(&tampered, serde_json::to_string(&m).unwrap()).unwrap();
    let r = lntune(dir.path(), &["replay", tampered.to_str().unwrap()], None);
    assert_eq!(r.status.code(), Some(1));
}
