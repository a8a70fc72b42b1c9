use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rscl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rscl")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn gen(dir: &Path, name: &str, n: &str, seed: &str) -> String {
    let p = dir.join(name).display().to_string();
    let o = rscl(&["gen-data", "--out", &p, "--n", n, "--seed", seed]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    p
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.jsonl", "5", "7");
    let b = gen(dir.path(), "b.jsonl", "5", "7");
    let c = gen(dir.path(), "c.jsonl", "5", "8");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 5);
}

#[test]
fn missing_required_flag_exits_one() {
    assert_eq!(rscl(&["gen-data"]).status.code(), Some(1));
    assert_eq!(rscl(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(rscl(&["--help"]).status.code(), Some(0));
}

#[test]
fn expert_policy_solves_the_task() {
    let o = rscl(&["eval", "--policy", "expert", "--episodes", "50", "--seed", "3"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("policy,checkpoint,episodes,seed,success_rate"));
    let rate: f64 = lines.next().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(rate >= 0.99, "{rate}");
}

#[test]
fn zero_episodes_is_an_error() {
    let o = rscl(&["eval", "--policy", "random", "--episodes", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let o = rscl(&["eval", "--checkpoint", "/nonexistent/ck.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_analyze_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.jsonl", "6", "0");
    let out = dir.path().join("run").display().to_string();
    let cfg = dir.path().join("c.cfg");
    // Command-line overrides beat the file.
    fs::write(&cfg, "max_steps = 50\nbatch_size = 4\n# comment\n").unwrap();
    let o = rscl(&[
        "train", "--config", cfg.to_str().unwrap(), "--dataset", &data, "--out-dir", &out,
        "--max_steps", "2", "--eval_every", "0", "--log-every", "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = stdout(&o).trim().to_string();
    assert!(ck.ends_with("step_000002.json"), "{ck}");
    let metrics = fs::read_to_string(Path::new(&out).join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let o = rscl(&["analyze", "--checkpoint", &ck, "--dataset", &data, "--k", "3", "--window", "2", "--per-task", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = stdout(&o);
    assert_eq!(rows.lines().next(), Some("checkpoint,metric,k,value"));
    let self_row = rows.lines().find(|l| l.contains(",cknna_self,")).unwrap();
    let v: f64 = self_row.rsplit(',').next().unwrap().parse().unwrap();
    assert!((v - 1.0).abs() < 1e-9);

    let o = rscl(&["analyze", "--checkpoint", &ck, "--dataset", &data, "--k", "10000"]);
    assert_eq!(o.status.code(), Some(1));

    let o = rscl(&["eval", "--checkpoint", &ck, "--episodes", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = rscl(&["train", "--resume", &ck, "--max_steps", "3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn zero_step_training_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.jsonl", "3", "1");
    let out = dir.path().join("run").display().to_string();
    let o = rscl(&["train", "--dataset", &data, "--out_dir", &out, "--max_steps", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).trim().ends_with("step_000000.json"));
}

#[test]
fn bad_override_names_the_key() {
    let o = rscl(&["train", "--no_such_key", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}

#[test]
fn gradcheck_passes_and_is_deterministic() {
    let a = rscl(&["gradcheck", "--seed", "0", "--batch", "4", "--coords", "8"]);
    assert!(a.status.success(), "{}", stdout(&a));
    let b = rscl(&["gradcheck", "--seed", "0", "--batch", "4", "--coords", "8"]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout(&a).lines().count(), 4);
}
