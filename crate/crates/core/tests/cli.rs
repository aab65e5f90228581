use std::path::Path;
use std::process::Command;

fn adapterfed(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_adapterfed")).args(args).output().expect("spawn");
    (out.status.code().expect("exit code"), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const QUICK: &str = "num_clients = 6\nparticipants_per_group = 1\n[mode]\nkind = \"fixed_adapter\"\ndepth = 1\nwidth = 8\n[budget]\nmax_rounds = 2\n";

#[test]
fn exit_codes_separate_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let trace_s = trace.to_str().unwrap();

    let reachable = write(dir.path(), "ok.toml", &format!("{QUICK}[targets]\nabsolute = 0.0\n"));
    assert_eq!(adapterfed(&["run", "--config", &reachable, "--out", trace_s]).0, 0);

    let unreachable = write(dir.path(), "no.toml", &format!("{QUICK}[targets]\nabsolute = 1.01\n"));
    assert_eq!(adapterfed(&["run", "--config", &unreachable, "--out", trace_s]).0, 2);
    assert!(trace.exists(), "trace is written even without convergence");

    let bad = write(dir.path(), "bad.toml", "[training]\nlearning_rate = -1.0\n");
    let (code, err) = adapterfed(&["run", "--config", &bad, "--out", trace_s]);
    assert_eq!(code, 3);
    assert!(err.contains("learning_rate"), "{err}");

    let typo = write(dir.path(), "typo.toml", "num_client = 3\n");
    assert_eq!(adapterfed(&["run", "--config", &typo, "--out", trace_s]).0, 3);
}

#[test]
fn report_reads_a_run_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &format!("{QUICK}[targets]\nabsolute = 0.0\n"));
    let trace = dir.path().join("t.jsonl");
    let json = dir.path().join("r.json");
    assert_eq!(adapterfed(&["run", "--config", &cfg, "--seed", "4", "--out", trace.to_str().unwrap()]).0, 0);
    let (code, err) = adapterfed(&["report", "--config", &cfg, "--out", json.to_str().unwrap(), trace.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(json).unwrap();
    assert!(text.contains("\"seed\": 4"), "{text}");
}
