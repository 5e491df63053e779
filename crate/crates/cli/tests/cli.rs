use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gla"))
        .args(args)
        .env("GLA_THREADS", "2")
        .output()
        .expect("spawn gla")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = gla(&[
            "gen",
            "--len",
            "4",
            "--dk",
            "2",
            "--dv",
            "3",
            "--seed",
            "7",
            "--out",
            p(d),
        ]);
        assert!(o.status.success());
    }
    for name in [
        "Q.glat",
        "K.glat",
        "V.glat",
        "log_alpha.glat",
        "log_beta.glat",
        "config.txt",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let q = fs::read(a.join("Q.glat")).unwrap();
    assert_eq!(q.len() - 24, 64);
}

#[test]
fn vanilla_gates_are_zero_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let o = gla(&["gen", "--kind", "vanilla", "--len", "5", "--out", p(dir.path())]);
    assert!(o.status.success());
    let bytes = fs::read(dir.path().join("log_alpha.glat")).unwrap();
    assert!(bytes[24..].iter().all(|&b| b == 0));
}

#[test]
fn forms_agree_and_states_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let inp = dir.path().join("in");
    assert!(
        gla(&["gen", "--len", "8", "--dk", "3", "--dv", "2", "--out", p(&inp)])
            .status
            .success()
    );
    let mut outs = Vec::new();
    for form in ["recurrent", "parallel", "chunkwise"] {
        let out = dir.path().join(form);
        let o = gla(&[
            "run",
            "--input",
            p(&inp),
            "--out",
            p(&out),
            "--form",
            form,
            "--chunk",
            "2",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("flops = "));
        outs.push(out);
    }
    let states: Vec<_> = fs::read_dir(outs[2].join("states")).unwrap().collect();
    assert_eq!(states.len(), 4);
    for other in &outs[1..] {
        let o = gla(&[
            "check",
            "--compare",
            p(&outs[0].join("O.glat")),
            p(&other.join("O.glat")),
        ]);
        assert!(o.status.success(), "{}", stdout(&o));
    }
}

#[test]
fn recompute_run_writes_no_states() {
    let dir = tempfile::tempdir().unwrap();
    let inp = dir.path().join("in");
    assert!(gla(&["gen", "--len", "8", "--out", p(&inp)]).status.success());
    let out = dir.path().join("out");
    let o = gla(&[
        "run",
        "--input",
        p(&inp),
        "--out",
        p(&out),
        "--chunk",
        "2",
        "--policy",
        "recompute",
    ]);
    assert!(o.status.success());
    assert!(!out.join("states").exists());
}

#[test]
fn corrupt_magic_exits_2_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let inp = dir.path().join("in");
    assert!(gla(&["gen", "--len", "4", "--out", p(&inp)]).status.success());
    let v = inp.join("V.glat");
    let mut bytes = fs::read(&v).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    fs::write(&v, bytes).unwrap();
    let o = gla(&["run", "--input", p(&inp), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("V.glat"));
}

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = gla(&[
        "run",
        "--input",
        p(&dir.path().join("none")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn default_check_passes_and_zero_tolerance_fails() {
    let o = gla(&["check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.ends_with("PASS")).count() > 5);
    assert!(text.contains("summary: "));
    let o = gla(&["check", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn gradcheck_passes_and_flipped_sign_fails_on_dlog_alpha() {
    let args = [
        "gradcheck",
        "--len",
        "6",
        "--dk",
        "3",
        "--dv",
        "3",
        "--chunk",
        "4",
    ];
    let o = gla(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let mut flipped = args.to_vec();
    flipped.push("--flip-dlogb-sign");
    let o = gla(&flipped);
    assert_eq!(o.status.code(), Some(1));
    let failing: Vec<_> = stdout(&o)
        .lines()
        .filter(|l| l.ends_with("FAIL"))
        .map(String::from)
        .collect();
    assert!(!failing.is_empty());
    assert!(failing.iter().all(|l| l.contains("/dlog_alpha ")), "{failing:?}");
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "kind = retnet:0.9\nL = 12\nchunk = 5\n").unwrap();
    let o = gla(&["check", "--config", p(&cfg), "--dk", "2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("C=5"));
    fs::write(&cfg, "L = zero\n").unwrap();
    let o = gla(&["check", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run.cfg"));
}

#[test]
fn bench_prints_one_row_per_configuration() {
    let o = gla(&[
        "bench",
        "--len",
        "32",
        "--dk",
        "4",
        "--dv",
        "4",
        "--chunk",
        "8",
        "--repeats",
        "5",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[5], cols[6], "measured flops equal predicted: {row}");
    }
    assert_eq!(gla(&["bench", "--repeats", "2"]).status.code(), Some(2));
}

#[test]
fn bench_skips_parallel_when_guard_trips() {
    let o = gla(&[
        "bench",
        "--len",
        "1200",
        "--dk",
        "1",
        "--dv",
        "1",
        "--gate-floor",
        "0.1",
        "--chunk",
        "64",
        "--repeats",
        "3",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o)
        .lines()
        .any(|l| l.starts_with("parallel") && l.contains("SKIP")));
}

#[test]
fn cost_lists_both_policies() {
    let o = gla(&["cost", "--len", "16", "--chunk", "4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("materialize backward") && text.contains("recompute backward"));
    assert!(text.contains("recompute_passes = 4"));
}

#[test]
fn bad_thread_env_exits_2() {
    let o = Command::new(env!("CARGO_BIN_EXE_gla"))
        .args(["cost"])
        .env("GLA_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
