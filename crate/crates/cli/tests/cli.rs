use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn baseline() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/baseline_honest.json")
}

fn trustchain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trustchain"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const OUTPUTS: [&str; 6] = [
    "metrics.csv",
    "host_classes.csv",
    "nodes.csv",
    "events.jsonl",
    "chain.jsonl",
    "config.effective.json",
];

#[test]
fn run_then_verify_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = trustchain(&["run", "--config", s(&baseline()), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("wall time:"));
    assert!(stdout(&o).contains("recall by host class"));
    for f in OUTPUTS {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 101);

    let o = trustchain(&[
        "verify",
        "--chain",
        s(&out.join("chain.jsonl")),
        "--config",
        s(&baseline()),
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("ok:"));

    let o = trustchain(&["report", "--dir", s(&out)]);
    assert!(o.status.success());
    for section in [
        "final detection",
        "recall by host class",
        "leader election",
        "forks",
    ] {
        assert!(stdout(&o).contains(section));
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(trustchain(&[
            "run",
            "--config",
            s(&baseline()),
            "--seed",
            "5",
            "--out",
            s(out)
        ])
        .status
        .success());
    }
    for f in OUTPUTS {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn seed_override_is_recorded_and_needed_to_verify() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(trustchain(&[
        "run",
        "--config",
        s(&baseline()),
        "--seed",
        "99",
        "--out",
        s(&out)
    ])
    .status
    .success());
    let effective: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.effective.json")).unwrap())
            .unwrap();
    assert_eq!(effective["rng_seed"], 99);

    let chain = out.join("chain.jsonl");
    let o = trustchain(&[
        "verify",
        "--chain",
        s(&chain),
        "--config",
        s(&out.join("config.effective.json")),
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    // Keys derive from the seed, so the original config rejects the chain.
    let o = trustchain(&["verify", "--chain", s(&chain), "--config", s(&baseline())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAILED at block 1"), "{}", stdout(&o));
}

#[test]
fn tampered_chain_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(
        trustchain(&["run", "--config", s(&baseline()), "--out", s(&out)])
            .status
            .success()
    );
    let text = fs::read_to_string(out.join("chain.jsonl")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let line = &mut lines[2];
    let pos = line.find("\"bytes\":\"").unwrap() + 200;
    let digit = if &line[pos..=pos] == "f" { "e" } else { "f" };
    line.replace_range(pos..=pos, digit);
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let o = trustchain(&["verify", "--chain", s(&bad), "--config", s(&baseline())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAILED at block 2"), "{}", stdout(&o));
}

#[test]
fn config_errors_exit_1_and_list_fields() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(baseline()).unwrap()).unwrap();
    cfg["network"]["drop_prob"] = 1.5.into();
    cfg["hosts"][0]["p_mal"] = (-0.1).into();
    let path = dir.path().join("bad.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let o = trustchain(&[
        "run",
        "--config",
        s(&path),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("drop_prob") && err.contains("p_mal"), "{err}");
    assert!(!dir.path().join("o").exists());

    cfg["network"]["drop_prob"] = 0.1.into();
    cfg["hosts"][0]["p_mal"] = 0.0.into();
    cfg["surprise"] = true.into();
    fs::write(&path, cfg.to_string()).unwrap();
    let o = trustchain(&[
        "run",
        "--config",
        s(&path),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("surprise"), "{}", stderr(&o));
}

#[test]
fn io_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = trustchain(&["run", "--config", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));

    let o = trustchain(&["verify", "--chain", s(&missing), "--config", s(&baseline())]);
    assert_eq!(o.status.code(), Some(2));

    let o = trustchain(&["report", "--dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    for f in ["metrics.csv", "host_classes.csv", "nodes.csv"] {
        assert!(stderr(&o).contains(f), "{}", stderr(&o));
    }

    // Output path blocked by a regular file.
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = trustchain(&[
        "run",
        "--config",
        s(&baseline()),
        "--out",
        s(&blocker.join("sub")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn parallel_seeds_match_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    let par = dir.path().join("par");
    let o = trustchain(&[
        "run",
        "--config",
        s(&baseline()),
        "--seed",
        "10",
        "--parallel",
        "2",
        "--out",
        s(&par),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for seed in [10, 11] {
        let single = dir.path().join(format!("single-{seed}"));
        let seed_arg = seed.to_string();
        assert!(trustchain(&[
            "run",
            "--config",
            s(&baseline()),
            "--seed",
            &seed_arg,
            "--out",
            s(&single)
        ])
        .status
        .success());
        for f in OUTPUTS {
            let p = par.join(format!("seed-{seed}")).join(f);
            assert_eq!(
                fs::read(&p).unwrap(),
                fs::read(single.join(f)).unwrap(),
                "{}",
                p.display()
            );
        }
    }
    assert_eq!(
        trustchain(&["run", "--config", s(&baseline()), "--parallel", "0"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(trustchain(&["--help"]).status.code(), Some(0));
}
