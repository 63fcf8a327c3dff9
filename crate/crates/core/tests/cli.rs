mod common;

use std::fs;
use std::path::Path;

use common::md5_oracle::md5_hex;
use common::{run_cli, smrt_workspace, stderr, stdout, TestRegistry, TOKEN};

fn field<'a>(show: &'a str, key: &str) -> Vec<&'a str> {
    show.lines()
        .find(|l| l.starts_with(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no {key} in {show}"))
        .split('\t')
        .collect()
}

fn flags<'a>(lib: &'a Path, reg: &'a str) -> Vec<String> {
    vec![
        "--library".into(),
        lib.display().to_string(),
        "--registry".into(),
        reg.into(),
        "--token".into(),
        TOKEN.into(),
    ]
}

fn args<'a>(flags: &'a [String], rest: &[&'a str]) -> Vec<&'a str> {
    flags.iter().map(String::as_str).chain(rest.iter().copied()).collect()
}

#[test]
fn usage_errors_exit_2() {
    let cfg = tempfile::tempdir().unwrap();
    assert_eq!(run_cli(cfg.path(), &[], &[]).status.code(), Some(2));
    assert_eq!(run_cli(cfg.path(), &["frobnicate"], &[]).status.code(), Some(2));
    assert_eq!(run_cli(cfg.path(), &["install", "not/a/ref/at/all"], &[]).status.code(), Some(2));
    assert_eq!(run_cli(cfg.path(), &["configure"], &[]).status.code(), Some(2));
    let help = run_cli(cfg.path(), &["--help"], &[]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("install"));
}

#[test]
fn missing_token_exits_3_with_hint() {
    let cfg = tempfile::tempdir().unwrap();
    let lib = tempfile::tempdir().unwrap();
    let out = run_cli(
        cfg.path(),
        &["--library", lib.path().to_str().unwrap(), "--registry", "http://127.0.0.1:9", "install", "hgnc"],
        &[],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("bricks configure"));
    assert!(stdout(&out).is_empty());
}

#[test]
fn rejected_token_exits_3_without_echoing_it() {
    let reg = TestRegistry::start();
    let cfg = tempfile::tempdir().unwrap();
    let lib = tempfile::tempdir().unwrap();
    let secret = "wrong-secret-31337";
    let out = run_cli(
        cfg.path(),
        &["-vv", "--library", lib.path().to_str().unwrap(), "--registry", &reg.url(), "install", "org/x"],
        &[("BRICKS_TOKEN", secret)],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(!stderr(&out).contains(secret));
    assert!(!stdout(&out).contains(secret));
}

#[test]
fn configure_precedence_and_show() {
    let cfg = tempfile::tempdir().unwrap();
    let out = run_cli(
        cfg.path(),
        &["configure", "--library", "/data/lib", "--registry", "http://file.example", "--token", "file-token"],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let path = cfg.path().join("config");
    assert!(path.is_file());
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        assert_eq!(fs::metadata(&path).unwrap().permissions().mode() & 0o777, 0o600);
    }

    let shown = stdout(&run_cli(cfg.path(), &["configure", "--show"], &[]));
    assert_eq!(field(&shown, "library")[1..], ["/data/lib", "file"]);
    assert_eq!(field(&shown, "token")[1..], ["****", "file"]);
    assert!(!shown.contains("file-token"));

    let shown = stdout(&run_cli(
        cfg.path(),
        &["configure", "--show"],
        &[("BRICKS_REGISTRY", "http://env.example"), ("BRICKS_TOKEN", "env-token")],
    ));
    assert_eq!(field(&shown, "registry")[1..], ["http://env.example", "env"]);
    assert_eq!(field(&shown, "token")[2], "env");

    let shown = stdout(&run_cli(
        cfg.path(),
        &["--registry", "http://flag.example", "configure", "--show"],
        &[("BRICKS_REGISTRY", "http://env.example")],
    ));
    assert_eq!(field(&shown, "registry")[1..], ["http://flag.example", "flag"]);
    assert_eq!(field(&shown, "parallel_fetch")[1..], ["4", "default"]);
}

#[test]
fn configure_check_pings_registry() {
    let reg = TestRegistry::start();
    let cfg = tempfile::tempdir().unwrap();
    let ok = run_cli(cfg.path(), &["--registry", &reg.url(), "--token", TOKEN, "configure", "--check"], &[]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let bad = run_cli(cfg.path(), &["--registry", &reg.url(), "--token", "nope", "configure", "--check"], &[]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn repro_push_install_assets_round_trip() {
    let reg = TestRegistry::start();
    let cfg = tempfile::tempdir().unwrap();
    let publisher_lib = tempfile::tempdir().unwrap();
    let consumer_lib = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    smrt_workspace(work.path());
    let wd = work.path().to_str().unwrap();
    let pub_flags = flags(publisher_lib.path(), &reg.url());
    let con_flags = flags(consumer_lib.path(), &reg.url());

    let out = run_cli(cfg.path(), &args(&pub_flags, &["repro", "-C", wd]), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out), "ran\tstatus\nran\tdownload\nran\tprocess\n");

    let dry = run_cli(cfg.path(), &args(&pub_flags, &["repro", "-C", wd, "--dry-run", "--json"]), &[]);
    let plan: serde_json::Value = serde_json::from_slice(&dry.stdout).unwrap();
    assert_eq!(plan[0]["state"], "stale");
    assert_eq!(plan[1]["state"], "blocked");
    assert_eq!(plan[2]["state"], "blocked");

    let out = run_cli(cfg.path(), &args(&pub_flags, &["push", "smrt-lab/smrt", "-C", wd]), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("pushed smrt-lab/smrt@"));

    let out = run_cli(cfg.path(), &args(&con_flags, &["install", "smrt-lab/smrt"]), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 1);
    assert!(stdout(&out).starts_with("installed smrt-lab/smrt@"));

    let out = run_cli(cfg.path(), &args(&con_flags, &["assets", "smrt-lab/smrt", "--json"]), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let assets: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let path = assets["smrt_parquet"]["path"].as_str().unwrap();
    assert_eq!(assets["smrt_parquet"]["format"], "parquet");
    assert_eq!(
        md5_hex(&fs::read(path).unwrap()),
        md5_hex(&fs::read(work.path().join("brick/smrt.parquet")).unwrap())
    );

    let out = run_cli(cfg.path(), &args(&con_flags, &["cache", "verify"]), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));

    let out = run_cli(cfg.path(), &args(&con_flags, &["install", "smrt-lab/smrt"]), &[]);
    assert!(stdout(&out).starts_with("already installed"));
}

#[test]
fn failing_stage_exits_1() {
    let cfg = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    fs::write(
        work.path().join("brick.yaml"),
        "stages:\n  bad:\n    cmd: echo nope >&2; exit 4\n    outs:\n      - x\n",
    )
    .unwrap();
    let out = run_cli(cfg.path(), &["repro", "-C", work.path().to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("failed\tbad"));
    assert!(stderr(&out).contains("nope"));
}

#[test]
fn init_add_pull_via_cli() {
    let reg = TestRegistry::start();
    common::publish(&reg, "org", "a", &["brick/a.csv"], &[("brick/a.csv", b"a")], None);
    common::publish(&reg, "org", "b", &["brick/b.csv"], &[("brick/b.csv", b"b")], None);
    let cfg = tempfile::tempdir().unwrap();
    let lib = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    let wd = work.path().to_str().unwrap();
    let f = flags(lib.path(), &reg.url());

    let pull = run_cli(cfg.path(), &args(&f, &["pull", "-C", wd]), &[]);
    assert_eq!(pull.status.code(), Some(1));
    assert!(stderr(&pull).contains("bricks init"));

    assert_eq!(run_cli(cfg.path(), &args(&f, &["init", "-C", wd]), &[]).status.code(), Some(0));
    for b in ["org/a", "org/b"] {
        let out = run_cli(cfg.path(), &args(&f, &["add", b, "-C", wd]), &[]);
        assert!(stdout(&out).starts_with("added "), "{}", stderr(&out));
    }
    let out = run_cli(cfg.path(), &args(&f, &["pull", "-C", wd]), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("installed")).count(), 2);
    let out = run_cli(cfg.path(), &args(&f, &["pull", "-C", wd]), &[]);
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("already installed")).count(), 2);
}
