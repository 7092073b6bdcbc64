use std::process::{Command, Output};

fn graffiti(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graffiti")).args(args).output().expect("binary runs")
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(graffiti(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(graffiti(&["sim", "frobnicate"]).status.code(), Some(2));
    assert_eq!(graffiti(&["sim", "run", "--days", "many"]).status.code(), Some(2));
}

#[test]
fn help_at_every_level_succeeds() {
    let paths: &[&[&str]] = &[
        &[],
        &["manifest"],
        &["manifest", "create"],
        &["tracker"],
        &["tracker", "serve"],
        &["client"],
        &["client", "run"],
        &["sitehost"],
        &["sitehost", "serve"],
        &["sim"],
        &["sim", "run"],
        &["sim", "calibrate"],
        &["sim", "probe"],
    ];
    for path in paths {
        let mut args = path.to_vec();
        args.push("--help");
        let out = graffiti(&args);
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{args:?}");
    }
}

#[test]
fn domain_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.bin");
    assert_eq!(graffiti(&["manifest", "create", missing.to_str().unwrap()]).status.code(), Some(1));
    let empty = dir.path().join("empty.bin");
    std::fs::write(&empty, b"").unwrap();
    assert_eq!(graffiti(&["manifest", "create", empty.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn bad_config_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, "[1, 2]").unwrap();
    assert_eq!(graffiti(&["--config", cfg.to_str().unwrap(), "sim", "run"]).status.code(), Some(2));
}

#[test]
fn manifest_covers_three_pieces() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("data.bin");
    std::fs::write(&file, vec![3u8; 3 * 524_288 - 10]).unwrap();
    let out = graffiti(&["--quiet", "manifest", "create", file.to_str().unwrap()]);
    assert!(out.status.success());
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["piece_checksums"].as_array().unwrap().len(), 3);
    assert_eq!(m["files"][0]["path"], "data.bin");
    assert_eq!(m["files"][0]["length"], 3 * 524_288 - 10);
}

#[test]
fn config_values_reach_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"days": 3, "quiet": true}"#).unwrap();
    let csv = dir.path().join("s.csv");
    let out = graffiti(&["--config", cfg.to_str().unwrap(), "sim", "run", "--csv", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
}
