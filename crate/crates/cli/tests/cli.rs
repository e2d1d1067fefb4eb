use std::process::Command;

fn wuglab(args: &[&str], data: &std::path::Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_wuglab"))
        .args(args)
        .env("WUGLAB_DATA_DIR", data)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn gen_writes_a_corpus_and_reports_its_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let o = wuglab(
        &[
            "gen",
            "--condition",
            "regular",
            "--seed",
            "42",
            "--out",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("vocabulary 346"), "{text}");
    assert!(out.read_dir().unwrap().count() > 0);
}

#[test]
fn dry_run_prints_the_acceptance_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let o = wuglab(&["run-all", "--dry-run"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(
        text.contains("feature_swap") && text.contains(dir.path().to_str().unwrap()),
        "{text}"
    );
}

#[test]
fn stage_command_runs_dependencies_and_report_lists_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let o = wuglab(
        &["hbm", "--condition", "scrambled", "--seed", "123"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout)
        .unwrap()
        .contains("ran [Gen, Hbm]"));
    let o = wuglab(&["report"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(
        text.contains("missing: scrambled-tiny-123: no evaluation results"),
        "{text}"
    );
    let o = wuglab(&["analyze"], dir.path());
    assert!(String::from_utf8(o.stdout)
        .unwrap()
        .contains("H_Bayes  not evaluable"));
}

#[test]
fn bad_condition_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = wuglab(
        &["gen", "--condition", "nonsense", "--out", "x"],
        dir.path(),
    );
    assert!(!o.status.success());
}
