use std::path::Path;

use wuglab::corpusgen::CorpusCondition;
use wuglab::lm::SizeTag;
use wuglab::pipeline::{
    emit_reports, run_stages, MatrixConfig, Overrides, Registry, RunSpec, Stage, StageRecord,
    Verdict, MANIFEST_FILE,
};

const SMOKE: Overrides = Overrides {
    steps: Some(2),
    probe_shuffles: Some(4),
};

fn fast_stages() -> Vec<Stage> {
    vec![
        Stage::Gen,
        Stage::Bpe,
        Stage::Train,
        Stage::Battery,
        Stage::Hbm,
    ]
}

fn run(root: &Path, spec: &RunSpec, stages: &[Stage]) -> wuglab::pipeline::RunOutcome {
    let o = run_stages(root, spec, stages, &SMOKE);
    assert!(o.error.is_none(), "{:?}", o.error);
    o
}

#[test]
fn rerun_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let spec = RunSpec::new(CorpusCondition::Regular, SizeTag::Tiny, 42);
    let first = run(dir.path(), &spec, &fast_stages());
    assert_eq!(first.executed, fast_stages());
    let digests: Vec<String> = fast_stages()
        .iter()
        .map(|s| {
            StageRecord::load(&spec.stage_dir(dir.path(), *s))
                .unwrap()
                .output_digest()
        })
        .collect();
    let second = run(dir.path(), &spec, &fast_stages());
    assert!(second.executed.is_empty());
    assert_eq!(second.skipped, fast_stages());
    let again: Vec<String> = fast_stages()
        .iter()
        .map(|s| {
            StageRecord::load(&spec.stage_dir(dir.path(), *s))
                .unwrap()
                .output_digest()
        })
        .collect();
    assert_eq!(digests, again);
}

#[test]
fn deleting_a_stage_reruns_it_and_its_dependents() {
    let dir = tempfile::tempdir().unwrap();
    let spec = RunSpec::new(CorpusCondition::Scrambled, SizeTag::Tiny, 42);
    run(dir.path(), &spec, &fast_stages());
    std::fs::remove_dir_all(spec.stage_dir(dir.path(), Stage::Bpe)).unwrap();
    let o = run(dir.path(), &spec, &fast_stages());
    assert_eq!(o.executed, vec![Stage::Bpe, Stage::Train]);
    assert_eq!(o.skipped, vec![Stage::Gen, Stage::Battery, Stage::Hbm]);

    // A tampered output file invalidates the record too.
    let corpus_dir = spec.stage_dir(dir.path(), Stage::Gen);
    let rec = StageRecord::load(&corpus_dir).unwrap();
    let file = rec.outputs.keys().next().unwrap().clone();
    std::fs::write(corpus_dir.join(&file), b"tampered").unwrap();
    let o = run(dir.path(), &spec, &fast_stages());
    assert_eq!(o.executed, fast_stages());
}

#[test]
fn stages_pull_in_their_dependencies() {
    let dir = tempfile::tempdir().unwrap();
    let spec = RunSpec::new(CorpusCondition::Regular, SizeTag::Tiny, 123);
    let o = run(dir.path(), &spec, &[Stage::Hbm]);
    assert_eq!(o.executed, vec![Stage::Gen, Stage::Hbm]);
}

#[test]
fn steps_override_changes_the_train_hash() {
    let dir = tempfile::tempdir().unwrap();
    let spec = RunSpec::new(CorpusCondition::Regular, SizeTag::Tiny, 42);
    run(dir.path(), &spec, &[Stage::Train]);
    let o = run_stages(
        dir.path(),
        &spec,
        &[Stage::Train],
        &Overrides {
            steps: Some(3),
            ..SMOKE
        },
    );
    assert!(o.error.is_none());
    assert_eq!(o.executed, vec![Stage::Train]);
}

#[test]
fn smoke_run_produces_a_complete_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = MatrixConfig {
        conditions: vec![CorpusCondition::Regular],
        seeds: vec![42],
        steps_override: SMOKE.steps,
        probe_shuffles: SMOKE.probe_shuffles,
        root: Some(dir.path().to_path_buf()),
        ..MatrixConfig::acceptance()
    };
    // Only relevant if the environment does not redirect the data root.
    if std::env::var_os(wuglab::pipeline::DATA_DIR_ENV).is_some() {
        return;
    }
    let outcomes = wuglab::pipeline::run_matrix(&cfg, 1).unwrap();
    assert_eq!(outcomes.len(), 1);
    assert!(outcomes[0].error.is_none(), "{:?}", outcomes[0].error);
    let reg = Registry::scan(dir.path()).unwrap();
    assert_eq!(reg.records.len(), 8);

    let bundle = emit_reports(dir.path()).unwrap();
    for f in [
        "table3.csv",
        "f1_so_accuracy.csv",
        "f2_fo_so.csv",
        "f3_dissociation.csv",
        "f4_feature_swap.csv",
        "f5_hbm_alpha.csv",
        "f6_probe_by_layer.csv",
        "f7_cosine_by_layer.csv",
        "kl.csv",
        "hypotheses.json",
    ] {
        assert!(bundle.manifest.files.contains_key(f), "{f}");
        assert!(bundle.dir.join(f).exists());
    }
    assert!(bundle.dir.join(MANIFEST_FILE).exists());
    assert!(
        bundle.manifest.errors.is_empty(),
        "{:?}",
        bundle.manifest.errors
    );
    // One condition and one seed cannot support the comparative hypotheses.
    for h in &bundle.hypotheses {
        if ["H1", "H_label", "H_Bayes", "H3", "H4", "H_swap"].contains(&h.id.as_str()) {
            assert_eq!(h.verdict, Verdict::NotEvaluable, "{}", h.id);
        }
    }
    let table = std::fs::read_to_string(bundle.dir.join("table3.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);

    // Reports are byte-deterministic.
    let again = emit_reports(dir.path()).unwrap();
    assert_eq!(bundle.manifest, again.manifest);
}
