use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::registry::{append_ledger, sha256_file, sha256_hex, StageRecord, StageStatus};
use super::{RunSpec, Stage, BPE_FIT_SEED};
use crate::corpusgen::{generate_corpus, Corpus, CorpusSpec};
use crate::error::{fsx, Error, Result};
use crate::lm::{self, ModelConfig, TrainConfig};
use crate::tokenizer::{fit_bpe, BpeModel};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const BPE_FILE: &str = "bpe.json";
const HASH_SCHEMA: u32 = 1;
const GRADCHECK_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_id: String,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub error: Option<String>,
}

/// Requested stages plus their transitive dependencies, in dependency order.
fn closure(stages: &[Stage]) -> Vec<Stage> {
    let mut want: BTreeSet<Stage> = stages.iter().copied().collect();
    loop {
        let extra: Vec<Stage> = want
            .iter()
            .flat_map(|s| s.deps().iter().copied())
            .filter(|d| !want.contains(d))
            .collect();
        if extra.is_empty() {
            break;
        }
        want.extend(extra);
    }
    Stage::ALL
        .into_iter()
        .filter(|s| want.contains(s))
        .collect()
}

/// Cost knobs for smoke runs. Unset fields leave stage hashes untouched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    /// Replaces the per-size training step count.
    pub steps: Option<usize>,
    /// Replaces the number of probe label permutations.
    pub probe_shuffles: Option<usize>,
}

pub(crate) struct RunCtx<'a> {
    pub root: &'a Path,
    pub run: &'a RunSpec,
    pub overrides: &'a Overrides,
}

impl RunCtx<'_> {
    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.run.stage_dir(self.root, stage)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.dir(Stage::Gen))
    }

    pub fn tokenizer(&self) -> Result<BpeModel> {
        BpeModel::load(&self.dir(Stage::Bpe).join(BPE_FILE))
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig::for_size(self.run.size, vocab_size)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut tc = TrainConfig::for_size(self.run.size, self.run.seed);
        if let Some(steps) = self.overrides.steps {
            tc.steps = steps;
        }
        tc
    }

    /// Parameters that, with the dependency digests, determine the stage.
    fn params(&self, stage: Stage) -> serde_json::Value {
        match stage {
            Stage::Train => {
                serde_json::json!({ "train_config": self.train_config(), "size": self.run.size })
            }
            Stage::Probe => match self.overrides.probe_shuffles {
                Some(n) => serde_json::json!({ "shuffles": n }),
                None => serde_json::Value::Null,
            },
            _ => serde_json::Value::Null,
        }
    }
}

#[derive(Serialize)]
struct HashInput<'a> {
    schema: u32,
    stage: Stage,
    run: &'a RunSpec,
    params: serde_json::Value,
    deps: Vec<(Stage, String)>,
}

/// Runs the requested stages of one run. A stage executes when its record
/// is missing or stale, or when a dependency executed in this invocation.
pub fn run_stages(
    root: &Path,
    run: &RunSpec,
    stages: &[Stage],
    overrides: &Overrides,
) -> RunOutcome {
    let ctx = RunCtx {
        root,
        run,
        overrides,
    };
    let mut outcome = RunOutcome {
        run_id: run.run_id(),
        executed: Vec::new(),
        skipped: Vec::new(),
        error: None,
    };
    for stage in closure(stages) {
        match ensure_stage(&ctx, stage, &outcome.executed) {
            Ok(true) => outcome.executed.push(stage),
            Ok(false) => outcome.skipped.push(stage),
            Err(e) => {
                log::error!("{} {stage}: {e}", outcome.run_id);
                outcome.error = Some(format!("{stage}: {e}"));
                break;
            }
        }
    }
    outcome
}

fn ensure_stage(ctx: &RunCtx, stage: Stage, executed: &[Stage]) -> Result<bool> {
    let dir = ctx.dir(stage);
    let mut deps = Vec::new();
    for &d in stage.deps() {
        let rec = StageRecord::load(&ctx.dir(d))
            .filter(|r| r.status == StageStatus::Done)
            .ok_or_else(|| Error::Invalid(format!("dependency {d} has no completed record")))?;
        deps.push((d, rec.output_digest()));
    }
    let input = HashInput {
        schema: HASH_SCHEMA,
        stage,
        run: ctx.run,
        params: ctx.params(stage),
        deps,
    };
    let input_hash = sha256_hex(&serde_json::to_vec(&input)?);
    let upstream_ran = stage.deps().iter().any(|d| executed.contains(d));
    if !upstream_ran {
        if let Some(rec) = StageRecord::load(&dir) {
            if rec.is_current(&dir, &input_hash) {
                return Ok(false);
            }
        }
    }

    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fsx::create_dir_all(&dir)?;
    log::info!("{} {stage}: running", ctx.run.run_id());
    let start = Instant::now();
    let result = execute(ctx, stage, &dir);
    let seconds = start.elapsed().as_secs_f64();
    let mut record = StageRecord {
        run_id: ctx.run.run_id(),
        stage: stage.as_str().to_string(),
        status: StageStatus::Done,
        input_hash,
        outputs: Default::default(),
        seconds,
        error: None,
    };
    match result {
        Ok(files) => {
            for f in files {
                let h = sha256_file(&dir.join(&f))?;
                record.outputs.insert(f, h);
            }
            record.save(&dir)?;
            append_ledger(ctx.root, &record)?;
            log::info!("{} {stage}: done in {seconds:.1}s", ctx.run.run_id());
            Ok(true)
        }
        Err(e) => {
            record.status = StageStatus::Failed;
            record.error = Some(e.to_string());
            record.save(&dir)?;
            append_ledger(ctx.root, &record)?;
            Err(Error::Stage {
                run: ctx.run.run_id(),
                stage: stage.to_string(),
                detail: e.to_string(),
            })
        }
    }
}

/// Runs one stage into `dir`, returning the produced file names.
fn execute(ctx: &RunCtx, stage: Stage, dir: &Path) -> Result<Vec<String>> {
    match stage {
        Stage::Gen => {
            let spec = CorpusSpec::new(ctx.run.condition, ctx.run.seed, ctx.run.fraction)?;
            generate_corpus(&spec)?.save(dir)?;
            Ok(vec![
                crate::corpusgen::CORPUS_FILE.into(),
                crate::corpusgen::METADATA_FILE.into(),
            ])
        }
        Stage::Bpe => {
            let fit_on = generate_corpus(&CorpusSpec::new(ctx.run.condition, BPE_FIT_SEED, 1.0)?)?;
            let bpe = fit_bpe(&fit_on)?;
            let oov = bpe.oov_count(&ctx.corpus()?);
            if oov > 0 {
                return Err(Error::Invalid(format!(
                    "{oov} byte-fallback tokens on this run's corpus"
                )));
            }
            bpe.save(&dir.join(BPE_FILE))?;
            Ok(vec![BPE_FILE.into()])
        }
        Stage::Train => train_stage(ctx, dir),
        other => super::stages_ext::execute(ctx, other, dir),
    }
}

/// BOS + sentence + EOS for every corpus sentence.
pub fn training_sequences(corpus: &Corpus, bpe: &BpeModel) -> Vec<Vec<u32>> {
    corpus
        .sentences
        .iter()
        .map(|s| {
            let mut v = vec![bpe.bos_id()];
            v.extend_from_slice(bpe.encode(s).ids());
            v.push(bpe.eos_id());
            v
        })
        .collect()
}

fn train_stage(ctx: &RunCtx, dir: &Path) -> Result<Vec<String>> {
    let corpus = ctx.corpus()?;
    let bpe = ctx.tokenizer()?;
    let report = lm::gradient_check(
        &lm::miniature_config(bpe.vocab_size().min(64)),
        GRADCHECK_SEED,
    )?;
    log::info!(
        "gradient check: max relative error {:.2e}",
        report.max_rel_err
    );
    let seqs = training_sequences(&corpus, &bpe);
    let mc = ctx.model_config(bpe.vocab_size());
    let tc = ctx.train_config();
    let run_id = ctx.run.run_id();
    let steps = tc.steps;
    let mut progress = |step: usize, loss: f64| {
        if (step + 1) % 250 == 0 || step + 1 == steps {
            log::info!("{run_id} train step {}/{steps} loss {loss:.4}", step + 1);
        }
    };
    let out = lm::train(&seqs, &mc, &tc, bpe.pad_id(), Some(&mut progress))?;
    out.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    out.log.write_csv(&dir.join(TRAIN_LOG_FILE))?;
    fsx::write_json(
        &dir.join("config.json"),
        &serde_json::json!({ "model": mc, "train": tc, "n_params": mc.n_params() }),
    )?;
    Ok(vec![
        CHECKPOINT_FILE.into(),
        TRAIN_LOG_FILE.into(),
        "config.json".into(),
    ])
}
