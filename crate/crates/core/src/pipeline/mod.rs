//! Run-matrix orchestration: per-run stage directories, a content-hash
//! registry that makes re-invocation idempotent, and the report bundle.

mod registry;
mod report;
mod stages;
mod stages_ext;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use registry::{Registry, StageRecord, StageStatus};
pub use report::{
    collect_runs, emit_reports, hypotheses, HypothesisReport, Manifest, ReportBundle, RunData,
    Verdict, MANIFEST_FILE, REPORT_DIR,
};
pub use stages::{
    run_stages, training_sequences, Overrides, RunOutcome, BPE_FILE, CHECKPOINT_FILE,
    TRAIN_LOG_FILE,
};
pub use stages_ext::{
    first_order_probe_data, noun_vectors, CosineCsvRow, ProbeRow, BATTERY_FILE, COSINE_FILE,
    NOUN_CARRIER, PROBE_FILE, RESULTS_FILE,
};

use crate::corpusgen::{CorpusCondition, FRACTIONS, SEEDS};
use crate::error::{fsx, Error, Result};
use crate::lm::SizeTag;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const DATA_DIR_ENV: &str = "WUGLAB_DATA_DIR";
/// Seed of the corpus each condition's tokenizer is fitted on.
pub const BPE_FIT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Gen,
    Bpe,
    Train,
    Battery,
    Eval,
    Hbm,
    Probe,
    Reprs,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Gen,
        Stage::Bpe,
        Stage::Train,
        Stage::Battery,
        Stage::Eval,
        Stage::Hbm,
        Stage::Probe,
        Stage::Reprs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Bpe => "bpe",
            Stage::Train => "train",
            Stage::Battery => "battery",
            Stage::Eval => "eval",
            Stage::Hbm => "hbm",
            Stage::Probe => "probe",
            Stage::Reprs => "reprs",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Gen => &[],
            Stage::Bpe => &[Stage::Gen],
            Stage::Train => &[Stage::Gen, Stage::Bpe],
            Stage::Battery => &[Stage::Gen],
            Stage::Eval => &[Stage::Bpe, Stage::Train, Stage::Battery],
            Stage::Hbm => &[Stage::Gen],
            Stage::Probe => &[Stage::Gen, Stage::Bpe, Stage::Train, Stage::Battery],
            Stage::Reprs => &[Stage::Gen, Stage::Bpe, Stage::Train],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub condition: CorpusCondition,
    pub size: SizeTag,
    pub seed: u64,
    pub fraction: f64,
}

impl RunSpec {
    pub fn new(condition: CorpusCondition, size: SizeTag, seed: u64) -> Self {
        RunSpec {
            condition,
            size,
            seed,
            fraction: 1.0,
        }
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}-{}", self.condition, self.size, self.seed_dir())
    }

    fn seed_dir(&self) -> String {
        if self.fraction == 1.0 {
            self.seed.to_string()
        } else {
            format!("{}-f{}", self.seed, self.fraction)
        }
    }

    /// `runs/<condition>/<size>/<seed>/`
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join("runs")
            .join(self.condition.as_str())
            .join(self.size.as_str())
            .join(self.seed_dir())
    }

    pub fn stage_dir(&self, root: &Path, stage: Stage) -> PathBuf {
        self.dir(root).join(stage.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if !FRACTIONS.iter().any(|f| *f == self.fraction) {
            return Err(Error::InvalidSpec(format!(
                "fraction {} not in {FRACTIONS:?}",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// Matrix configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub schema_version: u32,
    pub conditions: Vec<CorpusCondition>,
    pub sizes: Vec<SizeTag>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    /// Replaces the per-size step count; for smoke runs only.
    #[serde(default)]
    pub steps_override: Option<usize>,
    /// Replaces the number of probe permutations; for smoke runs only.
    #[serde(default)]
    pub probe_shuffles: Option<usize>,
    #[serde(default)]
    pub root: Option<PathBuf>,
}

fn default_fractions() -> Vec<f64> {
    vec![1.0]
}

fn default_stages() -> Vec<Stage> {
    Stage::ALL.to_vec()
}

impl MatrixConfig {
    /// Tiny models on Regular, Scrambled and FeatureSwap, seeds 42 and 123.
    pub fn acceptance() -> Self {
        MatrixConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            conditions: vec![
                CorpusCondition::Regular,
                CorpusCondition::FeatureSwap,
                CorpusCondition::Scrambled,
            ],
            sizes: vec![SizeTag::Tiny],
            seeds: vec![42, 123],
            fractions: vec![1.0],
            stages: default_stages(),
            steps_override: None,
            probe_shuffles: None,
            root: None,
        }
    }

    /// The full design: 8 conditions × 3 sizes × 5 seeds, plus Tiny
    /// dose-response runs on Regular at 25% and 50% of the corpus.
    pub fn full() -> Self {
        MatrixConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            conditions: CorpusCondition::ALL.to_vec(),
            sizes: SizeTag::ALL.to_vec(),
            seeds: SEEDS.to_vec(),
            fractions: FRACTIONS.to_vec(),
            stages: default_stages(),
            steps_override: None,
            probe_shuffles: None,
            root: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: MatrixConfig = fsx::read_json(path)?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::InvalidSpec(format!(
                "config schema version {} (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Run list in seed-major order so early results span conditions.
    /// Fractions below 1 apply to Tiny Regular runs only.
    pub fn runs(&self) -> Result<Vec<RunSpec>> {
        let mut out = Vec::new();
        for &fraction in &self.fractions {
            for &seed in &self.seeds {
                for &size in &self.sizes {
                    for &condition in &self.conditions {
                        if fraction != 1.0
                            && (condition != CorpusCondition::Regular || size != SizeTag::Tiny)
                        {
                            continue;
                        }
                        let spec = RunSpec {
                            condition,
                            size,
                            seed,
                            fraction,
                        };
                        spec.validate()?;
                        out.push(spec);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn overrides(&self) -> Overrides {
        Overrides {
            steps: self.steps_override,
            probe_shuffles: self.probe_shuffles,
        }
    }

    pub fn data_root(&self) -> PathBuf {
        data_root(self.root.as_deref())
    }
}

/// `$WUGLAB_DATA_DIR`, else `fallback`, else `./wuglab-data`.
pub fn data_root(fallback: Option<&Path>) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => fallback
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("wuglab-data")),
    }
}

/// Executes every run of the matrix with up to `jobs` runs in flight. Runs
/// are single-threaded, so results do not depend on `jobs`. A failing run
/// is recorded and does not stop the others.
pub fn run_matrix(cfg: &MatrixConfig, jobs: usize) -> Result<Vec<RunOutcome>> {
    let root = cfg.data_root();
    fsx::create_dir_all(&root)?;
    let runs = cfg.runs()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, RunOutcome)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(runs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                let outcome = run_stages(&root, run, &cfg.stages, &cfg.overrides());
                results.lock().expect("results lock").push((i, outcome));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|r| r.0);
    Registry::rebuild(&root)?;
    Ok(results.into_iter().map(|r| r.1).collect())
}
