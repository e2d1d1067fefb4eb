use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{fsx, Result};

pub const RECORD_FILE: &str = "stage.json";
pub const REGISTRY_FILE: &str = "registry.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Done,
    Failed,
}

/// Written next to a stage's outputs when it finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub run_id: String,
    pub stage: String,
    pub status: StageStatus,
    pub input_hash: String,
    /// File name (relative to the stage dir) → sha256.
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
    #[serde(default)]
    pub error: Option<String>,
}

impl StageRecord {
    pub fn load(stage_dir: &Path) -> Option<Self> {
        fsx::read_json(&stage_dir.join(RECORD_FILE)).ok()
    }

    pub fn save(&self, stage_dir: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)? + "\n";
        fsx::write_atomic(&stage_dir.join(RECORD_FILE), s)
    }

    /// Done, built from `input_hash`, and every output still hashes the same.
    pub fn is_current(&self, stage_dir: &Path, input_hash: &str) -> bool {
        self.status == StageStatus::Done
            && self.input_hash == input_hash
            && self.outputs.iter().all(|(name, h)| {
                sha256_file(&stage_dir.join(name)).ok().as_deref() == Some(h.as_str())
            })
    }

    /// Hash summarising all outputs, used as downstream input.
    pub fn output_digest(&self) -> String {
        let joined: String = self
            .outputs
            .iter()
            .map(|(k, v)| format!("{k}={v};"))
            .collect();
        sha256_hex(joined.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fsx::read(path)?))
}

/// Aggregate view over all stage records under a data root.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub records: Vec<StageRecord>,
}

impl Registry {
    pub fn scan(root: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut stack: Vec<PathBuf> = vec![root.join("runs")];
        while let Some(dir) = stack.pop() {
            let Ok(entries) = std::fs::read_dir(&dir) else {
                continue;
            };
            let mut paths: Vec<PathBuf> =
                entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            for p in paths {
                if p.is_dir() {
                    stack.push(p);
                } else if p.file_name().is_some_and(|n| n == RECORD_FILE) {
                    if let Ok(r) = fsx::read_json::<StageRecord>(&p) {
                        records.push(r);
                    }
                }
            }
        }
        records.sort_by(|a, b| (&a.run_id, &a.stage).cmp(&(&b.run_id, &b.stage)));
        Ok(Registry { records })
    }

    /// Rescans stage records and atomically replaces `registry.json`.
    pub fn rebuild(root: &Path) -> Result<Self> {
        let reg = Self::scan(root)?;
        let s = serde_json::to_string_pretty(&reg)? + "\n";
        fsx::write_atomic(&root.join(REGISTRY_FILE), s)?;
        Ok(reg)
    }

    pub fn get(&self, run_id: &str, stage: &str) -> Option<&StageRecord> {
        self.records
            .iter()
            .find(|r| r.run_id == run_id && r.stage == stage)
    }
}

pub const LEDGER_FILE: &str = "ledger.jsonl";

/// Appends one JSON line per finished stage. Lines are written with a
/// single `write` on an append-mode handle, so concurrent runs interleave
/// whole lines.
pub fn append_ledger(root: &Path, record: &StageRecord) -> Result<()> {
    use std::io::Write;
    let path = root.join(LEDGER_FILE);
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| crate::error::Error::io(&path, e))?;
    f.write_all(line.as_bytes())
        .map_err(|e| crate::error::Error::io(&path, e))
}
