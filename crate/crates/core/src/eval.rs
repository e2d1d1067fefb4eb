//! Scoring trained checkpoints on a battery: forced choice, ranks, greedy
//! diagnostics, one-shot rank shifts and hidden-state export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::battery::{Battery, ItemType, WugItem};
use crate::corpusgen::{FeatureDim, NonceLexicon};
use crate::error::{fsx, Error, Result};
use crate::lm::{HiddenStates, Model};
use crate::tokenizer::BpeModel;

pub const TIE_EPS: f64 = 1e-9;

/// Identifies the run a row belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub condition: String,
    pub size_tag: String,
    pub seed: u64,
}

/// One scored item. Column order of the results CSV follows field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResultRow {
    pub run_id: String,
    pub condition: String,
    pub size_tag: String,
    pub seed: u64,
    pub item_id: String,
    pub item_type: ItemType,
    pub logp_target: f64,
    pub logp_foil: f64,
    /// 1 iff the target is strictly more probable; ties score 0.
    pub correct: u8,
    pub tie: bool,
    /// Rank of the target's first subword over the whole vocabulary at the
    /// critical prediction position (1 = most probable).
    pub rank_target: usize,
    /// Same, among the ten tokens of the target's feature dimension.
    pub rank_in_dim: usize,
    pub target_multi_subword: bool,
    pub greedy_token: String,
    pub greedy_is_target: bool,
    pub greedy_is_shape: bool,
}

/// Tokenizer-aware scorer around a model.
pub struct Scorer<'a> {
    pub model: &'a Model<f32>,
    pub bpe: &'a BpeModel,
    dim_ids: BTreeMap<FeatureDim, Vec<u32>>,
}

struct Critical {
    log_probs: Vec<f32>,
    prompt_len: usize,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model<f32>, bpe: &'a BpeModel, lexicon: &NonceLexicon) -> Result<Self> {
        if model.config.vocab_size != bpe.vocab_size() {
            return Err(Error::Invalid(format!(
                "checkpoint vocabulary {} does not match tokenizer {}",
                model.config.vocab_size,
                bpe.vocab_size()
            )));
        }
        let dim_ids = FeatureDim::ALL
            .iter()
            .map(|&d| {
                let ids = lexicon
                    .tokens(d)
                    .iter()
                    .map(|t| bpe.word_ids(t).ids()[0])
                    .collect();
                (d, ids)
            })
            .collect();
        Ok(Scorer {
            model,
            bpe,
            dim_ids,
        })
    }

    /// BOS followed by the encoded text.
    pub fn prompt_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![self.bpe.bos_id()];
        ids.extend_from_slice(self.bpe.encode(text).ids());
        ids
    }

    pub fn completion_ids(&self, completion: &str) -> Vec<u32> {
        self.bpe.encode(completion).0
    }

    fn critical(&self, prompt: &[u32]) -> Result<Critical> {
        Ok(Critical {
            log_probs: self.model.next_log_probs(prompt)?,
            prompt_len: prompt.len(),
        })
    }

    /// Summed log-probability of `completion`, reusing the critical-position
    /// distribution for the first subword.
    fn score(&self, prompt: &[u32], crit: &Critical, completion: &[u32]) -> Result<f64> {
        match completion {
            [] => Ok(0.0),
            [only] => Ok(crit.log_probs[*only as usize] as f64),
            _ => crate::lm::score_completion(self.model, prompt, completion),
        }
    }

    fn dim_of_id(&self, id: u32) -> Option<FeatureDim> {
        self.dim_ids
            .iter()
            .find(|(_, ids)| ids.contains(&id))
            .map(|(d, _)| *d)
    }

    /// Rank of `id` among `candidates` (1 = best); ties do not push down.
    fn rank_among(log_probs: &[f32], id: u32, candidates: impl Iterator<Item = u32>) -> usize {
        let x = log_probs[id as usize];
        1 + candidates
            .filter(|&c| c != id && log_probs[c as usize] > x)
            .count()
    }

    /// Rank of the item's target among the tokens of its feature dimension,
    /// with the given prompt text.
    pub fn rank_in_dim(&self, prompt_text: &str, target: &str) -> Result<usize> {
        let prompt = self.prompt_ids(prompt_text);
        if prompt.len() > self.model.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: prompt.len(),
                max: self.model.config.max_seq_len,
            });
        }
        let crit = self.critical(&prompt)?;
        let first = self.completion_ids(target)[0];
        let pool = self
            .dim_of_id(first)
            .map(|d| self.dim_ids[&d].clone())
            .unwrap_or_default();
        Ok(Self::rank_among(&crit.log_probs, first, pool.into_iter()))
    }

    pub fn score_item(&self, meta: &RunMeta, item: &WugItem) -> Result<RunResultRow> {
        let prompt = self.prompt_ids(&item.full_prompt());
        let target = self.completion_ids(&item.target_completion);
        let foil = self.completion_ids(&item.foil_completion);
        let longest = prompt.len() + target.len().max(foil.len());
        if longest > self.model.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: longest,
                max: self.model.config.max_seq_len,
            });
        }
        let crit = self.critical(&prompt)?;
        debug_assert_eq!(crit.prompt_len, prompt.len());
        let logp_target = self.score(&prompt, &crit, &target)?;
        let logp_foil = self.score(&prompt, &crit, &foil)?;
        let tie = (logp_target - logp_foil).abs() <= TIE_EPS;
        let correct = u8::from(!tie && logp_target > logp_foil);
        let first = target[0];
        let vocab = self.model.config.vocab_size as u32;
        let rank_target = Self::rank_among(&crit.log_probs, first, 0..vocab);
        let pool = self
            .dim_of_id(first)
            .map(|d| self.dim_ids[&d].clone())
            .unwrap_or_default();
        let rank_in_dim = Self::rank_among(&crit.log_probs, first, pool.into_iter());
        let greedy = crate::lm::argmax_lowest(&crit.log_probs) as u32;
        Ok(RunResultRow {
            run_id: meta.run_id.clone(),
            condition: meta.condition.clone(),
            size_tag: meta.size_tag.clone(),
            seed: meta.seed,
            item_id: item.item_id.clone(),
            item_type: item.item_type,
            logp_target,
            logp_foil,
            correct,
            tie,
            rank_target,
            rank_in_dim,
            target_multi_subword: target.len() > 1,
            greedy_token: self.bpe.token_str(greedy).trim_start().to_string(),
            greedy_is_target: greedy == first,
            greedy_is_shape: self.dim_ids[&FeatureDim::Shape].contains(&greedy),
        })
    }

    /// Position of the last occurrence of `word` in `prompt` ids.
    pub fn word_position(&self, prompt: &[u32], word: &str) -> Option<usize> {
        let ids = self.bpe.word_ids(word);
        let w = ids.ids();
        let last = *w.last()?;
        (0..prompt.len())
            .rev()
            .find(|&p| prompt[p] == last && p + 1 >= w.len() && prompt[p + 1 - w.len()..=p] == *w)
    }

    pub fn hidden(&self, prompt: &[u32]) -> Result<HiddenStates<f32>> {
        Ok(self.model.forward(prompt)?.hidden)
    }
}

/// Scores every item; rows come back in battery order.
pub fn run_forced_choice(
    scorer: &Scorer,
    meta: &RunMeta,
    battery: &Battery,
) -> Result<Vec<RunResultRow>> {
    battery
        .items
        .iter()
        .map(|item| scorer.score_item(meta, item))
        .collect()
}

pub fn write_results_csv(path: &Path, rows: &[RunResultRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<RunResultRow>> {
    read_csv(path)
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    fsx::write(path, bytes)
}

pub(crate) fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Invalid(format!("cannot read {}: {e}", path.display())),
        _ => Error::Csv(e),
    })?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub run_id: String,
    pub condition: String,
    pub size_tag: String,
    pub seed: u64,
    pub item_type: ItemType,
    pub n: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub n_ties: usize,
    pub mean_delta_logp: f64,
    pub mean_rank: f64,
    pub mean_rank_in_dim: f64,
    pub greedy_specific_rate: f64,
    pub greedy_shape_rate: f64,
}

/// One cell per (run, item type), ordered by run then type.
pub fn aggregate(rows: &[RunResultRow]) -> Vec<AggregateCell> {
    let mut groups: BTreeMap<(String, ItemType), Vec<&RunResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.run_id.clone(), r.item_type))
            .or_default()
            .push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let n = g.len();
            let nf = n as f64;
            let mean = |f: &dyn Fn(&RunResultRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / nf;
            let n_correct = g.iter().filter(|r| r.correct == 1).count();
            AggregateCell {
                run_id: g[0].run_id.clone(),
                condition: g[0].condition.clone(),
                size_tag: g[0].size_tag.clone(),
                seed: g[0].seed,
                item_type: g[0].item_type,
                n,
                n_correct,
                accuracy: n_correct as f64 / nf,
                n_ties: g.iter().filter(|r| r.tie).count(),
                mean_delta_logp: mean(&|r| r.logp_target - r.logp_foil),
                mean_rank: mean(&|r| r.rank_target as f64),
                mean_rank_in_dim: mean(&|r| r.rank_in_dim as f64),
                greedy_specific_rate: mean(&|r| f64::from(u8::from(r.greedy_is_target))),
                greedy_shape_rate: mean(&|r| f64::from(u8::from(r.greedy_is_shape))),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreedyDiagnostics {
    pub n: usize,
    pub correct_specific_rate: f64,
    pub shape_class_rate: f64,
}

/// Greedy-token rates over the rows of one item type.
pub fn greedy_diagnostics(rows: &[RunResultRow], item_type: ItemType) -> GreedyDiagnostics {
    let sel: Vec<&RunResultRow> = rows.iter().filter(|r| r.item_type == item_type).collect();
    let n = sel.len();
    let rate = |f: &dyn Fn(&RunResultRow) -> bool| {
        if n == 0 {
            0.0
        } else {
            sel.iter().filter(|r| f(r)).count() as f64 / n as f64
        }
    };
    GreedyDiagnostics {
        n,
        correct_specific_rate: rate(&|r| r.greedy_is_target),
        shape_class_rate: rate(&|r| r.greedy_is_shape),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneShotRow {
    pub run_id: String,
    pub item_id: String,
    pub item_type: ItemType,
    pub rank_without: usize,
    pub rank_with: usize,
}

/// Rank of the target among same-dimension tokens with and without the
/// in-context exemplar.
pub fn run_one_shot(
    scorer: &Scorer,
    meta: &RunMeta,
    items: &[&WugItem],
) -> Result<Vec<OneShotRow>> {
    items
        .iter()
        .filter(|i| i.item_type.is_one_shot())
        .map(|item| {
            Ok(OneShotRow {
                run_id: meta.run_id.clone(),
                item_id: item.item_id.clone(),
                item_type: item.item_type,
                rank_without: scorer.rank_in_dim(&item.prompt, &item.target_completion)?,
                rank_with: scorer.rank_in_dim(&item.full_prompt(), &item.target_completion)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    /// Last subword of the queried noun.
    NounFinal,
    /// Last prompt token, whose distribution generates the target.
    Critical,
}

impl Position {
    pub fn as_str(self) -> &'static str {
        match self {
            Position::NounFinal => "noun_final",
            Position::Critical => "critical",
        }
    }
}

/// Per-layer activations of one item at the requested position.
pub fn item_hidden(scorer: &Scorer, item: &WugItem, pos: Position) -> Result<Vec<Vec<f32>>> {
    let prompt = scorer.prompt_ids(&item.full_prompt());
    let at = match pos {
        Position::Critical => prompt.len() - 1,
        Position::NounFinal => scorer
            .word_position(&prompt, &item.query_word)
            .ok_or_else(|| Error::Invalid(format!("{}: noun not found in prompt", item.item_id)))?,
    };
    let h = scorer.hidden(&prompt)?;
    Ok((0..h.n_layers()).map(|l| h.at(l, at).to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenIndexRow {
    pub row: usize,
    pub item_id: String,
    pub item_type: ItemType,
    pub kind_id: usize,
    pub layer: usize,
    pub position: Position,
}

/// Writes `hidden_<position>.bin` (row-major little-endian f32, one
/// `d_model` row per item and layer) and a matching `hidden_<position>.csv`
/// index. Returns the written file names.
pub fn export_hidden_states(
    scorer: &Scorer,
    items: &[&WugItem],
    pos: Position,
    dir: &Path,
) -> Result<Vec<String>> {
    let mut bytes = Vec::new();
    let mut index = Vec::new();
    for item in items {
        for (layer, v) in item_hidden(scorer, item, pos)?.into_iter().enumerate() {
            index.push(HiddenIndexRow {
                row: index.len(),
                item_id: item.item_id.clone(),
                item_type: item.item_type,
                kind_id: item.kind_id,
                layer,
                position: pos,
            });
            for x in v {
                bytes.write_all(&x.to_le_bytes()).expect("write to vec");
            }
        }
    }
    let bin = format!("hidden_{}.bin", pos.as_str());
    let csv = format!("hidden_{}.csv", pos.as_str());
    fsx::write(&dir.join(&bin), bytes)?;
    write_csv(&dir.join(&csv), &index)?;
    Ok(vec![bin, csv])
}
