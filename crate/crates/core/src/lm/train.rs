use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::model::{Batch, Model};
use super::optim::{lr_at, AdamW};
use super::{ModelConfig, TrainConfig};
use crate::corpusgen::rng::stream_with;
use crate::error::{Error, Result};

const DATA_SALT: u64 = 0xda7a_0000_0000;
const DROPOUT_SALT: u64 = 0xd20b_0000_0000;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    /// (step, loss, lr)
    pub rows: Vec<(usize, f64, f64)>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.rows.len() * 32);
        writeln!(out, "step,loss,lr").expect("write to vec");
        for (s, l, lr) in &self.rows {
            writeln!(out, "{s},{l},{lr}").expect("write to vec");
        }
        crate::error::fsx::write(path, &out)
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.1)
    }

    /// Mean loss over the last `k` logged steps.
    pub fn tail_loss(&self, k: usize) -> Option<f64> {
        let n = self.rows.len();
        if n == 0 {
            return None;
        }
        let tail = &self.rows[n - k.min(n)..];
        Some(tail.iter().map(|r| r.1).sum::<f64>() / tail.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
}

/// Deterministic epoch-shuffled order: sample `i` of the run is sentence
/// `perm(i / n)[i % n]`.
struct Sampler {
    seed: u64,
    n: usize,
    epoch: Option<usize>,
    perm: Vec<usize>,
}

impl Sampler {
    fn new(seed: u64, n: usize) -> Self {
        Sampler {
            seed,
            n,
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn get(&mut self, i: usize) -> usize {
        let epoch = i / self.n;
        if self.epoch != Some(epoch) {
            self.perm = (0..self.n).collect();
            self.perm
                .shuffle(&mut stream_with(self.seed ^ DATA_SALT, epoch as u64));
            self.epoch = Some(epoch);
        }
        self.perm[i % self.n]
    }
}

/// Trains a fresh model on whole tokenized sentences (BOS ... EOS).
pub fn train(
    sequences: &[Vec<u32>],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    pad_id: u32,
    progress: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    let model = Model::<f32>::new(model_config.clone(), train_config.seed)?;
    let n = model.n_params();
    let mut ckpt = Checkpoint {
        model,
        optimizer: AdamW::new(n),
        train_config: train_config.clone(),
        step: 0,
    };
    let log = continue_training(&mut ckpt, sequences, pad_id, train_config.steps, progress)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
    })
}

/// Advances `ckpt` until `until_step`. Resuming from a saved checkpoint
/// reproduces an uninterrupted run exactly.
pub fn continue_training(
    ckpt: &mut Checkpoint,
    sequences: &[Vec<u32>],
    pad_id: u32,
    until_step: usize,
    mut progress: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<TrainingLog> {
    if sequences.is_empty() {
        return Err(Error::InvalidSpec("no training sequences".into()));
    }
    let max = ckpt.model.config.max_seq_len + 1;
    if let Some(s) = sequences.iter().find(|s| s.len() > max || s.len() < 2) {
        return Err(Error::SequenceTooLong { len: s.len(), max });
    }
    let cfg = ckpt.train_config.clone();
    let until = until_step.min(cfg.steps);
    let mut sampler = Sampler::new(cfg.seed, sequences.len());
    let mut grad = vec![0f32; ckpt.model.n_params()];
    let mut log = TrainingLog::default();
    while ckpt.step < until {
        let step = ckpt.step;
        let rows: Vec<&[u32]> = (0..cfg.batch_size)
            .map(|j| sequences[sampler.get(step * cfg.batch_size + j)].as_slice())
            .collect();
        let batch = Batch::from_sequences(&rows, pad_id);
        let mut rng = stream_with(cfg.seed ^ DROPOUT_SALT, step as u64);
        let (loss, cache) = ckpt.model.forward_loss(&batch, Some(&mut rng))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        ckpt.model.backward(&cache, &batch, &mut grad);
        drop(cache);
        let norm = grad
            .iter()
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("gradient norm is {norm}"),
            });
        }
        if norm > cfg.grad_clip {
            let s = (cfg.grad_clip / norm) as f32;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let lr = lr_at(&cfg, step);
        let Checkpoint {
            model, optimizer, ..
        } = ckpt;
        optimizer.step(&mut model.params, &grad, &model.layout, &cfg, lr);
        ckpt.step += 1;
        log.rows.push((step, loss as f64, lr));
        if let Some(cb) = progress.as_deref_mut() {
            cb(step, loss as f64);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_visits_each_sentence_once_per_epoch() {
        let mut s = Sampler::new(3, 7);
        let mut seen: Vec<usize> = (7..14).map(|i| s.get(i)).collect();
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }
}
