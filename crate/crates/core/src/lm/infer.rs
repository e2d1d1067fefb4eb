use std::collections::BTreeMap;

use super::checkpoint::Checkpoint;
use super::model::Model;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Residual-stream activations: `layers[0]` is the embedding output and
/// `layers[l]` the output of block `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<T> {
    pub d_model: usize,
    pub len: usize,
    pub layers: Vec<Vec<T>>,
}

impl<T: Scalar> HiddenStates<T> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn at(&self, layer: usize, pos: usize) -> &[T] {
        &self.layers[layer][pos * self.d_model..(pos + 1) * self.d_model]
    }
}

/// Per-position next-token log-probabilities and hidden states.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub vocab_size: usize,
    pub log_probs: Vec<T>,
    pub hidden: HiddenStates<T>,
}

impl<T: Scalar> Forward<T> {
    pub fn len(&self) -> usize {
        self.hidden.len
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.len == 0
    }

    pub fn log_probs_at(&self, pos: usize) -> &[T] {
        &self.log_probs[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }
}

impl<T: Scalar> Model<T> {
    /// Evaluation-mode forward pass over a single sequence.
    pub fn forward(&self, ids: &[u32]) -> Result<Forward<T>> {
        let cache = self.run(ids, 1, ids.len(), None)?;
        let mut layers: Vec<Vec<T>> = cache.layers.into_iter().map(|l| l.x_in).collect();
        layers.push(cache.x_final);
        Ok(Forward {
            vocab_size: self.config.vocab_size,
            log_probs: cache.logp,
            hidden: HiddenStates {
                d_model: self.config.d_model,
                len: ids.len(),
                layers,
            },
        })
    }

    /// Log-probabilities of the token following `prompt`.
    pub fn next_log_probs(&self, prompt: &[u32]) -> Result<Vec<T>> {
        if prompt.is_empty() {
            return Err(Error::Invalid("empty prompt".into()));
        }
        let f = self.forward(prompt)?;
        Ok(f.log_probs_at(prompt.len() - 1).to_vec())
    }
}

/// Sum of log p(completion_i | prompt, completion_<i) in nats.
pub fn score_completion<T: Scalar>(
    model: &Model<T>,
    prompt: &[u32],
    completion: &[u32],
) -> Result<f64> {
    if completion.is_empty() {
        return Ok(0.0);
    }
    if prompt.is_empty() {
        return Err(Error::Invalid("empty prompt".into()));
    }
    let ids: Vec<u32> = prompt.iter().chain(completion).copied().collect();
    let f = model.forward(&ids)?;
    let mut total = 0.0;
    for (i, &tok) in completion.iter().enumerate() {
        total += f.log_probs_at(prompt.len() - 1 + i)[tok as usize]
            .to_f64()
            .unwrap_or(f64::NAN);
    }
    Ok(total)
}

/// Most probable next token; ties go to the lowest id.
pub fn greedy_next<T: Scalar>(model: &Model<T>, prompt: &[u32]) -> Result<u32> {
    let lp = model.next_log_probs(prompt)?;
    Ok(argmax_lowest(&lp) as u32)
}

pub fn argmax_lowest<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Copy of `ckpt` whose embedding row `k` is replaced by row `mapping[k]`.
/// Sources are read from the original weights, so chained mappings do not
/// cascade.
pub fn swap_embeddings(ckpt: &Checkpoint, mapping: &BTreeMap<u32, u32>) -> Result<Checkpoint> {
    let vocab = ckpt.model.config.vocab_size;
    let d = ckpt.model.config.d_model;
    for (&k, &v) in mapping {
        for id in [k, v] {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: id as usize,
                    vocab,
                });
            }
        }
    }
    let mut out = ckpt.clone();
    let wte = ckpt.model.layout.range(ckpt.model.layout.wte);
    let src = &ckpt.model.params[wte.clone()];
    let dst = &mut out.model.params[wte];
    for (&k, &v) in mapping {
        let (k, v) = (k as usize, v as usize);
        dst[k * d..(k + 1) * d].copy_from_slice(&src[v * d..(v + 1) * d]);
    }
    Ok(out)
}
