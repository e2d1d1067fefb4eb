use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::model::{Batch, Model};
use super::ModelConfig;
use crate::corpusgen::rng::stream_with;
use crate::error::{Error, Result};

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
const SAMPLES_PER_TENSOR: usize = 5;
const STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-6;
const MAX_CHECK_PARAMS: usize = 200_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub n_checked: usize,
}

/// Compares backprop gradients with central differences in `f64` at a few
/// random coordinates of every tensor. Dropout is disabled.
pub fn gradient_check(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    if config.n_params() > MAX_CHECK_PARAMS {
        return Err(Error::InvalidSpec(format!(
            "gradient check expects a miniature config, got {} parameters",
            config.n_params()
        )));
    }
    let mut rng = stream_with(seed, 0x9c_0000);
    let mut model = Model::<f64>::new(config.clone(), seed)?;
    // Larger weights than the training init so every nonlinearity is exercised.
    let jitter = Normal::new(0.0, 0.3).expect("valid std");
    for p in model.params.iter_mut() {
        *p += jitter.sample(&mut rng);
    }

    let max_len = config.max_seq_len.min(8);
    let rows: Vec<Vec<u32>> = (0..3)
        .map(|r| {
            let len = (max_len + 1 - r).max(2);
            (0..len)
                .map(|_| rng.random_range(0..config.vocab_size as u32))
                .collect()
        })
        .collect();
    let refs: Vec<&[u32]> = rows.iter().map(|r| r.as_slice()).collect();
    let batch = Batch::from_sequences(&refs, 0);

    let (_, cache) = model.forward_loss(&batch, None)?;
    let mut grad = vec![0.0f64; model.n_params()];
    model.backward(&cache, &batch, &mut grad);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        n_checked: 0,
    };
    for spec in model.layout.tensors.clone() {
        for _ in 0..SAMPLES_PER_TENSOR {
            let i = spec.offset + rng.random_range(0..spec.len());
            let orig = model.params[i];
            model.params[i] = orig + STEP;
            let up = model.forward_loss(&batch, None)?.0;
            model.params[i] = orig - STEP;
            let down = model.forward_loss(&batch, None)?.0;
            model.params[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grad[i];
            let rel =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.n_checked += 1;
            if rel > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = format!(
                    "{}[{}]: analytic {analytic:.6e} numeric {numeric:.6e}",
                    spec.name,
                    i - spec.offset
                );
            }
        }
    }
    if !(report.max_rel_err < GRADCHECK_TOLERANCE) {
        return Err(Error::GradientCheck {
            max_rel_err: report.max_rel_err,
            location: report.worst,
        });
    }
    Ok(report)
}

/// Miniature configuration used before training runs.
pub fn miniature_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size,
        max_seq_len: 8,
        dropout: 0.0,
        ..ModelConfig::for_size(super::SizeTag::Tiny, vocab_size)
    }
}
