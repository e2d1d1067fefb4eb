use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ModelConfig;

/// A named slice of the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Receives decoupled weight decay.
    pub decay: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

/// Positions of every tensor inside the flat parameter vector. The token
/// embedding doubles as the output projection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub wte: usize,
    pub wpe: usize,
    pub layers: Vec<LayerIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut tensors: Vec<TensorSpec> = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, decay: bool| -> usize {
            let spec = TensorSpec {
                name,
                shape,
                offset,
                decay,
            };
            offset += spec.len();
            tensors.push(spec);
            tensors.len() - 1
        };
        let wte = push("wte".into(), vec![cfg.vocab_size, d], true);
        let wpe = push("wpe".into(), vec![cfg.max_seq_len, d], true);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            layers.push(LayerIdx {
                ln1_g: push(p("ln1.g"), vec![d], false),
                ln1_b: push(p("ln1.b"), vec![d], false),
                w_qkv: push(p("attn.w_qkv"), vec![d, 3 * d], true),
                b_qkv: push(p("attn.b_qkv"), vec![3 * d], false),
                w_o: push(p("attn.w_o"), vec![d, d], true),
                b_o: push(p("attn.b_o"), vec![d], false),
                ln2_g: push(p("ln2.g"), vec![d], false),
                ln2_b: push(p("ln2.b"), vec![d], false),
                w_fc: push(p("mlp.w_fc"), vec![d, 4 * d], true),
                b_fc: push(p("mlp.b_fc"), vec![4 * d], false),
                w_proj: push(p("mlp.w_proj"), vec![4 * d, d], true),
                b_proj: push(p("mlp.b_proj"), vec![d], false),
            });
        }
        let lnf_g = push("ln_f.g".into(), vec![d], false);
        let lnf_b = push("ln_f.b".into(), vec![d], false);
        Layout {
            tensors,
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            total: offset,
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn range(&self, idx: usize) -> Range<usize> {
        self.tensors[idx].range()
    }
}
