use std::collections::BTreeMap;

use proptest::prelude::*;
use wuglab::lm::{
    continue_training, gradient_check, greedy_next, lr_at, miniature_config, score_completion,
    swap_embeddings, train, AdamW, Batch, Checkpoint, Model, ModelConfig, SizeTag, TrainConfig,
};

fn tiny_cfg(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        vocab_size: vocab,
        max_seq_len: 12,
        dropout: 0.1,
        ..ModelConfig::for_size(SizeTag::Tiny, vocab)
    }
}

fn quick_train_cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        warmup_steps: 5,
        base_lr: 1e-2,
        ..TrainConfig::for_size(SizeTag::Tiny, seed)
    }
}

fn toy_sequences() -> Vec<Vec<u32>> {
    vec![
        vec![1, 3, 4, 5, 2],
        vec![1, 6, 4, 7, 2],
        vec![1, 3, 8, 2],
        vec![1, 6, 8, 9, 5, 2],
        vec![1, 9, 9, 2],
    ]
}

// Straight-line reference forward pass in f64, written without the
// library's kernels: embeddings, pre-norm blocks, tied output projection.
fn reference_log_probs(m: &Model<f64>, ids: &[u32]) -> Vec<Vec<f64>> {
    let c = &m.config;
    let d = c.d_model;
    let t_len = ids.len();
    let get = |name: &str| m.tensor(m.layout.index_of(name).unwrap()).to_vec();
    let wte = get("wte");
    let wpe = get("wpe");
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    };
    let matvec = |x: &[f64], w: &[f64], b: &[f64], dout: usize| -> Vec<f64> {
        (0..dout)
            .map(|j| {
                b[j] + x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * w[i * dout + j])
                    .sum::<f64>()
            })
            .collect()
    };
    let gelu = |x: f64| {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    };

    let mut xs: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            (0..d)
                .map(|i| wte[ids[t] as usize * d + i] + wpe[t * d + i])
                .collect()
        })
        .collect();
    let hd = d / c.n_heads;
    for l in 0..c.n_layers {
        let p = |s: &str| get(&format!("h{l}.{s}"));
        let (g1, b1, wqkv, bqkv, wo, bo) = (
            p("ln1.g"),
            p("ln1.b"),
            p("attn.w_qkv"),
            p("attn.b_qkv"),
            p("attn.w_o"),
            p("attn.b_o"),
        );
        let (g2, b2, wfc, bfc, wpj, bpj) = (
            p("ln2.g"),
            p("ln2.b"),
            p("mlp.w_fc"),
            p("mlp.b_fc"),
            p("mlp.w_proj"),
            p("mlp.b_proj"),
        );
        let qkv: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| matvec(&ln(x, &g1, &b1), &wqkv, &bqkv, 3 * d))
            .collect();
        let mut next = Vec::new();
        for t in 0..t_len {
            let mut att = vec![0.0; d];
            for h in 0..c.n_heads {
                let scores: Vec<f64> = (0..=t)
                    .map(|u| {
                        (0..hd)
                            .map(|i| qkv[t][h * hd + i] * qkv[u][d + h * hd + i])
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for u in 0..=t {
                    for i in 0..hd {
                        att[h * hd + i] += scores[u].exp() / z * qkv[u][2 * d + h * hd + i];
                    }
                }
            }
            let a = matvec(&att, &wo, &bo, d);
            let mid: Vec<f64> = xs[t].iter().zip(&a).map(|(x, y)| x + y).collect();
            let f: Vec<f64> = matvec(&ln(&mid, &g2, &b2), &wfc, &bfc, 4 * d)
                .into_iter()
                .map(gelu)
                .collect();
            let mo = matvec(&f, &wpj, &bpj, d);
            next.push(mid.iter().zip(&mo).map(|(x, y)| x + y).collect());
        }
        xs = next;
    }
    let (gf, bf) = (get("ln_f.g"), get("ln_f.b"));
    xs.iter()
        .map(|x| {
            let h = ln(x, &gf, &bf);
            let logits: Vec<f64> = (0..c.vocab_size)
                .map(|v| (0..d).map(|i| h[i] * wte[v * d + i]).sum())
                .collect();
            let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
            logits.iter().map(|z| z - lse).collect()
        })
        .collect()
}

fn jittered(cfg: ModelConfig, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::new(cfg, seed).unwrap();
    for (i, p) in m.params.iter_mut().enumerate() {
        *p += 0.3 * ((i as f64 * 12.9898 + seed as f64).sin() * 43758.5453).fract();
    }
    m
}

#[test]
fn gradient_check_on_miniature_config() {
    for seed in [1, 2, 3] {
        let report = gradient_check(&miniature_config(11), seed).unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
        assert!(report.n_checked > 100);
    }
}

#[test]
fn gradient_check_refuses_full_size() {
    assert!(gradient_check(&ModelConfig::for_size(SizeTag::Tiny, 869), 1).is_err());
}

#[test]
fn forward_matches_reference_implementation() {
    let m = jittered(tiny_cfg(10), 5);
    let ids = [1u32, 4, 7, 2, 9, 0];
    let f = m.forward(&ids).unwrap();
    let want = reference_log_probs(&m, &ids);
    for (t, row) in want.iter().enumerate() {
        for (v, &w) in row.iter().enumerate() {
            assert!((f.log_probs_at(t)[v] - w).abs() < 1e-10, "pos {t} tok {v}");
        }
    }
}

#[test]
fn two_token_vocabulary_score_matches_reference() {
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: 4,
        vocab_size: 2,
        max_seq_len: 4,
        ..tiny_cfg(2)
    };
    let m = jittered(cfg, 9);
    let reference = reference_log_probs(&m, &[0, 1, 1]);
    let want = reference[0][1] + reference[1][1];
    let got = score_completion(&m, &[0], &[1, 1]).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn distributions_normalized_and_near_uniform_at_init() {
    let m = Model::<f32>::new(ModelConfig::for_size(SizeTag::Tiny, 869), 42).unwrap();
    let ids: Vec<u32> = (0..12).map(|i| (i * 37 % 869) as u32).collect();
    let f = m.forward(&ids).unwrap();
    let log_v = (869f64).ln();
    for t in 0..ids.len() {
        let row = f.log_probs_at(t);
        let total: f64 = row.iter().map(|&x| (x as f64).exp()).sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        let entropy: f64 = -row
            .iter()
            .map(|&x| (x as f64).exp() * x as f64)
            .sum::<f64>();
        assert!((entropy - log_v).abs() < 0.2 * log_v);
    }
    assert_eq!(f.hidden.n_layers(), 5);
}

#[test]
fn overlong_and_out_of_range_inputs_rejected() {
    let m = Model::<f32>::new(tiny_cfg(10), 1).unwrap();
    assert!(m.forward(&[1; 13]).is_err());
    assert!(m.forward(&[1, 10]).is_err());
}

#[test]
fn empty_completion_scores_zero() {
    let m = Model::<f32>::new(tiny_cfg(10), 1).unwrap();
    assert_eq!(score_completion(&m, &[1, 2], &[]).unwrap(), 0.0);
}

#[test]
fn greedy_ties_pick_lowest_id() {
    let mut m = Model::<f32>::new(tiny_cfg(10), 1).unwrap();
    m.params.iter_mut().for_each(|p| *p = 0.0);
    assert_eq!(greedy_next(&m, &[3, 4]).unwrap(), 0);
    let m = Model::<f32>::new(tiny_cfg(10), 1).unwrap();
    let a = greedy_next(&m, &[3, 4]).unwrap();
    assert_eq!(a, greedy_next(&m, &[3, 4]).unwrap());
    let lp = m.next_log_probs(&[3, 4]).unwrap();
    assert!(lp.iter().all(|&x| x <= lp[a as usize]));
}

fn fresh_checkpoint(seed: u64) -> Checkpoint {
    let model = Model::<f32>::new(tiny_cfg(10), seed).unwrap();
    let n = model.n_params();
    Checkpoint {
        model,
        optimizer: AdamW::new(n),
        train_config: quick_train_cfg(30, seed),
        step: 0,
    }
}

#[test]
fn swap_embeddings_copies_rows() {
    let ck = fresh_checkpoint(3);
    assert_eq!(swap_embeddings(&ck, &BTreeMap::new()).unwrap(), ck);
    let identity: BTreeMap<u32, u32> = (0..10).map(|i| (i, i)).collect();
    assert_eq!(swap_embeddings(&ck, &identity).unwrap(), ck);

    let mapping = BTreeMap::from([(7u32, 2u32), (2u32, 5u32)]);
    let out = swap_embeddings(&ck, &mapping).unwrap();
    let d = ck.model.config.d_model;
    let wte = ck.model.layout.range(ck.model.layout.wte);
    let (a, b) = (
        &ck.model.params[wte.clone()],
        &out.model.params[wte.clone()],
    );
    assert_eq!(&b[7 * d..8 * d], &a[2 * d..3 * d]);
    assert_eq!(&b[2 * d..3 * d], &a[5 * d..6 * d]);
    for row in [0, 1, 3, 4, 5, 6, 8, 9] {
        assert_eq!(&b[row * d..(row + 1) * d], &a[row * d..(row + 1) * d]);
    }
    assert_eq!(ck.model.params[wte.end..], out.model.params[wte.end..]);
    assert!(swap_embeddings(&ck, &BTreeMap::from([(3, 10)])).is_err());
}

#[test]
fn checkpoint_roundtrip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut ck = fresh_checkpoint(4);
    continue_training(&mut ck, &toy_sequences(), 0, 7, None).unwrap();
    let path = dir.path().join("ck.bin");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let path2 = dir.path().join("ck2.bin");
    loaded.save(&path2).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
    assert!(Checkpoint::from_bytes(&std::fs::read(&path).unwrap()[..100]).is_err());
}

#[test]
fn training_is_deterministic_and_resumable() {
    let seqs = toy_sequences();
    let cfg = tiny_cfg(10);
    let tc = quick_train_cfg(30, 11);
    let a = train(&seqs, &cfg, &tc, 0, None).unwrap();
    let b = train(&seqs, &cfg, &tc, 0, None).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.rows.len(), 30);
    for (s, _, lr) in &a.log.rows {
        assert_eq!(*lr, lr_at(&tc, *s));
    }

    let mut half = fresh_checkpoint(11);
    half.train_config = tc.clone();
    half.model = Model::new(cfg.clone(), 11).unwrap();
    continue_training(&mut half, &seqs, 0, 13, None).unwrap();
    let reloaded = Checkpoint::from_bytes(&half.to_bytes()).unwrap();
    let mut resumed = reloaded;
    continue_training(&mut resumed, &seqs, 0, 30, None).unwrap();
    assert_eq!(resumed, a.checkpoint);

    let c = train(&seqs, &cfg, &quick_train_cfg(30, 12), 0, None).unwrap();
    assert_ne!(c.checkpoint.model.params, a.checkpoint.model.params);
}

#[test]
fn training_reduces_loss_and_gradient_norm() {
    let seq = vec![vec![1u32, 3, 5, 7, 9, 4, 6, 8, 2]];
    let cfg = ModelConfig {
        dropout: 0.0,
        ..tiny_cfg(10)
    };
    let tc = TrainConfig {
        weight_decay: 0.0,
        ..quick_train_cfg(100, 5)
    };
    let grad_norm = |m: &Model<f32>| {
        let refs: Vec<&[u32]> = seq.iter().map(|s| s.as_slice()).collect();
        let batch = Batch::from_sequences(&refs, 0);
        let (loss, cache) = m.forward_loss(&batch, None).unwrap();
        let mut g = vec![0f32; m.n_params()];
        m.backward(&cache, &batch, &mut g);
        (
            loss,
            g.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt(),
        )
    };
    let init = Model::<f32>::new(cfg.clone(), 5).unwrap();
    let (l0, g0) = grad_norm(&init);
    let out = train(&seq, &cfg, &tc, 0, None).unwrap();
    let (l1, g1) = grad_norm(&out.checkpoint.model);
    assert!(l1 < 0.1 * l0, "loss {l0} -> {l1}");
    assert!(g1 < g0, "grad norm {g0} -> {g1}");
}

#[test]
fn nonfinite_weights_abort_training() {
    let mut ck = fresh_checkpoint(2);
    ck.model.params.iter_mut().for_each(|p| *p = f32::NAN);
    let err = continue_training(&mut ck, &toy_sequences(), 0, 5, None).unwrap_err();
    assert!(
        err.to_string().contains("diverged") || err.to_string().to_lowercase().contains("nan"),
        "{err}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn earlier_positions_ignore_future_tokens(
        ids in prop::collection::vec(0u32..10, 2..12),
        pos in 0usize..11,
        replacement in 0u32..10,
    ) {
        let m = Model::<f32>::new(tiny_cfg(10), 8).unwrap();
        let t = pos % (ids.len() - 1);
        let mut other = ids.clone();
        other[t + 1] = replacement;
        let a = m.forward(&ids).unwrap();
        let b = m.forward(&other).unwrap();
        for p in 0..=t {
            prop_assert_eq!(a.log_probs_at(p), b.log_probs_at(p));
            for l in 0..a.hidden.n_layers() {
                prop_assert_eq!(a.hidden.at(l, p), b.hidden.at(l, p));
            }
        }
    }

    #[test]
    fn completion_scores_add_over_splits(
        prompt in prop::collection::vec(0u32..10, 1..5),
        completion in prop::collection::vec(0u32..10, 0..6),
        cut in 0usize..6,
    ) {
        let m = jittered(tiny_cfg(10), 6);
        let cut = cut.min(completion.len());
        let whole = score_completion(&m, &prompt, &completion).unwrap();
        let extended: Vec<u32> = prompt.iter().chain(&completion[..cut]).copied().collect();
        let parts = score_completion(&m, &prompt, &completion[..cut]).unwrap()
            + score_completion(&m, &extended, &completion[cut..]).unwrap();
        prop_assert!((whole - parts).abs() < 1e-10);
    }
}
