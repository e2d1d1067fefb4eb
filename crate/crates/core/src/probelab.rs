//! Linear probes on hidden states with a kind-level permutation control,
//! and cosine-similarity analyses of noun representations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};

use crate::corpusgen::rng::stream_with;
use crate::error::{Error, Result};
use crate::lm::Scalar;

pub const FOLD_SEED: u64 = 7;
pub const N_FOLDS: usize = 3;
pub const PROBE_L2: f64 = 1e-3;
pub const N_SHUFFLES: usize = 100;
pub const MAX_ITERS: usize = 5000;
pub const GRAD_TOL: f64 = 1e-6;

const SHUFFLE_SALT: u64 = 0x5348_5546;

/// Feature rows for one layer with class labels and the group (kind) each
/// row belongs to. Folds are assigned per group so no kind is split
/// between training and held-out rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub folds: Vec<usize>,
    pub n_classes: usize,
}

impl ProbeDataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        groups: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let n = features.len();
        if n == 0 || labels.len() != n || groups.len() != n {
            return Err(Error::Invalid(
                "probe dataset rows, labels and groups must align".into(),
            ));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Invalid("ragged probe features".into()));
        }
        if labels.iter().any(|&l| l >= n_classes) {
            return Err(Error::Invalid("label out of range".into()));
        }
        let folds = assign_folds(&labels, &groups, N_FOLDS, FOLD_SEED);
        Ok(ProbeDataset {
            features,
            labels,
            groups,
            folds,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    /// Same rows and folds with each group's label replaced through `map`.
    pub fn relabel(&self, map: &BTreeMap<usize, usize>) -> Self {
        ProbeDataset {
            labels: self.groups.iter().map(|g| map[g]).collect(),
            ..self.clone()
        }
    }

    /// Label of each group (first row wins).
    pub fn group_labels(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for (&g, &l) in self.groups.iter().zip(&self.labels) {
            m.entry(g).or_insert(l);
        }
        m
    }
}

/// Group-level folds, stratified by each group's label: groups sharing a
/// label are shuffled and dealt round-robin, the rotation continuing from
/// one label to the next.
pub fn assign_folds(labels: &[usize], groups: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for (&g, &l) in groups.iter().zip(labels) {
        if seen.insert(g) {
            by_label.entry(l).or_default().push(g);
        }
    }
    let mut rng = stream_with(seed, 0xF01D);
    let mut fold_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut next = 0;
    for gs in by_label.values_mut() {
        gs.shuffle(&mut rng);
        for &g in gs.iter() {
            fold_of.insert(g, next % k);
            next += 1;
        }
    }
    groups.iter().map(|g| fold_of[g]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub accuracy: f64,
    /// Largest iteration count over the folds.
    pub iterations: usize,
    pub converged: bool,
}

/// Multinomial logistic regression weights; the last feature row is the
/// (unpenalised) bias.
struct Softmax {
    w: Vec<f64>,
    d: usize,
    c: usize,
}

fn standardize(train: &[&Vec<f64>], rows: &[&Vec<f64>]) -> Vec<f64> {
    let d = train[0].len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for r in train {
        for (m, x) in mean.iter_mut().zip(r.iter()) {
            *m += x / n;
        }
    }
    let mut sd = vec![0.0; d];
    for r in train {
        for j in 0..d {
            sd[j] += (r[j] - mean[j]).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd
        .into_iter()
        .map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    let mut out = Vec::with_capacity(rows.len() * (d + 1));
    for r in rows {
        for j in 0..d {
            out.push((r[j] - mean[j]) / sd[j]);
        }
        out.push(1.0);
    }
    out
}

/// Largest eigenvalue of XᵀX / n by power iteration.
fn gram_norm(x: &[f64], n: usize, d: usize) -> f64 {
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut xv = vec![0.0; n];
    let mut lam = 0.0;
    for _ in 0..50 {
        f64::gemm(n, d, 1, x, false, &v, false, &mut xv, 0.0);
        let mut u = vec![0.0; d];
        f64::gemm(d, n, 1, x, true, &xv, false, &mut u, 0.0);
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lam = norm / n as f64;
        v = u.into_iter().map(|a| a / norm).collect();
    }
    lam
}

/// Per-row weights making every class present in `y` carry equal total
/// weight, normalised to sum to 1, so held-out predictions are not pulled
/// toward classes that happen to be frequent in the training folds.
fn balanced_weights(y: &[usize], c: usize) -> Vec<f64> {
    let mut counts = vec![0usize; c];
    for &l in y {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    y.iter()
        .map(|&l| 1.0 / (present * counts[l] as f64))
        .collect()
}

/// Gradient of the weighted cross-entropy plus L2 penalty at `w`.
#[allow(clippy::too_many_arguments)]
fn gradient(
    x: &[f64],
    y: &[usize],
    rw: &[f64],
    d: usize,
    c: usize,
    w: &[f64],
    l2: f64,
    logits: &mut [f64],
) -> Vec<f64> {
    let n = y.len();
    f64::gemm(n, d, c, x, false, w, false, logits, 0.0);
    for (i, row) in logits.chunks_mut(c).enumerate() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v *= rw[i] / z;
        }
        row[y[i]] -= rw[i];
    }
    let mut g = vec![0.0; d * c];
    f64::gemm(d, n, c, x, true, logits, false, &mut g, 0.0);
    for j in 0..(d - 1) * c {
        g[j] += l2 * w[j];
    }
    g
}

/// Nesterov-accelerated gradient descent with step 1/L and adaptive restart.
fn fit_softmax(x: &[f64], y: &[usize], d: usize, c: usize, l2: f64) -> (Softmax, usize, bool) {
    let n = y.len();
    let rw = balanced_weights(y, c);
    let max_w = rw.iter().copied().fold(0.0, f64::max);
    let lip = 0.5 * gram_norm(x, n, d) * max_w * n as f64 + l2;
    let step = 1.0 / lip.max(1e-12);
    let mut w = vec![0.0; d * c];
    let mut prev = w.clone();
    let mut look = w.clone();
    let mut t = 1.0f64;
    let mut logits = vec![0.0; n * c];
    for it in 0..MAX_ITERS {
        let g = gradient(x, y, &rw, d, c, &look, l2, &mut logits);
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn < GRAD_TOL {
            return (Softmax { w: look, d, c }, it, true);
        }
        let next: Vec<f64> = look.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        // restart momentum when it points uphill
        let uphill: f64 = g
            .iter()
            .zip(next.iter().zip(&w))
            .map(|(gi, (n1, w0))| gi * (n1 - w0))
            .sum();
        let t_next = if uphill > 0.0 {
            1.0
        } else {
            (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0
        };
        let mom = if uphill > 0.0 {
            0.0
        } else {
            (t - 1.0) / t_next
        };
        prev.clone_from(&w);
        w = next;
        look = w
            .iter()
            .zip(&prev)
            .map(|(a, b)| a + mom * (a - b))
            .collect();
        t = t_next;
    }
    let g = gradient(x, y, &rw, d, c, &w, l2, &mut logits);
    let converged = g.iter().map(|v| v * v).sum::<f64>().sqrt() < GRAD_TOL;
    (Softmax { w, d, c }, MAX_ITERS, converged)
}

impl Softmax {
    fn predict(&self, x: &[f64], n: usize) -> Vec<usize> {
        let mut logits = vec![0.0; n * self.c];
        f64::gemm(
            n,
            self.d,
            self.c,
            x,
            false,
            &self.w,
            false,
            &mut logits,
            0.0,
        );
        logits
            .chunks(self.c)
            .map(|r| crate::lm::argmax_lowest(r))
            .collect()
    }
}

/// Held-out accuracy pooled over the folds.
pub fn train_probe(ds: &ProbeDataset, l2: f64) -> Result<ProbeFit> {
    if l2 <= 0.0 {
        return Err(Error::Invalid("probe L2 must be positive".into()));
    }
    let d = ds.dim() + 1;
    let mut correct = 0usize;
    let mut scored = 0usize;
    let mut iterations = 0;
    let mut converged = true;
    for fold in 0..N_FOLDS {
        let train: Vec<usize> = (0..ds.len()).filter(|&i| ds.folds[i] != fold).collect();
        let test: Vec<usize> = (0..ds.len()).filter(|&i| ds.folds[i] == fold).collect();
        if test.is_empty() || train.is_empty() {
            continue;
        }
        let tr_rows: Vec<&Vec<f64>> = train.iter().map(|&i| &ds.features[i]).collect();
        let te_rows: Vec<&Vec<f64>> = test.iter().map(|&i| &ds.features[i]).collect();
        let xtr = standardize(&tr_rows, &tr_rows);
        let xte = standardize(&tr_rows, &te_rows);
        let ytr: Vec<usize> = train.iter().map(|&i| ds.labels[i]).collect();
        let (model, it, conv) = fit_softmax(&xtr, &ytr, d, ds.n_classes, l2);
        iterations = iterations.max(it);
        converged &= conv;
        let pred = model.predict(&xte, test.len());
        correct += pred
            .iter()
            .zip(&test)
            .filter(|(p, &i)| **p == ds.labels[i])
            .count();
        scored += test.len();
    }
    if scored == 0 {
        return Err(Error::Invalid("no held-out rows".into()));
    }
    Ok(ProbeFit {
        accuracy: correct as f64 / scored as f64,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationControl {
    pub true_accuracy: f64,
    pub shuffled: Vec<f64>,
    pub baseline: f64,
    pub gap: f64,
    pub p_value: f64,
}

/// Kind-level label permutations: each draw reassigns labels among the
/// same-sized groups of each fold, keeping rows and folds fixed. Every
/// fold's row-level label histogram is unchanged, so the true labelling
/// and the shuffles share the same stratification.
pub fn label_permutations(ds: &ProbeDataset, n: usize, seed: u64) -> Vec<BTreeMap<usize, usize>> {
    let base = ds.group_labels();
    let mut size: BTreeMap<usize, usize> = BTreeMap::new();
    for &g in &ds.groups {
        *size.entry(g).or_default() += 1;
    }
    // groups are exchangeable only with same-sized groups of the same fold
    let mut fold_groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (&g, &f) in ds.groups.iter().zip(&ds.folds) {
        let v = fold_groups.entry((f, size[&g])).or_default();
        if !v.contains(&g) {
            v.push(g);
        }
    }
    let mut rng: Pcg64Mcg = stream_with(seed, SHUFFLE_SALT);
    (0..n)
        .map(|_| {
            let mut m = BTreeMap::new();
            for gs in fold_groups.values() {
                let mut l: Vec<usize> = gs.iter().map(|g| base[g]).collect();
                l.shuffle(&mut rng);
                m.extend(gs.iter().copied().zip(l));
            }
            m
        })
        .collect()
}

pub fn permutation_test(
    ds: &ProbeDataset,
    maps: &[BTreeMap<usize, usize>],
    l2: f64,
) -> Result<PermutationControl> {
    let truth = train_probe(ds, l2)?.accuracy;
    let shuffled: Vec<f64> = maps
        .iter()
        .map(|m| train_probe(&ds.relabel(m), l2).map(|f| f.accuracy))
        .collect::<Result<_>>()?;
    let baseline = shuffled.iter().sum::<f64>() / shuffled.len().max(1) as f64;
    let ge = shuffled.iter().filter(|&&a| a >= truth - 1e-12).count();
    Ok(PermutationControl {
        true_accuracy: truth,
        baseline,
        gap: truth - baseline,
        p_value: (1 + ge) as f64 / (shuffled.len() + 1) as f64,
        shuffled,
    })
}

pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub layer: usize,
    pub within_trained: f64,
    pub within_novel: f64,
    pub cross: f64,
    pub n_trained: usize,
    pub n_novel: usize,
    pub n_zero_excluded: usize,
}

/// Noun vectors indexed `[noun][layer]`.
pub type NounVectors = Vec<Vec<Vec<f32>>>;

fn mean_pairwise(a: &[&Vec<f32>], b: Option<&[&Vec<f32>]>) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    match b {
        None => {
            for i in 0..a.len() {
                for j in i + 1..a.len() {
                    s += cosine(a[i], a[j]).expect("zero vectors filtered");
                    n += 1;
                }
            }
        }
        Some(b) => {
            for x in a {
                for y in b {
                    s += cosine(x, y).expect("zero vectors filtered");
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn nonzero_at(g: &NounVectors, layer: usize) -> Vec<&Vec<f32>> {
    g.iter()
        .map(|v| &v[layer])
        .filter(|v| v.iter().any(|&x| x != 0.0))
        .collect()
}

/// Mean pairwise cosine within trained nouns, within novel nouns and
/// across the two groups, per layer. Zero vectors are dropped and counted.
pub fn cosine_analysis(trained: &NounVectors, novel: &NounVectors) -> Result<Vec<CosineRow>> {
    if trained.len() < 2 || novel.len() < 2 {
        return Err(Error::Invalid(
            "cosine analysis needs at least 2 vectors per group".into(),
        ));
    }
    let layers = trained[0].len();
    (0..layers)
        .map(|l| {
            let (t, n) = (nonzero_at(trained, l), nonzero_at(novel, l));
            if t.len() < 2 || n.len() < 2 {
                return Err(Error::Invalid(format!(
                    "layer {l}: fewer than 2 nonzero vectors in a group"
                )));
            }
            Ok(CosineRow {
                layer: l,
                within_trained: mean_pairwise(&t, None),
                within_novel: mean_pairwise(&n, None),
                cross: mean_pairwise(&t, Some(&n)),
                n_trained: t.len(),
                n_novel: n.len(),
                n_zero_excluded: trained.len() + novel.len() - t.len() - n.len(),
            })
        })
        .collect()
}

/// Seeded one-to-one mapping of each novel id onto a distinct trained id.
pub fn random_swap_mapping(
    novel: &[u32],
    trained: &[u32],
    seed: u64,
) -> Result<BTreeMap<u32, u32>> {
    if trained.len() < novel.len() {
        return Err(Error::Invalid("not enough trained ids to swap in".into()));
    }
    let mut pool = trained.to_vec();
    pool.shuffle(&mut stream_with(seed, 0x5A1F));
    Ok(novel.iter().copied().zip(pool).collect())
}
