//! Dirichlet-multinomial ideal observer with a grid posterior over the
//! concentration α and a plug-in base distribution β.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::corpusgen::{Corpus, FeatureDim, N_FEATURE_TOKENS};
use crate::error::{Error, Result};
use crate::eval::RunResultRow;
use crate::stats::{kl_divergence, KL_FLOOR};

pub const GRID_POINTS: usize = 200;
pub const GRID_MIN: f64 = 1e-3;
pub const GRID_MAX: f64 = 1e3;

/// Per-kind counts over the values of one feature dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMatrix {
    pub dim: FeatureDim,
    pub values: Vec<String>,
    pub kinds: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

impl CountMatrix {
    pub fn new(
        dim: FeatureDim,
        values: Vec<String>,
        kinds: Vec<usize>,
        counts: Vec<Vec<u64>>,
    ) -> Result<Self> {
        if counts.len() != kinds.len() || counts.iter().any(|r| r.len() != values.len()) {
            return Err(Error::Invalid("count matrix shape mismatch".into()));
        }
        Ok(CountMatrix {
            dim,
            values,
            kinds,
            counts,
        })
    }

    /// Counts of `dim` values over the sentences that name each trained
    /// kind. Sentences without the kind's noun cannot be attributed to a
    /// category by the observer and are skipped, as are slot fills from
    /// another dimension (noise).
    pub fn from_corpus(corpus: &Corpus, dim: FeatureDim) -> Self {
        let spec = corpus.spec();
        let values: Vec<String> = spec.lexicon.tokens(dim).to_vec();
        let kinds: Vec<usize> = spec.trained_kinds().map(|k| k.kind_id).collect();
        let mut counts = vec![vec![0u64; values.len()]; kinds.len()];
        for r in &corpus.metadata.provenance {
            let kind = spec.kind(r.kind_id);
            if !r.has_noun(kind) {
                continue;
            }
            let Some(row) = kinds.iter().position(|&k| k == r.kind_id) else {
                continue;
            };
            if let Some(v) = values.iter().position(|t| t == r.fill(dim)) {
                counts[row][v] += 1;
            }
        }
        CountMatrix {
            dim,
            values,
            kinds,
            counts,
        }
    }

    pub fn n_values(&self) -> usize {
        self.values.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Add-one smoothed column frequencies.
    pub fn empirical_beta(&self) -> Vec<f64> {
        let v = self.n_values();
        let denom = self.total() as f64 + v as f64;
        (0..v)
            .map(|i| (self.counts.iter().map(|r| r[i]).sum::<u64>() as f64 + 1.0) / denom)
            .collect()
    }

    /// CSV with header `kind_id,<value...>`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("kind_id,{}\n", self.values.join(","));
        for (k, row) in self.kinds.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            s.push_str(&format!("{k},{}\n", cells.join(",")));
        }
        s
    }
}

/// Log probability of one kind's observation sequence under a Dirichlet
/// (α β) prior on its value distribution.
pub fn row_log_likelihood(row: &[u64], alpha: f64, beta: &[f64]) -> f64 {
    let n: u64 = row.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let mut s = ln_gamma(alpha) - ln_gamma(n as f64 + alpha);
    for (&c, &b) in row.iter().zip(beta) {
        if c > 0 {
            let a = alpha * b;
            s += ln_gamma(c as f64 + a) - ln_gamma(a);
        }
    }
    s
}

/// Σ over kinds of the Dirichlet-multinomial sequence log-likelihood.
pub fn marginal_likelihood(counts: &CountMatrix, alpha: f64, beta: &[f64]) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Invalid(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    check_simplex(beta, counts.n_values())?;
    Ok(counts
        .counts
        .iter()
        .map(|r| row_log_likelihood(r, alpha, beta))
        .sum())
}

fn check_simplex(beta: &[f64], n: usize) -> Result<()> {
    let s: f64 = beta.iter().sum();
    if beta.len() != n || beta.iter().any(|&b| b <= 0.0) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(
            "beta must be a strictly positive simplex vector".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    pub alphas: Vec<f64>,
    pub prior: Vec<f64>,
}

impl AlphaGrid {
    /// Exponential(rate) prior discretised on a log-spaced grid; each
    /// point's weight is the density times its width in α.
    pub fn exponential(rate: f64, points: usize, lo: f64, hi: f64) -> Self {
        let step = (hi / lo).ln() / (points - 1) as f64;
        let alphas: Vec<f64> = (0..points).map(|i| lo * (step * i as f64).exp()).collect();
        let raw: Vec<f64> = alphas
            .iter()
            .map(|&a| rate * (-rate * a).exp() * a * step)
            .collect();
        let z: f64 = raw.iter().sum();
        AlphaGrid {
            alphas,
            prior: raw.into_iter().map(|w| w / z).collect(),
        }
    }
}

impl Default for AlphaGrid {
    fn default() -> Self {
        AlphaGrid::exponential(1.0, GRID_POINTS, GRID_MIN, GRID_MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HbmPosterior {
    pub alphas: Vec<f64>,
    pub weights: Vec<f64>,
    pub mean_alpha: f64,
    pub beta: Vec<f64>,
    pub values: Vec<String>,
    /// Set when the counts carry no information and the posterior is the prior.
    pub degenerate: bool,
}

pub fn fit_posterior(counts: &CountMatrix, grid: &AlphaGrid) -> Result<HbmPosterior> {
    if counts.counts.is_empty() {
        return Err(Error::Invalid("count matrix has no kinds".into()));
    }
    let beta = counts.empirical_beta();
    let degenerate = counts.total() == 0;
    let log_post: Vec<f64> = grid
        .alphas
        .iter()
        .zip(&grid.prior)
        .map(|(&a, &w)| Ok(w.ln() + marginal_likelihood(counts, a, &beta)?))
        .collect::<Result<_>>()?;
    let max = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = log_post.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.into_iter().map(|w| w / z).collect();
    let mean_alpha = grid.alphas.iter().zip(&weights).map(|(a, w)| a * w).sum();
    Ok(HbmPosterior {
        alphas: grid.alphas.clone(),
        weights,
        mean_alpha,
        beta,
        values: counts.values.clone(),
        degenerate,
    })
}

/// Posterior predictive for the next value of a kind with the given counts.
pub fn predictive(post: &HbmPosterior, observed: &[u64]) -> Result<Vec<f64>> {
    if observed.len() != post.beta.len() {
        return Err(Error::Invalid("observation vector length mismatch".into()));
    }
    let n: f64 = observed.iter().sum::<u64>() as f64;
    let mut out = vec![0.0; observed.len()];
    for (&a, &w) in post.alphas.iter().zip(&post.weights) {
        for (i, o) in out.iter_mut().enumerate() {
            *o += w * (observed[i] as f64 + a * post.beta[i]) / (n + a);
        }
    }
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlItem {
    pub item_id: String,
    pub model_p_target: f64,
    pub hbm_p_target: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub n_items: usize,
    pub mean_kl: f64,
    pub observed_exemplars: u64,
    pub floored: bool,
    pub items: Vec<KlItem>,
}

/// One forced-choice item as the observer sees it: which values are the
/// target and foil and what was observed of the kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverItem {
    pub item_id: String,
    pub target: usize,
    pub foil: usize,
    pub observed: Vec<u64>,
}

/// Mean over items of KL(model || observer) between the Bernoullis each
/// induces over {target, foil}.
pub fn hbm_forced_choice_kl(
    rows: &[RunResultRow],
    post: &HbmPosterior,
    items: &[ObserverItem],
    observed_exemplars: u64,
) -> Result<KlReport> {
    let mut out = Vec::new();
    let mut floored = false;
    for item in items {
        let Some(row) = rows.iter().find(|r| r.item_id == item.item_id) else {
            continue;
        };
        let d = row.logp_target - row.logp_foil;
        let pm = 1.0 / (1.0 + (-d).exp());
        let pred = predictive(post, &item.observed)?;
        let (t, f) = (pred[item.target], pred[item.foil]);
        let ph = t / (t + f);
        let k = kl_divergence(&[pm, 1.0 - pm], &[ph, 1.0 - ph])?;
        floored |= k.floored || ph < KL_FLOOR || 1.0 - ph < KL_FLOOR;
        out.push(KlItem {
            item_id: item.item_id.clone(),
            model_p_target: pm,
            hbm_p_target: ph,
            kl: k.nats,
        });
    }
    let n = out.len();
    Ok(KlReport {
        n_items: n,
        mean_kl: if n == 0 {
            0.0
        } else {
            out.iter().map(|i| i.kl).sum::<f64>() / n as f64
        },
        observed_exemplars,
        floored,
        items: out,
    })
}

/// Observer view of the second-order items: each novel kind is shown
/// `exemplars` observations of its own stable value.
pub fn second_order_items(
    corpus: &Corpus,
    battery: &crate::battery::Battery,
    exemplars: u64,
) -> Vec<ObserverItem> {
    let spec = corpus.spec();
    let shapes = spec.lexicon.tokens(FeatureDim::Shape);
    let idx = |tok: &str| shapes.iter().position(|s| s == tok);
    battery
        .items_of(crate::battery::ItemType::SecondOrder)
        .filter_map(|item| {
            let kind = spec.kind(item.kind_id);
            let target = idx(item.target_completion.trim())?;
            let foil = idx(item.foil_completion.trim())?;
            let mut observed = vec![0u64; N_FEATURE_TOKENS];
            if let Some(s) = idx(&kind.stable_token) {
                observed[s] = exemplars;
            }
            Some(ObserverItem {
                item_id: item.item_id.clone(),
                target,
                foil,
                observed,
            })
        })
        .collect()
}
