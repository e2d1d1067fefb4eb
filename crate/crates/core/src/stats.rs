//! Nonparametric and equivalence tests used for the hypothesis verdicts.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

pub const MONTE_CARLO_SEED: u64 = 20240101;
pub const MONTE_CARLO_DRAWS: usize = 100_000;
/// Largest total sample size for which trend tests are computed exactly.
pub const EXACT_MAX_TOTAL: usize = 20;
pub const KL_FLOOR: f64 = 1e-12;

const P_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub label: String,
    pub values: Vec<f64>,
}

impl SampleGroup {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("sample group must be nonempty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("sample values must be finite".into()));
        }
        Ok(SampleGroup {
            label: label.into(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Normal,
    MonteCarlo,
    StudentT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: String,
    pub statistic: f64,
    pub p_value: f64,
    pub method: PMethod,
    pub effect_size: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub df: Option<f64>,
    pub correction: Option<String>,
    pub flags: Vec<String>,
}

impl TestResult {
    fn new(test: &str, statistic: f64, p_value: f64, method: PMethod) -> Self {
        TestResult {
            test: test.to_string(),
            statistic,
            p_value: p_value.clamp(0.0, 1.0),
            method,
            effect_size: None,
            ci: None,
            df: None,
            correction: None,
            flags: Vec::new(),
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Null distribution of the trend statistic (in half-units) for groups of
/// the given sizes over the pooled values. Every assignment of the pooled
/// observations to group slots is equally likely; ties score one half.
/// Returns counts indexed by 2·J, normalised to probabilities.
fn trend_null(pooled: &[f64], sizes: &[usize]) -> Vec<f64> {
    let mut sorted = pooled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut blocks: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        blocks.push(j);
        i += j;
    }
    let k = sizes.len();
    let max_j2: usize = {
        let mut s = 0;
        for a in 0..k {
            for b in a + 1..k {
                s += 2 * sizes[a] * sizes[b];
            }
        }
        s
    };
    // state: placed counts per group -> distribution over 2J (log-free, f64 counts)
    let mut states: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    let mut init = vec![0.0; max_j2 + 1];
    init[0] = 1.0;
    states.insert(vec![0; k], init);
    for &t in &blocks {
        let mut next: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
        for (placed, dist) in &states {
            for split in compositions(t, k) {
                if (0..k).any(|g| placed[g] + split[g] > sizes[g]) {
                    continue;
                }
                let ways = multinomial(t, &split);
                let mut add = 0usize;
                for b in 0..k {
                    for a in 0..b {
                        add += 2 * split[b] * placed[a] + split[a] * split[b];
                    }
                }
                let key: Vec<usize> = (0..k).map(|g| placed[g] + split[g]).collect();
                let entry = next.entry(key).or_insert_with(|| vec![0.0; max_j2 + 1]);
                for (j2, &w) in dist.iter().enumerate() {
                    if w != 0.0 {
                        entry[j2 + add] += w * ways;
                    }
                }
            }
        }
        states = next;
    }
    let mut dist = states.into_values().next().expect("all values placed");
    let total: f64 = dist.iter().sum();
    dist.iter_mut().for_each(|w| *w /= total);
    dist
}

fn compositions(t: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 1 {
        return vec![vec![t]];
    }
    let mut out = Vec::new();
    for first in 0..=t {
        for mut rest in compositions(t - first, k - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn multinomial(t: usize, parts: &[usize]) -> f64 {
    let mut ln = statrs::function::factorial::ln_factorial(t as u64);
    for &p in parts {
        ln -= statrs::function::factorial::ln_factorial(p as u64);
    }
    ln.exp().round()
}

/// Count of (x in earlier, y in later) pairs with y > x, ties counting 1/2.
fn pair_score(earlier: &[f64], later: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in earlier {
        for &y in later {
            if y > x {
                s += 1.0;
            } else if y == x {
                s += 0.5;
            }
        }
    }
    s
}

/// Two-sided Mann-Whitney test. `u` is the number of (a, b) pairs with
/// a > b (ties 1/2). Exact mode enumerates every assignment of the pooled
/// values; otherwise a tie-corrected normal approximation is used.
pub fn mann_whitney_u(a: &SampleGroup, b: &SampleGroup, exact: bool) -> Result<TestResult> {
    let (na, nb) = (a.len(), b.len());
    let u = pair_score(&b.values, &a.values);
    let centre = na as f64 * nb as f64 / 2.0;
    let mut pooled = a.values.clone();
    pooled.extend_from_slice(&b.values);
    let mut res = if exact {
        if na > 10 || nb > 10 {
            return Err(Error::Invalid(format!(
                "exact Mann-Whitney needs both groups of size <= 10 (got {na}, {nb})"
            )));
        }
        // With groups ordered (b, a), the trend statistic equals u.
        let dist = trend_null(&pooled, &[nb, na]);
        let dev = (u - centre).abs();
        let p: f64 = dist
            .iter()
            .enumerate()
            .filter(|(j2, _)| ((*j2 as f64) / 2.0 - centre).abs() >= dev - P_EPS)
            .map(|(_, w)| w)
            .sum();
        TestResult::new("mann_whitney_u", u, p, PMethod::Exact)
    } else {
        let n = (na + nb) as f64;
        let ties = tie_term(&pooled);
        let var = na as f64 * nb as f64 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((u - centre).abs() - 0.5).max(0.0) / var.sqrt();
            2.0 * (1.0 - std_normal().cdf(z))
        };
        TestResult::new("mann_whitney_u", u, p, PMethod::Normal)
    };
    res.effect_size = Some(u / (na * nb) as f64);
    Ok(res)
}

fn tie_term(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut s = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count() as f64;
        s += t * t * t - t;
        i += t as usize;
    }
    s
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid normal")
}

/// Jonckheere-Terpstra test for an increasing trend across the groups in
/// the given order. One-sided p; exact when the total sample size is at
/// most [`EXACT_MAX_TOTAL`], Monte Carlo otherwise. Effect size is
/// Kendall's tau-b between group index and value.
pub fn jonckheere_terpstra(groups: &[SampleGroup], exact: bool) -> Result<TestResult> {
    if groups.len() < 3 {
        return Err(Error::Invalid("trend test needs at least 3 groups".into()));
    }
    let sizes: Vec<usize> = groups.iter().map(SampleGroup::len).collect();
    let values: Vec<&[f64]> = groups.iter().map(|g| g.values.as_slice()).collect();
    let stat = jt_statistic(&values);
    let pooled: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.values.iter().copied())
        .collect();
    let total = pooled.len();
    let mut res = if exact && total <= EXACT_MAX_TOTAL {
        let dist = trend_null(&pooled, &sizes);
        let p: f64 = dist
            .iter()
            .enumerate()
            .filter(|(j2, _)| *j2 as f64 / 2.0 >= stat - P_EPS)
            .map(|(_, w)| w)
            .sum();
        TestResult::new("jonckheere_terpstra", stat, p, PMethod::Exact)
    } else {
        let mut rng = Pcg64Mcg::seed_from_u64(MONTE_CARLO_SEED);
        let mut perm = pooled.clone();
        let mut hits = 0usize;
        for _ in 0..MONTE_CARLO_DRAWS {
            perm.shuffle(&mut rng);
            let mut parts = Vec::with_capacity(sizes.len());
            let mut at = 0;
            for &n in &sizes {
                parts.push(&perm[at..at + n]);
                at += n;
            }
            if jt_statistic(&parts) >= stat - P_EPS {
                hits += 1;
            }
        }
        let p = (hits + 1) as f64 / (MONTE_CARLO_DRAWS + 1) as f64;
        TestResult::new("jonckheere_terpstra", stat, p, PMethod::MonteCarlo)
    };
    let xs: Vec<f64> = sizes
        .iter()
        .enumerate()
        .flat_map(|(g, &n)| std::iter::repeat_n(g as f64, n))
        .collect();
    res.effect_size = Some(kendall_tau_b(&xs, &pooled));
    Ok(res)
}

fn jt_statistic(groups: &[&[f64]]) -> f64 {
    let mut s = 0.0;
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            s += pair_score(groups[i], groups[j]);
        }
    }
    s
}

/// Kendall's tau-b; 0 when either variable is constant.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (mut conc, mut disc, mut tx, mut ty) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tx += 1.0;
            }
            if dy == 0.0 {
                ty += 1.0;
            }
            if dx != 0.0 && dy != 0.0 {
                if (dx > 0.0) == (dy > 0.0) {
                    conc += 1.0;
                } else {
                    disc += 1.0;
                }
            }
        }
    }
    let n0 = (n * n.saturating_sub(1)) as f64 / 2.0;
    let denom = ((n0 - tx) * (n0 - ty)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (conc - disc) / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TostResult {
    pub center: f64,
    /// Equivalence margin in percentage points.
    pub bound_pp: f64,
    pub mean: f64,
    pub p_lower: f64,
    pub p_upper: f64,
    pub ci90: (f64, f64),
    pub equivalent: bool,
    pub flags: Vec<String>,
}

impl TostResult {
    pub fn p_value(&self) -> f64 {
        self.p_lower.max(self.p_upper)
    }
}

/// Two one-sided t-tests of the mean against `center ± bound_pp / 100`.
pub fn tost_equivalence(values: &SampleGroup, center: f64, bound_pp: f64) -> Result<TostResult> {
    let n = values.len();
    if n < 3 {
        return Err(Error::Invalid(format!(
            "equivalence test needs n >= 3 (got {n})"
        )));
    }
    let bound = bound_pp / 100.0;
    let m = values.mean();
    let se = sd(&values.values) / (n as f64).sqrt();
    let (lo, hi) = (center - bound, center + bound);
    if se == 0.0 {
        let inside = m > lo && m < hi;
        let p = if inside { 0.0 } else { 1.0 };
        return Ok(TostResult {
            center,
            bound_pp,
            mean: m,
            p_lower: p,
            p_upper: p,
            ci90: (m, m),
            equivalent: inside,
            flags: vec!["zero_variance".into()],
        });
    }
    let t = StudentsT::new(0.0, 1.0, n as f64 - 1.0).expect("valid t");
    let p_lower = 1.0 - t.cdf((m - lo) / se);
    let p_upper = t.cdf((m - hi) / se);
    let q = t.inverse_cdf(0.95);
    Ok(TostResult {
        center,
        bound_pp,
        mean: m,
        p_lower,
        p_upper,
        ci90: (m - q * se, m + q * se),
        equivalent: p_lower.max(p_upper) < 0.05,
        flags: Vec::new(),
    })
}

fn binom_ln_pmf(k: u64, n: u64, p: f64) -> f64 {
    if p == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if p == 1.0 {
        return if k == n { 0.0 } else { f64::NEG_INFINITY };
    }
    ln_binomial(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()
}

/// Exact two-sided binomial test: total mass of outcomes no more probable
/// than the observed one.
pub fn binomial_test(successes: u64, n: u64, p0: f64) -> Result<TestResult> {
    if successes > n {
        return Err(Error::Invalid(format!("{successes} successes out of {n}")));
    }
    if !(0.0..=1.0).contains(&p0) {
        return Err(Error::Invalid(format!("p0 = {p0} outside [0, 1]")));
    }
    let obs = binom_ln_pmf(successes, n, p0);
    let p: f64 = (0..=n)
        .map(|k| binom_ln_pmf(k, n, p0))
        .filter(|&l| l <= obs + 1e-7 * obs.abs().max(1e-300))
        .map(f64::exp)
        .sum();
    let mut res = TestResult::new("binomial", successes as f64, p, PMethod::Exact);
    res.effect_size = Some(if n == 0 {
        0.0
    } else {
        successes as f64 / n as f64
    });
    Ok(res)
}

/// Paired two-sided t-test on a - b.
pub fn paired_t(a: &SampleGroup, b: &SampleGroup) -> Result<TestResult> {
    let n = a.len();
    if n != b.len() || n < 2 {
        return Err(Error::Invalid(format!(
            "paired t needs equal lengths >= 2 (got {n}, {})",
            b.len()
        )));
    }
    let d: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    let md = mean(&d);
    let s = sd(&d);
    let df = n as f64 - 1.0;
    let mut res = if s == 0.0 {
        let (t, p) = if md == 0.0 {
            (0.0, 1.0)
        } else {
            (md.signum() * f64::INFINITY, 0.0)
        };
        let mut r = TestResult::new("paired_t", t, p, PMethod::StudentT);
        r.flags.push("zero_variance".into());
        r
    } else {
        let t = md / (s / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, df).expect("valid t");
        let p = 2.0 * (1.0 - dist.cdf(t.abs()));
        TestResult::new("paired_t", t, p, PMethod::StudentT)
    };
    res.df = Some(df);
    res.effect_size = Some(if s == 0.0 { 0.0 } else { md / s });
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonferroniResult {
    pub alpha: f64,
    pub threshold: f64,
    pub adjusted: Vec<f64>,
    pub significant: Vec<bool>,
}

pub fn bonferroni(pvals: &[f64], alpha: f64) -> BonferroniResult {
    let m = pvals.len().max(1) as f64;
    let threshold = alpha / m;
    BonferroniResult {
        alpha,
        threshold,
        adjusted: pvals.iter().map(|p| (p * m).min(1.0)).collect(),
        significant: pvals.iter().map(|&p| p < threshold).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kl {
    pub nats: f64,
    /// True when some q_i had to be floored to keep the divergence finite.
    pub floored: bool,
}

/// KL(p || q) in nats. Terms with p_i = 0 vanish; q_i = 0 where p_i > 0 is
/// floored at [`KL_FLOOR`] and flagged.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<Kl> {
    if p.len() != q.len() {
        return Err(Error::Invalid(format!(
            "KL over {} vs {} outcomes",
            p.len(),
            q.len()
        )));
    }
    let mut floored = false;
    let mut s = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi < 0.0 || qi < 0.0 {
            return Err(Error::Invalid("negative probability".into()));
        }
        if pi == 0.0 {
            continue;
        }
        let q_eff = if qi < KL_FLOOR {
            floored = true;
            KL_FLOOR
        } else {
            qi
        };
        s += pi * (pi / q_eff).ln();
    }
    Ok(Kl { nats: s, floored })
}
