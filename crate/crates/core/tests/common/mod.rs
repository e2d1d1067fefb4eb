//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use wuglab::corpusgen::FeatureDim;
use wuglab::hbm::CountMatrix;

/// Mid-rank based U for group a.
pub fn rank_u(a: &[f64], b: &[f64]) -> f64 {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(f64::total_cmp);
    let midrank = |x: f64| {
        let lo = all.iter().filter(|&&v| v < x).count() as f64;
        let eq = all.iter().filter(|&&v| v == x).count() as f64;
        lo + (eq + 1.0) / 2.0
    };
    let r: f64 = a.iter().map(|&x| midrank(x)).sum();
    r - (a.len() * (a.len() + 1)) as f64 / 2.0
}

/// Every way of labelling `sizes.iter().sum()` slots with group indices
/// so that group g gets `sizes[g]` slots.
pub fn labellings(sizes: &[usize]) -> Vec<Vec<usize>> {
    fn go(left: &mut Vec<usize>, cur: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for g in 0..left.len() {
            if left[g] > 0 {
                left[g] -= 1;
                cur.push(g);
                go(left, cur, n, out);
                cur.pop();
                left[g] += 1;
            }
        }
    }
    let n = sizes.iter().sum();
    let mut out = Vec::new();
    go(&mut sizes.to_vec(), &mut Vec::with_capacity(n), n, &mut out);
    out
}

fn split(pooled: &[f64], lab: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut gs = vec![Vec::new(); k];
    for (&x, &g) in pooled.iter().zip(lab) {
        gs[g].push(x);
    }
    gs
}

/// Two-sided exact MWU p-value by enumerating every split of the pooled
/// sample.
pub fn brute_mwu_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let centre = (a.len() * b.len()) as f64 / 2.0;
    let obs = (rank_u(a, b) - centre).abs();
    let labs = labellings(&[a.len(), b.len()]);
    let hits = labs
        .iter()
        .filter(|lab| {
            let gs = split(&pooled, lab, 2);
            (rank_u(&gs[0], &gs[1]) - centre).abs() >= obs - 1e-9
        })
        .count();
    hits as f64 / labs.len() as f64
}

/// Sum over ordered group pairs of later-group U.
pub fn jt_stat(gs: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for i in 0..gs.len() {
        for j in i + 1..gs.len() {
            s += rank_u(&gs[j], &gs[i]);
        }
    }
    s
}

/// One-sided (increasing) JT p-value over every relabelling.
pub fn brute_jt_p(groups: &[Vec<f64>]) -> f64 {
    let obs = jt_stat(groups);
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let labs = labellings(&sizes);
    let hits = labs
        .iter()
        .filter(|lab| jt_stat(&split(&pooled, lab, sizes.len())) >= obs - 1e-9)
        .count();
    hits as f64 / labs.len() as f64
}

pub fn matrix(counts: Vec<Vec<u64>>) -> CountMatrix {
    let v = counts[0].len();
    let kinds = (0..counts.len()).collect();
    let values = (0..v).map(|i| format!("v{i}")).collect();
    CountMatrix::new(FeatureDim::Shape, values, kinds, counts).unwrap()
}

/// ln ∫_0^1 x^p (1-x)^q dx for p, q > -1 by composite Simpson, after
/// substitutions that remove the endpoint singularities.
pub fn ln_beta_integral(p: f64, q: f64) -> f64 {
    let (a, b) = (ln_half_integral(p, q), ln_half_integral(q, p));
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// ln ∫_0^(1/2) x^p (1-x)^q dx. For p < 0 substitute x = s^(1/(p+1)) so
/// that x^p dx = ds / (p+1); otherwise integrate directly, scaled by the
/// integrand's maximum on the interval.
fn ln_half_integral(p: f64, q: f64) -> f64 {
    if p >= 0.0 {
        let x_max = if p + q > 0.0 {
            (p / (p + q)).min(0.5)
        } else {
            0.5
        };
        let log_f = |x: f64| p * x.ln() + q * (1.0 - x).ln();
        let c = log_f(x_max.max(1e-300));
        let f = |x: f64| {
            if x == 0.0 {
                if p == 0.0 {
                    (-c).exp()
                } else {
                    0.0
                }
            } else {
                (log_f(x) - c).exp()
            }
        };
        return c + simpson(f, 0.0, 0.5).ln();
    }
    let f = |s: f64| (1.0 - s.powf(1.0 / (p + 1.0))).powf(q) / (p + 1.0);
    simpson(f, 0.0, 0.5f64.powf(p + 1.0)).ln()
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let n = 20_000;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// ln ∫ over the simplex of Π θ_i^(e_i) by stick-breaking, one 1-D
/// integral per coordinate.
fn ln_simplex_integral(e: &[f64]) -> f64 {
    if e.len() == 1 {
        return 0.0;
    }
    let rest: f64 = e[1..].iter().sum::<f64>() + (e.len() - 2) as f64;
    ln_beta_integral(e[0], rest) + ln_simplex_integral(&e[1..])
}

/// Marginal probability of a kind's observation sequence by integrating the
/// likelihood against the Dirichlet density, normalised numerically.
pub fn quadrature_row(row: &[u64], alpha: f64, beta: &[f64]) -> f64 {
    let prior: Vec<f64> = beta.iter().map(|b| alpha * b - 1.0).collect();
    let post: Vec<f64> = prior.iter().zip(row).map(|(e, &c)| e + c as f64).collect();
    ln_simplex_integral(&post) - ln_simplex_integral(&prior)
}
