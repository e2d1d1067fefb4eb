mod common;

use common::{matrix, quadrature_row};
use proptest::prelude::*;
use wuglab::corpusgen::{generate_corpus, CorpusCondition, CorpusSpec, FeatureDim};
use wuglab::hbm::*;

#[test]
fn single_observation_uniform_beta() {
    let m = matrix(vec![vec![1, 0, 0, 0, 0, 0, 0, 0, 0, 0]]);
    let beta = vec![0.1; 10];
    for alpha in [0.01, 1.0, 50.0] {
        let l = marginal_likelihood(&m, alpha, &beta).unwrap();
        assert!((l - 0.1f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn large_alpha_approaches_iid() {
    let m = matrix(vec![vec![2, 1, 0], vec![0, 1, 3]]);
    let beta = vec![1.0 / 3.0; 3];
    let l = marginal_likelihood(&m, 1e6, &beta).unwrap();
    assert!((l - 7.0 * (1.0f64 / 3.0).ln()).abs() < 1e-4);
}

#[test]
fn two_kinds_three_values_matches_quadrature() {
    let m = matrix(vec![vec![2, 0, 0], vec![0, 2, 0]]);
    let beta = vec![1.0 / 3.0; 3];
    let oracle: f64 = m.counts.iter().map(|r| quadrature_row(r, 1.0, &beta)).sum();
    assert!((marginal_likelihood(&m, 1.0, &beta).unwrap() - oracle).abs() < 1e-3);
}

#[test]
fn nonpositive_alpha_rejected() {
    let m = matrix(vec![vec![1, 0]]);
    assert!(marginal_likelihood(&m, 0.0, &[0.5, 0.5]).is_err());
    assert!(marginal_likelihood(&m, 1.0, &[1.0, 0.0]).is_err());
}

#[test]
fn grid_spans_and_normalises() {
    let g = AlphaGrid::default();
    assert_eq!(g.alphas.len(), 200);
    assert!((g.alphas[0] - 1e-3).abs() < 1e-15 && (g.alphas[199] - 1e3).abs() < 1e-9);
    assert!((g.prior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn empty_counts_give_prior() {
    let m = matrix(vec![vec![0, 0, 0]; 4]);
    let g = AlphaGrid::default();
    let p = fit_posterior(&m, &g).unwrap();
    assert!(p.degenerate);
    for (a, b) in p.weights.iter().zip(&g.prior) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn uniform_rows_pull_alpha_up() {
    let g = AlphaGrid::default();
    let peaked = fit_posterior(
        &matrix(
            (0..4)
                .map(|k| {
                    let mut r = vec![0; 4];
                    r[k] = 4;
                    r
                })
                .collect(),
        ),
        &g,
    )
    .unwrap();
    let flat = fit_posterior(&matrix(vec![vec![1, 1, 1, 1]; 4]), &g).unwrap();
    assert!(flat.mean_alpha > peaked.mean_alpha);
    // oracle: posterior means recomputed from quadrature likelihoods
    let oracle_mean = |m: &CountMatrix, beta: &[f64]| {
        let lw: Vec<f64> = g
            .alphas
            .iter()
            .zip(&g.prior)
            .map(|(&a, &w)| {
                w.ln()
                    + m.counts
                        .iter()
                        .map(|r| quadrature_row(r, a, beta))
                        .sum::<f64>()
            })
            .collect();
        let mx = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = lw.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = ws.iter().sum();
        g.alphas
            .iter()
            .zip(&ws)
            .map(|(a, w)| a * w / z)
            .sum::<f64>()
    };
    let m = matrix(vec![vec![1, 1, 1, 1]; 4]);
    let o = oracle_mean(&m, &flat.beta);
    assert!(
        (o - flat.mean_alpha).abs() / o < 1e-3,
        "{o} vs {}",
        flat.mean_alpha
    );
}

#[test]
fn predictive_limits() {
    let g = AlphaGrid::default();
    let m = matrix(vec![vec![0; 10]]);
    let post = fit_posterior(&m, &g).unwrap();
    let p = predictive(&post, &[0; 10]).unwrap();
    assert!(p.iter().all(|x| (x - 0.1).abs() < 1e-12));

    let conc = HbmPosterior {
        alphas: vec![0.005],
        weights: vec![1.0],
        mean_alpha: 0.005,
        beta: vec![0.1; 10],
        values: vec![],
        degenerate: false,
    };
    let mut obs = vec![0; 10];
    obs[3] = 1;
    let p = predictive(&conc, &obs).unwrap();
    let hand = (1.0 + 0.005 * 0.1) / 1.005;
    assert!((p[3] - hand).abs() < 1e-12 && p[3] > 0.99);

    let huge = HbmPosterior {
        alphas: vec![1e12],
        ..conc
    };
    let p = predictive(&huge, &obs).unwrap();
    assert!(p.iter().all(|x| (x - 0.1).abs() < 1e-9));
}

#[test]
fn posterior_alpha_gradient_across_conditions() {
    let g = AlphaGrid::default();
    let alpha = |c| {
        let corpus = generate_corpus(&CorpusSpec::new(c, 42, 1.0).unwrap()).unwrap();
        fit_posterior(&CountMatrix::from_corpus(&corpus, FeatureDim::Shape), &g)
            .unwrap()
            .mean_alpha
    };
    use CorpusCondition::*;
    let [reg, weak, swap, noise, scr, freq] = [
        Regular,
        WeakLabel25,
        FeatureSwap,
        NoiseInjection,
        Scrambled,
        FrequencyMatched,
    ]
    .map(alpha);
    assert!(reg < weak && weak < swap.min(noise) && swap.max(noise) < scr && scr < freq);
    assert!(reg <= 0.05 && freq >= 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn marginal_matches_quadrature_on_small_instances(
        k in 1usize..=3,
        v in 2usize..=3,
        raw in prop::collection::vec(0u64..=4, 9),
        alpha_exp in -1.0f64..1.5,
        braw in prop::collection::vec(1u32..5, 3),
    ) {
        let counts: Vec<Vec<u64>> = (0..k).map(|i| raw[i * 3..i * 3 + v].to_vec()).collect();
        let bs: f64 = braw[..v].iter().map(|&b| f64::from(b)).sum();
        let beta: Vec<f64> = braw[..v].iter().map(|&b| f64::from(b) / bs).collect();
        let alpha = 10f64.powf(alpha_exp);
        let m = matrix(counts);
        let ours = marginal_likelihood(&m, alpha, &beta).unwrap();
        let oracle: f64 = m.counts.iter().map(|r| quadrature_row(r, alpha, &beta)).sum();
        prop_assert!((ours - oracle).abs() < 1e-3, "{ours} vs {oracle}");
    }

    #[test]
    fn predictive_sums_to_one(obs in prop::collection::vec(0u64..6, 10)) {
        let m = matrix(vec![vec![3, 0, 0, 1, 0, 0, 0, 0, 0, 0], vec![0, 0, 2, 0, 0, 0, 0, 0, 0, 0]]);
        let post = fit_posterior(&m, &AlphaGrid::default()).unwrap();
        let p = predictive(&post, &obs).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(post.mean_alpha >= post.alphas[0] && post.mean_alpha <= post.alphas[199]);
    }
}
