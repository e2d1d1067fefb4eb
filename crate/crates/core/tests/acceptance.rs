//! Acceptance suite for the desk-scale subset: Tiny models on Regular,
//! FeatureSwap and Scrambled, seeds 42 and 123. Prints one PASS/FAIL line
//! per criterion.
//!
//! Trained checkpoints are cached under the data root (`$WUGLAB_DATA_DIR`,
//! else `target/wuglab-acceptance`); a cold run trains all six models.
//! Set `WUGLAB_ACCEPTANCE_STRICT=1` to exit nonzero on any FAIL, and
//! `WUGLAB_ACCEPTANCE_QUICK=1` to skip everything that needs a trained
//! model (those criteria then report FAIL as not run).

mod common;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64Mcg;
use wuglab::battery::ItemType;
use wuglab::corpusgen::{
    checksum, generate_corpus, manipulation_check, Corpus, CorpusCondition, CorpusSpec, SEEDS,
};
use wuglab::eval::{self, greedy_diagnostics, RunResultRow};
use wuglab::hbm::{marginal_likelihood, HbmPosterior};
use wuglab::lm::{self, SizeTag};
use wuglab::pipeline::{
    self, run_stages, CosineCsvRow, MatrixConfig, Overrides, ProbeRow, RunSpec, Stage, COSINE_FILE,
    PROBE_FILE, RESULTS_FILE,
};
use wuglab::stats::{self, SampleGroup};

use common::{brute_jt_p, brute_mwu_p, jt_stat, matrix, quadrature_row, rank_u};

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Check { name, pass, detail }
}

fn info(line: String) {
    println!("     {line}");
}

fn root() -> PathBuf {
    let fallback = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/wuglab-acceptance");
    pipeline::data_root(Some(&fallback))
}

fn group(v: &[f64]) -> SampleGroup {
    SampleGroup::new("g", v.to_vec()).unwrap()
}

// ---------------------------------------------------------------- oracles

fn mwu_oracle() -> Check {
    let mut rng = Pcg64Mcg::seed_from_u64(1);
    let (mut cases, mut worst) = (0, 0.0f64);
    for na in 1..=6 {
        for nb in 1..=6 {
            for levels in [2u32, 4, 1000] {
                let mut draw = |n| {
                    (0..n)
                        .map(|_| f64::from(rng.random_range(0..levels)))
                        .collect::<Vec<f64>>()
                };
                let (a, b) = (draw(na), draw(nb));
                let r = stats::mann_whitney_u(&group(&a), &group(&b), true).unwrap();
                worst = worst
                    .max((r.p_value - brute_mwu_p(&a, &b)).abs())
                    .max((r.statistic - rank_u(&a, &b)).abs());
                cases += 1;
            }
        }
    }
    check(
        "stats oracle: exact MWU vs enumeration, all group sizes <= 6",
        worst < 1e-9,
        format!("{cases} cases, max |diff| {worst:.1e}"),
    )
}

fn compositions(total: usize) -> Vec<Vec<usize>> {
    if total == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for first in 1..=total {
        for mut rest in compositions(total - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn jt_oracle() -> Check {
    let mut rng = Pcg64Mcg::seed_from_u64(2);
    let (mut cases, mut worst) = (0, 0.0f64);
    for total in 3..=8 {
        for sizes in compositions(total).into_iter().filter(|s| s.len() >= 3) {
            for levels in [3u32, 1000] {
                let gs: Vec<Vec<f64>> = sizes
                    .iter()
                    .map(|&n| {
                        (0..n)
                            .map(|_| f64::from(rng.random_range(0..levels)))
                            .collect()
                    })
                    .collect();
                let groups: Vec<SampleGroup> = gs.iter().map(|g| group(g)).collect();
                let r = stats::jonckheere_terpstra(&groups, true).unwrap();
                worst = worst
                    .max((r.p_value - brute_jt_p(&gs)).abs())
                    .max((r.statistic - jt_stat(&gs)).abs());
                cases += 1;
            }
        }
    }
    check(
        "stats oracle: exact JT vs full permutation, total n <= 8",
        worst < 1e-9,
        format!("{cases} cases, max |diff| {worst:.1e}"),
    )
}

fn choose(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn closed_form_oracle() -> Check {
    let mut worst = 0.0f64;
    for n in [1u64, 5, 10, 20, 40, 80] {
        for p0 in [0.5f64, 0.25, 0.1] {
            let pmf: Vec<f64> = (0..=n)
                .map(|k| choose(n, k) * p0.powi(k as i32) * (1.0 - p0).powi((n - k) as i32))
                .collect();
            for k in 0..=n {
                let obs = pmf[k as usize];
                let p: f64 = pmf.iter().filter(|&&x| x <= obs * (1.0 + 1e-7)).sum();
                let ours = stats::binomial_test(k, n, p0).unwrap().p_value;
                worst = worst.max((ours - p.min(1.0)).abs());
            }
        }
    }
    let bern = |a: f64, b: f64| a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln();
    for (a, b) in [
        (0.9, 0.5),
        (0.1, 0.3),
        (0.5, 0.5),
        (0.99, 0.01),
        (0.25, 0.75),
    ] {
        let k = stats::kl_divergence(&[a, 1.0 - a], &[b, 1.0 - b]).unwrap();
        worst = worst.max((k.nats - bern(a, b)).abs());
    }
    // uniform q: KL = ln V - H(p)
    let p = [0.5f64, 0.25, 0.125, 0.125];
    let h: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
    let k = stats::kl_divergence(&p, &[0.25; 4]).unwrap();
    worst = worst.max((k.nats - (4f64.ln() - h)).abs());
    check(
        "stats oracle: binomial and KL closed forms",
        worst < 1e-12,
        format!("max |diff| {worst:.1e}"),
    )
}

fn hbm_oracle() -> Check {
    let mut rng = Pcg64Mcg::seed_from_u64(3);
    let (mut cases, mut worst) = (0, 0.0f64);
    for k in 1..=3usize {
        for v in 2..=3usize {
            for rep in 0..8 {
                let counts: Vec<Vec<u64>> = (0..k)
                    .map(|_| {
                        (0..v)
                            .map(|_| if rep == 0 { 4 } else { rng.random_range(0..=4) })
                            .collect()
                    })
                    .collect();
                let braw: Vec<f64> = (0..v).map(|_| rng.random_range(1..5) as f64).collect();
                let s: f64 = braw.iter().sum();
                let beta: Vec<f64> = braw.iter().map(|b| b / s).collect();
                for alpha in [0.1, 1.0, 10.0] {
                    let m = matrix(counts.clone());
                    let ours = marginal_likelihood(&m, alpha, &beta).unwrap();
                    let oracle: f64 = m
                        .counts
                        .iter()
                        .map(|r| quadrature_row(r, alpha, &beta))
                        .sum();
                    worst = worst.max((ours - oracle).abs());
                    cases += 1;
                }
            }
        }
    }
    check(
        "HBM marginal likelihood vs simplex quadrature (K <= 3, <= 3 values, counts <= 4)",
        worst < 1e-3,
        format!("{cases} instances, max |diff| {worst:.1e} log-nats"),
    )
}

fn gradient() -> Check {
    let r = lm::gradient_check(&lm::miniature_config(32), 7).unwrap();
    check(
        "gradient check on the miniature config",
        r.max_rel_err < 1e-3,
        format!(
            "max relative error {:.2e} over {} entries",
            r.max_rel_err, r.n_checked
        ),
    )
}

fn corpus_checks(root: &Path) -> Check {
    let mut problems = Vec::new();
    let (mut vmin, mut vmax) = (usize::MAX, 0);
    for cond in CorpusCondition::ALL {
        for seed in SEEDS {
            let c = generate_corpus(&CorpusSpec::new(cond, seed, 1.0).unwrap()).unwrap();
            let v = c.vocab_size();
            vmin = vmin.min(v);
            vmax = vmax.max(v);
            if !(314..=351).contains(&v) {
                problems.push(format!("{cond}/{seed} vocab {v}"));
            }
            if checksum(&c) != c.metadata.md5 {
                problems.push(format!("{cond}/{seed} md5"));
            }
        }
    }
    let mut max_h = 0.0f64;
    let mut mi = Vec::new();
    for seed in SEEDS {
        let reg = manipulation_check(
            &generate_corpus(&CorpusSpec::new(CorpusCondition::Regular, seed, 1.0).unwrap())
                .unwrap(),
        );
        let scr = manipulation_check(
            &generate_corpus(&CorpusSpec::new(CorpusCondition::Scrambled, seed, 1.0).unwrap())
                .unwrap(),
        );
        max_h = reg
            .per_kind_normalized_entropy
            .values()
            .map(|h| h[0])
            .fold(max_h, f64::max);
        let (r, s) = (
            reg.mi_noun_shape_slot.unwrap_or(0.0),
            scr.mi_noun_shape_slot.unwrap_or(f64::INFINITY),
        );
        if r <= s {
            problems.push(format!(
                "seed {seed}: MI regular {r:.3} <= scrambled {s:.3}"
            ));
        }
        mi.push(format!("{r:.2}/{s:.2}"));
    }
    if max_h != 0.0 {
        problems.push(format!("regular shape entropy {max_h}"));
    }
    // The corpora the models were trained on regenerate byte-identically.
    for cond in [
        CorpusCondition::Regular,
        CorpusCondition::FeatureSwap,
        CorpusCondition::Scrambled,
    ] {
        for seed in [42, 123] {
            let dir = RunSpec::new(cond, SizeTag::Tiny, seed).stage_dir(root, Stage::Gen);
            if let Ok(saved) = Corpus::load(&dir) {
                let fresh = generate_corpus(saved.spec()).unwrap();
                if checksum(&saved) != saved.metadata.md5
                    || fresh.metadata.md5 != saved.metadata.md5
                {
                    problems.push(format!("{cond}/{seed}: stored corpus md5 mismatch"));
                }
            }
        }
    }
    check(
        "corpus checks: entropy, MI, vocabulary, MD5",
        problems.is_empty(),
        format!(
            "40 corpora, vocab {vmin}..{vmax}, max regular shape entropy {max_h}, MI regular/scrambled {}{}",
            mi.join(" "),
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn hbm_gradient(root: &Path) -> Check {
    use CorpusCondition::*;
    let order = [
        Regular,
        WeakLabel25,
        FeatureSwap,
        NoiseInjection,
        Scrambled,
        FrequencyMatched,
    ];
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in [42, 123] {
        let mut a = Vec::new();
        for c in order {
            let run = RunSpec::new(c, SizeTag::Tiny, seed);
            let o = run_stages(root, &run, &[Stage::Hbm], &Overrides::default());
            assert!(o.error.is_none(), "{:?}", o.error);
            let post: HbmPosterior = serde_json::from_slice(
                &std::fs::read(run.stage_dir(root, Stage::Hbm).join("posterior.json")).unwrap(),
            )
            .unwrap();
            a.push(post.mean_alpha);
        }
        ok &= a[0] < a[1] && a[1] < a[2].min(a[3]) && a[2].max(a[3]) < a[4] && a[4] < a[5];
        ok &= a[0] <= 0.05 && a[5] >= 0.5;
        lines.push(format!(
            "seed {seed}: {}",
            order
                .iter()
                .zip(&a)
                .map(|(c, x)| format!("{c} {x:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    check(
        "HBM alpha ordering Regular < WeakLabel < {FeatureSwap, Noise} < Scrambled < FrequencyMatched",
        ok,
        lines.join("; "),
    )
}

// ---------------------------------------------------------------- models

struct Trained {
    spec: RunSpec,
    results: Vec<RunResultRow>,
    probe: Vec<ProbeRow>,
    cosine: Vec<CosineCsvRow>,
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect()
}

fn trained_runs(root: &Path) -> Vec<Trained> {
    let mut out = Vec::new();
    for spec in MatrixConfig::acceptance().runs().unwrap() {
        let stages: &[Stage] = if spec.condition == CorpusCondition::Regular {
            &[Stage::Eval, Stage::Probe, Stage::Reprs]
        } else {
            &[Stage::Eval]
        };
        let o = run_stages(root, &spec, stages, &Overrides::default());
        assert!(o.error.is_none(), "{}: {:?}", o.run_id, o.error);
        info(format!(
            "{}: ran {:?}, cached {:?}",
            o.run_id, o.executed, o.skipped
        ));
        let dir = |s| spec.stage_dir(root, s);
        let regular = spec.condition == CorpusCondition::Regular;
        out.push(Trained {
            results: eval::read_results_csv(&dir(Stage::Eval).join(RESULTS_FILE)).unwrap(),
            probe: if regular {
                read_csv(&dir(Stage::Probe).join(PROBE_FILE))
            } else {
                vec![]
            },
            cosine: if regular {
                read_csv(&dir(Stage::Reprs).join(COSINE_FILE))
            } else {
                vec![]
            },
            spec,
        });
    }
    out
}

fn of_type(rows: &[RunResultRow], t: ItemType) -> Vec<&RunResultRow> {
    rows.iter().filter(|r| r.item_type == t).collect()
}

fn n_correct(rows: &[&RunResultRow]) -> u64 {
    rows.iter().map(|r| u64::from(r.correct)).sum()
}

fn fo_ceiling(regular: &[&Trained]) -> Check {
    let per: Vec<(u64, usize)> = regular
        .iter()
        .map(|t| {
            let fo = of_type(&t.results, ItemType::FirstOrder);
            (n_correct(&fo), fo.len())
        })
        .collect();
    check(
        "FO ceiling: Regular FO >= 79/80 per seed",
        per.iter().all(|&(k, n)| n == 80 && k >= 79),
        per.iter()
            .map(|(k, n)| format!("{k}/{n}"))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

fn so_null(regular: &[&Trained]) -> Check {
    let mut pooled = Vec::new();
    let mut per = Vec::new();
    for t in regular {
        let so = of_type(&t.results, ItemType::SecondOrder);
        per.push(n_correct(&so) as f64 / so.len() as f64);
        pooled.extend(so.iter().map(|r| f64::from(r.correct)));
    }
    let tost = stats::tost_equivalence(&group(&pooled), 0.5, 10.0).unwrap();
    check(
        "SO null: Regular SO in [0.40, 0.60] per run and TOST-equivalent to 0.5 at +/-10 pp",
        per.iter().all(|a| (0.40..=0.60).contains(a)) && tost.equivalent,
        format!(
            "per run {}, pooled {:.3} over {} items, 90% CI [{:.3}, {:.3}], TOST p {:.2e}",
            per.iter()
                .map(|a| format!("{a:.3}"))
                .collect::<Vec<_>>()
                .join(", "),
            tost.mean,
            pooled.len(),
            tost.ci90.0,
            tost.ci90.1,
            tost.p_lower.max(tost.p_upper)
        ),
    )
}

fn dissociation(regular: &[&Trained]) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for t in regular {
        let best = t
            .probe
            .iter()
            .fold(None::<&ProbeRow>, |b, r| match b {
                Some(b) if b.accuracy >= r.accuracy => Some(b),
                _ => Some(r),
            })
            .expect("probe rows");
        ok &=
            best.accuracy >= 0.95 && (0.05..=0.20).contains(&best.baseline) && best.p_value < 0.01;
        parts.push(format!(
            "seed {} layer {} accuracy {:.3} baseline {:.3} p {:.4}",
            t.spec.seed, best.layer, best.accuracy, best.baseline, best.p_value
        ));
    }
    check(
        "dissociation: layer-best FO probe >= 0.95, baseline in [0.05, 0.20], p < .01",
        ok,
        parts.join("; "),
    )
}

fn feature_swap(swap: &[&Trained]) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for t in swap {
        let fc = of_type(&t.results, ItemType::SwapFrameCued);
        let no = of_type(&t.results, ItemType::SwapNounOnly);
        let (kf, kn) = (n_correct(&fc), n_correct(&no));
        let pf = stats::binomial_test(kf, fc.len() as u64, 0.5)
            .unwrap()
            .p_value;
        let pn = stats::binomial_test(kn, no.len() as u64, 0.5)
            .unwrap()
            .p_value;
        let (af, an) = (kf as f64 / fc.len() as f64, kn as f64 / no.len() as f64);
        ok &= af >= 0.90 && an <= 0.35 && pf < 1e-3 && pn < 1e-3;
        parts.push(format!(
            "seed {}: frame-cued {kf}/{} (p {pf:.1e}), noun-only {kn}/{} (p {pn:.1e})",
            t.spec.seed,
            fc.len(),
            no.len()
        ));
    }
    check(
        "feature swap: frame-cued >= 0.90 and noun-only <= 0.35, binomial p < .001",
        ok,
        parts.join("; "),
    )
}

fn collapse(regular: &[&Trained]) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for t in regular {
        let last = t.cosine.iter().map(|r| r.layer).max().expect("cosine rows");
        let layer = last.min(6);
        let at = |phase: &str| {
            t.cosine
                .iter()
                .find(|r| r.phase == phase && r.layer == layer)
                .expect("layer row")
        };
        let (b, a) = (at("before"), at("after"));
        ok &= b.within_novel >= 0.98 && b.within_trained <= 0.90 && a.within_novel <= 0.90;
        parts.push(format!(
            "seed {} layer {layer}: within-novel {:.3}, within-trained {:.3}, after swap within-novel {:.3}",
            t.spec.seed, b.within_novel, b.within_trained, a.within_novel
        ));
    }
    let c = check(
        "representational collapse: within-novel >= 0.98, within-trained <= 0.90, after swap <= 0.90",
        ok,
        parts.join("; "),
    );
    for t in regular {
        for r in t.cosine.iter().filter(|r| r.phase == "before") {
            info(format!(
                "seed {} layer {}: within-novel {:.3} within-trained {:.3} cross {:.3}",
                t.spec.seed, r.layer, r.within_novel, r.within_trained, r.cross
            ));
        }
    }
    c
}

fn greedy(regular: &[&Trained]) -> Check {
    let rows: Vec<RunResultRow> = regular
        .iter()
        .flat_map(|t| t.results.iter().cloned())
        .collect();
    let g = greedy_diagnostics(&rows, ItemType::SecondOrder);
    let per: Vec<String> = regular
        .iter()
        .map(|t| {
            let d = greedy_diagnostics(&t.results, ItemType::SecondOrder);
            format!(
                "seed {} {:.3} (shape class {:.3})",
                t.spec.seed, d.correct_specific_rate, d.shape_class_rate
            )
        })
        .collect();
    check(
        "greedy: SO correct-specific rate < 5%",
        g.correct_specific_rate < 0.05,
        format!(
            "pooled {:.3} over {} items; {}",
            g.correct_specific_rate,
            g.n,
            per.join(", ")
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags; a name filter that excludes this
    // suite skips it.
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let root = root();
    println!("acceptance data root: {}", root.display());
    let mut checks = vec![
        mwu_oracle(),
        jt_oracle(),
        closed_form_oracle(),
        hbm_oracle(),
        gradient(),
        corpus_checks(&root),
        hbm_gradient(&root),
    ];

    if std::env::var_os("WUGLAB_ACCEPTANCE_QUICK").is_some_and(|v| v == "1") {
        for name in MODEL_CRITERIA {
            checks.push(check(name, false, "not run (quick mode)".into()));
        }
        return finish(&checks);
    }
    let runs = trained_runs(&root);
    let of = |c: CorpusCondition| -> Vec<&Trained> {
        runs.iter().filter(|t| t.spec.condition == c).collect()
    };
    let regular = of(CorpusCondition::Regular);
    let swap = of(CorpusCondition::FeatureSwap);
    checks.push(fo_ceiling(&regular));
    checks.push(so_null(&regular));
    checks.push(dissociation(&regular));
    checks.push(feature_swap(&swap));
    checks.push(collapse(&regular));
    checks.push(greedy(&regular));
    for t in of(CorpusCondition::Scrambled) {
        let so = of_type(&t.results, ItemType::SecondOrder);
        info(format!(
            "scrambled seed {}: SO {}/{}",
            t.spec.seed,
            n_correct(&so),
            so.len()
        ));
    }

    let bundle = pipeline::emit_reports(&root).unwrap();
    info(format!("report bundle written to {}", bundle.dir.display()));

    finish(&checks);
}

const MODEL_CRITERIA: [&str; 6] = [
    "FO ceiling: Regular FO >= 79/80 per seed",
    "SO null: Regular SO in [0.40, 0.60] per run and TOST-equivalent to 0.5 at +/-10 pp",
    "dissociation: layer-best FO probe >= 0.95, baseline in [0.05, 0.20], p < .01",
    "feature swap: frame-cued >= 0.90 and noun-only <= 0.35, binomial p < .001",
    "representational collapse: within-novel >= 0.98, within-trained <= 0.90, after swap <= 0.90",
    "greedy: SO correct-specific rate < 5%",
];

fn finish(checks: &[Check]) {
    let failed: Vec<&Check> = checks.iter().filter(|c| !c.pass).collect();
    println!(
        "acceptance: {}/{} criteria pass",
        checks.len() - failed.len(),
        checks.len()
    );
    for c in &failed {
        println!("  failing: {} ({})", c.name, c.detail);
    }
    if !failed.is_empty() && std::env::var_os("WUGLAB_ACCEPTANCE_STRICT").is_some_and(|v| v == "1")
    {
        std::process::exit(1);
    }
}
