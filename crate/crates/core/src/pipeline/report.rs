//! Report bundle: the condition x size summary, figure data CSVs,
//! hypothesis verdicts and a manifest tying every file to the registry
//! digests it was built from.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::registry::{sha256_hex, StageRecord, StageStatus};
use super::stages_ext::{
    CosineCsvRow, ProbeRow, BATTERY_FILE, COSINE_FILE, ONE_SHOT_FILE, POSTERIOR_FILE, PROBE_FILE,
    RESULTS_FILE,
};
use super::{RunSpec, Stage};
use crate::battery::{Battery, ItemType};
use crate::corpusgen::{Corpus, CorpusCondition};
use crate::error::{fsx, Result};
use crate::eval::{self, OneShotRow, RunResultRow};
use crate::hbm::{self, HbmPosterior};
use crate::lm::SizeTag;
use crate::stats::{self, SampleGroup};

pub const REPORT_DIR: &str = "report";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const HYPOTHESES_FILE: &str = "hypotheses.json";
/// Chance band used to flag the frame-variant ratio as vacuous.
const CHANCE_BAND: (f64, f64) = (0.4, 0.6);

/// Outputs of one run that the report consumes, with their digests.
#[derive(Debug, Clone)]
pub struct RunData {
    pub spec: RunSpec,
    pub results: Option<(Vec<RunResultRow>, String)>,
    pub one_shot: Option<(Vec<OneShotRow>, String)>,
    pub probe: Option<(Vec<ProbeRow>, String)>,
    pub cosine: Option<(Vec<CosineCsvRow>, String)>,
    pub posterior: Option<(HbmPosterior, String)>,
    pub dir: PathBuf,
}

impl RunData {
    pub fn accuracy(&self, t: ItemType) -> Option<f64> {
        let (rows, _) = self.results.as_ref()?;
        let sel: Vec<&RunResultRow> = rows.iter().filter(|r| r.item_type == t).collect();
        (!sel.is_empty())
            .then(|| sel.iter().map(|r| f64::from(r.correct)).sum::<f64>() / sel.len() as f64)
    }

    fn results_digest(&self) -> String {
        self.results
            .as_ref()
            .map(|r| r.1.clone())
            .unwrap_or_default()
    }
}

fn done_record(dir: &Path) -> Option<StageRecord> {
    StageRecord::load(dir).filter(|r| r.status == StageStatus::Done)
}

fn stage_file<T>(
    run_dir: &Path,
    stage: Stage,
    file: &str,
    read: impl Fn(&Path) -> Result<T>,
) -> Option<(T, String)> {
    let dir = run_dir.join(stage.as_str());
    let rec = done_record(&dir)?;
    let digest = rec.outputs.get(file)?.clone();
    read(&dir.join(file)).ok().map(|v| (v, digest))
}

fn parse_run_dir(cond: &str, size: &str, seed: &str) -> Option<RunSpec> {
    let condition: CorpusCondition = cond.parse().ok()?;
    let size: SizeTag = size.parse().ok()?;
    let (seed, fraction) = match seed.split_once("-f") {
        Some((s, f)) => (s.parse().ok()?, f.parse().ok()?),
        None => (seed.parse().ok()?, 1.0),
    };
    Some(RunSpec {
        condition,
        size,
        seed,
        fraction,
    })
}

fn sorted_subdirs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

fn name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Every run directory under `root/runs`, in condition/size/seed order.
pub fn collect_runs(root: &Path) -> Vec<RunData> {
    let mut out = Vec::new();
    for c in sorted_subdirs(&root.join("runs")) {
        for s in sorted_subdirs(&c) {
            for d in sorted_subdirs(&s) {
                let Some(spec) = parse_run_dir(&name(&c), &name(&s), &name(&d)) else {
                    continue;
                };
                out.push(RunData {
                    results: stage_file(&d, Stage::Eval, RESULTS_FILE, eval::read_results_csv),
                    one_shot: stage_file(&d, Stage::Eval, ONE_SHOT_FILE, eval::read_csv),
                    probe: stage_file(&d, Stage::Probe, PROBE_FILE, eval::read_csv),
                    cosine: stage_file(&d, Stage::Reprs, COSINE_FILE, eval::read_csv),
                    posterior: stage_file(&d, Stage::Hbm, POSTERIOR_FILE, fsx::read_json),
                    spec,
                    dir: d,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        (
            a.spec.condition,
            a.spec.size,
            a.spec.seed,
            a.spec.fraction.to_bits(),
        )
            .cmp(&(
                b.spec.condition,
                b.spec.size,
                b.spec.seed,
                b.spec.fraction.to_bits(),
            ))
    });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub condition: CorpusCondition,
    pub size_tag: SizeTag,
    pub n_seeds: usize,
    pub so_accuracy_pct: f64,
    pub so_sd_pct: Option<f64>,
    pub fo_accuracy_pct: f64,
    pub seeds: String,
    pub sources: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub condition: CorpusCondition,
    pub size_tag: SizeTag,
    pub seed: u64,
    pub fraction: f64,
    pub item_type: ItemType,
    pub n: usize,
    pub accuracy: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissociationRow {
    pub condition: CorpusCondition,
    pub size_tag: SizeTag,
    pub seed: u64,
    pub fo_accuracy: f64,
    pub so_accuracy: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapRow {
    pub condition: CorpusCondition,
    pub size_tag: SizeTag,
    pub seed: u64,
    pub item_type: ItemType,
    pub n: usize,
    pub n_correct: u64,
    pub accuracy: f64,
    pub binomial_p: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub condition: CorpusCondition,
    pub seed: u64,
    pub fraction: f64,
    pub mean_alpha: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFigRow {
    pub condition: String,
    pub size_tag: String,
    pub seed: u64,
    pub layer: usize,
    pub accuracy: f64,
    pub baseline: f64,
    pub gap: f64,
    pub p_value: f64,
    pub converged: bool,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineFigRow {
    pub condition: String,
    pub size_tag: String,
    pub seed: u64,
    pub phase: String,
    pub layer: usize,
    pub within_trained: f64,
    pub within_novel: f64,
    pub cross: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyRow {
    pub condition: CorpusCondition,
    pub size_tag: SizeTag,
    pub seed: u64,
    pub item_type: ItemType,
    pub n: usize,
    pub correct_specific_rate: f64,
    pub shape_class_rate: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneShotSummaryRow {
    pub condition: CorpusCondition,
    pub size_tag: SizeTag,
    pub seed: u64,
    pub item_type: ItemType,
    pub n: usize,
    pub mean_rank_without: f64,
    pub mean_rank_with: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub condition: CorpusCondition,
    pub size_tag: SizeTag,
    pub seed: u64,
    pub n_items: usize,
    pub mean_kl: f64,
    pub floored: bool,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Supported,
    NotSupported,
    NotEvaluable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub id: String,
    pub criterion: String,
    pub verdict: Verdict,
    pub details: serde_json::Value,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
    pub runs: BTreeMap<String, BTreeMap<String, String>>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub hypotheses: Vec<HypothesisReport>,
}

fn per_seed(runs: &[RunData], cond: CorpusCondition, size: SizeTag, t: ItemType) -> Vec<f64> {
    runs.iter()
        .filter(|r| r.spec.condition == cond && r.spec.size == size && r.spec.fraction == 1.0)
        .filter_map(|r| r.accuracy(t))
        .collect()
}

fn group(label: &str, v: Vec<f64>) -> Option<SampleGroup> {
    SampleGroup::new(label, v).ok()
}

/// Rank tests across seeds need at least two seeds per group.
fn seed_group(label: &str, v: Vec<f64>) -> Option<SampleGroup> {
    if v.len() < 2 {
        return None;
    }
    group(label, v)
}

fn not_evaluable(id: &str, criterion: &str, why: String) -> HypothesisReport {
    HypothesisReport {
        id: id.into(),
        criterion: criterion.into(),
        verdict: Verdict::NotEvaluable,
        details: serde_json::Value::Null,
        notes: vec![why],
    }
}

fn verdict(ok: bool) -> Verdict {
    if ok {
        Verdict::Supported
    } else {
        Verdict::NotSupported
    }
}

fn sizes_present(runs: &[RunData]) -> Vec<SizeTag> {
    let mut v: Vec<SizeTag> = runs
        .iter()
        .filter(|r| r.results.is_some())
        .map(|r| r.spec.size)
        .collect();
    v.sort();
    v.dedup();
    v
}

fn h1(runs: &[RunData]) -> Result<HypothesisReport> {
    let crit = "Regular SO accuracy >= 15 pp above chance and >= 10 pp above Scrambled";
    let mut per_size = Vec::new();
    let mut any = false;
    let mut all_ok = true;
    for size in sizes_present(runs) {
        let reg = per_seed(runs, CorpusCondition::Regular, size, ItemType::SecondOrder);
        let scr = per_seed(
            runs,
            CorpusCondition::Scrambled,
            size,
            ItemType::SecondOrder,
        );
        let (Some(a), Some(b)) = (seed_group("regular", reg), seed_group("scrambled", scr)) else {
            continue;
        };
        any = true;
        let exact = a.len() <= 10 && b.len() <= 10;
        let mwu = stats::mann_whitney_u(&a, &b, exact)?;
        let ok = a.mean() >= 0.65 && a.mean() >= b.mean() + 0.10;
        all_ok &= ok;
        per_size.push(serde_json::json!({
            "size": size, "regular_mean": a.mean(), "scrambled_mean": b.mean(),
            "criterion_met": ok, "mann_whitney": mwu,
        }));
    }
    if !any {
        return Ok(not_evaluable(
            "H1",
            crit,
            "needs Regular and Scrambled results from at least two seeds".into(),
        ));
    }
    Ok(HypothesisReport {
        id: "H1".into(),
        criterion: crit.into(),
        verdict: verdict(all_ok),
        details: serde_json::json!(per_size),
        notes: vec![],
    })
}

fn h2(runs: &[RunData]) -> Result<HypothesisReport> {
    let crit = "FrameVariant accuracy >= 75% of SO accuracy (Regular)";
    let mut per_size = Vec::new();
    let mut all_ok = true;
    let mut notes = Vec::new();
    for size in sizes_present(runs) {
        let fv = per_seed(runs, CorpusCondition::Regular, size, ItemType::FrameVariant);
        let so = per_seed(runs, CorpusCondition::Regular, size, ItemType::SecondOrder);
        if fv.is_empty() || fv.len() != so.len() {
            continue;
        }
        let (mf, ms) = (stats::mean(&fv), stats::mean(&so));
        let ok = mf >= 0.75 * ms;
        let vacuous = [mf, ms]
            .iter()
            .all(|m| (CHANCE_BAND.0..=CHANCE_BAND.1).contains(m));
        if vacuous {
            notes.push(format!(
                "{size}: both accuracies inside the chance band; ratio is vacuous"
            ));
        }
        let t = if fv.len() >= 2 {
            Some(stats::paired_t(
                &SampleGroup::new("fv", fv)?,
                &SampleGroup::new("so", so)?,
            )?)
        } else {
            None
        };
        all_ok &= ok;
        per_size.push(serde_json::json!({
            "size": size, "fv_mean": mf, "so_mean": ms, "ratio": mf / ms, "criterion_met": ok,
            "vacuous": vacuous, "paired_t": t,
        }));
    }
    if per_size.is_empty() {
        return Ok(not_evaluable("H2", crit, "needs Regular results".into()));
    }
    Ok(HypothesisReport {
        id: "H2".into(),
        criterion: crit.into(),
        verdict: verdict(all_ok),
        details: serde_json::json!(per_size),
        notes,
    })
}

fn h_label(runs: &[RunData]) -> Result<HypothesisReport> {
    let crit = "Jonckheere-Terpstra trend Bare < Paraphrased < Weak < Regular on SO accuracy, Bonferroni alpha 0.025";
    use CorpusCondition::*;
    let order = [BareNoLabel, ParaphrasedNoLabel, WeakLabel25, Regular];
    let mut per_size = Vec::new();
    let mut pvals = Vec::new();
    for size in sizes_present(runs) {
        let groups: Option<Vec<SampleGroup>> = order
            .iter()
            .map(|&c| group(c.as_str(), per_seed(runs, c, size, ItemType::SecondOrder)))
            .collect();
        let Some(groups) = groups else { continue };
        let jt = stats::jonckheere_terpstra(&groups, true)?;
        pvals.push(jt.p_value);
        per_size.push((size, jt));
    }
    if per_size.is_empty() {
        return Ok(not_evaluable(
            "H_label",
            crit,
            "needs all four labelling conditions".into(),
        ));
    }
    let threshold = 0.025;
    let details: Vec<serde_json::Value> = per_size
        .iter()
        .map(|(s, jt)| serde_json::json!({ "size": s, "jonckheere_terpstra": jt, "significant": jt.p_value < threshold }))
        .collect();
    Ok(HypothesisReport {
        id: "H_label".into(),
        criterion: crit.into(),
        verdict: verdict(pvals.iter().any(|&p| p < threshold)),
        details: serde_json::json!(details),
        notes: vec![],
    })
}

fn h_bayes(runs: &[RunData]) -> HypothesisReport {
    let crit = "Posterior mean alpha: Regular < WeakLabel < {FeatureSwap, Noise} < Scrambled < FrequencyMatched";
    use CorpusCondition::*;
    let mean_alpha = |c: CorpusCondition| -> Option<f64> {
        let v: Vec<f64> = runs
            .iter()
            .filter(|r| r.spec.condition == c && r.spec.fraction == 1.0)
            .filter_map(|r| r.posterior.as_ref().map(|p| p.0.mean_alpha))
            .collect();
        (!v.is_empty()).then(|| stats::mean(&v))
    };
    let conds = [
        Regular,
        WeakLabel25,
        FeatureSwap,
        NoiseInjection,
        Scrambled,
        FrequencyMatched,
    ];
    let vals: Option<Vec<f64>> = conds.iter().map(|&c| mean_alpha(c)).collect();
    let Some(v) = vals else {
        return not_evaluable(
            "H_Bayes",
            crit,
            "needs ideal-observer fits for all six conditions".into(),
        );
    };
    let ok = v[0] < v[1] && v[1] < v[2].min(v[3]) && v[2].max(v[3]) < v[4] && v[4] < v[5];
    let details: BTreeMap<&str, f64> = conds.iter().map(|c| c.as_str()).zip(v).collect();
    HypothesisReport {
        id: "H_Bayes".into(),
        criterion: crit.into(),
        verdict: verdict(ok),
        details: serde_json::json!(details),
        notes: vec![],
    }
}

fn h3(runs: &[RunData]) -> Result<HypothesisReport> {
    let crit = "Monotonic increase of Regular Tiny SO accuracy across 25/50/100% corpus fractions";
    let groups: Option<Vec<SampleGroup>> = [0.25, 0.5, 1.0]
        .iter()
        .map(|&f| {
            let v: Vec<f64> = runs
                .iter()
                .filter(|r| {
                    r.spec.condition == CorpusCondition::Regular
                        && r.spec.size == SizeTag::Tiny
                        && r.spec.fraction == f
                })
                .filter_map(|r| r.accuracy(ItemType::SecondOrder))
                .collect();
            group(&format!("f{f}"), v)
        })
        .collect();
    let Some(groups) = groups else {
        return Ok(not_evaluable(
            "H3",
            crit,
            "needs Regular Tiny runs at all three fractions".into(),
        ));
    };
    let jt = stats::jonckheere_terpstra(&groups, true)?;
    Ok(HypothesisReport {
        id: "H3".into(),
        criterion: crit.into(),
        verdict: verdict(jt.p_value < 0.05 && jt.effect_size.unwrap_or(0.0) > 0.0),
        details: serde_json::json!({ "jonckheere_terpstra": jt }),
        notes: vec![],
    })
}

fn h4(runs: &[RunData]) -> Result<HypothesisReport> {
    let crit = "CountShape accuracy > MassTexture accuracy (Regular)";
    let mut per_size = Vec::new();
    let mut all_ok = true;
    for size in sizes_present(runs) {
        let cs = per_seed(runs, CorpusCondition::Regular, size, ItemType::CountShape);
        let mt = per_seed(runs, CorpusCondition::Regular, size, ItemType::MassTexture);
        let (Some(a), Some(b)) = (
            seed_group("count_shape", cs),
            seed_group("mass_texture", mt),
        ) else {
            continue;
        };
        let mwu = stats::mann_whitney_u(&a, &b, a.len() <= 10 && b.len() <= 10)?;
        let ok = a.mean() > b.mean() && mwu.p_value < 0.05;
        all_ok &= ok;
        per_size.push(serde_json::json!({
            "size": size, "count_shape_mean": a.mean(), "mass_texture_mean": b.mean(), "mann_whitney": mwu,
        }));
    }
    if per_size.is_empty() {
        return Ok(not_evaluable(
            "H4",
            crit,
            "needs Regular results from at least two seeds".into(),
        ));
    }
    Ok(HypothesisReport {
        id: "H4".into(),
        criterion: crit.into(),
        verdict: verdict(all_ok),
        details: serde_json::json!(per_size),
        notes: vec![],
    })
}

fn pooled_counts(
    runs: &[RunData],
    cond: CorpusCondition,
    size: SizeTag,
    t: ItemType,
) -> (u64, u64) {
    let mut k = 0;
    let mut n = 0;
    for r in runs
        .iter()
        .filter(|r| r.spec.condition == cond && r.spec.size == size && r.spec.fraction == 1.0)
    {
        if let Some((rows, _)) = &r.results {
            for row in rows.iter().filter(|x| x.item_type == t) {
                k += u64::from(row.correct);
                n += 1;
            }
        }
    }
    (k, n)
}

fn h_swap(runs: &[RunData]) -> Result<HypothesisReport> {
    let crit = "Domain-B frame-cued accuracy above chance and noun-only accuracy below chance (binomial vs 0.5)";
    let mut per_size = Vec::new();
    let mut all_ok = true;
    for size in sizes_present(runs) {
        let (kf, nf) = pooled_counts(
            runs,
            CorpusCondition::FeatureSwap,
            size,
            ItemType::SwapFrameCued,
        );
        let (kn, nn) = pooled_counts(
            runs,
            CorpusCondition::FeatureSwap,
            size,
            ItemType::SwapNounOnly,
        );
        if nf == 0 || nn == 0 {
            continue;
        }
        let bf = stats::binomial_test(kf, nf, 0.5)?;
        let bn = stats::binomial_test(kn, nn, 0.5)?;
        let (af, an) = (kf as f64 / nf as f64, kn as f64 / nn as f64);
        let ok = af > 0.5 && an < 0.5 && bf.p_value < 0.001 && bn.p_value < 0.001;
        all_ok &= ok;
        per_size.push(serde_json::json!({
            "size": size, "frame_cued": { "accuracy": af, "n": nf, "binomial": bf },
            "noun_only": { "accuracy": an, "n": nn, "binomial": bn },
        }));
    }
    if per_size.is_empty() {
        return Ok(not_evaluable(
            "H_swap",
            crit,
            "needs FeatureSwap results".into(),
        ));
    }
    Ok(HypothesisReport {
        id: "H_swap".into(),
        criterion: crit.into(),
        verdict: verdict(all_ok),
        details: serde_json::json!(per_size),
        notes: vec![],
    })
}

pub fn hypotheses(runs: &[RunData]) -> Result<Vec<HypothesisReport>> {
    Ok(vec![
        h1(runs)?,
        h2(runs)?,
        h_label(runs)?,
        h_bayes(runs),
        h3(runs)?,
        h4(runs)?,
        h_swap(runs)?,
    ])
}

fn kl_rows(runs: &[RunData]) -> Result<Vec<KlRow>> {
    let mut out = Vec::new();
    for r in runs {
        let (Some((rows, digest)), Some((post, _))) = (&r.results, &r.posterior) else {
            continue;
        };
        let corpus = Corpus::load(&r.dir.join(Stage::Gen.as_str()))?;
        let battery = Battery::load(&r.dir.join(Stage::Battery.as_str()).join(BATTERY_FILE))?;
        let items = hbm::second_order_items(&corpus, &battery, 1);
        let kl = hbm::hbm_forced_choice_kl(rows, post, &items, 1)?;
        out.push(KlRow {
            condition: r.spec.condition,
            size_tag: r.spec.size,
            seed: r.spec.seed,
            n_items: kl.n_items,
            mean_kl: kl.mean_kl,
            floored: kl.floored,
            source: digest.clone(),
        });
    }
    Ok(out)
}

/// Writes the bundle under `root/report` and returns it. Cells without
/// data are left out and listed in the manifest errors, never imputed.
pub fn emit_reports(root: &Path) -> Result<ReportBundle> {
    let out_dir = root.join(REPORT_DIR);
    fsx::create_dir_all(&out_dir)?;
    let runs = collect_runs(root);
    let mut errors = Vec::new();
    if runs.is_empty() {
        errors.push("no runs found under the data root".to_string());
    }
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        fsx::write(&out_dir.join(name), &bytes)?;
        files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    };

    let scored: Vec<&RunData> = runs.iter().filter(|r| r.results.is_some()).collect();
    for r in runs.iter().filter(|r| r.results.is_none()) {
        errors.push(format!("{}: no evaluation results", r.spec.run_id()));
    }

    // condition x size summary
    let mut cells: BTreeMap<(CorpusCondition, SizeTag), Vec<&RunData>> = BTreeMap::new();
    for r in scored.iter().filter(|r| r.spec.fraction == 1.0) {
        cells
            .entry((r.spec.condition, r.spec.size))
            .or_default()
            .push(r);
    }
    let table3: Vec<Table3Row> = cells
        .iter()
        .map(|((c, s), rs)| {
            let so: Vec<f64> = rs
                .iter()
                .filter_map(|r| r.accuracy(ItemType::SecondOrder))
                .collect();
            let fo: Vec<f64> = rs
                .iter()
                .filter_map(|r| r.accuracy(ItemType::FirstOrder))
                .collect();
            Table3Row {
                condition: *c,
                size_tag: *s,
                n_seeds: rs.len(),
                so_accuracy_pct: 100.0 * stats::mean(&so),
                so_sd_pct: (so.len() >= 2).then(|| 100.0 * stats::sd(&so)),
                fo_accuracy_pct: 100.0 * stats::mean(&fo),
                seeds: rs
                    .iter()
                    .map(|r| r.spec.seed.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
                sources: rs
                    .iter()
                    .map(|r| r.results_digest())
                    .collect::<Vec<_>>()
                    .join(";"),
            }
        })
        .collect();
    put("table3.csv", csv_bytes(&table3)?)?;

    let acc_rows = |types: &[ItemType], filter: &dyn Fn(&RunData) -> bool| -> Vec<AccuracyRow> {
        let mut v = Vec::new();
        for r in scored.iter().filter(|r| filter(r)) {
            let rows = &r.results.as_ref().expect("scored").0;
            for &t in types {
                let n = rows.iter().filter(|x| x.item_type == t).count();
                if let Some(a) = r.accuracy(t) {
                    v.push(AccuracyRow {
                        condition: r.spec.condition,
                        size_tag: r.spec.size,
                        seed: r.spec.seed,
                        fraction: r.spec.fraction,
                        item_type: t,
                        n,
                        accuracy: a,
                        source: r.results_digest(),
                    });
                }
            }
        }
        v
    };
    put(
        "f1_so_accuracy.csv",
        csv_bytes(&acc_rows(&[ItemType::SecondOrder], &|_| true))?,
    )?;
    put(
        "f2_fo_so.csv",
        csv_bytes(&acc_rows(
            &[ItemType::FirstOrder, ItemType::SecondOrder],
            &|r| r.spec.condition == CorpusCondition::Regular && r.spec.fraction == 1.0,
        ))?,
    )?;
    let diss: Vec<DissociationRow> = scored
        .iter()
        .filter(|r| r.spec.fraction == 1.0)
        .filter_map(|r| {
            Some(DissociationRow {
                condition: r.spec.condition,
                size_tag: r.spec.size,
                seed: r.spec.seed,
                fo_accuracy: r.accuracy(ItemType::FirstOrder)?,
                so_accuracy: r.accuracy(ItemType::SecondOrder)?,
                source: r.results_digest(),
            })
        })
        .collect();
    put("f3_dissociation.csv", csv_bytes(&diss)?)?;

    let mut swap = Vec::new();
    for r in scored
        .iter()
        .filter(|r| r.spec.condition == CorpusCondition::FeatureSwap)
    {
        let rows = &r.results.as_ref().expect("scored").0;
        for t in [ItemType::SwapFrameCued, ItemType::SwapNounOnly] {
            let sel: Vec<&RunResultRow> = rows.iter().filter(|x| x.item_type == t).collect();
            if sel.is_empty() {
                continue;
            }
            let k = sel.iter().map(|x| u64::from(x.correct)).sum();
            swap.push(SwapRow {
                condition: r.spec.condition,
                size_tag: r.spec.size,
                seed: r.spec.seed,
                item_type: t,
                n: sel.len(),
                n_correct: k,
                accuracy: k as f64 / sel.len() as f64,
                binomial_p: stats::binomial_test(k, sel.len() as u64, 0.5)?.p_value,
                source: r.results_digest(),
            });
        }
    }
    put("f4_feature_swap.csv", csv_bytes(&swap)?)?;

    let mut alphas: Vec<AlphaRow> = Vec::new();
    for r in &runs {
        if let Some((p, d)) = &r.posterior {
            let row = AlphaRow {
                condition: r.spec.condition,
                seed: r.spec.seed,
                fraction: r.spec.fraction,
                mean_alpha: p.mean_alpha,
                source: d.clone(),
            };
            // corpora, and so posteriors, are shared by every size
            if !alphas.iter().any(|a| {
                (a.condition, a.seed, a.fraction) == (row.condition, row.seed, row.fraction)
            }) {
                alphas.push(row);
            }
        }
    }
    put("f5_hbm_alpha.csv", csv_bytes(&alphas)?)?;

    let probe: Vec<ProbeFigRow> = runs
        .iter()
        .filter_map(|r| r.probe.as_ref())
        .flat_map(|(rows, d)| {
            rows.iter().map(|r| ProbeFigRow {
                condition: r.condition.clone(),
                size_tag: r.size_tag.clone(),
                seed: r.seed,
                layer: r.layer,
                accuracy: r.accuracy,
                baseline: r.baseline,
                gap: r.gap,
                p_value: r.p_value,
                converged: r.converged,
                source: d.clone(),
            })
        })
        .collect();
    put("f6_probe_by_layer.csv", csv_bytes(&probe)?)?;
    let cos: Vec<CosineFigRow> = runs
        .iter()
        .filter_map(|r| r.cosine.as_ref())
        .flat_map(|(rows, d)| {
            rows.iter().map(|r| CosineFigRow {
                condition: r.condition.clone(),
                size_tag: r.size_tag.clone(),
                seed: r.seed,
                phase: r.phase.clone(),
                layer: r.layer,
                within_trained: r.within_trained,
                within_novel: r.within_novel,
                cross: r.cross,
                source: d.clone(),
            })
        })
        .collect();
    put("f7_cosine_by_layer.csv", csv_bytes(&cos)?)?;

    let mut aggregates = Vec::new();
    let mut greedy = Vec::new();
    let mut one_shot = Vec::new();
    for r in &scored {
        let (rows, d) = r.results.as_ref().expect("scored");
        aggregates.extend(eval::aggregate(rows));
        for t in [ItemType::FirstOrder, ItemType::SecondOrder] {
            let g = eval::greedy_diagnostics(rows, t);
            greedy.push(GreedyRow {
                condition: r.spec.condition,
                size_tag: r.spec.size,
                seed: r.spec.seed,
                item_type: t,
                n: g.n,
                correct_specific_rate: g.correct_specific_rate,
                shape_class_rate: g.shape_class_rate,
                source: d.clone(),
            });
        }
        if let Some((os, od)) = &r.one_shot {
            for t in [ItemType::OneShotInContext, ItemType::OneShotControl] {
                let sel: Vec<&OneShotRow> = os.iter().filter(|x| x.item_type == t).collect();
                if sel.is_empty() {
                    continue;
                }
                let n = sel.len() as f64;
                one_shot.push(OneShotSummaryRow {
                    condition: r.spec.condition,
                    size_tag: r.spec.size,
                    seed: r.spec.seed,
                    item_type: t,
                    n: sel.len(),
                    mean_rank_without: sel.iter().map(|x| x.rank_without as f64).sum::<f64>() / n,
                    mean_rank_with: sel.iter().map(|x| x.rank_with as f64).sum::<f64>() / n,
                    source: od.clone(),
                });
            }
        }
    }
    put("aggregates.csv", csv_bytes(&aggregates)?)?;
    put("greedy.csv", csv_bytes(&greedy)?)?;
    put("one_shot.csv", csv_bytes(&one_shot)?)?;
    put("kl.csv", csv_bytes(&kl_rows(&runs)?)?)?;

    let hyps = hypotheses(&runs)?;
    put(
        HYPOTHESES_FILE,
        (serde_json::to_string_pretty(&hyps)? + "\n").into_bytes(),
    )?;

    let mut run_digests = BTreeMap::new();
    for r in &runs {
        let mut m = BTreeMap::new();
        for st in Stage::ALL {
            if let Some(rec) = done_record(&r.dir.join(st.as_str())) {
                m.insert(st.as_str().to_string(), rec.output_digest());
            }
        }
        run_digests.insert(r.spec.run_id(), m);
    }
    let manifest = Manifest {
        files,
        runs: run_digests,
        errors,
    };
    fsx::write(
        &out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(ReportBundle {
        dir: out_dir,
        manifest,
        hypotheses: hyps,
    })
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| crate::error::Error::Invalid(e.to_string()))
}
