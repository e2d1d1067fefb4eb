use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stages::{RunCtx, CHECKPOINT_FILE};
use super::Stage;
use crate::battery::{build_battery, Battery, ItemType, WugItem};
use crate::corpusgen::{Corpus, FeatureDim};
use crate::error::{fsx, Result};
use crate::eval::{self, Position, RunMeta, Scorer};
use crate::hbm::{self, AlphaGrid, CountMatrix};
use crate::lm::{swap_embeddings, Checkpoint};
use crate::probelab::{self, ProbeDataset};
use crate::tokenizer::BpeModel;

pub const BATTERY_FILE: &str = "battery.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const AGGREGATES_FILE: &str = "aggregates.csv";
pub const ONE_SHOT_FILE: &str = "one_shot.csv";
pub const GREEDY_FILE: &str = "greedy.json";
pub const COUNTS_FILE: &str = "counts.csv";
pub const POSTERIOR_FILE: &str = "posterior.json";
pub const PREDICTIVE_FILE: &str = "predictive.csv";
pub const PROBE_FILE: &str = "probe.csv";
pub const PERMUTATIONS_FILE: &str = "permutations.json";
pub const COSINE_FILE: &str = "cosine.csv";
pub const SWAP_FILE: &str = "swap.json";

/// Carrier used to read out noun representations for the cosine analysis.
pub const NOUN_CARRIER: &str = "A {noun} is a";
const SWAP_SEED: u64 = 11;
const SHUFFLE_SEED: u64 = 13;

pub(super) fn execute(ctx: &RunCtx, stage: Stage, dir: &Path) -> Result<Vec<String>> {
    match stage {
        Stage::Battery => {
            let battery = build_battery(&ctx.corpus()?, ctx.run.seed)?;
            battery.save(&dir.join(BATTERY_FILE))?;
            Ok(vec![BATTERY_FILE.into()])
        }
        Stage::Eval => eval_stage(ctx, dir),
        Stage::Hbm => hbm_stage(ctx, dir),
        Stage::Probe => probe_stage(ctx, dir),
        Stage::Reprs => reprs_stage(ctx, dir),
        Stage::Gen | Stage::Bpe | Stage::Train => unreachable!("handled by the core stages"),
    }
}

fn meta(ctx: &RunCtx) -> RunMeta {
    RunMeta {
        run_id: ctx.run.run_id(),
        condition: ctx.run.condition.to_string(),
        size_tag: ctx.run.size.to_string(),
        seed: ctx.run.seed,
    }
}

struct Loaded {
    corpus: Corpus,
    bpe: BpeModel,
    ckpt: Checkpoint,
}

fn load(ctx: &RunCtx) -> Result<Loaded> {
    Ok(Loaded {
        corpus: ctx.corpus()?,
        bpe: ctx.tokenizer()?,
        ckpt: Checkpoint::load(&ctx.dir(Stage::Train).join(CHECKPOINT_FILE))?,
    })
}

fn battery(ctx: &RunCtx) -> Result<Battery> {
    Battery::load(&ctx.dir(Stage::Battery).join(BATTERY_FILE))
}

fn eval_stage(ctx: &RunCtx, dir: &Path) -> Result<Vec<String>> {
    let l = load(ctx)?;
    let battery = battery(ctx)?;
    let scorer = Scorer::new(&l.ckpt.model, &l.bpe, &l.corpus.spec().lexicon)?;
    let m = meta(ctx);
    let rows = eval::run_forced_choice(&scorer, &m, &battery)?;
    eval::write_results_csv(&dir.join(RESULTS_FILE), &rows)?;
    eval::write_csv(&dir.join(AGGREGATES_FILE), &eval::aggregate(&rows))?;
    let one_shot: Vec<&WugItem> = battery
        .items
        .iter()
        .filter(|i| i.item_type.is_one_shot())
        .collect();
    eval::write_csv(
        &dir.join(ONE_SHOT_FILE),
        &eval::run_one_shot(&scorer, &m, &one_shot)?,
    )?;
    let greedy: Vec<(ItemType, eval::GreedyDiagnostics)> =
        [ItemType::FirstOrder, ItemType::SecondOrder]
            .into_iter()
            .map(|t| (t, eval::greedy_diagnostics(&rows, t)))
            .collect();
    fsx::write_json(&dir.join(GREEDY_FILE), &greedy)?;
    let export: Vec<&WugItem> = battery
        .items
        .iter()
        .filter(|i| matches!(i.item_type, ItemType::FirstOrder | ItemType::SecondOrder))
        .collect();
    let mut files = vec![
        RESULTS_FILE.to_string(),
        AGGREGATES_FILE.into(),
        ONE_SHOT_FILE.into(),
        GREEDY_FILE.into(),
    ];
    for pos in [Position::NounFinal, Position::Critical] {
        files.extend(eval::export_hidden_states(&scorer, &export, pos, dir)?);
    }
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveRow {
    pub kind_id: usize,
    pub observed: String,
    pub value: String,
    pub probability: f64,
}

fn hbm_stage(ctx: &RunCtx, dir: &Path) -> Result<Vec<String>> {
    let corpus = ctx.corpus()?;
    let counts = CountMatrix::from_corpus(&corpus, FeatureDim::Shape);
    let post = hbm::fit_posterior(&counts, &AlphaGrid::default())?;
    fsx::write(&dir.join(COUNTS_FILE), counts.to_csv())?;
    fsx::write_json(&dir.join(POSTERIOR_FILE), &post)?;
    let mut rows = Vec::new();
    for kind in corpus.spec().novel_kinds() {
        let mut obs = vec![0u64; counts.n_values()];
        if let Some(i) = counts.values.iter().position(|v| *v == kind.stable_token) {
            obs[i] = 1;
        }
        for (v, p) in counts.values.iter().zip(hbm::predictive(&post, &obs)?) {
            rows.push(PredictiveRow {
                kind_id: kind.kind_id,
                observed: kind.stable_token.clone(),
                value: v.clone(),
                probability: p,
            });
        }
    }
    eval::write_csv(&dir.join(PREDICTIVE_FILE), &rows)?;
    Ok(vec![
        COUNTS_FILE.into(),
        POSTERIOR_FILE.into(),
        PREDICTIVE_FILE.into(),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub condition: String,
    pub size_tag: String,
    pub seed: u64,
    pub layer: usize,
    pub accuracy: f64,
    pub baseline: f64,
    pub gap: f64,
    pub p_value: f64,
    pub converged: bool,
}

/// Probe dataset per layer from the critical-position states of the
/// first-order items. Labels are the index of each item's target among the
/// ten tokens of its dimension.
pub fn first_order_probe_data(
    scorer: &Scorer,
    corpus: &Corpus,
    battery: &Battery,
) -> Result<Vec<ProbeDataset>> {
    let lex = &corpus.spec().lexicon;
    let items: Vec<&WugItem> = battery.items_of(ItemType::FirstOrder).collect();
    let mut per_layer: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for item in &items {
        let h = eval::item_hidden(scorer, item, Position::Critical)?;
        if per_layer.is_empty() {
            per_layer = vec![Vec::new(); h.len()];
        }
        for (l, v) in h.into_iter().enumerate() {
            per_layer[l].push(v.into_iter().map(f64::from).collect());
        }
        let target = item.target_completion.trim();
        let label = lex
            .dim_of(target)
            .and_then(|d| lex.tokens(d).iter().position(|t| t == target))
            .ok_or_else(|| {
                crate::error::Error::Invalid(format!(
                    "{}: target is not a feature token",
                    item.item_id
                ))
            })?;
        labels.push(label);
        groups.push(item.kind_id);
    }
    per_layer
        .into_iter()
        .map(|f| {
            ProbeDataset::new(
                f,
                labels.clone(),
                groups.clone(),
                crate::corpusgen::N_FEATURE_TOKENS,
            )
        })
        .collect()
}

fn probe_stage(ctx: &RunCtx, dir: &Path) -> Result<Vec<String>> {
    let l = load(ctx)?;
    let battery = battery(ctx)?;
    let scorer = Scorer::new(&l.ckpt.model, &l.bpe, &l.corpus.spec().lexicon)?;
    let data = first_order_probe_data(&scorer, &l.corpus, &battery)?;
    let mut rows = Vec::new();
    let mut shuffles = Vec::new();
    for (layer, ds) in data.iter().enumerate() {
        let maps = probelab::label_permutations(
            ds,
            ctx.overrides.probe_shuffles.unwrap_or(probelab::N_SHUFFLES),
            SHUFFLE_SEED,
        );
        let fit = probelab::train_probe(ds, probelab::PROBE_L2)?;
        let pc = probelab::permutation_test(ds, &maps, probelab::PROBE_L2)?;
        log::info!(
            "{} probe layer {layer}: accuracy {:.3} baseline {:.3} p {:.3}",
            ctx.run.run_id(),
            pc.true_accuracy,
            pc.baseline,
            pc.p_value
        );
        rows.push(ProbeRow {
            condition: ctx.run.condition.to_string(),
            size_tag: ctx.run.size.to_string(),
            seed: ctx.run.seed,
            layer,
            accuracy: pc.true_accuracy,
            baseline: pc.baseline,
            gap: pc.gap,
            p_value: pc.p_value,
            converged: fit.converged,
        });
        shuffles.push(pc.shuffled);
    }
    eval::write_csv(&dir.join(PROBE_FILE), &rows)?;
    fsx::write_json(&dir.join(PERMUTATIONS_FILE), &shuffles)?;
    Ok(vec![PROBE_FILE.into(), PERMUTATIONS_FILE.into()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineCsvRow {
    pub condition: String,
    pub size_tag: String,
    pub seed: u64,
    /// `before` or `after` the embedding swap.
    pub phase: String,
    pub layer: usize,
    pub within_trained: f64,
    pub within_novel: f64,
    pub cross: f64,
}

/// Noun-final hidden states of every trained and novel noun in the
/// carrier prompt, indexed `[noun][layer]`.
pub fn noun_vectors(
    scorer: &Scorer,
    corpus: &Corpus,
) -> Result<(probelab::NounVectors, probelab::NounVectors)> {
    let spec = corpus.spec();
    let vecs = |nouns: Vec<&str>| -> Result<probelab::NounVectors> {
        nouns
            .into_iter()
            .map(|n| {
                let prompt = scorer.prompt_ids(&NOUN_CARRIER.replace("{noun}", n));
                let pos = scorer.word_position(&prompt, n).ok_or_else(|| {
                    crate::error::Error::Invalid(format!("noun {n} not in carrier"))
                })?;
                let h = scorer.hidden(&prompt)?;
                Ok((0..h.n_layers()).map(|l| h.at(l, pos).to_vec()).collect())
            })
            .collect()
    };
    Ok((
        vecs(spec.trained_kinds().map(|k| k.noun.as_str()).collect())?,
        vecs(spec.novel_kinds().map(|k| k.noun.as_str()).collect())?,
    ))
}

fn cosine_rows(ctx: &RunCtx, phase: &str, rows: Vec<probelab::CosineRow>) -> Vec<CosineCsvRow> {
    rows.into_iter()
        .map(|r| CosineCsvRow {
            condition: ctx.run.condition.to_string(),
            size_tag: ctx.run.size.to_string(),
            seed: ctx.run.seed,
            phase: phase.into(),
            layer: r.layer,
            within_trained: r.within_trained,
            within_novel: r.within_novel,
            cross: r.cross,
        })
        .collect()
}

fn reprs_stage(ctx: &RunCtx, dir: &Path) -> Result<Vec<String>> {
    let l = load(ctx)?;
    let lex = &l.corpus.spec().lexicon;
    let (before, mapping) = {
        let scorer = Scorer::new(&l.ckpt.model, &l.bpe, lex)?;
        let (t, n) = noun_vectors(&scorer, &l.corpus)?;
        let ids = |nouns: Vec<&str>| -> Vec<u32> {
            nouns
                .into_iter()
                .map(|w| l.bpe.word_ids(w).ids()[0])
                .collect()
        };
        let spec = l.corpus.spec();
        let mapping = probelab::random_swap_mapping(
            &ids(spec.novel_kinds().map(|k| k.noun.as_str()).collect()),
            &ids(spec.trained_kinds().map(|k| k.noun.as_str()).collect()),
            SWAP_SEED ^ ctx.run.seed,
        )?;
        (probelab::cosine_analysis(&t, &n)?, mapping)
    };
    let swapped = swap_embeddings(&l.ckpt, &mapping)?;
    let scorer = Scorer::new(&swapped.model, &l.bpe, lex)?;
    let (t, n) = noun_vectors(&scorer, &l.corpus)?;
    let after = probelab::cosine_analysis(&t, &n)?;
    let mut rows = cosine_rows(ctx, "before", before);
    rows.extend(cosine_rows(ctx, "after", after));
    eval::write_csv(&dir.join(COSINE_FILE), &rows)?;
    let named: Vec<(String, String)> = mapping
        .iter()
        .map(|(a, b)| {
            (
                l.bpe.token_str(*a).trim().to_string(),
                l.bpe.token_str(*b).trim().to_string(),
            )
        })
        .collect();
    fsx::write_json(&dir.join(SWAP_FILE), &named)?;
    Ok(vec![COSINE_FILE.into(), SWAP_FILE.into()])
}
