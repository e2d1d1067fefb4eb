//! The 1,040-item wug test battery: forced-choice items with a target and a
//! foil completion, built from a corpus's own kind assignments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};

use crate::corpusgen::lexicon::{RESERVED_COLOURS, RESERVED_NOUNS, RESERVED_TEXTURES};
use crate::corpusgen::rng::stream_with;
use crate::corpusgen::{Corpus, CorpusCondition, Domain, FeatureDim, FrameTemplate, KindSpec};
use crate::error::{fsx, Error, Result};

pub const BATTERY_SIZE: usize = 1040;
const BATTERY_SALT: u64 = 0xba77_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ItemType {
    FirstOrder,
    SecondOrder,
    FrameVariant,
    SwapFrameCued,
    SwapNounOnly,
    SlotShuffle,
    HardDistractor,
    FreqMatchedFoil,
    NoLabelMatched,
    AmbiguousExemplar,
    CountShape,
    MassTexture,
    OneShotInContext,
    OneShotControl,
}

impl ItemType {
    pub const ALL: [ItemType; 14] = [
        ItemType::FirstOrder,
        ItemType::SecondOrder,
        ItemType::FrameVariant,
        ItemType::SwapFrameCued,
        ItemType::SwapNounOnly,
        ItemType::SlotShuffle,
        ItemType::HardDistractor,
        ItemType::FreqMatchedFoil,
        ItemType::NoLabelMatched,
        ItemType::AmbiguousExemplar,
        ItemType::CountShape,
        ItemType::MassTexture,
        ItemType::OneShotInContext,
        ItemType::OneShotControl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ItemType::FirstOrder => "FirstOrder",
            ItemType::SecondOrder => "SecondOrder",
            ItemType::FrameVariant => "FrameVariant",
            ItemType::SwapFrameCued => "SwapFrameCued",
            ItemType::SwapNounOnly => "SwapNounOnly",
            ItemType::SlotShuffle => "SlotShuffle",
            ItemType::HardDistractor => "HardDistractor",
            ItemType::FreqMatchedFoil => "FreqMatchedFoil",
            ItemType::NoLabelMatched => "NoLabelMatched",
            ItemType::AmbiguousExemplar => "AmbiguousExemplar",
            ItemType::CountShape => "CountShape",
            ItemType::MassTexture => "MassTexture",
            ItemType::OneShotInContext => "OneShotInContext",
            ItemType::OneShotControl => "OneShotControl",
        }
    }

    fn code(self) -> &'static str {
        match self {
            ItemType::FirstOrder => "FO",
            ItemType::SecondOrder => "SO",
            ItemType::FrameVariant => "FV",
            ItemType::SwapFrameCued => "SFC",
            ItemType::SwapNounOnly => "SNO",
            ItemType::SlotShuffle => "SS",
            ItemType::HardDistractor => "HD",
            ItemType::FreqMatchedFoil => "FMF",
            ItemType::NoLabelMatched => "NLM",
            ItemType::AmbiguousExemplar => "AE",
            ItemType::CountShape => "CS",
            ItemType::MassTexture => "MT",
            ItemType::OneShotInContext => "OSI",
            ItemType::OneShotControl => "OSC",
        }
    }

    /// Nominal allocation of the 1,040 items.
    pub fn nominal_count(self) -> usize {
        match self {
            ItemType::SecondOrder => 200,
            ItemType::CountShape | ItemType::MassTexture => 40,
            ItemType::OneShotInContext | ItemType::OneShotControl => 20,
            _ => 80,
        }
    }

    pub fn is_one_shot(self) -> bool {
        matches!(self, ItemType::OneShotInContext | ItemType::OneShotControl)
    }

    pub fn is_swap(self) -> bool {
        matches!(self, ItemType::SwapFrameCued | ItemType::SwapNounOnly)
    }

    /// Types whose items query a noun absent from training text.
    pub fn uses_novel_noun(self) -> bool {
        matches!(
            self,
            ItemType::SecondOrder
                | ItemType::CountShape
                | ItemType::MassTexture
                | ItemType::OneShotInContext
                | ItemType::OneShotControl
        )
    }

    /// Types that absorb the swap allocation on corpora without a second domain.
    const REBALANCE_TARGETS: [ItemType; 5] = [
        ItemType::SlotShuffle,
        ItemType::HardDistractor,
        ItemType::FreqMatchedFoil,
        ItemType::NoLabelMatched,
        ItemType::AmbiguousExemplar,
    ];
}

impl fmt::Display for ItemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ItemType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ItemType::ALL
            .into_iter()
            .find(|t| t.as_str() == s || t.code() == s)
            .ok_or_else(|| Error::Battery(format!("unknown item type {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WugItem {
    pub item_id: String,
    pub item_type: ItemType,
    /// Text preceding the completion, without trailing space.
    pub prompt: String,
    /// Completions carry their leading space.
    pub target_completion: String,
    pub foil_completion: String,
    /// Kind whose metadata determines the target.
    pub kind_id: usize,
    /// Noun or marker written into the prompt.
    pub query_word: String,
    pub frame_id: Option<usize>,
    pub context_prefix: Option<String>,
}

impl WugItem {
    pub fn target_token(&self) -> &str {
        self.target_completion.trim_start()
    }

    pub fn foil_token(&self) -> &str {
        self.foil_completion.trim_start()
    }

    /// Prompt text including any in-context exemplar.
    pub fn full_prompt(&self) -> String {
        match &self.context_prefix {
            Some(p) if !p.is_empty() => format!("{p} {}", self.prompt),
            _ => self.prompt.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryManifest {
    pub condition: CorpusCondition,
    pub corpus_seed: u64,
    pub battery_seed: u64,
    pub corpus_md5: String,
    pub counts: BTreeMap<ItemType, usize>,
    pub total: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub manifest: BatteryManifest,
    pub items: Vec<WugItem>,
}

impl Battery {
    pub fn items_of(&self, t: ItemType) -> impl Iterator<Item = &WugItem> {
        self.items.iter().filter(move |i| i.item_type == t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsx::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        fsx::read_json(path)
    }
}

/// Per-type item counts for a corpus. Swap items need a second domain; when
/// absent their 160 items are spread evenly over the five control types.
pub fn allocation(condition: CorpusCondition) -> (BTreeMap<ItemType, usize>, Vec<String>) {
    let mut counts: BTreeMap<ItemType, usize> = ItemType::ALL
        .iter()
        .map(|&t| (t, t.nominal_count()))
        .collect();
    let mut notes = Vec::new();
    if condition != CorpusCondition::FeatureSwap {
        let freed: usize = ItemType::ALL
            .iter()
            .filter(|t| t.is_swap())
            .map(|t| counts[t])
            .sum();
        for t in ItemType::ALL.iter().filter(|t| t.is_swap()) {
            counts.insert(*t, 0);
        }
        let share = freed / ItemType::REBALANCE_TARGETS.len();
        for t in ItemType::REBALANCE_TARGETS {
            *counts.get_mut(&t).expect("all types present") += share;
        }
        notes.push(format!(
            "SwapFrameCued and SwapNounOnly omitted: condition {condition} has no texture-stable domain; \
             their {freed} items were reassigned as {share} each to SlotShuffle, HardDistractor, \
             FreqMatchedFoil, NoLabelMatched and AmbiguousExemplar"
        ));
    }
    (counts, notes)
}

struct Builder<'a> {
    corpus: &'a Corpus,
    seed: u64,
    token_counts: BTreeMap<&'a str, usize>,
}

fn space(token: &str) -> String {
    format!(" {token}")
}

impl<'a> Builder<'a> {
    fn rng(&self, t: ItemType) -> Pcg64Mcg {
        stream_with(self.seed, BATTERY_SALT + t as u64)
    }

    fn spec(&self) -> &'a crate::corpusgen::CorpusSpec {
        self.corpus.spec()
    }

    fn tokens(&self, dim: FeatureDim) -> &'a [String] {
        self.spec().lexicon.tokens(dim)
    }

    fn trained(&self) -> Vec<&'a KindSpec> {
        self.spec().trained_kinds().collect()
    }

    fn novel(&self) -> Vec<&'a KindSpec> {
        self.spec().novel_kinds().collect()
    }

    /// Labelled training frames of `domain` in which the noun precedes `dim`.
    fn query_frames(&self, domain: Domain, dim: FeatureDim) -> Vec<&'a FrameTemplate> {
        self.spec()
            .training_frames(domain)
            .into_iter()
            .filter(|f| {
                f.labelled
                    && matches!((f.slot_index(&crate::corpusgen::Slot::Noun), f.slot_index(&dim.slot())), (Some(n), Some(s)) if n < s)
            })
            .collect()
    }

    fn other_token(&self, dim: FeatureDim, not: &str, rng: &mut Pcg64Mcg) -> String {
        let pool: Vec<&String> = self
            .tokens(dim)
            .iter()
            .filter(|t| t.as_str() != not)
            .collect();
        (*pool.choose(rng).expect("at least two tokens per dimension")).clone()
    }

    fn prompt(
        &self,
        frame: &FrameTemplate,
        dim: FeatureDim,
        word: &str,
        rng: &mut Pcg64Mcg,
    ) -> String {
        let picks: Vec<String> = FeatureDim::ALL
            .iter()
            .map(|&d| self.tokens(d).choose(rng).expect("tokens").clone())
            .collect();
        frame
            .prefix_before(dim, Some(word), &|d| picks[d.index()].clone())
            .expect("query frames place the queried slot before the context word")
    }

    #[allow(clippy::too_many_arguments)]
    fn item(
        &self,
        t: ItemType,
        idx: usize,
        prompt: String,
        target: &str,
        foil: &str,
        kind: &KindSpec,
        query_word: &str,
        frame_id: Option<usize>,
        context_prefix: Option<String>,
    ) -> WugItem {
        WugItem {
            item_id: format!("{}-{:03}", t.code(), idx),
            item_type: t,
            prompt,
            target_completion: space(target),
            foil_completion: space(foil),
            kind_id: kind.kind_id,
            query_word: query_word.to_string(),
            frame_id,
            context_prefix,
        }
    }

    /// FO-style retrieval items over trained kinds; `foil` picks the foil.
    fn retrieval(
        &self,
        t: ItemType,
        n: usize,
        frames_for: &dyn Fn(&KindSpec) -> Vec<&'a FrameTemplate>,
        foil: &mut dyn FnMut(&KindSpec, &mut Pcg64Mcg) -> String,
    ) -> Vec<WugItem> {
        let kinds = self.trained();
        let mut rng = self.rng(t);
        (0..n)
            .map(|i| {
                let k = kinds[i % kinds.len()];
                let frames = frames_for(k);
                let frame = frames[(i / kinds.len() + k.kind_id) % frames.len()];
                let prompt = self.prompt(frame, k.stable_dim, &k.noun, &mut rng);
                let f = foil(k, &mut rng);
                self.item(
                    t,
                    i,
                    prompt,
                    &k.stable_token,
                    &f,
                    k,
                    &k.noun,
                    Some(frame.frame_id),
                    None,
                )
            })
            .collect()
    }

    fn first_order(&self, n: usize) -> Vec<WugItem> {
        self.retrieval(
            ItemType::FirstOrder,
            n,
            &|k| self.query_frames(k.domain, k.stable_dim),
            &mut |k, rng| self.other_token(k.stable_dim, &k.stable_token, rng),
        )
    }

    fn frame_variant(&self, n: usize) -> Vec<WugItem> {
        self.retrieval(
            ItemType::FrameVariant,
            n,
            &|_| self.spec().held_out_frames(),
            &mut |k, rng| self.other_token(k.stable_dim, &k.stable_token, rng),
        )
    }

    fn hard_distractor(&self, n: usize) -> Vec<WugItem> {
        let trained = self.trained();
        self.retrieval(
            ItemType::HardDistractor,
            n,
            &|k| self.query_frames(k.domain, k.stable_dim),
            &mut |k, rng| {
                let rivals: Vec<&String> = trained
                    .iter()
                    .filter(|o| o.stable_dim == k.stable_dim && o.stable_token != k.stable_token)
                    .map(|o| &o.stable_token)
                    .collect();
                match rivals.choose(rng) {
                    Some(t) => (*t).clone(),
                    None => self.other_token(k.stable_dim, &k.stable_token, rng),
                }
            },
        )
    }

    fn freq_matched(&self, n: usize) -> Vec<WugItem> {
        self.retrieval(
            ItemType::FreqMatchedFoil,
            n,
            &|k| self.query_frames(k.domain, k.stable_dim),
            &mut |k, rng| {
                let count = |t: &str| self.token_counts.get(t).copied().unwrap_or(0) as i64;
                let target = count(&k.stable_token);
                let mut pool: Vec<(i64, &String)> = self
                    .tokens(k.stable_dim)
                    .iter()
                    .filter(|t| **t != k.stable_token)
                    .map(|t| ((count(t) - target).abs(), t))
                    .collect();
                pool.sort();
                let nearest: Vec<&String> = pool.iter().take(2).map(|p| p.1).collect();
                (*nearest.choose(rng).expect("nonempty pool")).clone()
            },
        )
    }

    fn second_order(&self, n: usize) -> Vec<WugItem> {
        let novel = self.novel();
        let frames = self.query_frames(Domain::A, FeatureDim::Shape);
        let mut rng = self.rng(ItemType::SecondOrder);
        (0..n)
            .map(|i| {
                let k = novel[i % novel.len()];
                let j = i / novel.len();
                let frame = frames[(j + k.kind_id) % frames.len()];
                let foils: Vec<&String> = self
                    .tokens(FeatureDim::Shape)
                    .iter()
                    .filter(|t| **t != k.stable_token)
                    .collect();
                let foil = foils[(j + k.kind_id) % foils.len()];
                let prompt = self.prompt(frame, FeatureDim::Shape, &k.noun, &mut rng);
                self.item(
                    ItemType::SecondOrder,
                    i,
                    prompt,
                    &k.stable_token,
                    foil,
                    k,
                    &k.noun,
                    Some(frame.frame_id),
                    None,
                )
            })
            .collect()
    }

    fn swap_kinds(&self) -> Vec<&'a KindSpec> {
        self.trained()
            .into_iter()
            .filter(|k| k.domain == Domain::B)
            .collect()
    }

    fn swap_frame_cued(&self, n: usize) -> Vec<WugItem> {
        let kinds = self.swap_kinds();
        let frames = self.query_frames(Domain::B, FeatureDim::Texture);
        let mut rng = self.rng(ItemType::SwapFrameCued);
        (0..n)
            .map(|i| {
                let k = kinds[i % kinds.len()];
                let frame = frames[(i / kinds.len() + k.kind_id) % frames.len()];
                let prompt = self.prompt(frame, FeatureDim::Texture, &k.noun, &mut rng);
                let foil = self
                    .tokens(FeatureDim::Shape)
                    .choose(&mut rng)
                    .expect("shapes")
                    .clone();
                self.item(
                    ItemType::SwapFrameCued,
                    i,
                    prompt,
                    &k.stable_token,
                    &foil,
                    k,
                    &k.noun,
                    Some(frame.frame_id),
                    None,
                )
            })
            .collect()
    }

    /// The noun in the majority-domain carrier, with no domain-B template.
    fn swap_noun_only(&self, n: usize) -> Vec<WugItem> {
        let kinds = self.swap_kinds();
        let frames = self.query_frames(Domain::A, FeatureDim::Shape);
        let mut rng = self.rng(ItemType::SwapNounOnly);
        (0..n)
            .map(|i| {
                let k = kinds[i % kinds.len()];
                let frame = frames[(i / kinds.len() + k.kind_id) % frames.len()];
                let prompt = self.prompt(frame, FeatureDim::Shape, &k.noun, &mut rng);
                let foil = self
                    .tokens(FeatureDim::Shape)
                    .choose(&mut rng)
                    .expect("shapes")
                    .clone();
                self.item(
                    ItemType::SwapNounOnly,
                    i,
                    prompt,
                    &k.stable_token,
                    &foil,
                    k,
                    &k.noun,
                    Some(frame.frame_id),
                    None,
                )
            })
            .collect()
    }

    /// The stable slot is moved after one or two other feature slots.
    fn slot_shuffle(&self, n: usize) -> Vec<WugItem> {
        let kinds = self.trained();
        let mut rng = self.rng(ItemType::SlotShuffle);
        (0..n)
            .map(|i| {
                let k = kinds[i % kinds.len()];
                let others: Vec<FeatureDim> = FeatureDim::ALL
                    .into_iter()
                    .filter(|&d| d != k.stable_dim)
                    .collect();
                let before: Vec<FeatureDim> = match (i / kinds.len() + k.kind_id) % 4 {
                    0 => vec![others[0]],
                    1 => vec![others[1]],
                    2 => vec![others[0], others[1]],
                    _ => vec![others[1], others[0]],
                };
                let frames = self.query_frames(k.domain, k.stable_dim);
                let frame = frames[(i / kinds.len() + k.kind_id) % frames.len()];
                let first = frame
                    .pattern
                    .iter()
                    .find_map(|s| s.feature_dim())
                    .expect("query frames have feature slots");
                let head = frame
                    .prefix_before(first, Some(&k.noun), &|_| String::new())
                    .expect("feature slot precedes context");
                let fills: Vec<String> = before
                    .iter()
                    .map(|&d| self.tokens(d).choose(&mut rng).expect("tokens").clone())
                    .collect();
                let prompt = format!("{head} {}", fills.join(" "));
                let foil = self.other_token(k.stable_dim, &k.stable_token, &mut rng);
                self.item(
                    ItemType::SlotShuffle,
                    i,
                    prompt,
                    &k.stable_token,
                    &foil,
                    k,
                    &k.noun,
                    Some(frame.frame_id),
                    None,
                )
            })
            .collect()
    }

    fn no_label_matched(&self, n: usize) -> Vec<WugItem> {
        let kinds = self.trained();
        let markers = &self.spec().lexicon.markers;
        let mut rng = self.rng(ItemType::NoLabelMatched);
        (0..n)
            .map(|i| {
                let k = kinds[i % kinds.len()];
                let marker = k
                    .marker
                    .clone()
                    .unwrap_or_else(|| markers[k.kind_id % markers.len()].clone());
                let frames = self.query_frames(k.domain, k.stable_dim);
                let frame = frames[(i / kinds.len() + k.kind_id) % frames.len()];
                let prompt = self.prompt(frame, k.stable_dim, &marker, &mut rng);
                let foil = self.other_token(k.stable_dim, &k.stable_token, &mut rng);
                self.item(
                    ItemType::NoLabelMatched,
                    i,
                    prompt,
                    &k.stable_token,
                    &foil,
                    k,
                    &marker,
                    Some(frame.frame_id),
                    None,
                )
            })
            .collect()
    }

    /// Exemplar sentence for `k` with its `dim` slot replaced by `shown`.
    fn exemplar(&self, k: &KindSpec, noun: &str, shown: &str, rng: &mut Pcg64Mcg) -> String {
        let frame = &self.spec().frames[0];
        let fills: Vec<String> = FeatureDim::ALL
            .iter()
            .map(|&d| {
                if d == k.stable_dim {
                    shown.to_string()
                } else {
                    self.tokens(d).choose(rng).expect("tokens").clone()
                }
            })
            .collect();
        frame
            .pattern
            .iter()
            .take_while(|s| **s != crate::corpusgen::Slot::Context)
            .filter_map(|s| match s {
                crate::corpusgen::Slot::Noun => Some(noun.to_string()),
                crate::corpusgen::Slot::Word(w) if w == "near" => None,
                crate::corpusgen::Slot::Word(w) => Some(w.clone()),
                s => s.feature_dim().map(|d| fills[d.index()].clone()),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn ambiguous_exemplar(&self, n: usize) -> Vec<WugItem> {
        let kinds = self.trained();
        let mut rng = self.rng(ItemType::AmbiguousExemplar);
        (0..n)
            .map(|i| {
                let k = kinds[i % kinds.len()];
                let corrupt = self.other_token(k.stable_dim, &k.stable_token, &mut rng);
                let context = self.exemplar(k, &k.noun, &corrupt, &mut rng);
                let frames = self.query_frames(k.domain, k.stable_dim);
                let frame = frames[(i / kinds.len() + k.kind_id) % frames.len()];
                let prompt = self.prompt(frame, k.stable_dim, &k.noun, &mut rng);
                self.item(
                    ItemType::AmbiguousExemplar,
                    i,
                    prompt,
                    &k.stable_token,
                    &corrupt,
                    k,
                    &k.noun,
                    Some(frame.frame_id),
                    Some(context),
                )
            })
            .collect()
    }

    /// Count syntax: novel kind's shape against a texture foil. Mass syntax:
    /// a texture against the kind's shape.
    fn count_mass(&self, t: ItemType, n: usize) -> Vec<WugItem> {
        let novel = self.novel();
        let textures = self.tokens(FeatureDim::Texture);
        (0..n)
            .map(|i| {
                let k = novel[i % novel.len()];
                let texture = &textures[(i / novel.len() + k.kind_id) % textures.len()];
                if t == ItemType::CountShape {
                    let prompt = format!("one {} is a", k.noun);
                    self.item(
                        t,
                        i,
                        prompt,
                        &k.stable_token,
                        texture,
                        k,
                        &k.noun,
                        None,
                        None,
                    )
                } else {
                    let prompt = format!("some {} is made of", k.noun);
                    self.item(
                        t,
                        i,
                        prompt,
                        texture,
                        &k.stable_token,
                        k,
                        &k.noun,
                        None,
                        None,
                    )
                }
            })
            .collect()
    }

    /// One labelled exemplar of a novel kind precedes the query. Controls
    /// query a different novel noun after the same exemplar and keep the
    /// exemplar's shape as target.
    fn one_shot(&self, t: ItemType, n: usize) -> Vec<WugItem> {
        // The reserved novel noun leads, so item 0 is the canonical exemplar.
        let mut novel = self.novel();
        let canonical = RESERVED_NOUNS[1].1;
        if let Some(pos) = novel.iter().position(|k| k.noun == canonical) {
            novel.rotate_left(pos);
        }
        let frames = self.query_frames(Domain::A, FeatureDim::Shape);
        let mut rng = self.rng(t);
        (0..n)
            .map(|i| {
                let k = novel[i % novel.len()];
                let j = i / novel.len();
                let context = if i == 0 && k.noun == canonical {
                    format!(
                        "A {} is a {} {} {} thing",
                        k.noun, k.stable_token, RESERVED_COLOURS[1], RESERVED_TEXTURES[1]
                    )
                } else {
                    self.exemplar(k, &k.noun, &k.stable_token, &mut rng)
                };
                let query = if t == ItemType::OneShotInContext {
                    k
                } else {
                    novel[(i % novel.len() + 1 + j % (novel.len() - 1)) % novel.len()]
                };
                let frame = frames[(j + k.kind_id) % frames.len()];
                let prompt = self.prompt(frame, FeatureDim::Shape, &query.noun, &mut rng);
                let foil = self.other_token(FeatureDim::Shape, &k.stable_token, &mut rng);
                self.item(
                    t,
                    i,
                    prompt,
                    &k.stable_token,
                    &foil,
                    k,
                    &query.noun,
                    Some(frame.frame_id),
                    Some(context),
                )
            })
            .collect()
    }
}

/// Builds the battery for a corpus. Item ids and content are a pure
/// function of the corpus and `seed`.
pub fn build_battery(corpus: &Corpus, seed: u64) -> Result<Battery> {
    let spec = corpus.spec();
    if spec.novel_kinds().next().is_none() {
        return Err(Error::Battery(
            "corpus metadata lists no novel kinds".into(),
        ));
    }
    let mut token_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &corpus.sentences {
        for w in s.split_whitespace() {
            *token_counts.entry(w).or_default() += 1;
        }
    }
    let b = Builder {
        corpus,
        seed,
        token_counts,
    };
    let (counts, notes) = allocation(spec.condition);
    let mut items = Vec::with_capacity(BATTERY_SIZE);
    for t in ItemType::ALL {
        let n = counts[&t];
        if n == 0 {
            continue;
        }
        items.extend(match t {
            ItemType::FirstOrder => b.first_order(n),
            ItemType::SecondOrder => b.second_order(n),
            ItemType::FrameVariant => b.frame_variant(n),
            ItemType::SwapFrameCued => b.swap_frame_cued(n),
            ItemType::SwapNounOnly => b.swap_noun_only(n),
            ItemType::SlotShuffle => b.slot_shuffle(n),
            ItemType::HardDistractor => b.hard_distractor(n),
            ItemType::FreqMatchedFoil => b.freq_matched(n),
            ItemType::NoLabelMatched => b.no_label_matched(n),
            ItemType::AmbiguousExemplar => b.ambiguous_exemplar(n),
            ItemType::CountShape | ItemType::MassTexture => b.count_mass(t, n),
            ItemType::OneShotInContext | ItemType::OneShotControl => b.one_shot(t, n),
        });
    }
    let battery = Battery {
        manifest: BatteryManifest {
            condition: spec.condition,
            corpus_seed: spec.seed,
            battery_seed: seed,
            corpus_md5: corpus.metadata.md5.clone(),
            total: items.len(),
            counts,
            notes,
        },
        items,
    };
    let report = validate_battery(&battery, corpus);
    if !report.is_clean() {
        return Err(Error::Battery(format!(
            "generated battery is invalid: {report}"
        )));
    }
    Ok(battery)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// `None` for battery-level problems.
    pub item_id: Option<String>,
    pub rule: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, rule: &str) -> usize {
        self.violations.iter().filter(|v| v.rule == rule).count()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("no violations");
        }
        for v in &self.violations {
            writeln!(
                f,
                "{}: {}: {}",
                v.item_id.as_deref().unwrap_or("battery"),
                v.rule,
                v.detail
            )?;
        }
        Ok(())
    }
}

/// Checks counts, foil validity, target keys and novel-noun leakage.
pub fn validate_battery(battery: &Battery, corpus: &Corpus) -> ValidationReport {
    let spec = corpus.spec();
    let lex = &spec.lexicon;
    let mut out = ValidationReport::default();
    let mut flag = |item: Option<&WugItem>, rule: &str, detail: String| {
        out.violations.push(Violation {
            item_id: item.map(|i| i.item_id.clone()),
            rule: rule.to_string(),
            detail,
        });
    };

    let mut seen: BTreeMap<ItemType, usize> = BTreeMap::new();
    for item in &battery.items {
        *seen.entry(item.item_type).or_default() += 1;
    }
    if battery.items.len() != BATTERY_SIZE {
        flag(
            None,
            "total",
            format!("{} items, expected {BATTERY_SIZE}", battery.items.len()),
        );
    }
    let (expected, _) = allocation(spec.condition);
    for t in ItemType::ALL {
        let got = seen.get(&t).copied().unwrap_or(0);
        if got != expected[&t] || battery.manifest.counts.get(&t).copied().unwrap_or(0) != got {
            flag(
                None,
                "count",
                format!("{t}: {got} items, allocation {}", expected[&t]),
            );
        }
    }
    let ids: BTreeSet<&str> = battery.items.iter().map(|i| i.item_id.as_str()).collect();
    if ids.len() != battery.items.len() {
        flag(None, "duplicate_id", "item ids are not unique".into());
    }
    if battery.manifest.corpus_md5 != corpus.metadata.md5 {
        flag(
            None,
            "corpus_md5",
            "battery was built from a different corpus".into(),
        );
    }

    let corpus_words: BTreeSet<&str> = corpus
        .sentences
        .iter()
        .flat_map(|s| s.split_whitespace())
        .collect();
    let held_out: BTreeSet<usize> = spec.held_out_frames().iter().map(|f| f.frame_id).collect();
    for item in &battery.items {
        let t = item.item_type;
        let (target, foil) = (item.target_token(), item.foil_token());
        if target == foil {
            flag(
                Some(item),
                "foil_equals_target",
                format!("both are {target:?}"),
            );
        }
        let Some(kind) = spec.kinds.get(item.kind_id) else {
            flag(Some(item), "unknown_kind", format!("kind {}", item.kind_id));
            continue;
        };
        if t.uses_novel_noun() {
            if !kind.is_novel {
                flag(
                    Some(item),
                    "not_novel",
                    format!("kind {} is trained", kind.kind_id),
                );
            }
            let novel_nouns: BTreeSet<&str> =
                lex.novel_nouns().iter().map(|s| s.as_str()).collect();
            if corpus_words.contains(item.query_word.as_str())
                || !novel_nouns.contains(item.query_word.as_str())
            {
                flag(
                    Some(item),
                    "leakage",
                    format!("{:?} is not an unseen novel noun", item.query_word),
                );
            }
        } else if kind.is_novel {
            flag(
                Some(item),
                "novel_kind",
                "type expects a trained kind".into(),
            );
        }
        if t == ItemType::FrameVariant && !item.frame_id.is_some_and(|f| held_out.contains(&f)) {
            flag(
                Some(item),
                "frame_not_held_out",
                format!("{:?}", item.frame_id),
            );
        }
        let (keyed, other) = if t == ItemType::MassTexture {
            (foil, target)
        } else {
            (target, foil)
        };
        if keyed != kind.stable_token {
            flag(
                Some(item),
                "target_key",
                format!(
                    "{keyed:?} is not kind {}'s {:?}",
                    kind.kind_id, kind.stable_token
                ),
            );
        }
        let expect_other = match t {
            ItemType::SecondOrder | ItemType::OneShotInContext | ItemType::OneShotControl => {
                Some(FeatureDim::Shape)
            }
            ItemType::CountShape | ItemType::MassTexture => Some(FeatureDim::Texture),
            ItemType::SwapFrameCued | ItemType::SwapNounOnly => Some(FeatureDim::Shape),
            _ => Some(kind.stable_dim),
        };
        if let Some(dim) = expect_other {
            if lex.dim_of(other) != Some(dim) {
                flag(
                    Some(item),
                    "foil_dimension",
                    format!("{other:?} is not a {dim} token"),
                );
            }
        }
        if t == ItemType::HardDistractor
            && !spec
                .trained_kinds()
                .any(|o| o.stable_token == foil && o.stable_dim == kind.stable_dim)
            && spec
                .trained_kinds()
                .any(|o| o.stable_dim == kind.stable_dim && o.stable_token != kind.stable_token)
        {
            flag(
                Some(item),
                "hard_foil",
                format!("{foil:?} is not another trained kind's stable token"),
            );
        }
        if t.is_one_shot() != item.context_prefix.is_some() && t != ItemType::AmbiguousExemplar {
            flag(
                Some(item),
                "context_prefix",
                "one-shot items need a prefix, others none".into(),
            );
        }
    }
    out
}
