//! Synthetic corpus generation.
//!
//! A corpus is a list of template sentences ("A blicket is a mundi zeppo frell
//! thing near ...") realised from 32 trained kinds. Each kind owns one stable
//! feature token; the other feature slots vary across its exemplars. The eight
//! [`CorpusCondition`]s manipulate which dimension is stable, how kinds are
//! labelled, and how feature frequencies are distributed.

mod checks;
mod frames;
pub(crate) mod lexicon;
pub(crate) mod rng;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use md5::{Digest, Md5};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checks::{manipulation_check, mutual_information_bits, ManipulationCheckReport};
pub use frames::{
    all_literals, frame_catalog, FrameRole, FrameTemplate, Slot, BATTERY_LITERALS,
    N_TRAINING_FRAMES,
};
pub use lexicon::{
    NonceLexicon, LEXICON_SEED, N_CONTEXT_WORDS, N_FEATURE_TOKENS, N_MARKERS, N_NOVEL_KINDS,
    N_TRAIN_KINDS,
};
pub use rng::{stream_with, Dealer};

use crate::error::{fsx, Error, Result};
use rng::{stream, Stream};

pub const CORPUS_FILE: &str = "corpus.txt";
pub const METADATA_FILE: &str = "corpus.json";

pub const FRACTIONS: [f64; 3] = [0.25, 0.5, 1.0];
pub const SEEDS: [u64; 5] = [42, 123, 456, 789, 1001];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureDim {
    Shape,
    Colour,
    Texture,
}

impl FeatureDim {
    pub const ALL: [FeatureDim; 3] = [FeatureDim::Shape, FeatureDim::Colour, FeatureDim::Texture];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn slot(self) -> Slot {
        match self {
            FeatureDim::Shape => Slot::Shape,
            FeatureDim::Colour => Slot::Colour,
            FeatureDim::Texture => Slot::Texture,
        }
    }
}

impl fmt::Display for FeatureDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureDim::Shape => "shape",
            FeatureDim::Colour => "colour",
            FeatureDim::Texture => "texture",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusCondition {
    Regular,
    Scrambled,
    FeatureSwap,
    WeakLabel25,
    ParaphrasedNoLabel,
    BareNoLabel,
    NoiseInjection,
    FrequencyMatched,
}

impl CorpusCondition {
    pub const ALL: [CorpusCondition; 8] = [
        CorpusCondition::Regular,
        CorpusCondition::Scrambled,
        CorpusCondition::FeatureSwap,
        CorpusCondition::WeakLabel25,
        CorpusCondition::ParaphrasedNoLabel,
        CorpusCondition::BareNoLabel,
        CorpusCondition::NoiseInjection,
        CorpusCondition::FrequencyMatched,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusCondition::Regular => "regular",
            CorpusCondition::Scrambled => "scrambled",
            CorpusCondition::FeatureSwap => "feature_swap",
            CorpusCondition::WeakLabel25 => "weak_label25",
            CorpusCondition::ParaphrasedNoLabel => "paraphrased_no_label",
            CorpusCondition::BareNoLabel => "bare_no_label",
            CorpusCondition::NoiseInjection => "noise_injection",
            CorpusCondition::FrequencyMatched => "frequency_matched",
        }
    }

    pub fn label_rate(self) -> f64 {
        match self {
            CorpusCondition::WeakLabel25 => 0.25,
            CorpusCondition::ParaphrasedNoLabel | CorpusCondition::BareNoLabel => 0.0,
            _ => 1.0,
        }
    }

    pub fn noise_rate(self) -> f64 {
        match self {
            CorpusCondition::NoiseInjection => 0.20,
            _ => 0.0,
        }
    }

    pub fn uses_markers(self) -> bool {
        matches!(
            self,
            CorpusCondition::WeakLabel25 | CorpusCondition::ParaphrasedNoLabel
        )
    }
}

impl fmt::Display for CorpusCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorpusCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let alias = match norm.as_str() {
            "weak" | "weak_label" | "weaklabel25" => "weak_label25",
            "paraphrased" | "paraph" => "paraphrased_no_label",
            "bare" => "bare_no_label",
            "noise" => "noise_injection",
            "freq_matched" | "frequency" => "frequency_matched",
            "featureswap" | "swap" => "feature_swap",
            other => other,
        };
        CorpusCondition::ALL
            .into_iter()
            .find(|c| c.as_str() == alias)
            .ok_or_else(|| Error::Invalid(format!("unknown condition {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindSpec {
    pub kind_id: usize,
    pub noun: String,
    pub stable_dim: FeatureDim,
    pub stable_token: String,
    pub n_exemplars: usize,
    pub domain: Domain,
    pub is_novel: bool,
    /// Category marker standing in for the noun (marker conditions only).
    pub marker: Option<String>,
}

/// The full generative recipe for one (condition, seed, fraction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub condition: CorpusCondition,
    pub seed: u64,
    pub fraction: f64,
    pub kinds: Vec<KindSpec>,
    pub frames: Vec<FrameTemplate>,
    pub label_rate: f64,
    pub noise_rate: f64,
    pub lexicon: NonceLexicon,
}

/// Per-sentence record of how it was realised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub kind_id: usize,
    pub frame_id: usize,
    /// Noun or marker occupying the noun slot; `None` when the slot is absent.
    pub label: Option<String>,
    /// Tokens in the shape, colour and texture slots, in that order.
    pub fills: [String; 3],
    /// Which feature slots were overwritten by noise.
    pub noised: [bool; 3],
    pub context: String,
}

impl SentenceRecord {
    pub fn fill(&self, dim: FeatureDim) -> &str {
        &self.fills[dim.index()]
    }

    /// True when the noun slot carries the kind's own noun.
    pub fn has_noun(&self, kind: &KindSpec) -> bool {
        self.label.as_deref() == Some(kind.noun.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetadata {
    #[serde(flatten)]
    pub spec: CorpusSpec,
    pub provenance: Vec<SentenceRecord>,
    pub md5: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<String>,
    pub metadata: CorpusMetadata,
}

impl CorpusSpec {
    /// Builds the recipe for a condition; a pure function of its arguments.
    pub fn new(condition: CorpusCondition, seed: u64, fraction: f64) -> Result<Self> {
        if !FRACTIONS.iter().any(|f| (f - fraction).abs() < 1e-12) {
            return Err(Error::InvalidSpec(format!(
                "fraction {fraction} not in {FRACTIONS:?}"
            )));
        }
        let lexicon = NonceLexicon::generate()?;

        let mut rng = stream(seed, Stream::Nouns);
        let mut train_nouns = lexicon.train_nouns().to_vec();
        let mut novel_nouns = lexicon.novel_nouns().to_vec();
        train_nouns.shuffle(&mut rng);
        novel_nouns.shuffle(&mut rng);

        let mut rng = stream(seed, Stream::Sizes);
        let sizes: Vec<usize> = (0..N_TRAIN_KINDS + N_NOVEL_KINDS)
            .map(|_| rng.random_range(12..=16))
            .collect();

        // One token per dimension is dealt to every trained kind so that the
        // stable token does not depend on which dimension ends up stable.
        let mut rng = stream(seed, Stream::StableTokens);
        let mut dealt: Vec<[String; 3]> = Vec::with_capacity(N_TRAIN_KINDS);
        let mut dealers: Vec<Dealer<String>> = FeatureDim::ALL
            .iter()
            .map(|&d| Dealer::new(lexicon.tokens(d).to_vec()))
            .collect();
        for _ in 0..N_TRAIN_KINDS {
            dealt.push([
                dealers[0].deal(&mut rng),
                dealers[1].deal(&mut rng),
                dealers[2].deal(&mut rng),
            ]);
        }
        let mut novel_shapes = lexicon.shape_tokens.clone();
        novel_shapes.shuffle(&mut rng);
        novel_shapes.truncate(N_NOVEL_KINDS);

        let mut rng = stream(seed, Stream::ScrambledDims);
        let scrambled: Vec<FeatureDim> = (0..N_TRAIN_KINDS)
            .map(|_| FeatureDim::ALL[rng.random_range(0..3)])
            .collect();

        let mut rng = stream(seed, Stream::Domains);
        let mut order: Vec<usize> = (0..N_TRAIN_KINDS).collect();
        order.shuffle(&mut rng);
        let domain_b: Vec<usize> = order[..N_TRAIN_KINDS / 4].to_vec();

        let mut rng = stream(seed, Stream::Markers);
        let markers: Vec<String> = (0..N_TRAIN_KINDS + N_NOVEL_KINDS)
            .map(|_| lexicon.markers[rng.random_range(0..N_MARKERS)].clone())
            .collect();

        let mut kinds = Vec::with_capacity(N_TRAIN_KINDS + N_NOVEL_KINDS);
        for k in 0..N_TRAIN_KINDS {
            let (stable_dim, domain) = match condition {
                CorpusCondition::Scrambled => (scrambled[k], Domain::A),
                CorpusCondition::FeatureSwap if domain_b.contains(&k) => {
                    (FeatureDim::Texture, Domain::B)
                }
                _ => (FeatureDim::Shape, Domain::A),
            };
            kinds.push(KindSpec {
                kind_id: k,
                noun: train_nouns[k].clone(),
                stable_dim,
                stable_token: dealt[k][stable_dim.index()].clone(),
                n_exemplars: sizes[k],
                domain,
                is_novel: false,
                marker: condition.uses_markers().then(|| markers[k].clone()),
            });
        }
        for (j, noun) in novel_nouns.iter().enumerate() {
            let k = N_TRAIN_KINDS + j;
            kinds.push(KindSpec {
                kind_id: k,
                noun: noun.clone(),
                stable_dim: FeatureDim::Shape,
                stable_token: novel_shapes[j].clone(),
                n_exemplars: sizes[k],
                domain: Domain::A,
                is_novel: true,
                marker: condition.uses_markers().then(|| markers[k].clone()),
            });
        }
        pin_token(&mut kinds, "blicket", "mundi", false);
        pin_token(&mut kinds, "zull", "sallo", true);

        Ok(CorpusSpec {
            condition,
            seed,
            fraction,
            kinds,
            frames: frame_catalog(),
            label_rate: condition.label_rate(),
            noise_rate: condition.noise_rate(),
            lexicon,
        })
    }

    pub fn kind(&self, kind_id: usize) -> &KindSpec {
        &self.kinds[kind_id]
    }

    pub fn trained_kinds(&self) -> impl Iterator<Item = &KindSpec> {
        self.kinds.iter().filter(|k| !k.is_novel)
    }

    pub fn novel_kinds(&self) -> impl Iterator<Item = &KindSpec> {
        self.kinds.iter().filter(|k| k.is_novel)
    }

    pub fn frame(&self, frame_id: usize) -> &FrameTemplate {
        &self.frames[frame_id]
    }

    /// Training frames used by kinds of `domain`: labelled first, then no-label.
    pub fn training_frames(&self, domain: Domain) -> Vec<&FrameTemplate> {
        let role = match domain {
            Domain::A => FrameRole::Training,
            Domain::B => FrameRole::DomainB,
        };
        self.frames.iter().filter(|f| f.role == role).collect()
    }

    pub fn held_out_frames(&self) -> Vec<&FrameTemplate> {
        self.frames
            .iter()
            .filter(|f| f.role == FrameRole::HeldOut)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.lexicon.validate()?;
        let n_train = self.kinds.iter().filter(|k| !k.is_novel).count();
        let n_novel = self.kinds.iter().filter(|k| k.is_novel).count();
        if n_train != N_TRAIN_KINDS || n_novel != N_NOVEL_KINDS {
            return Err(Error::InvalidSpec(format!(
                "expected {N_TRAIN_KINDS} trained and {N_NOVEL_KINDS} novel kinds, got {n_train} and {n_novel}"
            )));
        }
        for (i, k) in self.kinds.iter().enumerate() {
            if k.kind_id != i {
                return Err(Error::InvalidSpec(format!(
                    "kind at index {i} has id {}",
                    k.kind_id
                )));
            }
            if !(12..=16).contains(&k.n_exemplars) {
                return Err(Error::InvalidSpec(format!(
                    "kind {i} has {} exemplars",
                    k.n_exemplars
                )));
            }
            if !self.lexicon.tokens(k.stable_dim).contains(&k.stable_token) {
                return Err(Error::InvalidSpec(format!(
                    "kind {i}: {:?} is not a {} token",
                    k.stable_token, k.stable_dim
                )));
            }
            if k.is_novel != self.lexicon.novel_nouns().contains(&k.noun) {
                return Err(Error::InvalidSpec(format!(
                    "kind {i}: noun {:?} in the wrong split",
                    k.noun
                )));
            }
        }
        Ok(())
    }
}

/// Give the kind named `noun` the shape `token`, swapping with whichever kind
/// of the same split currently holds it.
fn pin_token(kinds: &mut [KindSpec], noun: &str, token: &str, novel: bool) {
    let Some(target) = kinds
        .iter()
        .position(|k| k.noun == noun && k.stable_dim == FeatureDim::Shape)
    else {
        return;
    };
    let holder = kinds.iter().position(|k| {
        k.is_novel == novel && k.stable_dim == FeatureDim::Shape && k.stable_token == token
    });
    let old = kinds[target].stable_token.clone();
    if let Some(h) = holder {
        kinds[h].stable_token = old;
    }
    kinds[target].stable_token = token.to_string();
}

/// Realise the sentences of a corpus.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let lex = &spec.lexicon;
    let seed = spec.seed;
    let mut fill_rng = stream(seed, Stream::Fill);
    let mut ctx_rng = stream(seed, Stream::Context);
    let mut noise_rng = stream(seed, Stream::Noise);
    let mut ctx_dealer = Dealer::new(lex.context_words.clone());
    let all_features: Vec<String> = lex.feature_tokens().cloned().collect();

    let mut records: Vec<SentenceRecord> = Vec::new();
    for kind in spec.trained_kinds() {
        let frames = spec.training_frames(kind.domain);
        let mut dealers: Vec<Dealer<String>> = FeatureDim::ALL
            .iter()
            .map(|&d| Dealer::new(lex.tokens(d).to_vec()))
            .collect();
        let mut labelled_seen = 0usize;
        for j in 0..kind.n_exemplars {
            let frame = frames[(kind.kind_id + j) % frames.len()];
            let mut fills: [String; 3] = Default::default();
            for d in FeatureDim::ALL {
                // Deal for every slot so the fill stream is condition-independent.
                let dealt = dealers[d.index()].deal(&mut fill_rng);
                fills[d.index()] = if d == kind.stable_dim {
                    kind.stable_token.clone()
                } else {
                    dealt
                };
            }
            let mut noised = [false; 3];
            for d in FeatureDim::ALL {
                let hit = noise_rng.random::<f64>() < spec.noise_rate;
                let replacement = &all_features[noise_rng.random_range(0..all_features.len())];
                if hit {
                    fills[d.index()] = replacement.clone();
                    noised[d.index()] = true;
                }
            }
            let label = if frame.labelled {
                let label = label_for(spec, kind, labelled_seen);
                labelled_seen += 1;
                label
            } else {
                None
            };
            records.push(SentenceRecord {
                kind_id: kind.kind_id,
                frame_id: frame.frame_id,
                label,
                fills,
                noised,
                context: ctx_dealer.deal(&mut ctx_rng),
            });
        }
    }

    if spec.condition == CorpusCondition::FrequencyMatched {
        frequency_match(&mut records, lex, seed)?;
    }
    if spec.fraction < 1.0 {
        records = subsample(records, spec);
    }

    let sentences: Vec<String> = records.iter().map(|r| render(spec, r)).collect();
    let md5 = checksum_lines(&sentences);
    Ok(Corpus {
        sentences,
        metadata: CorpusMetadata {
            spec: spec.clone(),
            provenance: records,
            md5,
        },
    })
}

fn label_for(spec: &CorpusSpec, kind: &KindSpec, labelled_index: usize) -> Option<String> {
    let marker = || kind.marker.clone();
    match spec.condition {
        CorpusCondition::BareNoLabel => None,
        CorpusCondition::ParaphrasedNoLabel => marker(),
        CorpusCondition::WeakLabel25 => {
            let stride = (1.0 / spec.label_rate).round() as usize;
            if labelled_index % stride == 0 {
                Some(kind.noun.clone())
            } else {
                marker()
            }
        }
        _ => Some(kind.noun.clone()),
    }
}

fn frequency_match(records: &mut [SentenceRecord], lex: &NonceLexicon, seed: u64) -> Result<()> {
    let mut rng = stream(seed, Stream::FreqMatch);
    for dim in FeatureDim::ALL {
        let tokens = lex.tokens(dim);
        let n = records.len();
        let mut deck: Vec<String> = (0..n).map(|i| tokens[i % tokens.len()].clone()).collect();
        deck.shuffle(&mut rng);
        for (r, t) in records.iter_mut().zip(deck) {
            r.fills[dim.index()] = t;
        }
        let counts: Vec<usize> = tokens
            .iter()
            .map(|t| records.iter().filter(|r| r.fill(dim) == t).count())
            .collect();
        let residual = counts.iter().max().unwrap_or(&0) - counts.iter().min().unwrap_or(&0);
        if residual > 1 {
            return Err(Error::FrequencyMatching {
                dim: dim.to_string(),
                residual,
            });
        }
    }
    Ok(())
}

fn subsample(records: Vec<SentenceRecord>, spec: &CorpusSpec) -> Vec<SentenceRecord> {
    let salt = Stream::Fraction as u64 ^ (spec.fraction * 1000.0).round() as u64;
    let mut rng = stream_with(spec.seed, salt);
    let mut keep = vec![false; records.len()];
    for kind in spec.trained_kinds() {
        let idx: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.kind_id == kind.kind_id)
            .map(|(i, _)| i)
            .collect();
        let n = ((idx.len() as f64 * spec.fraction).round() as usize).max(1);
        for &i in idx.choose_multiple(&mut rng, n) {
            keep[i] = true;
        }
    }
    records
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect()
}

fn render(spec: &CorpusSpec, r: &SentenceRecord) -> String {
    let frame = spec.frame(r.frame_id);
    let mut words: Vec<&str> = Vec::with_capacity(frame.pattern.len());
    for slot in &frame.pattern {
        match slot {
            Slot::Noun => {
                if let Some(l) = &r.label {
                    words.push(l);
                }
            }
            Slot::Word(w) => words.push(w),
            Slot::Context => words.push(&r.context),
            s => words.push(r.fill(s.feature_dim().expect("feature slot"))),
        }
    }
    words.join(" ")
}

/// Lowercase hex MD5 of the exact bytes.
pub fn md5_hex(bytes: &[u8]) -> String {
    let digest = Md5::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// The sentence file: UTF-8, one sentence per line, LF terminated.
pub fn sentence_file_bytes(sentences: &[String]) -> Vec<u8> {
    let mut out = Vec::with_capacity(sentences.iter().map(|s| s.len() + 1).sum());
    for s in sentences {
        out.extend_from_slice(s.as_bytes());
        out.push(b'\n');
    }
    out
}

fn checksum_lines(sentences: &[String]) -> String {
    md5_hex(&sentence_file_bytes(sentences))
}

/// MD5 of the corpus's serialized sentence file.
pub fn checksum(corpus: &Corpus) -> String {
    checksum_lines(&corpus.sentences)
}

impl Corpus {
    pub fn spec(&self) -> &CorpusSpec {
        &self.metadata.spec
    }

    /// Distinct whitespace tokens across all sentences.
    pub fn vocab_size(&self) -> usize {
        let mut words: Vec<&str> = self
            .sentences
            .iter()
            .flat_map(|s| s.split_whitespace())
            .collect();
        words.sort_unstable();
        words.dedup();
        words.len()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fsx::create_dir_all(dir)?;
        fsx::write(&dir.join(CORPUS_FILE), sentence_file_bytes(&self.sentences))?;
        fsx::write_json(&dir.join(METADATA_FILE), &self.metadata)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fsx::read_to_string(&dir.join(CORPUS_FILE))?;
        let metadata: CorpusMetadata = fsx::read_json(&dir.join(METADATA_FILE))?;
        let sentences: Vec<String> = text.lines().map(str::to_string).collect();
        let corpus = Corpus {
            sentences,
            metadata,
        };
        let got = checksum(&corpus);
        if got != corpus.metadata.md5 {
            return Err(Error::Invalid(format!(
                "{}: md5 {got} does not match metadata {}",
                dir.display(),
                corpus.metadata.md5
            )));
        }
        Ok(corpus)
    }
}
