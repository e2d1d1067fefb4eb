//! Byte-pair encoding with whitespace pretokenization.
//!
//! Text is cut into chunks: a word with at most one leading space, or a run of
//! whitespace. Merges are learned within word chunks only and never cross a
//! chunk boundary. Characters outside the fitted alphabet fall back to byte
//! tokens, so every UTF-8 string round-trips. Lexicon content words (nouns,
//! feature tokens, markers) are registered as atomic vocabulary entries so
//! that each, including the never-trained novel nouns, owns one embedding row.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpusgen::Corpus;
use crate::error::{fsx, Error, Result};

pub const N_MERGES: usize = 512;
pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpeModel {
    pub merges: Vec<(String, String)>,
    pub vocab: BTreeMap<String, u32>,
    /// Single characters seen during fitting.
    pub alphabet: Vec<String>,
    /// Chunks encoded as one token (space-prefixed lexicon words).
    pub atomic: Vec<String>,
    /// Fewer than [`N_MERGES`] pairs were available during fitting.
    pub short_of_budget: bool,
    #[serde(skip)]
    index: Option<Index>,
}

#[derive(Debug, Clone, PartialEq)]
struct Index {
    id_to_token: Vec<String>,
    ranks: HashMap<(String, String), usize>,
    atomic: HashMap<String, u32>,
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

fn parse_byte_token(s: &str) -> Option<u8> {
    let hex = s.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

/// Split text into word chunks (optional single leading space + non-space run)
/// and whitespace chunks.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < text.len() {
        let c = text[i..].chars().next().expect("in bounds");
        if c.is_whitespace() {
            let mut j = i;
            while j < text.len() {
                let d = text[j..].chars().next().expect("in bounds");
                if !d.is_whitespace() {
                    break;
                }
                j += d.len_utf8();
            }
            // Leave a trailing single space for the following word.
            let split = if j < text.len() && bytes[j - 1] == b' ' {
                j - 1
            } else {
                j
            };
            if split > i {
                out.push(&text[i..split]);
            }
            if split < j {
                let mut k = j;
                while k < text.len() {
                    let d = text[k..].chars().next().expect("in bounds");
                    if d.is_whitespace() {
                        break;
                    }
                    k += d.len_utf8();
                }
                out.push(&text[split..k]);
                i = k;
            } else {
                i = j;
            }
        } else {
            let mut k = i;
            while k < text.len() {
                let d = text[k..].chars().next().expect("in bounds");
                if d.is_whitespace() {
                    break;
                }
                k += d.len_utf8();
            }
            out.push(&text[i..k]);
            i = k;
        }
    }
    out
}

fn is_word_chunk(chunk: &str) -> bool {
    chunk.chars().any(|c| !c.is_whitespace())
}

/// Fit on the corpus text, keeping `atomic_words` whole.
pub fn fit_bpe(corpus: &Corpus) -> Result<BpeModel> {
    let atomic_words = corpus.spec().lexicon.content_words();
    fit_bpe_on(&corpus.sentences, &atomic_words, N_MERGES)
}

pub fn fit_bpe_on(lines: &[String], atomic_words: &[String], n_merges: usize) -> Result<BpeModel> {
    if lines.iter().all(|l| l.trim().is_empty()) {
        return Err(Error::Invalid("cannot fit BPE on an empty corpus".into()));
    }
    let atomic: BTreeSet<String> = atomic_words.iter().map(|w| format!(" {w}")).collect();

    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut alphabet: BTreeSet<String> = BTreeSet::new();
    for line in lines {
        for chunk in pretokenize(line) {
            for c in chunk.chars() {
                alphabet.insert(c.to_string());
            }
            if is_word_chunk(chunk) && !atomic.contains(chunk) {
                *word_counts.entry(chunk).or_default() += 1;
            }
        }
    }

    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .iter()
        .map(|(w, &n)| (w.chars().map(|c| c.to_string()).collect(), n))
        .collect();

    let mut merges: Vec<(String, String)> = Vec::with_capacity(n_merges);
    while merges.len() < n_merges {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += n;
            }
        }
        // Highest count; ties broken by the lexicographically smallest pair.
        let Some(((a, b), _)) = pairs
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let (a, b) = (a.to_string(), b.to_string());
        for (syms, _) in words.iter_mut() {
            apply_merge(syms, &a, &b);
        }
        merges.push((a, b));
    }
    let short_of_budget = merges.len() < n_merges;
    if short_of_budget {
        log::warn!(
            "BPE fit produced only {} of {} merges: corpus exhausted",
            merges.len(),
            n_merges
        );
    }

    let mut vocab = BTreeMap::new();
    let mut next = 0u32;
    let mut add = |vocab: &mut BTreeMap<String, u32>, tok: String| {
        if !vocab.contains_key(&tok) {
            vocab.insert(tok, next);
            next += 1;
        }
    };
    for s in [PAD, BOS, EOS] {
        add(&mut vocab, s.to_string());
    }
    for b in 0..=255u8 {
        add(&mut vocab, byte_token(b));
    }
    for c in &alphabet {
        add(&mut vocab, c.clone());
    }
    for w in &atomic {
        add(&mut vocab, w.clone());
    }
    for (a, b) in &merges {
        add(&mut vocab, format!("{a}{b}"));
    }

    let mut model = BpeModel {
        merges,
        vocab,
        alphabet: alphabet.into_iter().collect(),
        atomic: atomic.into_iter().collect(),
        short_of_budget,
        index: None,
    };
    model.build_index();
    Ok(model)
}

fn apply_merge(syms: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == a && syms[i + 1] == b {
            let merged = format!("{a}{b}");
            syms[i] = merged;
            syms.remove(i + 1);
        }
        i += 1;
    }
}

impl BpeModel {
    fn build_index(&mut self) {
        let mut id_to_token = vec![String::new(); self.vocab.len()];
        for (tok, &id) in &self.vocab {
            id_to_token[id as usize] = tok.clone();
        }
        let ranks = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, (a, b))| ((a.clone(), b.clone()), i))
            .collect();
        let atomic = self
            .atomic
            .iter()
            .map(|w| (w.clone(), self.vocab[w]))
            .collect();
        self.index = Some(Index {
            id_to_token,
            ranks,
            atomic,
        });
    }

    fn index(&self) -> &Index {
        self.index
            .as_ref()
            .expect("index built on construction and load")
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn pad_id(&self) -> u32 {
        self.vocab[PAD]
    }

    pub fn bos_id(&self) -> u32 {
        self.vocab[BOS]
    }

    pub fn eos_id(&self) -> u32 {
        self.vocab[EOS]
    }

    pub fn token_str(&self, id: u32) -> &str {
        &self.index().id_to_token[id as usize]
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        self.encode_counting(text).0
    }

    /// Encode and report how many byte-fallback tokens were emitted.
    pub fn encode_counting(&self, text: &str) -> (TokenSeq, usize) {
        let mut ids = Vec::new();
        let mut fallbacks = 0;
        for chunk in pretokenize(text) {
            fallbacks += self.encode_chunk(chunk, &mut ids);
        }
        (TokenSeq(ids), fallbacks)
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) -> usize {
        let idx = self.index();
        if let Some(&id) = idx.atomic.get(chunk) {
            out.push(id);
            return 0;
        }
        // Byte-fallback symbols are marked so they never take part in merges.
        let mut syms: Vec<(String, bool)> = Vec::new();
        let mut fallbacks = 0;
        for c in chunk.chars() {
            let s = c.to_string();
            if self.vocab.contains_key(&s) {
                syms.push((s, false));
            } else {
                let mut buf = [0u8; 4];
                for b in c.encode_utf8(&mut buf).bytes() {
                    syms.push((byte_token(b), true));
                    fallbacks += 1;
                }
            }
        }
        if is_word_chunk(chunk) {
            loop {
                let best = syms
                    .windows(2)
                    .enumerate()
                    .filter(|(_, w)| !w[0].1 && !w[1].1)
                    .filter_map(|(i, w)| {
                        idx.ranks
                            .get(&(w[0].0.clone(), w[1].0.clone()))
                            .map(|&r| (r, i))
                    })
                    .min();
                let Some((rank, _)) = best else { break };
                let (a, b) = &self.merges[rank];
                let mut i = 0;
                while i + 1 < syms.len() {
                    if !syms[i].1 && !syms[i + 1].1 && syms[i].0 == *a && syms[i + 1].0 == *b {
                        syms[i].0 = format!("{a}{b}");
                        syms.remove(i + 1);
                    }
                    i += 1;
                }
            }
        }
        out.extend(syms.iter().map(|(s, _)| self.vocab[s]));
        fallbacks
    }

    pub fn decode(&self, seq: &TokenSeq) -> String {
        self.decode_ids(seq.ids())
    }

    pub fn decode_ids(&self, ids: &[u32]) -> String {
        let mut bytes: Vec<u8> = Vec::new();
        for &id in ids {
            let tok = self.token_str(id);
            if let Some(b) = parse_byte_token(tok) {
                bytes.push(b);
            } else if tok == PAD || tok == BOS || tok == EOS {
                continue;
            } else {
                bytes.extend_from_slice(tok.as_bytes());
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Byte-fallback events when encoding every sentence of `corpus`.
    pub fn oov_count(&self, corpus: &Corpus) -> usize {
        corpus
            .sentences
            .iter()
            .map(|s| self.encode_counting(s).1)
            .sum()
    }

    /// Ids of the word as it appears mid-sentence (with its leading space).
    pub fn word_ids(&self, word: &str) -> TokenSeq {
        self.encode(&format!(" {word}"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsx::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut model: BpeModel = fsx::read_json(path)?;
        model.build_index();
        Ok(model)
    }
}
