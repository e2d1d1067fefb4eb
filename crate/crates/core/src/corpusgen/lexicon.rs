use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::frames::all_literals;
use super::rng::{stream, Stream};
use super::FeatureDim;
use crate::error::{Error, Result};

pub const N_TRAIN_KINDS: usize = 32;
pub const N_NOVEL_KINDS: usize = 8;
pub const N_FEATURE_TOKENS: usize = 10;
pub const N_MARKERS: usize = 4;
pub const N_CONTEXT_WORDS: usize = 268;

/// Seed for the nonce lexicon. Shared by every condition and corpus seed.
pub const LEXICON_SEED: u64 = 2024;

pub(crate) const RESERVED_NOUNS: [(usize, &str); 2] = [(0, "blicket"), (N_TRAIN_KINDS, "zull")];
const RESERVED_SHAPES: [&str; 2] = ["mundi", "sallo"];
pub(crate) const RESERVED_COLOURS: [&str; 2] = ["zeppo", "lavo"];
pub(crate) const RESERVED_TEXTURES: [&str; 2] = ["frell", "glaven"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Every nonce string used by a corpus: nouns, feature tokens, category
/// markers and scene (context) words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonceLexicon {
    /// 32 trained nouns followed by 8 novel nouns.
    pub nouns: Vec<String>,
    pub shape_tokens: Vec<String>,
    pub colour_tokens: Vec<String>,
    pub texture_tokens: Vec<String>,
    pub markers: Vec<String>,
    pub context_words: Vec<String>,
}

impl NonceLexicon {
    /// The lexicon is a pure function of [`LEXICON_SEED`].
    pub fn generate() -> Result<Self> {
        let mut rng = stream(LEXICON_SEED, Stream::Lexicon);
        let mut taken: BTreeSet<String> = all_literals().into_iter().collect();
        for s in RESERVED_NOUNS
            .iter()
            .map(|(_, s)| *s)
            .chain(RESERVED_SHAPES)
            .chain(RESERVED_COLOURS)
            .chain(RESERVED_TEXTURES)
        {
            if !taken.insert(s.to_string()) {
                return Err(Error::LexiconCollision(s.to_string()));
            }
        }

        let mut fresh = |n: usize| -> Vec<String> {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let w = cvcv_word(&mut rng);
                if taken.insert(w.clone()) {
                    out.push(w);
                }
            }
            out
        };

        let total_nouns = N_TRAIN_KINDS + N_NOVEL_KINDS;
        let mut generated = fresh(total_nouns - RESERVED_NOUNS.len()).into_iter();
        let nouns = (0..total_nouns)
            .map(|i| match RESERVED_NOUNS.iter().find(|(idx, _)| *idx == i) {
                Some((_, s)) => s.to_string(),
                None => generated.next().expect("enough generated nouns"),
            })
            .collect();

        let mut with_reserved = |reserved: [&str; 2]| -> Vec<String> {
            reserved
                .iter()
                .map(|s| s.to_string())
                .chain(fresh(N_FEATURE_TOKENS - reserved.len()))
                .collect()
        };
        let shape_tokens = with_reserved(RESERVED_SHAPES);
        let colour_tokens = with_reserved(RESERVED_COLOURS);
        let texture_tokens = with_reserved(RESERVED_TEXTURES);
        let markers = fresh(N_MARKERS);
        let context_words = fresh(N_CONTEXT_WORDS);

        let lex = NonceLexicon {
            nouns,
            shape_tokens,
            colour_tokens,
            texture_tokens,
            markers,
            context_words,
        };
        lex.validate()?;
        Ok(lex)
    }

    pub fn tokens(&self, dim: FeatureDim) -> &[String] {
        match dim {
            FeatureDim::Shape => &self.shape_tokens,
            FeatureDim::Colour => &self.colour_tokens,
            FeatureDim::Texture => &self.texture_tokens,
        }
    }

    pub fn train_nouns(&self) -> &[String] {
        &self.nouns[..N_TRAIN_KINDS]
    }

    pub fn novel_nouns(&self) -> &[String] {
        &self.nouns[N_TRAIN_KINDS..]
    }

    /// All 30 feature tokens, shape then colour then texture.
    pub fn feature_tokens(&self) -> impl Iterator<Item = &String> {
        self.shape_tokens
            .iter()
            .chain(&self.colour_tokens)
            .chain(&self.texture_tokens)
    }

    /// Which dimension a feature token belongs to, if any.
    pub fn dim_of(&self, token: &str) -> Option<FeatureDim> {
        FeatureDim::ALL
            .into_iter()
            .find(|&d| self.tokens(d).iter().any(|t| t == token))
    }

    /// Words that the tokenizer keeps atomic: nouns, feature tokens and markers.
    pub fn content_words(&self) -> Vec<String> {
        self.nouns
            .iter()
            .chain(self.feature_tokens())
            .chain(&self.markers)
            .cloned()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("nouns", self.nouns.len(), N_TRAIN_KINDS + N_NOVEL_KINDS),
            ("shape", self.shape_tokens.len(), N_FEATURE_TOKENS),
            ("colour", self.colour_tokens.len(), N_FEATURE_TOKENS),
            ("texture", self.texture_tokens.len(), N_FEATURE_TOKENS),
            ("markers", self.markers.len(), N_MARKERS),
        ];
        for (name, got, want) in sizes {
            if got != want {
                return Err(Error::InvalidSpec(format!(
                    "lexicon has {got} {name}, expected {want}"
                )));
            }
        }
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let literals = all_literals();
        for w in self
            .nouns
            .iter()
            .chain(self.feature_tokens())
            .chain(&self.markers)
            .chain(&self.context_words)
        {
            if w.is_empty() || w.split_whitespace().count() != 1 {
                return Err(Error::InvalidSpec(format!(
                    "lexicon entry {w:?} is not one word"
                )));
            }
            if !seen.insert(w) || literals.iter().any(|l| l == w) {
                return Err(Error::LexiconCollision(w.clone()));
            }
        }
        Ok(())
    }
}

fn cvcv_word<R: Rng>(rng: &mut R) -> String {
    let c = |rng: &mut R| CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char;
    let v = |rng: &mut R| VOWELS[rng.random_range(0..VOWELS.len())] as char;
    let mut w = String::with_capacity(5);
    w.push(c(rng));
    w.push(v(rng));
    w.push(c(rng));
    w.push(v(rng));
    if rng.random_bool(0.5) {
        w.push(c(rng));
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_is_deterministic_and_pins_reserved_strings() {
        let a = NonceLexicon::generate().unwrap();
        let b = NonceLexicon::generate().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.nouns[0], "blicket");
        assert_eq!(a.novel_nouns()[0], "zull");
        assert!(a.shape_tokens.contains(&"mundi".to_string()));
        assert!(a.shape_tokens.contains(&"sallo".to_string()));
        assert!(a.colour_tokens.contains(&"lavo".to_string()));
        assert!(a.texture_tokens.contains(&"glaven".to_string()));
        assert_eq!(a.context_words.len(), N_CONTEXT_WORDS);
    }

    #[test]
    fn duplicate_entry_is_a_collision() {
        let mut lex = NonceLexicon::generate().unwrap();
        lex.colour_tokens[3] = lex.shape_tokens[0].clone();
        assert!(matches!(lex.validate(), Err(Error::LexiconCollision(_))));
    }

    #[test]
    fn frame_literal_in_lexicon_is_a_collision() {
        let mut lex = NonceLexicon::generate().unwrap();
        lex.context_words[0] = "thing".into();
        assert!(matches!(lex.validate(), Err(Error::LexiconCollision(_))));
    }
}
