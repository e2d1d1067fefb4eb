use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64Mcg;

/// Independent PRNG streams. Separate streams keep e.g. kind assignments
/// identical across conditions that share a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Lexicon = 1,
    Nouns = 2,
    Sizes = 3,
    StableTokens = 4,
    ScrambledDims = 5,
    Domains = 6,
    Markers = 7,
    Fill = 8,
    Context = 9,
    Noise = 10,
    FreqMatch = 11,
    Fraction = 12,
}

pub fn stream(seed: u64, which: Stream) -> Pcg64Mcg {
    stream_with(seed, which as u64)
}

pub fn stream_with(seed: u64, salt: u64) -> Pcg64Mcg {
    let mixed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
        ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    Pcg64Mcg::seed_from_u64(mixed)
}

/// Deals items from a shuffled deck, reshuffling a fresh deck when empty.
/// Over any window of `len` consecutive deals each item appears at most twice.
#[derive(Debug, Clone)]
pub struct Dealer<T: Clone> {
    items: Vec<T>,
    deck: Vec<T>,
}

impl<T: Clone> Dealer<T> {
    pub fn new(items: Vec<T>) -> Self {
        assert!(!items.is_empty(), "dealer needs at least one item");
        Dealer {
            items,
            deck: Vec::new(),
        }
    }

    pub fn deal(&mut self, rng: &mut Pcg64Mcg) -> T {
        if self.deck.is_empty() {
            self.deck = self.items.clone();
            self.deck.shuffle(rng);
        }
        self.deck.pop().expect("deck refilled above")
    }
}
