use serde::{Deserialize, Serialize};

use super::FeatureDim;

/// One position in a frame pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Noun,
    Shape,
    Colour,
    Texture,
    /// Kind-independent scene word.
    Context,
    Word(String),
}

impl Slot {
    pub fn feature_dim(&self) -> Option<FeatureDim> {
        match self {
            Slot::Shape => Some(FeatureDim::Shape),
            Slot::Colour => Some(FeatureDim::Colour),
            Slot::Texture => Some(FeatureDim::Texture),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameRole {
    /// Standard training frame (shape-first feature order).
    Training,
    /// FeatureSwap domain-B training frame (texture-first, "feels").
    DomainB,
    /// Never appears in training text; used only by frame-variant items.
    HeldOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameTemplate {
    pub frame_id: usize,
    pub pattern: Vec<Slot>,
    pub labelled: bool,
    pub role: FrameRole,
}

impl FrameTemplate {
    fn parse(frame_id: usize, text: &str, role: FrameRole) -> Self {
        let pattern: Vec<Slot> = text
            .split_whitespace()
            .map(|w| match w {
                "{noun}" => Slot::Noun,
                "{shape}" => Slot::Shape,
                "{colour}" => Slot::Colour,
                "{texture}" => Slot::Texture,
                "{ctx}" => Slot::Context,
                lit => Slot::Word(lit.to_string()),
            })
            .collect();
        let labelled = pattern.contains(&Slot::Noun);
        FrameTemplate {
            frame_id,
            pattern,
            labelled,
            role,
        }
    }

    pub fn slot_index(&self, slot: &Slot) -> Option<usize> {
        self.pattern.iter().position(|s| s == slot)
    }

    /// The first feature slot of the frame.
    pub fn first_feature(&self) -> Option<FeatureDim> {
        self.pattern.iter().find_map(Slot::feature_dim)
    }

    /// True when the noun appears before every feature slot, so the noun is
    /// visible at each feature's prediction position.
    pub fn noun_leads(&self) -> bool {
        match (
            self.slot_index(&Slot::Noun),
            self.pattern.iter().position(|s| s.feature_dim().is_some()),
        ) {
            (Some(n), Some(f)) => n < f,
            _ => false,
        }
    }

    /// Words preceding the `dim` slot, with the noun slot filled by `label`
    /// (dropped when `label` is `None`) and earlier feature slots taken from
    /// `fills`.
    pub fn prefix_before(
        &self,
        dim: FeatureDim,
        label: Option<&str>,
        fills: &dyn Fn(FeatureDim) -> String,
    ) -> Option<String> {
        let end = self.slot_index(&dim.slot())?;
        let mut words: Vec<String> = Vec::with_capacity(end);
        for slot in &self.pattern[..end] {
            match slot {
                Slot::Noun => {
                    if let Some(l) = label {
                        words.push(l.to_string());
                    }
                }
                Slot::Word(w) => words.push(w.clone()),
                Slot::Context => return None,
                s => words.push(fills(s.feature_dim().expect("feature slot"))),
            }
        }
        Some(words.join(" "))
    }
}

const TRAINING_LABELLED: [&str; 5] = [
    "A {noun} is a {shape} {colour} {texture} thing near {ctx}",
    "the {noun} looks {shape} {colour} {texture} near {ctx}",
    "that {shape} {colour} {texture} thing is a {noun} near {ctx}",
    "this {noun} is a {shape} {colour} {texture} one near {ctx}",
    "here is a {noun} , a {shape} {colour} {texture} thing near {ctx}",
];

const TRAINING_NO_LABEL: [&str; 3] = [
    "it is a {shape} {colour} {texture} thing near {ctx}",
    "there is a {shape} {colour} {texture} thing near {ctx}",
    "look at the {shape} {colour} {texture} thing near {ctx}",
];

const DOMAIN_B_LABELLED: [&str; 5] = [
    "A {noun} feels {texture} {colour} {shape} near {ctx}",
    "the {noun} feels {texture} {colour} {shape} near {ctx}",
    "that {texture} {colour} {shape} thing feels like a {noun} near {ctx}",
    "this {noun} feels {texture} {colour} {shape} near {ctx}",
    "here is a {noun} , it feels {texture} {colour} {shape} near {ctx}",
];

const DOMAIN_B_NO_LABEL: [&str; 3] = [
    "it feels {texture} {colour} {shape} near {ctx}",
    "there is a thing that feels {texture} {colour} {shape} near {ctx}",
    "look at the thing that feels {texture} {colour} {shape} near {ctx}",
];

const HELD_OUT: [&str; 2] = [
    "every {noun} is a {shape} {colour} {texture} thing",
    "my {noun} seems {shape} {colour} {texture}",
];

/// Literal words used only by battery prompts (count/mass syntax).
pub const BATTERY_LITERALS: [&str; 4] = ["one", "some", "made", "of"];

pub const N_TRAINING_FRAMES: usize = TRAINING_LABELLED.len() + TRAINING_NO_LABEL.len();

/// Every frame known to the generator. Ids are stable: 0-4 labelled training,
/// 5-7 no-label training, 8-15 the domain-B counterparts, 16-17 held out.
pub fn frame_catalog() -> Vec<FrameTemplate> {
    let groups: [(&[&str], FrameRole); 5] = [
        (&TRAINING_LABELLED, FrameRole::Training),
        (&TRAINING_NO_LABEL, FrameRole::Training),
        (&DOMAIN_B_LABELLED, FrameRole::DomainB),
        (&DOMAIN_B_NO_LABEL, FrameRole::DomainB),
        (&HELD_OUT, FrameRole::HeldOut),
    ];
    let mut out = Vec::new();
    for (texts, role) in groups {
        for text in texts {
            out.push(FrameTemplate::parse(out.len(), text, role));
        }
    }
    out
}

/// All literal words any frame or battery prompt can emit.
pub fn all_literals() -> Vec<String> {
    let mut words: Vec<String> = frame_catalog()
        .iter()
        .flat_map(|f| f.pattern.iter())
        .filter_map(|s| match s {
            Slot::Word(w) => Some(w.clone()),
            _ => None,
        })
        .chain(BATTERY_LITERALS.iter().map(|s| s.to_string()))
        .collect();
    words.sort();
    words.dedup();
    words
}
