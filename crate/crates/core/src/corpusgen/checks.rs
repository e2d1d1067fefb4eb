use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::{Corpus, FeatureDim, N_FEATURE_TOKENS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationCheckReport {
    /// MI (bits) between noun identity and the shape-slot token over
    /// noun-labelled sentences. `None` when no sentence carries a noun.
    pub mi_noun_shape_slot: Option<f64>,
    /// MI (bits) between noun identity and any feature token, pooling all
    /// three slots.
    pub mi_noun_all_slots: Option<f64>,
    /// kind_id -> normalized entropy per dimension (shape, colour, texture).
    pub per_kind_normalized_entropy: BTreeMap<usize, [f64; 3]>,
}

/// MI in bits of the empirical joint distribution of `pairs`.
pub fn mutual_information_bits<A, B>(pairs: &[(A, B)]) -> f64
where
    A: Eq + Hash + Clone,
    B: Eq + Hash + Clone,
{
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let mut joint: HashMap<(A, B), f64> = HashMap::new();
    let mut left: HashMap<A, f64> = HashMap::new();
    let mut right: HashMap<B, f64> = HashMap::new();
    for (a, b) in pairs {
        *joint.entry((a.clone(), b.clone())).or_default() += 1.0;
        *left.entry(a.clone()).or_default() += 1.0;
        *right.entry(b.clone()).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|((a, b), &c)| {
            let pab = c / n;
            pab * (pab / ((left[a] / n) * (right[b] / n))).log2()
        })
        .sum::<f64>()
        .max(0.0)
}

fn normalized_entropy<'a>(tokens: impl Iterator<Item = &'a str>) -> f64 {
    let mut counts: HashMap<&str, f64> = HashMap::new();
    let mut n = 0.0;
    for t in tokens {
        *counts.entry(t).or_default() += 1.0;
        n += 1.0;
    }
    if n == 0.0 {
        return 0.0;
    }
    let h: f64 = counts.values().map(|&c| -(c / n) * (c / n).log2()).sum();
    (h / (N_FEATURE_TOKENS as f64).log2()).max(0.0)
}

pub fn manipulation_check(corpus: &Corpus) -> ManipulationCheckReport {
    let spec = corpus.spec();
    let prov = &corpus.metadata.provenance;

    let labelled: Vec<_> = prov
        .iter()
        .filter(|r| r.has_noun(spec.kind(r.kind_id)))
        .collect();
    let (mi_shape, mi_all) = if labelled.is_empty() {
        (None, None)
    } else {
        let shape: Vec<(usize, &str)> = labelled
            .iter()
            .map(|r| (r.kind_id, r.fill(FeatureDim::Shape)))
            .collect();
        let all: Vec<(usize, &str)> = labelled
            .iter()
            .flat_map(|r| r.fills.iter().map(move |t| (r.kind_id, t.as_str())))
            .collect();
        (
            Some(mutual_information_bits(&shape)),
            Some(mutual_information_bits(&all)),
        )
    };

    let per_kind = spec
        .trained_kinds()
        .map(|k| {
            let rows: Vec<_> = prov.iter().filter(|r| r.kind_id == k.kind_id).collect();
            let h = FeatureDim::ALL.map(|d| normalized_entropy(rows.iter().map(|r| r.fill(d))));
            (k.kind_id, h)
        })
        .collect();

    ManipulationCheckReport {
        mi_noun_shape_slot: mi_shape,
        mi_noun_all_slots: mi_all,
        per_kind_normalized_entropy: per_kind,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpusgen::{generate_corpus, CorpusCondition, CorpusSpec};

    fn corpus(cond: CorpusCondition, seed: u64) -> Corpus {
        generate_corpus(&CorpusSpec::new(cond, seed, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn two_kind_toy_has_one_bit() {
        let pairs: Vec<(u8, &str)> = (0..20)
            .map(|i| if i % 2 == 0 { (1, "mundi") } else { (2, "dax") })
            .collect();
        assert!((mutual_information_bits(&pairs) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_variables_have_zero_mi() {
        let pairs: Vec<(u8, u8)> = (0..4).flat_map(|a| (0..5).map(move |b| (a, b))).collect();
        assert!(mutual_information_bits(&pairs).abs() < 1e-12);
    }

    #[test]
    fn regular_shape_entropy_zero_and_others_high() {
        let rep = manipulation_check(&corpus(CorpusCondition::Regular, 42));
        assert_eq!(rep.per_kind_normalized_entropy.len(), 32);
        for h in rep.per_kind_normalized_entropy.values() {
            assert_eq!(h[0], 0.0);
            assert!(h[1] > 0.8 && h[2] > 0.8, "{h:?}");
        }
    }

    #[test]
    fn regular_mi_exceeds_scrambled_on_matched_seeds() {
        for seed in [42, 123, 456, 789, 1001] {
            let r = manipulation_check(&corpus(CorpusCondition::Regular, seed));
            let s = manipulation_check(&corpus(CorpusCondition::Scrambled, seed));
            assert!(r.mi_noun_shape_slot.unwrap() > s.mi_noun_shape_slot.unwrap());
        }
    }

    #[test]
    fn scrambled_keeps_one_zero_entropy_slot_per_kind() {
        let c = corpus(CorpusCondition::Scrambled, 42);
        let rep = manipulation_check(&c);
        for (kind_id, h) in &rep.per_kind_normalized_entropy {
            assert_eq!(
                h.iter().filter(|&&x| x == 0.0).count(),
                1,
                "kind {kind_id}: {h:?}"
            );
        }
        let mut dims: Vec<_> = c.spec().trained_kinds().map(|k| k.stable_dim).collect();
        dims.sort();
        dims.dedup();
        assert!(dims.len() >= 2);
    }

    #[test]
    fn bare_has_no_mi_but_still_entropies() {
        let rep = manipulation_check(&corpus(CorpusCondition::BareNoLabel, 42));
        assert!(rep.mi_noun_shape_slot.is_none());
        assert_eq!(rep.per_kind_normalized_entropy.len(), 32);
    }
}
