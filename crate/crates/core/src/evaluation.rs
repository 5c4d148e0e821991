//! Exact-match scoring of predicted triplets.
//!
//! Counts are pooled over the whole corpus before rates are computed. Within
//! a sentence each gold item can be matched at most once.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Triplet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.true_positives, self.predicted);
        let recall = ratio(self.true_positives, self.gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn check_aligned(predicted: &[Vec<Triplet>], gold: &[Vec<Triplet>]) -> Result<()> {
    if predicted.len() != gold.len() {
        return Err(Error::Misaligned {
            predicted: predicted.len(),
            gold: gold.len(),
        });
    }
    Ok(())
}

/// Size of the multiset intersection of `a` and `b`.
fn matched<K: Ord>(a: impl IntoIterator<Item = K>, b: impl IntoIterator<Item = K>) -> usize {
    let mut counts: BTreeMap<K, usize> = BTreeMap::new();
    for k in b {
        *counts.entry(k).or_default() += 1;
    }
    let mut hits = 0;
    for k in a {
        if let Some(c) = counts.get_mut(&k) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    hits
}

fn count<K: Ord>(
    predicted: &[Vec<Triplet>],
    gold: &[Vec<Triplet>],
    key: impl Fn(&Triplet) -> K + Copy,
) -> Result<Counts> {
    check_aligned(predicted, gold)?;
    let mut c = Counts::default();
    for (p, g) in predicted.iter().zip(gold) {
        c.true_positives += matched(p.iter().map(key), g.iter().map(key));
        c.predicted += p.len();
        c.gold += g.len();
    }
    Ok(c)
}

pub fn triplet_counts(predicted: &[Vec<Triplet>], gold: &[Vec<Triplet>]) -> Result<Counts> {
    count(predicted, gold, |t| (t.start, t.end, t.polarity))
}

pub fn aspect_counts(predicted: &[Vec<Triplet>], gold: &[Vec<Triplet>]) -> Result<Counts> {
    count(predicted, gold, |t| t.span())
}

/// Exact `(start, end, polarity)` matching.
pub fn triplet_prf(predicted: &[Vec<Triplet>], gold: &[Vec<Triplet>]) -> Result<Prf> {
    Ok(triplet_counts(predicted, gold)?.prf())
}

/// Exact span matching with polarity ignored.
pub fn aspect_prf(predicted: &[Vec<Triplet>], gold: &[Vec<Triplet>]) -> Result<Prf> {
    Ok(aspect_counts(predicted, gold)?.prf())
}

/// Share of span-matched predictions whose polarity is also right. `None`
/// when no predicted span matches a gold span.
pub fn polarity_accuracy(predicted: &[Vec<Triplet>], gold: &[Vec<Triplet>]) -> Result<Option<f64>> {
    let spans = aspect_counts(predicted, gold)?.true_positives;
    let full = triplet_counts(predicted, gold)?.true_positives;
    Ok((spans > 0).then(|| full as f64 / spans as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub triplet: Prf,
    pub aspect: Prf,
    pub polarity_accuracy: Option<f64>,
    pub triplet_counts: Counts,
    pub aspect_counts: Counts,
}

impl EvalReport {
    pub fn compute(predicted: &[Vec<Triplet>], gold: &[Vec<Triplet>]) -> Result<Self> {
        let triplet_counts = triplet_counts(predicted, gold)?;
        let aspect_counts = aspect_counts(predicted, gold)?;
        Ok(EvalReport {
            triplet: triplet_counts.prf(),
            aspect: aspect_counts.prf(),
            polarity_accuracy: polarity_accuracy(predicted, gold)?,
            triplet_counts,
            aspect_counts,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One `key=value` pair per line.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, p, c) in [
            ("triplet", &self.triplet, &self.triplet_counts),
            ("aspect", &self.aspect, &self.aspect_counts),
        ] {
            writeln!(f, "{name}_precision={:.6}", p.precision)?;
            writeln!(f, "{name}_recall={:.6}", p.recall)?;
            writeln!(f, "{name}_f1={:.6}", p.f1)?;
            writeln!(f, "{name}_true_positives={}", c.true_positives)?;
            writeln!(f, "{name}_predicted={}", c.predicted)?;
            writeln!(f, "{name}_gold={}", c.gold)?;
        }
        match self.polarity_accuracy {
            Some(a) => writeln!(f, "polarity_accuracy={a:.6}"),
            None => writeln!(f, "polarity_accuracy=n/a"),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::Polarity::{self, *};
    use proptest::prelude::*;

    fn t(s: usize, e: usize, p: Polarity) -> Triplet {
        Triplet::new(s, e, p)
    }

    #[test]
    fn perfect_match() {
        let g = vec![vec![t(2, 3, Positive), t(10, 10, Negative)]];
        let r = triplet_prf(&g, &g).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn half_recall() {
        let g = vec![vec![t(2, 3, Positive), t(10, 10, Negative)]];
        let p = vec![vec![t(2, 3, Positive)]];
        let r = triplet_prf(&p, &g).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.f1, 2.0 / 3.0);
    }

    #[test]
    fn spans_must_match_exactly() {
        let r = triplet_prf(&[vec![t(2, 2, Positive)]], &[vec![t(2, 3, Positive)]]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn aspects_ignore_polarity() {
        let r = aspect_prf(&[vec![t(2, 3, Negative)]], &[vec![t(2, 3, Positive)]]).unwrap();
        assert_eq!(r.f1, 1.0);
        let r = aspect_prf(&[vec![]], &[vec![t(2, 3, Positive)]]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn polarity_accuracy_cases() {
        let g = vec![vec![t(0, 0, Positive), t(2, 3, Neutral)]];
        let p = vec![vec![t(0, 0, Positive), t(2, 3, Negative)]];
        assert_eq!(polarity_accuracy(&p, &g).unwrap(), Some(0.5));
        assert_eq!(polarity_accuracy(&g, &g).unwrap(), Some(1.0));
        assert_eq!(polarity_accuracy(&[vec![t(1, 1, Positive)]], &g).unwrap(), None);
    }

    #[test]
    fn misaligned_corpora_are_rejected() {
        let err = triplet_prf(&[vec![], vec![]], &[vec![]]).unwrap_err();
        assert!(matches!(err, Error::Misaligned { predicted: 2, gold: 1 }));
    }

    #[test]
    fn report_round_trips_through_json() {
        let g = vec![vec![t(0, 0, Positive)], vec![t(1, 2, Negative)]];
        let p = vec![vec![t(0, 0, Neutral)], vec![t(1, 2, Negative), t(4, 4, Positive)]];
        let r = EvalReport::compute(&p, &g).unwrap();
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let text = r.to_string();
        assert!(text.contains("triplet_f1=0.400000"));
        assert!(text.contains("polarity_accuracy=0.500000"));
        let none = EvalReport::compute(&[vec![]], &[vec![]]).unwrap();
        assert!(none.to_string().contains("polarity_accuracy=n/a"));
        assert!(none.to_json().contains("\"polarity_accuracy\": null"));
    }

    /// Maximum bipartite matching by exhaustive search over assignments.
    pub(crate) fn brute_force_matches<K: PartialEq>(pred: &[K], gold: &[K]) -> usize {
        fn go<K: PartialEq>(pred: &[K], gold: &[K], used: &mut Vec<bool>) -> usize {
            let Some((first, rest)) = pred.split_first() else {
                return 0;
            };
            let mut best = go(rest, gold, used);
            for j in 0..gold.len() {
                if !used[j] && gold[j] == *first {
                    used[j] = true;
                    best = best.max(1 + go(rest, gold, used));
                    used[j] = false;
                }
            }
            best
        }
        go(pred, gold, &mut vec![false; gold.len()])
    }

    pub(crate) fn arb_triplets() -> impl Strategy<Value = Vec<Triplet>> {
        proptest::collection::vec((0usize..4, 0usize..2, 0usize..3), 0..=5).prop_map(|v| {
            v.into_iter()
                .map(|(s, len, p)| Triplet::new(s, s + len, Polarity::ALL[p]))
                .collect()
        })
    }

    pub(crate) fn arb_corpus() -> impl Strategy<Value = (Vec<Vec<Triplet>>, Vec<Vec<Triplet>>)> {
        (1usize..6).prop_flat_map(|n| {
            (
                proptest::collection::vec(arb_triplets(), n),
                proptest::collection::vec(arb_triplets(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn counts_agree_with_brute_force((pred, gold) in arb_corpus()) {
            let tc = triplet_counts(&pred, &gold).unwrap();
            let ac = aspect_counts(&pred, &gold).unwrap();
            let mut tt = 0;
            let mut at = 0;
            for (p, g) in pred.iter().zip(&gold) {
                tt += brute_force_matches(p, g);
                let ps: Vec<_> = p.iter().map(Triplet::span).collect();
                let gs: Vec<_> = g.iter().map(Triplet::span).collect();
                at += brute_force_matches(&ps, &gs);
            }
            prop_assert_eq!(tc.true_positives, tt);
            prop_assert_eq!(ac.true_positives, at);
        }

        #[test]
        fn triplet_f1_never_exceeds_aspect_f1((pred, gold) in arb_corpus()) {
            let t = triplet_prf(&pred, &gold).unwrap();
            let a = aspect_prf(&pred, &gold).unwrap();
            prop_assert!(t.f1 <= a.f1 + 1e-15);
            for r in [t, a] {
                for x in [r.precision, r.recall, r.f1] {
                    prop_assert!((0.0..=1.0).contains(&x));
                }
            }
        }

        #[test]
        fn order_does_not_matter((pred, gold) in arb_corpus()) {
            let base = EvalReport::compute(&pred, &gold).unwrap();
            let mut p2: Vec<Vec<Triplet>> = pred.iter().rev().cloned().collect();
            let mut g2: Vec<Vec<Triplet>> = gold.iter().rev().cloned().collect();
            for s in p2.iter_mut().chain(g2.iter_mut()) {
                s.reverse();
            }
            prop_assert_eq!(EvalReport::compute(&p2, &g2).unwrap(), base);
        }
    }
}
