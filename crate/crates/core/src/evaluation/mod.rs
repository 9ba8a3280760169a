//! Retrieval metrics: top-K with the `L + K - 1` rule, MRR, (cutoff) mAP and
//! the few-shot generalization buckets.

mod buckets;
mod report;

pub use buckets::{
    generalization_buckets, standard_cases, BucketCase, BucketRow, FactOutcome, MAX_BUCKET_TRAIN,
};
pub use report::{
    assemble_report, write_bucket_csv, EvalReport, FactRank, LanguageViewReport, MapRow,
    MetricFamily, OrderRow, RunMeta, SeenRow, VisualQuery, VisualViewReport, TOP_KS,
};

use std::collections::HashSet;
use std::hash::Hash;

use log::warn;

use crate::retrieval::Rank;

/// Average precision of a ranking. With a cutoff only the first `cutoff`
/// items count and the denominator is `min(|relevant|, cutoff)`. Returns
/// `None` (with a warning) when nothing is relevant.
pub fn average_precision<I: Eq + Hash>(
    ranked: &[I],
    relevant: &HashSet<I>,
    cutoff: Option<usize>,
) -> Option<f64> {
    if relevant.is_empty() {
        warn!("average precision undefined for an empty relevant set");
        return None;
    }
    let limit = cutoff.unwrap_or(usize::MAX);
    let denom = cutoff.map_or(relevant.len(), |c| relevant.len().min(c));
    if denom == 0 {
        return Some(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, item) in ranked.iter().take(limit).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / denom as f64)
}

/// An image (or image/order group) with `L` ground-truth facts succeeds at
/// top-K when every fact is ranked within `L + K - 1`.
pub fn topk_success(ranks: &[Rank], k: usize) -> bool {
    let cutoff = ranks.len() + k - 1;
    !ranks.is_empty() && ranks.iter().all(|r| r.within(cutoff))
}

/// Percentage of units that succeed at top-K; `None` without units.
pub fn topk_language_accuracy(units: &[Vec<Rank>], k: usize) -> Option<f64> {
    if units.is_empty() {
        return None;
    }
    let ok = units.iter().filter(|u| topk_success(u, k)).count();
    Some(100.0 * ok as f64 / units.len() as f64)
}

/// Mean of `1/r` over ground-truth facts, in percent. Unretrieved facts
/// contribute zero.
pub fn mean_reciprocal_rank(ranks: &[Rank]) -> Option<f64> {
    if ranks.is_empty() {
        return None;
    }
    Some(100.0 * ranks.iter().map(|r| r.reciprocal()).sum::<f64>() / ranks.len() as f64)
}

/// mAP, mAP10 and mAP100 as fractions, over the queries that have at least
/// one positive. Returns `(values, skipped)`.
pub fn visual_view_map(queries: &[VisualQuery]) -> (Option<[f64; 3]>, usize) {
    let mut sums = [0.0; 3];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for q in queries {
        let relevant: HashSet<&str> = q.relevant.iter().map(String::as_str).collect();
        let ranked: Vec<&str> = q.ranked.iter().map(String::as_str).collect();
        if relevant.is_empty() {
            skipped += 1;
            continue;
        }
        for (s, cutoff) in sums.iter_mut().zip([None, Some(10), Some(100)]) {
            *s += average_precision(&ranked, &relevant, cutoff).expect("non-empty relevant set");
        }
        used += 1;
    }
    if skipped > 0 {
        warn!("{skipped} visual-view queries had no positive image and were skipped");
    }
    if used == 0 {
        return (None, skipped);
    }
    (Some(sums.map(|s| s / used as f64)), skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(v: &[&'static str]) -> HashSet<&'static str> {
        v.iter().copied().collect()
    }

    #[test]
    fn perfect_ranking_has_unit_ap() {
        assert_eq!(
            average_precision(&["a", "b", "c"], &set(&["a", "b"]), None),
            Some(1.0)
        );
    }

    #[test]
    fn ap_hand_case() {
        let ap = average_precision(&["a", "x", "b", "y"], &set(&["a", "b"]), None).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ap_cutoff_misses_everything() {
        let ranked: Vec<String> = (0..20).map(|i| format!("n{i}")).collect();
        let mut ranked = ranked;
        ranked.push("hit".into());
        let rel: HashSet<String> = ["hit".to_string()].into_iter().collect();
        assert_eq!(average_precision(&ranked, &rel, Some(10)), Some(0.0));
        assert!(average_precision(&ranked, &rel, None).unwrap() > 0.0);
    }

    #[test]
    fn ap_empty_relevant_is_undefined() {
        assert_eq!(average_precision(&["a"], &set(&[]), None), None);
    }

    #[test]
    fn l_plus_k_minus_one_rule() {
        assert!(topk_success(&[Rank::At(1)], 1));
        let ranks = [Rank::At(1), Rank::At(3)];
        assert!(!topk_success(&ranks, 1));
        assert!(topk_success(&ranks, 2));
        assert!(!topk_success(&[Rank::At(1), Rank::Missing], 50));
    }

    #[test]
    fn topk_matches_enumeration_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let l = rng.random_range(1..5);
            let ranks: Vec<Rank> = (0..l)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        Rank::Missing
                    } else {
                        Rank::At(rng.random_range(1..15))
                    }
                })
                .collect();
            let mut prev = false;
            for k in 1..20 {
                // oracle: the unit succeeds iff the sorted ranks all fit in the first L+K-1 slots
                let mut finite: Vec<usize> = ranks.iter().filter_map(|r| r.value()).collect();
                finite.sort();
                let expect = finite.len() == l && finite.iter().all(|r| *r < l + k);
                let got = topk_success(&ranks, k);
                assert_eq!(got, expect);
                assert!(!prev || got, "top-k must be monotone in k");
                prev = got;
            }
        }
    }

    #[test]
    fn accuracy_percent() {
        let units = vec![
            vec![Rank::At(1)],
            vec![Rank::At(2)],
            vec![Rank::At(1), Rank::At(2)],
            vec![Rank::Missing],
        ];
        assert_eq!(topk_language_accuracy(&units, 1), Some(50.0));
        assert_eq!(topk_language_accuracy(&units, 2), Some(75.0));
        assert_eq!(topk_language_accuracy(&[], 1), None);
    }

    #[test]
    fn mrr_cases() {
        assert_eq!(mean_reciprocal_rank(&[Rank::At(1)]), Some(100.0));
        assert_eq!(
            mean_reciprocal_rank(&[Rank::At(1), Rank::At(2)]),
            Some(75.0)
        );
        assert_eq!(
            mean_reciprocal_rank(&[Rank::At(1), Rank::Missing]),
            Some(50.0)
        );
    }

    fn q(ranked: &[&str], relevant: &[&str]) -> VisualQuery {
        VisualQuery {
            fact: crate::fact::parse_fact("dog").unwrap(),
            ranked: ranked.iter().map(|s| s.to_string()).collect(),
            relevant: relevant.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn single_positive_first() {
        let (m, skipped) = visual_view_map(&[q(&["a", "b", "c"], &["a"])]);
        assert_eq!(m, Some([1.0, 1.0, 1.0]));
        assert_eq!(skipped, 0);
    }

    #[test]
    fn unannotated_image_counts_as_wrong() {
        // "b" may well show a dog, but only annotated pairs are positives
        let (m, _) = visual_view_map(&[q(&["b", "a"], &["a"])]);
        assert_eq!(m, Some([0.5, 0.5, 0.5]));
    }

    #[test]
    fn zero_positive_queries_are_skipped() {
        let (m, skipped) = visual_view_map(&[q(&["a"], &[]), q(&["a"], &["a"])]);
        assert_eq!(m, Some([1.0; 3]));
        assert_eq!(skipped, 1);
        assert_eq!(visual_view_map(&[q(&["a"], &[])]).0, None);
    }

    #[test]
    fn map_matches_direct_ap_on_toy_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let images: Vec<String> = (0..20).map(|i| format!("img{i}")).collect();
        let mut queries = Vec::new();
        for _ in 0..6 {
            let mut ranked = images.clone();
            for i in (1..ranked.len()).rev() {
                ranked.swap(i, rng.random_range(0..=i));
            }
            let relevant: HashSet<String> = images
                .iter()
                .filter(|_| rng.random_bool(0.3))
                .cloned()
                .collect();
            queries.push(VisualQuery {
                fact: crate::fact::parse_fact("x").unwrap(),
                ranked,
                relevant,
            });
        }
        queries.retain(|q| !q.relevant.is_empty());
        // oracle: AP written out as the mean over relevant items of precision at their rank
        let direct = |q: &VisualQuery, cutoff: usize| {
            let positions: Vec<usize> = q
                .ranked
                .iter()
                .enumerate()
                .filter(|(i, id)| *i < cutoff && q.relevant.contains(*id))
                .map(|(i, _)| i + 1)
                .collect();
            let total: f64 = positions
                .iter()
                .enumerate()
                .map(|(j, pos)| (j + 1) as f64 / *pos as f64)
                .sum();
            total / q.relevant.len().min(cutoff) as f64
        };
        let (m, _) = visual_view_map(&queries);
        let m = m.unwrap();
        for (i, cutoff) in [usize::MAX, 10, 100].into_iter().enumerate() {
            let expect =
                queries.iter().map(|q| direct(q, cutoff)).sum::<f64>() / queries.len() as f64;
            assert!((m[i] - expect).abs() < 1e-12);
        }
    }
}
