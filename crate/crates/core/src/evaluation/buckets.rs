use serde::{Deserialize, Serialize};

use crate::fact::{Component, FactOrder, FrequencyTable, StructuredFact};

/// Only test facts with at most this many training examples are bucketed.
pub const MAX_BUCKET_TRAIN: usize = 5;

/// A few-shot case: facts of `order` whose component marginals all reach
/// their thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketCase {
    pub name: String,
    pub order: FactOrder,
    pub requirements: Vec<(Component, usize)>,
}

impl BucketCase {
    fn new(name: &str, order: FactOrder, requirements: &[(Component, usize)]) -> Self {
        BucketCase {
            name: name.to_string(),
            order,
            requirements: requirements.to_vec(),
        }
    }

    pub fn admits(&self, table: &FrequencyTable, fact: &StructuredFact) -> bool {
        fact.order() == self.order
            && table.count(fact) <= MAX_BUCKET_TRAIN
            && self
                .requirements
                .iter()
                .all(|(c, min)| table.marginal(fact, *c) >= *min)
    }
}

/// The SP bucket and the eight SPO buckets.
pub fn standard_cases() -> Vec<BucketCase> {
    use Component::*;
    let t = FactOrder::Third;
    vec![
        BucketCase::new("S>=15,P>=15", FactOrder::Second, &[(S, 15), (P, 15)]),
        BucketCase::new("SP>=15,O>=15", t, &[(SP, 15), (O, 15)]),
        BucketCase::new("PO>=15,S>=15", t, &[(PO, 15), (S, 15)]),
        BucketCase::new("SO>=15,P>=15", t, &[(SO, 15), (P, 15)]),
        BucketCase::new("SP>=15,PO>=15", t, &[(SP, 15), (PO, 15)]),
        BucketCase::new("SO>=15,PO>=15", t, &[(SO, 15), (PO, 15)]),
        BucketCase::new("SO>=15,SP>=15", t, &[(SO, 15), (SP, 15)]),
        BucketCase::new("S,P,O>=15", t, &[(S, 15), (P, 15), (O, 15)]),
        BucketCase::new("S,P,O>=100", t, &[(S, 100), (P, 100), (O, 100)]),
    ]
}

/// K10 outcomes of one test fact over all the images it annotates.
#[derive(Debug, Clone, PartialEq)]
pub struct FactOutcome {
    pub fact: StructuredFact,
    pub successes: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub case: String,
    pub order: u8,
    pub facts: usize,
    pub pairs: usize,
    /// Percent; `None` for an empty bucket.
    pub k10: Option<f64>,
}

pub fn generalization_buckets(
    table: &FrequencyTable,
    outcomes: &[FactOutcome],
    cases: &[BucketCase],
) -> Vec<BucketRow> {
    cases
        .iter()
        .map(|case| {
            let members: Vec<&FactOutcome> = outcomes
                .iter()
                .filter(|o| case.admits(table, &o.fact))
                .collect();
            let pairs: usize = members.iter().map(|o| o.trials).sum();
            let ok: usize = members.iter().map(|o| o.successes).sum();
            BucketRow {
                case: case.name.clone(),
                order: case.order.as_u8(),
                facts: members.len(),
                pairs,
                k10: (pairs > 0).then(|| 100.0 * ok as f64 / pairs as f64),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fact::{fact_frequency_table, parse_fact, Dataset, FactInstance, Split};

    fn inst(img: usize, fact: &str, split: Split) -> FactInstance {
        FactInstance {
            image_id: format!("{:?}{img}", split),
            split,
            features: vec![img as f64],
            fact: parse_fact(fact).unwrap(),
        }
    }

    fn table(train: &[(&str, usize)]) -> FrequencyTable {
        let mut rows = Vec::new();
        let mut img = 0;
        for (fact, n) in train {
            for _ in 0..*n {
                rows.push(inst(img, fact, Split::Train));
                img += 1;
            }
        }
        fact_frequency_table(&Dataset::new(1, rows).unwrap())
    }

    fn outcome(fact: &str, successes: usize, trials: usize) -> FactOutcome {
        FactOutcome {
            fact: parse_fact(fact).unwrap(),
            successes,
            trials,
        }
    }

    #[test]
    fn sp_and_o_case() {
        let t = table(&[
            ("man|ride|horse", 3),
            ("man|ride|bike", 12),
            ("dog|on|grass", 15),
        ]);
        let row = |f: &str| generalization_buckets(&t, &[outcome(f, 1, 2)], &standard_cases());
        // SP "man ride" = 15, O "horse" = 3
        let r = row("man|ride|horse");
        assert_eq!(r[1].facts, 0);
        // unseen fact: SP = 15, O "grass" = 15
        let r = row("man|ride|grass");
        assert_eq!(r[1].facts, 1);
        assert_eq!(r[1].k10, Some(50.0));
    }

    #[test]
    fn six_examples_is_excluded_everywhere() {
        let mut train = vec![("a|b|c", 6)];
        train.push(("a|b|x", 200));
        train.push(("y|b|c", 200));
        train.push(("a|z|c", 200));
        let t = table(&train);
        let rows = generalization_buckets(&t, &[outcome("a|b|c", 1, 1)], &standard_cases());
        assert!(rows.iter().all(|r| r.facts == 0 && r.k10.is_none()));
        let t5 = table(&[("a|b|c", 5), ("a|b|x", 200), ("y|b|c", 200), ("a|z|c", 200)]);
        let rows = generalization_buckets(&t5, &[outcome("a|b|c", 1, 1)], &standard_cases());
        assert!(rows.iter().filter(|r| r.order == 3).all(|r| r.facts == 1));
    }

    #[test]
    fn membership_matches_count_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut train: Vec<(String, usize)> = Vec::new();
        for _ in 0..60 {
            let f = format!(
                "s{}|p{}|o{}",
                rng.random_range(0..3),
                rng.random_range(0..3),
                rng.random_range(0..3)
            );
            train.push((f, rng.random_range(1..12)));
        }
        for _ in 0..10 {
            train.push((
                format!("s{}|p{}", rng.random_range(0..3), rng.random_range(0..3)),
                rng.random_range(1..12),
            ));
        }
        let refs: Vec<(&str, usize)> = train.iter().map(|(f, n)| (f.as_str(), *n)).collect();
        let t = table(&refs);
        let tests: Vec<FactOutcome> = (0..27)
            .map(|i| outcome(&format!("s{}|p{}|o{}", i / 9, (i / 3) % 3, i % 3), 1, 1))
            .chain((0..9).map(|i| outcome(&format!("s{}|p{}", i / 3, i % 3), 1, 1)))
            .collect();

        // oracle: recount marginals straight from the instance list
        let count = |pred: &dyn Fn(&StructuredFact) -> bool| -> usize {
            refs.iter()
                .filter(|(f, _)| pred(&parse_fact(f).unwrap()))
                .map(|(_, n)| n)
                .sum()
        };
        let same = |a: &StructuredFact, b: &StructuredFact, c: Component| -> bool {
            let (s, p, o) = (
                a.subject() == b.subject(),
                a.predicate() == b.predicate(),
                a.object() == b.object(),
            );
            a.order() == b.order()
                && match c {
                    Component::S => s,
                    Component::P => p,
                    Component::O => o,
                    Component::SP => s && p,
                    Component::PO => p && o,
                    Component::SO => s && o,
                }
        };
        for case in standard_cases() {
            let row = &generalization_buckets(&t, &tests, std::slice::from_ref(&case))[0];
            let expect = tests
                .iter()
                .filter(|o| {
                    o.fact.order() == case.order
                        && count(&|f| f == &o.fact) <= MAX_BUCKET_TRAIN
                        && case
                            .requirements
                            .iter()
                            .all(|(c, min)| count(&|f| same(f, &o.fact, *c)) >= *min)
                })
                .count();
            assert_eq!(row.facts, expect, "{}", case.name);
        }
    }
}
