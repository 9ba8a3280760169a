use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Dataset, FactOrder, Split, StructuredFact};

/// Component combinations whose training counts drive the generalization
/// buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    S,
    P,
    O,
    SP,
    PO,
    SO,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::S,
        Component::P,
        Component::O,
        Component::SP,
        Component::PO,
        Component::SO,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Component::S => "S",
            Component::P => "P",
            Component::O => "O",
            Component::SP => "SP",
            Component::PO => "PO",
            Component::SO => "SO",
        }
    }

    /// Key of `fact` for this component, `None` if a needed part is a wildcard.
    fn key(self, fact: &StructuredFact) -> Option<Vec<&[String]>> {
        let s = Some(fact.subject());
        let p = fact.predicate();
        let o = fact.object();
        let parts = match self {
            Component::S => vec![s],
            Component::P => vec![p],
            Component::O => vec![o],
            Component::SP => vec![s, p],
            Component::PO => vec![p, o],
            Component::SO => vec![s, o],
        };
        parts.into_iter().collect()
    }
}

type Key = Vec<Vec<String>>;

/// Training-instance counts of component matches among facts of one order.
#[derive(Debug, Clone, Default)]
pub struct ComponentMarginals {
    counts: HashMap<(Component, Key), usize>,
}

impl ComponentMarginals {
    fn add(&mut self, fact: &StructuredFact) {
        for c in Component::ALL {
            if let Some(k) = c.key(fact) {
                let k: Key = k.into_iter().map(<[String]>::to_vec).collect();
                *self.counts.entry((c, k)).or_default() += 1;
            }
        }
    }

    fn get(&self, c: Component, fact: &StructuredFact) -> usize {
        c.key(fact)
            .map(|k| {
                let k: Key = k.into_iter().map(<[String]>::to_vec).collect();
                self.counts.get(&(c, k)).copied().unwrap_or(0)
            })
            .unwrap_or(0)
    }
}

/// Exact train-split counts per fact, plus component marginals computed
/// separately within each fact order.
#[derive(Debug, Clone, Default)]
pub struct FrequencyTable {
    facts: HashMap<StructuredFact, usize>,
    marginals: [ComponentMarginals; 3],
    train_size: usize,
}

impl FrequencyTable {
    /// Number of training instances of exactly this fact.
    pub fn count(&self, fact: &StructuredFact) -> usize {
        self.facts.get(fact).copied().unwrap_or(0)
    }

    /// Number of training instances of `fact`'s order that share the given
    /// component(s) with `fact`. For an SPO fact, `SP` counts every training
    /// SPO instance with the same subject and predicate.
    pub fn marginal(&self, fact: &StructuredFact, component: Component) -> usize {
        self.marginals[fact.order().index()].get(component, fact)
    }

    pub fn train_size(&self) -> usize {
        self.train_size
    }

    pub fn unique_facts(&self) -> usize {
        self.facts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StructuredFact, usize)> {
        self.facts.iter().map(|(f, c)| (f, *c))
    }

    pub fn total(&self) -> usize {
        self.facts.values().sum()
    }

    pub fn is_seen(&self, fact: &StructuredFact) -> bool {
        self.count(fact) > 0
    }

    pub fn order_size(&self, order: FactOrder) -> usize {
        self.facts
            .iter()
            .filter(|(f, _)| f.order() == order)
            .map(|(_, c)| *c)
            .sum()
    }
}

pub fn fact_frequency_table(dataset: &Dataset) -> FrequencyTable {
    let mut table = FrequencyTable::default();
    for inst in dataset.split(Split::Train) {
        *table.facts.entry(inst.fact.clone()).or_default() += 1;
        table.marginals[inst.fact.order().index()].add(&inst.fact);
        table.train_size += 1;
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fact::FactInstance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inst(id: usize, split: Split, fact: StructuredFact) -> FactInstance {
        FactInstance {
            image_id: format!("img{id}"),
            split,
            features: vec![0.0],
            fact,
        }
    }

    #[test]
    fn counts_single_fact() {
        let dog = StructuredFact::first("dog").unwrap();
        let mut v: Vec<_> = (0..7).map(|i| inst(i, Split::Train, dog.clone())).collect();
        v.push(inst(99, Split::Test, dog.clone()));
        let ds = Dataset::new(1, v).unwrap();
        let t = fact_frequency_table(&ds);
        assert_eq!(t.count(&dog), 7);
        assert_eq!(t.train_size(), 7);
    }

    #[test]
    fn empty_train_split() {
        let dog = StructuredFact::first("dog").unwrap();
        let ds = Dataset::new(1, vec![inst(0, Split::Test, dog.clone())]).unwrap();
        let t = fact_frequency_table(&ds);
        assert_eq!(t.count(&dog), 0);
        assert_eq!(t.marginal(&dog, Component::S), 0);
        assert_eq!(t.total(), 0);
    }

    // Oracle: scan every train SPO instance and compare components directly.
    fn scan(ds: &Dataset, fact: &StructuredFact, c: Component) -> usize {
        ds.split(Split::Train)
            .filter(|i| i.fact.order() == fact.order())
            .filter(|i| {
                let f = &i.fact;
                let s = f.subject() == fact.subject();
                let p = f.predicate() == fact.predicate();
                let o = f.object() == fact.object();
                match c {
                    Component::S => s,
                    Component::P => p,
                    Component::O => o,
                    Component::SP => s && p,
                    Component::PO => p && o,
                    Component::SO => s && o,
                }
            })
            .count()
    }

    #[test]
    fn marginals_match_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut v = Vec::new();
        for id in 0..400 {
            let s = format!("s{}", rng.random_range(0..4));
            let p = format!("p{}", rng.random_range(0..3));
            let o = format!("o{}", rng.random_range(0..3));
            let fact = match rng.random_range(0..3) {
                0 => StructuredFact::first(&s),
                1 => StructuredFact::second(&s, &p),
                _ => StructuredFact::third(&s, &p, &o),
            }
            .unwrap();
            let split = if rng.random_bool(0.7) {
                Split::Train
            } else {
                Split::Test
            };
            v.push(inst(id, split, fact));
        }
        let ds = Dataset::new(1, v).unwrap();
        let t = fact_frequency_table(&ds);
        let prh = StructuredFact::third("s1", "p2", "o0").unwrap();
        assert_eq!(
            t.marginal(&prh, Component::SP),
            scan(&ds, &prh, Component::SP)
        );
        for f in ds.unique_facts(Split::Test) {
            for c in Component::ALL {
                let expect = match c {
                    Component::O | Component::PO | Component::SO
                        if f.order() != FactOrder::Third =>
                    {
                        0
                    }
                    Component::P | Component::SP if f.order() == FactOrder::First => 0,
                    _ => scan(&ds, &f, c),
                };
                assert_eq!(t.marginal(&f, c), expect, "{f} {c:?}");
            }
        }
        assert_eq!(t.total(), ds.split(Split::Train).count());
        let by_order: usize = FactOrder::ALL.iter().map(|o| t.order_size(*o)).sum();
        assert_eq!(by_order, t.train_size());
    }
}
