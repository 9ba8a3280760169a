//! Synthetic datasets with a known generator. Each image shows one fact and
//! its features are `G · l + noise`, where `l` is the fact's centered
//! language embedding (zeros in wildcard slots) and `G` a fixed random map.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fact::{Dataset, FactError, FactInstance, FactOrder, Split, StructuredFact};
use crate::lang::{LangError, LangNormalizer, LanguageEncoder, WordTable};
use crate::linalg::{squared_distance, Matrix};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Fact(#[from] FactError),
    #[error(transparent)]
    Lang(#[from] LangError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub subjects: usize,
    pub predicates: usize,
    pub objects: usize,
    /// Distinct facts of order 1, 2 and 3.
    pub facts_per_order: [usize; 3],
    pub images_per_fact: usize,
    /// Zipf-like decay of images per fact; 0 gives every fact the same count.
    pub long_tail_exponent: f64,
    pub min_images_per_fact: usize,
    /// Share of each seen fact's images that go to the test split.
    pub test_fraction: f64,
    /// Share of order-2 and order-3 facts whose images all go to test.
    pub holdout_share: f64,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub sigma: f64,
    /// Pass the clean features through a rectifier before adding noise.
    pub nonlinear: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: 20,
            predicates: 15,
            objects: 15,
            facts_per_order: [20, 80, 200],
            images_per_fact: 20,
            long_tail_exponent: 0.0,
            min_images_per_fact: 1,
            test_fraction: 0.25,
            holdout_share: 0.0,
            latent_dim: 16,
            feature_dim: 64,
            sigma: 0.05,
            nonlinear: false,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |m: String| Err(SynthError::InvalidSpec(m));
        if self.subjects == 0 || self.predicates == 0 || self.objects == 0 {
            return invalid("vocabulary sizes must be positive".into());
        }
        if self.facts_per_order.iter().sum::<usize>() == 0 {
            return invalid("at least one fact is required".into());
        }
        if self.images_per_fact == 0
            || self.min_images_per_fact == 0
            || self.latent_dim == 0
            || self.feature_dim == 0
        {
            return invalid("image counts and dimensions must be positive".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return invalid(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if !(0.0..1.0).contains(&self.holdout_share) {
            return invalid(format!(
                "holdout share must lie in [0, 1), got {}",
                self.holdout_share
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return invalid(format!(
                "test fraction must lie in [0, 1), got {}",
                self.test_fraction
            ));
        }
        if !(self.long_tail_exponent >= 0.0 && self.long_tail_exponent.is_finite()) {
            return invalid("long-tail exponent must be non-negative".into());
        }
        let limits = [
            self.subjects,
            self.subjects * self.predicates,
            self.subjects * self.predicates * self.objects,
        ];
        for (i, (want, max)) in self.facts_per_order.iter().zip(limits).enumerate() {
            if *want > max {
                return Err(SynthError::InfeasibleSpec(format!(
                    "{want} distinct order-{} facts requested but the vocabulary allows {max}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to recompute clean features and the Bayes-optimal
/// fact for any generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOracle {
    pub spec: SynthSpec,
    /// `feature_dim x 3·latent_dim`.
    pub mixing: Matrix,
    pub normalizer: LangNormalizer,
    pub held_out: Vec<StructuredFact>,
}

impl SynthOracle {
    /// Noise-free features of a fact.
    pub fn clean_features(
        &self,
        encoder: &LanguageEncoder,
        fact: &StructuredFact,
    ) -> Result<Vec<f64>, SynthError> {
        let l = encoder.encode(fact)?.concat();
        let mut x = self
            .mixing
            .matvec(&l)
            .expect("mixing width matches the embedding");
        if self.spec.nonlinear {
            x.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(x)
    }

    /// Index of the candidate whose clean features are closest to `x`; the
    /// maximum-likelihood fact under isotropic gaussian noise.
    pub fn bayes_nearest(&self, x: &[f64], candidates: &[Vec<f64>]) -> Option<usize> {
        candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (squared_distance(x, c), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, i)| i)
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub table: WordTable,
    pub oracle: SynthOracle,
}

fn token(prefix: char, i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(2);
    format!("{prefix}{i:0width$}")
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (ns, np, no) = (spec.subjects, spec.predicates, spec.objects);

    let mut table = WordTable::new(spec.latent_dim);
    for (prefix, n) in [('s', ns), ('p', np), ('o', no)] {
        for i in 0..n {
            table.insert(&token(prefix, i, n), unit_vector(spec.latent_dim, &mut rng));
        }
    }
    let s = |i: usize| token('s', i, ns);
    let p = |i: usize| token('p', i, np);
    let o = |i: usize| token('o', i, no);

    let mut facts: Vec<StructuredFact> = Vec::new();
    let mut held_out = Vec::new();
    for order in FactOrder::ALL {
        let want = spec.facts_per_order[order.index()];
        let space = match order {
            FactOrder::First => ns,
            FactOrder::Second => ns * np,
            FactOrder::Third => ns * np * no,
        };
        let picked = sample(&mut rng, space, want).into_vec();
        let mut order_facts: Vec<StructuredFact> = picked
            .into_iter()
            .map(|k| match order {
                FactOrder::First => StructuredFact::first(&s(k)),
                FactOrder::Second => StructuredFact::second(&s(k / np), &p(k % np)),
                FactOrder::Third => {
                    StructuredFact::third(&s(k / (np * no)), &p((k / no) % np), &o(k % no))
                }
            })
            .collect::<Result<_, _>>()?;
        if order != FactOrder::First {
            let n_hold = (spec.holdout_share * want as f64).round() as usize;
            let hold = sample(&mut rng, want, n_hold).into_vec();
            let mut flags = vec![false; want];
            hold.into_iter().for_each(|i| flags[i] = true);
            let (gone, kept): (Vec<_>, Vec<_>) =
                order_facts.drain(..).zip(flags).partition(|(_, h)| *h);
            held_out.extend(gone.into_iter().map(|(f, _)| f));
            order_facts = kept.into_iter().map(|(f, _)| f).collect();
        }
        facts.extend(order_facts);
    }

    // Images per fact follow a shuffled power-law ranking when a tail is requested.
    let all_facts: Vec<(StructuredFact, bool)> = facts
        .into_iter()
        .map(|f| (f, false))
        .chain(held_out.iter().cloned().map(|f| (f, true)))
        .collect();
    let mut tail_rank: Vec<usize> = (0..all_facts.len()).collect();
    tail_rank.shuffle(&mut rng);
    let counts: Vec<usize> = tail_rank
        .iter()
        .map(|&r| {
            let c = spec.images_per_fact as f64 / ((r + 1) as f64).powf(spec.long_tail_exponent);
            (c.round() as usize).max(spec.min_images_per_fact)
        })
        .collect();

    let mut plan: Vec<(StructuredFact, Split)> = Vec::new();
    for ((fact, unseen), n) in all_facts.iter().zip(&counts) {
        let n_test = if *unseen {
            *n
        } else if *n >= 2 {
            ((*n as f64 * spec.test_fraction).round() as usize)
                .clamp(usize::from(spec.test_fraction > 0.0), n - 1)
        } else {
            0
        };
        for j in 0..*n {
            let split = if j < n - n_test {
                Split::Train
            } else {
                Split::Test
            };
            plan.push((fact.clone(), split));
        }
    }

    // Shuffle before fitting so the normalizer sums training facts in file order.
    plan.shuffle(&mut rng);
    let train_facts: Vec<&StructuredFact> = plan
        .iter()
        .filter(|(_, s)| *s == Split::Train)
        .map(|(f, _)| f)
        .collect();
    let encoder = LanguageEncoder::fit(table.clone(), &train_facts)?;
    let in_dim = 3 * spec.latent_dim;
    let g_scale = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("positive scale");
    let mixing = Matrix::from_fn(spec.feature_dim, in_dim, |_, _| g_scale.sample(&mut rng));
    let oracle = SynthOracle {
        spec: spec.clone(),
        mixing,
        normalizer: encoder.normalizer.clone(),
        held_out,
    };

    let noise = Normal::new(0.0, spec.sigma.max(0.0)).expect("finite sigma");
    let mut instances = Vec::with_capacity(plan.len());
    let width = plan.len().saturating_sub(1).to_string().len().max(5);
    for (i, (fact, split)) in plan.into_iter().enumerate() {
        let mut features = oracle.clean_features(&encoder, &fact)?;
        if spec.sigma > 0.0 {
            features
                .iter_mut()
                .for_each(|v| *v += noise.sample(&mut rng));
        }
        instances.push(FactInstance {
            image_id: format!("img{i:0width$}"),
            split,
            features,
            fact,
        });
    }
    let dataset = Dataset::new(spec.feature_dim, instances)?;
    Ok(SynthOutput {
        dataset,
        table,
        oracle,
    })
}
