//! Embedding databases and two-view nearest-neighbour queries.
//!
//! Distances are sums of squared Euclidean slot distances over the slots a
//! query mask keeps, so the full mask reduces to the squared distance between
//! concatenated embeddings.

mod forest;
mod persist;

pub use persist::{
    read_index, read_ranked_jsonl, write_index, write_ranked_jsonl, RankedRecord,
    INDEX_FORMAT_VERSION,
};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fact::{FactOrder, Slot, StructuredFact, WildcardMask};
use crate::lang::FactEmbedding;
use crate::linalg::{squared_distance, ShapeError};
use forest::{weighted_sq, Candidate, KdForest};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("index is empty after applying scope {0:?}")]
    EmptyIndex(Scope),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("target recall must lie in (0, 1], got {0}")]
    InvalidRecall(f64),
    #[error("bad index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sum of squared slot distances over the slots active in `query_mask`.
pub fn masked_distance(
    a: &FactEmbedding,
    b: &FactEmbedding,
    query_mask: WildcardMask,
) -> Result<f64, ShapeError> {
    let mut total = 0.0;
    for slot in Slot::ALL {
        let (x, y) = (a.slot(slot), b.slot(slot));
        ShapeError::check("masked distance slot width", x.len(), y.len())?;
        if query_mask.is_active(slot) {
            total += squared_distance(x, y);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IndexMode {
    Exact,
    /// Randomized k-d forest whose search budget is tuned at build time until
    /// the measured recall@k on sample queries reaches `target_recall`.
    Approximate {
        target_recall: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    AllOrders,
    SingleOrder(FactOrder),
}

impl Scope {
    fn admits(&self, e: &FactEmbedding) -> bool {
        match self {
            Scope::AllOrders => true,
            Scope::SingleOrder(order) => e.mask().order() == Some(*order),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub distance: f64,
}

/// Hits in non-decreasing distance; ties keep database order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub hits: Vec<Hit>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.id.as_str())
    }

    /// 1-based rank of `id`.
    pub fn rank_of(&self, id: &str) -> Rank {
        self.hits
            .iter()
            .position(|h| h.id == id)
            .map_or(Rank::Missing, |p| Rank::At(p + 1))
    }
}

const TREES: usize = 4;
const TUNING_QUERIES: usize = 64;
const TUNING_K: usize = 100;
const MIN_CHECKS: usize = 32;

#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    entries: Vec<(String, FactEmbedding)>,
    mode: IndexMode,
    scope: Scope,
    dims: [usize; 3],
    flat: Vec<Vec<f64>>,
    forest: Option<KdForest>,
    checks: usize,
}

fn active_coords(dims: [usize; 3], mask: WildcardMask) -> Vec<bool> {
    Slot::ALL
        .iter()
        .zip(dims)
        .flat_map(|(s, d)| std::iter::repeat_n(mask.is_active(*s), d))
        .collect()
}

/// Builds a database over the entries admitted by `scope`.
pub fn build_index(
    embeddings: Vec<(String, FactEmbedding)>,
    mode: IndexMode,
    scope: Scope,
) -> Result<EmbeddingIndex, RetrievalError> {
    let entries: Vec<_> = embeddings
        .into_iter()
        .filter(|(_, e)| scope.admits(e))
        .collect();
    let (_, first) = entries.first().ok_or(RetrievalError::EmptyIndex(scope))?;
    let dims = first.dims();
    for (_, e) in &entries {
        for (want, got) in dims.iter().zip(e.dims()) {
            ShapeError::check("index entry slot width", *want, got)?;
        }
    }
    let flat = entries.iter().map(|(_, e)| e.concat()).collect();
    let mut index = EmbeddingIndex {
        entries,
        mode,
        scope,
        dims,
        flat,
        forest: None,
        checks: usize::MAX,
    };
    if let IndexMode::Approximate {
        target_recall,
        seed,
    } = mode
    {
        if !(target_recall > 0.0 && target_recall <= 1.0) {
            return Err(RetrievalError::InvalidRecall(target_recall));
        }
        index.forest = Some(KdForest::build(&index.flat, TREES, seed));
        index.checks = index.tune_checks(target_recall, seed);
    }
    Ok(index)
}

impl EmbeddingIndex {
    pub(crate) fn restore(
        entries: Vec<(String, FactEmbedding)>,
        mode: IndexMode,
        scope: Scope,
        checks: usize,
    ) -> Result<Self, RetrievalError> {
        let mut index = build_index(entries, IndexMode::Exact, scope)?;
        if let IndexMode::Approximate { seed, .. } = mode {
            index.forest = Some(KdForest::build(&index.flat, TREES, seed));
            index.checks = checks;
        }
        index.mode = mode;
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn entries(&self) -> &[(String, FactEmbedding)] {
        &self.entries
    }

    /// Distance evaluations allowed per approximate query.
    pub fn checks(&self) -> usize {
        self.checks
    }

    fn brute_force(&self, probe: &[f64], active: &[bool], k: usize) -> Vec<Candidate> {
        let mut all: Vec<Candidate> = self
            .flat
            .iter()
            .enumerate()
            .map(|(idx, v)| Candidate {
                dist: weighted_sq(v, probe, active),
                idx,
            })
            .collect();
        let k = k.min(all.len());
        if k < all.len() {
            all.select_nth_unstable(k);
            all.truncate(k);
        }
        all.sort();
        all
    }

    fn tune_checks(&self, target: f64, seed: u64) -> usize {
        let n = self.flat.len();
        let k = TUNING_K.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let queries: Vec<&Vec<f64>> = self
            .flat
            .choose_multiple(&mut rng, TUNING_QUERIES.min(n))
            .collect();
        let active = vec![true; self.flat[0].len()];
        let truth: Vec<Vec<usize>> = queries
            .iter()
            .map(|q| {
                self.brute_force(q, &active, k)
                    .into_iter()
                    .map(|c| c.idx)
                    .collect()
            })
            .collect();
        let forest = self
            .forest
            .as_ref()
            .expect("approximate index has a forest");
        let mut checks = MIN_CHECKS.max(k);
        loop {
            if checks >= n {
                return usize::MAX;
            }
            let mut found = 0usize;
            for (q, t) in queries.iter().zip(&truth) {
                let got = forest.search(&self.flat, q, &active, k, checks);
                found += got.iter().filter(|c| t.contains(&c.idx)).count();
            }
            let recall = found as f64 / (queries.len() * k) as f64;
            if recall >= target {
                return checks;
            }
            checks += checks.div_ceil(4);
        }
    }

    /// Top-`k` entries by masked distance to `probe`.
    pub fn query(
        &self,
        probe: &FactEmbedding,
        k: usize,
        query_mask: WildcardMask,
    ) -> Result<RankedList, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex(self.scope));
        }
        for i in 0..3 {
            ShapeError::check("query slot width", self.dims[i], probe.dims()[i])?;
        }
        let flat = probe.concat();
        let active = active_coords(self.dims, query_mask);
        let k = k.min(self.entries.len());
        let found = match (&self.forest, self.checks) {
            (Some(f), checks) if checks != usize::MAX => {
                f.search(&self.flat, &flat, &active, k, checks)
            }
            _ => self.brute_force(&flat, &active, k),
        };
        Ok(RankedList {
            hits: found
                .into_iter()
                .map(|c| Hit {
                    id: self.entries[c.idx].0.clone(),
                    distance: c.dist,
                })
                .collect(),
        })
    }
}

/// 1-based rank, or `Missing` when the item was not retrieved. `Missing`
/// orders after every finite rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    At(usize),
    Missing,
}

impl Rank {
    pub fn within(self, cutoff: usize) -> bool {
        matches!(self, Rank::At(r) if r <= cutoff)
    }

    pub fn reciprocal(self) -> f64 {
        match self {
            Rank::At(r) => 1.0 / r as f64,
            Rank::Missing => 0.0,
        }
    }

    pub fn value(self) -> Option<usize> {
        match self {
            Rank::At(r) => Some(r),
            Rank::Missing => None,
        }
    }
}

/// Rank of `gt` in an all-orders fact list after dropping every retrieved
/// fact that strictly specializes `gt` (`<car, red>` for `<car>`,
/// `<person, playing, guitar>` for `<person, playing>`).
pub fn metric1_rank(gt: &StructuredFact, ranked: &[&StructuredFact]) -> Rank {
    let mut rank = 0usize;
    for f in ranked {
        if f.specializes(gt) {
            continue;
        }
        rank += 1;
        if *f == gt {
            return Rank::At(rank);
        }
    }
    Rank::Missing
}

/// Plain rank of `gt` in the list retrieved from its own order's database.
/// `per_order` is indexed by [`FactOrder::index`].
pub fn metric2_rank(gt: &StructuredFact, per_order: [&[&StructuredFact]; 3]) -> Rank {
    per_order[gt.order().index()]
        .iter()
        .position(|f| *f == gt)
        .map_or(Rank::Missing, |p| Rank::At(p + 1))
}
