//! End-to-end steps shared by the command line and the tests: fit the
//! language side, train or fit a model, embed the test split, rank both
//! views and score the rankings.

use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cca::{cca_embed, cca_fit, CcaError, View};
use crate::checkpoint::{Checkpoint, ModelState};
use crate::evaluation::{
    assemble_report, EvalReport, FactRank, MetricFamily, RunMeta, VisualQuery,
};
use crate::fact::{
    fact_frequency_table, parse_fact, serialize_fact, Dataset, FactError, FactOrder, Split,
    StructuredFact, WildcardMask,
};
use crate::lang::{encode_language, FactEmbedding, LangError, LanguageEncoder, WordTable};
use crate::linalg::ShapeError;
use crate::retrieval::{
    build_index, metric1_rank, IndexMode, Rank, RankedRecord, RetrievalError, Scope,
};
use crate::training::{train, LossConfig, TraceRow, TrainConfig, TrainError, TrainingPair};
use crate::visual::{
    average_spo, encode_visual, init_params, EncoderError, EncoderSpec, ModelKind, StackRole,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Fact(#[from] FactError),
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Cca(#[from] CcaError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("{0}")]
    Invalid(String),
}

/// Hidden-layer widths. Model 1 uses `trunk`; Model 2 uses `shared`,
/// `s_branch` and `po_branch`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub trunk: Vec<usize>,
    pub shared: Vec<usize>,
    pub s_branch: Vec<usize>,
    pub po_branch: Vec<usize>,
    pub new_stacks: Vec<StackRole>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            trunk: vec![128],
            shared: vec![128],
            s_branch: vec![64],
            po_branch: vec![64],
            new_stacks: Vec::new(),
        }
    }
}

impl Architecture {
    pub fn spec(&self, kind: ModelKind, input_dim: usize, slot_dim: usize) -> EncoderSpec {
        let mut spec = match kind {
            ModelKind::Model1 => EncoderSpec::model1(input_dim, self.trunk.clone(), slot_dim),
            ModelKind::Model2 => EncoderSpec::model2(
                input_dim,
                self.shared.clone(),
                self.s_branch.clone(),
                self.po_branch.clone(),
                slot_dim,
            ),
        };
        spec.new_stacks = self.new_stacks.clone();
        spec
    }
}

/// How embeddings are compared at retrieval time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Slotwise distance over the query's active slots.
    #[default]
    Structured,
    /// Mean of the active slot vectors on both sides, compared as one vector.
    Averaged,
}

impl std::fmt::Display for Representation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Representation::Structured => "structured",
            Representation::Averaged => "averaged",
        })
    }
}

impl std::str::FromStr for Representation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "structured" => Ok(Representation::Structured),
            "averaged" => Ok(Representation::Averaged),
            other => Err(format!("unknown representation {other:?}")),
        }
    }
}

/// Language encoder whose slot means come from the training split.
pub fn fit_language(dataset: &Dataset, table: WordTable) -> Result<LanguageEncoder, PipelineError> {
    let train: Vec<&StructuredFact> = dataset.split(Split::Train).map(|i| &i.fact).collect();
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet.into());
    }
    Ok(LanguageEncoder::fit(table, &train)?)
}

pub fn training_pairs(
    dataset: &Dataset,
    lang: &LanguageEncoder,
) -> Result<Vec<TrainingPair>, PipelineError> {
    let mut cache: HashMap<&StructuredFact, FactEmbedding> = HashMap::new();
    let mut pairs = Vec::new();
    for inst in dataset.split(Split::Train) {
        let target = match cache.get(&inst.fact) {
            Some(e) => e.clone(),
            None => {
                let e = lang.encode(&inst.fact)?;
                cache.insert(&inst.fact, e.clone());
                e
            }
        };
        pairs.push(TrainingPair {
            features: inst.features.clone(),
            target,
        });
    }
    Ok(pairs)
}

pub fn init_checkpoint(
    kind: ModelKind,
    arch: &Architecture,
    dataset: &Dataset,
    lang: &LanguageEncoder,
    seed: u64,
) -> Result<Checkpoint, PipelineError> {
    let spec = arch.spec(kind, dataset.feature_dim(), lang.slot_dim());
    let params = init_params(&spec, seed)?;
    let model = match kind {
        ModelKind::Model1 => ModelState::Model1 { spec, params },
        ModelKind::Model2 => ModelState::Model2 { spec, params },
    };
    Ok(Checkpoint::new(seed, lang.normalizer.clone(), model))
}

/// Trains the encoder held by `init`; the returned checkpoint keeps its
/// spec, seed and normalizer.
pub fn train_checkpoint(
    init: &Checkpoint,
    pairs: &[TrainingPair],
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(Checkpoint, Vec<TraceRow>), PipelineError> {
    let (spec, params, kind) = match &init.model {
        ModelState::Model1 { spec, params } => (spec, params, ModelKind::Model1),
        ModelState::Model2 { spec, params } => (spec, params, ModelKind::Model2),
        ModelState::Cca { .. } => {
            return Err(PipelineError::Invalid(
                "cca checkpoints are fit, not trained".into(),
            ))
        }
    };
    let outcome = train(params.clone(), pairs, train_cfg, loss_cfg)?;
    let spec = spec.clone();
    let model = match kind {
        ModelKind::Model1 => ModelState::Model1 {
            spec,
            params: outcome.params,
        },
        ModelKind::Model2 => ModelState::Model2 {
            spec,
            params: outcome.params,
        },
    };
    let ckpt = Checkpoint {
        model,
        ..init.clone()
    };
    Ok((ckpt, outcome.trace))
}

/// Fits CCA between training features and zero-filled concatenated
/// language embeddings. `dim` defaults to the language width.
pub fn fit_cca_checkpoint(
    dataset: &Dataset,
    lang: &LanguageEncoder,
    dim: Option<usize>,
    reg: f64,
    seed: u64,
) -> Result<Checkpoint, PipelineError> {
    let pairs = training_pairs(dataset, lang)?;
    let x: Vec<Vec<f64>> = pairs.iter().map(|p| p.features.clone()).collect();
    let y: Vec<Vec<f64>> = pairs.iter().map(|p| p.target.concat()).collect();
    let width = y.first().map_or(0, Vec::len);
    let dim = dim.unwrap_or(width.min(dataset.feature_dim()));
    let model = cca_fit(&x, &y, dim, reg)?;
    Ok(Checkpoint::new(
        seed,
        lang.normalizer.clone(),
        ModelState::Cca { model },
    ))
}

/// Language embedding of a fact under a checkpoint.
pub fn embed_fact(
    ckpt: &Checkpoint,
    table: &WordTable,
    fact: &StructuredFact,
) -> Result<FactEmbedding, PipelineError> {
    let l = encode_language(fact, table, &ckpt.normalizer)?;
    Ok(match &ckpt.model {
        ModelState::Cca { model } => {
            FactEmbedding::unstructured(cca_embed(model, &l.concat(), View::Language)?, l.mask())
        }
        _ => l,
    })
}

/// Visual embedding of an image under a checkpoint, with every slot filled.
pub fn embed_image(ckpt: &Checkpoint, features: &[f64]) -> Result<FactEmbedding, PipelineError> {
    Ok(match &ckpt.model {
        ModelState::Model1 { params, .. } | ModelState::Model2 { params, .. } => {
            encode_visual(params, features, WildcardMask::FULL)?
        }
        ModelState::Cca { model } => FactEmbedding::unstructured(
            cca_embed(model, features, View::Visual)?,
            WildcardMask::FULL,
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingView {
    Language,
    Visual,
}

/// One line of an embedding dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub view: EmbeddingView,
    pub embedding: FactEmbedding,
}

/// Embeddings of the test split: unique facts sorted by id, images in file
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct TestEmbeddings {
    pub facts: Vec<(String, FactEmbedding)>,
    pub images: Vec<(String, FactEmbedding)>,
}

impl TestEmbeddings {
    pub fn records(&self) -> Vec<EmbeddingRecord> {
        let rec = |view| {
            move |(id, e): &(String, FactEmbedding)| EmbeddingRecord {
                id: id.clone(),
                view,
                embedding: e.clone(),
            }
        };
        self.facts
            .iter()
            .map(rec(EmbeddingView::Language))
            .chain(self.images.iter().map(rec(EmbeddingView::Visual)))
            .collect()
    }

    pub fn from_records(records: Vec<EmbeddingRecord>) -> Self {
        let mut out = TestEmbeddings {
            facts: Vec::new(),
            images: Vec::new(),
        };
        for r in records {
            match r.view {
                EmbeddingView::Language => out.facts.push((r.id, r.embedding)),
                EmbeddingView::Visual => out.images.push((r.id, r.embedding)),
            }
        }
        out
    }

    fn unstructured(&self) -> bool {
        self.facts.first().is_some_and(|(_, e)| e.p().is_empty())
    }
}

pub fn embed_test(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    table: &WordTable,
) -> Result<TestEmbeddings, PipelineError> {
    let mut facts: Vec<(String, FactEmbedding)> = dataset
        .unique_facts(Split::Test)
        .iter()
        .map(|f| Ok((serialize_fact(f), embed_fact(ckpt, table, f)?)))
        .collect::<Result<_, PipelineError>>()?;
    facts.sort_by(|a, b| a.0.cmp(&b.0));
    let images = dataset
        .images(Split::Test)
        .into_iter()
        .map(|(id, x)| Ok((id.to_string(), embed_image(ckpt, x)?)))
        .collect::<Result<_, PipelineError>>()?;
    Ok(TestEmbeddings { facts, images })
}

pub fn write_embeddings_jsonl<W: Write>(
    records: &[EmbeddingRecord],
    mut w: W,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()
}

pub fn read_embeddings_jsonl<R: BufRead>(r: R) -> Result<Vec<EmbeddingRecord>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(RetrievalError::from)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| PipelineError::Invalid(format!("embedding line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub mode: IndexMode,
    pub representation: Representation,
    /// Results kept per query; ground truth beyond this counts as missing.
    pub max_results: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            mode: IndexMode::Exact,
            representation: Representation::Structured,
            max_results: usize::MAX,
        }
    }
}

/// Ranked lists for both views. Language-view records are keyed by image
/// id; visual-view records by fact id.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutput {
    pub metric1: Vec<RankedRecord>,
    /// Indexed by fact order; only images with a database for that order.
    pub metric2: [Vec<RankedRecord>; 3],
    pub visual: Vec<RankedRecord>,
}

fn averaged(e: &FactEmbedding, mask: WildcardMask) -> Result<FactEmbedding, ShapeError> {
    Ok(FactEmbedding::unstructured(
        average_spo(&e.with_mask(mask))?,
        mask,
    ))
}

pub fn retrieve_all(
    emb: &TestEmbeddings,
    cfg: &RetrievalConfig,
) -> Result<RetrievalOutput, PipelineError> {
    let avg = cfg.representation == Representation::Averaged;
    if avg && emb.unstructured() {
        return Err(PipelineError::Invalid(
            "averaging needs structured embeddings".into(),
        ));
    }
    let k = cfg.max_results.max(1);
    let facts: Vec<(String, FactEmbedding)> = if avg {
        emb.facts
            .iter()
            .map(|(id, e)| Ok((id.clone(), averaged(e, e.mask())?)))
            .collect::<Result<_, ShapeError>>()?
    } else {
        emb.facts.clone()
    };
    // Averaged probes and database entries compare as single vectors.
    let probe_for = |v: &FactEmbedding,
                     mask: WildcardMask|
     -> Result<(FactEmbedding, WildcardMask), ShapeError> {
        if avg {
            Ok((averaged(v, mask)?, WildcardMask::FULL))
        } else {
            Ok((v.clone(), mask))
        }
    };

    let all = build_index(facts.clone(), cfg.mode, Scope::AllOrders)?;
    let mut metric1 = Vec::with_capacity(emb.images.len());
    for (id, v) in &emb.images {
        let (probe, mask) = probe_for(v, WildcardMask::FULL)?;
        metric1.push(RankedRecord::new(id, &all.query(&probe, k, mask)?));
    }

    let mut metric2: [Vec<RankedRecord>; 3] = Default::default();
    for order in FactOrder::ALL {
        let index = match build_index(facts.clone(), cfg.mode, Scope::SingleOrder(order)) {
            Ok(i) => i,
            Err(RetrievalError::EmptyIndex(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        for (id, v) in &emb.images {
            let (probe, mask) = probe_for(v, order.mask())?;
            metric2[order.index()].push(RankedRecord::new(id, &index.query(&probe, k, mask)?));
        }
    }

    let mut image_dbs = Vec::new();
    for order in FactOrder::ALL {
        let entries = if avg {
            emb.images
                .iter()
                .map(|(id, v)| Ok((id.clone(), averaged(v, order.mask())?)))
                .collect::<Result<Vec<_>, ShapeError>>()?
        } else {
            emb.images.clone()
        };
        image_dbs.push(build_index(entries, cfg.mode, Scope::AllOrders)?);
        if !avg {
            break;
        }
    }
    let mut visual = Vec::with_capacity(emb.facts.len());
    for ((id, l), (_, probe)) in emb.facts.iter().zip(&facts) {
        let order = l.mask().order().unwrap_or(FactOrder::Third);
        let db = &image_dbs[if avg { order.index() } else { 0 }];
        let mask = if avg { WildcardMask::FULL } else { l.mask() };
        visual.push(RankedRecord::new(id, &db.query(probe, k, mask)?));
    }
    Ok(RetrievalOutput {
        metric1,
        metric2,
        visual,
    })
}

fn parsed_ids<'a>(
    record: &'a RankedRecord,
    cache: &mut HashMap<&'a str, StructuredFact>,
) -> Result<Vec<&'a str>, PipelineError> {
    let mut ids = Vec::with_capacity(record.results.len());
    for (id, _) in &record.results {
        if !cache.contains_key(id.as_str()) {
            cache.insert(id.as_str(), parse_fact(id)?);
        }
        ids.push(id.as_str());
    }
    Ok(ids)
}

/// Effective ranks of every test (image, fact) pair under one metric family.
pub fn language_ranks(
    dataset: &Dataset,
    out: &RetrievalOutput,
    family: MetricFamily,
) -> Result<Vec<FactRank>, PipelineError> {
    let by_image = |records: &[RankedRecord]| -> HashMap<String, usize> {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.query_id.clone(), i))
            .collect()
    };
    let m1 = by_image(&out.metric1);
    let m2: Vec<HashMap<String, usize>> = out.metric2.iter().map(|r| by_image(r)).collect();
    let mut cache: HashMap<&str, StructuredFact> = HashMap::new();
    let mut m1_lists: HashMap<usize, Vec<&str>> = HashMap::new();
    let mut ranks = Vec::new();
    for inst in dataset.split(Split::Test) {
        let rank = match family {
            MetricFamily::One => match m1.get(&inst.image_id) {
                Some(&i) => {
                    if let Entry::Vacant(slot) = m1_lists.entry(i) {
                        slot.insert(parsed_ids(&out.metric1[i], &mut cache)?);
                    }
                    let ranked: Vec<&StructuredFact> =
                        m1_lists[&i].iter().map(|id| &cache[id]).collect();
                    metric1_rank(&inst.fact, &ranked)
                }
                None => Rank::Missing,
            },
            MetricFamily::Two => {
                let o = inst.fact.order().index();
                match m2[o].get(&inst.image_id) {
                    Some(&i) => out.metric2[o][i]
                        .to_list()
                        .rank_of(&serialize_fact(&inst.fact)),
                    None => Rank::Missing,
                }
            }
        };
        ranks.push(FactRank {
            image_id: inst.image_id.clone(),
            fact: inst.fact.clone(),
            rank,
        });
    }
    Ok(ranks)
}

pub fn visual_queries(
    dataset: &Dataset,
    out: &RetrievalOutput,
) -> Result<Vec<VisualQuery>, PipelineError> {
    let mut relevant: HashMap<String, HashSet<String>> = HashMap::new();
    for inst in dataset.split(Split::Test) {
        relevant
            .entry(serialize_fact(&inst.fact))
            .or_default()
            .insert(inst.image_id.clone());
    }
    out.visual
        .iter()
        .map(|r| {
            Ok(VisualQuery {
                fact: parse_fact(&r.query_id)?,
                ranked: r.results.iter().map(|(id, _)| id.clone()).collect(),
                relevant: relevant.get(&r.query_id).cloned().unwrap_or_default(),
            })
        })
        .collect()
}

pub fn evaluate(
    dataset: &Dataset,
    out: &RetrievalOutput,
    meta: RunMeta,
) -> Result<EvalReport, PipelineError> {
    let ranks = language_ranks(dataset, out, meta.metric)?;
    let queries = visual_queries(dataset, out)?;
    let table = fact_frequency_table(dataset);
    Ok(assemble_report(meta, Some(&ranks), Some(&queries), &table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_generate, SynthSpec};

    fn tiny() -> (Dataset, WordTable) {
        let spec = SynthSpec {
            subjects: 5,
            predicates: 3,
            objects: 3,
            facts_per_order: [3, 6, 10],
            images_per_fact: 4,
            latent_dim: 4,
            feature_dim: 12,
            seed: 1,
            ..SynthSpec::default()
        };
        let out = synth_generate(&spec).unwrap();
        (out.dataset, out.table)
    }

    fn meta(metric: MetricFamily) -> RunMeta {
        RunMeta {
            model: "model1".into(),
            metric,
            seed: 0,
            representation: "structured".into(),
            notes: vec![],
        }
    }

    #[test]
    fn lists_cover_every_test_image_and_fact() {
        let (ds, table) = tiny();
        let lang = fit_language(&ds, table.clone()).unwrap();
        let ckpt =
            init_checkpoint(ModelKind::Model2, &Architecture::default(), &ds, &lang, 3).unwrap();
        let emb = embed_test(&ckpt, &ds, &table).unwrap();
        let out = retrieve_all(&emb, &RetrievalConfig::default()).unwrap();
        let n_images = ds.images(Split::Test).len();
        assert_eq!(out.metric1.len(), n_images);
        assert!(out.metric2.iter().all(|m| m.len() == n_images));
        assert_eq!(out.visual.len(), ds.unique_facts(Split::Test).len());
        assert!(out
            .metric1
            .iter()
            .all(|r| r.results.len() == emb.facts.len()));
        // full-length lists leave no ground truth unranked
        for family in [MetricFamily::One, MetricFamily::Two] {
            let ranks = language_ranks(&ds, &out, family).unwrap();
            assert!(ranks.iter().all(|r| r.rank != Rank::Missing));
        }
    }

    #[test]
    fn averaged_lists_and_dump_round_trip() {
        let (ds, table) = tiny();
        let lang = fit_language(&ds, table.clone()).unwrap();
        let ckpt =
            init_checkpoint(ModelKind::Model1, &Architecture::default(), &ds, &lang, 4).unwrap();
        let emb = embed_test(&ckpt, &ds, &table).unwrap();
        let mut buf = Vec::new();
        write_embeddings_jsonl(&emb.records(), &mut buf).unwrap();
        let back =
            TestEmbeddings::from_records(read_embeddings_jsonl(std::io::Cursor::new(buf)).unwrap());
        assert_eq!(back, emb);
        let cfg = RetrievalConfig {
            representation: Representation::Averaged,
            ..RetrievalConfig::default()
        };
        let avg = retrieve_all(&emb, &cfg).unwrap();
        let plain = retrieve_all(&emb, &RetrievalConfig::default()).unwrap();
        assert_ne!(avg.metric2, plain.metric2);
        let report = evaluate(&ds, &avg, meta(MetricFamily::Two)).unwrap();
        assert!(report.language_view.is_some());
    }

    #[test]
    fn cca_embeddings_are_unstructured() {
        let (ds, table) = tiny();
        let lang = fit_language(&ds, table.clone()).unwrap();
        let ckpt = fit_cca_checkpoint(&ds, &lang, None, 1e-3, 0).unwrap();
        let emb = embed_test(&ckpt, &ds, &table).unwrap();
        assert!(emb
            .facts
            .iter()
            .all(|(_, e)| e.p().is_empty() && e.s().len() == 12));
        let cfg = RetrievalConfig {
            representation: Representation::Averaged,
            ..RetrievalConfig::default()
        };
        assert!(matches!(
            retrieve_all(&emb, &cfg),
            Err(PipelineError::Invalid(_))
        ));
        let out = retrieve_all(&emb, &RetrievalConfig::default()).unwrap();
        let a = evaluate(&ds, &out, meta(MetricFamily::One)).unwrap();
        let b = evaluate(&ds, &out, meta(MetricFamily::Two)).unwrap();
        assert_ne!(a.meta, b.meta);
    }

    #[test]
    fn metric1_never_worse_than_raw_position() {
        let (ds, table) = tiny();
        let lang = fit_language(&ds, table.clone()).unwrap();
        let ckpt =
            init_checkpoint(ModelKind::Model1, &Architecture::default(), &ds, &lang, 5).unwrap();
        let out = retrieve_all(
            &embed_test(&ckpt, &ds, &table).unwrap(),
            &RetrievalConfig::default(),
        )
        .unwrap();
        let effective = language_ranks(&ds, &out, MetricFamily::One).unwrap();
        let by_image: HashMap<&str, &RankedRecord> = out
            .metric1
            .iter()
            .map(|r| (r.query_id.as_str(), r))
            .collect();
        for r in &effective {
            let raw = by_image[r.image_id.as_str()]
                .to_list()
                .rank_of(&serialize_fact(&r.fact));
            assert!(r.rank <= raw);
        }
    }
}
