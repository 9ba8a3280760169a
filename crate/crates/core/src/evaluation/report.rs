use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::buckets::{generalization_buckets, standard_cases, BucketRow, FactOutcome};
use super::{mean_reciprocal_rank, visual_view_map};
use crate::fact::{serialize_fact, FactOrder, FrequencyTable, StructuredFact};
use crate::retrieval::Rank;

pub const TOP_KS: [usize; 3] = [1, 5, 10];

/// Metric 1 ranks against one database of all orders; Metric 2 ranks within
/// each order's database.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum MetricFamily {
    One,
    Two,
}

impl From<MetricFamily> for u8 {
    fn from(m: MetricFamily) -> u8 {
        match m {
            MetricFamily::One => 1,
            MetricFamily::Two => 2,
        }
    }
}

impl TryFrom<u8> for MetricFamily {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(MetricFamily::One),
            2 => Ok(MetricFamily::Two),
            _ => Err(format!("metric family must be 1 or 2, got {v}")),
        }
    }
}

/// Effective rank of one ground-truth (image, fact) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FactRank {
    pub image_id: String,
    pub fact: StructuredFact,
    pub rank: Rank,
}

/// A fact used as a query against the image database.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualQuery {
    pub fact: StructuredFact,
    pub ranked: Vec<String>,
    pub relevant: HashSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model: String,
    pub metric: MetricFamily,
    pub seed: u64,
    pub representation: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub order: u8,
    pub units: usize,
    /// Unit-level successes at K = 1, 5, 10.
    pub successes: [usize; 3],
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub top10: Option<f64>,
    pub facts: usize,
    /// Fact-level successes at K = 1, 5, 10.
    pub fact_successes: [usize; 3],
    pub mrr: Option<f64>,
}

/// Fact-level top-K split by whether the fact occurs in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeenRow {
    pub order: u8,
    pub seen: bool,
    pub pairs: usize,
    pub distinct_facts: usize,
    pub successes: [usize; 3],
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub top10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageViewReport {
    pub units: usize,
    pub successes: [usize; 3],
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub top10: Option<f64>,
    pub facts: usize,
    pub fact_successes: [usize; 3],
    pub mrr: Option<f64>,
    pub per_order: Vec<OrderRow>,
    pub seen_split: Vec<SeenRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub order: Option<u8>,
    pub queries: usize,
    pub skipped: usize,
    pub map: Option<f64>,
    pub map10: Option<f64>,
    pub map100: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualViewReport {
    pub overall: MapRow,
    pub per_order: Vec<MapRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub language_view: Option<LanguageViewReport>,
    pub visual_view: Option<VisualViewReport>,
    pub buckets: Vec<BucketRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

fn pct(n: usize, d: usize) -> Option<f64> {
    (d > 0).then(|| 100.0 * n as f64 / d as f64)
}

struct Grouped<'a> {
    rank: &'a FactRank,
    /// `L` for the `L + K - 1` rule.
    l: usize,
    unit: (String, Option<FactOrder>),
    order_unit: (String, FactOrder),
}

fn group(ranks: &[FactRank], family: MetricFamily) -> Vec<Grouped<'_>> {
    let mut per_image: BTreeMap<&str, usize> = BTreeMap::new();
    let mut per_image_order: BTreeMap<(&str, FactOrder), usize> = BTreeMap::new();
    for r in ranks {
        *per_image.entry(&r.image_id).or_default() += 1;
        *per_image_order
            .entry((&r.image_id, r.fact.order()))
            .or_default() += 1;
    }
    ranks
        .iter()
        .map(|r| {
            let order = r.fact.order();
            let (l, unit_order) = match family {
                MetricFamily::One => (per_image[r.image_id.as_str()], None),
                MetricFamily::Two => (per_image_order[&(r.image_id.as_str(), order)], Some(order)),
            };
            Grouped {
                rank: r,
                l,
                unit: (r.image_id.clone(), unit_order),
                order_unit: (r.image_id.clone(), order),
            }
        })
        .collect()
}

fn success(g: &Grouped, k: usize) -> bool {
    g.rank.rank.within(g.l + k - 1)
}

fn unit_successes<K: Ord>(items: &[&Grouped], key: impl Fn(&Grouped) -> K) -> (usize, [usize; 3]) {
    let mut units: BTreeMap<K, [bool; 3]> = BTreeMap::new();
    for g in items {
        let e = units.entry(key(g)).or_insert([true; 3]);
        for (ok, k) in e.iter_mut().zip(TOP_KS) {
            *ok &= success(g, k);
        }
    }
    let mut out = [0usize; 3];
    for flags in units.values() {
        for (o, f) in out.iter_mut().zip(flags) {
            *o += *f as usize;
        }
    }
    (units.len(), out)
}

fn fact_successes(items: &[&Grouped]) -> [usize; 3] {
    TOP_KS.map(|k| items.iter().filter(|g| success(g, k)).count())
}

fn language_view(
    ranks: &[FactRank],
    family: MetricFamily,
    table: &FrequencyTable,
) -> (LanguageViewReport, Vec<FactOutcome>) {
    let grouped = group(ranks, family);
    let all: Vec<&Grouped> = grouped.iter().collect();
    let (units, successes) = unit_successes(&all, |g| g.unit.clone());
    let fs = fact_successes(&all);
    let all_ranks: Vec<Rank> = ranks.iter().map(|r| r.rank).collect();

    let per_order = FactOrder::ALL
        .iter()
        .map(|&order| {
            let items: Vec<&Grouped> = grouped.iter().filter(|g| g.order_unit.1 == order).collect();
            let (u, s) = unit_successes(&items, |g| g.order_unit.clone());
            let ranks: Vec<Rank> = items.iter().map(|g| g.rank.rank).collect();
            OrderRow {
                order: order.as_u8(),
                units: u,
                successes: s,
                top1: pct(s[0], u),
                top5: pct(s[1], u),
                top10: pct(s[2], u),
                facts: items.len(),
                fact_successes: fact_successes(&items),
                mrr: mean_reciprocal_rank(&ranks),
            }
        })
        .collect();

    let mut seen_split = Vec::new();
    for order in FactOrder::ALL {
        for seen in [true, false] {
            let items: Vec<&Grouped> = grouped
                .iter()
                .filter(|g| g.order_unit.1 == order && table.is_seen(&g.rank.fact) == seen)
                .collect();
            let distinct: HashSet<&StructuredFact> = items.iter().map(|g| &g.rank.fact).collect();
            let s = fact_successes(&items);
            seen_split.push(SeenRow {
                order: order.as_u8(),
                seen,
                pairs: items.len(),
                distinct_facts: distinct.len(),
                successes: s,
                top1: pct(s[0], items.len()),
                top5: pct(s[1], items.len()),
                top10: pct(s[2], items.len()),
            });
        }
    }

    let mut outcomes: BTreeMap<String, FactOutcome> = BTreeMap::new();
    for g in &grouped {
        let e = outcomes
            .entry(serialize_fact(&g.rank.fact))
            .or_insert_with(|| FactOutcome {
                fact: g.rank.fact.clone(),
                successes: 0,
                trials: 0,
            });
        e.trials += 1;
        e.successes += success(g, 10) as usize;
    }

    let report = LanguageViewReport {
        units,
        successes,
        top1: pct(successes[0], units),
        top5: pct(successes[1], units),
        top10: pct(successes[2], units),
        facts: ranks.len(),
        fact_successes: fs,
        mrr: mean_reciprocal_rank(&all_ranks),
        per_order,
        seen_split,
    };
    (report, outcomes.into_values().collect())
}

fn map_row(order: Option<FactOrder>, queries: &[VisualQuery]) -> MapRow {
    let subset: Vec<VisualQuery> = queries
        .iter()
        .filter(|q| order.is_none_or(|o| q.fact.order() == o))
        .cloned()
        .collect();
    let (m, skipped) = visual_view_map(&subset);
    let m = m.map(|v| v.map(|x| 100.0 * x));
    MapRow {
        order: order.map(FactOrder::as_u8),
        queries: subset.len() - skipped,
        skipped,
        map: m.map(|v| v[0]),
        map10: m.map(|v| v[1]),
        map100: m.map(|v| v[2]),
    }
}

/// Collects language-view ranks and visual-view queries into one report.
/// Language-view units are images under Metric 1 and (image, order) groups
/// under Metric 2; the per-order rows always use (image, order) groups. The
/// bucket table uses per-pair K10 outcomes.
pub fn assemble_report(
    mut meta: RunMeta,
    language: Option<&[FactRank]>,
    visual: Option<&[VisualQuery]>,
    table: &FrequencyTable,
) -> EvalReport {
    let mut buckets = Vec::new();
    let language_view = language.map(|ranks| {
        let (report, outcomes) = language_view(ranks, meta.metric, table);
        buckets = generalization_buckets(table, &outcomes, &standard_cases());
        report
    });
    if language_view.is_some() {
        let note = "mrr averages 1/rank over ground-truth facts, several per image";
        if !meta.notes.iter().any(|n| n == note) {
            meta.notes.push(note.to_string());
        }
    }
    let visual_view = visual.map(|queries| VisualViewReport {
        overall: map_row(None, queries),
        per_order: FactOrder::ALL
            .iter()
            .map(|&o| map_row(Some(o), queries))
            .collect(),
    });
    EvalReport {
        meta,
        language_view,
        visual_view,
        buckets,
    }
}

/// Bucket table as CSV; empty buckets print `n/a`.
pub fn write_bucket_csv<W: Write>(rows: &[BucketRow], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["case", "order", "facts", "pairs", "k10"])?;
    for r in rows {
        let k10 = r
            .k10
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        w.write_record([
            r.case.clone(),
            r.order.to_string(),
            r.facts.to_string(),
            r.pairs.to_string(),
            k10,
        ])?;
    }
    w.flush()?;
    Ok(())
}
