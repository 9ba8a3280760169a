//! Language view: pretrained word tables and structured fact embeddings
//! `l = [l_S, l_P, l_O]`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fact::{Slot, StructuredFact, WildcardMask};
use crate::linalg::{axpy, norm};

#[derive(Debug, Error)]
pub enum LangError {
    #[error("no token of {tokens:?} is in the word table (missing: {missing:?})")]
    UnknownComponent {
        tokens: Vec<String>,
        missing: Vec<String>,
    },
    #[error("component {tokens:?} averages to the zero vector")]
    DegenerateComponent { tokens: Vec<String> },
    #[error("line {line}: expected {expected} values, found {found}")]
    BadVectorDim {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: cannot parse value {value:?}")]
    BadValue { line: usize, value: String },
    #[error("word table is empty")]
    EmptyTable,
    #[error("normalizer has dimension {found}, word table has {expected}")]
    NormalizerDim { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pretrained token vectors, all of length `dim`. Keys are lowercased on load.
#[derive(Debug, Clone, PartialEq)]
pub struct WordTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordTable {
    pub fn new(dim: usize) -> Self {
        WordTable {
            dim,
            vectors: HashMap::new(),
        }
    }

    /// Inserts or replaces a token vector. Panics on a length mismatch.
    pub fn insert(&mut self, token: &str, vector: Vec<f64>) {
        assert_eq!(vector.len(), self.dim, "word vector length");
        self.vectors.insert(token.to_lowercase(), vector);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Tokens in sorted order.
    pub fn tokens(&self) -> Vec<&str> {
        let mut t: Vec<&str> = self.vectors.keys().map(String::as_str).collect();
        t.sort_unstable();
        t
    }
}

pub fn read_word_table<R: BufRead>(reader: R) -> Result<WordTable, LangError> {
    let mut table: Option<WordTable> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let values = fields
            .map(|v| {
                v.parse::<f64>().map_err(|_| LangError::BadValue {
                    line: lineno,
                    value: v.to_string(),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let t = table.get_or_insert_with(|| WordTable::new(values.len()));
        if values.len() != t.dim || values.is_empty() {
            return Err(LangError::BadVectorDim {
                line: lineno,
                expected: t.dim.max(1),
                found: values.len(),
            });
        }
        let key = token.to_lowercase();
        if t.vectors.insert(key, values).is_some() {
            warn!("word table line {lineno}: duplicate token {token:?}, keeping the later vector");
        }
    }
    table.ok_or(LangError::EmptyTable)
}

pub fn load_word_table<P: AsRef<Path>>(path: P) -> Result<WordTable, LangError> {
    read_word_table(BufReader::new(File::open(path)?))
}

pub fn write_word_table<W: Write>(table: &WordTable, writer: W) -> Result<(), LangError> {
    let mut w = BufWriter::new(writer);
    for token in table.tokens() {
        write!(w, "{token}")?;
        for v in &table.vectors[token] {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of the token vectors found in the table, scaled to unit L2 norm.
/// Tokens missing from the table are skipped with a warning; a component
/// with no known token is an error.
pub fn embed_component(tokens: &[String], table: &WordTable) -> Result<Vec<f64>, LangError> {
    let mut sum = vec![0.0; table.dim];
    let mut found = 0usize;
    let mut missing = Vec::new();
    for t in tokens {
        match table.get(t) {
            Some(v) => {
                axpy(1.0, v, &mut sum);
                found += 1;
            }
            None => missing.push(t.clone()),
        }
    }
    if found == 0 {
        return Err(LangError::UnknownComponent {
            tokens: tokens.to_vec(),
            missing,
        });
    }
    if !missing.is_empty() {
        warn!("tokens {missing:?} of {tokens:?} are not in the word table");
    }
    // the 1/found factor cancels under normalization
    let n = norm(&sum);
    if n == 0.0 || !n.is_finite() {
        return Err(LangError::DegenerateComponent {
            tokens: tokens.to_vec(),
        });
    }
    sum.iter_mut().for_each(|x| *x /= n);
    Ok(sum)
}

/// A point in the structured space. Slots whose mask flag is off hold
/// exactly the zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactEmbedding {
    s: Vec<f64>,
    p: Vec<f64>,
    o: Vec<f64>,
    mask: WildcardMask,
}

impl FactEmbedding {
    /// Builds an embedding, zeroing every slot the mask marks as wildcard.
    pub fn new(s: Vec<f64>, p: Vec<f64>, o: Vec<f64>, mask: WildcardMask) -> Self {
        let mut e = FactEmbedding { s, p, o, mask };
        e.apply_mask();
        e
    }

    /// A single flat vector stored in the subject slot, for comparators that
    /// have no slot structure (CCA, SPO averaging). The mask is kept only to
    /// identify the fact order.
    pub fn unstructured(v: Vec<f64>, mask: WildcardMask) -> Self {
        FactEmbedding {
            s: v,
            p: Vec::new(),
            o: Vec::new(),
            mask,
        }
    }

    fn apply_mask(&mut self) {
        for slot in [Slot::Predicate, Slot::Object] {
            if !self.mask.is_active(slot) {
                self.slot_mut(slot).iter_mut().for_each(|x| *x = 0.0);
            }
        }
        if !self.mask.s_active {
            self.s.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn slot(&self, slot: Slot) -> &[f64] {
        match slot {
            Slot::Subject => &self.s,
            Slot::Predicate => &self.p,
            Slot::Object => &self.o,
        }
    }

    fn slot_mut(&mut self, slot: Slot) -> &mut Vec<f64> {
        match slot {
            Slot::Subject => &mut self.s,
            Slot::Predicate => &mut self.p,
            Slot::Object => &mut self.o,
        }
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn o(&self) -> &[f64] {
        &self.o
    }

    pub fn mask(&self) -> WildcardMask {
        self.mask
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.s.len(), self.p.len(), self.o.len()]
    }

    pub fn len(&self) -> usize {
        self.s.len() + self.p.len() + self.o.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[s, p, o]` as one vector.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.s);
        v.extend_from_slice(&self.p);
        v.extend_from_slice(&self.o);
        v
    }

    /// The same embedding under a narrower mask (newly masked slots zeroed).
    pub fn with_mask(&self, mask: WildcardMask) -> Self {
        FactEmbedding::new(self.s.clone(), self.p.clone(), self.o.clone(), mask)
    }
}

/// Slot means of the training-set language embeddings; subtracted after
/// unit normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangNormalizer {
    pub mean_s: Vec<f64>,
    pub mean_p: Vec<f64>,
    pub mean_o: Vec<f64>,
}

impl LangNormalizer {
    pub fn zeros(dim: usize) -> Self {
        LangNormalizer {
            mean_s: vec![0.0; dim],
            mean_p: vec![0.0; dim],
            mean_o: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean_s.len()
    }

    fn mean(&self, slot: Slot) -> &[f64] {
        match slot {
            Slot::Subject => &self.mean_s,
            Slot::Predicate => &self.mean_p,
            Slot::Object => &self.mean_o,
        }
    }
}

/// Slotwise means over the active slots of `train_facts` (one entry per
/// training instance, so frequent facts weigh more).
pub fn fit_normalizer(
    train_facts: &[&StructuredFact],
    table: &WordTable,
) -> Result<LangNormalizer, LangError> {
    let dim = table.dim();
    let mut sums = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
    let mut counts = [0usize; 3];
    for fact in train_facts {
        for (i, slot) in Slot::ALL.into_iter().enumerate() {
            if let Some(tokens) = fact.component(slot) {
                axpy(1.0, &embed_component(tokens, table)?, &mut sums[i]);
                counts[i] += 1;
            }
        }
    }
    for (i, slot) in Slot::ALL.into_iter().enumerate() {
        if counts[i] == 0 {
            warn!("no training fact specifies the {slot:?} slot; its mean is zero");
        } else {
            let c = counts[i] as f64;
            sums[i].iter_mut().for_each(|x| *x /= c);
        }
    }
    let [mean_s, mean_p, mean_o] = sums;
    Ok(LangNormalizer {
        mean_s,
        mean_p,
        mean_o,
    })
}

/// Embeds a fact slot by slot; wildcard slots are zero.
pub fn encode_language(
    fact: &StructuredFact,
    table: &WordTable,
    norm: &LangNormalizer,
) -> Result<FactEmbedding, LangError> {
    if norm.dim() != table.dim() {
        return Err(LangError::NormalizerDim {
            expected: table.dim(),
            found: norm.dim(),
        });
    }
    let mut slots: [Vec<f64>; 3] = Default::default();
    for (i, slot) in Slot::ALL.into_iter().enumerate() {
        slots[i] = match fact.component(slot) {
            Some(tokens) => {
                let mut v = embed_component(tokens, table)?;
                axpy(-1.0, norm.mean(slot), &mut v);
                v
            }
            None => vec![0.0; table.dim()],
        };
    }
    let [s, p, o] = slots;
    Ok(FactEmbedding::new(s, p, o, fact.mask()))
}

/// Word table plus fitted normalizer.
#[derive(Debug, Clone)]
pub struct LanguageEncoder {
    pub table: WordTable,
    pub normalizer: LangNormalizer,
}

impl LanguageEncoder {
    pub fn fit(table: WordTable, train_facts: &[&StructuredFact]) -> Result<Self, LangError> {
        let normalizer = fit_normalizer(train_facts, &table)?;
        Ok(LanguageEncoder { table, normalizer })
    }

    pub fn encode(&self, fact: &StructuredFact) -> Result<FactEmbedding, LangError> {
        encode_language(fact, &self.table, &self.normalizer)
    }

    pub fn slot_dim(&self) -> usize {
        self.table.dim()
    }
}
