use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FactError, StructuredFact};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One `(f_v, f_l)` pair: image features bound to a language fact.
#[derive(Debug, Clone, PartialEq)]
pub struct FactInstance {
    pub image_id: String,
    pub split: Split,
    pub features: Vec<f64>,
    pub fact: StructuredFact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_dim: usize,
    instances: Vec<FactInstance>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    feature_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    image_id: String,
    split: Split,
    s: Vec<String>,
    p: Option<Vec<String>>,
    o: Option<Vec<String>>,
    features: Vec<f64>,
}

struct Validator {
    feature_dim: usize,
    pairs: HashSet<(String, StructuredFact)>,
    images: HashMap<String, Vec<f64>>,
}

impl Validator {
    fn new(feature_dim: usize) -> Self {
        Validator {
            feature_dim,
            pairs: HashSet::new(),
            images: HashMap::new(),
        }
    }

    fn check(&mut self, line: usize, inst: &FactInstance) -> Result<(), FactError> {
        if inst.features.len() != self.feature_dim {
            return Err(FactError::BadFeatureDim {
                line,
                expected: self.feature_dim,
                found: inst.features.len(),
            });
        }
        if !self
            .pairs
            .insert((inst.image_id.clone(), inst.fact.clone()))
        {
            return Err(FactError::DuplicatePair {
                line,
                image_id: inst.image_id.clone(),
                fact: inst.fact.to_string(),
            });
        }
        match self.images.get(&inst.image_id) {
            Some(prev) if prev != &inst.features => Err(FactError::InconsistentImage {
                line,
                image_id: inst.image_id.clone(),
            }),
            Some(_) => Ok(()),
            None => {
                self.images
                    .insert(inst.image_id.clone(), inst.features.clone());
                Ok(())
            }
        }
    }
}

impl Dataset {
    /// Validates and wraps instances. Line numbers in errors are 1-based
    /// positions in `instances` offset by the header line.
    pub fn new(feature_dim: usize, instances: Vec<FactInstance>) -> Result<Self, FactError> {
        if feature_dim == 0 {
            return Err(FactError::BadHeader("feature_dim must be positive".into()));
        }
        let mut validator = Validator::new(feature_dim);
        for (i, inst) in instances.iter().enumerate() {
            validator.check(i + 2, inst)?;
        }
        Ok(Dataset {
            feature_dim,
            instances,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn instances(&self) -> &[FactInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &FactInstance> {
        self.instances.iter().filter(move |i| i.split == split)
    }

    /// Distinct facts of a split, in first-appearance order.
    pub fn unique_facts(&self, split: Split) -> Vec<StructuredFact> {
        let mut seen = HashSet::new();
        self.split(split)
            .filter(|i| seen.insert(&i.fact))
            .map(|i| i.fact.clone())
            .collect()
    }

    /// Distinct images of a split with their features, in first-appearance order.
    pub fn images(&self, split: Split) -> Vec<(&str, &[f64])> {
        let mut seen = HashSet::new();
        self.split(split)
            .filter(|i| seen.insert(i.image_id.as_str()))
            .map(|i| (i.image_id.as_str(), i.features.as_slice()))
            .collect()
    }

    /// Ground-truth facts per image of a split, images in first-appearance order.
    pub fn facts_by_image(&self, split: Split) -> Vec<(&str, Vec<&StructuredFact>)> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut out: Vec<(&str, Vec<&StructuredFact>)> = Vec::new();
        for inst in self.split(split) {
            let slot = *index.entry(inst.image_id.as_str()).or_insert_with(|| {
                out.push((inst.image_id.as_str(), Vec::new()));
                out.len() - 1
            });
            out[slot].1.push(&inst.fact);
        }
        out
    }
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset, FactError> {
    let mut lines = reader.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line)
                    .map_err(|e| FactError::BadHeader(e.to_string()))?;
            }
            None => return Err(FactError::BadHeader("empty file".into())),
        }
    };
    if header.feature_dim == 0 {
        return Err(FactError::BadHeader("feature_dim must be positive".into()));
    }
    let mut validator = Validator::new(header.feature_dim);
    let mut instances = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| FactError::BadRecord {
            line: lineno,
            message: e.to_string(),
        })?;
        let fact = StructuredFact::new(rec.s, rec.p, rec.o)?;
        let inst = FactInstance {
            image_id: rec.image_id,
            split: rec.split,
            features: rec.features,
            fact,
        };
        validator.check(lineno, &inst)?;
        instances.push(inst);
    }
    Ok(Dataset {
        feature_dim: header.feature_dim,
        instances,
    })
}

pub fn load_dataset<P: AsRef<Path>>(path: P) -> Result<Dataset, FactError> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn write_dataset<W: Write>(dataset: &Dataset, writer: W) -> Result<(), FactError> {
    let mut w = BufWriter::new(writer);
    let header = Header {
        feature_dim: dataset.feature_dim,
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    writeln!(w)?;
    for inst in &dataset.instances {
        let rec = Record {
            image_id: inst.image_id.clone(),
            split: inst.split,
            s: inst.fact.subject().to_vec(),
            p: inst.fact.predicate().map(<[String]>::to_vec),
            o: inst.fact.object().map(<[String]>::to_vec),
            features: inst.features.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
