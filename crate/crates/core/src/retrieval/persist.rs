//! On-disk formats: a versioned little-endian binary index file and
//! JSON-lines ranked result records.
//!
//! Index layout:
//!
//! ```text
//! magic "FSIX" | version u32 | scope u8 (0 = all, 1..3 = order)
//! mode u8 (0 exact, 1 approximate) | target_recall f64 | seed u64 | checks u64
//! d_S u32 | d_P u32 | d_O u32 | entry count u64
//! per entry: id length u32 | id utf-8 | mask bits u8 (S=1, P=2, O=4) | values f64 x (d_S+d_P+d_O)
//! ```
//!
//! The k-d forest is rebuilt from the stored seed on load.

use std::io::{BufRead, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{EmbeddingIndex, Hit, IndexMode, RankedList, RetrievalError, Scope};
use crate::fact::{FactOrder, WildcardMask};
use crate::lang::FactEmbedding;

const MAGIC: &[u8; 4] = b"FSIX";
pub const INDEX_FORMAT_VERSION: u32 = 1;

fn mask_bits(m: WildcardMask) -> u8 {
    (m.s_active as u8) | ((m.p_active as u8) << 1) | ((m.o_active as u8) << 2)
}

fn bits_mask(b: u8) -> WildcardMask {
    WildcardMask {
        s_active: b & 1 != 0,
        p_active: b & 2 != 0,
        o_active: b & 4 != 0,
    }
}

pub fn write_index<W: Write>(index: &EmbeddingIndex, mut w: W) -> Result<(), RetrievalError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(INDEX_FORMAT_VERSION)?;
    w.write_u8(match index.scope {
        Scope::AllOrders => 0,
        Scope::SingleOrder(o) => o.as_u8(),
    })?;
    let (mode, recall, seed) = match index.mode {
        IndexMode::Exact => (0u8, 1.0, 0u64),
        IndexMode::Approximate {
            target_recall,
            seed,
        } => (1, target_recall, seed),
    };
    w.write_u8(mode)?;
    w.write_f64::<LittleEndian>(recall)?;
    w.write_u64::<LittleEndian>(seed)?;
    w.write_u64::<LittleEndian>(index.checks as u64)?;
    for d in index.dims {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    w.write_u64::<LittleEndian>(index.entries.len() as u64)?;
    for ((id, e), flat) in index.entries.iter().zip(&index.flat) {
        w.write_u32::<LittleEndian>(id.len() as u32)?;
        w.write_all(id.as_bytes())?;
        w.write_u8(mask_bits(e.mask()))?;
        for v in flat {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_index<R: Read>(mut r: R) -> Result<EmbeddingIndex, RetrievalError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(RetrievalError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != INDEX_FORMAT_VERSION {
        return Err(RetrievalError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let scope = match r.read_u8()? {
        0 => Scope::AllOrders,
        o => Scope::SingleOrder(
            FactOrder::from_u8(o)
                .ok_or_else(|| RetrievalError::Format(format!("bad scope {o}")))?,
        ),
    };
    let mode_tag = r.read_u8()?;
    let target_recall = r.read_f64::<LittleEndian>()?;
    let seed = r.read_u64::<LittleEndian>()?;
    let checks = r.read_u64::<LittleEndian>()?;
    let mode = match mode_tag {
        0 => IndexMode::Exact,
        1 => IndexMode::Approximate {
            target_recall,
            seed,
        },
        t => return Err(RetrievalError::Format(format!("bad mode {t}"))),
    };
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>()? as usize;
    }
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut entries = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|e| RetrievalError::Format(e.to_string()))?;
        let mask = bits_mask(r.read_u8()?);
        let mut read = |k: usize| -> Result<Vec<f64>, RetrievalError> {
            (0..k).map(|_| Ok(r.read_f64::<LittleEndian>()?)).collect()
        };
        let (s, p, o) = (read(dims[0])?, read(dims[1])?, read(dims[2])?);
        entries.push((id, FactEmbedding::new(s, p, o, mask)));
    }
    let checks = if checks == u64::MAX {
        usize::MAX
    } else {
        checks as usize
    };
    EmbeddingIndex::restore(entries, mode, scope, checks)
}

/// One ranked result line: `{"query_id": ..., "results": [[id, distance], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRecord {
    pub query_id: String,
    pub results: Vec<(String, f64)>,
}

impl RankedRecord {
    pub fn new(query_id: impl Into<String>, list: &RankedList) -> Self {
        RankedRecord {
            query_id: query_id.into(),
            results: list
                .hits
                .iter()
                .map(|h| (h.id.clone(), h.distance))
                .collect(),
        }
    }

    pub fn to_list(&self) -> RankedList {
        RankedList {
            hits: self
                .results
                .iter()
                .map(|(id, distance)| Hit {
                    id: id.clone(),
                    distance: *distance,
                })
                .collect(),
        }
    }
}

pub fn write_ranked_jsonl<W: Write>(records: &[RankedRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()
}

pub fn read_ranked_jsonl<R: BufRead>(r: R) -> Result<Vec<RankedRecord>, RetrievalError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| RetrievalError::Format(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::build_index;
    use std::io::Cursor;

    fn entries() -> Vec<(String, FactEmbedding)> {
        (0..40)
            .map(|i| {
                let x = i as f64;
                let order = FactOrder::ALL[i % 3];
                (
                    format!("f{i}"),
                    FactEmbedding::new(
                        vec![x, -x],
                        vec![x.sin(), 1.0],
                        vec![x.cos(), 0.5],
                        order.mask(),
                    ),
                )
            })
            .collect()
    }

    #[test]
    fn index_file_round_trip() {
        for mode in [
            IndexMode::Exact,
            IndexMode::Approximate {
                target_recall: 0.9,
                seed: 3,
            },
        ] {
            let idx = build_index(entries(), mode, Scope::SingleOrder(FactOrder::Third)).unwrap();
            let mut buf = Vec::new();
            write_index(&idx, &mut buf).unwrap();
            let back = read_index(Cursor::new(buf)).unwrap();
            assert_eq!(back.entries(), idx.entries());
            assert_eq!(back.mode(), idx.mode());
            assert_eq!(back.scope(), idx.scope());
            assert_eq!(back.checks(), idx.checks());
            let probe = &entries()[5].1;
            let m = WildcardMask::FULL;
            assert_eq!(
                back.query(probe, 5, m).unwrap(),
                idx.query(probe, 5, m).unwrap()
            );
        }
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(
            read_index(Cursor::new(b"NOPE\x01\x00\x00\x00".to_vec())),
            Err(RetrievalError::Format(_))
        ));
    }

    #[test]
    fn ranked_jsonl_shape() {
        let rec = RankedRecord {
            query_id: "img1".into(),
            results: vec![("dog".into(), 0.5), ("cat".into(), 1.0)],
        };
        let mut buf = Vec::new();
        write_ranked_jsonl(std::slice::from_ref(&rec), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "{\"query_id\":\"img1\",\"results\":[[\"dog\",0.5],[\"cat\",1.0]]}\n"
        );
        assert_eq!(read_ranked_jsonl(Cursor::new(buf)).unwrap(), vec![rec]);
    }
}
