//! Structured facts of the form `<S>`, `<S,P>` and `<S,P,O>`, their wildcard
//! masks, and the dataset records that pair them with image features.

mod dataset;
mod frequency;

pub use dataset::{load_dataset, read_dataset, write_dataset, Dataset, FactInstance, Split};
pub use frequency::{fact_frequency_table, Component, ComponentMarginals, FrequencyTable};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FactError {
    #[error("malformed fact {text:?}: {reason}")]
    MalformedFact { text: String, reason: &'static str },
    #[error("line {line}: expected {expected} features, found {found}")]
    BadFeatureDim {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate pair (image {image_id:?}, fact {fact})")]
    DuplicatePair {
        line: usize,
        image_id: String,
        fact: String,
    },
    #[error("line {line}: image {image_id:?} appears with differing feature vectors")]
    InconsistentImage { line: usize, image_id: String },
    #[error("line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("dataset header missing or invalid: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fact order: how many of the three components are specified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FactOrder {
    First,
    Second,
    Third,
}

impl FactOrder {
    pub const ALL: [FactOrder; 3] = [FactOrder::First, FactOrder::Second, FactOrder::Third];

    pub fn as_u8(self) -> u8 {
        match self {
            FactOrder::First => 1,
            FactOrder::Second => 2,
            FactOrder::Third => 3,
        }
    }

    pub fn from_u8(order: u8) -> Option<Self> {
        match order {
            1 => Some(FactOrder::First),
            2 => Some(FactOrder::Second),
            3 => Some(FactOrder::Third),
            _ => None,
        }
    }

    /// Zero-based position, handy for per-order arrays.
    pub fn index(self) -> usize {
        self.as_u8() as usize - 1
    }

    pub fn mask(self) -> WildcardMask {
        WildcardMask::from_order(self)
    }
}

impl fmt::Display for FactOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// One of the three hyper-dimensions of the structured space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Subject,
    Predicate,
    Object,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Subject, Slot::Predicate, Slot::Object];
}

/// Which slots carry information. Wildcard slots are ignored by the loss and
/// by masked distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WildcardMask {
    pub s_active: bool,
    pub p_active: bool,
    pub o_active: bool,
}

impl WildcardMask {
    pub const FULL: WildcardMask = WildcardMask {
        s_active: true,
        p_active: true,
        o_active: true,
    };

    pub fn from_order(order: FactOrder) -> Self {
        match order {
            FactOrder::First => WildcardMask {
                s_active: true,
                p_active: false,
                o_active: false,
            },
            FactOrder::Second => WildcardMask {
                s_active: true,
                p_active: true,
                o_active: false,
            },
            FactOrder::Third => WildcardMask::FULL,
        }
    }

    /// Inverse of [`WildcardMask::from_order`]; `None` for patterns that no
    /// fact order produces.
    pub fn order(&self) -> Option<FactOrder> {
        match (self.s_active, self.p_active, self.o_active) {
            (true, false, false) => Some(FactOrder::First),
            (true, true, false) => Some(FactOrder::Second),
            (true, true, true) => Some(FactOrder::Third),
            _ => None,
        }
    }

    pub fn is_active(&self, slot: Slot) -> bool {
        match slot {
            Slot::Subject => self.s_active,
            Slot::Predicate => self.p_active,
            Slot::Object => self.o_active,
        }
    }

    /// 0/1 loss weight of a slot.
    pub fn weight(&self, slot: Slot) -> f64 {
        if self.is_active(slot) {
            1.0
        } else {
            0.0
        }
    }

    pub fn active_count(&self) -> usize {
        Slot::ALL.iter().filter(|s| self.is_active(**s)).count()
    }
}

/// A language-view fact. Tokens are normalized on construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawFact", into = "RawFact")]
pub struct StructuredFact {
    subject: Vec<String>,
    predicate: Option<Vec<String>>,
    object: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct RawFact {
    s: Vec<String>,
    p: Option<Vec<String>>,
    o: Option<Vec<String>>,
}

impl TryFrom<RawFact> for StructuredFact {
    type Error = FactError;

    fn try_from(raw: RawFact) -> Result<Self, FactError> {
        StructuredFact::new(raw.s, raw.p, raw.o)
    }
}

impl From<StructuredFact> for RawFact {
    fn from(f: StructuredFact) -> Self {
        RawFact {
            s: f.subject,
            p: f.predicate,
            o: f.object,
        }
    }
}

/// Lowercases and splits a phrase on whitespace and underscores.
pub fn normalize_tokens<S: AsRef<str>>(parts: &[S]) -> Vec<String> {
    parts
        .iter()
        .flat_map(|p| {
            p.as_ref()
                .split(|c: char| c.is_whitespace() || c == '_')
                .filter(|t| !t.is_empty())
                .map(str::to_lowercase)
                .collect::<Vec<_>>()
        })
        .collect()
}

impl StructuredFact {
    /// Builds a fact from raw token phrases. An empty (after normalization)
    /// predicate or object counts as a wildcard.
    pub fn new<S: AsRef<str>>(
        subject: Vec<S>,
        predicate: Option<Vec<S>>,
        object: Option<Vec<S>>,
    ) -> Result<Self, FactError> {
        let subject = normalize_tokens(&subject);
        let predicate = predicate
            .map(|p| normalize_tokens(&p))
            .filter(|p| !p.is_empty());
        let object = object
            .map(|o| normalize_tokens(&o))
            .filter(|o| !o.is_empty());
        let fact = StructuredFact {
            subject,
            predicate,
            object,
        };
        if fact.subject.is_empty() {
            return Err(FactError::MalformedFact {
                text: fact.to_string(),
                reason: "empty subject",
            });
        }
        if fact.object.is_some() && fact.predicate.is_none() {
            return Err(FactError::MalformedFact {
                text: fact.to_string(),
                reason: "object without predicate",
            });
        }
        Ok(fact)
    }

    pub fn first(subject: &str) -> Result<Self, FactError> {
        Self::new(vec![subject], None, None)
    }

    pub fn second(subject: &str, predicate: &str) -> Result<Self, FactError> {
        Self::new(vec![subject], Some(vec![predicate]), None)
    }

    pub fn third(subject: &str, predicate: &str, object: &str) -> Result<Self, FactError> {
        Self::new(vec![subject], Some(vec![predicate]), Some(vec![object]))
    }

    pub fn subject(&self) -> &[String] {
        &self.subject
    }

    pub fn predicate(&self) -> Option<&[String]> {
        self.predicate.as_deref()
    }

    pub fn object(&self) -> Option<&[String]> {
        self.object.as_deref()
    }

    pub fn component(&self, slot: Slot) -> Option<&[String]> {
        match slot {
            Slot::Subject => Some(&self.subject),
            Slot::Predicate => self.predicate(),
            Slot::Object => self.object(),
        }
    }

    pub fn order(&self) -> FactOrder {
        match (&self.predicate, &self.object) {
            (None, _) => FactOrder::First,
            (Some(_), None) => FactOrder::Second,
            (Some(_), Some(_)) => FactOrder::Third,
        }
    }

    pub fn mask(&self) -> WildcardMask {
        WildcardMask::from_order(self.order())
    }

    /// True when `self` is a strictly more specific fact sharing every
    /// specified component of `general`.
    pub fn specializes(&self, general: &StructuredFact) -> bool {
        if self.order() <= general.order() || self.subject != general.subject {
            return false;
        }
        match general.order() {
            FactOrder::First => true,
            FactOrder::Second => self.predicate == general.predicate,
            FactOrder::Third => false,
        }
    }
}

/// Numeric fact order in `{1, 2, 3}`.
pub fn fact_order(fact: &StructuredFact) -> u8 {
    fact.order().as_u8()
}

/// Parses `<S[,P[,O]]>` or pipe syntax `S|P|O`. A `*` component is a wildcard.
pub fn parse_fact(text: &str) -> Result<StructuredFact, FactError> {
    let trimmed = text.trim();
    let malformed = |reason| FactError::MalformedFact {
        text: text.to_string(),
        reason,
    };
    let parts: Vec<&str> = if let Some(inner) = trimmed.strip_prefix('<') {
        let inner = inner
            .strip_suffix('>')
            .ok_or_else(|| malformed("unterminated angle brackets"))?;
        inner.split(',').collect()
    } else {
        trimmed.split('|').collect()
    };
    if parts.len() > 3 {
        return Err(malformed("more than three components"));
    }
    let component = |i: usize| -> Option<Vec<&str>> {
        parts
            .get(i)
            .map(|p| p.trim())
            .filter(|p| !p.is_empty() && *p != "*")
            .map(|p| vec![p])
    };
    let subject = component(0).ok_or_else(|| malformed("empty subject"))?;
    let predicate = component(1);
    let object = component(2);
    if object.is_some() && predicate.is_none() {
        return Err(malformed("object without predicate"));
    }
    StructuredFact::new(subject, predicate, object)
}

/// Pipe syntax, the inverse of [`parse_fact`].
pub fn serialize_fact(fact: &StructuredFact) -> String {
    fact.to_string()
}

impl fmt::Display for StructuredFact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.subject.join(" "))?;
        match (&self.predicate, &self.object) {
            (Some(p), Some(o)) => write!(f, "|{}|{}", p.join(" "), o.join(" ")),
            (Some(p), None) => write!(f, "|{}", p.join(" ")),
            (None, Some(o)) => write!(f, "||{}", o.join(" ")),
            (None, None) => Ok(()),
        }
    }
}

impl FromStr for StructuredFact {
    type Err = FactError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_fact(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pipe_syntax_third_order() {
        let f = parse_fact("person|riding|horse").unwrap();
        assert_eq!(f.subject(), toks(&["person"]).as_slice());
        assert_eq!(f.predicate(), Some(toks(&["riding"]).as_slice()));
        assert_eq!(f.object(), Some(toks(&["horse"]).as_slice()));
        assert_eq!(fact_order(&f), 3);
    }

    #[test]
    fn pipe_syntax_second_order() {
        let f = parse_fact("baby|smiling").unwrap();
        assert_eq!(f.subject(), toks(&["baby"]).as_slice());
        assert_eq!(f.predicate(), Some(toks(&["smiling"]).as_slice()));
        assert!(f.object().is_none());
        assert_eq!(fact_order(&f), 2);
    }

    #[test]
    fn object_without_predicate_is_rejected() {
        assert!(matches!(
            parse_fact("girl||horse"),
            Err(FactError::MalformedFact { .. })
        ));
        assert!(matches!(
            parse_fact("<girl,*,horse>"),
            Err(FactError::MalformedFact { .. })
        ));
    }

    #[test]
    fn empty_subject_is_rejected() {
        assert!(parse_fact("|riding|horse").is_err());
        assert!(parse_fact("<>").is_err());
        assert!(parse_fact("   ").is_err());
    }

    #[test]
    fn angle_syntax_and_wildcards() {
        assert_eq!(fact_order(&parse_fact("<beach>").unwrap()), 1);
        assert_eq!(fact_order(&parse_fact("<beach,*,*>").unwrap()), 1);
        assert_eq!(fact_order(&parse_fact("<baby, Asian>").unwrap()), 2);
        let f = parse_fact("<baby, sitting_on, high_chair>").unwrap();
        assert_eq!(fact_order(&f), 3);
        assert_eq!(f.predicate(), Some(toks(&["sitting", "on"]).as_slice()));
        assert_eq!(f.object(), Some(toks(&["high", "chair"]).as_slice()));
    }

    #[test]
    fn tokens_are_normalized() {
        let f = parse_fact("  Young   Man | Playing_Guitar ").unwrap();
        assert_eq!(f.subject(), toks(&["young", "man"]).as_slice());
        assert_eq!(f.predicate(), Some(toks(&["playing", "guitar"]).as_slice()));
        assert_eq!(f.to_string(), "young man|playing guitar");
    }

    #[test]
    fn mask_bijection() {
        for order in FactOrder::ALL {
            assert_eq!(WildcardMask::from_order(order).order(), Some(order));
        }
        let bad = WildcardMask {
            s_active: true,
            p_active: false,
            o_active: true,
        };
        assert_eq!(bad.order(), None);
    }

    #[test]
    fn specialization_rule() {
        let car = StructuredFact::first("car").unwrap();
        let car_red = StructuredFact::second("car", "red").unwrap();
        let bus_red = StructuredFact::second("bus", "red").unwrap();
        let pp = StructuredFact::second("person", "playing").unwrap();
        let ppg = StructuredFact::third("person", "playing", "guitar").unwrap();
        let prg = StructuredFact::third("person", "riding", "guitar").unwrap();
        assert!(car_red.specializes(&car));
        assert!(!bus_red.specializes(&car));
        assert!(ppg.specializes(&pp));
        assert!(!prg.specializes(&pp));
        assert!(!car.specializes(&car));
        assert!(!ppg.specializes(&ppg));
    }

    fn token() -> impl Strategy<Value = String> {
        "[a-z]{1,6}"
    }

    fn phrase() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(token(), 1..3)
    }

    prop_compose! {
        fn arb_fact()(s in phrase(), p in phrase(), o in phrase(), order in 1u8..=3) -> StructuredFact {
            match order {
                1 => StructuredFact::new(s, None, None).unwrap(),
                2 => StructuredFact::new(s, Some(p), None).unwrap(),
                _ => StructuredFact::new(s, Some(p), Some(o)).unwrap(),
            }
        }
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(f in arb_fact()) {
            let text = serialize_fact(&f);
            prop_assert_eq!(parse_fact(&text).unwrap(), f);
        }

        #[test]
        fn order_agrees_with_mask(f in arb_fact()) {
            let mask = f.mask();
            prop_assert!(mask.s_active);
            prop_assert!(!mask.o_active || mask.p_active);
            prop_assert_eq!(mask.order(), Some(f.order()));
            prop_assert_eq!(mask.active_count(), f.order().as_u8() as usize);
        }
    }
}
