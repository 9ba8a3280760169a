//! Two-view structured fact embeddings.
//!
//! Language facts `<S>`, `<S,P>` and `<S,P,O>` and image feature vectors are
//! mapped into one space with a subject, predicate and object slot. Facts
//! with wildcards leave the unspecified slots out of both the training loss
//! and retrieval distances.

pub mod cca;
pub mod checkpoint;
pub mod datagen;
pub mod evaluation;
pub mod fact;
pub mod lang;
pub mod linalg;
pub mod pipeline;
pub mod retrieval;
pub mod training;
pub mod visual;

pub use fact::{
    parse_fact, serialize_fact, Dataset, FactInstance, FactOrder, Slot, Split, StructuredFact,
    WildcardMask,
};
pub use lang::{FactEmbedding, LanguageEncoder, WordTable};
pub use visual::{encode_visual, init_params, EncoderParams, EncoderSpec, ModelKind};
