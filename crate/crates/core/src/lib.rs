//! Chemical-protein relation extraction toolkit.
//!
//! The pipeline goes from DrugProt-format corpus files to sentence-level
//! candidate pairs, WordPiece-encoded sequences, a small transformer encoder
//! with one of three classification heads, and finally ensembles fused by
//! majority vote or an MLP stacker. [`eval`] scores submission-format files.

pub mod checkpoint;
pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod eval;
pub(crate) mod linalg;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod tokenizer;
pub mod train;

pub use corpus::{
    load_corpus, CorpusBundle, CorpusPaths, Document, EntityMention, EntityType, InstanceKey,
    RelationGold, RelationType, SchemeKind, Sentence, SentenceInstance,
};
pub use error::{Error, ErrorKind, Result, SpanMismatch};
