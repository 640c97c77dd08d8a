//! Knowledge-enhanced image–text alignment at desk scale.
//!
//! The pipeline runs in three stages:
//!
//! 1. [`knowledge_tree`] merges disease descriptions with OncoTree nodes
//!    into a tissue → disease → attribute tree.
//! 2. [`training::train_knowledge_encoder`] pretrains a text encoder on
//!    entity-balanced attribute batches with the AdaSP metric loss (or a
//!    batch-hard triplet baseline).
//! 3. [`training::train_kep`] aligns an image encoder with a text encoder
//!    initialized from the knowledge encoder, while a frozen copy of the
//!    knowledge encoder distills into the text branch.
//!
//! [`evaluation`] implements retrieval, prompt-ensembled zero-shot patch
//! classification and Top-K pooled slide subtyping. [`synth_data`] produces
//! seeded synthetic corpora in the on-disk formats of [`corpus_io`].

pub mod corpus_io;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod knowledge_tree;
pub mod numerics;
pub mod objectives;
pub mod synth_data;
pub mod training;

pub use error::{Error, Result};

pub use corpus_io::{
    Checkpoint, DiseaseRecord, NamedTensor, OncoTreeRecord, PairRecord, PatchRecord, RunMeta, WsiRecord,
};
pub use encoders::{FrozenEncoder, ImageEncoderParams, TextEncoderParams, Tokenizer};
pub use evaluation::{EvalReport, PromptBank, PromptTrial};
pub use knowledge_tree::{Attribute, AttributeKind, BuildLog, DiseaseNode, KnowledgeTree, TreeStats};
pub use numerics::Tensor2;
pub use objectives::{AlignedTriple, EmbeddingBatch, KnowledgeBatch, LossConfig};
pub use synth_data::SynthSpec;
pub use training::{MetricLoss, RunHistory, TrainConfig};

/// Dimension of every encoder output.
pub const EMBED_DIM: usize = 512;
