//! Relation prediction for panoptic scene graphs, driven by language priors.
//!
//! Given a scene of segmented objects, the model scores every ordered object
//! pair against a fixed relation vocabulary. Two ingredients meet in the
//! middle:
//!
//! - **Vision**: per-object features pooled from a feature map under each
//!   object's mask, combined pairwise with an explicit spatial-layout
//!   encoding ([`vision`]).
//! - **Language**: descriptions of what relations are plausible between two
//!   categories, mined once per vocabulary from a chat model and embedded
//!   into vectors ([`lang`]); a *proposer* description covers each ordered
//!   category pair, and *judger* descriptions cover each (pair, relation)
//!   combination.
//!
//! Two cross-attention decoders let each pair's vision feature attend over
//! the corresponding language features, producing two per-pair relation
//! score vectors, which a learned gate fuses into the final scores. Training
//! is multi-label binary cross-entropy against the annotated triplets;
//! evaluation ranks all (pair, relation) candidates and reports recall@k
//! metrics.
//!
//! Everything runs on a small hand-rolled tape autodiff ([`tensor`]) with
//! deterministic, single-threaded math, so every number in the pipeline is
//! reproducible bit-for-bit from a seed. Backends (chat, embeddings) have
//! deterministic offline mocks, letting the full pipeline run without any
//! network access.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod hash;
pub mod lang;
pub mod nn;
pub mod optim;
pub mod prompter;
pub mod scene;
pub mod tensor;
pub mod vision;

pub use error::{Error, ErrorCategory, Result};
