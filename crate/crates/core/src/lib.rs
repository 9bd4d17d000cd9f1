//! Semantic scene embeddings for CTR prediction.
//!
//! The pipeline runs in three stages over a synthetic food-delivery world:
//! continual pretraining of a small decoder LM on keyword-wrapped POI
//! descriptions ([`lm`]), contrastive fine-tuning of that LM into a text
//! embedder ([`embed`]), and an online CTR/CTCVR model that reads frozen,
//! precomputed scene embeddings from a cache ([`scenecache`], [`fusion`]).

pub mod contrastive;
pub mod digest;
pub mod embed;
pub mod error;
pub mod evalbench;
pub mod fusion;
pub mod lm;
pub mod pipeline;
pub mod scenecache;
pub mod serving;
pub mod synthworld;
pub mod textcodec;

pub use error::{LarrError, Result};
