//! Composition-aware content-based image retrieval.
//!
//! A composition classifier (CCNet) produces a key composition map (KCM) for
//! each image; a retrieval network (CBIRNet) fuses that map into its content
//! features and emits an embedding searched by cosine similarity.

pub mod backbone;
pub mod cbirnet;
pub mod ccnet;
pub mod checkpoint;
pub mod composition_data;
pub mod evaluation;
pub mod error;
pub mod nn;
pub mod preprocessing;
pub mod render;
pub mod retrieval;
pub mod shot_miner;
pub mod synthetic_film;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
