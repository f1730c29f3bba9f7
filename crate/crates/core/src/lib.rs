//! Unsupervised ranking of generative-model specifications by how
//! reproducible their decoder activation dynamics are across random seeds.
//!
//! Pipeline: [`trace_store`] loads per-epoch activation traces,
//! [`multislice`] builds a diffusion kernel per realization, [`embedding`]
//! jointly embeds all realizations of a spec, and [`stability`] scores the
//! spec by pairwise MMD between realization embeddings. [`pipeline`] wires
//! these together.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embedding;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod multislice;
pub mod pipeline;
pub mod rank_stats;
pub mod stability;
pub mod svd;
pub mod synth;
pub mod trace_store;

pub use error::{Error, Result};
