//! Parameter-efficient adaptation of dual-encoder contrastive models.
//!
//! Frozen transformer encoders for images and token sequences are adapted
//! with low-rank adapters on their query/key/value projections. An optional
//! hypergraph module refines the final token states using hyperedges derived
//! from attention maps and token similarity, and training uses a contrastive
//! loss that ignores non-matching pairs sharing a class label.
//!
//! Everything runs in double precision on a small recorded-graph autodiff
//! engine so that every gradient can be checked against finite differences.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hgnn;
pub mod lora;
pub mod loss;
pub mod model;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{topk_indices, GradRecord, ParamSet, Tensor};
