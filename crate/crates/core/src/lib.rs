//! Track-token temporal tracking at desk scale.
//!
//! A one-stream transformer encodes a per-frame track token jointly with
//! template and search tokens; a two-layer temporal module relates the last
//! `m` track tokens; the resulting context token reweights search features
//! before a center-based head predicts the box.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod params;
pub mod summary;
pub mod temporal;
pub mod train;
pub mod world;

pub use bbox::{iou, BBox};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{Mode, Model, ModelConfig};
pub use params::{Bound, ParamGroup, ParamId, ParamStore};
pub use temporal::Variant;
