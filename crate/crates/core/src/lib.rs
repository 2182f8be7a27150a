//! Counterfactual feature edits that explain convolutional classifier decisions.
//!
//! A classifier is split into a spatial feature extractor `f` and a decision
//! head `g`. Given a query image classified as `c` and a distractor image
//! classified as `c'`, the engine finds a short sequence of feature-cell
//! edits, each copying one distractor cell into the query grid, after which
//! the head predicts `c'`.

pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod features;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod relaxed;
pub mod rng;
pub mod search;

pub use error::{Error, Result};
