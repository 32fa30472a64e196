//! Grid-plan-conditioned trajectory distribution forecasting.
//!
//! The pipeline: an observation encoder embeds agent history and a scene
//! raster into feature maps; a policy network maps those features into
//! non-stationary rewards and unrolls differentiable value iteration into a
//! per-step planning policy; temporal occupancy grid maps are decoded with a
//! normalized-deconvolution ConvLSTM; plans sampled with the Gumbel-Softmax
//! trick condition a recurrent bivariate-Gaussian trajectory decoder; and an
//! attention-based refinement network distills oversampled trajectories into
//! a small representative set.
//!
//! Everything differentiable runs on the reverse-mode tape in [`tape`], in
//! `f64` throughout so analytic gradients can be checked against central
//! finite differences.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod grid;
pub mod mdp;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod ogm;
pub mod plot;
pub mod refine;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
