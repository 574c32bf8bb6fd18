//! Human pose estimation with a shifted-window transformer backbone and a
//! top-down feature-pyramid fusion head.
//!
//! The crate is self-contained: a small reverse-mode tensor engine
//! ([`tensor`], [`autograd`]) drives the backbone ([`backbone`]), the fusion
//! head ([`fusion`]) and training; [`heatmap`], [`eval`] and [`coco`] cover
//! supervision, metrics and data; [`profile`] gives analytic parameter and
//! FLOP counts.

pub mod autograd;
pub mod backbone;
pub mod coco;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod heatmap;
pub mod model;
pub mod oracle;
pub mod params;
pub mod profile;
pub mod selfcheck;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
