#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod cpfield;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod hvae;
pub mod meshing;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pointcloud;
pub mod train;

pub use error::{Error, Result};
