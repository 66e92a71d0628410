//! Point cloud completion with snowflake point deconvolution.

pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod fused;
pub mod geom;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod pointio;
pub mod seedgen;
pub mod spd;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
