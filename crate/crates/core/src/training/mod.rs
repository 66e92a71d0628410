//! Losses, optimizer, checkpoints, the training loop and evaluation.

pub mod check;
pub mod checkpoint;
pub mod eval;
pub mod loss;
pub mod optim;
pub mod train;
