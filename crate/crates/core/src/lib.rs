//! Learned fine-tuning objectives: an outer hyperparameter search over the
//! weights of nine loss terms plus learning rate, weight decay and seed, each
//! candidate scored by a short fine-tune evaluated on a shifted validation set.

pub mod cli;
pub mod data;
pub mod engine;
pub mod eval;
pub mod losses;
pub mod models;
pub mod rng;
pub mod samplers;
pub mod searchspace;
