//! Training-infrastructure toolkit for hybrid dense/MoE models.
//!
//! - [`tensor_store`]: FP8/BF16 codecs, parameter names, the `ADNK` checkpoint container
//! - [`layout`]: pipeline × expert/data parallel layout planning
//! - [`converter`]: release checkpoint <-> per-rank trainer shards
//! - [`collective`]: lockstep simulation of optimizer collectives
//! - [`multitask`]: instance and task weighting for multi-task fine-tuning
//! - [`metrics`]: classification, ranking, reward and cost arithmetic
//! - [`cli`]: the `moeforge` command line

pub mod cli;
pub mod collective;
pub mod converter;
mod error;
pub mod layout;
pub mod metrics;
pub mod multitask;
pub mod synthetic;
pub mod tensor_store;

pub use error::{Error, Result};
