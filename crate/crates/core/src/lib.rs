//! Online merging optimizers and offline model merging.
//!
//! * [`pset`] / [`checkpoint`]: named-tensor parameter sets and the PSET1 format.
//! * [`kernels`] / [`merge`]: sparsifiers, sign consensus, offline Linear/DARE/TIES.
//! * [`optim`]: Adam plus OnDARE, OnTIES, full-merge, step-K, ChildTuning and EMA.
//! * [`dpo`]: a desk-scale DPO environment for measuring reward vs. forgetting.
//! * [`config`] / [`cli`]: run configuration and the `mergeopt` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dpo;
pub mod error;
pub mod kernels;
pub mod mask;
pub mod merge;
pub mod optim;
pub mod pset;

pub use error::{Error, Result};
pub use pset::{apply_delta, delta, DeltaSet, ParameterSet, Tensor};
