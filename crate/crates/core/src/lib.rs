//! Stage-wise uncertainty quantification for ensembles of reasoning chains.
//!
//! Every model in an ensemble walks the same chain: it describes the datum
//! (`x`), reasons about the task (`z`), extracts an initial hypothesis
//! (`h_tilde`) and, after reflecting with side information (`c`), commits to a
//! final decision (`h`). This crate scores three kinds of disagreement along
//! that chain, combines them into one score `S`, and defers the most
//! uncertain instances to a human reviewer.
//!
//! The pieces, bottom-up:
//!
//! - [`model`]: traces, datasets and their structural validation.
//! - [`store`]: JSONL ingest, stratified splits, K-fold partitions, artifacts.
//! - [`embedding`]: pluggable text embedders behind a content-hash cache.
//! - [`similarity`]: pairwise cosine matrices with observation masks.
//! - [`pmf`]: masked matrix factorization and least-squares projection.
//! - [`scores`]: the three stage scores, normalization and combination.
//! - [`pipeline`]: featurization, model fitting and cross-fitting.
//! - [`weights`]: grid search over the weight simplex and smoothing.
//! - [`selective`]: thresholds, routing and the cost-optimal rejection rate.
//! - [`eval`]: metrics, curves, the synthetic generator and theory checks.
//! - [`chain`]: running the reasoning chain against a chat endpoint.
//! - [`config`]: the run configuration shared with the CLI.

pub mod chain;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod pmf;
pub mod scores;
pub mod seed;
pub mod selective;
pub mod similarity;
pub mod store;
pub mod weights;

pub use error::{Error, Result};
pub use model::{Dataset, EnsembleTrace, Label, LabelSet, ModelOutput, Stage};
