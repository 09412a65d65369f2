//! Features from unsupervised gradients.
//!
//! A frozen encoder is probed with self-supervised losses; the per-sample
//! gradient of one hidden linear layer is randomly projected, L2-normalized
//! and concatenated with the embedding, then optionally reduced with PCA.
//! The resulting vectors are evaluated with kNN classification, clustering,
//! linear probing, retrieval and retrieval-based dense segmentation.
//!
//! Module map:
//!
//! - [`autodiff`]: tensors and a single-use reverse-mode tape.
//! - [`backbone`]: compact ViT encoder, projection heads, gradient harvesting.
//! - [`augment`]: seeded view generation.
//! - [`objectives`]: KL, DINO, SimCLR and dense SimCLR losses.
//! - [`features`]: flatten, random projection, fusion, PCA, feature banks.
//! - [`evalkit`]: kNN, few-shot, accuracy, CKA, k-means, Hungarian, probe, mAP.
//! - [`segmem`]: patch memory bank, IVF search, label propagation, mIoU.
//! - [`store`], [`config`], [`synth`], [`pipeline`], [`report`]: persistence,
//!   run configuration, synthetic data and the end-to-end commands.

pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod image;
pub mod objectives;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod segmem;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
