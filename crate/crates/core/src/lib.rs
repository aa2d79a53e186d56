//! Self-supervised pre-training and layer-selective fine-tuning of small
//! vision transformers.

pub mod augment;
pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod fusion;
mod heads;
pub mod metrics;
pub mod ops;
pub mod restorative;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
