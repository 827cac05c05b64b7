//! Weakly supervised point-cloud semantic segmentation from cloud-level labels.

pub mod error;
pub mod cloudstore;
pub mod crf;
pub mod kpnet;
pub mod mprm;
pub mod numerics;
pub mod pipeline;
pub mod weaksup;

pub use error::{Error, Result};
