//! Token-based feature refinement for frozen vision transformers and a
//! mask-classification unsupervised domain-adaptation trainer, exercised on
//! a synthetic two-domain segmentation benchmark.

pub mod adapt;
pub mod backbone;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod head;
pub mod image;
pub mod kv;
pub mod model;
pub mod numeric;
pub mod rein;
pub mod synthdata;
pub mod verify;

pub use error::{Error, Result};
