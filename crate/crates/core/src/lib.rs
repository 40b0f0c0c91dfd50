pub mod checkpoint;
pub mod contact_eval;
pub mod error;
pub mod extraction;
pub mod geometry;
pub mod manifest;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod prior_model;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
