//! Desk-scale differentiable architecture search on long-tailed image data.
//!
//! The crate implements three search modes over a shared weight-sharing
//! supernet — softmax-gated search, sigmoid-gated search with a zero-one
//! polarization loss, and a self-supervised variant whose search loss is the
//! Barlow Twins redundancy-reduction objective — together with the
//! long-tailed dataset tooling and evaluation metrics needed to study them.
//!
//! Everything runs on a from-scratch reverse-mode autodiff engine
//! ([`tensor`]) whose every primitive is checked against central finite
//! differences.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod genotype;
pub mod losses;
pub mod optim;
pub mod search;
pub mod search_space;
pub mod seeding;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
