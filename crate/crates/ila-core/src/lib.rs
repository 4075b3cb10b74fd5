//! Numeric core for parameter-efficient ViT fine-tuning with down-sampling
//! inter-layer adapters.
//!
//! Everything in this crate is pure computation over `f64` buffers: a small
//! reverse-mode autodiff engine ([`graph`]), a Vision Transformer backbone
//! with adapter hook points ([`vit`]), the dual-branch down-sampling adapter
//! itself ([`ila`]), SGD with momentum and a cosine-warmup schedule
//! ([`optim`], [`schedule`]), and cost/similarity diagnostics ([`analysis`]).
//! IO, file formats, and the CLI live in the companion `ila-lab` crate.
//!
//! The crate is `no_std`-compatible (with `alloc`); the `std` feature only
//! enables `std::error::Error` conveniences downstream.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod ila;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
