//! Slot attention with a bootstrapped top-down pathway.
//!
//! A first, purely bottom-up slot-attention pass produces slots and attention
//! maps. Each slot is snapped to its nearest entry in a learned codebook
//! ("what") and paired with its attention row ("where"); together they build a
//! per-slot modulation map that re-scales the value features during a second
//! slot-attention pass with the same weights and the same initial slots. An
//! autoregressive transformer decoder reconstructs the input features from the
//! modulated slots, and its cross-attention gives the predicted object masks.
//!
//! Everything runs on a small tape-based autodiff layer ([`autodiff`]) and is
//! trained on procedurally generated multi-object feature grids ([`data`]).

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod flops;
pub mod image;
pub mod metrics;
pub mod model;
pub mod pathway;
pub mod slot_attention;
pub mod train;

pub use error::{Error, Result};
