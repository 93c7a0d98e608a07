//! Single-class, anchor-free object detector for vessel elements in
//! high-resolution micrographs of macerated wood samples.
//!
//! The crate bundles the full pipeline: box geometry and the IoU family,
//! a small from-scratch convolution-network engine, the detector model with
//! bounded box decoding, ground-truth assignment and the training loss,
//! recall-weighted F2 evaluation, dataset tooling (including a deterministic
//! synthetic-scene generator), and the training loop behind the `vesseldet`
//! command-line interface.

pub mod assign;
pub mod cli;
pub mod config;
pub mod data;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod trainer;
