//! Radar place recognition distilled from a LiDAR teacher.
//!
//! The pipeline rasterizes paired radar and LiDAR scans into BEV density
//! images, trains a LiDAR teacher with a triplet loss, then trains a radar
//! student with three distillation signals: masked input enhancement,
//! feature-distribution matching through a TransEnc branch, and
//! margin-hinged relational matching of global descriptors. Retrieval is
//! exact nearest-neighbour search scored by Recall@N.
//!
//! A seeded 2D simulator ([`synthworld`]) supplies paired scans so the whole
//! loop runs without external datasets.

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod mining;
pub mod model;
pub mod nn;
pub mod registry;
pub mod retrieval;
pub mod seed;
pub mod synthworld;
pub mod training;

pub use error::{Error, Result};
