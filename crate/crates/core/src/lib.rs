//! Radiance-field reconstruction of street scenes from posed images and
//! sparse LiDAR sweeps, built around confidence-guided depth supervision.
//!
//! The pipeline runs in stages that mirror the CLI subcommands: a synthetic
//! scene oracle produces posed captures (`scenegen`), LiDAR sweeps are fused
//! into dense depth maps (`depthfusion`), per-view confidence maps grade the
//! fused depth (`confidence`), and a small differentiable radiance field is
//! trained against the three-term photometric/depth/smoothness objective
//! (`field`, `render`, `train`).

pub mod cli;
pub mod config;
pub mod confidence;
pub mod depthfusion;
pub mod field;
pub mod geometry;
pub mod io;
pub mod parameterization;
pub mod raster;
pub mod render;
pub mod rng;
pub mod scenegen;
pub mod train;
