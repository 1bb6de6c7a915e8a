//! Abstract-reasoning puzzles solved as image-to-image translation with a
//! small vision transformer, test-time training and multi-view voting.

pub mod data;
pub mod geometry;
pub mod nn;
pub mod vit;
pub mod infer;
pub mod train;
pub mod synthetic;
pub mod checkpoint;
pub mod config;
