//! Joint reconstruction, registration and super-resolution of dynamic MRI
//! series from undersampled k-space.
//!
//! The crate solves a variational model in which a single motion-free image
//! `u`, one deformation per time frame, and per-frame auxiliary images are
//! estimated together by alternating minimisation. A sequential pipeline
//! (frame-wise compressed-sensing reconstruction, then registration, then
//! super-resolution) is included as a baseline, along with a synthetic
//! phantom generator and a small command-line front end.

pub mod cli;
pub mod grid;
pub mod metrics;
pub mod operators;
pub mod phantom;
pub mod registration;
pub mod solver;
pub mod tvsolvers;

#[cfg(doctest)]
mod book;
