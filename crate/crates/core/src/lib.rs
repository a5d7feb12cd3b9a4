//! Adversarial GPS pose attacks against a differentiable cooperative-perception
//! surrogate: synthetic scenes, a BEV occupancy detector with intermediate
//! fusion, six pose-attack methods and an AP evaluation harness.

pub mod attack;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod perception;
pub mod pipeline;
pub mod scene;
