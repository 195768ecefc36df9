//! Dependency-aware sanitization for multi-turn numeric releases.
//!
//! The library noises a session's private *root* values once on a shared
//! index grid and answers every later request deterministically from the
//! cached noised roots. It ships three discrete index-space mechanisms
//! (Exponential, Bounded Laplace, Staircase), a sensitivity-weighted
//! budget allocator, eight clinical diagnostic templates, a per-root MAP
//! reconstruction adversary, and a sweep harness with deterministic
//! counter-based RNG streams.

pub mod adversary;
pub mod allocator;
pub mod controller;
pub mod error;
pub mod harness;
pub mod mechanisms;
pub mod population;
pub mod rng;
pub mod templates;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
