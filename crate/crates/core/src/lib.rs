//! Dual-domain generative texture estimation.
//!
//! The crate couples an image-domain generator that produces pose
//! transferred views of a person with a texture-domain generator that
//! assembles a full uv texture map, exchanging features through
//! flow-guided local attention in both directions. It ships a synthetic
//! articulated-avatar dataset with exact surface/coordinate annotations,
//! the full eight-term training objective, a two-step hallucination
//! training loop, and evaluation / animation tooling.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod data;
pub mod networks;
pub mod training;

pub use autodiff::{Arr, Graph, Var};
pub use error::{Error, Result};
