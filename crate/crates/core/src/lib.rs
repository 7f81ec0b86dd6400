//! Influence-balanced loss for class-imbalanced classification.
//!
//! A two-phase training scheme: train normally with cross-entropy, then
//! fine-tune with each sample's loss divided by its influence factor
//! `‖f − y‖₁ · ‖h‖₁` (the L1 norm of its output-layer gradient) and scaled
//! by an inverse-frequency class weight. Around that sit a hand-written MLP,
//! focal and class-balanced baselines, imbalanced data synthesis, and exact
//! influence oracles for checking the factor on small convex models.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
