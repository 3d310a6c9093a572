//! Clarification-request policies for the CoDraw drawing game.
//!
//! In CoDraw an instruction giver describes a hidden clipart scene and an
//! instruction follower reconstructs it from a gallery of 28 cliparts,
//! occasionally asking instruction clarification requests (iCRs). This crate
//! provides the full pipeline for learning and analysing iCR policies:
//!
//! * [`corpus`] — loading the CoDraw dialogues and the iCR annotation,
//!   alignment, split handling and per-turn record construction;
//! * [`game_state`] — the symbolic clipart/gallery/scene representation and
//!   its feature extraction;
//! * [`action_labeler`] — gold action labels derived by diffing consecutive
//!   gallery states;
//! * [`encoders`] — dialogue windows, frozen text embedders and scene
//!   rendering/backbones;
//! * [`model`] — the gallery embedder, Transformer-decoder contextualiser and
//!   the classifier heads for the Overhearer / Action-Taker model family;
//! * [`training`] — multi-task optimisation with early stopping and the
//!   what-task fine-tuning protocol;
//! * [`evaluation`] — average precision and F1 metrics, per-action
//!   breakdowns and comparison reports;
//! * [`certainty`] — classification-margin analysis of action predictions,
//!   including the two-sample Kolmogorov-Smirnov test;
//! * [`cli`] — the `icr-policy` command line entry points.
//!
//! The runnable programs under `examples/` exercise each capability on the
//! fixture corpus shipped with the crate; no downloads are required for any
//! of them.

pub mod action_labeler;
pub mod certainty;
pub mod cli;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod game_state;
pub mod model;
pub mod training;

pub use error::{Error, Result};

/// Number of cliparts in every CoDraw gallery.
pub const GALLERY_SIZE: usize = 28;

/// Number of clipart classes in the inventory (person classes collapsed).
pub const INVENTORY_SIZE: usize = 58;

/// Canvas width in scene units.
pub const CANVAS_WIDTH: f32 = 500.0;

/// Canvas height in scene units.
pub const CANVAS_HEIGHT: f32 = 400.0;
