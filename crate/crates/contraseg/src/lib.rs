//! Weakly supervised semantic segmentation sandbox.
//!
//! Trains a small convolutional classifier on synthetic multi-object scenes
//! using image-level labels only, sharpens its class activation maps with
//! image / pixel / region level contrastive losses, exports soft pseudo
//! masks, and then trains a segmentation decoder against those masks with an
//! optional boundary-contrast refinement term. Everything runs on the CPU on
//! top of a minimal reverse-mode tensor engine, so the whole pipeline is
//! deterministic and testable end to end.

pub mod boundary;
pub mod cli;
pub mod encoder;
pub mod losses;
pub mod pipeline;
pub mod tensor;
