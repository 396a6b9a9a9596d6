//! Deflectometric eye tracking on a synthetic two-sphere eye.
//!
//! Two estimators share one forward model:
//!
//! * **stereo normals**: decode screen–camera correspondences, resolve the
//!   normal–depth ambiguity with a second camera, back-trace the surface
//!   normals and join the cornea and sclera centers into a gaze axis;
//! * **inverse rendering**: fit eye rotation, translation and shape so that
//!   simulated correspondences match the measured ones.
//!
//! All lengths are millimeters; angles in the public API are degrees.

pub mod bench;
pub mod decode;
pub mod error;
pub mod gaze_normals;
pub mod geometry;
pub mod imageio;
pub mod optimize;
pub mod pattern;
pub mod render;
pub mod rng;
pub mod scene;
pub mod stereo;

pub use error::{Error, Result};
