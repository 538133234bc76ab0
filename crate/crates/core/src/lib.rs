//! Audio-visual induction network pipeline on pre-extracted features.
//!
//! The crate covers induction-vector generation (global pooling or a
//! normalized-cut foreground), adaptive tri-map pooling of similarity maps,
//! the visual infoNCE and visually weighted audio contrastive losses with
//! their analytic gradients, small trainable projectors with Adam, a
//! synthetic feature generator, and localization metrics (cIoU, AUC).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradcheck;
pub mod graphcut;
pub mod induction;
pub mod localize;
pub mod losses;
pub mod tensor;
pub mod train;
pub mod trimap;

pub use error::{Error, Result};
