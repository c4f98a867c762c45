//! Quantification of graft detachment in radial anterior-segment OCT scans.
//!
//! The pipeline has four stages:
//!
//! 1. **Locate** the two scleral spurs in every radial B-scan with a small
//!    convolutional regressor ([`locator`]).
//! 2. **Refine** the 32 spur estimates of a scan by fitting an en-face ellipse
//!    with a first-harmonic depth model and re-intersecting every slice
//!    ([`ellipse`]).
//! 3. **Segment** detached graft in spur-anchored half crops with a U-Net
//!    ([`segment`]).
//! 4. **Measure** skeleton length, horizontal projections, Dice and
//!    Bland-Altman agreement, and assemble polar detachment maps
//!    ([`biomarkers`]).
//!
//! Training and evaluation run on procedurally generated scans with exact
//! ground truth ([`phantom`]). The network stack lives in [`nn`].

pub mod biomarkers;
pub mod ellipse;
pub mod error;
pub mod imagecore;
pub mod locator;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod preset;
pub mod segment;
pub mod spur;
pub mod training;

pub use error::{Error, Result};
pub use preset::{Frame, Geometry, Preset};
