//! Extract, optimize and regenerate: a desk-scale video-motion pipeline.
//!
//! The crate is organised bottom-up:
//!
//! - [`motion`]: parametric motion sequences, the articulated stand-in body
//!   model, motion strength and temporal resampling.
//! - [`perturb`]: forward-noising and the shuffle / drop-repeat corruptions
//!   used to train the motion prior.
//! - [`pmp`]: the parameterized motion prior, a small transformer with
//!   hand-written backpropagation.
//! - [`geometry`]: contour tracing, the 21-point 2.5D object representation,
//!   pinhole projection, z-buffered part-mask splatting and condition channels.
//! - [`simgen`]: the video-generator seam plus a synthetic generator.
//! - [`pipeline`]: the three-stage orchestrator and evaluation metrics.
//! - [`longvideo`]: long-motion extension and overlapped clip stitching.

pub mod geometry;
pub mod grid;
pub mod io;
pub mod longvideo;
pub mod motion;
pub mod perturb;
pub mod pipeline;
pub mod pmp;
pub mod simgen;

pub mod rng;
