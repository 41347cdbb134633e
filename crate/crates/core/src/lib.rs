//! Online photometric calibration of automatic-gain thermal-infrared video.
//!
//! Frames are related by an affine intensity map per frame pair plus a
//! static, low-frequency additive bias over the image. The temporal part is
//! estimated robustly from pixel correspondences and chained to the first
//! frame; the bias is solved on a coarse grid from cross-cell constraints and
//! completed by Gaussian process regression.

pub mod frame;
pub mod gp;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod spatial;
pub mod synth;
pub mod temporal;
pub mod tracker;
