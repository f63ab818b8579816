//! Scene-change modelling for image sequences.
//!
//! Dense optical flow feeds a four-layer Lagrangian particle grid whose
//! groups come from finite-time Lyapunov exponent segmentation. New objects
//! are gated by a coarse gist signature and captured as Fourier descriptors,
//! rig ego-motion detects background changes, and frozen particle states are
//! molded by a controlled SPH fluid.

pub mod egomotion;
pub mod filter;
pub mod flowfield;
pub mod fluidctl;
pub mod image;
pub mod lcs;
pub mod lm;
pub mod netpbm;
pub mod particlegrid;
pub mod pipeline;
pub mod scenestate;
pub mod shape;
pub mod spatial;
pub mod stats;
pub mod synth;

pub use flowfield::{compose, estimate_flow, warp, FlowError, FlowEstimate, FlowParams};
pub use image::{FlowField, Frame, Grid, ImageError};
