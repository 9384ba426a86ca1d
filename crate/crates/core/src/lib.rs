//! Dynamic video scenes as graphs of rigidly moving planar neural atlases.
//!
//! Each foreground object is a finite plane following a spline-refined rigid
//! trajectory and carrying a texture atlas (fixed base grids plus hash-encoded
//! neural color, opacity, flow and view-dependent fields). Rays are
//! intersected with every plane, shaded and alpha-composited front to back.
//! The whole image formation is differentiable, so the graph is fitted to a
//! video by gradient descent and can then be re-rendered, decomposed into
//! per-object layers, or edited.

pub mod autodiff;
pub mod editing;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod io;
pub mod motion;
pub mod optimize;
pub mod real;
pub mod renderer;
pub mod scenegraph;

pub use error::{Error, Result};
pub use real::Real;
