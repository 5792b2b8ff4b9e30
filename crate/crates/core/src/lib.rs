//! Sketch-extrude CAD sequences: representation, compilation, checking,
//! rendering, and the latent diffusion training stack built on them.

pub mod align;
pub mod autodiff;
pub mod cad;
pub mod compiler;
pub mod diffusion;
pub mod geom;
pub mod metrics;
pub mod models;
pub mod oracles;
pub mod pipeline;
pub mod render;
