pub mod classifier;
pub mod dataset;
pub mod diffusion;
pub mod explain;
pub mod harness;
pub mod imaging;
pub mod nngraph;
