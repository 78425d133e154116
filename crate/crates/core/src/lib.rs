pub mod tensor;
pub mod world;
pub mod encoding;
pub mod ridge;
pub mod diffusion;
pub mod metrics;
pub mod pipeline;
pub mod harness;
