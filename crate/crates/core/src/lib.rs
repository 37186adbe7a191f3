pub mod conditioning;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod morphology;
pub mod outpaint;
pub mod pipeline;
pub mod nn;
pub mod exec;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::ExecMode;
pub use tensor::{Real, Tensor4};
