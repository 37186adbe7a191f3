//! Minimal neural-network toolkit: parameters, a differentiation tape,
//! standard layers and the Adam optimizer.

mod adam;
mod layers;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use layers::{AttnBlock, Conv2d, ConvTranspose2x2, Linear, ResBlock};
pub use params::{Grads, Init, ParamBuilder, ParamId, ParamStore};
pub use tape::{Backward, Tape, Var};

use crate::tensor::{Real, Tensor4};

/// Sinusoidal embedding of integer timesteps, shape (B, dim, 1, 1).
pub fn timestep_embedding<T: Real>(steps: &[usize], dim: usize) -> Tensor4<T> {
    let half = dim / 2;
    Tensor4::from_fn([steps.len(), dim, 1, 1], |[b, c, _, _]| {
        let i = c % half.max(1);
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = steps[b] as f64 * freq;
        T::from_f64_lossy(if c < half { arg.sin() } else { arg.cos() })
    })
}

#[cfg(test)]
mod gradcheck;
