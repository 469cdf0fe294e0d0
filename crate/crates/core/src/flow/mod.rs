//! Invertible and injective building blocks with exact inverses and
//! analytic log-determinants.
//!
//! Every layer works on batches `[B, features]` and returns its log-det
//! contribution per sample (`[B]`). Forward is the generative direction
//! (latent to data).

mod actnorm;
mod block;
mod coupling;
mod linear;
mod mlp;

pub use actnorm::{ActNorm, STD_FLOOR};
pub use block::{LinearLayer, Resize, RevnetBlock, SkipBlock, SKIP_EPS};
pub use coupling::{CouplingLayer, CouplingMode, DEFAULT_SCALE_CLAMP};
pub use linear::{InjectiveLinear, LuLinear};
pub use mlp::{CondNet, Dense, Mlp};

use crate::diffcore::{Tape, Tensor};
use crate::Result;

/// Trainable tensors of a component, in declaration order.
pub trait Parameters {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

/// Repeat a scalar log-det term for every sample of a batch.
pub(crate) fn broadcast_logdet(tape: &mut Tape, total: &Tensor, batch: usize) -> Result<Tensor> {
    Ok(tape.add(&Tensor::zeros(vec![batch]), total)?)
}
