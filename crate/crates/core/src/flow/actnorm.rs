use super::{broadcast_logdet, Parameters};
use crate::diffcore::{Tape, Tensor};
use crate::{Error, Result};

/// Smallest data standard deviation used by the data-dependent initialization.
pub const STD_FLOOR: f64 = 1e-4;

/// Per-feature affine normalization, `x = (z - mu) / sigma`.
///
/// The scale is stored as `log sigma`, so positivity holds for any parameter value.
#[derive(Clone, Debug)]
pub struct ActNorm {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub initialized: bool,
}

impl ActNorm {
    /// Identity normalization awaiting data-dependent initialization.
    pub fn new(dim: usize) -> Self {
        Self { mu: Tensor::zeros(vec![dim]), log_sigma: Tensor::zeros(vec![dim]), initialized: false }
    }

    pub fn from_mu_sigma(mu: &[f64], sigma: &[f64]) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return Err(Error::Contract("actnorm mu and sigma must have equal, nonzero length".into()));
        }
        if let Some(s) = sigma.iter().find(|&&s| !(s > 0.0)) {
            return Err(Error::Invariant(format!("actnorm sigma must be positive, got {s}")));
        }
        Ok(Self {
            mu: Tensor::vector(mu.to_vec()),
            log_sigma: Tensor::vector(sigma.iter().map(|s| s.ln()).collect()),
            initialized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.numel()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.data().iter().map(|v| v.exp()).collect()
    }

    /// Returns `(x, logdet)` with `logdet = -sum(log sigma)` per sample.
    pub fn forward(&self, tape: &mut Tape, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let centered = tape.sub(z, &self.mu)?;
        let neg = tape.scale(&self.log_sigma, -1.0)?;
        let inv_sigma = tape.exp(&neg)?;
        let x = tape.mul(&centered, &inv_sigma)?;
        let total = tape.sum(&neg)?;
        let logdet = broadcast_logdet(tape, &total, z.shape()[0])?;
        Ok((x, logdet))
    }

    pub fn inverse(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let sigma = tape.exp(&self.log_sigma)?;
        let scaled = tape.mul(x, &sigma)?;
        Ok(tape.add(&scaled, &self.mu)?)
    }

    /// Data-dependent initialization from data-side values `x` (`[B, dim]`):
    /// afterwards the inverse maps this batch to zero mean and unit variance per feature.
    pub fn initialize(&mut self, x: &Tensor) -> Result<()> {
        let (n, d) = (x.rows(), x.cols());
        if d != self.dim() {
            return Err(Error::Contract(format!("actnorm init: expected {} features, got {d}", self.dim())));
        }
        let mut mu = vec![0.0; d];
        let mut log_sigma = vec![0.0; d];
        for j in 0..d {
            let mean = (0..n).map(|i| x.at2(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x.at2(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt().max(STD_FLOOR);
            log_sigma[j] = -std.ln();
            mu[j] = -mean / std;
        }
        self.mu = Tensor::vector(mu);
        self.log_sigma = Tensor::vector(log_sigma);
        self.initialized = true;
        Ok(())
    }
}

impl Parameters for ActNorm {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.mu, &self.log_sigma]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.mu, &mut self.log_sigma]
    }
}
