use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::Parameters;
use crate::diffcore::{Tape, Tensor};
use crate::{Error, Result};

/// Bound on `|log s|` for standard-mode couplings.
pub const DEFAULT_SCALE_CLAMP: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingMode {
    /// `s = exp(clamp * tanh(raw))`
    Standard,
    /// Fixed volume change: `s = exp(softmax(raw))`, so `sum(log s) = 1`.
    Fvc,
}

/// Affine coupling: `x1 = z1`, `x2 = s(z1, c) * z2 + b(z1, c)`.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    dim: usize,
    split: usize,
    cond_width: usize,
    pub mode: CouplingMode,
    pub scale_clamp: f64,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
}

impl CouplingLayer {
    /// Nets with `hidden` layer widths; output layers start at zero so a
    /// standard-mode layer is initially the identity.
    pub fn new<R: Rng + ?Sized>(dim: usize, cond_width: usize, hidden: &[usize], mode: CouplingMode, rng: &mut R) -> Self {
        assert!(dim >= 2, "coupling needs at least two features");
        let split = dim / 2;
        let mut sizes = vec![split + cond_width];
        sizes.extend_from_slice(hidden);
        sizes.push(dim - split);
        let scale_net = Mlp::new(&sizes, true, rng);
        let shift_net = Mlp::new(&sizes, true, rng);
        Self { dim, split, cond_width, mode, scale_clamp: DEFAULT_SCALE_CLAMP, scale_net, shift_net }
    }

    pub fn from_nets(dim: usize, cond_width: usize, mode: CouplingMode, scale_net: Mlp, shift_net: Mlp) -> Result<Self> {
        let split = dim / 2;
        if split == 0 {
            return Err(Error::Contract("coupling needs at least two features".into()));
        }
        for net in [&scale_net, &shift_net] {
            if net.input_dim() != split + cond_width || net.output_dim() != dim - split {
                return Err(Error::Contract(format!(
                    "coupling nets must map {} -> {}, got {} -> {}",
                    split + cond_width,
                    dim - split,
                    net.input_dim(),
                    net.output_dim()
                )));
            }
        }
        Ok(Self { dim, split, cond_width, mode, scale_clamp: DEFAULT_SCALE_CLAMP, scale_net, shift_net })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split_index(&self) -> usize {
        self.split
    }

    pub fn is_conditional(&self) -> bool {
        self.cond_width > 0
    }

    pub fn cond_width(&self) -> usize {
        self.cond_width
    }

    /// `(log s, b)` from the pass-through half.
    fn scale_shift(&self, tape: &mut Tape, x1: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let input = match (cond, self.is_conditional()) {
            (Some(c), true) => tape.concat(&[x1, c], 1)?,
            (None, false) => x1.clone(),
            (Some(_), false) => return Err(Error::Contract("unconditional coupling given conditioning features".into())),
            (None, true) => return Err(Error::Contract("conditional coupling needs conditioning features".into())),
        };
        let raw = self.scale_net.forward(tape, &input)?;
        let log_s = match self.mode {
            CouplingMode::Standard => {
                let t = tape.tanh(&raw)?;
                tape.scale(&t, self.scale_clamp)?
            }
            CouplingMode::Fvc => tape.softmax(&raw)?,
        };
        let shift = self.shift_net.forward(tape, &input)?;
        Ok((log_s, shift))
    }

    fn positive_scale(&self, tape: &mut Tape, log_s: &Tensor) -> Result<Tensor> {
        let s = tape.exp(log_s)?;
        if s.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Invariant("coupling scale must be positive".into()));
        }
        Ok(s)
    }

    pub fn forward(&self, tape: &mut Tape, z: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let z1 = tape.cols(z, 0, self.split)?;
        let z2 = tape.cols(z, self.split, self.dim)?;
        let (log_s, shift) = self.scale_shift(tape, &z1, cond)?;
        let s = self.positive_scale(tape, &log_s)?;
        let scaled = tape.mul(&s, &z2)?;
        let x2 = tape.add(&scaled, &shift)?;
        let x = tape.concat(&[&z1, &x2], 1)?;
        let logdet = tape.sum_last(&log_s)?;
        Ok((x, logdet))
    }

    pub fn inverse(&self, tape: &mut Tape, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let x1 = tape.cols(x, 0, self.split)?;
        let x2 = tape.cols(x, self.split, self.dim)?;
        let (log_s, shift) = self.scale_shift(tape, &x1, cond)?;
        self.positive_scale(tape, &log_s)?;
        let centered = tape.sub(&x2, &shift)?;
        let neg = tape.scale(&log_s, -1.0)?;
        let inv_s = tape.exp(&neg)?;
        let z2 = tape.mul(&centered, &inv_s)?;
        Ok(tape.concat(&[&x1, &z2], 1)?)
    }
}

impl Parameters for CouplingLayer {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.scale_net.params();
        p.extend(self.shift_net.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.scale_net.params_mut();
        p.extend(self.shift_net.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_nets_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = CouplingLayer::new(4, 0, &[8], CouplingMode::Standard, &mut rng);
        let z = Tensor::new(vec![1, 4], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let (x, ld) = layer.forward(&mut Tape::new(), &z, None).unwrap();
        assert_eq!(x.data(), z.data());
        assert_eq!(ld.item(), 0.0);
    }

    #[test]
    fn fvc_with_zero_logits_has_unit_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = CouplingLayer::new(4, 0, &[8], CouplingMode::Fvc, &mut rng);
        let z = Tensor::new(vec![1, 4], vec![0.5, -1.0, 1.0, 2.0]).unwrap();
        let (x, ld) = layer.forward(&mut Tape::new(), &z, None).unwrap();
        let e = 0.5f64.exp();
        assert!((x.data()[2] - e).abs() < 1e-15 && (x.data()[3] - 2.0 * e).abs() < 1e-15);
        assert!((ld.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn conditioning_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cond = CouplingLayer::new(4, 2, &[8], CouplingMode::Standard, &mut rng);
        let plain = CouplingLayer::new(4, 0, &[8], CouplingMode::Standard, &mut rng);
        let z = Tensor::zeros(vec![1, 4]);
        let c = Tensor::zeros(vec![1, 2]);
        assert!(matches!(cond.forward(&mut Tape::new(), &z, None), Err(Error::Contract(_))));
        assert!(matches!(plain.forward(&mut Tape::new(), &z, Some(&c)), Err(Error::Contract(_))));
        assert!(cond.forward(&mut Tape::new(), &z, Some(&c)).is_ok());
    }
}
