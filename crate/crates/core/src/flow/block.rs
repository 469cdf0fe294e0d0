use super::actnorm::ActNorm;
use super::coupling::CouplingLayer;
use super::linear::{InjectiveLinear, LuLinear};
use super::mlp::CondNet;
use super::{broadcast_logdet, Parameters};
use crate::diffcore::{Tape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub enum LinearLayer {
    Lu(LuLinear),
    Injective(InjectiveLinear),
}

impl LinearLayer {
    pub fn in_dim(&self) -> usize {
        match self {
            LinearLayer::Lu(l) => l.dim(),
            LinearLayer::Injective(l) => l.c_in(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LinearLayer::Lu(l) => l.dim(),
            LinearLayer::Injective(l) => l.c_out(),
        }
    }

    /// Injective layers report `0.5 log det(w^T w)` as their log-det contribution.
    pub fn forward(&self, tape: &mut Tape, z: &Tensor) -> Result<(Tensor, Tensor)> {
        match self {
            LinearLayer::Lu(l) => l.forward(tape, z),
            LinearLayer::Injective(l) => l.forward(tape, z),
        }
    }

    /// Exact inverse, or the pseudo-inverse for injective layers.
    pub fn inverse(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        match self {
            LinearLayer::Lu(l) => l.inverse(tape, x),
            LinearLayer::Injective(l) => l.pinv(tape, x),
        }
    }
}

impl Parameters for LinearLayer {
    fn params(&self) -> Vec<&Tensor> {
        match self {
            LinearLayer::Lu(l) => l.params(),
            LinearLayer::Injective(l) => l.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LinearLayer::Lu(l) => l.params_mut(),
            LinearLayer::Injective(l) => l.params_mut(),
        }
    }
}

/// Revnet block: actnorm, then a 1x1 linear layer, then an affine coupling.
///
/// Any of actnorm and coupling may be absent (an expansion layer is a block
/// holding only an injective linear layer). A conditional coupling reads its
/// features from the block's own conditioning network.
#[derive(Clone, Debug)]
pub struct RevnetBlock {
    pub actnorm: Option<ActNorm>,
    pub linear: LinearLayer,
    pub coupling: Option<CouplingLayer>,
    pub cond_net: Option<CondNet>,
}

impl RevnetBlock {
    pub fn new(
        actnorm: Option<ActNorm>,
        linear: LinearLayer,
        coupling: Option<CouplingLayer>,
        cond_net: Option<CondNet>,
    ) -> Result<Self> {
        if let Some(a) = &actnorm {
            if a.dim() != linear.in_dim() {
                return Err(Error::Contract(format!("actnorm width {} != linear input {}", a.dim(), linear.in_dim())));
            }
        }
        match (&coupling, &cond_net) {
            (Some(c), _) if c.dim() != linear.out_dim() => {
                return Err(Error::Contract(format!("coupling width {} != linear output {}", c.dim(), linear.out_dim())))
            }
            (Some(c), Some(n)) if c.cond_width() != n.output_dim() => {
                return Err(Error::Contract(format!(
                    "conditioning network emits {} features, coupling expects {}",
                    n.output_dim(),
                    c.cond_width()
                )))
            }
            (Some(c), None) if c.is_conditional() => {
                return Err(Error::Contract("conditional coupling without a conditioning network".into()))
            }
            (Some(c), Some(_)) if !c.is_conditional() => {
                return Err(Error::Contract("conditioning network attached to an unconditional coupling".into()))
            }
            (None, Some(_)) => return Err(Error::Contract("conditioning network without a coupling".into())),
            _ => {}
        }
        Ok(Self { actnorm, linear, coupling, cond_net })
    }

    /// Identity block on `dim` features.
    pub fn identity(dim: usize) -> Self {
        Self { actnorm: Some(ActNorm::new(dim)), linear: LinearLayer::Lu(LuLinear::identity(dim)), coupling: None, cond_net: None }
    }

    pub fn in_dim(&self) -> usize {
        self.linear.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn is_injective(&self) -> bool {
        matches!(self.linear, LinearLayer::Injective(_))
    }

    pub fn is_conditional(&self) -> bool {
        self.cond_net.is_some()
    }

    /// Conditioning features `c(y)`, or `None` for unconditional blocks.
    pub fn features(&self, tape: &mut Tape, y: Option<&Tensor>) -> Result<Option<Tensor>> {
        match (&self.cond_net, y) {
            (Some(net), Some(y)) => Ok(Some(net.forward(tape, y)?)),
            (Some(_), None) => Err(Error::Contract("conditional block evaluated without conditioning input".into())),
            (None, _) => Ok(None),
        }
    }

    pub fn forward_with(&self, tape: &mut Tape, z: &Tensor, features: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let batch = z.shape()[0];
        let mut logdet = broadcast_logdet(tape, &Tensor::scalar(0.0), batch)?;
        let mut h = z.clone();
        if let Some(a) = &self.actnorm {
            let (x, ld) = a.forward(tape, &h)?;
            h = x;
            logdet = tape.add(&logdet, &ld)?;
        }
        let (x, ld) = self.linear.forward(tape, &h)?;
        h = x;
        logdet = tape.add(&logdet, &ld)?;
        if let Some(c) = &self.coupling {
            let (x, ld) = c.forward(tape, &h, features)?;
            h = x;
            logdet = tape.add(&logdet, &ld)?;
        }
        Ok((h, logdet))
    }

    pub fn inverse_with(&self, tape: &mut Tape, x: &Tensor, features: Option<&Tensor>) -> Result<Tensor> {
        let mut h = x.clone();
        if let Some(c) = &self.coupling {
            h = c.inverse(tape, &h, features)?;
        }
        h = self.linear.inverse(tape, &h)?;
        if let Some(a) = &self.actnorm {
            h = a.inverse(tape, &h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, z: &Tensor, y: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let f = self.features(tape, y)?;
        self.forward_with(tape, z, f.as_ref())
    }

    pub fn inverse(&self, tape: &mut Tape, x: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
        let f = self.features(tape, y)?;
        self.inverse_with(tape, x, f.as_ref())
    }

    /// Initialize the actnorm from output-side data `x`, returning the
    /// input-side values of the same batch.
    pub fn initialize_actnorm(&mut self, x: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.features(&mut tape, y)?;
        let mut h = x.detach();
        if let Some(c) = &self.coupling {
            h = c.inverse(&mut tape, &h, f.as_ref())?;
        }
        h = self.linear.inverse(&mut tape, &h)?;
        if let Some(a) = &mut self.actnorm {
            a.initialize(&h)?;
            h = a.inverse(&mut tape, &h)?;
        }
        Ok(h)
    }
}

impl Parameters for RevnetBlock {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        if let Some(a) = &self.actnorm {
            p.extend(a.params());
        }
        p.extend(self.linear.params());
        if let Some(c) = &self.coupling {
            p.extend(c.params());
        }
        if let Some(n) = &self.cond_net {
            p.extend(n.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        if let Some(a) = &mut self.actnorm {
            p.extend(a.params_mut());
        }
        p.extend(self.linear.params_mut());
        if let Some(c) = &mut self.coupling {
            p.extend(c.params_mut());
        }
        if let Some(n) = &mut self.cond_net {
            p.extend(n.params_mut());
        }
        p
    }
}

/// Maps a measurement vector onto a feature width: identity when the widths
/// agree, cyclic repetition when the measurement is shorter, mean pooling of
/// contiguous groups when it is longer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resize {
    pub from: usize,
    pub to: usize,
}

impl Resize {
    pub fn apply(&self, y: &Tensor) -> Result<Tensor> {
        if y.rank() != 2 || y.cols() != self.from {
            return Err(Error::Contract(format!("resize expects [B, {}], got {:?}", self.from, y.shape())));
        }
        let (m, f) = (self.from, self.to);
        let mut out = Vec::with_capacity(y.rows() * f);
        for b in 0..y.rows() {
            let row = y.row(b);
            if m == f {
                out.extend_from_slice(row);
            } else if m < f {
                out.extend((0..f).map(|i| row[i % m]));
            } else {
                for j in 0..f {
                    let (lo, hi) = (j * m / f, (j + 1) * m / f);
                    out.push(row[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
                }
            }
        }
        Ok(Tensor::new(vec![y.rows(), f], out)?)
    }
}

/// Lower bound on the skip weight and on its complement.
pub const SKIP_EPS: f64 = 1e-3;

/// Skip connection around a revnet block:
/// `x = (1 - S) * rev(z; y) + S * resize(y)` with `S` in `[eps, 1 - eps]`.
#[derive(Clone, Debug)]
pub struct SkipBlock {
    pub inner: RevnetBlock,
    /// Unconstrained per-feature parameter; `S = eps + (1 - 2 eps) * sigmoid(s_raw)`.
    pub s_raw: Tensor,
    pub resize: Resize,
}

impl SkipBlock {
    /// Skip weights start at `S = 0.5`.
    pub fn new(inner: RevnetBlock, measurement_dim: usize) -> Self {
        let f = inner.out_dim();
        Self { inner, s_raw: Tensor::zeros(vec![f]), resize: Resize { from: measurement_dim, to: f } }
    }

    pub fn weights(&self, tape: &mut Tape) -> Result<Tensor> {
        let s = tape.sigmoid(&self.s_raw)?;
        let s = tape.scale(&s, 1.0 - 2.0 * SKIP_EPS)?;
        Ok(tape.add_scalar(&s, SKIP_EPS)?)
    }

    pub fn skip_values(&self) -> Vec<f64> {
        self.weights(&mut Tape::new()).expect("finite skip weights").to_vec()
    }

    pub fn forward_with(&self, tape: &mut Tape, z: &Tensor, y: &Tensor, features: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (r, inner_ld) = self.inner.forward_with(tape, z, features)?;
        let s = self.weights(tape)?;
        let neg = tape.scale(&s, -1.0)?;
        let keep = tape.add_scalar(&neg, 1.0)?;
        let ry = self.resize.apply(y)?;
        let a = tape.mul(&r, &keep)?;
        let b = tape.mul(&ry, &s)?;
        let x = tape.add(&a, &b)?;
        let log_keep = tape.log(&keep)?;
        let total = tape.sum(&log_keep)?;
        let ld = tape.add(&inner_ld, &total)?;
        Ok((x, ld))
    }

    pub fn inverse_with(&self, tape: &mut Tape, x: &Tensor, y: &Tensor, features: Option<&Tensor>) -> Result<Tensor> {
        let s = self.weights(tape)?;
        let neg = tape.scale(&s, -1.0)?;
        let keep = tape.add_scalar(&neg, 1.0)?;
        let ry = self.resize.apply(y)?;
        let b = tape.mul(&ry, &s)?;
        let r = tape.sub(x, &b)?;
        let r = tape.div(&r, &keep)?;
        self.inner.inverse_with(tape, &r, features)
    }

    pub fn forward(&self, tape: &mut Tape, z: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.inner.features(tape, Some(y))?;
        self.forward_with(tape, z, y, f.as_ref())
    }

    pub fn inverse(&self, tape: &mut Tape, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let f = self.inner.features(tape, Some(y))?;
        self.inverse_with(tape, x, y, f.as_ref())
    }
}

impl Parameters for SkipBlock {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.inner.params();
        p.push(&self.s_raw);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.inner.params_mut();
        p.push(&mut self.s_raw);
        p
    }
}
