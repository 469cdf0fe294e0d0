use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Parameters;
use crate::diffcore::{Tape, Tensor};
use crate::Result;

#[derive(Clone, Debug)]
pub struct Dense {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Dense {
    /// Normal(0, gain^2 / in) weights and zero bias; `gain = 0` gives an all-zero layer.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let weight = if gain == 0.0 {
            Tensor::zeros(vec![input, output])
        } else {
            let normal = Normal::new(0.0, gain / (input as f64).sqrt()).expect("valid std");
            let data = (0..input * output).map(|_| normal.sample(rng)).collect();
            Tensor::new(vec![input, output], data).expect("finite weights")
        };
        Self { weight, bias: Tensor::zeros(vec![output]) }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let h = tape.matmul(x, &self.weight)?;
        Ok(tape.add(&h, &self.bias)?)
    }
}

/// Fully connected network with `tanh` between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`. When `zero_output` is set the last layer
    /// starts at zero, so the network initially outputs zeros.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], zero_output: bool, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last && zero_output { 0.0 } else { 1.0 };
                Dense::new(w[0], w[1], gain, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &h)?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(&h)?;
            }
        }
        Ok(h)
    }
}

impl Parameters for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

/// Conditioning network `c(y)`: two dense layers with a `tanh` in between.
#[derive(Clone, Debug)]
pub struct CondNet {
    pub net: Mlp,
}

impl CondNet {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self { net: Mlp::new(&[input, hidden, output], false, rng) }
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn forward(&self, tape: &mut Tape, y: &Tensor) -> Result<Tensor> {
        self.net.forward(tape, y)
    }
}

impl Parameters for CondNet {
    fn params(&self) -> Vec<&Tensor> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }
}
