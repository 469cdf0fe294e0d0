//! Conditional injective flow `f(z; y) = g(h(z; y); y)`: a bijective flow `h`
//! on the latent space followed by an injective expander `g`.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, DiffError, Tape, Tensor};
use crate::flow::{
    ActNorm, CondNet, CouplingLayer, CouplingMode, InjectiveLinear, LinearLayer, LuLinear, Parameters, RevnetBlock,
    SkipBlock, DEFAULT_SCALE_CLAMP,
};
use crate::{Error, Result};

/// Layer recipe. The injective part visits `g_widths` in order, starting at
/// the latent width and ending at the data width; every step up is an
/// injective layer followed by `g_blocks_per_width` bijective blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub latent_dim: usize,
    pub data_dim: usize,
    /// Width of the conditioning input fed to every conditioning network.
    pub cond_dim: usize,
    pub g_widths: Vec<usize>,
    pub g_blocks_per_width: usize,
    /// Injective steps are full revnet blocks rather than bare expansion layers.
    pub injective_blocks: bool,
    pub g_actnorm: bool,
    pub h_blocks: usize,
    pub h_actnorm: bool,
    pub h_mode: CouplingMode,
    /// Wrap every block of the injective part in a skip connection.
    pub skip: bool,
    /// Hidden widths of the coupling scale and shift networks.
    pub hidden: Vec<usize>,
    pub cond_hidden: usize,
    /// Features produced by each conditioning network; 0 makes the model unconditional.
    pub cond_features: usize,
    pub scale_clamp: f64,
}

impl Architecture {
    /// Expansion layer followed by bijective blocks, the layout used for
    /// manifold-valued data with a low-dimensional condition.
    pub fn expander(latent_dim: usize, data_dim: usize, cond_dim: usize, g_blocks: usize, h_blocks: usize) -> Self {
        let g_widths = if latent_dim == data_dim { vec![latent_dim] } else { vec![latent_dim, data_dim] };
        Self {
            latent_dim,
            data_dim,
            cond_dim,
            g_widths,
            g_blocks_per_width: g_blocks,
            injective_blocks: false,
            g_actnorm: false,
            h_blocks,
            h_actnorm: true,
            h_mode: CouplingMode::Fvc,
            skip: false,
            hidden: vec![64, 64],
            cond_hidden: 32,
            cond_features: 8,
            scale_clamp: DEFAULT_SCALE_CLAMP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 || self.latent_dim > self.data_dim {
            return bad(format!("need 0 < latent_dim <= data_dim, got {} and {}", self.latent_dim, self.data_dim));
        }
        if self.g_widths.first() != Some(&self.latent_dim) || self.g_widths.last() != Some(&self.data_dim) {
            return bad(format!(
                "g_widths must run from {} to {}, got {:?}",
                self.latent_dim, self.data_dim, self.g_widths
            ));
        }
        if self.g_widths.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("g_widths must strictly increase, got {:?}", self.g_widths));
        }
        let needs_coupling_g = self.g_blocks_per_width > 0 || (self.injective_blocks && self.g_widths.len() > 1);
        if needs_coupling_g && self.g_widths[1.min(self.g_widths.len() - 1)..].iter().any(|&w| w < 2) {
            return bad("couplings need at least two features".into());
        }
        if self.h_blocks > 0 && self.latent_dim < 2 {
            return bad("bijective part needs latent_dim >= 2".into());
        }
        if self.cond_dim == 0 {
            return bad("cond_dim must be positive".into());
        }
        if self.cond_features > 0 && self.cond_hidden == 0 {
            return bad("conditional model needs cond_hidden > 0".into());
        }
        if !(self.scale_clamp > 0.0 && self.scale_clamp.is_finite()) {
            return bad(format!("scale_clamp must be positive, got {}", self.scale_clamp));
        }
        Ok(())
    }
}

/// Standard Gaussian on the latent space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentDistribution {
    pub dim: usize,
}

impl LatentDistribution {
    /// `-(d/2) log(2 pi) - |z|^2 / 2` per row.
    pub fn log_density(&self, tape: &mut Tape, z: &Tensor) -> Result<Tensor> {
        let sq = tape.mul(z, z)?;
        let sq = tape.sum_last(&sq)?;
        let half = tape.scale(&sq, -0.5)?;
        let c = -0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(tape.add_scalar(&half, c)?)
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Tensor {
        let data = (0..count * self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(vec![count, self.dim], data).expect("finite normal draws")
    }
}

/// One layer of the injective part.
#[derive(Clone, Debug)]
pub enum GLayer {
    Block(RevnetBlock),
    Skip(SkipBlock),
}

impl GLayer {
    pub fn block(&self) -> &RevnetBlock {
        match self {
            GLayer::Block(b) => b,
            GLayer::Skip(s) => &s.inner,
        }
    }

    pub fn block_mut(&mut self) -> &mut RevnetBlock {
        match self {
            GLayer::Block(b) => b,
            GLayer::Skip(s) => &mut s.inner,
        }
    }

    fn forward_with(&self, tape: &mut Tape, z: &Tensor, y: &Tensor, f: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        match self {
            GLayer::Block(b) => b.forward_with(tape, z, f),
            GLayer::Skip(s) => s.forward_with(tape, z, y, f),
        }
    }

    fn inverse_with(&self, tape: &mut Tape, x: &Tensor, y: &Tensor, f: Option<&Tensor>) -> Result<Tensor> {
        match self {
            GLayer::Block(b) => b.inverse_with(tape, x, f),
            GLayer::Skip(s) => s.inverse_with(tape, x, y, f),
        }
    }
}

impl Parameters for GLayer {
    fn params(&self) -> Vec<&Tensor> {
        match self {
            GLayer::Block(b) => b.params(),
            GLayer::Skip(s) => s.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            GLayer::Block(b) => b.params_mut(),
            GLayer::Skip(s) => s.params_mut(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CTrumpet {
    arch: Architecture,
    pub g_layers: Vec<GLayer>,
    pub h_layers: Vec<RevnetBlock>,
}

struct Builder<'a, R: Rng + ?Sized> {
    arch: &'a Architecture,
    rng: &'a mut R,
    identity: bool,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn cond_net(&mut self) -> Option<CondNet> {
        let a = self.arch;
        (a.cond_features > 0).then(|| CondNet::new(a.cond_dim, a.cond_hidden, a.cond_features, self.rng))
    }

    fn coupling(&mut self, dim: usize, mode: CouplingMode) -> CouplingLayer {
        let mut c = CouplingLayer::new(dim, self.arch.cond_features, &self.arch.hidden, mode, self.rng);
        c.scale_clamp = self.arch.scale_clamp;
        c
    }

    fn bijective(&mut self, dim: usize, actnorm: bool, mode: CouplingMode) -> Result<RevnetBlock> {
        let linear = if self.identity { LuLinear::identity(dim) } else { LuLinear::random(dim, self.rng) };
        let coupling = self.coupling(dim, mode);
        let cond = self.cond_net();
        RevnetBlock::new(actnorm.then(|| ActNorm::new(dim)), LinearLayer::Lu(linear), Some(coupling), cond)
    }

    fn injective(&mut self, c_in: usize, c_out: usize) -> Result<RevnetBlock> {
        let linear = if self.identity {
            InjectiveLinear::identity(c_in, c_out)
        } else {
            InjectiveLinear::random(c_in, c_out, self.rng)
        };
        let actnorm = (self.arch.g_actnorm && self.arch.injective_blocks).then(|| ActNorm::new(c_in));
        if self.arch.injective_blocks {
            let coupling = self.coupling(c_out, CouplingMode::Standard);
            let cond = self.cond_net();
            RevnetBlock::new(actnorm, LinearLayer::Injective(linear), Some(coupling), cond)
        } else {
            RevnetBlock::new(None, LinearLayer::Injective(linear), None, None)
        }
    }

    fn g_layer(&mut self, block: RevnetBlock) -> GLayer {
        if self.arch.skip {
            GLayer::Skip(SkipBlock::new(block, self.arch.cond_dim))
        } else {
            GLayer::Block(block)
        }
    }
}

impl CTrumpet {
    /// Randomly initialized model: rotation-initialized linear layers and
    /// couplings whose output layers start at zero.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        Self::build(arch, rng, false)
    }

    /// Model whose linear layers are identities (zero padding for injective
    /// ones) and whose coupling networks output zeros.
    pub fn identity(arch: Architecture) -> Result<Self> {
        Self::build(arch, &mut StdRng::seed_from_u64(0), true)
    }

    fn build<R: Rng + ?Sized>(arch: Architecture, rng: &mut R, identity: bool) -> Result<Self> {
        arch.validate()?;
        let mut b = Builder { arch: &arch, rng, identity };
        let mut g_layers = Vec::new();
        let widths = arch.g_widths.clone();
        if widths.len() == 1 {
            for _ in 0..arch.g_blocks_per_width {
                let blk = b.bijective(widths[0], arch.g_actnorm, CouplingMode::Standard)?;
                g_layers.push(b.g_layer(blk));
            }
        }
        for w in widths.windows(2) {
            let blk = b.injective(w[0], w[1])?;
            g_layers.push(b.g_layer(blk));
            for _ in 0..arch.g_blocks_per_width {
                let blk = b.bijective(w[1], arch.g_actnorm, CouplingMode::Standard)?;
                g_layers.push(b.g_layer(blk));
            }
        }
        let mut h_layers = Vec::with_capacity(arch.h_blocks);
        for _ in 0..arch.h_blocks {
            h_layers.push(b.bijective(arch.latent_dim, arch.h_actnorm, arch.h_mode)?);
        }
        Ok(Self { arch, g_layers, h_layers })
    }

    /// Assemble a model from explicit layers; dimensions must chain.
    pub fn from_layers(arch: Architecture, g_layers: Vec<GLayer>, h_layers: Vec<RevnetBlock>) -> Result<Self> {
        let mut width = arch.latent_dim;
        for b in &h_layers {
            if b.in_dim() != width || b.out_dim() != width {
                return Err(Error::Contract(format!("bijective block {}->{} on width {width}", b.in_dim(), b.out_dim())));
            }
            if b.is_injective() {
                return Err(Error::Contract("injective block in the bijective part".into()));
            }
            if let Some(c) = &b.coupling {
                if c.mode != arch.h_mode {
                    return Err(Error::Contract("coupling mode differs from the declared h_mode".into()));
                }
            }
        }
        for l in &g_layers {
            let b = l.block();
            if b.in_dim() != width {
                return Err(Error::Contract(format!("g layer expects width {}, chain is at {width}", b.in_dim())));
            }
            width = b.out_dim();
        }
        if width != arch.data_dim {
            return Err(Error::Contract(format!("g ends at width {width}, data width is {}", arch.data_dim)));
        }
        Ok(Self { arch, g_layers, h_layers })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.arch.cond_dim
    }

    pub fn latent(&self) -> LatentDistribution {
        LatentDistribution { dim: self.arch.latent_dim }
    }

    fn check(&self, t: &Tensor, width: usize, what: &str) -> Result<()> {
        if t.rank() != 2 || t.cols() != width {
            return Err(Error::Contract(format!("{what} must be [B, {width}], got {:?}", t.shape())));
        }
        Ok(())
    }

    fn check_cond(&self, y: &Tensor, batch: usize) -> Result<()> {
        self.check(y, self.arch.cond_dim, "conditioning input")?;
        if y.rows() != batch {
            return Err(Error::Contract(format!("{} conditioning rows for a batch of {batch}", y.rows())));
        }
        Ok(())
    }

    /// Conditioning features of every g layer.
    pub fn g_features(&self, tape: &mut Tape, y: &Tensor) -> Result<Vec<Option<Tensor>>> {
        self.g_layers.iter().map(|l| l.block().features(tape, Some(y))).collect()
    }

    /// Conditioning features of every h block.
    pub fn h_features(&self, tape: &mut Tape, y: &Tensor) -> Result<Vec<Option<Tensor>>> {
        self.h_layers.iter().map(|b| b.features(tape, Some(y))).collect()
    }

    /// `g(z'; y)` with the summed log-det terms (half log-dets for injective layers).
    pub fn g_forward(&self, tape: &mut Tape, zp: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.g_features(tape, y)?;
        self.g_forward_with(tape, zp, y, &f)
    }

    pub fn g_forward_with(
        &self,
        tape: &mut Tape,
        zp: &Tensor,
        y: &Tensor,
        features: &[Option<Tensor>],
    ) -> Result<(Tensor, Tensor)> {
        self.check(zp, self.arch.latent_dim, "intermediate latent")?;
        self.check_cond(y, zp.rows())?;
        let mut x = zp.clone();
        let mut ld = Tensor::zeros(vec![zp.rows()]);
        for (l, f) in self.g_layers.iter().zip(features) {
            let (nx, l_ld) = l.forward_with(tape, &x, y, f.as_ref())?;
            x = nx;
            ld = tape.add(&ld, &l_ld)?;
        }
        Ok((x, ld))
    }

    /// Layer-wise inverse of `g`, using pseudo-inverses for injective layers.
    pub fn g_pinv(&self, tape: &mut Tape, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let f = self.g_features(tape, y)?;
        self.g_pinv_with(tape, x, y, &f)
    }

    pub fn g_pinv_with(&self, tape: &mut Tape, x: &Tensor, y: &Tensor, features: &[Option<Tensor>]) -> Result<Tensor> {
        self.check(x, self.arch.data_dim, "data")?;
        self.check_cond(y, x.rows())?;
        let mut z = x.clone();
        for (l, f) in self.g_layers.iter().zip(features).rev() {
            z = l.inverse_with(tape, &z, y, f.as_ref())?;
        }
        Ok(z)
    }

    /// `h(z; y)` with its log-det.
    pub fn h_forward(&self, tape: &mut Tape, z: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.h_features(tape, y)?;
        self.h_forward_with(tape, z, &f)
    }

    pub fn h_forward_with(&self, tape: &mut Tape, z: &Tensor, features: &[Option<Tensor>]) -> Result<(Tensor, Tensor)> {
        self.check(z, self.arch.latent_dim, "latent")?;
        let mut x = z.clone();
        let mut ld = Tensor::zeros(vec![z.rows()]);
        for (b, f) in self.h_layers.iter().zip(features) {
            let (nx, b_ld) = b.forward_with(tape, &x, f.as_ref())?;
            x = nx;
            ld = tape.add(&ld, &b_ld)?;
        }
        Ok((x, ld))
    }

    pub fn h_inverse(&self, tape: &mut Tape, zp: &Tensor, y: &Tensor) -> Result<Tensor> {
        let f = self.h_features(tape, y)?;
        self.h_inverse_with(tape, zp, &f)
    }

    pub fn h_inverse_with(&self, tape: &mut Tape, zp: &Tensor, features: &[Option<Tensor>]) -> Result<Tensor> {
        self.check(zp, self.arch.latent_dim, "intermediate latent")?;
        let mut z = zp.clone();
        for (b, f) in self.h_layers.iter().zip(features).rev() {
            z = b.inverse_with(tape, &z, f.as_ref())?;
        }
        Ok(z)
    }

    /// `f(z; y) = g(h(z; y); y)`; deterministic in `z`.
    pub fn sample(&self, z: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        self.check_cond(y, z.rows())?;
        let (zp, _) = self.h_forward(&mut tape, z, y)?;
        Ok(self.g_forward(&mut tape, &zp, y)?.0)
    }

    /// Draw `count` samples for a single conditioning row `y` (`[1, cond_dim]`).
    pub fn sample_posterior<R: Rng + ?Sized>(&self, y: &Tensor, count: usize, rng: &mut R) -> Result<Tensor> {
        let z = self.latent().sample(count, rng);
        let ys = repeat_rows(y, count)?;
        self.sample(&z, &ys)
    }

    pub fn pinv(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        self.g_pinv(&mut Tape::new(), x, y)
    }

    /// `P(x; y) = g(g_pinv(x; y); y)`.
    pub fn range_project(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.g_features(&mut tape, y)?;
        let zp = self.g_pinv_with(&mut tape, x, y, &f)?;
        Ok(self.g_forward_with(&mut tape, &zp, y, &f)?.0)
    }

    /// Log-likelihood of intermediate latents `z'` under the pushforward of
    /// the latent Gaussian by `h`, per row.
    pub fn latent_loglik(&self, tape: &mut Tape, zp: &Tensor, y: &Tensor) -> Result<Tensor> {
        self.check_cond(y, zp.rows())?;
        let f = self.h_features(tape, y)?;
        let z = self.h_inverse_with(tape, zp, &f)?;
        let (_, ld) = self.h_forward_with(tape, &z, &f)?;
        let lp = self.latent().log_density(tape, &z)?;
        Ok(tape.sub(&lp, &ld)?)
    }

    /// `log p_Z(z) - log|det J_h(z)|` with `z = h^{-1}(g_pinv(x; y))`, per row.
    pub fn intermediate_loglik(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let zp = self.g_pinv(&mut tape, x, y)?;
        Ok(self.latent_loglik(&mut tape, &zp, y)?.to_vec())
    }

    pub fn is_fixed_volume(&self) -> bool {
        self.arch.h_mode == CouplingMode::Fvc
            && self.h_layers.iter().all(|b| b.coupling.as_ref().is_none_or(|c| c.mode == CouplingMode::Fvc))
    }

    /// `g(h(0; y); y)`, the image of the latent mean. Only a mode of the
    /// intermediate density when every coupling of `h` has a fixed volume change.
    pub fn surrogate_map(&self, y: &Tensor) -> Result<Tensor> {
        if !self.is_fixed_volume() {
            return Err(Error::Contract(
                "surrogate MAP requires fixed-volume-change couplings in the bijective part; \
                 with input-dependent log-dets h(0; y) is not the intermediate mode"
                    .into(),
            ));
        }
        self.sample(&Tensor::zeros(vec![y.rows(), self.arch.latent_dim]), y)
    }

    /// Exact data-space log-likelihood of one point `x` (`[1, D]`), using the
    /// full Jacobian of `g`: `log p(z') - 0.5 log det(J^T J)`. Only for `D <= 8`.
    pub fn data_loglik_bruteforce(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        if self.arch.data_dim > 8 || x.rows() != 1 {
            return Err(Error::Contract("brute-force likelihood is limited to single points with D <= 8".into()));
        }
        let mut tape = Tape::new();
        let zp = self.g_pinv(&mut tape, x, y)?;
        let lz = self.latent_loglik(&mut tape, &zp, y)?.item();
        let y = y.detach();
        let j = diffcore::jacobian(
            |tape, z| {
                let (x, _) = self.g_forward(tape, z, &y).map_err(into_diff)?;
                Ok(x)
            },
            &zp.detach(),
        )?;
        let jt = diffcore::apply(diffcore::Op::Transpose, &[&j])?;
        let jtj = diffcore::apply(diffcore::Op::MatMul, &[&jt, &j])?;
        let ld = diffcore::apply(diffcore::Op::LogDet, &[&jtj])?.item();
        Ok(lz - 0.5 * ld)
    }

    /// Parameters of the injective part, its conditioning networks and skip weights.
    pub fn gamma_params(&self) -> Vec<&Tensor> {
        self.g_layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn gamma_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.g_layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Parameters of the bijective part and its conditioning networks.
    pub fn eta_params(&self) -> Vec<&Tensor> {
        self.h_layers.iter().flat_map(|b| b.params()).collect()
    }

    pub fn eta_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.h_layers.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    fn actnorms(&self) -> Vec<&ActNorm> {
        let g = self.g_layers.iter().filter_map(|l| l.block().actnorm.as_ref());
        g.chain(self.h_layers.iter().filter_map(|b| b.actnorm.as_ref())).collect()
    }

    fn actnorms_mut(&mut self) -> Vec<&mut ActNorm> {
        let g = self.g_layers.iter_mut().filter_map(|l| l.block_mut().actnorm.as_mut());
        g.chain(self.h_layers.iter_mut().filter_map(|b| b.actnorm.as_mut())).collect()
    }

    fn lu_layers(&self) -> Vec<&LuLinear> {
        let blocks = self.g_layers.iter().map(|l| l.block()).chain(self.h_layers.iter());
        blocks
            .map(|b| match &b.linear {
                LinearLayer::Lu(l) => l,
                LinearLayer::Injective(i) => &i.top,
            })
            .collect()
    }

    fn lu_layers_mut(&mut self) -> Vec<&mut LuLinear> {
        let blocks = self.g_layers.iter_mut().map(|l| l.block_mut()).chain(self.h_layers.iter_mut());
        blocks
            .map(|b| match &mut b.linear {
                LinearLayer::Lu(l) => l,
                LinearLayer::Injective(i) => &mut i.top,
            })
            .collect()
    }

    /// Fixed permutations and diagonal signs of every LU layer, injective part first.
    pub fn lu_buffers(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        self.lu_layers().iter().map(|l| (l.permutation().to_vec(), l.signs().to_vec())).collect()
    }

    pub fn set_lu_buffers(&mut self, buffers: &[(Vec<usize>, Vec<f64>)]) -> Result<()> {
        let mut layers = self.lu_layers_mut();
        if layers.len() != buffers.len() {
            return Err(Error::Format(format!("{} LU buffers for {} layers", buffers.len(), layers.len())));
        }
        for (l, (perm, signs)) in layers.iter_mut().zip(buffers) {
            l.set_buffers(perm.clone(), signs)?;
        }
        Ok(())
    }

    /// Initialization flags of every actnorm, injective part first.
    pub fn actnorm_flags(&self) -> Vec<bool> {
        self.actnorms().iter().map(|a| a.initialized).collect()
    }

    pub fn set_actnorm_flags(&mut self, flags: &[bool]) -> Result<()> {
        let mut norms = self.actnorms_mut();
        if norms.len() != flags.len() {
            return Err(Error::Format(format!("{} actnorm flags for {} layers", flags.len(), norms.len())));
        }
        for (a, &f) in norms.iter_mut().zip(flags) {
            a.initialized = f;
        }
        Ok(())
    }

    /// Data-dependent actnorm initialization of `g`, walking from the data
    /// side toward the latent side with one batch.
    pub fn initialize_g_actnorm(&mut self, x: &Tensor, y: &Tensor) -> Result<()> {
        self.check(x, self.arch.data_dim, "data")?;
        self.check_cond(y, x.rows())?;
        let mut h = x.detach();
        for l in self.g_layers.iter_mut().rev() {
            h = match l {
                GLayer::Block(b) => b.initialize_actnorm(&h, Some(y))?,
                GLayer::Skip(s) => {
                    let mut tape = Tape::new();
                    let w = s.weights(&mut tape)?.to_vec();
                    let ry = s.resize.apply(y)?;
                    let cols = h.cols();
                    let data: Vec<f64> =
                        h.data().iter().zip(ry.data()).enumerate().map(|(i, (&v, &r))| {
                            let sw = w[i % cols];
                            (v - sw * r) / (1.0 - sw)
                        }).collect();
                    let r = Tensor::new(h.shape().to_vec(), data)?;
                    s.inner.initialize_actnorm(&r, Some(y))?
                }
            };
        }
        Ok(())
    }

    /// Data-dependent actnorm initialization of `h` from intermediate latents.
    pub fn initialize_h_actnorm(&mut self, zp: &Tensor, y: &Tensor) -> Result<()> {
        self.check(zp, self.arch.latent_dim, "intermediate latent")?;
        self.check_cond(y, zp.rows())?;
        let mut h = zp.detach();
        for b in self.h_layers.iter_mut().rev() {
            h = b.initialize_actnorm(&h, Some(y))?;
        }
        Ok(())
    }
}

impl Parameters for CTrumpet {
    /// Injective part first, then the bijective part.
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.gamma_params();
        p.extend(self.eta_params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.g_layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        p.extend(self.h_layers.iter_mut().flat_map(|b| b.params_mut()));
        p
    }
}

fn into_diff(e: Error) -> DiffError {
    match e {
        Error::Diff(d) => d,
        other => DiffError::Contract(other.to_string()),
    }
}

/// Stack `count` copies of a single row.
pub fn repeat_rows(row: &Tensor, count: usize) -> Result<Tensor> {
    if row.rank() != 2 || row.rows() != 1 {
        return Err(Error::Contract(format!("expected a single row, got {:?}", row.shape())));
    }
    let data = row.data().repeat(count);
    Ok(Tensor::new(vec![count, row.cols()], data)?)
}

#[cfg(test)]
mod tests;
