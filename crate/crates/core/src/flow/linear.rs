use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{broadcast_logdet, Parameters};
use crate::diffcore::{DiffError, Tape, Tensor};
use crate::{Error, Result};

fn strict_mask(c: usize, lower: bool) -> Tensor {
    let mut m = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            if (lower && j < i) || (!lower && j > i) {
                m[i * c + j] = 1.0;
            }
        }
    }
    Tensor::from_parts(vec![c, c], m)
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Channel-mixing linear layer `w = P L (U + diag(sign * exp(log_s)))`.
///
/// `lower` and `upper` are full `c x c` parameter matrices of which only the
/// strict lower (resp. upper) triangle is used. The inverse is a permutation
/// followed by two triangular solves.
#[derive(Clone, Debug)]
pub struct LuLinear {
    /// `x_i = (L U z)_{perm[i]}`
    perm: Arc<[usize]>,
    inv_perm: Arc<[usize]>,
    pub lower: Tensor,
    pub upper: Tensor,
    pub log_s: Tensor,
    sign_s: Tensor,
}

impl LuLinear {
    pub fn identity(c: usize) -> Self {
        Self::from_parts((0..c).collect(), Tensor::zeros(vec![c, c]), Tensor::zeros(vec![c, c]), &vec![1.0; c])
            .expect("identity LU layer")
    }

    /// Build from a permutation, triangular parameter matrices and the nonzero diagonal `s`.
    pub fn from_parts(perm: Vec<usize>, lower: Tensor, upper: Tensor, s: &[f64]) -> Result<Self> {
        let c = perm.len();
        let mut seen = vec![false; c];
        for &p in &perm {
            if p >= c || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Contract(format!("{perm:?} is not a permutation")));
            }
        }
        if lower.shape() != [c, c] || upper.shape() != [c, c] || s.len() != c {
            return Err(Error::Contract(format!("LU factors must be {c}x{c} with {c} diagonal entries")));
        }
        if s.iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(Error::Invariant("LU diagonal entries must be finite and nonzero".into()));
        }
        let inv_perm = inverse_permutation(&perm);
        Ok(Self {
            perm: perm.into(),
            inv_perm: inv_perm.into(),
            lower,
            upper,
            log_s: Tensor::vector(s.iter().map(|v| v.abs().ln()).collect()),
            sign_s: Tensor::vector(s.iter().map(|v| v.signum()).collect()),
        })
    }

    /// Random rotation factored as `P L U`.
    pub fn random<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let g = DMatrix::<f64>::from_fn(c, c, |_, _| StandardNormal.sample(rng));
        let q = g.qr().q();
        let (p, l, u) = q.lu().unpack();
        // p * q = l * u, so q = p^T l u.
        let mut pm = DMatrix::<f64>::identity(c, c);
        p.permute_rows(&mut pm);
        let perm: Vec<usize> = (0..c).map(|i| (0..c).find(|&j| pm[(j, i)] == 1.0).unwrap()).collect();
        let lower = Tensor::from_parts(vec![c, c], (0..c * c).map(|k| if k % c < k / c { l[(k / c, k % c)] } else { 0.0 }).collect());
        let upper = Tensor::from_parts(vec![c, c], (0..c * c).map(|k| if k % c > k / c { u[(k / c, k % c)] } else { 0.0 }).collect());
        let s: Vec<f64> = (0..c).map(|i| u[(i, i)]).collect();
        Self::from_parts(perm, lower, upper, &s).expect("LU of an orthogonal matrix")
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Signs of the diagonal of `U + diag(s)`.
    pub fn signs(&self) -> &[f64] {
        self.sign_s.data()
    }

    /// Replace the fixed (non-trainable) permutation and diagonal signs.
    pub fn set_buffers(&mut self, perm: Vec<usize>, signs: &[f64]) -> Result<()> {
        if perm.len() != self.dim() || signs.len() != self.dim() || signs.iter().any(|s| s.abs() != 1.0) {
            return Err(Error::Contract(format!("buffers for a {}-channel LU layer must be a permutation and unit signs", self.dim())));
        }
        let s: Vec<f64> = signs.iter().zip(self.log_s.data()).map(|(sg, l)| sg * l.exp()).collect();
        let rebuilt = Self::from_parts(perm, self.lower.clone(), self.upper.clone(), &s)?;
        self.perm = rebuilt.perm;
        self.inv_perm = rebuilt.inv_perm;
        self.sign_s = rebuilt.sign_s;
        Ok(())
    }

    fn lower_factor(&self, tape: &mut Tape) -> Result<Tensor> {
        let c = self.dim();
        let l = tape.mul(&self.lower, &strict_mask(c, true))?;
        Ok(tape.add(&l, &Tensor::eye(c))?)
    }

    fn upper_factor(&self, tape: &mut Tape) -> Result<Tensor> {
        let c = self.dim();
        let u = tape.mul(&self.upper, &strict_mask(c, false))?;
        let s = tape.exp(&self.log_s)?;
        let s = tape.mul(&s, &self.sign_s)?;
        let diag = tape.mul(&Tensor::eye(c), &s)?;
        Ok(tape.add(&u, &diag)?)
    }

    /// Dense weight `w` (`[c, c]`) as a tape expression.
    pub fn weight_on(&self, tape: &mut Tape) -> Result<Tensor> {
        let l = self.lower_factor(tape)?;
        let u = self.upper_factor(tape)?;
        let lu = tape.matmul(&l, &u)?;
        let lut = tape.transpose(&lu)?;
        let permuted = tape.gather(&lut, Arc::clone(&self.perm))?;
        Ok(tape.transpose(&permuted)?)
    }

    pub fn weight(&self) -> Tensor {
        self.weight_on(&mut Tape::new()).expect("finite weight").detach()
    }

    pub fn log_abs_det(&self) -> f64 {
        self.log_s.data().iter().sum()
    }

    /// `x = w z` row-wise on `[B, c]`; logdet is `sum(log_s)` per sample.
    pub fn forward(&self, tape: &mut Tape, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let u = self.upper_factor(tape)?;
        let ut = tape.transpose(&u)?;
        let h = tape.matmul(z, &ut)?;
        let l = self.lower_factor(tape)?;
        let lt = tape.transpose(&l)?;
        let h = tape.matmul(&h, &lt)?;
        let x = tape.gather(&h, Arc::clone(&self.perm))?;
        let total = tape.sum(&self.log_s)?;
        let logdet = broadcast_logdet(tape, &total, z.shape()[0])?;
        Ok((x, logdet))
    }

    /// `z = U'^{-1} L^{-1} P^{-1} x`, no dense inversion.
    pub fn inverse(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let v = tape.gather(x, Arc::clone(&self.inv_perm))?;
        let vt = tape.transpose(&v)?;
        let a = tape.solve_triangular(&self.lower, &vt, true, true)?;
        let u = self.upper_factor(tape)?;
        let zt = tape.solve_triangular(&u, &a, false, false)?;
        Ok(tape.transpose(&zt)?)
    }
}

impl Parameters for LuLinear {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.lower, &self.upper, &self.log_s]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.lower, &mut self.upper, &mut self.log_s]
    }
}

/// Dimension-expanding linear layer `w = [top; free]` with an invertible
/// LU-parametrized top block, so `w` always has full column rank.
#[derive(Clone, Debug)]
pub struct InjectiveLinear {
    pub top: LuLinear,
    /// `[c_out - c_in, c_in]`
    pub free: Tensor,
}

impl InjectiveLinear {
    /// Zero padding: `(a, b) -> (a, b, 0, ..)`.
    pub fn identity(c_in: usize, c_out: usize) -> Self {
        assert!(c_out > c_in, "injective layer must expand");
        Self { top: LuLinear::identity(c_in), free: Tensor::zeros(vec![c_out - c_in, c_in]) }
    }

    pub fn from_parts(top: LuLinear, free: Tensor) -> Result<Self> {
        if free.rank() != 2 || free.shape()[1] != top.dim() {
            return Err(Error::Contract(format!("free block {:?} does not match c_in = {}", free.shape(), top.dim())));
        }
        Ok(Self { top, free })
    }

    pub fn random<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        assert!(c_out > c_in, "injective layer must expand");
        let top = LuLinear::random(c_in, rng);
        let normal = Normal::new(0.0, 1.0 / (c_in as f64).sqrt()).unwrap();
        let free = (0..(c_out - c_in) * c_in).map(|_| normal.sample(rng)).collect();
        Self { top, free: Tensor::from_parts(vec![c_out - c_in, c_in], free) }
    }

    pub fn c_in(&self) -> usize {
        self.top.dim()
    }

    pub fn c_out(&self) -> usize {
        self.top.dim() + self.free.shape()[0]
    }

    /// Stacked weight `[c_out, c_in]`.
    pub fn weight_on(&self, tape: &mut Tape) -> Result<Tensor> {
        let top = self.top.weight_on(tape)?;
        Ok(tape.concat(&[&top, &self.free], 0)?)
    }

    pub fn weight(&self) -> Tensor {
        self.weight_on(&mut Tape::new()).expect("finite weight").detach()
    }

    fn gram(&self, tape: &mut Tape) -> Result<(Tensor, Tensor)> {
        let w = self.weight_on(tape)?;
        let wt = tape.transpose(&w)?;
        let gram = tape.matmul(&wt, &w)?;
        Ok((wt, gram))
    }

    /// `x = w z`; the second value is `0.5 log det(w^T w)` per sample.
    pub fn forward(&self, tape: &mut Tape, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let (top, _) = self.top.forward(tape, z)?;
        let ft = tape.transpose(&self.free)?;
        let rest = tape.matmul(z, &ft)?;
        let x = tape.concat(&[&top, &rest], 1)?;
        let half = self.half_logdet(tape, z.shape()[0])?;
        Ok((x, half))
    }

    pub fn half_logdet(&self, tape: &mut Tape, batch: usize) -> Result<Tensor> {
        let (_, gram) = self.gram(tape)?;
        let ld = tape.logdet(&gram)?;
        let half = tape.scale(&ld, 0.5)?;
        broadcast_logdet(tape, &half, batch)
    }

    /// Pseudo-inverse `z = (w^T w)^{-1} w^T x`.
    pub fn pinv(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let (wt, gram) = self.gram(tape)?;
        let xt = tape.transpose(x)?;
        let rhs = tape.matmul(&wt, &xt)?;
        let zt = tape.solve(&gram, &rhs).map_err(|e| match e {
            DiffError::Singular { condition, .. } => {
                Error::Degenerate(format!("injective layer normal equations have condition {condition:.3e}"))
            }
            other => other.into(),
        })?;
        Ok(tape.transpose(&zt)?)
    }
}

impl Parameters for InjectiveLinear {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.top.params();
        p.push(&self.free);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.top.params_mut();
        p.push(&mut self.free);
        p
    }
}
