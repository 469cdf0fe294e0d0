//! Gaussian random field prior, linear-Gaussian observations and the exact
//! conjugate posterior.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Diagonal jitter added to the kernel matrix.
pub const KERNEL_JITTER: f64 = 1e-6;

/// Gaussian prior over `n x n` images, flattened row-major.
#[derive(Clone, Debug)]
pub struct GrfPrior {
    pub n: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GrfPrior {
    pub fn new(n: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = n * n;
        if mean.len() != d || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Contract(format!("prior for {n}x{n} images needs {d}-dim mean and covariance")));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 {
            return Err(Error::Invariant("prior covariance is not symmetric".into()));
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Invariant("prior covariance is not positive definite".into()))?;
        Ok(Self { n, mean, cov, chol })
    }

    /// Zero-mean squared-exponential field with length scale `n / 8` pixels.
    pub fn squared_exponential(n: usize) -> Result<Self> {
        Self::squared_exponential_with(n, n as f64 / 8.0)
    }

    pub fn squared_exponential_with(n: usize, length: f64) -> Result<Self> {
        let d = n * n;
        let cov = DMatrix::from_fn(d, d, |p, q| {
            let (pi, pj) = ((p / n) as f64, (p % n) as f64);
            let (qi, qj) = ((q / n) as f64, (q % n) as f64);
            let r2 = (pi - qi).powi(2) + (pj - qj).powi(2);
            let k = (-r2 / (2.0 * length * length)).exp();
            if p == q {
                k + KERNEL_JITTER
            } else {
                k
            }
        });
        Self::new(n, DVector::zeros(d), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `count` draws `mu + L xi` as rows of a `[count, n^2]` matrix.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> DMatrix<f64> {
        gaussian_rows(&self.mean, &self.chol.l(), count, rng)
    }
}

/// Rows `mu + L xi` with `xi` standard normal.
pub fn gaussian_rows<R: Rng + ?Sized>(mean: &DVector<f64>, l: &DMatrix<f64>, count: usize, rng: &mut R) -> DMatrix<f64> {
    let d = mean.len();
    let xi = DMatrix::from_fn(d, count, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut x = l * xi;
    for mut c in x.column_iter_mut() {
        c += mean;
    }
    x.transpose()
}

/// `y = A x + n`, `n ~ N(0, lambda^2 I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearForward {
    pub a: DMatrix<f64>,
    pub noise_std: f64,
}

impl LinearForward {
    pub fn new(a: DMatrix<f64>, noise_std: f64) -> Result<Self> {
        if !(noise_std >= 0.0) {
            return Err(Error::Contract(format!("noise level must be nonnegative, got {noise_std}")));
        }
        Ok(Self { a, noise_std })
    }

    /// Noisy measurements of the rows of `x`, as rows.
    pub fn measure<R: Rng + ?Sized>(&self, x: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
        let mut y = x * self.a.transpose();
        if self.noise_std > 0.0 {
            for v in y.iter_mut() {
                *v += self.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianPosterior {
    /// Pixel-wise posterior standard deviation.
    pub fn std(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Posterior draws as rows; the covariance is factored with a small jitter
    /// because exactly observed directions make it singular.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let d = self.mean.len();
        let scale = self.cov.diagonal().amax().max(1.0);
        let jittered = &self.cov + DMatrix::identity(d, d) * (1e-12 * scale);
        let chol = Cholesky::new(jittered).ok_or_else(|| Error::Invariant("posterior covariance is not PSD".into()))?;
        Ok(gaussian_rows(&self.mean, &chol.l(), count, rng))
    }
}

/// Exact posterior of `x ~ N(mu, S)` given `y = A x + N(0, lambda^2 I)`:
/// `mu + S A^T (A S A^T + lambda^2 I)^{-1} (y - A mu)` and
/// `S - S A^T (A S A^T + lambda^2 I)^{-1} A S`, via a Cholesky solve.
pub fn analytic_posterior(prior: &GrfPrior, forward: &LinearForward, y: &DVector<f64>) -> Result<GaussianPosterior> {
    let a = &forward.a;
    if a.ncols() != prior.dim() || a.nrows() != y.len() {
        return Err(Error::Contract(format!(
            "operator {}x{} does not fit prior dim {} and {} measurements",
            a.nrows(),
            a.ncols(),
            prior.dim(),
            y.len()
        )));
    }
    let m = a.nrows();
    let a_s = a * &prior.cov;
    let mut system = &a_s * a.transpose();
    for i in 0..m {
        system[(i, i)] += forward.noise_std * forward.noise_std;
    }
    let system = (&system + system.transpose()) * 0.5;
    let chol = Cholesky::new(system).ok_or_else(|| {
        Error::Degenerate("A S A^T + lambda^2 I is singular; a noiseless observation must have full rank".into())
    })?;
    // K^T = (A S A^T + lambda^2 I)^{-1} A S
    let kt = chol.solve(&a_s);
    let resid = y - a * &prior.mean;
    let mean = &prior.mean + kt.transpose() * resid;
    let cov = &prior.cov - a_s.transpose() * &kt;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianPosterior { mean, cov })
}

/// Diagonal 0/1 operator on `n x n` images that zeroes a `size` patch at `origin` (row, col).
pub fn mask_operator(n: usize, origin: (usize, usize), size: (usize, usize)) -> Result<DMatrix<f64>> {
    if origin.0 + size.0 > n || origin.1 + size.1 > n {
        return Err(Error::Contract(format!("patch at {origin:?} of size {size:?} leaves the {n}x{n} grid")));
    }
    let keep = |p: usize| {
        let (i, j) = (p / n, p % n);
        let inside = (origin.0..origin.0 + size.0).contains(&i) && (origin.1..origin.1 + size.1).contains(&j);
        if inside {
            0.0
        } else {
            1.0
        }
    };
    Ok(DMatrix::from_diagonal(&DVector::from_fn(n * n, |p, _| keep(p))))
}

/// Patch of `size` centered in an `n x n` grid.
pub fn center_patch(n: usize, size: usize) -> (usize, usize) {
    ((n - size) / 2, (n - size) / 2)
}
