//! Synthetic inverse problems with known ground truth: fiber bundles over the
//! circle, Gaussian-random-field inpainting with an exact posterior, and
//! linearized travel-time tomography.

mod fiber;
mod grf;
mod traveltime;

use std::fmt;
use std::str::FromStr;

pub use fiber::{
    angle_features, angle_sweep, filled_ellipse_distance, mobius_point, torus_point, Bundle, FiberSamples, MOBIUS_A,
    MOBIUS_B, MOBIUS_R, TORUS_R, TORUS_TUBE,
};
pub use grf::{
    analytic_posterior, center_patch, gaussian_rows, mask_operator, GaussianPosterior, GrfPrior, LinearForward,
    KERNEL_JITTER,
};
pub use traveltime::{ray_weights, traveltime_operator, SensorNet};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::{Error, Result};

/// White Gaussian noise scaled so `10 log10(|y|^2 / E|e|^2) = snr_db`.
/// An infinite target passes the signal through unchanged.
pub fn add_noise_snr<R: Rng + ?Sized>(clean: &[f64], snr_db: f64, rng: &mut R) -> Result<Vec<f64>> {
    if snr_db == f64::INFINITY {
        return Ok(clean.to_vec());
    }
    let power: f64 = clean.iter().map(|v| v * v).sum();
    if power == 0.0 || clean.is_empty() {
        return Err(Error::Contract("cannot set an SNR for an all-zero signal".into()));
    }
    let std = (power / (clean.len() as f64 * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(clean.iter().map(|v| v + std * rng.sample::<f64, _>(StandardNormal)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Torus,
    Mobius,
    GrfInpaint,
    Traveltime,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 4] = [ProblemKind::Torus, ProblemKind::Mobius, ProblemKind::GrfInpaint, ProblemKind::Traveltime];

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Torus => "torus",
            ProblemKind::Mobius => "mobius",
            ProblemKind::GrfInpaint => "grf-inpaint",
            ProblemKind::Traveltime => "traveltime",
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown problem '{s}' (expected torus, mobius, grf-inpaint or traveltime)")))
    }
}

/// Problem parameters. Image problems use `image_side x image_side` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub image_side: usize,
    /// Side of the square inpainting hole at the image center.
    pub mask_size: usize,
    /// Inpainting measurement noise standard deviation.
    pub noise_std: f64,
    pub sensors: usize,
    /// Use only the first `pair_limit` sensor pairs, if set.
    pub pair_limit: Option<usize>,
    /// Travel-time measurement SNR in dB.
    #[serde(with = "crate::io::extended_float")]
    pub snr_db: f64,
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind) -> Self {
        Self { kind, image_side: 16, mask_size: 8, noise_std: 5e-3, sensors: 10, pair_limit: None, snr_db: 40.0 }
    }
}

#[derive(Clone, Debug)]
enum Inner {
    Fiber(Bundle),
    Grf { prior: GrfPrior, forward: LinearForward },
    Travel { prior: GrfPrior, forward: LinearForward, pinv: DMatrix<f64> },
}

/// Paired ground truth and raw measurements, one row per item.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub x: Tensor,
    pub y: Tensor,
}

#[derive(Clone, Debug)]
pub struct Problem {
    pub spec: ProblemSpec,
    inner: Inner,
}

fn to_tensor(m: &DMatrix<f64>) -> Result<Tensor> {
    let (r, c) = m.shape();
    Ok(Tensor::new(vec![r, c], m.transpose().as_slice().to_vec())?)
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

impl Problem {
    pub fn new(spec: ProblemSpec) -> Result<Self> {
        let n = spec.image_side;
        let inner = match spec.kind {
            ProblemKind::Torus => Inner::Fiber(Bundle::Torus),
            ProblemKind::Mobius => Inner::Fiber(Bundle::Mobius),
            ProblemKind::GrfInpaint => {
                if spec.mask_size == 0 || spec.mask_size > n {
                    return Err(Error::Config(format!("mask size {} does not fit a {n}x{n} image", spec.mask_size)));
                }
                let prior = GrfPrior::squared_exponential(n)?;
                let a = mask_operator(n, center_patch(n, spec.mask_size), (spec.mask_size, spec.mask_size))?;
                Inner::Grf { prior, forward: LinearForward::new(a, spec.noise_std)? }
            }
            ProblemKind::Traveltime => {
                let mut net = SensorNet::lower_boundary(spec.sensors)?;
                if let Some(k) = spec.pair_limit {
                    if k == 0 || k > net.pairs.len() {
                        return Err(Error::Config(format!("pair limit {k} outside 1..={}", net.pairs.len())));
                    }
                    net.pairs.truncate(k);
                }
                let a = traveltime_operator(n, &net)?;
                let pinv = a.clone().pseudo_inverse(1e-10).map_err(|e| Error::Degenerate(e.to_string()))?;
                let prior = GrfPrior::squared_exponential(n)?;
                Inner::Travel { prior, forward: LinearForward::new(a, 0.0)?, pinv }
            }
        };
        Ok(Self { spec, inner })
    }

    pub fn kind(&self) -> ProblemKind {
        self.spec.kind
    }

    pub fn data_dim(&self) -> usize {
        match &self.inner {
            Inner::Fiber(_) => 3,
            Inner::Grf { prior, .. } | Inner::Travel { prior, .. } => prior.dim(),
        }
    }

    pub fn measurement_dim(&self) -> usize {
        match &self.inner {
            Inner::Fiber(_) => 1,
            Inner::Grf { forward, .. } | Inner::Travel { forward, .. } => forward.a.nrows(),
        }
    }

    pub fn cond_dim(&self) -> usize {
        match &self.inner {
            Inner::Fiber(_) => 2,
            Inner::Grf { forward, .. } => forward.a.nrows(),
            Inner::Travel { prior, .. } => prior.dim(),
        }
    }

    pub fn bundle(&self) -> Option<Bundle> {
        match &self.inner {
            Inner::Fiber(b) => Some(*b),
            _ => None,
        }
    }

    pub fn prior(&self) -> Option<&GrfPrior> {
        match &self.inner {
            Inner::Fiber(_) => None,
            Inner::Grf { prior, .. } | Inner::Travel { prior, .. } => Some(prior),
        }
    }

    pub fn forward(&self) -> Option<&LinearForward> {
        match &self.inner {
            Inner::Fiber(_) => None,
            Inner::Grf { forward, .. } | Inner::Travel { forward, .. } => Some(forward),
        }
    }

    /// Draw `count` ground-truth items and their noisy measurements.
    pub fn generate<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Samples> {
        if count == 0 {
            return Err(Error::Contract("sample count must be positive".into()));
        }
        match &self.inner {
            Inner::Fiber(b) => {
                let s = b.sample(count, rng);
                Ok(Samples { x: s.points, y: Tensor::new(vec![count, 1], s.t)? })
            }
            Inner::Grf { prior, forward } => {
                let x = prior.sample(count, rng);
                let y = forward.measure(&x, rng);
                Ok(Samples { x: to_tensor(&x)?, y: to_tensor(&y)? })
            }
            Inner::Travel { prior, forward, .. } => {
                let x = prior.sample(count, rng);
                let clean = forward.measure(&x, rng);
                let mut y = Vec::with_capacity(clean.len());
                for r in 0..count {
                    let row: Vec<f64> = clean.row(r).iter().copied().collect();
                    y.extend(add_noise_snr(&row, self.spec.snr_db, rng)?);
                }
                Ok(Samples { x: to_tensor(&x)?, y: Tensor::new(vec![count, clean.ncols()], y)? })
            }
        }
    }

    /// Conditioning input of the flow for raw measurements `y` (rows):
    /// angle features for fiber bundles, the masked image for inpainting and
    /// the pseudo-inverse image for travel times.
    pub fn conditioning(&self, y: &Tensor) -> Result<Tensor> {
        if y.rank() != 2 || y.cols() != self.measurement_dim() {
            return Err(Error::Contract(format!("measurements must be [N, {}], got {:?}", self.measurement_dim(), y.shape())));
        }
        match &self.inner {
            Inner::Fiber(_) => Ok(angle_features(y.data())),
            Inner::Grf { .. } => Ok(y.clone()),
            Inner::Travel { pinv, .. } => to_tensor(&(to_matrix(y) * pinv.transpose())),
        }
    }

    /// Exact posterior for a single measurement row, when the problem has one.
    pub fn posterior(&self, y: &[f64]) -> Result<Option<GaussianPosterior>> {
        match &self.inner {
            Inner::Grf { prior, forward } => Ok(Some(analytic_posterior(prior, forward, &DVector::from_column_slice(y))?)),
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn infinite_snr_passes_through() {
        let y = vec![1.0, -2.0, 3.0];
        assert_eq!(add_noise_snr(&y, f64::INFINITY, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), y);
    }

    fn noise_power(snr: f64) -> f64 {
        let y: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).cos()).collect();
        let signal: f64 = y.iter().map(|v| v * v).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 10_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let n = add_noise_snr(&y, snr, &mut rng).unwrap();
            total += n.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        total / draws as f64 / signal
    }

    #[test]
    fn zero_db_noise_matches_signal_power() {
        assert!((noise_power(0.0) - 1.0).abs() < 0.03);
    }

    #[test]
    fn forty_db_noise_is_one_ten_thousandth() {
        assert!((noise_power(40.0) / 1e-4 - 1.0).abs() < 0.03);
    }

    #[test]
    fn zero_signal_rejected() {
        assert!(add_noise_snr(&[0.0, 0.0], 10.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn problem_names_round_trip() {
        for k in ProblemKind::ALL {
            assert_eq!(k.name().parse::<ProblemKind>().unwrap(), k);
        }
        assert!("sphere".parse::<ProblemKind>().is_err());
    }

    #[test]
    fn generated_shapes_and_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in ProblemKind::ALL {
            let mut spec = ProblemSpec::new(kind);
            spec.image_side = 8;
            spec.mask_size = 4;
            let p = Problem::new(spec).unwrap();
            let s = p.generate(5, &mut rng).unwrap();
            assert_eq!(s.x.shape(), &[5, p.data_dim()]);
            assert_eq!(s.y.shape(), &[5, p.measurement_dim()]);
            assert_eq!(p.conditioning(&s.y).unwrap().shape(), &[5, p.cond_dim()]);
        }
    }

    #[test]
    fn traveltime_conditioning_is_pseudo_inverse_image() {
        let mut spec = ProblemSpec::new(ProblemKind::Traveltime);
        spec.image_side = 6;
        spec.snr_db = f64::INFINITY;
        let p = Problem::new(spec).unwrap();
        let s = p.generate(3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = p.conditioning(&s.y).unwrap();
        // A A^+ y = y for consistent measurements
        let a = &p.forward().unwrap().a;
        let back = to_matrix(&c) * a.transpose();
        assert!((back - to_matrix(&s.y)).amax() < 1e-8);
    }

    #[test]
    fn pair_limit_truncates_measurements() {
        let mut spec = ProblemSpec::new(ProblemKind::Traveltime);
        spec.image_side = 6;
        spec.pair_limit = Some(33);
        assert_eq!(Problem::new(spec).unwrap().measurement_dim(), 33);
    }
}
