//! Linearized travel-time tomography: straight-ray line integrals of a
//! slowness image between sensor pairs.
//!
//! The image covers the unit square. Pixel `(r, c)` of an `n x n` image
//! spans `x in [c/n, (c+1)/n)`, `y in [r/n, (r+1)/n)` and has flat index `r n + c`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SensorNet {
    pub sensors: Vec<[f64; 2]>,
    /// Unordered pairs, stored with `i < j`.
    pub pairs: Vec<(usize, usize)>,
}

impl SensorNet {
    /// Every unordered pair of distinct sensors.
    pub fn new(sensors: Vec<[f64; 2]>) -> Result<Self> {
        let n = sensors.len();
        let pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        Self::with_pairs(sensors, pairs)
    }

    pub fn with_pairs(sensors: Vec<[f64; 2]>, pairs: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(s) = sensors.iter().find(|s| !s.iter().all(|v| (0.0..=1.0).contains(v))) {
            return Err(Error::Contract(format!("sensor {s:?} lies outside the unit square")));
        }
        let mut norm = Vec::with_capacity(pairs.len());
        for (i, j) in pairs {
            if i >= sensors.len() || j >= sensors.len() || i == j {
                return Err(Error::Contract(format!("invalid sensor pair ({i}, {j})")));
            }
            norm.push((i.min(j), i.max(j)));
        }
        Ok(Self { sensors, pairs: norm })
    }

    /// `count` sensors evenly spaced along the left, bottom and right edges of
    /// the lower half of the domain.
    pub fn lower_boundary(count: usize) -> Result<Self> {
        let sensors = (0..count)
            .map(|k| {
                let s = (k as f64 + 0.5) * 2.0 / count as f64;
                if s < 0.5 {
                    [0.0, 0.5 - s]
                } else if s < 1.5 {
                    [s - 0.5, 0.0]
                } else {
                    [1.0, s - 1.5]
                }
            })
            .collect();
        Self::new(sensors)
    }
}

fn pixel_of(v: f64, n: usize) -> usize {
    ((v * n as f64).floor().max(0.0) as usize).min(n - 1)
}

/// Weights of the line integral `int_0^1 f(a + l (b - a)) dl` against the
/// pixel basis: the length of the `l`-interval the ray spends in each pixel.
pub fn ray_weights(n: usize, a: [f64; 2], b: [f64; 2]) -> Result<Vec<(usize, f64)>> {
    if a == b {
        return Err(Error::Degenerate(format!("coincident sensors at {a:?} give no ray")));
    }
    // canonical direction so swapped endpoints give bitwise-identical weights
    let (a, b) = if (b[0], b[1]) < (a[0], a[1]) { (b, a) } else { (a, b) };
    let d = [b[0] - a[0], b[1] - a[1]];
    let mut cuts = vec![0.0, 1.0];
    for axis in 0..2 {
        if d[axis] != 0.0 {
            for k in 0..=n {
                let l = (k as f64 / n as f64 - a[axis]) / d[axis];
                if l > 0.0 && l < 1.0 {
                    cuts.push(l);
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let (x, y) = (a[0] + mid * d[0], a[1] + mid * d[1]);
        *acc.entry(pixel_of(y, n) * n + pixel_of(x, n)).or_insert(0.0) += w[1] - w[0];
    }
    Ok(acc.into_iter().collect())
}

/// Matrix `[pairs, n^2]` mapping a slowness image to pair travel times.
pub fn traveltime_operator(n: usize, net: &SensorNet) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::zeros(net.pairs.len(), n * n);
    for (row, &(i, j)) in net.pairs.iter().enumerate() {
        for (p, w) in ray_weights(n, net.sensors[i], net.sensors[j])? {
            a[(row, p)] = w;
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(n: usize, w: &[(usize, f64)]) -> Vec<f64> {
        let mut v = vec![0.0; n * n];
        for &(p, x) in w {
            v[p] = x;
        }
        v
    }

    #[test]
    fn constant_image_gives_unit_times() {
        let net = SensorNet::lower_boundary(10).unwrap();
        assert_eq!(net.pairs.len(), 45);
        let a = traveltime_operator(16, &net).unwrap();
        for r in 0..a.nrows() {
            let t: f64 = a.row(r).iter().sum();
            assert!((t - 1.0).abs() < 1e-12, "{t}");
            let scaled: f64 = a.row(r).iter().map(|w| w * 3.5).sum();
            assert!((scaled - 3.5).abs() < 1e-12);
            assert!(a.row(r).iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn swapped_endpoints_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = [rng.random::<f64>(), rng.random::<f64>()];
            let b = [rng.random::<f64>(), rng.random::<f64>()];
            assert_eq!(ray_weights(12, a, b).unwrap(), ray_weights(12, b, a).unwrap());
        }
    }

    #[test]
    fn single_pixel_matches_monte_carlo() {
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a = [rng.random::<f64>(), rng.random::<f64>()];
            let b = [rng.random::<f64>(), rng.random::<f64>()];
            let w = dense(n, &ray_weights(n, a, b).unwrap());
            let samples = 1_000_000;
            let mut counts = vec![0usize; n * n];
            for _ in 0..samples {
                let l: f64 = rng.random();
                let (x, y) = (a[0] + l * (b[0] - a[0]), a[1] + l * (b[1] - a[1]));
                counts[pixel_of(y, n) * n + pixel_of(x, n)] += 1;
            }
            for p in 0..n * n {
                let mc = counts[p] as f64 / samples as f64;
                assert!((w[p] - mc).abs() < 1e-3, "pixel {p}: {} vs {mc}", w[p]);
            }
        }
    }

    #[test]
    fn axis_aligned_ray_splits_evenly() {
        let w = ray_weights(4, [0.0, 0.1], [1.0, 0.1]).unwrap();
        assert_eq!(w.len(), 4);
        for (k, (p, x)) in w.into_iter().enumerate() {
            assert_eq!(p, k);
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(matches!(ray_weights(4, [0.5, 0.5], [0.5, 0.5]), Err(Error::Degenerate(_))));
        assert!(SensorNet::new(vec![[1.5, 0.0], [0.0, 0.0]]).is_err());
        assert!(SensorNet::with_pairs(vec![[0.0, 0.0], [1.0, 0.0]], vec![(0, 0)]).is_err());
    }
}
