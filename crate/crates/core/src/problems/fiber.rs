//! Solid torus and solid elliptic Moebius band as fiber bundles over the
//! circle. The base angle `t` is the measurement; each fiber is a filled
//! disk (torus) or filled ellipse (band) in the half-plane at azimuth `t`.

use std::f64::consts::TAU;

use rand::Rng;

use crate::diffcore::Tensor;

pub const TORUS_R: f64 = 1.0;
pub const TORUS_TUBE: f64 = 0.25;
pub const MOBIUS_R: f64 = 1.0;
pub const MOBIUS_A: f64 = 0.4;
pub const MOBIUS_B: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bundle {
    Torus,
    Mobius,
}

/// Points `[N, 3]` with their base angles.
#[derive(Clone, Debug, PartialEq)]
pub struct FiberSamples {
    pub points: Tensor,
    pub t: Vec<f64>,
}

/// Point of the solid torus at base angle `t`, fiber angle `s` and radial fraction `rho` in `[0, 1]`.
pub fn torus_point(t: f64, s: f64, rho: f64) -> [f64; 3] {
    let r = TORUS_TUBE * rho;
    let w = TORUS_R + r * s.cos();
    [t.cos() * w, t.sin() * w, r * s.sin()]
}

/// Point of the solid elliptic band: the ellipse `(a cos s, b sin s)` scaled
/// by `rho` and rotated by `t / 2` within the half-plane at azimuth `t`.
pub fn mobius_point(t: f64, s: f64, rho: f64) -> [f64; 3] {
    let (a, b) = (MOBIUS_A * rho, MOBIUS_B * rho);
    let (h, v) = ((t / 2.0).cos(), (t / 2.0).sin());
    let w = MOBIUS_R - b * v * s.sin() + a * h * s.cos();
    [t.cos() * w, t.sin() * w, b * h * s.sin() + a * v * s.cos()]
}

impl Bundle {
    pub fn point(self, t: f64, s: f64, rho: f64) -> [f64; 3] {
        match self {
            Bundle::Torus => torus_point(t, s, rho),
            Bundle::Mobius => mobius_point(t, s, rho),
        }
    }

    /// Uniform samples over the solid set: `t`, `s` uniform on `[0, 2 pi)`,
    /// radial fraction `sqrt(u)` for uniform density over each fiber.
    pub fn sample<R: Rng + ?Sized>(self, count: usize, rng: &mut R) -> FiberSamples {
        let mut pts = Vec::with_capacity(count * 3);
        let mut ts = Vec::with_capacity(count);
        for _ in 0..count {
            let t = rng.random_range(0.0..TAU);
            let s = rng.random_range(0.0..TAU);
            let rho = rng.random::<f64>().sqrt();
            pts.extend_from_slice(&self.point(t, s, rho));
            ts.push(t);
        }
        FiberSamples { points: Tensor::new(vec![count, 3], pts).expect("finite points"), t: ts }
    }

    /// Euclidean distance from `p` to the solid set. Exact for the torus; for
    /// the band it is the in-plane distance to the fiber at the point's own
    /// azimuth, an upper bound on the true distance.
    pub fn distance(self, p: [f64; 3]) -> f64 {
        let radial = p[0].hypot(p[1]);
        match self {
            Bundle::Torus => ((radial - TORUS_R).hypot(p[2]) - TORUS_TUBE).max(0.0),
            Bundle::Mobius => {
                let phi = p[1].atan2(p[0]);
                let (u, w) = (radial - MOBIUS_R, p[2]);
                // rotate into the ellipse frame (the ellipse is symmetric under
                // a half turn, so phi and phi + 2 pi agree)
                let (c, s) = ((phi / 2.0).cos(), (phi / 2.0).sin());
                let (eu, ew) = (c * u + s * w, -s * u + c * w);
                filled_ellipse_distance(eu, ew, MOBIUS_A, MOBIUS_B)
            }
        }
    }
}

/// Distance from `(p, q)` to the filled axis-aligned ellipse with semi-axes `a`, `b`.
pub fn filled_ellipse_distance(p: f64, q: f64, a: f64, b: f64) -> f64 {
    if (p / a).powi(2) + (q / b).powi(2) <= 1.0 {
        return 0.0;
    }
    let d2 = |s: f64| (a * s.cos() - p).powi(2) + (b * s.sin() - q).powi(2);
    let n = 720;
    let mut best = (0..n).map(|k| TAU * k as f64 / n as f64).fold((0.0, f64::INFINITY), |acc, s| {
        let v = d2(s);
        if v < acc.1 {
            (s, v)
        } else {
            acc
        }
    });
    // golden-section refinement inside the bracketing grid cells
    let (mut lo, mut hi) = (best.0 - TAU / n as f64, best.0 + TAU / n as f64);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let (m1, m2) = (hi - r * (hi - lo), lo + r * (hi - lo));
        if d2(m1) < d2(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let s = 0.5 * (lo + hi);
    if d2(s) < best.1 {
        best.1 = d2(s);
    }
    best.1.sqrt()
}

/// Conditioning features of a base angle: `(cos t, sin t)`.
pub fn angle_features(t: &[f64]) -> Tensor {
    let data = t.iter().flat_map(|t| [t.cos(), t.sin()]).collect();
    Tensor::new(vec![t.len(), 2], data).expect("finite features")
}

/// Base angles every `step_deg` degrees around the circle.
pub fn angle_sweep(step_deg: f64) -> Vec<f64> {
    let n = (360.0 / step_deg).round() as usize;
    (0..n).map(|k| (k as f64 * step_deg).to_radians()).collect()
}
