//! Self-contained oracle suites: layer round trips, analytic log-dets against
//! brute-force Jacobians, the fixed-volume identity, finite-difference
//! gradients and the Gaussian posterior in information form.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{self, Op, Tape, Tensor};
use crate::flow::{
    ActNorm, CondNet, CouplingLayer, CouplingMode, InjectiveLinear, LinearLayer, LuLinear, Parameters, RevnetBlock,
};
use crate::model::{Architecture, CTrumpet};
use crate::problems::{analytic_posterior, mask_operator, GrfPrior, LinearForward};
use crate::training::{gradient_check, Phase};
use crate::{Error, Result};

/// Deliberate defect injected into the suites to show they catch it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Report actnorm log-dets with the wrong sign.
    ActnormLogdetSign,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Fault,
    /// Smaller case counts.
    pub quick: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        Self { name, checks: 0, failures: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok && self.failures.len() < 20 {
            self.failures.push(what());
        } else if !ok {
            self.failures.push(String::new());
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checks > 0
    }
}

pub const ROUNDTRIP_TOL: f64 = 1e-9;
pub const LOGDET_TOL: f64 = 1e-7;
pub const FVC_TOL: f64 = 1e-10;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_ABS_TOL: f64 = 1e-7;

fn perturb<P: Parameters>(p: &mut P, scale: f64, rng: &mut ChaCha8Rng) {
    for t in p.params_mut() {
        let data = t.data().iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
        *t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
    }
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_actnorm(dim: usize, rng: &mut ChaCha8Rng) -> ActNorm {
    let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sigma: Vec<f64> = (0..dim).map(|_| rng.random_range(0.3..3.0)).collect();
    ActNorm::from_mu_sigma(&mu, &sigma).expect("positive scales")
}

fn random_lu(dim: usize, rng: &mut ChaCha8Rng) -> LuLinear {
    let mut l = LuLinear::random(dim, rng);
    perturb(&mut l, 0.3, rng);
    l
}

fn random_coupling(dim: usize, cond: usize, mode: CouplingMode, rng: &mut ChaCha8Rng) -> CouplingLayer {
    let mut c = CouplingLayer::new(dim, cond, &[6], mode, rng);
    perturb(&mut c, 0.5, rng);
    c
}

/// A bijective test subject with a fixed conditioning input.
#[derive(Clone, Debug)]
enum Subject {
    ActNorm(ActNorm),
    Lu(LuLinear),
    Coupling(CouplingLayer, Option<Tensor>),
    Block(RevnetBlock, Option<Tensor>),
    Chain(Vec<RevnetBlock>, Tensor),
}

fn repeat(row: &Option<Tensor>, n: usize) -> Option<Tensor> {
    row.as_ref().map(|r| Tensor::new(vec![n, r.cols()], r.data().repeat(n)).unwrap())
}

impl Subject {
    fn label(&self) -> String {
        match self {
            Subject::ActNorm(a) => format!("actnorm(d={})", a.dim()),
            Subject::Lu(l) => format!("lu(d={})", l.dim()),
            Subject::Coupling(c, y) => format!("coupling({:?}, d={}, cond={})", c.mode, c.dim(), y.is_some()),
            Subject::Block(b, _) => format!("revnet(d={})", b.in_dim()),
            Subject::Chain(bs, _) => format!("chain({} blocks, d={})", bs.len(), bs[0].in_dim()),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Subject::ActNorm(a) => a.dim(),
            Subject::Lu(l) => l.dim(),
            Subject::Coupling(c, _) => c.dim(),
            Subject::Block(b, _) => b.in_dim(),
            Subject::Chain(bs, _) => bs[0].in_dim(),
        }
    }

    /// Sum of actnorm log-det terms (constant in the input).
    fn actnorm_logdet(&self) -> f64 {
        let one = |a: &ActNorm| -> f64 { a.forward(&mut Tape::new(), &Tensor::zeros(vec![1, a.dim()])).unwrap().1.item() };
        match self {
            Subject::ActNorm(a) => one(a),
            Subject::Block(b, _) => b.actnorm.as_ref().map_or(0.0, one),
            Subject::Chain(bs, _) => bs.iter().filter_map(|b| b.actnorm.as_ref()).map(one).sum(),
            _ => 0.0,
        }
    }

    fn forward(&self, tape: &mut Tape, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = z.rows();
        match self {
            Subject::ActNorm(a) => a.forward(tape, z),
            Subject::Lu(l) => l.forward(tape, z),
            Subject::Coupling(c, y) => c.forward(tape, z, repeat(y, n).as_ref()),
            Subject::Block(b, y) => b.forward(tape, z, repeat(y, n).as_ref()),
            Subject::Chain(bs, y) => {
                let y = repeat(&Some(y.clone()), n).unwrap();
                let mut h = z.clone();
                let mut total = Tensor::zeros(vec![n]);
                for b in bs {
                    let (next, ld) = b.forward(tape, &h, Some(&y))?;
                    h = next;
                    total = tape.add(&total, &ld)?;
                }
                Ok((h, total))
            }
        }
    }

    fn inverse(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        match self {
            Subject::ActNorm(a) => a.inverse(tape, x),
            Subject::Lu(l) => l.inverse(tape, x),
            Subject::Coupling(c, y) => c.inverse(tape, x, repeat(y, n).as_ref()),
            Subject::Block(b, y) => b.inverse(tape, x, repeat(y, n).as_ref()),
            Subject::Chain(bs, y) => {
                let y = repeat(&Some(y.clone()), n).unwrap();
                let mut h = x.clone();
                for b in bs.iter().rev() {
                    h = b.inverse(tape, &h, Some(&y))?;
                }
                Ok(h)
            }
        }
    }
}

fn random_block(dim: usize, cond_dim: usize, mode: CouplingMode, rng: &mut ChaCha8Rng) -> RevnetBlock {
    let actnorm = rng.random_bool(0.5).then(|| random_actnorm(dim, rng));
    let cond = (cond_dim > 0).then(|| {
        let mut c = CondNet::new(cond_dim, 5, 3, rng);
        perturb(&mut c, 0.3, rng);
        c
    });
    let coupling = random_coupling(dim, if cond.is_some() { 3 } else { 0 }, mode, rng);
    RevnetBlock::new(actnorm, LinearLayer::Lu(random_lu(dim, rng)), Some(coupling), cond).expect("consistent block")
}

fn subjects(rng: &mut ChaCha8Rng, quick: bool) -> Vec<Subject> {
    let mut out = Vec::new();
    let reps = if quick { 1 } else { 3 };
    for _ in 0..reps {
        for dim in 2..=8 {
            out.push(Subject::ActNorm(random_actnorm(dim, rng)));
            out.push(Subject::Lu(random_lu(dim, rng)));
            for mode in [CouplingMode::Standard, CouplingMode::Fvc] {
                out.push(Subject::Coupling(random_coupling(dim, 0, mode, rng), None));
                let y = random_rows(rng, 1, 2, 1.0);
                out.push(Subject::Coupling(random_coupling(dim, 2, mode, rng), Some(y)));
                let y = random_rows(rng, 1, 3, 1.0);
                out.push(Subject::Block(random_block(dim, 3, mode, rng), Some(y)));
            }
        }
        for len in 1..=6 {
            let dim = rng.random_range(2..=8);
            let mode = if rng.random_bool(0.5) { CouplingMode::Fvc } else { CouplingMode::Standard };
            let blocks = (0..len).map(|_| random_block(dim, 2, mode, rng)).collect();
            out.push(Subject::Chain(blocks, random_rows(rng, 1, 2, 1.0)));
        }
    }
    out
}

/// Inverse-after-forward and forward-after-inverse on batches of every bijective subject.
pub fn roundtrip_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = SuiteReport::new("round-trip");
    for s in subjects(&mut rng, opts.quick) {
        let z = random_rows(&mut rng, 16, s.dim(), 1.5);
        let (x, _) = s.forward(&mut Tape::new(), &z)?;
        let back = s.inverse(&mut Tape::new(), &x)?;
        let err = back.max_abs_diff(&z);
        report.check(err < ROUNDTRIP_TOL, || format!("{}: inverse(forward(z)) error {err:e}", s.label()));
        let again = s.forward(&mut Tape::new(), &s.inverse(&mut Tape::new(), &z)?)?.0;
        let err = again.max_abs_diff(&z);
        report.check(err < ROUNDTRIP_TOL, || format!("{}: forward(inverse(x)) error {err:e}", s.label()));
    }
    // injective layers: pseudo-inverse recovers range points
    for c_in in 2..=6 {
        let c_out = c_in + rng.random_range(1..=3);
        let mut w = InjectiveLinear::random(c_in, c_out, &mut rng);
        perturb(&mut w, 0.3, &mut rng);
        let w = LinearLayer::Injective(w);
        let z = random_rows(&mut rng, 16, c_in, 1.5);
        let (x, _) = w.forward(&mut Tape::new(), &z)?;
        let err = w.inverse(&mut Tape::new(), &x)?.max_abs_diff(&z);
        report.check(err < ROUNDTRIP_TOL, || format!("injective({c_in}->{c_out}): pinv error {err:e}"));
    }
    Ok(report)
}

fn log_abs_det(j: &Tensor) -> Result<f64> {
    Ok(diffcore::apply(Op::LogDet, &[j])?.item())
}

/// Analytic log-dets against `log|det J|` of brute-force Jacobians; for
/// injective layers against `1/2 log det J^T J`.
pub fn logdet_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut report = SuiteReport::new("log-det");
    let flip = opts.fault == Fault::ActnormLogdetSign;
    for s in subjects(&mut rng, opts.quick) {
        for _ in 0..2 {
            let z = random_rows(&mut rng, 1, s.dim(), 1.5);
            let mut reported = s.forward(&mut Tape::new(), &z)?.1.data()[0];
            if flip {
                reported -= 2.0 * s.actnorm_logdet();
            }
            let j = diffcore::jacobian(|t, v| s.forward(t, v).map(|r| r.0).map_err(to_diff), &z)?;
            let brute = log_abs_det(&j)?;
            let err = (reported - brute).abs();
            report.check(err < LOGDET_TOL, || format!("{}: analytic {reported} vs brute force {brute}", s.label()));
        }
    }
    for c_in in 2..=6 {
        let c_out = c_in + rng.random_range(1..=3);
        let mut w = InjectiveLinear::random(c_in, c_out, &mut rng);
        perturb(&mut w, 0.3, &mut rng);
        let norm = random_actnorm(c_in, &mut rng);
        let w = LinearLayer::Injective(w);
        let z = random_rows(&mut rng, 1, c_in, 1.0);
        let run = |t: &mut Tape, v: &Tensor| -> Result<(Tensor, Tensor)> {
            let (a, la) = norm.forward(t, v)?;
            let (x, lw) = w.forward(t, &a)?;
            let sign = if flip { -1.0 } else { 1.0 };
            let la = t.scale(&la, sign)?;
            Ok((x, t.add(&la, &lw)?))
        };
        let reported = run(&mut Tape::new(), &z)?.1.data()[0];
        let j = diffcore::jacobian(|t, v| run(t, v).map(|r| r.0).map_err(to_diff), &z)?;
        let jt = diffcore::apply(Op::Transpose, &[&j])?;
        let jtj = diffcore::apply(Op::MatMul, &[&jt, &j])?;
        let brute = 0.5 * log_abs_det(&jtj)?;
        let err = (reported - brute).abs();
        report.check(err < LOGDET_TOL, || format!("injective({c_in}->{c_out}): analytic {reported} vs {brute}"));
    }
    Ok(report)
}

fn to_diff(e: Error) -> diffcore::DiffError {
    match e {
        Error::Diff(d) => d,
        other => diffcore::DiffError::Contract(other.to_string()),
    }
}

/// Fixed-volume couplings report a log-det of exactly one for any input.
pub fn fvc_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xf0c);
    let mut report = SuiteReport::new("fvc");
    let cases = if opts.quick { 1_000 } else { 10_000 };
    for _ in 0..cases {
        let dim = rng.random_range(2..=8);
        let cond = rng.random_range(0..=2);
        let c = random_coupling(dim, cond, CouplingMode::Fvc, &mut rng);
        let scale = rng.random_range(0.1..10.0);
        let z = random_rows(&mut rng, 1, dim, scale);
        let y = (cond > 0).then(|| random_rows(&mut rng, 1, cond, scale));
        let ld = c.forward(&mut Tape::new(), &z, y.as_ref())?.1.item();
        report.check((ld - 1.0).abs() < FVC_TOL, || format!("fvc(d={dim}): logdet {ld}"));
    }
    Ok(report)
}

/// Finite-difference checks of both phase losses on a 1% parameter subsample
/// of a fiber-bundle sized model and on all parameters of a small skip model.
pub fn gradient_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9ad);
    let mut report = SuiteReport::new("gradient");
    let mut fiber = Architecture::expander(2, 3, 2, 4, 6);
    fiber.h_mode = CouplingMode::Fvc;
    let mut skip = Architecture::expander(2, 6, 4, 1, 2);
    skip.g_widths = vec![2, 4, 6];
    skip.injective_blocks = true;
    skip.g_actnorm = true;
    skip.skip = true;
    skip.hidden = vec![6];
    skip.cond_hidden = 5;
    skip.cond_features = 3;
    skip.h_mode = CouplingMode::Standard;
    for (arch, fraction) in [(fiber, 0.01), (skip, 1.0)] {
        let mut model = CTrumpet::new(arch, &mut rng)?;
        perturb(&mut model, 0.1, &mut rng);
        let x = random_rows(&mut rng, 8, model.data_dim(), 1.0);
        let y = random_rows(&mut rng, 8, model.cond_dim(), 1.0);
        let zp = model.pinv(&x, &y)?;
        for (phase, input) in [(Phase::Mse, &x), (Phase::Ml, &zp)] {
            let g = gradient_check(&model, phase, input, &y, fraction, GRAD_REL_TOL, GRAD_ABS_TOL, &mut rng)?;
            report.check(g.passed(), || {
                format!("{phase} phase: {} of {} entries off, worst relative error {:e}", g.failures, g.checked, g.max_rel_error)
            });
        }
    }
    Ok(report)
}

/// Covariance-form posterior against the information form
/// `Sigma_post = (Sigma^-1 + A^T A / lambda^2)^-1`, plus its structural properties.
pub fn posterior_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x905);
    let mut report = SuiteReport::new("posterior-oracle");
    let n = 6;
    let prior = GrfPrior::squared_exponential_with(n, 2.0)?;
    let info_form = |fwd: &LinearForward, y: &DVector<f64>| -> Option<(DVector<f64>, DMatrix<f64>)> {
        let prec = prior.cov.clone().try_inverse()?;
        let l2 = fwd.noise_std * fwd.noise_std;
        let post_prec = prec.clone() + fwd.a.transpose() * &fwd.a / l2;
        let cov = post_prec.try_inverse()?;
        let mean = &cov * (prec * &prior.mean + fwd.a.transpose() * y / l2);
        Some((mean, cov))
    };
    for (origin, size, lambda) in [((1, 1), (3, 3), 0.5), ((0, 0), (6, 2), 0.1), ((2, 1), (2, 4), 1.0)] {
        let fwd = LinearForward::new(mask_operator(n, origin, size)?, lambda)?;
        let x = prior.sample(1, &mut rng);
        let y = fwd.measure(&x, &mut rng).row(0).transpose();
        let post = analytic_posterior(&prior, &fwd, &y)?;
        let (mean, cov) = info_form(&fwd, &y).ok_or_else(|| Error::Degenerate("singular precision".into()))?;
        let scale = prior.cov.amax();
        let (dm, dc) = ((post.mean.clone() - mean).amax(), (post.cov.clone() - cov).amax());
        report.check(dm < 1e-6 * scale.max(1.0) && dc < 1e-6 * scale, || format!("mask {size:?}: mean gap {dm:e}, covariance gap {dc:e}"));
        let shrink = (prior.cov.clone() - post.cov.clone()).symmetric_eigenvalues().min();
        report.check(shrink >= -1e-8, || format!("mask {size:?}: prior minus posterior has eigenvalue {shrink:e}"));
    }
    let zero = LinearForward::new(DMatrix::zeros(3, n * n), 0.2)?;
    let post = analytic_posterior(&prior, &zero, &DVector::from_element(3, 1.0))?;
    let gap = (post.cov - prior.cov.clone()).amax().max((post.mean - prior.mean.clone()).amax());
    report.check(gap < 1e-12, || format!("A = 0: posterior differs from prior by {gap:e}"));
    let sharp = LinearForward::new(mask_operator(n, (0, 0), (3, 3))?, 1e-6)?;
    let x = prior.sample(1, &mut rng);
    let y = sharp.measure(&x, &mut rng).row(0).transpose();
    let post = analytic_posterior(&prior, &sharp, &y)?;
    let gap = (&sharp.a * &post.mean - &y).amax();
    report.check(gap < 1e-4, || format!("lambda -> 0: observed pixels off by {gap:e}"));
    Ok(report)
}

pub type Suite = fn(&VerifyOptions) -> Result<SuiteReport>;

pub const SUITES: [(&str, Suite); 5] = [
    ("round-trip", roundtrip_suite),
    ("log-det", logdet_suite),
    ("fvc", fvc_suite),
    ("gradient", gradient_suite),
    ("posterior-oracle", posterior_suite),
];

/// Run every suite; an error inside a suite counts as a failure of that suite.
pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteReport> {
    SUITES
        .iter()
        .map(|(name, suite)| {
            suite(opts).unwrap_or_else(|e| SuiteReport { name, checks: 1, failures: vec![format!("suite error: {e}")] })
        })
        .collect()
}
