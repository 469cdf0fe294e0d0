//! Two-phase training: a projection (MSE) phase fitting the injective part
//! and a maximum-likelihood phase fitting the bijective part on the
//! intermediate latents of the frozen injective part.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Tape, Tensor};
use crate::model::CTrumpet;
use crate::{Error, Result};

/// Losses above this (or non-finite) abort training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_mse: usize,
    pub epochs_ml: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs_mse: 150, epochs_ml: 150, batch_size: 128, lr: 1e-3, adam_betas: (0.9, 0.999), adam_eps: 1e-8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("adam betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be positive, got {}", self.adam_eps)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_betas.0, beta2: self.adam_betas.1, eps: self.adam_eps }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Moment accumulators for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros = |p: &&Tensor| Tensor::zeros(p.shape().to_vec());
        Self { step: 0, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect() }
    }

    /// One bias-corrected Adam step over a parameter group.
    pub fn apply(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam: {} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            *p = adam_update(p, g, &mut self.m[i], &mut self.v[i], self.step, cfg)?;
        }
        Ok(())
    }
}

/// Adam update of a single tensor; `step` counts from 1.
pub fn adam_update(param: &Tensor, grad: &Tensor, m: &mut Tensor, v: &mut Tensor, step: u64, cfg: &AdamConfig) -> Result<Tensor> {
    if param.shape() != grad.shape() || param.shape() != m.shape() || param.shape() != v.shape() {
        return Err(Error::Contract(format!(
            "adam: parameter {:?}, gradient {:?}, moments {:?}",
            param.shape(),
            grad.shape(),
            m.shape()
        )));
    }
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    let n = param.numel();
    let (mut nm, mut nv, mut np) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let g = grad.data()[i];
        let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
        let update = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        nm.push(mi);
        nv.push(vi);
        np.push(param.data()[i] - update);
    }
    *m = Tensor::new(m.shape().to_vec(), nm)?;
    *v = Tensor::new(v.shape().to_vec(), nv)?;
    Ok(Tensor::new(param.shape().to_vec(), np)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mse,
    Ml,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Mse => "mse",
            Phase::Ml => "ml",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub phase: Phase,
    pub epoch: usize,
    /// Optimizer steps taken in this phase so far.
    pub step: u64,
    pub loss: f64,
}

/// Everything needed to resume training bitwise.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    /// Completed epochs of the current phase.
    pub epoch: usize,
    pub adam_gamma: AdamState,
    pub adam_eta: AdamState,
    pub history: Vec<EpochLoss>,
}

impl TrainState {
    pub fn new(model: &CTrumpet) -> Self {
        Self {
            phase: Phase::Mse,
            epoch: 0,
            adam_gamma: AdamState::new(&model.gamma_params()),
            adam_eta: AdamState::new(&model.eta_params()),
            history: Vec::new(),
        }
    }

    pub fn is_finished(&self, cfg: &TrainConfig) -> bool {
        self.phase == Phase::Ml && self.epoch >= cfg.epochs_ml
    }
}

/// Paired training samples: data `x` (`[N, D]`) and conditioning input (`[N, C]`).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub x: Tensor,
    pub cond: Tensor,
}

impl TrainingSet {
    pub fn new(x: Tensor, cond: Tensor) -> Result<Self> {
        if x.rank() != 2 || cond.rank() != 2 || x.rows() != cond.rows() {
            return Err(Error::Contract(format!("data {:?} and conditioning {:?} must pair up", x.shape(), cond.shape())));
        }
        Ok(Self { x, cond })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rows `idx` of a matrix.
pub fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), c], data).expect("rows of a finite tensor")
}

/// Batch mean of `|x - g(g_pinv(x; y); y)|^2`.
pub fn mse_loss(model: &CTrumpet, tape: &mut Tape, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let f = model.g_features(tape, y)?;
    let zp = model.g_pinv_with(tape, x, y, &f)?;
    let (xr, _) = model.g_forward_with(tape, &zp, y, &f)?;
    let r = tape.sub(x, &xr)?;
    let sq = tape.mul(&r, &r)?;
    let per = tape.sum_last(&sq)?;
    Ok(tape.mean(&per)?)
}

/// Batch mean of the negative log-likelihood of intermediate latents.
pub fn ml_loss(model: &CTrumpet, tape: &mut Tape, zp: &Tensor, y: &Tensor) -> Result<Tensor> {
    let ll = model.latent_loglik(tape, zp, y)?;
    let m = tape.mean(&ll)?;
    Ok(tape.scale(&m, -1.0)?)
}

fn link(params: Vec<&mut Tensor>, tape: &mut Tape) {
    for p in params {
        *p = tape.leaf(p);
    }
}

fn unlink(params: Vec<&mut Tensor>) {
    for p in params {
        *p = p.detach();
    }
}

/// Loss and gradient of one phase's loss with respect to that phase's parameters.
pub fn loss_and_grad(model: &mut CTrumpet, phase: Phase, input: &Tensor, y: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let loss = match phase {
        Phase::Mse => {
            link(model.gamma_params_mut(), &mut tape);
            let l = mse_loss(model, &mut tape, input, y);
            l.and_then(|l| Ok((l.clone(), tape.backward(&l)?)))
        }
        Phase::Ml => {
            link(model.eta_params_mut(), &mut tape);
            let l = ml_loss(model, &mut tape, input, y);
            l.and_then(|l| Ok((l.clone(), tape.backward(&l)?)))
        }
    };
    let grads = loss.map(|(l, g)| {
        let params = match phase {
            Phase::Mse => model.gamma_params(),
            Phase::Ml => model.eta_params(),
        };
        let gs = params.iter().map(|p| g.get(p).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))).collect();
        (l.item(), gs)
    });
    unlink(model.gamma_params_mut());
    unlink(model.eta_params_mut());
    grads
}

/// Loss value without gradient tracking.
pub fn loss_value(model: &CTrumpet, phase: Phase, input: &Tensor, y: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let l = match phase {
        Phase::Mse => mse_loss(model, &mut tape, input, y)?,
        Phase::Ml => ml_loss(model, &mut tape, input, y)?,
    };
    Ok(l.item())
}

fn diverged(phase: Phase, epoch: usize, step: u64, loss: f64) -> Error {
    Error::Divergence { phase: phase.to_string(), epoch, step: step as usize, loss }
}

fn guard(phase: Phase, epoch: usize, step: u64, r: Result<(f64, Vec<Tensor>)>) -> Result<(f64, Vec<Tensor>)> {
    match r {
        Ok((l, _)) if !l.is_finite() || l > DIVERGENCE_THRESHOLD => Err(diverged(phase, epoch, step, l)),
        Err(Error::Diff(DiffError::NonFinite { .. })) => Err(diverged(phase, epoch, step, f64::NAN)),
        other => other,
    }
}

/// One optimizer step of the projection phase; only injective-part
/// parameters move. Returns the batch loss before the update.
pub fn mse_step(model: &mut CTrumpet, x: &Tensor, y: &Tensor, adam: &mut AdamState, cfg: &AdamConfig) -> Result<f64> {
    let (loss, grads) = guard(Phase::Mse, 0, adam.step, loss_and_grad(model, Phase::Mse, x, y))?;
    adam.apply(model.gamma_params_mut(), &grads, cfg)?;
    Ok(loss)
}

/// One optimizer step of the likelihood phase on intermediate latents `zp`;
/// only bijective-part parameters move.
pub fn ml_step(model: &mut CTrumpet, zp: &Tensor, y: &Tensor, adam: &mut AdamState, cfg: &AdamConfig) -> Result<f64> {
    let (loss, grads) = guard(Phase::Ml, 0, adam.step, loss_and_grad(model, Phase::Ml, zp, y))?;
    adam.apply(model.eta_params_mut(), &grads, cfg)?;
    Ok(loss)
}

/// Shuffling stream for one epoch of one phase.
fn epoch_rng(seed: u64, phase: Phase, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((phase as u64) << 40) | epoch as u64);
    rng
}

fn epoch_batches(n: usize, batch: usize, seed: u64, phase: Phase, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, phase, epoch));
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Intermediate latents `g_pinv(x; y)` of a whole set, in chunks.
pub fn intermediate_latents(model: &CTrumpet, data: &TrainingSet) -> Result<Tensor> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len() * model.latent_dim());
    for c in idx.chunks(1024) {
        let zp = model.pinv(&select_rows(&data.x, c), &select_rows(&data.cond, c))?;
        out.extend_from_slice(zp.data());
    }
    Ok(Tensor::new(vec![data.len(), model.latent_dim()], out)?)
}

fn has_uninitialized(flags: &[bool]) -> bool {
    flags.iter().any(|f| !f)
}

/// Run (or resume) both phases. `on_epoch` sees the model and state after
/// every completed epoch and may persist them.
pub fn train<F>(model: &mut CTrumpet, data: &TrainingSet, cfg: &TrainConfig, state: &mut TrainState, mut on_epoch: F) -> Result<()>
where
    F: FnMut(&CTrumpet, &TrainState) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if data.x.cols() != model.data_dim() || data.cond.cols() != model.cond_dim() {
        return Err(Error::Contract(format!(
            "training set is [{}, {}] with {} conditioning columns, model expects {} and {}",
            data.len(),
            data.x.cols(),
            data.cond.cols(),
            model.data_dim(),
            model.cond_dim()
        )));
    }
    let adam = cfg.adam();
    let n_g_norms = model.g_layers.iter().filter(|l| l.block().actnorm.is_some()).count();

    if state.phase == Phase::Mse {
        while state.epoch < cfg.epochs_mse {
            let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, Phase::Mse, state.epoch);
            let mut total = 0.0;
            for b in &batches {
                let x = select_rows(&data.x, b);
                let y = select_rows(&data.cond, b);
                if has_uninitialized(&model.actnorm_flags()[..n_g_norms]) {
                    model.initialize_g_actnorm(&x, &y)?;
                }
                let r = loss_and_grad(model, Phase::Mse, &x, &y);
                let (loss, grads) = guard(Phase::Mse, state.epoch, state.adam_gamma.step, r)?;
                state.adam_gamma.apply(model.gamma_params_mut(), &grads, &adam)?;
                total += loss * b.len() as f64;
            }
            state.history.push(EpochLoss {
                phase: Phase::Mse,
                epoch: state.epoch,
                step: state.adam_gamma.step,
                loss: total / data.len() as f64,
            });
            state.epoch += 1;
            on_epoch(model, state)?;
        }
        state.phase = Phase::Ml;
        state.epoch = 0;
    }

    if state.epoch < cfg.epochs_ml {
        let zp_all = intermediate_latents(model, data)?;
        while state.epoch < cfg.epochs_ml {
            let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, Phase::Ml, state.epoch);
            let mut total = 0.0;
            for b in &batches {
                let zp = select_rows(&zp_all, b);
                let y = select_rows(&data.cond, b);
                if has_uninitialized(&model.actnorm_flags()[n_g_norms..]) {
                    model.initialize_h_actnorm(&zp, &y)?;
                }
                let r = loss_and_grad(model, Phase::Ml, &zp, &y);
                let (loss, grads) = guard(Phase::Ml, state.epoch, state.adam_eta.step, r)?;
                state.adam_eta.apply(model.eta_params_mut(), &grads, &adam)?;
                total += loss * b.len() as f64;
            }
            state.history.push(EpochLoss {
                phase: Phase::Ml,
                epoch: state.epoch,
                step: state.adam_eta.step,
                loss: total / data.len() as f64,
            });
            state.epoch += 1;
            on_epoch(model, state)?;
        }
    }
    Ok(())
}

/// Outcome of a finite-difference check on a parameter subsample.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Compare reverse-mode gradients of a phase loss against central finite
/// differences on a random `fraction` of that phase's scalar parameters.
///
/// An entry passes when `|ad - fd| <= rel_tol * max(|ad|, |fd|)` or
/// `|ad - fd| <= abs_tol`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check<R: Rng + ?Sized>(
    model: &CTrumpet,
    phase: Phase,
    input: &Tensor,
    y: &Tensor,
    fraction: f64,
    rel_tol: f64,
    abs_tol: f64,
    rng: &mut R,
) -> Result<GradCheck> {
    let mut work = model.clone();
    let (_, grads) = loss_and_grad(&mut work, phase, input, y)?;
    let sizes: Vec<usize> = grads.iter().map(|g| g.numel()).collect();
    let total: usize = sizes.iter().sum();
    let count = ((total as f64 * fraction).ceil() as usize).clamp(1.min(total), total);
    let picks = rand::seq::index::sample(rng, total, count).into_vec();
    let step = 1e-5;
    let mut report = GradCheck { checked: 0, failures: 0, max_rel_error: 0.0 };
    for flat in picks {
        let (mut t, mut k) = (0, flat);
        while k >= sizes[t] {
            k -= sizes[t];
            t += 1;
        }
        let eval = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            {
                let mut params = match phase {
                    Phase::Mse => m.gamma_params_mut(),
                    Phase::Ml => m.eta_params_mut(),
                };
                let p = &mut params[t];
                let mut data = p.to_vec();
                data[k] += delta;
                **p = Tensor::new(p.shape().to_vec(), data)?;
            }
            loss_value(&m, phase, input, y)
        };
        let fd = (eval(step)? - eval(-step)?) / (2.0 * step);
        let ad = grads[t].data()[k];
        let diff = (ad - fd).abs();
        let scale = ad.abs().max(fd.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        if diff > abs_tol {
            report.max_rel_error = report.max_rel_error.max(rel);
        }
        if diff > rel_tol * scale && diff > abs_tol {
            report.failures += 1;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
