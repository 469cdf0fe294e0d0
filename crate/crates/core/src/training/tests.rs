use super::*;
use crate::flow::{ActNorm, CouplingMode, LinearLayer, LuLinear, Parameters, RevnetBlock};
use crate::model::{Architecture, CTrumpet};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_rows(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * r.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn jiggle(model: &mut CTrumpet, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for p in model.params_mut() {
        let data = p.data().iter().map(|v| v + scale * r.random_range(-1.0..1.0)).collect();
        *p = Tensor::new(p.shape().to_vec(), data).unwrap();
    }
}

fn small_model(seed: u64) -> CTrumpet {
    let mut a = Architecture::expander(2, 4, 2, 1, 2);
    a.g_widths = vec![2, 3, 4];
    a.injective_blocks = true;
    a.g_actnorm = true;
    a.skip = true;
    a.hidden = vec![5];
    a.cond_hidden = 4;
    a.cond_features = 2;
    let mut m = CTrumpet::new(a, &mut rng(seed)).unwrap();
    jiggle(&mut m, seed + 100, 0.2);
    m
}

fn bits(ts: &[&Tensor]) -> Vec<u64> {
    ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

fn cfg() -> AdamConfig {
    TrainConfig::default().adam()
}

#[test]
fn zero_gradient_leaves_parameter_unchanged() {
    let p = Tensor::vector(vec![1.0, -2.0]);
    let (mut m, mut v) = (Tensor::zeros(vec![2]), Tensor::zeros(vec![2]));
    let out = adam_update(&p, &Tensor::zeros(vec![2]), &mut m, &mut v, 1, &cfg()).unwrap();
    assert_eq!(out.data(), p.data());
}

#[test]
fn first_step_moves_by_learning_rate_against_gradient() {
    let p = Tensor::vector(vec![0.0, 0.0, 0.0]);
    let g = Tensor::vector(vec![3.0, -0.02, 1e-3]);
    let (mut m, mut v) = (Tensor::zeros(vec![3]), Tensor::zeros(vec![3]));
    let out = adam_update(&p, &g, &mut m, &mut v, 1, &cfg()).unwrap();
    for (o, gi) in out.data().iter().zip(g.data()) {
        assert!((o + 1e-3 * gi.signum()).abs() < 1e-7, "{o}");
    }
}

#[test]
fn quadratic_bowl_converges() {
    let mut p = Tensor::vector(vec![1.0, -1.0, 0.5]);
    let mut state = AdamState::new(&[&p]);
    let c = AdamConfig { lr: 1e-2, ..cfg() };
    for _ in 0..500 {
        let g = Tensor::vector(p.data().iter().map(|v| 2.0 * v).collect());
        state.apply(vec![&mut p], &[g], &c).unwrap();
    }
    let norm = p.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "{norm}");
}

#[test]
fn phases_touch_only_their_parameters() {
    let mut model = small_model(1);
    let mut r = rng(2);
    let x = random_rows(&mut r, 8, 4, 1.0);
    let y = random_rows(&mut r, 8, 2, 1.0);
    let eta = bits(&model.eta_params());
    let gamma = bits(&model.gamma_params());
    let mut ag = AdamState::new(&model.gamma_params());
    mse_step(&mut model, &x, &y, &mut ag, &cfg()).unwrap();
    assert_eq!(bits(&model.eta_params()), eta);
    assert_ne!(bits(&model.gamma_params()), gamma);

    let gamma = bits(&model.gamma_params());
    let zp = model.pinv(&x, &y).unwrap();
    let mut ae = AdamState::new(&model.eta_params());
    ml_step(&mut model, &zp, &y, &mut ae, &cfg()).unwrap();
    assert_eq!(bits(&model.gamma_params()), gamma);
    assert_ne!(bits(&model.eta_params()), eta);
    assert!(model.params().iter().all(|p| !p.is_tracked()));
}

#[test]
fn on_range_data_is_a_fixed_point() {
    let mut model = small_model(3);
    let mut r = rng(4);
    let zp = random_rows(&mut r, 6, 2, 1.0);
    let y = random_rows(&mut r, 6, 2, 1.0);
    let (x, _) = model.g_forward(&mut Tape::new(), &zp, &y).unwrap();
    let (loss, grads) = loss_and_grad(&mut model, Phase::Mse, &x, &y).unwrap();
    assert!(loss < 1e-12, "{loss}");
    let gmax = grads.iter().flat_map(|g| g.data().iter()).fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(gmax < 1e-5, "{gmax}");
}

#[test]
fn phase_gradients_match_finite_differences() {
    let model = small_model(5);
    let mut r = rng(6);
    let x = random_rows(&mut r, 5, 4, 1.0);
    let y = random_rows(&mut r, 5, 2, 1.0);
    let mse = gradient_check(&model, Phase::Mse, &x, &y, 1.0, 1e-5, 1e-7, &mut rng(7)).unwrap();
    assert!(mse.passed(), "{mse:?}");
    let zp = model.pinv(&x, &y).unwrap();
    let ml = gradient_check(&model, Phase::Ml, &zp, &y, 1.0, 1e-5, 1e-7, &mut rng(8)).unwrap();
    assert!(ml.passed(), "{ml:?}");
}

#[test]
fn standard_normal_latents_have_expected_nll() {
    let mut a = Architecture::expander(2, 2, 1, 0, 0);
    a.h_mode = CouplingMode::Standard;
    let model = CTrumpet::identity(a).unwrap();
    let z = model.latent().sample(10_000, &mut rng(9));
    let y = Tensor::zeros(vec![10_000, 1]);
    let loss = loss_value(&model, Phase::Ml, &z, &y).unwrap();
    let expect = (2.0 * std::f64::consts::PI).ln() + 1.0;
    assert!((loss - expect).abs() < 0.05 * expect, "{loss} vs {expect}");
}

#[test]
fn pure_actnorm_learns_the_data_scale() {
    // Intermediate latents with standard deviation 2. The block is an actnorm
    // followed by an identity-initialized linear layer, so the generative map
    // z' = W diag(1/sigma) (z - mu) must reach A A^T = 4 I.
    let mut a = Architecture::expander(2, 2, 1, 0, 1);
    a.h_mode = CouplingMode::Standard;
    let mut norm = ActNorm::new(2);
    norm.initialized = true;
    let block = RevnetBlock::new(Some(norm), LinearLayer::Lu(LuLinear::identity(2)), None, None).unwrap();
    let mut model = CTrumpet::from_layers(a, vec![], vec![block]).unwrap();
    let zp = {
        let z = model.latent().sample(4096, &mut rng(10));
        Tensor::new(z.shape().to_vec(), z.data().iter().map(|v| 2.0 * v).collect()).unwrap()
    };
    let data = TrainingSet::new(zp, Tensor::zeros(vec![4096, 1])).unwrap();
    let tc = TrainConfig { epochs_mse: 0, epochs_ml: 40, lr: 5e-3, ..TrainConfig::default() };
    let mut state = TrainState::new(&model);
    train(&mut model, &data, &tc, &mut state, |_, _| Ok(())).unwrap();
    let block = &model.h_layers[0];
    let sigma = block.actnorm.as_ref().unwrap().sigma();
    let LinearLayer::Lu(lu) = &block.linear else { unreachable!() };
    let w = lu.weight();
    let amat = |i: usize, j: usize| w.at2(i, j) / sigma[j];
    for i in 0..2 {
        for j in 0..2 {
            let aat: f64 = (0..2).map(|k| amat(i, k) * amat(j, k)).sum();
            let (mi, mj) = (mean_col(&data.x, i), mean_col(&data.x, j));
            let cov = (0..4096).map(|r| (data.x.at2(r, i) - mi) * (data.x.at2(r, j) - mj)).sum::<f64>() / 4096.0;
            let expect = if i == j { 4.0 } else { 0.0 };
            assert!((aat - cov).abs() < 0.05 * 4.0, "A A^T[{i}{j}] = {aat}, sample covariance {cov}");
            assert!((aat - expect).abs() < 0.1 * 4.0, "A A^T[{i}{j}] = {aat}");
        }
    }
}

fn mean_col(t: &Tensor, j: usize) -> f64 {
    (0..t.rows()).map(|i| t.at2(i, j)).sum::<f64>() / t.rows() as f64
}

fn toy_set(seed: u64, n: usize) -> TrainingSet {
    let mut r = rng(seed);
    let cond = random_rows(&mut r, n, 2, 1.0);
    let x = random_rows(&mut r, n, 4, 0.5);
    TrainingSet::new(x, cond).unwrap()
}

#[test]
fn zero_epochs_return_initial_parameters() {
    let mut model = small_model(11);
    let before = bits(&model.params());
    let flags = model.actnorm_flags();
    let tc = TrainConfig { epochs_mse: 0, epochs_ml: 0, ..TrainConfig::default() };
    let mut state = TrainState::new(&model);
    train(&mut model, &toy_set(12, 20), &tc, &mut state, |_, _| Ok(())).unwrap();
    assert_eq!(bits(&model.params()), before);
    assert_eq!(model.actnorm_flags(), flags);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let data = toy_set(13, 40);
    let tc = TrainConfig { epochs_mse: 3, epochs_ml: 3, batch_size: 16, seed: 5, ..TrainConfig::default() };
    let run = || {
        let mut m = small_model(14);
        let mut s = TrainState::new(&m);
        let mut snaps = Vec::new();
        train(&mut m, &data, &tc, &mut s, |m, s| {
            snaps.push((m.clone(), s.clone()));
            Ok(())
        })
        .unwrap();
        (m, s, snaps)
    };
    let (a, sa, snaps) = run();
    let (b, _, _) = run();
    assert_eq!(bits(&a.params()), bits(&b.params()));
    assert_eq!(sa.history.len(), 6);

    // resume from the end of every epoch
    for (m, s) in snaps {
        let (mut m, mut s) = (m, s);
        train(&mut m, &data, &tc, &mut s, |_, _| Ok(())).unwrap();
        assert_eq!(bits(&m.params()), bits(&a.params()));
        assert_eq!(s, sa);
    }
}

#[test]
fn divergence_is_reported() {
    let mut model = small_model(15);
    let mut data = toy_set(16, 10);
    data.x = Tensor::new(data.x.shape().to_vec(), data.x.data().iter().map(|v| v * 1e5).collect()).unwrap();
    for l in &mut model.g_layers {
        l.block_mut().actnorm = None;
    }
    let tc = TrainConfig { epochs_mse: 1, epochs_ml: 0, ..TrainConfig::default() };
    let mut state = TrainState::new(&model);
    let err = train(&mut model, &data, &tc, &mut state, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn invalid_config_rejected() {
    let bad = TrainConfig { adam_betas: (1.0, 0.999), ..TrainConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

