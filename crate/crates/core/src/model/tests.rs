use super::*;
use crate::diffcore::Op;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn arch(d: usize, widths: Vec<usize>, cond_dim: usize) -> Architecture {
    let mut a = Architecture::expander(d, *widths.last().unwrap(), cond_dim, 1, 2);
    a.g_widths = widths;
    a.hidden = vec![6];
    a.cond_hidden = 5;
    a.cond_features = 3;
    a
}

fn random_rows(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * r.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Perturb every parameter so coupling networks are no longer zero.
fn jiggle(model: &mut CTrumpet, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for p in model.params_mut() {
        let data = p.data().iter().map(|v| v + scale * r.random_range(-1.0..1.0)).collect();
        *p = Tensor::new(p.shape().to_vec(), data).unwrap();
    }
}

#[test]
fn identity_model_pads_and_truncates() {
    let mut a = arch(2, vec![2, 4], 1);
    a.h_mode = CouplingMode::Standard;
    let model = CTrumpet::identity(a).unwrap();
    let z = Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
    let y = Tensor::new(vec![2, 1], vec![0.1, 0.9]).unwrap();
    let x = model.sample(&z, &y).unwrap();
    assert_eq!(x.data(), &[0.3, -1.2, 0.0, 0.0, 2.0, 0.5, 0.0, 0.0]);
    let off = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let zp = model.pinv(&off, &Tensor::zeros(vec![1, 1])).unwrap();
    assert_eq!(zp.data(), &[1.0, 2.0]);
}

#[test]
fn sampling_is_deterministic() {
    let mut model = CTrumpet::new(arch(2, vec![2, 3], 2), &mut rng(1)).unwrap();
    jiggle(&mut model, 2, 0.3);
    let mut r = rng(3);
    let z = random_rows(&mut r, 5, 2, 1.0);
    let y = random_rows(&mut r, 5, 2, 1.0);
    let a = model.sample(&z, &y).unwrap();
    let b = model.sample(&z, &y).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

fn skip_model() -> CTrumpet {
    let mut a = arch(2, vec![2, 4, 6], 5);
    a.injective_blocks = true;
    a.g_actnorm = true;
    a.skip = true;
    let mut model = CTrumpet::new(a, &mut rng(4)).unwrap();
    jiggle(&mut model, 5, 0.2);
    model
}

#[test]
fn pinv_recovers_range_points_and_projection_is_idempotent() {
    let model = skip_model();
    let mut r = rng(6);
    let zp = random_rows(&mut r, 4, 2, 1.0);
    let y = random_rows(&mut r, 4, 5, 1.0);
    let (x, _) = model.g_forward(&mut Tape::new(), &zp, &y).unwrap();
    let back = model.pinv(&x, &y).unwrap();
    assert!(back.max_abs_diff(&zp) < 1e-8);
    assert!(model.range_project(&x, &y).unwrap().max_abs_diff(&x) < 1e-8);

    let off = random_rows(&mut r, 4, 6, 1.0);
    let p1 = model.range_project(&off, &y).unwrap();
    let p2 = model.range_project(&p1, &y).unwrap();
    assert!(off.max_abs_diff(&p1) > 1e-3);
    assert!(p2.max_abs_diff(&p1) < 1e-8);
}

#[test]
fn linear_expander_projects_orthogonally() {
    let mut a = arch(2, vec![2, 4], 1);
    a.g_blocks_per_width = 0;
    a.h_blocks = 0;
    let model = CTrumpet::new(a, &mut rng(7)).unwrap();
    let w = model.g_layers[0].block().linear.clone();
    let LinearLayer::Injective(w) = w else { panic!("expansion layer") };
    let w = w.weight();
    let wt = diffcore::apply(Op::Transpose, &[&w]).unwrap();
    let wtw = diffcore::apply(Op::MatMul, &[&wt, &w]).unwrap();
    let inv = diffcore::apply(Op::Solve, &[&wtw, &wt]).unwrap();
    let proj = diffcore::apply(Op::MatMul, &[&w, &inv]).unwrap();
    let x = Tensor::new(vec![1, 4], vec![0.4, -1.0, 2.0, 0.7]).unwrap();
    let expect = diffcore::apply(Op::MatMul, &[&x, &proj]).unwrap();
    let got = model.range_project(&x, &Tensor::zeros(vec![1, 1])).unwrap();
    assert!(got.max_abs_diff(&expect) < 1e-10);
}

#[test]
fn intermediate_loglik_examples() {
    let mut a = arch(2, vec![2], 1);
    a.g_blocks_per_width = 0;
    a.h_blocks = 0;
    let model = CTrumpet::identity(a.clone()).unwrap();
    let y = Tensor::zeros(vec![1, 1]);
    let at_origin = model.intermediate_loglik(&Tensor::zeros(vec![1, 2]), &y).unwrap()[0];
    assert!((at_origin + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);

    // h is a single actnorm with sigma = 2: z = 2 z', loglik gains 2 log 2
    let scaled = RevnetBlock::new(
        Some(ActNorm::from_mu_sigma(&[0.0, 0.0], &[2.0, 2.0]).unwrap()),
        LinearLayer::Lu(LuLinear::identity(2)),
        None,
        None,
    )
    .unwrap();
    let mut a2 = a.clone();
    a2.h_blocks = 1;
    let model2 = CTrumpet::from_layers(a2, vec![], vec![scaled]).unwrap();
    let x = Tensor::new(vec![1, 2], vec![0.3, -0.4]).unwrap();
    let base = model.intermediate_loglik(&Tensor::new(vec![1, 2], vec![0.6, -0.8]).unwrap(), &y).unwrap()[0];
    let got = model2.intermediate_loglik(&x, &y).unwrap()[0];
    assert!((got - (base + 2.0 * 2f64.ln())).abs() < 1e-14);
}

#[test]
fn latent_loglik_matches_bruteforce_change_of_variables() {
    let mut a = arch(3, vec![3], 2);
    a.g_blocks_per_width = 0;
    a.h_blocks = 3;
    a.h_mode = CouplingMode::Standard;
    let mut model = CTrumpet::new(a, &mut rng(8)).unwrap();
    jiggle(&mut model, 9, 0.3);
    let mut r = rng(10);
    for _ in 0..5 {
        let zp = random_rows(&mut r, 1, 3, 1.5);
        let y = random_rows(&mut r, 1, 2, 1.0);
        let got = model.latent_loglik(&mut Tape::new(), &zp, &y).unwrap().item();
        let z = model.h_inverse(&mut Tape::new(), &zp, &y).unwrap();
        let j = diffcore::jacobian(|t, v| model.h_inverse(t, v, &y).map_err(into_diff), &zp).unwrap();
        let ld = diffcore::apply(Op::LogDet, &[&j]).unwrap().item();
        let lp = model.latent().log_density(&mut Tape::new(), &z).unwrap().item();
        assert!((got - (lp + ld)).abs() < 1e-7, "{got} vs {}", lp + ld);
    }
}

#[test]
fn surrogate_map_contract_and_manifold_membership() {
    let mut a = arch(2, vec![2, 3], 2);
    a.h_mode = CouplingMode::Standard;
    let standard = CTrumpet::new(a.clone(), &mut rng(11)).unwrap();
    let y = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
    assert!(matches!(standard.surrogate_map(&y), Err(Error::Contract(_))));

    a.h_mode = CouplingMode::Fvc;
    let identity = CTrumpet::identity(a.clone()).unwrap();
    assert!(identity.surrogate_map(&y).unwrap().data().iter().all(|&v| v == 0.0));

    let mut model = CTrumpet::new(a, &mut rng(12)).unwrap();
    jiggle(&mut model, 13, 0.3);
    let map = model.surrogate_map(&y).unwrap();
    assert!(model.range_project(&map, &y).unwrap().max_abs_diff(&map) < 1e-8);
}

#[test]
fn bruteforce_data_loglik_reduces_to_intermediate_for_identity_g() {
    let mut a = arch(2, vec![2, 3], 1);
    a.g_blocks_per_width = 0;
    a.h_mode = CouplingMode::Standard;
    let mut model = CTrumpet::identity(a).unwrap();
    for b in &mut model.h_layers {
        b.linear = LinearLayer::Lu(LuLinear::random(2, &mut rng(14)));
    }
    let x = Tensor::new(vec![1, 3], vec![0.2, 0.7, 0.0]).unwrap();
    let y = Tensor::zeros(vec![1, 1]);
    let a = model.data_loglik_bruteforce(&x, &y).unwrap();
    let b = model.intermediate_loglik(&x, &y).unwrap()[0];
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn distinct_latents_give_distinct_samples() {
    let mut model = CTrumpet::new(arch(2, vec![2, 3], 2), &mut rng(15)).unwrap();
    jiggle(&mut model, 16, 0.3);
    let mut r = rng(17);
    let y = random_rows(&mut r, 1, 2, 1.0);
    for _ in 0..50 {
        let z = random_rows(&mut r, 2, 2, 2.0);
        let ys = repeat_rows(&y, 2).unwrap();
        let x = model.sample(&z, &ys).unwrap();
        let gap: f64 = (0..3).map(|j| (x.at2(0, j) - x.at2(1, j)).powi(2)).sum();
        assert!(gap > 0.0);
    }
}

#[test]
fn actnorm_init_standardizes_latents() {
    let mut a = arch(2, vec![2, 3], 1);
    a.g_actnorm = true;
    a.h_mode = CouplingMode::Standard;
    let mut model = CTrumpet::new(a, &mut rng(18)).unwrap();
    let mut r = rng(19);
    let x = random_rows(&mut r, 64, 3, 4.0);
    let y = random_rows(&mut r, 64, 1, 1.0);
    model.initialize_g_actnorm(&x, &y).unwrap();
    let zp = model.pinv(&x, &y).unwrap();
    model.initialize_h_actnorm(&zp, &y).unwrap();
    assert!(model.actnorm_flags().iter().all(|&f| f));
    let z = model.h_inverse(&mut Tape::new(), &zp, &y).unwrap();
    for j in 0..2 {
        let mean = (0..64).map(|i| z.at2(i, j)).sum::<f64>() / 64.0;
        let var = (0..64).map(|i| (z.at2(i, j) - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
    }
}
