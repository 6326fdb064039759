use approx::assert_relative_eq;
use mgr::diffcore::{grad_check_many, RngStream, Tape, Tensor};
use mgr::models::{
    sample_prior, tau_for_rate, Architecture, Finder, FinderVariant, LeakyGenerator, MainModel, Mlp, ModelVars, TAU_CAP,
};
use proptest::prelude::*;

fn arch(aux: bool) -> Architecture {
    Architecture {
        input_dim: 2,
        hidden: vec![8, 8],
        feature_dim: 5,
        classes: 4,
        aux_head: aux,
    }
}

fn ring(k: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let a = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            vec![2.0 * a.cos(), 2.0 * a.sin()]
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn generator(rho: f64, alpha: f64) -> LeakyGenerator {
    let tau = tau_for_rate(rho).unwrap();
    LeakyGenerator::new(ring(4), 0.5, tau, alpha, 3, &mut RngStream::new(0, "gen")).unwrap()
}

#[test]
fn zero_weight_extractor_gives_zero_features_and_uniform_softmax() {
    let a = arch(false);
    let n = MainModel::new(&a, &mut RngStream::new(1, "m")).unwrap().params().len();
    let zeros: Vec<Tensor> = MainModel::new(&a, &mut RngStream::new(1, "m"))
        .unwrap()
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    assert_eq!(zeros.len(), n);
    let model = MainModel::from_params(&a, zeros).unwrap();
    let x = RngStream::new(2, "x").normal_tensor(&[6, 2]);
    assert!(model.features(&x).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(model.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn feature_rows_do_not_depend_on_the_rest_of_the_batch() {
    let model = MainModel::new(&arch(false), &mut RngStream::new(3, "m")).unwrap();
    let x = RngStream::new(4, "x").normal_tensor(&[7, 2]);
    let all = model.features(&x).unwrap();
    for i in 0..7 {
        let one = model.features(&x.select_rows(&[i])).unwrap();
        assert_eq!(one.row(0), all.row(i));
    }
}

#[test]
fn permuting_rows_permutes_logits() {
    let model = MainModel::new(&arch(false), &mut RngStream::new(5, "m")).unwrap();
    let x = RngStream::new(6, "x").normal_tensor(&[5, 2]);
    let perm = [3, 0, 4, 1, 2];
    let a = model.logits(&x).unwrap();
    let b = model.logits(&x.select_rows(&perm)).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(b.row(i), a.row(p));
    }
}

#[test]
fn aux_head_present_only_when_requested() {
    let with = MainModel::new(&arch(true), &mut RngStream::new(7, "m")).unwrap();
    let without = MainModel::new(&arch(false), &mut RngStream::new(7, "m")).unwrap();
    assert!(with.aux_head.is_some() && without.aux_head.is_none());
    let tape = Tape::new();
    let vars = without.bind(&tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(vars.aux_logits(x).is_err());
}

#[test]
fn classifier_gradients_match_central_differences() {
    let a = arch(true);
    let mut rng = RngStream::new(8, "grad");
    for _ in 0..20 {
        let model = MainModel::new(&a, &mut rng).unwrap();
        let mut inputs = model.params();
        inputs.push(rng.normal_tensor(&[3, 2]));
        let n = inputs.len() - 1;
        let err = grad_check_many(
            |_, v| {
                let m = ModelVars::from_flat(&a, v[..n].to_vec())?;
                m.logits(v[n])?.tanh()?.sum()?.add(m.aux_logits(v[n])?.sq_norm()?)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err:e}");
    }
}

#[test]
fn residual_finders_start_at_identity() {
    let z = RngStream::new(9, "z").normal_tensor(&[10, 3]);
    for v in [
        FinderVariant::ResidualMlp,
        FinderVariant::ResidualShallow,
        FinderVariant::Linear,
        FinderVariant::Identity,
    ] {
        let f = Finder::new(v, 3, &mut RngStream::new(1, "f")).unwrap();
        assert_eq!(f.eval(&z).unwrap(), z, "{v}");
    }
    let plain = Finder::new(FinderVariant::PlainMlp, 3, &mut RngStream::new(1, "f")).unwrap();
    assert_ne!(plain.eval(&z).unwrap(), z);
}

#[test]
fn finder_rejects_wrong_latent_width_and_unknown_variants() {
    let f = Finder::new(FinderVariant::ResidualMlp, 3, &mut RngStream::new(1, "f")).unwrap();
    assert!(f.eval(&Tensor::zeros(&[2, 4])).is_err());
    let err = "cubic".parse::<FinderVariant>().unwrap_err();
    assert!(err.is_config());
}

#[test]
fn tau_matches_the_normal_quantile() {
    assert_eq!(tau_for_rate(0.0).unwrap(), TAU_CAP);
    assert_relative_eq!(tau_for_rate(0.5).unwrap(), 0.0, epsilon = 1e-12);
    // Phi^-1(0.7) = 0.524400512708041
    assert_relative_eq!(tau_for_rate(0.3).unwrap(), 0.524_400_512_708_041, epsilon = 1e-9);
    assert!(tau_for_rate(1.0).is_err());
    assert!(tau_for_rate(-0.1).is_err());
}

#[test]
fn saturated_gate_gives_the_pure_class_term() {
    let g = generator(0.3, 1e6);
    let tau = g.tau();
    let z = Tensor::from_rows(&[vec![tau - 1.0, 0.4, -0.2]]).unwrap();
    let x = g.generate_eval(&z, &[1]).unwrap();
    let p = &g.projections()[1];
    for j in 0..2 {
        let own = g.modes().at(1, j) + g.spread() * (0.4 * p.at(0, j) - 0.2 * p.at(1, j));
        assert!((x.at(0, j) - own).abs() < 1e-6);
    }
    assert_eq!(g.leak_weight(tau), 0.5);
}

#[test]
fn gate_fires_at_the_configured_rate() {
    for rho in [0.0, 0.2, 0.3] {
        let g = generator(rho, 2.0);
        let n = 100_000;
        let z = sample_prior(n, 3, &mut RngStream::new(11, "rate"));
        let rate = mgr::bench::leakage_rate(&z, &g);
        if rho == 0.0 {
            assert!(rate < 1e-3, "{rate}");
        } else {
            let se = (rho * (1.0 - rho) / n as f64).sqrt();
            assert!((rate - rho).abs() < 2.0 * se.max(1e-3), "rho {rho}: {rate}");
        }
    }
}

#[test]
fn invalid_labels_are_rejected() {
    let g = generator(0.3, 2.0);
    let z = Tensor::zeros(&[1, 3]);
    assert!(matches!(
        g.generate_eval(&z, &[4]),
        Err(mgr::Error::InvalidLabel { label: 4, classes: 4 })
    ));
}

#[test]
fn prior_moments_concentrate() {
    let z = sample_prior(100_000, 3, &mut RngStream::new(12, "prior"));
    let n = z.rows() as f64;
    for j in 0..3 {
        let mean = (0..z.rows()).map(|i| z.at(i, j)).sum::<f64>() / n;
        let var = (0..z.rows()).map(|i| (z.at(i, j) - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }
}

#[test]
fn generator_is_differentiable_in_z() {
    let g = generator(0.3, 2.0);
    let z = RngStream::new(13, "z").normal_tensor(&[6, 3]);
    let y = [0, 1, 2, 3, 0, 1];
    let err = grad_check_many(|_, v| g.generate(v[0], &y)?.tanh()?.sum(), &[z], 1e-5).unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn mlp_forward_is_pure() {
    let m = Mlp::new(&[3, 4, 2], false, &mut RngStream::new(14, "mlp")).unwrap();
    let x = RngStream::new(15, "x").normal_tensor(&[5, 3]);
    let a = m.eval(&x).unwrap();
    let b = m.eval(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn residual_finders_stay_in_the_unit_box(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut rng = RngStream::new(seed, "box");
        for v in [FinderVariant::ResidualMlp, FinderVariant::ResidualShallow] {
            let mut f = Finder::new(v, 3, &mut rng).unwrap();
            for p in f.params_mut() {
                *p = rng.normal_tensor(p.shape()).scaled(scale);
            }
            let z = rng.normal_tensor(&[16, 3]).scaled(3.0);
            let out = f.eval(&z).unwrap();
            let dev = out.add_scaled(&z, -1.0).unwrap().max_abs();
            prop_assert!(dev <= 1.0 + 1e-12, "{} {}", v, dev);
        }
    }

    #[test]
    fn generator_slope_is_bounded(seed in any::<u64>()) {
        // The leaked branch moves with its own projection, so the gate term carries
        // sigma |(P_leak - P_y) z~| <= 2 sigma |z~| on top of the mode gap.
        let g = generator(0.3, 2.0);
        let mut rng = RngStream::new(seed, "lip");
        let y = rng.below(4);
        let gap: f64 = (0..2).map(|j| (g.modes().at(y, j) - g.modes().at(g.leak_target(y), j)).powi(2)).sum::<f64>().sqrt();
        let a = rng.normal_tensor(&[1, 3]);
        let b = a.add_scaled(&rng.normal_tensor(&[1, 3]), 1e-3).unwrap();
        let tail = |t: &Tensor| (t.at(0, 1).powi(2) + t.at(0, 2).powi(2)).sqrt();
        let reach = tail(&a).max(tail(&b));
        let bound = g.alpha() * (gap + 2.0 * g.spread() * reach) / 4.0 + g.spread();
        let xa = g.generate_eval(&a, &[y]).unwrap();
        let xb = g.generate_eval(&b, &[y]).unwrap();
        let slope = xa.add_scaled(&xb, -1.0).unwrap().norm() / a.add_scaled(&b, -1.0).unwrap().norm();
        prop_assert!(slope <= bound * (1.0 + 1e-6), "{} > {}", slope, bound);
    }

    #[test]
    fn mode_gap_bound_holds_on_the_class_axis(seed in any::<u64>()) {
        // with z~ = 0 both branches sit on their modes and the textbook bound applies
        let g = generator(0.3, 2.0);
        let mut rng = RngStream::new(seed, "lip0");
        let y = rng.below(4);
        let gap: f64 = (0..2).map(|j| (g.modes().at(y, j) - g.modes().at(g.leak_target(y), j)).powi(2)).sum::<f64>().sqrt();
        let z1 = rng.uniform(-3.0, 3.0);
        let h = 1e-4;
        let a = Tensor::row_vector(&[z1, 0.0, 0.0]);
        let b = Tensor::row_vector(&[z1 + h, 0.0, 0.0]);
        let xa = g.generate_eval(&a, &[y]).unwrap();
        let xb = g.generate_eval(&b, &[y]).unwrap();
        let slope = xa.add_scaled(&xb, -1.0).unwrap().norm() / h;
        prop_assert!(slope <= g.alpha() * gap / 4.0 + g.spread());
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        let g = generator(0.2, 3.0);
        let mut rng = RngStream::new(seed, "det");
        let z = rng.normal_tensor(&[4, 3]);
        let y: Vec<usize> = (0..4).map(|_| rng.below(4)).collect();
        prop_assert_eq!(g.generate_eval(&z, &y).unwrap(), g.generate_eval(&z, &y).unwrap());
    }
}
