use approx::assert_relative_eq;
use mgr::augment::{latent_noise, latent_perturb, TransformBatch, TransformSpec, LATENT_NOISE_VARIANCE};
use mgr::diffcore::{grad_check_many, RngStream, Tape, Tensor, Var};
use mgr::models::{tau_for_rate, Architecture, LeakyGenerator, MainModel, ModelVars};
use mgr::objectives::{
    gda_objective, kl_penalty, latent_augment_loss, multihead_loss, pcr_loss, ssl_consistency_loss, task_loss, Batch,
    KlForm, SslForm,
};
use proptest::prelude::*;

fn arch(aux: bool) -> Architecture {
    Architecture {
        input_dim: 2,
        hidden: vec![8],
        feature_dim: 4,
        classes: 3,
        aux_head: aux,
    }
}

fn labels(rng: &mut RngStream, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(k)).collect()
}

fn rotation_only() -> TransformSpec {
    TransformSpec {
        rotation_max: 1.5,
        scale_min: 1.0,
        scale_max: 1.0,
        noise_std: 0.0,
        ops_per_sample: 3,
    }
}

#[test]
fn uniform_logits_give_log_k() {
    for k in [2, 5, 10] {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[7, k]));
        let y: Vec<usize> = (0..7).map(|i| i % k).collect();
        assert_relative_eq!(task_loss(logits, &y).unwrap().item(), (k as f64).ln(), epsilon = 1e-12);
    }
}

#[test]
fn task_loss_rejects_bad_labels_and_shapes() {
    let tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        task_loss(logits, &[0, 3]),
        Err(mgr::Error::InvalidLabel { label: 3, .. })
    ));
    assert!(task_loss(logits, &[0]).is_err());
}

#[test]
fn gda_objective_is_affine_in_lambda() {
    let mut rng = RngStream::new(1, "gda");
    let model = MainModel::new(&arch(false), &mut rng).unwrap();
    let (xr, yr) = (rng.normal_tensor(&[6, 2]), labels(&mut rng, 6, 3));
    let (xp, yp) = (rng.normal_tensor(&[5, 2]), labels(&mut rng, 5, 3));
    let eval = |lambda: f64| {
        let tape = Tape::new();
        let m = model.bind(&tape, false);
        let real = Batch {
            x: tape.constant(xr.clone()),
            y: &yr,
        };
        let pseudo = Batch {
            x: tape.constant(xp.clone()),
            y: &yp,
        };
        gda_objective(&m, real, Some(pseudo), lambda).unwrap().item()
    };
    let (l0, l1) = (eval(0.0), eval(1.0));
    for lambda in [0.1, 0.35, 0.8] {
        assert_relative_eq!(eval(lambda), l0 + lambda * (l1 - l0), epsilon = 1e-12);
    }
    let tape = Tape::new();
    let m = model.bind(&tape, false);
    let real = Batch {
        x: tape.constant(xr.clone()),
        y: &yr,
    };
    let empty = Batch {
        x: tape.constant(Tensor::zeros(&[0, 2])),
        y: &[],
    };
    assert_eq!(gda_objective(&m, real, Some(empty), 0.7).unwrap().item(), l0);
    assert_eq!(gda_objective(&m, real, None, 0.7).unwrap().item(), l0);
}

#[test]
fn pcr_vanishes_under_the_identity_transform() {
    let mut rng = RngStream::new(2, "pcr-id");
    let model = MainModel::new(&arch(false), &mut rng).unwrap();
    let tape = Tape::new();
    let m = model.bind(&tape, false);
    let x = tape.constant(rng.normal_tensor(&[5, 2]));
    assert_eq!(pcr_loss(&m, x, &TransformBatch::identity(5, 2)).unwrap().item(), 0.0);
}

#[test]
fn pcr_head_gradient_is_bitwise_zero() {
    let mut rng = RngStream::new(3, "pcr-head");
    for _ in 0..50 {
        let model = MainModel::new(&arch(false), &mut rng).unwrap();
        let t = TransformBatch::sample(&TransformSpec::default(), 6, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let m = model.bind(&tape, true);
        let loss = pcr_loss(&m, tape.constant(rng.normal_tensor(&[6, 2])), &t).unwrap();
        assert!(loss.item() >= 0.0);
        let g = tape.grad(loss, &m.head).unwrap();
        assert!(g.iter().all(|t| t.data().iter().all(|v| v.to_bits() == 0)));
    }
}

#[test]
fn multihead_pseudo_term_leaves_the_main_head_alone() {
    let mut rng = RngStream::new(4, "mh");
    let model = MainModel::new(&arch(true), &mut rng).unwrap();
    let (xr, yr) = (rng.normal_tensor(&[4, 2]), labels(&mut rng, 4, 3));
    let (xp, yp) = (rng.normal_tensor(&[6, 2]), labels(&mut rng, 6, 3));
    let head_grads = |lambda: f64| {
        let tape = Tape::new();
        let m = model.bind(&tape, true);
        let real = Batch {
            x: tape.constant(xr.clone()),
            y: &yr,
        };
        let pseudo = Batch {
            x: tape.constant(xp.clone()),
            y: &yp,
        };
        let loss = multihead_loss(&m, real, pseudo, lambda).unwrap();
        tape.grad(loss, &m.head).unwrap()
    };
    assert_eq!(head_grads(0.0), head_grads(1.0));

    let without = MainModel::new(&arch(false), &mut rng).unwrap();
    let tape = Tape::new();
    let m = without.bind(&tape, true);
    let b = Batch {
        x: tape.constant(xr.clone()),
        y: &yr,
    };
    assert!(multihead_loss(&m, b, b, 1.0).is_err());
}

#[test]
fn ssl_consistency_is_non_negative_and_trains_the_head() {
    let mut rng = RngStream::new(5, "ssl");
    for form in [SslForm::Kl, SslForm::SquaredLogits] {
        let model = MainModel::new(&arch(false), &mut rng).unwrap();
        let t = TransformBatch::sample(&TransformSpec::default(), 8, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let m = model.bind(&tape, true);
        let loss = ssl_consistency_loss(&m, tape.constant(rng.normal_tensor(&[8, 2])), &t, form).unwrap();
        assert!(loss.item() >= -1e-15, "{form:?}: {}", loss.item());
        let g = tape.grad(loss, &m.head).unwrap();
        assert!(g.iter().any(|t| t.max_abs() > 0.0), "{form:?}");
    }
}

#[test]
fn kl_identities_and_collapse() {
    let tape = Tape::new();
    let standard = tape.constant(Tensor::from_rows(&[vec![-1.0, 1.0, -1.0], vec![1.0, -1.0, 1.0]]).unwrap());
    assert_eq!(kl_penalty(standard, KlForm::Variance).unwrap().item(), 0.0);
    assert_eq!(kl_penalty(standard, KlForm::StdDev).unwrap().item(), 0.0);
    let shifted = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap());
    assert_relative_eq!(
        kl_penalty(shifted, KlForm::Variance).unwrap().item(),
        0.5,
        epsilon = 1e-12
    );

    // KL(N(0, s^2) || N(0, 1)) = (s^2 - 1 - ln s^2) / 2, growing without bound as s -> 0
    let mut last = 0.0;
    for s in [1.0, 0.5, 0.1, 0.01, 1e-4] {
        let t = tape.constant(Tensor::column(&[-s, s]));
        let v = kl_penalty(t, KlForm::Variance).unwrap().item();
        assert_relative_eq!(v, (s * s - 1.0 - (s * s).ln()) / 2.0, epsilon = 1e-9);
        assert!(v >= last);
        last = v;
    }
    assert!(last > 8.0);
    assert!(kl_penalty(tape.constant(Tensor::zeros(&[1, 3])), KlForm::Variance).is_err());
}

#[test]
fn every_loss_passes_gradient_checks() {
    let a = arch(true);
    let mut rng = RngStream::new(6, "losses");
    let gen = LeakyGenerator::new(
        Tensor::from_rows(&[vec![2.0, 0.0], vec![-1.0, 1.7], vec![-1.0, -1.7]]).unwrap(),
        0.5,
        tau_for_rate(0.3).unwrap(),
        2.0,
        3,
        &mut rng,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let model = MainModel::new(&a, &mut rng).unwrap();
        let y = labels(&mut rng, 4, 3);
        let t = TransformBatch::sample(&TransformSpec::default(), 4, 2, &mut rng).unwrap();
        let noise = latent_noise(&[4, 3], &mut rng);
        let mut inputs = model.params();
        let n = inputs.len();
        inputs.push(rng.normal_tensor(&[4, 2]));
        inputs.push(rng.normal_tensor(&[4, 3]));
        type Loss<'a> = Box<dyn for<'t> Fn(&ModelVars<'t>, &[Var<'t>]) -> mgr::Result<Var<'t>> + 'a>;
        let checks: Vec<Loss> = vec![
            Box::new(|m, v| task_loss(m.logits(v[n])?, &y)),
            Box::new(|m, v| {
                gda_objective(
                    m,
                    Batch { x: v[n], y: &y },
                    Some(Batch {
                        x: gen.generate(v[n + 1], &y)?,
                        y: &y,
                    }),
                    0.4,
                )
            }),
            Box::new(|m, v| pcr_loss(m, gen.generate(v[n + 1], &y)?, &t)),
            Box::new(|m, v| {
                multihead_loss(
                    m,
                    Batch { x: v[n], y: &y },
                    Batch {
                        x: gen.generate(v[n + 1], &y)?,
                        y: &y,
                    },
                    0.6,
                )
            }),
            Box::new(|m, v| latent_augment_loss(m, &gen, v[n + 1], &y, &noise)),
            Box::new(|_, v| kl_penalty(v[n + 1], KlForm::Variance)),
            Box::new(|_, v| kl_penalty(v[n + 1], KlForm::StdDev)),
        ];
        for f in &checks {
            let err = grad_check_many(
                |_, v| {
                    let m = ModelVars::from_flat(&a, v[..n].to_vec())?;
                    f(&m, v)
                },
                &inputs,
                1e-6,
            )
            .unwrap();
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4, "{worst:e}");
}

#[test]
fn ssl_gradient_treats_the_clean_prediction_as_a_constant() {
    let a = arch(false);
    let mut rng = RngStream::new(16, "ssl-grad");
    for form in [SslForm::Kl, SslForm::SquaredLogits] {
        for _ in 0..10 {
            let model = MainModel::new(&a, &mut rng).unwrap();
            let x = rng.normal_tensor(&[5, 2]);
            let t = TransformBatch::sample(&TransformSpec::default(), 5, 2, &mut rng).unwrap();
            let clean = model.logits(&x).unwrap();
            let strong_x = t.apply_eval(&x).unwrap();
            // same loss with the target frozen at the base point
            let frozen = |params: &[Tensor]| {
                let logits = MainModel::from_params(&a, params.to_vec())
                    .unwrap()
                    .logits(&strong_x)
                    .unwrap();
                let mut total = 0.0;
                for i in 0..5 {
                    let lse = |r: &[f64]| {
                        let m = r.iter().cloned().fold(f64::MIN, f64::max);
                        m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
                    };
                    let (c, s) = (clean.row(i), logits.row(i));
                    let (lc, ls) = (lse(c), lse(s));
                    total += match form {
                        SslForm::Kl => c
                            .iter()
                            .zip(s)
                            .map(|(ci, si)| (ci - lc).exp() * ((ci - lc) - (si - ls)))
                            .sum::<f64>(),
                        SslForm::SquaredLogits => c.iter().zip(s).map(|(ci, si)| (si - ci).powi(2)).sum::<f64>(),
                    };
                }
                total / 5.0
            };
            let params = model.params();
            let tape = Tape::new();
            let m = model.bind(&tape, true);
            let flat = m.flat();
            let loss = ssl_consistency_loss(&m, tape.constant(x.clone()), &t, form).unwrap();
            assert!((loss.item() - frozen(&params)).abs() < 1e-12);
            let grads = tape.grad(loss, &flat).unwrap();
            let h = 1e-6;
            for (pi, g) in grads.iter().enumerate() {
                for k in 0..g.numel() {
                    let mut up = params.clone();
                    let mut dn = params.clone();
                    up[pi].data_mut()[k] += h;
                    dn[pi].data_mut()[k] -= h;
                    let fd = (frozen(&up) - frozen(&dn)) / (2.0 * h);
                    let ad = g.data()[k];
                    assert!(
                        (ad - fd).abs() <= 1e-4 * ad.abs().max(fd.abs()).max(1e-3),
                        "{form:?}: {ad} vs {fd}"
                    );
                }
            }
        }
    }
}

#[test]
fn latent_augment_shrinks_with_the_noise() {
    let mut rng = RngStream::new(7, "latent-aug");
    let model = MainModel::new(&arch(false), &mut rng).unwrap();
    let gen = LeakyGenerator::new(
        Tensor::from_rows(&[vec![2.0, 0.0], vec![-1.0, 1.7], vec![-1.0, -1.7]]).unwrap(),
        0.5,
        0.5,
        2.0,
        3,
        &mut rng,
    )
    .unwrap();
    let z = rng.normal_tensor(&[16, 3]);
    let y = labels(&mut rng, 16, 3);
    let base = rng.normal_tensor(&[16, 3]);
    let mut last = f64::INFINITY;
    for c in [1.0, 0.1, 0.01, 1e-3, 0.0] {
        let tape = Tape::new();
        let m = model.bind(&tape, false);
        let v = latent_augment_loss(&m, &gen, tape.constant(z.clone()), &y, &base.scaled(c))
            .unwrap()
            .item();
        assert!(v <= last, "{c}: {v} > {last}");
        last = v;
    }
    assert_eq!(last, 0.0);
}

#[test]
fn identity_spec_leaves_points_alone() {
    let mut rng = RngStream::new(8, "aug-id");
    let x = rng.normal_tensor(&[10, 2]);
    let t = TransformBatch::sample(&TransformSpec::identity(), 10, 2, &mut rng).unwrap();
    assert_eq!(t.apply_eval(&x).unwrap(), x);
}

#[test]
fn transform_shape_and_spec_errors() {
    let mut rng = RngStream::new(9, "aug-err");
    let t = TransformBatch::sample(&TransformSpec::default(), 4, 2, &mut rng).unwrap();
    assert!(t.apply_eval(&Tensor::zeros(&[3, 2])).is_err());
    let bad = TransformSpec {
        scale_min: 2.0,
        scale_max: 1.0,
        ..TransformSpec::default()
    };
    assert!(TransformBatch::sample(&bad, 4, 2, &mut rng).is_err());
    let bad = TransformSpec {
        ops_per_sample: 4,
        ..TransformSpec::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn latent_perturbation_has_the_configured_energy() {
    let mut rng = RngStream::new(10, "latent");
    let z = Tensor::zeros(&[50_000, 4]);
    let s = latent_perturb(&z, &mut rng);
    let per_row = s.sq_norm() / 50_000.0;
    let expected = 4.0 * LATENT_NOISE_VARIANCE;
    assert!((per_row - expected).abs() < 0.05 * expected, "{per_row} vs {expected}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_preserves_norm(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "rot");
        let x = rng.normal_tensor(&[8, 2]);
        let t = TransformBatch::sample(&rotation_only(), 8, 2, &mut rng).unwrap();
        let out = t.apply_eval(&x).unwrap();
        for i in 0..8 {
            let a = x.row(i).iter().map(|v| v * v).sum::<f64>();
            let b = out.row(i).iter().map(|v| v * v).sum::<f64>();
            prop_assert!((a - b).abs() < 1e-12 * (1.0 + a));
        }
    }

    #[test]
    fn transform_jacobian_matches_finite_differences(seed in any::<u64>(), dim in 2usize..5) {
        let mut rng = RngStream::new(seed, "jac");
        let spec = TransformSpec { ops_per_sample: 3, ..TransformSpec::default() };
        let t = TransformBatch::sample(&spec, 3, dim, &mut rng).unwrap();
        let x = rng.normal_tensor(&[3, dim]);
        let h = 1e-6;
        let base = t.apply_eval(&x).unwrap();
        for i in 0..3 {
            let j = t.jacobian(i);
            for k in 0..dim {
                let mut xp = x.clone();
                xp.set(i, k, x.at(i, k) + h);
                let out = t.apply_eval(&xp).unwrap();
                for r in 0..dim {
                    let fd = (out.at(i, r) - base.at(i, r)) / h;
                    prop_assert!((fd - j.at(r, k)).abs() < 1e-6, "row {} col {}: {} vs {}", r, k, fd, j.at(r, k));
                }
            }
        }
    }

    #[test]
    fn kl_is_invariant_to_row_order(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "kl-perm");
        let z = rng.normal_tensor(&[9, 3]);
        let perm = rng.permutation(9);
        let tape = Tape::new();
        let a = kl_penalty(tape.constant(z.clone()), KlForm::Variance).unwrap().item();
        let b = kl_penalty(tape.constant(z.select_rows(&perm)), KlForm::Variance).unwrap().item();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= -1e-12);
    }

    #[test]
    fn pcr_is_non_negative(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "pcr-pos");
        let model = MainModel::new(&arch(false), &mut rng).unwrap();
        let t = TransformBatch::sample(&TransformSpec::default(), 5, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let m = model.bind(&tape, false);
        prop_assert!(pcr_loss(&m, tape.constant(rng.normal_tensor(&[5, 2])), &t).unwrap().item() >= 0.0);
    }
}
