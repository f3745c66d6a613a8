use crac_core::losses::*;
use crac_core::priors::{PriorMode, Region, RegionMatrix};
use crac_tensor::{grad_check, GradCheckOptions, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn targets(classes: usize, labels: Vec<usize>, tau: Vec<f64>, regions: Vec<Region>) -> BatchTargets {
    BatchTargets {
        samples: 1,
        classes,
        height: 1,
        width: labels.len(),
        labels,
        tau,
        regions,
    }
}

fn logits_tensor(t: &BatchTargets, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn random_case(rng: &mut ChaCha8Rng, classes: usize, h: usize, w: usize) -> (BatchTargets, Tensor) {
    let labels: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..classes as u8)).collect();
    let t = BatchTargets::from_labels(&labels, h, w, classes, PriorMode::Counts).unwrap();
    let l: Vec<f64> = (0..classes * h * w).map(|_| rng.gen_range(-2.0..10.0)).collect();
    let x = logits_tensor(&t, l);
    (t, x)
}

fn value(x: &Tensor, f: impl FnOnce(&mut Graph, crac_tensor::Var) -> crac_tensor::Var) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(x.clone()).unwrap();
    let out = f(&mut g, v);
    g.value(out).item().unwrap()
}

fn breakdown(x: &Tensor, f: impl FnOnce(&mut Graph, crac_tensor::Var) -> LossOutput) -> LossBreakdown {
    let mut g = Graph::new();
    let v = g.constant(x.clone()).unwrap();
    f(&mut g, v).breakdown
}

fn lse_oracle(t: &BatchTargets, x: &Tensor) -> f64 {
    let (k, hw) = (t.classes, t.height * t.width);
    let d = x.data();
    let mut total = 0.0;
    for n in 0..t.samples {
        for p in 0..hw {
            let at = |c: usize| d[(n * k + c) * hw + p];
            let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..k).map(|c| (at(c) - m).exp()).sum::<f64>().ln();
            total += lse - at(t.labels[n * hw + p]);
        }
    }
    total / t.pixels() as f64
}

#[test]
fn cross_entropy_hand_cases() {
    let t = targets(2, vec![0], vec![0.0; 2], vec![Region::Inner]);
    let x = logits_tensor(&t, vec![50.0, -50.0]);
    assert!(value(&x, |g, v| cross_entropy(g, v, &t.labels).unwrap()) < 1e-9);

    let t = targets(4, vec![2], vec![0.0; 4], vec![Region::Inner]);
    let x = logits_tensor(&t, vec![0.3; 4]);
    let ce = value(&x, |g, v| cross_entropy(g, v, &t.labels).unwrap());
    assert!((ce - 4f64.ln()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (t, x) = random_case(&mut rng, 3, 2, 2);
    let ce = value(&x, |g, v| cross_entropy(g, v, &t.labels).unwrap());
    assert!((ce - lse_oracle(&t, &x)).abs() < 1e-12);
}

#[test]
fn nacl_hand_case() {
    let t = targets(2, vec![0], vec![9.0, 0.0], vec![Region::Inner]);
    let x = logits_tensor(&t, vec![7.0, 1.0]);
    let b = breakdown(&x, |g, v| nacl_loss(g, v, &t, 0.1).unwrap());
    assert!((b.penalty_inner + b.penalty_outer - 0.15).abs() < 1e-12);
    assert!((b.total - b.ce_term - 0.15).abs() < 1e-12);
    assert!((b.ce_term - lse_oracle(&t, &x)).abs() < 1e-12);
}

#[test]
fn satisfied_constraints_leave_only_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (t, _) = random_case(&mut rng, 3, 4, 4);
    let x = logits_tensor(&t, t.tau.clone());
    let ce = lse_oracle(&t, &x);
    let b = breakdown(&x, |g, v| nacl_loss(g, v, &t, 0.7).unwrap());
    assert_eq!(b.penalty_inner + b.penalty_outer, 0.0);
    assert!((b.total - ce).abs() < 1e-12);
    let lambda = RegionMatrix::filled(3, 0.4);
    let rho = RegionMatrix::filled(3, 2.0);
    let alm = AlmParams {
        lambda: &lambda,
        rho: &rho,
        convention: Convention::Signed,
    };
    let b = breakdown(&x, |g, v| crac_alm_loss(g, v, &t, &alm).unwrap());
    assert!((b.total - ce).abs() < 1e-12);
}

#[test]
fn crac_fixed_two_pixel_hand_case() {
    let t = targets(
        2,
        vec![0, 1],
        vec![9.0, 0.0, 4.0, 5.0],
        vec![Region::Inner, Region::Outer],
    );
    // layout [k][pixel]: class 0 logits (7, 2), class 1 logits (-1, 6)
    let x = logits_tensor(&t, vec![7.0, 2.0, -1.0, 6.0]);
    let weights = RegionMatrix::from_rows(&[[0.5, 2.0], [0.25, 3.0]]);
    let b = breakdown(&x, |g, v| crac_fixed_loss(g, v, &t, &weights).unwrap());
    // inner pixel: 0.5·|9−7| + 0.25·|4+1| = 2.25; outer: 2·|0−2| + 3·|5−6| = 7
    assert!((b.penalty_inner - 2.25 / 4.0).abs() < 1e-12);
    assert!((b.penalty_outer - 7.0 / 4.0).abs() < 1e-12);
    assert!((b.total - b.ce_term - 9.25 / 4.0).abs() < 1e-12);
}

#[test]
fn all_inner_image_has_no_outer_penalty() {
    let labels = vec![1u8; 16];
    let t = BatchTargets::from_labels(&labels, 4, 4, 2, PriorMode::Counts).unwrap();
    let x = logits_tensor(&t, (0..32).map(|i| i as f64 * 0.1).collect());
    let b = breakdown(&x, |g, v| crac_fixed_loss(g, v, &t, &RegionMatrix::filled(2, 0.3)).unwrap());
    assert_eq!(b.penalty_outer, 0.0);
    assert!(b.penalty_inner > 0.0);
}

#[test]
fn crac_alm_single_contribution() {
    let t = targets(2, vec![0], vec![9.0, 0.0], vec![Region::Inner]);
    let x = logits_tensor(&t, vec![7.0, 0.0]);
    let lambda = RegionMatrix::filled(2, 1.0);
    let rho = RegionMatrix::filled(2, 2.0);
    let alm = AlmParams {
        lambda: &lambda,
        rho: &rho,
        convention: Convention::Signed,
    };
    let b = breakdown(&x, |g, v| crac_alm_loss(g, v, &t, &alm).unwrap());
    // z = 2 gives 2·1 + ½·2·4 = 6, z = 0 gives 0; normalized by P·K = 2
    assert!((b.penalty_inner - 3.0).abs() < 1e-12);
    assert_eq!(b.penalty_outer, 0.0);
}

#[test]
fn crac_alm_rejects_non_positive_parameters() {
    let t = targets(2, vec![0], vec![9.0, 0.0], vec![Region::Inner]);
    let x = logits_tensor(&t, vec![7.0, 0.0]);
    let lambda = RegionMatrix::filled(2, 0.0);
    let rho = RegionMatrix::filled(2, 1.0);
    let alm = AlmParams {
        lambda: &lambda,
        rho: &rho,
        convention: Convention::Signed,
    };
    let mut g = Graph::new();
    let v = g.constant(x).unwrap();
    assert!(crac_alm_loss(&mut g, v, &t, &alm).is_err());
}

#[test]
fn crac_alm_small_rho_is_signed_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, x) = random_case(&mut rng, 3, 4, 4);
    let lambda = RegionMatrix::from_rows(&[[0.2, 0.9], [0.5, 1.3], [0.1, 0.7]]);
    let rho = RegionMatrix::filled(3, 1e-8);
    let alm = AlmParams {
        lambda: &lambda,
        rho: &rho,
        convention: Convention::Signed,
    };
    let b = breakdown(&x, |g, v| crac_alm_loss(g, v, &t, &alm).unwrap());
    let hw = 16;
    let mut linear = 0.0;
    for k in 0..3 {
        for p in 0..hw {
            let i = k * hw + p;
            linear += lambda.get(k, t.regions[p]) * (t.tau[i] - x.data()[i]);
        }
    }
    linear /= (hw * 3) as f64;
    assert!((b.penalty_inner + b.penalty_outer - linear).abs() < 1e-6);
}

#[test]
fn focal_hand_cases() {
    let t = targets(2, vec![1], vec![0.0; 2], vec![Region::Inner]);
    let x = logits_tensor(&t, vec![0.5, 0.5]);
    let fl = value(&x, |g, v| focal_loss(g, v, &t, 3.0).unwrap());
    assert!((fl - 0.125 * LN2).abs() < 1e-12);
    let x = logits_tensor(&t, vec![-40.0, 40.0]);
    assert!(value(&x, |g, v| focal_loss(g, v, &t, 3.0).unwrap()) < 1e-30);
}

#[test]
fn label_smoothing_hand_cases() {
    let t = targets(2, vec![0], vec![0.0; 2], vec![Region::Inner]);
    let x = logits_tensor(&t, vec![1.0, 0.0]);
    let ls = value(&x, |g, v| label_smoothing_ce(g, v, &t, 0.1).unwrap());
    let expected = (1.0 + (-1f64).exp()).ln() + 0.05;
    assert!((ls - expected).abs() < 1e-12);

    let t = targets(5, vec![3], vec![0.0; 5], vec![Region::Inner]);
    let x = logits_tensor(&t, vec![2.0; 5]);
    for alpha in [0.0, 0.1, 0.6] {
        let ls = value(&x, |g, v| label_smoothing_ce(g, v, &t, alpha).unwrap());
        assert!((ls - 5f64.ln()).abs() < 1e-12);
    }
    let mut g = Graph::new();
    let v = g.constant(x).unwrap();
    assert!(label_smoothing_ce(&mut g, v, &t, 1.0).is_err());
}

#[test]
fn entropy_penalty_hand_cases() {
    let t = targets(4, vec![0], vec![0.0; 4], vec![Region::Inner]);
    let x = logits_tensor(&t, vec![0.0; 4]);
    let ecp = value(&x, |g, v| entropy_penalty_loss(g, v, &t, 0.1).unwrap());
    assert!((ecp - 0.9 * 4f64.ln()).abs() < 1e-12);

    let t = targets(2, vec![0], vec![0.0; 2], vec![Region::Inner]);
    let x = logits_tensor(&t, vec![1.0, 0.0]);
    let p0 = 1.0 / (1.0 + (-1f64).exp());
    let entropy = -(p0 * p0.ln() + (1.0 - p0) * (1.0 - p0).ln());
    let expected = -p0.ln() - 0.1 * entropy;
    let ecp = value(&x, |g, v| entropy_penalty_loss(g, v, &t, 0.1).unwrap());
    assert!((ecp - expected).abs() < 1e-12);
}

#[test]
fn margin_hand_cases() {
    let t = targets(2, vec![0], vec![0.0; 2], vec![Region::Inner]);
    let x = logits_tensor(&t, vec![12.0, 0.0]);
    let ce = lse_oracle(&t, &x);
    let mbls = value(&x, |g, v| margin_logit_loss(g, v, &t, 0.1, 10.0).unwrap());
    // hinges (0, 2), mean 1
    assert!((mbls - ce - 0.1).abs() < 1e-12);
    let x = logits_tensor(&t, vec![5.0, 0.0]);
    let mbls = value(&x, |g, v| margin_logit_loss(g, v, &t, 0.1, 10.0).unwrap());
    assert!((mbls - lse_oracle(&t, &x)).abs() < 1e-12);
}

#[test]
fn reduction_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (t, x) = random_case(&mut rng, 3, 6, 6);
        let ce = value(&x, |g, v| cross_entropy(g, v, &t.labels).unwrap());
        let lambda = rng.gen_range(0.01..2.0);
        let nacl = breakdown(&x, |g, v| nacl_loss(g, v, &t, lambda).unwrap()).total;
        let fixed = breakdown(&x, |g, v| {
            crac_fixed_loss(g, v, &t, &RegionMatrix::filled(3, lambda)).unwrap()
        })
        .total;
        assert!((nacl - fixed).abs() <= 1e-12);
        let nacl0 = breakdown(&x, |g, v| nacl_loss(g, v, &t, 0.0).unwrap()).total;
        assert!((nacl0 - ce).abs() <= 1e-12);
        let fl0 = value(&x, |g, v| focal_loss(g, v, &t, 0.0).unwrap());
        assert!((fl0 - ce).abs() <= 1e-12);
        let ls0 = value(&x, |g, v| label_smoothing_ce(g, v, &t, 0.0).unwrap());
        assert!((ls0 - ce).abs() <= 1e-12);
        let ecp0 = value(&x, |g, v| entropy_penalty_loss(g, v, &t, 0.0).unwrap());
        assert!((ecp0 - ce).abs() <= 1e-12);
        let mbls0 = value(&x, |g, v| margin_logit_loss(g, v, &t, 0.0, 10.0).unwrap());
        assert!((mbls0 - ce).abs() <= 1e-12);
    }
}

#[test]
fn breakdown_terms_add_up() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, x) = random_case(&mut rng, 4, 8, 8);
    let lambda = RegionMatrix::filled(4, 0.3);
    let rho = RegionMatrix::filled(4, 1.5);
    for convention in [Convention::Signed, Convention::Absolute] {
        let alm = AlmParams {
            lambda: &lambda,
            rho: &rho,
            convention,
        };
        let b = breakdown(&x, |g, v| crac_alm_loss(g, v, &t, &alm).unwrap());
        assert!((b.total - b.ce_term - b.penalty_inner - b.penalty_outer).abs() < 1e-9);
        assert!(b.violation.is_finite());
    }
}

#[test]
fn statistics_match_per_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let (t, x) = random_case(&mut rng, 3, 8, 8);
        let lambda = RegionMatrix::from_rows(&[[0.1, 2.0], [0.5, 0.3], [1.0, 4.0]]);
        let rho = RegionMatrix::from_rows(&[[1.0, 0.5], [3.0, 1.2], [0.7, 2.0]]);
        let alm = AlmParams {
            lambda: &lambda,
            rho: &rho,
            convention: Convention::Signed,
        };
        let stats = constraint_stats(&x, &t, &alm).unwrap();
        let b = breakdown(&x, |g, v| crac_alm_loss(g, v, &t, &alm).unwrap());
        for k in 0..3 {
            for r in Region::ALL {
                let (mut n, mut d, mut a, mut s) = (0usize, 0.0, 0.0, 0.0);
                for p in 0..64 {
                    if t.regions[p] != r {
                        continue;
                    }
                    let z = t.tau[k * 64 + p] - x.data()[k * 64 + p];
                    n += 1;
                    d += (lambda.get(k, r) + rho.get(k, r) * z).max(0.0);
                    a += z.abs();
                    s += z;
                }
                let mean = |v: f64| if n == 0 { 0.0 } else { v / n as f64 };
                assert_eq!(stats.count(r), n);
                assert!((stats.mean_derivative.get(k, r) - mean(d)).abs() < 1e-12);
                assert!((stats.mean_abs_violation.get(k, r) - mean(a)).abs() < 1e-12);
                assert!((stats.mean_violation.get(k, r) - mean(s)).abs() < 1e-12);
                assert!((b.violation.get(k, r) - mean(s)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn every_loss_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lambda = RegionMatrix::from_rows(&[[0.3, 1.1], [0.6, 0.2], [0.9, 0.4]]);
    let rho = RegionMatrix::from_rows(&[[1.0, 2.0], [0.5, 1.5], [2.5, 0.8]]);
    let opts = GradCheckOptions::new(1e-4, 1e-3);
    for name in LossKind::NAMES {
        let kind = LossKind::default_for(name, 3).unwrap();
        for _ in 0..5 {
            let (t, x) = random_case(&mut rng, 3, 4, 4);
            let alm = AlmParams {
                lambda: &lambda,
                rho: &rho,
                convention: Convention::Signed,
            };
            let report = grad_check::<_, crac_core::Error>(
                &[x],
                |g, v| Ok(compute_loss(g, v[0], &t, &kind, Some(&alm))?.loss),
                &opts,
            )
            .unwrap();
            assert!(report.passed(), "{name}: {report:?}");
        }
    }
}

#[test]
fn loss_names_round_trip() {
    for name in LossKind::NAMES {
        assert_eq!(LossKind::default_for(name, 3).unwrap().name(), name);
    }
    assert!(LossKind::default_for("svls", 3).is_err());
}
