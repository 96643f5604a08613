use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use pflm::eval::gamma_error;
use pflm::funcdata::{load_dataset, make_grid, save_dataset};
use pflm::kernel::{build_kc, KernelFunction};
use pflm::simgen::{generate, Example, SimSpec};
use pflm::sketch::{SketchKind, SketchMatrix};
use pflm::solver::{self, fit, soft_threshold, FitConfig};
use pflm::tuning::make_folds;

fn kind(i: usize) -> SketchKind {
    [SketchKind::Gaussian, SketchKind::Ros, SketchKind::Sub][i % 3]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn soft_threshold_minimizes_its_prox_objective(u in -5.0f64..5.0, t in 0.0f64..3.0, probe in -6.0f64..6.0) {
        let v = soft_threshold(&DVector::from_element(1, u), t).unwrap()[0];
        let f = |x: f64| 0.5 * (u - x).powi(2) + t * x.abs();
        prop_assert!(f(v) <= f(probe) + 1e-12);
    }

    #[test]
    fn folds_partition(n in 5usize..200, k in 2usize..6, seed: u64) {
        prop_assume!(n >= k);
        let folds = make_folds(n, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn gamma_error_is_permutation_invariant(v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20), rot in 0usize..20) {
        let (a, b): (Vec<f64>, Vec<f64>) = v.iter().copied().unzip();
        let r = rot % a.len();
        let mut ar = a.clone();
        let mut br = b.clone();
        ar.rotate_left(r);
        br.rotate_left(r);
        let e = gamma_error(&a, &b).unwrap();
        prop_assert!((e - gamma_error(&ar, &br).unwrap()).abs() <= 1e-12 * e.max(1.0));
        prop_assert!(e >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fits_descend_and_agree_across_starts(seed in 0u64..10_000, n in 10usize..40, p in 2usize..6, k in 0usize..3,
                                             log_mu2 in -5.0f64..-1.0, lambda in 0.0f64..0.3) {
        let spec = SimSpec::new(Example::One, n, p, 2.0, seed).unwrap();
        let ds = generate(&spec, &make_grid(80).unwrap()).unwrap().0;
        let kc = build_kc(&KernelFunction::Bernoulli, &ds).unwrap();
        let m = 1 + (seed as usize % n);
        let s = SketchMatrix::new(kind(k), m, n, seed).unwrap();
        let cfg = FitConfig::new(10f64.powf(log_mu2), lambda).unwrap();
        let a = fit(&kc, ds.z(), ds.y(), &s, &cfg, None).unwrap();
        for w in a.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!(a.alpha.iter().chain(a.gamma.iter()).all(|v| v.is_finite()));
        let init = (DVector::from_element(m, 3.0), DVector::from_element(p, -2.0));
        let b = fit(&kc, ds.z(), ds.y(), &s, &cfg, Some(init)).unwrap();
        if a.converged && b.converged {
            prop_assert!((a.objective() - b.objective()).abs() <= 1e-6);
        }
    }

    #[test]
    fn prediction_is_linear_and_reproduces_training_fits(seed in 0u64..10_000, i in 0usize..20, c in -3.0f64..3.0) {
        let spec = SimSpec::new(Example::Two, 20, 3, 2.0, seed).unwrap();
        let ds = generate(&spec, &make_grid(60).unwrap()).unwrap().0;
        let kernel = KernelFunction::Bernoulli;
        let kc = build_kc(&kernel, &ds).unwrap();
        let s = SketchMatrix::new(kind(seed as usize), 5, 20, seed).unwrap();
        let r = fit(&kc, ds.z(), ds.y(), &s, &FitConfig::new(1e-3, 0.05).unwrap(), None).unwrap();
        let g = ds.grid().len();

        prop_assert_eq!(solver::predict(&r, &s, &ds, &kernel, &vec![0.0; g], &[0.0; 3]).unwrap(), 0.0);

        let xi: Vec<f64> = ds.x().row(i).iter().copied().collect();
        let on_train = solver::predict(&r, &s, &ds, &kernel, &xi, &[0.0; 3]).unwrap();
        let c_vec = s.transpose_apply(&r.alpha).unwrap();
        let expect = (kc.values() * c_vec)[i];
        prop_assert!((on_train - expect).abs() <= 1e-10 * expect.abs().max(1.0));

        let xj: Vec<f64> = ds.x().row((i + 1) % 20).iter().copied().collect();
        let z1 = [0.3, -1.0, 2.0];
        let z2 = [1.0, 0.5, 0.0];
        let mix_x: Vec<f64> = xi.iter().zip(&xj).map(|(a, b)| c * a + b).collect();
        let mix_z: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| c * a + b).collect();
        let lhs = solver::predict(&r, &s, &ds, &kernel, &mix_x, &mix_z).unwrap();
        let rhs = c * solver::predict(&r, &s, &ds, &kernel, &xi, &z1).unwrap()
            + solver::predict(&r, &s, &ds, &kernel, &xj, &z2).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }
}

#[test]
fn dataset_round_trip_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SimSpec::new(Example::Two, 30, 4, 1.1, 99).unwrap();
    let (ds, _) = generate(&spec, &make_grid(150).unwrap()).unwrap();
    save_dataset(&ds, tmp.path()).unwrap();
    let back = load_dataset(tmp.path()).unwrap();
    assert_eq!(back.x(), ds.x());
    assert_eq!(back.z(), ds.z());
    assert_eq!(back.y(), ds.y());
    assert_eq!(back.meta(), ds.meta());
    let kc_a = build_kc(&KernelFunction::Bernoulli, &ds).unwrap();
    let kc_b = build_kc(&KernelFunction::Bernoulli, &back).unwrap();
    assert_eq!(kc_a.values(), kc_b.values());
}

#[test]
fn sketched_objective_matches_its_expanded_form() {
    let spec = SimSpec::new(Example::One, 24, 3, 2.0, 5).unwrap();
    let ds = generate(&spec, &make_grid(80).unwrap()).unwrap().0;
    let kc = build_kc(&KernelFunction::Bernoulli, &ds).unwrap();
    let s = SketchMatrix::new(SketchKind::Ros, 6, 24, 2).unwrap();
    let cfg = FitConfig::new(0.01, 0.2).unwrap();
    let alpha = DVector::from_fn(6, |i, _| (i as f64 - 2.0) * 0.3);
    let gamma = DVector::from_vec(vec![1.0, -0.5, 0.0]);
    let direct = solver::objective(&kc, ds.z(), ds.y(), &s, &alpha, &gamma, &cfg).unwrap();
    // (1/n) a'(SK)(SK)'a - (2/n) a'SK(y - Z g) + (1/n)|y - Z g|^2 + mu2 a'SKS'a + lambda |g|_1
    let sk: DMatrix<f64> = s.values() * kc.values();
    let sks = &sk * s.values().transpose();
    let r = ds.y() - ds.z() * &gamma;
    let n = 24.0;
    let expanded = (alpha.transpose() * &sk * sk.transpose() * &alpha)[0] / n
        - 2.0 / n * (alpha.transpose() * &sk * &r)[0]
        + r.norm_squared() / n
        + 0.01 * (alpha.transpose() * &sks * &alpha)[0]
        + 0.2 * 1.5;
    assert!((direct - expanded).abs() <= 1e-12 * expanded.abs());
}
