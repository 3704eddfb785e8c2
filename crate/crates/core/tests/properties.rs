use lti_mogp::data::split_train_test;
use lti_mogp::elbo::{elbo_cohort, expected_loglik, gaussian_kl};
use lti_mogp::eval::{self, max_effect, Prediction};
use lti_mogp::mogp::{mixed_marginal, whitened_marginal_diag, Matern32Kernel, MixingCoefficients, VariationalState, WhitenedState};
use lti_mogp::optimizer::initialize;
use lti_mogp::synthetic::{generate_cohort, SimConfig};
use lti_mogp::{io, Cohort, Matrix, DoseEvent, FittedModel, GlobalParams, Hyperparams, LocalParams, ModelConfig, OptimizerConfig, SecondOrderLti, TreatmentSchedule};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn schedule(r: &mut ChaCha8Rng) -> TreatmentSchedule {
    let n = r.random_range(1..4);
    let events = (0..n)
        .map(|_| {
            let start = r.random_range(0.0..50.0);
            if r.random_bool(0.5) {
                DoseEvent::impulse(start, r.random_range(0.1..5.0)).unwrap()
            } else {
                DoseEvent::interval(start, start + r.random_range(0.5..20.0), r.random_range(0.1..2.0)).unwrap()
            }
        })
        .collect();
    TreatmentSchedule::new(events).unwrap()
}

fn system(r: &mut ChaCha8Rng) -> SecondOrderLti {
    SecondOrderLti::new(r.random_range(0.05..3.0), r.random_range(0.05..3.0)).unwrap()
}

fn times(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut t = r.random_range(0.0..5.0);
    (0..n)
        .map(|_| {
            t += r.random_range(0.3..3.0);
            t
        })
        .collect()
}

fn lower(r: &mut ChaCha8Rng, m: usize) -> Matrix {
    Matrix::from_fn(m, m, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => r.random_range(-0.5..0.5),
        std::cmp::Ordering::Equal => r.random_range(0.2..1.5),
        std::cmp::Ordering::Less => 0.0,
    })
}

fn small_config(seed: u64) -> SimConfig {
    SimConfig {
        n_patients: 3,
        obs_count_mean: 10.0,
        seed,
        ..SimConfig::default()
    }
}

fn model() -> ModelConfig {
    ModelConfig {
        n_inducing: 5,
        ..ModelConfig::default()
    }
}

/// Initialized parameters with every packed coordinate nudged.
fn instance(seed: u64) -> (Cohort, GlobalParams, Vec<LocalParams>) {
    let (cohort, _) = generate_cohort(&small_config(seed)).unwrap();
    let (global, locals) = initialize(&cohort, &model(), &OptimizerConfig::default()).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let locals = locals
        .iter()
        .map(|l| {
            let x: Vec<f64> = l.pack().iter().map(|v| v + noise.sample(&mut r)).collect();
            l.unpack(&x).unwrap()
        })
        .collect();
    (cohort, global, locals)
}

fn predictions(r: &mut ChaCha8Rng, n: usize, n_signals: usize) -> Vec<Prediction> {
    (0..n)
        .map(|i| Prediction {
            patient_id: format!("p{}", i % 3),
            signal: i % n_signals,
            horizon_days: 1.0,
            time: i as f64,
            observed: r.random_range(-3.0..3.0),
            predicted: r.random_range(-3.0..3.0),
        })
        .collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn impulse_response_is_causal_and_nonnegative(seed in any::<u64>(), t in -50.0..200.0f64) {
        let sys = system(&mut rng(seed));
        let h = sys.impulse_response(t).unwrap();
        prop_assert!(h >= 0.0);
        if t <= 0.0 {
            prop_assert_eq!(h, 0.0);
        }
    }

    #[test]
    fn cumulative_response_is_monotone_and_bounded(seed in any::<u64>(), t in 0.0..100.0f64, dt in 0.0..10.0f64) {
        let sys = system(&mut rng(seed));
        let a = sys.cumulative_response(t).unwrap();
        let b = sys.cumulative_response(t + dt).unwrap();
        prop_assert!(b >= a - 1e-14);
        prop_assert!((0.0..=1.0 + 1e-14).contains(&b));
    }

    #[test]
    fn convolution_is_linear_in_magnitudes(seed in any::<u64>(), c in 0.1..10.0f64, t in 0.0..120.0f64) {
        let mut r = rng(seed);
        let sys = system(&mut r);
        let s = schedule(&mut r);
        let scaled = TreatmentSchedule::new(
            s.events()
                .iter()
                .map(|e| match *e {
                    DoseEvent::Impulse { time, mass } => DoseEvent::impulse(time, c * mass).unwrap(),
                    DoseEvent::Interval { start, end, rate } => DoseEvent::interval(start, end, c * rate).unwrap(),
                })
                .collect(),
        )
        .unwrap();
        let other = schedule(&mut r);
        let base = sys.convolve_schedule(&s, t);
        prop_assert!(close(sys.convolve_schedule(&scaled, t), c * base, 1e-12));
        let sum = sys.convolve_schedule(&s, t) + sys.convolve_schedule(&other, t);
        prop_assert!(close(sys.convolve_schedule(&s.merged(&other), t), sum, 1e-12));
    }

    #[test]
    fn convolution_is_time_invariant(seed in any::<u64>(), dt in 0.0..30.0f64, t in 0.0..120.0f64) {
        let mut r = rng(seed);
        let sys = system(&mut r);
        let s = schedule(&mut r);
        let a = sys.convolve_schedule(&s, t);
        let b = sys.convolve_schedule(&s.shifted(dt), t + dt);
        prop_assert!(close(a, b, 1e-9));
    }

    #[test]
    fn kernel_matrix_is_symmetric_unit_diagonal_psd(seed in any::<u64>(), n in 2usize..12, ell in 0.5..30.0f64) {
        let mut r = rng(seed);
        let t = times(&mut r, n);
        let k = Matern32Kernel::new(ell).unwrap().matrix(&t, &t);
        for i in 0..n {
            prop_assert_eq!(k[(i, i)], 1.0);
            for j in 0..n {
                prop_assert_eq!(k[(i, j)], k[(j, i)]);
            }
        }
        let dense = DMatrix::from_fn(n, n, |i, j| k[(i, j)]);
        let min = dense.symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-10, "smallest eigenvalue {min}");
    }

    #[test]
    fn prior_state_recovers_prior_marginals(seed in any::<u64>(), m in 2usize..8, ell in 1.0..20.0f64) {
        let mut r = rng(seed);
        let z = times(&mut r, m);
        let t = times(&mut r, 6);
        let kern = Matern32Kernel::new(ell).unwrap();
        let (mean, var) = whitened_marginal_diag(&kern, &WhitenedState::prior(z), &t, 1e-6).unwrap();
        for (mu, v) in mean.iter().zip(&var) {
            prop_assert_eq!(*mu, 0.0);
            prop_assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn mixed_covariance_scales_with_squared_weights(seed in any::<u64>(), w in -2.0..2.0f64, k in 0.0..2.0f64) {
        let mut r = rng(seed);
        let n = 4;
        let lg = lower(&mut r, n);
        let lv = lower(&mut r, n);
        let sg = lg.matmul(&lg.transpose());
        let sv = lv.matmul(&lv.transpose());
        let mg: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mv: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mix = MixingCoefficients { omega: vec![w], kappa: vec![k] };
        let (mean, cov) = mixed_marginal((&mg, &sg), (&mv, &sv), &mix, 0);
        for i in 0..n {
            prop_assert!(close(mean[i], w * mg[i] + k * mv[i], 1e-14));
            for j in 0..n {
                prop_assert!(close(cov[(i, j)], w * w * sg[(i, j)] + k * k * sv[(i, j)], 1e-14));
            }
        }
    }

    #[test]
    fn kl_is_nonnegative(seed in any::<u64>(), m in 1usize..7) {
        let mut r = rng(seed);
        let z = times(&mut r, m);
        let mean: Vec<f64> = (0..m).map(|_| r.random_range(-2.0..2.0)).collect();
        let state = VariationalState::new(z.clone(), mean, lower(&mut r, m)).unwrap();
        let kzz = Matern32Kernel::new(r.random_range(1.0..10.0)).unwrap().inducing_covariance(&z, 1e-6);
        prop_assert!(gaussian_kl(&state, &kzz).unwrap() >= -1e-10);
    }

    #[test]
    fn zero_variance_expected_loglik_is_exact(seed in any::<u64>(), n in 1usize..20, s2 in 0.01..4.0f64) {
        let mut r = rng(seed);
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let m: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let exact: f64 = y
            .iter()
            .zip(&m)
            .map(|(a, b)| -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - (a - b) * (a - b) / (2.0 * s2))
            .sum();
        prop_assert!(close(expected_loglik(&y, &m, &vec![0.0; n], s2).unwrap(), exact, 1e-12));
    }

    #[test]
    fn nrmse_of_perfect_fit_is_zero(seed in any::<u64>(), n in 4usize..40) {
        let mut preds = predictions(&mut rng(seed), n, 2);
        for p in &mut preds {
            p.predicted = p.observed;
        }
        prop_assert_eq!(eval::nrmse(&preds, 2).unwrap().mean, 0.0);
    }

    #[test]
    fn nrmse_is_scale_and_shift_invariant(seed in any::<u64>(), n in 4usize..40, c in 0.1..10.0f64, b in -5.0..5.0f64) {
        let preds = predictions(&mut rng(seed), n, 2);
        let moved: Vec<Prediction> = preds
            .iter()
            .map(|p| Prediction { observed: c * p.observed + b, predicted: c * p.predicted + b, ..p.clone() })
            .collect();
        let a = eval::nrmse(&preds, 2).unwrap();
        let m = eval::nrmse(&moved, 2).unwrap();
        prop_assert!(close(a.mean, m.mean, 1e-10));
    }

    #[test]
    fn qq_is_permutation_invariant(seed in any::<u64>(), n in 3usize..30) {
        let mut r = rng(seed);
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.random_range(0.0..5.0)).collect();
        let mut shuffled = a.clone();
        shuffled.reverse();
        shuffled.rotate_left(r.random_range(0..n));
        let q = eval::qq_correlation(&a, &b).unwrap();
        prop_assert!(close(q, eval::qq_correlation(&shuffled, &b).unwrap(), 1e-12));
        prop_assert!(close(eval::qq_correlation(&a, &a).unwrap(), 1.0, 1e-12));
    }

    #[test]
    fn max_effect_is_linear_in_chi(seed in any::<u64>(), c in -5.0..5.0f64) {
        let (cohort, _, locals) = instance(seed);
        let rec = &cohort.patients[0];
        let mut local = locals[0].clone();
        let base = max_effect(&local, &rec.schedules[1], 1, 0).value;
        let chi = local.treatments[1].chi[0];
        local.treatments[1].chi[0] = c * chi;
        prop_assert!(close(max_effect(&local, &rec.schedules[1], 1, 0).value, c * base, 1e-12));
    }

    #[test]
    fn split_partitions_each_series(seed in any::<u64>(), f in 0.05..0.95f64) {
        let (cohort, _) = generate_cohort(&small_config(seed)).unwrap();
        for p in &cohort.patients {
            if p.series.iter().any(|s| s.len() < 2) {
                continue;
            }
            let (train, test) = split_train_test(p, f).unwrap();
            for d in 0..p.n_signals() {
                let joined: Vec<f64> = train.series[d].times().iter().chain(test.series[d].times()).copied().collect();
                prop_assert_eq!(joined.as_slice(), p.series[d].times());
                let last = *train.series[d].times().last().unwrap();
                prop_assert!(test.series[d].times().iter().all(|&t| t > last));
            }
            prop_assert_eq!(&train.schedules, &p.schedules);
        }
    }

    #[test]
    fn packing_round_trips(seed in any::<u64>()) {
        let (_, global, locals) = instance(seed);
        for l in &locals {
            let x = l.pack();
            let back = l.unpack(&x).unwrap().pack();
            for (a, b) in x.iter().zip(&back) {
                prop_assert!(close(*a, *b, 1e-12));
            }
        }
        prop_assert_eq!(global.unpack(&global.pack()).unwrap(), global);
    }

    #[test]
    fn serialized_model_round_trips(seed in any::<u64>()) {
        let (cohort, global, locals) = instance(seed);
        let fitted = FittedModel {
            model: model(),
            hyper: Hyperparams::default(),
            global,
            patients: cohort.patients.iter().map(|p| p.id.clone()).zip(locals).collect(),
        };
        let text = fitted.to_text().unwrap();
        prop_assert_eq!(FittedModel::from_text(&text).unwrap(), fitted);
    }

    #[test]
    fn cohort_files_round_trip(seed in any::<u64>()) {
        let (cohort, _) = generate_cohort(&small_config(seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (o, t) = (dir.path().join("o.csv"), dir.path().join("t.csv"));
        io::write_cohort(&cohort, &o, &t, None).unwrap();
        let back: Cohort = io::load_cohort(&o, &t, None).unwrap();
        prop_assert_eq!(back, cohort);
    }

    #[test]
    fn cohort_elbo_ignores_patient_order(seed in any::<u64>()) {
        let (cohort, global, locals) = instance(seed);
        let hyper = Hyperparams::default();
        let a = elbo_cohort(&locals, &global, &hyper, &cohort, &model()).unwrap();
        let mut patients = cohort.patients.clone();
        let mut rev = locals.clone();
        patients.reverse();
        rev.reverse();
        let flipped = Cohort::new(patients, cohort.n_signals(), cohort.n_treatments()).unwrap();
        let b = elbo_cohort(&rev, &global, &hyper, &flipped, &model()).unwrap();
        prop_assert!(close(a, b, 1e-12));
    }
}
