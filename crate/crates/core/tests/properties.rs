//! Property tests for the model invariants.

use mgcp::bench::mean_absolute_error;
use mgcp::optim::{minimize, LbfgsOptions};
use mgcp::{
    assemble_covariance, bgcp_combine, cov_auto_source, cov_auto_target, cov_cross, expand, fit, huber_l1,
    log_likelihood_schur, marginalize, penalized_objective, BandwidthChoice, DameConfig, DomainSpec, ExpansionNoise,
    Hyperparameters, InducedSet, Jitter, KernelParams, Matrix, OutputData, ParamLayout, PenaltyMode,
    PredictiveDistribution, Role, TrainConfig, TransferData, UniqueValues,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kernel(d: usize) -> impl Strategy<Value = KernelParams<f64>> {
    (-3.0..3.0f64, prop::collection::vec(-2.0..2.0f64, d)).prop_map(|(a, l)| KernelParams::new(a, l))
}

fn kernel_pair_and_lag() -> impl Strategy<Value = (KernelParams<f64>, KernelParams<f64>, Vec<f64>)> {
    (1usize..4).prop_flat_map(|d| (kernel(d), kernel(d), prop::collection::vec(-4.0..4.0f64, d)))
}

fn random_data(rng: &mut ChaCha8Rng, q: usize, d: usize, n: usize, n_t: usize) -> TransferData<f64> {
    let mut output = |len: usize, role| {
        let x = Matrix::from_fn(len, d, |_, _| rng.gen_range(-2.0..2.0));
        let y = (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect();
        OutputData::new(x, y, role).unwrap()
    };
    let sources = (0..q).map(|i| output(n, Role::Source(i))).collect();
    let target = output(n_t, Role::Target);
    TransferData::new(sources, target).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cross_covariance_is_even_in_the_lag((k1, k2, v) in kernel_pair_and_lag()) {
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let a = cov_cross(&v, &k1, &k2).unwrap();
        let b = cov_cross(&neg, &k1, &k2).unwrap();
        prop_assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
    }

    #[test]
    fn zero_alpha_zeroes_cross_covariance((k1, k2, v) in kernel_pair_and_lag()) {
        let silent = KernelParams::new(0.0, k2.log_lambda.clone());
        prop_assert_eq!(cov_cross(&v, &k1, &silent).unwrap(), 0.0);
        let silent = KernelParams::new(0.0, k1.log_lambda.clone());
        prop_assert_eq!(cov_cross(&v, &silent, &k2).unwrap(), 0.0);
    }

    #[test]
    fn auto_covariance_at_zero_lag_is_alpha_squared(
        ks in (1usize..4).prop_flat_map(|d| prop::collection::vec(kernel(d), 1..5))
    ) {
        let zero = vec![0.0; ks[0].dim()];
        let a = ks[0].alpha;
        prop_assert_eq!(cov_auto_source(&zero, &ks[0]).unwrap(), a * a);
        let total: f64 = ks.iter().map(|k| k.alpha * k.alpha).sum();
        let got = cov_auto_target(&zero, &ks).unwrap();
        prop_assert!((got - total).abs() <= 1e-14 * total.max(1.0));
    }

    #[test]
    fn huber_smoothing_gap_is_bounded(
        alphas in prop::collection::vec(-1.0..1.0f64, 1..20),
        gamma in 0.0..10.0f64,
        eta in 1e-8..1e-2f64,
    ) {
        let exact: f64 = gamma * alphas.iter().map(|a| a.abs()).sum::<f64>();
        let gap = exact - huber_l1(&alphas, gamma, eta);
        let slack = 1e-12 * exact.max(1.0);
        prop_assert!(gap >= -slack);
        prop_assert!(gap <= gamma * alphas.len() as f64 * eta / 2.0 + slack);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn initial_draws_factorize_with_small_jitter(
        seed: u64, q in 1usize..5, d in 1usize..3, n in 2usize..12, n_t in 1usize..8, shared: bool
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_data(&mut rng, q, d, n, n_t);
        let theta = Hyperparameters::<f64>::random(ParamLayout::new(q, d, shared), &mut rng);
        let bundle = assemble_covariance(&data, &theta, Jitter::default()).unwrap();
        prop_assert!(bundle.jitter() <= 1e-6, "jitter {}", bundle.jitter());
    }

    #[test]
    fn zero_penalty_objective_is_the_likelihood(seed: u64, q in 1usize..4, gamma in 0.0..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_data(&mut rng, q, 1, 6, 4);
        let mut theta = Hyperparameters::<f64>::random(ParamLayout::new(q, 1, false), &mut rng);
        let config = TrainConfig { gamma: 0.0, ..TrainConfig::default() };
        let ll = log_likelihood_schur(
            &assemble_covariance(&data, &theta, Jitter::default()).unwrap(),
            &data.stacked_responses(),
        )
        .unwrap();
        prop_assert_eq!(penalized_objective(&data, &theta, &config).unwrap(), ll);

        for s in &mut theta.sources {
            s.transfer_kernel.alpha = 0.0;
        }
        let ll = log_likelihood_schur(
            &assemble_covariance(&data, &theta, Jitter::default()).unwrap(),
            &data.stacked_responses(),
        )
        .unwrap();
        let config = TrainConfig { gamma, ..config };
        prop_assert_eq!(penalized_objective(&data, &theta, &config).unwrap(), ll);
    }

    #[test]
    fn accepted_iterates_never_worsen_the_objective(seed: u64, q in 1usize..4, gamma in 0.0..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_data(&mut rng, q, 1, 6, 4);
        let layout = ParamLayout::new(q, 1, false);
        let theta0 = Hyperparameters::<f64>::random(layout, &mut rng);
        let config = TrainConfig { gamma, penalty_mode: PenaltyMode::L1Transfer, ..TrainConfig::default() };
        let f = |x: &[f64]| -> mgcp::Result<(f64, Vec<f64>)> {
            let theta = Hyperparameters::from_flat(layout, x)?;
            let v = penalized_objective(&data, &theta, &config)?;
            let g = mgcp::objective_gradient(&data, &theta, &config)?;
            Ok((-v, g.into_iter().map(|x| -x).collect()))
        };
        let opts = LbfgsOptions { max_iterations: 60, ..LbfgsOptions::default() };
        let out = minimize(f, theta0.to_flat(), &opts).unwrap();
        for w in out.history.windows(2) {
            prop_assert!(w[1] <= w[0], "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn expansion_has_exact_cardinality_and_columns(
        seed: u64,
        n_induced in 1usize..6,
        n_expand in 1usize..5,
        d_shared in 1usize..3,
        d_unique in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = Matrix::from_fn(n_induced, d_shared, |_, _| rng.gen_range(-1.0..1.0));
        let responses: Vec<f64> = (0..n_induced).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let induced = InducedSet::new(inputs.clone(), responses.clone()).unwrap();
        let bounds: Vec<(f64, f64)> = (0..d_unique).map(|k| (-(k as f64) - 1.0, k as f64 + 0.5)).collect();
        let spec = DomainSpec::new((0..d_shared).collect(), vec![], d_unique, UniqueValues::Bounds(bounds)).unwrap();
        let config = DameConfig {
            n_induced,
            n_expand,
            bandwidth: BandwidthChoice::Fixed(1.0),
            expansion_noise: ExpansionNoise::Fixed(0.0),
            seed,
        };
        let pseudo = expand(&induced, &spec, &config, None).unwrap();
        let per_point = n_expand.pow(d_unique as u32);
        prop_assert_eq!(pseudo.len(), n_induced * per_point);
        prop_assert_eq!(pseudo.dim(), d_shared + d_unique);

        let grid: Vec<Vec<f64>> = (0..per_point)
            .map(|r| pseudo.inputs().row(r)[d_shared..].to_vec())
            .collect();
        for a in 0..n_induced {
            let mut sum = 0.0;
            for (b, u) in grid.iter().enumerate() {
                let row = pseudo.inputs().row(a * per_point + b);
                prop_assert_eq!(&row[..d_shared], inputs.row(a));
                prop_assert_eq!(&row[d_shared..], u.as_slice());
                sum += pseudo.responses()[a * per_point + b];
            }
            // Noise-free pseudo responses average back to the induced value.
            prop_assert!((sum / per_point as f64 - responses[a]).abs() <= 1e-12 * responses[a].abs().max(1.0));
        }
        for (k, (lo, hi)) in spec_bounds(&spec).into_iter().enumerate() {
            let col: Vec<f64> = grid.iter().map(|u| u[k]).collect();
            prop_assert!(col.iter().all(|v| *v >= lo && *v <= hi));
        }
    }

    #[test]
    fn marginalize_ignores_row_order(seed: u64, n in 4usize..25, cv: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(n, 2, |_, _| (rng.gen_range(0.0..4.0f64) * 2.0).round() / 2.0);
        let y: Vec<f64> = (0..n).map(|r| x.row(r)[0].sin() + x.row(r)[1] + rng.gen_range(-0.1..0.1)).collect();
        let source = OutputData::new(x.clone(), y.clone(), Role::Source(0)).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = source.subset(&perm).unwrap();
        let spec = DomainSpec::new(vec![0], vec![1], 0, UniqueValues::Points(vec![vec![]])).unwrap();
        let config = DameConfig {
            n_induced: 5,
            n_expand: 1,
            bandwidth: if cv {
                BandwidthChoice::CrossValidated { folds: 3, candidates: vec![] }
            } else {
                BandwidthChoice::Fixed(0.7)
            },
            expansion_noise: ExpansionNoise::Fixed(0.0),
            seed,
        };
        let a = marginalize(&source, &spec, &config).unwrap();
        let b = marginalize(&shuffled, &spec, &config).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mae_is_nonnegative_and_zero_on_itself(values in prop::collection::vec(-1e3..1e3f64, 1..50), shift in -5.0..5.0f64) {
        prop_assert_eq!(mean_absolute_error(&values, &values), 0.0);
        let moved: Vec<f64> = values.iter().map(|v| v + shift).collect();
        prop_assert!(mean_absolute_error(&moved, &values) >= 0.0);
    }

    #[test]
    fn combining_identical_submodels_is_identity(
        mean in prop::collection::vec(-10.0..10.0f64, 1..20),
        q in 1usize..8,
        var_seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(var_seed);
        let variance: Vec<f64> = mean.iter().map(|_| rng.gen_range(1e-3..5.0)).collect();
        let one = PredictiveDistribution { mean: mean.clone(), variance: variance.clone(), includes_noise: true };
        let combined = bgcp_combine(&vec![one; q]).unwrap();
        for i in 0..mean.len() {
            prop_assert!((combined.mean[i] - mean[i]).abs() <= 1e-14 * mean[i].abs().max(1.0));
            prop_assert!((combined.variance[i] - variance[i]).abs() <= 1e-14 * variance[i]);
        }
    }
}

fn spec_bounds(spec: &DomainSpec<f64>) -> Vec<(f64, f64)> {
    match &spec.target_unique {
        UniqueValues::Bounds(b) => b.clone(),
        _ => unreachable!(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn fitting_is_deterministic(seed: u64, gamma in 0.0..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_data(&mut rng, 2, 1, 8, 5);
        let config = TrainConfig { gamma, restarts: 2, max_iterations: 80, seed, ..TrainConfig::default() };
        let a = fit(&data, &config).unwrap();
        let b = fit(&data, &config).unwrap();
        prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
        let bits = |r: &mgcp::FitResult<f64>| r.theta_hat.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }
}
