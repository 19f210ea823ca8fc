use gridgp::kernels::{closed_form, freq_response_sq};
use gridgp::{
    ambient_alpha, design, eigenspace, poles_second_order, posterior, project_psd, project_psd_masked, sample_cov,
    woodbury_solve, BandSpec, ChannelSpec, CovarianceModel, Filtering, GridModel, InferenceProblem, Prior, Quantity,
    SelectionSet, SignalFrame, Solver,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

/// Ring over all buses plus optional chords, so the graph is always connected.
fn ring_model(inertia: &[f64], ring: &[f64], chords: &[(usize, usize, f64)], gamma: f64) -> GridModel {
    let n = inertia.len();
    let mut l = DMatrix::zeros(n, n);
    let mut line = |a: usize, b: usize, y: f64| {
        if a == b {
            return;
        }
        l[(a, a)] += y;
        l[(b, b)] += y;
        l[(a, b)] -= y;
        l[(b, a)] -= y;
    };
    for (k, &y) in ring.iter().enumerate() {
        line(k, (k + 1) % n, y);
    }
    for &(a, b, y) in chords {
        line(a % n, b % n, y);
    }
    let m = DVector::from_column_slice(inertia);
    GridModel::new(m.clone(), &m * gamma, l, 60.0).unwrap()
}

fn arb_model(max_buses: usize) -> impl Strategy<Value = GridModel> {
    (3..=max_buses)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0.02..0.2f64, n),
                prop::collection::vec(0.5..5.0f64, n),
                prop::collection::vec((0..n, 0..n, 0.2..3.0f64), 0..3),
                0.2..2.0f64,
            )
        })
        .prop_map(|(m, ring, chords, gamma)| ring_model(&m, &ring, &chords, gamma))
}

fn spd(n: usize, seed: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()] * ((i + 2 * j) as f64).cos());
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn poles_satisfy_vieta(lambda in 0.01..200.0f64, gamma in 0.05..5.0f64) {
        prop_assume!((gamma * gamma - 4.0 * lambda).abs() > 1e-3);
        let p = poles_second_order(lambda, gamma);
        prop_assert!((p.a + p.b - 1.0).norm() < 1e-12);
        prop_assert!((p.c + p.d + gamma).norm() < 1e-10 * gamma.max(1.0));
        prop_assert!((p.c * p.d - lambda).norm() < 1e-10 * lambda.max(1.0));
        if gamma * gamma < 4.0 * lambda {
            prop_assert!((p.c - p.d.conj()).norm() < 1e-12 * lambda.sqrt().max(1.0));
        }
    }

    #[test]
    fn resonance_gain_is_inverse_damping(lambda in 0.01..200.0f64, gamma in 0.05..5.0f64) {
        let g = freq_response_sq(lambda, gamma, lambda.sqrt());
        prop_assert!((g * gamma * gamma - 1.0).abs() < 1e-9);
    }

    #[test]
    fn autocovariance_peaks_at_zero_lag(lambda in 0.01..100.0f64, gamma in 0.1..5.0f64, tau in 0.0..30.0f64) {
        let k0 = closed_form::auto(lambda, gamma, 0.0);
        prop_assert!(closed_form::auto(lambda, gamma, tau).abs() <= k0 * (1.0 + 1e-9));
        prop_assert!((closed_form::auto(lambda, gamma, -tau) - closed_form::auto(lambda, gamma, tau)).abs() <= 1e-12 * k0.max(1.0));
    }

    #[test]
    fn damping_ratio_is_total_damping_over_inertia(model in arb_model(8)) {
        let g = model.damping.sum() / model.inertia.sum();
        prop_assert!((model.gamma - g).abs() < 1e-12 * g);
    }

    #[test]
    fn eigenspace_is_orthonormal_and_diagonalizes(model in arb_model(8)) {
        let space = eigenspace(&model, None).unwrap();
        let n = model.n_buses;
        let v = &space.eigvecs;
        prop_assert!((v.transpose() * v - DMatrix::identity(n, n)).amax() < 1e-8);
        prop_assert!(space.eigvals[0] >= -1e-8);
        prop_assert!(space.eigvals.as_slice().windows(2).all(|w| w[0] <= w[1]));
        let lm = model.scaled_laplacian();
        let recon = v * DMatrix::from_diagonal(&space.eigvals) * v.transpose();
        prop_assert!((&recon - &lm).norm() <= 1e-7 * lm.norm());
    }

    #[test]
    fn ambient_alpha_scales_quadratically(model in arb_model(6), s in 0.01..1.0f64) {
        let space = eigenspace(&model, None).unwrap();
        let a1 = ambient_alpha(&model, &space, 1.0).unwrap();
        let a = ambient_alpha(&model, &space, s).unwrap();
        prop_assert!((&a - &a1 * (s * s)).amax() <= 1e-12 * a1.amax());
    }

    #[test]
    fn psd_projection_is_psd_and_idempotent(n in 2..7usize, vals in prop::collection::vec(-1.0..1.0f64, 49)) {
        let a = DMatrix::from_fn(n, n, |i, j| vals[i * 7 + j]);
        let p = project_psd(&a);
        let lmin = SymmetricEigen::new(p.clone()).eigenvalues.min();
        prop_assert!(lmin >= -1e-10 * p.trace().abs().max(1.0));
        prop_assert!((&p - p.transpose()).amax() == 0.0);
        prop_assert!((project_psd(&p) - &p).amax() < 1e-10);
    }

    #[test]
    fn masked_projection_zeroes_masked_entries(n in 2..6usize, vals in prop::collection::vec(-1.0..1.0f64, 36), bits in prop::collection::vec(any::<bool>(), 36)) {
        let a = DMatrix::from_fn(n, n, |i, j| vals[i * 6 + j]);
        let mask = DMatrix::from_fn(n, n, |i, j| i == j || bits[i.min(j) * 6 + i.max(j)]);
        let p = project_psd_masked(&a, &mask);
        for i in 0..n {
            for j in 0..n {
                if !mask[(i, j)] {
                    prop_assert_eq!(p[(i, j)], 0.0);
                }
            }
        }
        let lmin = SymmetricEigen::new(p.clone()).eigenvalues.min();
        prop_assert!(lmin >= -1e-8 * p.trace().abs().max(1e-12));
    }

    #[test]
    fn woodbury_matches_dense(n in 5..30usize, d in 1..5usize, seed in prop::collection::vec(-1.0..1.0f64, 16), noise in prop::collection::vec(0.01..1.0f64, 30)) {
        let b = DMatrix::from_fn(n, d, |i, j| seed[(i + 3 * j) % 16] + 0.1 * (i as f64 * 0.7 + j as f64).sin());
        let k = spd(d, &seed);
        let s2 = DVector::from_fn(n, |i, _| noise[i]);
        let rhs = DMatrix::from_fn(n, 2, |i, j| ((i * 5 + j) as f64).cos());
        let dense = &b * &k * b.transpose() + DMatrix::from_diagonal(&s2);
        let x = woodbury_solve(&b, &k, &s2, &rhs).unwrap();
        prop_assert!((dense * x - &rhs).amax() < 1e-8 * rhs.amax());
    }

    #[test]
    fn fir_taps_are_symmetric(low in 0.05..1.0f64, width in 0.5..3.0f64) {
        let band = BandSpec::new(low, low + width).with_transition(0.5).with_taps(201);
        let f = design(&band, 15.0).unwrap();
        let n = f.taps.len();
        prop_assert!(n % 2 == 1);
        for k in 0..n / 2 {
            prop_assert_eq!(f.taps[k], f.taps[n - 1 - k]);
        }
    }

    #[test]
    fn zero_lag_sample_covariance_is_symmetric(vals in prop::collection::vec(-1.0..1.0f64, 120), lag in 0..5usize) {
        let chans = (0..3).map(ChannelSpec::speed).collect();
        let frame = SignalFrame::new(10.0, 0.0, chans, DMatrix::from_column_slice(40, 3, &vals)).unwrap();
        let c0 = sample_cov(&frame, 0).unwrap();
        prop_assert!((&c0.values - c0.values.transpose()).amax() <= 1e-10);
        let c = sample_cov(&frame, lag).unwrap();
        prop_assert_eq!(c.values.nrows(), 3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn conditioning_never_inflates_spread(model in arb_model(6), noise in 1e-3..0.05f64, data in prop::collection::vec(-0.05..0.05f64, 60)) {
        let n = model.n_buses;
        let space = eigenspace(&model, None).unwrap();
        let alpha = ambient_alpha(&model, &space, 0.05).unwrap();
        let times: Vec<f64> = (0..20).map(|k| k as f64 / 15.0).collect();
        let cov = CovarianceModel::new(&model, &space, &alpha, None).unwrap();
        let query = SelectionSet::new(vec![ChannelSpec::speed(n - 1)], times.clone()).unwrap();
        let prior_std: Vec<f64> = {
            let block = cov.assemble(&query, &query, Filtering::None).unwrap();
            (0..query.len()).map(|k| block.values[(k, k)].sqrt()).collect()
        };
        let mut previous: Option<DVector<f64>> = None;
        // adding meters one at a time can only narrow the posterior
        for m in 1..n - 1 {
            let chans = (0..m).map(|b| ChannelSpec::new(b, Quantity::Speed, noise)).collect();
            let measured = SelectionSet::new(chans, times.clone()).unwrap();
            let problem = InferenceProblem {
                data: DVector::from_fn(measured.len(), |i, _| data[i % data.len()]),
                measured,
                query: query.clone(),
                prior: Prior::Grid { cov: CovarianceModel::new(&model, &space, &alpha, None).unwrap(), filtering: Filtering::None },
                solver: Solver::Dense,
            };
            let post = posterior(&problem).unwrap();
            for (k, s) in post.std.iter().enumerate() {
                prop_assert!(*s >= 0.0);
                prop_assert!(*s <= prior_std[k] + 1e-8);
                if let Some(p) = &previous {
                    prop_assert!(*s <= p[k] + 1e-8);
                }
            }
            previous = Some(post.std.clone());
        }
    }

    #[test]
    fn solvers_agree(model in arb_model(6), noise in 1e-3..0.05f64, data in prop::collection::vec(-0.05..0.05f64, 40)) {
        let n = model.n_buses;
        let space = eigenspace(&model, None).unwrap();
        let alpha = ambient_alpha(&model, &space, 0.05).unwrap();
        let times: Vec<f64> = (0..15).map(|k| k as f64 / 15.0).collect();
        let chans: Vec<ChannelSpec> = (0..n - 1).map(|b| ChannelSpec::new(b, Quantity::Speed, noise)).collect();
        let measured = SelectionSet::new(chans, times.clone()).unwrap();
        let query = SelectionSet::new(vec![ChannelSpec::speed(n - 1)], times).unwrap();
        let run = |solver| {
            posterior(&InferenceProblem {
                data: DVector::from_fn(measured.len(), |i, _| data[i % data.len()]),
                measured: measured.clone(),
                query: query.clone(),
                prior: Prior::Grid { cov: CovarianceModel::new(&model, &space, &alpha, None).unwrap(), filtering: Filtering::None },
                solver,
            })
            .unwrap()
        };
        let (a, b) = (run(Solver::Auto), run(Solver::Dense));
        let scale = b.std.amax().max(1e-12);
        prop_assert!((&a.mean - &b.mean).amax() <= 1e-6 * scale.max(b.mean.amax()));
        prop_assert!((&a.std - &b.std).amax() <= 1e-6 * scale);
        prop_assert!((a.loglik - b.loglik).abs() <= 1e-6 * b.loglik.abs().max(1.0));
    }
}
