//! Property tests for the structural invariants of each module.

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

use unilab_core::dynamics::{state_evolution, AuxLaw, Nonlinearity, ScalarLaw};
use unilab_core::ensembles::{sample_haar, sample_rand_dct, EnsembleTag, HaarMode, MaskDistribution, SpectralMeasure};
use unilab_core::experiments::{
    histogram, omega_from_lambda, relative_gap, run_experiment, sample_ensemble, EnsembleSpec, ExperimentConfig,
    ExperimentKind, LambdaSource, OrdF64,
};
use unilab_core::linalg::{gaussian_vec, norm};
use unilab_core::regularization::Regularizer;
use unilab_core::solver::{prox_grad, sample_prior, LinearModelInstance, Prior, ProxGradOptions};
use unilab_core::transforms::{adjoint_mismatch, dct, fwht, idct, to_dense, Permutation, SignDiagonal};
use unilab_core::universality::target_moment;
use unilab_core::Seed;

fn all_specs() -> Vec<EnsembleSpec> {
    vec![
        EnsembleSpec::new(EnsembleTag::SpikeSine),
        EnsembleSpec::new(EnsembleTag::SpikeHwt),
        EnsembleSpec::new(EnsembleTag::UnsignedSpikeSine),
        EnsembleSpec::new(EnsembleTag::UnsignedSpikeHwt),
        EnsembleSpec::new(EnsembleTag::Mask),
        EnsembleSpec::new(EnsembleTag::RandDct).with_lambda(LambdaSource::SpikeSine),
        EnsembleSpec::new(EnsembleTag::RandDct).with_lambda(LambdaSource::Mask),
        EnsembleSpec::new(EnsembleTag::UnsignedRandDct).with_lambda(LambdaSource::SpikeSine),
        EnsembleSpec::new(EnsembleTag::Haar).with_lambda(LambdaSource::SpikeSine),
        EnsembleSpec::new(EnsembleTag::Haar).with_lambda(LambdaSource::Mask),
        EnsembleSpec::new(EnsembleTag::PartialHadamard),
        EnsembleSpec::new(EnsembleTag::Tiid),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ensembles_pass_adjoint_test(seed in any::<u64>(), log_n in 3u32..9) {
        let n = 1usize << log_n;
        for spec in all_specs() {
            let x = sample_ensemble(&spec, n, Seed(seed)).unwrap();
            prop_assert!(adjoint_mismatch(x.op.as_ref(), 3, Seed(seed ^ 1)) <= 1e-10, "{}", spec.name());
        }
    }

    #[test]
    fn operators_are_deterministic(seed in any::<u64>()) {
        let v = gaussian_vec(64, 1.0, &mut Seed(seed).rng());
        for spec in all_specs() {
            let a = sample_ensemble(&spec, 64, Seed(seed)).unwrap();
            let b = sample_ensemble(&spec, 64, Seed(seed)).unwrap();
            prop_assert_eq!(a.op.forward(&v), b.op.forward(&v));
        }
    }

    #[test]
    fn tight_frames_have_orthonormal_rows(seed in any::<u64>(), log_n in 2u32..9) {
        let n = 1usize << log_n;
        for tag in [EnsembleTag::SpikeSine, EnsembleTag::SpikeHwt, EnsembleTag::PartialHadamard] {
            let x = sample_ensemble(&EnsembleSpec::new(tag), n, Seed(seed)).unwrap();
            let u = gaussian_vec(x.rows(), 1.0, &mut Seed(seed ^ 7).rng());
            let back = x.op.forward(&x.op.adjoint(&u));
            let err = back.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err <= 1e-10 * (1.0 + norm(&u)), "{tag}: {err}");
        }
    }

    #[test]
    fn orthogonal_spectra_match_lambda(seed in any::<u64>(), lambda in proptest::collection::vec(0.0f64..4.0, 16)) {
        let mut want: Vec<f64> = lambda.iter().map(|l| l.sqrt()).collect();
        want.sort_by(f64::total_cmp);
        for x in [
            sample_rand_dct(&lambda, Seed(seed)).unwrap(),
            sample_haar(&lambda, Seed(seed), HaarMode::Explicit).unwrap(),
            sample_haar(&lambda, Seed(seed), HaarMode::Sequential).unwrap(),
        ] {
            let mut sv: Vec<f64> = to_dense(x.op.as_ref()).singular_values().iter().copied().collect();
            sv.sort_by(f64::total_cmp);
            for (a, b) in sv.iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-9, "{:?}: {a} vs {b}", x.ensemble);
            }
        }
    }

    #[test]
    fn sign_diagonals_and_permutations(seed in any::<u64>(), n in 1usize..300) {
        let s = SignDiagonal::sample(n, Seed(seed));
        prop_assert!(s.signs().iter().all(|v| *v == 1.0 || *v == -1.0));
        let again = SignDiagonal::sample(n, Seed(seed));
        prop_assert_eq!(s.signs(), again.signs());
        let p = Permutation::sample(n, Seed(seed));
        let mut idx = p.indices().to_vec();
        idx.sort_unstable();
        prop_assert_eq!(idx, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn fast_transforms_are_isometries(v in proptest::collection::vec(-10.0f64..10.0, 64)) {
        let n = norm(&v);
        let h = fwht(&v).unwrap();
        prop_assert!((norm(&h) - n).abs() <= 1e-10 * (1.0 + n));
        let c = dct(&v);
        prop_assert!((norm(&c) - n).abs() <= 1e-10 * (1.0 + n));
        let back = idct(&c);
        prop_assert!(back.iter().zip(&v).all(|(a, b)| (a - b).abs() <= 1e-10 * (1.0 + n)));
    }

    #[test]
    fn mask_laws_are_symmetric_and_bounded(seed in any::<u64>(), bound in 0.1f64..5.0) {
        let custom = MaskDistribution::custom(|r| rand::Rng::gen::<f64>(r) * 10.0, bound);
        for (d, k) in [(MaskDistribution::Uniform, 1.0), (MaskDistribution::Rademacher, 1.0), (custom, bound)] {
            let mut rng = Seed(seed).rng();
            let draws: Vec<f64> = (0..4000).map(|_| d.sample(&mut rng)).collect();
            prop_assert!(draws.iter().all(|v| v.abs() <= k));
            let pos = draws.iter().filter(|v| **v > 0.0).count() as f64 / draws.len() as f64;
            prop_assert!((pos - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn measures_have_finite_nonnegative_moments(alpha in 0.0f64..1.0, l in 1usize..6, seed in any::<u64>()) {
        let atoms: Vec<f64> = (0..5).map(|i| i as f64 * alpha).collect();
        let measures = [
            SpectralMeasure::bernoulli(alpha),
            SpectralMeasure::Mask { l, dist: MaskDistribution::Uniform },
            SpectralMeasure::empirical(atoms),
        ];
        for mu in &measures {
            prop_assert!((target_moment(mu, 0, 1000, Seed(seed)).unwrap() - 1.0).abs() < 1e-12);
            for k in 1..=20 {
                let m = target_moment(mu, k, 1000, Seed(seed)).unwrap();
                prop_assert!(m.is_finite() && m >= 0.0, "{mu:?} k={k}: {m}");
            }
        }
    }

    #[test]
    fn elastic_net_is_midpoint_convex(l1 in 0.0f64..5.0, l2 in 0.0f64..5.0, a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let r = Regularizer::elastic_net(l1, l2);
        prop_assert!(r.validate().is_ok());
        let m = r.value(0.5 * (a + b));
        prop_assert!(m <= 0.5 * (r.value(a) + r.value(b)) + 1e-9 * (1.0 + m.abs()));
    }

    #[test]
    fn instance_response_is_recomputable(seed in any::<u64>(), sigma in 0.0f64..3.0) {
        let x = sample_ensemble(&EnsembleSpec::new(EnsembleTag::SpikeSine), 64, Seed(seed)).unwrap();
        let beta = sample_prior(&Prior::FivePoint, 64, Seed(seed ^ 3)).unwrap();
        let inst = LinearModelInstance::new(x, beta, sigma, Seed(seed ^ 5)).unwrap();
        let y: Vec<f64> = inst.x.op.forward(&inst.beta_star).iter().zip(&inst.epsilon).map(|(a, e)| a + e).collect();
        prop_assert!(y.iter().zip(&inst.y).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs())));
    }

    #[test]
    fn prox_grad_objective_is_nonincreasing(seed in any::<u64>(), l1 in 0.01f64..3.0, spec_idx in 0usize..12) {
        let spec = &all_specs()[spec_idx];
        let x = sample_ensemble(spec, 64, Seed(seed)).unwrap();
        let beta = sample_prior(&Prior::FivePoint, 64, Seed(seed ^ 3)).unwrap();
        let inst = LinearModelInstance::new(x, beta, 1.0, Seed(seed ^ 5)).unwrap();
        let traj = prox_grad(&inst, &Regularizer::elastic_net(l1, 1e-3 * l1), &ProxGradOptions::fixed(30)).unwrap();
        prop_assert_eq!(traj.points.last().unwrap().t, 30);
        let scale = traj.points.iter().map(|p| p.objective.abs()).fold(1.0, f64::max);
        prop_assert!(traj.max_objective_increase() <= 1e-10 * scale);
    }

    #[test]
    fn omega_hat_is_symmetric_psd(lambda in proptest::collection::vec(0.0f64..3.0, 2..200), p in 1usize..4) {
        let powers: Vec<usize> = (1..=p + 1).collect();
        let o = omega_from_lambda(&lambda, &powers);
        prop_assert!((&o - o.transpose()).abs().max() <= 1e-12);
        let min = SymmetricEigen::new(o.clone()).eigenvalues.min();
        prop_assert!(min >= -1e-8 * (1.0 + o.abs().max()));
    }

    #[test]
    fn histogram_counts_everything(v in proptest::collection::vec(-100.0f64..100.0, 0..300), bins in 1usize..50) {
        let h = histogram(&v, bins, (-25.0, 25.0)).unwrap();
        prop_assert_eq!(h.total() as usize, v.len());
        prop_assert_eq!(h.edges.len(), bins + 1);
    }

    #[test]
    fn relative_gap_is_symmetric(a in 0.01f64..100.0, b in 0.01f64..100.0) {
        prop_assert_eq!(relative_gap(a, b), relative_gap(b, a));
        prop_assert!(relative_gap(a, b) >= 0.0);
        prop_assert_eq!(relative_gap(a, a), 0.0);
    }

    #[test]
    fn config_round_trips(n_log in 3u32..12, trials in 1usize..20, seed in 0..=i64::MAX as u64, l1 in 0.01f64..10.0) {
        let mut cfg = ExperimentConfig::new(
            ExperimentKind::Fig1LambdaSweep,
            1 << n_log,
            vec![EnsembleSpec::new(EnsembleTag::SpikeHwt), EnsembleSpec::new(EnsembleTag::Haar).with_lambda(LambdaSource::Mask)],
        );
        cfg.trials = trials;
        cfg.master_seed = seed;
        cfg.lambda1_grid = Some(vec![l1, 2.0 * l1]);
        prop_assert!(cfg.validate().is_ok());
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn state_evolution_is_symmetric_with_psd_phi() {
    let omega = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 0.8, 0.2, 0.1, 0.2, 0.6]);
    let law = AuxLaw::new(vec![ScalarLaw::Gaussian { sigma: 1.0 }]);
    let fs = vec![
        Nonlinearity::aux_column(0, 0),
        Nonlinearity::new("cos", 1, 1.0, |h, _| h[0].cos()).assume_divergence_free(),
        Nonlinearity::new("cos·a", 2, 1.0, |h, a| (h[1]).cos() * a[0]).assume_divergence_free(),
    ];
    let se = state_evolution(&omega, &fs, &law, 50_000, Seed(1)).unwrap();
    assert!((&se.sigma - se.sigma.transpose()).abs().max() <= 1e-12);
    assert!((&se.phi - se.phi.transpose()).abs().max() <= 1e-12);
    let min = SymmetricEigen::new(se.phi.clone()).eigenvalues.min();
    assert!(min >= -3.0 * se.phi_se.max(), "{min}");
}

#[test]
fn result_tables_are_sorted() {
    let mut cfg = ExperimentConfig::new(
        ExperimentKind::Fig1Iterations,
        64,
        vec![
            EnsembleSpec::new(EnsembleTag::SpikeSine),
            EnsembleSpec::new(EnsembleTag::Mask),
            EnsembleSpec::new(EnsembleTag::Haar).with_lambda(LambdaSource::Mask),
        ],
    );
    cfg.trials = 3;
    cfg.iterations = 12;
    let out = run_experiment(&cfg).unwrap();
    let keys: Vec<_> = out
        .table
        .rows
        .iter()
        .map(|r| (r.ensemble.clone(), r.seed, OrdF64(r.x), r.metric.clone()))
        .collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn haar_draws_with_one_spectrum_agree_in_distribution() {
    // different Haar draws (fresh eigenvectors) with a common Λ: NMSE medians within 3%
    let n = 1 << 13;
    let lambda = unilab_core::ensembles::spike_lambda(n / 2, n);
    let nmse = |offset: u64| {
        let mut v: Vec<f64> = (0..8u64)
            .map(|s| {
                let ts = Seed(40).index(s);
                let x = sample_haar(&lambda, Seed(offset).index(s), HaarMode::Sequential).unwrap();
                let beta = sample_prior(&Prior::FivePoint, n, ts.derive("beta")).unwrap();
                let inst = LinearModelInstance::new(x, beta, 1.0, ts.derive("noise")).unwrap();
                let traj = prox_grad(&inst, &Regularizer::elastic_net(1.0, 1e-3), &ProxGradOptions::fixed(60)).unwrap();
                traj.final_point().nmse
            })
            .collect();
        v.sort_by(f64::total_cmp);
        0.5 * (v[3] + v[4])
    };
    let (a, b) = (nmse(1), nmse(2));
    assert!(relative_gap(a, b) <= 0.03, "{a} vs {b}");
}
