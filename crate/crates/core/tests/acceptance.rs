//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL` line
//! before asserting.

use std::io::Write;
use std::sync::{Arc, OnceLock};

use unilab_core::dynamics::{coupled_noise, implement_prox_gfom};
use unilab_core::ensembles::{
    sample_spike_ortho, unsigned_variant, EnsembleTag, SpectralMeasure, SpikeKind,
};
use unilab_core::experiments::{
    run_experiment, sample_ensemble, EnsembleSpec, ExperimentConfig, ExperimentKind, ExperimentOutput, LambdaSource,
};
use unilab_core::linalg::{max_abs_diff, mean, median, variance};
use unilab_core::regularization::{check_nonexpansive, Regularizer};
use unilab_core::solver::{
    gap_bound_slack, prox_grad, sample_prior, solve_rls_accelerated, AcceleratedOptions, LinearModelInstance, Prior,
    ProxGradOptions,
};
use unilab_core::transforms::{to_dense, Dense, Op, SignDiagonal};
use unilab_core::universality::{class_report, SweepOptions, TolProfile};
use unilab_core::Seed;

const N: usize = 1 << 14;

/// Written straight to stdout so the line survives the harness's output capture.
fn report(id: usize, name: &str, pass: bool, detail: String) {
    let line = format!("criterion {id}: {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn spike_family() -> Vec<EnsembleSpec> {
    vec![
        EnsembleSpec::new(EnsembleTag::SpikeSine),
        EnsembleSpec::new(EnsembleTag::RandDct).with_lambda(LambdaSource::SpikeSine),
        EnsembleSpec::new(EnsembleTag::Haar).with_lambda(LambdaSource::SpikeSine),
    ]
}

fn mask_family() -> Vec<EnsembleSpec> {
    vec![
        EnsembleSpec::new(EnsembleTag::Mask),
        EnsembleSpec::new(EnsembleTag::RandDct).with_lambda(LambdaSource::Mask),
        EnsembleSpec::new(EnsembleTag::Haar).with_lambda(LambdaSource::Mask),
    ]
}

fn sweep_summary(id: usize, name: &str, ensembles: Vec<EnsembleSpec>) -> bool {
    let cfg = ExperimentConfig::new(ExperimentKind::Fig1LambdaSweep, N, ensembles);
    let out = run_experiment(&cfg).unwrap();
    let rel = out.summary.check("max_pairwise_rel_mse").unwrap();
    let unconverged = out.summary.check("unconverged_solves").unwrap();
    let worst = out
        .summary
        .discrepancies
        .iter()
        .max_by(|a, b| a.max_pairwise_rel.total_cmp(&b.max_pairwise_rel))
        .unwrap();
    let pass = rel.pass && unconverged.pass;
    report(
        id,
        name,
        pass,
        format!(
            "max pairwise rel MSE gap {:.4} at lambda1={:.4} ({} vs {}), unconverged solves {}",
            rel.value, worst.x, worst.pair[0], worst.pair[1], unconverged.value
        ),
    );
    pass
}

#[test]
fn rls_universality_spike_spectrum() {
    assert!(sweep_summary(1, "RLS universality over the lambda1 grid", spike_family()));
}

fn iteration_runs() -> &'static [ExperimentOutput; 2] {
    static RUNS: OnceLock<[ExperimentOutput; 2]> = OnceLock::new();
    RUNS.get_or_init(|| {
        let run = |e| run_experiment(&ExperimentConfig::new(ExperimentKind::Fig1Iterations, N, e)).unwrap();
        [run(spike_family()), run(mask_family())]
    })
}

#[test]
fn proximal_dynamics_universality() {
    let out = &iteration_runs()[0];
    let c = out.summary.check("max_pairwise_rel_mse").unwrap();
    report(
        2,
        "per-iteration MSE universality",
        c.pass,
        format!("max pairwise rel MSE gap {:.4} over 200 iterations", c.value),
    );
    assert!(c.pass);
}

#[test]
fn rls_universality_mask_spectrum() {
    assert!(sweep_summary(3, "mask-family RLS agreement", mask_family()));
}

#[test]
fn deterministic_gram_identities() {
    let m = 16;
    let signed = sample_spike_ortho(m, SpikeKind::Hadamard, Seed(1)).unwrap();
    let j = unsigned_variant(&signed).unwrap();
    let ones = vec![1.0; 2 * m];
    let g = j.op.adjoint(&j.op.forward(&ones));
    let mut want = vec![0.5; 2 * m];
    want[0] += (m as f64).sqrt() / 2.0;
    want[m] += (m as f64).sqrt() / 2.0;
    let hwt_gap = max_abs_diff(&g, &want);

    let spec = EnsembleSpec::new(EnsembleTag::UnsignedRandDct).with_lambda(LambdaSource::SpikeSine);
    let j = sample_ensemble(&spec, 2 * m, Seed(2)).unwrap();
    let g = j.op.adjoint(&j.op.forward(&ones));
    let dct_gap = g.iter().map(|v| (v - 1.0).abs().min(v.abs())).fold(0.0, f64::max);

    let x = sample_ensemble(&EnsembleSpec::new(EnsembleTag::SpikeHwt), N, Seed(3)).unwrap();
    let g = x.op.adjoint(&x.op.forward(&vec![1.0; N]));
    let (mu, var) = (mean(&g), variance(&g));

    let pass = hwt_gap <= 1e-10 && dct_gap <= 1e-10 && (mu - 0.5).abs() <= 0.02 && (var - 0.25).abs() <= 0.03;
    report(
        4,
        "Gram identities on the all-ones vector",
        pass,
        format!(
            "unsigned hwt gap {hwt_gap:.2e}, unsigned dct gap {dct_gap:.2e}, signed hwt mean {mu:.4} var {var:.4}"
        ),
    );
    assert!(pass);
}

#[test]
fn class_reports_and_finite_n_trend() {
    let cases: [(EnsembleTag, SpectralMeasure); 3] = [
        (EnsembleTag::SpikeSine, SpectralMeasure::bernoulli(0.5)),
        (EnsembleTag::PartialHadamard, SpectralMeasure::bernoulli(0.5)),
        (
            EnsembleTag::Mask,
            SpectralMeasure::Mask {
                l: 2,
                dist: "uniform".parse().unwrap(),
            },
        ),
    ];
    let ks = [1, 2, 3, 4];
    let mut pass = true;
    let mut details = Vec::new();
    for (tag, mu) in &cases {
        let mut medians = Vec::new();
        let mut all_pass = true;
        for n in [1 << 10, 1 << 12] {
            let devs: Vec<f64> = (0..8u64)
                .map(|s| {
                    let seed = Seed(500).index(s);
                    let x = sample_ensemble(&EnsembleSpec::new(*tag), n, seed).unwrap();
                    let r = class_report(&x, mu, &ks, &TolProfile::default(), &SweepOptions::default(), seed.derive("r"))
                        .unwrap();
                    if n == 1 << 12 {
                        all_pass &= r.pass;
                    }
                    r.moments.iter().map(|m| m.deviation).fold(0.0, f64::max)
                })
                .collect();
            medians.push(median(&devs));
        }
        let shrinks = medians[1] < medians[0];
        pass &= all_pass && shrinks;
        details.push(format!(
            "{tag}: reports pass {all_pass}, median deviation {:.4} -> {:.4}",
            medians[0], medians[1]
        ));
    }
    report(5, "class reports at N=4096", pass, details.join("; "));
    assert!(pass);
}

#[test]
fn prox_and_solver_properties() {
    let ratio = check_nonexpansive(&Regularizer::elastic_net(1.0, 1e-3), 0.95, 10_000, Seed(7)).unwrap();
    let runs = iteration_runs();
    let increase = runs
        .iter()
        .map(|o| o.summary.check("max_relative_objective_increase").unwrap().value)
        .fold(f64::NEG_INFINITY, f64::max);

    let rho = Regularizer::elastic_net(1.0, 1e-3);
    let mut worst_slack = f64::INFINITY;
    for spec in spike_family().into_iter().chain(mask_family()) {
        let n = 1 << 12;
        let ts = Seed(900);
        let x = sample_ensemble(&spec, n, ts).unwrap();
        let beta = sample_prior(&Prior::FivePoint, n, ts.derive("beta")).unwrap();
        let inst = LinearModelInstance::new(x, beta, 1.0, ts.derive("noise")).unwrap();
        let traj = prox_grad(&inst.fork(), &rho, &ProxGradOptions::fixed(200)).unwrap();
        let opts = AcceleratedOptions {
            gamma: Some(traj.gamma),
            max_iter: 50_000,
            tol: 1e-12,
        };
        let reference = solve_rls_accelerated(&inst.fork(), &rho, &opts, None).unwrap();
        worst_slack = worst_slack.min(gap_bound_slack(&traj, &reference.beta, reference.objective));
    }
    let pass = ratio <= 1.0 + 1e-9 && increase <= 1e-12 && worst_slack >= -1e-10;
    report(
        6,
        "prox and solver properties",
        pass,
        format!(
            "nonexpansive ratio {ratio:.6}, worst relative objective increase {increase:.3e}, worst gap-bound slack {worst_slack:.3e}"
        ),
    );
    assert!(pass);
}

#[test]
fn gfom_realization_of_prox() {
    let n = 256;
    let rho = Regularizer::elastic_net(1.0, 1e-3);
    let degrees = [5, 10, 20, 40];
    let mut gaps = vec![Vec::new(); degrees.len()];
    let mut bound_ratio = 0.0f64;
    for s in 0..4u64 {
        let ts = Seed(70).index(s);
        let x = sample_spike_ortho(n / 2, SpikeKind::Dct, ts).unwrap();
        let beta = sample_prior(&Prior::FivePoint, n, ts.derive("beta")).unwrap();
        let inst = LinearModelInstance::new(x, beta, 1.0, ts.derive("noise")).unwrap();
        let w = coupled_noise(&inst, ts.derive("w")).unwrap();
        let direct = prox_grad(
            &inst,
            &rho,
            &ProxGradOptions {
                keep_iterates: true,
                ..ProxGradOptions::fixed(20)
            },
        )
        .unwrap();
        for (i, &k) in degrees.iter().enumerate() {
            let r = implement_prox_gfom(&inst, &rho, None, k, 20, &w).unwrap();
            let gap = r
                .beta
                .iter()
                .zip(&direct.iterates)
                .map(|(a, b)| max_abs_diff(a, b))
                .fold(0.0, f64::max);
            if k == 40 {
                bound_ratio = bound_ratio.max(gap / r.error_bound.last().unwrap());
            }
            gaps[i].push(gap);
        }
    }
    let med: Vec<f64> = gaps.iter().map(|g| median(g)).collect();
    let monotone = med.windows(2).all(|p| p[1] < p[0]);
    let pass = bound_ratio <= 10.0 && monotone;
    report(
        7,
        "polynomial GFOM realization of prox",
        pass,
        format!(
            "median max gaps over k=5,10,20,40: [{}]; worst gap/bound at k=40 {bound_ratio:.3e}",
            med.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn vamp_state_evolution() {
    let mut cfg = ExperimentConfig::new(
        ExperimentKind::VampSe,
        N,
        vec![
            EnsembleSpec::new(EnsembleTag::Haar).with_lambda(LambdaSource::SpikeSine),
            EnsembleSpec::new(EnsembleTag::RandDct).with_lambda(LambdaSource::SpikeSine),
        ],
    );
    cfg.trials = 4;
    let out = run_experiment(&cfg).unwrap();
    let c = out.summary.check("gram_vs_sigma_worst_ratio").unwrap();
    let per: Vec<String> = out
        .table
        .rows
        .iter()
        .filter(|r| r.metric == "worst_ratio")
        .map(|r| format!("{}#{}={:.3}", r.ensemble, r.seed, r.value))
        .collect();
    report(
        8,
        "VAMP Gram vs state evolution",
        c.pass,
        format!("worst |emp - Sigma| / tol {:.3} ({})", c.value, per.join(", ")),
    );
    assert!(c.pass);
}

#[test]
fn sign_symmetry_identity() {
    let n = 64;
    let base = sample_spike_ortho(n / 2, SpikeKind::Hadamard, Seed(31)).unwrap();
    let j = unsigned_variant(&base).unwrap();
    let jd = to_dense(j.op.as_ref());
    let beta = sample_prior(&Prior::FivePoint, n, Seed(32)).unwrap();
    let rho = Regularizer::elastic_net(0.3, 1e-3);
    let opts = AcceleratedOptions {
        gamma: None,
        max_iter: 200_000,
        tol: 1e-14,
    };
    let inst = LinearModelInstance::new(j.clone(), beta.clone(), 1.0, Seed(33)).unwrap();
    let plain = solve_rls_accelerated(&inst, &rho, &opts, None).unwrap();
    let mut worst = 0.0f64;
    for s in 0..4u64 {
        let signs = SignDiagonal::sample(n, Seed(34).index(s));
        let sv = signs.signs().to_vec();
        let mut js = j.clone();
        let mut m = jd.clone();
        for (c, sgn) in sv.iter().enumerate() {
            m.column_mut(c).scale_mut(*sgn);
        }
        js.op = Arc::new(Dense::new(m)) as Op;
        let sb: Vec<f64> = beta.iter().zip(&sv).map(|(b, s)| b * s).collect();
        let inst_s = LinearModelInstance::with_noise(js, sb, 1.0, inst.epsilon.clone()).unwrap();
        let flipped = solve_rls_accelerated(&inst_s, &rho, &opts, None).unwrap();
        let back: Vec<f64> = flipped.beta.iter().zip(&sv).map(|(b, s)| b * s).collect();
        worst = worst.max(max_abs_diff(&plain.beta, &back));
    }
    let pass = worst <= 1e-6;
    report(9, "sign-symmetry identity", pass, format!("max coordinate gap {worst:.3e} over 4 sign draws"));
    assert!(pass);
}

#[test]
fn unsigned_breakdown_study() {
    let mut cfg = ExperimentConfig::new(
        ExperimentKind::Fig2SparsitySweep,
        N,
        vec![
            EnsembleSpec::new(EnsembleTag::SpikeHwt),
            EnsembleSpec::new(EnsembleTag::UnsignedSpikeHwt),
            EnsembleSpec::new(EnsembleTag::RandDct).with_lambda(LambdaSource::SpikeSine),
        ],
    );
    cfg.trials = 8;
    let out = run_experiment(&cfg).unwrap();
    let get = |name: &str| out.summary.check(name).unwrap().value;
    let breaks = get("breakdown_points[sparse_positive]");
    let pos = get("median_unsigned_deviation_rel[sparse_positive]");
    let cen = get("median_unsigned_deviation_rel[sparse_centered]");
    let pass = breaks >= 1.0 && cen < pos;
    report(
        10,
        "unsigned breakdown study",
        pass,
        format!(
            "positive prior: {breaks} chi points beyond 3x signed gap, max unsigned rel dev {:.3}; median unsigned rel dev positive {pos:.3} vs centered {cen:.3}",
            get("max_unsigned_deviation_rel[sparse_positive]")
        ),
    );
    assert!(pass);
}
