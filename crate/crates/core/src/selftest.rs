//! Fast invariant checks behind `unilab selftest`.

use serde::Serialize;

use crate::ensembles::EnsembleTag;
use crate::experiments::{default_class_report, sample_ensemble, EnsembleSpec, LambdaSource};
use crate::linalg::norm;
use crate::regularization::{check_nonexpansive, Regularizer};
use crate::rng::Seed;
use crate::transforms::{adjoint_mismatch, dct, fwht, idct};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfCheck {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> SelfCheck {
    SelfCheck {
        name: name.into(),
        value,
        threshold,
        pass: value <= threshold,
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1e-300)
}

/// Runs every check; a failing computation is reported as a failed check.
pub fn run_selftest() -> Vec<SelfCheck> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<SelfCheck>| match r {
        Ok(c) => out.push(c),
        Err(e) => out.push(SelfCheck {
            name: format!("{name}: {e}"),
            value: f64::NAN,
            threshold: f64::NAN,
            pass: false,
        }),
    };
    let v: Vec<f64> = (0..256).map(|i| ((i * 37 % 101) as f64 - 50.0) / 17.0).collect();
    push("fwht_involution", (|| {
        let w = fwht(&fwht(&v)?)?;
        Ok(at_most("fwht_involution", rel_err(&w, &v), 1e-12))
    })());
    push("dct_round_trip", Ok(at_most("dct_round_trip", rel_err(&idct(&dct(&v)), &v), 1e-12)));
    push("dct_isometry", Ok(at_most(
        "dct_isometry",
        (norm(&dct(&v)) - norm(&v)).abs() / norm(&v),
        1e-12,
    )));

    let n = 256;
    let specs = [
        EnsembleSpec::new(EnsembleTag::SpikeSine),
        EnsembleSpec::new(EnsembleTag::SpikeHwt),
        EnsembleSpec::new(EnsembleTag::Mask),
        EnsembleSpec::new(EnsembleTag::RandDct).with_lambda(LambdaSource::SpikeSine),
        EnsembleSpec::new(EnsembleTag::Haar).with_lambda(LambdaSource::Mask),
        EnsembleSpec::new(EnsembleTag::PartialHadamard),
        EnsembleSpec::new(EnsembleTag::Tiid),
    ];
    for spec in &specs {
        let name = format!("adjoint[{}]", spec.name());
        push(&name.clone(), (|| {
            let x = sample_ensemble(spec, n, Seed(11))?;
            Ok(at_most(name.clone(), adjoint_mismatch(x.op.as_ref(), 8, Seed(12)), 1e-12))
        })());
    }
    // XXᵀ = I for the spike frame
    push("spike_sine_tight_frame", (|| {
        let x = sample_ensemble(&EnsembleSpec::new(EnsembleTag::SpikeSine), n, Seed(13))?;
        let u: Vec<f64> = (0..n / 2).map(|i| (i as f64 * 0.3).sin()).collect();
        let back = x.op.forward(&x.op.adjoint(&u));
        Ok(at_most("spike_sine_tight_frame", rel_err(&back, &u), 1e-12))
    })());
    // sequential Haar: XXᵀ = Λ
    push("haar_sequential_frame", (|| {
        let spec = EnsembleSpec::new(EnsembleTag::Haar).with_lambda(LambdaSource::Mask);
        let x = sample_ensemble(&spec, n, Seed(14))?;
        let lambda = x.lambda.clone().unwrap_or_default();
        let u: Vec<f64> = (0..x.op.rows()).map(|i| (i as f64 * 0.7).cos()).collect();
        let back = x.op.forward(&x.op.adjoint(&u));
        let want: Vec<f64> = u.iter().zip(&lambda).map(|(a, l)| a * l).collect();
        Ok(at_most("haar_sequential_frame", rel_err(&back, &want), 1e-10))
    })());
    push("elastic_net_nonexpansive", (|| {
        let r = check_nonexpansive(&Regularizer::elastic_net(1.0, 1e-3), 0.9, 10_000, Seed(15))?;
        Ok(at_most("elastic_net_nonexpansive", r, 1.0 + 1e-9))
    })());
    push("class_report[spike_sine]", (|| {
        let rep = default_class_report(EnsembleTag::SpikeSine, 1024, 16)?;
        let worst = rep.moments.iter().map(|m| m.deviation).fold(0.0, f64::max);
        Ok(SelfCheck {
            name: "class_report[spike_sine]".into(),
            value: worst,
            threshold: f64::NAN,
            pass: rep.pass,
        })
    })());
    out
}
