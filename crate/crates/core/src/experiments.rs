//! Config-driven experiment suites.
//!
//! Every run produces a long-format [`ResultTable`]
//! (`experiment,ensemble,seed,x,metric,value`) plus a JSON [`Summary`]; both
//! carry the config hash, tool version and master seed. Trials draw all their
//! randomness from `master_seed`, so a rerun with the same config is
//! byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{
    build_semirandom, centered_powers, correct_and_evolve, run_vamp, AuxLaw, DynamicsSpec, GramComparison, Nonlinearity,
    ScalarLaw, DEFAULT_MC_SAMPLES,
};
use crate::ensembles::{
    mask_lambda, sample_haar, sample_mask, sample_partial_hadamard, sample_rand_dct, sample_spike_ortho, sample_tiid,
    spike_lambda, unsigned_variant, EnsembleTag, EntryLaw, HaarMode, MaskDistribution, SensingOperator, SpikeKind, TSpec,
    EXPLICIT_HAAR_LIMIT,
};
use crate::error::{Error, Result};
use crate::linalg::{mean, median, variance};
use crate::regularization::{Regularizer, RegularizerSpec};
use crate::rng::Seed;
use crate::solver::{
    prox_grad, sample_prior, solve_rls_accelerated, AcceleratedOptions, LinearModelInstance, Prior, ProxGradOptions,
};
use crate::universality::{class_report, ClassReport, SweepOptions, TolProfile, DEFAULT_KS};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Coordinates with `|β_i|` at or below this are treated as zero in histograms.
pub const NONZERO_THRESHOLD: f64 = 1e-8;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "UNILAB_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Fig1LambdaSweep,
    Fig1Iterations,
    Fig1Histograms,
    Fig2SparsitySweep,
    VampSe,
    ClassReport,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Fig1LambdaSweep => "fig1_lambda_sweep",
            ExperimentKind::Fig1Iterations => "fig1_iterations",
            ExperimentKind::Fig1Histograms => "fig1_histograms",
            ExperimentKind::Fig2SparsitySweep => "fig2_sparsity_sweep",
            ExperimentKind::VampSe => "vamp_se",
            ExperimentKind::ClassReport => "class_report",
        }
    }
}

/// Spectrum handed to `rand_dct` / `haar`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSource {
    /// `[1×N/2, 0×N/2]`
    SpikeSine,
    /// `R` of the mask drawn in the same trial, zero-padded to `N`.
    Mask,
}

impl LambdaSource {
    fn as_str(self) -> &'static str {
        match self {
            LambdaSource::SpikeSine => "spike_sine",
            LambdaSource::Mask => "mask",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub tag: EnsembleTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<LambdaSource>,
    /// Number of masks `L` (mask ensembles and `Λ_Mask`), default 2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_l: Option<usize>,
    /// `uniform` (default) or `rademacher`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_dist: Option<String>,
    /// Defaults to `sequential`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub haar_mode: Option<HaarMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl EnsembleSpec {
    pub fn new(tag: EnsembleTag) -> Self {
        EnsembleSpec {
            tag,
            lambda: None,
            mask_l: None,
            mask_dist: None,
            haar_mode: None,
            label: None,
        }
    }

    pub fn with_lambda(mut self, source: LambdaSource) -> Self {
        self.lambda = Some(source);
        self
    }

    fn takes_lambda(&self) -> bool {
        matches!(self.tag, EnsembleTag::RandDct | EnsembleTag::Haar | EnsembleTag::UnsignedRandDct)
    }

    fn lambda_source(&self) -> LambdaSource {
        self.lambda.unwrap_or(LambdaSource::SpikeSine)
    }

    fn l(&self) -> usize {
        self.mask_l.unwrap_or(2)
    }

    fn dist(&self) -> Result<MaskDistribution> {
        match &self.mask_dist {
            None => Ok(MaskDistribution::Uniform),
            Some(s) => s.parse(),
        }
    }

    /// Name used in the `ensemble` column.
    pub fn name(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let mut s = self.tag.as_str().to_string();
        if self.takes_lambda() {
            write!(s, "[{}]", self.lambda_source().as_str()).expect("string write");
        }
        if self.tag == EnsembleTag::Mask && self.l() != 2 {
            write!(s, "[L={}]", self.l()).expect("string write");
        }
        s
    }
}

/// Sign-corrected draw of one ensemble for one trial.
///
/// All components derive from `trial_seed`; signed and unsigned variants of
/// the same family share every draw except the sign diagonal, and `Λ_Mask`
/// comes from the very mask a `mask` ensemble in the same trial would use.
pub fn sample_ensemble(spec: &EnsembleSpec, n: usize, trial_seed: Seed) -> Result<SensingOperator> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::BadAspect { m: n / 2, n });
    }
    let m = n / 2;
    let lambda = |spec: &EnsembleSpec| -> Result<Vec<f64>> {
        match spec.lambda_source() {
            LambdaSource::SpikeSine => Ok(spike_lambda(m, n)),
            LambdaSource::Mask => {
                let l = spec.l();
                if !n.is_multiple_of(l) {
                    return Err(Error::InvalidL(l));
                }
                let mask = sample_mask(n / l, l, &spec.dist()?, trial_seed.derive("mask"))?;
                Ok(mask_lambda(mask.mask_r().expect("mask records R"), n))
            }
        }
    };
    match spec.tag {
        EnsembleTag::SpikeSine => sample_spike_ortho(m, SpikeKind::Dct, trial_seed.derive("spike_sine")),
        EnsembleTag::SpikeHwt => sample_spike_ortho(m, SpikeKind::Hadamard, trial_seed.derive("spike_hwt")),
        EnsembleTag::UnsignedSpikeSine => {
            unsigned_variant(&sample_spike_ortho(m, SpikeKind::Dct, trial_seed.derive("spike_sine"))?)
        }
        EnsembleTag::UnsignedSpikeHwt => {
            unsigned_variant(&sample_spike_ortho(m, SpikeKind::Hadamard, trial_seed.derive("spike_hwt"))?)
        }
        EnsembleTag::Mask => {
            let l = spec.l();
            if !n.is_multiple_of(l) {
                return Err(Error::InvalidL(l));
            }
            sample_mask(n / l, l, &spec.dist()?, trial_seed.derive("mask"))
        }
        EnsembleTag::RandDct => sample_rand_dct(&lambda(spec)?, trial_seed.derive("rand_dct")),
        EnsembleTag::UnsignedRandDct => unsigned_variant(&sample_rand_dct(&lambda(spec)?, trial_seed.derive("rand_dct"))?),
        EnsembleTag::Haar => sample_haar(
            &lambda(spec)?,
            trial_seed.derive("haar"),
            spec.haar_mode.unwrap_or(HaarMode::Sequential),
        ),
        EnsembleTag::PartialHadamard => sample_partial_hadamard(m, n, trial_seed.derive("partial_hadamard")),
        EnsembleTag::Tiid => sample_tiid(&TSpec::identity(m), m, n, EntryLaw::Gaussian, trial_seed.derive("tiid")),
    }
}

/// Prior families swept over `χ` in the sparsity experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorFamily {
    SparsePositive,
    SparseCentered,
}

impl PriorFamily {
    pub fn at(self, chi: f64) -> Prior {
        match self {
            PriorFamily::SparsePositive => Prior::SparsePositive { chi },
            PriorFamily::SparseCentered => Prior::SparseCentered { chi },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PriorFamily::SparsePositive => "sparse_positive",
            PriorFamily::SparseCentered => "sparse_centered",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Iteration cap for converged RLS solves.
    pub max_iter: usize,
    /// Fixed-point residual tolerance of the accelerated solver.
    pub tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 20_000,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramConfig {
    pub bins: usize,
    pub range: [f64; 2],
    pub threshold: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        HistogramConfig {
            bins: 101,
            range: [-25.0, 25.0],
            threshold: NONZERO_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VampConfig {
    /// `Ψ_t = (XᵀX)^{p_t} − m̂_{p_t} I`; the length is the iteration count `T`.
    pub powers: Vec<usize>,
    pub mc_samples: usize,
    /// Nonlinearity template; only `default` is built in.
    pub template: String,
}

impl Default for VampConfig {
    fn default() -> Self {
        VampConfig {
            powers: vec![1, 2, 3],
            mc_samples: DEFAULT_MC_SAMPLES,
            template: "default".into(),
        }
    }
}

/// Tolerances used by the summary checks (and `run --check`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// Pairwise relative agreement of median curves.
    pub rel_tol: f64,
    /// Histogram total-variation bound.
    pub tv_tol: f64,
    /// Multiple of the signed-vs-signed discrepancy that counts as a breakdown.
    pub breakdown_factor: f64,
    /// VAMP: `max(se_mult·SE, diag_frac·scale)` per Gram entry.
    pub se_mult: f64,
    pub diag_frac: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            rel_tol: 0.05,
            tv_tol: 0.05,
            breakdown_factor: 3.0,
            se_mult: 3.0,
            diag_frac: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(rename = "N")]
    pub n: usize,
    pub ensembles: Vec<EnsembleSpec>,
    #[serde(default = "default_prior")]
    pub prior: Prior,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<Vec<PriorFamily>>,
    /// Noise level; defaults to 1 (0 for the sparsity sweep).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Elastic net by default; sweeps keep `lambda2/lambda1` fixed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularizer: Option<RegularizerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda1_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi_grid: Option<Vec<f64>>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Iteration budget of the per-iteration experiment.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub histogram: HistogramConfig,
    #[serde(default)]
    pub vamp: VampConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks: Option<Vec<usize>>,
    #[serde(default)]
    pub checks: CheckConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_prior() -> Prior {
    Prior::FivePoint
}
fn default_trials() -> usize {
    8
}
fn default_iterations() -> usize {
    200
}
fn default_record_every() -> usize {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

/// 16 log-spaced points in `[0.01, 1]`.
pub fn default_lambda1_grid() -> Vec<f64> {
    (0..16).map(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / 15.0)).collect()
}

/// 12 evenly spaced points in `[0.05, 0.6]`.
pub fn default_chi_grid() -> Vec<f64> {
    (0..12).map(|i| 0.05 + 0.05 * i as f64).collect()
}

fn is_pow2(n: usize) -> bool {
    n > 0 && n.is_power_of_two()
}

impl ExperimentConfig {
    /// Minimal config for `kind` with every optional field at its default.
    pub fn new(kind: ExperimentKind, n: usize, ensembles: Vec<EnsembleSpec>) -> Self {
        ExperimentConfig {
            experiment: kind,
            n,
            ensembles,
            prior: default_prior(),
            priors: None,
            sigma: None,
            regularizer: None,
            lambda1_grid: None,
            chi_grid: None,
            trials: default_trials(),
            iterations: default_iterations(),
            record_every: default_record_every(),
            solver: SolverConfig::default(),
            histogram: HistogramConfig::default(),
            vamp: VampConfig::default(),
            ks: None,
            checks: CheckConfig::default(),
            output_dir: default_output_dir(),
            master_seed: 0,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| {
            let msg = e.message().to_string();
            let path = e
                .span()
                .map(|sp| {
                    let line = s[..sp.start.min(s.len())].lines().count().max(1);
                    format!("line {line}")
                })
                .unwrap_or_else(|| "<root>".into());
            Error::config(path, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml_str(&text)
    }

    /// Panics on configs that fail [`ExperimentConfig::validate`] for
    /// `master_seed`, which TOML cannot represent.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(match self.experiment {
            ExperimentKind::Fig2SparsitySweep => 0.0,
            _ => 1.0,
        })
    }

    pub fn regularizer_spec(&self) -> RegularizerSpec {
        self.regularizer.clone().unwrap_or_else(|| {
            let l1 = match self.experiment {
                ExperimentKind::Fig2SparsitySweep => 0.01,
                _ => 1.0,
            };
            RegularizerSpec {
                kind: "elastic_net".into(),
                lambda1: l1,
                lambda2: 1e-3 * l1,
            }
        })
    }

    pub fn lambda1_grid(&self) -> Vec<f64> {
        self.lambda1_grid.clone().unwrap_or_else(default_lambda1_grid)
    }

    pub fn chi_grid(&self) -> Vec<f64> {
        self.chi_grid.clone().unwrap_or_else(default_chi_grid)
    }

    pub fn priors(&self) -> Vec<PriorFamily> {
        self.priors
            .clone()
            .unwrap_or_else(|| vec![PriorFamily::SparsePositive, PriorFamily::SparseCentered])
    }

    pub fn ks(&self) -> Vec<usize> {
        self.ks.clone().unwrap_or_else(|| DEFAULT_KS.to_vec())
    }

    /// Seed of trial `t`, shared by all ensembles and experiments.
    pub fn trial_seed(&self, t: usize) -> Seed {
        Seed(self.master_seed).derive("trial").index(t as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: String| Err(Error::config(path, msg));
        if self.n < 2 || !self.n.is_multiple_of(2) {
            return bad("N", format!("must be even and ≥ 2, got {}", self.n));
        }
        if self.ensembles.is_empty() {
            return bad("ensembles", "must list at least one ensemble".into());
        }
        if self.master_seed > i64::MAX as u64 {
            // TOML integers are signed 64-bit
            return bad("master_seed", format!("must be at most {}, got {}", i64::MAX, self.master_seed));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, e) in self.ensembles.iter().enumerate() {
            let p = |f: &str| format!("ensembles[{i}].{f}");
            let hadamard = matches!(
                e.tag,
                EnsembleTag::SpikeHwt | EnsembleTag::UnsignedSpikeHwt | EnsembleTag::PartialHadamard
            );
            if hadamard && !is_pow2(self.n) {
                return bad("N", format!("must be a power of two for {}, got {}", e.tag, self.n));
            }
            if e.lambda.is_some() && !e.takes_lambda() {
                return bad(&p("lambda"), format!("{} has a fixed spectrum", e.tag));
            }
            let uses_mask = e.tag == EnsembleTag::Mask || (e.takes_lambda() && e.lambda_source() == LambdaSource::Mask);
            if uses_mask {
                let l = e.l();
                if l == 0 || !self.n.is_multiple_of(l) || !is_pow2(self.n / l) {
                    return bad(&p("mask_l"), format!("N/L must be a power of two (N = {}, L = {l})", self.n));
                }
                if let Err(err) = e.dist() {
                    return bad(&p("mask_dist"), err.to_string());
                }
            } else if e.mask_l.is_some() || e.mask_dist.is_some() {
                return bad(&p("mask_l"), "only meaningful for mask spectra".into());
            }
            if e.haar_mode.is_some() && e.tag != EnsembleTag::Haar {
                return bad(&p("haar_mode"), "only meaningful for haar".into());
            }
            if e.haar_mode == Some(HaarMode::Explicit) && self.n > EXPLICIT_HAAR_LIMIT {
                return bad(
                    &p("haar_mode"),
                    format!("explicit Haar needs N ≤ {EXPLICIT_HAAR_LIMIT}, got {}", self.n),
                );
            }
            if !names.insert(e.name()) {
                return bad(&p("label"), format!("duplicate ensemble name '{}'", e.name()));
            }
        }
        if self.trials < 1 {
            return bad("trials", "must be ≥ 1".into());
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("sigma", format!("must be finite and ≥ 0, got {s}"));
            }
        }
        if let Err(e) = self.regularizer_spec().build() {
            return bad("regularizer", e.to_string());
        }
        if let Err(e) = self.prior.atoms() {
            return bad("prior", e.to_string());
        }
        if let Some(g) = &self.lambda1_grid {
            if g.is_empty() {
                return bad("lambda1_grid", "must be nonempty".into());
            }
            if let Some(v) = g.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return bad("lambda1_grid", format!("entries must be positive, got {v}"));
            }
        }
        if let Some(g) = &self.chi_grid {
            if g.is_empty() {
                return bad("chi_grid", "must be nonempty".into());
            }
            if let Some(v) = g.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return bad("chi_grid", format!("entries must lie in [0, 1], got {v}"));
            }
        }
        if let Some(p) = &self.priors {
            if p.is_empty() {
                return bad("priors", "must be nonempty".into());
            }
        }
        if self.iterations < 1 {
            return bad("iterations", "must be ≥ 1".into());
        }
        if self.record_every < 1 {
            return bad("record_every", "must be ≥ 1".into());
        }
        if self.solver.max_iter < 1 || !(self.solver.tol > 0.0) {
            return bad("solver", "max_iter ≥ 1 and tol > 0 required".into());
        }
        let h = &self.histogram;
        if h.bins < 1 || !(h.range[0] < h.range[1]) || !(h.threshold >= 0.0) {
            return bad("histogram", "bins ≥ 1, range[0] < range[1], threshold ≥ 0 required".into());
        }
        if let Some(ks) = &self.ks {
            if ks.is_empty() || ks.contains(&0) {
                return bad("ks", "must be a nonempty list of powers ≥ 1".into());
            }
        }
        if self.experiment == ExperimentKind::VampSe {
            if self.vamp.powers.is_empty() || self.vamp.powers.contains(&0) {
                return bad("vamp.powers", "must be a nonempty list of powers ≥ 1".into());
            }
            if self.vamp.mc_samples < 10_000 {
                return bad("vamp.mc_samples", "must be ≥ 10000".into());
            }
            if self.vamp.template != "default" {
                return bad("vamp.template", format!("unknown template '{}'", self.vamp.template));
            }
            for (i, e) in self.ensembles.iter().enumerate() {
                if !matches!(e.tag, EnsembleTag::Haar | EnsembleTag::RandDct) {
                    return bad(&format!("ensembles[{i}].tag"), "VAMP runs need haar or rand_dct".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub ensemble: String,
    pub seed: u64,
    pub x: f64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub version: String,
    pub master_seed: u64,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    fn new(cfg: &ExperimentConfig, mut rows: Vec<ResultRow>) -> Self {
        rows.sort_by(|a, b| {
            a.ensemble
                .cmp(&b.ensemble)
                .then(a.seed.cmp(&b.seed))
                .then(a.x.total_cmp(&b.x))
                .then(a.metric.cmp(&b.metric))
        });
        ResultTable {
            experiment: cfg.experiment,
            config_hash: cfg.hash(),
            version: VERSION.to_string(),
            master_seed: cfg.master_seed,
            rows,
        }
    }

    pub fn header_line(&self) -> String {
        format!(
            "# unilab {} config_hash={} master_seed={}",
            self.version, self.config_hash, self.master_seed
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}", self.header_line()).expect("string write");
        writeln!(s, "experiment,ensemble,seed,x,metric,value").expect("string write");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{:?},{},{:?}",
                r.experiment, r.ensemble, r.seed, r.x, r.metric, r.value
            )
            .expect("string write");
        }
        s
    }

    /// Values of `metric` for `ensemble`, keyed by `x` then seed.
    pub fn series(&self, ensemble: &str, metric: &str) -> BTreeMap<OrdF64, Vec<f64>> {
        let mut out: BTreeMap<OrdF64, Vec<f64>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.ensemble == ensemble && r.metric == metric) {
            out.entry(OrdF64(r.x)).or_default().push(r.value);
        }
        out
    }

    pub fn ensembles(&self) -> Vec<String> {
        let mut v: Vec<String> = self.rows.iter().map(|r| r.ensemble.clone()).collect();
        v.dedup();
        v.sort();
        v.dedup();
        v
    }

    /// Per-`x` median over seeds of `metric` for `ensemble`.
    pub fn median_curve(&self, ensemble: &str, metric: &str) -> Vec<(f64, f64)> {
        self.series(ensemble, metric)
            .into_iter()
            .map(|(x, v)| (x.0, median(&v)))
            .collect()
    }
}

/// Total order wrapper for `x` keys.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrdF64(pub f64);

impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curve {
    pub ensemble: String,
    pub metric: String,
    pub x: Vec<f64>,
    pub median: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Discrepancy {
    pub metric: String,
    pub x: f64,
    pub max_pairwise_rel: f64,
    pub pair: [String; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            pass: value >= threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub version: String,
    pub master_seed: u64,
    #[serde(rename = "N")]
    pub n: usize,
    pub trials: usize,
    pub ensembles: Vec<String>,
    pub curves: Vec<Curve>,
    pub discrepancies: Vec<Discrepancy>,
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub class_reports: Vec<ClassReport>,
    pub pass: bool,
}

impl Summary {
    fn new(cfg: &ExperimentConfig, table: &ResultTable) -> Self {
        Summary {
            experiment: cfg.experiment,
            config_hash: table.config_hash.clone(),
            version: table.version.clone(),
            master_seed: cfg.master_seed,
            n: cfg.n,
            trials: cfg.trials,
            ensembles: cfg.ensembles.iter().map(|e| e.name()).collect(),
            curves: Vec::new(),
            discrepancies: Vec::new(),
            checks: Vec::new(),
            class_reports: Vec::new(),
            pass: true,
        }
    }

    fn finish(mut self) -> Self {
        self.pass = self.checks.iter().all(|c| c.pass);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub table: ResultTable,
    pub summary: Summary,
    /// Auxiliary files (name, contents): trajectories, Gram exports.
    pub files: Vec<(String, String)>,
}

impl ExperimentOutput {
    /// Writes `<experiment>.csv`, `<experiment>_summary.json` and the
    /// auxiliary files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let stem = self.table.experiment.as_str();
        let mut written = Vec::new();
        let mut put = |name: String, body: &str| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            written.push(p);
            Ok(())
        };
        put(format!("{stem}.csv"), &self.table.to_csv())?;
        let mut json = self.summary.to_json();
        json.push('\n');
        put(format!("{stem}_summary.json"), &json)?;
        for (name, body) in &self.files {
            put(name.clone(), body)?;
        }
        Ok(written)
    }
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Relative discrepancy `|a − b| / min(|a|, |b|)`.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().min(b.abs())
    }
}

/// Largest pairwise relative gap of the median curves at each `x`.
fn pairwise_discrepancies(table: &ResultTable, names: &[String], metric: &str) -> Vec<Discrepancy> {
    let curves: Vec<BTreeMap<OrdF64, f64>> = names
        .iter()
        .map(|n| table.median_curve(n, metric).into_iter().map(|(x, v)| (OrdF64(x), v)).collect())
        .collect();
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    first
        .keys()
        .map(|x| {
            let mut worst = Discrepancy {
                metric: metric.to_string(),
                x: x.0,
                max_pairwise_rel: 0.0,
                pair: [names[0].clone(), names[0].clone()],
            };
            for i in 0..names.len() {
                for j in i + 1..names.len() {
                    let (Some(a), Some(b)) = (curves[i].get(x), curves[j].get(x)) else {
                        continue;
                    };
                    let g = relative_gap(*a, *b);
                    if g > worst.max_pairwise_rel || g.is_nan() {
                        worst.max_pairwise_rel = g;
                        worst.pair = [names[i].clone(), names[j].clone()];
                    }
                }
            }
            worst
        })
        .collect()
}

fn curves_for(table: &ResultTable, names: &[String], metric: &str) -> Vec<Curve> {
    names
        .iter()
        .map(|n| {
            let c = table.median_curve(n, metric);
            Curve {
                ensemble: n.clone(),
                metric: metric.to_string(),
                x: c.iter().map(|p| p.0).collect(),
                median: c.iter().map(|p| p.1).collect(),
            }
        })
        .collect()
}

/// Worker count from `UNILAB_THREADS` (unset or invalid: rayon's default).
pub fn configured_threads() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|v| *v > 0)
}

/// Runs `f` inside a pool capped by `UNILAB_THREADS`.
pub fn with_thread_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match configured_threads() {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

struct Row<'a> {
    cfg: &'a ExperimentConfig,
    ensemble: String,
    seed: u64,
}

impl Row<'_> {
    fn at(&self, x: f64, metric: &str, value: f64) -> ResultRow {
        ResultRow {
            experiment: self.cfg.experiment.as_str().to_string(),
            ensemble: self.ensemble.clone(),
            seed: self.seed,
            x,
            metric: metric.to_string(),
            value,
        }
    }
}

fn tasks(cfg: &ExperimentConfig) -> Vec<(usize, usize)> {
    (0..cfg.ensembles.len())
        .flat_map(|e| (0..cfg.trials).map(move |t| (e, t)))
        .collect()
}

fn instance(cfg: &ExperimentConfig, spec: &EnsembleSpec, trial: usize, prior: &Prior) -> Result<LinearModelInstance> {
    let ts = cfg.trial_seed(trial);
    let x = sample_ensemble(spec, cfg.n, ts)?;
    let beta = sample_prior(prior, cfg.n, ts.derive("beta"))?;
    LinearModelInstance::new(x, beta, cfg.sigma(), ts.derive("noise"))
}

fn elastic_net_at(spec: &RegularizerSpec, lambda1: f64) -> Result<Regularizer> {
    let ratio = if spec.lambda1 > 0.0 { spec.lambda2 / spec.lambda1 } else { 0.0 };
    RegularizerSpec {
        kind: spec.kind.clone(),
        lambda1,
        lambda2: ratio * lambda1,
    }
    .build()
}

fn accel_opts(cfg: &ExperimentConfig) -> AcceleratedOptions {
    AcceleratedOptions {
        gamma: None,
        max_iter: cfg.solver.max_iter,
        tol: cfg.solver.tol,
    }
}

/// Converged RLS over the `λ₁` grid, from the largest value down with warm
/// starts. Sequential Haar draws are instead forked after `y` is formed and
/// solved cold: each grid point then pins only its own iterates, and a
/// solution from a sibling fork (a different matrix off the pinned span) is a
/// worse start than `prox(Xᵀy)`.
pub fn run_fig1_lambda_sweep(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut grid = cfg.lambda1_grid();
    grid.sort_by(|a, b| b.total_cmp(a));
    let reg = cfg.regularizer_spec();
    let rows: Vec<Vec<ResultRow>> = tasks(cfg)
        .into_par_iter()
        .map(|(e, t)| -> Result<Vec<ResultRow>> {
            let spec = &cfg.ensembles[e];
            let inst = instance(cfg, spec, t, &cfg.prior)?;
            let row = Row {
                cfg,
                ensemble: spec.name(),
                seed: t as u64,
            };
            let mut out = Vec::new();
            let mut warm: Option<Vec<f64>> = None;
            let stateful = inst.x.op.fork_state().is_some();
            for &l in &grid {
                let rho = elastic_net_at(&reg, l)?;
                let local = inst.fork();
                let sol = solve_rls_accelerated(&local, &rho, &accel_opts(cfg), warm.as_deref())?;
                let star = crate::linalg::dot(&inst.beta_star, &inst.beta_star);
                out.push(row.at(l, "mse", sol.mse));
                out.push(row.at(l, "nmse", if star > 0.0 { sol.mse * cfg.n as f64 / star } else { f64::NAN }));
                out.push(row.at(l, "objective", sol.objective));
                out.push(row.at(l, "iterations", sol.iterations as f64));
                out.push(row.at(l, "converged", if sol.converged { 1.0 } else { 0.0 }));
                if !stateful {
                    warm = Some(sol.beta);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let table = ResultTable::new(cfg, rows.into_iter().flatten().collect());
    let names: Vec<String> = cfg.ensembles.iter().map(|e| e.name()).collect();
    let mut summary = Summary::new(cfg, &table);
    summary.curves = curves_for(&table, &names, "mse");
    summary.discrepancies = pairwise_discrepancies(&table, &names, "mse");
    let worst = summary.discrepancies.iter().map(|d| d.max_pairwise_rel).fold(0.0, f64::max);
    summary
        .checks
        .push(Check::at_most("max_pairwise_rel_mse", worst, cfg.checks.rel_tol));
    let unconverged = table
        .rows
        .iter()
        .filter(|r| r.metric == "converged" && r.value == 0.0)
        .count();
    summary
        .checks
        .push(Check::at_most("unconverged_solves", unconverged as f64, 0.0));
    Ok(ExperimentOutput {
        table,
        summary: summary.finish(),
        files: Vec::new(),
    })
}

/// Proximal gradient trajectories at the configured `λ₁`.
pub fn run_fig1_iterations(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let rho = cfg.regularizer_spec().build()?;
    let opts = ProxGradOptions {
        record_every: cfg.record_every,
        ..ProxGradOptions::fixed(cfg.iterations)
    };
    let results: Vec<(Vec<ResultRow>, (String, String), f64)> = tasks(cfg)
        .into_par_iter()
        .map(|(e, t)| {
            let spec = &cfg.ensembles[e];
            let inst = instance(cfg, spec, t, &cfg.prior)?;
            let traj = prox_grad(&inst, &rho, &opts)?;
            let row = Row {
                cfg,
                ensemble: spec.name(),
                seed: t as u64,
            };
            let mut out = Vec::new();
            for p in &traj.points {
                out.push(row.at(p.t as f64, "mse", p.mse));
                out.push(row.at(p.t as f64, "nmse", p.nmse));
                out.push(row.at(p.t as f64, "objective", p.objective));
            }
            let scale = traj.points.iter().map(|p| p.objective.abs()).fold(0.0, f64::max).max(1e-300);
            let file = (
                format!("trajectory_{}_seed{t}.csv", file_safe(&spec.name())),
                traj.to_csv_string(),
            );
            Ok((out, file, traj.max_objective_increase() / scale))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut files = Vec::new();
    let mut worst_increase = f64::NEG_INFINITY;
    for (r, f, inc) in results {
        rows.extend(r);
        files.push(f);
        worst_increase = worst_increase.max(inc);
    }
    let table = ResultTable::new(cfg, rows);
    let names: Vec<String> = cfg.ensembles.iter().map(|e| e.name()).collect();
    let mut summary = Summary::new(cfg, &table);
    summary.curves = curves_for(&table, &names, "mse");
    summary.discrepancies = pairwise_discrepancies(&table, &names, "mse");
    let worst = summary.discrepancies.iter().map(|d| d.max_pairwise_rel).fold(0.0, f64::max);
    summary
        .checks
        .push(Check::at_most("max_pairwise_rel_mse", worst, cfg.checks.rel_tol));
    summary
        .checks
        .push(Check::at_most("max_relative_objective_increase", worst_increase, 1e-12));
    Ok(ExperimentOutput {
        table,
        summary: summary.finish(),
        files,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn normalized(&self) -> Vec<f64> {
        let t = self.total();
        if t == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|c| *c as f64 / t as f64).collect()
    }
}

/// Uniform bins over `range`; values outside are counted in the end bins.
pub fn histogram(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    if bins < 1 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let (lo, hi) = range;
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("empty histogram range [{lo}, {hi}]")));
    }
    let w = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + w * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for v in values {
        let b = ((v - lo) / w).floor();
        let b = if b.is_nan() { 0 } else { b.clamp(0.0, (bins - 1) as f64) as usize };
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Coordinates with `|v| > threshold`.
pub fn retained(values: &[f64], threshold: f64) -> Vec<f64> {
    values.iter().copied().filter(|v| v.abs() > threshold).collect()
}

/// `½ Σ |p_i − q_i|` of the normalized histograms.
pub fn total_variation(a: &Histogram, b: &Histogram) -> f64 {
    a.normalized()
        .iter()
        .zip(b.normalized())
        .map(|(p, q)| (p - q).abs())
        .sum::<f64>()
        / 2.0
}

/// Histograms of the nonzero coordinates of the converged RLS estimate.
pub fn run_fig1_histograms(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let rho = cfg.regularizer_spec().build()?;
    let h = &cfg.histogram;
    let results: Vec<(usize, Vec<ResultRow>, Histogram)> = tasks(cfg)
        .into_par_iter()
        .map(|(e, t)| {
            let spec = &cfg.ensembles[e];
            let inst = instance(cfg, spec, t, &cfg.prior)?;
            let sol = solve_rls_accelerated(&inst, &rho, &accel_opts(cfg), None)?;
            let kept = retained(&sol.beta, h.threshold);
            let hist = histogram(&kept, h.bins, (h.range[0], h.range[1]))?;
            let row = Row {
                cfg,
                ensemble: spec.name(),
                seed: t as u64,
            };
            let rows = hist
                .centers()
                .iter()
                .zip(&hist.counts)
                .map(|(c, n)| row.at(*c, "count", *n as f64))
                .collect();
            Ok((e, rows, hist))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pooled: Vec<Option<Histogram>> = vec![None; cfg.ensembles.len()];
    let mut rows = Vec::new();
    for (e, r, hist) in results {
        rows.extend(r);
        match &mut pooled[e] {
            Some(p) => {
                for (a, b) in p.counts.iter_mut().zip(&hist.counts) {
                    *a += b;
                }
            }
            slot => *slot = Some(hist),
        }
    }
    let table = ResultTable::new(cfg, rows);
    let names: Vec<String> = cfg.ensembles.iter().map(|e| e.name()).collect();
    let mut summary = Summary::new(cfg, &table);
    summary.curves = curves_for(&table, &names, "count");
    let mut worst = 0.0f64;
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let (Some(a), Some(b)) = (&pooled[i], &pooled[j]) else {
                continue;
            };
            let tv = total_variation(a, b);
            summary.checks.push(Check::at_most(
                format!("tv[{},{}]", names[i], names[j]),
                tv,
                cfg.checks.tv_tol,
            ));
            worst = worst.max(tv);
        }
    }
    summary
        .checks
        .push(Check::at_most("max_pairwise_tv", worst, cfg.checks.tv_tol));
    Ok(ExperimentOutput {
        table,
        summary: summary.finish(),
        files: Vec::new(),
    })
}

/// Noiseless NMSE against sparsity for signed and unsigned ensembles, plus
/// the `XᵀX·1` diagnostics of every ensemble.
pub fn run_fig2(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let rho = cfg.regularizer_spec().build()?;
    let chis = cfg.chi_grid();
    let priors = cfg.priors();
    let jobs: Vec<(usize, usize, usize)> = (0..priors.len())
        .flat_map(|p| tasks(cfg).into_iter().map(move |(e, t)| (p, e, t)))
        .collect();
    let results: Vec<Vec<ResultRow>> = jobs
        .into_par_iter()
        .map(|(p, e, t)| -> Result<Vec<ResultRow>> {
            let spec = &cfg.ensembles[e];
            let family = priors[p];
            let row = Row {
                cfg,
                ensemble: format!("{}/{}", spec.name(), family.as_str()),
                seed: t as u64,
            };
            let ts = cfg.trial_seed(t);
            let x = sample_ensemble(spec, cfg.n, ts)?;
            let mut out = Vec::new();
            for (ci, &chi) in chis.iter().enumerate() {
                let beta = sample_prior(&family.at(chi), cfg.n, ts.derive("beta").index(ci as u64))?;
                if beta.iter().all(|b| *b == 0.0) {
                    out.push(row.at(chi, "zero_signal", 1.0));
                    continue;
                }
                let inst = LinearModelInstance::new(x.fork(), beta, cfg.sigma(), ts.derive("noise"))?;
                let sol = solve_rls_accelerated(&inst, &rho, &accel_opts(cfg), None)?;
                let nmse = crate::solver::nmse(&sol.beta, &inst.beta_star)?;
                out.push(row.at(chi, "nmse", nmse));
                out.push(row.at(chi, "iterations", sol.iterations as f64));
                out.push(row.at(chi, "converged", if sol.converged { 1.0 } else { 0.0 }));
            }
            if p == 0 {
                // XᵀX·1: mean 1/2 and variance 1/4 for signed frames
                let ones = vec![1.0; cfg.n];
                let g = x.op.adjoint(&x.op.forward(&ones));
                let diag = Row {
                    cfg,
                    ensemble: spec.name(),
                    seed: t as u64,
                };
                out.push(diag.at(0.0, "gram_ones_mean", mean(&g)));
                out.push(diag.at(0.0, "gram_ones_variance", variance(&g)));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let table = ResultTable::new(cfg, results.into_iter().flatten().collect());
    let mut summary = Summary::new(cfg, &table);
    for family in &priors {
        let names: Vec<String> = cfg
            .ensembles
            .iter()
            .map(|e| format!("{}/{}", e.name(), family.as_str()))
            .collect();
        summary.curves.extend(curves_for(&table, &names, "nmse"));
        summary.discrepancies.extend(pairwise_discrepancies(&table, &names, "nmse"));
        summary
            .checks
            .extend(breakdown_checks(cfg, &table, *family));
    }
    Ok(ExperimentOutput {
        table,
        summary: summary.finish(),
        files: Vec::new(),
    })
}

/// Signed reference pair and unsigned comparison for the breakdown study:
/// `spike_hwt` vs `rand_dct` (signed) and `unsigned_spike_hwt` vs `spike_hwt`.
pub fn breakdown_profile(table: &ResultTable, family: PriorFamily) -> Option<Vec<(f64, f64, f64)>> {
    let name = |base: &str| format!("{base}/{}", family.as_str());
    let signed = table.median_curve(&name("spike_hwt"), "nmse");
    let dct = table.median_curve(&name("rand_dct[spike_sine]"), "nmse");
    let unsigned = table.median_curve(&name("unsigned_spike_hwt"), "nmse");
    if signed.is_empty() || dct.is_empty() || unsigned.is_empty() {
        return None;
    }
    let d: BTreeMap<OrdF64, f64> = dct.into_iter().map(|(x, v)| (OrdF64(x), v)).collect();
    let u: BTreeMap<OrdF64, f64> = unsigned.into_iter().map(|(x, v)| (OrdF64(x), v)).collect();
    Some(
        signed
            .into_iter()
            .filter_map(|(x, s)| {
                let dv = d.get(&OrdF64(x))?;
                let uv = u.get(&OrdF64(x))?;
                Some((x, relative_gap(s, *dv), relative_gap(s, *uv)))
            })
            .collect(),
    )
}

fn breakdown_checks(cfg: &ExperimentConfig, table: &ResultTable, family: PriorFamily) -> Vec<Check> {
    let Some(profile) = breakdown_profile(table, family) else {
        return Vec::new();
    };
    let k = cfg.checks.breakdown_factor;
    let breaks = profile.iter().filter(|(_, s, u)| *u > k * s).count();
    let worst_unsigned = profile.iter().map(|p| p.2).fold(0.0, f64::max);
    let worst_signed = profile.iter().map(|p| p.1).fold(0.0, f64::max);
    let median_unsigned = median(&profile.iter().map(|p| p.2).collect::<Vec<_>>());
    let f = family.as_str();
    let mut v = vec![
        Check::at_most(format!("signed_vs_signed_rel[{f}]"), worst_signed, cfg.checks.rel_tol),
        Check {
            name: format!("median_unsigned_deviation_rel[{f}]"),
            value: median_unsigned,
            threshold: f64::NAN,
            pass: true,
        },
        Check {
            name: format!("max_unsigned_deviation_rel[{f}]"),
            value: worst_unsigned,
            threshold: f64::NAN,
            pass: true,
        },
    ];
    if family == PriorFamily::SparsePositive {
        v.push(Check::at_least(format!("breakdown_points[{f}]"), breaks as f64, 1.0));
    } else {
        v.push(Check {
            name: format!("breakdown_points[{f}]"),
            value: breaks as f64,
            threshold: f64::NAN,
            pass: true,
        });
    }
    v
}

/// `Ω̂_{st} = (1/N) Σ_i (λ_i^{p_s} − m̂_{p_s})(λ_i^{p_t} − m̂_{p_t})`, the
/// normalized trace of `Ψ_s Ψ_t` for centered powers of `XᵀX`.
pub fn omega_from_lambda(lambda: &[f64], powers: &[usize]) -> DMatrix<f64> {
    let n = lambda.len() as f64;
    let centered: Vec<Vec<f64>> = powers
        .iter()
        .map(|&p| {
            let v: Vec<f64> = lambda.iter().map(|l| l.powi(p as i32)).collect();
            let m = v.iter().sum::<f64>() / n;
            v.into_iter().map(|x| x - m).collect()
        })
        .collect();
    let t = powers.len();
    DMatrix::from_fn(t, t, |i, j| {
        centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / n
    })
}

/// Built-in VAMP nonlinearities: `f₁ = a`, then mixtures of even and odd
/// bounded functions of the latest iterates and the signal column. The even
/// parts keep an O(1) residual after the divergence-free correction.
pub fn vamp_template(t: usize) -> Vec<Nonlinearity> {
    (0..t)
        .map(|i| match i {
            0 => Nonlinearity::aux_column(0, 0),
            1 => Nonlinearity::new("cos(3z1)+tanh(2z1)+a/2", 1, 5.0, |h, a| {
                (3.0 * h[0]).cos() + (2.0 * h[0]).tanh() + 0.5 * a[0]
            }),
            _ => Nonlinearity::new("cos(2z_last)+sin(3z_prev)/2+a/4", i, 3.5, |h, a| {
                let n = h.len();
                (2.0 * h[n - 1]).cos() + 0.5 * (3.0 * h[n - 2]).sin() + 0.25 * a[0]
            }),
        })
        .collect()
}

/// Law of the realized signal column: its distinct values with their
/// observed frequencies.
pub fn empirical_law(values: &[f64]) -> AuxLaw {
    let mut counts: BTreeMap<OrdF64, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(OrdF64(*v)).or_default() += 1;
    }
    let n = values.len() as f64;
    AuxLaw::new(vec![ScalarLaw::Discrete {
        atoms: counts.keys().map(|k| k.0).collect(),
        probs: counts.values().map(|c| *c as f64 / n).collect(),
    }])
}

/// RMS of the prior, used to normalize the signal column to `E[B²] = 1`.
fn signal_scale(prior: &Prior) -> Result<f64> {
    let m2 = prior.moment(2)?;
    if !(m2 > 0.0) {
        return Err(Error::ZeroSignal);
    }
    Ok(m2.sqrt())
}

/// VAMP iterates over semi-random ensembles built from centered powers of
/// `XᵀX`, against the state evolution for `Ω̂`.
pub fn run_vamp_se(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let powers = cfg.vamp.powers.clone();
    let scale = signal_scale(&cfg.prior)?;
    let raw = vamp_template(powers.len());
    type Prepared = (Vec<Nonlinearity>, crate::dynamics::StateEvolution);
    // state evolution per distinct (Ω̂, signal law); ensembles of one trial share it
    let mut se_cache: Vec<(DMatrix<f64>, AuxLaw, Prepared)> = Vec::new();
    let mut jobs = Vec::new();
    for (e, t) in tasks(cfg) {
        let spec = &cfg.ensembles[e];
        let ts = cfg.trial_seed(t);
        let x = sample_ensemble(spec, cfg.n, ts)?;
        let lambda = x.lambda.clone().expect("haar and rand_dct record Λ");
        let omega = omega_from_lambda(&lambda, &powers);
        let signal: Vec<f64> = sample_prior(&cfg.prior, cfg.n, ts.derive("beta"))?
            .into_iter()
            .map(|b| b / scale)
            .collect();
        let law = empirical_law(&signal);
        let idx = match se_cache
            .iter()
            .position(|(o, l, _)| *l == law && (o - &omega).abs().max() <= 1e-12 * omega.abs().max().max(1.0))
        {
            Some(i) => i,
            None => {
                let prepared = correct_and_evolve(
                    &raw,
                    &omega,
                    &law,
                    cfg.vamp.mc_samples,
                    Seed(cfg.master_seed).derive("state-evolution").index(se_cache.len() as u64),
                )?;
                se_cache.push((omega.clone(), law, (prepared.0, prepared.2)));
                se_cache.len() - 1
            }
        };
        jobs.push((e, t, x, signal, idx));
    }
    let results: Vec<(Vec<ResultRow>, (String, String), f64)> = jobs
        .into_par_iter()
        .map(|(e, t, x, signal, idx)| {
            let spec = &cfg.ensembles[e];
            let ts = cfg.trial_seed(t);
            let (fs, se) = &se_cache[idx].2;
            let (psis, _) = centered_powers(&x, &powers)?;
            let ms = build_semirandom(&psis, ts.derive("semirandom"))?;
            let dyn_spec = DynamicsSpec {
                operators: ms,
                f: fs.clone(),
                eta: vec![None; powers.len()],
                aux: vec![signal],
            };
            let iterates = run_vamp(&dyn_spec)?;
            let cmp = GramComparison::new(se, &iterates);
            let ratio = cmp.worst_ratio(cfg.checks.se_mult, cfg.checks.diag_frac);
            let row = Row {
                cfg,
                ensemble: spec.name(),
                seed: t as u64,
            };
            let mut out = Vec::new();
            let tt = cmp.t;
            for s in 0..tt {
                for u in 0..tt {
                    let x = (s * tt + u) as f64;
                    out.push(row.at(x, "empirical", cmp.empirical[s][u]));
                    out.push(row.at(x, "sigma", cmp.sigma[s][u]));
                    out.push(row.at(x, "mc_se", cmp.mc_se[s][u]));
                }
            }
            out.push(row.at(-1.0, "worst_ratio", ratio));
            let file = (
                format!("vamp_gram_{}_seed{t}.json", file_safe(&spec.name())),
                serde_json::to_string_pretty(&cmp).expect("gram serializes") + "\n",
            );
            Ok((out, file, ratio))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut files = Vec::new();
    let mut worst = 0.0f64;
    for (r, f, ratio) in results {
        rows.extend(r);
        files.push(f);
        worst = worst.max(ratio);
    }
    let table = ResultTable::new(cfg, rows);
    let mut summary = Summary::new(cfg, &table);
    let names: Vec<String> = cfg.ensembles.iter().map(|e| e.name()).collect();
    summary.curves = curves_for(&table, &names, "empirical");
    summary.checks.push(Check::at_most("gram_vs_sigma_worst_ratio", worst, 1.0));
    Ok(ExperimentOutput {
        table,
        summary: summary.finish(),
        files,
    })
}

/// Class report of the default draw of `tag` at size `n` against its target measure.
pub fn default_class_report(tag: EnsembleTag, n: usize, seed: u64) -> Result<ClassReport> {
    let spec = EnsembleSpec::new(tag);
    let x = sample_ensemble(&spec, n, Seed(seed))?;
    class_report(
        &x,
        &x.measure,
        &DEFAULT_KS,
        &TolProfile::default(),
        &SweepOptions::default(),
        Seed(seed).derive("report"),
    )
}

pub fn run_class_reports(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ks = cfg.ks();
    let reports: Vec<(Vec<ResultRow>, ClassReport)> = tasks(cfg)
        .into_par_iter()
        .map(|(e, t)| {
            let spec = &cfg.ensembles[e];
            let ts = cfg.trial_seed(t);
            let x = sample_ensemble(spec, cfg.n, ts)?;
            let report = class_report(
                &x,
                &x.measure,
                &ks,
                &TolProfile::default(),
                &SweepOptions::default(),
                ts.derive("report"),
            )?;
            let row = Row {
                cfg,
                ensemble: spec.name(),
                seed: t as u64,
            };
            let mut out = Vec::new();
            for m in &report.moments {
                let k = m.k as f64;
                out.push(row.at(k, "empirical", m.empirical));
                out.push(row.at(k, "target", m.target));
                out.push(row.at(k, "deviation", m.deviation));
                out.push(row.at(k, "pass", if m.pass { 1.0 } else { 0.0 }));
            }
            Ok((out, report))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for (r, rep) in reports {
        rows.extend(r);
        all.push(rep);
    }
    let table = ResultTable::new(cfg, rows);
    let mut summary = Summary::new(cfg, &table);
    let names: Vec<String> = cfg.ensembles.iter().map(|e| e.name()).collect();
    summary.curves = curves_for(&table, &names, "deviation");
    let failed = all.iter().filter(|r| !r.pass).count();
    summary
        .checks
        .push(Check::at_most("failed_reports", failed as f64, 0.0));
    summary.class_reports = all;
    Ok(ExperimentOutput {
        table,
        summary: summary.finish(),
        files: Vec::new(),
    })
}

/// Validates and runs `cfg` inside the `UNILAB_THREADS` pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    with_thread_pool(|| match cfg.experiment {
        ExperimentKind::Fig1LambdaSweep => run_fig1_lambda_sweep(cfg),
        ExperimentKind::Fig1Iterations => run_fig1_iterations(cfg),
        ExperimentKind::Fig1Histograms => run_fig1_histograms(cfg),
        ExperimentKind::Fig2SparsitySweep => run_fig2(cfg),
        ExperimentKind::VampSe => run_vamp_se(cfg),
        ExperimentKind::ClassReport => run_class_reports(cfg),
    })
}

/// Reads, runs and writes a config file; returns the output and written paths.
pub fn run_config_file(path: &Path) -> Result<(ExperimentOutput, Vec<PathBuf>)> {
    let cfg = ExperimentConfig::from_path(path)?;
    let out = run_experiment(&cfg)?;
    let written = out.write(&cfg.output_dir)?;
    Ok((out, written))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind, ensembles: Vec<EnsembleSpec>) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(kind, 256, ensembles);
        c.trials = 2;
        c.lambda1_grid = Some(vec![0.1, 1.0, 1000.0]);
        c.iterations = 20;
        c
    }

    #[test]
    fn config_round_trip() {
        let text = r#"
experiment = "fig1_lambda_sweep"
N = 1024
ensembles = [
  { tag = "spike_sine" },
  { tag = "rand_dct", lambda = "spike_sine" },
  { tag = "haar", lambda = "mask", mask_l = 2, haar_mode = "sequential" },
]
prior = { kind = "five_point" }
sigma = 1.0
regularizer = { kind = "elastic_net", lambda1 = 1.0, lambda2 = 0.001 }
lambda1_grid = [0.01, 0.1, 1.0]
trials = 3
master_seed = 7
"#;
        let a = ExperimentConfig::from_toml_str(text).unwrap();
        let b = ExperimentConfig::from_toml_str(&a.to_toml_string()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.n, 1024);
        assert_eq!(a.ensembles[2].name(), "haar[mask]");
    }

    #[test]
    fn config_errors_name_the_field() {
        let base = ExperimentConfig::new(ExperimentKind::Fig1LambdaSweep, 96, vec![EnsembleSpec::new(EnsembleTag::SpikeHwt)]);
        match base.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "N"),
            other => panic!("{other:?}"),
        }
        let mut c = ExperimentConfig::new(ExperimentKind::Fig1LambdaSweep, 64, vec![EnsembleSpec::new(EnsembleTag::SpikeSine)]);
        c.trials = 0;
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "trials"));
        c.trials = 1;
        c.lambda1_grid = Some(vec![]);
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "lambda1_grid"));
        let mut c = ExperimentConfig::new(ExperimentKind::Fig1LambdaSweep, 64, vec![EnsembleSpec::new(EnsembleTag::SpikeSine).with_lambda(LambdaSource::Mask)]);
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "ensembles[0].lambda"));
        c.ensembles[0].lambda = None;
        assert!(c.validate().is_ok());
        c.master_seed = u64::MAX;
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "master_seed"));
        assert!(matches!(
            ExperimentConfig::from_toml_str("experiment = \"fig1_lambda_sweep\"\nN = 64\nensembles = []\nbogus = 1\n"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn histogram_examples() {
        let h = histogram(&[12.0; 9], 101, (-25.0, 25.0)).unwrap();
        assert_eq!(h.total(), 9);
        assert_eq!(h.counts.iter().filter(|c| **c > 0).count(), 1);
        let v: Vec<f64> = (0..1000).map(|i| (i as f64 - 500.0) / 7.0).collect();
        let h = histogram(&v, 13, (-25.0, 25.0)).unwrap();
        assert_eq!(h.total(), 1000);
        let e = histogram(&[], 5, (0.0, 1.0)).unwrap();
        assert_eq!(e.counts, vec![0; 5]);
        assert!(histogram(&[1.0], 0, (0.0, 1.0)).is_err());
        assert_eq!(retained(&[0.0, 1e-9, -2.0, 3.0], NONZERO_THRESHOLD), vec![-2.0, 3.0]);
        assert_eq!(total_variation(&h, &h), 0.0);
    }

    #[test]
    fn lambda_sweep_cardinality_and_collapse() {
        let cfg = small(ExperimentKind::Fig1LambdaSweep, vec![EnsembleSpec::new(EnsembleTag::SpikeSine)]);
        let out = run_experiment(&cfg).unwrap();
        let mse_rows: Vec<_> = out.table.rows.iter().filter(|r| r.metric == "mse").collect();
        assert_eq!(mse_rows.len(), 2 * 3);
        // huge λ₁ kills every coordinate: MSE = (1/N)‖β⋆‖²
        for t in 0..2 {
            let beta = sample_prior(&cfg.prior, cfg.n, cfg.trial_seed(t).derive("beta")).unwrap();
            let expect = crate::linalg::dot(&beta, &beta) / cfg.n as f64;
            let got = mse_rows.iter().find(|r| r.seed == t as u64 && r.x == 1000.0).unwrap().value;
            assert!((got - expect).abs() < 1e-12, "{got} {expect}");
        }
    }

    #[test]
    fn output_is_byte_identical_and_keys_unique() {
        let cfg = small(
            ExperimentKind::Fig1Iterations,
            vec![
                EnsembleSpec::new(EnsembleTag::SpikeSine),
                EnsembleSpec::new(EnsembleTag::Haar).with_lambda(LambdaSource::SpikeSine),
            ],
        );
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.table.to_csv(), b.table.to_csv());
        assert_eq!(a.summary.to_json(), b.summary.to_json());
        assert_eq!(a.files, b.files);
        let mut keys = std::collections::BTreeSet::new();
        for r in &a.table.rows {
            assert!(keys.insert((r.ensemble.clone(), r.seed, OrdF64(r.x), r.metric.clone())));
        }
        assert!(a.table.to_csv().starts_with("# unilab "));
        assert!(a.summary.check("max_relative_objective_increase").unwrap().pass);
        let dir = tempfile::tempdir().unwrap();
        let written = a.write(dir.path()).unwrap();
        assert_eq!(written.len(), 2 + 4);
        let traj = std::fs::read_to_string(&written[2]).unwrap();
        assert!(traj.starts_with("t,objective,mse,nmse\n"));
    }

    #[test]
    fn zero_signal_marker() {
        let mut cfg = small(
            ExperimentKind::Fig2SparsitySweep,
            vec![EnsembleSpec::new(EnsembleTag::SpikeHwt)],
        );
        cfg.chi_grid = Some(vec![0.0, 0.2]);
        cfg.trials = 1;
        let out = run_experiment(&cfg).unwrap();
        let zero: Vec<_> = out.table.rows.iter().filter(|r| r.metric == "zero_signal").collect();
        assert_eq!(zero.len(), 2);
        assert!(zero.iter().all(|r| r.x == 0.0));
        assert!(out.table.rows.iter().any(|r| r.metric == "nmse" && r.x == 0.2));
    }

    #[test]
    fn omega_hat_bernoulli() {
        let l = spike_lambda(8, 16);
        let o = omega_from_lambda(&l, &[1, 2, 3]);
        assert!((o - DMatrix::from_element(3, 3, 0.25)).abs().max() < 1e-15);
    }

    #[test]
    fn mask_lambda_is_matched_within_a_trial() {
        let spec = EnsembleSpec::new(EnsembleTag::RandDct).with_lambda(LambdaSource::Mask);
        let x = sample_ensemble(&spec, 64, Seed(3)).unwrap();
        let m = sample_ensemble(&EnsembleSpec::new(EnsembleTag::Mask), 64, Seed(3)).unwrap();
        assert_eq!(x.lambda.as_ref().unwrap()[..32], m.mask_r().unwrap()[..]);
    }
}
