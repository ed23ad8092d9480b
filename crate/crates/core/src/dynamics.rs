//! General first-order methods (GFOM) and VAMP over semi-random ensembles,
//! with the Gaussian state evolution that predicts VAMP iterates.
//!
//! A GFOM runs `z^t = M_t f_t(z^1, …, z^{t−1}; A) + η_t(z^1, …, z^{t−1}; A)`
//! with entrywise nonlinearities; VAMP drops `η` and requires divergence-free
//! `f`. The state evolution fills `Φ_{s,t} = E[f_s f_t]` and
//! `Σ_{s,t} = Ω_{t,s} Φ_{s,t}` by Monte Carlo.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensembles::SensingOperator;
use crate::error::{Error, Result};
use crate::linalg::{dot, gaussian_vec, norm, psd_cholesky, symmetric_pinv};
use crate::regularization::{prox, Regularizer};
use crate::rng::{Rng, Seed};
use crate::solver::{default_gamma, LinearModelInstance};
use crate::transforms::{compose, to_dense, Gram, LinearCombination, LinearOperator, Op, SignDiagonal};

pub type NonlinFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Entrywise map `(z_1, …, z_{t−1}; a) ↦ f(z; a)`.
#[derive(Clone)]
pub struct Nonlinearity {
    /// Number of previous iterates the map reads.
    pub arity: usize,
    pub lipschitz: f64,
    pub divergence_free: bool,
    pub name: String,
    eval: NonlinFn,
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Nonlinearity({}, arity {}, L={}, div-free={})",
            self.name, self.arity, self.lipschitz, self.divergence_free
        )
    }
}

impl Nonlinearity {
    pub fn new<F>(name: &str, arity: usize, lipschitz: f64, f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        Nonlinearity {
            arity,
            lipschitz,
            divergence_free: arity == 0,
            name: name.to_string(),
            eval: Arc::new(f),
        }
    }

    /// Declares the map divergence-free by construction.
    pub fn assume_divergence_free(mut self) -> Self {
        self.divergence_free = true;
        self
    }

    pub fn zero(arity: usize) -> Self {
        Nonlinearity::new("0", arity, 0.0, |_, _| 0.0).assume_divergence_free()
    }

    pub fn constant(arity: usize, c: f64) -> Self {
        Nonlinearity::new("const", arity, 0.0, move |_, _| c)
    }

    /// Column `j` of the auxiliary matrix.
    pub fn aux_column(arity: usize, j: usize) -> Self {
        Nonlinearity::new(&format!("a{j}"), arity, 0.0, move |_, a| a[j])
    }

    #[inline]
    pub fn eval(&self, history: &[f64], aux: &[f64]) -> f64 {
        (self.eval)(history, aux)
    }

    /// Entrywise evaluation on iterate vectors and auxiliary columns.
    pub fn apply(&self, history: &[Vec<f64>], aux: &[Vec<f64>], n: usize) -> Result<Vec<f64>> {
        if history.len() < self.arity {
            return Err(Error::InvalidArgument(format!(
                "{} needs {} previous iterates, got {}",
                self.name,
                self.arity,
                history.len()
            )));
        }
        let t = history.len();
        let b = aux.len();
        let mut h = vec![0.0; t];
        let mut a = vec![0.0; b];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            for (hv, z) in h.iter_mut().zip(history) {
                *hv = z[i];
            }
            for (av, col) in a.iter_mut().zip(aux) {
                *av = col[i];
            }
            let v = self.eval(&h, &a);
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{} returned {v} at coordinate {i}",
                    self.name
                )));
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// Law of one coordinate of the auxiliary vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarLaw {
    Discrete { atoms: Vec<f64>, probs: Vec<f64> },
    Gaussian { sigma: f64 },
    Constant { value: f64 },
}

impl ScalarLaw {
    fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            ScalarLaw::Discrete { atoms, probs } => {
                let total: f64 = probs.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                for (a, p) in atoms.iter().zip(probs) {
                    if u < *p {
                        return *a;
                    }
                    u -= p;
                }
                *atoms.last().expect("nonempty atoms")
            }
            ScalarLaw::Gaussian { sigma } => sigma * rng.sample::<f64, _>(StandardNormal),
            ScalarLaw::Constant { value } => *value,
        }
    }
}

/// Independent columns of the auxiliary vector `A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxLaw {
    pub columns: Vec<ScalarLaw>,
}

impl AuxLaw {
    pub fn new(columns: Vec<ScalarLaw>) -> Self {
        AuxLaw { columns }
    }

    /// `samples` rows, stored column by column.
    pub fn sample_columns(&self, samples: usize, seed: Seed) -> Vec<Vec<f64>> {
        self.columns
            .iter()
            .enumerate()
            .map(|(j, law)| {
                let mut rng = seed.derive("aux").index(j as u64).rng();
                (0..samples).map(|_| law.sample(&mut rng)).collect()
            })
            .collect()
    }
}

/// `M_i = S Ψ_i S` with one shared random sign diagonal.
pub fn build_semirandom(psis: &[Op], seed: Seed) -> Result<Vec<Op>> {
    let n = psis.first().map(|p| p.cols()).unwrap_or(0);
    let s: Op = Arc::new(SignDiagonal::sample(n, seed.derive("semirandom-signs")));
    psis.iter()
        .map(|p| {
            if p.rows() != n || p.cols() != n {
                return Err(Error::dims(n, p.rows().max(p.cols()), "semi-random Ψ"));
            }
            compose(vec![s.clone(), p.clone(), s.clone()])
        })
        .collect()
}

/// `Ψ_i = (XᵀX)^{p_i} − m̂_{p_i} I`, returned with the subtracted moments.
/// Moments come from `λ` when the ensemble records it.
pub fn centered_powers(x: &SensingOperator, powers: &[usize]) -> Result<(Vec<Op>, Vec<f64>)> {
    let g: Op = Arc::new(Gram::new(x.op.clone()));
    let mut ops = Vec::with_capacity(powers.len());
    let mut moments = Vec::with_capacity(powers.len());
    for &p in powers {
        if p == 0 {
            return Err(Error::InvalidArgument("powers must be ≥ 1".into()));
        }
        let m = match &x.lambda {
            Some(l) => l.iter().map(|v| v.powi(p as i32)).sum::<f64>() / l.len() as f64,
            None => crate::universality::empirical_moment(x.op.as_ref(), p, 64, x.seed.derive("moment"))?,
        };
        let pw = crate::transforms::power(&g, p)?;
        ops.push(Arc::new(LinearCombination::shifted(pw, m)?) as Op);
        moments.push(m);
    }
    Ok((ops, moments))
}

#[derive(Clone, Debug)]
pub struct DynamicsSpec {
    pub operators: Vec<Op>,
    pub f: Vec<Nonlinearity>,
    /// `None` is the zero map.
    pub eta: Vec<Option<Nonlinearity>>,
    /// Auxiliary matrix stored by columns, each of length `N`.
    pub aux: Vec<Vec<f64>>,
}

impl DynamicsSpec {
    pub fn t(&self) -> usize {
        self.operators.len()
    }

    pub fn n(&self) -> usize {
        self.operators.first().map(|o| o.cols()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.t();
        if t == 0 {
            return Err(Error::InvalidArgument("no iterations".into()));
        }
        if self.f.len() != t {
            return Err(Error::dims(t, self.f.len(), "f list"));
        }
        if self.eta.len() != t {
            return Err(Error::dims(t, self.eta.len(), "η list"));
        }
        let n = self.n();
        for op in &self.operators {
            if op.rows() != n || op.cols() != n {
                return Err(Error::dims(n, op.rows().max(op.cols()), "GFOM operators must be N×N"));
            }
        }
        for col in &self.aux {
            if col.len() != n {
                return Err(Error::dims(n, col.len(), "auxiliary column"));
            }
        }
        Ok(())
    }
}

/// Executes the GFOM recursion and returns `z^1, …, z^T`.
pub fn run_gfom(spec: &DynamicsSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let n = spec.n();
    let mut iterates: Vec<Vec<f64>> = Vec::with_capacity(spec.t());
    for t in 0..spec.t() {
        let ft = spec.f[t].apply(&iterates, &spec.aux, n)?;
        let mut z = spec.operators[t].forward(&ft);
        if let Some(eta) = &spec.eta[t] {
            let e = eta.apply(&iterates, &spec.aux, n)?;
            for (zi, ei) in z.iter_mut().zip(&e) {
                *zi += ei;
            }
        }
        iterates.push(z);
    }
    Ok(iterates)
}

/// VAMP: a GFOM without `η` whose `f`'s are all divergence-free.
pub fn run_vamp(spec: &DynamicsSpec) -> Result<Vec<Vec<f64>>> {
    for (t, f) in spec.f.iter().enumerate() {
        if !f.divergence_free {
            return Err(Error::NotDivergenceFree(t + 1));
        }
    }
    if spec.eta.iter().any(|e| e.is_some()) {
        return Err(Error::InvalidArgument("VAMP has no η terms".into()));
    }
    run_gfom(spec)
}

/// `(1/N)⟨z^s, z^t⟩`
pub fn empirical_gram(iterates: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = iterates.len();
    let n = iterates.first().map(|v| v.len()).unwrap_or(1) as f64;
    (0..t)
        .map(|s| (0..t).map(|u| dot(&iterates[s], &iterates[u]) / n).collect())
        .collect()
}

pub const DEFAULT_MC_SAMPLES: usize = 100_000;

/// Gaussian draws `Z ~ N(0, Σ)` stored by component, plus `A` rows.
fn gaussian_sample(sigma: &DMatrix<f64>, samples: usize, seed: Seed) -> (Vec<Vec<f64>>, bool) {
    let t = sigma.nrows();
    let (l, clamped) = psd_cholesky(sigma);
    let g: Vec<Vec<f64>> = (0..t)
        .map(|j| gaussian_vec(samples, 1.0, &mut seed.derive("gauss").index(j as u64).rng()))
        .collect();
    let z = (0..t)
        .map(|r| {
            let mut zr = vec![0.0; samples];
            for (j, gj) in g.iter().enumerate().take(r + 1) {
                let c = l[(r, j)];
                if c != 0.0 {
                    for (zv, gv) in zr.iter_mut().zip(gj) {
                        *zv += c * gv;
                    }
                }
            }
            zr
        })
        .collect();
    (z, clamped)
}

fn eval_samples(f: &Nonlinearity, z: &[Vec<f64>], aux: &[Vec<f64>], samples: usize) -> Vec<f64> {
    let t = z.len();
    let b = aux.len();
    (0..samples)
        .into_par_iter()
        .map(|i| {
            let h: Vec<f64> = (0..t).map(|s| z[s][i]).collect();
            let a: Vec<f64> = (0..b).map(|j| aux[j][i]).collect();
            f.eval(&h, &a)
        })
        .collect()
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correction {
    /// Coefficients `β` subtracted along `z_1, …, z_{t−1}`.
    pub beta: Vec<f64>,
    /// Monte Carlo estimates of `E[f Z_s]` and their standard errors.
    pub cross: Vec<f64>,
    pub cross_se: Vec<f64>,
    /// `E[f̂ Z_s]` on an independent sample, with standard errors.
    pub residual: Vec<f64>,
    pub residual_se: Vec<f64>,
    pub singular: bool,
}

/// `f̂ = f − Σ_s β_s z_s` with `Σ_prev β = E[f(Z; A) Z]`, `Z ~ N(0, Σ_prev)`.
pub fn divergence_free_correct(
    f: &Nonlinearity,
    sigma_prev: &DMatrix<f64>,
    aux_law: &AuxLaw,
    mc_samples: usize,
    seed: Seed,
) -> Result<(Nonlinearity, Correction)> {
    let t = sigma_prev.nrows();
    if sigma_prev.ncols() != t {
        return Err(Error::dims(t, sigma_prev.ncols(), "Σ must be square"));
    }
    if mc_samples < 10_000 {
        return Err(Error::InvalidArgument(format!(
            "divergence-free correction needs ≥ 10⁴ samples, got {mc_samples}"
        )));
    }
    if t == 0 {
        let mut g = f.clone();
        g.divergence_free = true;
        return Ok((
            g,
            Correction {
                beta: vec![],
                cross: vec![],
                cross_se: vec![],
                residual: vec![],
                residual_se: vec![],
                singular: false,
            },
        ));
    }
    // antithetic pairs (Z, A), (−Z, A): ½·Z·(f(Z) − f(−Z)) has the same mean as f·Z
    // and drops the part of f that is even in Z (including anything depending on A only)
    let (z, _) = gaussian_sample(sigma_prev, mc_samples, seed.derive("fit"));
    let aux = aux_law.sample_columns(mc_samples, seed.derive("fit"));
    let fv = eval_samples(f, &z, &aux, mc_samples);
    let neg: Vec<Vec<f64>> = z.iter().map(|c| c.iter().map(|v| -v).collect()).collect();
    let fneg = eval_samples(f, &neg, &aux, mc_samples);
    let odd: Vec<f64> = fv.iter().zip(&fneg).map(|(a, b)| 0.5 * (a - b)).collect();
    let mut cross = vec![0.0; t];
    let mut cross_se = vec![0.0; t];
    for s in 0..t {
        let prod: Vec<f64> = odd.iter().zip(&z[s]).map(|(a, b)| a * b).collect();
        let (m, se) = mean_and_se(&prod);
        let scale = (mean_and_se(&fv.iter().map(|v| v * v).collect::<Vec<_>>()).0 * sigma_prev[(s, s)]).sqrt();
        if !m.is_finite() || (scale > 0.0 && se > 0.01 * scale) {
            return Err(Error::McVarianceTooHigh(format!(
                "E[f·Z_{}] has standard error {se:.3e} against scale {scale:.3e}",
                s + 1
            )));
        }
        cross[s] = m;
        cross_se[s] = se;
    }
    let (inv, singular) = symmetric_pinv(sigma_prev);
    if singular {
        log::warn!("singular Σ in divergence-free correction of {}; using the pseudo-inverse", f.name);
    }
    let beta: Vec<f64> = (0..t)
        .map(|r| (0..t).map(|c| inv[(r, c)] * cross[c]).sum())
        .collect();
    let inner = f.clone();
    let coeffs = beta.clone();
    let corrected = Nonlinearity {
        arity: f.arity.max(t),
        lipschitz: f.lipschitz + coeffs.iter().map(|b| b.abs()).sum::<f64>(),
        divergence_free: true,
        name: format!("{}⊥", f.name),
        eval: Arc::new(move |h: &[f64], a: &[f64]| {
            let mut v = inner.eval(h, a);
            for (b, zs) in coeffs.iter().zip(h) {
                v -= b * zs;
            }
            v
        }),
    };
    // orthogonality check on fresh draws
    let (z2, _) = gaussian_sample(sigma_prev, mc_samples, seed.derive("check"));
    let aux2 = aux_law.sample_columns(mc_samples, seed.derive("check"));
    let fh = eval_samples(&corrected, &z2, &aux2, mc_samples);
    let mut residual = vec![0.0; t];
    let mut residual_se = vec![0.0; t];
    for s in 0..t {
        let prod: Vec<f64> = fh.iter().zip(&z2[s]).map(|(a, b)| a * b).collect();
        let (m, se) = mean_and_se(&prod);
        residual[s] = m;
        residual_se[s] = se;
    }
    Ok((
        corrected,
        Correction {
            beta,
            cross,
            cross_se,
            residual,
            residual_se,
            singular,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateEvolution {
    pub omega: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub phi_se: DMatrix<f64>,
    pub sigma_se: DMatrix<f64>,
    pub mc_samples: usize,
    /// Some intermediate `Σ_t` had a clearly negative pivot that was clamped.
    pub clamped: bool,
}

/// Incremental state evolution with common random numbers across stages.
pub struct StateEvolutionBuilder {
    omega: DMatrix<f64>,
    samples: usize,
    g: Vec<Vec<f64>>,
    aux: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    fvals: Vec<Vec<f64>>,
    phi: DMatrix<f64>,
    sigma: DMatrix<f64>,
    phi_se: DMatrix<f64>,
    clamped: bool,
    seed: Seed,
}

impl StateEvolutionBuilder {
    pub fn new(omega: &DMatrix<f64>, aux_law: &AuxLaw, mc_samples: usize, seed: Seed) -> Result<Self> {
        let t = omega.nrows();
        if omega.ncols() != t {
            return Err(Error::dims(t, omega.ncols(), "Ω must be square"));
        }
        if (omega - omega.transpose()).abs().max() > 1e-10 * omega.abs().max().max(1.0) {
            return Err(Error::InvalidArgument("Ω must be symmetric".into()));
        }
        Ok(StateEvolutionBuilder {
            omega: omega.clone(),
            samples: mc_samples.max(2),
            g: Vec::new(),
            aux: aux_law.sample_columns(mc_samples.max(2), seed.derive("se-aux")),
            z: Vec::new(),
            fvals: Vec::new(),
            phi: DMatrix::zeros(t, t),
            sigma: DMatrix::zeros(t, t),
            phi_se: DMatrix::zeros(t, t),
            clamped: false,
            seed,
        })
    }

    /// Number of stages filled so far.
    pub fn len(&self) -> usize {
        self.fvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fvals.is_empty()
    }

    /// Leading `len × len` block of `Σ`.
    pub fn sigma_so_far(&self) -> DMatrix<f64> {
        let t = self.len();
        self.sigma.view((0, 0), (t, t)).into_owned()
    }

    /// Adds `f_{t+1}` and fills row/column `t+1` of `Φ` and `Σ`.
    pub fn push(&mut self, f: &Nonlinearity) -> Result<()> {
        let t = self.len();
        if t >= self.omega.nrows() {
            return Err(Error::InvalidArgument("more nonlinearities than Ω has rows".into()));
        }
        if f.arity > t {
            return Err(Error::InvalidArgument(format!(
                "{} reads {} iterates but only {t} exist",
                f.name, f.arity
            )));
        }
        let fv = eval_samples(f, &self.z, &self.aux, self.samples);
        if fv.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{} is not finite on the SE sample", f.name)));
        }
        self.fvals.push(fv);
        for s in 0..=t {
            let prod: Vec<f64> = self.fvals[s].iter().zip(&self.fvals[t]).map(|(a, b)| a * b).collect();
            let (m, se) = mean_and_se(&prod);
            self.phi[(s, t)] = m;
            self.phi[(t, s)] = m;
            self.phi_se[(s, t)] = se;
            self.phi_se[(t, s)] = se;
            let v = self.omega[(t, s)] * m;
            self.sigma[(s, t)] = v;
            self.sigma[(t, s)] = v;
        }
        // extend Z with component t+1 (leading Cholesky rows do not change)
        let block = self.sigma_so_far();
        let (l, clamped) = psd_cholesky(&block);
        self.clamped |= clamped;
        let gnew = gaussian_vec(self.samples, 1.0, &mut self.seed.derive("se-gauss").index(t as u64).rng());
        self.g.push(gnew);
        let mut zt = vec![0.0; self.samples];
        for j in 0..=t {
            let c = l[(t, j)];
            if c != 0.0 {
                for (zv, gv) in zt.iter_mut().zip(&self.g[j]) {
                    *zv += c * gv;
                }
            }
        }
        self.z.push(zt);
        Ok(())
    }

    pub fn finish(self) -> StateEvolution {
        let t = self.len();
        let omega = self.omega.view((0, 0), (t, t)).into_owned();
        let phi = self.phi.view((0, 0), (t, t)).into_owned();
        let phi_se = self.phi_se.view((0, 0), (t, t)).into_owned();
        let sigma = self.sigma.view((0, 0), (t, t)).into_owned();
        let sigma_se = DMatrix::from_fn(t, t, |i, j| omega[(i, j)].abs() * phi_se[(i, j)]);
        StateEvolution {
            omega,
            phi,
            sigma,
            phi_se,
            sigma_se,
            mc_samples: self.samples,
            clamped: self.clamped,
        }
    }
}

/// Monte Carlo state evolution for `f_1, …, f_T`.
pub fn state_evolution(
    omega: &DMatrix<f64>,
    f_list: &[Nonlinearity],
    aux_law: &AuxLaw,
    mc_samples: usize,
    seed: Seed,
) -> Result<StateEvolution> {
    if f_list.len() != omega.nrows() {
        return Err(Error::dims(omega.nrows(), f_list.len(), "nonlinearities vs Ω"));
    }
    for (t, f) in f_list.iter().enumerate() {
        if !f.divergence_free {
            return Err(Error::NotDivergenceFree(t + 1));
        }
    }
    let mut b = StateEvolutionBuilder::new(omega, aux_law, mc_samples, seed)?;
    for f in f_list {
        b.push(f)?;
    }
    Ok(b.finish())
}

/// Makes each raw `f_t` divergence-free against the state evolution of the
/// already corrected `f_1, …, f_{t−1}`, and returns the corrected list with
/// its state evolution.
pub fn correct_and_evolve(
    raw: &[Nonlinearity],
    omega: &DMatrix<f64>,
    aux_law: &AuxLaw,
    mc_samples: usize,
    seed: Seed,
) -> Result<(Vec<Nonlinearity>, Vec<Correction>, StateEvolution)> {
    if raw.len() != omega.nrows() {
        return Err(Error::dims(omega.nrows(), raw.len(), "nonlinearities vs Ω"));
    }
    let mut b = StateEvolutionBuilder::new(omega, aux_law, mc_samples, seed)?;
    let mut fixed = Vec::with_capacity(raw.len());
    let mut corrections = Vec::with_capacity(raw.len());
    for (t, f) in raw.iter().enumerate() {
        let (g, c) = divergence_free_correct(
            f,
            &b.sigma_so_far(),
            aux_law,
            mc_samples.max(10_000),
            seed.derive("correct").index(t as u64),
        )?;
        b.push(&g)?;
        fixed.push(g);
        corrections.push(c);
    }
    Ok((fixed, corrections, b.finish()))
}

/// Empirical Gram of VAMP iterates against the predicted `Σ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramComparison {
    #[serde(rename = "T")]
    pub t: usize,
    pub sigma: Vec<Vec<f64>>,
    pub empirical: Vec<Vec<f64>>,
    pub mc_se: Vec<Vec<f64>>,
}

impl GramComparison {
    pub fn new(se: &StateEvolution, iterates: &[Vec<f64>]) -> Self {
        let t = se.sigma.nrows();
        let rows = |m: &DMatrix<f64>| (0..t).map(|i| (0..t).map(|j| m[(i, j)]).collect()).collect();
        GramComparison {
            t,
            sigma: rows(&se.sigma),
            empirical: empirical_gram(iterates),
            mc_se: rows(&se.sigma_se),
        }
    }

    /// Largest `|Ĝ_{st} − Σ_{st}| / max(k·se_{st}, rel·√(Σ_ss Σ_tt))`;
    /// values ≤ 1 are within tolerance.
    pub fn worst_ratio(&self, k_se: f64, rel: f64) -> f64 {
        let mut worst = 0.0f64;
        for s in 0..self.t {
            for u in 0..self.t {
                let scale = (self.sigma[s][s].abs() * self.sigma[u][u].abs()).sqrt();
                let tol = (k_se * self.mc_se[s][u]).max(rel * scale).max(f64::MIN_POSITIVE);
                worst = worst.max((self.empirical[s][u] - self.sigma[s][u]).abs() / tol);
            }
        }
        worst
    }
}

/// Chebyshev interpolant of `√λ` on `[0, C²]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebyshevSqrt {
    pub degree: usize,
    pub c2: f64,
    coeffs: Vec<f64>,
}

impl ChebyshevSqrt {
    pub fn new(degree: usize, c2: f64) -> Result<Self> {
        if degree == 0 {
            return Err(Error::BadDegree(degree));
        }
        if !(c2 > 0.0) {
            return Err(Error::InvalidArgument(format!("C² must be positive, got {c2}")));
        }
        let n = degree + 1;
        let nodes: Vec<f64> = (0..n)
            .map(|j| (std::f64::consts::PI * (j as f64 + 0.5) / n as f64).cos())
            .collect();
        let fx: Vec<f64> = nodes.iter().map(|x| (c2 * (x + 1.0) / 2.0).sqrt()).collect();
        let mut coeffs: Vec<f64> = (0..n)
            .map(|m| {
                2.0 / n as f64
                    * (0..n)
                        .map(|j| fx[j] * (m as f64 * std::f64::consts::PI * (j as f64 + 0.5) / n as f64).cos())
                        .sum::<f64>()
            })
            .collect();
        coeffs[0] *= 0.5;
        Ok(ChebyshevSqrt { degree, c2, coeffs })
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        let x = 2.0 * lambda / self.c2 - 1.0;
        let (mut b1, mut b2) = (0.0, 0.0);
        for &c in self.coeffs.iter().skip(1).rev() {
            let b0 = c + 2.0 * x * b1 - b2;
            b2 = b1;
            b1 = b0;
        }
        self.coeffs[0] + x * b1 - b2
    }

    /// `Δ_k = sup |p_k(λ) − √λ|` on a uniform grid of 10⁴ points.
    pub fn delta(&self) -> f64 {
        (0..10_000)
            .map(|i| {
                let l = self.c2 * i as f64 / 9_999.0;
                (self.eval(l) - l.sqrt()).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `p_k(G)` for a symmetric operator `G` with spectrum in `[0, C²]` (Clenshaw).
    pub fn operator(&self, g: Op) -> Op {
        Arc::new(ChebyshevOperator {
            g,
            coeffs: self.coeffs.clone(),
            c2: self.c2,
        })
    }
}

#[derive(Debug)]
struct ChebyshevOperator {
    g: Op,
    coeffs: Vec<f64>,
    c2: f64,
}

impl ChebyshevOperator {
    // A = (2/C²)G − I
    fn shifted(&self, v: &[f64], out: &mut [f64]) {
        self.g.apply_into(v, out);
        let s = 2.0 / self.c2;
        for (o, x) in out.iter_mut().zip(v) {
            *o = s * *o - x;
        }
    }
}

impl LinearOperator for ChebyshevOperator {
    fn rows(&self) -> usize {
        self.g.rows()
    }
    fn cols(&self) -> usize {
        self.g.cols()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        let mut b1 = vec![0.0; n];
        let mut b2 = vec![0.0; n];
        let mut ab = vec![0.0; n];
        for &c in self.coeffs.iter().skip(1).rev() {
            self.shifted(&b1, &mut ab);
            for i in 0..n {
                let b0 = c * x[i] + 2.0 * ab[i] - b2[i];
                b2[i] = b1[i];
                b1[i] = b0;
            }
        }
        self.shifted(&b1, &mut ab);
        for i in 0..n {
            out[i] = self.coeffs[0] * x[i] + ab[i] - b2[i];
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        self.apply_into(y, out);
    }
    fn label(&self) -> String {
        format!("p_{}({})", self.coeffs.len() - 1, self.g.label())
    }
    fn fork_state(&self) -> Option<Op> {
        self.g.fork_state().map(|g| {
            Arc::new(ChebyshevOperator {
                g,
                coeffs: self.coeffs.clone(),
                c2: self.c2,
            }) as Op
        })
    }
}

/// Proximal iterates produced through the GFOM realization.
#[derive(Clone, Debug)]
pub struct ProxGfom {
    pub gamma: f64,
    pub degree: usize,
    /// `C` with `‖X‖ ≤ C`.
    pub c: f64,
    pub delta: f64,
    /// `z^{t,k}`, `t = 1..T`.
    pub z: Vec<Vec<f64>>,
    /// `β^{t,k} = η(z^{t,k}; γ)`.
    pub beta: Vec<Vec<f64>>,
    /// `(1 + (t−1)γ)Δ_k‖w‖`, a bound on `‖z^t − z^{t,k}‖`.
    pub error_bound: Vec<f64>,
}

/// Runs the proximal method as a GFOM driven by `[p_k(XᵀX), XᵀX, …, XᵀX]`
/// with auxiliary columns `[β⋆, w]`:
///
/// `z^{1,k} = XᵀXβ⋆ + p_k(XᵀX)w`,
/// `z^{t+1,k} = −γXᵀX η(z^{t,k}) + η(z^{t,k}) + γ z^{1,k}`.
pub fn implement_prox_gfom(
    inst: &LinearModelInstance,
    rho: &Regularizer,
    gamma: Option<f64>,
    degree: usize,
    iterations: usize,
    w: &[f64],
) -> Result<ProxGfom> {
    if degree == 0 {
        return Err(Error::BadDegree(degree));
    }
    if iterations == 0 {
        return Err(Error::InvalidArgument("iteration count must be ≥ 1".into()));
    }
    let n = inst.n();
    if w.len() != n {
        return Err(Error::dims(n, w.len(), "w"));
    }
    let gamma = match gamma {
        Some(g) => g,
        None => default_gamma(&inst.x)?,
    };
    if !(gamma > 0.0) {
        return Err(Error::BadGamma(gamma));
    }
    let c = match inst.x.known_op_norm {
        Some(v) => v,
        None => {
            let est = crate::transforms::op_norm(inst.x.op.as_ref(), 1e-10, 5000, inst.x.seed.derive("norm"))
                .or_else(|e| match e {
                    Error::NoConvergence { estimate, .. } => Ok(estimate),
                    other => Err(other),
                })?;
            est * 1.01
        }
    };
    let cheb = ChebyshevSqrt::new(degree, c * c)?;
    let delta = cheb.delta();
    let g: Op = Arc::new(Gram::new(inst.x.op.clone()));
    let mut operators: Vec<Op> = vec![cheb.operator(g.clone())];
    let mut f = vec![Nonlinearity::aux_column(0, 1)];
    let mut eta: Vec<Option<Nonlinearity>> = vec![None];
    // second GFOM iterate is z^{1,k}
    operators.push(g.clone());
    f.push(Nonlinearity::aux_column(1, 0));
    eta.push(Some(Nonlinearity::new("z0", 1, 1.0, |h, _| h[0])));
    for t in 2..=iterations {
        let r1 = rho.clone();
        let r2 = rho.clone();
        operators.push(g.clone());
        f.push(Nonlinearity::new("−γη", t, gamma, move |h, _| {
            -gamma * prox(&r1, h[h.len() - 1], gamma).unwrap_or(f64::NAN)
        }));
        eta.push(Some(Nonlinearity::new("η+γz1", t, 1.0 + gamma, move |h, _| {
            prox(&r2, h[h.len() - 1], gamma).unwrap_or(f64::NAN) + gamma * h[1]
        })));
    }
    let spec = DynamicsSpec {
        operators,
        f,
        eta,
        aux: vec![inst.beta_star.clone(), w.to_vec()],
    };
    let mut iterates = run_gfom(&spec)?;
    iterates.remove(0);
    let beta = iterates
        .iter()
        .map(|z| crate::regularization::prox_vector(rho, z, gamma))
        .collect::<Result<Vec<_>>>()?;
    let wn = norm(w);
    let error_bound = (1..=iterations)
        .map(|t| (1.0 + (t as f64 - 1.0) * gamma) * delta * wn)
        .collect();
    Ok(ProxGfom {
        gamma,
        degree,
        c,
        delta,
        z: iterates,
        beta,
        error_bound,
    })
}

/// Largest `N` for which [`coupled_noise`] forms `XᵀX` densely.
pub const COUPLED_NOISE_LIMIT: usize = 4096;

/// A `w ~ N(0, σ²I)` with `√(XᵀX) w = Xᵀε`, so that the GFOM realization and
/// the direct proximal method see the same noise: the range component is
/// `V₊Λ₊^{−1/2}V₊ᵀXᵀε` and the null-space component is fresh Gaussian.
pub fn coupled_noise(inst: &LinearModelInstance, seed: Seed) -> Result<Vec<f64>> {
    let n = inst.n();
    if n > COUPLED_NOISE_LIMIT {
        return Err(Error::ExplicitTooLarge {
            n,
            limit: COUPLED_NOISE_LIMIT,
        });
    }
    let xd = to_dense(inst.x.op.as_ref());
    let gram = xd.transpose() * &xd;
    let eig = SymmetricEigen::new(0.5 * (&gram + gram.transpose()));
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    let cut = 1e-10 * top.max(1e-300);
    let xte = inst.x.op.adjoint(&inst.epsilon);
    let fresh = gaussian_vec(n, inst.noise_sigma, &mut seed.rng());
    let mut w = vec![0.0; n];
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let coef = if lam > cut {
            v.iter().zip(&xte).map(|(a, b)| a * b).sum::<f64>() / lam.sqrt()
        } else {
            v.iter().zip(&fresh).map(|(a, b)| a * b).sum::<f64>()
        };
        for (wi, vi) in w.iter_mut().zip(v.iter()) {
            *wi += coef * vi;
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::{sample_haar, sample_spike_ortho, spike_lambda, HaarMode, SpikeKind};
    use crate::linalg::{max_abs_diff, mean};
    use crate::solver::{prox_grad, sample_prior, Prior, ProxGradOptions};
    use crate::transforms::{to_dense, Identity};
    use crate::universality::empirical_moment;

    #[test]
    fn semirandom_conjugation() {
        let id: Op = Arc::new(Identity::new(32));
        let m = build_semirandom(&[id], Seed(1)).unwrap();
        let v = gaussian_vec(32, 1.0, &mut Seed(2).rng());
        assert!(max_abs_diff(&m[0].forward(&v), &v) < 1e-15);

        let x = sample_spike_ortho(128, SpikeKind::Dct, Seed(3)).unwrap();
        let (psis, _) = centered_powers(&x, &[1]).unwrap();
        let g: Op = Arc::new(Gram::new(x.op.clone()));
        let a = build_semirandom(std::slice::from_ref(&g), Seed(4)).unwrap();
        let b = build_semirandom(std::slice::from_ref(&g), Seed(5)).unwrap();
        assert!(max_abs_diff(&a[0].forward(&v.iter().cycle().take(256).copied().collect::<Vec<_>>()),
                             &b[0].forward(&v.iter().cycle().take(256).copied().collect::<Vec<_>>())) > 1e-6);
        let t0 = empirical_moment(&Gram::new(x.op.clone()), 1, 1, Seed(0)).unwrap();
        let dense = to_dense(a[0].as_ref());
        assert!((dense.trace() / 256.0 - t0).abs() < 1e-12);
        assert_eq!(psis.len(), 1);
    }

    #[test]
    fn gfom_trivial_cases() {
        let n = 16;
        let aux = vec![(0..n).map(|i| i as f64).collect::<Vec<_>>()];
        let spec = DynamicsSpec {
            operators: vec![Arc::new(Identity::new(n))],
            f: vec![Nonlinearity::aux_column(0, 0)],
            eta: vec![None],
            aux: aux.clone(),
        };
        assert_eq!(run_gfom(&spec).unwrap()[0], aux[0]);

        let ops: Vec<Op> = (0..3).map(|_| Arc::new(Identity::new(n)) as Op).collect();
        let spec = DynamicsSpec {
            operators: ops.clone(),
            f: (0..3).map(Nonlinearity::zero).collect(),
            eta: (0..3).map(|t| Some(Nonlinearity::constant(t, 1.0))).collect(),
            aux: vec![],
        };
        for z in run_gfom(&spec).unwrap() {
            assert!(z.iter().all(|v| *v == 1.0));
        }
        assert!(matches!(run_vamp(&spec), Err(Error::InvalidArgument(_))));

        let spec = DynamicsSpec {
            operators: ops,
            f: (0..3).map(Nonlinearity::zero).collect(),
            eta: vec![None, None, None],
            aux: vec![],
        };
        for z in run_vamp(&spec).unwrap() {
            assert!(z.iter().all(|v| *v == 0.0));
        }
        let bad = DynamicsSpec {
            f: vec![
                Nonlinearity::zero(0),
                Nonlinearity::new("id", 1, 1.0, |h, _| h[0]),
                Nonlinearity::zero(2),
            ],
            ..spec
        };
        assert!(matches!(run_vamp(&bad), Err(Error::NotDivergenceFree(2))));
    }

    #[test]
    fn correction_examples() {
        let aux = AuxLaw::new(vec![ScalarLaw::Discrete {
            atoms: vec![-1.0, 1.0],
            probs: vec![0.5, 0.5],
        }]);
        let one = DMatrix::from_element(1, 1, 1.0);
        let id = Nonlinearity::new("z", 1, 1.0, |h, _| h[0]);
        let (g, c) = divergence_free_correct(&id, &one, &aux, 100_000, Seed(1)).unwrap();
        assert!((c.beta[0] - 1.0).abs() < 3.0 * c.cross_se[0]);
        assert!(g.eval(&[2.5], &[1.0]).abs() < 2.5 * 3.0 * c.cross_se[0]);

        let cube = Nonlinearity::new("z³", 1, 1.0, |h, _| h[0].powi(3));
        let (_, c) = divergence_free_correct(&cube, &one, &aux, 200_000, Seed(2)).unwrap();
        assert!((c.beta[0] - 3.0).abs() < 3.0 * c.cross_se[0], "{:?}", c);
        assert!(c.residual[0].abs() <= 3.0 * c.residual_se[0]);

        let aonly = Nonlinearity::new("a", 1, 0.0, |_, a| a[0]);
        let (_, c) = divergence_free_correct(&aonly, &one, &aux, 100_000, Seed(3)).unwrap();
        // antithetic pairs cancel anything even in z exactly
        assert_eq!(c.beta[0], 0.0);

        // singular Σ is handled
        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f2 = Nonlinearity::new("z1+z2", 2, 2.0, |h, _| (h[0] + h[1]).tanh());
        let (_, c) = divergence_free_correct(&f2, &sing, &aux, 50_000, Seed(4)).unwrap();
        assert!(c.singular);
        for s in 0..2 {
            assert!(c.residual[s].abs() <= 3.0 * c.residual_se[s] + 1e-12);
        }
        assert!(divergence_free_correct(&id, &one, &aux, 100, Seed(1)).is_err());
    }

    #[test]
    fn state_evolution_examples() {
        let aux = AuxLaw::new(vec![ScalarLaw::Discrete {
            atoms: vec![0.0, 2.0],
            probs: vec![0.75, 0.25],
        }]);
        let omega = DMatrix::from_element(1, 1, 0.3);
        let f1 = Nonlinearity::aux_column(0, 0);
        let se = state_evolution(&omega, &[f1], &aux, 100_000, Seed(1)).unwrap();
        // E[A²] = 1
        assert!((se.sigma[(0, 0)] - 0.3).abs() < 3.0 * se.sigma_se[(0, 0)] + 1e-12);

        let zero = state_evolution(
            &DMatrix::identity(2, 2),
            &[Nonlinearity::zero(0), Nonlinearity::zero(1)],
            &aux,
            1000,
            Seed(1),
        )
        .unwrap();
        assert_eq!(zero.sigma, DMatrix::zeros(2, 2));

        // Hermite orthogonality: f₁ = a with E[a²] = 1, f₂ = (z₁² − 1)/√2
        let unit = AuxLaw::new(vec![ScalarLaw::Discrete {
            atoms: vec![-1.0, 1.0],
            probs: vec![0.5, 0.5],
        }]);
        let f2 = Nonlinearity::new("H2", 1, 1.0, |h, _| (h[0] * h[0] - 1.0) / 2f64.sqrt()).assume_divergence_free();
        let se = state_evolution(
            &DMatrix::identity(2, 2),
            &[Nonlinearity::aux_column(0, 0), f2],
            &unit,
            200_000,
            Seed(2),
        )
        .unwrap();
        assert!((se.sigma[(0, 0)] - 1.0).abs() < 1e-12);
        assert_eq!(se.sigma[(0, 1)], 0.0);
        assert!((se.phi[(0, 1)]).abs() < 3.0 * se.phi_se[(0, 1)]);
        assert!((se.phi[(1, 1)] - 1.0).abs() < 3.0 * se.phi_se[(1, 1)]);
        let not_df = Nonlinearity::new("z", 1, 1.0, |h, _| h[0]);
        assert!(matches!(
            state_evolution(&DMatrix::identity(2, 2), &[Nonlinearity::zero(0), not_df], &unit, 1000, Seed(1)),
            Err(Error::NotDivergenceFree(2))
        ));
    }

    #[test]
    fn vamp_first_iterate_second_moment() {
        let n = 1 << 12;
        let x = sample_haar(&spike_lambda(n / 2, n), Seed(5), HaarMode::Sequential).unwrap();
        let (psis, _) = centered_powers(&x, &[1]).unwrap();
        let ms = build_semirandom(&psis, Seed(6)).unwrap();
        let signal = sample_prior(&Prior::Custom { atoms: vec![-1.0, 1.0], probs: vec![0.5, 0.5] }, n, Seed(7)).unwrap();
        let spec = DynamicsSpec {
            operators: ms,
            f: vec![Nonlinearity::aux_column(0, 0)],
            eta: vec![None],
            aux: vec![signal],
        };
        let z = run_vamp(&spec).unwrap();
        let m2 = mean(&z[0].iter().map(|v| v * v).collect::<Vec<_>>());
        // Ω₁₁ = Tr((P − I/2)²)/N = 1/4
        assert!((m2 - 0.25).abs() / 0.25 < 0.05, "{m2}");
    }

    #[test]
    fn chebyshev_sqrt() {
        assert!(matches!(ChebyshevSqrt::new(0, 1.0), Err(Error::BadDegree(0))));
        let mut last = f64::INFINITY;
        for k in [5, 10, 20, 40] {
            let p = ChebyshevSqrt::new(k, 2.0).unwrap();
            let d = p.delta();
            assert!(d < last);
            last = d;
        }
        assert!(last < 0.03);
    }

    fn small_instance(sigma: f64, seed: u64) -> LinearModelInstance {
        let x = sample_spike_ortho(128, SpikeKind::Dct, Seed(seed)).unwrap();
        let beta = sample_prior(&Prior::FivePoint, 256, Seed(seed + 1)).unwrap();
        LinearModelInstance::new(x, beta, sigma, Seed(seed + 2)).unwrap()
    }

    #[test]
    fn polynomial_square_root_matches_dense() {
        let inst = small_instance(1.0, 10);
        let p = ChebyshevSqrt::new(40, 1.0).unwrap();
        let g: Op = Arc::new(Gram::new(inst.x.op.clone()));
        let w = gaussian_vec(256, 1.0, &mut Seed(1).rng());
        let pw = p.operator(g.clone()).forward(&w);
        let gd = to_dense(g.as_ref());
        let eig = SymmetricEigen::new(gd);
        let sq = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()))
            * eig.eigenvectors.transpose();
        let exact = &sq * nalgebra::DVector::from_vec(w.clone());
        let err = norm(&pw.iter().zip(exact.iter()).map(|(a, b)| a - b).collect::<Vec<_>>()) / 16.0;
        assert!(err < 10.0 * p.delta(), "{err} {}", p.delta());
    }

    #[test]
    fn noiseless_first_iterate_is_degree_free() {
        let inst = small_instance(0.0, 20);
        let rho = Regularizer::elastic_net(0.5, 5e-4);
        let w = vec![0.0; 256];
        let a = implement_prox_gfom(&inst, &rho, None, 5, 3, &w).unwrap();
        let b = implement_prox_gfom(&inst, &rho, None, 40, 3, &w).unwrap();
        assert!(max_abs_diff(&a.z[0], &b.z[0]) < 1e-12);
    }

    #[test]
    fn gfom_prox_matches_prox_grad() {
        let inst = small_instance(1.0, 30);
        let rho = Regularizer::elastic_net(1.0, 1e-3);
        let w = coupled_noise(&inst, Seed(9)).unwrap();
        // √(XᵀX)w reproduces Xᵀε
        let direct = prox_grad(&inst, &rho, &ProxGradOptions { keep_iterates: true, ..ProxGradOptions::fixed(20) }).unwrap();
        let mut gaps = Vec::new();
        for k in [5, 10, 20, 40] {
            let r = implement_prox_gfom(&inst, &rho, None, k, 20, &w).unwrap();
            let gap = r
                .beta
                .iter()
                .zip(&direct.iterates)
                .map(|(a, b)| max_abs_diff(a, b))
                .fold(0.0, f64::max);
            let bound = r.error_bound.last().copied().unwrap();
            assert!(gap <= bound + 1e-9, "k={k}: {gap} > {bound}");
            gaps.push(gap);
        }
        assert!(gaps.windows(2).all(|p| p[1] < p[0]), "{gaps:?}");
    }
}
