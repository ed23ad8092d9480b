//! Finite-N diagnostics for universality-class membership.
//!
//! Moments `Tr[(JᵀJ)^k]/N` and the flatness `‖(JᵀJ)^k − m̂_k I‖∞` are
//! estimated from columns (exact mode) or Rademacher probes plus sampled
//! columns (large `N`). Targets come from the parametric spectral measures,
//! with the Marchenko–Pastur convolution handled through its Stieltjes
//! transform.

use num_complex::Complex64;
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensembles::{MaskDistribution, SensingOperator, SpectralMeasure};
use crate::error::{Error, Result};
use crate::linalg::rademacher_vec;
use crate::rng::Seed;
use crate::transforms::{op_norm, LinearOperator, DEFAULT_NORM_MAX_ITER, DEFAULT_NORM_TOL};

/// Exact (basis-vector) estimation is used up to this dimension.
pub const EXACT_LIMIT: usize = 4096;
pub const DEFAULT_PROBES: usize = 64;
pub const DEFAULT_SAMPLE_COLS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub exact_limit: usize,
    pub probes: usize,
    pub sample_cols: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            exact_limit: EXACT_LIMIT,
            probes: DEFAULT_PROBES,
            sample_cols: DEFAULT_SAMPLE_COLS,
        }
    }
}

/// Moment and deviation estimates for a set of powers.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSweep {
    pub ks: Vec<usize>,
    pub empirical: Vec<f64>,
    /// Standard error of `empirical` (zero in exact mode).
    pub std_err: Vec<f64>,
    /// Entrywise deviation; a lower bound when columns were sampled.
    pub deviation: Vec<f64>,
    pub exact: bool,
}

fn is_stateful(op: &dyn LinearOperator) -> bool {
    op.fork_state().is_some()
}

/// Maps `f` over `0..count`, in parallel unless the operator carries sampling
/// state (whose realization would then depend on scheduling).
fn map_indexed<T, F>(op: &dyn LinearOperator, count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    if is_stateful(op) {
        (0..count).map(f).collect()
    } else {
        (0..count).into_par_iter().map(f).collect()
    }
}

/// `[x, (JᵀJ)x, …, (JᵀJ)^depth x]`
fn gram_chain(j: &dyn LinearOperator, x: Vec<f64>, depth: usize) -> Vec<Vec<f64>> {
    let mut chain = Vec::with_capacity(depth + 1);
    let mut tmp = vec![0.0; j.rows()];
    chain.push(x);
    for d in 0..depth {
        let mut next = vec![0.0; j.cols()];
        j.apply_into(&chain[d], &mut tmp);
        j.adjoint_into(&tmp, &mut next);
        chain.push(next);
    }
    chain
}

fn quad_forms(chain: &[Vec<f64>], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| crate::linalg::dot(&chain[k / 2], &chain[k.div_ceil(2)]))
        .collect()
}

struct Column {
    diag: Vec<f64>,
    off: Vec<f64>,
}

fn column_stats(j: &dyn LinearOperator, i: usize, ks: &[usize], kmax: usize) -> Column {
    let n = j.cols();
    let mut e = vec![0.0; n];
    e[i] = 1.0;
    let chain = gram_chain(j, e, kmax);
    let mut diag = Vec::with_capacity(ks.len());
    let mut off = Vec::with_capacity(ks.len());
    for &k in ks {
        let v = &chain[k];
        diag.push(v[i]);
        let m = v
            .iter()
            .enumerate()
            .filter(|(r, _)| *r != i)
            .fold(0.0f64, |m, (_, x)| m.max(x.abs()));
        off.push(m);
    }
    Column { diag, off }
}

fn validate_ks(ks: &[usize]) -> Result<usize> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("powers k must be ≥ 1".into()));
    }
    Ok(*ks.iter().max().unwrap())
}

/// Estimates `Tr[(JᵀJ)^k]/N` and `‖(JᵀJ)^k − m̂_k I‖∞` for every `k` in one pass.
pub fn moment_sweep(
    j: &dyn LinearOperator,
    ks: &[usize],
    opts: &SweepOptions,
    seed: Seed,
) -> Result<MomentSweep> {
    let kmax = validate_ks(ks)?;
    let n = j.cols();
    let nk = ks.len();
    if n <= opts.exact_limit {
        let cols = map_indexed(j, n, |i| column_stats(j, i, ks, kmax));
        let mut empirical = vec![0.0; nk];
        for c in &cols {
            for (e, d) in empirical.iter_mut().zip(&c.diag) {
                *e += d;
            }
        }
        for e in &mut empirical {
            *e /= n as f64;
        }
        let deviation = finish_deviation(&cols, &empirical);
        return Ok(MomentSweep {
            ks: ks.to_vec(),
            empirical,
            std_err: vec![0.0; nk],
            deviation,
            exact: true,
        });
    }

    let probes = opts.probes.max(1);
    let pseed = seed.derive("probes");
    let estimates: Vec<Vec<f64>> = map_indexed(j, probes, |p| {
        let z = rademacher_vec(n, &mut pseed.index(p as u64).rng());
        let chain = gram_chain(j, z, kmax.div_ceil(2));
        quad_forms(&chain, ks)
            .into_iter()
            .map(|q| q / n as f64)
            .collect()
    });
    let mut empirical = vec![0.0; nk];
    let mut std_err = vec![0.0; nk];
    for (t, (e, s)) in empirical.iter_mut().zip(std_err.iter_mut()).enumerate() {
        let vals: Vec<f64> = estimates.iter().map(|v| v[t]).collect();
        *e = crate::linalg::mean(&vals);
        *s = if probes > 1 {
            (crate::linalg::variance(&vals) / probes as f64).sqrt()
        } else {
            0.0
        };
    }
    let picked = sampled_columns(n, opts.sample_cols, seed);
    let cols = map_indexed(j, picked.len(), |c| column_stats(j, picked[c], ks, kmax));
    let deviation = finish_deviation(&cols, &empirical);
    Ok(MomentSweep {
        ks: ks.to_vec(),
        empirical,
        std_err,
        deviation,
        exact: false,
    })
}

fn sampled_columns(n: usize, count: usize, seed: Seed) -> Vec<usize> {
    let count = count.clamp(1, n);
    let mut idx = sample_indices(&mut seed.derive("columns").rng(), n, count).into_vec();
    idx.sort_unstable();
    idx
}

fn finish_deviation(cols: &[Column], empirical: &[f64]) -> Vec<f64> {
    (0..empirical.len())
        .map(|t| {
            cols.iter().fold(0.0f64, |m, c| {
                m.max(c.off[t]).max((c.diag[t] - empirical[t]).abs())
            })
        })
        .collect()
}

/// `Tr[(JᵀJ)^k]/N`: exact over the basis when `N ≤ 4096`, otherwise a
/// Hutchinson estimate from `probes` Rademacher vectors.
pub fn empirical_moment(j: &dyn LinearOperator, k: usize, probes: usize, seed: Seed) -> Result<f64> {
    let (m, _) = empirical_moment_with_se(j, k, probes, seed)?;
    Ok(m)
}

/// As [`empirical_moment`], also returning the standard error of the estimate.
pub fn empirical_moment_with_se(
    j: &dyn LinearOperator,
    k: usize,
    probes: usize,
    seed: Seed,
) -> Result<(f64, f64)> {
    validate_ks(&[k])?;
    let n = j.cols();
    let opts = SweepOptions {
        probes,
        ..SweepOptions::default()
    };
    if n <= opts.exact_limit {
        let vals = map_indexed(j, n, |i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let chain = gram_chain(j, e, k.div_ceil(2));
            quad_forms(&chain, &[k])[0]
        });
        return Ok((vals.iter().sum::<f64>() / n as f64, 0.0));
    }
    let pseed = seed.derive("probes");
    let probes = probes.max(1);
    let vals = map_indexed(j, probes, |p| {
        let z = rademacher_vec(n, &mut pseed.index(p as u64).rng());
        let chain = gram_chain(j, z, k.div_ceil(2));
        quad_forms(&chain, &[k])[0] / n as f64
    });
    let m = crate::linalg::mean(&vals);
    let se = if probes > 1 {
        (crate::linalg::variance(&vals) / probes as f64).sqrt()
    } else {
        0.0
    };
    Ok((m, se))
}

/// `‖(JᵀJ)^k − m̂_k I‖∞` over all columns when `N ≤ 4096`, otherwise over
/// `sample_cols` uniformly chosen columns (a lower bound).
pub fn deviation_inf_norm(j: &dyn LinearOperator, k: usize, sample_cols: usize, seed: Seed) -> Result<f64> {
    let opts = SweepOptions {
        sample_cols,
        ..SweepOptions::default()
    };
    Ok(moment_sweep(j, &[k], &opts, seed)?.deviation[0])
}

/// `E[(Σ_{ℓ≤L} D_ℓ²)^k]` by binomial convolution of the even moments of `D`.
fn mask_r_moment(l: usize, dist: &MaskDistribution, k: usize, mc_samples: usize, seed: Seed) -> f64 {
    let a: Vec<f64> = (0..=k as u32)
        .map(|j| dist.even_moment(j, mc_samples, seed))
        .collect();
    let mut binom = vec![vec![1.0f64; k + 1]; k + 1];
    for n in 0..=k {
        for r in 1..n {
            binom[n][r] = binom[n - 1][r - 1] + binom[n - 1][r];
        }
    }
    // acc[j] = E[(D_1² + … + D_ℓ²)^j]
    let mut acc = a.clone();
    for _ in 1..l {
        let mut next = vec![0.0; k + 1];
        for (j, nj) in next.iter_mut().enumerate() {
            *nj = (0..=j).map(|r| binom[j][r] * acc[r] * a[j - r]).sum();
        }
        acc = next;
    }
    acc[k]
}

fn atoms_of(pi: &SpectralMeasure) -> Result<(Vec<f64>, Vec<f64>)> {
    match pi {
        SpectralMeasure::Bernoulli { alpha } => Ok((vec![0.0, 1.0], vec![1.0 - alpha, *alpha])),
        SpectralMeasure::Empirical { atoms, weights } => Ok((atoms.clone(), weights.clone())),
        other => Err(Error::UnsupportedKind(format!(
            "{} as the input of a Marchenko–Pastur convolution",
            other.kind()
        ))),
    }
}

/// `∫λ^k μ(dλ)`.
pub fn target_moment(mu: &SpectralMeasure, k: usize, mc_samples: usize, seed: Seed) -> Result<f64> {
    if k == 0 {
        return Ok(1.0);
    }
    match mu {
        SpectralMeasure::Bernoulli { alpha } => Ok(*alpha),
        SpectralMeasure::Mask { l, dist } => {
            if *l < 1 {
                return Err(Error::InvalidL(*l));
            }
            Ok(mask_r_moment(*l, dist, k, mc_samples, seed) / *l as f64)
        }
        SpectralMeasure::Empirical { atoms, weights } => Ok(atoms
            .iter()
            .zip(weights)
            .map(|(a, w)| w * a.powi(k as i32))
            .sum()),
        SpectralMeasure::FreeMpConvolution { pi, alpha } => {
            Ok(mp_convolution_moments(pi, *alpha, k)?[k - 1])
        }
    }
}

pub const STIELTJES_TOL: f64 = 1e-12;
pub const STIELTJES_MAX_ITER: usize = 100_000;

/// Stieltjes transform of `π ⊠ MP_α` at `z ∈ C₊`: the solution in `C₊` of
/// `1/m = −z + α∫λ/(1 + λm) π(dλ)`, by damped fixed-point iteration from `m = i`.
pub fn stieltjes_mp_convolution(
    pi: &SpectralMeasure,
    alpha: f64,
    z: Complex64,
    tol: f64,
    max_iter: usize,
) -> Result<Complex64> {
    if z.im <= 0.0 {
        return Err(Error::InvalidArgument(format!("Im z must be positive, got {z}")));
    }
    let (atoms, weights) = atoms_of(pi)?;
    stieltjes_atoms(&atoms, &weights, alpha, z, tol, max_iter)
}

fn stieltjes_atoms(
    atoms: &[f64],
    weights: &[f64],
    alpha: f64,
    z: Complex64,
    tol: f64,
    max_iter: usize,
) -> Result<Complex64> {
    let rhs = |m: Complex64| -> Complex64 {
        let s: Complex64 = atoms
            .iter()
            .zip(weights)
            .map(|(&l, &w)| w * l / (1.0 + l * m))
            .sum();
        -z + alpha * s
    };
    let mut m = Complex64::new(0.0, 1.0);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let r = rhs(m);
        residual = (1.0 / m - r).norm();
        if residual < tol {
            return Ok(m);
        }
        let next = 0.5 * m + 0.5 / r;
        m = if next.im > 0.0 { next } else { Complex64::new(next.re, 1e-300) };
    }
    Err(Error::NoConvergence {
        estimate: residual,
        iterations: max_iter,
    })
}

/// Moments `1..=kmax` of `π ⊠ MP_α` from a contour integral of the Stieltjes
/// transform on a circle enclosing the support.
pub fn mp_convolution_moments(pi: &SpectralMeasure, alpha: f64, kmax: usize) -> Result<Vec<f64>> {
    let (atoms, weights) = atoms_of(pi)?;
    let top = atoms.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let radius = 2.0 * top * (1.0 + alpha.sqrt()).powi(2) + 1.0;
    // midpoint angles on the upper half circle; the lower half follows by conjugation
    let half = 512usize;
    let total = 2 * half;
    let mut sums = vec![Complex64::new(0.0, 0.0); kmax];
    for j in 0..half {
        let theta = std::f64::consts::PI * (j as f64 + 0.5) / half as f64;
        let z = Complex64::from_polar(radius, theta);
        let m = stieltjes_atoms(&atoms, &weights, alpha, z, 1e-14, STIELTJES_MAX_ITER)?;
        let mut zp = z * z;
        for s in sums.iter_mut() {
            // z^{k+1} m(z) plus its conjugate partner
            let v = zp * m;
            *s += v + v.conj();
            zp *= z;
        }
    }
    Ok(sums.iter().map(|s| -s.re / total as f64).collect())
}

/// Tolerance profile `tol_moment = c₁N^{−1/2}·max(1, |m_k|)`,
/// `tol_dev = c₂N^{−1/2+ε₀}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TolProfile {
    pub c1: f64,
    pub c2: f64,
    pub eps0: f64,
    /// Standard errors added to the moment tolerance for sampled estimates.
    pub se_mult: f64,
}

impl Default for TolProfile {
    fn default() -> Self {
        TolProfile {
            c1: 10.0,
            c2: 10.0,
            eps0: 0.1,
            se_mult: 3.0,
        }
    }
}

impl TolProfile {
    pub fn tol_moment(&self, n: usize, target: f64) -> f64 {
        self.c1 * (n as f64).powf(-0.5) * target.abs().max(1.0)
    }
    pub fn tol_dev(&self, n: usize) -> f64 {
        self.c2 * (n as f64).powf(-0.5 + self.eps0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub k: usize,
    pub empirical: f64,
    pub target: f64,
    pub deviation: f64,
    pub std_err: f64,
    pub tol_moment: f64,
    pub tol_dev: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub ensemble: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub op_norm: f64,
    pub moments: Vec<MomentRow>,
    pub pass: bool,
    /// Construction ends in an independent random sign diagonal.
    pub sign_invariant: bool,
    /// Estimates use every column (otherwise probes and sampled columns).
    pub exact: bool,
}

pub const DEFAULT_KS: [usize; 6] = [1, 2, 3, 4, 5, 6];

/// Empirical moments and flatness of `XᵀX` against the moments of `mu`.
pub fn class_report(
    x: &SensingOperator,
    mu: &SpectralMeasure,
    ks: &[usize],
    tol: &TolProfile,
    opts: &SweepOptions,
    seed: Seed,
) -> Result<ClassReport> {
    let n = x.cols();
    let norm = match op_norm(x.op.as_ref(), DEFAULT_NORM_TOL, DEFAULT_NORM_MAX_ITER, seed.derive("norm")) {
        Ok(v) => v,
        Err(Error::NoConvergence { estimate, .. }) => estimate,
        Err(e) => return Err(e),
    };
    let sweep = moment_sweep(x.op.as_ref(), ks, opts, seed.derive("sweep"))?;
    let mut rows = Vec::with_capacity(ks.len());
    for (t, &k) in ks.iter().enumerate() {
        let target = target_moment(mu, k, 1_000_000, seed.derive("target"))?;
        let tol_moment = tol.tol_moment(n, target) + tol.se_mult * sweep.std_err[t];
        let tol_dev = tol.tol_dev(n);
        let empirical = sweep.empirical[t];
        let deviation = sweep.deviation[t];
        let pass = (empirical - target).abs() <= tol_moment && deviation <= tol_dev;
        rows.push(MomentRow {
            k,
            empirical,
            target,
            deviation,
            std_err: sweep.std_err[t],
            tol_moment,
            tol_dev,
            pass,
        });
    }
    Ok(ClassReport {
        ensemble: x.ensemble.to_string(),
        n,
        m: x.rows(),
        op_norm: norm,
        pass: rows.iter().all(|r| r.pass),
        moments: rows,
        sign_invariant: x.sign_invariant,
        exact: sweep.exact,
    })
}

/// Product subset pair `(B, B′)`; `Ψ_B = Ψ_{b_|B|} ⋯ Ψ_{b_1}`.
pub type SubsetPair = (Vec<usize>, Vec<usize>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductCheck {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub omega: f64,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiRandomReport {
    #[serde(rename = "N")]
    pub n: usize,
    /// `Ω̂_{ij} = Tr(Ψ_iΨ_jᵀ)/N`
    pub omega: Vec<Vec<f64>>,
    /// `‖Ψ_iΨ_jᵀ − Ω̂_{ij}I‖∞`
    pub pair_deviation: Vec<Vec<f64>>,
    /// `max_{ab}|(Ψ_i)_{ab}|`
    pub entry_max: Vec<f64>,
    pub products: Vec<ProductCheck>,
    pub exact: bool,
    pub omega_min_eigenvalue: f64,
}

fn apply_word(psis: &[&dyn LinearOperator], word: &[usize], x: &[f64], adjoint: bool) -> Vec<f64> {
    let mut v = x.to_vec();
    let mut out = vec![0.0; x.len()];
    if adjoint {
        // (Ψ_{b_n} ⋯ Ψ_{b_1})ᵀ = Ψ_{b_1}ᵀ ⋯ Ψ_{b_n}ᵀ
        for &b in word.iter().rev() {
            psis[b].adjoint_into(&v, &mut out);
            std::mem::swap(&mut v, &mut out);
        }
    } else {
        for &b in word {
            psis[b].apply_into(&v, &mut out);
            std::mem::swap(&mut v, &mut out);
        }
    }
    v
}

/// Semi-random diagnostics for square `Ψ_1, …, Ψ_m`, including optional
/// product-subset pairs.
pub fn semirandom_report(
    psis: &[&dyn LinearOperator],
    products: &[SubsetPair],
    sample_cols: usize,
    seed: Seed,
) -> Result<SemiRandomReport> {
    if psis.is_empty() {
        return Err(Error::InvalidArgument("no matrices given".into()));
    }
    let n = psis[0].cols();
    for p in psis {
        if p.rows() != n || p.cols() != n {
            return Err(Error::dims(n, p.rows().max(p.cols()), "semi-random Ψ must be N×N"));
        }
    }
    for (b, bp) in products {
        if b.iter().chain(bp).any(|&i| i >= psis.len()) {
            return Err(Error::InvalidArgument("product subset index out of range".into()));
        }
    }
    let q = psis.len();
    // words: singletons first, then the requested products
    let mut words: Vec<Vec<usize>> = (0..q).map(|i| vec![i]).collect();
    let mut pair_words: Vec<(usize, usize)> = Vec::new();
    for i in 0..q {
        for j in 0..q {
            pair_words.push((i, j));
        }
    }
    for (b, bp) in products {
        let wi = words.len();
        words.push(b.clone());
        words.push(bp.clone());
        pair_words.push((wi, wi + 1));
    }
    let exact = n <= EXACT_LIMIT;
    let cols: Vec<usize> = if exact {
        (0..n).collect()
    } else {
        sampled_columns(n, sample_cols, seed)
    };
    let stateful = psis.iter().any(|p| is_stateful(*p));
    let work = |c: usize| {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        // Ψ_Wᵀ e_c for each word, then Ψ_W (Ψ_Vᵀ e_c) for each pair
        let adj: Vec<Vec<f64>> = words.iter().map(|w| apply_word(psis, w, &e, true)).collect();
        let fwd_cols: Vec<f64> = (0..q)
            .map(|i| {
                crate::linalg::max_abs(&apply_word(psis, &[i], &e, false))
            })
            .collect();
        let pairs: Vec<(f64, f64)> = pair_words
            .iter()
            .map(|&(a, b)| {
                let v = apply_word(psis, &words[a], &adj[b], false);
                let off = v
                    .iter()
                    .enumerate()
                    .filter(|(r, _)| *r != c)
                    .fold(0.0f64, |m, (_, x)| m.max(x.abs()));
                (v[c], off)
            })
            .collect();
        (fwd_cols, pairs)
    };
    let results: Vec<(Vec<f64>, Vec<(f64, f64)>)> = if stateful {
        cols.iter().map(|&c| work(c)).collect()
    } else {
        cols.par_iter().map(|&c| work(c)).collect()
    };

    // traces: exact from the diagonal, otherwise Hutchinson
    let npairs = pair_words.len();
    let traces: Vec<f64> = if exact {
        (0..npairs)
            .map(|p| results.iter().map(|r| r.1[p].0).sum::<f64>() / n as f64)
            .collect()
    } else {
        let pseed = seed.derive("probes");
        let probe = |p: usize| {
            let z = rademacher_vec(n, &mut pseed.index(p as u64).rng());
            let adj: Vec<Vec<f64>> = words.iter().map(|w| apply_word(psis, w, &z, true)).collect();
            pair_words
                .iter()
                .map(|&(a, b)| crate::linalg::dot(&adj[a], &adj[b]) / n as f64)
                .collect::<Vec<f64>>()
        };
        let est: Vec<Vec<f64>> = if stateful {
            (0..DEFAULT_PROBES).map(probe).collect()
        } else {
            (0..DEFAULT_PROBES).into_par_iter().map(probe).collect()
        };
        (0..npairs)
            .map(|p| est.iter().map(|e| e[p]).sum::<f64>() / DEFAULT_PROBES as f64)
            .collect()
    };
    let deviation: Vec<f64> = (0..npairs)
        .map(|p| {
            results.iter().fold(0.0f64, |m, r| {
                m.max(r.1[p].1).max((r.1[p].0 - traces[p]).abs())
            })
        })
        .collect();
    let mut omega = vec![vec![0.0; q]; q];
    let mut pair_deviation = vec![vec![0.0; q]; q];
    for i in 0..q {
        for j in 0..q {
            omega[i][j] = traces[i * q + j];
            pair_deviation[i][j] = deviation[i * q + j];
        }
    }
    let entry_max: Vec<f64> = (0..q)
        .map(|i| results.iter().fold(0.0f64, |m, r| m.max(r.0[i])))
        .collect();
    let product_checks = products
        .iter()
        .enumerate()
        .map(|(t, (b, bp))| ProductCheck {
            left: b.clone(),
            right: bp.clone(),
            omega: traces[q * q + t],
            deviation: deviation[q * q + t],
        })
        .collect();
    let om = nalgebra::DMatrix::from_fn(q, q, |i, j| omega[i][j]);
    let min_eig = crate::linalg::symmetric_eigenvalues(&om)[0];
    Ok(SemiRandomReport {
        n,
        omega,
        pair_deviation,
        entry_max,
        products: product_checks,
        exact,
        omega_min_eigenvalue: min_eig,
    })
}
