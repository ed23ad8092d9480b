//! Regularized least squares `L(β) = (1/2N)‖y − Xβ‖² + (1/N)Σρ(β_i)` and the
//! proximal gradient method `β^{t+1} = η(β^t − γXᵀ(Xβ^t − y); γ)`.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ensembles::SensingOperator;
use crate::error::{Error, Result};
use crate::linalg::{dot, gaussian_vec, norm};
use crate::regularization::{prox_into, Regularizer};
use crate::rng::Seed;
use crate::transforms::{op_norm, DEFAULT_NORM_MAX_ITER, DEFAULT_NORM_TOL};

/// Safety factor in the default step `γ = 1/(1.05‖X‖²)`.
pub const STEP_SAFETY: f64 = 1.05;

/// `y = Xβ⋆ + ε`
#[derive(Clone, Debug)]
pub struct LinearModelInstance {
    pub x: SensingOperator,
    pub beta_star: Vec<f64>,
    pub noise_sigma: f64,
    pub epsilon: Vec<f64>,
    pub y: Vec<f64>,
}

impl LinearModelInstance {
    /// Draws `ε ~ N(0, σ²I_M)` from `seed`.
    pub fn new(x: SensingOperator, beta_star: Vec<f64>, noise_sigma: f64, seed: Seed) -> Result<Self> {
        let eps = gaussian_vec(x.rows(), noise_sigma, &mut seed.rng());
        Self::with_noise(x, beta_star, noise_sigma, eps)
    }

    pub fn with_noise(x: SensingOperator, beta_star: Vec<f64>, noise_sigma: f64, epsilon: Vec<f64>) -> Result<Self> {
        if beta_star.len() != x.cols() {
            return Err(Error::dims(x.cols(), beta_star.len(), "β⋆"));
        }
        if epsilon.len() != x.rows() {
            return Err(Error::dims(x.rows(), epsilon.len(), "ε"));
        }
        if !(noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise σ must be ≥ 0, got {noise_sigma}")));
        }
        let mut y = x.op.forward(&beta_star);
        for (yi, e) in y.iter_mut().zip(&epsilon) {
            *yi += e;
        }
        Ok(LinearModelInstance {
            x,
            beta_star,
            noise_sigma,
            epsilon,
            y,
        })
    }

    pub fn n(&self) -> usize {
        self.x.cols()
    }

    /// Same model with an independent copy of any sampling state in `X`.
    pub fn fork(&self) -> Self {
        let mut c = self.clone();
        c.x = self.x.fork();
        c
    }
}

pub fn rls_objective(inst: &LinearModelInstance, beta: &[f64], rho: &Regularizer) -> Result<f64> {
    if beta.len() != inst.n() {
        return Err(Error::dims(inst.n(), beta.len(), "β"));
    }
    let xb = inst.x.op.forward(beta);
    let r: f64 = xb.iter().zip(&inst.y).map(|(a, b)| (b - a) * (b - a)).sum();
    Ok((0.5 * r + rho.total(beta)) / inst.n() as f64)
}

/// `‖β − β⋆‖²/‖β⋆‖²`
pub fn nmse(beta: &[f64], beta_star: &[f64]) -> Result<f64> {
    if beta.len() != beta_star.len() {
        return Err(Error::dims(beta_star.len(), beta.len(), "β"));
    }
    let s = dot(beta_star, beta_star);
    if s == 0.0 {
        return Err(Error::ZeroSignal);
    }
    Ok(sq_dist(beta, beta_star) / s)
}

/// `‖β − β⋆‖²/N`
pub fn mse(beta: &[f64], beta_star: &[f64]) -> f64 {
    sq_dist(beta, beta_star) / beta.len() as f64
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Default step size: `1/(1.05‖X‖²)` with the norm known by construction when
/// available and estimated by power iteration otherwise.
pub fn default_gamma(x: &SensingOperator) -> Result<f64> {
    let norm = match x.known_op_norm {
        Some(v) => v,
        None => match op_norm(x.op.as_ref(), DEFAULT_NORM_TOL, DEFAULT_NORM_MAX_ITER, x.seed.derive("norm")) {
            Ok(v) => v,
            Err(Error::NoConvergence { estimate, .. }) => estimate,
            Err(e) => return Err(e),
        },
    };
    if !(norm > 0.0) {
        return Err(Error::BadGamma(f64::INFINITY));
    }
    Ok(1.0 / (STEP_SAFETY * norm * norm))
}

/// Early stop when the objective changed by less than `rel_tol` (relative)
/// over the last `window` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub rel_tol: f64,
    pub window: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            rel_tol: 1e-10,
            window: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxGradOptions {
    /// Step size; `None` selects [`default_gamma`].
    pub gamma: Option<f64>,
    /// Iteration cap `T`.
    pub iterations: usize,
    pub record_every: usize,
    pub keep_iterates: bool,
    pub stop: Option<StopRule>,
}

impl ProxGradOptions {
    pub fn fixed(iterations: usize) -> Self {
        ProxGradOptions {
            gamma: None,
            iterations,
            record_every: 1,
            keep_iterates: false,
            stop: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub objective: f64,
    pub mse: f64,
    /// `NaN` when `β⋆ = 0`.
    pub nmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxGradTrajectory {
    pub gamma: f64,
    /// Number of iterates computed (`β^1 … β^T`).
    pub iterations: usize,
    pub points: Vec<TrajectoryPoint>,
    /// Iterates at the recorded points when requested.
    pub iterates: Vec<Vec<f64>>,
    pub first: Vec<f64>,
    pub last: Vec<f64>,
    pub converged: bool,
}

impl ProxGradTrajectory {
    pub fn final_point(&self) -> &TrajectoryPoint {
        self.points.last().expect("trajectory has at least one point")
    }

    /// Largest increase between consecutive recorded objective values.
    pub fn max_objective_increase(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1].objective - w[0].objective)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV with columns `t,objective,mse,nmse`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,objective,mse,nmse")?;
        for p in &self.points {
            writeln!(w, "{},{},{},{}", p.t, p.objective, p.mse, p.nmse)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf8")
    }
}

/// Proximal gradient from `β^1 = η(Xᵀy; γ)`.
pub fn prox_grad(inst: &LinearModelInstance, rho: &Regularizer, opts: &ProxGradOptions) -> Result<ProxGradTrajectory> {
    if opts.iterations < 1 {
        return Err(Error::InvalidArgument("iteration count must be ≥ 1".into()));
    }
    let gamma = match opts.gamma {
        Some(g) => g,
        None => default_gamma(&inst.x)?,
    };
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::BadGamma(gamma));
    }
    let op = inst.x.op.as_ref();
    let (m, n) = (op.rows(), op.cols());
    if inst.y.len() != m || inst.beta_star.len() != n {
        return Err(Error::dims(m, inst.y.len(), "y"));
    }
    let nf = n as f64;
    let star_sq = dot(&inst.beta_star, &inst.beta_star);
    let record_every = opts.record_every.max(1);

    let mut beta = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut resid = vec![0.0; m];
    op.adjoint_into(&inst.y, &mut grad);
    prox_into(rho, &grad, gamma, &mut beta)?;
    let first = beta.clone();

    let mut points = Vec::new();
    let mut iterates = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut t = 1;
    loop {
        // residual Xβ^t − y serves both the objective at β^t and the next step
        op.apply_into(&beta, &mut resid);
        for (r, y) in resid.iter_mut().zip(&inst.y) {
            *r -= y;
        }
        let objective = (0.5 * dot(&resid, &resid) + rho.total(&beta)) / nf;
        if let Some(rule) = opts.stop {
            history.push(objective);
            if history.len() > rule.window {
                let old = history[history.len() - 1 - rule.window];
                if (old - objective).abs() <= rule.rel_tol * objective.abs().max(f64::MIN_POSITIVE) {
                    converged = true;
                }
            }
        }
        let last = t == opts.iterations || converged;
        if t == 1 || t % record_every == 0 || last {
            let d = sq_dist(&beta, &inst.beta_star);
            points.push(TrajectoryPoint {
                t,
                objective,
                mse: d / nf,
                nmse: if star_sq > 0.0 { d / star_sq } else { f64::NAN },
            });
            if opts.keep_iterates {
                iterates.push(beta.clone());
            }
        }
        if last {
            break;
        }
        op.adjoint_into(&resid, &mut grad);
        for (g, b) in grad.iter_mut().zip(&beta) {
            *g = b - gamma * *g;
        }
        prox_into(rho, &grad, gamma, &mut beta)?;
        t += 1;
    }
    Ok(ProxGradTrajectory {
        gamma,
        iterations: t,
        points,
        iterates,
        first,
        last: beta,
        converged,
    })
}

/// Runs until the default stopping rule fires or `max_iter` is reached.
pub fn solve_rls(inst: &LinearModelInstance, rho: &Regularizer, gamma: Option<f64>, max_iter: usize) -> Result<ProxGradTrajectory> {
    prox_grad(
        inst,
        rho,
        &ProxGradOptions {
            gamma,
            iterations: max_iter,
            record_every: max_iter.max(1),
            keep_iterates: false,
            stop: Some(StopRule::default()),
        },
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcceleratedOptions {
    pub gamma: Option<f64>,
    pub max_iter: usize,
    /// Stop once `‖β^{k+1} − y^k‖ ≤ tol·‖β^{k+1}‖` (fixed-point residual of
    /// the prox-gradient map).
    pub tol: f64,
}

impl Default for AcceleratedOptions {
    fn default() -> Self {
        AcceleratedOptions {
            gamma: None,
            max_iter: 20_000,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlsSolution {
    pub beta: Vec<f64>,
    pub objective: f64,
    pub mse: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

/// FISTA with gradient-based momentum restart. Converges to the same
/// minimizer as [`prox_grad`] in far fewer iterations when the ridge part is
/// small, but the objective is not monotone along the way.
pub fn solve_rls_accelerated(
    inst: &LinearModelInstance,
    rho: &Regularizer,
    opts: &AcceleratedOptions,
    warm_start: Option<&[f64]>,
) -> Result<RlsSolution> {
    let gamma = match opts.gamma {
        Some(g) => g,
        None => default_gamma(&inst.x)?,
    };
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::BadGamma(gamma));
    }
    let op = inst.x.op.as_ref();
    let (m, n) = (op.rows(), op.cols());
    let mut beta = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut resid = vec![0.0; m];
    match warm_start {
        Some(w) => {
            if w.len() != n {
                return Err(Error::dims(n, w.len(), "warm start"));
            }
            beta.copy_from_slice(w);
        }
        None => {
            op.adjoint_into(&inst.y, &mut grad);
            prox_into(rho, &grad, gamma, &mut beta)?;
        }
    }
    let mut yk = beta.clone();
    let mut next = vec![0.0; n];
    let mut tk = 1.0f64;
    let mut converged = false;
    let mut residual = f64::INFINITY;
    let mut k = 0;
    while k < opts.max_iter {
        k += 1;
        op.apply_into(&yk, &mut resid);
        for (r, y) in resid.iter_mut().zip(&inst.y) {
            *r -= y;
        }
        op.adjoint_into(&resid, &mut grad);
        for (g, y) in grad.iter_mut().zip(&yk) {
            *g = y - gamma * *g;
        }
        prox_into(rho, &grad, gamma, &mut next)?;
        let mut step = 0.0;
        let mut align = 0.0;
        for i in 0..n {
            let d = next[i] - yk[i];
            step += d * d;
            align += (yk[i] - next[i]) * (next[i] - beta[i]);
        }
        residual = step.sqrt() / norm(&next).max(f64::MIN_POSITIVE);
        if residual <= opts.tol {
            converged = true;
            std::mem::swap(&mut beta, &mut next);
            break;
        }
        if align > 0.0 {
            tk = 1.0;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        let c = (tk - 1.0) / tn;
        for i in 0..n {
            yk[i] = next[i] + c * (next[i] - beta[i]);
        }
        tk = tn;
        std::mem::swap(&mut beta, &mut next);
    }
    let objective = rls_objective(inst, &beta, rho)?;
    Ok(RlsSolution {
        mse: mse(&beta, &inst.beta_star),
        objective,
        beta,
        iterations: k,
        converged,
        residual,
    })
}

/// Worst slack of `L(β^t) − L_ref ≤ ‖β^1 − β_ref‖²/(2γ(t−1)N)` over the
/// recorded points with `t ≥ 2`; nonnegative means the bound holds everywhere.
pub fn gap_bound_slack(traj: &ProxGradTrajectory, beta_ref: &[f64], objective_ref: f64) -> f64 {
    let n = beta_ref.len() as f64;
    let d = sq_dist(&traj.first, beta_ref);
    traj.points
        .iter()
        .filter(|p| p.t >= 2)
        .map(|p| d / (2.0 * traj.gamma * (p.t as f64 - 1.0) * n) - (p.objective - objective_ref))
        .fold(f64::INFINITY, f64::min)
}

/// Discrete signal priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    FivePoint,
    SparsePositive { chi: f64 },
    SparseCentered { chi: f64 },
    Custom { atoms: Vec<f64>, probs: Vec<f64> },
}

impl Prior {
    pub fn atoms(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (a, p) = match self {
            Prior::FivePoint => (
                vec![0.0, 12.0, -12.0, 20.0, -20.0],
                vec![0.9, 0.1 / 3.0, 0.1 / 3.0, 0.1 / 6.0, 0.1 / 6.0],
            ),
            Prior::SparsePositive { chi } => {
                check_chi(*chi)?;
                (vec![0.0, 12.0, 20.0], vec![1.0 - chi, chi * 2.0 / 3.0, chi / 3.0])
            }
            Prior::SparseCentered { chi } => {
                check_chi(*chi)?;
                (
                    vec![0.0, -8.0 / 3.0, 16.0 / 3.0],
                    vec![1.0 - chi, chi * 2.0 / 3.0, chi / 3.0],
                )
            }
            Prior::Custom { atoms, probs } => (atoms.clone(), probs.clone()),
        };
        if a.len() != p.len() || a.is_empty() {
            return Err(Error::BadProbabilities("atoms and probabilities differ in length".into()));
        }
        let total: f64 = p.iter().sum();
        if p.iter().any(|v| *v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::BadProbabilities(format!("probabilities sum to {total}")));
        }
        Ok((a, p))
    }

    pub fn moment(&self, k: i32) -> Result<f64> {
        let (a, p) = self.atoms()?;
        Ok(a.iter().zip(&p).map(|(x, w)| w * x.powi(k)).sum())
    }
}

fn check_chi(chi: f64) -> Result<()> {
    if (0.0..=1.0).contains(&chi) {
        Ok(())
    } else {
        Err(Error::BadProbabilities(format!("χ = {chi} outside [0, 1]")))
    }
}

/// `N` i.i.d. draws from the prior.
pub fn sample_prior(prior: &Prior, n: usize, seed: Seed) -> Result<Vec<f64>> {
    let (atoms, probs) = prior.atoms()?;
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cdf.push(acc);
    }
    let mut rng = seed.rng();
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>() * acc;
            let i = cdf.iter().position(|c| u < *c).unwrap_or(atoms.len() - 1);
            atoms[i]
        })
        .collect())
}

/// Convenience for `‖v‖/√N`.
pub fn rms(v: &[f64]) -> f64 {
    norm(v) / (v.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::{sample_haar, sample_rand_dct, sample_spike_ortho, HaarMode, SpikeKind};
    use crate::linalg::{max_abs_diff, mean, variance};
    use crate::transforms::{to_dense, Dense, Op};
    use nalgebra::{DMatrix, DVector};
    use std::sync::Arc;

    fn dense_instance(seed: u64, n: usize, sigma: f64) -> (LinearModelInstance, DMatrix<f64>) {
        let mut rng = Seed(seed).rng();
        let a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
        let mut x = sample_rand_dct(&vec![1.0; n], Seed(seed)).unwrap();
        x.op = Arc::new(Dense::new(a.clone())) as Op;
        x.known_op_norm = None;
        let beta = gaussian_vec(n, 1.0, &mut rng);
        (LinearModelInstance::new(x, beta, sigma, Seed(seed + 1)).unwrap(), a)
    }

    #[test]
    fn objective_examples() {
        let x = sample_spike_ortho(8, SpikeKind::Dct, Seed(1)).unwrap();
        let beta = sample_prior(&Prior::FivePoint, 16, Seed(2)).unwrap();
        let inst = LinearModelInstance::new(x, beta.clone(), 0.0, Seed(3)).unwrap();
        assert!(rls_objective(&inst, &beta, &Regularizer::Zero).unwrap().abs() < 1e-20);
        let y2 = dot(&inst.y, &inst.y);
        let at0 = rls_objective(&inst, &[0.0; 16], &Regularizer::Zero).unwrap();
        assert!((at0 - y2 / 32.0).abs() < 1e-12);
        assert!(rls_objective(&inst, &[0.0; 3], &Regularizer::Zero).is_err());

        let (inst, a) = dense_instance(4, 4, 0.5);
        let rho = Regularizer::elastic_net(0.3, 0.2);
        let b = vec![0.1, -0.4, 2.0, 0.0];
        let r = DVector::from_vec(inst.y.clone()) - &a * DVector::from_vec(b.clone());
        let want = (0.5 * r.norm_squared() + b.iter().map(|v| 0.3 * v.abs() + 0.2 * v * v).sum::<f64>()) / 4.0;
        assert!((rls_objective(&inst, &b, &rho).unwrap() - want).abs() < 1e-12);
        // y recomputable
        let y = &a * DVector::from_vec(inst.beta_star.clone()) + DVector::from_vec(inst.epsilon.clone());
        assert!(max_abs_diff(y.as_slice(), &inst.y) < 1e-12);
    }

    #[test]
    fn orthogonal_zero_penalty_recovers_in_one_step() {
        let x = sample_haar(&[1.0; 32], Seed(5), HaarMode::Lazy).unwrap();
        let beta = sample_prior(&Prior::FivePoint, 32, Seed(6)).unwrap();
        let inst = LinearModelInstance::new(x, beta.clone(), 0.0, Seed(7)).unwrap();
        let mut opts = ProxGradOptions::fixed(1);
        opts.gamma = Some(1.0);
        let traj = prox_grad(&inst, &Regularizer::Zero, &opts).unwrap();
        assert!(max_abs_diff(&traj.first, &beta) < 1e-12);
    }

    #[test]
    fn ridge_matches_closed_form() {
        let (inst, a) = dense_instance(8, 4, 0.3);
        let l2 = 0.05;
        let traj = prox_grad(&inst, &Regularizer::Ridge { lambda2: l2 }, &ProxGradOptions::fixed(10_000)).unwrap();
        let lhs = a.transpose() * &a + DMatrix::<f64>::identity(4, 4) * (2.0 * l2);
        let rhs = a.transpose() * DVector::from_vec(inst.y.clone());
        let sol = lhs.lu().solve(&rhs).unwrap();
        assert!(max_abs_diff(&traj.last, sol.as_slice()) < 1e-8);
        assert_eq!(traj.iterations, 10_000);
    }

    #[test]
    fn monotone_objective_and_gap_bound() {
        let x = sample_spike_ortho(256, SpikeKind::Dct, Seed(9)).unwrap();
        let beta = sample_prior(&Prior::FivePoint, 512, Seed(10)).unwrap();
        let inst = LinearModelInstance::new(x, beta, 1.0, Seed(11)).unwrap();
        let rho = Regularizer::elastic_net(1.0, 1e-3);
        let traj = prox_grad(&inst, &rho, &ProxGradOptions::fixed(100)).unwrap();
        assert_eq!(traj.points.len(), 100);
        assert!(traj.max_objective_increase() <= 1e-10);
        let reference = prox_grad(&inst, &rho, &ProxGradOptions::fixed(2000)).unwrap();
        let slack = gap_bound_slack(&traj, &reference.last, reference.final_point().objective);
        assert!(slack >= 0.0, "{slack}");
        let csv = traj.to_csv_string();
        assert!(csv.starts_with("t,objective,mse,nmse\n1,"));
        assert_eq!(csv.lines().count(), 101);
    }

    #[test]
    fn record_every_keeps_final() {
        let x = sample_spike_ortho(16, SpikeKind::Hadamard, Seed(1)).unwrap();
        let inst = LinearModelInstance::new(x, vec![1.0; 32], 0.1, Seed(1)).unwrap();
        let mut opts = ProxGradOptions::fixed(23);
        opts.record_every = 10;
        opts.keep_iterates = true;
        let traj = prox_grad(&inst, &Regularizer::elastic_net(0.1, 0.0), &opts).unwrap();
        let ts: Vec<usize> = traj.points.iter().map(|p| p.t).collect();
        assert_eq!(ts, vec![1, 10, 20, 23]);
        assert_eq!(traj.iterates.len(), 4);
        assert!(matches!(
            prox_grad(&inst, &Regularizer::Zero, &ProxGradOptions { gamma: Some(-1.0), ..opts }),
            Err(Error::BadGamma(_))
        ));
    }

    #[test]
    fn stopping_rule_fires() {
        let (inst, _) = dense_instance(12, 6, 0.1);
        let traj = solve_rls(&inst, &Regularizer::elastic_net(0.01, 0.1), None, 100_000).unwrap();
        assert!(traj.converged && traj.iterations < 100_000);
    }

    #[test]
    fn nmse_examples() {
        let b = vec![1.0, -2.0, 3.0];
        assert_eq!(nmse(&b, &b).unwrap(), 0.0);
        assert_eq!(nmse(&[0.0; 3], &b).unwrap(), 1.0);
        let b2: Vec<f64> = b.iter().map(|v| 2.0 * v).collect();
        assert_eq!(nmse(&b2, &b).unwrap(), 1.0);
        assert!(matches!(nmse(&b, &[0.0; 3]), Err(Error::ZeroSignal)));
    }

    #[test]
    fn prior_moments() {
        let v = sample_prior(&Prior::FivePoint, 1_000_000, Seed(13)).unwrap();
        let m2 = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        let want = 0.1 * (2.0 / 3.0 * 144.0 + 1.0 / 3.0 * 400.0);
        assert!((m2 - want).abs() / want < 0.01);
        assert!((Prior::FivePoint.moment(2).unwrap() - want).abs() < 1e-12);
        let c = sample_prior(&Prior::SparseCentered { chi: 0.3 }, 1_000_000, Seed(14)).unwrap();
        let se = (variance(&c) / c.len() as f64).sqrt();
        assert!(mean(&c).abs() < 3.0 * se);
        assert!(sample_prior(&Prior::SparsePositive { chi: 0.0 }, 100, Seed(1)).unwrap().iter().all(|v| *v == 0.0));
        assert!(matches!(
            sample_prior(&Prior::Custom { atoms: vec![1.0, 2.0], probs: vec![0.5, 0.6] }, 3, Seed(1)),
            Err(Error::BadProbabilities(_))
        ));
        assert!(sample_prior(&Prior::SparsePositive { chi: 1.5 }, 3, Seed(1)).is_err());
    }

    #[test]
    fn sign_symmetry_small_dense() {
        // β_RLS(J, β⋆, ε) = S β_RLS(JS, Sβ⋆, ε) for even ρ
        let (inst, a) = dense_instance(15, 8, 0.5);
        let rho = Regularizer::elastic_net(0.2, 0.05);
        let base = solve_rls(&inst, &rho, None, 200_000).unwrap();
        let s: Vec<f64> = (0..8).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
        let as_ = &a * DMatrix::from_diagonal(&DVector::from_vec(s.clone()));
        let mut x2 = inst.x.clone();
        x2.op = Arc::new(Dense::new(as_));
        let sb: Vec<f64> = inst.beta_star.iter().zip(&s).map(|(b, si)| b * si).collect();
        let inst2 = LinearModelInstance::with_noise(x2, sb, 0.5, inst.epsilon.clone()).unwrap();
        let flipped = solve_rls(&inst2, &rho, None, 200_000).unwrap();
        let back: Vec<f64> = flipped.last.iter().zip(&s).map(|(b, si)| b * si).collect();
        assert!(max_abs_diff(&back, &base.last) < 1e-6);
        let _ = to_dense(inst.x.op.as_ref());
    }
}
