//! Separable convex penalties and their proximal maps
//! `η(x; γ) = argmin_z γρ(z) + (x − z)²/2`.

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Seed;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type ProxFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Accuracy of the numerical prox fallback.
pub const PROX_TOL: f64 = 1e-10;

#[derive(Clone)]
pub enum Regularizer {
    Zero,
    L1 { lambda1: f64 },
    Ridge { lambda2: f64 },
    /// `λ₁|z| + λ₂z²`
    ElasticNet { lambda1: f64, lambda2: f64 },
    Custom(CustomRegularizer),
}

/// User-supplied penalty. Without `prox`, the proximal map is computed
/// numerically on the bracket `[x − γg, x + γg]` where `g` bounds the
/// subgradients of `ρ` at the minimizer.
#[derive(Clone)]
pub struct CustomRegularizer {
    pub value: ScalarFn,
    pub prox: Option<ProxFn>,
    /// Strong convexity constant, when known.
    pub kappa: Option<f64>,
    pub subgradient_bound: f64,
    pub name: String,
}

impl fmt::Debug for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regularizer::Zero => f.write_str("Zero"),
            Regularizer::L1 { lambda1 } => write!(f, "L1({lambda1})"),
            Regularizer::Ridge { lambda2 } => write!(f, "Ridge({lambda2})"),
            Regularizer::ElasticNet { lambda1, lambda2 } => {
                write!(f, "ElasticNet({lambda1}, {lambda2})")
            }
            Regularizer::Custom(c) => write!(f, "Custom({})", c.name),
        }
    }
}

/// Config form `{kind, lambda1, lambda2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: String,
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
}

impl RegularizerSpec {
    pub fn build(&self) -> Result<Regularizer> {
        let r = match self.kind.as_str() {
            "zero" => Regularizer::Zero,
            "l1" => Regularizer::L1 { lambda1: self.lambda1 },
            "ridge" => Regularizer::Ridge { lambda2: self.lambda2 },
            "elastic_net" => Regularizer::ElasticNet {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
            },
            other => return Err(Error::InvalidArgument(format!("unknown regularizer '{other}'"))),
        };
        r.validate()?;
        Ok(r)
    }
}

impl Regularizer {
    pub fn elastic_net(lambda1: f64, lambda2: f64) -> Self {
        Regularizer::ElasticNet { lambda1, lambda2 }
    }

    /// Custom penalty with only a value function.
    pub fn custom<F>(name: &str, value: F, subgradient_bound: f64) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Regularizer::Custom(CustomRegularizer {
            value: Arc::new(value),
            prox: None,
            kappa: None,
            subgradient_bound,
            name: name.to_string(),
        })
    }

    fn lambdas(&self) -> (f64, f64) {
        match self {
            Regularizer::Zero | Regularizer::Custom(_) => (0.0, 0.0),
            Regularizer::L1 { lambda1 } => (*lambda1, 0.0),
            Regularizer::Ridge { lambda2 } => (0.0, *lambda2),
            Regularizer::ElasticNet { lambda1, lambda2 } => (*lambda1, *lambda2),
        }
    }

    pub fn value(&self, z: f64) -> f64 {
        match self {
            Regularizer::Custom(c) => (c.value)(z),
            _ => {
                let (l1, l2) = self.lambdas();
                l1 * z.abs() + l2 * z * z
            }
        }
    }

    /// `Σ_i ρ(β_i)`
    pub fn total(&self, beta: &[f64]) -> f64 {
        beta.iter().map(|&b| self.value(b)).sum()
    }

    /// Strong convexity constant (`2λ₂` for the elastic net).
    pub fn kappa(&self) -> Option<f64> {
        match self {
            Regularizer::Custom(c) => c.kappa,
            _ => Some(2.0 * self.lambdas().1),
        }
    }

    /// Whether `ρ(−z) = ρ(z)` (checked on a grid for custom penalties).
    pub fn is_even(&self) -> bool {
        match self {
            Regularizer::Custom(_) => grid()
                .iter()
                .all(|&z| (self.value(z) - self.value(-z)).abs() <= 1e-12 * (1.0 + self.value(z).abs())),
            _ => true,
        }
    }

    /// Finite values and sampled midpoint convexity on a grid in `[−10, 10]`.
    pub fn validate(&self) -> Result<()> {
        let (l1, l2) = self.lambdas();
        if l1 < 0.0 || l2 < 0.0 || !l1.is_finite() || !l2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "penalty weights must be nonnegative, got λ₁={l1}, λ₂={l2}"
            )));
        }
        let g = grid();
        for w in g.windows(3) {
            let (a, m, b) = (self.value(w[0]), self.value(w[1]), self.value(w[2]));
            if !(a.is_finite() && m.is_finite() && b.is_finite()) {
                return Err(Error::InvalidArgument(format!("penalty not finite near {}", w[1])));
            }
            if m > 0.5 * (a + b) + 1e-9 * (1.0 + a.abs() + b.abs()) {
                return Err(Error::InvalidArgument(format!("penalty not convex near {}", w[1])));
            }
        }
        Ok(())
    }
}

fn grid() -> Vec<f64> {
    (0..=400).map(|i| -10.0 + 0.05 * i as f64).collect()
}

/// Scalar proximal map.
pub fn prox(rho: &Regularizer, x: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::BadGamma(gamma));
    }
    match rho {
        Regularizer::Zero => Ok(x),
        Regularizer::Custom(c) => match &c.prox {
            Some(p) => Ok(p(x, gamma)),
            None => numeric_prox(c, x, gamma),
        },
        _ => {
            let (l1, l2) = rho.lambdas();
            Ok(soft(x, gamma * l1, 1.0 + 2.0 * gamma * l2))
        }
    }
}

#[inline]
fn soft(x: f64, threshold: f64, shrink: f64) -> f64 {
    x.signum() * (x.abs() - threshold).max(0.0) / shrink
}

/// Bisection on a central-difference derivative of `γρ(z) + (z − x)²/2`,
/// which is increasing for convex `ρ`. Accurate to `PROX_TOL` where `ρ` is
/// smooth; near a kink the difference quotient limits accuracy to about `1e-6`.
fn numeric_prox(c: &CustomRegularizer, x: f64, gamma: f64) -> Result<f64> {
    let phi_prime = |z: f64| {
        let h = 1e-6 * (1.0 + z.abs());
        gamma * ((c.value)(z + h) - (c.value)(z - h)) / (2.0 * h) + (z - x)
    };
    let width = gamma * c.subgradient_bound;
    let (mut lo, mut hi) = (x - width, x + width);
    let (dlo, dhi) = (phi_prime(lo), phi_prime(hi));
    if !(dlo.is_finite() && dhi.is_finite()) || dlo > 0.0 || dhi < 0.0 {
        return Err(Error::ProxDiverged { x });
    }
    while hi - lo > PROX_TOL * (1.0 + x.abs()) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi_prime(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Coordinatewise [`prox`].
pub fn prox_vector(rho: &Regularizer, x: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    prox_into(rho, x, gamma, &mut out)?;
    Ok(out)
}

pub fn prox_into(rho: &Regularizer, x: &[f64], gamma: f64, out: &mut [f64]) -> Result<()> {
    if x.len() != out.len() {
        return Err(Error::dims(x.len(), out.len(), "prox output"));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::BadGamma(gamma));
    }
    match rho {
        Regularizer::Custom(_) => {
            for (o, &v) in out.iter_mut().zip(x) {
                *o = prox(rho, v, gamma)?;
            }
        }
        _ => {
            let (l1, l2) = rho.lambdas();
            let t = gamma * l1;
            let s = 1.0 + 2.0 * gamma * l2;
            for (o, &v) in out.iter_mut().zip(x) {
                *o = soft(v, t, s);
            }
        }
    }
    Ok(())
}

/// Largest `|η(x) − η(y)| / |x − y|` over `pairs` random pairs drawn from
/// `N(0, 25)`.
pub fn check_nonexpansive(rho: &Regularizer, gamma: f64, pairs: usize, seed: Seed) -> Result<f64> {
    let mut rng = seed.rng();
    let mut worst = 0.0f64;
    let mut drawn = 0;
    while drawn < pairs.max(1) {
        let x: f64 = 5.0 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let y: f64 = 5.0 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        if x == y {
            continue;
        }
        drawn += 1;
        let r = (prox(rho, x, gamma)? - prox(rho, y, gamma)?).abs() / (x - y).abs();
        worst = worst.max(r);
    }
    Ok(worst)
}
