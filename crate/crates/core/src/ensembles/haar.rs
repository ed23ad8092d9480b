//! Haar-distributed orthogonal factors.
//!
//! Three interchangeable realizations of `Vᵀ` with `V ~ Unif(O(N))`:
//!
//! * [`HouseholderHaar`]: a product of `N − 1` Householder reflections whose
//!   Gaussian draws are regenerated from per-reflection seeds on every
//!   application. `O(N²)` work per application, `O(N)` memory.
//! * [`explicit_haar`]: dense QR of a Gaussian matrix with the diagonal of `R`
//!   made positive.
//! * [`SequentialHaar`]: conditional sampling. `V` is only pinned down on the
//!   span of the vectors it has been applied to so far; every query that leaves
//!   that span extends the pinned pairs by one uniformly random direction. The
//!   cost of a query is `O(N k)` after `k` distinct directions, which makes
//!   long iterative runs at large `N` feasible without ever forming `V`.

use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::linalg::{dot, gaussian_vec, norm};
use crate::rng::{Rng, Seed};
use crate::transforms::{LinearOperator, Op};

/// `Vᵀ` as a lazily regenerated product of Householder reflections.
///
/// `V = H̃_0 H̃_1 ⋯ H̃_{N−2} D` where `H̃_k` reflects coordinates `k..N` and
/// `D` holds the sign corrections that make the law exactly Haar.
#[derive(Debug, Clone)]
pub struct HouseholderHaar {
    n: usize,
    seed: Seed,
}

impl HouseholderHaar {
    pub fn new(n: usize, seed: Seed) -> Self {
        HouseholderHaar { n, seed }
    }

    /// Unit reflection vector (supported on `k..N`) and sign correction `d_k`.
    pub fn reflection(&self, k: usize) -> (Vec<f64>, f64) {
        let mut rng = self.seed.index(k as u64).rng();
        let len = self.n - k;
        let mut u = gaussian_vec(len, 1.0, &mut rng);
        let g0 = u[0];
        let s = if g0 >= 0.0 { 1.0 } else { -1.0 };
        u[0] += s * norm(&u);
        let nu = norm(&u);
        if nu > 0.0 {
            for v in &mut u {
                *v /= nu;
            }
        }
        (u, -s)
    }

    fn last_sign(&self) -> f64 {
        let mut rng = self.seed.derive("last-sign").rng();
        if rng.gen::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    fn reflect(u: &[f64], x: &mut [f64]) {
        let c = 2.0 * dot(u, x);
        for (xi, ui) in x.iter_mut().zip(u) {
            *xi -= c * ui;
        }
    }

    fn signs(&self) -> Vec<f64> {
        let mut d = Vec::with_capacity(self.n);
        for k in 0..self.n.saturating_sub(1) {
            d.push(self.reflection(k).1);
        }
        d.push(self.last_sign());
        d
    }
}

impl LinearOperator for HouseholderHaar {
    fn rows(&self) -> usize {
        self.n
    }
    fn cols(&self) -> usize {
        self.n
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        // Vᵀ = D H̃_{N−2} ⋯ H̃_0
        out.copy_from_slice(x);
        let mut d = vec![0.0; self.n];
        for k in 0..self.n.saturating_sub(1) {
            let (u, dk) = self.reflection(k);
            Self::reflect(&u, &mut out[k..]);
            d[k] = dk;
        }
        d[self.n - 1] = self.last_sign();
        for (o, s) in out.iter_mut().zip(&d) {
            *o *= s;
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        // V = H̃_0 ⋯ H̃_{N−2} D
        let d = self.signs();
        for ((o, yi), s) in out.iter_mut().zip(y).zip(&d) {
            *o = yi * s;
        }
        for k in (0..self.n.saturating_sub(1)).rev() {
            let (u, _) = self.reflection(k);
            Self::reflect(&u, &mut out[k..]);
        }
    }
    fn label(&self) -> String {
        format!("Vᵀ_householder_{}", self.n)
    }
}

/// Dense Haar orthogonal `V` from the QR factorization of a Gaussian matrix.
pub fn explicit_haar(n: usize, seed: Seed) -> DMatrix<f64> {
    let mut rng = seed.rng();
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// `A = Q_out diag(I_k, W) Q_inᵀ` with `Q_in`, `Q_out` products of `k`
/// Householder reflections and `W` Haar on the unpinned complement, never
/// formed. Pinning one more direction appends a reflection on each side.
#[derive(Debug, Clone)]
struct PairedBases {
    n: usize,
    // reflection i acts on coordinates i..n
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    rng: Rng,
    forks: u64,
}

impl PairedBases {
    fn k(&self) -> usize {
        self.inputs.len()
    }

    fn reflect(u: &[f64], x: &mut [f64]) {
        let c = 2.0 * dot(u, x);
        if c != 0.0 {
            for (xi, ui) in x.iter_mut().zip(u) {
                *xi -= c * ui;
            }
        }
    }

    /// Applies `A` (forward) or `Aᵀ` (adjoint) to `x`.
    fn query(&mut self, x: &[f64], out: &mut [f64], forward: bool) {
        let n = self.n;
        let k = self.k();
        out.copy_from_slice(x);
        {
            let from = if forward { &self.inputs } else { &self.outputs };
            for (i, u) in from.iter().enumerate() {
                Self::reflect(u, &mut out[i..]);
            }
        }
        let nx = norm(x);
        let nt = norm(&out[k..]);
        if k < n && nt > 1e-13 * nx.max(f64::MIN_POSITIVE) {
            // reflection taking the new tail to s‖tail‖e_k
            let s = if out[k] >= 0.0 { -1.0 } else { 1.0 };
            let mut u = out[k..].to_vec();
            u[0] -= s * nt;
            let nu = norm(&u);
            for v in &mut u {
                *v /= nu;
            }
            // reflection taking e_k to a uniform unit vector of the complement
            let g = gaussian_vec(n - k, 1.0, &mut self.rng);
            let ng = norm(&g);
            let mut w: Vec<f64> = g.iter().map(|v| -v / ng).collect();
            w[0] += 1.0;
            let nw = norm(&w);
            if nw > 1e-300 {
                for v in &mut w {
                    *v /= nw;
                }
            } else {
                w.fill(0.0);
            }
            if forward {
                self.inputs.push(u);
                self.outputs.push(w);
            } else {
                self.outputs.push(u);
                self.inputs.push(w);
            }
            out[k] = s * nt;
            out[k + 1..].fill(0.0);
        } else {
            out[k..].fill(0.0);
        }
        let to = if forward { &self.outputs } else { &self.inputs };
        for (i, u) in to.iter().enumerate().rev() {
            Self::reflect(u, &mut out[i..]);
        }
    }
}

/// `Vᵀ` sampled on demand, conditionally on everything queried so far.
///
/// The realized matrix depends on the order of queries, but every realization
/// is exactly Haar distributed and the map is linear on the queried span:
/// repeating a query returns the same image.
#[derive(Debug)]
pub struct SequentialHaar {
    n: usize,
    seed: Seed,
    state: Mutex<PairedBases>,
}

impl SequentialHaar {
    pub fn new(n: usize, seed: Seed) -> Self {
        SequentialHaar {
            n,
            seed,
            state: Mutex::new(PairedBases {
                n,
                inputs: Vec::new(),
                outputs: Vec::new(),
                rng: seed.rng(),
                forks: 0,
            }),
        }
    }

    /// Number of directions on which the matrix has been pinned down.
    pub fn pinned_directions(&self) -> usize {
        self.state.lock().expect("haar state poisoned").k()
    }
}

impl LinearOperator for SequentialHaar {
    fn rows(&self) -> usize {
        self.n
    }
    fn cols(&self) -> usize {
        self.n
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.state
            .lock()
            .expect("haar state poisoned")
            .query(x, out, true);
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        self.state
            .lock()
            .expect("haar state poisoned")
            .query(y, out, false);
    }
    fn label(&self) -> String {
        format!("Vᵀ_sequential_{}", self.n)
    }
    /// The copy keeps every pinned pair but draws new directions from its own
    /// stream. Sharing the stream would map a vector computed on one fork onto
    /// the very directions it was computed from on the other.
    fn fork_state(&self) -> Option<Op> {
        let mut st = self.state.lock().expect("haar state poisoned");
        st.forks += 1;
        let seed = self.seed.derive("fork").index(st.forks);
        let mut child = st.clone();
        child.rng = seed.rng();
        child.forks = 0;
        Some(Arc::new(SequentialHaar {
            n: self.n,
            seed,
            state: Mutex::new(child),
        }))
    }
}
