//! Matrix-free orthogonal building blocks.
//!
//! Every sensing ensemble is assembled from the operators in this module:
//! fast Walsh–Hadamard and DCT transforms, random sign diagonals, random
//! permutations, diagonal scalings, block concatenation and composition.
//! Operators are immutable after construction (the sequential Haar sampler in
//! [`crate::ensembles`] is the one exception and documents its own rules).

mod dct;
mod fwht;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::linalg::{dot, gaussian_vec, norm};
use crate::rng::Seed;

pub use dct::{dct, idct, DctPlan};
pub use fwht::{fwht, fwht_in_place};

/// A matrix-free `rows × cols` linear map.
pub trait LinearOperator: Send + Sync + fmt::Debug {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `out = A x`; `out` is fully overwritten.
    fn apply_into(&self, x: &[f64], out: &mut [f64]);
    /// `out = Aᵀ y`; `out` is fully overwritten.
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);
    fn label(&self) -> String;

    /// Independent copy of any internal sampling state. Stateless operators
    /// return `None` and can be shared as-is.
    fn fork_state(&self) -> Option<Op> {
        None
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols(), "forward: input length mismatch for {}", self.label());
        let mut out = vec![0.0; self.rows()];
        self.apply_into(x, &mut out);
        out
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows(), "adjoint: input length mismatch for {}", self.label());
        let mut out = vec![0.0; self.cols()];
        self.adjoint_into(y, &mut out);
        out
    }
}

pub type Op = Arc<dyn LinearOperator>;

/// Copy of `op` that shares no mutable sampling state with the original.
pub fn fork(op: &Op) -> Op {
    op.fork_state().unwrap_or_else(|| Arc::clone(op))
}

fn fork_all(ops: &[Op]) -> Option<Vec<Op>> {
    let forked: Vec<Option<Op>> = ops.iter().map(|o| o.fork_state()).collect();
    if forked.iter().all(Option::is_none) {
        return None;
    }
    Some(
        forked
            .into_iter()
            .zip(ops)
            .map(|(f, o)| f.unwrap_or_else(|| Arc::clone(o)))
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct Identity {
    n: usize,
}

impl Identity {
    pub fn new(n: usize) -> Self {
        Identity { n }
    }
}

impl LinearOperator for Identity {
    fn rows(&self) -> usize {
        self.n
    }
    fn cols(&self) -> usize {
        self.n
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
    fn label(&self) -> String {
        format!("I_{}", self.n)
    }
}

/// `diag(s)` with i.i.d. uniform signs.
#[derive(Debug, Clone)]
pub struct SignDiagonal {
    signs: Vec<f64>,
    seed: Option<Seed>,
}

impl SignDiagonal {
    pub fn sample(n: usize, seed: Seed) -> Self {
        let mut rng = seed.rng();
        let signs = (0..n)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        SignDiagonal {
            signs,
            seed: Some(seed),
        }
    }

    /// Panics unless every entry is exactly ±1.
    pub fn from_signs(signs: Vec<f64>) -> Self {
        assert!(signs.iter().all(|&s| s == 1.0 || s == -1.0), "sign entries must be ±1");
        SignDiagonal { signs, seed: None }
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn seed(&self) -> Option<Seed> {
        self.seed
    }
}

impl LinearOperator for SignDiagonal {
    fn rows(&self) -> usize {
        self.signs.len()
    }
    fn cols(&self) -> usize {
        self.signs.len()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, xi), s) in out.iter_mut().zip(x).zip(&self.signs) {
            *o = xi * s;
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        self.apply_into(y, out)
    }
    fn label(&self) -> String {
        format!("S_{}", self.signs.len())
    }
}

/// Permutation matrix `P` with `(P x)_i = x_{perm[i]}`.
#[derive(Debug, Clone)]
pub struct Permutation {
    perm: Vec<usize>,
    seed: Option<Seed>,
}

impl Permutation {
    /// Uniform permutation by Fisher–Yates.
    pub fn sample(n: usize, seed: Seed) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut seed.rng());
        Permutation {
            perm,
            seed: Some(seed),
        }
    }

    pub fn from_vec(perm: Vec<usize>) -> Result<Self> {
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        Ok(Permutation { perm, seed: None })
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }

    pub fn seed(&self) -> Option<Seed> {
        self.seed
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        Permutation {
            perm: inv,
            seed: None,
        }
    }
}

impl LinearOperator for Permutation {
    fn rows(&self) -> usize {
        self.perm.len()
    }
    fn cols(&self) -> usize {
        self.perm.len()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(&self.perm) {
            *o = x[p];
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        for (yi, &p) in y.iter().zip(&self.perm) {
            out[p] = *yi;
        }
    }
    fn label(&self) -> String {
        format!("P_{}", self.perm.len())
    }
}

#[derive(Debug, Clone)]
pub struct Diagonal {
    d: Vec<f64>,
}

impl Diagonal {
    pub fn new(d: Vec<f64>) -> Self {
        Diagonal { d }
    }

    pub fn entries(&self) -> &[f64] {
        &self.d
    }
}

impl LinearOperator for Diagonal {
    fn rows(&self) -> usize {
        self.d.len()
    }
    fn cols(&self) -> usize {
        self.d.len()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, xi), d) in out.iter_mut().zip(x).zip(&self.d) {
            *o = xi * d;
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        self.apply_into(y, out)
    }
    fn label(&self) -> String {
        format!("D_{}", self.d.len())
    }
}

/// Orthonormal Walsh–Hadamard matrix `H_N` (symmetric).
#[derive(Debug, Clone)]
pub struct Hadamard {
    n: usize,
}

impl Hadamard {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::NonPowerOfTwo(n));
        }
        Ok(Hadamard { n })
    }
}

impl LinearOperator for Hadamard {
    fn rows(&self) -> usize {
        self.n
    }
    fn cols(&self) -> usize {
        self.n
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
        fwht_in_place(out).expect("length checked at construction");
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        self.apply_into(y, out)
    }
    fn label(&self) -> String {
        format!("H_{}", self.n)
    }
}

/// Orthonormal DCT-II matrix `Q_N`.
#[derive(Debug, Clone)]
pub struct Dct {
    plan: DctPlan,
}

impl Dct {
    pub fn new(n: usize) -> Self {
        Dct {
            plan: DctPlan::new(n),
        }
    }
}

impl LinearOperator for Dct {
    fn rows(&self) -> usize {
        self.plan.len()
    }
    fn cols(&self) -> usize {
        self.plan.len()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
        self.plan.forward_in_place(out);
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
        self.plan.inverse_in_place(out);
    }
    fn label(&self) -> String {
        format!("Q_{}", self.plan.len())
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    m: DMatrix<f64>,
    label: String,
}

impl Dense {
    pub fn new(m: DMatrix<f64>) -> Self {
        Dense {
            m,
            label: "dense".into(),
        }
    }

    pub fn with_label(m: DMatrix<f64>, label: impl Into<String>) -> Self {
        Dense {
            m,
            label: label.into(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
}

impl LinearOperator for Dense {
    fn rows(&self) -> usize {
        self.m.nrows()
    }
    fn cols(&self) -> usize {
        self.m.ncols()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        // column-major storage: accumulate columns
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                let col = self.m.column(j);
                for (o, c) in out.iter_mut().zip(col.iter()) {
                    *o += xj * c;
                }
            }
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(self.m.column(j).as_slice(), y);
        }
    }
    fn label(&self) -> String {
        format!("{}[{}x{}]", self.label, self.m.nrows(), self.m.ncols())
    }
}

#[derive(Debug, Clone)]
pub struct Scaled {
    op: Op,
    c: f64,
}

impl Scaled {
    pub fn new(op: Op, c: f64) -> Self {
        Scaled { op, c }
    }
}

impl LinearOperator for Scaled {
    fn rows(&self) -> usize {
        self.op.rows()
    }
    fn cols(&self) -> usize {
        self.op.cols()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.op.apply_into(x, out);
        crate::linalg::scale(self.c, out);
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        self.op.adjoint_into(y, out);
        crate::linalg::scale(self.c, out);
    }
    fn label(&self) -> String {
        format!("{}*{}", self.c, self.op.label())
    }
    fn fork_state(&self) -> Option<Op> {
        self.op.fork_state().map(|op| Arc::new(Scaled { op, c: self.c }) as Op)
    }
}

/// Product `A_0 A_1 ⋯ A_k`; the forward map applies `A_k` first.
#[derive(Debug, Clone)]
pub struct Composed {
    ops: Vec<Op>,
}

impl LinearOperator for Composed {
    fn rows(&self) -> usize {
        self.ops[0].rows()
    }
    fn cols(&self) -> usize {
        self.ops[self.ops.len() - 1].cols()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let mut cur = x.to_vec();
        for op in self.ops.iter().skip(1).rev() {
            let mut next = vec![0.0; op.rows()];
            op.apply_into(&cur, &mut next);
            cur = next;
        }
        self.ops[0].apply_into(&cur, out);
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let last = self.ops.len() - 1;
        let mut cur = y.to_vec();
        for op in &self.ops[..last] {
            let mut next = vec![0.0; op.cols()];
            op.adjoint_into(&cur, &mut next);
            cur = next;
        }
        self.ops[last].adjoint_into(&cur, out);
    }
    fn label(&self) -> String {
        self.ops.iter().map(|o| o.label()).collect::<Vec<_>>().join("·")
    }
    fn fork_state(&self) -> Option<Op> {
        fork_all(&self.ops).map(|ops| Arc::new(Composed { ops }) as Op)
    }
}

/// `compose([A, B, C]) = A·B·C`.
pub fn compose(ops: Vec<Op>) -> Result<Op> {
    if ops.is_empty() {
        return Err(Error::InvalidArgument("compose needs at least one operator".into()));
    }
    for pair in ops.windows(2) {
        if pair[0].cols() != pair[1].rows() {
            return Err(Error::dims(
                pair[0].cols(),
                pair[1].rows(),
                format!("compose {} · {}", pair[0].label(), pair[1].label()),
            ));
        }
    }
    if ops.len() == 1 {
        return Ok(ops.into_iter().next().expect("one element"));
    }
    Ok(Arc::new(Composed { ops }))
}

/// Horizontal block concatenation `[A_1 A_2 ⋯ A_L]`.
#[derive(Debug, Clone)]
pub struct HStack {
    blocks: Vec<Op>,
    offsets: Vec<usize>,
}

impl HStack {
    pub fn new(blocks: Vec<Op>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("hstack needs at least one block".into()));
        }
        let rows = blocks[0].rows();
        let mut offsets = vec![0];
        for b in &blocks {
            if b.rows() != rows {
                return Err(Error::dims(rows, b.rows(), "hstack block rows"));
            }
            offsets.push(offsets[offsets.len() - 1] + b.cols());
        }
        Ok(HStack { blocks, offsets })
    }
}

impl LinearOperator for HStack {
    fn rows(&self) -> usize {
        self.blocks[0].rows()
    }
    fn cols(&self) -> usize {
        self.offsets[self.offsets.len() - 1]
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut tmp = vec![0.0; self.rows()];
        for (b, w) in self.blocks.iter().zip(self.offsets.windows(2)) {
            b.apply_into(&x[w[0]..w[1]], &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += t;
            }
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        for (b, w) in self.blocks.iter().zip(self.offsets.windows(2)) {
            b.adjoint_into(y, &mut out[w[0]..w[1]]);
        }
    }
    fn label(&self) -> String {
        format!(
            "[{}]",
            self.blocks.iter().map(|o| o.label()).collect::<Vec<_>>().join(" ")
        )
    }
    fn fork_state(&self) -> Option<Op> {
        fork_all(&self.blocks).map(|blocks| {
            Arc::new(HStack {
                blocks,
                offsets: self.offsets.clone(),
            }) as Op
        })
    }
}

/// `M × N` row selector: `(R x)_i = x_{rows[i]}`.
#[derive(Debug, Clone)]
pub struct RowSelect {
    rows: Vec<usize>,
    n: usize,
}

impl RowSelect {
    pub fn new(rows: Vec<usize>, n: usize) -> Result<Self> {
        if rows.iter().any(|&r| r >= n) {
            return Err(Error::InvalidArgument("row index out of range".into()));
        }
        Ok(RowSelect { rows, n })
    }

    pub fn selected(&self) -> &[usize] {
        &self.rows
    }
}

impl LinearOperator for RowSelect {
    fn rows(&self) -> usize {
        self.rows.len()
    }
    fn cols(&self) -> usize {
        self.n
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, &r) in out.iter_mut().zip(&self.rows) {
            *o = x[r];
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (yi, &r) in y.iter().zip(&self.rows) {
            out[r] += yi;
        }
    }
    fn label(&self) -> String {
        format!("R_{}x{}", self.rows.len(), self.n)
    }
}

#[derive(Debug, Clone)]
pub struct Transpose {
    op: Op,
}

impl Transpose {
    pub fn new(op: Op) -> Self {
        Transpose { op }
    }
}

impl LinearOperator for Transpose {
    fn rows(&self) -> usize {
        self.op.cols()
    }
    fn cols(&self) -> usize {
        self.op.rows()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.op.adjoint_into(x, out)
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        self.op.apply_into(y, out)
    }
    fn label(&self) -> String {
        format!("({})ᵀ", self.op.label())
    }
    fn fork_state(&self) -> Option<Op> {
        self.op.fork_state().map(|op| Arc::new(Transpose { op }) as Op)
    }
}

/// Gram operator `AᵀA` (self-adjoint, `N × N`).
#[derive(Debug, Clone)]
pub struct Gram {
    op: Op,
}

impl Gram {
    pub fn new(op: Op) -> Self {
        Gram { op }
    }
}

impl LinearOperator for Gram {
    fn rows(&self) -> usize {
        self.op.cols()
    }
    fn cols(&self) -> usize {
        self.op.cols()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let mut tmp = vec![0.0; self.op.rows()];
        self.op.apply_into(x, &mut tmp);
        self.op.adjoint_into(&tmp, out);
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        self.apply_into(y, out)
    }
    fn label(&self) -> String {
        format!("Gram({})", self.op.label())
    }
    fn fork_state(&self) -> Option<Op> {
        self.op.fork_state().map(|op| Arc::new(Gram { op }) as Op)
    }
}

/// `Σ_j c_j A_j` over operators of equal shape.
#[derive(Debug, Clone)]
pub struct LinearCombination {
    terms: Vec<(f64, Op)>,
}

impl LinearCombination {
    pub fn new(terms: Vec<(f64, Op)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("empty linear combination".into()));
        }
        let (r, c) = (terms[0].1.rows(), terms[0].1.cols());
        for (_, t) in &terms {
            if t.rows() != r || t.cols() != c {
                return Err(Error::dims(r * c, t.rows() * t.cols(), "linear combination shapes"));
            }
        }
        Ok(LinearCombination { terms })
    }

    /// `A - shift·I` for square `A`.
    pub fn shifted(op: Op, shift: f64) -> Result<Self> {
        let n = op.cols();
        if op.rows() != n {
            return Err(Error::dims(n, op.rows(), "shift of non-square operator"));
        }
        Self::new(vec![(1.0, op), (-shift, Arc::new(Identity::new(n)))])
    }
}

impl LinearOperator for LinearCombination {
    fn rows(&self) -> usize {
        self.terms[0].1.rows()
    }
    fn cols(&self) -> usize {
        self.terms[0].1.cols()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut tmp = vec![0.0; self.rows()];
        for (c, op) in &self.terms {
            op.apply_into(x, &mut tmp);
            crate::linalg::axpy(*c, &tmp, out);
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut tmp = vec![0.0; self.cols()];
        for (c, op) in &self.terms {
            op.adjoint_into(y, &mut tmp);
            crate::linalg::axpy(*c, &tmp, out);
        }
    }
    fn label(&self) -> String {
        self.terms
            .iter()
            .map(|(c, o)| format!("{}*{}", c, o.label()))
            .collect::<Vec<_>>()
            .join(" + ")
    }
    fn fork_state(&self) -> Option<Op> {
        let ops: Vec<Op> = self.terms.iter().map(|(_, o)| Arc::clone(o)).collect();
        fork_all(&ops).map(|ops| {
            Arc::new(LinearCombination {
                terms: self.terms.iter().map(|(c, _)| *c).zip(ops).collect(),
            }) as Op
        })
    }
}

/// `A^k` for square `A` (`k = 0` gives the identity).
pub fn power(op: &Op, k: usize) -> Result<Op> {
    let n = op.cols();
    if op.rows() != n {
        return Err(Error::dims(n, op.rows(), "power of non-square operator"));
    }
    if k == 0 {
        return Ok(Arc::new(Identity::new(n)));
    }
    compose(vec![Arc::clone(op); k])
}

/// Materialize an operator by probing the standard basis.
pub fn to_dense(op: &dyn LinearOperator) -> DMatrix<f64> {
    let (m, n) = (op.rows(), op.cols());
    let mut out = DMatrix::<f64>::zeros(m, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; m];
    for j in 0..n {
        e[j] = 1.0;
        op.apply_into(&e, &mut col);
        out.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    out
}

/// Largest relative violation of `⟨A u, v⟩ = ⟨u, Aᵀ v⟩` over random Gaussian probes.
pub fn adjoint_mismatch(op: &dyn LinearOperator, probes: usize, seed: Seed) -> f64 {
    let mut rng = seed.rng();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let u = gaussian_vec(op.cols(), 1.0, &mut rng);
        let v = gaussian_vec(op.rows(), 1.0, &mut rng);
        let lhs = dot(&op.forward(&u), &v);
        let rhs = dot(&u, &op.adjoint(&v));
        worst = worst.max((lhs - rhs).abs() / (norm(&u) * norm(&v)));
    }
    worst
}

pub const DEFAULT_NORM_TOL: f64 = 1e-8;
pub const DEFAULT_NORM_MAX_ITER: usize = 1000;

/// Largest singular value by power iteration on `AᵀA` from a seeded start.
///
/// The returned value is the square root of a Rayleigh quotient, so it never
/// exceeds the true norm beyond rounding. Convergence is declared when the
/// quotient moves by less than `tol` (relative) between iterates.
pub fn op_norm(a: &dyn LinearOperator, tol: f64, max_iter: usize, seed: Seed) -> Result<f64> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidArgument("op_norm needs tol > 0 and max_iter >= 1".into()));
    }
    let mut rng = seed.rng();
    let mut x = gaussian_vec(a.cols(), 1.0, &mut rng);
    let nx = norm(&x);
    crate::linalg::scale(1.0 / nx, &mut x);
    let mut tmp = vec![0.0; a.rows()];
    let mut y = vec![0.0; a.cols()];
    let mut prev = f64::NAN;
    for it in 0..max_iter {
        a.apply_into(&x, &mut tmp);
        a.adjoint_into(&tmp, &mut y);
        let rq = dot(&x, &y).max(0.0);
        let ny = norm(&y);
        if ny == 0.0 {
            return Ok(0.0);
        }
        if it > 0 && (rq - prev).abs() <= tol * rq.max(f64::MIN_POSITIVE) {
            return Ok(rq.sqrt());
        }
        prev = rq;
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / ny;
        }
    }
    Err(Error::NoConvergence {
        estimate: prev.sqrt(),
        iterations: max_iter,
    })
}
