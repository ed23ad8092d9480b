//! Samplers for the sensing ensembles and their target spectral measures.
//!
//! Every sampler is a pure function of its parameters and a [`Seed`]; the
//! independent random pieces (signs, permutations, masks, reflections, i.i.d.
//! entries) are drawn from distinct child seeds.

pub mod haar;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigenvalues;
use crate::rng::{Rng, Seed};
use crate::transforms::{
    compose, Dct, Dense, Diagonal, HStack, Hadamard, Identity, Op, Permutation,
    RowSelect, Scaled, SignDiagonal,
};

pub use haar::{explicit_haar, HouseholderHaar, SequentialHaar};

/// Largest `N` for which [`HaarMode::Explicit`] materializes `V`.
pub const EXPLICIT_HAAR_LIMIT: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleTag {
    SpikeSine,
    SpikeHwt,
    Mask,
    RandDct,
    Haar,
    PartialHadamard,
    Tiid,
    UnsignedSpikeSine,
    UnsignedSpikeHwt,
    UnsignedRandDct,
}

impl EnsembleTag {
    pub const ALL: [EnsembleTag; 10] = [
        EnsembleTag::SpikeSine,
        EnsembleTag::SpikeHwt,
        EnsembleTag::Mask,
        EnsembleTag::RandDct,
        EnsembleTag::Haar,
        EnsembleTag::PartialHadamard,
        EnsembleTag::Tiid,
        EnsembleTag::UnsignedSpikeSine,
        EnsembleTag::UnsignedSpikeHwt,
        EnsembleTag::UnsignedRandDct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnsembleTag::SpikeSine => "spike_sine",
            EnsembleTag::SpikeHwt => "spike_hwt",
            EnsembleTag::Mask => "mask",
            EnsembleTag::RandDct => "rand_dct",
            EnsembleTag::Haar => "haar",
            EnsembleTag::PartialHadamard => "partial_hadamard",
            EnsembleTag::Tiid => "tiid",
            EnsembleTag::UnsignedSpikeSine => "unsigned_spike_sine",
            EnsembleTag::UnsignedSpikeHwt => "unsigned_spike_hwt",
            EnsembleTag::UnsignedRandDct => "unsigned_rand_dct",
        }
    }
}

impl fmt::Display for EnsembleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnsembleTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EnsembleTag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnsupportedEnsemble(s.to_string()))
    }
}

/// Which orthogonal transform fills the second block of a spike frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeKind {
    Dct,
    Hadamard,
}

type MagnitudeSampler = Arc<dyn Fn(&mut Rng) -> f64 + Send + Sync>;

/// Law of the mask entries. Always symmetric: a magnitude is drawn and then
/// multiplied by an independent random sign.
#[derive(Clone)]
#[derive(Default)]
pub enum MaskDistribution {
    /// Unif[−1, 1]
    #[default]
    Uniform,
    Rademacher,
    Custom {
        magnitude: MagnitudeSampler,
        bound: f64,
    },
}


impl fmt::Debug for MaskDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskDistribution::Uniform => f.write_str("Uniform"),
            MaskDistribution::Rademacher => f.write_str("Rademacher"),
            MaskDistribution::Custom { bound, .. } => write!(f, "Custom(|D| <= {bound})"),
        }
    }
}

impl FromStr for MaskDistribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(MaskDistribution::Uniform),
            "rademacher" => Ok(MaskDistribution::Rademacher),
            other => Err(Error::InvalidArgument(format!(
                "unknown mask distribution '{other}'"
            ))),
        }
    }
}

impl MaskDistribution {
    /// Custom symmetric law; the magnitude sampler's output is clamped to `[0, bound]`.
    pub fn custom<F>(magnitude: F, bound: f64) -> Self
    where
        F: Fn(&mut Rng) -> f64 + Send + Sync + 'static,
    {
        MaskDistribution::Custom {
            magnitude: Arc::new(magnitude),
            bound,
        }
    }

    pub fn bound(&self) -> f64 {
        match self {
            MaskDistribution::Uniform | MaskDistribution::Rademacher => 1.0,
            MaskDistribution::Custom { bound, .. } => *bound,
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let mag = match self {
            MaskDistribution::Uniform => rng.gen::<f64>(),
            MaskDistribution::Rademacher => 1.0,
            MaskDistribution::Custom { magnitude, bound } => magnitude(rng).abs().min(*bound),
        };
        if rng.gen::<bool>() {
            mag
        } else {
            -mag
        }
    }

    /// `E[D^{2j}]`, exact for the built-in laws and Monte Carlo otherwise.
    pub fn even_moment(&self, j: u32, mc_samples: usize, seed: Seed) -> f64 {
        match self {
            MaskDistribution::Uniform => 1.0 / (2 * j + 1) as f64,
            MaskDistribution::Rademacher => 1.0,
            MaskDistribution::Custom { .. } => {
                let mut rng = seed.rng();
                let n = mc_samples.max(1);
                (0..n)
                    .map(|_| self.sample(&mut rng).powi(2 * j as i32))
                    .sum::<f64>()
                    / n as f64
            }
        }
    }
}

/// Limiting spectral law of `XᵀX`.
#[derive(Clone, Debug)]
pub enum SpectralMeasure {
    /// `(1 − α)δ₀ + αδ₁`
    Bernoulli { alpha: f64 },
    /// `(1 − 1/L)δ₀ + (1/L)·law(Σ_ℓ D_ℓ²)`
    Mask { l: usize, dist: MaskDistribution },
    Empirical { atoms: Vec<f64>, weights: Vec<f64> },
    /// Spectrum of `(TZ)ᵀ(TZ)` for `π` the law of `TᵀT` and aspect `α = M/N`.
    FreeMpConvolution { pi: Box<SpectralMeasure>, alpha: f64 },
}

impl SpectralMeasure {
    pub fn bernoulli(alpha: f64) -> Self {
        SpectralMeasure::Bernoulli { alpha }
    }

    /// Uniform weights on the given atoms.
    pub fn empirical(atoms: Vec<f64>) -> Self {
        let w = 1.0 / atoms.len().max(1) as f64;
        let weights = vec![w; atoms.len()];
        SpectralMeasure::Empirical { atoms, weights }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SpectralMeasure::Bernoulli { .. } => "bernoulli",
            SpectralMeasure::Mask { .. } => "mask_measure",
            SpectralMeasure::Empirical { .. } => "empirical",
            SpectralMeasure::FreeMpConvolution { .. } => "free_mp_convolution",
        }
    }

    /// Checks total mass 1 and nonnegative support where that is decidable.
    pub fn validate(&self) -> Result<()> {
        match self {
            SpectralMeasure::Bernoulli { alpha } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(Error::BadProbabilities(format!("alpha = {alpha}")));
                }
            }
            SpectralMeasure::Mask { l, .. } => {
                if *l < 1 {
                    return Err(Error::InvalidL(*l));
                }
            }
            SpectralMeasure::Empirical { atoms, weights } => {
                if atoms.len() != weights.len() {
                    return Err(Error::dims(atoms.len(), weights.len(), "empirical weights"));
                }
                let total: f64 = weights.iter().sum();
                if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::BadProbabilities(format!("total mass {total}")));
                }
                if let Some((i, v)) = atoms.iter().enumerate().find(|(_, a)| **a < 0.0) {
                    return Err(Error::NegativeLambda { index: i, value: *v });
                }
            }
            SpectralMeasure::FreeMpConvolution { pi, alpha } => {
                if *alpha <= 0.0 {
                    return Err(Error::BadProbabilities(format!("alpha = {alpha}")));
                }
                pi.validate()?;
            }
        }
        Ok(())
    }
}

/// How a Haar factor is realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaarMode {
    /// Householder reflections regenerated from seeds on every application.
    #[default]
    Lazy,
    /// Dense QR of a Gaussian matrix.
    Explicit,
    /// Conditional sampling on the queried span.
    Sequential,
}

impl FromStr for HaarMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lazy" => Ok(HaarMode::Lazy),
            "explicit" => Ok(HaarMode::Explicit),
            "sequential" => Ok(HaarMode::Sequential),
            other => Err(Error::InvalidArgument(format!("unknown haar mode '{other}'"))),
        }
    }
}

/// Entry law of the i.i.d. factor `Z` (unit variance, symmetric).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryLaw {
    #[default]
    Gaussian,
    Rademacher,
}

impl EntryLaw {
    fn sample(self, rng: &mut Rng) -> f64 {
        match self {
            EntryLaw::Gaussian => rng.sample(StandardNormal),
            EntryLaw::Rademacher => {
                if rng.gen::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

/// Left factor `T` of the `TZ` ensemble.
#[derive(Clone, Debug)]
pub enum TSpec {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl TSpec {
    pub fn identity(m: usize) -> Self {
        TSpec::Diagonal(vec![1.0; m])
    }
    fn dim(&self) -> (usize, usize) {
        match self {
            TSpec::Diagonal(d) => (d.len(), d.len()),
            TSpec::Dense(t) => (t.nrows(), t.ncols()),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Construction {
    SpikeOrtho { m: usize, kind: SpikeKind },
    Mask { r: Vec<f64> },
    RandDct { lambda: Vec<f64>, perm: Permutation },
    Haar,
    PartialHadamard,
    Tiid { pi: Vec<f64> },
    Unsigned,
}

/// A sampled sensing matrix together with its metadata.
#[derive(Clone, Debug)]
pub struct SensingOperator {
    pub op: Op,
    pub ensemble: EnsembleTag,
    pub seed: Seed,
    /// Eigenvalues of `XᵀX` (length `N`) when they are known by construction.
    pub lambda: Option<Vec<f64>>,
    pub measure: SpectralMeasure,
    /// Operator norm known by construction.
    pub known_op_norm: Option<f64>,
    /// Whether the construction ends in an independent random sign diagonal.
    pub sign_invariant: bool,
    pub(crate) construction: Construction,
}

impl SensingOperator {
    pub fn rows(&self) -> usize {
        self.op.rows()
    }
    pub fn cols(&self) -> usize {
        self.op.cols()
    }
    pub fn aspect(&self) -> f64 {
        self.rows() as f64 / self.cols() as f64
    }
    /// Row sums of squared masks for the mask ensemble.
    pub fn mask_r(&self) -> Option<&[f64]> {
        match &self.construction {
            Construction::Mask { r } => Some(r),
            _ => None,
        }
    }
    /// Spectrum of `TᵀT` for the `TZ` ensemble.
    pub fn tiid_pi(&self) -> Option<&[f64]> {
        match &self.construction {
            Construction::Tiid { pi } => Some(pi),
            _ => None,
        }
    }
    /// Independent copy of any sampling state (see [`crate::transforms::fork`]).
    pub fn fork(&self) -> SensingOperator {
        let mut c = self.clone();
        c.op = crate::transforms::fork(&self.op);
        c
    }
}

fn check_lambda(lambda: &[f64]) -> Result<()> {
    if let Some((i, v)) = lambda
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= 0.0 && v.is_finite()))
    {
        return Err(Error::NegativeLambda { index: i, value: *v });
    }
    Ok(())
}

fn max_sqrt(lambda: &[f64]) -> f64 {
    lambda.iter().fold(0.0f64, |m, v| m.max(*v)).sqrt()
}

fn spike_block(m: usize, kind: SpikeKind) -> Result<Op> {
    let o: Op = match kind {
        SpikeKind::Dct => Arc::new(Dct::new(m)),
        SpikeKind::Hadamard => Arc::new(Hadamard::new(m)?),
    };
    let frame: Op = Arc::new(HStack::new(vec![Arc::new(Identity::new(m)), o])?);
    Ok(Arc::new(Scaled::new(frame, std::f64::consts::FRAC_1_SQRT_2)))
}

/// `Λ` of the spike frames: `M` ones followed by `N − M` zeros.
pub fn spike_lambda(m: usize, n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n];
    l[..m.min(n)].fill(1.0);
    l
}

/// Spikes plus orthogonal frame `(1/√2)[I_M | O_M] S`, `N = 2M`.
pub fn sample_spike_ortho(m: usize, kind: SpikeKind, seed: Seed) -> Result<SensingOperator> {
    if m == 0 || (kind == SpikeKind::Hadamard && !m.is_power_of_two()) {
        return Err(Error::NonPowerOfTwo(m));
    }
    let n = 2 * m;
    let s: Op = Arc::new(SignDiagonal::sample(n, seed.derive("signs")));
    let op = compose(vec![spike_block(m, kind)?, s])?;
    Ok(SensingOperator {
        op,
        ensemble: match kind {
            SpikeKind::Dct => EnsembleTag::SpikeSine,
            SpikeKind::Hadamard => EnsembleTag::SpikeHwt,
        },
        seed,
        lambda: Some(spike_lambda(m, n)),
        measure: SpectralMeasure::bernoulli(0.5),
        known_op_norm: Some(1.0),
        sign_invariant: true,
        construction: Construction::SpikeOrtho { m, kind },
    })
}

/// Mask ensemble `[D₁H ⋯ D_L H] S` with Hadamard `H` of size `M`.
pub fn sample_mask(m: usize, l: usize, dist: &MaskDistribution, seed: Seed) -> Result<SensingOperator> {
    if l < 1 {
        return Err(Error::InvalidL(l));
    }
    if m == 0 || !m.is_power_of_two() {
        return Err(Error::NonPowerOfTwo(m));
    }
    let n = l * m;
    let h: Op = Arc::new(Hadamard::new(m)?);
    let mut r = vec![0.0; m];
    let mut blocks: Vec<Op> = Vec::with_capacity(l);
    for li in 0..l {
        let mut rng = seed.derive("mask").index(li as u64).rng();
        let d: Vec<f64> = (0..m).map(|_| dist.sample(&mut rng)).collect();
        for (ra, da) in r.iter_mut().zip(&d) {
            *ra += da * da;
        }
        blocks.push(compose(vec![Arc::new(Diagonal::new(d)), h.clone()])?);
    }
    let s: Op = Arc::new(SignDiagonal::sample(n, seed.derive("signs")));
    let op = compose(vec![Arc::new(HStack::new(blocks)?), s])?;
    let lambda = mask_lambda(&r, n);
    let norm = max_sqrt(&r);
    Ok(SensingOperator {
        op,
        ensemble: EnsembleTag::Mask,
        seed,
        lambda: Some(lambda),
        measure: SpectralMeasure::Mask {
            l,
            dist: dist.clone(),
        },
        known_op_norm: Some(norm),
        sign_invariant: true,
        construction: Construction::Mask { r },
    })
}

/// `Λ_Mask` padded to length `N`: the `M` values `R_a` followed by zeros.
pub fn mask_lambda(r: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n];
    l[..r.len()].copy_from_slice(r);
    l
}

fn rand_dct_op(lambda: &[f64], perm: &Permutation, signs: Option<Seed>) -> Result<Op> {
    let n = lambda.len();
    let sq: Vec<f64> = lambda.iter().map(|v| v.sqrt()).collect();
    let mut parts: Vec<Op> = vec![
        Arc::new(Diagonal::new(sq)),
        Arc::new(perm.clone()),
        Arc::new(Dct::new(n)),
    ];
    if let Some(s) = signs {
        parts.push(Arc::new(SignDiagonal::sample(n, s)));
    }
    compose(parts)
}

/// `Λ^{1/2} P Q_N S` with uniform permutation `P` and DCT-II matrix `Q_N`.
pub fn sample_rand_dct(lambda: &[f64], seed: Seed) -> Result<SensingOperator> {
    check_lambda(lambda)?;
    let n = lambda.len();
    let perm = Permutation::sample(n, seed.derive("perm"));
    let op = rand_dct_op(lambda, &perm, Some(seed.derive("signs")))?;
    Ok(SensingOperator {
        op,
        ensemble: EnsembleTag::RandDct,
        seed,
        lambda: Some(lambda.to_vec()),
        measure: SpectralMeasure::empirical(lambda.to_vec()),
        known_op_norm: Some(max_sqrt(lambda)),
        sign_invariant: true,
        construction: Construction::RandDct {
            lambda: lambda.to_vec(),
            perm,
        },
    })
}

/// `Λ^{1/2} Vᵀ` with `V` Haar on `O(N)`.
pub fn sample_haar(lambda: &[f64], seed: Seed, mode: HaarMode) -> Result<SensingOperator> {
    check_lambda(lambda)?;
    let n = lambda.len();
    let hseed = seed.derive("haar");
    let vt: Op = match mode {
        HaarMode::Lazy => Arc::new(HouseholderHaar::new(n, hseed)),
        HaarMode::Sequential => Arc::new(SequentialHaar::new(n, hseed)),
        HaarMode::Explicit => {
            if n > EXPLICIT_HAAR_LIMIT {
                return Err(Error::ExplicitTooLarge {
                    n,
                    limit: EXPLICIT_HAAR_LIMIT,
                });
            }
            let v = explicit_haar(n, hseed);
            Arc::new(Dense::with_label(v.transpose(), format!("Vᵀ_explicit_{n}")))
        }
    };
    let sq: Vec<f64> = lambda.iter().map(|v| v.sqrt()).collect();
    let op = compose(vec![Arc::new(Diagonal::new(sq)), vt])?;
    Ok(SensingOperator {
        op,
        ensemble: EnsembleTag::Haar,
        seed,
        lambda: Some(lambda.to_vec()),
        measure: SpectralMeasure::empirical(lambda.to_vec()),
        known_op_norm: Some(max_sqrt(lambda)),
        sign_invariant: true,
        construction: Construction::Haar,
    })
}

/// `M` uniformly chosen rows of `H_N`, times random signs.
pub fn sample_partial_hadamard(m: usize, n: usize, seed: Seed) -> Result<SensingOperator> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NonPowerOfTwo(n));
    }
    if m < 1 || m > n {
        return Err(Error::BadAspect { m, n });
    }
    let perm = Permutation::sample(n, seed.derive("rows"));
    let rows = perm.indices()[..m].to_vec();
    let op = compose(vec![
        Arc::new(RowSelect::new(rows, n)?),
        Arc::new(Hadamard::new(n)?),
        Arc::new(SignDiagonal::sample(n, seed.derive("signs"))),
    ])?;
    Ok(SensingOperator {
        op,
        ensemble: EnsembleTag::PartialHadamard,
        seed,
        lambda: Some(spike_lambda(m, n)),
        measure: SpectralMeasure::bernoulli(m as f64 / n as f64),
        known_op_norm: Some(1.0),
        sign_invariant: true,
        construction: Construction::PartialHadamard,
    })
}

/// `X = T Z` with `Z` an `M×N` matrix of i.i.d. entries of variance `1/N`.
pub fn sample_tiid(t: &TSpec, m: usize, n: usize, law: EntryLaw, seed: Seed) -> Result<SensingOperator> {
    let (tr, tc) = t.dim();
    if tr != m || tc != m {
        return Err(Error::dims(m, tc, "T must be M×M"));
    }
    if n == 0 {
        return Err(Error::BadAspect { m, n });
    }
    let mut rng = seed.derive("z").rng();
    let s = 1.0 / (n as f64).sqrt();
    // column-major fill keeps the draw order independent of T
    let z = DMatrix::<f64>::from_fn(m, n, |_, _| s * law.sample(&mut rng));
    let (x, pi) = match t {
        TSpec::Diagonal(d) => {
            let mut x = z;
            for (i, di) in d.iter().enumerate() {
                x.row_mut(i).scale_mut(*di);
            }
            (x, d.iter().map(|v| v * v).collect::<Vec<_>>())
        }
        TSpec::Dense(tm) => (tm * z, symmetric_eigenvalues(&(tm.transpose() * tm))),
    };
    let alpha = m as f64 / n as f64;
    Ok(SensingOperator {
        op: Arc::new(Dense::with_label(x, format!("TZ_{m}x{n}"))),
        ensemble: EnsembleTag::Tiid,
        seed,
        lambda: None,
        measure: SpectralMeasure::FreeMpConvolution {
            pi: Box::new(SpectralMeasure::empirical(pi.clone())),
            alpha,
        },
        known_op_norm: None,
        sign_invariant: matches!(law, EntryLaw::Gaussian | EntryLaw::Rademacher),
        construction: Construction::Tiid { pi },
    })
}

/// Same construction with the random sign diagonal replaced by the identity.
pub fn unsigned_variant(x: &SensingOperator) -> Result<SensingOperator> {
    let (op, tag) = match &x.construction {
        Construction::SpikeOrtho { m, kind } => (
            spike_block(*m, *kind)?,
            match kind {
                SpikeKind::Dct => EnsembleTag::UnsignedSpikeSine,
                SpikeKind::Hadamard => EnsembleTag::UnsignedSpikeHwt,
            },
        ),
        Construction::RandDct { lambda, perm } => {
            (rand_dct_op(lambda, perm, None)?, EnsembleTag::UnsignedRandDct)
        }
        _ => return Err(Error::UnsupportedEnsemble(x.ensemble.to_string())),
    };
    Ok(SensingOperator {
        op,
        ensemble: tag,
        seed: x.seed,
        lambda: x.lambda.clone(),
        measure: x.measure.clone(),
        known_op_norm: x.known_op_norm,
        sign_invariant: false,
        construction: Construction::Unsigned,
    })
}
