use std::fmt;
use std::sync::Arc;

use rustdct::{DctPlanner, TransformType2And3};

/// Orthonormal DCT-II of a fixed length, planned once and shared.
///
/// Row `k` of the matrix is `w_k cos(pi k (2n + 1) / 2N)` with `w_0 = sqrt(1/N)`
/// and `w_k = sqrt(2/N)` otherwise.
#[derive(Clone)]
pub struct DctPlan {
    n: usize,
    plan: Arc<dyn TransformType2And3<f64>>,
}

impl fmt::Debug for DctPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DctPlan").field("n", &self.n).finish()
    }
}

impl DctPlan {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "DCT length must be positive");
        let mut planner = DctPlanner::new();
        DctPlan {
            n,
            plan: planner.plan_dct2(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `Q_N v` in place.
    pub fn forward_in_place(&self, buf: &mut [f64]) {
        assert_eq!(buf.len(), self.n, "DCT length mismatch");
        self.plan.process_dct2(buf);
        let n = self.n as f64;
        buf[0] *= (1.0 / n).sqrt();
        let w = (2.0 / n).sqrt();
        for v in &mut buf[1..] {
            *v *= w;
        }
    }

    /// `Q_Nᵀ v` in place.
    pub fn inverse_in_place(&self, buf: &mut [f64]) {
        assert_eq!(buf.len(), self.n, "DCT length mismatch");
        let n = self.n as f64;
        buf[0] *= 2.0 * (1.0 / n).sqrt();
        let w = (2.0 / n).sqrt();
        for v in &mut buf[1..] {
            *v *= w;
        }
        self.plan.process_dct3(buf);
    }
}

pub fn dct(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    DctPlan::new(v.len()).forward_in_place(&mut out);
    out
}

pub fn idct(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    DctPlan::new(v.len()).inverse_in_place(&mut out);
    out
}
