use crate::error::{Error, Result};

/// In-place orthonormal Walsh–Hadamard transform in natural (Sylvester) order.
///
/// The matrix is symmetric and its first row and column are constant, so the
/// transform is its own inverse.
pub fn fwht_in_place(data: &mut [f64]) -> Result<()> {
    let n = data.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NonPowerOfTwo(n));
    }
    let mut h = 1;
    while h < n {
        for block in data.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
    let s = 1.0 / (n as f64).sqrt();
    for v in data.iter_mut() {
        *v *= s;
    }
    Ok(())
}

/// Returns `H_N v`.
pub fn fwht(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    fwht_in_place(&mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_vec, max_abs_diff, norm};
    use crate::rng::Seed;

    #[test]
    fn first_column_of_h2() {
        let out = fwht(&[1.0, 0.0]).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((out[0] - r).abs() < 1e-15 && (out[1] - r).abs() < 1e-15);
    }

    #[test]
    fn involution_and_isometry() {
        let mut rng = Seed(3).rng();
        let v = gaussian_vec(1024, 1.0, &mut rng);
        let w = fwht(&v).unwrap();
        assert!((norm(&w) / norm(&v) - 1.0).abs() < 1e-12);
        let back = fwht(&w).unwrap();
        assert!(max_abs_diff(&back, &v) < 1e-12);
    }

    #[test]
    fn entries_are_delocalized() {
        let n = 64;
        let mut max_entry = 0.0f64;
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let col = fwht(&e).unwrap();
            for c in col {
                max_entry = max_entry.max(c.abs());
            }
        }
        assert!((max_entry - (n as f64).powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert_eq!(fwht(&[1.0, 2.0, 3.0]), Err(Error::NonPowerOfTwo(3)));
        assert_eq!(fwht(&[]), Err(Error::NonPowerOfTwo(0)));
    }
}
