//! Small dense LU factorization, generic over the scalar type.

use crate::scalar::Real;

/// Row-major square matrix factored as `P·A = L·U` with partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
}

impl<T: Real> Lu<T> {
    /// Factors `a` (row-major `n x n`). Returns `None` when a pivot is exactly zero
    /// or non-finite.
    pub fn factor(mut a: Vec<T>, n: usize) -> Option<Self> {
        assert_eq!(a.len(), n * n);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut piv = k;
            let mut best = a[k * n + k].abs();
            for r in (k + 1)..n {
                let v = a[r * n + k].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best == T::zero() || !best.is_finite() {
                return None;
            }
            if piv != k {
                for c in 0..n {
                    a.swap(k * n + c, piv * n + c);
                }
                perm.swap(k, piv);
            }
            let d = a[k * n + k];
            for r in (k + 1)..n {
                let f = a[r * n + k] / d;
                a[r * n + k] = f;
                if f != T::zero() {
                    for c in (k + 1)..n {
                        let u = a[k * n + c];
                        a[r * n + c] = a[r * n + c] - f * u;
                    }
                }
            }
        }
        Some(Self { n, lu: a, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A·x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let mut s = x[r];
            for c in 0..r {
                s = s - self.lu[r * n + c] * x[c];
            }
            x[r] = s;
        }
        for r in (0..n).rev() {
            let mut s = x[r];
            for c in (r + 1)..n {
                s = s - self.lu[r * n + c] * x[c];
            }
            x[r] = s / self.lu[r * n + r];
        }
        b.copy_from_slice(&x);
    }

    /// Dense inverse, row-major.
    pub fn inverse(&self) -> Vec<T> {
        let n = self.n;
        let mut inv = vec![T::zero(); n * n];
        let mut col = vec![T::zero(); n];
        for j in 0..n {
            col.iter_mut().for_each(|v| *v = T::zero());
            col[j] = T::one();
            self.solve_in_place(&mut col);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }

    /// Smallest pivot magnitude relative to the largest, a cheap rank indicator.
    pub fn pivot_ratio(&self) -> T {
        let n = self.n;
        let mut lo = T::infinity();
        let mut hi = T::zero();
        for k in 0..n {
            let v = self.lu[k * n + k].abs();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi == T::zero() {
            T::zero()
        } else {
            lo / hi
        }
    }
}

/// Induced 1-norm (max absolute column sum) of a row-major square matrix.
pub fn norm1<T: Real>(a: &[T], n: usize) -> T {
    (0..n)
        .map(|c| (0..n).fold(T::zero(), |s, r| s + a[r * n + c].abs()))
        .fold(T::zero(), T::max)
}

/// Reciprocal 1-norm condition number `1 / (‖A‖₁ ‖A⁻¹‖₁)`, or 0 if singular.
pub fn rcond1<T: Real>(a: &[T], n: usize) -> T {
    match Lu::factor(a.to_vec(), n) {
        Some(lu) => {
            let inv = lu.inverse();
            let d = norm1(a, n) * norm1(&inv, n);
            if d.is_finite() && d > T::zero() {
                T::one() / d
            } else {
                T::zero()
            }
        }
        None => T::zero(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let a = vec![2.0, 1.0, 1.0, 1.0, 3.0, 2.0, 1.0, 0.0, 0.0];
        let lu = Lu::factor(a.clone(), 3).unwrap();
        let mut b = vec![4.0, 5.0, 6.0];
        lu.solve_in_place(&mut b);
        for r in 0..3 {
            let s: f64 = (0..3).map(|c| a[r * 3 + c] * b[c]).sum();
            assert!((s - [4.0, 5.0, 6.0][r]).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_detected() {
        assert!(Lu::factor(vec![1.0, 2.0, 2.0, 4.0], 2).is_none());
        assert_eq!(rcond1(&[1.0, 2.0, 2.0, 4.0], 2), 0.0);
        assert!((rcond1(&[1.0f64, 0.0, 0.0, 1.0], 2) - 1.0).abs() < 1e-15);
    }
}
