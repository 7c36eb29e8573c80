//! Small dense helpers on row-major `Vec<f64>` storage used in the hot loops
//! (penalized normal equations, Kalman updates).

/// Lower Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub(crate) struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factors `a` (row-major, `n x n`, only the lower triangle is read).
    /// On failure returns the column whose pivot was not positive.
    pub(crate) fn factor(a: &[f64], n: usize) -> Result<Self, usize> {
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let row_j = j * n;
            let mut d = a[row_j + j];
            for k in 0..j {
                d -= l[row_j + k] * l[row_j + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(j);
            }
            let djj = d.sqrt();
            l[row_j + j] = djj;
            for i in j + 1..n {
                let row_i = i * n;
                let mut s = a[row_i + j];
                for k in 0..j {
                    s -= l[row_i + k] * l[row_j + k];
                }
                l[row_i + j] = s / djj;
            }
        }
        Ok(Self { n, l })
    }

    /// Solves `A x = b` in place.
    pub(crate) fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// Full inverse `A^{-1}`, row-major.
    pub(crate) fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        // W = L^{-1}, lower triangular
        let mut w = vec![0.0; n * n];
        for j in 0..n {
            w[j * n + j] = 1.0 / self.l[j * n + j];
            for i in j + 1..n {
                let mut s = 0.0;
                for k in j..i {
                    s -= self.l[i * n + k] * w[k * n + j];
                }
                w[i * n + j] = s / self.l[i * n + i];
            }
        }
        // A^{-1} = W' W
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in i..n {
                    s += w[k * n + i] * w[k * n + j];
                }
                inv[i * n + j] = s;
                inv[j * n + i] = s;
            }
        }
        inv
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_and_inverse_agree() {
        let a = vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let c = Cholesky::factor(&a, 3).unwrap();
        let mut b = vec![1.0, 2.0, 3.0];
        c.solve_in_place(&mut b);
        let inv = c.inverse();
        for i in 0..3 {
            let direct: f64 = (0..3).map(|j| inv[i * 3 + j] * [1.0, 2.0, 3.0][j]).sum();
            assert!((direct - b[i]).abs() < 1e-12);
        }
        for i in 0..3 {
            for j in 0..3 {
                let prod: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                assert!((prod - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reports_failing_pivot() {
        let a = vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        assert_eq!(Cholesky::factor(&a, 3).unwrap_err(), 2);
    }
}
