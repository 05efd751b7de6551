//! Minimal dense linear algebra for the regression code: Householder QR
//! least squares with rank detection, and triangular inversion for
//! coefficient covariances. Everything is row-major `Vec<f64>`.

/// Least-squares solution of `X b = y` via Householder QR.
#[derive(Debug)]
pub(crate) struct Lsq {
    pub beta: Vec<f64>,
    /// The `p x p` upper-triangular factor `R` (row-major); `X^T X = R^T R`.
    pub r: Vec<f64>,
    /// Residual sum of squares, read off the rotated right-hand side.
    pub rss: f64,
}

/// Relative pivot threshold for declaring rank deficiency.
const PIVOT_TOL: f64 = 1e-10;

/// Factor and solve. `x` is row-major `n x p` with `n >= p >= 1`. On rank
/// deficiency returns `Err(j)` with the offending column index.
pub(crate) fn householder_lsq(x: &[f64], n: usize, p: usize, y: &[f64]) -> Result<Lsq, usize> {
    debug_assert_eq!(x.len(), n * p);
    debug_assert_eq!(y.len(), n);
    debug_assert!(n >= p && p >= 1);

    let mut a = x.to_vec();
    let mut qty = y.to_vec();
    let mut col_scale = vec![0.0; p];
    for j in 0..p {
        col_scale[j] = (0..n).map(|i| a[i * p + j] * a[i * p + j]).sum::<f64>().sqrt();
    }

    let mut v = vec![0.0; n];
    for k in 0..p {
        let norm = (k..n).map(|i| a[i * p + k] * a[i * p + k]).sum::<f64>().sqrt();
        if norm <= PIVOT_TOL * col_scale[k] {
            return Err(k);
        }
        let akk = a[k * p + k];
        let alpha = if akk >= 0.0 { -norm } else { norm };
        v[k] = akk - alpha;
        for i in k + 1..n {
            v[i] = a[i * p + k];
        }
        let vtv: f64 = (k..n).map(|i| v[i] * v[i]).sum();
        if vtv > 0.0 {
            for j in k..p {
                let dot: f64 = (k..n).map(|i| v[i] * a[i * p + j]).sum();
                let coef = 2.0 * dot / vtv;
                for i in k..n {
                    a[i * p + j] -= coef * v[i];
                }
            }
            let dot: f64 = (k..n).map(|i| v[i] * qty[i]).sum();
            let coef = 2.0 * dot / vtv;
            for i in k..n {
                qty[i] -= coef * v[i];
            }
        }
        a[k * p + k] = alpha; // reflection maps the column onto +-norm * e_k
        for i in k + 1..n {
            a[i * p + k] = 0.0;
        }
    }

    // Relative check across pivots (columns can be individually healthy but
    // mutually dependent).
    let max_pivot = (0..p).map(|k| a[k * p + k].abs()).fold(0.0, f64::max);
    for k in 0..p {
        if a[k * p + k].abs() < PIVOT_TOL * max_pivot {
            return Err(k);
        }
    }

    let mut r = vec![0.0; p * p];
    for i in 0..p {
        for j in i..p {
            r[i * p + j] = a[i * p + j];
        }
    }
    let beta = back_substitute(&r, p, &qty[..p]);
    let rss: f64 = qty[p..].iter().map(|&q| q * q).sum();
    Ok(Lsq { beta, r, rss })
}

/// Solve `R x = rhs` for upper-triangular `R` (non-singular by the caller's
/// pivot checks).
pub(crate) fn back_substitute(r: &[f64], p: usize, rhs: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut acc = rhs[i];
        for j in i + 1..p {
            acc -= r[i * p + j] * x[j];
        }
        x[i] = acc / r[i * p + i];
    }
    x
}

/// Inverse of an upper-triangular matrix (row-major `p x p`).
pub(crate) fn invert_upper_triangular(r: &[f64], p: usize) -> Vec<f64> {
    let mut inv = vec![0.0; p * p];
    for col in 0..p {
        let mut e = vec![0.0; p];
        e[col] = 1.0;
        let x = back_substitute(r, p, &e);
        for row in 0..p {
            inv[row * p + col] = x[row];
        }
    }
    inv
}

/// Diagonal of `(X^T X)^{-1} = R^{-1} R^{-T}` from the triangular factor.
pub(crate) fn normal_inverse_diagonal(r: &[f64], p: usize) -> Vec<f64> {
    let inv = invert_upper_triangular(r, p);
    (0..p)
        .map(|j| (j..p).map(|k| inv[j * p + k] * inv[j * p + k]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_through_origin() {
        let x = [1.0, 2.0, 3.0];
        let y = [2.0, 4.0, 6.0];
        let lsq = householder_lsq(&x, 3, 1, &y).unwrap();
        assert!((lsq.beta[0] - 2.0).abs() < 1e-14);
        assert!(lsq.rss < 1e-24);
    }

    #[test]
    fn square_system_solved_exactly() {
        // [[2, 1], [1, 3]] b = [5, 10]  =>  b = [1, 3]
        let x = [2.0, 1.0, 1.0, 3.0];
        let y = [5.0, 10.0];
        let lsq = householder_lsq(&x, 2, 2, &y).unwrap();
        assert!((lsq.beta[0] - 1.0).abs() < 1e-12);
        assert!((lsq.beta[1] - 3.0).abs() < 1e-12);
        assert!(lsq.rss.abs() < 1e-20);
    }

    #[test]
    fn overdetermined_matches_normal_equations_by_hand() {
        // Fit y = b0 + b1 t at t = 0,1,2 with y = 1,2,4.
        // Normal equations [[3,3],[3,5]] b = [7,10] give b0 = 5/6, b1 = 3/2.
        let x = [1.0, 0.0, 1.0, 1.0, 1.0, 2.0];
        let y = [1.0, 2.0, 4.0];
        let lsq = householder_lsq(&x, 3, 2, &y).unwrap();
        assert!((lsq.beta[0] - 5.0 / 6.0).abs() < 1e-12, "{}", lsq.beta[0]);
        assert!((lsq.beta[1] - 1.5).abs() < 1e-12, "{}", lsq.beta[1]);
        // Residuals: y - Xb = [1/6, -1/3, 1/6] => rss = 1/6.
        assert!((lsq.rss - 1.0 / 6.0).abs() < 1e-12, "{}", lsq.rss);
    }

    #[test]
    fn duplicate_column_reported_as_singular() {
        let x = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        let y = [1.0, 2.0, 3.0];
        assert_eq!(householder_lsq(&x, 3, 2, &y).unwrap_err(), 1);
    }

    #[test]
    fn zero_column_reported_as_singular() {
        let x = [1.0, 0.0, 2.0, 0.0, 3.0, 0.0];
        let y = [1.0, 2.0, 3.0];
        assert_eq!(householder_lsq(&x, 3, 2, &y).unwrap_err(), 1);
    }

    #[test]
    fn r_factor_reproduces_normal_matrix() {
        let x = [1.0, 0.5, 2.0, -1.0, 0.3, 2.2, -0.7, 0.9];
        let y = [0.0; 4];
        let lsq = householder_lsq(&x, 4, 2, &y).unwrap();
        // X^T X = R^T R
        for i in 0..2 {
            for j in 0..2 {
                let xtx: f64 = (0..4).map(|r| x[r * 2 + i] * x[r * 2 + j]).sum();
                let rtr: f64 = (0..2).map(|k| lsq.r[k * 2 + i] * lsq.r[k * 2 + j]).sum();
                assert!((xtx - rtr).abs() < 1e-12, "({i},{j}): {xtx} vs {rtr}");
            }
        }
    }

    #[test]
    fn triangular_inverse_is_exact() {
        let r = [2.0, 1.0, -3.0, 0.0, 4.0, 0.5, 0.0, 0.0, -1.5];
        let inv = invert_upper_triangular(&r, 3);
        for i in 0..3 {
            for j in 0..3 {
                let prod: f64 = (0..3).map(|k| r[i * 3 + k] * inv[k * 3 + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod - expect).abs() < 1e-12, "({i},{j}) = {prod}");
            }
        }
    }
}
