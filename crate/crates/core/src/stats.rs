//! Regression machinery: ordinary least squares with standard errors and
//! R², and single-component partial least squares.
//!
//! OLS is solved by Householder QR (numerically stable against the mildly
//! collinear separability columns); standard errors come from
//! `sigma^2 (X^T X)^{-1}` via the triangular factor. PLS1 is the standard
//! single-response NIPALS step, which for one component reduces to the
//! normalized `X^T y` direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// A named-column design matrix with `n` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    names: Vec<String>,
    /// Row-major `n x p`.
    data: Vec<f64>,
    n: usize,
    p: usize,
}

impl DesignMatrix {
    /// Build from named columns; all columns must be equal-length, finite,
    /// and uniquely named.
    pub fn from_columns(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<DesignMatrix> {
        if names.len() != columns.len() {
            return Err(Error::shape(
                "design matrix",
                format!("{} column names", columns.len()),
                format!("{}", names.len()),
            ));
        }
        if columns.is_empty() {
            return Err(Error::invalid("design matrix", "no columns"));
        }
        let n = columns[0].len();
        if n == 0 {
            return Err(Error::invalid("design matrix", "columns are empty"));
        }
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != n {
                return Err(Error::shape(
                    "design matrix",
                    format!("column {name:?} of length {n}"),
                    format!("{}", col.len()),
                ));
            }
            if let Some(bad) = col.iter().find(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    "design matrix",
                    format!("column {name:?} contains non-finite value {bad}"),
                ));
            }
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(Error::invalid(
                    "design matrix",
                    format!("duplicate column name {name:?}"),
                ));
            }
        }
        let p = columns.len();
        let mut data = vec![0.0; n * p];
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * p + j] = v;
            }
        }
        Ok(DesignMatrix { names, data, n, p })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.data[i * self.p + j]).collect()
    }

    /// Row-major data; used by the solvers.
    pub fn rows(&self) -> &[f64] {
        &self.data
    }

    fn with_intercept(&self) -> DesignMatrix {
        let p = self.p + 1;
        let mut data = vec![1.0; self.n * p];
        for i in 0..self.n {
            data[i * p + 1..(i + 1) * p].copy_from_slice(&self.data[i * self.p..(i + 1) * self.p]);
        }
        let mut names = vec!["intercept".to_string()];
        names.extend(self.names.iter().cloned());
        DesignMatrix {
            names,
            data,
            n: self.n,
            p,
        }
    }
}

/// A fitted least-squares model: named coefficients, standard errors, fit
/// quality, and residuals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    /// Coefficient names; `"intercept"` first when one was fitted.
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Per-coefficient standard errors from `sigma^2 (X^T X)^{-1}`.
    pub standard_errors: Vec<f64>,
    /// Against the centered total sum of squares when an intercept is
    /// present, uncentered otherwise.
    pub r_squared: f64,
    pub residuals: Vec<f64>,
    pub n: usize,
    pub p: usize,
    pub intercept: bool,
}

impl RegressionResult {
    /// Coefficient and standard error by column name.
    pub fn coefficient(&self, name: &str) -> Option<(f64, f64)> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| (self.coefficients[j], self.standard_errors[j]))
    }

    /// Predict on new rows; the new matrix must carry exactly the fitted
    /// non-intercept columns, in order.
    pub fn predict(&self, x_new: &DesignMatrix) -> Result<Vec<f64>> {
        let expected: Vec<String> = if self.intercept {
            self.names[1..].to_vec()
        } else {
            self.names.clone()
        };
        if x_new.names() != expected.as_slice() {
            return Err(Error::shape(
                "regression predict",
                format!("columns {expected:?}"),
                format!("{:?}", x_new.names()),
            ));
        }
        let offset = usize::from(self.intercept);
        let base = if self.intercept {
            self.coefficients[0]
        } else {
            0.0
        };
        Ok((0..x_new.n())
            .map(|i| {
                let row = &x_new.rows()[i * x_new.p()..(i + 1) * x_new.p()];
                base + row
                    .iter()
                    .zip(&self.coefficients[offset..])
                    .map(|(&x, &b)| x * b)
                    .sum::<f64>()
            })
            .collect())
    }
}

/// Least-squares fit of `y` on the design columns, optionally with an
/// intercept prepended. Standard errors use `sigma^2 = RSS / (n - p)`.
pub fn ols_fit(x: &DesignMatrix, y: &[f64], intercept: bool) -> Result<RegressionResult> {
    if y.len() != x.n() {
        return Err(Error::shape(
            "ols_fit",
            format!("{} response values", x.n()),
            format!("{}", y.len()),
        ));
    }
    if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "ols_fit",
            format!("response contains non-finite value {bad}"),
        ));
    }
    let design = if intercept {
        x.with_intercept()
    } else {
        x.clone()
    };
    let (n, p) = (design.n(), design.p());
    if n <= p {
        return Err(Error::DegreesOfFreedom { n, p });
    }
    let lsq = linalg::householder_lsq(design.rows(), n, p, y).map_err(|col| {
        Error::SingularDesign {
            column: design.names()[col].clone(),
            hint: " (the column is constant or a combination of earlier ones; \
                   widen the task sampling or drop the column)"
                .to_string(),
        }
    })?;

    let sigma2 = lsq.rss / (n - p) as f64;
    let cov_diag = linalg::normal_inverse_diagonal(&lsq.r, p);
    let standard_errors = cov_diag.iter().map(|&c| (sigma2 * c).sqrt()).collect();

    let mut residuals = y.to_vec();
    for (i, res) in residuals.iter_mut().enumerate() {
        let row = &design.rows()[i * p..(i + 1) * p];
        *res -= row.iter().zip(&lsq.beta).map(|(&xv, &b)| xv * b).sum::<f64>();
    }

    let tss = if intercept {
        let mean = y.iter().sum::<f64>() / n as f64;
        y.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>()
    } else {
        y.iter().map(|&v| v * v).sum::<f64>()
    };
    // Constant response with an intercept fits exactly.
    let r_squared = if tss > 0.0 { 1.0 - lsq.rss / tss } else { 1.0 };

    Ok(RegressionResult {
        names: design.names().to_vec(),
        coefficients: lsq.beta,
        standard_errors,
        r_squared,
        residuals,
        n,
        p,
        intercept,
    })
}

/// Single-component partial least squares on centered data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlsModel {
    /// Unit projection direction (proportional to `X^T y` on centered
    /// data); all-zero in the degenerate no-covariance case.
    pub x_weights: Vec<f64>,
    /// Column loadings `X^T t / (t^T t)`.
    pub x_loadings: Vec<f64>,
    /// Response loading `y^T t / (t^T t)`.
    pub y_loading: f64,
    pub x_mean: Vec<f64>,
    pub y_mean: f64,
    /// R² of `y` regressed on the 1-D projection.
    pub r_squared: f64,
}

impl PlsModel {
    /// Predict responses for row-major `x` (`rows x p`).
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.x_mean.len();
        if x.is_empty() || x.len() % p != 0 {
            return Err(Error::shape(
                "pls predict",
                format!("rows with {p} features"),
                format!("{} values", x.len()),
            ));
        }
        Ok(x.chunks_exact(p)
            .map(|row| {
                let t: f64 = row
                    .iter()
                    .zip(&self.x_mean)
                    .zip(&self.x_weights)
                    .map(|((&xv, &m), &w)| (xv - m) * w)
                    .sum();
                self.y_mean + self.y_loading * t
            })
            .collect())
    }
}

/// Fit one PLS component of `y` on row-major `x` (`n x p`). Inputs are
/// centered internally; a zero-variance response is an error, while zero
/// covariance between `x` and `y` yields the degenerate flat model with
/// R² = 0.
pub fn pls1_fit(x: &[f64], n: usize, p: usize, y: &[f64]) -> Result<PlsModel> {
    if n == 0 || p == 0 || x.len() != n * p {
        return Err(Error::shape(
            "pls1_fit",
            format!("{n} x {p} matrix"),
            format!("{} values", x.len()),
        ));
    }
    if y.len() != n {
        return Err(Error::shape(
            "pls1_fit",
            format!("{n} response values"),
            format!("{}", y.len()),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("pls1_fit", "non-finite values"));
    }

    let mut x_mean = vec![0.0; p];
    for row in x.chunks_exact(p) {
        for (m, &v) in x_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in x_mean.iter_mut() {
        *m /= n as f64;
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;

    let yc: Vec<f64> = y.iter().map(|&v| v - y_mean).collect();
    let y_ss: f64 = yc.iter().map(|&v| v * v).sum();
    if y_ss < 1e-24 {
        return Err(Error::Degenerate {
            what: "pls response",
            why: "response has zero variance".to_string(),
        });
    }

    // w proportional to Xc^T yc.
    let mut w = vec![0.0; p];
    for (row, &yv) in x.chunks_exact(p).zip(&yc) {
        for ((wj, &xv), &m) in w.iter_mut().zip(row).zip(&x_mean) {
            *wj += (xv - m) * yv;
        }
    }
    let w_norm = w.iter().map(|&v| v * v).sum::<f64>().sqrt();
    if w_norm < 1e-12 {
        // No covariance direction: flat model predicting the mean.
        return Ok(PlsModel {
            x_weights: vec![0.0; p],
            x_loadings: vec![0.0; p],
            y_loading: 0.0,
            x_mean,
            y_mean,
            r_squared: 0.0,
        });
    }
    for wj in w.iter_mut() {
        *wj /= w_norm;
    }

    // Scores t = Xc w; loadings from the score regression.
    let t: Vec<f64> = x
        .chunks_exact(p)
        .map(|row| {
            row.iter()
                .zip(&x_mean)
                .zip(&w)
                .map(|((&xv, &m), &wj)| (xv - m) * wj)
                .sum()
        })
        .collect();
    let t_ss: f64 = t.iter().map(|&v| v * v).sum();
    let mut x_loadings = vec![0.0; p];
    for (row, &tv) in x.chunks_exact(p).zip(&t) {
        for ((lj, &xv), &m) in x_loadings.iter_mut().zip(row).zip(&x_mean) {
            *lj += (xv - m) * tv / t_ss;
        }
    }
    let y_loading: f64 = yc.iter().zip(&t).map(|(&yv, &tv)| yv * tv).sum::<f64>() / t_ss;

    let rss: f64 = yc
        .iter()
        .zip(&t)
        .map(|(&yv, &tv)| {
            let e = yv - y_loading * tv;
            e * e
        })
        .sum();
    Ok(PlsModel {
        x_weights: w,
        x_loadings,
        y_loading,
        x_mean,
        y_mean,
        r_squared: 1.0 - rss / y_ss,
    })
}
