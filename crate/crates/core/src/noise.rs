//! Correlation models for the Ornstein-Uhlenbeck power-injection noise.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::case::{line_distances, GridCase, MILES_PER_RADIAN_60HZ};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CorrelationKind {
    Uncorrelated,
    /// `R_ij = exp(-d_ij / lambda)` on connected pairs, `d_ij` in miles.
    Exponential {
        lambda: f64,
    },
    /// `R_ij = rho` on connected pairs.
    Constant {
        rho: f64,
    },
}

impl CorrelationKind {
    /// Short label used in file names and CSV columns.
    pub fn label(&self) -> &'static str {
        match self {
            CorrelationKind::Uncorrelated => "uncorrelated",
            CorrelationKind::Exponential { .. } => "exponential",
            CorrelationKind::Constant { .. } => "constant",
        }
    }

    /// The settings used for each bundled case.
    pub fn standard(case_name: &str, label: &str) -> Result<Self> {
        let kind = match (label, case_name) {
            ("uncorrelated", _) => CorrelationKind::Uncorrelated,
            ("exponential", "case9") => CorrelationKind::Exponential { lambda: 82.0 },
            ("exponential", "case30") => CorrelationKind::Exponential { lambda: 14.5 },
            ("exponential", "case57") => CorrelationKind::Exponential { lambda: 5.0 },
            ("constant", "case9") => CorrelationKind::Constant { rho: 0.44 },
            ("constant", "case30" | "case57") => CorrelationKind::Constant { rho: 0.36 },
            _ => {
                return Err(Error::invalid(
                    "correlation",
                    format!("no standard {label:?} model for {case_name:?}"),
                ))
            }
        };
        Ok(kind)
    }
}

impl fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorrelationKind::Uncorrelated => write!(f, "uncorrelated"),
            CorrelationKind::Exponential { lambda } => write!(f, "exponential(lambda={lambda})"),
            CorrelationKind::Constant { rho } => write!(f, "constant(rho={rho})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuParams {
    pub theta: f64,
    pub alpha: f64,
}

impl Default for OuParams {
    fn default() -> Self {
        OuParams {
            theta: 1.0,
            alpha: 0.05,
        }
    }
}

impl OuParams {
    /// `alpha = 0` is accepted: it switches the noise off.
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) {
            return Err(Error::invalid("theta", "must be > 0"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid("alpha", "must be >= 0"));
        }
        Ok(())
    }

    /// Diffusion scale `alpha sqrt(2 theta)`.
    pub fn diffusion(&self) -> f64 {
        self.alpha * (2.0 * self.theta).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationModel {
    pub kind: CorrelationKind,
    pub r: DMatrix<f64>,
    /// Lower-triangular Cholesky factor, `C C^T = R`.
    pub c: DMatrix<f64>,
    pub min_eigenvalue: f64,
}

impl CorrelationModel {
    pub fn n(&self) -> usize {
        self.r.nrows()
    }

    pub fn write_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_matrix_csv(dir.join("R.csv"), &self.r)?;
        write_matrix_csv(dir.join("C.csv"), &self.c)
    }
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn exponential_matrix(case: &GridCase, lambda: f64) -> Result<DMatrix<f64>> {
    let dist = line_distances(case, MILES_PER_RADIAN_60HZ)?;
    let mut r = DMatrix::identity(case.n, case.n);
    for (i, j, d) in dist.iter() {
        let v = (-d / lambda).exp();
        r[(i, j)] = v;
        r[(j, i)] = v;
    }
    Ok(r)
}

fn correlation_matrix(case: &GridCase, kind: &CorrelationKind) -> Result<DMatrix<f64>> {
    let n = case.n;
    match *kind {
        CorrelationKind::Uncorrelated => Ok(DMatrix::identity(n, n)),
        CorrelationKind::Constant { rho } => {
            if !(rho > -1.0 && rho < 1.0) {
                return Err(Error::invalid("rho", "must lie in (-1, 1)"));
            }
            let mut r = DMatrix::identity(n, n);
            for (i, j) in case.connected_pairs() {
                r[(i, j)] = rho;
                r[(j, i)] = rho;
            }
            Ok(r)
        }
        CorrelationKind::Exponential { lambda } => {
            if !(lambda > 0.0) || !lambda.is_finite() {
                return Err(Error::invalid("lambda", "must be a positive finite number"));
            }
            exponential_matrix(case, lambda)
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

pub fn build_correlation(case: &GridCase, kind: &CorrelationKind) -> Result<CorrelationModel> {
    let r = correlation_matrix(case, kind)?;
    let min_eig = min_eigenvalue(&r);
    if !(min_eig > 0.0) {
        return Err(Error::IndefiniteCorrelation {
            min_eigenvalue: min_eig,
        });
    }
    let c = cholesky_factor(&r).map_err(|_| Error::IndefiniteCorrelation {
        min_eigenvalue: min_eig,
    })?;
    Ok(CorrelationModel {
        kind: *kind,
        r,
        c,
        min_eigenvalue: min_eig,
    })
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_factor(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = r.nrows();
    if r.ncols() != n {
        return Err(Error::Dimension {
            what: "square matrix".into(),
            expected: n,
            got: r.ncols(),
        });
    }
    let mut c = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = r[(j, j)];
        for k in 0..j {
            pivot -= c[(j, k)] * c[(j, k)];
        }
        if !(pivot > 0.0) {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: pivot,
            });
        }
        let diag = pivot.sqrt();
        c[(j, j)] = diag;
        for i in j + 1..n {
            let mut s = r[(i, j)];
            for k in 0..j {
                s -= c[(i, k)] * c[(j, k)];
            }
            c[(i, j)] = s / diag;
        }
    }
    Ok(c)
}

/// Upper end of the lambda search.
pub const LAMBDA_SEARCH_MAX: f64 = 1.0e4;

/// Largest kernel scale for which the exponential correlation matrix stays
/// positive definite, found by geometric bisection to relative precision `tol`.
/// Returns [`LAMBDA_SEARCH_MAX`] if the matrix is PD there.
pub fn max_feasible_lambda(case: &GridCase, tol: f64) -> Result<f64> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::invalid("tol", "must lie in (0, 1)"));
    }
    let dist = line_distances(case, MILES_PER_RADIAN_60HZ)?;
    let d_min = dist.iter().map(|(_, _, d)| d).fold(f64::INFINITY, f64::min);
    let pd = |lambda: f64| -> Result<bool> {
        Ok(min_eigenvalue(&exponential_matrix(case, lambda)?) > 0.0)
    };

    if pd(LAMBDA_SEARCH_MAX)? {
        return Ok(LAMBDA_SEARCH_MAX);
    }
    // exp(-50) off-diagonals: numerically the identity
    let mut lo = d_min / 50.0;
    if !pd(lo)? {
        return Err(Error::Other(
            "exponential kernel not PD even for tiny lambda".into(),
        ));
    }
    let mut hi = LAMBDA_SEARCH_MAX;
    for _ in 0..200 {
        if hi / lo - 1.0 <= tol {
            return Ok(lo);
        }
        let mid = (lo * hi).sqrt();
        if pd(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Other("lambda bisection did not converge".into()))
}

/// Exact mean and covariance at time `t` of
/// `d eta = -theta eta dt + alpha sqrt(2 theta) C dw` started at `eta0`.
pub fn ou_analytic_moments(
    params: &OuParams,
    r: &DMatrix<f64>,
    eta0: &DVector<f64>,
    t: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    params.validate()?;
    if !(t >= 0.0) {
        return Err(Error::invalid("t", "must be >= 0"));
    }
    if eta0.len() != r.nrows() {
        return Err(Error::Dimension {
            what: "eta0".into(),
            expected: r.nrows(),
            got: eta0.len(),
        });
    }
    let decay = (-params.theta * t).exp();
    let mean = eta0 * decay;
    let cov = r * (params.alpha * params.alpha * (1.0 - decay * decay));
    Ok((mean, cov))
}
