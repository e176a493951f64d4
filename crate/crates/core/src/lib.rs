//! Reduced-order PDF (RO-PDF) equations for the stochastic multi-machine
//! classical power-system model.
//!
//! Speeds and angles of each machine obey one-dimensional conservative
//! advection equations whose coefficients are conditional expectations. This
//! crate simulates Monte-Carlo ensembles of the full model, learns those
//! coefficients by regression, solves the resulting PDEs, and benchmarks the
//! learned densities against Monte-Carlo kernel density estimates.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod case;
pub mod config;
pub mod density;
pub mod ensemble_io;
pub mod error;
pub mod noise;
pub mod pipeline;
pub mod regression;
pub mod rng;
pub mod sim;
pub mod solver;

pub use case::{
    apply_line_failure, bundled_case, line_distances, parse_case, solve_equilibrium,
    EquilibriumSolution, GridCase,
};
pub use density::{build_grid, kde_evaluate, silverman_bandwidth, DensityField, SpatialGrid1D};
pub use error::{Error, Result};
pub use noise::{
    build_correlation, cholesky_factor, max_feasible_lambda, ou_analytic_moments, CorrelationKind,
    CorrelationModel, OuParams,
};
pub use regression::{
    extract_regression_data, fit_linear, fit_llr, linearity_switch, select_bandwidth_cv,
    RegressionData, RegressionEstimate, RegressionMethod,
};
pub use sim::{
    burn_in, drift_rhs, sample_initial_conditions, simulate_ensemble, step_milstein, Ensemble,
    SimConfig, SwingModel, SystemState,
};
pub use solver::{
    advection_coefficient, solve_ropdf, step_advection, total_mass, AdvectionField, Scheme,
    Solution, SolverConfig, SolverReport,
};

/// A scalar quantity of interest: the speed or angle of one machine (0-based).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct Qoi {
    pub machine: usize,
    pub kind: QoiKind,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum QoiKind {
    Speed,
    Angle,
}

impl Qoi {
    pub fn speed(machine: usize) -> Self {
        Qoi {
            machine,
            kind: QoiKind::Speed,
        }
    }

    pub fn angle(machine: usize) -> Self {
        Qoi {
            machine,
            kind: QoiKind::Angle,
        }
    }

    /// Parses `omega_4` / `delta_4` (1-based machine numbers).
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, num) = if let Some(rest) = s.strip_prefix("omega_") {
            (QoiKind::Speed, rest)
        } else if let Some(rest) = s.strip_prefix("delta_") {
            (QoiKind::Angle, rest)
        } else {
            return Err(Error::invalid(
                "qoi",
                format!("expected omega_<k> or delta_<k>, got {s:?}"),
            ));
        };
        let k: usize = num
            .parse()
            .map_err(|_| Error::invalid("qoi", format!("bad machine number in {s:?}")))?;
        if k == 0 {
            return Err(Error::invalid("qoi", "machine numbers start at 1"));
        }
        Ok(Qoi {
            machine: k - 1,
            kind,
        })
    }
}

impl std::fmt::Display for Qoi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let prefix = match self.kind {
            QoiKind::Speed => "omega",
            QoiKind::Angle => "delta",
        };
        write!(f, "{prefix}_{}", self.machine + 1)
    }
}
