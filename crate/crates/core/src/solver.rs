//! Finite-volume solver for one-dimensional conservative advection
//! `f_t + (a f)_z = k f_zz` with zero ghost cells on both sides. The
//! diffusion `k(t)` is optional; it carries the spread that an explicit
//! sampler with step `h` adds per unit time, `h Var(a | z) / 2`, so the
//! solution tracks ensembles produced by that sampler.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::case::GridCase;
use crate::density::{DensityField, SpatialGrid1D};
use crate::error::{Error, Result};
use crate::regression::RegressionEstimate;
use crate::{Qoi, QoiKind};

const MAX_STEPS: usize = 50_000_000;
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// First-order donor cell.
    Upwind1,
    /// Lax-Wendroff flux with a van Leer limiter.
    LaxWendroffLimited,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Upwind1 => "upwind1",
            Scheme::LaxWendroffLimited => "lax_wendroff_limited",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub cfl: f64,
    pub scheme: Scheme,
    /// Mass drift above which the report carries a warning.
    pub mass_drift_threshold: f64,
    /// Add the sampler-step diffusion when building fields from regressions.
    pub step_diffusion: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            cfl: 0.8,
            scheme: Scheme::LaxWendroffLimited,
            mass_drift_threshold: 1e-3,
            step_diffusion: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::invalid("cfl", "must lie in (0, 1]"));
        }
        if !(self.mass_drift_threshold > 0.0) {
            return Err(Error::invalid("mass_drift_threshold", "must be > 0"));
        }
        Ok(())
    }
}

/// Interface coefficients `a(z, t)` at a sequence of snapshot times.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvectionField {
    pub times: Vec<f64>,
    /// `values[k]` has `n_cells + 1` interface values.
    pub values: Vec<Vec<f64>>,
    /// Diffusion coefficient per snapshot, uniform in `z`.
    pub diffusion: Vec<f64>,
    pub source: String,
}

impl AdvectionField {
    /// Field from a regression history, one snapshot per estimate.
    pub fn from_history(
        history: &[RegressionEstimate],
        grid: &SpatialGrid1D,
        case: &GridCase,
        qoi: Qoi,
    ) -> Result<Self> {
        let values = history
            .iter()
            .map(|e| advection_coefficient(e, grid, case, qoi))
            .collect::<Result<Vec<_>>>()?;
        let field = AdvectionField {
            times: history.iter().map(|e| e.t).collect(),
            values,
            diffusion: vec![0.0; history.len()],
            source: format!("regression {qoi}"),
        };
        field.validate(grid)?;
        Ok(field)
    }

    /// Sets the diffusion an explicit sampler with step `sampler_dt` adds:
    /// `sampler_dt / 2` times the conditional variance of the QoI rate.
    pub fn with_step_diffusion(
        mut self,
        history: &[RegressionEstimate],
        case: &GridCase,
        qoi: Qoi,
        sampler_dt: f64,
    ) -> Result<Self> {
        if history.len() != self.times.len() {
            return Err(Error::Dimension {
                what: "regression history".into(),
                expected: self.times.len(),
                got: history.len(),
            });
        }
        if !(sampler_dt >= 0.0) {
            return Err(Error::invalid("sampler dt", "must be >= 0"));
        }
        let gain = match qoi.kind {
            QoiKind::Speed => case.omega_r / (2.0 * case.h[qoi.machine]),
            QoiKind::Angle => 1.0,
        };
        self.diffusion = history
            .iter()
            .map(|e| 0.5 * sampler_dt * gain * gain * e.conditional_variance().max(0.0))
            .collect();
        Ok(self)
    }

    /// Time-independent field.
    pub fn constant(values: Vec<f64>, t_final: f64) -> Self {
        AdvectionField {
            times: vec![0.0, t_final],
            values: vec![values.clone(), values],
            diffusion: vec![0.0; 2],
            source: "constant".into(),
        }
    }

    fn validate(&self, grid: &SpatialGrid1D) -> Result<()> {
        if self.times.is_empty()
            || self.times.len() != self.values.len()
            || self.times.len() != self.diffusion.len()
        {
            return Err(Error::invalid(
                "advection field",
                "need one value row per snapshot",
            ));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid(
                "advection field",
                "snapshot times must increase",
            ));
        }
        for row in &self.values {
            if row.len() != grid.n_cells + 1 {
                return Err(Error::Dimension {
                    what: "advection interfaces".into(),
                    expected: grid.n_cells + 1,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("advection field", "non-finite coefficient"));
            }
        }
        if self.diffusion.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
            return Err(Error::invalid(
                "advection field",
                "diffusion must be finite and >= 0",
            ));
        }
        Ok(())
    }

    /// Interpolates in time into `out` and returns the diffusion; `cursor`
    /// caches the bracketing snapshot.
    fn interpolate(&self, t: f64, cursor: &mut usize, out: &mut [f64]) -> f64 {
        let last = self.times.len() - 1;
        while *cursor < last && self.times[*cursor + 1] <= t {
            *cursor += 1;
        }
        let k = *cursor;
        if k == last {
            out.copy_from_slice(&self.values[k]);
            return self.diffusion[k];
        }
        let w = ((t - self.times[k]) / (self.times[k + 1] - self.times[k])).clamp(0.0, 1.0);
        for ((o, a0), a1) in out.iter_mut().zip(&self.values[k]).zip(&self.values[k + 1]) {
            *o = a0 + w * (a1 - a0);
        }
        self.diffusion[k] + w * (self.diffusion[k + 1] - self.diffusion[k])
    }
}

/// Interface advection speeds of one QoI from a regression estimate. Speeds:
/// `(omega_R / 2H)(-D (z - omega_R) + P - m(z))`; angles: `m(z) - omega_R`.
/// Centre values are averaged onto interior interfaces and linearly
/// extrapolated to the two boundary interfaces.
pub fn advection_coefficient(
    est: &RegressionEstimate,
    grid: &SpatialGrid1D,
    case: &GridCase,
    qoi: Qoi,
) -> Result<Vec<f64>> {
    if est.m_values.len() != grid.n_cells {
        return Err(Error::Dimension {
            what: "regression grid".into(),
            expected: grid.n_cells,
            got: est.m_values.len(),
        });
    }
    if qoi.machine >= case.n {
        return Err(Error::invalid(
            "qoi",
            format!("{qoi} is not in case {}", case.name),
        ));
    }
    let i = qoi.machine;
    let wr = case.omega_r;
    let centre: Vec<f64> = grid
        .centers
        .iter()
        .zip(&est.m_values)
        .map(|(&z, &m)| match qoi.kind {
            QoiKind::Speed => wr / (2.0 * case.h[i]) * (-case.d[i] * (z - wr) + case.p[i] - m),
            QoiKind::Angle => m - wr,
        })
        .collect();
    Ok(centres_to_interfaces(&centre))
}

pub fn centres_to_interfaces(centre: &[f64]) -> Vec<f64> {
    let n = centre.len();
    let mut out = vec![0.0; n + 1];
    for k in 1..n {
        out[k] = 0.5 * (centre[k - 1] + centre[k]);
    }
    if n >= 2 {
        out[0] = 1.5 * centre[0] - 0.5 * centre[1];
        out[n] = 1.5 * centre[n - 1] - 0.5 * centre[n - 2];
    } else {
        out[0] = centre[0];
        out[1] = centre[0];
    }
    out
}

pub fn total_mass(f: &[f64], dz: f64) -> f64 {
    f.iter().sum::<f64>() * dz
}

fn van_leer(r: f64) -> f64 {
    (r + r.abs()) / (1.0 + r.abs())
}

/// Numerical fluxes at the `n + 1` interfaces with zero ghost cells.
fn fluxes(f: &[f64], a: &[f64], nu_over_a: f64, scheme: Scheme, out: &mut [f64]) {
    let n = f.len();
    let cell = |k: isize| -> f64 {
        if k < 0 || k >= n as isize {
            0.0
        } else {
            f[k as usize]
        }
    };
    for (k, (flux, &ak)) in out.iter_mut().zip(a).enumerate() {
        let ki = k as isize;
        let left = cell(ki - 1);
        let right = cell(ki);
        let upwind = if ak >= 0.0 { ak * left } else { ak * right };
        *flux = match scheme {
            Scheme::Upwind1 => upwind,
            Scheme::LaxWendroffLimited => {
                let jump = right - left;
                if jump == 0.0 {
                    upwind
                } else {
                    let upstream = if ak >= 0.0 {
                        left - cell(ki - 2)
                    } else {
                        cell(ki + 1) - right
                    };
                    let phi = van_leer(upstream / jump);
                    upwind + 0.5 * ak.abs() * (1.0 - ak.abs() * nu_over_a) * phi * jump
                }
            }
        };
    }
}

/// One explicit conservative step. `a` holds `n + 1` interface speeds.
/// Returns the outflow through the two boundaries over the step.
pub fn step_advection_into(
    f: &mut [f64],
    a: &[f64],
    dz: f64,
    dt: f64,
    scheme: Scheme,
    flux: &mut [f64],
) -> Result<f64> {
    let n = f.len();
    if a.len() != n + 1 || flux.len() != n + 1 {
        return Err(Error::Dimension {
            what: "interface coefficients".into(),
            expected: n + 1,
            got: a.len(),
        });
    }
    let amax = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let courant = amax * dt / dz;
    if !(courant <= 1.0 + 1e-12) {
        return Err(Error::Cfl {
            dt,
            limit: if amax > 0.0 { dz / amax } else { f64::INFINITY },
        });
    }
    fluxes(f, a, dt / dz, scheme, flux);
    let r = dt / dz;
    for j in 0..n {
        f[j] -= r * (flux[j + 1] - flux[j]);
    }
    Ok(dt * (flux[n] - flux[0]))
}

/// Explicit diffusion step with zero ghost cells; returns the boundary outflow.
fn step_diffusion(f: &mut [f64], kappa: f64, dz: f64, dt: f64, scratch: &mut [f64]) -> f64 {
    let n = f.len();
    let r = kappa * dt / (dz * dz);
    scratch[..n].copy_from_slice(f);
    for j in 0..n {
        let left = if j > 0 { scratch[j - 1] } else { 0.0 };
        let right = if j + 1 < n { scratch[j + 1] } else { 0.0 };
        f[j] += r * (left - 2.0 * scratch[j] + right);
    }
    r * dz * (scratch[0] + scratch[n - 1])
}

pub fn step_advection(f: &[f64], a: &[f64], dz: f64, dt: f64, scheme: Scheme) -> Result<Vec<f64>> {
    let mut out = f.to_vec();
    let mut flux = vec![0.0; a.len()];
    step_advection_into(&mut out, a, dz, dt, scheme, &mut flux)?;
    Ok(out)
}

/// Largest stable step for the current coefficients: bounded by both the
/// interface speeds and the total outflow rate of every cell, which keeps
/// the donor-cell update positive.
fn stable_dt(a: &[f64], dz: f64, cfl: f64) -> f64 {
    let mut rate = 0.0f64;
    for j in 0..a.len() - 1 {
        let out = a[j + 1].max(0.0) + (-a[j]).max(0.0);
        rate = rate.max(out).max(a[j].abs());
    }
    rate = rate.max(a[a.len() - 1].abs());
    if rate > 0.0 {
        cfl * dz / rate
    } else {
        f64::INFINITY
    }
}

/// Solver metadata written next to each solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub scheme: Scheme,
    pub cfl: f64,
    pub steps: usize,
    pub min_dt: f64,
    pub max_dt: f64,
    pub initial_mass: f64,
    pub final_mass: f64,
    pub max_mass_drift: f64,
    pub boundary_outflow: f64,
    pub warnings: Vec<String>,
}

impl SolverReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Other(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub density: DensityField,
    pub report: SolverReport,
}

/// Advances `initial` through `output_times` (increasing, the first being
/// the initial time) with coefficients interpolated linearly in time.
pub fn solve_ropdf(
    initial: &[f64],
    grid: &SpatialGrid1D,
    coefficients: &AdvectionField,
    output_times: &[f64],
    config: &SolverConfig,
) -> Result<Solution> {
    config.validate()?;
    coefficients.validate(grid)?;
    if initial.len() != grid.n_cells {
        return Err(Error::Dimension {
            what: "initial density".into(),
            expected: grid.n_cells,
            got: initial.len(),
        });
    }
    if initial.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(
            "initial density",
            "must be finite and nonnegative",
        ));
    }
    let (t0, t_end) = match output_times {
        [first, .., last] => (*first, *last),
        [only] => (*only, *only),
        [] => {
            return Err(Error::invalid(
                "output times",
                "need at least one output time",
            ))
        }
    };
    if output_times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("output times", "must increase"));
    }
    let cover_lo = coefficients.times[0];
    let cover_hi = *coefficients.times.last().unwrap();
    if cover_lo > t0 + TIME_EPS || cover_hi < t_end - TIME_EPS {
        return Err(Error::invalid(
            "coefficients",
            format!("cover [{cover_lo}, {cover_hi}] but the solve needs [{t0}, {t_end}]"),
        ));
    }

    let n = grid.n_cells;
    let dz = grid.dz;
    let mut f = initial.to_vec();
    let mut a = vec![0.0; n + 1];
    let mut flux = vec![0.0; n + 1];
    let mut cursor = 0usize;
    let initial_mass = total_mass(&f, dz);
    let mut values = vec![f.clone()];
    let mut report = SolverReport {
        scheme: config.scheme,
        cfl: config.cfl,
        steps: 0,
        min_dt: f64::INFINITY,
        max_dt: 0.0,
        initial_mass,
        final_mass: initial_mass,
        max_mass_drift: 0.0,
        boundary_outflow: 0.0,
        warnings: Vec::new(),
    };
    let mut t = t0;
    for &target in &output_times[1..] {
        while t < target - TIME_EPS * target.abs().max(1.0) {
            let kappa = coefficients.interpolate(t, &mut cursor, &mut a);
            let mut dt = stable_dt(&a, dz, config.cfl);
            if kappa > 0.0 {
                dt = dt.min(config.cfl * dz * dz / (2.0 * kappa));
            }
            if t + dt >= target - TIME_EPS * target.abs().max(1.0) {
                dt = target - t;
            }
            report.boundary_outflow +=
                step_advection_into(&mut f, &a, dz, dt, config.scheme, &mut flux)?;
            if kappa > 0.0 {
                report.boundary_outflow += step_diffusion(&mut f, kappa, dz, dt, &mut flux);
            }
            report.steps += 1;
            report.min_dt = report.min_dt.min(dt);
            report.max_dt = report.max_dt.max(dt);
            if report.steps > MAX_STEPS {
                return Err(Error::Other(format!(
                    "solver exceeded {MAX_STEPS} steps at t = {t}"
                )));
            }
            t = if dt == target - t { target } else { t + dt };
        }
        t = target;
        let mass = total_mass(&f, dz);
        report.max_mass_drift = report.max_mass_drift.max((mass - initial_mass).abs());
        values.push(f.clone());
    }
    report.final_mass = total_mass(&f, dz);
    if report.max_mass_drift > config.mass_drift_threshold {
        let msg = format!(
            "mass drift {:.3e} exceeds {:.1e}",
            report.max_mass_drift, config.mass_drift_threshold
        );
        log::warn!("{}: {msg}", coefficients.source);
        report.warnings.push(msg);
    }
    Ok(Solution {
        density: DensityField {
            grid: grid.clone(),
            times: output_times.to_vec(),
            values,
            qoi: coefficients.source.clone(),
        },
        report,
    })
}
