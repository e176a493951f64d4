//! Gaussian kernel density estimation and the uniform grids shared by the
//! density estimates and the PDE solver.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Kernel support in bandwidths; the Gaussian tail beyond is below 3e-18.
const KERNEL_CUTOFF: f64 = 9.0;
const MAX_CELLS: usize = 1 << 20;
const RESYNC: usize = 16;

/// Uniform cell-centred grid on `[z_min, z_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid1D {
    pub z_min: f64,
    pub z_max: f64,
    pub n_cells: usize,
    pub dz: f64,
    pub centers: Vec<f64>,
}

impl SpatialGrid1D {
    pub fn new(z_min: f64, z_max: f64, n_cells: usize) -> Result<Self> {
        if !(z_max > z_min) || !z_min.is_finite() || !z_max.is_finite() {
            return Err(Error::invalid(
                "grid",
                format!("empty domain [{z_min}, {z_max}]"),
            ));
        }
        if n_cells == 0 || n_cells > MAX_CELLS {
            return Err(Error::invalid("grid", format!("bad cell count {n_cells}")));
        }
        let dz = (z_max - z_min) / n_cells as f64;
        Ok(Self::assemble(z_min, dz, n_cells))
    }

    /// Grid starting at `z_min` with cell width exactly `dz`, extended upwards
    /// to cover `z_max`.
    pub fn with_spacing(z_min: f64, z_max: f64, dz: f64) -> Result<Self> {
        if !(dz > 0.0) || !(z_max > z_min) {
            return Err(Error::invalid("grid", "need dz > 0 and z_max > z_min"));
        }
        let cells = ((z_max - z_min) / dz).ceil();
        if !(cells >= 1.0) || cells > MAX_CELLS as f64 {
            return Err(Error::invalid(
                "grid",
                format!("cell count {cells} out of range"),
            ));
        }
        Ok(Self::assemble(z_min, dz, cells as usize))
    }

    fn assemble(z_min: f64, dz: f64, n_cells: usize) -> Self {
        SpatialGrid1D {
            z_min,
            z_max: z_min + n_cells as f64 * dz,
            n_cells,
            dz,
            centers: (0..n_cells)
                .map(|k| z_min + (k as f64 + 0.5) * dz)
                .collect(),
        }
    }

    /// Position of interface `k` (`k = 0..=n_cells`).
    pub fn interface(&self, k: usize) -> f64 {
        self.z_min + k as f64 * self.dz
    }

    pub fn same_as(&self, other: &SpatialGrid1D) -> bool {
        self.n_cells == other.n_cells
            && (self.z_min - other.z_min).abs() <= 1e-12 * self.dz.max(1.0)
            && (self.dz - other.dz).abs() <= 1e-12 * self.dz
    }
}

/// Density history of one quantity on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: SpatialGrid1D,
    pub times: Vec<f64>,
    /// `values[t][cell]`.
    pub values: Vec<Vec<f64>>,
    pub qoi: String,
}

impl DensityField {
    pub fn mass_at(&self, t: usize) -> f64 {
        self.values[t].iter().sum::<f64>() * self.grid.dz
    }

    /// CSV with a header row of cell centres and one row per time.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time");
        for z in &self.grid.centers {
            let _ = write!(out, ",{z:e}");
        }
        out.push('\n');
        for (t, row) in self.times.iter().zip(&self.values) {
            let _ = write!(out, "{t}");
            for v in row {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Robust Silverman rule `0.9 min(sd, IQR / 1.34) N^(-1/5)`. Falls back to the
/// standard deviation when the interquartile range collapses.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Degenerate(
            "bandwidth needs at least two samples".into(),
        ));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::Degenerate("samples have no spread".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Gaussian KDE of `samples` with bandwidth `h`, evaluated at the cell centres.
pub fn kde_evaluate(samples: &[f64], h: f64, grid: &SpatialGrid1D) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid("bandwidth", "must be > 0"));
    }
    let mut out = vec![0.0; grid.n_cells];
    if samples.is_empty() {
        return Ok(out);
    }
    let step = grid.dz / h;
    // exp(-(u + s)^2 / 2) = exp(-u^2 / 2) * exp(-u s - s^2 / 2)
    let ratio_decay = (-step * step).exp();
    let reach = KERNEL_CUTOFF * h;
    for &x in samples {
        let first = (((x - reach) - grid.z_min) / grid.dz - 0.5).ceil().max(0.0) as usize;
        let last_f = (((x + reach) - grid.z_min) / grid.dz - 0.5).floor();
        if last_f < 0.0 || first >= grid.n_cells {
            continue;
        }
        let last = (last_f as usize).min(grid.n_cells - 1);
        // resynchronise the recurrence periodically to bound rounding drift
        for start in (first..=last).step_by(RESYNC) {
            let u = (grid.centers[start] - x) / h;
            let mut value = (-0.5 * u * u).exp();
            let mut ratio = (-u * step - 0.5 * step * step).exp();
            for cell in &mut out[start..=last.min(start + RESYNC - 1)] {
                *cell += value;
                value *= ratio;
                ratio *= ratio_decay;
            }
        }
    }
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    for v in &mut out {
        *v *= norm;
    }
    Ok(out)
}

/// KDE with the Silverman bandwidth of the samples themselves.
pub fn kde_silverman(samples: &[f64], grid: &SpatialGrid1D) -> Result<Vec<f64>> {
    kde_evaluate(samples, silverman_bandwidth(samples)?, grid)
}

/// Grid covering every pilot sample with `padding_factor x range` on both
/// sides and cells `1 / cells_per_bandwidth` of the narrowest per-time
/// Silverman bandwidth wide. `pilot` holds one sample vector per time.
pub fn build_grid(
    pilot: &[&[f64]],
    padding_factor: f64,
    cells_per_bandwidth: f64,
) -> Result<SpatialGrid1D> {
    if pilot.is_empty() || pilot.iter().any(|s| s.is_empty()) {
        return Err(Error::invalid(
            "pilot",
            "need a nonempty sample set at every time",
        ));
    }
    if !(padding_factor >= 0.0) || !(cells_per_bandwidth > 0.0) {
        return Err(Error::invalid(
            "grid",
            "padding_factor must be >= 0 and cells_per_bandwidth > 0",
        ));
    }
    let (lo, hi) = pilot
        .iter()
        .flat_map(|s| s.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::Degenerate("pilot samples have no spread".into()));
    }
    let h = pilot
        .iter()
        .filter_map(|s| silverman_bandwidth(s).ok())
        .fold(f64::INFINITY, f64::min);
    if !h.is_finite() {
        return Err(Error::Degenerate(
            "pilot samples have no spread at any time".into(),
        ));
    }
    let pad = padding_factor * range;
    SpatialGrid1D::with_spacing(lo - pad, hi + pad, h / cells_per_bandwidth)
}
