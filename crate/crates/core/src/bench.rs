//! Sample-count benchmark of the learned PDF equations against Monte-Carlo
//! KDE, both measured against a large-sample KDE yardstick.
//!
//! Both methods draw nested windows of one ensemble: the `n`-sample estimate
//! uses `n` consecutive realizations of the yardstick's stream.
//!
//! Learned-equation accounting: the initial density is a KDE of `c` samples,
//! each QoI `i` uses `n_i <= c` samples for its regressions, and the initial
//! samples are free up to the largest `n_i`. The total for a given `c` is
//! `sum(n_i) + c - max(n_i)`, minimised over `c`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::{apply_line_failure, solve_equilibrium, GridCase};
use crate::density::{build_grid, kde_silverman, DensityField, SpatialGrid1D};
use crate::error::{Error, Result};
use crate::noise::{build_correlation, CorrelationKind, OuParams};
use crate::regression::{fit_history, RegressionData, RegressionEstimate, RegressionOptions};
use crate::sim::{burn_in, simulate_panel, InitialSlice, Panel, PanelField, SimConfig, SwingModel};
use crate::solver::{solve_ropdf, AdvectionField, Solution, SolverConfig};
use crate::{Qoi, QoiKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ROPDF")]
    Ropdf,
    #[serde(rename = "MCKDE")]
    Mckde,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Ropdf => "ROPDF",
            Method::Mckde => "MCKDE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridOptions {
    pub padding_factor: f64,
    pub cells_per_bandwidth: f64,
    pub pilot_samples: usize,
}

impl GridOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.padding_factor > 0.0) {
            return Err(Error::invalid("padding_factor", "must be > 0"));
        }
        if !(self.cells_per_bandwidth > 0.0) {
            return Err(Error::invalid("cells_per_bandwidth", "must be > 0"));
        }
        if self.pilot_samples < 2 {
            return Err(Error::invalid("pilot_samples", "must be >= 2"));
        }
        Ok(())
    }
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            padding_factor: 0.5,
            cells_per_bandwidth: 4.0,
            pilot_samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkOptions {
    pub tol: f64,
    pub schedule: Vec<usize>,
    pub yardstick_samples: usize,
    /// Error trails are averaged over this many disjoint-offset windows.
    pub seeds: usize,
    pub include_angles: bool,
    /// Benchmark plan: bundled case names or case files.
    pub cases: Vec<String>,
    /// Correlation labels resolved per case (`uncorrelated`, `exponential`, `constant`).
    pub correlations: Vec<String>,
    pub failures: Vec<bool>,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            tol: 0.05,
            schedule: vec![250, 500, 1000, 2000, 4000, 8000, 16000],
            yardstick_samples: 30_000,
            seeds: 1,
            include_angles: false,
            cases: vec!["case9".into()],
            correlations: vec![
                "uncorrelated".into(),
                "exponential".into(),
                "constant".into(),
            ],
            failures: vec![false, true],
        }
    }
}

impl BenchmarkOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol", "must be > 0"));
        }
        if self.schedule.is_empty() || self.schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "schedule",
                "must be nonempty and strictly increasing",
            ));
        }
        if self.schedule[0] < 10 {
            return Err(Error::invalid("schedule", "entries must be at least 10"));
        }
        if self.yardstick_samples < *self.schedule.last().unwrap() {
            return Err(Error::invalid(
                "yardstick_samples",
                "must be at least the largest schedule entry",
            ));
        }
        if self.seeds == 0 {
            return Err(Error::invalid("seeds", "must be >= 1"));
        }
        if self.cases.is_empty() {
            return Err(Error::invalid("cases", "benchmark needs at least one case"));
        }
        if self.correlations.is_empty() || self.failures.is_empty() {
            return Err(Error::invalid(
                "correlations",
                "need at least one correlation and failure flag",
            ));
        }
        Ok(())
    }

    /// The search schedule with the yardstick size appended.
    pub fn full_schedule(&self) -> Vec<usize> {
        let mut s = self.schedule.clone();
        if *s.last().unwrap() < self.yardstick_samples {
            s.push(self.yardstick_samples);
        }
        s
    }
}

/// One benchmark configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// Pre-failure network; burn-in always runs on it.
    pub case: GridCase,
    pub correlation: CorrelationKind,
    /// 0-based buses of the line removed for the main run.
    pub failure: Option<(usize, usize)>,
    pub params: OuParams,
    pub sim: SimConfig,
}

impl Scenario {
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}",
            self.case.name,
            self.correlation.label(),
            if self.failure.is_some() {
                "failure"
            } else {
                "nominal"
            }
        )
    }
}

/// Simulated panel plus per-QoI grids and yardsticks.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub case_name: String,
    pub correlation: CorrelationKind,
    pub failure: Option<(usize, usize)>,
    /// Network of the main run.
    pub network: GridCase,
    pub panel: Panel,
    pub qois: Vec<Qoi>,
    pub grids: Vec<SpatialGrid1D>,
    pub yardsticks: Vec<DensityField>,
    /// Step of the sampler that produced the panel.
    pub sampler_dt: f64,
}

impl ScenarioData {
    pub fn index_of(&self, qoi: Qoi) -> Result<usize> {
        self.qois
            .iter()
            .position(|&q| q == qoi)
            .ok_or_else(|| Error::invalid("qoi", format!("{qoi} was not prepared")))
    }
}

/// Burn-in states for a scenario, shared by its nominal and failure runs.
pub fn scenario_initial(s: &Scenario, n: usize) -> Result<InitialSlice> {
    let corr = build_correlation(&s.case, &s.correlation)?;
    let eq = solve_equilibrium(&s.case, 1e-10, 50)?;
    let model = SwingModel::new(&s.case, s.params, &corr, &eq.delta)?;
    let cfg = SimConfig {
        n_realizations: n,
        save_stride: 1,
        ..s.sim
    };
    burn_in(&model, n, &cfg)
}

fn field(qoi: Qoi) -> PanelField {
    match qoi.kind {
        QoiKind::Speed => PanelField::Omega,
        QoiKind::Angle => PanelField::Delta,
    }
}

/// Realizations `offset, offset + 1, ...` (wrapping) of one panel field.
fn window(
    panel: &Panel,
    f: PanelField,
    t: usize,
    i: usize,
    offset: usize,
    count: usize,
) -> Vec<f64> {
    let all = panel.samples(f, t, i, panel.n_realizations);
    (0..count).map(|k| all[(offset + k) % all.len()]).collect()
}

/// Simulates a scenario and builds grids and yardsticks for `qois`.
pub fn prepare_scenario(
    s: &Scenario,
    qois: &[Qoi],
    opts: &BenchmarkOptions,
    grid_opts: &GridOptions,
    initial: Option<&InitialSlice>,
) -> Result<ScenarioData> {
    opts.validate()?;
    grid_opts.validate()?;
    if grid_opts.pilot_samples > opts.yardstick_samples {
        return Err(Error::invalid(
            "pilot_samples",
            "exceeds the yardstick size",
        ));
    }
    let n = opts.yardstick_samples;
    let owned;
    let initial = match initial {
        Some(init) if init.len() >= n => init,
        Some(init) => {
            return Err(Error::Dimension {
                what: "burn-in slice".into(),
                expected: n,
                got: init.len(),
            })
        }
        None => {
            owned = scenario_initial(s, n)?;
            &owned
        }
    };
    let initial = initial.truncated(n);
    let network = match s.failure {
        Some((i, j)) => apply_line_failure(&s.case, i, j)?,
        None => s.case.clone(),
    };
    let corr = build_correlation(&s.case, &s.correlation)?;
    let eq = solve_equilibrium(&s.case, 1e-10, 50)?;
    let model = SwingModel::new(&network, s.params, &corr, &eq.delta)?;
    let cfg = SimConfig {
        n_realizations: n,
        ..s.sim
    };
    let panel = simulate_panel(&initial, &model, &cfg)?;
    let mut grids = Vec::with_capacity(qois.len());
    let mut yardsticks = Vec::with_capacity(qois.len());
    for &q in qois {
        if q.machine >= network.n {
            return Err(Error::invalid(
                "qoi",
                format!("{q} is not in case {}", s.case.name),
            ));
        }
        let pilot: Vec<&[f64]> = (0..panel.times.len())
            .map(|t| panel.samples(field(q), t, q.machine, grid_opts.pilot_samples))
            .collect();
        let grid = build_grid(
            &pilot,
            grid_opts.padding_factor,
            grid_opts.cells_per_bandwidth,
        )?;
        yardsticks.push(compute_yardstick(&panel, q, &grid, n)?);
        grids.push(grid);
    }
    Ok(ScenarioData {
        case_name: s.case.name.clone(),
        correlation: s.correlation,
        failure: s.failure,
        network,
        panel,
        qois: qois.to_vec(),
        grids,
        yardsticks,
        sampler_dt: s.sim.dt,
    })
}

fn kde_history(
    panel: &Panel,
    qoi: Qoi,
    grid: &SpatialGrid1D,
    offset: usize,
    count: usize,
) -> Result<DensityField> {
    let values = (0..panel.times.len())
        .map(|t| {
            kde_silverman(
                &window(panel, field(qoi), t, qoi.machine, offset, count),
                grid,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityField {
        grid: grid.clone(),
        times: panel.times.clone(),
        values,
        qoi: qoi.to_string(),
    })
}

/// KDE of the first `n` realizations at every saved time.
pub fn compute_yardstick(
    panel: &Panel,
    qoi: Qoi,
    grid: &SpatialGrid1D,
    n: usize,
) -> Result<DensityField> {
    if n == 0 || n > panel.n_realizations {
        return Err(Error::invalid(
            "yardstick size",
            format!("need 1..={}", panel.n_realizations),
        ));
    }
    kde_history(panel, qoi, grid, 0, n)
}

/// Relative L2 error over space and time (trapezoid-free Riemann sums with
/// the saved-time spacing as weight).
pub fn relative_l2_error(estimate: &DensityField, yardstick: &DensityField) -> Result<f64> {
    if !estimate.grid.same_as(&yardstick.grid) {
        return Err(Error::invalid(
            "grid",
            "estimate and yardstick grids differ",
        ));
    }
    if estimate.times.len() != yardstick.times.len()
        || estimate
            .times
            .iter()
            .zip(&yardstick.times)
            .any(|(a, b)| (a - b).abs() > 1e-9)
    {
        return Err(Error::invalid(
            "times",
            "estimate and yardstick times differ",
        ));
    }
    let weights = time_weights(&yardstick.times);
    let (mut num, mut den) = (0.0, 0.0);
    for ((e, y), w) in estimate.values.iter().zip(&yardstick.values).zip(&weights) {
        let (mut a, mut b) = (0.0, 0.0);
        for (p, q) in e.iter().zip(y) {
            a += (p - q) * (p - q);
            b += q * q;
        }
        num += w * a;
        den += w * b;
    }
    if !(den > 0.0) {
        return Err(Error::Degenerate("yardstick has zero norm".into()));
    }
    Ok((num / den).sqrt())
}

/// Uniform weight per saved time (the saves are equally spaced).
fn time_weights(times: &[f64]) -> Vec<f64> {
    let dt = if times.len() > 1 {
        times[1] - times[0]
    } else {
        1.0
    };
    vec![dt; times.len()]
}

/// MC+KDE estimate from a window of realizations.
pub fn mckde_estimate(
    data: &ScenarioData,
    qoi: Qoi,
    offset: usize,
    n: usize,
) -> Result<DensityField> {
    let k = data.index_of(qoi)?;
    kde_history(&data.panel, qoi, &data.grids[k], offset, n)
}

/// Regression history of `qoi` from a window of realizations.
pub fn learn_history(
    data: &ScenarioData,
    qoi: Qoi,
    offset: usize,
    n: usize,
    opts: &RegressionOptions,
) -> Result<Vec<RegressionEstimate>> {
    let k = data.index_of(qoi)?;
    let (xf, yf) = match qoi.kind {
        QoiKind::Speed => (PanelField::Omega, PanelField::SpeedResponse),
        QoiKind::Angle => (PanelField::Delta, PanelField::Omega),
    };
    let sets = (0..data.panel.times.len())
        .map(|t| {
            RegressionData::new(
                window(&data.panel, xf, t, qoi.machine, offset, n),
                window(&data.panel, yf, t, qoi.machine, offset, n),
                data.panel.times[t],
                qoi,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    fit_history(&sets, &data.grids[k], opts)
}

/// Solves the learned PDF equation with an initial KDE of `ic_n` samples.
pub fn ropdf_estimate(
    data: &ScenarioData,
    qoi: Qoi,
    coefficients: &AdvectionField,
    offset: usize,
    ic_n: usize,
    solver: &SolverConfig,
) -> Result<Solution> {
    let k = data.index_of(qoi)?;
    let grid = &data.grids[k];
    let ic = kde_silverman(
        &window(&data.panel, field(qoi), 0, qoi.machine, offset, ic_n),
        grid,
    )?;
    let mut sol = solve_ropdf(&ic, grid, coefficients, &data.panel.times, solver)?;
    sol.density.qoi = qoi.to_string();
    Ok(sol)
}

/// One point of an error trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub qoi: Qoi,
    pub method: Method,
    pub n_samples: usize,
    /// Initial-condition samples (learned equations only).
    pub ic_samples: Option<usize>,
    pub rel_l2: f64,
    /// Wall time; left out of JSON so result checksums stay reproducible.
    #[serde(skip)]
    pub runtime_s: f64,
}

/// Outcome of a minimum-sample search for one QoI and method.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub n_min: Option<usize>,
    pub best_error: f64,
    pub trail: Vec<ErrorReport>,
}

fn offsets(opts: &BenchmarkOptions) -> Vec<usize> {
    (0..opts.seeds)
        .map(|s| s * opts.yardstick_samples / opts.seeds)
        .collect()
}

/// Smallest schedule entry whose MC+KDE error meets `tol`.
pub fn mckde_search(
    data: &ScenarioData,
    qoi: Qoi,
    opts: &BenchmarkOptions,
) -> Result<SearchOutcome> {
    let k = data.index_of(qoi)?;
    let mut trail = Vec::new();
    let mut best = f64::INFINITY;
    for &n in &opts.full_schedule() {
        let start = Instant::now();
        let mut err = 0.0;
        for &off in &offsets(opts) {
            err += relative_l2_error(&mckde_estimate(data, qoi, off, n)?, &data.yardsticks[k])?;
        }
        err /= opts.seeds as f64;
        best = best.min(err);
        trail.push(ErrorReport {
            qoi,
            method: Method::Mckde,
            n_samples: n,
            ic_samples: None,
            rel_l2: err,
            runtime_s: start.elapsed().as_secs_f64(),
        });
        if err <= opts.tol {
            return Ok(SearchOutcome {
                n_min: Some(n),
                best_error: best,
                trail,
            });
        }
    }
    Ok(SearchOutcome {
        n_min: None,
        best_error: best,
        trail,
    })
}

/// Coefficient field of a learned history, with the sampler-step diffusion
/// when the solver asks for it.
pub fn coefficient_field(
    data: &ScenarioData,
    qoi: Qoi,
    history: &[RegressionEstimate],
    solver: &SolverConfig,
) -> Result<AdvectionField> {
    let k = data.index_of(qoi)?;
    let field = AdvectionField::from_history(history, &data.grids[k], &data.network, qoi)?;
    if solver.step_diffusion {
        field.with_step_diffusion(history, &data.network, qoi, data.sampler_dt)
    } else {
        Ok(field)
    }
}

/// Lazily learned coefficient fields per (window offset, sample count).
struct CoefficientCache<'a> {
    data: &'a ScenarioData,
    qoi: Qoi,
    reg: &'a RegressionOptions,
    solver: &'a SolverConfig,
    fields: BTreeMap<(usize, usize), (AdvectionField, f64)>,
}

impl CoefficientCache<'_> {
    fn get(&mut self, offset: usize, n: usize) -> Result<(&AdvectionField, f64)> {
        if !self.fields.contains_key(&(offset, n)) {
            let start = Instant::now();
            let history = learn_history(self.data, self.qoi, offset, n, self.reg)?;
            let f = coefficient_field(self.data, self.qoi, &history, self.solver)?;
            self.fields
                .insert((offset, n), (f, start.elapsed().as_secs_f64()));
        }
        let (f, t) = &self.fields[&(offset, n)];
        Ok((f, *t))
    }
}

/// Error of the learned equations for one QoI with `ic_n` initial samples and
/// `n` regression samples, averaged over the seed windows.
fn ropdf_error(
    cache: &mut CoefficientCache,
    ic_n: usize,
    n: usize,
    opts: &BenchmarkOptions,
    solver: &SolverConfig,
) -> Result<ErrorReport> {
    let k = cache.data.index_of(cache.qoi)?;
    let mut err = 0.0;
    let mut runtime = 0.0;
    for &off in &offsets(opts) {
        let (coef, learn_s) = cache.get(off, n)?;
        let coef = coef.clone();
        let start = Instant::now();
        let sol = ropdf_estimate(cache.data, cache.qoi, &coef, off, ic_n, solver)?;
        err += relative_l2_error(&sol.density, &cache.data.yardsticks[k])?;
        runtime += learn_s + start.elapsed().as_secs_f64();
    }
    Ok(ErrorReport {
        qoi: cache.qoi,
        method: Method::Ropdf,
        n_samples: n,
        ic_samples: Some(ic_n),
        rel_l2: err / opts.seeds as f64,
        runtime_s: runtime,
    })
}

/// Smallest regression count meeting `tol` for a fixed initial-sample count.
pub fn ropdf_search(
    data: &ScenarioData,
    qoi: Qoi,
    ic_n: usize,
    opts: &BenchmarkOptions,
    reg: &RegressionOptions,
    solver: &SolverConfig,
) -> Result<SearchOutcome> {
    let mut cache = CoefficientCache {
        data,
        qoi,
        reg,
        solver,
        fields: BTreeMap::new(),
    };
    let mut trail = Vec::new();
    let mut best = f64::INFINITY;
    for &n in opts.full_schedule().iter().filter(|&&n| n <= ic_n) {
        let rep = ropdf_error(&mut cache, ic_n, n, opts, solver)?;
        best = best.min(rep.rel_l2);
        let ok = rep.rel_l2 <= opts.tol;
        trail.push(rep);
        if ok {
            return Ok(SearchOutcome {
                n_min: Some(n),
                best_error: best,
                trail,
            });
        }
    }
    Ok(SearchOutcome {
        n_min: None,
        best_error: best,
        trail,
    })
}

/// Per-QoI minimum counts of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoiCounts {
    pub qoi: Qoi,
    pub mckde: Option<usize>,
    pub ropdf: Option<usize>,
    pub mckde_best_error: f64,
    pub ropdf_best_error: f64,
}

/// Totals for one group of QoIs (speeds or angles).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub kind: QoiKind,
    pub per_qoi: Vec<QoiCounts>,
    /// Initial-condition sample count chosen for the learned equations.
    pub ic_samples: Option<usize>,
    pub ropdf_total: Option<usize>,
    pub mckde_total: Option<usize>,
}

impl GroupResult {
    pub fn saturated(&self) -> bool {
        self.ropdf_total.is_none() || self.mckde_total.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub case_name: String,
    pub correlation: CorrelationKind,
    pub failure: bool,
    pub yardstick_samples: usize,
    pub tol: f64,
    pub groups: Vec<GroupResult>,
    pub trail: Vec<ErrorReport>,
}

impl BenchmarkResult {
    pub fn group(&self, kind: QoiKind) -> Option<&GroupResult> {
        self.groups.iter().find(|g| g.kind == kind)
    }
}

fn learned_total(counts: &[usize], ic_n: usize) -> usize {
    let max = counts.iter().copied().max().unwrap_or(0);
    counts.iter().sum::<usize>() + ic_n.saturating_sub(max)
}

/// Minimum-count search for one group of QoIs.
fn run_group(
    data: &ScenarioData,
    kind: QoiKind,
    opts: &BenchmarkOptions,
    reg: &RegressionOptions,
    solver: &SolverConfig,
    trail: &mut Vec<ErrorReport>,
) -> Result<GroupResult> {
    let qois: Vec<Qoi> = data
        .qois
        .iter()
        .copied()
        .filter(|q| q.kind == kind)
        .collect();
    let mc: Vec<SearchOutcome> = qois
        .par_iter()
        .map(|&q| mckde_search(data, q, opts))
        .collect::<Result<Vec<_>>>()?;

    // per QoI: n_i(c) for every initial count c, keeping every trail point
    let schedule = opts.full_schedule();
    let searches: Vec<Vec<(usize, SearchOutcome)>> = qois
        .par_iter()
        .map(|&q| {
            let mut cache = CoefficientCache {
                data,
                qoi: q,
                reg,
                solver,
                fields: BTreeMap::new(),
            };
            let mut out = Vec::new();
            for &c in &schedule {
                let mut trail = Vec::new();
                let mut best = f64::INFINITY;
                let mut n_min = None;
                for &n in schedule.iter().filter(|&&n| n <= c) {
                    let rep = ropdf_error(&mut cache, c, n, opts, solver)?;
                    best = best.min(rep.rel_l2);
                    let ok = rep.rel_l2 <= opts.tol;
                    trail.push(rep);
                    if ok {
                        n_min = Some(n);
                        break;
                    }
                }
                out.push((
                    c,
                    SearchOutcome {
                        n_min,
                        best_error: best,
                        trail,
                    },
                ));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut chosen: Option<(usize, usize)> = None;
    for (ci, &c) in schedule.iter().enumerate() {
        let counts: Option<Vec<usize>> = searches.iter().map(|s| s[ci].1.n_min).collect();
        if let Some(counts) = counts {
            let total = learned_total(&counts, c);
            if chosen.is_none_or(|(_, best)| total < best) {
                chosen = Some((ci, total));
            }
        }
    }
    let per_qoi: Vec<QoiCounts> = qois
        .iter()
        .enumerate()
        .map(|(k, &q)| QoiCounts {
            qoi: q,
            mckde: mc[k].n_min,
            ropdf: chosen.and_then(|(ci, _)| searches[k][ci].1.n_min),
            mckde_best_error: mc[k].best_error,
            ropdf_best_error: searches[k]
                .iter()
                .map(|(_, s)| s.best_error)
                .fold(f64::INFINITY, f64::min),
        })
        .collect();
    for (k, m) in mc.into_iter().enumerate() {
        trail.extend(m.trail);
        for (_, s) in &searches[k] {
            trail.extend(s.trail.iter().cloned());
        }
    }
    let mckde_total = per_qoi_sum(&per_qoi);
    Ok(GroupResult {
        kind,
        per_qoi,
        ic_samples: chosen.map(|(ci, _)| schedule[ci]),
        ropdf_total: chosen.map(|(_, t)| t),
        mckde_total,
    })
}

fn per_qoi_sum(per_qoi: &[QoiCounts]) -> Option<usize> {
    per_qoi.iter().map(|c| c.mckde).sum()
}

/// Default QoIs: every speed, plus every angle when requested.
pub fn default_qois(n: usize, include_angles: bool) -> Vec<Qoi> {
    let mut q: Vec<Qoi> = (0..n).map(Qoi::speed).collect();
    if include_angles {
        q.extend((0..n).map(Qoi::angle));
    }
    q
}

/// Full benchmark of one prepared scenario.
pub fn run_benchmark(
    data: &ScenarioData,
    opts: &BenchmarkOptions,
    reg: &RegressionOptions,
    solver: &SolverConfig,
) -> Result<BenchmarkResult> {
    opts.validate()?;
    let mut trail = Vec::new();
    let mut groups = Vec::new();
    for kind in [QoiKind::Speed, QoiKind::Angle] {
        if data.qois.iter().any(|q| q.kind == kind) {
            groups.push(run_group(data, kind, opts, reg, solver, &mut trail)?);
        }
    }
    Ok(BenchmarkResult {
        case_name: data.case_name.clone(),
        correlation: data.correlation,
        failure: data.failure.is_some(),
        yardstick_samples: opts.yardstick_samples,
        tol: opts.tol,
        groups,
        trail,
    })
}

fn group_label(kind: QoiKind) -> &'static str {
    match kind {
        QoiKind::Speed => "speed",
        QoiKind::Angle => "angle",
    }
}

/// `case,correlation,failure,group,method,total,ic_samples` rows; an empty
/// total marks a saturated search.
pub fn sample_counts_csv(results: &[BenchmarkResult]) -> String {
    let mut out = String::from("case,correlation,failure,group,method,total,ic_samples\n");
    let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
    for r in results {
        for g in &r.groups {
            for (method, total, ic) in [
                (Method::Ropdf, g.ropdf_total, g.ic_samples),
                (Method::Mckde, g.mckde_total, None),
            ] {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    r.case_name,
                    r.correlation.label(),
                    r.failure,
                    group_label(g.kind),
                    method,
                    opt(total),
                    opt(ic)
                );
            }
        }
    }
    out
}

/// `case,correlation,failure,qoi,method,n,ic_n,rel_l2` rows.
pub fn error_trail_csv(results: &[BenchmarkResult]) -> String {
    let mut out = String::from("case,correlation,failure,qoi,method,n,ic_n,rel_l2\n");
    for r in results {
        for e in &r.trail {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:e}",
                r.case_name,
                r.correlation.label(),
                r.failure,
                e.qoi,
                e.method,
                e.n_samples,
                e.ic_samples.map_or(String::new(), |c| c.to_string()),
                e.rel_l2
            );
        }
    }
    out
}

/// `case,correlation,failure,qoi,method,n,ic_n,runtime_s`; kept apart from the
/// error trail so that the latter is reproducible bit for bit.
pub fn timings_csv(results: &[BenchmarkResult]) -> String {
    let mut out = String::from("case,correlation,failure,qoi,method,n,ic_n,runtime_s\n");
    for r in results {
        for e in &r.trail {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.6}",
                r.case_name,
                r.correlation.label(),
                r.failure,
                e.qoi,
                e.method,
                e.n_samples,
                e.ic_samples.map_or(String::new(), |c| c.to_string()),
                e.runtime_s
            );
        }
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::bundled_case;

    fn field_with(values: Vec<Vec<f64>>) -> DensityField {
        let grid = SpatialGrid1D::new(0.0, 1.0, values[0].len()).unwrap();
        DensityField {
            grid,
            times: (0..values.len()).map(|t| t as f64 * 0.1).collect(),
            values,
            qoi: "x".into(),
        }
    }

    #[test]
    fn relative_error_identities() {
        let y = field_with(vec![vec![1.0, 2.0, 3.0], vec![0.5, 0.0, 4.0]]);
        assert_eq!(relative_l2_error(&y, &y).unwrap(), 0.0);
        let scaled = field_with(
            y.values
                .iter()
                .map(|r| r.iter().map(|v| 1.1 * v).collect())
                .collect(),
        );
        assert!((relative_l2_error(&scaled, &y).unwrap() - 0.1).abs() < 1e-14);
        let zero = field_with(vec![vec![0.0; 3]; 2]);
        assert_eq!(relative_l2_error(&zero, &y).unwrap(), 1.0);
        let other = field_with(vec![vec![0.0; 4]; 2]);
        assert!(relative_l2_error(&other, &y).is_err());
    }

    #[test]
    fn option_validation() {
        assert!(BenchmarkOptions::default().validate().is_ok());
        let bad = BenchmarkOptions {
            schedule: vec![500, 250],
            ..BenchmarkOptions::default()
        };
        assert!(bad.validate().is_err());
        let bad = BenchmarkOptions {
            tol: -0.1,
            ..BenchmarkOptions::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(
            *BenchmarkOptions::default().full_schedule().last().unwrap(),
            30_000
        );
    }

    #[test]
    fn accounting() {
        assert_eq!(learned_total(&[250, 500, 250], 500), 1000);
        assert_eq!(learned_total(&[250, 250, 250], 1000), 1500);
    }

    fn small_scenario() -> (Scenario, BenchmarkOptions) {
        let case = bundled_case("case9").unwrap();
        let s = Scenario {
            case,
            correlation: CorrelationKind::Uncorrelated,
            failure: None,
            params: OuParams::default(),
            sim: SimConfig {
                t_final: 1.0,
                save_stride: 20,
                seed: 5,
                ..SimConfig::default()
            },
        };
        let opts = BenchmarkOptions {
            schedule: vec![100, 200, 400],
            yardstick_samples: 800,
            ..BenchmarkOptions::default()
        };
        (s, opts)
    }

    #[test]
    fn mckde_self_comparison_and_determinism() {
        let (s, opts) = small_scenario();
        let qois = [Qoi::speed(0), Qoi::speed(3)];
        let data = prepare_scenario(&s, &qois, &opts, &GridOptions::default(), None).unwrap();
        for y in &data.yardsticks {
            for t in 0..y.times.len() {
                let m = y.mass_at(t);
                assert!((0.99..=1.01).contains(&m), "{m}");
            }
        }
        let same = mckde_estimate(&data, qois[0], 0, 800).unwrap();
        assert_eq!(relative_l2_error(&same, &data.yardsticks[0]).unwrap(), 0.0);
        let again = prepare_scenario(&s, &qois, &opts, &GridOptions::default(), None).unwrap();
        assert_eq!(again.yardsticks, data.yardsticks);

        let reg = RegressionOptions {
            mode: crate::regression::RegressionMode::Linear,
            ..RegressionOptions::default()
        };
        let r = run_benchmark(&data, &opts, &reg, &SolverConfig::default()).unwrap();
        let g = r.group(QoiKind::Speed).unwrap();
        assert_eq!(g.per_qoi.len(), 2);
        // MC+KDE at the yardstick size always meets the tolerance
        assert!(g.mckde_total.is_some());
        assert_eq!(g.mckde_total, g.per_qoi.iter().map(|c| c.mckde).sum());
        let csv = sample_counts_csv(std::slice::from_ref(&r));
        assert_eq!(csv.lines().count(), 3);
        let r2 = run_benchmark(&again, &opts, &reg, &SolverConfig::default()).unwrap();
        assert_eq!(error_trail_csv(&[r]), error_trail_csv(&[r2]));
    }
}
