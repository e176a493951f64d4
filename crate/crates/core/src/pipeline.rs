//! Staged command pipeline with on-disk artifacts and a checksum manifest.
//!
//! `simulate` writes the ensemble, `learn` the regression histories and
//! coefficient fields, `solve` the learned densities, `yardstick` the
//! reference densities and `benchmark` the sample-count study. Each command
//! appends a step to `manifest.json`; [`replay`] reruns every step into a
//! fresh directory and compares checksums.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{
    coefficient_field, compute_yardstick, default_qois, error_trail_csv, learn_history,
    prepare_scenario, ropdf_estimate, run_benchmark, sample_counts_csv, scenario_initial,
    timings_csv, write_text, BenchmarkResult, Scenario, ScenarioData,
};
use crate::case::{apply_line_failure, solve_equilibrium, GridCase};
use crate::config::{load_case, RunConfig};
use crate::density::{build_grid, kde_silverman, SpatialGrid1D};
use crate::ensemble_io::{load_ensemble_for, store_ensemble};
use crate::error::{Error, Result};
use crate::noise::{build_correlation, CorrelationKind};
use crate::regression::{fit_history, regression_csv, write_samples_csv, RegressionData};
use crate::sim::{simulate_ensemble, simulate_panel, Panel, PanelField, SimConfig, SwingModel};
use crate::solver::{solve_ropdf, AdvectionField};
use crate::{Qoi, QoiKind};

pub const MANIFEST: &str = "manifest.json";
pub const ENSEMBLE: &str = "ensemble.bin";

/// Times at which `learn` exports the raw regression samples.
pub const SNAPSHOT_TIMES: [f64; 4] = [0.5, 2.5, 5.0, 9.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Simulate,
    Learn,
    Solve,
    Yardstick,
    Benchmark,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::Simulate,
        Command::Learn,
        Command::Solve,
        Command::Yardstick,
        Command::Benchmark,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Learn => "learn",
            Command::Solve => "solve",
            Command::Yardstick => "yardstick",
            Command::Benchmark => "benchmark",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid("command", format!("unknown command {s:?}")))
    }
}

/// One executed command: its configuration and the checksums of what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub command: Command,
    pub config: RunConfig,
    /// Relative path -> sha256 (hex).
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub steps: Vec<Step>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            tool: format!("ropdf {}", env!("CARGO_PKG_VERSION")),
            steps: Vec::new(),
        }
    }
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Other(e.to_string()))?;
        write_text(path, &(text + "\n"))
    }

    /// Records `step`, replacing an earlier run of the same command in place.
    fn record(&mut self, step: Step) {
        match self.steps.iter_mut().find(|s| s.command == step.command) {
            Some(slot) => *slot = step,
            None => self.steps.push(step),
        }
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// What a command run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub command: Command,
    pub dir: PathBuf,
    pub artifacts: Vec<String>,
    /// Benchmark results, when the command was `benchmark`.
    pub results: Vec<BenchmarkResult>,
}

/// Runs one command into `dir` and records it in the manifest there.
pub fn run_command(
    command: Command,
    config: &RunConfig,
    dir: impl AsRef<Path>,
) -> Result<RunSummary> {
    config.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let start = Instant::now();
    let mut results = Vec::new();
    let artifacts = match command {
        Command::Simulate => simulate(config, dir)?,
        Command::Learn => learn(config, dir)?,
        Command::Solve => solve(config, dir)?,
        Command::Yardstick => yardstick(config, dir)?,
        Command::Benchmark => {
            let (files, r) = benchmark(config, dir)?;
            results = r;
            files
        }
    };
    log::info!(
        "{command} finished in {:.1} s",
        start.elapsed().as_secs_f64()
    );
    let mut sums = BTreeMap::new();
    for name in &artifacts {
        sums.insert(name.clone(), sha256_file(dir.join(name))?);
    }
    let manifest_path = dir.join(MANIFEST);
    let mut manifest = if manifest_path.is_file() {
        Manifest::load(&manifest_path)?
    } else {
        Manifest::default()
    };
    manifest.record(Step {
        command,
        config: config.clone(),
        artifacts: sums,
    });
    manifest.write(&manifest_path)?;
    Ok(RunSummary {
        command,
        dir: dir.to_path_buf(),
        artifacts,
        results,
    })
}

/// Outcome of a replay: artifacts whose checksum changed or went missing.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub checked: usize,
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Reruns every step of a manifest into `dir` and compares checksums.
pub fn replay(manifest_path: impl AsRef<Path>, dir: impl AsRef<Path>) -> Result<ReplayReport> {
    let manifest = Manifest::load(manifest_path)?;
    let dir = dir.as_ref();
    let mut report = ReplayReport {
        checked: 0,
        mismatches: Vec::new(),
    };
    for step in &manifest.steps {
        run_command(step.command, &step.config, dir)?;
        for (name, expected) in &step.artifacts {
            report.checked += 1;
            let path = dir.join(name);
            let got = if path.is_file() {
                Some(sha256_file(&path)?)
            } else {
                None
            };
            if got.as_deref() != Some(expected.as_str()) {
                report.mismatches.push(format!("{}: {name}", step.command));
            }
        }
    }
    Ok(report)
}

/// Scenario of a run configuration: case, correlation, failure and model.
pub fn scenario_of(config: &RunConfig) -> Result<Scenario> {
    let case = load_case(&config.case)?;
    let failure = config.failure_line();
    if let Some((i, j)) = failure {
        if i >= case.n || j >= case.n {
            return Err(Error::invalid(
                "failure",
                format!("bus out of range for {}", case.name),
            ));
        }
    }
    Ok(Scenario {
        case,
        correlation: config.correlation,
        failure,
        params: config.ou,
        sim: config.sim,
    })
}

/// Network of the main run and the model that simulates it.
fn main_model(s: &Scenario) -> Result<(GridCase, SwingModel)> {
    let network = match s.failure {
        Some((i, j)) => apply_line_failure(&s.case, i, j)?,
        None => s.case.clone(),
    };
    // the noise model and the operating point belong to the intact network
    let corr = build_correlation(&s.case, &s.correlation)?;
    let eq = solve_equilibrium(&s.case, 1e-10, 50)?;
    let model = SwingModel::new(&network, s.params, &corr, &eq.delta)?;
    Ok((network, model))
}

fn missing(artifact: &str, producer: Command) -> Error {
    Error::MissingArtifact {
        artifact: artifact.into(),
        producer: producer.name().into(),
    }
}

fn simulate(config: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let s = scenario_of(config)?;
    let n = config.sim.n_realizations;
    let initial = scenario_initial(&s, n)?;
    let (_, model) = main_model(&s)?;
    let ens = simulate_ensemble(&initial, &model, &config.sim, &s.case.name, s.correlation)?;
    store_ensemble(&ens, dir.join(ENSEMBLE))?;
    build_correlation(&s.case, &s.correlation)?.write_csv(dir)?;
    Ok(vec![ENSEMBLE.into(), "R.csv".into(), "C.csv".into()])
}

/// Panel of the stored ensemble, checked against the configured scenario.
fn load_panel(config: &RunConfig, dir: &Path) -> Result<(Scenario, GridCase, Panel)> {
    let path = dir.join(ENSEMBLE);
    if !path.is_file() {
        return Err(missing("ensemble", Command::Simulate));
    }
    let s = scenario_of(config)?;
    let ens = load_ensemble_for(&path, &s.case)?;
    if ens.correlation != s.correlation || ens.config.seed != s.sim.seed {
        return Err(Error::invalid(
            "ensemble",
            "stored ensemble was simulated with a different correlation or seed; rerun simulate",
        ));
    }
    let (network, model) = main_model(&s)?;
    let panel = Panel::from_ensemble(&ens, &model)?;
    Ok((s, network, panel))
}

fn qoi_field(q: Qoi) -> PanelField {
    match q.kind {
        QoiKind::Speed => PanelField::Omega,
        QoiKind::Angle => PanelField::Delta,
    }
}

/// Grid of a QoI from the first pilot realizations of a panel.
fn pilot_grid(config: &RunConfig, panel: &Panel, q: Qoi) -> Result<SpatialGrid1D> {
    let count = config.grid.pilot_samples.min(panel.n_realizations);
    let pilot: Vec<&[f64]> = (0..panel.times.len())
        .map(|t| panel.samples(qoi_field(q), t, q.machine, count))
        .collect();
    build_grid(
        &pilot,
        config.grid.padding_factor,
        config.grid.cells_per_bandwidth,
    )
}

/// Learned coefficients of one QoI as stored by `learn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientFile {
    qoi: Qoi,
    z_min: f64,
    z_max: f64,
    n_cells: usize,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    diffusion: Vec<f64>,
}

fn coefficients_name(q: Qoi) -> String {
    format!("coefficients_{q}.json")
}

fn learn(config: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let (s, network, panel) = load_panel(config, dir)?;
    let qois = config.qois(network.n)?;
    let n = panel.n_realizations;
    let mut files = Vec::new();
    for q in qois {
        let grid = pilot_grid(config, &panel, q)?;
        let sets = (0..panel.times.len())
            .map(|t| RegressionData::from_panel(&panel, q, t, n))
            .collect::<Result<Vec<_>>>()?;
        let history = fit_history(&sets, &grid, &config.regression)?;

        let name = format!("regression_{q}.csv");
        write_text(dir.join(&name), &regression_csv(&grid, &history))?;
        files.push(name);

        let snaps: Vec<&RegressionData> = SNAPSHOT_TIMES
            .iter()
            .filter_map(|&t| panel.time_index(t))
            .map(|t| &sets[t])
            .collect();
        let name = format!("samples_{q}.csv");
        write_samples_csv(dir.join(&name), &snaps)?;
        files.push(name);

        let mut field = AdvectionField::from_history(&history, &grid, &network, q)?;
        if config.solver.step_diffusion {
            field = field.with_step_diffusion(&history, &network, q, s.sim.dt)?;
        }
        let file = CoefficientFile {
            qoi: q,
            z_min: grid.z_min,
            z_max: grid.z_max,
            n_cells: grid.n_cells,
            times: field.times,
            values: field.values,
            diffusion: field.diffusion,
        };
        let name = coefficients_name(q);
        let text = serde_json::to_string(&file).map_err(|e| Error::Other(e.to_string()))?;
        write_text(dir.join(&name), &text)?;
        files.push(name);
    }
    Ok(files)
}

fn load_coefficients(dir: &Path, q: Qoi) -> Result<(SpatialGrid1D, AdvectionField)> {
    let path = dir.join(coefficients_name(q));
    if !path.is_file() {
        return Err(missing("regression artifacts", Command::Learn));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: CoefficientFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    if file.qoi != q {
        return Err(Error::Schema(format!(
            "{} holds {}",
            path.display(),
            file.qoi
        )));
    }
    let grid = SpatialGrid1D::new(file.z_min, file.z_max, file.n_cells)?;
    Ok((
        grid,
        AdvectionField {
            times: file.times,
            values: file.values,
            diffusion: file.diffusion,
            source: q.to_string(),
        },
    ))
}

fn solve(config: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let case = load_case(&config.case)?;
    let qois = config.qois(case.n)?;
    // check the learned artifacts before paying for the ensemble load
    let fields = qois
        .iter()
        .map(|&q| load_coefficients(dir, q))
        .collect::<Result<Vec<_>>>()?;
    let (_, _, panel) = load_panel(config, dir)?;
    let mut files = Vec::new();
    for (&q, (grid, field)) in qois.iter().zip(&fields) {
        let ic = kde_silverman(
            panel.samples(qoi_field(q), 0, q.machine, panel.n_realizations),
            grid,
        )?;
        let mut sol = solve_ropdf(&ic, grid, field, &panel.times, &config.solver)?;
        sol.density.qoi = q.to_string();
        let name = format!("density_{q}.csv");
        sol.density.write_csv(dir.join(&name))?;
        files.push(name);
        let name = format!("solver_{q}.json");
        sol.report.write_json(dir.join(&name))?;
        files.push(name);
    }
    Ok(files)
}

fn yardstick(config: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let s = scenario_of(config)?;
    let n = config.benchmark.yardstick_samples;
    let initial = scenario_initial(&s, n)?;
    let (network, model) = main_model(&s)?;
    let sim = SimConfig {
        n_realizations: n,
        ..s.sim
    };
    let panel = simulate_panel(&initial, &model, &sim)?;
    let mut files = Vec::new();
    for q in config.qois(network.n)? {
        let grid = pilot_grid(config, &panel, q)?;
        let name = format!("yardstick_{q}.csv");
        compute_yardstick(&panel, q, &grid, n)?.write_csv(dir.join(&name))?;
        files.push(name);
    }
    Ok(files)
}

fn scenario_dir(data: &ScenarioData) -> String {
    format!(
        "{}_{}_{}",
        data.case_name,
        data.correlation.label(),
        if data.failure.is_some() {
            "failure"
        } else {
            "nominal"
        }
    )
}

/// Densities and regressions behind the chosen counts, for the first QoI of
/// each group, under a per-scenario subdirectory of `dir`.
fn export_scenario_into(
    config: &RunConfig,
    data: &ScenarioData,
    result: &BenchmarkResult,
    dir: &Path,
) -> Result<Vec<String>> {
    let sub = scenario_dir(data);
    let mut files = Vec::new();
    for group in &result.groups {
        let Some(counts) = group.per_qoi.first() else {
            continue;
        };
        let q = counts.qoi;
        let k = data.index_of(q)?;
        files.push((
            format!("{sub}/yardstick_{q}.csv"),
            data.yardsticks[k].to_csv(),
        ));
        if let (Some(n), Some(c)) = (counts.ropdf, group.ic_samples) {
            let history = learn_history(data, q, 0, n, &config.regression)?;
            let field = coefficient_field(data, q, &history, &config.solver)?;
            let sol = ropdf_estimate(data, q, &field, 0, c, &config.solver)?;
            files.push((
                format!("{sub}/regression_{q}.csv"),
                regression_csv(&data.grids[k], &history),
            ));
            files.push((format!("{sub}/density_{q}.csv"), sol.density.to_csv()));
        }
    }
    std::fs::create_dir_all(dir.join(&sub)).map_err(|e| Error::io(dir.join(&sub), e))?;
    let mut names = Vec::new();
    for (name, text) in files {
        write_text(dir.join(&name), &text)?;
        names.push(name);
    }
    Ok(names)
}

/// Cases, correlations and failure flags of the benchmark plan.
fn plan(config: &RunConfig) -> Result<Vec<(GridCase, CorrelationKind, Vec<bool>)>> {
    let b = &config.benchmark;
    let mut out = Vec::new();
    for name in &b.cases {
        let case = load_case(name)?;
        for label in &b.correlations {
            let corr = if label == config.correlation.label() && b.correlations.len() == 1 {
                config.correlation
            } else {
                CorrelationKind::standard(&case.name, label)?
            };
            out.push((case.clone(), corr, b.failures.clone()));
        }
    }
    Ok(out)
}

fn benchmark(config: &RunConfig, dir: &Path) -> Result<(Vec<String>, Vec<BenchmarkResult>)> {
    let b = &config.benchmark;
    let mut results = Vec::new();
    let mut files = Vec::new();
    for (case, corr, failures) in plan(config)? {
        let base = Scenario {
            case: case.clone(),
            correlation: corr,
            failure: None,
            params: config.ou,
            sim: config.sim,
        };
        // one burn-in per (case, correlation), shared by its failure flags
        let initial = scenario_initial(&base, b.yardstick_samples)?;
        let qois = if config.qoi.is_empty() {
            default_qois(case.n, b.include_angles)
        } else {
            config.qois(case.n)?
        };
        for &fail in &failures {
            let failure = if fail {
                let line = match config.failure_line() {
                    Some(line) if b.cases.len() == 1 => line,
                    _ => crate::case::standard_failure(&case.name).ok_or_else(|| {
                        Error::invalid(
                            "failure",
                            format!("no standard line failure for {}", case.name),
                        )
                    })?,
                };
                Some(line)
            } else {
                None
            };
            let s = Scenario {
                failure,
                ..base.clone()
            };
            let start = Instant::now();
            let data = prepare_scenario(&s, &qois, b, &config.grid, Some(&initial))?;
            let result = run_benchmark(&data, b, &config.regression, &config.solver)?;
            log::info!(
                "{} done in {:.1} s",
                scenario_dir(&data),
                start.elapsed().as_secs_f64()
            );
            files.extend(export_scenario_into(config, &data, &result, dir)?);
            results.push(result);
        }
    }
    write_text(dir.join("sample_counts.csv"), &sample_counts_csv(&results))?;
    write_text(dir.join("error_trail.csv"), &error_trail_csv(&results))?;
    write_text(dir.join("timings.csv"), &timings_csv(&results))?;
    let json = serde_json::to_string_pretty(&results).map_err(|e| Error::Other(e.to_string()))?;
    write_text(dir.join("results.json"), &(json + "\n"))?;
    files.extend(["sample_counts.csv", "error_trail.csv", "results.json"].map(String::from));
    Ok((files, results))
}
