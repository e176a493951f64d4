//! Run configuration: a JSON document with every section optional. Missing
//! keys take the model defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{BenchmarkOptions, GridOptions};
use crate::case::{bundled_case, parse_case, standard_failure, GridCase};
use crate::error::{Error, Result};
use crate::noise::{CorrelationKind, OuParams};
use crate::regression::{RegressionMode, RegressionOptions};
use crate::sim::SimConfig;
use crate::solver::SolverConfig;
use crate::Qoi;

/// Environment variable that overrides the output root.
pub const OUTPUT_ENV: &str = "ROPDF_OUTPUT_ROOT";

pub const BUNDLED_CASES: [&str; 3] = ["case9", "case30", "case57"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Bundled case name (`case9`, `case30`, `case57`) or path to a case file.
    pub case: String,
    pub correlation: CorrelationKind,
    /// Failed line as 1-based bus numbers, or `"standard"` via the CLI.
    pub failure: Option<[usize; 2]>,
    pub ou: OuParams,
    pub sim: SimConfig,
    pub solver: SolverConfig,
    pub regression: RegressionOptions,
    pub grid: GridOptions,
    pub benchmark: BenchmarkOptions,
    /// QoIs such as `omega_1` or `delta_3`; empty means every speed.
    pub qoi: Vec<String>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            case: "case9".into(),
            correlation: CorrelationKind::Uncorrelated,
            failure: None,
            ou: OuParams::default(),
            sim: SimConfig::default(),
            solver: SolverConfig::default(),
            regression: RegressionOptions::default(),
            grid: GridOptions::default(),
            benchmark: BenchmarkOptions::default(),
            qoi: Vec::new(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::Validation { field, message } => Error::Validation {
            field: format!("{section}.{field}"),
            message,
        },
        other => other,
    }
}

/// Loads a case by bundled name or path.
pub fn load_case(spec: &str) -> Result<GridCase> {
    if BUNDLED_CASES.contains(&spec) {
        bundled_case(spec)
    } else {
        parse_case(spec)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.case.is_empty() {
            return Err(Error::invalid("case", "missing case name or path"));
        }
        if !BUNDLED_CASES.contains(&self.case.as_str()) && !Path::new(&self.case).is_file() {
            return Err(Error::invalid(
                "case",
                format!("no bundled case or file named {:?}", self.case),
            ));
        }
        match self.correlation {
            CorrelationKind::Exponential { lambda } if !(lambda > 0.0) => {
                return Err(Error::invalid("correlation.lambda", "must be > 0"))
            }
            CorrelationKind::Constant { rho } if !(-1.0..=1.0).contains(&rho) => {
                return Err(Error::invalid("correlation.rho", "must lie in [-1, 1]"))
            }
            _ => {}
        }
        if let Some([i, j]) = self.failure {
            if i == 0 || j == 0 || i == j {
                return Err(Error::invalid(
                    "failure",
                    "need two distinct 1-based bus numbers",
                ));
            }
        }
        self.ou.validate().map_err(|e| prefixed("ou", e))?;
        self.sim.validate().map_err(|e| prefixed("sim", e))?;
        self.solver.validate().map_err(|e| prefixed("solver", e))?;
        self.regression
            .validate()
            .map_err(|e| prefixed("regression", e))?;
        self.grid.validate().map_err(|e| prefixed("grid", e))?;
        // the range error names the bare key for the most common knob
        if !(self.benchmark.tol > 0.0) {
            return Err(Error::invalid(
                "tol",
                format!("must be > 0, got {}", self.benchmark.tol),
            ));
        }
        self.benchmark
            .validate()
            .map_err(|e| prefixed("benchmark", e))?;
        for q in &self.qoi {
            Qoi::parse(q)?;
        }
        Ok(())
    }

    pub fn load_case(&self) -> Result<GridCase> {
        load_case(&self.case)
    }

    /// 0-based failed line, if any.
    pub fn failure_line(&self) -> Option<(usize, usize)> {
        self.failure.map(|[i, j]| (i - 1, j - 1))
    }

    /// Paper failure line of a bundled case, 1-based.
    pub fn standard_failure(case: &str) -> Option<[usize; 2]> {
        standard_failure(case).map(|(i, j)| [i + 1, j + 1])
    }

    pub fn qois(&self, n: usize) -> Result<Vec<Qoi>> {
        if self.qoi.is_empty() {
            return Ok((0..n).map(Qoi::speed).collect());
        }
        let qois = self
            .qoi
            .iter()
            .map(|q| Qoi::parse(q))
            .collect::<Result<Vec<_>>>()?;
        if let Some(q) = qois.iter().find(|q| q.machine >= n) {
            return Err(Error::invalid(
                "qoi",
                format!("{q} exceeds the {n} machines of the case"),
            ));
        }
        Ok(qois)
    }

    /// Output directory after applying the environment override.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Other(e.to_string()))
    }
}

pub fn parse_config_str(text: &str, origin: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("{origin}:{}:{}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, &path.display().to_string())
}

/// Command-line overrides applied on top of a parsed configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub case: Option<String>,
    /// `uncorrelated`, `exponential`, `constant` (standard parameter for the
    /// case) or `exponential:<lambda>`, `constant:<rho>`.
    pub correlation: Option<String>,
    /// `standard`, `none` or `<i>-<j>` with 1-based bus numbers.
    pub failure: Option<String>,
    pub qoi: Vec<String>,
    /// Regression mode: `auto`, `linear`, `llr` or `manual`.
    pub method: Option<String>,
}

fn parse_correlation(spec: &str, case_name: &str) -> Result<CorrelationKind> {
    let (label, value) = match spec.split_once(':') {
        Some((l, v)) => (l, Some(v)),
        None => (spec, None),
    };
    let Some(value) = value else {
        return CorrelationKind::standard(case_name, label);
    };
    let x: f64 = value
        .parse()
        .map_err(|_| Error::invalid("correlation", format!("bad parameter in {spec:?}")))?;
    match label {
        "exponential" => Ok(CorrelationKind::Exponential { lambda: x }),
        "constant" => Ok(CorrelationKind::Constant { rho: x }),
        _ => Err(Error::invalid(
            "correlation",
            format!("{label:?} takes no parameter"),
        )),
    }
}

fn parse_failure(spec: &str, case_name: &str) -> Result<Option<[usize; 2]>> {
    match spec {
        "none" => Ok(None),
        "standard" => RunConfig::standard_failure(case_name)
            .map(Some)
            .ok_or_else(|| {
                Error::invalid("failure", format!("no standard failure for {case_name:?}"))
            }),
        _ => {
            let bad = || {
                Error::invalid(
                    "failure",
                    format!("expected standard, none or i-j, got {spec:?}"),
                )
            };
            let (i, j) = spec.split_once('-').ok_or_else(bad)?;
            Ok(Some([
                i.trim().parse().map_err(|_| bad())?,
                j.trim().parse().map_err(|_| bad())?,
            ]))
        }
    }
}

fn parse_mode(spec: &str) -> Result<RegressionMode> {
    serde_json::from_value(serde_json::Value::String(spec.to_string())).map_err(|_| {
        Error::invalid(
            "method",
            format!("expected auto, linear, llr or manual, got {spec:?}"),
        )
    })
}

impl RunConfig {
    /// Applies overrides and revalidates. Case, correlation and failure
    /// overrides also narrow the benchmark plan to that single choice.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(seed) = o.seed {
            self.sim.seed = seed;
            self.regression.seed = seed;
        }
        if let Some(case) = &o.case {
            self.case = case.clone();
            self.benchmark.cases = vec![case.clone()];
        }
        let case_name = match &o.case {
            Some(_) if o.correlation.is_some() || o.failure.as_deref() == Some("standard") => {
                self.load_case()?.name
            }
            _ => self.case.clone(),
        };
        if let Some(spec) = &o.correlation {
            self.correlation = parse_correlation(spec, &case_name)?;
            self.benchmark.correlations = vec![self.correlation.label().to_string()];
        }
        if let Some(spec) = &o.failure {
            self.failure = parse_failure(spec, &case_name)?;
            self.benchmark.failures = vec![self.failure.is_some()];
        }
        if !o.qoi.is_empty() {
            self.qoi = o.qoi.clone();
        }
        if let Some(spec) = &o.method {
            self.regression.mode = parse_mode(spec)?;
        }
        self.validate()
    }
}
