//! Grid case data: parsing, admittance assembly, equilibrium, line removal and
//! the inter-bus distances used by the spatial noise kernel.
//!
//! Every bus is a machine node. Bus numbers in files and on the command line
//! are 1-based; everything in this crate is 0-based.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Miles per unit of `sqrt(X * B)` on a 60 Hz system: `sqrt(X B)` of a lossless
/// line is its electrical length in radians, and one radian at 60 Hz spans
/// `c / (2 pi 60)` miles.
pub const MILES_PER_RADIAN_60HZ: f64 = 186_282.397 / (2.0 * std::f64::consts::PI * 60.0);

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Series reactance (p.u.).
    pub x: f64,
    /// Total line-charging susceptance (p.u.).
    pub b: f64,
    pub g_series: f64,
    pub b_series: f64,
    /// Off-nominal turns ratio on the `from` side (1 for plain lines).
    pub tap: f64,
}

impl Line {
    pub fn connects(&self, i: usize, j: usize) -> bool {
        (self.from == i && self.to == j) || (self.from == j && self.to == i)
    }

    /// Adds `sign` times this branch's contribution to the admittance matrices.
    fn stamp(&self, g: &mut DMatrix<f64>, b: &mut DMatrix<f64>, sign: f64) {
        let (i, j) = (self.from, self.to);
        let t = self.tap;
        g[(i, i)] += sign * self.g_series / (t * t);
        b[(i, i)] += sign * (self.b_series / (t * t) + 0.5 * self.b);
        g[(j, j)] += sign * self.g_series;
        b[(j, j)] += sign * (self.b_series + 0.5 * self.b);
        g[(i, j)] -= sign * self.g_series / t;
        g[(j, i)] -= sign * self.g_series / t;
        b[(i, j)] -= sign * self.b_series / t;
        b[(j, i)] -= sign * self.b_series / t;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shunt {
    pub bus: usize,
    pub g: f64,
    pub b: f64,
}

/// Network and machine data of one test system.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub name: String,
    pub n: usize,
    pub omega_r: f64,
    /// Conductance matrix (real part of the bus admittance matrix).
    pub g: DMatrix<f64>,
    /// Susceptance matrix (imaginary part of the bus admittance matrix).
    pub b: DMatrix<f64>,
    pub lines: Vec<Line>,
    pub shunts: Vec<Shunt>,
    pub p: Vec<f64>,
    pub h: Vec<f64>,
    pub d: Vec<f64>,
    pub v_eq: Vec<f64>,
    pub delta_eq: Vec<f64>,
    /// True when `g`/`b` came from explicit matrices rather than the line list.
    explicit_admittance: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    name: String,
    n: usize,
    #[serde(rename = "omega_R")]
    omega_r: f64,
    machines: Vec<MachineRecord>,
    lines: Vec<LineRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    shunts: Vec<ShuntRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct MachineRecord {
    H: f64,
    D: f64,
    P: f64,
    v_eq: f64,
    delta_eq: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct LineRecord {
    from: usize,
    to: usize,
    X: f64,
    B: f64,
    g_series: f64,
    b_series: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShuntRecord {
    bus: usize,
    g: f64,
    b: f64,
}

impl GridCase {
    /// Builds a case whose admittance is assembled from `lines` and `shunts`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_lines(
        name: impl Into<String>,
        omega_r: f64,
        lines: Vec<Line>,
        shunts: Vec<Shunt>,
        p: Vec<f64>,
        h: Vec<f64>,
        d: Vec<f64>,
        v_eq: Vec<f64>,
        delta_eq: Vec<f64>,
    ) -> Result<Self> {
        let n = p.len();
        let mut case = GridCase {
            name: name.into(),
            n,
            omega_r,
            g: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, n),
            lines,
            shunts,
            p,
            h,
            d,
            v_eq,
            delta_eq,
            explicit_admittance: false,
        };
        case.validate_shapes()?;
        case.rebuild_admittance();
        case.validate()?;
        Ok(case)
    }

    /// Builds a case from explicit admittance matrices. `lines` only supply
    /// topology and distances.
    #[allow(clippy::too_many_arguments)]
    pub fn from_matrices(
        name: impl Into<String>,
        omega_r: f64,
        g: DMatrix<f64>,
        b: DMatrix<f64>,
        lines: Vec<Line>,
        p: Vec<f64>,
        h: Vec<f64>,
        d: Vec<f64>,
        v_eq: Vec<f64>,
        delta_eq: Vec<f64>,
    ) -> Result<Self> {
        let n = p.len();
        let case = GridCase {
            name: name.into(),
            n,
            omega_r,
            g,
            b,
            lines,
            shunts: Vec::new(),
            p,
            h,
            d,
            v_eq,
            delta_eq,
            explicit_admittance: true,
        };
        case.validate_shapes()?;
        case.validate()?;
        Ok(case)
    }

    fn validate_shapes(&self) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Err(Error::invalid(
                "n",
                "case must contain at least one machine",
            ));
        }
        for (field, len) in [
            ("H", self.h.len()),
            ("D", self.d.len()),
            ("v_eq", self.v_eq.len()),
            ("delta_eq", self.delta_eq.len()),
        ] {
            if len != n {
                return Err(Error::Dimension {
                    what: field.to_string(),
                    expected: n,
                    got: len,
                });
            }
        }
        if self.g.shape() != (n, n) || self.b.shape() != (n, n) {
            return Err(Error::Dimension {
                what: "admittance matrix".into(),
                expected: n,
                got: self.g.nrows(),
            });
        }
        for (k, line) in self.lines.iter().enumerate() {
            if line.from >= n || line.to >= n || line.from == line.to {
                return Err(Error::invalid(
                    format!("lines[{k}]"),
                    format!("bad bus pair {}-{} for n = {n}", line.from + 1, line.to + 1),
                ));
            }
            if line.tap <= 0.0 || !line.tap.is_finite() {
                return Err(Error::invalid(
                    format!("lines[{k}].tap"),
                    "must be positive",
                ));
            }
        }
        for (k, s) in self.shunts.iter().enumerate() {
            if s.bus >= n {
                return Err(Error::invalid(
                    format!("shunts[{k}].bus"),
                    "bus out of range",
                ));
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if !(self.h[i] > 0.0) {
                return Err(Error::invalid(format!("machines[{i}].H"), "must be > 0"));
            }
            if !(self.d[i] >= 0.0) {
                return Err(Error::invalid(format!("machines[{i}].D"), "must be >= 0"));
            }
            if !(self.v_eq[i] > 0.0) {
                return Err(Error::invalid(format!("machines[{i}].v_eq"), "must be > 0"));
            }
        }
        if !(self.omega_r > 0.0) {
            return Err(Error::invalid("omega_R", "must be > 0"));
        }
        for (name, m) in [("g", &self.g), ("b", &self.b)] {
            for i in 0..self.n {
                for j in 0..i {
                    if m[(i, j)] != m[(j, i)] {
                        return Err(Error::invalid(
                            name,
                            format!("matrix not symmetric at ({}, {})", i + 1, j + 1),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn rebuild_admittance(&mut self) {
        let n = self.n;
        let mut g = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, n);
        for line in &self.lines {
            line.stamp(&mut g, &mut b, 1.0);
        }
        for s in &self.shunts {
            g[(s.bus, s.bus)] += s.g;
            b[(s.bus, s.bus)] += s.b;
        }
        self.g = g;
        self.b = b;
    }

    /// Mean equilibrium voltage magnitude.
    pub fn mean_voltage(&self) -> f64 {
        self.v_eq.iter().sum::<f64>() / self.n as f64
    }

    pub fn has_line(&self, i: usize, j: usize) -> bool {
        self.lines.iter().any(|l| l.connects(i, j))
    }

    /// Connected bus pairs `(i, j)` with `i < j`, deduplicated.
    pub fn connected_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<_> = self
            .lines
            .iter()
            .map(|l| (l.from.min(l.to), l.from.max(l.to)))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CaseFile {
            name: self.name.clone(),
            n: self.n,
            omega_r: self.omega_r,
            machines: (0..self.n)
                .map(|i| MachineRecord {
                    H: self.h[i],
                    D: self.d[i],
                    P: self.p[i],
                    v_eq: self.v_eq[i],
                    delta_eq: self.delta_eq[i],
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineRecord {
                    from: l.from + 1,
                    to: l.to + 1,
                    X: l.x,
                    B: l.b,
                    g_series: l.g_series,
                    b_series: l.b_series,
                    tap: (l.tap != 1.0).then_some(l.tap),
                })
                .collect(),
            shunts: self
                .shunts
                .iter()
                .map(|s| ShuntRecord {
                    bus: s.bus + 1,
                    g: s.g,
                    b: s.b,
                })
                .collect(),
            g: self.explicit_admittance.then(|| matrix_rows(&self.g)),
            b: self.explicit_admittance.then(|| matrix_rows(&self.b)),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Other(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Parses a case from its JSON text. `origin` is used in error locations.
pub fn parse_case_str(text: &str, origin: &str) -> Result<GridCase> {
    let file: CaseFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("{origin}:{}:{}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    if file.n < 2 {
        return Err(Error::invalid(
            "n",
            "case files must describe at least two buses",
        ));
    }
    if file.machines.len() != file.n {
        return Err(Error::Dimension {
            what: "machines".into(),
            expected: file.n,
            got: file.machines.len(),
        });
    }
    let n = file.n;
    let bus = |k: usize, field: &str, value: usize| -> Result<usize> {
        if value == 0 || value > n {
            Err(Error::invalid(
                format!("lines[{k}].{field}"),
                format!("bus {value} outside 1..={n}"),
            ))
        } else {
            Ok(value - 1)
        }
    };
    let mut lines = Vec::with_capacity(file.lines.len());
    for (k, l) in file.lines.iter().enumerate() {
        lines.push(Line {
            from: bus(k, "from", l.from)?,
            to: bus(k, "to", l.to)?,
            x: l.X,
            b: l.B,
            g_series: l.g_series,
            b_series: l.b_series,
            tap: l.tap.unwrap_or(1.0),
        });
    }
    let mut shunts = Vec::with_capacity(file.shunts.len());
    for (k, s) in file.shunts.iter().enumerate() {
        if s.bus == 0 || s.bus > n {
            return Err(Error::invalid(
                format!("shunts[{k}].bus"),
                "bus out of range",
            ));
        }
        shunts.push(Shunt {
            bus: s.bus - 1,
            g: s.g,
            b: s.b,
        });
    }
    let col = |f: fn(&MachineRecord) -> f64| file.machines.iter().map(f).collect::<Vec<_>>();
    let (p, h, d) = (col(|m| m.P), col(|m| m.H), col(|m| m.D));
    let (v_eq, delta_eq) = (col(|m| m.v_eq), col(|m| m.delta_eq));

    match (file.g, file.b) {
        (None, None) => GridCase::from_lines(
            file.name,
            file.omega_r,
            lines,
            shunts,
            p,
            h,
            d,
            v_eq,
            delta_eq,
        ),
        (Some(g), Some(b)) => {
            let g = rows_to_matrix(&g, n, "g")?;
            let b = rows_to_matrix(&b, n, "b")?;
            let mut case = GridCase::from_matrices(
                file.name,
                file.omega_r,
                g,
                b,
                lines,
                p,
                h,
                d,
                v_eq,
                delta_eq,
            )?;
            case.shunts = shunts;
            Ok(case)
        }
        _ => Err(Error::invalid(
            "g/b",
            "explicit matrices must be given together",
        )),
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], n: usize, field: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::invalid(field, format!("expected a {n}x{n} matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

pub fn parse_case(path: impl AsRef<Path>) -> Result<GridCase> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_case_str(&text, &path.display().to_string())
}

/// Bundled test systems.
pub fn bundled_case(name: &str) -> Result<GridCase> {
    let text = match name {
        "case9" => include_str!("../data/cases/case9.json"),
        "case30" => include_str!("../data/cases/case30.json"),
        "case57" => include_str!("../data/cases/case57.json"),
        other => {
            return Err(Error::invalid(
                "case",
                format!("unknown bundled case {other:?} (case9, case30, case57)"),
            ))
        }
    };
    parse_case_str(text, name)
}

/// The line removed in the line-failure experiments, as 0-based bus indices.
pub fn standard_failure(case_name: &str) -> Option<(usize, usize)> {
    match case_name {
        "case9" => Some((7, 8)),
        "case30" => Some((5, 7)),
        "case57" => Some((35, 36)),
        _ => None,
    }
}

/// Electrical power `v_i sum_j v_j (g_ij cos(d_i - d_j) + b_ij sin(d_i - d_j))`
/// of every bus.
pub fn electrical_power(g: &DMatrix<f64>, b: &DMatrix<f64>, v: &[f64], delta: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                let (gij, bij) = (g[(i, j)], b[(i, j)]);
                if gij == 0.0 && bij == 0.0 {
                    continue;
                }
                let dd = delta[i] - delta[j];
                acc += v[j] * (gij * dd.cos() + bij * dd.sin());
            }
            v[i] * acc
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub delta: Vec<f64>,
    /// Max absolute power-balance mismatch over all buses.
    pub residual_norm: f64,
    pub iterations: usize,
}

fn max_mismatch(case: &GridCase, delta: &[f64]) -> f64 {
    electrical_power(&case.g, &case.b, &case.v_eq, delta)
        .iter()
        .zip(&case.p)
        .map(|(pe, p)| (p - pe).abs())
        .fold(0.0, f64::max)
}

/// Newton-Raphson on the swing power balance `P = Pe(delta)` with voltages held
/// at `v_eq` and bus 0 as the angle reference (`delta[0] = delta_eq[0]`).
/// Starts from a flat profile.
pub fn solve_equilibrium(
    case: &GridCase,
    tol: f64,
    max_iter: usize,
) -> Result<EquilibriumSolution> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be > 0"));
    }
    let n = case.n;
    let v = &case.v_eq;
    let mut delta = vec![case.delta_eq[0]; n];
    if n == 1 {
        let residual = max_mismatch(case, &delta);
        return finish(residual, tol, 0, delta);
    }

    for iter in 0..=max_iter {
        let pe = electrical_power(&case.g, &case.b, v, &delta);
        let mismatch: Vec<f64> = (1..n).map(|i| case.p[i] - pe[i]).collect();
        let reduced = mismatch.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if reduced <= tol {
            let residual = max_mismatch(case, &delta);
            return finish(residual, tol, iter, delta);
        }
        if iter == max_iter {
            return Err(Error::Equilibrium {
                iterations: iter,
                residual: reduced,
                reason: "no convergence within max_iter".into(),
            });
        }
        // Jacobian of Pe_i (i >= 1) with respect to delta_k (k >= 1).
        let mut jac = DMatrix::zeros(n - 1, n - 1);
        for i in 1..n {
            let mut diag = 0.0;
            for k in 0..n {
                if k == i {
                    continue;
                }
                let (gik, bik) = (case.g[(i, k)], case.b[(i, k)]);
                if gik == 0.0 && bik == 0.0 {
                    continue;
                }
                let dd = delta[i] - delta[k];
                let dpe = v[i] * v[k] * (-gik * dd.sin() + bik * dd.cos());
                diag += dpe;
                if k >= 1 {
                    jac[(i - 1, k - 1)] = -dpe;
                }
            }
            jac[(i - 1, i - 1)] = diag;
        }
        let step = jac
            .lu()
            .solve(&DVector::from_vec(mismatch))
            .ok_or_else(|| Error::Equilibrium {
                iterations: iter,
                residual: reduced,
                reason: "singular Jacobian".into(),
            })?;
        for i in 1..n {
            delta[i] += step[i - 1];
        }
        if delta.iter().any(|d| !d.is_finite()) {
            return Err(Error::Equilibrium {
                iterations: iter + 1,
                residual: f64::NAN,
                reason: "non-finite iterate".into(),
            });
        }
    }
    unreachable!("loop returns on its final iteration")
}

fn finish(
    residual: f64,
    tol: f64,
    iterations: usize,
    delta: Vec<f64>,
) -> Result<EquilibriumSolution> {
    if residual > tol {
        return Err(Error::Equilibrium {
            iterations,
            residual,
            reason: "injections do not balance at the reference bus".into(),
        });
    }
    Ok(EquilibriumSolution {
        delta,
        residual_norm: residual,
        iterations,
    })
}

/// Returns a copy of `case` with the line between buses `i` and `j` (0-based)
/// removed. Parallel circuits: only the first listed one is removed.
pub fn apply_line_failure(case: &GridCase, i: usize, j: usize) -> Result<GridCase> {
    let pos = case
        .lines
        .iter()
        .position(|l| l.connects(i, j))
        .ok_or(Error::MissingLine {
            from: i + 1,
            to: j + 1,
        })?;
    let mut out = case.clone();
    let line = out.lines.remove(pos);
    if out.explicit_admittance {
        line.stamp(&mut out.g, &mut out.b, -1.0);
        // keep exact symmetry
        for r in 0..out.n {
            for c in 0..r {
                out.g[(c, r)] = out.g[(r, c)];
                out.b[(c, r)] = out.b[(r, c)];
            }
        }
    } else {
        out.rebuild_admittance();
    }
    Ok(out)
}

/// Symmetric map of distances between connected buses.
#[derive(Debug, Clone, PartialEq)]
pub struct LineDistances {
    map: BTreeMap<(usize, usize), f64>,
}

impl LineDistances {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.map.get(&(i.min(j), i.max(j))).copied()
    }

    /// Pairs `(i, j, d_ij)` with `i < j`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.map.iter().map(|(&(i, j), &d)| (i, j, d))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// `d_ij = scale * sqrt(X_ij B_ij)` for every connected pair. Zero charging
/// susceptances are replaced by the smallest nonzero one in the case; parallel
/// circuits keep the shortest distance.
pub fn line_distances(case: &GridCase, scale: f64) -> Result<LineDistances> {
    if !(scale > 0.0) {
        return Err(Error::invalid("distance_scale", "must be > 0"));
    }
    let b_min = case
        .lines
        .iter()
        .map(|l| l.b.abs())
        .filter(|&b| b > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !b_min.is_finite() {
        return Err(Error::Degenerate(
            "all line susceptances are zero; distance kernel undefined".into(),
        ));
    }
    let mut map = BTreeMap::new();
    for line in &case.lines {
        let b = if line.b == 0.0 { b_min } else { line.b.abs() };
        let d = scale * (line.x.abs() * b).sqrt();
        if !(d > 0.0) {
            return Err(Error::invalid(
                "lines.X",
                format!("zero reactance on line {}-{}", line.from + 1, line.to + 1),
            ));
        }
        let key = (line.from.min(line.to), line.from.max(line.to));
        map.entry(key)
            .and_modify(|v: &mut f64| *v = v.min(d))
            .or_insert(d);
    }
    Ok(LineDistances { map })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_bus_text() -> &'static str {
        r#"{
  "name": "two",
  "n": 2,
  "omega_R": 1.0,
  "machines": [
    {"H": 1, "D": 1, "P": 0.5, "v_eq": 1.0, "delta_eq": 0.0},
    {"H": 1, "D": 1, "P": -0.5, "v_eq": 1.0, "delta_eq": 0.0}
  ],
  "lines": [{"from": 1, "to": 2, "X": 0.1, "B": 0.2, "g_series": 0.0, "b_series": -10.0}]
}"#
    }

    fn line(from: usize, to: usize, x: f64, b: f64) -> Line {
        Line {
            from,
            to,
            x,
            b,
            g_series: 0.0,
            b_series: -1.0 / x,
            tap: 1.0,
        }
    }

    #[test]
    fn two_bus_round_trip() {
        let case = parse_case_str(two_bus_text(), "two").unwrap();
        assert_eq!(case.n, 2);
        assert_eq!(case.b[(0, 1)], case.b[(1, 0)]);
        assert_eq!(case.b[(0, 1)], 10.0);
        assert_eq!(case.b[(0, 0)], -10.0 + 0.1);
        let again = parse_case_str(&case.to_json().unwrap(), "again").unwrap();
        assert_eq!(case, again);
    }

    #[test]
    fn missing_field_names_it() {
        let text = two_bus_text().replacen("\"H\": 1, ", "", 1);
        let err = parse_case_str(&text, "bad").unwrap_err();
        match err {
            Error::Parse { message, .. } => assert!(message.contains("`H`"), "{message}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let text = two_bus_text().replacen("\"n\": 2", "\"n\": 2, \"extra\": 1", 1);
        assert!(matches!(
            parse_case_str(&text, "x"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn dangling_line_rejected() {
        let text = two_bus_text().replacen("\"to\": 2", "\"to\": 3", 1);
        assert!(matches!(
            parse_case_str(&text, "x"),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn asymmetric_explicit_matrix_rejected() {
        let text = two_bus_text().replacen(
            "\"lines\"",
            "\"g\": [[0,1],[0,0]], \"b\": [[0,1],[1,0]], \"lines\"",
            1,
        );
        let err = parse_case_str(&text, "x").unwrap_err();
        assert!(
            matches!(err, Error::Validation { ref field, .. } if field == "g"),
            "{err}"
        );
    }

    #[test]
    fn bundled_case9_shape() {
        let case = bundled_case("case9").unwrap();
        assert_eq!(case.n, 9);
        assert_eq!(case.name, "case9");
        assert_eq!(case.lines.len(), 9);
        assert!(case.h.iter().all(|&h| h == 1.0));
    }

    fn two_machine(p: [f64; 2]) -> GridCase {
        let mut b = DMatrix::zeros(2, 2);
        b[(0, 1)] = 1.0;
        b[(1, 0)] = 1.0;
        GridCase::from_matrices(
            "two",
            1.0,
            DMatrix::zeros(2, 2),
            b,
            vec![line(0, 1, 1.0, 1.0)],
            p.to_vec(),
            vec![1.0; 2],
            vec![1.0; 2],
            vec![1.0; 2],
            vec![0.0; 2],
        )
        .unwrap()
    }

    #[test]
    fn two_machine_sine_law() {
        let sol = solve_equilibrium(&two_machine([0.5, -0.5]), 1e-12, 50).unwrap();
        let angle = sol.delta[0] - sol.delta[1];
        assert!((angle - 0.5f64.asin()).abs() < 1e-10, "{angle}");
        assert_eq!(sol.delta[0], 0.0);
    }

    #[test]
    fn zero_mismatch_fixed_point() {
        let sol = solve_equilibrium(&two_machine([0.0, 0.0]), 1e-12, 50).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.delta, vec![0.0, 0.0]);
    }

    #[test]
    fn unbalanced_injection_fails() {
        let err = solve_equilibrium(&two_machine([0.5, 0.5]), 1e-10, 20).unwrap_err();
        assert!(matches!(err, Error::Equilibrium { .. }));
    }

    #[test]
    fn infeasible_transfer_does_not_converge() {
        // |P| > max transfer of 1 p.u.
        let err = solve_equilibrium(&two_machine([1.5, -1.5]), 1e-10, 30).unwrap_err();
        assert!(matches!(err, Error::Equilibrium { .. }));
    }

    #[test]
    fn bundled_equilibria() {
        for name in ["case9", "case30", "case57"] {
            let case = bundled_case(name).unwrap();
            let sol = solve_equilibrium(&case, 1e-10, 10).unwrap();
            // independent check of the returned angles
            let pe = electrical_power(&case.g, &case.b, &case.v_eq, &sol.delta);
            let resid = pe
                .iter()
                .zip(&case.p)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(resid < 1e-8, "{name}: {resid}");
            assert!(sol.iterations <= 10);
            assert_eq!(sol.delta[0], case.delta_eq[0]);
            let gap = sol
                .delta
                .iter()
                .zip(&case.delta_eq)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(
                gap < 1e-8,
                "{name}: solution differs from tabulated angles by {gap}"
            );
        }
    }

    #[test]
    fn line_failure_case9() {
        let case = bundled_case("case9").unwrap();
        let before = case.clone();
        let failed = apply_line_failure(&case, 7, 8).unwrap();
        assert_eq!(failed.g[(7, 8)], 0.0);
        assert_eq!(failed.b[(7, 8)], 0.0);
        assert_eq!(failed.b[(8, 7)], 0.0);
        assert_eq!(failed.lines.len(), case.lines.len() - 1);
        assert_eq!(case, before);
        assert!(!failed.has_line(7, 8));
        // diagonal compensation: bus 9 keeps only the 9-4 line
        let remaining = &case.lines.iter().find(|l| l.connects(8, 3)).unwrap();
        assert!((failed.b[(8, 8)] - (remaining.b_series + 0.5 * remaining.b)).abs() < 1e-12);
    }

    #[test]
    fn line_failure_missing_line() {
        let case = bundled_case("case9").unwrap();
        let err = apply_line_failure(&case, 0, 8).unwrap_err();
        assert!(matches!(err, Error::MissingLine { from: 1, to: 9 }));
    }

    #[test]
    fn explicit_matrix_failure_keeps_symmetry() {
        let mut case = two_machine([0.0, 0.0]);
        case.lines.push(line(0, 1, 0.5, 0.0));
        let failed = apply_line_failure(&case, 1, 0).unwrap();
        assert_eq!(failed.lines.len(), 1);
        assert_eq!(failed.b[(0, 1)], failed.b[(1, 0)]);
    }

    fn distance_case(lines: Vec<Line>, n: usize) -> GridCase {
        GridCase::from_lines(
            "d",
            1.0,
            lines,
            vec![],
            vec![0.0; n],
            vec![1.0; n],
            vec![1.0; n],
            vec![1.0; n],
            vec![0.0; n],
        )
        .unwrap()
    }

    #[test]
    fn distances_perfect_square() {
        let d = line_distances(&distance_case(vec![line(0, 1, 4.0, 9.0)], 2), 1.0).unwrap();
        assert_eq!(d.get(0, 1), Some(6.0));
        assert_eq!(d.get(1, 0), Some(6.0));
    }

    #[test]
    fn distances_replace_zero_susceptance() {
        let case = distance_case(vec![line(0, 1, 1.0, 0.0), line(0, 2, 1.0, 0.25)], 3);
        let d = line_distances(&case, 1.0).unwrap();
        assert_eq!(d.get(0, 1), Some(0.5));
        assert_eq!(d.get(0, 2), Some(0.5));
    }

    #[test]
    fn distances_single_line() {
        let d = line_distances(&distance_case(vec![line(0, 1, 0.1, 0.4)], 2), 1.0).unwrap();
        assert!((d.get(0, 1).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn distances_all_zero_susceptance() {
        let case = distance_case(vec![line(0, 1, 0.1, 0.0)], 2);
        assert!(matches!(
            line_distances(&case, 1.0),
            Err(Error::Degenerate(_))
        ));
    }
}
