//! Conditional-expectation estimates for the advection coefficients: global
//! least squares, Gaussian local linear regression (LLR), k-fold
//! cross-validated bandwidths and the LLR/linear switch.
//!
//! Internally everything runs on standardized data so the moment sums stay
//! well conditioned. Cross-validation and bulk fits use a binned engine that
//! keeps exact first and second moments per bin and evaluates the kernel at
//! bin centres.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::density::{silverman_bandwidth, SpatialGrid1D};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::sim::{Panel, PanelField};
use crate::{Qoi, QoiKind};

const MIN_SAMPLES: usize = 10;
const KERNEL_CUTOFF: f64 = 8.0;

/// Paired samples at one saved time.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub t: f64,
    pub qoi: Qoi,
}

impl RegressionData {
    pub fn new(x: Vec<f64>, y: Vec<f64>, t: f64, qoi: Qoi) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Dimension {
                what: "regression response".into(),
                expected: x.len(),
                got: y.len(),
            });
        }
        if x.len() < MIN_SAMPLES {
            return Err(Error::invalid(
                "regression data",
                format!("need at least {MIN_SAMPLES} samples, got {}", x.len()),
            ));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::invalid("regression data", "non-finite sample"));
        }
        Ok(RegressionData { x, y, t, qoi })
    }

    /// First `count` realizations of a panel at time index `t_index`.
    pub fn from_panel(panel: &Panel, qoi: Qoi, t_index: usize, count: usize) -> Result<Self> {
        if qoi.machine >= panel.n {
            return Err(Error::invalid(
                "qoi",
                format!("{qoi} is not in a {}-machine case", panel.n),
            ));
        }
        let (xf, yf) = match qoi.kind {
            QoiKind::Speed => (PanelField::Omega, PanelField::SpeedResponse),
            QoiKind::Angle => (PanelField::Delta, PanelField::Omega),
        };
        RegressionData::new(
            panel.samples(xf, t_index, qoi.machine, count).to_vec(),
            panel.samples(yf, t_index, qoi.machine, count).to_vec(),
            panel.times[t_index],
            qoi,
        )
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Speed QoI: `x = omega_i`, `y = Pe_i - eta_i`. Angle QoI: `x = delta_i`,
/// `y = omega_i`. Uses every realization of the panel.
pub fn extract_regression_data(panel: &Panel, qoi: Qoi, t: f64) -> Result<RegressionData> {
    let k = panel.time_index(t).ok_or_else(|| {
        Error::invalid(
            "t",
            format!("{t} is not a saved time; saved times are {:?}", panel.times),
        )
    })?;
    RegressionData::from_panel(panel, qoi, k, panel.n_realizations)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionMethod {
    Linear,
    Llr,
}

impl std::fmt::Display for RegressionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegressionMethod::Linear => "linear",
            RegressionMethod::Llr => "llr",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OlsLine {
    pub intercept: f64,
    pub slope: f64,
}

impl OlsLine {
    pub fn at(&self, z: f64) -> f64 {
        self.intercept + self.slope * z
    }
}

/// Coefficient function on the grid centres at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionEstimate {
    pub t: f64,
    pub qoi: Qoi,
    pub method: RegressionMethod,
    pub bandwidth: Option<f64>,
    /// Mean out-of-fold squared error of the chosen method, when CV ran.
    pub cv_error: Option<f64>,
    /// Same for the global line, when CV ran.
    pub linear_cv_error: Option<f64>,
    pub m_values: Vec<f64>,
    /// Cells where LLR fell back to the global line.
    pub fallback: Vec<bool>,
    pub line: OlsLine,
    /// Residual variance about the global line.
    pub line_residual_variance: f64,
}

impl RegressionEstimate {
    pub fn fallback_cells(&self) -> usize {
        self.fallback.iter().filter(|&&b| b).count()
    }

    /// Spread of the response about the fitted coefficient: the out-of-fold
    /// error when CV ran, else the line residual variance.
    pub fn conditional_variance(&self) -> f64 {
        self.cv_error.unwrap_or(self.line_residual_variance)
    }
}

fn residual_variance(data: &RegressionData, line: &OlsLine) -> f64 {
    let sse: f64 = data
        .x
        .iter()
        .zip(&data.y)
        .map(|(&x, &y)| (y - line.at(x)).powi(2))
        .sum();
    sse / (data.len() as f64 - 2.0)
}

/// Ordinary least squares line.
pub fn ols_line(x: &[f64], y: &[f64]) -> Result<OlsLine> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    if !(sxx > 0.0) || sxx <= 1e-26 * n * mx * mx {
        return Err(Error::Degenerate(
            "all predictor values are identical".into(),
        ));
    }
    let slope = sxy / sxx;
    Ok(OlsLine {
        intercept: my - slope * mx,
        slope,
    })
}

pub fn fit_linear(data: &RegressionData, grid: &SpatialGrid1D) -> Result<RegressionEstimate> {
    let line = ols_line(&data.x, &data.y)?;
    Ok(RegressionEstimate {
        t: data.t,
        qoi: data.qoi,
        method: RegressionMethod::Linear,
        bandwidth: None,
        cv_error: None,
        linear_cv_error: None,
        m_values: grid.centers.iter().map(|&z| line.at(z)).collect(),
        fallback: vec![false; grid.n_cells],
        line_residual_variance: residual_variance(data, &line),
        line,
    })
}

/// Weighted moment sums.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    w: f64,
    x: f64,
    y: f64,
    xx: f64,
    xy: f64,
    yy: f64,
}

impl Moments {
    fn push(&mut self, x: f64, y: f64) {
        self.w += 1.0;
        self.x += x;
        self.y += y;
        self.xx += x * x;
        self.xy += x * y;
        self.yy += y * y;
    }

    fn add(&mut self, o: &Moments, k: f64) {
        self.w += k * o.w;
        self.x += k * o.x;
        self.y += k * o.y;
        self.xx += k * o.xx;
        self.xy += k * o.xy;
        self.yy += k * o.yy;
    }

    fn minus(&self, o: &Moments) -> Moments {
        let mut m = *self;
        m.add(o, -1.0);
        m
    }

    /// Weighted line `(x_bar, y_bar, slope)`, or `None` when the local
    /// design is degenerate at bandwidth `h`.
    fn line(&self, floor: f64, h: f64) -> Option<(f64, f64, f64)> {
        if !(self.w >= floor) || self.w <= 0.0 {
            return None;
        }
        let xb = self.x / self.w;
        let yb = self.y / self.w;
        let sxx = self.xx - self.w * xb * xb;
        if !(sxx > 1e-9 * self.w * h.min(1.0).powi(2)) {
            return None;
        }
        Some((xb, yb, (self.xy - self.w * xb * yb) / sxx))
    }

    /// Squared error of the samples summarised here against `y = a + b x`.
    fn sse(&self, a: f64, b: f64) -> f64 {
        let v = self.yy - 2.0 * a * self.y - 2.0 * b * self.xy
            + a * a * self.w
            + 2.0 * a * b * self.x
            + b * b * self.xx;
        v.max(0.0)
    }
}

/// Affine standardization of one dataset.
#[derive(Debug, Clone, Copy)]
struct Scale {
    mx: f64,
    sx: f64,
    my: f64,
    sy: f64,
}

impl Scale {
    fn of(data: &RegressionData) -> Result<Self> {
        let sd = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s = (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64).sqrt();
            (m, s)
        };
        let (mx, sx) = sd(&data.x);
        let (my, sy) = sd(&data.y);
        if !(sx > 0.0) {
            return Err(Error::Degenerate(
                "all predictor values are identical".into(),
            ));
        }
        Ok(Scale {
            mx,
            sx,
            my,
            sy: if sy > 0.0 { sy } else { 1.0 },
        })
    }

    fn x(&self, v: f64) -> f64 {
        (v - self.mx) / self.sx
    }

    fn y(&self, v: f64) -> f64 {
        (v - self.my) / self.sy
    }

    fn y_back(&self, v: f64) -> f64 {
        self.my + self.sy * v
    }
}

/// Tuning knobs for LLR fitting and model selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionOptions {
    pub mode: RegressionMode,
    /// First time using the global line in manual mode.
    pub switch_time: Option<f64>,
    pub folds: usize,
    pub n_candidates: usize,
    /// Candidate bandwidths span `[lo, hi] x` the Silverman bandwidth of x.
    pub candidate_lo: f64,
    pub candidate_hi: f64,
    /// Relative CV improvement LLR needs over the global line.
    pub margin: f64,
    /// Standard errors by which the paired out-of-fold loss difference must
    /// favour LLR before auto mode switches to it (0 disables the test).
    pub switch_z: f64,
    /// Minimum kernel weight (in samples) for a local fit.
    pub weight_floor: f64,
    /// Bins of the approximate engine; 0 means exact sums over samples.
    pub bins: usize,
    /// In auto mode, keep the global line for good after this many
    /// consecutive linear decisions (0 disables).
    pub lock_after: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionMode {
    Auto,
    Linear,
    Llr,
    Manual,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        RegressionOptions {
            mode: RegressionMode::Auto,
            switch_time: None,
            folds: 10,
            n_candidates: 20,
            candidate_lo: 0.1,
            candidate_hi: 10.0,
            margin: 0.02,
            switch_z: 2.0,
            weight_floor: 1.0,
            bins: 512,
            lock_after: 0,
            seed: 0,
        }
    }
}

impl RegressionOptions {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::invalid("folds", "need at least 2 folds"));
        }
        if self.n_candidates == 0 {
            return Err(Error::invalid(
                "n_candidates",
                "need at least one candidate",
            ));
        }
        if !(self.candidate_lo > 0.0 && self.candidate_hi >= self.candidate_lo) {
            return Err(Error::invalid(
                "candidate_lo",
                "need 0 < candidate_lo <= candidate_hi",
            ));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::invalid("margin", "must lie in [0, 1)"));
        }
        if !(self.switch_z >= 0.0 && self.switch_z.is_finite()) {
            return Err(Error::invalid("switch_z", "must be finite and >= 0"));
        }
        if !(self.weight_floor >= 0.0) {
            return Err(Error::invalid("weight_floor", "must be >= 0"));
        }
        if self.bins == 1 {
            return Err(Error::invalid("bins", "use 0 (exact) or at least 2"));
        }
        match (self.mode, self.switch_time) {
            (RegressionMode::Manual, None) => Err(Error::invalid(
                "switch_time",
                "manual mode needs a switch time",
            )),
            (_, Some(t)) if !t.is_finite() => Err(Error::invalid("switch_time", "must be finite")),
            _ => Ok(()),
        }
    }

    /// Log-spaced candidate bandwidths for `x`.
    pub fn candidates(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = silverman_bandwidth(x)?;
        let k = self.n_candidates;
        Ok((0..k)
            .map(|i| {
                let f = if k == 1 {
                    0.0
                } else {
                    i as f64 / (k - 1) as f64
                };
                h * self.candidate_lo * (self.candidate_hi / self.candidate_lo).powf(f)
            })
            .collect())
    }
}

fn gauss(u: f64) -> f64 {
    (-0.5 * u * u).exp()
}

/// Exact LLR: kernel-weighted least-squares line at every grid centre, with
/// the global line where the local design is degenerate.
pub fn fit_llr(data: &RegressionData, h: f64, grid: &SpatialGrid1D) -> Result<RegressionEstimate> {
    fit_llr_with(
        data,
        h,
        grid,
        &RegressionOptions {
            bins: 0,
            ..RegressionOptions::default()
        },
    )
}

/// LLR using the engine selected by `opts.bins`.
pub fn fit_llr_with(
    data: &RegressionData,
    h: f64,
    grid: &SpatialGrid1D,
    opts: &RegressionOptions,
) -> Result<RegressionEstimate> {
    if !(h > 0.0) || h.is_nan() {
        return Err(Error::invalid("bandwidth", "must be > 0"));
    }
    let line = ols_line(&data.x, &data.y)?;
    let sc = Scale::of(data)?;
    let hs = h / sc.sx;
    let mut m_values = Vec::with_capacity(grid.n_cells);
    let mut fallback = Vec::with_capacity(grid.n_cells);
    let binned = (opts.bins >= 2).then(|| Binned::build(data, &sc, opts.bins, None));
    for &z in &grid.centers {
        let zs = sc.x(z);
        let mut acc = Moments::default();
        match &binned {
            Some(b) => {
                for (c, m) in b.centers.iter().zip(&b.total) {
                    let u = (c - zs) / hs;
                    if u.abs() < KERNEL_CUTOFF && m.w > 0.0 {
                        acc.add(m, gauss(u));
                    }
                }
            }
            None => {
                for (&x, &y) in data.x.iter().zip(&data.y) {
                    let xs = sc.x(x);
                    let k = gauss((xs - zs) / hs);
                    let ys = sc.y(y);
                    acc.w += k;
                    acc.x += k * xs;
                    acc.y += k * ys;
                    acc.xx += k * xs * xs;
                    acc.xy += k * xs * ys;
                }
            }
        }
        match acc.line(opts.weight_floor, hs) {
            Some((xb, yb, b)) => {
                m_values.push(sc.y_back(yb + b * (zs - xb)));
                fallback.push(false);
            }
            None => {
                m_values.push(line.at(z));
                fallback.push(true);
            }
        }
    }
    if fallback.iter().all(|&f| f) {
        return Err(Error::Degenerate(format!(
            "local design degenerate at every grid point (h = {h})"
        )));
    }
    Ok(RegressionEstimate {
        t: data.t,
        qoi: data.qoi,
        method: RegressionMethod::Llr,
        bandwidth: Some(h),
        cv_error: None,
        linear_cv_error: None,
        m_values,
        fallback,
        line_residual_variance: residual_variance(data, &line),
        line,
    })
}

/// Deterministic fold label per sample: a seeded permutation dealt round-robin.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Folds, n as u64));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

/// Per-bin moments of standardized data, in total and per fold.
struct Binned {
    width: f64,
    centers: Vec<f64>,
    total: Vec<Moments>,
    /// `by_fold[f][bin]`.
    by_fold: Vec<Vec<Moments>>,
}

impl Binned {
    fn build(
        data: &RegressionData,
        sc: &Scale,
        bins: usize,
        folds: Option<(&[usize], usize)>,
    ) -> Self {
        let xs: Vec<f64> = data.x.iter().map(|&x| sc.x(x)).collect();
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = ((hi - lo) / bins as f64).max(1e-12);
        let centers = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();
        let mut total = vec![Moments::default(); bins];
        let n_folds = folds.map_or(0, |f| f.1);
        let mut by_fold = vec![vec![Moments::default(); bins]; n_folds];
        for (i, (&x, &y)) in xs.iter().zip(&data.y).enumerate() {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            let ys = sc.y(y);
            total[b].push(x, ys);
            if let Some((labels, _)) = folds {
                by_fold[labels[i]][b].push(x, ys);
            }
        }
        Binned {
            width,
            centers,
            total,
            by_fold,
        }
    }
}

/// Cross-validation curve and the chosen bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSelection {
    pub bandwidth: f64,
    pub cv_error: f64,
    pub candidates: Vec<f64>,
    pub curve: Vec<f64>,
    pub linear_cv_error: f64,
}

/// Out-of-fold squared errors of the global line, per sample.
fn linear_oof(data: &RegressionData, sc: &Scale, labels: &[usize], k: usize) -> Vec<f64> {
    let xs: Vec<f64> = data.x.iter().map(|&x| sc.x(x)).collect();
    let ys: Vec<f64> = data.y.iter().map(|&y| sc.y(y)).collect();
    let mut held = vec![Moments::default(); k];
    let mut total = Moments::default();
    for ((&x, &y), &f) in xs.iter().zip(&ys).zip(labels) {
        held[f].push(x, y);
        total.push(x, y);
    }
    let lines: Vec<(f64, f64, f64)> = held
        .iter()
        .map(|f| {
            let train = total.minus(f);
            train
                .line(2.0, 0.0)
                .unwrap_or((0.0, train.y / train.w.max(1.0), 0.0))
        })
        .collect();
    xs.iter()
        .zip(&ys)
        .zip(labels)
        .map(|((&x, &y), &f)| {
            let (xb, yb, b) = lines[f];
            let r = (y - (yb + b * (x - xb))) * sc.sy;
            r * r
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean out-of-fold squared error of the global line.
fn linear_cv(data: &RegressionData, sc: &Scale, labels: &[usize], k: usize) -> f64 {
    mean(&linear_oof(data, sc, labels, k))
}

/// Exact out-of-fold squared error of LLR at bandwidth `h`.
fn llr_cv_exact(
    data: &RegressionData,
    sc: &Scale,
    labels: &[usize],
    k: usize,
    h: f64,
    floor: f64,
) -> f64 {
    mean(&llr_oof_exact(data, sc, labels, k, h, floor))
}

fn llr_oof_exact(
    data: &RegressionData,
    sc: &Scale,
    labels: &[usize],
    k: usize,
    h: f64,
    floor: f64,
) -> Vec<f64> {
    let xs: Vec<f64> = data.x.iter().map(|&x| sc.x(x)).collect();
    let ys: Vec<f64> = data.y.iter().map(|&y| sc.y(y)).collect();
    let hs = h / sc.sx;
    let mut fold_lines = Vec::with_capacity(k);
    for f in 0..k {
        let mut train = Moments::default();
        for i in 0..xs.len() {
            if labels[i] != f {
                train.push(xs[i], ys[i]);
            }
        }
        fold_lines.push(
            train
                .line(2.0, 0.0)
                .unwrap_or((0.0, train.y / train.w.max(1.0), 0.0)),
        );
    }
    let mut out = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let mut acc = Moments::default();
        for j in 0..xs.len() {
            if labels[j] == labels[i] {
                continue;
            }
            let w = gauss((xs[j] - xs[i]) / hs);
            acc.w += w;
            acc.x += w * xs[j];
            acc.y += w * ys[j];
            acc.xx += w * xs[j] * xs[j];
            acc.xy += w * xs[j] * ys[j];
        }
        let (xb, yb, b) = acc.line(floor, hs).unwrap_or(fold_lines[labels[i]]);
        let r = (ys[i] - (yb + b * (xs[i] - xb))) * sc.sy;
        out.push(r * r);
    }
    out
}

/// Binned out-of-fold squared error of LLR for every candidate.
fn llr_cv_binned(
    data: &RegressionData,
    sc: &Scale,
    labels: &[usize],
    k: usize,
    candidates: &[f64],
    opts: &RegressionOptions,
) -> Vec<f64> {
    let bins = opts.bins;
    let b = Binned::build(data, sc, bins, Some((labels, k)));
    let fold_lines: Vec<(f64, f64, f64)> = b
        .by_fold
        .iter()
        .map(|f| {
            let train = b
                .total
                .iter()
                .zip(f)
                .fold(Moments::default(), |mut acc, (t, m)| {
                    acc.add(&t.minus(m), 1.0);
                    acc
                });
            train
                .line(2.0, 0.0)
                .unwrap_or((0.0, train.y / train.w.max(1.0), 0.0))
        })
        .collect();
    candidates
        .iter()
        .map(|&h| {
            let hs = h / sc.sx;
            let reach = ((KERNEL_CUTOFF * hs / b.width).ceil() as usize).min(bins - 1);
            let kernel: Vec<f64> = (0..=reach)
                .map(|d| gauss(d as f64 * b.width / hs))
                .collect();
            let mut sse = 0.0;
            for (f, held) in b.by_fold.iter().enumerate() {
                for (c, hm) in held.iter().enumerate() {
                    if hm.w == 0.0 {
                        continue;
                    }
                    let lo = c.saturating_sub(reach);
                    let hi = (c + reach).min(bins - 1);
                    let mut acc = Moments::default();
                    for j in lo..=hi {
                        let train = b.total[j].minus(&held[j]);
                        if train.w > 0.0 {
                            acc.add(&train, kernel[j.abs_diff(c)]);
                        }
                    }
                    let (xb, yb, s) = acc.line(opts.weight_floor, hs).unwrap_or(fold_lines[f]);
                    sse += hm.sse(yb - s * xb, s);
                }
            }
            sse * sc.sy * sc.sy / data.len() as f64
        })
        .collect()
}

/// Binned out-of-fold squared errors of LLR at one bandwidth, per sample.
fn llr_oof_binned(
    data: &RegressionData,
    sc: &Scale,
    labels: &[usize],
    k: usize,
    h: f64,
    opts: &RegressionOptions,
) -> Vec<f64> {
    let bins = opts.bins;
    let b = Binned::build(data, sc, bins, Some((labels, k)));
    let hs = h / sc.sx;
    let reach = ((KERNEL_CUTOFF * hs / b.width).ceil() as usize).min(bins - 1);
    let kernel: Vec<f64> = (0..=reach)
        .map(|d| gauss(d as f64 * b.width / hs))
        .collect();
    // line per (fold, bin), or None to use the fold's global line
    let mut lines = vec![None; k * bins];
    let mut fold_lines = Vec::with_capacity(k);
    for (f, held) in b.by_fold.iter().enumerate() {
        let train = b
            .total
            .iter()
            .zip(held)
            .fold(Moments::default(), |mut acc, (t, m)| {
                acc.add(&t.minus(m), 1.0);
                acc
            });
        fold_lines.push(
            train
                .line(2.0, 0.0)
                .unwrap_or((0.0, train.y / train.w.max(1.0), 0.0)),
        );
        for c in 0..bins {
            if held[c].w == 0.0 {
                continue;
            }
            let mut acc = Moments::default();
            for j in c.saturating_sub(reach)..=(c + reach).min(bins - 1) {
                let train = b.total[j].minus(&held[j]);
                if train.w > 0.0 {
                    acc.add(&train, kernel[j.abs_diff(c)]);
                }
            }
            lines[f * bins + c] = acc.line(opts.weight_floor, hs);
        }
    }
    let lo = b.centers[0] - 0.5 * b.width;
    data.x
        .iter()
        .zip(&data.y)
        .zip(labels)
        .map(|((&x, &y), &f)| {
            let (xs, ys) = (sc.x(x), sc.y(y));
            let c = (((xs - lo) / b.width) as usize).min(bins - 1);
            let (xb, yb, s) = lines[f * bins + c].unwrap_or(fold_lines[f]);
            let r = (ys - (yb + s * (xs - xb))) * sc.sy;
            r * r
        })
        .collect()
}

/// Paired comparison of out-of-fold losses at bandwidth `h`: mean of
/// `linear - llr` and its standard error.
fn paired_gain(
    data: &RegressionData,
    k: usize,
    h: f64,
    opts: &RegressionOptions,
) -> Result<(f64, f64)> {
    let sc = Scale::of(data)?;
    let labels = fold_assignment(data.len(), k, opts.seed);
    let lin = linear_oof(data, &sc, &labels, k);
    let llr = if opts.bins >= 2 {
        llr_oof_binned(data, &sc, &labels, k, h, opts)
    } else {
        llr_oof_exact(data, &sc, &labels, k, h, opts.weight_floor)
    };
    let d: Vec<f64> = lin.iter().zip(&llr).map(|(a, b)| a - b).collect();
    let m = mean(&d);
    let var = d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (d.len() as f64 - 1.0);
    Ok((m, (var / d.len() as f64).sqrt()))
}

/// k-fold CV over `candidates`; ties go to the larger bandwidth.
pub fn select_bandwidth_cv(
    data: &RegressionData,
    k: usize,
    candidates: &[f64],
    opts: &RegressionOptions,
) -> Result<CvSelection> {
    if k < 2 || k > data.len() {
        return Err(Error::invalid(
            "folds",
            format!("need 2 <= k <= {}", data.len()),
        ));
    }
    if candidates.is_empty() || candidates.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::invalid(
            "candidates",
            "need positive candidate bandwidths",
        ));
    }
    let sc = Scale::of(data)?;
    let labels = fold_assignment(data.len(), k, opts.seed);
    let curve = if opts.bins >= 2 {
        llr_cv_binned(data, &sc, &labels, k, candidates, opts)
    } else {
        candidates
            .iter()
            .map(|&h| llr_cv_exact(data, &sc, &labels, k, h, opts.weight_floor))
            .collect()
    };
    let mut best: Option<usize> = None;
    for (i, e) in curve.iter().enumerate() {
        if !e.is_finite() {
            continue;
        }
        match best {
            Some(j) if curve[j] < *e => {}
            Some(j) if curve[j] == *e && candidates[j] >= candidates[i] => {}
            _ => best = Some(i),
        }
    }
    let i = best.ok_or_else(|| Error::Degenerate("every bandwidth candidate failed".into()))?;
    Ok(CvSelection {
        bandwidth: candidates[i],
        cv_error: curve[i],
        candidates: candidates.to_vec(),
        curve,
        linear_cv_error: linear_cv(data, &sc, &labels, k),
    })
}

/// Outcome of the LLR/linear comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchDecision {
    pub method: RegressionMethod,
    pub selection: CvSelection,
}

/// Linear unless LLR's CV error beats the global line's by `opts.margin`
/// and the paired per-sample loss difference clears `opts.switch_z`
/// standard errors.
pub fn linearity_switch(data: &RegressionData, opts: &RegressionOptions) -> Result<SwitchDecision> {
    let candidates = opts.candidates(&data.x)?;
    let selection = select_bandwidth_cv(data, opts.folds, &candidates, opts)?;
    let mut method = RegressionMethod::Linear;
    if selection.cv_error < (1.0 - opts.margin) * selection.linear_cv_error {
        method = RegressionMethod::Llr;
        if opts.switch_z > 0.0 {
            let (gain, se) = paired_gain(data, opts.folds, selection.bandwidth, opts)?;
            if !(gain > opts.switch_z * se) {
                method = RegressionMethod::Linear;
            }
        }
    }
    Ok(SwitchDecision { method, selection })
}

/// Fits every time of a QoI history according to `opts.mode`.
pub fn fit_history(
    datasets: &[RegressionData],
    grid: &SpatialGrid1D,
    opts: &RegressionOptions,
) -> Result<Vec<RegressionEstimate>> {
    opts.validate()?;
    let mut out = Vec::with_capacity(datasets.len());
    let mut linear_run = 0usize;
    let mut locked = false;
    for data in datasets {
        let manual_linear = opts.mode == RegressionMode::Manual
            && opts.switch_time.is_some_and(|ts| data.t >= ts - 1e-12);
        let est = match opts.mode {
            RegressionMode::Linear => fit_linear(data, grid)?,
            _ if manual_linear || locked => fit_linear(data, grid)?,
            RegressionMode::Llr | RegressionMode::Manual => {
                let candidates = opts.candidates(&data.x)?;
                let sel = select_bandwidth_cv(data, opts.folds, &candidates, opts)?;
                let mut est = fit_llr_with(data, sel.bandwidth, grid, opts)?;
                est.cv_error = Some(sel.cv_error);
                est.linear_cv_error = Some(sel.linear_cv_error);
                est
            }
            RegressionMode::Auto => {
                let d = linearity_switch(data, opts)?;
                let mut est = match d.method {
                    RegressionMethod::Linear => {
                        linear_run += 1;
                        let mut e = fit_linear(data, grid)?;
                        e.cv_error = Some(d.selection.linear_cv_error);
                        e
                    }
                    RegressionMethod::Llr => {
                        linear_run = 0;
                        let mut e = fit_llr_with(data, d.selection.bandwidth, grid, opts)?;
                        e.cv_error = Some(d.selection.cv_error);
                        e
                    }
                };
                est.linear_cv_error = Some(d.selection.linear_cv_error);
                if opts.lock_after > 0 && linear_run >= opts.lock_after {
                    locked = true;
                }
                est
            }
        };
        out.push(est);
    }
    Ok(out)
}

/// CSV of a regression history: one row per time with method metadata, then
/// the coefficient at every grid centre.
pub fn regression_csv(grid: &SpatialGrid1D, history: &[RegressionEstimate]) -> String {
    let mut out = String::from("time,method,bandwidth,cv_error,linear_cv_error,fallback_cells");
    for z in &grid.centers {
        let _ = write!(out, ",{z:e}");
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
    for e in history {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            e.t,
            e.method,
            opt(e.bandwidth),
            opt(e.cv_error),
            opt(e.linear_cv_error),
            e.fallback_cells()
        );
        for v in &e.m_values {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    out
}

pub fn write_regression_csv(
    path: impl AsRef<Path>,
    grid: &SpatialGrid1D,
    history: &[RegressionEstimate],
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, regression_csv(grid, history)).map_err(|e| Error::io(path, e))
}

/// Scatter data (`time,x,y`) for the given snapshots.
pub fn write_samples_csv(path: impl AsRef<Path>, snapshots: &[&RegressionData]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("time,x,y\n");
    for d in snapshots {
        for (x, y) in d.x.iter().zip(&d.y) {
            let _ = writeln!(out, "{},{x:e},{y:e}", d.t);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn data(x: Vec<f64>, f: impl Fn(f64) -> f64) -> RegressionData {
        let y = x.iter().map(|&v| f(v)).collect();
        RegressionData::new(x, y, 0.0, Qoi::speed(0)).unwrap()
    }

    fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn noisy(x: Vec<f64>, f: impl Fn(f64) -> f64, sd: f64, seed: u64) -> RegressionData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = x
            .iter()
            .map(|&v| f(v) + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        RegressionData::new(x, y, 0.0, Qoi::speed(0)).unwrap()
    }

    fn grid(lo: f64, hi: f64) -> SpatialGrid1D {
        SpatialGrid1D::new(lo, hi, 100).unwrap()
    }

    #[test]
    fn validation() {
        assert!(RegressionData::new(vec![1.0; 5], vec![1.0; 5], 0.0, Qoi::speed(0)).is_err());
        assert!(RegressionData::new(vec![1.0; 12], vec![1.0; 11], 0.0, Qoi::speed(0)).is_err());
        let mut y = vec![1.0; 12];
        y[3] = f64::NAN;
        assert!(RegressionData::new(vec![1.0; 12], y, 0.0, Qoi::speed(0)).is_err());
    }

    #[test]
    fn ols_exact_line() {
        let d = data(uniform(50, -1.0, 1.0, 1), |x| 2.0 * x + 1.0);
        let e = fit_linear(&d, &grid(-2.0, 2.0)).unwrap();
        assert!((e.line.slope - 2.0).abs() < 1e-12);
        assert!((e.line.intercept - 1.0).abs() < 1e-12);
        let same = data(vec![3.0; 20], |x| x);
        assert!(matches!(
            fit_linear(&same, &grid(0.0, 1.0)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn ols_noise_slope_within_three_standard_errors() {
        let n = 100_000;
        let d = noisy(uniform(n, -1.0, 1.0, 2), |_| 0.0, 1.0, 3);
        let line = ols_line(&d.x, &d.y).unwrap();
        let mx = d.x.iter().sum::<f64>() / n as f64;
        let sxx: f64 = d.x.iter().map(|x| (x - mx).powi(2)).sum();
        let resid: f64 =
            d.x.iter()
                .zip(&d.y)
                .map(|(x, y)| (y - line.at(*x)).powi(2))
                .sum();
        let se = (resid / (n - 2) as f64 / sxx).sqrt();
        assert!(line.slope.abs() < 3.0 * se);
    }

    #[test]
    fn ols_shift_equivariance() {
        let d = noisy(uniform(200, -1.0, 1.0, 4), |x| x * x, 0.1, 5);
        let c = 7.5;
        let shifted =
            RegressionData::new(d.x.iter().map(|x| x + c).collect(), d.y.clone(), 0.0, d.qoi)
                .unwrap();
        let a = ols_line(&d.x, &d.y).unwrap();
        let b = ols_line(&shifted.x, &shifted.y).unwrap();
        for z in [-1.0, 0.0, 0.3, 2.0] {
            assert!((a.at(z) - b.at(z + c)).abs() < 1e-10);
        }
    }

    #[test]
    fn llr_reproduces_lines() {
        let d = data(uniform(300, -1.0, 1.0, 6), |x| 2.0 * x + 1.0);
        let g = grid(-1.0, 1.0);
        for h in [0.05, 0.3, 5.0] {
            let e = fit_llr(&d, h, &g).unwrap();
            for (z, m) in g.centers.iter().zip(&e.m_values) {
                assert!((m - (2.0 * z + 1.0)).abs() < 1e-10, "h={h} z={z}");
            }
            let b = fit_llr_with(&d, h, &g, &RegressionOptions::default()).unwrap();
            for (z, m) in g.centers.iter().zip(&b.m_values) {
                assert!((m - (2.0 * z + 1.0)).abs() < 1e-10, "binned h={h} z={z}");
            }
        }
    }

    #[test]
    fn llr_wide_bandwidth_is_ols() {
        let d = noisy(uniform(500, -1.0, 1.0, 7), |x| x * x, 0.1, 8);
        let g = grid(-1.0, 1.0);
        let a = fit_linear(&d, &g).unwrap();
        let b = fit_llr(&d, 1e6, &g).unwrap();
        for (p, q) in a.m_values.iter().zip(&b.m_values) {
            assert!((p - q).abs() < 1e-8);
        }
    }

    #[test]
    fn llr_falls_back_outside_support() {
        let d = noisy(uniform(400, -1.0, 1.0, 9), |x| x * x, 0.05, 10);
        let g = grid(-30.0, 30.0);
        let e = fit_llr(&d, 0.1, &g).unwrap();
        assert!(e.fallback[0] && e.fallback[99]);
        assert!((e.m_values[0] - e.line.at(g.centers[0])).abs() < 1e-12);
        let inside = g.centers.iter().position(|&z| z.abs() < 0.5).unwrap();
        assert!(!e.fallback[inside]);
    }

    #[test]
    fn llr_quadratic_with_cv_bandwidth() {
        let d = data(uniform(10_000, -1.0, 1.0, 11), |x| x * x);
        let opts = RegressionOptions::default();
        let h = select_bandwidth_cv(&d, 10, &opts.candidates(&d.x).unwrap(), &opts)
            .unwrap()
            .bandwidth;
        let g = grid(-1.0, 1.0);
        let e = fit_llr(&d, h, &g).unwrap();
        for (z, m) in g.centers.iter().zip(&e.m_values) {
            if z.abs() <= 0.8 {
                assert!((m - z * z).abs() < 0.05, "{z}: {m}");
            }
        }
    }

    #[test]
    fn folds_partition() {
        let labels = fold_assignment(2000, 10, 3);
        for f in 0..10 {
            assert_eq!(labels.iter().filter(|&&l| l == f).count(), 200);
        }
        assert_eq!(labels, fold_assignment(2000, 10, 3));
        assert_ne!(labels, fold_assignment(2000, 10, 4));
    }

    /// Brute-force CV: refit the local line at every held-out point.
    fn brute_cv(d: &RegressionData, h: f64, labels: &[usize]) -> f64 {
        let mut sse = 0.0;
        for i in 0..d.len() {
            let train: Vec<usize> = (0..d.len()).filter(|&j| labels[j] != labels[i]).collect();
            let w: Vec<f64> = train
                .iter()
                .map(|&j| (-0.5 * ((d.x[j] - d.x[i]) / h).powi(2)).exp())
                .collect();
            let sw: f64 = w.iter().sum();
            let xb = train.iter().zip(&w).map(|(&j, w)| w * d.x[j]).sum::<f64>() / sw;
            let yb = train.iter().zip(&w).map(|(&j, w)| w * d.y[j]).sum::<f64>() / sw;
            let sxx: f64 = train
                .iter()
                .zip(&w)
                .map(|(&j, w)| w * (d.x[j] - xb).powi(2))
                .sum();
            let sxy: f64 = train
                .iter()
                .zip(&w)
                .map(|(&j, w)| w * (d.x[j] - xb) * (d.y[j] - yb))
                .sum();
            let r = d.y[i] - (yb + sxy / sxx * (d.x[i] - xb));
            sse += r * r;
        }
        sse / d.len() as f64
    }

    #[test]
    fn exact_cv_matches_brute_force() {
        let d = noisy(uniform(300, -1.0, 1.0, 12), |x| (3.0 * x).sin(), 0.1, 13);
        let opts = RegressionOptions {
            bins: 0,
            weight_floor: 0.0,
            ..RegressionOptions::default()
        };
        let cands = [0.05, 0.2, 0.8];
        let sel = select_bandwidth_cv(&d, 5, &cands, &opts).unwrap();
        let labels = fold_assignment(300, 5, opts.seed);
        for (h, e) in cands.iter().zip(&sel.curve) {
            let b = brute_cv(&d, *h, &labels);
            assert!((e - b).abs() < 1e-9 * b, "{h}: {e} vs {b}");
        }
    }

    #[test]
    fn binned_cv_tracks_exact_cv() {
        let d = noisy(uniform(2000, -1.0, 1.0, 14), |x| (5.0 * x).sin(), 0.1, 15);
        let exact = RegressionOptions {
            bins: 0,
            ..RegressionOptions::default()
        };
        let binned = RegressionOptions::default();
        let cands = exact.candidates(&d.x).unwrap();
        let a = select_bandwidth_cv(&d, 10, &cands, &exact).unwrap();
        let b = select_bandwidth_cv(&d, 10, &cands, &binned).unwrap();
        for (p, q) in a.curve.iter().zip(&b.curve) {
            assert!((p - q).abs() < 0.05 * p, "{p} vs {q}");
        }
        let ia = cands.iter().position(|&h| h == a.bandwidth).unwrap();
        let ib = cands.iter().position(|&h| h == b.bandwidth).unwrap();
        assert!(ia.abs_diff(ib) <= 1);
        assert!((a.linear_cv_error - b.linear_cv_error).abs() < 1e-12);
    }

    #[test]
    fn cv_prefers_narrow_bandwidth_for_wiggly_data() {
        let x = uniform(2000, -1.0, 1.0, 16);
        let opts = RegressionOptions::default();
        let cands = opts.candidates(&x).unwrap();
        let wiggly = noisy(x.clone(), |x| (5.0 * x).sin(), 0.05, 17);
        let flat = noisy(x, |x| 0.5 * x, 0.05, 17);
        let hw = select_bandwidth_cv(&wiggly, 10, &cands, &opts)
            .unwrap()
            .bandwidth;
        let hl = select_bandwidth_cv(&flat, 10, &cands, &opts)
            .unwrap()
            .bandwidth;
        assert!(hw < hl, "{hw} vs {hl}");
    }

    #[test]
    fn switch_decisions() {
        let opts = RegressionOptions::default();
        let line = data(uniform(1000, -1.0, 1.0, 18), |x| 3.0 * x - 1.0);
        assert_eq!(
            linearity_switch(&line, &opts).unwrap().method,
            RegressionMethod::Linear
        );
        let noisy_line = noisy(uniform(2000, -1.0, 1.0, 19), |x| 3.0 * x, 0.3, 20);
        assert_eq!(
            linearity_switch(&noisy_line, &opts).unwrap().method,
            RegressionMethod::Linear
        );
        let quad = data(uniform(10_000, -1.0, 1.0, 21), |x| x * x);
        assert_eq!(
            linearity_switch(&quad, &opts).unwrap().method,
            RegressionMethod::Llr
        );
    }

    #[test]
    fn per_sample_losses_sum_to_the_cv_curve() {
        let d = noisy(uniform(1500, -1.0, 1.0, 30), |x| (2.0 * x).sin(), 0.2, 31);
        for bins in [0, 512] {
            let opts = RegressionOptions {
                bins,
                ..RegressionOptions::default()
            };
            let cands = [0.1, 0.3];
            let sel = select_bandwidth_cv(&d, 10, &cands, &opts).unwrap();
            let sc = Scale::of(&d).unwrap();
            let labels = fold_assignment(d.len(), 10, opts.seed);
            for (h, e) in cands.iter().zip(&sel.curve) {
                let per = if bins == 0 {
                    llr_oof_exact(&d, &sc, &labels, 10, *h, opts.weight_floor)
                } else {
                    llr_oof_binned(&d, &sc, &labels, 10, *h, &opts)
                };
                assert!((mean(&per) - e).abs() < 1e-9 * e, "bins {bins}, h {h}");
            }
            let lin = mean(&linear_oof(&d, &sc, &labels, 10));
            assert!((lin - sel.linear_cv_error).abs() < 1e-12);
        }
    }

    #[test]
    fn paired_test_rejects_noise_driven_switches() {
        // with small noisy linear samples the margin alone sometimes picks LLR
        let loose = RegressionOptions {
            switch_z: 0.0,
            ..RegressionOptions::default()
        };
        let strict = RegressionOptions::default();
        let (mut loose_llr, mut strict_llr) = (0, 0);
        for seed in 0..40 {
            let d = noisy(
                uniform(250, -1.0, 1.0, 100 + seed),
                |x| 0.4 * x,
                0.3,
                200 + seed,
            );
            loose_llr +=
                (linearity_switch(&d, &loose).unwrap().method == RegressionMethod::Llr) as usize;
            strict_llr +=
                (linearity_switch(&d, &strict).unwrap().method == RegressionMethod::Llr) as usize;
        }
        assert!(strict_llr <= loose_llr);
        assert!(strict_llr <= 2, "{strict_llr} of 40");
        // a clear curvature still switches at the same sample size
        let quad = noisy(uniform(250, -1.0, 1.0, 40), |x| x * x, 0.1, 41);
        assert_eq!(
            linearity_switch(&quad, &strict).unwrap().method,
            RegressionMethod::Llr
        );
    }

    #[test]
    fn manual_and_forced_modes() {
        let g = grid(-1.0, 1.0);
        let sets: Vec<RegressionData> = (0..4)
            .map(|k| {
                let mut d = data(uniform(500, -1.0, 1.0, 30 + k), |x| x * x);
                d.t = k as f64;
                d
            })
            .collect();
        let manual = RegressionOptions {
            mode: RegressionMode::Manual,
            switch_time: Some(2.0),
            ..RegressionOptions::default()
        };
        let h = fit_history(&sets, &g, &manual).unwrap();
        let methods: Vec<_> = h.iter().map(|e| e.method).collect();
        use RegressionMethod::*;
        assert_eq!(methods, vec![Llr, Llr, Linear, Linear]);
        let forced = RegressionOptions {
            mode: RegressionMode::Linear,
            ..RegressionOptions::default()
        };
        assert!(fit_history(&sets, &g, &forced)
            .unwrap()
            .iter()
            .all(|e| e.method == Linear));
        let bad = RegressionOptions {
            mode: RegressionMode::Manual,
            ..RegressionOptions::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn error_shrinks_with_sample_size() {
        let f = |x: f64| (2.0 * x).sin();
        let g = grid(-0.8, 0.8);
        let opts = RegressionOptions::default();
        let errs: Vec<f64> = [500, 2000, 8000]
            .iter()
            .map(|&n| {
                let d = noisy(uniform(n, -1.0, 1.0, 40), f, 0.2, 41);
                let h = select_bandwidth_cv(&d, 10, &opts.candidates(&d.x).unwrap(), &opts)
                    .unwrap()
                    .bandwidth;
                let e = fit_llr(&d, h, &g).unwrap();
                g.centers
                    .iter()
                    .zip(&e.m_values)
                    .map(|(z, m)| (m - f(*z)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        assert!(errs[0] >= errs[1] && errs[1] >= errs[2], "{errs:?}");
    }

    #[test]
    fn csv_layout() {
        let g = grid(-1.0, 1.0);
        let d = data(uniform(50, -1.0, 1.0, 50), |x| x);
        let csv = regression_csv(&g, &[fit_linear(&d, &g).unwrap()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 6 + 100);
        assert!(lines[1].starts_with("0,linear,,,,0,"));
    }
}
