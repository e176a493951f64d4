//! Monte-Carlo simulation of the stochastic multi-machine classical model
//!
//! ```text
//! dv_i     = 0
//! domega_i = (omega_R / 2H_i) [ -D_i (omega_i - omega_R) + P_i - Pe_i(v, delta) + eta_i ] dt
//! ddelta_i = (omega_i - omega_R) dt
//! deta     = -theta eta dt + alpha sqrt(2 theta) C dw
//! ```
//!
//! The diffusion is additive, so the Milstein correction is identically zero
//! and the Milstein step coincides with Euler-Maruyama.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::GridCase;
use crate::error::{Error, Result};
use crate::noise::{CorrelationKind, CorrelationModel, OuParams};
use crate::rng::{self, Purpose};

/// Relative spread of the folded-Gaussian voltage magnitudes (times the mean
/// equilibrium voltage).
pub const DEFAULT_VOLTAGE_SPREAD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub v_hat: Vec<f64>,
    pub omega: Vec<f64>,
    pub delta: Vec<f64>,
    pub eta: Vec<f64>,
}

impl SystemState {
    pub fn zeros(n: usize) -> Self {
        SystemState {
            v_hat: vec![0.0; n],
            omega: vec![0.0; n],
            delta: vec![0.0; n],
            eta: vec![0.0; n],
        }
    }

    /// Deterministic equilibrium: `v = v_eq`, `omega = omega_R`, `delta = delta_star`, `eta = 0`.
    pub fn equilibrium(case: &GridCase, delta_star: &[f64]) -> Self {
        SystemState {
            v_hat: case.v_eq.clone(),
            omega: vec![case.omega_r; case.n],
            delta: delta_star.to_vec(),
            eta: vec![0.0; case.n],
        }
    }

    pub fn n(&self) -> usize {
        self.omega.len()
    }

    pub fn is_finite(&self) -> bool {
        [&self.v_hat, &self.omega, &self.delta, &self.eta]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        for (what, v) in [
            ("v_hat", &self.v_hat),
            ("omega", &self.omega),
            ("delta", &self.delta),
            ("eta", &self.eta),
        ] {
            if v.len() != n {
                return Err(Error::Dimension {
                    what: what.into(),
                    expected: n,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Packs the state as `[v_hat, omega, delta, eta]`.
    pub fn write_packed(&self, out: &mut [f64]) {
        let n = self.n();
        out[..n].copy_from_slice(&self.v_hat);
        out[n..2 * n].copy_from_slice(&self.omega);
        out[2 * n..3 * n].copy_from_slice(&self.delta);
        out[3 * n..4 * n].copy_from_slice(&self.eta);
    }

    pub fn from_packed(data: &[f64]) -> Self {
        let n = data.len() / 4;
        SystemState {
            v_hat: data[..n].to_vec(),
            omega: data[n..2 * n].to_vec(),
            delta: data[2 * n..3 * n].to_vec(),
            eta: data[3 * n..4 * n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub t_final: f64,
    pub save_stride: usize,
    pub seed: u64,
    pub n_realizations: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.005,
            t_final: 10.0,
            save_stride: 20,
            seed: 0,
            n_realizations: 2000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid("dt", "must be > 0"));
        }
        if !(self.t_final >= self.dt) {
            return Err(Error::invalid("t_final", "must be >= dt"));
        }
        if self.save_stride == 0 {
            return Err(Error::invalid("save_stride", "must be >= 1"));
        }
        if self.n_realizations == 0 {
            return Err(Error::invalid("n_realizations", "must be >= 1"));
        }
        let steps = self.t_final / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::invalid(
                "t_final",
                "must be an integer multiple of dt",
            ));
        }
        if !self.n_steps().is_multiple_of(self.save_stride) {
            return Err(Error::invalid(
                "save_stride",
                format!("must divide the step count {}", self.n_steps()),
            ));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    /// Saved time stamps, `0` and `t_final` included.
    pub fn save_times(&self) -> Vec<f64> {
        (0..=self.n_steps() / self.save_stride)
            .map(|k| (k * self.save_stride) as f64 * self.dt)
            .collect()
    }
}

#[derive(Debug, Clone)]
struct SparseNetwork {
    diag_g: Vec<f64>,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    g: Vec<f64>,
    b: Vec<f64>,
}

impl SparseNetwork {
    fn new(case: &GridCase) -> Self {
        let n = case.n;
        let mut net = SparseNetwork {
            diag_g: (0..n).map(|i| case.g[(i, i)]).collect(),
            row_ptr: vec![0],
            col: Vec::new(),
            g: Vec::new(),
            b: Vec::new(),
        };
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (g, b) = (case.g[(i, j)], case.b[(i, j)]);
                if g != 0.0 || b != 0.0 {
                    net.col.push(j);
                    net.g.push(g);
                    net.b.push(b);
                }
            }
            net.row_ptr.push(net.col.len());
        }
        net
    }
}

/// Per-thread work buffers.
#[derive(Debug, Clone)]
pub struct Scratch {
    cos: Vec<f64>,
    sin: Vec<f64>,
    pe: Vec<f64>,
    z: Vec<f64>,
}

impl Scratch {
    pub fn new(n: usize) -> Self {
        Scratch {
            cos: vec![0.0; n],
            sin: vec![0.0; n],
            pe: vec![0.0; n],
            z: vec![0.0; n],
        }
    }
}

/// Everything needed to advance one realization: network, machine constants,
/// noise factor and the deterministic equilibrium.
#[derive(Debug, Clone)]
pub struct SwingModel {
    pub n: usize,
    pub omega_r: f64,
    /// `omega_R / (2 H_i)`.
    pub gain: Vec<f64>,
    pub damping: Vec<f64>,
    pub p: Vec<f64>,
    pub params: OuParams,
    pub v_eq: Vec<f64>,
    pub delta_star: Vec<f64>,
    /// Standard deviation of the folded-Gaussian voltage draw.
    pub voltage_sd: f64,
    net: SparseNetwork,
    /// Row-major lower-triangular Cholesky factor.
    chol: Vec<f64>,
}

impl SwingModel {
    pub fn new(
        case: &GridCase,
        params: OuParams,
        corr: &CorrelationModel,
        delta_star: &[f64],
    ) -> Result<Self> {
        params.validate()?;
        if corr.n() != case.n {
            return Err(Error::Dimension {
                what: "correlation matrix".into(),
                expected: case.n,
                got: corr.n(),
            });
        }
        if delta_star.len() != case.n {
            return Err(Error::Dimension {
                what: "equilibrium angles".into(),
                expected: case.n,
                got: delta_star.len(),
            });
        }
        let n = case.n;
        let mut chol = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                chol.push(corr.c[(i, j)]);
            }
        }
        Ok(SwingModel {
            n,
            omega_r: case.omega_r,
            gain: case.h.iter().map(|h| case.omega_r / (2.0 * h)).collect(),
            damping: case.d.clone(),
            p: case.p.clone(),
            params,
            v_eq: case.v_eq.clone(),
            delta_star: delta_star.to_vec(),
            voltage_sd: DEFAULT_VOLTAGE_SPREAD * case.mean_voltage(),
            net: SparseNetwork::new(case),
            chol,
        })
    }

    pub fn with_voltage_spread(mut self, relative: f64) -> Self {
        self.voltage_sd = relative * self.v_eq.iter().sum::<f64>() / self.n as f64;
        self
    }

    /// `Pe_i = v_i sum_j v_j (g_ij cos(d_i - d_j) + b_ij sin(d_i - d_j))`.
    pub fn electrical_power(&self, v: &[f64], delta: &[f64], scratch: &mut Scratch) {
        for i in 0..self.n {
            let (s, c) = delta[i].sin_cos();
            scratch.sin[i] = s;
            scratch.cos[i] = c;
        }
        let net = &self.net;
        for i in 0..self.n {
            let (ci, si) = (scratch.cos[i], scratch.sin[i]);
            // cos(di-dj) = ci cj + si sj, sin(di-dj) = si cj - ci sj
            let mut acc_c = 0.0;
            let mut acc_s = 0.0;
            for k in net.row_ptr[i]..net.row_ptr[i + 1] {
                let j = net.col[k];
                let (vc, vs) = (v[j] * scratch.cos[j], v[j] * scratch.sin[j]);
                acc_c += net.g[k] * vc - net.b[k] * vs;
                acc_s += net.g[k] * vs + net.b[k] * vc;
            }
            scratch.pe[i] = v[i] * (v[i] * net.diag_g[i] + ci * acc_c + si * acc_s);
        }
    }

    /// Response of the speed regression: `Pe_i - eta_i`.
    pub fn speed_response(&self, state: &SystemState, scratch: &mut Scratch, out: &mut [f64]) {
        self.electrical_power(&state.v_hat, &state.delta, scratch);
        for i in 0..self.n {
            out[i] = scratch.pe[i] - state.eta[i];
        }
    }

    /// Deterministic drift of every state component.
    pub fn drift(&self, state: &SystemState, scratch: &mut Scratch) -> SystemState {
        self.electrical_power(&state.v_hat, &state.delta, scratch);
        let n = self.n;
        let mut out = SystemState::zeros(n);
        for i in 0..n {
            out.omega[i] = self.gain[i]
                * (-self.damping[i] * (state.omega[i] - self.omega_r) + self.p[i] - scratch.pe[i]
                    + state.eta[i]);
            out.delta[i] = state.omega[i] - self.omega_r;
            out.eta[i] = -self.params.theta * state.eta[i];
        }
        out
    }

    /// Draws `n` standard normals into `scratch.z` and returns `C z` there.
    fn correlated_normals<R: Rng + ?Sized>(&self, rng: &mut R, scratch: &mut Scratch) {
        let n = self.n;
        for z in scratch.z.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        // in-place lower-triangular product, last row first
        for i in (0..n).rev() {
            let row = &self.chol[i * (i + 1) / 2..i * (i + 1) / 2 + i + 1];
            let mut acc = 0.0;
            for (c, z) in row.iter().zip(&scratch.z[..=i]) {
                acc += c * z;
            }
            scratch.z[i] = acc;
        }
    }

    /// Advances the injection noise alone by one step; the noise does not
    /// feel the machines, so this is also a standalone OU sampler.
    pub fn step_noise<R: Rng + ?Sized>(
        &self,
        eta: &mut [f64],
        dt: f64,
        rng: &mut R,
        scratch: &mut Scratch,
    ) {
        let theta = self.params.theta;
        for e in eta.iter_mut() {
            *e -= theta * *e * dt;
        }
        let sigma = self.params.diffusion();
        if sigma > 0.0 {
            self.correlated_normals(rng, scratch);
            let scale = sigma * dt.sqrt();
            for (e, z) in eta.iter_mut().zip(&scratch.z) {
                *e += scale * z;
            }
        }
    }

    /// Advances `state` by one explicit step. Returns `false` on non-finite output.
    pub fn step_in_place<R: Rng + ?Sized>(
        &self,
        state: &mut SystemState,
        dt: f64,
        rng: &mut R,
        scratch: &mut Scratch,
    ) -> bool {
        self.electrical_power(&state.v_hat, &state.delta, scratch);
        for i in 0..self.n {
            let dev = state.omega[i] - self.omega_r;
            let accel =
                self.gain[i] * (-self.damping[i] * dev + self.p[i] - scratch.pe[i] + state.eta[i]);
            state.delta[i] += dt * dev;
            state.omega[i] += dt * accel;
        }
        self.step_noise(&mut state.eta, dt, rng, scratch);
        state
            .omega
            .iter()
            .chain(&state.delta)
            .chain(&state.eta)
            .all(|x| x.is_finite())
    }

    /// Folded-Gaussian voltages, `eta(0) = alpha C z`, `omega = omega_R`, `delta = delta_star`.
    pub fn sample_initial<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        scratch: &mut Scratch,
    ) -> SystemState {
        let n = self.n;
        let mut state = SystemState {
            v_hat: vec![0.0; n],
            omega: vec![self.omega_r; n],
            delta: self.delta_star.clone(),
            eta: vec![0.0; n],
        };
        for i in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            state.v_hat[i] = (self.v_eq[i] + self.voltage_sd * z).abs();
        }
        self.correlated_normals(rng, scratch);
        for i in 0..n {
            state.eta[i] = self.params.alpha * scratch.z[i];
        }
        state
    }
}

/// State derivative of the classical model (diffusion excluded).
pub fn drift_rhs(state: &SystemState, case: &GridCase, params: &OuParams) -> Result<SystemState> {
    state.check_dim(case.n)?;
    params.validate()?;
    let identity = CorrelationModel {
        kind: CorrelationKind::Uncorrelated,
        r: nalgebra::DMatrix::identity(case.n, case.n),
        c: nalgebra::DMatrix::identity(case.n, case.n),
        min_eigenvalue: 1.0,
    };
    let model = SwingModel::new(case, *params, &identity, &case.delta_eq)?;
    Ok(model.drift(state, &mut Scratch::new(case.n)))
}

/// One Milstein (= Euler-Maruyama, additive noise) step.
pub fn step_milstein<R: Rng + ?Sized>(
    model: &SwingModel,
    state: &SystemState,
    dt: f64,
    rng: &mut R,
) -> Result<SystemState> {
    state.check_dim(model.n)?;
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "must be > 0"));
    }
    let mut next = state.clone();
    if model.step_in_place(&mut next, dt, rng, &mut Scratch::new(model.n)) {
        Ok(next)
    } else {
        Err(Error::BlowUp {
            realization: 0,
            time: dt,
        })
    }
}

pub fn sample_initial_conditions<R: Rng + ?Sized>(model: &SwingModel, rng: &mut R) -> SystemState {
    model.sample_initial(rng, &mut Scratch::new(model.n))
}

/// Starting states of the main runs.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialSlice {
    pub states: Vec<SystemState>,
}

impl InitialSlice {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn truncated(&self, n: usize) -> InitialSlice {
        InitialSlice {
            states: self.states[..n.min(self.states.len())].to_vec(),
        }
    }
}

const CHUNK: usize = 512;

fn integrate(
    model: &SwingModel,
    state: &mut SystemState,
    steps: usize,
    dt: f64,
    realization: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    scratch: &mut Scratch,
    mut on_step: impl FnMut(usize, &SystemState, &mut Scratch),
) -> Result<()> {
    on_step(0, state, scratch);
    for k in 1..=steps {
        if !model.step_in_place(state, dt, rng, scratch) {
            return Err(Error::BlowUp {
                realization,
                time: k as f64 * dt,
            });
        }
        on_step(k, state, scratch);
    }
    Ok(())
}

/// Burn-in: sample voltages and noise, start at `(omega_R, delta_star)` and
/// integrate to `config.t_final`. Each realization keeps its voltages and
/// carries its final noise into the main run.
pub fn burn_in(
    model: &SwingModel,
    n_realizations: usize,
    config: &SimConfig,
) -> Result<InitialSlice> {
    config.validate()?;
    let steps = config.n_steps();
    let states = (0..n_realizations)
        .into_par_iter()
        .map_init(
            || Scratch::new(model.n),
            |scratch, r| {
                let mut rng = rng::stream(config.seed, Purpose::BurnIn, r as u64);
                let mut state = model.sample_initial(&mut rng, scratch);
                integrate(
                    model,
                    &mut state,
                    steps,
                    config.dt,
                    r,
                    &mut rng,
                    scratch,
                    |_, _, _| {},
                )?;
                Ok(state)
            },
        )
        .collect::<Result<Vec<_>>>()?;
    Ok(InitialSlice { states })
}

/// Runs every realization from `initial` and hands the saved records of each
/// (`saves x width` values, filled by `fill`) to `sink` in realization order.
fn run_records(
    initial: &InitialSlice,
    model: &SwingModel,
    config: &SimConfig,
    width: usize,
    fill: impl Fn(&SwingModel, &SystemState, &mut Scratch, &mut [f64]) + Sync,
    mut sink: impl FnMut(usize, &[f64]),
) -> Result<()> {
    config.validate()?;
    for (r, s) in initial.states.iter().enumerate() {
        s.check_dim(model.n)
            .map_err(|e| Error::Other(format!("initial state {r}: {e}")))?;
    }
    let steps = config.n_steps();
    let stride = config.save_stride;
    let n_saves = steps / stride + 1;
    let total = initial.len();
    let mut start = 0;
    while start < total {
        let end = (start + CHUNK).min(total);
        let records = (start..end)
            .into_par_iter()
            .map_init(
                || Scratch::new(model.n),
                |scratch, r| {
                    let mut rng = rng::stream(config.seed, Purpose::Main, r as u64);
                    let mut state = initial.states[r].clone();
                    let mut rec = vec![0.0; n_saves * width];
                    integrate(
                        model,
                        &mut state,
                        steps,
                        config.dt,
                        r,
                        &mut rng,
                        scratch,
                        |k, s, sc| {
                            if k % stride == 0 {
                                let at = (k / stride) * width;
                                fill(model, s, sc, &mut rec[at..at + width]);
                            }
                        },
                    )?;
                    Ok(rec)
                },
            )
            .collect::<Result<Vec<_>>>()?;
        for (offset, rec) in records.iter().enumerate() {
            sink(start + offset, rec);
        }
        start = end;
    }
    Ok(())
}

/// Full-state trajectories: `states[r][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub case_name: String,
    pub correlation: CorrelationKind,
    pub config: SimConfig,
    pub n: usize,
    pub times: Vec<f64>,
    /// Row-major `[realization][time][v_hat | omega | delta | eta]`.
    pub data: Vec<f64>,
}

impl Ensemble {
    pub fn n_realizations(&self) -> usize {
        self.data.len() / (self.times.len() * 4 * self.n)
    }

    fn offset(&self, r: usize, t: usize) -> usize {
        (r * self.times.len() + t) * 4 * self.n
    }

    pub fn state(&self, r: usize, t: usize) -> SystemState {
        let at = self.offset(r, t);
        SystemState::from_packed(&self.data[at..at + 4 * self.n])
    }

    pub fn omega(&self, r: usize, t: usize, i: usize) -> f64 {
        self.data[self.offset(r, t) + self.n + i]
    }

    pub fn delta(&self, r: usize, t: usize, i: usize) -> f64 {
        self.data[self.offset(r, t) + 2 * self.n + i]
    }

    /// Index of a saved time (exact match up to 1e-9).
    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&s| (s - t).abs() <= 1e-9)
    }
}

/// Simulates from `initial`, saving the full state every `save_stride` steps.
pub fn simulate_ensemble(
    initial: &InitialSlice,
    model: &SwingModel,
    config: &SimConfig,
    case_name: &str,
    correlation: CorrelationKind,
) -> Result<Ensemble> {
    if initial.len() != config.n_realizations {
        return Err(Error::Dimension {
            what: "initial slice".into(),
            expected: config.n_realizations,
            got: initial.len(),
        });
    }
    let n = model.n;
    let times = config.save_times();
    let per = times.len() * 4 * n;
    let mut data = vec![0.0; per * initial.len()];
    run_records(
        initial,
        model,
        config,
        4 * n,
        |_, s, _, out| s.write_packed(out),
        |r, rec| data[r * per..(r + 1) * per].copy_from_slice(rec),
    )?;
    Ok(Ensemble {
        case_name: case_name.to_string(),
        correlation,
        config: *config,
        n,
        times,
        data,
    })
}

/// Compact per-QoI view of an ensemble: speeds, angles and the speed-regression
/// response `Pe_i - eta_i`, laid out `[time][machine][realization]` so that
/// every (time, machine) sample vector is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub times: Vec<f64>,
    pub n: usize,
    pub n_realizations: usize,
    omega: Vec<f64>,
    delta: Vec<f64>,
    speed_y: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelField {
    Omega,
    Delta,
    SpeedResponse,
}

impl Panel {
    fn alloc(times: Vec<f64>, n: usize, n_realizations: usize) -> Self {
        let len = times.len() * n * n_realizations;
        Panel {
            times,
            n,
            n_realizations,
            omega: vec![0.0; len],
            delta: vec![0.0; len],
            speed_y: vec![0.0; len],
        }
    }

    fn at(&self, t: usize, i: usize) -> usize {
        (t * self.n + i) * self.n_realizations
    }

    /// First `count` realizations of one field at time index `t` for machine `i`.
    pub fn samples(&self, field: PanelField, t: usize, i: usize, count: usize) -> &[f64] {
        let at = self.at(t, i);
        let src = match field {
            PanelField::Omega => &self.omega,
            PanelField::Delta => &self.delta,
            PanelField::SpeedResponse => &self.speed_y,
        };
        &src[at..at + count.min(self.n_realizations)]
    }

    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&s| (s - t).abs() <= 1e-9)
    }

    /// Builds the panel of an ensemble; `model` supplies the network for `Pe`.
    pub fn from_ensemble(ens: &Ensemble, model: &SwingModel) -> Result<Self> {
        if ens.n != model.n {
            return Err(Error::Dimension {
                what: "ensemble".into(),
                expected: model.n,
                got: ens.n,
            });
        }
        let nr = ens.n_realizations();
        let mut panel = Panel::alloc(ens.times.clone(), ens.n, nr);
        let mut scratch = Scratch::new(ens.n);
        let mut y = vec![0.0; ens.n];
        for r in 0..nr {
            for t in 0..ens.times.len() {
                let s = ens.state(r, t);
                model.speed_response(&s, &mut scratch, &mut y);
                for i in 0..ens.n {
                    let at = panel.at(t, i) + r;
                    panel.omega[at] = s.omega[i];
                    panel.delta[at] = s.delta[i];
                    panel.speed_y[at] = y[i];
                }
            }
        }
        Ok(panel)
    }
}

/// Like [`simulate_ensemble`] but records only what the density and regression
/// stages need.
pub fn simulate_panel(
    initial: &InitialSlice,
    model: &SwingModel,
    config: &SimConfig,
) -> Result<Panel> {
    let n = model.n;
    let times = config.save_times();
    let n_times = times.len();
    let mut panel = Panel::alloc(times, n, initial.len());
    let fill = |m: &SwingModel, s: &SystemState, sc: &mut Scratch, out: &mut [f64]| {
        out[..n].copy_from_slice(&s.omega);
        out[n..2 * n].copy_from_slice(&s.delta);
        m.speed_response(s, sc, &mut out[2 * n..3 * n]);
    };
    let nr = initial.len();
    run_records(initial, model, config, 3 * n, fill, |r, rec| {
        for t in 0..n_times {
            let row = &rec[t * 3 * n..(t + 1) * 3 * n];
            for i in 0..n {
                let at = (t * n + i) * nr + r;
                panel.omega[at] = row[i];
                panel.delta[at] = row[n + i];
                panel.speed_y[at] = row[2 * n + i];
            }
        }
    })?;
    Ok(panel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{bundled_case, solve_equilibrium, Line};
    use crate::noise::{build_correlation, ou_analytic_moments};
    use nalgebra::{DMatrix, DVector};

    fn single_machine() -> GridCase {
        GridCase::from_matrices(
            "one",
            1.0,
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            Vec::<Line>::new(),
            vec![0.0],
            vec![1.0],
            vec![1.0],
            vec![1.0],
            vec![0.0],
        )
        .unwrap()
    }

    fn uncorrelated(n: usize) -> CorrelationModel {
        CorrelationModel {
            kind: CorrelationKind::Uncorrelated,
            r: DMatrix::identity(n, n),
            c: DMatrix::identity(n, n),
            min_eigenvalue: 1.0,
        }
    }

    #[test]
    fn single_machine_drift_by_hand() {
        let case = single_machine();
        let state = SystemState {
            v_hat: vec![1.0],
            omega: vec![2.0],
            delta: vec![0.3],
            eta: vec![0.0],
        };
        let d = drift_rhs(&state, &case, &OuParams::default()).unwrap();
        assert_eq!(d.omega, vec![-0.5]);
        assert_eq!(d.delta, vec![1.0]);
        assert_eq!(d.v_hat, vec![0.0]);
    }

    #[test]
    fn drift_vanishes_at_equilibrium() {
        for name in ["case9", "case30", "case57"] {
            let case = bundled_case(name).unwrap();
            let eq = solve_equilibrium(&case, 1e-10, 20).unwrap();
            let state = SystemState::equilibrium(&case, &eq.delta);
            let d = drift_rhs(&state, &case, &OuParams::default()).unwrap();
            let worst = d
                .omega
                .iter()
                .chain(&d.delta)
                .chain(&d.eta)
                .fold(0.0f64, |a, x| a.max(x.abs()));
            assert!(worst <= 1e-8, "{name}: {worst}");
            assert!(d.v_hat.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn drift_dimension_mismatch() {
        let case = bundled_case("case9").unwrap();
        let state = SystemState::zeros(3);
        assert!(matches!(
            drift_rhs(&state, &case, &OuParams::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn sparse_power_matches_dense_formula() {
        let case = bundled_case("case30").unwrap();
        let model = SwingModel::new(
            &case,
            OuParams::default(),
            &uncorrelated(30),
            &case.delta_eq,
        )
        .unwrap();
        let mut rng = rng::stream(3, Purpose::Main, 0);
        let mut scratch = Scratch::new(30);
        let s = model.sample_initial(&mut rng, &mut scratch);
        let delta: Vec<f64> = s
            .delta
            .iter()
            .enumerate()
            .map(|(i, d)| d + 0.01 * i as f64)
            .collect();
        model.electrical_power(&s.v_hat, &delta, &mut scratch);
        let dense = crate::case::electrical_power(&case.g, &case.b, &s.v_hat, &delta);
        for i in 0..30 {
            assert!((dense[i] - scratch.pe[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_step_is_fixed_point() {
        let case = bundled_case("case9").unwrap();
        let eq = solve_equilibrium(&case, 1e-10, 20).unwrap();
        let params = OuParams {
            theta: 1.0,
            alpha: 0.0,
        };
        let model = SwingModel::new(&case, params, &uncorrelated(9), &eq.delta).unwrap();
        let state = SystemState::equilibrium(&case, &eq.delta);
        let mut rng = rng::stream(0, Purpose::Main, 0);
        let next = step_milstein(&model, &state, 0.005, &mut rng).unwrap();
        for i in 0..9 {
            assert!((next.omega[i] - state.omega[i]).abs() < 1e-8);
            assert!((next.delta[i] - state.delta[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let case = bundled_case("case9").unwrap();
        let corr = build_correlation(&case, &CorrelationKind::Constant { rho: 0.44 }).unwrap();
        let model = SwingModel::new(&case, OuParams::default(), &corr, &case.delta_eq).unwrap();
        let run = || {
            let mut rng = rng::stream(11, Purpose::Main, 4);
            let mut s = sample_initial_conditions(&model, &mut rng);
            for _ in 0..200 {
                s = step_milstein(&model, &s, 0.005, &mut rng).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn voltages_constant_along_paths() {
        let case = bundled_case("case9").unwrap();
        let corr = build_correlation(&case, &CorrelationKind::Uncorrelated).unwrap();
        let model = SwingModel::new(&case, OuParams::default(), &corr, &case.delta_eq).unwrap();
        let cfg = SimConfig {
            t_final: 1.0,
            n_realizations: 8,
            save_stride: 20,
            ..SimConfig::default()
        };
        let init = burn_in(&model, 8, &cfg).unwrap();
        let ens = simulate_ensemble(&init, &model, &cfg, "case9", corr.kind).unwrap();
        for r in 0..8 {
            let v0 = ens.state(r, 0).v_hat;
            for t in 0..ens.times.len() {
                assert_eq!(ens.state(r, t).v_hat, v0);
            }
            assert!(v0.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn ou_variance_matches_closed_form() {
        // decoupled single machine, eta only
        let case = single_machine();
        let params = OuParams::default();
        let model = SwingModel::new(&case, params, &uncorrelated(1), &[0.0]).unwrap();
        let n_paths = 20_000;
        let steps = 1000; // t = 5
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut scratch = Scratch::new(1);
        for r in 0..n_paths {
            let mut rng = rng::stream(5, Purpose::Main, r);
            let mut s = SystemState::equilibrium(&case, &[0.0]);
            for _ in 0..steps {
                model.step_in_place(&mut s, 0.005, &mut rng, &mut scratch);
            }
            sum += s.eta[0];
            sum2 += s.eta[0] * s.eta[0];
        }
        let mean = sum / n_paths as f64;
        let var = sum2 / n_paths as f64 - mean * mean;
        let (_, cov) =
            ou_analytic_moments(&params, &DMatrix::identity(1, 1), &DVector::zeros(1), 5.0)
                .unwrap();
        assert!((var - cov[(0, 0)]).abs() / cov[(0, 0)] < 0.05, "{var}");
    }

    #[test]
    fn save_times_arithmetic() {
        let cfg = SimConfig {
            save_stride: 1,
            ..SimConfig::default()
        };
        let times = cfg.save_times();
        assert_eq!(times.len(), 2001);
        assert_eq!(SimConfig::default().save_times().len(), 101);
        assert_eq!(times[0], 0.0);
        assert!((times[2000] - 10.0).abs() < 1e-12);
        let bad = SimConfig {
            save_stride: 3,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn alpha_zero_noise_is_zero() {
        let case = bundled_case("case9").unwrap();
        let corr = build_correlation(&case, &CorrelationKind::Uncorrelated).unwrap();
        let model = SwingModel::new(
            &case,
            OuParams {
                theta: 1.0,
                alpha: 0.0,
            },
            &corr,
            &case.delta_eq,
        )
        .unwrap();
        let mut rng = rng::stream(0, Purpose::BurnIn, 0);
        let s = sample_initial_conditions(&model, &mut rng);
        assert!(s.eta.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn panel_matches_ensemble() {
        let case = bundled_case("case9").unwrap();
        let corr = build_correlation(&case, &CorrelationKind::Uncorrelated).unwrap();
        let model = SwingModel::new(&case, OuParams::default(), &corr, &case.delta_eq).unwrap();
        let cfg = SimConfig {
            t_final: 0.5,
            n_realizations: 5,
            save_stride: 10,
            ..SimConfig::default()
        };
        let init = burn_in(&model, 5, &cfg).unwrap();
        let ens = simulate_ensemble(&init, &model, &cfg, "case9", corr.kind).unwrap();
        let direct = simulate_panel(&init, &model, &cfg).unwrap();
        let via = Panel::from_ensemble(&ens, &model).unwrap();
        assert_eq!(direct, via);
        assert_eq!(
            direct.samples(PanelField::Omega, 3, 2, 5)[4],
            ens.omega(4, 3, 2)
        );
    }
}
