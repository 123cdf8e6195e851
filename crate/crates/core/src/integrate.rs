//! Time integration: fixed-step RK4 and adaptive Dormand–Prince 5(4), with a
//! collision/escape guard, dense cubic Hermite sampling, and the special
//! handling the repulsive slow manifold of the third-order system needs.
//!
//! Explicit forward stepping of the DAE amplifies any offset from the slow
//! manifold by `exp(λt/ε^{3/2})`. Forward runs started at `h₀` therefore run
//! away (which [`integrate_dae`] reproduces on purpose). Runaway-free
//! trajectories are obtained by integrating backward in time, where the fast
//! mode contracts: [`integrate_dae_terminal`] does this from terminal data,
//! and [`integrate_dae_on_manifold`] solves the initial-value problem by
//! shooting on the terminal slow state.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::forces::{self, Model};
use crate::linalg::DenseMatrix;
use crate::manifold::{self, FastSlowSystem};
use crate::math::{abs, eps_three_halves, ln, pow};
use crate::params::ParticleSystem;
use crate::state::{DaeState, PhaseState};
use crate::vec3::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Classical fourth-order Runge–Kutta with fixed step.
    Rk4,
    /// Dormand–Prince 5(4) with error control.
    Rk45,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepperConfig {
    pub method: Method,
    /// Fixed step for RK4, initial step for RK45 (`0` picks one).
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// DAE step cap `κ ε^{3/2}`.
    pub kappa: f64,
    /// Store every `record_every`-th accepted step (the last one always).
    pub record_every: usize,
}

impl Default for StepperConfig {
    fn default() -> Self {
        StepperConfig {
            method: Method::Rk45,
            step: 0.0,
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 50_000_000,
            kappa: 0.1,
            record_every: 1,
        }
    }
}

impl StepperConfig {
    pub fn rk4(step: f64) -> Self {
        StepperConfig { method: Method::Rk4, step, ..Default::default() }
    }

    pub fn rk45(rtol: f64, atol: f64) -> Self {
        StepperConfig { method: Method::Rk45, rtol, atol, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Rk4 && !(self.step > 0.0) {
            return Err(invalid("RK4 needs a positive step"));
        }
        if !(self.step >= 0.0) || !(self.rtol > 0.0) || !(self.atol > 0.0) || !(self.kappa > 0.0) {
            return Err(invalid("step, tolerances and κ must be positive"));
        }
        if self.max_steps == 0 || self.record_every == 0 {
            return Err(invalid("max_steps and record_every must be positive"));
        }
        Ok(())
    }

    /// Largest stable step for the DAE: `ε^{3/2} min(κ, 1.5/λ)` with `λ`
    /// the fast growth rate in units of `ε^{-3/2}`.
    pub fn dae_step_cap(&self, fs: &FastSlowSystem) -> f64 {
        let lambda = manifold::fast_eigenvalue_bound(fs.system());
        eps_three_halves(fs.epsilon()) * self.kappa.min(1.5 / lambda)
    }
}

/// Stops a run when particles come too close or drift too far apart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionGuard {
    pub min_separation: f64,
    pub escape_radius: f64,
}

impl CollisionGuard {
    pub fn new(min_separation: f64, escape_radius: f64) -> Result<Self> {
        if !(min_separation > 0.0) || !(escape_radius > min_separation) {
            return Err(invalid("guard needs 0 < min_separation < escape_radius"));
        }
        Ok(CollisionGuard { min_separation, escape_radius })
    }

    /// Never triggers.
    pub fn none() -> Self {
        CollisionGuard { min_separation: 0.0, escape_radius: f64::INFINITY }
    }

    /// Thresholds matching the regularization bands: `C_*/4` and `10 C^*`.
    pub fn from_regularization(reg: &manifold::Regularization) -> Self {
        CollisionGuard { min_separation: reg.inner_scale() / 4.0, escape_radius: 10.0 * reg.outer_scale() }
    }

    /// Distance to the nearest violation (negative once violated) and the
    /// reason it would stop.
    fn margin(&self, n: usize, x: &[f64]) -> (f64, Termination) {
        let mut best = (f64::INFINITY, Termination::Completed);
        for a in 0..n {
            for b in a + 1..n {
                let d = Vec3::new(x[3 * a] - x[3 * b], x[3 * a + 1] - x[3 * b + 1], x[3 * a + 2] - x[3 * b + 2]).norm();
                let close = d - self.min_separation;
                if close < best.0 {
                    best = (close, Termination::Collision);
                }
                let far = self.escape_radius - d;
                if far < best.0 {
                    best = (far, Termination::Escape);
                }
            }
        }
        best
    }
}

/// Why a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Termination {
    Completed,
    Collision,
    Escape,
    SolverFailure,
    RunawaySuspected,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::Completed => "completed",
            Termination::Collision => "collision",
            Termination::Escape => "escape",
            Termination::SolverFailure => "solver-failure",
            Termination::RunawaySuspected => "runaway-suspected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateLayout {
    /// `[r, u]`, `6N` numbers.
    Phase,
    /// `[r, u, y]`, `6N + 3` numbers.
    Dae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Stored samples of one run, in increasing time order, together with the
/// right-hand side at every sample.
#[derive(Debug, Clone)]
pub struct Trajectory {
    n: usize,
    layout: StateLayout,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    derivs: Vec<Vec<f64>>,
    residuals: Vec<f64>,
    pub termination: Termination,
    pub message: Option<String>,
    pub stats: StepStats,
}

impl Trajectory {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        Some((*self.times.first()?, *self.times.last()?))
    }

    pub fn state_flat(&self, i: usize) -> &[f64] {
        &self.states[i]
    }

    pub fn deriv_flat(&self, i: usize) -> &[f64] {
        &self.derivs[i]
    }

    pub fn phase_state(&self, i: usize) -> PhaseState {
        PhaseState::from_flat(self.times[i], &self.states[i][..6 * self.n])
    }

    pub fn dae_state(&self, i: usize) -> Option<DaeState> {
        match self.layout {
            StateLayout::Dae => Some(DaeState::from_flat(self.times[i], &self.states[i])),
            StateLayout::Phase => None,
        }
    }

    pub fn accelerations(&self, i: usize) -> Vec<Vec3> {
        crate::vec3::unflatten(&self.derivs[i][3 * self.n..6 * self.n])
    }

    /// Fast variable at sample `i` (DAE runs only).
    pub fn y(&self, i: usize) -> Option<Vec3> {
        let s = &self.states[i];
        match self.layout {
            StateLayout::Dae => Some(Vec3::new(s[6 * self.n], s[6 * self.n + 1], s[6 * self.n + 2])),
            StateLayout::Phase => None,
        }
    }

    /// Constraint residual at sample `i` (zero for second-order models).
    pub fn constraint_residual(&self, i: usize) -> f64 {
        self.residuals.get(i).copied().unwrap_or(0.0)
    }

    pub fn final_phase_state(&self) -> Option<PhaseState> {
        (!self.is_empty()).then(|| self.phase_state(self.len() - 1))
    }

    /// Keeps only samples with `t` in `[t0, t1]`.
    pub fn restrict(&mut self, t0: f64, t1: f64) {
        let keep: Vec<bool> = self.times.iter().map(|t| *t >= t0 && *t <= t1).collect();
        let mut it = keep.iter();
        self.times.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.states.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.derivs.retain(|_| *it.next().unwrap());
        if !self.residuals.is_empty() {
            let mut it = keep.iter();
            self.residuals.retain(|_| *it.next().unwrap());
        }
    }

    /// Flat state and its time derivative at `t` by cubic Hermite
    /// interpolation between stored samples.
    pub fn interpolate(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (t0, t1) = self.span().ok_or(Error::TooFewPoints { needed: 1, got: 0 })?;
        if !(t >= t0 && t <= t1) {
            return Err(Error::OutOfRange { value: t, lo: t0, hi: t1 });
        }
        let k = self.times.partition_point(|s| *s < t);
        if k < self.len() && self.times[k] == t {
            return Ok((self.states[k].clone(), self.derivs[k].clone()));
        }
        let (i, j) = (k - 1, k);
        Ok(hermite(self.times[i], &self.states[i], &self.derivs[i], self.times[j], &self.states[j], &self.derivs[j], t))
    }

    /// States at the requested times.
    pub fn resample(&self, times: &[f64]) -> Result<Vec<Vec<f64>>> {
        times.iter().map(|t| self.interpolate(*t).map(|(x, _)| x)).collect()
    }

    pub fn phase_and_acceleration_at(&self, t: f64) -> Result<(PhaseState, Vec<Vec3>)> {
        let (x, dx) = self.interpolate(t)?;
        let n = self.n;
        Ok((PhaseState::from_flat(t, &x[..6 * n]), crate::vec3::unflatten(&dx[3 * n..6 * n])))
    }

    fn reverse(&mut self) {
        self.times.reverse();
        self.states.reverse();
        self.derivs.reverse();
        self.residuals.reverse();
    }
}

/// Cubic Hermite interpolant and its derivative.
fn hermite(t0: f64, x0: &[f64], f0: &[f64], t1: f64, x1: &[f64], f1: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    let h = t1 - t0;
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let d00 = (6.0 * s2 - 6.0 * s) / h;
    let d10 = 3.0 * s2 - 4.0 * s + 1.0;
    let d01 = (-6.0 * s2 + 6.0 * s) / h;
    let d11 = 3.0 * s2 - 2.0 * s;
    let mut x = vec![0.0; x0.len()];
    let mut dx = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        x[i] = h00 * x0[i] + h10 * h * f0[i] + h01 * x1[i] + h11 * h * f1[i];
        dx[i] = d00 * x0[i] + d10 * f0[i] + d01 * x1[i] + d11 * f1[i];
    }
    (x, dx)
}

/// Right-hand side of a first-order system. `eval` returns an auxiliary
/// scalar that is stored with every sample (the DAE constraint residual).
pub trait OdeRhs {
    fn eval(&mut self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<f64>;
}

impl<F: FnMut(f64, &[f64], &mut [f64]) -> Result<f64>> OdeRhs for F {
    fn eval(&mut self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<f64> {
        self(t, x, dx)
    }
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] =
    [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];

/// Outcome of a single attempted step.
struct StepResult {
    x1: Vec<f64>,
    f1: Vec<f64>,
    aux1: f64,
    /// Scaled error norm (RK45) or zero (RK4).
    err: f64,
}

fn axpy(out: &mut [f64], x: &[f64], h: f64, ks: &[&[f64]], coeffs: &[f64]) {
    for i in 0..out.len() {
        let mut s = 0.0;
        for (k, c) in ks.iter().zip(coeffs) {
            if *c != 0.0 {
                s += c * k[i];
            }
        }
        out[i] = x[i] + h * s;
    }
}

fn rk4_step<R: OdeRhs>(rhs: &mut R, t: f64, x: &[f64], f0: &[f64], h: f64, evals: &mut usize) -> Result<StepResult> {
    let d = x.len();
    let mut tmp = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    axpy(&mut tmp, x, 0.5 * h, &[f0], &[1.0]);
    rhs.eval(t + 0.5 * h, &tmp, &mut k2)?;
    axpy(&mut tmp, x, 0.5 * h, &[&k2], &[1.0]);
    rhs.eval(t + 0.5 * h, &tmp, &mut k3)?;
    axpy(&mut tmp, x, h, &[&k3], &[1.0]);
    rhs.eval(t + h, &tmp, &mut k4)?;
    let mut x1 = vec![0.0; d];
    axpy(&mut x1, x, h / 6.0, &[f0, &k2, &k3, &k4], &[1.0, 2.0, 2.0, 1.0]);
    let mut f1 = vec![0.0; d];
    let aux1 = rhs.eval(t + h, &x1, &mut f1)?;
    *evals += 4;
    Ok(StepResult { x1, f1, aux1, err: 0.0 })
}

fn dp45_step<R: OdeRhs>(
    rhs: &mut R,
    t: f64,
    x: &[f64],
    f0: &[f64],
    h: f64,
    cfg: &StepperConfig,
    evals: &mut usize,
) -> Result<StepResult> {
    let d = x.len();
    let mut k: Vec<Vec<f64>> = vec![f0.to_vec()];
    let mut tmp = vec![0.0; d];
    let mut aux1 = 0.0;
    for s in 1..7 {
        {
            let refs: Vec<&[f64]> = k.iter().map(|v| v.as_slice()).collect();
            axpy(&mut tmp, x, h, &refs, &DP_A[s][..s]);
        }
        let mut ks = vec![0.0; d];
        let a = rhs.eval(t + DP_C[s] * h, &tmp, &mut ks)?;
        *evals += 1;
        if s == 6 {
            aux1 = a;
        }
        k.push(ks);
    }
    // The seventh stage is evaluated at the new point (FSAL).
    let x1 = tmp;
    let mut err = 0.0;
    for i in 0..d {
        let mut e = 0.0;
        for s in 0..7 {
            e += DP_E[s] * k[s][i];
        }
        let sc = cfg.atol + cfg.rtol * abs(x[i]).max(abs(x1[i]));
        let r = h * e / sc;
        err += r * r;
    }
    let err = crate::math::sqrt(err / d as f64);
    let f1 = k.pop().unwrap();
    Ok(StepResult { x1, f1, aux1, err })
}

/// Extra per-step checks beyond the guard.
type Monitor<'a> = &'a mut dyn FnMut(&[f64]) -> Option<Termination>;

#[allow(clippy::too_many_arguments)]
fn run<R: OdeRhs>(
    rhs: &mut R,
    n: usize,
    layout: StateLayout,
    t0: f64,
    x0: Vec<f64>,
    t_end: f64,
    cfg: &StepperConfig,
    max_step: f64,
    guard: &CollisionGuard,
    monitor: Monitor<'_>,
    underflow_means: Termination,
) -> Result<Trajectory> {
    cfg.validate()?;
    if !(t_end.is_finite() && t0.is_finite()) {
        return Err(Error::NonFinite("time span"));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state"));
    }
    let (m0, _) = guard.margin(n, &x0);
    if m0 < 0.0 {
        return Err(invalid("initial state violates the collision guard"));
    }
    let dir = if t_end >= t0 { 1.0 } else { -1.0 };
    let mut stats = StepStats::default();
    let mut f0 = vec![0.0; x0.len()];
    let aux0 = rhs.eval(t0, &x0, &mut f0)?;
    stats.evaluations += 1;
    let mut traj = Trajectory {
        n,
        layout,
        times: vec![t0],
        states: vec![x0.clone()],
        derivs: vec![f0.clone()],
        residuals: if layout == StateLayout::Dae { vec![aux0] } else { Vec::new() },
        termination: Termination::Completed,
        message: None,
        stats,
    };
    let span = abs(t_end - t0);
    let mut h_mag = match cfg.method {
        Method::Rk4 => cfg.step.min(max_step),
        Method::Rk45 => {
            if cfg.step > 0.0 {
                cfg.step.min(max_step)
            } else {
                (span * 1e-3).min(max_step).max(1e-12)
            }
        }
    };
    let (mut t, mut x, mut f) = (t0, x0, f0);
    let mut since_record = 0usize;
    let mut pending: Option<(f64, Vec<f64>, Vec<f64>, f64)> = None;

    let finish = |traj: &mut Trajectory, pending: Option<(f64, Vec<f64>, Vec<f64>, f64)>| {
        if let Some((tp, xp, fp, ap)) = pending {
            traj.times.push(tp);
            traj.states.push(xp);
            traj.derivs.push(fp);
            if traj.layout == StateLayout::Dae {
                traj.residuals.push(ap);
            }
        }
    };

    while dir * (t_end - t) > 0.0 {
        if traj.stats.accepted >= cfg.max_steps {
            traj.termination = Termination::SolverFailure;
            traj.message = Some(format!("step limit {} reached at t = {t}", cfg.max_steps));
            break;
        }
        let remaining = abs(t_end - t);
        let mut h = h_mag.min(remaining);
        // avoid a sliver of a final step
        if remaining - h < 1e-10 * remaining.max(abs(t)) {
            h = remaining;
        }
        if h < 1e-14 * abs(t).max(span).max(1e-300) {
            traj.termination = underflow_means;
            traj.message = Some(format!("step size underflow at t = {t}"));
            break;
        }
        let hs = dir * h;
        let attempt = match cfg.method {
            Method::Rk4 => rk4_step(rhs, t, &x, &f, hs, &mut traj.stats.evaluations),
            Method::Rk45 => dp45_step(rhs, t, &x, &f, hs, cfg, &mut traj.stats.evaluations),
        };
        let step = match attempt {
            Ok(s) if s.x1.iter().all(|v| v.is_finite()) && s.err.is_finite() => s,
            Ok(_) | Err(_) => {
                if cfg.method == Method::Rk4 {
                    traj.termination = if underflow_means == Termination::RunawaySuspected {
                        Termination::RunawaySuspected
                    } else {
                        Termination::SolverFailure
                    };
                    traj.message = Some(match attempt {
                        Err(e) => format!("right-hand side failed at t = {t}: {e}"),
                        Ok(_) => format!("non-finite state at t = {t}"),
                    });
                    break;
                }
                traj.stats.rejected += 1;
                h_mag = h * 0.25;
                continue;
            }
        };
        if cfg.method == Method::Rk45 {
            if step.err > 1.0 {
                traj.stats.rejected += 1;
                h_mag = h * (0.9 * pow(step.err, -0.2)).max(0.2);
                continue;
            }
            let grow = if step.err == 0.0 { 5.0 } else { (0.9 * pow(step.err, -0.2)).clamp(0.2, 5.0) };
            h_mag = (h * grow).min(max_step);
        }
        traj.stats.accepted += 1;
        let t1 = if h == remaining { t_end } else { t + hs };

        let (margin, reason) = guard.margin(n, &step.x1);
        if margin < 0.0 {
            // Bisect the crossing on the Hermite interpolant.
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let (xm, _) = hermite(t, &x, &f, t1, &step.x1, &step.f1, t + mid * (t1 - t));
                if guard.margin(n, &xm).0 < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if (hi - lo) * h <= 1e-9 * abs(t1).max(h) {
                    break;
                }
            }
            let te = t + hi * (t1 - t);
            let (xe, mut fe) = hermite(t, &x, &f, t1, &step.x1, &step.f1, te);
            let mut fe2 = vec![0.0; xe.len()];
            let mut ae = step.aux1;
            if let Ok(a) = rhs.eval(te, &xe, &mut fe2) {
                fe = fe2;
                ae = a;
            }
            pending = Some((te, xe, fe, ae));
            traj.termination = reason;
            traj.message = Some(format!("{} at t = {te}", reason.name()));
            break;
        }
        if let Some(stop) = monitor(&step.x1) {
            pending = Some((t1, step.x1, step.f1, step.aux1));
            traj.termination = stop;
            traj.message = Some(format!("{} at t = {t1}", stop.name()));
            break;
        }
        t = t1;
        x = step.x1;
        f = step.f1;
        since_record += 1;
        let done = dir * (t_end - t) <= 0.0;
        if since_record >= cfg.record_every || done {
            since_record = 0;
            traj.times.push(t);
            traj.states.push(x.clone());
            traj.derivs.push(f.clone());
            if layout == StateLayout::Dae {
                traj.residuals.push(step.aux1);
            }
            pending = None;
        } else {
            pending = Some((t, x.clone(), f.clone(), step.aux1));
        }
    }
    finish(&mut traj, pending);
    if dir < 0.0 {
        traj.reverse();
    }
    Ok(traj)
}

/// Integrates one of the second-order models from `state0.t` to `t_end`
/// (which may lie in the past).
pub fn integrate_model(
    model: Model,
    state0: &PhaseState,
    sys: &ParticleSystem,
    eps: f64,
    t_end: f64,
    cfg: &StepperConfig,
    guard: &CollisionGuard,
) -> Result<Trajectory> {
    if state0.n() != sys.n() {
        return Err(Error::DimensionMismatch { expected: sys.n(), got: state0.n() });
    }
    let n = sys.n();
    let mut rhs = |_t: f64, x: &[f64], dx: &mut [f64]| -> Result<f64> {
        let s = PhaseState::from_flat(0.0, x);
        let a = forces::accelerations(model, &s, sys, eps)?;
        dx[..3 * n].copy_from_slice(&x[3 * n..6 * n]);
        crate::vec3::flatten(&a, &mut dx[3 * n..]);
        Ok(0.0)
    };
    let max_step = match cfg.method {
        Method::Rk4 => cfg.step,
        Method::Rk45 => f64::INFINITY,
    };
    run(
        &mut rhs,
        n,
        StateLayout::Phase,
        state0.t,
        state0.to_flat(),
        t_end,
        cfg,
        max_step,
        guard,
        &mut |_| None,
        Termination::SolverFailure,
    )
}

fn dae_rhs<'a>(fs: &'a FastSlowSystem) -> impl FnMut(f64, &[f64], &mut [f64]) -> Result<f64> + 'a {
    let n = fs.system().n();
    move |_t, x, dx| {
        let r = crate::vec3::unflatten(&x[..3 * n]);
        let u = crate::vec3::unflatten(&x[3 * n..6 * n]);
        let y = Vec3::new(x[6 * n], x[6 * n + 1], x[6 * n + 2]);
        let frame = fs.frame(&r, &u)?;
        let rates = fs.rates_in_frame(&frame, y)?;
        dx[..3 * n].copy_from_slice(&x[3 * n..6 * n]);
        crate::vec3::flatten(&rates.accelerations, &mut dx[3 * n..6 * n]);
        dx[6 * n..].copy_from_slice(&rates.y_dot.to_array());
        Ok(rates.constraint_residual)
    }
}

/// Integrates the DAE `(ṙ, u̇, ẏ)` explicitly from `s0` to `t_end` with the
/// step capped at [`StepperConfig::dae_step_cap`]. Forward in time this
/// exhibits the runaway instability; a run is flagged
/// [`Termination::RunawaySuspected`] once `|y|` exceeds `runaway_threshold`
/// or the step size collapses.
pub fn integrate_dae(
    s0: &DaeState,
    fs: &FastSlowSystem,
    t_end: f64,
    cfg: &StepperConfig,
    guard: &CollisionGuard,
    runaway_threshold: f64,
) -> Result<Trajectory> {
    let n = fs.system().n();
    if s0.n() != n {
        return Err(Error::DimensionMismatch { expected: n, got: s0.n() });
    }
    let cap = cfg.dae_step_cap(fs);
    let mut rhs = dae_rhs(fs);
    let mut monitor = |x: &[f64]| {
        let y = Vec3::new(x[6 * n], x[6 * n + 1], x[6 * n + 2]);
        (!(y.norm() <= runaway_threshold)).then_some(Termination::RunawaySuspected)
    };
    run(
        &mut rhs,
        n,
        StateLayout::Dae,
        s0.t,
        s0.to_flat(),
        t_end,
        cfg,
        cap,
        guard,
        &mut monitor,
        Termination::RunawaySuspected,
    )
}

/// Width of the terminal layer discarded by [`integrate_dae_terminal`]:
/// forty e-folds of the fast mode.
pub fn terminal_layer(fs: &FastSlowSystem) -> f64 {
    40.0 * eps_three_halves(fs.epsilon()) / manifold::fast_eigenvalue(fs.system())
}

/// On-manifold trajectory on `[t_start, terminal.t]` from terminal data.
///
/// The terminal slow state is first carried forward by one
/// [`terminal_layer`] with the reduced radiation-reaction model, the fast
/// variable is set to the refined manifold value there, and the DAE is
/// integrated backward to `t_start`. Deviations from the slow manifold decay
/// backward in time, so after the discarded layer the trajectory agrees with
/// the invariant manifold to about `e⁻⁴⁰`.
pub fn integrate_dae_terminal(
    terminal: &PhaseState,
    fs: &FastSlowSystem,
    t_start: f64,
    cfg: &StepperConfig,
    guard: &CollisionGuard,
) -> Result<Trajectory> {
    if !(t_start < terminal.t) {
        return Err(invalid("terminal-data runs need t_start < terminal time"));
    }
    let sys = fs.system();
    let eps = fs.epsilon();
    let layer = terminal_layer(fs);
    let ext = integrate_model(
        Model::RrReduced,
        terminal,
        sys,
        eps,
        terminal.t + layer,
        &StepperConfig::rk45(1e-12, 1e-14),
        &CollisionGuard::none(),
    )?;
    if ext.termination != Termination::Completed {
        return Err(invalid("could not extend terminal data past the layer"));
    }
    let start = ext.final_phase_state().unwrap();
    let y = fs.manifold_init(&start.r, &start.u, 1)?.y;
    let s0 = DaeState::from_phase(&start, y);
    // Two legs so that the terminal time is a stored sample.
    let layer_run = integrate_dae(&s0, fs, terminal.t, cfg, guard, f64::INFINITY)?;
    if layer_run.termination != Termination::Completed {
        return Ok(layer_run);
    }
    let s1 = layer_run.dae_state(0).unwrap();
    let mut traj = integrate_dae(&s1, fs, t_start, cfg, guard, f64::INFINITY)?;
    traj.stats.accepted += layer_run.stats.accepted;
    traj.stats.rejected += layer_run.stats.rejected;
    traj.stats.evaluations += layer_run.stats.evaluations;
    Ok(traj)
}

/// Settings for [`integrate_dae_on_manifold`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShootingConfig {
    pub max_iterations: usize,
    /// Target for `max |x(t₀) − x₀|`.
    pub tolerance: f64,
    /// Relative perturbation for the finite-difference flow Jacobian.
    pub fd_step: f64,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        ShootingConfig { max_iterations: 8, tolerance: 1e-10, fd_step: 1e-6 }
    }
}

/// Convergence record of the shooting iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootingReport {
    pub iterations: usize,
    pub mismatches: Vec<f64>,
    pub converged: bool,
}

/// On-manifold solution of the initial-value problem `(r, u)(t₀) = x₀` on
/// `[t₀, t_end]`.
///
/// The terminal slow state `x_T` is adjusted until the backward run of
/// [`integrate_dae_terminal`] lands on `x₀`. The Newton update uses the
/// forward flow Jacobian of the reduced radiation-reaction model as the
/// inverse of `∂x(t₀)/∂x_T`, which is exact up to the `O(ε)` gap between the
/// two flows.
pub fn integrate_dae_on_manifold(
    initial: &PhaseState,
    fs: &FastSlowSystem,
    t_end: f64,
    cfg: &StepperConfig,
    guard: &CollisionGuard,
    shoot: &ShootingConfig,
) -> Result<(Trajectory, ShootingReport)> {
    let sys = fs.system();
    let eps = fs.epsilon();
    let t0 = initial.t;
    if !(t_end > t0) {
        return Err(invalid("t_end must follow the initial time"));
    }
    let tight = StepperConfig::rk45(1e-12, 1e-14);
    let forward = |x: &[f64]| -> Result<Vec<f64>> {
        let s = PhaseState::from_flat(t0, x);
        let tr = integrate_model(Model::RrReduced, &s, sys, eps, t_end, &tight, &CollisionGuard::none())?;
        if tr.termination != Termination::Completed {
            return Err(invalid("reduced model failed while building the shooting Jacobian"));
        }
        Ok(tr.state_flat(tr.len() - 1).to_vec())
    };
    let x0 = initial.to_flat();
    let mut x_t = forward(&x0)?;
    let d = x0.len();
    let mut jac = DenseMatrix::zeros(d, d);
    for k in 0..d {
        let dk = shoot.fd_step * abs(x0[k]).max(1.0);
        let mut xp = x0.clone();
        xp[k] += dk;
        let mut xm = x0.clone();
        xm[k] -= dk;
        let fp = forward(&xp)?;
        let fm = forward(&xm)?;
        for i in 0..d {
            jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * dk);
        }
    }
    let mut report = ShootingReport { iterations: 0, mismatches: Vec::new(), converged: false };
    let mut best: Option<(f64, Trajectory)> = None;
    for it in 0..shoot.max_iterations {
        let terminal = PhaseState::from_flat(t_end, &x_t);
        let traj = integrate_dae_terminal(&terminal, fs, t0, cfg, guard)?;
        report.iterations = it + 1;
        if traj.termination != Termination::Completed {
            return Ok((traj, report));
        }
        let start = traj.state_flat(0);
        let mismatch: Vec<f64> = (0..d).map(|i| start[i] - x0[i]).collect();
        let m = mismatch.iter().fold(0.0f64, |a, b| a.max(abs(*b)));
        report.mismatches.push(m);
        let improved = best.as_ref().is_none_or(|(bm, _)| m < *bm);
        if improved {
            best = Some((m, traj));
        }
        if m <= shoot.tolerance {
            report.converged = true;
            break;
        }
        if !improved && it > 1 {
            break;
        }
        let corr = jac.mul_vec(&mismatch);
        for i in 0..d {
            x_t[i] -= corr[i];
        }
    }
    let (_, traj) = best.ok_or(invalid("shooting produced no trajectory"))?;
    Ok((traj, report))
}

/// Least-squares exponential rate of `|values|` against `times`.
pub fn fit_exponential_rate(times: &[f64], values: &[f64]) -> Result<f64> {
    if times.len() != values.len() {
        return Err(Error::DimensionMismatch { expected: times.len(), got: values.len() });
    }
    if times.len() < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: times.len() });
    }
    let ys: Vec<f64> = values.iter().map(|v| ln(abs(*v))).collect();
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::NonFinite("exponential fit"));
    }
    let k = times.len() as f64;
    let mt = times.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let stt: f64 = times.iter().map(|t| (t - mt) * (t - mt)).sum();
    let sty: f64 = times.iter().zip(&ys).map(|(t, y)| (t - mt) * (y - my)).sum();
    Ok(sty / stt)
}
