//! Energies, momenta, the dissipation identity, trajectory comparison and
//! convergence-order fits.
//!
//! # Scale bookkeeping
//!
//! Everything here is on the Coulomb scale. With `H = ε H̄` (see
//! [`crate::params::ScaleMap`]) the microscopic energies map as follows.
//!
//! | microscopic term                         | Coulomb-scale term                          |
//! |------------------------------------------|---------------------------------------------|
//! | `½ m v²`                                 | `½ m u²`                                    |
//! | `(3/8) m* v⁴`                            | `ε (3/8) m* u⁴`                             |
//! | `e e'/(4π|q|)`                           | `e e'/(4π|r|)`                              |
//! | `(e e'/4π|q|)(v·v' + (v·n)(v'·n))`       | `ε (e e'/4π|r|)(u·u' + (u·n)(u'·n))`        |
//! | `(e e'/6π) v·v̇'`                         | `ε^{3/2} (e e'/6π) u·u̇'`                    |
//! | `(1/6π)(Σ e v̇)²` (power)                 | `ε^{3/2} (1/6π)(Σ e u̇)²`                    |
//!
//! so `dH_RR/dt = −(ε^{3/2}/6π)(Σ_α e_α u̇_α)²` along the third-order
//! system, and [`dissipation_rate`] returns the right side without the sign.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::forces::PairGeometry;
use crate::integrate::Trajectory;
use crate::math::{eps_three_halves, ln, PI};
use crate::params::ParticleSystem;
use crate::state::PhaseState;
use crate::vec3::Vec3;

fn check(state: &PhaseState, sys: &ParticleSystem) -> Result<PairGeometry> {
    if state.n() != sys.n() {
        return Err(Error::DimensionMismatch { expected: sys.n(), got: state.n() });
    }
    PairGeometry::new(&state.r)
}

fn potential(geom: &PairGeometry, sys: &ParticleSystem) -> f64 {
    let e = sys.charges();
    let mut v = 0.0;
    for a in 0..geom.n() {
        for b in a + 1..geom.n() {
            v += e[a] * e[b] / (4.0 * PI * geom.dist(a, b));
        }
    }
    v
}

/// `H_C = Σ ½ m_α u_α² + ½ Σ_{α≠β} e_α e_β/(4π|ξ_αβ|)`.
pub fn energy_coulomb(state: &PhaseState, sys: &ParticleSystem) -> Result<f64> {
    let geom = check(state, sys)?;
    let kin: f64 = state.u.iter().zip(sys.masses()).map(|(u, m)| 0.5 * m * u.norm_squared()).sum();
    Ok(kin + potential(&geom, sys))
}

/// Darwin energy
/// `H_D = Σ (½ m u² + ε(3/8) m* u⁴) + ½ Σ_{α≠β} e_α e_β/(4π|ξ|)
///  + (ε/4) Σ_{α≠β} (e_α e_β/4π|ξ|)(u_α·u_β + (u_α·n)(u_β·n))`.
pub fn energy_darwin(state: &PhaseState, sys: &ParticleSystem, eps: f64) -> Result<f64> {
    let geom = check(state, sys)?;
    let e = sys.charges();
    let kin: f64 = state.u.iter().zip(sys.masses()).map(|(u, m)| 0.5 * m * u.norm_squared()).sum();
    let quartic: f64 =
        state.u.iter().zip(sys.star_masses()).map(|(u, ms)| 0.375 * ms * u.norm_squared() * u.norm_squared()).sum();
    let h = kin + potential(&geom, sys);
    let mut vel = 0.0;
    for a in 0..geom.n() {
        for b in a + 1..geom.n() {
            let d = geom.dist(a, b);
            let n = geom.xi(a, b) / d;
            let (ua, ub) = (state.u[a], state.u[b]);
            vel += e[a] * e[b] / (4.0 * PI * d) * (ua.dot(ub) + ua.dot(n) * ub.dot(n));
        }
    }
    // each unordered pair appears twice in the ordered sum
    Ok(h + eps * (quartic + 0.5 * vel))
}

/// `H_RR = H_D − ε^{3/2} Σ_{α,β} (e_α e_β/6π) u_α·u̇_β`.
pub fn energy_rr(state: &PhaseState, accel: &[Vec3], sys: &ParticleSystem, eps: f64) -> Result<f64> {
    let hd = energy_darwin(state, sys, eps)?;
    let e = sys.charges();
    let du = weighted_sum(e, &state.u);
    let da = weighted_sum(e, accel);
    Ok(hd - eps_three_halves(eps) / (6.0 * PI) * du.dot(da))
}

fn weighted_sum(e: &[f64], v: &[Vec3]) -> Vec3 {
    e.iter().zip(v).fold(Vec3::ZERO, |acc, (e, v)| acc + *v * *e)
}

/// `(ε^{3/2}/6π)(Σ_α e_α u̇_α)²`, the rate at which `H_RR` decreases.
pub fn dissipation_rate(accel: &[Vec3], sys: &ParticleSystem, eps: f64) -> f64 {
    eps_three_halves(eps) / (6.0 * PI) * weighted_sum(sys.charges(), accel).norm_squared()
}

/// Total canonical momentum of the Darwin Lagrangian,
/// `Σ_α [m u + (ε/2) m* u² u + (ε/2) Σ_β (e_α e_β/4π|ξ|)(u_β + (u_β·n)n)]`.
pub fn canonical_momentum(state: &PhaseState, sys: &ParticleSystem, eps: f64) -> Result<Vec3> {
    let geom = check(state, sys)?;
    let e = sys.charges();
    let mut p = Vec3::ZERO;
    for (a, u) in state.u.iter().enumerate() {
        p += *u * (sys.masses()[a] + 0.5 * eps * sys.star_masses()[a] * u.norm_squared());
    }
    for a in 0..geom.n() {
        for b in (0..geom.n()).filter(|&b| b != a) {
            let d = geom.dist(a, b);
            let n = geom.xi(a, b) / d;
            let ub = state.u[b];
            p += (ub + n * ub.dot(n)) * (0.5 * eps * e[a] * e[b] / (4.0 * PI * d));
        }
    }
    Ok(p)
}

/// Energies and momentum at one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    pub t: f64,
    pub h_c: f64,
    pub h_d: f64,
    pub h_rr: f64,
    pub momentum: Vec3,
    pub dissipation_rate: f64,
}

pub fn energy_report(state: &PhaseState, accel: &[Vec3], sys: &ParticleSystem, eps: f64) -> Result<EnergyReport> {
    Ok(EnergyReport {
        t: state.t,
        h_c: energy_coulomb(state, sys)?,
        h_d: energy_darwin(state, sys, eps)?,
        h_rr: energy_rr(state, accel, sys, eps)?,
        momentum: canonical_momentum(state, sys, eps)?,
        dissipation_rate: dissipation_rate(accel, sys, eps),
    })
}

/// One report per stored sample, accelerations taken from the stored
/// right-hand side.
pub fn energy_series(traj: &Trajectory, sys: &ParticleSystem, eps: f64) -> Result<Vec<EnergyReport>> {
    (0..traj.len()).map(|i| energy_report(&traj.phase_state(i), &traj.accelerations(i), sys, eps)).collect()
}

/// Residual of `dH_RR/dt + (ε^{3/2}/6π)(Σ e u̇)² = 0` at interior samples.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityResidual {
    pub times: Vec<f64>,
    pub residuals: Vec<f64>,
    pub max_abs: f64,
}

/// Centered-difference check of the dissipation identity using every
/// `stride`-th neighbour of each sample. Times may be non-uniform; the
/// three-point derivative is second-order either way.
pub fn dissipation_identity_residual(
    traj: &Trajectory,
    sys: &ParticleSystem,
    eps: f64,
    stride: usize,
) -> Result<IdentityResidual> {
    let stride = stride.max(1);
    if traj.len() < 2 * stride + 1 {
        return Err(Error::TooFewPoints { needed: 2 * stride + 1, got: traj.len() });
    }
    let reports = energy_series(traj, sys, eps)?;
    let times = traj.times();
    let mut out_t = Vec::new();
    let mut out_r = Vec::new();
    let mut i = stride;
    while i + stride < traj.len() {
        let (t0, t1, t2) = (times[i - stride], times[i], times[i + stride]);
        let (h1, h2) = (t1 - t0, t2 - t1);
        let d = -h2 / (h1 * (h1 + h2)) * reports[i - stride].h_rr
            + (h2 - h1) / (h1 * h2) * reports[i].h_rr
            + h1 / (h2 * (h1 + h2)) * reports[i + stride].h_rr;
        out_t.push(t1);
        out_r.push(d + reports[i].dissipation_rate);
        i += stride;
    }
    let max_abs = out_r.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(IdentityResidual { times: out_t, residuals: out_r, max_abs })
}

/// Sup-norm gaps between two trajectories on a common grid.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ComparisonNorms {
    pub sup_dr: f64,
    pub sup_du: f64,
    pub sup_dudot: f64,
    pub sup_dh_d: f64,
    pub window: (f64, f64),
    pub samples: usize,
}

/// Resamples both trajectories on `samples` uniform points of `window`
/// (clipped to the common span) and takes sup-norms of the differences.
pub fn compare(
    a: &Trajectory,
    b: &Trajectory,
    window: Option<(f64, f64)>,
    samples: usize,
    sys: &ParticleSystem,
    eps: f64,
) -> Result<ComparisonNorms> {
    let (a0, a1) = a.span().ok_or(Error::TooFewPoints { needed: 2, got: a.len() })?;
    let (b0, b1) = b.span().ok_or(Error::TooFewPoints { needed: 2, got: b.len() })?;
    let (mut t0, mut t1) = (a0.max(b0), a1.min(b1));
    if let Some((w0, w1)) = window {
        t0 = t0.max(w0);
        t1 = t1.min(w1);
    }
    if !(t1 >= t0) {
        return Err(crate::error::invalid("trajectories have no common time window"));
    }
    let samples = samples.max(2);
    let mut norms = ComparisonNorms { window: (t0, t1), samples, ..Default::default() };
    for k in 0..samples {
        let t = if samples == 1 { t0 } else { t0 + (t1 - t0) * k as f64 / (samples - 1) as f64 };
        let (sa, aa) = a.phase_and_acceleration_at(t)?;
        let (sb, ab) = b.phase_and_acceleration_at(t)?;
        norms.sup_dr = norms.sup_dr.max(crate::vec3::max_abs_diff(&sa.r, &sb.r));
        norms.sup_du = norms.sup_du.max(crate::vec3::max_abs_diff(&sa.u, &sb.u));
        norms.sup_dudot = norms.sup_dudot.max(crate::vec3::max_abs_diff(&aa, &ab));
        let dh = energy_darwin(&sa, sys, eps)? - energy_darwin(&sb, sys, eps)?;
        norms.sup_dh_d = norms.sup_dh_d.max(dh.abs());
    }
    Ok(norms)
}

/// Least-squares fit `log error = slope · log ε + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceFit {
    pub eps: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_order(eps: &[f64], errors: &[f64]) -> Result<ConvergenceFit> {
    if eps.len() != errors.len() {
        return Err(Error::DimensionMismatch { expected: eps.len(), got: errors.len() });
    }
    if eps.len() < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: eps.len() });
    }
    if eps.iter().chain(errors).any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(crate::error::invalid("convergence fit needs positive finite values"));
    }
    let xs: Vec<f64> = eps.iter().map(|x| ln(*x)).collect();
    let ys: Vec<f64> = errors.iter().map(|x| ln(*x)).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if !(sxx > 0.0) {
        return Err(crate::error::invalid("convergence fit needs distinct ε values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    if !slope.is_finite() {
        return Err(Error::NonFinite("convergence slope"));
    }
    Ok(ConvergenceFit { eps: eps.to_vec(), errors: errors.to_vec(), slope, intercept, r_squared })
}

/// Relative drift `max_t |q(t) − q(0)| / |q(0)|` of a scalar series.
pub fn relative_drift(series: &[f64]) -> f64 {
    let Some(first) = series.first() else { return 0.0 };
    let scale = first.abs().max(f64::MIN_POSITIVE);
    series.iter().fold(0.0f64, |m, x| m.max((x - first).abs())) / scale
}

/// Relative drift of a vector series, measured against `scale`.
pub fn vector_drift(series: &[Vec3], scale: f64) -> f64 {
    let Some(first) = series.first() else { return 0.0 };
    series.iter().fold(0.0f64, |m, x| m.max((*x - *first).norm())) / scale.max(f64::MIN_POSITIVE)
}
