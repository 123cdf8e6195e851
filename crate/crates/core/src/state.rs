//! Dynamical states.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::vec3::Vec3;

/// Positions and velocities of all particles at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub t: f64,
    pub r: Vec<Vec3>,
    pub u: Vec<Vec3>,
}

impl PhaseState {
    pub fn new(t: f64, r: Vec<Vec3>, u: Vec<Vec3>) -> Result<Self> {
        if r.len() != u.len() {
            return Err(Error::DimensionMismatch { expected: r.len(), got: u.len() });
        }
        Ok(PhaseState { t, r, u })
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.r.iter().chain(&self.u).all(|v| v.is_finite())
    }

    /// `[r_1, …, r_N, u_1, …, u_N]` as `6N` scalars.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(6 * self.n());
        for v in self.r.iter().chain(&self.u) {
            out.extend_from_slice(&v.to_array());
        }
        out
    }

    pub fn from_flat(t: f64, xs: &[f64]) -> Self {
        let n = xs.len() / 6;
        let r = crate::vec3::unflatten(&xs[..3 * n]);
        let u = crate::vec3::unflatten(&xs[3 * n..6 * n]);
        PhaseState { t, r, u }
    }

    /// Index pair of the closest particles and their distance.
    pub fn min_separation(&self) -> Option<(usize, usize, f64)> {
        pair_extremum(&self.r, |a, b| a < b)
    }

    pub fn max_separation(&self) -> Option<(usize, usize, f64)> {
        pair_extremum(&self.r, |a, b| a > b)
    }
}

/// State of the third-order system: slow variables plus the fast 3-vector `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct DaeState {
    pub t: f64,
    pub r: Vec<Vec3>,
    pub u: Vec<Vec3>,
    pub y: Vec3,
}

impl DaeState {
    pub fn new(t: f64, r: Vec<Vec3>, u: Vec<Vec3>, y: Vec3) -> Result<Self> {
        if r.len() != u.len() {
            return Err(Error::DimensionMismatch { expected: r.len(), got: u.len() });
        }
        Ok(DaeState { t, r, u, y })
    }

    pub fn from_phase(s: &PhaseState, y: Vec3) -> Self {
        DaeState { t: s.t, r: s.r.clone(), u: s.u.clone(), y }
    }

    pub fn phase(&self) -> PhaseState {
        PhaseState { t: self.t, r: self.r.clone(), u: self.u.clone() }
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    /// `[r, u, y]` as `6N + 3` scalars.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(6 * self.n() + 3);
        for v in self.r.iter().chain(&self.u) {
            out.extend_from_slice(&v.to_array());
        }
        out.extend_from_slice(&self.y.to_array());
        out
    }

    pub fn from_flat(t: f64, xs: &[f64]) -> Self {
        let n = (xs.len() - 3) / 6;
        let r = crate::vec3::unflatten(&xs[..3 * n]);
        let u = crate::vec3::unflatten(&xs[3 * n..6 * n]);
        let y = Vec3::new(xs[6 * n], xs[6 * n + 1], xs[6 * n + 2]);
        DaeState { t, r, u, y }
    }
}

fn pair_extremum(r: &[Vec3], better: impl Fn(f64, f64) -> bool) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for a in 0..r.len() {
        for b in a + 1..r.len() {
            let d = (r[a] - r[b]).norm();
            if best.is_none_or(|(_, _, cur)| better(d, cur)) {
                best = Some((a, b, d));
            }
        }
    }
    best
}
