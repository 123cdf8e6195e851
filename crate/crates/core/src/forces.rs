//! Right-hand sides of the Coulomb, Darwin and reduced radiation-reaction
//! models on the Coulomb scale.
//!
//! The Darwin equations are implicit in the accelerations:
//! `M_α(u_α, ε) u̇_α = G_α(r, u, u̇, ε)` where `G_α` depends linearly on the
//! other particles' accelerations. Collecting that dependence on the left
//! gives one symmetric `3N × 3N` system `K u̇ = b`, solved by LU.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::math::{eps_three_halves, PI};
use crate::params::ParticleSystem;
use crate::state::PhaseState;
use crate::vec3::Vec3;

/// Condition estimate above which the acceleration system is refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Effective second-order models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Model {
    Coulomb,
    Darwin,
    RrReduced,
}

impl Model {
    pub const ALL: [Model; 3] = [Model::Coulomb, Model::Darwin, Model::RrReduced];

    pub fn name(self) -> &'static str {
        match self {
            Model::Coulomb => "coulomb",
            Model::Darwin => "darwin",
            Model::RrReduced => "rr_reduced",
        }
    }
}

/// Separation vectors `ξ_αβ = r_α − r_β` for all ordered pairs.
#[derive(Debug, Clone)]
pub struct PairGeometry {
    n: usize,
    xi: Vec<Vec3>,
    dist: Vec<f64>,
}

impl PairGeometry {
    pub fn new(r: &[Vec3]) -> Result<Self> {
        let n = r.len();
        let mut xi = vec![Vec3::ZERO; n * n];
        let mut dist = vec![0.0; n * n];
        for a in 0..n {
            for b in a + 1..n {
                let d = r[a] - r[b];
                let len = d.norm();
                if !(len > 0.0) {
                    return Err(if len.is_nan() {
                        Error::NonFinite("positions")
                    } else {
                        Error::CoincidentParticles(a, b)
                    });
                }
                xi[a * n + b] = d;
                xi[b * n + a] = -d;
                dist[a * n + b] = len;
                dist[b * n + a] = len;
            }
        }
        Ok(PairGeometry { n, xi, dist })
    }

    /// Geometry from an antisymmetric separation map, e.g. a regularized one.
    /// `sep(a, b)` is queried for `a < b` only.
    pub fn from_separations(n: usize, mut sep: impl FnMut(usize, usize) -> Result<Vec3>) -> Result<Self> {
        let mut xi = vec![Vec3::ZERO; n * n];
        let mut dist = vec![0.0; n * n];
        for a in 0..n {
            for b in a + 1..n {
                let d = sep(a, b)?;
                let len = d.norm();
                if !(len > 0.0) {
                    return Err(Error::CoincidentParticles(a, b));
                }
                xi[a * n + b] = d;
                xi[b * n + a] = -d;
                dist[a * n + b] = len;
                dist[b * n + a] = len;
            }
        }
        Ok(PairGeometry { n, xi, dist })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn xi(&self, a: usize, b: usize) -> Vec3 {
        self.xi[a * self.n + b]
    }

    #[inline]
    pub fn dist(&self, a: usize, b: usize) -> f64 {
        self.dist[a * self.n + b]
    }
}

fn check_sizes(state: &PhaseState, sys: &ParticleSystem) -> Result<()> {
    if state.n() != sys.n() {
        return Err(Error::DimensionMismatch { expected: sys.n(), got: state.n() });
    }
    Ok(())
}

/// Coulomb forces `Σ_β (e_α e_β/4π) ξ_αβ/|ξ_αβ|³`.
pub fn coulomb_forces(geom: &PairGeometry, sys: &ParticleSystem) -> Vec<Vec3> {
    let e = sys.charges();
    (0..geom.n())
        .map(|a| {
            let mut f = Vec3::ZERO;
            for b in (0..geom.n()).filter(|&b| b != a) {
                let d = geom.dist(a, b);
                f += (geom.xi(a, b) / (d * d * d)) * e[b];
            }
            f * (e[a] / (4.0 * PI))
        })
        .collect()
}

/// Coulomb accelerations.
pub fn coulomb_rhs(state: &PhaseState, sys: &ParticleSystem) -> Result<Vec<Vec3>> {
    check_sizes(state, sys)?;
    let geom = PairGeometry::new(&state.r)?;
    Ok(coulomb_forces(&geom, sys).into_iter().zip(sys.masses()).map(|(f, m)| f / *m).collect())
}

/// `M_α(u, ε) z = (m_α + (ε/2) m*_α u²) z + ε m*_α (u·z) u`.
pub fn mass_matrix_apply(sys: &ParticleSystem, alpha: usize, u: Vec3, eps: f64, z: Vec3) -> Vec3 {
    let m = sys.masses()[alpha];
    let ms = sys.star_masses()[alpha];
    z * (m + 0.5 * eps * ms * u.norm_squared()) + u * (eps * ms * u.dot(z))
}

/// Velocity- and acceleration-dependent part of `G_α`, without the factor
/// `ε`: `G_α = (Coulomb force) + ε · g_velocity_terms`.
pub fn g_velocity_terms(geom: &PairGeometry, u: &[Vec3], udot: &[Vec3], sys: &ParticleSystem) -> Vec<Vec3> {
    let e = sys.charges();
    let n = geom.n();
    (0..n)
        .map(|a| {
            let mut g = Vec3::ZERO;
            for b in (0..n).filter(|&b| b != a) {
                let x = geom.xi(a, b);
                let d = geom.dist(a, b);
                let d3 = d * d * d;
                let ub = u[b];
                let xu = ub.dot(x);
                let t = -(udot[b] / (2.0 * d)) - x * (udot[b].dot(x) / (2.0 * d3))
                    + x * (ub.norm_squared() / (2.0 * d3))
                    - x * (1.5 * xu * xu / (d3 * d * d))
                    - x * (u[a].dot(ub) / d3)
                    + ub * (u[a].dot(x) / d3);
                g += t * e[b];
            }
            g * (e[a] / (4.0 * PI))
        })
        .collect()
}

/// Right-hand side `G_α(r, u, u̇, ε)` of the implicit Darwin system for all
/// particles, given a guess `udot` for the accelerations.
pub fn g_forces(geom: &PairGeometry, u: &[Vec3], udot: &[Vec3], sys: &ParticleSystem, eps: f64) -> Vec<Vec3> {
    let c = coulomb_forces(geom, sys);
    if eps == 0.0 {
        return c;
    }
    c.into_iter().zip(g_velocity_terms(geom, u, udot, sys)).map(|(c, v)| c + v * eps).collect()
}

/// [`g_forces`] for a phase state.
pub fn g_alpha(state: &PhaseState, udot: &[Vec3], sys: &ParticleSystem, eps: f64) -> Result<Vec<Vec3>> {
    check_sizes(state, sys)?;
    if udot.len() != sys.n() {
        return Err(Error::DimensionMismatch { expected: sys.n(), got: udot.len() });
    }
    let geom = PairGeometry::new(&state.r)?;
    Ok(g_forces(&geom, &state.u, udot, sys, eps))
}

/// Dense form `K u̇ = b` of the Darwin system.
#[derive(Debug, Clone)]
pub struct AccelerationSolve {
    pub matrix: DenseMatrix,
    pub rhs: Vec<f64>,
}

impl AccelerationSolve {
    /// Diagonal blocks `M_α(u_α, ε)`; off-diagonal blocks
    /// `(e_α e_β/4π) ε [I/(2|ξ|) + ξξᵀ/(2|ξ|³)]`; right-hand side
    /// `G_α` evaluated at zero acceleration.
    pub fn assemble(geom: &PairGeometry, u: &[Vec3], sys: &ParticleSystem, eps: f64) -> Self {
        let n = geom.n();
        let e = sys.charges();
        let mut k = DenseMatrix::zeros(3 * n, 3 * n);
        for a in 0..n {
            let m = sys.masses()[a];
            let ms = sys.star_masses()[a];
            let ua = u[a];
            let diag = m + 0.5 * eps * ms * ua.norm_squared();
            for i in 0..3 {
                for j in 0..3 {
                    let delta = if i == j { diag } else { 0.0 };
                    k[(3 * a + i, 3 * a + j)] = delta + eps * ms * (ua[i] * ua[j]);
                }
            }
            for b in (0..n).filter(|&b| b != a) {
                let x = geom.xi(a, b);
                let d = geom.dist(a, b);
                let c = e[a] * e[b] / (4.0 * PI) * eps;
                for i in 0..3 {
                    for j in 0..3 {
                        let delta = if i == j { 1.0 / (2.0 * d) } else { 0.0 };
                        k[(3 * a + i, 3 * b + j)] = c * (delta + x[i] * x[j] / (2.0 * d * d * d));
                    }
                }
            }
        }
        let zero = vec![Vec3::ZERO; n];
        let g0 = g_forces(geom, u, &zero, sys, eps);
        let mut rhs = vec![0.0; 3 * n];
        crate::vec3::flatten(&g0, &mut rhs);
        AccelerationSolve { matrix: k, rhs }
    }

    /// Adds explicit forces to the right-hand side.
    pub fn add_forces(&mut self, f: &[Vec3]) {
        for (a, v) in f.iter().enumerate() {
            for i in 0..3 {
                self.rhs[3 * a + i] += v[i];
            }
        }
    }

    pub fn solve(&self) -> Result<Vec<Vec3>> {
        let x = linalg::solve_checked(&self.matrix, &self.rhs, MAX_CONDITION)?;
        Ok(crate::vec3::unflatten(&x))
    }
}

/// Darwin accelerations by one dense solve.
pub fn darwin_rhs(state: &PhaseState, sys: &ParticleSystem, eps: f64) -> Result<Vec<Vec3>> {
    check_sizes(state, sys)?;
    let geom = PairGeometry::new(&state.r)?;
    AccelerationSolve::assemble(&geom, &state.u, sys, eps).solve()
}

/// Predicted `Σ_β e_β ü_β` from the leading-order dynamics:
/// `½ Σ_{β≠β'} (e_β e_β'/4π)(e_β/m_β − e_β'/m_β')[(u_β − u_β')/|ξ|³ − 3 ξ·(u_β − u_β') ξ/|ξ|⁵]`.
pub fn dipole_sum(geom: &PairGeometry, u: &[Vec3], sys: &ParticleSystem) -> Vec3 {
    let e = sys.charges();
    let n = geom.n();
    let mut total = Vec3::ZERO;
    for b in 0..n {
        for c in (0..n).filter(|&c| c != b) {
            let ratio_gap = sys.charge_to_mass(b) - sys.charge_to_mass(c);
            if ratio_gap == 0.0 {
                continue;
            }
            let x = geom.xi(b, c);
            let d = geom.dist(b, c);
            let d3 = d * d * d;
            let du = u[b] - u[c];
            let bracket = du / d3 - x * (3.0 * x.dot(du) / (d3 * d * d));
            total += bracket * (e[b] * e[c] / (4.0 * PI) * ratio_gap);
        }
    }
    total * 0.5
}

/// Dissipative force `ε^{3/2} (e_α/6π) Σ_β e_β ü_β` of the reduced
/// radiation-reaction model, with the dipole sum from [`dipole_sum`].
pub fn radiation_force(geom: &PairGeometry, u: &[Vec3], sys: &ParticleSystem, eps: f64) -> Vec<Vec3> {
    let d = dipole_sum(geom, u, sys) * (eps_three_halves(eps) / (6.0 * PI));
    sys.charges().iter().map(|ea| d * *ea).collect()
}

/// Reduced radiation-reaction accelerations: the Darwin system with
/// [`radiation_force`] added to the right-hand side.
pub fn rr_reduced_rhs(state: &PhaseState, sys: &ParticleSystem, eps: f64) -> Result<Vec<Vec3>> {
    check_sizes(state, sys)?;
    let geom = PairGeometry::new(&state.r)?;
    let mut solve = AccelerationSolve::assemble(&geom, &state.u, sys, eps);
    solve.add_forces(&radiation_force(&geom, &state.u, sys, eps));
    solve.solve()
}

/// Accelerations of the chosen model.
pub fn accelerations(model: Model, state: &PhaseState, sys: &ParticleSystem, eps: f64) -> Result<Vec<Vec3>> {
    match model {
        Model::Coulomb => coulomb_rhs(state, sys),
        Model::Darwin => darwin_rhs(state, sys, eps),
        Model::RrReduced => rr_reduced_rhs(state, sys, eps),
    }
}
