//! The third-order system `M u̇ − G = ε^{3/2} P ü` as a singularly perturbed
//! index-1 DAE.
//!
//! `P` couples all particles through the total dipole: `(Pz)_α = (e_α/6π) Σ_β e_β z_β`.
//! With the change of acceleration variables `u̇ = A(y, η)` the system splits
//! into `3N − 3` algebraic equations for the slaved components `η` and one
//! fast equation `ε^{3/2} ẏ = Φ₁(r, u, y)` for `y = e⁻² Σ e_α u̇_α`.
//! The fast equation has a repulsive slow manifold `y = h_ε(r, u)` close to
//! `h₀(r)`; physical (runaway-free) solutions live on it.
//!
//! All vectors indexed by particle are `N`-long lists of 3-vectors; `A` acts
//! as the same scalar `N × N` matrix on every spatial component.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::forces::{self, PairGeometry};
use crate::linalg::{self, DenseMatrix, Lu};
use crate::math::{abs, eps_three_halves, PI};
use crate::params::ParticleSystem;
use crate::state::{DaeState, PhaseState};
use crate::vec3::Vec3;

/// `(Pz)_α = (e_α/6π) Σ_β e_β z_β`.
pub fn apply_p(e: &[f64], z: &[Vec3]) -> Vec<Vec3> {
    let s = dipole(e, z) / (6.0 * PI);
    e.iter().map(|ea| s * *ea).collect()
}

fn dipole(e: &[f64], z: &[Vec3]) -> Vec3 {
    e.iter().zip(z).fold(Vec3::ZERO, |acc, (ea, za)| acc + *za * *ea)
}

/// `(Az)_α = e_α z₁ + w_α` with `w₁ = e₂z₂`, `w_α = e_{α+1}z_{α+1} − e_{α−1}z_α`
/// and `w_N = −e_{N−1}z_N`. The columns of `A` are eigenvectors of `P`.
pub fn apply_a(e: &[f64], z: &[Vec3]) -> Vec<Vec3> {
    let n = e.len();
    assert_eq!(z.len(), n);
    (0..n)
        .map(|a| {
            let mut v = z[0] * e[a];
            if a + 1 < n {
                v += z[a + 1] * e[a + 1];
            }
            if a > 0 {
                v -= z[a] * e[a - 1];
            }
            v
        })
        .collect()
}

/// `Aᵗz = (Σ e_α z_α, e₂z₁ − e₁z₂, …, e_N z_{N−1} − e_{N−1} z_N)`.
pub fn apply_at(e: &[f64], z: &[Vec3]) -> Vec<Vec3> {
    let n = e.len();
    assert_eq!(z.len(), n);
    let mut out = Vec::with_capacity(n);
    out.push(dipole(e, z));
    for b in 1..n {
        out.push(z[b - 1] * e[b] - z[b] * e[b - 1]);
    }
    out
}

/// `A` as a scalar `N × N` matrix.
pub fn a_matrix(e: &[f64]) -> DenseMatrix {
    let n = e.len();
    let mut m = DenseMatrix::zeros(n, n);
    for a in 0..n {
        m[(a, 0)] += e[a];
        if a + 1 < n {
            m[(a, a + 1)] += e[a + 1];
        }
        if a > 0 {
            m[(a, a)] -= e[a - 1];
        }
    }
    m
}

fn check_charges(e: &[f64]) -> Result<()> {
    match e.iter().position(|x| *x == 0.0) {
        Some(i) => Err(Error::ZeroCharge(i)),
        None => Ok(()),
    }
}

/// Solves `Ax = z` by LU of the scalar matrix.
pub fn solve_a(e: &[f64], z: &[Vec3]) -> Result<Vec<Vec3>> {
    check_charges(e)?;
    if z.len() != e.len() {
        return Err(Error::DimensionMismatch { expected: e.len(), got: z.len() });
    }
    let lu = a_matrix(e).lu()?;
    let mut out = vec![Vec3::ZERO; e.len()];
    for i in 0..3 {
        let b: Vec<f64> = z.iter().map(|v| v[i]).collect();
        for (o, x) in out.iter_mut().zip(lu.solve(&b)?) {
            o[i] = x;
        }
    }
    Ok(out)
}

fn check_pair(e: &[f64], m: &[f64]) -> Result<()> {
    if e.len() != m.len() {
        return Err(Error::DimensionMismatch { expected: e.len(), got: m.len() });
    }
    if e.len() < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: e.len() });
    }
    Ok(())
}

/// Tridiagonal `(N−1) × (N−1)` core of the constraint matrix: diagonal
/// `e_i² m_{i−1} + e_{i−1}² m_i`, off-diagonal `−e_{i−1} e_{i+1} m_i`
/// (rows `i = 2..N`).
pub fn m0_scalar(e: &[f64], m: &[f64]) -> Result<DenseMatrix> {
    check_pair(e, m)?;
    let n = e.len();
    let mut a = DenseMatrix::zeros(n - 1, n - 1);
    for j in 0..n - 1 {
        let i = j + 1;
        a[(j, j)] = e[i] * e[i] * m[i - 1] + e[i - 1] * e[i - 1] * m[i];
        if j + 1 < n - 1 {
            let off = -e[i - 1] * e[i + 1] * m[i];
            a[(j, j + 1)] = off;
            a[(j + 1, j)] = off;
        }
    }
    Ok(a)
}

/// The `(3N−3) × (3N−3)` matrix `M⁽⁰⁾ = A_N ⊗ I₃` with unknowns ordered
/// particle-major (`η₂ₓ, η₂ᵧ, η₂_z, η₃ₓ, …`).
pub fn m0_matrix(e: &[f64], m: &[f64]) -> Result<DenseMatrix> {
    let a = m0_scalar(e, m)?;
    let k = a.rows();
    Ok(DenseMatrix::from_fn(3 * k, 3 * k, |p, q| if p % 3 == q % 3 { a[(p / 3, q / 3)] } else { 0.0 }))
}

/// `det A_N = (Π_{j=2}^{N−1} e_j²)(Σ_j e_j² Π_{i≠j} m_i)`.
pub fn m0_scalar_det_closed_form(e: &[f64], m: &[f64]) -> Result<f64> {
    check_pair(e, m)?;
    let n = e.len();
    let inner: f64 = e[1..n - 1].iter().map(|x| x * x).product();
    let sum: f64 = (0..n).map(|j| e[j] * e[j] * (0..n).filter(|&i| i != j).map(|i| m[i]).product::<f64>()).sum();
    Ok(inner * sum)
}

/// `det M⁽⁰⁾ = (det A_N)³`.
pub fn m0_det_closed_form(e: &[f64], m: &[f64]) -> Result<f64> {
    let d = m0_scalar_det_closed_form(e, m)?;
    Ok(d * d * d)
}

/// Growth rate (in units of `ε^{-3/2}`) of the fast variable off the slow
/// manifold: the Jacobian of `y ↦ Φ₁` at `ε = 0` with the slaved
/// accelerations re-solved, `6π / Σ_α (e_α²/m_α)` times the identity.
pub fn fast_eigenvalue(sys: &ParticleSystem) -> f64 {
    let s: f64 = sys.charges().iter().zip(sys.masses()).map(|(e, m)| e * e / m).sum();
    6.0 * PI / s
}

/// `6π e⁻⁴ Σ_α e_α² m_α`: the derivative of `Φ₁` in `y` at `ε = 0` with the
/// slaved accelerations held fixed. It bounds [`fast_eigenvalue`] from above
/// and coincides with it when all masses are equal.
pub fn fast_eigenvalue_bound(sys: &ParticleSystem) -> f64 {
    let e2 = sys.e_squared_total();
    let s: f64 = sys.charges().iter().zip(sys.masses()).map(|(e, m)| e * e * m).sum();
    6.0 * PI * s / (e2 * e2)
}

/// Predicted `Σ_β e_β ü_β` along leading-order dynamics; see
/// [`forces::dipole_sum`].
pub fn dipole_sum_formula(r: &[Vec3], u: &[Vec3], sys: &ParticleSystem) -> Result<Vec3> {
    let geom = PairGeometry::new(r)?;
    Ok(forces::dipole_sum(&geom, u, sys))
}

/// Quintic smoothstep `6t⁵ − 15t⁴ + 10t³` clamped to `[0, 1]`; it has
/// vanishing first and second derivatives at both ends.
fn smoothstep(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
    }
}

fn smoothstep_derivative(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        30.0 * t * t * (1.0 - t) * (1.0 - t)
    }
}

/// Cutoffs that make the DAE globally defined. Velocities are faded out on
/// `[3C_v, 4C_v]`; separations are clamped smoothly into `[C_*/4, 4C^*]`
/// and left untouched on the trust region `[C_*/3, 3C^*]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    velocity_scale: f64,
    inner_scale: f64,
    outer_scale: f64,
}

impl Regularization {
    pub fn new(velocity_scale: f64, inner_scale: f64, outer_scale: f64) -> Result<Self> {
        if !(velocity_scale > 0.0) {
            return Err(invalid("velocity band constant must be positive"));
        }
        if !(inner_scale > 0.0) {
            return Err(invalid("inner separation band constant must be positive"));
        }
        if !(outer_scale > 0.0) || !(inner_scale / 3.0 < 3.0 * outer_scale) {
            return Err(invalid("separation bands must satisfy C_*/4 < C_*/3 < 3C^* < 4C^*"));
        }
        Ok(Regularization { velocity_scale, inner_scale, outer_scale })
    }

    /// No cutoffs at all.
    pub fn unbounded() -> Self {
        Regularization { velocity_scale: f64::INFINITY, inner_scale: 0.0, outer_scale: f64::INFINITY }
    }

    /// `C_v = 2 max|u|` (at least 1), `C_* = ½ min separation`,
    /// `C^* = 2 max separation`.
    pub fn from_state(s: &PhaseState) -> Result<Self> {
        let vmax = s.u.iter().map(|u| u.norm()).fold(0.0, f64::max);
        let cv = (2.0 * vmax).max(1.0);
        match (s.min_separation(), s.max_separation()) {
            (Some((a, b, dmin)), Some((_, _, dmax))) => {
                if !(dmin > 0.0) {
                    return Err(Error::CoincidentParticles(a, b));
                }
                Self::new(cv, 0.5 * dmin, 2.0 * dmax)
            }
            _ => Ok(Regularization { velocity_scale: cv, ..Self::unbounded() }),
        }
    }

    pub fn velocity_scale(&self) -> f64 {
        self.velocity_scale
    }

    pub fn inner_scale(&self) -> f64 {
        self.inner_scale
    }

    pub fn outer_scale(&self) -> f64 {
        self.outer_scale
    }

    /// `χ₁(s) = 1 − S((s − 3C_v)/C_v)`.
    pub fn velocity_cutoff(&self, s: f64) -> f64 {
        let c = self.velocity_scale;
        if s <= 3.0 * c {
            1.0
        } else {
            1.0 - smoothstep((s - 3.0 * c) / c)
        }
    }

    /// Regularized length `χ₂(s)·s`.
    pub fn separation_length(&self, s: f64) -> f64 {
        self.separation_length_and_derivative(s).0
    }

    /// Regularized length and its derivative in `s`.
    pub fn separation_length_and_derivative(&self, s: f64) -> (f64, f64) {
        let lo = self.inner_scale / 4.0;
        let lo_end = self.inner_scale / 3.0;
        let hi_start = 3.0 * self.outer_scale;
        let hi = 4.0 * self.outer_scale;
        if s <= lo {
            (lo, 0.0)
        } else if s < lo_end {
            let w = lo_end - lo;
            let t = (s - lo) / w;
            (lo + (s - lo) * smoothstep(t), smoothstep(t) + (s - lo) * smoothstep_derivative(t) / w)
        } else if s <= hi_start {
            (s, 1.0)
        } else if s < hi {
            let w = self.outer_scale;
            let t = (s - hi_start) / w;
            (s + (hi - s) * smoothstep(t), 1.0 - smoothstep(t) + (hi - s) * smoothstep_derivative(t) / w)
        } else {
            (hi, 0.0)
        }
    }

    pub fn regularize_velocity(&self, u: Vec3) -> Vec3 {
        u * self.velocity_cutoff(u.norm())
    }

    /// `ξ_reg = χ₂(|ξ|) ξ`; the direction of an exactly vanishing separation
    /// is undefined.
    pub fn regularize_separation(&self, xi: Vec3) -> Option<Vec3> {
        let s = xi.norm();
        if !(s > 0.0) {
            return None;
        }
        Some(xi * (self.separation_length(s) / s))
    }

    /// True when every velocity and separation lies where both cutoffs are
    /// the identity.
    pub fn in_trust_region(&self, s: &PhaseState) -> bool {
        let v_ok = s.u.iter().all(|u| u.norm() <= 3.0 * self.velocity_scale);
        let n = s.n();
        let mut d_ok = true;
        for a in 0..n {
            for b in a + 1..n {
                let d = (s.r[a] - s.r[b]).norm();
                d_ok &= d >= self.inner_scale / 3.0 && d <= 3.0 * self.outer_scale;
            }
        }
        v_ok && d_ok
    }
}

/// Regularized velocities and separation geometry.
pub fn regularize(state: &PhaseState, reg: &Regularization) -> Result<(Vec<Vec3>, PairGeometry)> {
    let u = state.u.iter().map(|u| reg.regularize_velocity(*u)).collect();
    let geom = regularized_geometry(&state.r, reg)?;
    Ok((u, geom))
}

fn regularized_geometry(r: &[Vec3], reg: &Regularization) -> Result<PairGeometry> {
    PairGeometry::from_separations(r.len(), |a, b| {
        reg.regularize_separation(r[a] - r[b]).ok_or(Error::CoincidentParticles(a, b))
    })
}

/// Everything about the DAE at fixed slow state `(r, u)`. `Φ` and `η` are
/// affine in `y`, so one factorization serves every `y`.
#[derive(Debug, Clone)]
pub struct SlowFrame {
    geom: PairGeometry,
    u: Vec<Vec3>,
    ureg: Vec<Vec3>,
    lu: Lu,
}

/// Outcome of [`FastSlowSystem::manifold_init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldInit {
    pub y: Vec3,
    /// Refinement levels actually applied.
    pub levels: usize,
    /// Set when the refinement diverged and `h₀` was returned instead.
    pub fell_back: bool,
}

/// Time derivatives along the DAE.
#[derive(Debug, Clone)]
pub struct DaeRates {
    pub velocities: Vec<Vec3>,
    pub accelerations: Vec<Vec3>,
    pub y_dot: Vec3,
    /// `max_α≥2 |(Aᵗz)_α|`, relative to the size of the terms in `z`.
    pub constraint_residual: f64,
}

/// The regularized third-order system for fixed charges, masses and `ε`.
#[derive(Debug, Clone)]
pub struct FastSlowSystem {
    sys: ParticleSystem,
    eps: f64,
    reg: Regularization,
}

impl FastSlowSystem {
    pub fn new(sys: ParticleSystem, eps: f64, reg: Regularization) -> Result<Self> {
        check_charges(sys.charges())?;
        if sys.n() < 2 {
            return Err(Error::TooFewPoints { needed: 2, got: sys.n() });
        }
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::OutOfRange { value: eps, lo: 0.0, hi: 1.0 });
        }
        Ok(FastSlowSystem { sys, eps, reg })
    }

    pub fn system(&self) -> &ParticleSystem {
        &self.sys
    }

    pub fn epsilon(&self) -> f64 {
        self.eps
    }

    pub fn regularization(&self) -> &Regularization {
        &self.reg
    }

    pub fn with_epsilon(&self, eps: f64) -> Result<Self> {
        Self::new(self.sys.clone(), eps, self.reg)
    }

    fn e4(&self) -> f64 {
        let e2 = self.sys.e_squared_total();
        e2 * e2
    }

    /// `h₀(r) = (1/4πe²) Σ_{α<β} e_α e_β (e_α/m_α − e_β/m_β) ζ_αβ/|ζ_αβ|³`
    /// with regularized separations `ζ`.
    pub fn h0(&self, r: &[Vec3]) -> Result<Vec3> {
        let geom = regularized_geometry(r, &self.reg)?;
        Ok(self.h0_geom(&geom))
    }

    fn h0_geom(&self, geom: &PairGeometry) -> Vec3 {
        let e = self.sys.charges();
        let n = geom.n();
        let mut h = Vec3::ZERO;
        for a in 0..n {
            for b in a + 1..n {
                let c = e[a] * e[b] * (self.sys.charge_to_mass(a) - self.sys.charge_to_mass(b));
                let d = geom.dist(a, b);
                h += geom.xi(a, b) * (c / (d * d * d));
            }
        }
        h / (4.0 * PI * self.sys.e_squared_total())
    }

    /// `d/dt h₀(r(t))` for `ṙ = u`, including the derivative of the
    /// separation regularization.
    pub fn h0_time_derivative(&self, r: &[Vec3], u: &[Vec3]) -> Result<Vec3> {
        let e = self.sys.charges();
        let n = r.len();
        let mut h = Vec3::ZERO;
        for a in 0..n {
            for b in a + 1..n {
                let xi = r[a] - r[b];
                let s = xi.norm();
                if !(s > 0.0) {
                    return Err(Error::CoincidentParticles(a, b));
                }
                let xi_dot = u[a] - u[b];
                let nrm = xi / s;
                let s_dot = nrm.dot(xi_dot);
                let n_dot = (xi_dot - nrm * s_dot) / s;
                let (g, dg) = self.reg.separation_length_and_derivative(s);
                let zeta = nrm * g;
                let zeta_dot = nrm * (dg * s_dot) + n_dot * g;
                let g3 = g * g * g;
                let d = zeta_dot / g3 - zeta * (3.0 * zeta.dot(zeta_dot) / (g3 * g * g));
                let c = e[a] * e[b] * (self.sys.charge_to_mass(a) - self.sys.charge_to_mass(b));
                h += d * c;
            }
        }
        Ok(h / (4.0 * PI * self.sys.e_squared_total()))
    }

    /// Regularizes `(r, u)` and factors the constraint matrix
    /// `M⁽⁰⁾ + εM⁽²⁾(r, u)`.
    pub fn frame(&self, r: &[Vec3], u: &[Vec3]) -> Result<SlowFrame> {
        if r.len() != self.sys.n() || u.len() != self.sys.n() {
            return Err(Error::DimensionMismatch { expected: self.sys.n(), got: r.len().min(u.len()) });
        }
        let geom = regularized_geometry(r, &self.reg)?;
        let ureg: Vec<Vec3> = u.iter().map(|v| self.reg.regularize_velocity(*v)).collect();
        let mut mat = m0_matrix(self.sys.charges(), self.sys.masses())?;
        if self.eps != 0.0 {
            let m2 = self.m2_matrix(&geom, &ureg);
            for p in 0..mat.rows() {
                for q in 0..mat.cols() {
                    mat[(p, q)] += self.eps * m2[(p, q)];
                }
            }
        }
        let lu = mat.lu()?;
        let cond = lu.condition_estimate();
        if !(cond <= forces::MAX_CONDITION) {
            return Err(Error::SingularSystem { condition: cond });
        }
        Ok(SlowFrame { geom, u: u.to_vec(), ureg, lu })
    }

    /// `M⁽²⁾` column by column: for `v = A(0, η)`,
    /// `(M⁽²⁾η)_α = e_α M⁽²⁾_{α−1} − e_{α−1} M⁽²⁾_α + e_{α−1} G⁽²⁾_α − e_α G⁽²⁾_{α−1}`
    /// with `M⁽²⁾_α = ½m*_α|ũ_α|² v_α + m*_α (ũ_α·v_α) ũ_α` and `G⁽²⁾` the
    /// acceleration terms of `G`.
    fn m2_matrix(&self, geom: &PairGeometry, ureg: &[Vec3]) -> DenseMatrix {
        let n = self.sys.n();
        let e = self.sys.charges();
        let ms = self.sys.star_masses();
        let k = 3 * (n - 1);
        let zero = vec![Vec3::ZERO; n];
        let mut out = DenseMatrix::zeros(k, k);
        for col in 0..k {
            let mut w = vec![Vec3::ZERO; n];
            w[1 + col / 3][col % 3] = 1.0;
            let v = apply_a(e, &w);
            let m2: Vec<Vec3> = (0..n)
                .map(|a| v[a] * (0.5 * ms[a] * ureg[a].norm_squared()) + ureg[a] * (ms[a] * ureg[a].dot(v[a])))
                .collect();
            let g2 = forces::g_velocity_terms(geom, &zero, &v, &self.sys);
            for a in 1..n {
                let row = m2[a - 1] * e[a] - m2[a] * e[a - 1] + g2[a] * e[a - 1] - g2[a - 1] * e[a];
                for i in 0..3 {
                    out[(3 * (a - 1) + i, col)] = row[i];
                }
            }
        }
        out
    }

    /// `R(r, u, y, ε)`: the `η`-independent part of the constraint rows,
    /// `e_α G⁽⁰⁾_{α−1} − e_{α−1} G⁽⁰⁾_α + e_{α−1} M⁽¹⁾_α − e_α M⁽¹⁾_{α−1}
    ///  + ε (e_α G⁽¹⁾_{α−1} − e_{α−1} G⁽¹⁾_α)` with `M⁽¹⁾_α = M_α(ũ_α, ε) e_α y`.
    fn constraint_rhs(&self, f: &SlowFrame, y: Vec3) -> Vec<f64> {
        let n = self.sys.n();
        let e = self.sys.charges();
        let g0 = forces::coulomb_forces(&f.geom, &self.sys);
        let a1y: Vec<Vec3> = e.iter().map(|ea| y * *ea).collect();
        let m1: Vec<Vec3> =
            (0..n).map(|a| forces::mass_matrix_apply(&self.sys, a, f.ureg[a], self.eps, a1y[a])).collect();
        let g1 = forces::g_velocity_terms(&f.geom, &f.ureg, &a1y, &self.sys);
        let mut rhs = vec![0.0; 3 * (n - 1)];
        for a in 1..n {
            let row = g0[a - 1] * e[a] - g0[a] * e[a - 1] + m1[a] * e[a - 1] - m1[a - 1] * e[a]
                + (g1[a - 1] * e[a] - g1[a] * e[a - 1]) * self.eps;
            for i in 0..3 {
                rhs[3 * (a - 1) + i] = row[i];
            }
        }
        rhs
    }

    /// Slaved acceleration components `η = (w₂, …, w_N)` for a frame.
    pub fn eta_in_frame(&self, f: &SlowFrame, y: Vec3) -> Result<Vec<Vec3>> {
        let x = f.lu.solve(&self.constraint_rhs(f, y))?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("constraint solve"));
        }
        Ok(crate::vec3::unflatten(&x))
    }

    /// Solves `(M⁽⁰⁾ + εM⁽²⁾)η = R` for the slaved components.
    pub fn solve_constraint(&self, r: &[Vec3], u: &[Vec3], y: Vec3) -> Result<Vec<Vec3>> {
        let f = self.frame(r, u)?;
        self.eta_in_frame(&f, y)
    }

    fn full_w(&self, y: Vec3, eta: &[Vec3]) -> Vec<Vec3> {
        let mut w = Vec::with_capacity(eta.len() + 1);
        w.push(y);
        w.extend_from_slice(eta);
        w
    }

    /// Full accelerations `u̇ = A(y, η(y))`.
    pub fn accelerations_in_frame(&self, f: &SlowFrame, y: Vec3) -> Result<Vec<Vec3>> {
        let eta = self.eta_in_frame(f, y)?;
        Ok(apply_a(self.sys.charges(), &self.full_w(y, &eta)))
    }

    pub fn accelerations(&self, r: &[Vec3], u: &[Vec3], y: Vec3) -> Result<Vec<Vec3>> {
        let f = self.frame(r, u)?;
        self.accelerations_in_frame(&f, y)
    }

    /// `z = M^reg(u̇) − G^reg(u̇)` for given accelerations.
    fn residual_forces(&self, f: &SlowFrame, udot: &[Vec3]) -> (Vec<Vec3>, f64) {
        let g = forces::g_forces(&f.geom, &f.ureg, udot, &self.sys, self.eps);
        let mut scale = 0.0f64;
        let z = (0..self.sys.n())
            .map(|a| {
                let m = forces::mass_matrix_apply(&self.sys, a, f.ureg[a], self.eps, udot[a]);
                scale = scale.max(m.max_abs()).max(g[a].max_abs());
                m - g[a]
            })
            .collect();
        (z, scale)
    }

    /// `Φ = 6π e⁻⁴ Aᵗ(M^reg − G^reg)` evaluated at arbitrary accelerations.
    pub fn phi_at(&self, r: &[Vec3], u: &[Vec3], udot: &[Vec3]) -> Result<Vec<Vec3>> {
        let f = self.frame(r, u)?;
        let (z, _) = self.residual_forces(&f, udot);
        let c = 6.0 * PI / self.e4();
        Ok(apply_at(self.sys.charges(), &z).into_iter().map(|v| v * c).collect())
    }

    /// `Φ₁(r, u, y, η(y))`, the right side of `ε^{3/2} ẏ = Φ₁`.
    pub fn phi1_in_frame(&self, f: &SlowFrame, y: Vec3) -> Result<Vec3> {
        let udot = self.accelerations_in_frame(f, y)?;
        let (z, _) = self.residual_forces(f, &udot);
        Ok(dipole(self.sys.charges(), &z) * (6.0 * PI / self.e4()))
    }

    pub fn phi1(&self, r: &[Vec3], u: &[Vec3], y: Vec3) -> Result<Vec3> {
        let f = self.frame(r, u)?;
        self.phi1_in_frame(&f, y)
    }

    /// Rates of the DAE: `ṙ = u`, `u̇ = A(y, η)`, `ẏ = ε^{-3/2} Φ₁`.
    pub fn rates_in_frame(&self, f: &SlowFrame, y: Vec3) -> Result<DaeRates> {
        if self.eps == 0.0 {
            return Err(invalid("the fast equation is singular at ε = 0"));
        }
        let udot = self.accelerations_in_frame(f, y)?;
        let (z, scale) = self.residual_forces(f, &udot);
        let at = apply_at(self.sys.charges(), &z);
        let emax = self.sys.charges().iter().fold(0.0f64, |m, e| m.max(abs(*e)));
        let resid = at[1..].iter().map(|v| v.max_abs()).fold(0.0, f64::max) / (emax * scale).max(f64::MIN_POSITIVE);
        let phi1 = at[0] * (6.0 * PI / self.e4());
        Ok(DaeRates {
            velocities: f.u.clone(),
            accelerations: udot,
            y_dot: phi1 / eps_three_halves(self.eps),
            constraint_residual: resid,
        })
    }

    pub fn third_order_rhs(&self, s: &DaeState) -> Result<DaeRates> {
        let f = self.frame(&s.r, &s.u)?;
        self.rates_in_frame(&f, s.y)
    }

    /// `∂Φ₁/∂y` with `η` re-solved (exact, since `Φ₁` is affine in `y`),
    /// together with `Φ₁(0)`.
    pub fn fast_jacobian_in_frame(&self, f: &SlowFrame) -> Result<([[f64; 3]; 3], Vec3)> {
        let p0 = self.phi1_in_frame(f, Vec3::ZERO)?;
        let mut j = [[0.0; 3]; 3];
        for k in 0..3 {
            let pk = self.phi1_in_frame(f, Vec3::unit(k))?;
            let col = pk - p0;
            for i in 0..3 {
                j[i][k] = col[i];
            }
        }
        Ok((j, p0))
    }

    pub fn fast_jacobian(&self, r: &[Vec3], u: &[Vec3]) -> Result<[[f64; 3]; 3]> {
        let f = self.frame(r, u)?;
        Ok(self.fast_jacobian_in_frame(&f)?.0)
    }

    /// `y` with `Φ₁(r, u, y) = target`.
    fn solve_phi1(&self, f: &SlowFrame, target: Vec3) -> Result<Vec3> {
        let (j, p0) = self.fast_jacobian_in_frame(f)?;
        let m = DenseMatrix::from_fn(3, 3, |i, k| j[i][k]);
        let rhs = (target - p0).to_array();
        let x = linalg::solve_checked(&m, &rhs, forces::MAX_CONDITION)?;
        Ok(Vec3::new(x[0], x[1], x[2]))
    }

    /// Slow-manifold point at `(r, u)` approximated by fixed-point
    /// iteration of the invariance equation `Φ₁(r, u, y) = ε^{3/2} dy/dt`.
    /// Level zero is `h₀`; level one uses the exact `d h₀/dt`; higher levels
    /// differentiate the previous level along the slow flow by central
    /// differences.
    pub fn manifold_init(&self, r: &[Vec3], u: &[Vec3], refine_steps: usize) -> Result<ManifoldInit> {
        let h0 = self.h0(r)?;
        if refine_steps == 0 || self.eps == 0.0 {
            return Ok(ManifoldInit { y: h0, levels: 0, fell_back: false });
        }
        let mut prev = h0;
        let mut prev_step = f64::INFINITY;
        for level in 1..=refine_steps {
            let next = match self.refine_level(r, u, level) {
                Ok(y) if y.is_finite() => y,
                _ => return Ok(ManifoldInit { y: h0, levels: 0, fell_back: true }),
            };
            let step = (next - prev).norm();
            if level > 1 && step > prev_step {
                return Ok(ManifoldInit { y: h0, levels: 0, fell_back: true });
            }
            prev_step = step;
            prev = next;
        }
        Ok(ManifoldInit { y: prev, levels: refine_steps, fell_back: false })
    }

    fn refine_level(&self, r: &[Vec3], u: &[Vec3], level: usize) -> Result<Vec3> {
        if level == 0 {
            return self.h0(r);
        }
        let f = self.frame(r, u)?;
        let dydt = if level == 1 {
            self.h0_time_derivative(r, u)?
        } else {
            // Slow flow with the previous level as the fast variable.
            let y_prev = self.refine_level(r, u, level - 1)?;
            let udot = self.accelerations_in_frame(&f, y_prev)?;
            let delta = 1e-4;
            let shift = |sign: f64| -> (Vec<Vec3>, Vec<Vec3>) {
                (
                    r.iter().zip(u).map(|(p, v)| *p + *v * (sign * delta)).collect(),
                    u.iter().zip(&udot).map(|(v, a)| *v + *a * (sign * delta)).collect(),
                )
            };
            let (rp, up) = shift(1.0);
            let (rm, um) = shift(-1.0);
            (self.refine_level(&rp, &up, level - 1)? - self.refine_level(&rm, &um, level - 1)?) / (2.0 * delta)
        };
        self.solve_phi1(&f, dydt * eps_three_halves(self.eps))
    }

    /// `max_α≥2 |(Aᵗz)_α|` relative to the force scale, for given `y` and
    /// slaved components `η`.
    pub fn constraint_residual(&self, r: &[Vec3], u: &[Vec3], y: Vec3, eta: &[Vec3]) -> Result<f64> {
        let f = self.frame(r, u)?;
        let udot = apply_a(self.sys.charges(), &self.full_w(y, eta));
        let (z, scale) = self.residual_forces(&f, &udot);
        let at = apply_at(self.sys.charges(), &z);
        let emax = self.sys.charges().iter().fold(0.0f64, |m, e| m.max(abs(*e)));
        Ok(at[1..].iter().map(|v| v.max_abs()).fold(0.0, f64::max) / (emax * scale).max(f64::MIN_POSITIVE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::fit_order;
    use crate::vec3::max_abs_diff;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vecs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn random_charges(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                s * rng.gen_range(0.3..2.0)
            })
            .collect()
    }

    fn pair_system() -> FastSlowSystem {
        let sys = ParticleSystem::from_effective(vec![1.0, -1.0], vec![1.0, 2.0], vec![0.9, 1.7]).unwrap();
        FastSlowSystem::new(sys, 0.01, Regularization::unbounded()).unwrap()
    }

    fn pair_state() -> (Vec<Vec3>, Vec<Vec3>) {
        (
            vec![Vec3::new(0.4, -0.1, 0.2), Vec3::new(-0.6, 0.3, -0.1)],
            vec![Vec3::new(0.3, 0.5, -0.2), Vec3::new(-0.4, 0.1, 0.6)],
        )
    }

    fn triple_system(eps: f64) -> FastSlowSystem {
        let sys =
            ParticleSystem::from_effective(vec![1.0, -0.7, 1.3], vec![1.0, 2.5, 0.8], vec![0.9, 2.2, 0.7]).unwrap();
        FastSlowSystem::new(sys, eps, Regularization::unbounded()).unwrap()
    }

    fn triple_state() -> (Vec<Vec3>, Vec<Vec3>) {
        (
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.1, 0.2, -0.3), Vec3::new(-0.4, 0.9, 0.5)],
            vec![Vec3::new(0.2, -0.1, 0.3), Vec3::new(-0.3, 0.4, 0.1), Vec3::new(0.1, 0.2, -0.5)],
        )
    }

    #[test]
    fn p_examples() {
        let a = Vec3::new(1.0, 2.0, -3.0);
        let b = Vec3::new(0.5, -1.0, 4.0);
        let pz = apply_p(&[1.0, 1.0], &[a, b]);
        let expect = (a + b) / (6.0 * PI);
        assert!(max_abs_diff(&pz, &[expect, expect]) < 1e-16);
        assert_eq!(apply_p(&[1.0, 1.0], &[a, -a]), vec![Vec3::ZERO; 2]);
    }

    #[test]
    fn p_has_rank_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 5;
        let e = random_charges(&mut rng, n);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                let z = random_vecs(&mut rng, n);
                let mut flat = vec![0.0; 3 * n];
                crate::vec3::flatten(&apply_p(&e, &z), &mut flat);
                flat
            })
            .collect();
        assert_eq!(numerical_rank(rows, 1e-10), 3);
    }

    /// Rank by Gaussian elimination with full pivoting.
    fn numerical_rank(mut rows: Vec<Vec<f64>>, tol: f64) -> usize {
        let cols = rows[0].len();
        let scale = rows.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut rank = 0;
        for c in 0..cols {
            let Some(p) = (rank..rows.len()).max_by(|&i, &j| rows[i][c].abs().total_cmp(&rows[j][c].abs())) else {
                break;
            };
            if rows[p][c].abs() <= tol * scale {
                continue;
            }
            rows.swap(rank, p);
            for i in 0..rows.len() {
                if i != rank {
                    let f = rows[i][c] / rows[rank][c];
                    for k in 0..cols {
                        rows[i][k] -= f * rows[rank][k];
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn a_examples() {
        let z1 = Vec3::new(1.0, 2.0, 3.0);
        let z2 = Vec3::new(-0.5, 0.25, 2.0);
        let az = apply_a(&[1.0, 1.0], &[z1, z2]);
        assert_eq!(az, vec![z1 + z2, z1 - z2]);
        let e = [1.0, 1.0];
        let atpa = apply_at(&e, &apply_p(&e, &apply_a(&e, &[z1, z2])));
        let expect = [z1 * (4.0 / (6.0 * PI)), Vec3::ZERO];
        assert!(max_abs_diff(&atpa, &expect) < 1e-15);
    }

    #[test]
    fn a_matrix_matches_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..7 {
            let e = random_charges(&mut rng, n);
            let z = random_vecs(&mut rng, n);
            let m = a_matrix(&e);
            let az = apply_a(&e, &z);
            let atz = apply_at(&e, &z);
            for i in 0..3 {
                let zi: Vec<f64> = z.iter().map(|v| v[i]).collect();
                let by_m = m.mul_vec(&zi);
                let by_mt = m.transpose().mul_vec(&zi);
                for a in 0..n {
                    assert!((by_m[a] - az[a][i]).abs() < 1e-14);
                    assert!((by_mt[a] - atz[a][i]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn solve_a_round_trip_and_first_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = random_charges(&mut rng, 5);
        let z = random_vecs(&mut rng, 5);
        let back = solve_a(&e, &apply_a(&e, &z)).unwrap();
        assert!(max_abs_diff(&back, &z) < 1e-12);
        let w = solve_a(&e, &z).unwrap();
        let e2: f64 = e.iter().map(|x| x * x).sum();
        let first = e.iter().zip(&z).fold(Vec3::ZERO, |acc, (ea, za)| acc + *za * *ea) / e2;
        assert!((w[0] - first).max_abs() < 1e-12);
        assert!(matches!(solve_a(&[1.0, 0.0], &z[..2]), Err(Error::ZeroCharge(1))));
    }

    #[test]
    fn atpa_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 2..7 {
            for _ in 0..100 {
                let e = random_charges(&mut rng, n);
                let z = random_vecs(&mut rng, n);
                let e2: f64 = e.iter().map(|x| x * x).sum();
                let lhs = apply_at(&e, &apply_p(&e, &apply_a(&e, &z)));
                let mut rhs = vec![Vec3::ZERO; n];
                rhs[0] = z[0] * (e2 * e2 / (6.0 * PI));
                let znorm = z.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
                let diff = lhs.iter().zip(&rhs).map(|(a, b)| (*a - *b).norm_squared()).sum::<f64>().sqrt();
                assert!(diff <= 1e-12 * znorm, "n={n} diff={diff}");
            }
        }
    }

    #[test]
    fn determinant_examples() {
        assert_eq!(m0_scalar_det_closed_form(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(m0_det_closed_form(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 8.0);
        assert_eq!(m0_scalar_det_closed_form(&[1.0; 3], &[1.0; 3]).unwrap(), 3.0);
        assert_eq!(m0_det_closed_form(&[1.0; 3], &[1.0; 3]).unwrap(), 27.0);
        let lu = m0_matrix(&[1.0; 3], &[1.0; 3]).unwrap().lu().unwrap();
        assert!((lu.det() - 27.0).abs() < 1e-12);
        assert!(matches!(m0_matrix(&[1.0], &[1.0]), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn determinant_matches_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for k in 0..200 {
            let n = 2 + k % 5;
            let e = random_charges(&mut rng, n);
            let m: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
            let closed = m0_det_closed_form(&e, &m).unwrap();
            let lu = m0_matrix(&e, &m).unwrap().lu().unwrap().det();
            assert!(closed > 0.0);
            assert!(((lu - closed) / closed).abs() < 1e-9, "n={n}: {lu} vs {closed}");
        }
    }

    #[test]
    fn m0_is_eta_block_of_at_d_a() {
        // With D = diag(m) the η-block of AᵗDA is the scalar core.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 2..7 {
            let e = random_charges(&mut rng, n);
            let m: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
            let a = a_matrix(&e);
            let d = DenseMatrix::from_fn(n, n, |i, j| if i == j { m[i] } else { 0.0 });
            let full = a.transpose().mul(&d.mul(&a));
            let core = m0_scalar(&e, &m).unwrap();
            for i in 0..n - 1 {
                for j in 0..n - 1 {
                    assert!((full[(i + 1, j + 1)] - core[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fast_eigenvalues_for_unequal_masses() {
        let sys = ParticleSystem::with_masses(vec![1.0, -1.0], vec![1.0, 2.0]).unwrap();
        assert!((fast_eigenvalue(&sys) - 4.0 * PI).abs() < 1e-14);
        assert!((fast_eigenvalue_bound(&sys) - 4.5 * PI).abs() < 1e-14);
        let eq = ParticleSystem::with_masses(vec![1.0, -2.0, 0.5], vec![1.5; 3]).unwrap();
        assert!((fast_eigenvalue(&eq) - fast_eigenvalue_bound(&eq)).abs() < 1e-13);
    }

    #[test]
    fn regularization_identity_and_clamps() {
        let reg = Regularization::new(1.0, 0.6, 2.0).unwrap();
        let u = Vec3::new(1.0, -2.0, 1.5);
        assert_eq!(reg.regularize_velocity(u), u);
        assert_eq!(reg.regularize_velocity(Vec3::new(4.0, 0.1, 0.0)), Vec3::ZERO);
        for s in [0.2, 0.5, 1.0, 3.0, 6.0] {
            let xi = Vec3::new(s, 0.0, 0.0);
            assert_eq!(reg.regularize_separation(xi).unwrap(), xi);
        }
        for s in [1e-9, 0.01, 0.1, 0.15, 0.19, 6.5, 7.9, 8.0, 1e6] {
            let l = reg.separation_length(s);
            assert!((0.15..=8.0).contains(&l), "s={s} l={l}");
        }
        assert_eq!(reg.separation_length(1e-12), 0.15);
        assert_eq!(reg.separation_length(100.0), 8.0);
        assert!(reg.regularize_separation(Vec3::ZERO).is_none());
        assert!(Regularization::new(1.0, 30.0, 1.0).is_err());
        assert!(Regularization::new(0.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn cutoffs_are_c2() {
        let reg = Regularization::new(1.0, 0.6, 2.0).unwrap();
        // A C² function has second differences whose jump across an edge
        // shrinks with the spacing; a kink in f'' would leave it constant.
        let jump = |f: &dyn Fn(f64) -> f64, e: f64, h: f64| {
            let d2 = |x: f64| (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
            (d2(e + h) - d2(e - h)).abs()
        };
        let l = |s: f64| reg.separation_length(s);
        let v = |s: f64| reg.velocity_cutoff(s);
        for (f, e) in [(&l as &dyn Fn(f64) -> f64, 0.15), (&l, 0.2), (&l, 6.0), (&l, 8.0), (&v, 3.0), (&v, 4.0)] {
            let coarse = jump(f, e, 1e-3);
            let fine = jump(f, e, 1e-4);
            assert!(fine < 0.2 * coarse.max(1e-3), "edge {e}: {coarse} -> {fine}");
        }
        // Derivative formula against central differences.
        for s in [0.17, 0.19, 1.0, 6.3, 7.5] {
            let h = 1e-6;
            let fd = (reg.separation_length(s + h) - reg.separation_length(s - h)) / (2.0 * h);
            assert!((reg.separation_length_and_derivative(s).1 - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn h0_examples() {
        let sys = ParticleSystem::with_masses(vec![1.0, -1.0], vec![1.0, 2.0]).unwrap();
        let fs = FastSlowSystem::new(sys, 0.01, Regularization::unbounded()).unwrap();
        let h = fs.h0(&[Vec3::new(1.0, 0.0, 0.0), Vec3::ZERO]).unwrap();
        assert!((h.x + 3.0 / (16.0 * PI)).abs() < 1e-15);
        assert!((h.x + 0.0596831).abs() < 1e-7);
        assert_eq!((h.y, h.z), (0.0, 0.0));

        let eq = ParticleSystem::with_masses(vec![1.0, 2.0, 0.5], vec![2.0, 4.0, 1.0]).unwrap();
        let fs = FastSlowSystem::new(eq, 0.01, Regularization::unbounded()).unwrap();
        let (r, _) = triple_state();
        assert_eq!(fs.h0(&r).unwrap(), Vec3::ZERO);
    }

    #[test]
    fn h0_is_the_coulomb_dipole_acceleration() {
        let fs = triple_system(0.05);
        let (r, u) = triple_state();
        let s = PhaseState::new(0.0, r.clone(), u).unwrap();
        let a = forces::coulomb_rhs(&s, fs.system()).unwrap();
        let e = fs.system().charges();
        let via = dipole(e, &a) / fs.system().e_squared_total();
        assert!((via - fs.h0(&r).unwrap()).max_abs() < 1e-12);
    }

    #[test]
    fn h0_time_derivative_matches_differences() {
        let reg = Regularization::new(1.0, 2.0, 0.4).unwrap();
        let sys =
            ParticleSystem::from_effective(vec![1.0, -0.7, 1.3], vec![1.0, 2.5, 0.8], vec![0.9, 2.2, 0.7]).unwrap();
        for fs in [triple_system(0.05), FastSlowSystem::new(sys, 0.05, reg).unwrap()] {
            let (r, u) = triple_state();
            let h = 1e-6;
            let shift = |s: f64| -> Vec<Vec3> { r.iter().zip(&u).map(|(p, v)| *p + *v * s).collect() };
            let fd = (fs.h0(&shift(h)).unwrap() - fs.h0(&shift(-h)).unwrap()) / (2.0 * h);
            assert!((fs.h0_time_derivative(&r, &u).unwrap() - fd).max_abs() < 1e-7);
        }
    }

    #[test]
    fn constraint_at_zero_eps_is_coulomb() {
        let fs = triple_system(0.0);
        let (r, u) = triple_state();
        let s = PhaseState::new(0.0, r.clone(), u.clone()).unwrap();
        let a = forces::coulomb_rhs(&s, fs.system()).unwrap();
        let e = fs.system().charges();
        let w = solve_a(e, &a).unwrap();
        // At y = h₀ the slaved components are those of A⁻¹(Coulomb).
        let h0 = fs.h0(&r).unwrap();
        let eta = fs.solve_constraint(&r, &u, h0).unwrap();
        assert!(max_abs_diff(&eta, &w[1..]) < 1e-12);
        assert!(max_abs_diff(&fs.accelerations(&r, &u, h0).unwrap(), &a) < 1e-12);
        // Elsewhere η moves affinely with y through the mass terms.
        let dy = Vec3::new(0.3, -1.0, 2.0);
        let m = fs.system().masses();
        let mut shift = vec![0.0; 3 * (e.len() - 1)];
        for k in 1..e.len() {
            let v = dy * (e[k - 1] * e[k] * (m[k] - m[k - 1]));
            for i in 0..3 {
                shift[3 * (k - 1) + i] = v[i];
            }
        }
        let step = crate::vec3::unflatten(&m0_matrix(e, m).unwrap().lu().unwrap().solve(&shift).unwrap());
        let moved = fs.solve_constraint(&r, &u, h0 + dy).unwrap();
        let want: Vec<Vec3> = eta.iter().zip(&step).map(|(a, b)| *a + *b).collect();
        assert!(max_abs_diff(&moved, &want) < 1e-12);
    }

    /// `AᵗKA` with `K` the Darwin acceleration matrix: the constraint rows of
    /// the third-order system are its rows `2..N` with `w₁ = y` moved right.
    fn eta_via_darwin_matrix(fs: &FastSlowSystem, r: &[Vec3], u: &[Vec3], y: Vec3) -> Vec<Vec3> {
        let n = r.len();
        let e = fs.system().charges();
        let geom = PairGeometry::new(r).unwrap();
        let solve = forces::AccelerationSolve::assemble(&geom, u, fs.system(), fs.epsilon());
        let mut akab = DenseMatrix::zeros(3 * n, 3 * n);
        for col in 0..3 * n {
            let mut w = vec![Vec3::ZERO; n];
            w[col / 3][col % 3] = 1.0;
            let mut v = vec![0.0; 3 * n];
            crate::vec3::flatten(&apply_a(e, &w), &mut v);
            let kv = crate::vec3::unflatten(&solve.matrix.mul_vec(&v));
            let mut out = vec![0.0; 3 * n];
            crate::vec3::flatten(&apply_at(e, &kv), &mut out);
            for row in 0..3 * n {
                akab[(row, col)] = out[row];
            }
        }
        let atg = apply_at(e, &crate::vec3::unflatten(&solve.rhs));
        let k = 3 * (n - 1);
        let block = DenseMatrix::from_fn(k, k, |i, j| akab[(i + 3, j + 3)]);
        let b: Vec<f64> =
            (0..k).map(|i| atg[1 + i / 3][i % 3] - (0..3).map(|j| akab[(i + 3, j)] * y[j]).sum::<f64>()).collect();
        crate::vec3::unflatten(&block.lu().unwrap().solve(&b).unwrap())
    }

    #[test]
    fn constraint_matches_darwin_matrix_route() {
        for eps in [0.0, 0.01, 0.2] {
            let fs = triple_system(eps);
            let (r, u) = triple_state();
            let y = Vec3::new(0.2, -0.4, 0.1);
            let eta = fs.solve_constraint(&r, &u, y).unwrap();
            let oracle = eta_via_darwin_matrix(&fs, &r, &u, y);
            assert!(max_abs_diff(&eta, &oracle) < 1e-11, "eps={eps}");
        }
    }

    #[test]
    fn constraint_matches_two_term_neumann() {
        let (r, u) = triple_state();
        let y = Vec3::new(0.2, -0.4, 0.1);
        let mut gaps = Vec::new();
        let epss = [0.04, 0.02, 0.01, 0.005];
        for eps in epss {
            let fs = triple_system(eps);
            let f = fs.frame(&r, &u).unwrap();
            let rhs = fs.constraint_rhs(&f, y);
            let m0 = m0_matrix(fs.system().charges(), fs.system().masses()).unwrap().lu().unwrap();
            let m2 = fs.m2_matrix(&f.geom, &f.ureg);
            let x0 = m0.solve(&rhs).unwrap();
            let m2x0 = m2.mul_vec(&x0);
            let x1 = m0.solve(&m2x0).unwrap();
            let neumann: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| a - eps * b).collect();
            let direct = fs.solve_constraint(&r, &u, y).unwrap();
            gaps.push(max_abs_diff(&direct, &crate::vec3::unflatten(&neumann)));
        }
        let fit = fit_order(&epss, &gaps).unwrap();
        assert!((fit.slope - 2.0).abs() < 0.1, "slope {}", fit.slope);
    }

    #[test]
    fn constraint_residual_is_small() {
        let fs = triple_system(0.1);
        let (r, u) = triple_state();
        let y = Vec3::new(0.2, -0.4, 0.1);
        let eta = fs.solve_constraint(&r, &u, y).unwrap();
        assert!(fs.constraint_residual(&r, &u, y, &eta).unwrap() < 1e-12);
        let rates = fs.third_order_rhs(&DaeState::new(0.0, r, u, y).unwrap()).unwrap();
        assert!(rates.constraint_residual < 1e-12);
    }

    #[test]
    fn exchange_symmetry() {
        let sys = ParticleSystem::with_masses(vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let fs = FastSlowSystem::new(sys, 0.05, Regularization::unbounded()).unwrap();
        let x = Vec3::new(0.5, 0.1, -0.2);
        let v = Vec3::new(0.1, 0.3, 0.2);
        let r = [x, -x];
        let u = [v, -v];
        // Swapping the particles maps the point reflection state onto itself,
        // so u̇₁ = −u̇₂ and y = (u̇₁+u̇₂)/2 = 0 is consistent.
        let acc = fs.accelerations(&r, &u, Vec3::ZERO).unwrap();
        assert!((acc[0] + acc[1]).max_abs() < 1e-14);
        let eta = fs.solve_constraint(&r, &u, Vec3::ZERO).unwrap();
        assert!((eta[0] - acc[0]).max_abs() < 1e-14);
    }

    #[test]
    fn phi1_at_h0_is_first_order() {
        let (r, u) = triple_state();
        let zero_u = vec![Vec3::ZERO; 3];
        for vel in [&zero_u, &u] {
            let epss = [0.02, 0.01, 0.005, 0.0025];
            let vals: Vec<f64> = epss
                .iter()
                .map(|&eps| {
                    let fs = triple_system(eps);
                    fs.phi1(&r, vel, fs.h0(&r).unwrap()).unwrap().norm()
                })
                .collect();
            let fit = fit_order(&epss, &vals).unwrap();
            assert!((fit.slope - 1.0).abs() < 0.05, "slope {}", fit.slope);
            let fs0 = triple_system(0.0);
            assert!(fs0.phi1(&r, vel, fs0.h0(&r).unwrap()).unwrap().max_abs() < 1e-14);
        }
    }

    #[test]
    fn fast_jacobian_true_value_and_bound() {
        let (r, u) = triple_state();
        let fs = triple_system(0.0);
        let j = fs.fast_jacobian(&r, &u).unwrap();
        let lam = fast_eigenvalue(fs.system());
        for i in 0..3 {
            for k in 0..3 {
                let want = if i == k { lam } else { 0.0 };
                assert!((j[i][k] - want).abs() < 1e-8 * lam, "J[{i}][{k}] = {}", j[i][k]);
            }
        }
        // Holding η fixed gives the larger bound.
        let f = fs.frame(&r, &u).unwrap();
        let y0 = fs.h0(&r).unwrap();
        let eta = fs.eta_in_frame(&f, y0).unwrap();
        let phi_frozen = |y: Vec3| {
            let mut w = vec![y];
            w.extend_from_slice(&eta);
            fs.phi_at(&r, &u, &apply_a(fs.system().charges(), &w)).unwrap()[0]
        };
        let bound = fast_eigenvalue_bound(fs.system());
        let d = 1e-5;
        for k in 0..3 {
            let col = (phi_frozen(y0 + Vec3::unit(k) * d) - phi_frozen(y0 - Vec3::unit(k) * d)) / (2.0 * d);
            for i in 0..3 {
                let want = if i == k { bound } else { 0.0 };
                assert!((col[i] - want).abs() < 1e-8 * bound);
            }
        }
        assert!(bound > lam);
    }

    #[test]
    fn fast_rate_with_equal_masses_matches_bound() {
        let sys = ParticleSystem::with_masses(vec![1.0, -0.5, 1.5], vec![1.2; 3]).unwrap();
        let eps = 0.01;
        let fs = FastSlowSystem::new(sys, eps, Regularization::unbounded()).unwrap();
        let (r, u) = triple_state();
        let h0 = fs.h0(&r).unwrap();
        let delta = Vec3::new(1e-6, -2e-6, 5e-7);
        let s0 = DaeState::new(0.0, r.clone(), u.clone(), h0).unwrap();
        let s1 = DaeState::new(0.0, r, u, h0 + delta).unwrap();
        let dy = fs.third_order_rhs(&s1).unwrap().y_dot - fs.third_order_rhs(&s0).unwrap().y_dot;
        let lam = fast_eigenvalue_bound(fs.system()) / eps_three_halves(eps);
        // O(ε) corrections to the Jacobian remain.
        assert!((dy - delta * lam).norm() < 0.05 * lam * delta.norm());
    }

    #[test]
    fn manifold_init_examples() {
        let fs = pair_system();
        let (r, u) = pair_state();
        let init = fs.manifold_init(&r, &u, 0).unwrap();
        assert_eq!(init.y, fs.h0(&r).unwrap());
        assert_eq!((init.levels, init.fell_back), (0, false));

        // Equal ratios: h₀ vanishes, and one refinement lands on the Darwin
        // dipole acceleration, where every component of M u̇ − G is zero.
        let eq = ParticleSystem::with_masses(vec![1.0, 2.0, 0.5], vec![1.0, 2.0, 0.5]).unwrap();
        let fs_eq = FastSlowSystem::new(eq, 0.05, Regularization::unbounded()).unwrap();
        let (r3, u3) = triple_state();
        for u in [vec![Vec3::ZERO; 3], u3] {
            assert_eq!(fs_eq.manifold_init(&r3, &u, 0).unwrap().y, Vec3::ZERO);
            let y = fs_eq.manifold_init(&r3, &u, 1).unwrap().y;
            let s = PhaseState::new(0.0, r3.clone(), u.clone()).unwrap();
            let acc = forces::darwin_rhs(&s, fs_eq.system(), 0.05).unwrap();
            let yd = dipole(fs_eq.system().charges(), &acc) / fs_eq.system().e_squared_total();
            assert!((y - yd).max_abs() < 1e-12, "{y:?} vs {yd:?}");
            assert!(yd.norm() > 1e-5);
        }
    }

    #[test]
    fn manifold_init_correction_is_first_order() {
        let (r, u) = pair_state();
        let epss = [0.1, 0.03, 0.01, 0.003, 0.001];
        let gaps: Vec<f64> = epss
            .iter()
            .map(|&eps| {
                let fs = pair_system().with_epsilon(eps).unwrap();
                let init = fs.manifold_init(&r, &u, 1).unwrap();
                assert!(!init.fell_back);
                (init.y - fs.h0(&r).unwrap()).norm()
            })
            .collect();
        let fit = fit_order(&epss, &gaps).unwrap();
        assert!((fit.slope - 1.0).abs() < 0.2, "slope {}", fit.slope);
    }

    #[test]
    fn refinement_levels_converge() {
        let fs = pair_system();
        let (r, u) = pair_state();
        let y1 = fs.manifold_init(&r, &u, 1).unwrap().y;
        let y2 = fs.manifold_init(&r, &u, 2).unwrap();
        let y3 = fs.manifold_init(&r, &u, 3).unwrap();
        assert!(!y3.fell_back);
        assert!((y3.y - y2.y).norm() < (y2.y - y1).norm());
        // On the refined manifold point, ẏ is of order one.
        let rates = fs.third_order_rhs(&DaeState::new(0.0, r, u, y3.y).unwrap()).unwrap();
        assert!(rates.y_dot.norm() < 10.0);
    }

    #[test]
    fn dipole_formula_zeros() {
        let (r, u) = triple_state();
        let same = ParticleSystem::with_masses(vec![1.0, 2.0, 0.5], vec![0.7, 1.4, 0.35]).unwrap();
        assert_eq!(dipole_sum_formula(&r, &u, &same).unwrap(), Vec3::ZERO);
        let gen = triple_system(0.1);
        let common = vec![Vec3::new(0.3, -0.2, 0.9); 3];
        assert_eq!(dipole_sum_formula(&r, &common, gen.system()).unwrap(), Vec3::ZERO);
        assert!(dipole_sum_formula(&r, &u, gen.system()).unwrap().norm() > 1e-3);
        assert!(matches!(
            dipole_sum_formula(&[Vec3::ZERO, Vec3::ZERO], &u[..2], gen.system()),
            Err(Error::CoincidentParticles(0, 1)) | Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn a_then_solve_is_identity(seed in any::<u64>(), n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_charges(&mut rng, n);
            let z = random_vecs(&mut rng, n);
            let back = solve_a(&e, &apply_a(&e, &z)).unwrap();
            prop_assert!(max_abs_diff(&back, &z) < 1e-10);
        }

        #[test]
        fn separation_clamp_bounds(s in 1e-6f64..100.0) {
            let reg = Regularization::new(1.0, 0.6, 2.0).unwrap();
            let l = reg.separation_length(s);
            prop_assert!((0.15..=8.0).contains(&l));
            let d = reg.separation_length_and_derivative(s).1;
            prop_assert!(d >= -1e-12);
        }
    }
}
