//! Physical parameters: the charge form factor, electromagnetic and
//! effective masses, the microscopic/Coulomb scale map, and the point-charge
//! soliton closed forms.
//!
//! # Fourier convention
//!
//! `φ̂(k) = (2π)^{-3/2} ∫ e^{-ik·x} φ(x) d³x`, so `φ̂(0) = (2π)^{-3/2}` for a
//! normalized profile. With this convention
//!
//! `m_e = ½ ∫ |φ̂(k)|² k⁻² d³k = ½ ∫∫ φ(x) φ(y) / (4π|x − y|) d³x d³y`
//!
//! holds with factor one: Parseval turns the right side into
//! `½ ∫ |φ̂(k)|² Ĝ(k) (2π)^{3/2} d³k` where the Coulomb kernel `1/(4π|x|)` has
//! transform `(2π)^{-3/2} k⁻²`. Both sides are evaluated independently in
//! the tests.

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math::{abs, exp, pow, sin, sqrt, PI};
use crate::quad::{self, QuadConfig};
use crate::state::PhaseState;
use crate::vec3::Vec3;

/// Smooth, radial, compactly supported charge profile
/// `φ(s) = C exp(−a / (1 − (s/R)²))` for `s < R`, zero beyond, with `C`
/// fixed so that `∫ φ d³x = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormFactor {
    support_radius: f64,
    sharpness: f64,
    scale: f64,
}

fn radial_tol() -> QuadConfig {
    QuadConfig { abs_tol: 1e-15, rel_tol: 1e-13, max_panels: 4000 }
}

impl FormFactor {
    /// The standard bump (`a = 1`) of the given support radius.
    pub fn bump(support_radius: f64) -> Result<Self> {
        Self::with_sharpness(support_radius, 1.0)
    }

    /// Bump with exponent parameter `a > 0`; larger `a` concentrates the
    /// charge toward the center.
    pub fn with_sharpness(support_radius: f64, sharpness: f64) -> Result<Self> {
        if !(support_radius > 0.0) || !support_radius.is_finite() {
            return Err(invalid("form factor support radius must be positive"));
        }
        if !(sharpness > 0.0) || !sharpness.is_finite() {
            return Err(invalid("form factor sharpness must be positive"));
        }
        let shape = |s: f64| unnormalized(s / support_radius, sharpness);
        let raw = quad::integrate(|s| 4.0 * PI * s * s * shape(s), 0.0, support_radius, radial_tol())?;
        Ok(FormFactor { support_radius, sharpness, scale: 1.0 / raw })
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }

    /// Density at radius `s`.
    pub fn profile(&self, s: f64) -> f64 {
        self.scale * unnormalized(abs(s) / self.support_radius, self.sharpness)
    }

    /// `4π ∫ s² φ(s) ds`, recomputed by quadrature.
    pub fn normalization(&self) -> Result<f64> {
        quad::integrate(|s| 4.0 * PI * s * s * self.profile(s), 0.0, self.support_radius, radial_tol())
    }

    /// `φ̂(k)` as a quadrature result with its error estimate.
    pub fn fourier_radial_with_error(&self, k: f64) -> quad::QuadResult {
        let k = abs(k);
        let pref = 4.0 * PI / pow(2.0 * PI, 1.5);
        let r = quad::adaptive(|s| s * s * self.profile(s) * sinc(k * s), 0.0, self.support_radius, radial_tol());
        quad::QuadResult { value: pref * r.value, error: pref * r.error, converged: r.converged }
    }

    /// Radial Fourier transform `φ̂(k) = (2π)^{-3/2} 4π ∫ s² φ(s) sin(ks)/(ks) ds`.
    pub fn fourier_radial(&self, k: f64) -> f64 {
        self.fourier_radial_with_error(k).value
    }

    /// `m_e = ½ ∫ |φ̂|² k⁻² d³k = 2π ∫₀^∞ φ̂(k)² dk`.
    ///
    /// The `k` integral is truncated at `400/R`, where `φ̂²` has fallen below
    /// `1e-18` of its peak for every sharpness accepted here.
    pub fn electromagnetic_mass(&self) -> Result<f64> {
        let r = self.support_radius;
        let kmax = 400.0 / r;
        let panels = 100;
        let breaks: Vec<f64> = (0..=panels).map(|i| kmax * i as f64 / panels as f64).collect();
        let cfg = QuadConfig { abs_tol: 1e-16 / r, rel_tol: 1e-11, max_panels: 200 };
        let mut failed = 0.0;
        let total = quad::integrate_panels(
            |k| {
                let r = self.fourier_radial_with_error(k);
                if !r.converged {
                    failed = f64::max(failed, r.error);
                }
                r.value * r.value
            },
            &breaks,
            cfg,
        )?;
        if failed > 0.0 {
            return Err(Error::QuadratureFailure { estimate: failed });
        }
        Ok(2.0 * PI * total)
    }
}

fn unnormalized(x: f64, a: f64) -> f64 {
    if x >= 1.0 {
        0.0
    } else {
        exp(-a / (1.0 - x * x))
    }
}

fn sinc(x: f64) -> f64 {
    if abs(x) < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        sin(x) / x
    }
}

/// Normalized standard bump of radius `support_radius`.
pub fn make_form_factor(support_radius: f64) -> Result<FormFactor> {
    FormFactor::bump(support_radius)
}

/// `(m, m*) = (m_b + (4/3)e²m_e, m_b + (16/15)e²m_e)`.
pub fn effective_masses(bare_mass: f64, charge: f64, em_mass: f64) -> Result<(f64, f64)> {
    if !(bare_mass >= 0.0) || !(em_mass >= 0.0) {
        return Err(invalid("bare and electromagnetic masses must be non-negative"));
    }
    let e2 = charge * charge;
    let m = bare_mass + 4.0 / 3.0 * e2 * em_mass;
    let m_star = bare_mass + 16.0 / 15.0 * e2 * em_mass;
    if !(m > 0.0) || !m.is_finite() {
        return Err(invalid("effective mass must be positive"));
    }
    Ok((m, m_star))
}

/// Charges and masses of `N` particles.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    charges: Vec<f64>,
    masses: Vec<f64>,
    star_masses: Vec<f64>,
    bare_masses: Option<Vec<f64>>,
    em_mass: Option<f64>,
}

impl ParticleSystem {
    /// Builds effective masses from bare masses and a common `m_e`.
    pub fn from_bare(charges: Vec<f64>, bare_masses: Vec<f64>, em_mass: f64) -> Result<Self> {
        if charges.len() != bare_masses.len() {
            return Err(Error::DimensionMismatch { expected: charges.len(), got: bare_masses.len() });
        }
        let mut masses = Vec::with_capacity(charges.len());
        let mut star = Vec::with_capacity(charges.len());
        for (e, mb) in charges.iter().zip(&bare_masses) {
            let (m, ms) = effective_masses(*mb, *e, em_mass)?;
            masses.push(m);
            star.push(ms);
        }
        let mut sys = Self::from_effective(charges, masses, star)?;
        sys.bare_masses = Some(bare_masses);
        sys.em_mass = Some(em_mass);
        Ok(sys)
    }

    /// Uses the given `m_α` and `m*_α` directly.
    pub fn from_effective(charges: Vec<f64>, masses: Vec<f64>, star_masses: Vec<f64>) -> Result<Self> {
        let n = charges.len();
        if n == 0 {
            return Err(invalid("particle system needs at least one particle"));
        }
        if masses.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: masses.len() });
        }
        if star_masses.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: star_masses.len() });
        }
        if charges.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("charges"));
        }
        if masses.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return Err(invalid("effective masses must be positive"));
        }
        if star_masses.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(invalid("m* must be non-negative"));
        }
        Ok(ParticleSystem { charges, masses, star_masses, bare_masses: None, em_mass: None })
    }

    /// Point-like particles with `m* = m`.
    pub fn with_masses(charges: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        let star = masses.clone();
        Self::from_effective(charges, masses, star)
    }

    pub fn n(&self) -> usize {
        self.charges.len()
    }

    pub fn charges(&self) -> &[f64] {
        &self.charges
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn star_masses(&self) -> &[f64] {
        &self.star_masses
    }

    pub fn bare_masses(&self) -> Option<&[f64]> {
        self.bare_masses.as_deref()
    }

    pub fn em_mass(&self) -> Option<f64> {
        self.em_mass
    }

    /// `e² = Σ e_α²`.
    pub fn e_squared_total(&self) -> f64 {
        self.charges.iter().map(|e| e * e).sum()
    }

    pub fn charge_to_mass(&self, alpha: usize) -> f64 {
        self.charges[alpha] / self.masses[alpha]
    }

    /// True when all `e_α/m_α` agree to relative precision `rel`.
    pub fn has_equal_ratios(&self, rel: f64) -> bool {
        let q0 = self.charge_to_mass(0);
        (1..self.n()).all(|a| abs(self.charge_to_mass(a) - q0) <= rel * abs(q0).max(f64::MIN_POSITIVE))
    }
}

/// Conversion between microscopic variables `(t, q, v)` and Coulomb-scale
/// variables `(t̄, r̄, ū) = (ε^{3/2}t, εq, ε^{-1/2}v)`.
///
/// | quantity        | Coulomb scale → microscopic |
/// |-----------------|-----------------------------|
/// | position        | `q = r̄/ε`                   |
/// | velocity        | `v = √ε ū`                   |
/// | time            | `t = ε^{-3/2} t̄`            |
/// | acceleration    | `v̇ = ε² u̇̄`                 |
/// | energy          | `H = ε H̄`                    |
/// | momentum        | `p = √ε p̄`                   |
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleMap {
    epsilon: f64,
}

impl ScaleMap {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::OutOfRange { value: epsilon, lo: 0.0, hi: 1.0 });
        }
        Ok(ScaleMap { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn time_to_coulomb(&self, t: f64) -> f64 {
        t * self.epsilon * sqrt(self.epsilon)
    }

    pub fn time_to_microscopic(&self, t: f64) -> f64 {
        t / (self.epsilon * sqrt(self.epsilon))
    }

    pub fn to_coulomb_scale(&self, s: &PhaseState) -> PhaseState {
        let eps = self.epsilon;
        let rs = 1.0 / sqrt(eps);
        PhaseState {
            t: self.time_to_coulomb(s.t),
            r: s.r.iter().map(|q| *q * eps).collect(),
            u: s.u.iter().map(|v| *v * rs).collect(),
        }
    }

    pub fn to_microscopic_scale(&self, s: &PhaseState) -> PhaseState {
        let eps = self.epsilon;
        let rs = sqrt(eps);
        PhaseState {
            t: self.time_to_microscopic(s.t),
            r: s.r.iter().map(|r| *r / eps).collect(),
            u: s.u.iter().map(|u| *u * rs).collect(),
        }
    }

    pub fn acceleration_to_microscopic(&self, a: Vec3) -> Vec3 {
        a * (self.epsilon * self.epsilon)
    }

    pub fn energy_to_microscopic(&self, h: f64) -> f64 {
        h * self.epsilon
    }

    pub fn momentum_to_microscopic(&self, p: Vec3) -> Vec3 {
        p * sqrt(self.epsilon)
    }
}

fn check_soliton_args(v: Vec3, x: Vec3) -> Result<()> {
    let v2 = v.norm_squared();
    if !(v2 < 1.0) {
        return Err(Error::OutOfRange { value: sqrt(v2), lo: 0.0, hi: 1.0 });
    }
    if x == Vec3::ZERO {
        return Err(invalid("soliton potential is singular at the origin"));
    }
    Ok(())
}

/// `ζ_v(x) = [(1 − v²)x² + (x·v)²]^{-1/2}`, the comoving point-charge
/// potential profile.
pub fn soliton_potential(v: Vec3, x: Vec3) -> Result<f64> {
    check_soliton_args(v, x)?;
    let q = (1.0 - v.norm_squared()) * x.norm_squared() + x.dot(v) * x.dot(v);
    Ok(1.0 / sqrt(q))
}

/// `∇ζ_v(x) = −ζ³ [(1 − v²)x + (x·v)v]`.
pub fn soliton_potential_gradient(v: Vec3, x: Vec3) -> Result<Vec3> {
    let z = soliton_potential(v, x)?;
    Ok(-(x * (1.0 - v.norm_squared()) + v * x.dot(v)) * (z * z * z))
}

/// Comoving fields of a point charge `e` moving with velocity `v`, at
/// displacement `x` from the charge:
/// `E = −∇ϕ + (v·∇ϕ)v`, `B = −v ∧ ∇ϕ` with `ϕ = (e/4π)ζ_v`.
pub fn point_soliton_fields(charge: f64, v: Vec3, x: Vec3) -> Result<(Vec3, Vec3)> {
    let grad = soliton_potential_gradient(v, x)? * (charge / (4.0 * PI));
    let e = -grad + v * v.dot(grad);
    let b = -v.cross(grad);
    Ok((e, b))
}
