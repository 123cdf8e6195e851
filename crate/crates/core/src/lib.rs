//! Effective dynamics of `N` slowly moving charged particles at increasing
//! post-Coulombian order.
//!
//! Three second-order models are provided:
//!
//! * **Coulomb** (`0PC`): `m_α u̇_α = Σ_β (e_α e_β / 4π) ξ_αβ / |ξ_αβ|³`.
//! * **Darwin** (`1PC`): the Euler–Lagrange equations of the Darwin
//!   Lagrangian, written as the implicit system `M_α(u_α, ε) u̇_α = G_α(r, u, u̇, ε)`
//!   and resolved by one dense linear solve per evaluation.
//! * **Reduced radiation reaction** (`1.5PC`): the Darwin system plus the
//!   explicit dipole damping force obtained by order reduction.
//!
//! The unreduced third-order system `M u̇ = G + ε^{3/2} P ü` is handled in
//! [`manifold`]: the coupling map `P` is diagonalized, `3N − 3` acceleration
//! components become algebraic constraints and the remaining three form a
//! fast variable `y` with a repulsive slow manifold `y ≈ h₀(r)`.
//!
//! All dynamics live on the Coulomb scale (`c = 1`, distances and velocities
//! of order one, `ε` explicit). [`params::ScaleMap`] converts to and from the
//! microscopic scale.
//!
//! The crate is `no_std` (it needs `alloc`); transcendental functions come
//! from `libm` so results do not depend on the platform's math library.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read closer to the matrix formulas.
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod diagnostics;
pub mod error;
pub mod forces;
pub mod integrate;
pub mod linalg;
pub mod manifold;
pub mod params;
pub mod quad;
pub mod state;
pub mod vec3;

mod math;

pub use error::{Error, Result};
pub use params::{FormFactor, ParticleSystem, ScaleMap};
pub use state::{DaeState, PhaseState};
pub use vec3::Vec3;
