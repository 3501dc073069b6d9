//! Point-level interaction kernels: the velocity-dependent exotic potential
//! and effective field, plus the background kernels (diamagnetic dipole
//! density, moving point charge, Stark-shift charge bound).
//!
//! Sign conventions: the potential and the field kernel are evaluated
//! exactly as written, with the projection (-r_x sinθ + r_z cosθ) taken as
//! definitional for the field. The displacement argument `r` is the vector
//! from the nucleon to the spin wherever the field engine calls these
//! kernels; the overall sign is a convention fixed by the measured phase.

use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::vec3::Vec3;
use serde::{Deserialize, Serialize};

/// One (λ, f⊥) point of the coupling spectrum.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CouplingPoint {
    /// Force range λ = ħ/(m_b c), m.
    pub lambda: f64,
    /// Dimensionless coupling constant f⊥.
    pub f_perp: f64,
}

impl CouplingPoint {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Validation(format!("lambda must be > 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Diamagnetic background description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiamagneticSpec {
    /// Volume susceptibility χ (dimensionless, negative for diamagnets).
    pub susceptibility: f64,
    /// Bias field vector B0, T (along the NV axis).
    pub b0_vector: Vec3,
    /// Include the tuning-fork prisms in the volume integral.
    pub include_fork: bool,
    /// Rectangular prisms: (center, edge lengths), m.
    pub fork_prisms: Vec<(Vec3, Vec3)>,
}

impl DiamagneticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.susceptibility.abs() >= 1e-3 {
            return Err(Error::Validation(format!(
                "susceptibility {} outside the weak-diamagnet sanity bound |chi| < 1e-3",
                self.susceptibility
            )));
        }
        Ok(())
    }
}

/// Point charge riding on the source.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ChargeSpec {
    /// Charge q, C.
    pub charge: f64,
    /// Attachment point in source-local coordinates, m (moves with the source).
    pub position: Vec3,
}

impl ChargeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.charge.abs() >= 1e-9 {
            return Err(Error::Validation(format!(
                "charge {} C outside the sanity bound |q| < 1e-9 C",
                self.charge
            )));
        }
        Ok(())
    }
}

/// Inputs for the Stark-shift-to-charge bound chain.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StarkBoundInput {
    /// Measured resonance shift Δf, Hz.
    pub freq_shift: f64,
    /// Axial electric dipole moment d∥, Hz·m/V (0.35 Hz·cm/V = 3.5e-3 Hz·m/V).
    pub dipole_moment: f64,
    /// Surface screening factor (≥ 1).
    pub screening_factor: f64,
    /// Charge-to-spin distance, m.
    pub distance: f64,
}

impl StarkBoundInput {
    pub fn validate(&self) -> Result<()> {
        if !(self.freq_shift >= 0.0) {
            return Err(Error::Validation("freq_shift must be >= 0".into()));
        }
        if !(self.dipole_moment > 0.0) {
            return Err(Error::Validation("dipole_moment must be > 0".into()));
        }
        if !(self.screening_factor >= 1.0) {
            return Err(Error::Validation("screening_factor must be >= 1".into()));
        }
        if !(self.distance > 0.0) {
            return Err(Error::Validation("distance must be > 0".into()));
        }
        Ok(())
    }
}

/// Yukawa-screened radial factor (1/(λr) + 1/r²)·e^(−r/λ).
#[inline]
pub fn yukawa_radial(r: f64, lambda: f64) -> f64 {
    (1.0 / (lambda * r) + 1.0 / (r * r)) * (-r / lambda).exp()
}

/// Exotic potential V = f⊥ ħ²/(8π m_e c) σ̂·(v × r̂)(1/(λr) + 1/r²) e^(−r/λ),
/// with the Pauli vector replaced by the unit spin direction.
pub fn exotic_potential(
    r: Vec3,
    v: Vec3,
    spin_dir: Vec3,
    cp: &CouplingPoint,
    k: &PhysicalConstants,
) -> Result<f64> {
    let rn = r.norm();
    if rn == 0.0 {
        return Err(Error::Singularity("exotic_potential: |r| = 0".into()));
    }
    let r_hat = r * (1.0 / rn);
    let prefactor = cp.f_perp * k.hbar * k.hbar / (8.0 * std::f64::consts::PI * k.electron_mass * k.light_speed);
    Ok(prefactor * spin_dir.dot(v.cross(r_hat)) * yukawa_radial(rn, cp.lambda))
}

/// Effective field kernel
/// B(r) = f⊥ ħ/(4π m_e c γ_e) v_y (−r_x sinθ + r_z cosθ)/r (1/(λr)+1/r²) e^(−r/λ).
pub fn exotic_field_point(
    r: Vec3,
    v_y: f64,
    theta: f64,
    cp: &CouplingPoint,
    k: &PhysicalConstants,
) -> Result<f64> {
    let rn = r.norm();
    if rn == 0.0 {
        return Err(Error::Singularity("exotic_field_point: |r| = 0".into()));
    }
    Ok(exotic_field_prefactor(k) * cp.f_perp * v_y * exotic_geometry_kernel(r, rn, theta, cp.lambda))
}

/// f⊥- and v-independent prefactor ħ/(4π m_e c γ_e).
#[inline]
pub fn exotic_field_prefactor(k: &PhysicalConstants) -> f64 {
    k.hbar / (4.0 * std::f64::consts::PI * k.electron_mass * k.light_speed * k.gamma_e)
}

/// Geometry-only part of the field kernel: projection times the Yukawa
/// radial factor. `rn` must equal |r|.
#[inline]
pub fn exotic_geometry_kernel(r: Vec3, rn: f64, theta: f64, lambda: f64) -> f64 {
    let projection = (-r.x * theta.sin() + r.z * theta.cos()) / rn;
    projection * yukawa_radial(rn, lambda)
}

/// Dipole-density kernel of the diamagnetic volume integral:
/// (χ/4π)[3 r (B0·r)/r⁵ − B0/r³] per unit volume, SI.
#[inline]
pub fn diamagnetic_kernel(chi: f64, b0: Vec3, r: Vec3) -> Vec3 {
    let r2 = r.dot(r);
    let rn = r2.sqrt();
    let r5 = r2 * r2 * rn;
    let r3 = r2 * rn;
    let c = chi / (4.0 * std::f64::consts::PI);
    (r * (3.0 * b0.dot(r) / r5) - b0 * (1.0 / r3)) * c
}

/// Low-velocity point-charge field B = μ0 q (v × r̂)/(4π r²).
pub fn moving_charge_field(spec: &ChargeSpec, r: Vec3, v: Vec3, k: &PhysicalConstants) -> Result<Vec3> {
    let rn = r.norm();
    if rn == 0.0 {
        return Err(Error::Singularity("moving_charge_field: |r| = 0".into()));
    }
    let r_hat = r * (1.0 / rn);
    Ok(v.cross(r_hat) * (k.mu0 * spec.charge / (4.0 * std::f64::consts::PI * rn * rn)))
}

/// Electric field implied by the measured Stark shift, V/m: ΔE_z = Δf/d∥.
pub fn stark_field(inp: &StarkBoundInput) -> f64 {
    inp.freq_shift / inp.dipole_moment
}

/// Charge upper bound q_max = 4π ε0 d² · (screening · Δf/d∥).
pub fn stark_to_charge_bound(inp: &StarkBoundInput, k: &PhysicalConstants) -> f64 {
    4.0 * std::f64::consts::PI * k.eps0 * inp.distance * inp.distance * inp.screening_factor * stark_field(inp)
}
