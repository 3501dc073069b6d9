//! Physical constants, CODATA 2018 values, all SI.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalConstants {
    /// Reduced Planck constant, J·s.
    pub hbar: f64,
    /// Electron mass, kg.
    pub electron_mass: f64,
    /// Speed of light in vacuum, m/s.
    pub light_speed: f64,
    /// Electron gyromagnetic ratio magnitude, rad·s⁻¹·T⁻¹.
    pub gamma_e: f64,
    /// Vacuum permeability, T·m/A.
    pub mu0: f64,
    /// Vacuum permittivity, F/m.
    pub eps0: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        PhysicalConstants {
            hbar: 1.054_571_817e-34,
            electron_mass: 9.109_383_7015e-31,
            light_speed: 299_792_458.0,
            gamma_e: 1.760_859_630_23e11,
            mu0: 1.256_637_062_12e-6,
            eps0: 8.854_187_8128e-12,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("hbar", self.hbar),
            ("electron_mass", self.electron_mass),
            ("light_speed", self.light_speed),
            ("gamma_e", self.gamma_e),
            ("mu0", self.mu0),
            ("eps0", self.eps0),
        ];
        for (name, v) in all {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!(
                    "physical constant {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}
