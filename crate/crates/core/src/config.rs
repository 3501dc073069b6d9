//! Run configuration: one TOML file, explicit unit suffixes on every key.
//! Mixed-unit sources (G, nT, μm, kHz all over the place) are a bug farm;
//! suffixed keys make a misread loud at review time.

use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::field::QuadratureConfig;
use crate::geometry::{FrameConvention, SequenceTiming, SourceGeometry, VibrationState};
use crate::inference::{log_spaced, CouplingSpectrum, ForceRangePeak};
use crate::kernels::{ChargeSpec, DiamagneticSpec, StarkBoundInput};
use crate::vec3::Vec3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub radius_m: f64,
    pub nucleon_density_per_m3: f64,
    pub standoff_m: f64,
    pub flat_face_down: bool,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            radius_m: 250e-6,
            nucleon_density_per_m3: 1.33e30,
            standoff_m: 1e-6,
            flat_face_down: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameConfig {
    pub theta_rad: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig { theta_rad: (1.0f64 / 3.0f64.sqrt()).asin() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VibrationConfig {
    pub amplitude_m: f64,
    pub frequency_hz: f64,
    pub phase_origin_rad: f64,
}

impl Default for VibrationConfig {
    fn default() -> Self {
        VibrationConfig { amplitude_m: 120e-9, frequency_hz: 70.47e3, phase_origin_rad: 0.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub tau_s: f64,
    pub pi_half_len_s: f64,
    pub pi_len_s: f64,
    pub laser_init_len_s: f64,
    pub laser_read_len_s: f64,
    pub sync_jitter_s: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            tau_s: 6.994e-6,
            pi_half_len_s: 102e-9,
            pi_len_s: 205e-9,
            laser_init_len_s: 2e-6,
            laser_read_len_s: 0.3e-6,
            sync_jitter_s: 40e-9,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeakConfig {
    pub lambda_c_m: f64,
    pub gamma_w_m: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumConfig {
    pub lambda_grid_min_m: f64,
    pub lambda_grid_max_m: f64,
    pub lambda_grid_points: usize,
    pub peaks: Vec<PeakConfig>,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            lambda_grid_min_m: 1e-8,
            lambda_grid_max_m: 1e-3,
            lambda_grid_points: 200,
            peaks: vec![
                PeakConfig { lambda_c_m: 3.82e-7, gamma_w_m: 5e-8, amplitude: 4.83e-6 },
                PeakConfig { lambda_c_m: 8.07e-6, gamma_w_m: 5e-8, amplitude: 3.93e-8 },
            ],
        }
    }
}

impl Default for PeakConfig {
    fn default() -> Self {
        PeakConfig { lambda_c_m: 3.82e-7, gamma_w_m: 5e-8, amplitude: 0.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundsConfig {
    pub susceptibility: f64,
    pub bias_field_t: f64,
    pub include_fork: bool,
    /// Tuning-fork arms as [center_xyz_m, edge_lengths_m] pairs; the nominal
    /// placement puts both arms behind the sphere, outside the standoff gap.
    pub fork_prism_centers_m: Vec<[f64; 3]>,
    pub fork_prism_edges_m: Vec<[f64; 3]>,
    pub charge_c: f64,
    pub stark_freq_shift_hz: f64,
    /// Axial electric dipole response d∥, Hz·m/V.
    pub stark_dipole_hz_m_per_v: f64,
    pub screening_factor: f64,
    /// Acceptance budgets for the background report flags.
    pub diamagnetic_budget_t: f64,
    pub charge_budget_t: f64,
    pub stark_charge_budget_c: f64,
}

impl Default for BackgroundsConfig {
    fn default() -> Self {
        BackgroundsConfig {
            susceptibility: -11.28e-6,
            bias_field_t: 0.0476,
            include_fork: false,
            fork_prism_centers_m: vec![
                [-0.5e-3, 0.0, 1.75e-3],
                [0.5e-3, 0.0, 1.75e-3],
            ],
            fork_prism_edges_m: vec![
                [0.33e-3, 0.59e-3, 2.36e-3],
                [0.33e-3, 0.59e-3, 2.36e-3],
            ],
            charge_c: 5e-14,
            stark_freq_shift_hz: 74e3,
            stark_dipole_hz_m_per_v: 0.35e-2,
            screening_factor: 20.0,
            diamagnetic_budget_t: 2.3e-16,
            charge_budget_t: 2e-9,
            stark_charge_budget_c: 5e-14,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Per-point noise assumed for synthetic data and sensitivity, T.
    pub noise_bbar_t: f64,
    /// Keep the peak widths at their configured values during fits.
    pub freeze_gamma: bool,
    /// Reference standoff for the sensitivity curve, m.
    pub sensitivity_d_ref_m: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { noise_bbar_t: 1e-9, freeze_gamma: true, sensitivity_d_ref_m: 1e-6 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// "csv" or "json" for tabular outputs.
    pub format: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { format: "csv".into() }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub constants: PhysicalConstants,
    pub geometry: GeometryConfig,
    pub frame: FrameConfig,
    pub vibration: VibrationConfig,
    pub timing: TimingConfig,
    pub quadrature: QuadratureConfig,
    pub spectrum: SpectrumConfig,
    pub backgrounds: BackgroundsConfig,
    pub fit: FitConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig serializes")
    }

    /// SHA-256 of the canonical TOML serialization, hex.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.constants.validate()?;
        self.source_geometry().validate()?;
        self.vibration_state().validate()?;
        self.sequence_timing().validate()?;
        self.quadrature.validate()?;
        self.coupling_spectrum()?.validate()?;
        if !(self.fit.noise_bbar_t > 0.0) {
            return Err(Error::Validation("fit.noise_bbar_t must be > 0".into()));
        }
        if !(self.fit.sensitivity_d_ref_m > 0.0) {
            return Err(Error::Validation("fit.sensitivity_d_ref_m must be > 0".into()));
        }
        match self.output.format.as_str() {
            "csv" | "json" => {}
            other => {
                return Err(Error::Validation(format!(
                    "output.format must be 'csv' or 'json', got '{other}'"
                )))
            }
        }
        if self.backgrounds.fork_prism_centers_m.len() != self.backgrounds.fork_prism_edges_m.len()
        {
            return Err(Error::Validation(
                "fork_prism_centers_m and fork_prism_edges_m must have equal length".into(),
            ));
        }
        self.diamagnetic_spec().validate()?;
        self.charge_spec().validate()?;
        self.stark_input().validate()?;
        Ok(())
    }

    pub fn source_geometry(&self) -> SourceGeometry {
        SourceGeometry {
            radius: self.geometry.radius_m,
            nucleon_density: self.geometry.nucleon_density_per_m3,
            standoff: self.geometry.standoff_m,
            flat_face_down: self.geometry.flat_face_down,
        }
    }

    pub fn frame_convention(&self) -> FrameConvention {
        FrameConvention::from_theta(self.frame.theta_rad)
    }

    pub fn vibration_state(&self) -> VibrationState {
        VibrationState {
            amplitude: self.vibration.amplitude_m,
            angular_frequency: 2.0 * std::f64::consts::PI * self.vibration.frequency_hz,
            phase_origin: self.vibration.phase_origin_rad,
        }
    }

    pub fn sequence_timing(&self) -> SequenceTiming {
        SequenceTiming {
            tau: self.timing.tau_s,
            pi_half_len: self.timing.pi_half_len_s,
            pi_len: self.timing.pi_len_s,
            laser_init_len: self.timing.laser_init_len_s,
            laser_read_len: self.timing.laser_read_len_s,
            sync_jitter: self.timing.sync_jitter_s,
        }
    }

    pub fn lambda_grid(&self) -> Result<Vec<f64>> {
        let s = &self.spectrum;
        if s.lambda_grid_points < 2 {
            return Err(Error::Validation("spectrum.lambda_grid_points must be >= 2".into()));
        }
        if !(s.lambda_grid_min_m > 0.0 && s.lambda_grid_max_m > s.lambda_grid_min_m) {
            return Err(Error::Validation(
                "spectrum grid range must satisfy 0 < min < max".into(),
            ));
        }
        Ok(log_spaced(s.lambda_grid_min_m, s.lambda_grid_max_m, s.lambda_grid_points))
    }

    pub fn coupling_spectrum(&self) -> Result<CouplingSpectrum> {
        let peaks = self
            .spectrum
            .peaks
            .iter()
            .map(|p| ForceRangePeak {
                lambda_c: p.lambda_c_m,
                gamma_w: p.gamma_w_m,
                amplitude: p.amplitude,
            })
            .collect();
        Ok(CouplingSpectrum { peaks, lambda_grid: self.lambda_grid()? })
    }

    pub fn diamagnetic_spec(&self) -> DiamagneticSpec {
        let b = &self.backgrounds;
        let prisms = b
            .fork_prism_centers_m
            .iter()
            .zip(b.fork_prism_edges_m.iter())
            .map(|(c, e)| {
                (Vec3::new(c[0], c[1], c[2]), Vec3::new(e[0], e[1], e[2]))
            })
            .collect();
        DiamagneticSpec {
            susceptibility: b.susceptibility,
            b0_vector: self.frame_convention().nv_axis() * b.bias_field_t,
            include_fork: b.include_fork,
            fork_prisms: prisms,
        }
    }

    pub fn charge_spec(&self) -> ChargeSpec {
        ChargeSpec { charge: self.backgrounds.charge_c, position: Vec3::ZERO }
    }

    pub fn stark_input(&self) -> StarkBoundInput {
        StarkBoundInput {
            freq_shift: self.backgrounds.stark_freq_shift_hz,
            dipole_moment: self.backgrounds.stark_dipole_hz_m_per_v,
            screening_factor: self.backgrounds.screening_factor,
            distance: self.geometry.standoff_m,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn defaults_validate_and_match_the_setup() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_relative_eq!(cfg.geometry.radius_m, 250e-6);
        assert_relative_eq!(cfg.vibration_state().max_velocity(), 0.0531, max_relative = 2e-3);
        assert_relative_eq!(cfg.frame.theta_rad.sin(), 1.0 / 3.0f64.sqrt(), max_relative = 1e-12);
        let grid = cfg.lambda_grid().unwrap();
        assert_eq!(grid.len(), 200);
    }

    #[test]
    fn parse_print_parse_is_idempotent() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let cfg2 = RunConfig::from_toml(&text).unwrap();
        let text2 = cfg2.to_toml();
        assert_eq!(text, text2);
        assert_eq!(cfg.hash(), cfg2.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "[geometry]\nradius_m = 1e-4\nbanana = 3\n";
        let err = RunConfig::from_toml(text).unwrap_err();
        assert!(matches!(err, Error::ConfigParse(_)), "{err}");
        assert!(err.to_string().contains("banana"), "{err}");
    }

    #[test]
    fn bad_values_rejected_at_parse() {
        let text = "[timing]\ntau_s = -1.0\n";
        assert!(RunConfig::from_toml(text).is_err());
        let text = "[output]\nformat = \"yaml\"\n";
        assert!(RunConfig::from_toml(text).is_err());
        let text = "[spectrum]\nlambda_grid_points = 1\n";
        assert!(RunConfig::from_toml(text).is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let text = "[geometry]\nstandoff_m = 3e-6\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_relative_eq!(cfg.geometry.standoff_m, 3e-6);
        assert_relative_eq!(cfg.geometry.radius_m, 250e-6);
        assert_relative_eq!(cfg.timing.tau_s, 6.994e-6);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.geometry.standoff_m = 2e-6;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
