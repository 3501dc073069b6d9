//! Experiment frames, source kinematics and sequence timing.
//!
//! Lab frame convention: the spin sits at the origin, z points from the spin
//! toward the source (normal to the diamond surface), y is the vibration
//! axis. The source is a half-ball whose symmetry axis is z; with
//! `flat_face_down` the flat face looks at the diamond and the sphere center
//! sits at z = standoff, otherwise the curved face looks down and the sphere
//! center sits at z = standoff + radius.
//!
//! Time origin: t = 0 is the left turning point of the vibration, so the
//! displacement is -A·cos(ω t) and the velocity A·ω·sin(ω t).

use crate::error::{Error, Result};
use crate::vec3::Vec3;
use serde::{Deserialize, Serialize};

/// Half-ball nucleon source.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SourceGeometry {
    /// Sphere radius R, m.
    pub radius: f64,
    /// Nucleon number density ρ, m⁻³.
    pub nucleon_density: f64,
    /// Distance d from the bottom of the source to the spin, m.
    pub standoff: f64,
    /// Flat face toward the diamond when true.
    pub flat_face_down: bool,
}

impl SourceGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Validation(format!("radius must be > 0, got {}", self.radius)));
        }
        if !(self.nucleon_density > 0.0) {
            return Err(Error::Validation(format!(
                "nucleon_density must be > 0, got {}",
                self.nucleon_density
            )));
        }
        if !(self.standoff > 0.0) {
            return Err(Error::Validation(format!("standoff must be > 0, got {}", self.standoff)));
        }
        Ok(())
    }

    /// Lab z of the sphere center (on the symmetry axis, zero vibration offset).
    pub fn center_z(&self) -> f64 {
        if self.flat_face_down {
            self.standoff
        } else {
            self.standoff + self.radius
        }
    }

    /// Membership test for a volume element in source-local coordinates
    /// (origin at the sphere center).
    pub fn contains_local(&self, e: Vec3) -> bool {
        let hemi_ok = if self.flat_face_down { e.z >= 0.0 } else { e.z <= 0.0 };
        hemi_ok && e.dot(e) <= self.radius * self.radius
    }

    /// Half-ball volume, m³.
    pub fn volume(&self) -> f64 {
        2.0 / 3.0 * std::f64::consts::PI * self.radius.powi(3)
    }
}

/// Harmonic vibration of the source along the vibration axis.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VibrationState {
    /// Amplitude A, m.
    pub amplitude: f64,
    /// Angular frequency ω_M, rad/s.
    pub angular_frequency: f64,
    /// Phase offset, rad. Zero pins t = 0 to the left turning point.
    pub phase_origin: f64,
}

impl VibrationState {
    pub fn validate(&self) -> Result<()> {
        if self.amplitude < 0.0 {
            return Err(Error::Validation(format!("amplitude must be >= 0, got {}", self.amplitude)));
        }
        if !(self.angular_frequency > 0.0) {
            return Err(Error::Validation(format!(
                "angular_frequency must be > 0, got {}",
                self.angular_frequency
            )));
        }
        Ok(())
    }

    /// v(t) = A ω sin(ω t + φ₀), m/s.
    pub fn velocity(&self, t: f64) -> f64 {
        self.amplitude * self.angular_frequency * (self.angular_frequency * t + self.phase_origin).sin()
    }

    /// y(t) = -A cos(ω t + φ₀), m. Antiderivative of `velocity`.
    pub fn displacement(&self, t: f64) -> f64 {
        -self.amplitude * (self.angular_frequency * t + self.phase_origin).cos()
    }

    /// Max |v| over t.
    pub fn max_velocity(&self) -> f64 {
        self.amplitude * self.angular_frequency
    }

    pub fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.angular_frequency
    }
}

/// Orientation of the NV quantization axis relative to the lab frame.
///
/// The vibration axis is y; the NV axis lies in the x-z plane, tilted by θ
/// from x toward z, so the NV projection of v × r̂ for v along y is
/// (−r_x sinθ + r_z cosθ)/r. Immutable after construction.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FrameConvention {
    nv_axis: Vec3,
    vibration_axis: Vec3,
    theta: f64,
}

pub const UNIT_TOL: f64 = 1e-12;

impl FrameConvention {
    /// Build from the NV tilt θ, with the vibration axis on y and the NV
    /// axis at (cosθ, 0, sinθ).
    pub fn from_theta(theta: f64) -> Self {
        FrameConvention {
            nv_axis: Vec3::new(theta.cos(), 0.0, theta.sin()),
            vibration_axis: Vec3::new(0.0, 1.0, 0.0),
            theta,
        }
    }

    /// Default θ = arcsin(1/√3).
    pub fn published_default() -> Self {
        Self::from_theta((1.0 / 3f64.sqrt()).asin())
    }

    pub fn new(nv_axis: Vec3, vibration_axis: Vec3, theta: f64) -> Result<Self> {
        if (nv_axis.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::Validation("nv_axis is not unit-norm".into()));
        }
        if (vibration_axis.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::Validation("vibration_axis is not unit-norm".into()));
        }
        let expected = Self::from_theta(theta);
        if (nv_axis - expected.nv_axis).norm() > UNIT_TOL
            || (vibration_axis - expected.vibration_axis).norm() > UNIT_TOL
        {
            return Err(Error::Validation(format!(
                "axes must match the y-vibration / x-z NV layout for theta = {theta}: \
                 expected nv {:?}, vibration {:?}",
                expected.nv_axis, expected.vibration_axis
            )));
        }
        Ok(FrameConvention { nv_axis, vibration_axis, theta })
    }

    pub fn nv_axis(&self) -> Vec3 {
        self.nv_axis
    }

    pub fn vibration_axis(&self) -> Vec3 {
        self.vibration_axis
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

}

/// Echo sequence timing. Pulse lengths are recorded for jitter studies; the
/// phase model treats pulses as instantaneous.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SequenceTiming {
    /// Wait between π/2 and π pulses, s.
    pub tau: f64,
    pub pi_half_len: f64,
    pub pi_len: f64,
    pub laser_init_len: f64,
    pub laser_read_len: f64,
    /// Synchronization jitter bound on the second window start, s.
    pub sync_jitter: f64,
}

impl SequenceTiming {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("tau", self.tau),
            ("pi_half_len", self.pi_half_len),
            ("pi_len", self.pi_len),
            ("laser_init_len", self.laser_init_len),
            ("laser_read_len", self.laser_read_len),
            ("sync_jitter", self.sync_jitter),
        ];
        for (name, v) in all {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Validation(format!("timing field {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Check τ = π/ω_M against a linked vibration within a relative tolerance.
    pub fn check_tau_matches(&self, vib: &VibrationState, rel_tol: f64) -> Result<()> {
        let expected = std::f64::consts::PI / vib.angular_frequency;
        if (self.tau - expected).abs() > rel_tol * expected {
            return Err(Error::Validation(format!(
                "tau = {} is inconsistent with pi/omega_M = {expected}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Displacement vector r(t) from the spin (origin) to a source volume
/// element, with the source offset along the vibration axis by the
/// instantaneous displacement.
pub fn displacement_to_element(
    geom: &SourceGeometry,
    frame: &FrameConvention,
    vib: &VibrationState,
    element: Vec3,
    t: f64,
) -> Result<Vec3> {
    if !geom.contains_local(element) {
        return Err(Error::Validation(format!(
            "element ({}, {}, {}) lies outside the half-ball",
            element.x, element.y, element.z
        )));
    }
    Ok(element_lab_position(geom, frame, vib.displacement(t)) + element)
}

/// Lab-frame position of the source-local origin for a given vibration offset.
fn element_lab_position(geom: &SourceGeometry, frame: &FrameConvention, offset: f64) -> Vec3 {
    Vec3::new(0.0, 0.0, geom.center_z()) + frame.vibration_axis() * offset
}

/// Lab-frame position of a source-local element at a given vibration offset.
pub fn element_position_at_offset(
    geom: &SourceGeometry,
    frame: &FrameConvention,
    element: Vec3,
    offset: f64,
) -> Vec3 {
    element_lab_position(geom, frame, offset) + element
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn published_vib() -> VibrationState {
        VibrationState {
            amplitude: 120e-9,
            angular_frequency: 2.0 * std::f64::consts::PI * 70.47e3,
            phase_origin: 0.0,
        }
    }

    fn published_geom() -> SourceGeometry {
        SourceGeometry {
            radius: 250e-6,
            nucleon_density: 1.33e30,
            standoff: 1e-6,
            flat_face_down: true,
        }
    }

    #[test]
    fn peak_velocity_matches_published_value() {
        let vib = published_vib();
        // sin = 1 at omega*t = pi/2
        let t = 0.25 * vib.period();
        assert_relative_eq!(vib.velocity(t), 0.053, max_relative = 5e-3);
        assert_relative_eq!(vib.max_velocity(), vib.velocity(t), max_relative = 1e-12);
    }

    #[test]
    fn velocity_trivial_cases() {
        let mut vib = published_vib();
        assert_eq!(vib.velocity(0.0), 0.0);
        vib.amplitude = 0.0;
        assert_eq!(vib.velocity(1.23e-5), 0.0);
    }

    #[test]
    fn displacement_turning_points() {
        let vib = published_vib();
        assert_relative_eq!(vib.displacement(0.0), -vib.amplitude, max_relative = 1e-15);
        let half = std::f64::consts::PI / vib.angular_frequency;
        assert_relative_eq!(vib.displacement(half), vib.amplitude, max_relative = 1e-12);
    }

    #[test]
    fn velocity_is_derivative_of_displacement() {
        let vib = published_vib();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-9 * vib.period();
        for _ in 0..20 {
            let t: f64 = rng.gen::<f64>() * 3.0 * vib.period();
            let fd = (vib.displacement(t + h) - vib.displacement(t - h)) / (2.0 * h);
            let v = vib.velocity(t);
            let scale = vib.max_velocity();
            assert!((fd - v).abs() <= 1e-6 * scale, "t={t}: fd={fd}, v={v}");
        }
    }

    #[test]
    fn frame_self_consistency() {
        let f = FrameConvention::published_default();
        assert_relative_eq!(f.theta().sin(), 1.0 / 3f64.sqrt(), max_relative = 1e-14);
        assert!((f.nv_axis().norm() - 1.0).abs() < UNIT_TOL);
        // NV axis is perpendicular to the vibration axis and lies in x-z
        assert!(f.nv_axis().dot(f.vibration_axis()).abs() < UNIT_TOL);
        assert!(f.nv_axis().y.abs() < UNIT_TOL);
        assert_relative_eq!(f.nv_axis().z, f.theta().sin(), max_relative = 1e-14);
        // non-unit axis rejected
        assert!(FrameConvention::new(Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.0, 1.0, 0.0), 0.5).is_err());
    }

    #[test]
    fn displacement_to_element_on_axis_points() {
        let geom = published_geom();
        let frame = FrameConvention::published_default();
        let vib = published_vib();
        // zero displacement at omega*t = pi/2
        let t_mid = 0.25 * vib.period();
        let r = displacement_to_element(&geom, &frame, &vib, Vec3::ZERO, t_mid).unwrap();
        assert_relative_eq!(r.norm(), 1e-6, max_relative = 1e-12);
        let top = Vec3::new(0.0, 0.0, geom.radius);
        let r = displacement_to_element(&geom, &frame, &vib, top, t_mid).unwrap();
        assert_relative_eq!(r.norm(), geom.standoff + geom.radius, max_relative = 1e-12);
    }

    #[test]
    fn element_outside_half_ball_rejected() {
        let geom = published_geom();
        let frame = FrameConvention::published_default();
        let vib = published_vib();
        let below = Vec3::new(0.0, 0.0, -1e-9);
        assert!(displacement_to_element(&geom, &frame, &vib, below, 0.0).is_err());
        let outside = Vec3::new(geom.radius, 0.0, geom.radius);
        assert!(displacement_to_element(&geom, &frame, &vib, outside, 0.0).is_err());
    }

    #[test]
    fn element_difference_parallel_to_vibration_axis() {
        let geom = published_geom();
        let frame = FrameConvention::published_default();
        let vib = published_vib();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let e = loop {
                let c = Vec3::new(
                    (rng.gen::<f64>() * 2.0 - 1.0) * geom.radius,
                    (rng.gen::<f64>() * 2.0 - 1.0) * geom.radius,
                    rng.gen::<f64>() * geom.radius,
                );
                if geom.contains_local(c) {
                    break c;
                }
            };
            let t1 = rng.gen::<f64>() * vib.period();
            let t2 = rng.gen::<f64>() * vib.period();
            let d = displacement_to_element(&geom, &frame, &vib, e, t1).unwrap()
                - displacement_to_element(&geom, &frame, &vib, e, t2).unwrap();
            let cross = d.cross(frame.vibration_axis());
            assert!(cross.norm() <= 1e-18, "difference not parallel to vibration axis");
        }
    }

    #[test]
    fn half_period_shift_flips_lateral_offset() {
        let geom = published_geom();
        let frame = FrameConvention::published_default();
        let vib = published_vib();
        let half = std::f64::consts::PI / vib.angular_frequency;
        let e = Vec3::new(1e-5, -2e-5, 3e-5);
        for t in [0.0, 1.7e-6, 4.2e-6] {
            let r1 = displacement_to_element(&geom, &frame, &vib, e, t).unwrap();
            let r2 = displacement_to_element(&geom, &frame, &vib, e, t + half).unwrap();
            // lateral (y) offsets from the element's rest position flip sign
            let rest = element_position_at_offset(&geom, &frame, e, 0.0);
            assert_relative_eq!(r1.y - rest.y, -(r2.y - rest.y), epsilon = 1e-20, max_relative = 1e-9);
        }
    }
}
