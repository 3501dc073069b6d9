//! Echo observables: phase accumulation, populations, interference signal
//! and the phase-to-mean-field conversion b̄ = φ/(2 γ_e τ).

use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::field::FieldTimeSeries;
use crate::geometry::SequenceTiming;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EchoPhase {
    /// Accumulated echo phase, rad.
    pub phi: f64,
    /// Half-window length τ, s.
    pub tau: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ReadoutPoint {
    pub phi_mw: f64,
    pub p_plus: f64,
    pub p_minus: f64,
    /// I = P₊ + P₋.
    pub signal: f64,
}

/// φ = γ_e (∫₀^τ B dt − ∫_τ^{2τ} B dt). Pulses are instantaneous in this
/// model; their recorded lengths only matter for jitter studies.
pub fn echo_phase(series: &FieldTimeSeries, timing: &SequenceTiming, k: &PhysicalConstants) -> Result<EchoPhase> {
    if (series.tau - timing.tau).abs() > 1e-9 * timing.tau.max(1e-30) {
        return Err(Error::Validation(format!(
            "series tau {} does not match sequence tau {}",
            series.tau, timing.tau
        )));
    }
    let phi = k.gamma_e * (series.window_integral(0) - series.window_integral(1));
    Ok(EchoPhase { phi, tau: series.tau })
}

/// P₊ = [1 + cos(φ_mw + φ)]/2, P₋ = [1 + cos(φ_mw + π − φ)]/2,
/// I = P₊ + P₋ = 1 − sin(φ_mw)·sin(φ).
pub fn populations(phase: &EchoPhase, phi_mw: f64) -> ReadoutPoint {
    let p_plus = 0.5 * (1.0 + (phi_mw + phase.phi).cos());
    let p_minus = 0.5 * (1.0 + (phi_mw + std::f64::consts::PI - phase.phi).cos());
    ReadoutPoint { phi_mw, p_plus, p_minus, signal: p_plus + p_minus }
}

/// b̄ = φ/(2 γ_e τ), T.
pub fn mean_field_from_phase(phase: &EchoPhase, k: &PhysicalConstants) -> f64 {
    phase.phi / (2.0 * k.gamma_e * phase.tau)
}

/// Optional fringe-contrast factor exp(−(2τ/T2)^n) for decoherence studies.
pub fn fringe_contrast(tau: f64, t2: f64, exponent: f64) -> f64 {
    (-(2.0 * tau / t2).powf(exponent)).exp()
}

/// Weighted least-squares estimate of φ from an I(φ_mw) fringe,
/// I = 1 − sin(φ_mw)·sin(φ). Linear in sin(φ); the branch is fixed to
/// (−π/2, π/2]. Returns (φ, standard error).
///
/// `weights`: per-point 1/σ² when known; uniform weights estimate σ from
/// the residuals.
pub fn fit_phase_from_fringe(points: &[ReadoutPoint], weights: Option<&[f64]>) -> Result<(f64, f64)> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.phi_mw).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if distinct.len() < 4 {
        return Err(Error::Validation(format!(
            "fringe fit needs >= 4 distinct phi_mw values, got {}",
            distinct.len()
        )));
    }
    let n = points.len();
    let w_of = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (i, p) in points.iter().enumerate() {
        let x = p.phi_mw.sin();
        let w = w_of(i);
        sxx += w * x * x;
        sxy += w * x * (1.0 - p.signal);
    }
    let scale: f64 = points.iter().map(|p| p.phi_mw.sin().powi(2)).sum::<f64>() / n as f64;
    if sxx <= 1e-12 * (n as f64) * scale.max(1e-12) || scale < 1e-20 {
        return Err(Error::Rank(
            "all phi_mw values have sin(phi_mw) ~ 0; the fringe design is degenerate".into(),
        ));
    }
    let s = sxy / sxx;
    // variance of the slope estimate
    let var_s = if weights.is_some() {
        1.0 / sxx
    } else {
        let rss: f64 = points
            .iter()
            .map(|p| {
                let r = (1.0 - p.signal) - p.phi_mw.sin() * s;
                r * r
            })
            .sum();
        let dof = (n as f64 - 1.0).max(1.0);
        rss / dof / sxx
    };
    let s_clamped = s.clamp(-1.0, 1.0);
    let phi = s_clamped.asin();
    let denom = (1.0 - s_clamped * s_clamped).max(1e-12).sqrt();
    Ok((phi, var_s.sqrt() / denom))
}
