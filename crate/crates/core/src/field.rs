//! Volume and time integration of the effective field over the half-ball
//! source: deterministic adaptive quadrature, a seeded Monte-Carlo oracle,
//! echo-window time series and window averages.
//!
//! Displacement convention: kernels are fed r = spin − element (nucleon to
//! spin). With the left-turning-point time origin this reproduces the
//! measured negative echo phase for a positive coupling.

use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::geometry::{element_position_at_offset, FrameConvention, SequenceTiming, SourceGeometry, VibrationState};
use crate::kernels::{exotic_field_prefactor, CouplingPoint};
use crate::quadrature::{adaptive_cubature, gauss_legendre, CubatureOptions, CubatureResult};
use crate::vec3::Vec3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureConfig {
    /// Relative tolerance on each integral component.
    pub rel_tol: f64,
    /// Absolute tolerance floor, T.
    pub abs_tol: f64,
    pub max_evaluations: usize,
    pub subdivision_depth: u32,
    pub mc_samples: usize,
    pub mc_seed: u64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            rel_tol: 1e-6,
            abs_tol: 0.0,
            max_evaluations: 20_000_000,
            subdivision_depth: 40,
            mc_samples: 100_000,
            mc_seed: 7,
        }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(Error::Validation("rel_tol must be > 0".into()));
        }
        if self.abs_tol < 0.0 {
            return Err(Error::Validation("abs_tol must be >= 0".into()));
        }
        Ok(())
    }

    pub fn cubature_options(&self) -> CubatureOptions {
        CubatureOptions {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            max_evaluations: self.max_evaluations,
            max_depth: self.subdivision_depth,
        }
    }

    pub fn validate_mc(&self) -> Result<()> {
        if self.mc_samples < 10_000 {
            return Err(Error::Validation(format!(
                "mc_samples must be >= 1e4 for the MC oracle, got {}",
                self.mc_samples
            )));
        }
        Ok(())
    }
}

/// A single volume-integral result with its error bound.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FieldEstimate {
    /// Field value, T.
    pub value: f64,
    /// Quadrature error bound, T.
    pub error_bound: f64,
    pub evaluations: usize,
}

pub(crate) fn half_ball_bounds(geom: &SourceGeometry) -> ([f64; 3], [f64; 3]) {
    let fp = std::f64::consts::FRAC_PI_2;
    if geom.flat_face_down {
        ([0.0, 0.0, 0.0], [1.0, fp, 2.0 * std::f64::consts::PI])
    } else {
        ([0.0, fp, 0.0], [1.0, std::f64::consts::PI, 2.0 * std::f64::consts::PI])
    }
}

/// Exponentially graded radial coordinate, ρ = d·(e^{σw} − 1) with
/// e^σ = 1 + R/d. The Yukawa factor decays on scale λ in ρ, which uniform
/// bisection of [0, R] resolves very slowly when λ ≪ R; in w the decay
/// scale is ≳ λ/(σ(ρ + d)) at every ρ, so a peak at any range costs the
/// same bounded number of refinement levels. For the dome-down orientation
/// the nearest elements sit at ρ = R and the grading is mirrored.
pub(crate) fn radial_map(geom: &SourceGeometry, w: f64) -> (f64, f64) {
    let d = geom.standoff;
    let sigma = (1.0 + geom.radius / d).ln();
    let e = (sigma * w).exp();
    let s = d * (e - 1.0);
    let jac = sigma * d * e;
    if geom.flat_face_down {
        (s.min(geom.radius), jac)
    } else {
        ((geom.radius - s).max(0.0), jac)
    }
}

pub(crate) fn local_element(geom: &SourceGeometry, u: &[f64; 3]) -> (Vec3, f64) {
    // (w, polar angle, azimuth): the polar angle (rather than its cosine)
    // keeps the integrand free of the sqrt(1 - c²) kink at the pole
    let (w, alpha, phi) = (u[0], u[1], u[2]);
    let (rho, drho) = radial_map(geom, w);
    let (s, c) = alpha.sin_cos();
    (Vec3::new(rho * s * phi.cos(), rho * s * phi.sin(), rho * c), rho * rho * s * drho)
}

/// Geometry integrals ∫_V projection·yukawa dV for a set of force ranges at
/// one vibration offset. Multiplying by ρ·f⊥·v_y·ħ/(4π m_e c γ_e) gives the
/// field. The shared geometry work is done once per point for all λ.
pub fn unit_geometry_integrals(
    geom: &SourceGeometry,
    frame: &FrameConvention,
    offset: f64,
    lambdas: &[f64],
    q: &QuadratureConfig,
) -> Result<CubatureResult> {
    geom.validate()?;
    let (lo, hi) = half_ball_bounds(geom);
    let theta = frame.theta();
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let guard = 0.5 * geom.standoff;
    let mut guard_tripped = false;

    let res = adaptive_cubature(lo, hi, lambdas.len(), &q.cubature_options(), |u, out| {
        let (e, jac) = local_element(geom, u);
        // r from nucleon to spin
        let r = -element_position_at_offset(geom, frame, e, offset);
        let rn = r.norm();
        if rn < guard {
            guard_tripped = true;
        }
        let projection = (-r.x * sin_t + r.z * cos_t) / rn;
        let base = projection * jac;
        let inv_r2 = 1.0 / (rn * rn);
        for (o, &lambda) in out.iter_mut().zip(lambdas.iter()) {
            *o = base * (1.0 / (lambda * rn) + inv_r2) * (-rn / lambda).exp();
        }
    })?;
    if guard_tripped {
        return Err(Error::Validation(format!(
            "volume element closer than standoff/2 = {guard} m to the spin; geometry is inconsistent"
        )));
    }
    Ok(res)
}

fn field_scale(geom: &SourceGeometry, cp: &CouplingPoint, v: f64, k: &PhysicalConstants) -> f64 {
    geom.nucleon_density * exotic_field_prefactor(k) * cp.f_perp * v
}

/// Effective field ρ·∫_V B(r(element, t)) dV at time t, T.
pub fn integrate_field(
    geom: &SourceGeometry,
    frame: &FrameConvention,
    vib: &VibrationState,
    cp: &CouplingPoint,
    t: f64,
    q: &QuadratureConfig,
    k: &PhysicalConstants,
) -> Result<FieldEstimate> {
    cp.validate()?;
    vib.validate()?;
    let scale = field_scale(geom, cp, vib.velocity(t), k);
    if scale == 0.0 {
        // f_perp = 0 or a velocity node: the integral is exactly zero
        geom.validate()?;
        return Ok(FieldEstimate { value: 0.0, error_bound: 0.0, evaluations: 0 });
    }
    let res = unit_geometry_integrals(geom, frame, vib.displacement(t), &[cp.lambda], q)?;
    if !res.converged {
        return Err(Error::Convergence {
            msg: format!("integrate_field: budget exhausted after {} evaluations", res.evaluations),
            estimate: res.values[0] * scale,
            error_bound: res.error_bounds[0] * scale.abs(),
        });
    }
    Ok(FieldEstimate {
        value: res.values[0] * scale,
        error_bound: res.error_bounds[0] * scale.abs(),
        evaluations: res.evaluations,
    })
}

/// Monte-Carlo oracle for `integrate_field`: importance sampling in
/// spin-centered spherical coordinates with a counter-based generator keyed
/// by (seed, sample index). Returns (mean, standard error).
///
/// The radial proposal is the truncated exponential e^(−u/λ) in u = r − d,
/// which cancels the Yukawa decay so sample weights stay O(1); uniform
/// sampling of the support would waste essentially every draw when λ ≪ R.
/// Radii are truncated at r = d + 46λ; the excluded tail is suppressed by
/// e⁻⁴⁶ relative to the peak.
pub fn mc_field_oracle(
    geom: &SourceGeometry,
    frame: &FrameConvention,
    vib: &VibrationState,
    cp: &CouplingPoint,
    t: f64,
    q: &QuadratureConfig,
    k: &PhysicalConstants,
) -> Result<(f64, f64)> {
    cp.validate()?;
    geom.validate()?;
    q.validate_mc()?;
    let scale = field_scale(geom, cp, vib.velocity(t), k);
    if scale == 0.0 {
        return Ok((0.0, 0.0));
    }
    let offset = vib.displacement(t);
    let theta = frame.theta();
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let lambda = cp.lambda;
    let d = geom.standoff;
    // every body point sits at z >= d, so r >= d and cos(polar) = z/r >= mu0
    let u_max = 46.0 * lambda;
    let mu0 = d / (d + u_max);
    let z_trunc = 1.0 - (-u_max / lambda).exp();
    // constant part of the importance weight: r² dr dΩ over the proposal
    // density, with the λ-scale exponential pulled out of the integrand
    let w_const =
        2.0 * std::f64::consts::PI * (1.0 - mu0) * lambda * z_trunc * (-d / lambda).exp();
    let origin = element_position_at_offset(geom, frame, Vec3::ZERO, offset);

    let eval_sample = |i: usize| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(q.mc_seed);
        rng.set_stream(i as u64);
        let u = -lambda * (1.0 - rng.gen::<f64>() * z_trunc).ln();
        let rn = d + u;
        let mu = mu0 + rng.gen::<f64>() * (1.0 - mu0);
        let phi = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
        let s = (1.0 - mu * mu).max(0.0).sqrt();
        let p = Vec3::new(rn * s * phi.cos(), rn * s * phi.sin(), rn * mu);
        if !geom.contains_local(p - origin) {
            return 0.0;
        }
        // r from nucleon to spin is -p; e^(−r/λ) = e^(−d/λ)·e^(−u/λ) and the
        // u-part cancels against the proposal, leaving it inside w_const
        let projection = (p.x * sin_t - p.z * cos_t) / rn;
        projection * (1.0 / (lambda * rn) + 1.0 / (rn * rn)) * rn * rn * w_const
    };

    // fixed chunking so the reduction order is independent of thread count
    const CHUNK: usize = 4096;
    let n = q.mc_samples;
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<(f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(n);
            let mut s = 0.0;
            let mut s2 = 0.0;
            for i in start..end {
                let v = eval_sample(i);
                s += v;
                s2 += v * v;
            }
            (s, s2)
        })
        .collect();
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for (s, s2) in partials {
        sum += s;
        sum2 += s2;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum2 - sum * sum / nf) / (nf - 1.0)).max(0.0);
    let std_err = (var / nf).sqrt();
    Ok((mean * scale, std_err * scale.abs()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub geometry_hash: String,
    pub coupling: String,
}

/// Sampled effective field over one echo window pair [0, 2τ], at
/// Gauss-Legendre nodes per window so that window integrals are the
/// weighted dot products.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldTimeSeries {
    /// Sample times, s, strictly increasing over (0, 2τ).
    pub times: Vec<f64>,
    /// Field values, T.
    pub values: Vec<f64>,
    /// Integration weights matching `times`, s.
    pub weights: Vec<f64>,
    /// Half-window length τ, s.
    pub tau: f64,
    pub meta: SeriesMeta,
}

fn geometry_hash(geom: &SourceGeometry, frame: &FrameConvention, vib: &VibrationState) -> String {
    let mut h = Sha256::new();
    let blob = format!(
        "{};{};{};{};{};{};{};{:?};{:?}",
        geom.radius,
        geom.nucleon_density,
        geom.standoff,
        geom.flat_face_down,
        vib.amplitude,
        vib.angular_frequency,
        vib.phase_origin,
        frame.nv_axis(),
        frame.vibration_axis()
    );
    h.update(blob.as_bytes());
    let d = h.finalize();
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Sample B_eff at `n_samples` Gauss-Legendre nodes per window over [0, τ]
/// and [τ, 2τ].
pub fn field_time_series(
    geom: &SourceGeometry,
    frame: &FrameConvention,
    vib: &VibrationState,
    cp: &CouplingPoint,
    timing: &SequenceTiming,
    n_samples: usize,
    q: &QuadratureConfig,
    k: &PhysicalConstants,
) -> Result<FieldTimeSeries> {
    if n_samples < 16 || n_samples % 2 != 0 {
        return Err(Error::Validation(format!(
            "n_samples must be even and >= 16, got {n_samples}"
        )));
    }
    timing.validate()?;
    let tau = timing.tau;
    let rule = gauss_legendre(n_samples);
    let mut times = Vec::with_capacity(2 * n_samples);
    let mut weights = Vec::with_capacity(2 * n_samples);
    for w in 0..2 {
        let (a, b) = (w as f64 * tau, (w as f64 + 1.0) * tau);
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        for &(x, wt) in &rule {
            times.push(mid + half * x);
            weights.push(wt * half);
        }
    }
    let values: Vec<f64> = times
        .par_iter()
        .map(|&t| integrate_field(geom, frame, vib, cp, t, q, k).map(|e| e.value))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::Convergence { msg, estimate, error_bound } => Error::Convergence {
                msg: format!("field_time_series: {msg}"),
                estimate,
                error_bound,
            },
            other => other,
        })?;
    Ok(FieldTimeSeries {
        times,
        values,
        weights,
        tau,
        meta: SeriesMeta {
            geometry_hash: geometry_hash(geom, frame, vib),
            coupling: format!("lambda={:e} m, f_perp={:e}", cp.lambda, cp.f_perp),
        },
    })
}

impl FieldTimeSeries {
    /// Build directly from a closure, for synthetic series in tests and the
    /// echo module (same node layout as `field_time_series`).
    pub fn from_function<F: Fn(f64) -> f64>(tau: f64, n_samples: usize, f: F) -> Self {
        let rule = gauss_legendre(n_samples);
        let mut times = Vec::new();
        let mut weights = Vec::new();
        for w in 0..2 {
            let (a, b) = (w as f64 * tau, (w as f64 + 1.0) * tau);
            let mid = 0.5 * (a + b);
            let half = 0.5 * (b - a);
            for &(x, wt) in &rule {
                times.push(mid + half * x);
                weights.push(wt * half);
            }
        }
        let values = times.iter().map(|&t| f(t)).collect();
        FieldTimeSeries {
            times,
            values,
            weights,
            tau,
            meta: SeriesMeta { geometry_hash: "synthetic".into(), coupling: "synthetic".into() },
        }
    }

    pub fn n_per_window(&self) -> usize {
        self.times.len() / 2
    }

    /// ∫ B dt over window 0 ([0, τ]) or 1 ([τ, 2τ]).
    pub fn window_integral(&self, window: usize) -> f64 {
        let n = self.n_per_window();
        let range = if window == 0 { 0..n } else { n..2 * n };
        let mut sum = 0.0;
        let mut c = 0.0;
        for i in range {
            let y = self.values[i] * self.weights[i] - c;
            let t = sum + y;
            c = (t - sum) - y;
            sum = t;
        }
        sum
    }

    /// Mean of B over an arbitrary window inside [0, 2τ]. Windows matching
    /// [0, τ], [τ, 2τ] or [0, 2τ] use the exact quadrature weights; others
    /// integrate the piecewise-linear interpolant of the samples.
    pub fn window_average(&self, window: (f64, f64)) -> Result<f64> {
        let (t1, t2) = window;
        let span = 2.0 * self.tau;
        let eps = 1e-12 * self.tau;
        if t1 < -eps || t2 > span + eps || t2 <= t1 {
            return Err(Error::Validation(format!(
                "window [{t1}, {t2}] outside series span [0, {span}]"
            )));
        }
        let matches = |a: f64, b: f64| (t1 - a).abs() <= eps && (t2 - b).abs() <= eps;
        if matches(0.0, self.tau) {
            return Ok(self.window_integral(0) / self.tau);
        }
        if matches(self.tau, span) {
            return Ok(self.window_integral(1) / self.tau);
        }
        if matches(0.0, span) {
            return Ok((self.window_integral(0) + self.window_integral(1)) / span);
        }
        // piecewise-linear fallback
        let mut integral = 0.0;
        let ts = &self.times;
        let vs = &self.values;
        let value_at = |t: f64| -> f64 {
            match ts.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
                Ok(i) => vs[i],
                Err(0) => vs[0],
                Err(i) if i >= ts.len() => vs[ts.len() - 1],
                Err(i) => {
                    let f = (t - ts[i - 1]) / (ts[i] - ts[i - 1]);
                    vs[i - 1] + f * (vs[i] - vs[i - 1])
                }
            }
        };
        let mut prev_t = t1;
        let mut prev_v = value_at(t1);
        for i in 0..ts.len() {
            if ts[i] <= t1 || ts[i] >= t2 {
                continue;
            }
            integral += 0.5 * (prev_v + vs[i]) * (ts[i] - prev_t);
            prev_t = ts[i];
            prev_v = vs[i];
        }
        integral += 0.5 * (prev_v + value_at(t2)) * (t2 - prev_t);
        Ok(integral / (t2 - t1))
    }

    pub fn to_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t_s", "B_T"])?;
        for (t, v) in self.times.iter().zip(self.values.iter()) {
            wtr.write_record([format!("{t}"), format!("{v}")])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
