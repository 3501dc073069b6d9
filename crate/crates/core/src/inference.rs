//! Fits and derived curves: velocity slope, two-peak distance fit of the
//! coupling spectrum, sensitivity curve and exclusion comparison.
//!
//! The distance model b̄(d) = Σᵢ f(λᵢ)·b̄_unit(λᵢ, d) is linear in the peak
//! amplitudes, so fitting profiles them out exactly (variable projection)
//! and the nonlinear search runs only over the peak positions in log space.
//! Unit responses are precomputed once per (λ grid, distance list) and
//! reused across fits.

use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::field::{unit_geometry_integrals, QuadratureConfig};
use crate::geometry::{FrameConvention, SequenceTiming, SourceGeometry, VibrationState};
use crate::kernels::exotic_field_prefactor;
use crate::quadrature::gauss_legendre;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ForceRangePeak {
    /// Mean force range λc, m.
    pub lambda_c: f64,
    /// Width Γ, m.
    pub gamma_w: f64,
    /// Peak coupling f⊥ (unnormalized Gaussian: value at λ = λc).
    pub amplitude: f64,
}

impl ForceRangePeak {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c > 0.0) {
            return Err(Error::Validation(format!("lambda_c must be > 0, got {}", self.lambda_c)));
        }
        if !(self.gamma_w > 0.0) {
            return Err(Error::Validation(format!("gamma_w must be > 0, got {}", self.gamma_w)));
        }
        Ok(())
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        let z = (lambda - self.lambda_c) / self.gamma_w;
        self.amplitude * (-0.5 * z * z).exp()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingSpectrum {
    pub peaks: Vec<ForceRangePeak>,
    /// Sample points λᵢ, m, strictly increasing.
    pub lambda_grid: Vec<f64>,
}

pub const DEFAULT_GRID_LEN: usize = 200;
pub const DEFAULT_GRID_MIN: f64 = 1e-8;
pub const DEFAULT_GRID_MAX: f64 = 1e-3;

/// 200 log-spaced sample points over [1e-8, 1e-3] m.
pub fn default_lambda_grid() -> Vec<f64> {
    log_spaced(DEFAULT_GRID_MIN, DEFAULT_GRID_MAX, DEFAULT_GRID_LEN)
}

pub fn log_spaced(min: f64, max: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && min > 0.0 && max > min);
    let (a, b) = (min.ln(), max.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

impl CouplingSpectrum {
    pub fn with_default_grid(peaks: Vec<ForceRangePeak>) -> Self {
        CouplingSpectrum { peaks, lambda_grid: default_lambda_grid() }
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.peaks {
            p.validate()?;
        }
        if self.lambda_grid.len() < 2 {
            return Err(Error::Validation("lambda_grid needs at least 2 points".into()));
        }
        if !(self.lambda_grid[0] > 0.0) {
            return Err(Error::Validation("lambda_grid must be positive".into()));
        }
        for w in self.lambda_grid.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Validation("lambda_grid must be strictly increasing".into()));
            }
        }
        Ok(())
    }

    /// f(λ) = Σ_peaks amplitude·exp[−(λ−λc)²/2Γ²].
    pub fn eval(&self, lambda: f64) -> f64 {
        self.peaks.iter().map(|p| p.eval(lambda)).sum()
    }
}

pub fn spectrum_eval(spec: &CouplingSpectrum, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Validation(format!("lambda must be > 0, got {lambda}")));
    }
    Ok(spec.eval(lambda))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DataRow {
    /// Abscissa: distance (m) or peak velocity (m/s).
    pub x: f64,
    /// Measured mean field b̄, T.
    pub bbar: f64,
    /// Per-point standard deviation, T.
    pub sigma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistanceDataset {
    pub rows: Vec<DataRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VelocityDataset {
    pub rows: Vec<DataRow>,
}

fn validate_rows(rows: &[DataRow], what: &str) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if !(r.x > 0.0) {
            return Err(Error::Validation(format!("{what} row {i}: abscissa must be > 0, got {}", r.x)));
        }
        if !(r.sigma > 0.0) {
            return Err(Error::Validation(format!("{what} row {i}: sigma must be > 0, got {}", r.sigma)));
        }
    }
    Ok(())
}

fn read_rows<R: std::io::Read>(reader: R, headers: [&str; 3], nt_columns: bool) -> Result<Vec<DataRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let got = rdr.headers()?.clone();
    for (i, want) in headers.iter().enumerate() {
        match got.get(i) {
            Some(h) if h.trim() == *want => {}
            other => {
                return Err(Error::Validation(format!(
                    "CSV column {i}: expected header '{want}', got {:?}",
                    other.unwrap_or("<missing>")
                )))
            }
        }
    }
    let scale = if nt_columns { 1e-9 } else { 1.0 };
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut vals = [0.0f64; 3];
        for i in 0..3 {
            let s = rec.get(i).ok_or_else(|| {
                Error::Validation(format!("CSV data row {line}: missing column '{}'", headers[i]))
            })?;
            vals[i] = s.trim().parse::<f64>().map_err(|_| {
                Error::Validation(format!(
                    "CSV data row {line}, column '{}': cannot parse '{s}' as a number",
                    headers[i]
                ))
            })?;
        }
        rows.push(DataRow { x: vals[0], bbar: vals[1] * scale, sigma: vals[2] * scale });
    }
    Ok(rows)
}

impl DistanceDataset {
    /// Schema: d_m, bbar_nT, sigma_nT (fields in nT, stored in T).
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let rows = read_rows(reader, ["d_m", "bbar_nT", "sigma_nT"], true)?;
        validate_rows(&rows, "distance dataset")?;
        Ok(DistanceDataset { rows })
    }

    pub fn to_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_rows(w, ["d_m", "bbar_nT", "sigma_nT"], &self.rows, true)
    }
}

impl VelocityDataset {
    /// Schema: vmax_mps, bbar_nT, sigma_nT (fields in nT, stored in T).
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let rows = read_rows(reader, ["vmax_mps", "bbar_nT", "sigma_nT"], true)?;
        validate_rows(&rows, "velocity dataset")?;
        Ok(VelocityDataset { rows })
    }

    pub fn to_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_rows(w, ["vmax_mps", "bbar_nT", "sigma_nT"], &self.rows, true)
    }
}

fn write_rows<W: std::io::Write>(w: W, headers: [&str; 3], rows: &[DataRow], nt_columns: bool) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(headers)?;
    let scale = if nt_columns { 1e9 } else { 1.0 };
    for r in rows {
        wtr.write_record([
            format!("{}", r.x),
            format!("{}", r.bbar * scale),
            format!("{}", r.sigma * scale),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct FitResult {
    /// Named best-fit values, in the model's SI units.
    pub parameters: Vec<(String, f64)>,
    pub std_errors: Vec<(String, f64)>,
    /// Covariance in the parameter order above.
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub dof: usize,
    /// Per-point residuals (data − model), T.
    pub residuals: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Unit-coupling responses

/// b̄ per unit f⊥, tabulated on (distance, λ): values[j][i] is the response at
/// distances[j], lambdas[i].
#[derive(Clone, Debug, Serialize)]
pub struct ResponseTable {
    pub lambdas: Vec<f64>,
    pub distances: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl ResponseTable {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j]
    }
}

/// Number of Gauss-Legendre time nodes for the first-window average.
const TIME_NODES: usize = 16;

/// b̄_unit(λᵢ, d) = (1/τ)∫₀^τ B_eff(λᵢ, f⊥ = 1, t) dt for every λ on the grid
/// and every distance. One vector cubature per time node shares the geometry
/// work across the whole λ grid.
pub fn unit_response_table(
    lambdas: &[f64],
    distances: &[f64],
    geom: &SourceGeometry,
    frame: &FrameConvention,
    vib: &VibrationState,
    timing: &SequenceTiming,
    q: &QuadratureConfig,
    k: &PhysicalConstants,
) -> Result<ResponseTable> {
    timing.validate()?;
    vib.validate()?;
    if lambdas.is_empty() || distances.is_empty() {
        return Err(Error::Validation("unit_response_table: empty lambda or distance list".into()));
    }
    for &d in distances {
        if !(d > 0.0) {
            return Err(Error::Validation(format!("distance must be > 0, got {d}")));
        }
    }
    let tau = timing.tau;
    let rule = gauss_legendre(TIME_NODES);
    let pref = geom.nucleon_density * exotic_field_prefactor(k);

    let mut values = Vec::with_capacity(distances.len());
    for &d in distances {
        let g = SourceGeometry { standoff: d, ..*geom };
        // weighted node sums, computed in parallel then reduced in node order
        let node_vals: Vec<Vec<f64>> = rule
            .par_iter()
            .map(|&(x, w)| -> Result<Vec<f64>> {
                let t = 0.5 * tau * (1.0 + x);
                let res = unit_geometry_integrals(&g, frame, vib.displacement(t), lambdas, q)?;
                if !res.converged {
                    return Err(Error::Convergence {
                        msg: format!(
                            "unit_response_table: budget exhausted at d = {d}, t = {t} after {} evaluations",
                            res.evaluations
                        ),
                        estimate: res.values[0],
                        error_bound: res.worst_error(),
                    });
                }
                let scale = pref * vib.velocity(t) * w * 0.5; // × τ/τ for the mean
                Ok(res.values.iter().map(|v| v * scale).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut row = vec![0.0; lambdas.len()];
        for nv in &node_vals {
            for (r, v) in row.iter_mut().zip(nv.iter()) {
                *r += v;
            }
        }
        values.push(row);
    }
    Ok(ResponseTable { lambdas: lambdas.to_vec(), distances: distances.to_vec(), values })
}

/// b̄(d) = Σᵢ f(λᵢ)·b̄_unit(λᵢ, d) from a precomputed response row.
pub fn model_bbar_from_row(spec: &CouplingSpectrum, lambdas: &[f64], row: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for (&l, &r) in lambdas.iter().zip(row.iter()) {
        let y = spec.eval(l) * r - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Direct (uncached) evaluation of the distance model at one distance.
#[allow(clippy::too_many_arguments)]
pub fn model_bbar(
    d: f64,
    spec: &CouplingSpectrum,
    geom: &SourceGeometry,
    frame: &FrameConvention,
    vib: &VibrationState,
    timing: &SequenceTiming,
    q: &QuadratureConfig,
    k: &PhysicalConstants,
) -> Result<f64> {
    spec.validate()?;
    let table = unit_response_table(&spec.lambda_grid, &[d], geom, frame, vib, timing, q, k)?;
    Ok(model_bbar_from_row(spec, &table.lambdas, table.row(0)))
}

// ---------------------------------------------------------------------------
// Velocity fit

/// Weighted least squares through the origin, b̄ = k·v_max.
pub fn fit_velocity(data: &VelocityDataset) -> Result<FitResult> {
    validate_rows(&data.rows, "velocity dataset")?;
    let n = data.rows.len();
    if n < 2 {
        return Err(Error::Validation(format!("fit_velocity needs >= 2 points, got {n}")));
    }
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for r in &data.rows {
        let w = 1.0 / (r.sigma * r.sigma);
        sxx += w * r.x * r.x;
        sxy += w * r.x * r.bbar;
    }
    if sxx <= 0.0 || !sxx.is_finite() {
        return Err(Error::Rank("fit_velocity: design matrix is singular (all abscissae zero?)".into()));
    }
    let k = sxy / sxx;
    let var = 1.0 / sxx;
    let residuals: Vec<f64> = data.rows.iter().map(|r| r.bbar - k * r.x).collect();
    let chi2 = data
        .rows
        .iter()
        .zip(residuals.iter())
        .map(|(r, res)| (res / r.sigma).powi(2))
        .sum();
    Ok(FitResult {
        parameters: vec![("k".into(), k)],
        std_errors: vec![("k".into(), var.sqrt())],
        covariance: vec![vec![var]],
        chi2,
        dof: n - 1,
        residuals,
    })
}

// ---------------------------------------------------------------------------
// Distance fit (two-peak spectrum)

/// Per-start diagnostics of the multi-start distance fit.
#[derive(Clone, Debug, Serialize)]
pub struct StartDiagnostic {
    pub init_lambda_c: [f64; 2],
    pub chi2: f64,
    pub converged: bool,
    pub iterations: usize,
    /// χ² after every accepted step; non-increasing by construction.
    pub accepted_chi2: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DistanceFit {
    pub result: FitResult,
    pub starts: Vec<StartDiagnostic>,
}

/// Solve the symmetric system a·x = b in place (Gaussian elimination with
/// partial pivoting); also returns the inverse of `a` for covariances.
fn solve_and_invert(a: &[Vec<f64>], b: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = b.len();
    // augmented [a | I | b]
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a[i].clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row.push(b[i]);
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        if m[piv][col].abs() < 1e-300 {
            return Err(Error::Rank(format!("singular normal equations at column {col}")));
        }
        m.swap(col, piv);
        let d = m[col][col];
        for v in m[col].iter_mut() {
            *v /= d;
        }
        for row in 0..n {
            if row != col {
                let f = m[row][col];
                if f != 0.0 {
                    let src = m[col].clone();
                    for (v, s) in m[row].iter_mut().zip(src.iter()) {
                        *v -= f * s;
                    }
                }
            }
        }
    }
    let x = (0..n).map(|i| m[i][2 * n]).collect();
    let inv = (0..n).map(|i| m[i][n..2 * n].to_vec()).collect();
    Ok((x, inv))
}

/// Weighted linear solve for the peak amplitudes at fixed positions/widths.
/// Returns (amplitudes, chi2). The basis can be rank-deficient when two
/// peaks coincide; that start is rejected by the caller.
fn profile_amplitudes(
    data: &DistanceDataset,
    basis: &[&[f64]], // basis[p][j]: response of unit-amplitude peak p at point j
) -> Result<(Vec<f64>, f64)> {
    let np = basis.len();
    let mut a = vec![vec![0.0; np]; np];
    let mut b = vec![0.0; np];
    for (j, r) in data.rows.iter().enumerate() {
        let w = 1.0 / (r.sigma * r.sigma);
        for p in 0..np {
            b[p] += w * basis[p][j] * r.bbar;
            for q in 0..np {
                a[p][q] += w * basis[p][j] * basis[q][j];
            }
        }
    }
    // reject near-degenerate bases (coincident peaks) via the scaled condition
    let scale = (0..np).map(|p| a[p][p]).fold(0.0f64, f64::max);
    if scale <= 0.0 {
        return Err(Error::Rank("distance fit: zero basis (no response on the grid?)".into()));
    }
    let det2 = if np == 2 { a[0][0] * a[1][1] - a[0][1] * a[1][0] } else { 1.0 };
    if np == 2 && det2.abs() < 1e-12 * scale * scale {
        return Err(Error::Rank("distance fit: peak basis is degenerate".into()));
    }
    let (x, _) = solve_and_invert(&a, &b)?;
    let mut chi2 = 0.0;
    for (j, r) in data.rows.iter().enumerate() {
        let model: f64 = (0..np).map(|p| x[p] * basis[p][j]).sum();
        chi2 += ((r.bbar - model) / r.sigma).powi(2);
    }
    Ok((x, chi2))
}

struct DistanceModel<'a> {
    data: &'a DistanceDataset,
    table: &'a ResponseTable,
    gammas: Vec<f64>,
}

impl DistanceModel<'_> {
    /// Basis vector of a unit-amplitude peak at λc over the data points.
    fn basis_of(&self, lambda_c: f64, gamma_w: f64) -> Vec<f64> {
        let peak = ForceRangePeak { lambda_c, gamma_w, amplitude: 1.0 };
        (0..self.data.rows.len())
            .map(|j| {
                let row = self.table.row(j);
                let mut s = 0.0;
                for (&l, &r) in self.table.lambdas.iter().zip(row.iter()) {
                    s += peak.eval(l) * r;
                }
                s
            })
            .collect()
    }

    /// χ² with amplitudes profiled out, as a function of log-positions.
    fn chi2_of(&self, log_lc: &[f64; 2]) -> Result<(Vec<f64>, f64)> {
        let b0 = self.basis_of(log_lc[0].exp(), self.gammas[0]);
        let b1 = self.basis_of(log_lc[1].exp(), self.gammas[1]);
        profile_amplitudes(self.data, &[&b0, &b1])
    }
}

const LM_MAX_ITER: usize = 80;

/// One Levenberg-Marquardt run over the log peak positions; amplitudes are
/// profiled at every evaluation. Returns (log positions, amplitudes, diag).
fn lm_run(model: &DistanceModel, init_log_lc: [f64; 2], bounds: (f64, f64)) -> Option<([f64; 2], Vec<f64>, StartDiagnostic)> {
    let clamp = |v: f64| v.clamp(bounds.0, bounds.1);
    let mut p = [clamp(init_log_lc[0]), clamp(init_log_lc[1])];
    let diag_init = [init_log_lc[0].exp(), init_log_lc[1].exp()];
    let Ok((mut amps, mut chi2)) = model.chi2_of(&p) else {
        return None;
    };
    let mut accepted = vec![chi2];
    let mut mu = 1e-3;
    // finite-difference step in log-position; small enough to stay local,
    // large enough that chi2 differences beat f64 cancellation
    let h = 3e-3;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..LM_MAX_ITER {
        iterations += 1;
        // numeric gradient and Gauss-Newton Hessian of chi2/2 via central
        // differences of the profiled chi2 (2 parameters: cheap and robust)
        let mut grad = [0.0f64; 2];
        let mut hess = [[0.0f64; 2]; 2];
        let chi_at = |q: &[f64; 2]| -> Option<f64> { model.chi2_of(q).ok().map(|(_, c)| c) };
        for i in 0..2 {
            let mut qm = p;
            qm[i] -= h;
            let mut qp = p;
            qp[i] += h;
            let (cm, cp) = (chi_at(&qm)?, chi_at(&qp)?);
            grad[i] = (cp - cm) / (2.0 * h);
            hess[i][i] = ((cp - 2.0 * chi2 + cm) / (h * h)).max(0.0);
        }
        // mixed term
        {
            let ev = |a: f64, b: f64| chi_at(&[p[0] + a, p[1] + b]);
            let (cpp, cpm, cmp, cmm) = (
                ev(h, h)?,
                ev(h, -h)?,
                ev(-h, h)?,
                ev(-h, -h)?,
            );
            let mixed = (cpp - cpm - cmp + cmm) / (4.0 * h * h);
            hess[0][1] = mixed;
            hess[1][0] = mixed;
        }
        let gnorm = (grad[0] * grad[0] + grad[1] * grad[1]).sqrt();
        if gnorm < 1e-10 * chi2.max(1.0) {
            converged = true;
            break;
        }
        // damped step; expand damping until the step is accepted
        let mut improved = false;
        for _ in 0..25 {
            let a = [
                vec![hess[0][0] + mu * (1.0 + hess[0][0].abs()), hess[0][1]],
                vec![hess[1][0], hess[1][1] + mu * (1.0 + hess[1][1].abs())],
            ];
            let rhs = [-0.5 * grad[0], -0.5 * grad[1]];
            let Ok((step, _)) = solve_and_invert(&a, &rhs) else {
                mu *= 4.0;
                continue;
            };
            let cand = [clamp(p[0] + step[0]), clamp(p[1] + step[1])];
            match model.chi2_of(&cand) {
                Ok((ca, cc)) if cc <= chi2 => {
                    let delta = chi2 - cc;
                    p = cand;
                    amps = ca;
                    chi2 = cc;
                    accepted.push(chi2);
                    mu = (mu / 3.0).max(1e-12);
                    improved = true;
                    if delta <= 1e-10 * chi2.max(1e-30) {
                        converged = true;
                    }
                    break;
                }
                _ => mu *= 4.0,
            }
        }
        if !improved {
            converged = true; // damping saturated: local minimum to tolerance
            break;
        }
        if converged {
            break;
        }
    }
    let diag = StartDiagnostic {
        init_lambda_c: diag_init,
        chi2,
        converged,
        iterations,
        accepted_chi2: accepted,
    };
    Some((p, amps, diag))
}

/// Multi-start two-peak fit of the distance dependence. Peak positions are
/// optimized in log space with amplitudes profiled out; Γ is frozen unless
/// "gamma_w" is absent from `frozen` (in which case a coarse grid search
/// over a shared Γ wraps the position fit).
///
/// `table` must tabulate the responses at exactly the dataset's distances.
pub fn fit_distance(
    data: &DistanceDataset,
    init: &CouplingSpectrum,
    frozen: &[&str],
    table: &ResponseTable,
) -> Result<DistanceFit> {
    validate_rows(&data.rows, "distance dataset")?;
    init.validate()?;
    if data.rows.len() < 5 {
        return Err(Error::Validation(format!(
            "fit_distance needs >= 5 points, got {}",
            data.rows.len()
        )));
    }
    if init.peaks.len() != 2 {
        return Err(Error::Validation(format!(
            "fit_distance expects a 2-peak init spectrum, got {} peaks",
            init.peaks.len()
        )));
    }
    if table.distances.len() != data.rows.len()
        || table
            .distances
            .iter()
            .zip(data.rows.iter())
            .any(|(td, r)| (td - r.x).abs() > 1e-12 * r.x)
    {
        return Err(Error::Validation(
            "response table distances do not match the dataset".into(),
        ));
    }
    let gamma_frozen = frozen.contains(&"gamma_w");
    for name in frozen {
        if *name != "gamma_w" {
            return Err(Error::Validation(format!(
                "unsupported frozen parameter '{name}' (only 'gamma_w' may be frozen)"
            )));
        }
    }
    let gammas: Vec<Vec<f64>> = if gamma_frozen {
        vec![init.peaks.iter().map(|p| p.gamma_w).collect()]
    } else {
        // coarse shared-Γ scan around the init value
        [0.25, 0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&s| init.peaks.iter().map(|p| p.gamma_w * s).collect())
            .collect()
    };

    let grid_min = table.lambdas[0];
    let grid_max = table.lambdas[table.lambdas.len() - 1];
    let bounds = (grid_min.ln(), grid_max.ln());

    // multi-start lattice: 8 log-spaced positions, paired two octaves apart,
    // plus the caller's init positions
    let centers = log_spaced(grid_min * 4.0, grid_max / 4.0, 8);
    let lattice_starts: Vec<[f64; 2]> = (0..8)
        .map(|i| {
            let a = centers[i];
            let b = centers[(i + 3) % 8];
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            [lo.ln(), hi.ln()]
        })
        .collect();

    let mut diagnostics = Vec::new();
    let mut best: Option<([f64; 2], Vec<f64>, Vec<f64>, f64)> = None; // (logp, amps, gammas, chi2)
    for g in &gammas {
        let model = DistanceModel { data, table, gammas: g.clone() };
        // Scan of the profiled chi2 over position pairs drawn from the λ
        // grid. When a peak is much narrower than the local grid spacing the
        // objective is piecewise flat in its position, so gradient steps
        // alone can neither move between cells nor feel the cell structure;
        // the scan has to locate the right cell at grid resolution and the
        // damped-Newton polish only refines the smooth directions.
        let full_basis: Vec<[Vec<f64>; 2]> = table
            .lambdas
            .iter()
            .map(|&lc| [model.basis_of(lc, g[0]), model.basis_of(lc, g[1])])
            .collect();
        let chi2_idx = |i: usize, j: usize| -> Option<f64> {
            profile_amplitudes(data, &[&full_basis[i][0], &full_basis[j][1]])
                .ok()
                .map(|(_, c)| c)
        };
        // coarse pair scan on a stride, then coordinate descent at full
        // resolution from the best pairs
        let n_full = table.lambdas.len();
        let stride = (n_full / 80).max(1);
        let mut scan: Vec<(f64, [usize; 2])> = Vec::new();
        for i in (0..n_full).step_by(stride) {
            for j in (i + 1..n_full).step_by(stride) {
                if let Some(c2) = chi2_idx(i, j) {
                    scan.push((c2, [i, j]));
                }
            }
        }
        scan.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut picked: Vec<[usize; 2]> = Vec::new();
        for (_, s) in &scan {
            if picked
                .iter()
                .all(|p| p[0].abs_diff(s[0]) > 3 || p[1].abs_diff(s[1]) > 3)
            {
                picked.push(*s);
            }
            if picked.len() == 3 {
                break;
            }
        }
        let refine = |mut pair: [usize; 2]| -> [usize; 2] {
            for _ in 0..2 {
                for coord in [1usize, 0] {
                    let mut best = (f64::INFINITY, pair[coord]);
                    for c in 0..n_full {
                        let (i, j) = if coord == 0 { (c, pair[1]) } else { (pair[0], c) };
                        if i == j {
                            continue;
                        }
                        if let Some(c2) = chi2_idx(i.min(j), i.max(j)) {
                            if c2 < best.0 {
                                best = (c2, c);
                            }
                        }
                    }
                    pair[coord] = best.1;
                }
            }
            if pair[0] > pair[1] {
                pair.swap(0, 1);
            }
            pair
        };
        let mut starts = lattice_starts.clone();
        starts.push([init.peaks[0].lambda_c.ln(), init.peaks[1].lambda_c.ln()]);
        for p in picked {
            let r = refine(p);
            starts.push([table.lambdas[r[0]].ln(), table.lambdas[r[1]].ln()]);
        }
        for &s in &starts {
            if let Some((p, amps, diag)) = lm_run(&model, s, bounds) {
                let better = best.as_ref().map(|b| diag.chi2 < b.3).unwrap_or(true);
                if better {
                    best = Some((p, amps.clone(), g.clone(), diag.chi2));
                }
                diagnostics.push(diag);
            }
        }
    }
    let Some((logp, amps, gammas, chi2)) = best else {
        return Err(Error::Convergence {
            msg: format!(
                "fit_distance: no start produced a valid fit ({} runs attempted)",
                diagnostics.len().max(1)
            ),
            estimate: f64::NAN,
            error_bound: f64::NAN,
        });
    };

    // order peaks by position
    let mut order = [0usize, 1usize];
    if logp[0] > logp[1] {
        order = [1, 0];
    }
    let lc = [logp[order[0]].exp(), logp[order[1]].exp()];
    let am = [amps[order[0]], amps[order[1]]];
    let gm = [gammas[order[0]], gammas[order[1]]];

    // covariance from the full 4-parameter Jacobian at the optimum
    let names = ["lambda_c1", "amplitude1", "lambda_c2", "amplitude2"];
    let theta = [lc[0], am[0], lc[1], am[1]];
    let model_at = |th: &[f64; 4]| -> Vec<f64> {
        let peaks = [
            ForceRangePeak { lambda_c: th[0], gamma_w: gm[0], amplitude: th[1] },
            ForceRangePeak { lambda_c: th[2], gamma_w: gm[1], amplitude: th[3] },
        ];
        (0..data.rows.len())
            .map(|j| {
                let row = table.row(j);
                let mut s = 0.0;
                for (&l, &r) in table.lambdas.iter().zip(row.iter()) {
                    s += (peaks[0].eval(l) + peaks[1].eval(l)) * r;
                }
                s
            })
            .collect()
    };
    let m0 = model_at(&theta);
    let mut jt_w_j = vec![vec![0.0; 4]; 4];
    let mut jac = vec![vec![0.0; data.rows.len()]; 4];
    for i in 0..4 {
        let hh = 1e-6 * theta[i].abs().max(1e-30);
        let mut tp = theta;
        tp[i] += hh;
        let mut tm = theta;
        tm[i] -= hh;
        let (mp, mm) = (model_at(&tp), model_at(&tm));
        for j in 0..data.rows.len() {
            jac[i][j] = (mp[j] - mm[j]) / (2.0 * hh);
        }
    }
    for a in 0..4 {
        for b in 0..4 {
            let mut s = 0.0;
            for (j, r) in data.rows.iter().enumerate() {
                s += jac[a][j] * jac[b][j] / (r.sigma * r.sigma);
            }
            jt_w_j[a][b] = s;
        }
    }
    let covariance = match solve_and_invert(&jt_w_j, &[0.0; 4]) {
        Ok((_, inv)) => inv,
        Err(_) => vec![vec![f64::NAN; 4]; 4], // degenerate at optimum: report NaN errors
    };
    // a non-positive diagonal means the parameter is unconstrained at this
    // optimum (e.g. a peak sitting where the response vanishes)
    let std_errors: Vec<(String, f64)> = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let v = covariance[i][i];
            (n.to_string(), if v > 0.0 { v.sqrt() } else { f64::INFINITY })
        })
        .collect();
    let residuals: Vec<f64> = data.rows.iter().zip(m0.iter()).map(|(r, m)| r.bbar - m).collect();
    let dof = data.rows.len().saturating_sub(4).max(1);

    Ok(DistanceFit {
        result: FitResult {
            parameters: names.iter().zip(theta.iter()).map(|(n, v)| (n.to_string(), *v)).collect(),
            std_errors,
            covariance,
            chi2,
            dof,
            residuals,
        },
        starts: diagnostics,
    })
}

// ---------------------------------------------------------------------------
// Sensitivity and exclusion

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SensitivityPoint {
    pub lambda: f64,
    /// Minimum detectable coupling; meaningful only when `constrained`.
    pub f_perp_min: f64,
    pub constrained: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SensitivityCurve {
    pub d_ref: f64,
    pub noise_bbar: f64,
    pub points: Vec<SensitivityPoint>,
}

/// f⊥_min(λ) = noise / |b̄_unit(λ, d_ref)|: exact inversion by linearity.
#[allow(clippy::too_many_arguments)]
pub fn sensitivity_curve(
    noise_bbar: f64,
    lambda_grid: &[f64],
    d_ref: f64,
    geom: &SourceGeometry,
    frame: &FrameConvention,
    vib: &VibrationState,
    timing: &SequenceTiming,
    q: &QuadratureConfig,
    k: &PhysicalConstants,
) -> Result<SensitivityCurve> {
    if !(noise_bbar > 0.0) {
        return Err(Error::Validation(format!("noise_bbar must be > 0, got {noise_bbar}")));
    }
    let table = unit_response_table(lambda_grid, &[d_ref], geom, frame, vib, timing, q, k)?;
    let points = lambda_grid
        .iter()
        .zip(table.row(0).iter())
        .map(|(&lambda, &resp)| {
            let f = noise_bbar / resp.abs();
            let constrained = f.is_finite();
            SensitivityPoint { lambda, f_perp_min: if constrained { f } else { f64::INFINITY }, constrained }
        })
        .collect();
    Ok(SensitivityCurve { d_ref, noise_bbar, points })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PriorPoint {
    pub lambda: f64,
    pub f_perp_limit: f64,
}

/// Prior constraint table, CSV schema: lambda_m, f_perp_limit.
pub fn read_prior_csv<R: std::io::Read>(reader: R) -> Result<Vec<PriorPoint>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let got = rdr.headers()?.clone();
    let want = ["lambda_m", "f_perp_limit"];
    for (i, w) in want.iter().enumerate() {
        if got.get(i).map(str::trim) != Some(*w) {
            return Err(Error::Validation(format!(
                "prior CSV column {i}: expected header '{w}', got {:?}",
                got.get(i).unwrap_or("<missing>")
            )));
        }
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Validation(format!("prior CSV row {line}: missing column {i}")))?
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Validation(format!("prior CSV row {line}: bad number in column {i}")))
        };
        let p = PriorPoint { lambda: parse(0)?, f_perp_limit: parse(1)? };
        if !(p.lambda > 0.0 && p.f_perp_limit > 0.0) {
            return Err(Error::Validation(format!(
                "prior CSV row {line}: lambda and f_perp_limit must be > 0"
            )));
        }
        out.push(p);
    }
    if out.is_empty() {
        return Err(Error::Validation("prior table is empty".into()));
    }
    out.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    Ok(out)
}

/// Log-log linear interpolation of the prior limit; None outside its range.
pub fn prior_limit_at(prior: &[PriorPoint], lambda: f64) -> Option<f64> {
    let first = prior.first()?;
    let last = prior.last()?;
    if lambda < first.lambda || lambda > last.lambda {
        return None;
    }
    let idx = prior.partition_point(|p| p.lambda <= lambda);
    if idx == 0 {
        return Some(first.f_perp_limit);
    }
    if idx >= prior.len() {
        return Some(last.f_perp_limit);
    }
    let (a, b) = (&prior[idx - 1], &prior[idx]);
    let t = (lambda.ln() - a.lambda.ln()) / (b.lambda.ln() - a.lambda.ln());
    Some((a.f_perp_limit.ln() + t * (b.f_perp_limit.ln() - a.f_perp_limit.ln())).exp())
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExclusionVerdict {
    pub lambda: f64,
    pub f_perp_min: f64,
    /// Prior limit at λ, when λ is inside the prior's range.
    pub prior_limit: Option<f64>,
    /// f⊥_min / prior limit; < 1 means this work probes below the prior.
    pub ratio: Option<f64>,
    pub below_prior: Option<bool>,
    /// λ outside the prior table's range (no comparison made).
    pub extrapolated: bool,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PeakVerdict {
    pub lambda_c: f64,
    pub amplitude: f64,
    pub below_prior: Option<bool>,
    pub below_sensitivity: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExclusionReport {
    pub verdicts: Vec<ExclusionVerdict>,
    pub peak_verdicts: Vec<PeakVerdict>,
}

/// Compare a sensitivity curve (and optionally fitted peaks) against a prior
/// constraint table.
pub fn exclusion_compare(
    curve: &SensitivityCurve,
    prior: &[PriorPoint],
    spectrum: Option<&CouplingSpectrum>,
) -> Result<ExclusionReport> {
    if prior.is_empty() {
        return Err(Error::Validation("prior table is empty".into()));
    }
    let verdicts = curve
        .points
        .iter()
        .map(|p| match prior_limit_at(prior, p.lambda) {
            Some(limit) if p.constrained => ExclusionVerdict {
                lambda: p.lambda,
                f_perp_min: p.f_perp_min,
                prior_limit: Some(limit),
                ratio: Some(p.f_perp_min / limit),
                below_prior: Some(p.f_perp_min < limit),
                extrapolated: false,
            },
            Some(limit) => ExclusionVerdict {
                lambda: p.lambda,
                f_perp_min: p.f_perp_min,
                prior_limit: Some(limit),
                ratio: None,
                below_prior: Some(false),
                extrapolated: false,
            },
            None => ExclusionVerdict {
                lambda: p.lambda,
                f_perp_min: p.f_perp_min,
                prior_limit: None,
                ratio: None,
                below_prior: None,
                extrapolated: true,
            },
        })
        .collect();
    let mut peak_verdicts = Vec::new();
    if let Some(spec) = spectrum {
        for pk in &spec.peaks {
            let prior_lim = prior_limit_at(prior, pk.lambda_c);
            // sensitivity at the nearest curve point
            let sens = curve
                .points
                .iter()
                .min_by(|a, b| {
                    (a.lambda.ln() - pk.lambda_c.ln())
                        .abs()
                        .total_cmp(&(b.lambda.ln() - pk.lambda_c.ln()).abs())
                })
                .map(|p| p.f_perp_min)
                .unwrap_or(f64::INFINITY);
            peak_verdicts.push(PeakVerdict {
                lambda_c: pk.lambda_c,
                amplitude: pk.amplitude,
                below_prior: prior_lim.map(|l| pk.amplitude.abs() < l),
                below_sensitivity: pk.amplitude.abs() < sens,
            });
        }
    }
    Ok(ExclusionReport { verdicts, peak_verdicts })
}
