//! Command-line front end: field evaluation, fitting, sensitivity,
//! background report and synthetic-data generation, all config-driven and
//! deterministic for a fixed (config, seed) pair.

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use spinforce::config::RunConfig;
use spinforce::echo::{echo_phase, populations};
use spinforce::error::{Error, Result};
use spinforce::field::{unit_geometry_integrals, FieldTimeSeries, SeriesMeta};
use spinforce::inference::{
    exclusion_compare, fit_distance, fit_velocity, log_spaced, model_bbar_from_row,
    read_prior_csv, sensitivity_curve, unit_response_table, CouplingSpectrum, DataRow,
    DistanceDataset, ResponseTable, VelocityDataset,
};
use spinforce::kernels::{exotic_field_prefactor, stark_field, stark_to_charge_bound};
use spinforce::output::{write_json, RunManifest, Table};
use spinforce::quadrature::gauss_legendre;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "spinforce", version, about = "Spin-velocity force modeling and analysis")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Tabular output format, overrides the config ("csv" or "json").
    #[arg(long, global = true)]
    format: Option<String>,
    /// Seed for synthetic-data generation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitMode {
    Distance,
    Velocity,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthMode {
    Distance,
    Velocity,
    Fringe,
}

#[derive(Subcommand)]
enum Cmd {
    /// Evaluate the effective field at one time, or emit a full time series.
    Field {
        /// Standoff distance, m (default: config geometry.standoff_m).
        #[arg(long)]
        distance: Option<f64>,
        /// Evaluation time within [0, 2τ], s (default: τ/2).
        #[arg(long)]
        time: Option<f64>,
        /// Write a sampled series over [0, 2τ] instead of a single value.
        #[arg(long)]
        series: bool,
        /// Samples per echo window for --series (even, >= 16).
        #[arg(long, default_value_t = 32)]
        samples: usize,
    },
    /// Fit a dataset: velocity slope or two-peak distance spectrum.
    Fit {
        #[arg(long, value_enum)]
        mode: FitMode,
        /// Input CSV (schemas: d_m,bbar_nT,sigma_nT or vmax_mps,bbar_nT,sigma_nT).
        #[arg(long)]
        data: PathBuf,
    },
    /// Minimum detectable coupling vs force range, optionally compared
    /// against a prior constraint table.
    Sensitivity {
        /// Noise floor on b̄, nT (default: config fit.noise_bbar_t).
        #[arg(long)]
        noise_nt: Option<f64>,
        /// Prior constraint CSV (lambda_m,f_perp_limit).
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Background budget report: diamagnetic residual, stray charge, Stark
    /// charge bound.
    Backgrounds,
    /// Generate a synthetic dataset from the forward model.
    Synth {
        #[arg(long, value_enum)]
        mode: SynthMode,
        /// Per-point noise, nT (default: config fit.noise_bbar_t).
        #[arg(long)]
        noise_nt: Option<f64>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // has to happen before any rayon use; a failure here means a pool
        // already exists, which only happens in tests
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::from_toml(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    let format = cli.format.as_deref().unwrap_or(&cfg.output.format).to_string();
    if format != "csv" && format != "json" {
        return Err(Error::Validation(format!("--format must be csv or json, got '{format}'")));
    }
    fs::create_dir_all(&cli.out)?;
    let t0 = Instant::now();
    let mut manifest = RunManifest::new(cfg.hash(), cli.seed);
    let stem = match &cli.cmd {
        Cmd::Field { distance, time, series, samples } => {
            cmd_field(cli, &cfg, &format, &mut manifest, *distance, *time, *series, *samples)?
        }
        Cmd::Fit { mode, data } => cmd_fit(cli, &cfg, &format, &mut manifest, *mode, data)?,
        Cmd::Sensitivity { noise_nt, prior } => {
            cmd_sensitivity(cli, &cfg, &format, &mut manifest, *noise_nt, prior.as_deref())?
        }
        Cmd::Backgrounds => cmd_backgrounds(cli, &cfg, &mut manifest)?,
        Cmd::Synth { mode, noise_nt } => {
            cmd_synth(cli, &cfg, &format, &mut manifest, *mode, *noise_nt)?
        }
    };
    manifest.wall_time_s = t0.elapsed().as_secs_f64();
    manifest.write(&cli.out, stem)?;
    Ok(())
}

/// B_eff(t) for the configured spectrum: ρ·pref·v(t)·Σᵢ f(λᵢ)·G(λᵢ, y(t)).
/// Returns (value, error bound), T.
fn spectrum_field_at(cfg: &RunConfig, spec: &CouplingSpectrum, t: f64) -> Result<(f64, f64)> {
    let geom = cfg.source_geometry();
    let frame = cfg.frame_convention();
    let vib = cfg.vibration_state();
    let k = cfg.constants;
    let weights: Vec<f64> = spec.lambda_grid.iter().map(|&l| spec.eval(l)).collect();
    let scale = geom.nucleon_density * exotic_field_prefactor(&k) * vib.velocity(t);
    if weights.iter().all(|&w| w == 0.0) || scale == 0.0 {
        return Ok((0.0, 0.0));
    }
    let res = unit_geometry_integrals(&geom, &frame, vib.displacement(t), &spec.lambda_grid, &cfg.quadrature)?;
    if !res.converged {
        return Err(Error::Convergence {
            msg: format!("field evaluation budget exhausted after {} evaluations", res.evaluations),
            estimate: res.values[0] * scale,
            error_bound: res.worst_error() * scale.abs(),
        });
    }
    let mut value = 0.0;
    let mut bound = 0.0;
    for ((v, e), w) in res.values.iter().zip(res.error_bounds.iter()).zip(weights.iter()) {
        value += v * w;
        bound += e * w.abs();
    }
    Ok((value * scale, bound * scale.abs()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_field(
    cli: &Cli,
    cfg: &RunConfig,
    format: &str,
    manifest: &mut RunManifest,
    distance: Option<f64>,
    time: Option<f64>,
    series: bool,
    samples: usize,
) -> Result<&'static str> {
    let mut cfg = cfg.clone();
    if let Some(d) = distance {
        cfg.geometry.standoff_m = d;
        cfg.validate()?;
    }
    let spec = cfg.coupling_spectrum()?;
    let timing = cfg.sequence_timing();
    let tau = timing.tau;
    if series {
        if samples < 16 || samples % 2 != 0 {
            return Err(Error::Validation(format!(
                "--samples must be even and >= 16, got {samples}"
            )));
        }
        // same Gauss-Legendre node layout as the single-λ series builder so
        // the CSV feeds straight into the echo-phase integrals
        let rule = gauss_legendre(samples);
        let mut times = Vec::with_capacity(2 * samples);
        let mut weights = Vec::with_capacity(2 * samples);
        for w in 0..2 {
            let mid = (w as f64 + 0.5) * tau;
            for &(x, wt) in &rule {
                times.push(mid + 0.5 * tau * x);
                weights.push(wt * 0.5 * tau);
            }
        }
        let evals: Vec<(f64, f64)> = times
            .par_iter()
            .map(|&t| spectrum_field_at(&cfg, &spec, t))
            .collect::<Result<Vec<_>>>()?;
        let fts = FieldTimeSeries {
            times: times.clone(),
            values: evals.iter().map(|e| e.0).collect(),
            weights,
            tau,
            meta: SeriesMeta {
                geometry_hash: cfg.hash()[..16].to_string(),
                coupling: "configured spectrum".into(),
            },
        };
        let mut table = Table::new(vec!["t_s", "B_T"]);
        for (t, v) in fts.times.iter().zip(fts.values.iter()) {
            table.push(vec![*t, *v]);
        }
        let path = table.write(&cli.out, "field_series", format)?;
        manifest.record_output(&path);
        let worst = evals.iter().fold(0.0f64, |a, e| a.max(e.1));
        manifest.record_bound("field_series_point_t", worst);
        let phase = echo_phase(&fts, &timing, &cfg.constants)?;
        println!("series written: {}", path.display());
        println!("echo_phase_rad = {:.6e}", phase.phi);
        Ok("field_series")
    } else {
        let t = time.unwrap_or(0.5 * tau);
        if !(0.0..=2.0 * tau).contains(&t) {
            return Err(Error::Validation(format!("--time {t} outside [0, 2 tau]")));
        }
        let (b, bound) = spectrum_field_at(&cfg, &spec, t)?;
        println!("B_eff_nT = {:.9e} +- {:.3e}", b * 1e9, bound * 1e9);
        manifest.record_bound("field_value_t", bound);
        let path = write_json(
            &cli.out,
            "field_value",
            &serde_json::json!({
                "time_s": t,
                "distance_m": cfg.geometry.standoff_m,
                "b_eff_t": b,
                "error_bound_t": bound,
            }),
        )?;
        manifest.record_output(&path);
        Ok("field_value")
    }
}

fn response_table_for(cfg: &RunConfig, distances: &[f64]) -> Result<ResponseTable> {
    unit_response_table(
        &cfg.lambda_grid()?,
        distances,
        &cfg.source_geometry(),
        &cfg.frame_convention(),
        &cfg.vibration_state(),
        &cfg.sequence_timing(),
        &cfg.quadrature,
        &cfg.constants,
    )
}

fn cmd_fit(
    cli: &Cli,
    cfg: &RunConfig,
    format: &str,
    manifest: &mut RunManifest,
    mode: FitMode,
    data: &PathBuf,
) -> Result<&'static str> {
    let text = fs::read_to_string(data)?;
    match mode {
        FitMode::Velocity => {
            let ds = VelocityDataset::from_csv(text.as_bytes())?;
            let fit = fit_velocity(&ds)?;
            let path = write_json(&cli.out, "fit_velocity", &fit)?;
            manifest.record_output(&path);
            let mut resid = Table::new(vec!["vmax_mps", "residual_nT"]);
            for (r, res) in ds.rows.iter().zip(fit.residuals.iter()) {
                resid.push(vec![r.x, res * 1e9]);
            }
            let p = resid.write(&cli.out, "fit_velocity_residuals", format)?;
            manifest.record_output(&p);
            let k = fit.parameters[0].1;
            let vmax = ds.rows.iter().fold(0.0f64, |a, r| a.max(r.x));
            let mut curve = Table::new(vec!["vmax_mps", "bbar_nT"]);
            for i in 0..=100 {
                let v = vmax * i as f64 / 100.0;
                curve.push(vec![v, k * v * 1e9]);
            }
            let p = curve.write(&cli.out, "fit_velocity_curve", format)?;
            manifest.record_output(&p);
            println!(
                "k_nT_s_per_m = {:.6e} +- {:.3e}  (chi2/dof = {:.3}/{})",
                k * 1e9,
                fit.std_errors[0].1 * 1e9,
                fit.chi2,
                fit.dof
            );
            Ok("fit_velocity")
        }
        FitMode::Distance => {
            let ds = DistanceDataset::from_csv(text.as_bytes())?;
            let distances: Vec<f64> = ds.rows.iter().map(|r| r.x).collect();
            let table = response_table_for(cfg, &distances)?;
            let init = cfg.coupling_spectrum()?;
            let frozen: &[&str] = if cfg.fit.freeze_gamma { &["gamma_w"] } else { &[] };
            let fit = fit_distance(&ds, &init, frozen, &table)?;
            let path = write_json(&cli.out, "fit_distance", &fit)?;
            manifest.record_output(&path);
            let mut resid = Table::new(vec!["d_m", "residual_nT"]);
            for (r, res) in ds.rows.iter().zip(fit.result.residuals.iter()) {
                resid.push(vec![r.x, res * 1e9]);
            }
            let p = resid.write(&cli.out, "fit_distance_residuals", format)?;
            manifest.record_output(&p);
            // dense model curve over the data span for plotting
            let dmin = distances.iter().cloned().fold(f64::INFINITY, f64::min);
            let dmax = distances.iter().cloned().fold(0.0f64, f64::max);
            let dense = log_spaced(dmin, dmax, 48);
            let dense_table = response_table_for(cfg, &dense)?;
            let pmap: std::collections::HashMap<String, f64> =
                fit.result.parameters.iter().cloned().collect();
            let mut fitted = init.clone();
            fitted.peaks[0].lambda_c = pmap["lambda_c1"];
            fitted.peaks[0].amplitude = pmap["amplitude1"];
            fitted.peaks[1].lambda_c = pmap["lambda_c2"];
            fitted.peaks[1].amplitude = pmap["amplitude2"];
            let mut curve = Table::new(vec!["d_m", "bbar_nT"]);
            for (j, &d) in dense.iter().enumerate() {
                let b = model_bbar_from_row(&fitted, &dense_table.lambdas, dense_table.row(j));
                curve.push(vec![d, b * 1e9]);
            }
            let p = curve.write(&cli.out, "fit_distance_curve", format)?;
            manifest.record_output(&p);
            for (name, v) in &fit.result.parameters {
                println!("{name} = {v:.6e}");
            }
            println!("chi2/dof = {:.3}/{}", fit.result.chi2, fit.result.dof);
            Ok("fit_distance")
        }
    }
}

fn cmd_sensitivity(
    cli: &Cli,
    cfg: &RunConfig,
    format: &str,
    manifest: &mut RunManifest,
    noise_nt: Option<f64>,
    prior: Option<&std::path::Path>,
) -> Result<&'static str> {
    let noise = noise_nt.map(|n| n * 1e-9).unwrap_or(cfg.fit.noise_bbar_t);
    let curve = sensitivity_curve(
        noise,
        &cfg.lambda_grid()?,
        cfg.fit.sensitivity_d_ref_m,
        &cfg.source_geometry(),
        &cfg.frame_convention(),
        &cfg.vibration_state(),
        &cfg.sequence_timing(),
        &cfg.quadrature,
        &cfg.constants,
    )?;
    let mut table = Table::new(vec!["lambda_m", "f_perp_min", "constrained"]);
    for p in &curve.points {
        table.push(vec![p.lambda, p.f_perp_min, if p.constrained { 1.0 } else { 0.0 }]);
    }
    let path = table.write(&cli.out, "sensitivity", format)?;
    manifest.record_output(&path);
    match prior {
        Some(path) => {
            let prior_rows = read_prior_csv(fs::read_to_string(path)?.as_bytes())?;
            let spec = cfg.coupling_spectrum()?;
            let report = exclusion_compare(&curve, &prior_rows, Some(&spec))?;
            let p = write_json(&cli.out, "exclusion", &report)?;
            manifest.record_output(&p);
            let best = report
                .verdicts
                .iter()
                .filter_map(|v| v.ratio)
                .fold(f64::INFINITY, f64::min);
            println!("best improvement ratio over the prior: {best:.3e}");
        }
        None => {
            eprintln!("warning: no --prior table supplied; exclusion comparison skipped");
        }
    }
    Ok("sensitivity")
}

fn cmd_backgrounds(cli: &Cli, cfg: &RunConfig, manifest: &mut RunManifest) -> Result<&'static str> {
    let geom = cfg.source_geometry();
    let frame = cfg.frame_convention();
    let vib = cfg.vibration_state();
    let timing = cfg.sequence_timing();
    let k = cfg.constants;
    let b = &cfg.backgrounds;

    let diam = spinforce::background::diamagnetic_echo_residual(
        &cfg.diamagnetic_spec(),
        &geom,
        &frame,
        &vib,
        &timing,
        &k,
    )?;
    let charge = spinforce::background::charge_echo_average(
        &cfg.charge_spec(),
        &geom,
        &frame,
        &vib,
        &timing,
        &k,
    )?;
    let stark = cfg.stark_input();
    let e_field = stark_field(&stark);
    let q_max = if stark.freq_shift == 0.0 { 0.0 } else { stark_to_charge_bound(&stark, &k) };

    let report = serde_json::json!({
        "diamagnetic": {
            "modulation_t": diam.modulation,
            "phi_shifted_window_rad": diam.phi_shifted_window,
            "phi_worst_case_rad": diam.phi_worst_case,
            "mean_field_residual_t": diam.mean_field_residual,
            "budget_t": b.diamagnetic_budget_t,
            "within_budget": diam.mean_field_residual <= b.diamagnetic_budget_t,
        },
        "charge": {
            "echo_average_t": charge.echo_average_magnitude,
            "projected_average_t": charge.projected_average,
            "max_instantaneous_t": charge.max_instantaneous,
            "budget_t": b.charge_budget_t,
            "within_budget": charge.max_instantaneous <= b.charge_budget_t,
        },
        "stark": {
            "e_field_v_per_m": e_field,
            "q_max_c": q_max,
            "budget_c": b.stark_charge_budget_c,
            "within_budget": q_max <= b.stark_charge_budget_c,
        },
    });
    let path = write_json(&cli.out, "backgrounds", &report)?;
    manifest.record_output(&path);
    manifest.record_bound("diamagnetic_residual_t", diam.mean_field_residual);
    println!(
        "diamagnetic residual {:.3e} T (budget {:.1e}); charge max {:.3e} T (budget {:.1e}); q_max {:.3e} C (budget {:.1e})",
        diam.mean_field_residual,
        b.diamagnetic_budget_t,
        charge.max_instantaneous,
        b.charge_budget_t,
        q_max,
        b.stark_charge_budget_c
    );
    Ok("backgrounds")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn cmd_synth(
    cli: &Cli,
    cfg: &RunConfig,
    format: &str,
    manifest: &mut RunManifest,
    mode: SynthMode,
    noise_nt: Option<f64>,
) -> Result<&'static str> {
    let noise = noise_nt.map(|n| n * 1e-9).unwrap_or(cfg.fit.noise_bbar_t);
    if noise < 0.0 {
        return Err(Error::Validation("--noise-nt must be >= 0".into()));
    }
    // sigma column must stay positive for downstream ingestion, so the
    // noiseless mode records a vanishingly small uncertainty instead of 0
    let sigma = if noise > 0.0 { noise } else { 1e-15 };
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let spec = cfg.coupling_spectrum()?;
    match mode {
        SynthMode::Distance => {
            let d0 = cfg.geometry.standoff_m;
            let distances = log_spaced(d0, 12.0 * d0, 24);
            let table = response_table_for(cfg, &distances)?;
            let rows: Vec<DataRow> = distances
                .iter()
                .enumerate()
                .map(|(j, &d)| DataRow {
                    x: d,
                    bbar: model_bbar_from_row(&spec, &table.lambdas, table.row(j))
                        + noise * normal(&mut rng),
                    sigma,
                })
                .collect();
            let mut out = Vec::new();
            DistanceDataset { rows }.to_csv(&mut out)?;
            let path = cli.out.join("synth_distance.csv");
            fs::write(&path, out)?;
            manifest.record_output(&path);
            println!("wrote {}", path.display());
            Ok("synth_distance")
        }
        SynthMode::Velocity => {
            let table = response_table_for(cfg, &[cfg.geometry.standoff_m])?;
            let b_full = model_bbar_from_row(&spec, &table.lambdas, table.row(0));
            let vmax = cfg.vibration_state().max_velocity();
            // b̄ is linear in the drive velocity
            let rows: Vec<DataRow> = (1..=8)
                .map(|i| {
                    let v = vmax * i as f64 / 8.0;
                    DataRow { x: v, bbar: b_full * v / vmax + noise * normal(&mut rng), sigma }
                })
                .collect();
            let mut out = Vec::new();
            VelocityDataset { rows }.to_csv(&mut out)?;
            let path = cli.out.join("synth_velocity.csv");
            fs::write(&path, out)?;
            manifest.record_output(&path);
            println!("wrote {}", path.display());
            Ok("synth_velocity")
        }
        SynthMode::Fringe => {
            let table = response_table_for(cfg, &[cfg.geometry.standoff_m])?;
            let b = model_bbar_from_row(&spec, &table.lambdas, table.row(0));
            let timing = cfg.sequence_timing();
            let phase = spinforce::echo::EchoPhase {
                phi: 2.0 * cfg.constants.gamma_e * timing.tau * b,
                tau: timing.tau,
            };
            let mut tbl = Table::new(vec!["phi_mw_rad", "signal", "sigma"]);
            for i in 0..16 {
                let phi_mw = 2.0 * std::f64::consts::PI * i as f64 / 16.0;
                let p = populations(&phase, phi_mw);
                // express the b̄ noise floor as an equivalent signal noise
                let sig_sigma = (2.0 * cfg.constants.gamma_e * timing.tau * sigma).min(0.1);
                tbl.push(vec![phi_mw, p.signal + sig_sigma * normal(&mut rng), sig_sigma]);
            }
            let path = tbl.write(&cli.out, "synth_fringe", format)?;
            manifest.record_output(&path);
            println!("wrote {} (true phi = {:.6e} rad)", path.display(), phase.phi);
            Ok("synth_fringe")
        }
    }
}
