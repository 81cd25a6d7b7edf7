//! Desk-scale recipes behind `reproduce`. Pulse and scan parameters are
//! chosen so every recipe finishes in seconds on a laptop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Result};
use nvgrating_core::bloch::{
    dephase_profile, excitation_profile, fundamental_modulation, propagate_scaled, BlochState, ControlPulse,
    DetuningGrid,
};
use nvgrating_core::fieldmodel::{
    field_map, fit_tip_model, FieldMap, ScanGrid, SensorGeometry, TipFamily, TipFieldModel, TipFit, TipFitParams,
};
use nvgrating_core::grape::{
    initial_guess, make_grating_target, optimize, GrapeConfig, GratingSpec, OptimizationTrace, SearchDirection,
    TargetProfile,
};
use nvgrating_core::imaging::{
    assign_fringes, build_response, count_dark_components, image_gradient, reconstruct, simulate_scan, subtract_bias,
    Anchor, Assignment, FringeImage, Reconstruction, ReconstructionConfig, ResponseCurve,
};
use nvgrating_core::sensitivity::{contrast, fid_contrast, log_sweep, SensitivityCurve, SensitivityParams};
use nvgrating_core::{Vec3, NV_GAMMA_HZ_PER_T, TWO_PI};

use crate::formats::{
    curve_csv, profile_csv, trace_csv, write_json, write_text, FitFile, Matrix, PulseFile, SensorFile,
};

pub const N_DIPS: usize = 7;
pub const SPACING_HZ: f64 = 0.6e6;
/// Full width at half maximum of each target dip.
pub const DIP_WIDTH_HZ: f64 = 0.25e6;
pub const RABI_MAX_HZ: f64 = 1.0e6;
pub const DURATION_S: f64 = 10e-6;
pub const N_STEPS: usize = 400;
/// Optimisation grid covers +-3 MHz with 241 points.
pub const OPT_HALF_SPAN_HZ: f64 = 3.0e6;
pub const OPT_GRID_POINTS: usize = 241;
pub const PROFILE_GRID_POINTS: usize = 601;
pub const LBFGS_MEMORY: usize = 20;
pub const ROBUST_ENSEMBLE: [f64; 3] = [0.9, 1.0, 1.1];
pub const C0: f64 = 0.3;

pub fn grating(missing_dips: Vec<usize>) -> GratingSpec {
    GratingSpec {
        n_dips: N_DIPS,
        spacing_hz: SPACING_HZ,
        dip_width_hz: DIP_WIDTH_HZ,
        dip_depth: 1.0,
        center_offset_hz: 0.0,
        missing_dips,
    }
}

/// A grating optimisation ready to run.
#[derive(Debug, Clone)]
pub struct DeskProblem {
    pub spec: GratingSpec,
    pub target: TargetProfile,
    pub initial: ControlPulse,
    pub config: GrapeConfig,
}

/// The desk grating with its time axis compressed by `scale`: spacing, dip
/// width, Rabi cap and grid grow by `scale`, the duration shrinks by it. The
/// Bloch dynamics are unchanged under this map.
pub fn desk_problem(
    missing_dips: Vec<usize>,
    scale: f64,
    ensemble: &[f64],
    max_iterations: usize,
) -> Result<DeskProblem> {
    let base = grating(missing_dips);
    let spec = GratingSpec { spacing_hz: base.spacing_hz * scale, dip_width_hz: base.dip_width_hz * scale, ..base };
    let half = OPT_HALF_SPAN_HZ * scale;
    let grid = DetuningGrid::linspace_hz(-half, half, OPT_GRID_POINTS)?;
    let target = make_grating_target(&spec, &grid)?;
    let initial = initial_guess(&target, TWO_PI * RABI_MAX_HZ * scale, DURATION_S / scale, N_STEPS)?;
    let config = GrapeConfig {
        max_iterations,
        convergence_tol: 1e-9,
        amplitude_ensemble: ensemble.to_vec(),
        direction: SearchDirection::Lbfgs { memory: LBFGS_MEMORY },
        ..GrapeConfig::default()
    };
    Ok(DeskProblem { spec, target, initial, config })
}

impl DeskProblem {
    pub fn solve(&self) -> Result<(ControlPulse, OptimizationTrace)> {
        Ok(optimize(&self.initial, &self.target, &self.config)?)
    }
}

/// Single-member desk grating pulse.
pub fn nominal_pulse(missing_dips: Vec<usize>) -> Result<(ControlPulse, GratingSpec)> {
    let p = desk_problem(missing_dips, 1.0, &[1.0], 500)?;
    let (pulse, _) = p.solve()?;
    Ok((pulse, p.spec))
}

/// Excitation `(1 - mz) / 2` reached at each active dip centre when the
/// drive amplitude is scaled by `amplitude`.
pub fn dip_excitation(pulse: &ControlPulse, spec: &GratingSpec, amplitude: f64) -> Vec<f64> {
    spec.active_centers_hz()
        .iter()
        .map(|c| 0.5 * (1.0 - propagate_scaled(pulse, amplitude, TWO_PI * c, BlochState::UP).mz))
        .collect()
}

pub fn profile_grid(scale: f64, points: usize) -> Result<DetuningGrid> {
    let half = OPT_HALF_SPAN_HZ * scale;
    Ok(DetuningGrid::linspace_hz(-half, half, points)?)
}

// ---- scanning ----

pub const SCAN_RANGE_M: f64 = 2e-6;
pub const SCAN_PIXELS: usize = 64;
pub const LIFT_M: f64 = 600e-9;
pub const NV_DEPTH_M: f64 = 20e-9;
/// Pole-to-NV distance with the tip in contact.
pub const POLE_HEIGHT_M: f64 = 600e-9;
/// Detuning the tip causes directly above the NV in contact.
pub const TIP_PEAK_HZ: f64 = 4.0e6;
pub const BIAS_T: f64 = 7.8e-3;
/// Carrier detuning above the bias line.
pub const CARRIER_ABOVE_BIAS_HZ: f64 = 0.6e6;

pub fn sensor() -> SensorGeometry {
    SensorGeometry::new(Vec3::new(0.0, 0.0, -NV_DEPTH_M), Vec3::Z, BIAS_T).expect("unit axis")
}

/// Pseudopole tip that lowers the NV resonance by [`TIP_PEAK_HZ`] at contact.
pub fn tip() -> TipFieldModel {
    let strength = -TIP_PEAK_HZ / NV_GAMMA_HZ_PER_T * POLE_HEIGHT_M;
    TipFieldModel::pseudopole(strength, Vec3::new(0.0, 0.0, POLE_HEIGHT_M - NV_DEPTH_M))
}

pub fn scan_grid(lift_m: f64) -> ScanGrid {
    ScanGrid::new(SCAN_RANGE_M, SCAN_RANGE_M, SCAN_PIXELS, SCAN_PIXELS, lift_m).expect("valid grid")
}

pub fn imaging_config() -> ReconstructionConfig {
    ReconstructionConfig {
        carrier_offset_hz: NV_GAMMA_HZ_PER_T * BIAS_T + CARRIER_ABOVE_BIAS_HZ,
        ..ReconstructionConfig::default()
    }
}

/// Fluorescence response of `pulse` with `T2* = 1 / spacing`.
pub fn response(pulse: &ControlPulse, spacing_hz: f64) -> Result<ResponseCurve> {
    let profile = excitation_profile(pulse, &profile_grid(1.0, PROFILE_GRID_POINTS)?);
    Ok(build_response(&profile, 1.0 / spacing_hz, C0)?)
}

/// Valid pixel with the steepest fluorescence gradient.
pub fn steepest_pixel(image: &FringeImage) -> Option<(usize, usize)> {
    let g = image_gradient(image);
    (0..g.len())
        .filter(|k| image.mask[*k])
        .max_by(|a, b| g[*a].total_cmp(&g[*b]).then(b.cmp(a)))
        .map(|k| image.grid.coords(k))
}

/// Forward simulation and inversion of one scan.
#[derive(Debug, Clone)]
pub struct RoundTrip {
    pub truth: FieldMap,
    pub image: FringeImage,
    pub config: ReconstructionConfig,
    pub assignment: Assignment,
    pub reconstruction: Reconstruction,
}

/// Simulate the scan, anchor the steepest fringe pixel on its true field,
/// unwrap and refine.
pub fn round_trip(
    model: &TipFieldModel,
    geometry: &SensorGeometry,
    grid: &ScanGrid,
    response: &ResponseCurve,
    config: &ReconstructionConfig,
) -> Result<RoundTrip> {
    let truth = field_map(model, geometry, grid);
    let image = simulate_scan(&truth, response, config)?;
    let (px, py) = steepest_pixel(&image).ok_or_else(|| anyhow::anyhow!("image has no valid pixel"))?;
    let anchor = Anchor { px, py, b_tesla: truth.b_parallel[grid.index(px, py)] };
    let config = ReconstructionConfig { seed_anchors: vec![anchor], ..config.clone() };
    let assignment = assign_fringes(&image, response, &config)?;
    let reconstruction = reconstruct(&image, response, &assignment.map, &config)?;
    Ok(RoundTrip { truth, image, config, assignment, reconstruction })
}

impl RoundTrip {
    /// Root-mean-square field error over fringe-bearing pixels.
    pub fn rms_error(&self) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for k in self.reconstruction.fitted_pixels() {
            let e = self.reconstruction.map.b_parallel[k] - self.truth.b_parallel[k];
            s += e * e;
            n += 1;
        }
        (s / n.max(1) as f64).sqrt()
    }

    pub fn fitted_count(&self) -> usize {
        self.reconstruction.fitted_pixels().count()
    }

    /// Pixels whose true detuning lies inside the response bandwidth.
    pub fn in_band(&self, response: &ResponseCurve) -> Vec<bool> {
        self.truth
            .b_parallel
            .iter()
            .zip(&self.truth.mask)
            .map(|(b, m)| *m && response.contains(self.config.detuning_of(*b)))
            .collect()
    }
}

/// Dark fringes: connected regions darker than halfway down the deepest dip.
pub fn dark_ring_count(image: &FringeImage, response: &ResponseCurve) -> usize {
    let floor = response.fluorescence().iter().cloned().fold(f64::INFINITY, f64::min);
    count_dark_components(image, 0.5 * (1.0 + floor))
}

/// Largest field difference between valid 4-neighbours per metre.
pub fn max_gradient(map: &FieldMap) -> f64 {
    let g = &map.grid;
    let (dx, dy) = (g.pixel_dx(), g.pixel_dy());
    let mut best: f64 = 0.0;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.index(i, j);
            if !map.mask[k] {
                continue;
            }
            if i + 1 < g.nx && map.mask[k + 1] {
                best = best.max((map.b_parallel[k + 1] - map.b_parallel[k]).abs() / dx);
            }
            if j + 1 < g.ny && map.mask[g.index(i, j + 1)] {
                best = best.max((map.b_parallel[g.index(i, j + 1)] - map.b_parallel[k]).abs() / dy);
            }
        }
    }
    best
}

// ---- contrast and tip models ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastPoint {
    /// Spacing times T2*.
    pub x: f64,
    pub spacing_hz: f64,
    /// Fringe contrast of the optimised grating after dephasing.
    pub measured: f64,
    pub model: f64,
    /// Free-induction contrast at `t = 1 / spacing`.
    pub fid: f64,
}

/// Optimise the desk grating at spacing `x / T2*` for each `x` and measure
/// how much dephasing shrinks the fundamental of its excitation over the two
/// central periods.
pub fn contrast_decay(params: &SensitivityParams, xs: &[f64]) -> Result<Vec<ContrastPoint>> {
    xs.iter()
        .map(|&x| {
            let spacing = x / params.t2_star_s;
            let scale = spacing / SPACING_HZ;
            let (pulse, _) = desk_problem(Vec::new(), scale, &[1.0], 500)?.solve()?;
            let profile = excitation_profile(&pulse, &profile_grid(scale, 4 * PROFILE_GRID_POINTS - 3)?);
            let dephased = dephase_profile(&profile, params.t2_star_s)?;
            let sharp = fundamental_modulation(&profile, 0.0, spacing, 2)?;
            let soft = fundamental_modulation(&dephased, 0.0, spacing, 2)?;
            Ok(ContrastPoint {
                x,
                spacing_hz: spacing,
                measured: params.c0 * soft / sharp,
                model: contrast(spacing, params),
                fid: fid_contrast(1.0 / spacing, params),
            })
        })
        .collect()
}

/// Pseudopole map fitted by both tip families.
#[derive(Debug, Clone)]
pub struct TipComparison {
    pub map: FieldMap,
    pub truth: TipFieldModel,
    pub pseudopole: TipFit,
    pub monopole: TipFit,
}

pub fn tip_fit_grid() -> ScanGrid {
    ScanGrid::new(SCAN_RANGE_M, SCAN_RANGE_M, 32, 32, 50e-9).expect("valid grid")
}

pub fn fit_family(map: &FieldMap, family: TipFamily, geometry: &SensorGeometry) -> Result<TipFit> {
    let init = TipFitParams::estimate(map, family, geometry)?;
    Ok(fit_tip_model(map, family, geometry, init)?)
}

pub fn tip_comparison() -> Result<TipComparison> {
    let geometry = sensor();
    let truth = TipFieldModel::pseudopole(-4e-10, Vec3::new(0.0, 0.0, 420e-9));
    let map = field_map(&truth, &geometry, &tip_fit_grid());
    let pseudopole = fit_family(&map, TipFamily::Pseudopole, &geometry)?;
    let monopole = fit_family(&map, TipFamily::Monopole, &geometry)?;
    Ok(TipComparison { map, truth, pseudopole, monopole })
}

// ---- reproduce ----

/// Grating target, robust pulse, its controls, excitation profile and
/// optimisation trace.
pub fn reproduce_fig2(out: &Path) -> Result<Vec<PathBuf>> {
    let problem = desk_problem(Vec::new(), 1.0, &ROBUST_ENSEMBLE, 600)?;
    let (pulse, trace) = problem.solve()?;
    let mut files = Vec::new();

    let mut target = String::from("detuning_hz,target_mz\n");
    for (f, m) in problem.target.grid().values_hz().iter().zip(problem.target.target_mz()) {
        let _ = writeln!(target, "{f},{m}");
    }
    files.push(put(out, "target.csv", &target)?);

    let path = out.join("pulse.json");
    write_json(&path, &PulseFile::from_pulse(&pulse))?;
    files.push(path);

    let mut controls = String::from("t_s,omega_x_hz,omega_y_hz,delta_z_hz\n");
    for (n, s) in pulse.steps().iter().enumerate() {
        let t = (n as f64 + 0.5) * pulse.dt();
        let _ = writeln!(controls, "{t},{},{},{}", s.omega_x / TWO_PI, s.omega_y / TWO_PI, s.delta_z / TWO_PI);
    }
    files.push(put(out, "controls.csv", &controls)?);

    let profile = excitation_profile(&pulse, &profile_grid(1.0, PROFILE_GRID_POINTS)?);
    files.push(put(out, "profile.csv", &profile_csv(&profile))?);
    files.push(put(out, "trace.csv", &trace_csv(&trace))?);
    Ok(files)
}

/// Fringe images and reconstructed, bias-subtracted field maps at contact
/// and at 600 nm lift.
pub fn reproduce_fig3(out: &Path) -> Result<Vec<PathBuf>> {
    let (pulse, spec) = nominal_pulse(Vec::new())?;
    let response = response(&pulse, spec.spacing_hz)?;
    let geometry = sensor();
    let sensor_file = Some(SensorFile::from_geometry(&geometry));
    let mut files = Vec::new();
    for (label, lift) in [("contact", 0.0), ("lift600nm", LIFT_M)] {
        let rt = round_trip(&tip(), &geometry, &scan_grid(lift), &response, &imaging_config())?;
        let fringes = Matrix {
            grid: rt.image.grid,
            values: rt.image.fluorescence.clone(),
            mask: rt.image.mask.clone(),
            quantity: "fluorescence".into(),
            sensor: sensor_file,
        };
        files.extend(fringes.write(&out.join(format!("fringes_{label}.csv")))?);
        let field = subtract_bias(&rt.reconstruction.map, BIAS_T);
        files.extend(Matrix::from_map(&field, sensor_file).write(&out.join(format!("field_{label}.csv")))?);
    }
    Ok(files)
}

/// Contrast against spacing, the sensitivity curve, and the two tip-model
/// fits.
pub fn reproduce_fig4(out: &Path) -> Result<Vec<PathBuf>> {
    let params = SensitivityParams::reference_nv();
    let mut files = Vec::new();

    let points = contrast_decay(&params, &[0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0])?;
    let mut s = String::from("t_eff_s,spacing_hz,measured_contrast,model_contrast,fid_contrast\n");
    for p in &points {
        let _ = writeln!(s, "{},{},{},{},{}", 1.0 / p.spacing_hz, p.spacing_hz, p.measured, p.model, p.fid);
    }
    files.push(put(out, "contrast.csv", &s)?);

    let curve = SensitivityCurve::evaluate(log_sweep(1e5, 1e8, 1000), &params);
    files.push(put(out, "sensitivity.csv", &curve_csv(&curve))?);

    let cmp = tip_comparison()?;
    let mut s = String::from("family,strength,offset_x_m,offset_y_m,offset_z_m,bias_t,rms_residual_t\n");
    for fit in [&cmp.pseudopole, &cmp.monopole] {
        let f = FitFile::from_fit(fit);
        let name = serde_json::to_value(f.family)?;
        let o = f.tip_offset_m;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            name.as_str().unwrap_or_default(),
            f.strength,
            o[0],
            o[1],
            o[2],
            f.bias_t,
            f.rms_residual_t
        );
    }
    files.push(put(out, "tip_models.csv", &s)?);
    let sensor_file = Some(SensorFile::from_geometry(&sensor()));
    files.extend(Matrix::from_map(&cmp.map, sensor_file).write(&out.join("tip_field.csv"))?);
    Ok(files)
}

fn put(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    write_text(&path, text)?;
    Ok(path)
}

/// Smoothness check for the lift comparison: the lifted map has the smaller maximum
/// gradient.
pub fn lift_is_smoother(contact: &FieldMap, lifted: &FieldMap) -> Result<bool> {
    ensure!(contact.valid_count() > 0 && lifted.valid_count() > 0, "empty map");
    Ok(max_gradient(lifted) < max_gradient(contact))
}
