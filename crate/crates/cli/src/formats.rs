//! On-disk formats. JSON for parameters and pulses, CSV for curves and
//! scan matrices. Detunings in files are in Hz; pulse amplitudes keep the
//! internal rad/s (1 Hz = 2 pi rad/s).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nvgrating_core::bloch::{ControlPulse, ControlStep, DetuningGrid, ExcitationProfile};
use nvgrating_core::fieldmodel::{FieldMap, ScanGrid, SensorGeometry, TipFamily, TipFieldModel};
use nvgrating_core::grape::{
    make_grating_target, GrapeConfig, GratingSpec, OptimizationTrace, SearchDirection, StepRule, TargetProfile,
};
use nvgrating_core::imaging::{Anchor, NoiseModel, PixelStatus, ReconstructionConfig};
use nvgrating_core::sensitivity::{SensitivityCurve, SensitivityParams};
use nvgrating_core::{Vec3, NV_GAMMA_HZ_PER_T};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn default_gamma() -> f64 {
    NV_GAMMA_HZ_PER_T
}

fn default_depth() -> f64 {
    1.0
}

fn z_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn vec3(v: [f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

fn arr(v: Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseFile {
    pub dt_s: f64,
    pub omega_max_rad_s: f64,
    /// `[omega_x, omega_y, delta_z]` per step, rad/s.
    pub steps: Vec<[f64; 3]>,
}

impl PulseFile {
    pub fn from_pulse(pulse: &ControlPulse) -> Self {
        PulseFile {
            dt_s: pulse.dt(),
            omega_max_rad_s: pulse.omega_max(),
            steps: pulse.steps().iter().map(|s| [s.omega_x, s.omega_y, s.delta_z]).collect(),
        }
    }

    pub fn to_pulse(&self) -> Result<ControlPulse> {
        let steps = self.steps.iter().map(|s| ControlStep::new(s[0], s[1], s[2])).collect();
        Ok(ControlPulse::new(self.dt_s, self.omega_max_rad_s, steps)?)
    }
}

pub fn read_pulse(path: &Path) -> Result<ControlPulse> {
    read_json::<PulseFile>(path)?.to_pulse().with_context(|| format!("pulse {}", path.display()))
}

/// Uniform detuning grid in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min_hz: f64,
    pub max_hz: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn build(&self) -> Result<DetuningGrid> {
        Ok(DetuningGrid::linspace_hz(self.min_hz, self.max_hz, self.n)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GratingFile {
    pub n_dips: usize,
    pub spacing_hz: f64,
    pub dip_width_hz: f64,
    #[serde(default = "default_depth")]
    pub dip_depth: f64,
    #[serde(default)]
    pub center_offset_hz: f64,
    #[serde(default)]
    pub missing_dips: Vec<usize>,
}

impl From<GratingFile> for GratingSpec {
    fn from(g: GratingFile) -> Self {
        GratingSpec {
            n_dips: g.n_dips,
            spacing_hz: g.spacing_hz,
            dip_width_hz: g.dip_width_hz,
            dip_depth: g.dip_depth,
            center_offset_hz: g.center_offset_hz,
            missing_dips: g.missing_dips,
        }
    }
}

/// A target given point by point or as a grating on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetFile {
    Explicit {
        grid_hz: Vec<f64>,
        target_mz: Vec<f64>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    Grating {
        grating: GratingFile,
        grid: GridSpec,
    },
}

impl TargetFile {
    pub fn build(self) -> Result<TargetProfile> {
        match self {
            TargetFile::Explicit { grid_hz, target_mz, weights } => {
                let grid = DetuningGrid::new(grid_hz.iter().map(|f| f * nvgrating_core::TWO_PI).collect())?;
                let n = grid.len();
                Ok(TargetProfile::new(grid, target_mz, weights.unwrap_or_else(|| vec![1.0; n]))?)
            }
            TargetFile::Grating { grating, grid } => {
                let spec: GratingSpec = grating.into();
                Ok(make_grating_target(&spec, &grid.build()?)?)
            }
        }
    }
}

/// Pulse shape used when no starting pulse is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseShape {
    pub rabi_max_hz: f64,
    pub duration_s: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrapeFile {
    pub pulse: Option<PulseShape>,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub amplitude_ensemble: Vec<f64>,
    pub initial_step: f64,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub growth: f64,
    pub max_step: f64,
    pub initial_jitter: f64,
    pub optimize_detuning_channel: bool,
    /// Curvature pairs kept by L-BFGS; absent means steepest descent.
    pub lbfgs_memory: Option<usize>,
}

impl Default for GrapeFile {
    fn default() -> Self {
        let c = GrapeConfig::default();
        GrapeFile {
            pulse: None,
            max_iterations: c.max_iterations,
            convergence_tol: c.convergence_tol,
            amplitude_ensemble: c.amplitude_ensemble,
            initial_step: c.step_rule.initial_step,
            shrink: c.step_rule.shrink,
            sufficient_decrease: c.step_rule.sufficient_decrease,
            growth: c.step_rule.growth,
            max_step: c.step_rule.max_step,
            initial_jitter: c.initial_jitter,
            optimize_detuning_channel: c.optimize_detuning_channel,
            lbfgs_memory: None,
        }
    }
}

impl GrapeFile {
    pub fn config(&self, seed: u64) -> GrapeConfig {
        GrapeConfig {
            max_iterations: self.max_iterations,
            convergence_tol: self.convergence_tol,
            amplitude_ensemble: self.amplitude_ensemble.clone(),
            step_rule: StepRule {
                initial_step: self.initial_step,
                shrink: self.shrink,
                sufficient_decrease: self.sufficient_decrease,
                growth: self.growth,
                max_step: self.max_step,
            },
            rng_seed: seed,
            initial_jitter: self.initial_jitter,
            optimize_detuning_channel: self.optimize_detuning_channel,
            direction: match self.lbfgs_memory {
                Some(memory) => SearchDirection::Lbfgs { memory },
                None => SearchDirection::SteepestDescent,
            },
        }
    }
}

pub fn trace_csv(trace: &OptimizationTrace) -> String {
    let mut s = String::from("iter,infidelity,grad_norm,step\n");
    for e in &trace.entries {
        let _ = writeln!(s, "{},{},{},{}", e.iteration, e.infidelity, e.grad_norm, e.step);
    }
    s
}

pub fn profile_csv(profile: &ExcitationProfile) -> String {
    let mut s = String::from("detuning_hz,mz\n");
    for (f, m) in profile.grid().values_hz().iter().zip(profile.mz()) {
        let _ = writeln!(s, "{f},{m}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityFile {
    pub c0: f64,
    pub s0_hz: f64,
    pub t_readout_s: f64,
    pub t_seq_s: f64,
    pub t2_star_s: f64,
    #[serde(default = "default_gamma")]
    pub gamma_hz_per_t: f64,
}

impl From<SensitivityFile> for SensitivityParams {
    fn from(f: SensitivityFile) -> Self {
        SensitivityParams {
            c0: f.c0,
            s0_hz: f.s0_hz,
            t_readout_s: f.t_readout_s,
            t_seq_s: f.t_seq_s,
            t2_star_s: f.t2_star_s,
            gamma_hz_per_t: f.gamma_hz_per_t,
        }
    }
}

pub fn curve_csv(curve: &SensitivityCurve) -> String {
    let mut s = String::from("delta_hz,contrast,eta_T_per_sqrtHz\n");
    for i in 0..curve.spacings_hz.len() {
        let _ = writeln!(s, "{},{},{}", curve.spacings_hz[i], curve.contrast[i], curve.eta[i]);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FamilyName {
    Monopole,
    Pseudopole,
}

impl From<FamilyName> for TipFamily {
    fn from(f: FamilyName) -> Self {
        match f {
            FamilyName::Monopole => TipFamily::Monopole,
            FamilyName::Pseudopole => TipFamily::Pseudopole,
        }
    }
}

impl From<TipFamily> for FamilyName {
    fn from(f: TipFamily) -> Self {
        match f {
            TipFamily::Monopole => FamilyName::Monopole,
            TipFamily::Pseudopole => FamilyName::Pseudopole,
        }
    }
}

/// Tip model: `strength` is T m^2 for a monopole and T m for a pseudopole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub family: FamilyName,
    pub strength: f64,
    pub tip_offset_m: [f64; 3],
}

impl ModelFile {
    pub fn model(&self) -> TipFieldModel {
        TipFieldModel::from_family(self.family.into(), self.strength, vec3(self.tip_offset_m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFile {
    #[serde(default)]
    pub nv_position_m: [f64; 3],
    #[serde(default = "z_axis")]
    pub nv_axis: [f64; 3],
    #[serde(default)]
    pub bias_t: f64,
}

impl Default for SensorFile {
    fn default() -> Self {
        SensorFile { nv_position_m: [0.0; 3], nv_axis: z_axis(), bias_t: 0.0 }
    }
}

impl SensorFile {
    pub fn geometry(&self) -> Result<SensorGeometry> {
        Ok(SensorGeometry::new(vec3(self.nv_position_m), vec3(self.nv_axis), self.bias_t)?)
    }

    pub fn from_geometry(g: &SensorGeometry) -> Self {
        SensorFile { nv_position_m: arr(g.nv_position), nv_axis: arr(g.nv_axis()), bias_t: g.bias_field }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    pub x_range_m: f64,
    pub y_range_m: f64,
    pub nx: usize,
    pub ny: usize,
    #[serde(default)]
    pub lift_m: f64,
    #[serde(default)]
    pub x_center_m: f64,
    #[serde(default)]
    pub y_center_m: f64,
}

impl GridFile {
    pub fn grid(&self) -> Result<ScanGrid> {
        let g = ScanGrid::new(self.x_range_m, self.y_range_m, self.nx, self.ny, self.lift_m)?;
        Ok(g.centered_at(self.x_center_m, self.y_center_m))
    }

    pub fn from_grid(g: &ScanGrid) -> Self {
        GridFile {
            x_range_m: g.x_range,
            y_range_m: g.y_range,
            nx: g.nx,
            ny: g.ny,
            lift_m: g.lift_height,
            x_center_m: g.x_center,
            y_center_m: g.y_center,
        }
    }
}

/// Geometry stored next to a matrix CSV as `<file>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub quantity: String,
    pub grid: GridFile,
    #[serde(default)]
    pub sensor: Option<SensorFile>,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// A scalar per scan pixel; masked pixels are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub grid: ScanGrid,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub quantity: String,
    pub sensor: Option<SensorFile>,
}

impl Matrix {
    pub fn from_map(map: &FieldMap, sensor: Option<SensorFile>) -> Self {
        Matrix {
            grid: map.grid,
            values: map.b_parallel.clone(),
            mask: map.mask.clone(),
            quantity: "b_parallel_t".into(),
            sensor,
        }
    }

    pub fn to_map(&self) -> Result<FieldMap> {
        Ok(FieldMap::new(self.grid, self.values.clone(), self.mask.clone())?)
    }

    /// Row-major CSV: one line per `y` row, `nan` for masked pixels.
    pub fn csv(&self) -> String {
        let g = &self.grid;
        let mut s = String::from("# nx,ny,x_range_m,y_range_m,lift_m\n");
        let _ = writeln!(s, "# {},{},{},{},{}", g.nx, g.ny, g.x_range, g.y_range, g.lift_height);
        for j in 0..g.ny {
            for i in 0..g.nx {
                let k = g.index(i, j);
                if i > 0 {
                    s.push(',');
                }
                if self.mask[k] {
                    let _ = write!(s, "{}", self.values[k]);
                } else {
                    s.push_str("nan");
                }
            }
            s.push('\n');
        }
        s
    }

    /// Write the CSV and its sidecar; returns both paths.
    pub fn write(&self, path: &Path) -> Result<[PathBuf; 2]> {
        write_text(path, &self.csv())?;
        let side = sidecar_path(path);
        let meta = MatrixSidecar {
            quantity: self.quantity.clone(),
            grid: GridFile::from_grid(&self.grid),
            sensor: self.sensor,
        };
        write_json(&side, &meta)?;
        Ok([path.to_path_buf(), side])
    }

    /// Read a matrix CSV. The sidecar, when present, supplies the scan
    /// centre and sensor; otherwise the header alone defines the grid.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines();
        let mut header = None;
        let mut rows = Vec::new();
        for line in lines.by_ref() {
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                let fields: Vec<&str> = rest.split(',').map(str::trim).collect();
                if fields.len() == 5 && fields[0].parse::<usize>().is_ok() {
                    header = Some(fields.iter().map(|f| f.to_string()).collect::<Vec<_>>());
                }
                continue;
            }
            let row: Result<Vec<f64>> = t
                .split(',')
                .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad number {v:?} in {}", path.display())))
                .collect();
            rows.push(row?);
        }
        let Some(h) = header else { bail!("{}: missing `# nx,ny,x_range_m,y_range_m,lift_m` header", path.display()) };
        let nx: usize = h[0].parse()?;
        let ny: usize = h[1].parse()?;
        let side = sidecar_path(path);
        let meta: Option<MatrixSidecar> = if side.exists() { Some(read_json(&side)?) } else { None };
        let grid = match &meta {
            Some(m) => m.grid.grid()?,
            None => ScanGrid::new(h[2].parse()?, h[3].parse()?, nx, ny, h[4].parse()?)?,
        };
        if grid.nx != nx || grid.ny != ny {
            bail!("{}: header size {nx}x{ny} disagrees with sidecar", path.display());
        }
        if rows.len() != ny || rows.iter().any(|r| r.len() != nx) {
            bail!("{}: expected {ny} rows of {nx} values", path.display());
        }
        let mut values = vec![f64::NAN; nx * ny];
        let mut mask = vec![false; nx * ny];
        for (j, row) in rows.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                let k = grid.index(i, j);
                values[k] = *v;
                mask[k] = v.is_finite();
            }
        }
        Ok(Matrix {
            grid,
            values,
            mask,
            quantity: meta.as_ref().map(|m| m.quantity.clone()).unwrap_or_default(),
            sensor: meta.and_then(|m| m.sensor),
        })
    }
}

/// Response curve parameters shared by `simulate-scan` and `reconstruct`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseFile {
    pub t2_star_s: f64,
    pub c0: f64,
    pub grid: GridSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseFile {
    pub s0_hz: f64,
    pub dwell_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconFile {
    pub carrier_offset_hz: f64,
    pub gamma_hz_per_t: f64,
    pub smoothness_weight: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub low_info_fraction: f64,
    pub noise: Option<NoiseFile>,
}

impl Default for ReconFile {
    fn default() -> Self {
        let c = ReconstructionConfig::default();
        ReconFile {
            carrier_offset_hz: c.carrier_offset_hz,
            gamma_hz_per_t: c.gamma_hz_per_t,
            smoothness_weight: c.smoothness_weight,
            max_iterations: c.max_iterations,
            convergence_tol: c.convergence_tol,
            low_info_fraction: c.low_info_fraction,
            noise: None,
        }
    }
}

impl ReconFile {
    pub fn config(&self, seed: u64, anchors: Vec<Anchor>) -> ReconstructionConfig {
        ReconstructionConfig {
            smoothness_weight: self.smoothness_weight,
            seed_anchors: anchors,
            carrier_offset_hz: self.carrier_offset_hz,
            gamma_hz_per_t: self.gamma_hz_per_t,
            max_iterations: self.max_iterations,
            convergence_tol: self.convergence_tol,
            noise_model: match self.noise {
                Some(n) => NoiseModel::Poisson { s0_hz: n.s0_hz, dwell_s: n.dwell_s, seed },
                None => NoiseModel::None,
            },
            low_info_fraction: self.low_info_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorFile {
    pub px: usize,
    pub py: usize,
    pub b_tesla: f64,
}

impl From<AnchorFile> for Anchor {
    fn from(a: AnchorFile) -> Self {
        Anchor { px: a.px, py: a.py, b_tesla: a.b_tesla }
    }
}

pub fn diagnostics_csv(grid: &ScanGrid, status: &[PixelStatus]) -> String {
    let mut s = String::from("px,py,status\n");
    for (k, st) in status.iter().enumerate() {
        let (i, j) = grid.coords(k);
        let name = match st {
            PixelStatus::Fitted => "fitted",
            PixelStatus::LowInformation => "low_information",
            PixelStatus::Masked => "masked",
        };
        let _ = writeln!(s, "{i},{j},{name}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub family: FamilyName,
    pub strength: f64,
    pub tip_offset_m: [f64; 3],
    pub bias_t: f64,
    pub rms_residual_t: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FitFile {
    pub fn from_fit(fit: &nvgrating_core::fieldmodel::TipFit) -> Self {
        FitFile {
            family: fit.model.family().into(),
            strength: fit.model.strength(),
            tip_offset_m: arr(fit.model.tip_offset),
            bias_t: fit.bias,
            rms_residual_t: fit.rms_residual,
            converged: fit.converged,
            iterations: fit.iterations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_file_accepts_both_shapes() {
        let explicit = r#"{"grid_hz":[-1,0,1],"target_mz":[1,-1,1]}"#;
        let t: TargetFile = serde_json::from_str(explicit).unwrap();
        assert!(matches!(t, TargetFile::Explicit { weights: None, .. }));
        let grating = r#"{"grating":{"n_dips":3,"spacing_hz":1e6,"dip_width_hz":2e5},
                          "grid":{"min_hz":-3e6,"max_hz":3e6,"n":121}}"#;
        let t: TargetFile = serde_json::from_str(grating).unwrap();
        let profile = t.build().unwrap();
        assert_eq!(profile.dip_centers().len(), 3);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let grid = ScanGrid::new(1e-6, 2e-6, 3, 2, 5e-8).unwrap();
        let m = Matrix {
            grid,
            values: vec![1.5, -2.0, 0.1, f64::NAN, 3e-7, 7.8e-3],
            mask: vec![true, true, true, false, true, true],
            quantity: "b_parallel_t".into(),
            sensor: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        m.write(&path).unwrap();
        let back = Matrix::read(&path).unwrap();
        assert_eq!(back.grid, grid);
        assert_eq!(back.mask, m.mask);
        for k in [0, 1, 2, 4, 5] {
            assert_eq!(back.values[k], m.values[k]);
        }
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# nx,ny,x_range_m,y_range_m,lift_m\n# 3,2,"));
        assert_eq!(text.lines().nth(3).unwrap(), "nan,0.0000003,0.0078");
    }

    #[test]
    fn grape_file_defaults_match_library() {
        let f: GrapeFile = serde_json::from_str("{}").unwrap();
        assert_eq!(f.config(0), GrapeConfig::default());
        let f: GrapeFile = serde_json::from_str(r#"{"lbfgs_memory": 5}"#).unwrap();
        assert_eq!(f.config(0).direction, SearchDirection::Lbfgs { memory: 5 });
    }
}
