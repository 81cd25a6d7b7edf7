//! Command-line pipelines for grating spectroscopy: pulse optimisation,
//! excitation profiles, sensitivity curves, tip field maps, fringe-image
//! simulation and reconstruction, and the `reproduce` recipes.
//!
//! Every run writes a [`manifest::RunManifest`] with SHA-256 digests of its
//! inputs and outputs. Exit codes: 0 success, 1 data or validation error,
//! 2 usage error.

pub mod formats;
pub mod manifest;
pub mod recipes;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nvgrating_core::bloch::{dephase_profile, excitation_profile, ControlPulse};
use nvgrating_core::fieldmodel::field_map;
use nvgrating_core::grape::{initial_guess, optimize};
use nvgrating_core::imaging::{assign_fringes, build_response, reconstruct, simulate_scan, Anchor, FringeImage};
use nvgrating_core::sensitivity::{eta, log_sweep, optimal_spacing, SensitivityCurve, SensitivityParams};
use nvgrating_core::TWO_PI;

use formats::*;
use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nvgrating", version, about = "Optimal-control grating spectroscopy toolkit")]
pub struct Cli {
    /// Seed for every random draw (pulse jitter, shot noise).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Where to write the run manifest (default: next to the output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    Fig2,
    Fig3,
    Fig4,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimise a pulse against a target profile.
    Optimize {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Starting pulse; otherwise built from the config's `pulse` shape.
        #[arg(long)]
        initial: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Excitation profile of a pulse over a detuning grid.
    Profile {
        #[arg(long)]
        pulse: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Apply Gaussian dephasing with this T2* (seconds).
        #[arg(long)]
        t2_star: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sensitivity curve and its optimum.
    Sensitivity {
        #[arg(long)]
        params: PathBuf,
        /// `min_hz:max_hz:n`, logarithmically spaced.
        #[arg(long, default_value = "1e5:1e8:1000")]
        sweep: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tip field map over a scan grid.
    Fieldmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        sensor: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fluorescence image of a field map seen through a pulse.
    SimulateScan {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        pulse: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Field map from a fringe image and seed anchors.
    Reconstruct {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        pulse: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Fit a tip model to a field map.
    FitTip {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, value_enum)]
        family: FamilyName,
        /// Sensor geometry; defaults to the map sidecar's.
        #[arg(long)]
        sensor: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a packaged desk-scale recipe and write its data files.
    Reproduce {
        #[arg(value_enum)]
        figure: Figure,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `argv` (program name first), run, and return the exit code.
/// Messages go to `stdout` / `stderr`.
pub fn run<I, T>(argv: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = match &e {
                CliError::Usage(m) => writeln!(stderr, "usage error: {m}"),
                CliError::Data(err) => writeln!(stderr, "error: {err:#}"),
            };
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Data(e.into()))?;
    let report = pool.install(|| dispatch(cli))?;
    let manifest = RunManifest::new(report.name, cli.seed, &report.inputs, &report.outputs)?;
    let path = cli.manifest.clone().or(report.default_manifest);
    match path {
        Some(p) => write_json(&p, &manifest)?,
        None => {
            let line = serde_json::to_string(&manifest).map_err(anyhow::Error::from)?;
            writeln!(stderr, "manifest: {line}").map_err(anyhow::Error::from)?;
        }
    }
    for line in &report.lines {
        writeln!(stdout, "{line}").map_err(anyhow::Error::from)?;
    }
    Ok(())
}

/// What a subcommand read and wrote.
struct Report {
    name: &'static str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    default_manifest: Option<PathBuf>,
    /// Lines for stdout, printed after the manifest is written.
    lines: Vec<String>,
}

impl Report {
    fn new(name: &'static str, inputs: &[&Path]) -> Self {
        Report {
            name,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: Vec::new(),
            default_manifest: None,
            lines: Vec::new(),
        }
    }

    fn output(mut self, path: &Path) -> Self {
        if self.default_manifest.is_none() {
            self.default_manifest = Some(sibling_manifest(path));
        }
        self.outputs.push(path.to_path_buf());
        self
    }
}

fn sibling_manifest(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn parse_sweep(s: &str) -> Result<(f64, f64, usize), CliError> {
    let bad = || CliError::Usage(format!("--sweep expects min_hz:max_hz:n, got {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: f64 = parts[2].trim().parse().map_err(|_| bad())?;
    if !(lo > 0.0 && hi > lo && n >= 1.0 && n.fract() == 0.0) {
        return Err(bad());
    }
    Ok((lo, hi, n as usize))
}

fn response_for(pulse: &ControlPulse, params: &ResponseFile) -> Result<nvgrating_core::imaging::ResponseCurve> {
    let profile = excitation_profile(pulse, &params.grid.build()?);
    Ok(build_response(&profile, params.t2_star_s, params.c0)?)
}

fn dispatch(cli: &Cli) -> Result<Report, CliError> {
    let seed = cli.seed;
    let report = match &cli.command {
        Command::Optimize { target, config, initial, out, trace } => {
            let profile = read_json::<TargetFile>(target)?.build()?;
            let cfg_file: GrapeFile = read_json(config)?;
            let start = match initial {
                Some(p) => read_pulse(p)?,
                None => {
                    let shape = cfg_file
                        .pulse
                        .context("config needs a `pulse` shape {rabi_max_hz, duration_s, n_steps} or pass --initial")?;
                    initial_guess(&profile, TWO_PI * shape.rabi_max_hz, shape.duration_s, shape.n_steps)
                        .map_err(anyhow::Error::from)?
                }
            };
            let (pulse, tr) = optimize(&start, &profile, &cfg_file.config(seed)).map_err(anyhow::Error::from)?;
            write_json(out, &PulseFile::from_pulse(&pulse))?;
            let mut inputs: Vec<&Path> = vec![target, config];
            if let Some(p) = initial {
                inputs.push(p);
            }
            let mut r = Report::new("optimize", &inputs).output(out);
            if let Some(t) = trace {
                write_text(t, &trace_csv(&tr))?;
                r = r.output(t);
            }
            r.lines.push(format!(
                "infidelity={} iterations={} converged={} stalled={}",
                tr.final_infidelity(),
                tr.accepted_iterations(),
                tr.converged,
                tr.stalled
            ));
            r
        }
        Command::Profile { pulse, grid, t2_star, out } => {
            let p = read_pulse(pulse)?;
            let g: GridSpec = read_json(grid)?;
            let mut profile = excitation_profile(&p, &g.build()?);
            if let Some(t2) = t2_star {
                profile = dephase_profile(&profile, *t2).map_err(anyhow::Error::from)?;
            }
            let csv = profile_csv(&profile);
            let mut r = Report::new("profile", &[pulse, grid]);
            match out {
                Some(o) => {
                    write_text(o, &csv)?;
                    r = r.output(o);
                }
                None => r.lines.push(csv.trim_end().to_string()),
            }
            r
        }
        Command::Sensitivity { params, sweep, out } => {
            let (lo, hi, n) = parse_sweep(sweep)?;
            let p: SensitivityParams = read_json::<SensitivityFile>(params)?.into();
            p.validate().map_err(anyhow::Error::from)?;
            let curve = SensitivityCurve::evaluate(log_sweep(lo, hi, n), &p);
            let d = optimal_spacing(&p);
            let mut r = Report::new("sensitivity", &[params]);
            if let Some(o) = out {
                write_text(o, &curve_csv(&curve))?;
                r = r.output(o);
            }
            let k = curve.argmin();
            r.lines.push(format!(
                "delta_opt_hz={d:.6e} eta_opt_uT_sqrtHz={:.4} sweep_argmin_hz={:.6e} sweep_eta_uT_sqrtHz={:.4}",
                eta(d, &p) * 1e6,
                curve.spacings_hz[k],
                curve.eta[k] * 1e6
            ));
            r
        }
        Command::Fieldmap { model, grid, sensor, out } => {
            let m: ModelFile = read_json(model)?;
            let g: GridFile = read_json(grid)?;
            let s: SensorFile = match sensor {
                Some(p) => read_json(p)?,
                None => SensorFile::default(),
            };
            let map = field_map(&m.model(), &s.geometry()?, &g.grid()?);
            let files = Matrix::from_map(&map, Some(s)).write(out)?;
            let mut inputs: Vec<&Path> = vec![model, grid];
            if let Some(p) = sensor {
                inputs.push(p);
            }
            let mut r = Report::new("fieldmap", &inputs).output(&files[0]).output(&files[1]);
            r.lines.push(format!("pixels={} valid={}", map.grid.len(), map.valid_count()));
            r
        }
        Command::SimulateScan { map, pulse, params, config, out } => {
            let field = Matrix::read(map)?;
            let p = read_pulse(pulse)?;
            let resp = response_for(&p, &read_json(params)?)?;
            let cfg = read_json::<ReconFile>(config)?.config(seed, Vec::new());
            let image = simulate_scan(&field.to_map()?, &resp, &cfg).map_err(anyhow::Error::from)?;
            let m = Matrix {
                grid: image.grid,
                values: image.fluorescence.clone(),
                mask: image.mask.clone(),
                quantity: "fluorescence".into(),
                sensor: field.sensor,
            };
            let files = m.write(out)?;
            let mut r = Report::new("simulate-scan", &[map, pulse, params, config]).output(&files[0]).output(&files[1]);
            r.lines.push(format!("pixels={} valid={}", image.grid.len(), image.valid_count()));
            r
        }
        Command::Reconstruct { image, pulse, params, config, anchors, out, diagnostics } => {
            let img = Matrix::read(image)?;
            let fringe =
                FringeImage::new(img.grid, img.values.clone(), img.mask.clone()).map_err(anyhow::Error::from)?;
            let p = read_pulse(pulse)?;
            let resp = response_for(&p, &read_json(params)?)?;
            let a: Vec<Anchor> = read_json::<Vec<AnchorFile>>(anchors)?.into_iter().map(Anchor::from).collect();
            let cfg = read_json::<ReconFile>(config)?.config(seed, a);
            let asg = assign_fringes(&fringe, &resp, &cfg).map_err(anyhow::Error::from)?;
            let rec = reconstruct(&fringe, &resp, &asg.map, &cfg).map_err(anyhow::Error::from)?;
            let files = Matrix::from_map(&rec.map, img.sensor).write(out)?;
            let mut r = Report::new("reconstruct", &[image, pulse, params, config, anchors])
                .output(&files[0])
                .output(&files[1]);
            if let Some(d) = diagnostics {
                write_text(d, &diagnostics_csv(&rec.map.grid, &rec.status))?;
                r = r.output(d);
            }
            r.lines.push(format!(
                "fitted={} unassigned={} objective={} converged={}",
                rec.fitted_pixels().count(),
                asg.unassigned.len(),
                rec.objective.last().copied().unwrap_or(0.0),
                rec.converged
            ));
            r
        }
        Command::FitTip { map, family, sensor, out } => {
            let m = Matrix::read(map)?;
            let s = match sensor {
                Some(p) => read_json(p)?,
                None => m.sensor.unwrap_or_default(),
            };
            let fit = recipes::fit_family(&m.to_map()?, (*family).into(), &s.geometry()?)?;
            write_json(out, &FitFile::from_fit(&fit))?;
            let mut inputs: Vec<&Path> = vec![map];
            if let Some(p) = sensor {
                inputs.push(p);
            }
            let mut r = Report::new("fit-tip", &inputs).output(out);
            r.lines.push(format!("rms_residual_t={:.6e} converged={}", fit.rms_residual, fit.converged));
            r
        }
        Command::Reproduce { figure, out } => {
            let (name, files) = match figure {
                Figure::Fig2 => ("reproduce fig2", recipes::reproduce_fig2(out)?),
                Figure::Fig3 => ("reproduce fig3", recipes::reproduce_fig3(out)?),
                Figure::Fig4 => ("reproduce fig4", recipes::reproduce_fig4(out)?),
            };
            let mut r = Report::new(name, &[]);
            r.default_manifest = Some(out.join("manifest.json"));
            r.lines.extend(files.iter().map(|f| f.display().to_string()));
            r.outputs = files;
            r
        }
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_syntax() {
        assert_eq!(parse_sweep("1e5:1e8:1000").unwrap(), (1e5, 1e8, 1000));
        for bad in ["1e5:1e8", "a:b:c", "1e8:1e5:10", "1e5:1e8:2.5", "0:1:3"] {
            assert!(matches!(parse_sweep(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn exit_codes() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(run(["nvgrating", "no-such-command"], &mut out, &mut err), 2);
        assert_eq!(run(["nvgrating", "--help"], &mut out, &mut err), 0);
        let missing = ["nvgrating", "profile", "--pulse", "/nonexistent/p.json", "--grid", "/nonexistent/g.json"];
        assert_eq!(run(missing, &mut out, &mut err), 1);
    }
}
