//! Exact Bloch-vector propagation under piecewise-constant controls.
//!
//! Each control step is a rotation of the Bloch vector about the effective
//! field `(omega_x, omega_y, delta)` by angle `|Omega_eff| * dt`, so
//! `dm/dt = Omega_eff x m`. Rotations are applied with the Rodrigues formula
//! written as `R(v) m = m + a (v x m) + b v x (v x m)` with `v = Omega_eff dt`,
//! `a = sin(t)/t` and `b = (1 - cos t)/t^2`. The same coefficients are reused
//! by the adjoint gradient in [`crate::grape`].
//!
//! All angular frequencies are rad/s. Hz appear only in helpers that say so.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::par;
use crate::TWO_PI;

/// One piecewise-constant control segment, all in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlStep {
    pub omega_x: f64,
    pub omega_y: f64,
    pub delta_z: f64,
}

impl ControlStep {
    pub const ZERO: ControlStep = ControlStep { omega_x: 0.0, omega_y: 0.0, delta_z: 0.0 };

    pub const fn new(omega_x: f64, omega_y: f64, delta_z: f64) -> Self {
        ControlStep { omega_x, omega_y, delta_z }
    }

    /// Transverse (Rabi) amplitude.
    pub fn amplitude(&self) -> f64 {
        math::hypot(self.omega_x, self.omega_y)
    }
}

/// Relative slack allowed on the amplitude cap when validating pulses.
const AMPLITUDE_SLACK: f64 = 1e-12;

/// Piecewise-constant control waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPulse {
    dt: f64,
    omega_max: f64,
    steps: Vec<ControlStep>,
}

impl ControlPulse {
    pub fn new(dt: f64, omega_max: f64, steps: Vec<ControlStep>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidPulse(format!("dt must be positive, got {dt}")));
        }
        if !(omega_max > 0.0) || !omega_max.is_finite() {
            return Err(Error::InvalidPulse(format!("omega_max must be positive, got {omega_max}")));
        }
        if steps.is_empty() {
            return Err(Error::InvalidPulse("steps must be non-empty".into()));
        }
        let cap = omega_max * (1.0 + AMPLITUDE_SLACK);
        for (k, s) in steps.iter().enumerate() {
            if !(s.omega_x.is_finite() && s.omega_y.is_finite() && s.delta_z.is_finite()) {
                return Err(Error::InvalidPulse(format!("step {k} is not finite")));
            }
            let amp = s.amplitude();
            if amp > cap {
                return Err(Error::InvalidPulse(format!(
                    "step {k} amplitude {amp:.6e} rad/s exceeds omega_max {omega_max:.6e} rad/s"
                )));
            }
        }
        Ok(ControlPulse { dt, omega_max, steps })
    }

    /// All-zero pulse of `n_steps` segments.
    pub fn zero(dt: f64, omega_max: f64, n_steps: usize) -> Result<Self> {
        ControlPulse::new(dt, omega_max, alloc::vec![ControlStep::ZERO; n_steps])
    }

    /// Constant-amplitude pulse along x with amplitude `omega` over `duration`.
    pub fn rectangular(omega: f64, duration: f64, n_steps: usize, omega_max: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidPulse("steps must be non-empty".into()));
        }
        ControlPulse::new(duration / n_steps as f64, omega_max, alloc::vec![ControlStep::new(omega, 0.0, 0.0); n_steps])
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn omega_max(&self) -> f64 {
        self.omega_max
    }

    pub fn steps(&self) -> &[ControlStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Total duration `len * dt`.
    pub fn duration(&self) -> f64 {
        self.steps.len() as f64 * self.dt
    }

    /// Largest transverse amplitude over all steps.
    pub fn peak_amplitude(&self) -> f64 {
        self.steps.iter().map(ControlStep::amplitude).fold(0.0, f64::max)
    }

    /// Pulse followed by `other`; both must share `dt` and `omega_max`.
    pub fn concat(&self, other: &ControlPulse) -> Result<ControlPulse> {
        if self.dt != other.dt || self.omega_max != other.omega_max {
            return Err(Error::InvalidPulse("concatenated pulses must share dt and omega_max".into()));
        }
        let mut steps = self.steps.clone();
        steps.extend_from_slice(&other.steps);
        ControlPulse::new(self.dt, self.omega_max, steps)
    }

    /// Replace the step list, re-validating the amplitude cap.
    pub fn with_steps(&self, steps: Vec<ControlStep>) -> Result<ControlPulse> {
        ControlPulse::new(self.dt, self.omega_max, steps)
    }

    pub(crate) fn steps_mut(&mut self) -> &mut [ControlStep] {
        &mut self.steps
    }
}

/// Bloch vector of a two-level system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochState {
    pub mx: f64,
    pub my: f64,
    pub mz: f64,
}

impl BlochState {
    /// `mz = +1`, the optically pumped `|0>` state.
    pub const UP: BlochState = BlochState { mx: 0.0, my: 0.0, mz: 1.0 };

    pub const fn new(mx: f64, my: f64, mz: f64) -> Self {
        BlochState { mx, my, mz }
    }

    pub fn norm(&self) -> f64 {
        self.to_vec3().norm()
    }

    pub fn to_vec3(self) -> Vec3 {
        Vec3::new(self.mx, self.my, self.mz)
    }

    pub fn from_vec3(v: Vec3) -> Self {
        BlochState::new(v.x, v.y, v.z)
    }
}

/// Rotation by the rotation vector `v = Omega_eff * dt`, with the scalar
/// coefficients needed for both the forward map and its derivative.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Rotation {
    pub v: Vec3,
    pub a: f64,
    pub b: f64,
    /// `a'(theta) / theta`
    pub da: f64,
    /// `b'(theta) / theta`
    pub db: f64,
}

impl Rotation {
    #[inline]
    pub fn new(v: Vec3) -> Rotation {
        let t2 = v.norm_sq();
        if t2 < 1e-2 {
            // theta < 0.1: truncated series, next terms below 1e-15
            let t4 = t2 * t2;
            let t6 = t4 * t2;
            let t8 = t4 * t4;
            Rotation {
                v,
                a: 1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0 + t8 / 362_880.0,
                b: 0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40_320.0 + t8 / 3_628_800.0,
                da: -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t6 / 45_360.0,
                db: -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t6 / 453_600.0,
            }
        } else {
            let t = math::sqrt(t2);
            let (s, c) = math::sin_cos(t);
            let sh = math::sin(0.5 * t);
            let a = s / t;
            let b = 2.0 * sh * sh / t2;
            Rotation { v, a, b, da: (t * c - s) / (t2 * t), db: (t * s - 2.0 * (1.0 - c)) / (t2 * t2) }
        }
    }

    #[inline]
    pub fn apply(&self, m: Vec3) -> Vec3 {
        let vm = self.v.cross(m);
        m + vm * self.a + self.v.cross(vm) * self.b
    }

    /// Transpose (= inverse) of the rotation.
    #[inline]
    pub fn apply_inverse(&self, m: Vec3) -> Vec3 {
        let vm = self.v.cross(m);
        m - vm * self.a + self.v.cross(vm) * self.b
    }

    /// Gradient with respect to `v` of `lambda . R(v) m`.
    #[inline]
    pub fn grad_v(&self, m: Vec3, lambda: Vec3) -> Vec3 {
        let v = self.v;
        let vm = v.cross(m);
        let vvm = v.cross(vm);
        let lv = lambda.cross(v);
        m.cross(lambda) * self.a
            + (vm.cross(lambda) + m.cross(lv)) * self.b
            + v * (self.da * lambda.dot(vm) + self.db * lambda.dot(vvm))
    }
}

/// Rotate `state` about `(omega_x, omega_y, delta)` for `dt` seconds.
pub fn step_rotate(state: BlochState, omega_x: f64, omega_y: f64, delta: f64, dt: f64) -> BlochState {
    let v = Vec3::new(omega_x * dt, omega_y * dt, delta * dt);
    if v.norm_sq() == 0.0 {
        return state;
    }
    BlochState::from_vec3(Rotation::new(v).apply(state.to_vec3()))
}

/// Rotation vector of one step for a spin with additional detuning `extra`
/// under transverse amplitude scale `scale`.
#[inline]
pub(crate) fn step_vector(step: &ControlStep, dt: f64, scale: f64, extra: f64) -> Vec3 {
    Vec3::new(scale * step.omega_x * dt, scale * step.omega_y * dt, (step.delta_z + extra) * dt)
}

/// Final state after applying every step of `pulse` with the spin detuned by
/// `extra_detuning` (rad/s) on top of each step's `delta_z`.
pub fn propagate(pulse: &ControlPulse, extra_detuning: f64, initial: BlochState) -> BlochState {
    propagate_scaled(pulse, 1.0, extra_detuning, initial)
}

/// Like [`propagate`] with the transverse controls multiplied by `scale`.
pub fn propagate_scaled(pulse: &ControlPulse, scale: f64, extra_detuning: f64, initial: BlochState) -> BlochState {
    let mut m = initial.to_vec3();
    for step in pulse.steps() {
        let v = step_vector(step, pulse.dt(), scale, extra_detuning);
        if v.norm_sq() != 0.0 {
            m = Rotation::new(v).apply(m);
        }
    }
    BlochState::from_vec3(m)
}

/// Strictly increasing list of detunings in rad/s.
#[derive(Debug, Clone, PartialEq)]
pub struct DetuningGrid {
    values: Vec<f64>,
}

impl DetuningGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidGrid("at least 2 points required".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite detuning".into()));
        }
        if values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("detunings must be strictly increasing".into()));
        }
        Ok(DetuningGrid { values })
    }

    /// `n` evenly spaced points from `min` to `max` inclusive, rad/s.
    pub fn linspace(min: f64, max: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGrid("at least 2 points required".into()));
        }
        let h = (max - min) / (n - 1) as f64;
        DetuningGrid::new((0..n).map(|i| min + h * i as f64).collect())
    }

    /// Evenly spaced grid given in Hz, stored in rad/s.
    pub fn linspace_hz(min_hz: f64, max_hz: f64, n: usize) -> Result<Self> {
        DetuningGrid::linspace(TWO_PI * min_hz, TWO_PI * max_hz, n)
    }

    /// Grid in rad/s.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_hz(&self) -> Vec<f64> {
        self.values.iter().map(|v| v / TWO_PI).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Largest gap between neighbouring points, rad/s.
    pub fn max_spacing(&self) -> f64 {
        self.values.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// Final `mz` over a detuning grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationProfile {
    grid: DetuningGrid,
    mz: Vec<f64>,
}

impl ExcitationProfile {
    pub fn new(grid: DetuningGrid, mz: Vec<f64>) -> Result<Self> {
        if mz.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "profile has {} values for {} grid points",
                mz.len(),
                grid.len()
            )));
        }
        if let Some(v) = mz.iter().find(|v| !(**v >= -1.0 - 1e-9 && **v <= 1.0 + 1e-9)) {
            return Err(Error::InvalidTarget(format!("mz value {v} outside [-1, 1]")));
        }
        Ok(ExcitationProfile { grid, mz })
    }

    pub fn grid(&self) -> &DetuningGrid {
        &self.grid
    }

    pub fn mz(&self) -> &[f64] {
        &self.mz
    }
}

/// `mz` after the pulse for a spin starting in `mz = +1` at every grid
/// detuning.
pub fn excitation_profile(pulse: &ControlPulse, grid: &DetuningGrid) -> ExcitationProfile {
    let values = grid.values();
    let mz = par::map_indexed(values.len(), |i| propagate(pulse, values[i], BlochState::UP).mz);
    ExcitationProfile { grid: grid.clone(), mz }
}

/// Gaussian kernel half-width in standard deviations.
const KERNEL_SIGMAS: f64 = 5.0;

/// Convolve the excitation `1 - mz` with a Gaussian in detuning of standard
/// deviation `1 / t2_star` (rad/s), which makes a free-induction signal decay
/// as `exp(-t^2 / (2 T2*^2))`. The kernel is cut at +-5 sigma and
/// renormalised over whatever part of it lies on the grid.
pub fn dephase_profile(profile: &ExcitationProfile, t2_star: f64) -> Result<ExcitationProfile> {
    if !(t2_star > 0.0) || !t2_star.is_finite() {
        return Err(Error::InvalidParams(format!("t2_star must be positive, got {t2_star}")));
    }
    let sigma = 1.0 / t2_star;
    let grid = profile.grid();
    let spacing = grid.max_spacing();
    if spacing > sigma {
        return Err(Error::GridTooCoarse { spacing, limit: sigma });
    }
    let x = grid.values();
    let n = x.len();
    // trapezoid weights
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let left = if i > 0 { x[i] - x[i - 1] } else { 0.0 };
            let right = if i + 1 < n { x[i + 1] - x[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect();
    let exc: Vec<f64> = profile.mz().iter().map(|m| 1.0 - m).collect();
    let reach = KERNEL_SIGMAS * sigma;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mz = par::map_indexed(n, |i| {
        let lo = x.partition_point(|v| *v < x[i] - reach);
        let hi = x.partition_point(|v| *v <= x[i] + reach);
        let mut num = 0.0;
        let mut den = 0.0;
        for j in lo..hi {
            let d = x[j] - x[i];
            let k = math::exp(-d * d * inv2s2) * w[j];
            num += k * exc[j];
            den += k;
        }
        (1.0 - num / den).clamp(-1.0, 1.0)
    });
    Ok(ExcitationProfile { grid: grid.clone(), mz })
}

/// Amplitude of the fundamental Fourier component of the excitation
/// `(1 - mz) / 2` at period `spacing_hz`, over `periods` whole periods
/// centred on `center_hz`. For an ideal grating of full-depth dips this is the
/// modulation depth of the fringe pattern; Gaussian dephasing scales it by
/// exactly `exp(-1 / (2 spacing^2 T2*^2))`.
pub fn fundamental_modulation(
    profile: &ExcitationProfile,
    center_hz: f64,
    spacing_hz: f64,
    periods: usize,
) -> Result<f64> {
    if periods == 0 || !(spacing_hz > 0.0) {
        return Err(Error::InvalidParams("need a positive spacing and at least one period".into()));
    }
    let half = 0.5 * spacing_hz * periods as f64;
    let xs = profile.grid().values_hz();
    let (lo, hi) = (center_hz - half, center_hz + half);
    if xs[0] > lo || xs[xs.len() - 1] < hi {
        return Err(Error::InvalidGrid(format!("window [{lo:.6e}, {hi:.6e}] Hz not covered by the profile grid")));
    }
    // trapezoid on the grid restricted to the window, with linear end pieces
    let sample = |f: f64| -> f64 {
        let j = xs.partition_point(|v| *v <= f).clamp(1, xs.len() - 1);
        let t = (f - xs[j - 1]) / (xs[j] - xs[j - 1]);
        let m = profile.mz()[j - 1] * (1.0 - t) + profile.mz()[j] * t;
        0.5 * (1.0 - m)
    };
    let mut pts: Vec<(f64, f64)> = Vec::new();
    pts.push((lo, sample(lo)));
    for (i, f) in xs.iter().enumerate() {
        if *f > lo && *f < hi {
            pts.push((*f, 0.5 * (1.0 - profile.mz()[i])));
        }
    }
    pts.push((hi, sample(hi)));
    let k = TWO_PI / spacing_hz;
    let (mut c, mut s) = (0.0, 0.0);
    for w in pts.windows(2) {
        let (f0, e0) = w[0];
        let (f1, e1) = w[1];
        let h = 0.5 * (f1 - f0);
        let (s0, c0) = math::sin_cos(k * (f0 - center_hz));
        let (s1, c1) = math::sin_cos(k * (f1 - center_hz));
        c += h * (e0 * c0 + e1 * c1);
        s += h * (e0 * s0 + e1 * s1);
    }
    let len = 2.0 * half;
    Ok(2.0 / len * math::hypot(c, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    #[test]
    fn resonant_pi_pulse_inverts() {
        let omega = TWO_PI * 1e6;
        let s = step_rotate(BlochState::UP, omega, 0.0, 0.0, PI / omega);
        assert!((s.mz + 1.0).abs() < 1e-12);
        assert!(s.mx.abs() < 1e-9 && s.my.abs() < 1e-9);
    }

    #[test]
    fn zero_field_is_identity() {
        let s = BlochState::new(0.3, -0.4, (1.0f64 - 0.25).sqrt());
        assert_eq!(step_rotate(s, 0.0, 0.0, 0.0, 1.0), s);
    }

    #[test]
    fn rotation_sense_matches_precession() {
        // dm/dt = delta z x m takes +x towards +y
        let s = step_rotate(BlochState::new(1.0, 0.0, 0.0), 0.0, 0.0, 1.0, 0.1);
        assert!(s.my > 0.0);
    }

    #[test]
    fn inverse_undoes_rotation() {
        let r = Rotation::new(Vec3::new(0.3, -1.2, 0.7));
        let m = Vec3::new(0.1, 0.2, 0.3);
        let back = r.apply_inverse(r.apply(m));
        assert!((back - m).norm() < 1e-14);
    }

    #[test]
    fn series_and_closed_form_agree_at_switch() {
        let below = Rotation::new(Vec3::new(0.0999999, 0.0, 0.0));
        let above = Rotation::new(Vec3::new(0.1000001, 0.0, 0.0));
        assert!((below.a - above.a).abs() < 1e-7);
        assert!((below.b - above.b).abs() < 1e-7);
        assert!((below.da - above.da).abs() < 1e-7);
        assert!((below.db - above.db).abs() < 1e-7);
    }

    #[test]
    fn pulse_rejects_amplitude_over_cap() {
        let err = ControlPulse::new(1e-9, 1.0, alloc::vec![ControlStep::new(1.0, 0.1, 0.0)]);
        assert!(matches!(err, Err(Error::InvalidPulse(_))));
        assert!(ControlPulse::new(0.0, 1.0, alloc::vec![ControlStep::ZERO]).is_err());
        assert!(ControlPulse::new(1.0, 1.0, Vec::new()).is_err());
    }

    #[test]
    fn grid_must_increase() {
        assert!(DetuningGrid::new(alloc::vec![0.0, 0.0]).is_err());
        assert!(DetuningGrid::new(alloc::vec![0.0]).is_err());
        assert!(DetuningGrid::new(alloc::vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn dephase_rejects_coarse_grid() {
        let grid = DetuningGrid::linspace(-10.0, 10.0, 3).unwrap();
        let p = ExcitationProfile::new(grid, alloc::vec![1.0; 3]).unwrap();
        assert!(matches!(dephase_profile(&p, 1.0), Err(Error::GridTooCoarse { .. })));
        assert!(dephase_profile(&p, -1.0).is_err());
    }

    #[test]
    fn dephase_spreads_a_single_point_dip_preserving_area() {
        let n = 401;
        let grid = DetuningGrid::linspace(-200.0, 200.0, n).unwrap();
        let mut mz = alloc::vec![1.0; n];
        mz[200] = 0.0; // depth 1 in (1 - mz)
        let p = ExcitationProfile::new(grid, mz).unwrap();
        let out = dephase_profile(&p, 1.0 / 10.0).unwrap();
        let area_in: f64 = 1.0;
        let area_out: f64 = out.mz().iter().map(|m| 1.0 - m).sum();
        assert!((area_out - area_in).abs() / area_in < 0.01);
        // grid-resolved Gaussian peak: h / (sqrt(2 pi) sigma)
        let peak = 1.0 - out.mz()[200];
        let expected = 1.0 / ((2.0 * PI).sqrt() * 10.0);
        assert!((peak - expected).abs() / expected < 0.01);
    }

    #[test]
    fn dephase_near_identity_when_kernel_matches_spacing() {
        // sigma equal to the grid spacing: a smooth profile barely moves
        let n = 201;
        let grid = DetuningGrid::linspace(-100.0, 100.0, n).unwrap();
        let mz: Vec<f64> = grid.values().iter().map(|x| 1.0 - 2.0 * libm::exp(-x * x / 800.0)).collect();
        let p = ExcitationProfile::new(grid, mz.clone()).unwrap();
        let out = dephase_profile(&p, 1.0).unwrap();
        for (a, b) in out.mz().iter().zip(mz.iter()) {
            assert!((a - b).abs() < 0.01);
        }
    }
}
