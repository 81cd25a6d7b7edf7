//! Grating pulse synthesis by gradient ascent pulse engineering.
//!
//! The figure of merit is the weighted squared error between the achieved
//! final `mz` and a target pattern, averaged over an ensemble of Rabi
//! amplitude scales. Gradients come from one forward and one adjoint
//! (backward) sweep per grid point and ensemble member, differentiating each
//! step's Rodrigues rotation exactly.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bloch::{step_vector, ControlPulse, ControlStep, DetuningGrid, Rotation};
use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::par;
use crate::TWO_PI;

/// Evenly spaced Gaussian dips. Frequencies in Hz; `dip_width_hz` is the
/// full width at half maximum of each dip.
#[derive(Debug, Clone, PartialEq)]
pub struct GratingSpec {
    pub n_dips: usize,
    pub spacing_hz: f64,
    pub dip_width_hz: f64,
    pub dip_depth: f64,
    pub center_offset_hz: f64,
    pub missing_dips: Vec<usize>,
}

impl GratingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_dips == 0 {
            return Err(Error::InvalidTarget("n_dips must be >= 1".into()));
        }
        if !(self.dip_width_hz > 0.0) {
            return Err(Error::InvalidTarget("dip_width must be positive".into()));
        }
        if self.n_dips > 1 && !(self.spacing_hz > self.dip_width_hz) {
            return Err(Error::InvalidTarget("spacing must exceed dip_width".into()));
        }
        if !(self.dip_depth > 0.0 && self.dip_depth <= 1.0) {
            return Err(Error::InvalidTarget("dip_depth must lie in (0, 1]".into()));
        }
        if let Some(k) = self.missing_dips.iter().find(|k| **k >= self.n_dips) {
            return Err(Error::InvalidTarget(format!("missing dip {k} out of range")));
        }
        Ok(())
    }

    /// Centre of dip `k` in Hz, including missing ones.
    pub fn dip_center_hz(&self, k: usize) -> f64 {
        self.center_offset_hz + (k as f64 - 0.5 * (self.n_dips as f64 - 1.0)) * self.spacing_hz
    }

    /// Centres of the dips actually present, in Hz.
    pub fn active_centers_hz(&self) -> Vec<f64> {
        (0..self.n_dips).filter(|k| !self.missing_dips.contains(k)).map(|k| self.dip_center_hz(k)).collect()
    }

    /// Distance between the outermost dip centres, Hz.
    pub fn span_hz(&self) -> f64 {
        (self.n_dips as f64 - 1.0) * self.spacing_hz
    }
}

/// Desired final `mz` with per-point weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetProfile {
    grid: DetuningGrid,
    target_mz: Vec<f64>,
    weights: Vec<f64>,
}

impl TargetProfile {
    pub fn new(grid: DetuningGrid, target_mz: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if target_mz.len() != grid.len() || weights.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "target has {} values and {} weights for {} grid points",
                target_mz.len(),
                weights.len(),
                grid.len()
            )));
        }
        if target_mz.iter().any(|t| !(*t >= -1.0 && *t <= 1.0)) {
            return Err(Error::InvalidTarget("target_mz must lie in [-1, 1]".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidTarget("weights must be finite and non-negative".into()));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidTarget("weights must not all be zero".into()));
        }
        Ok(TargetProfile { grid, target_mz, weights })
    }

    /// Uniformly weighted target.
    pub fn uniform(grid: DetuningGrid, target_mz: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        TargetProfile::new(grid, target_mz, vec![1.0; n])
    }

    pub fn grid(&self) -> &DetuningGrid {
        &self.grid
    }

    pub fn target_mz(&self) -> &[f64] {
        &self.target_mz
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Dip centres in rad/s: local minima of the target reaching at least
    /// half of its deepest excursion, refined by a parabola through the
    /// neighbouring samples.
    pub fn dip_centers(&self) -> Vec<f64> {
        let t = &self.target_mz;
        let x = self.grid.values();
        let deepest = t.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(deepest < 1.0) {
            return Vec::new();
        }
        let level = 1.0 - 0.5 * (1.0 - deepest);
        let mut out = Vec::new();
        for i in 0..t.len() {
            let left_higher = i == 0 || t[i] < t[i - 1];
            let right_not_lower = i + 1 == t.len() || t[i] <= t[i + 1];
            if !(left_higher && right_not_lower && t[i] <= level) {
                continue;
            }
            let mut c = x[i];
            if i > 0 && i + 1 < t.len() {
                let curv = t[i - 1] - 2.0 * t[i] + t[i + 1];
                if curv > 0.0 {
                    let h = 0.5 * (x[i + 1] - x[i - 1]);
                    c += 0.5 * (t[i - 1] - t[i + 1]) / curv * h;
                }
            }
            out.push(c);
        }
        out
    }
}

/// Unit-height Gaussian with full width at half maximum 1.
#[inline]
fn unit_bump(u: f64) -> f64 {
    math::exp(-4.0 * core::f64::consts::LN_2 * u * u)
}

/// Target `mz = 1 - 2 depth sum_k G((delta - delta_k) / w)` over `grid`.
pub fn make_grating_target(spec: &GratingSpec, grid: &DetuningGrid) -> Result<TargetProfile> {
    spec.validate()?;
    let first = TWO_PI * spec.dip_center_hz(0);
    let last = TWO_PI * spec.dip_center_hz(spec.n_dips - 1);
    if grid.min() > first || grid.max() < last {
        return Err(Error::InvalidGrid("grid does not span all dip centres".into()));
    }
    let limit = TWO_PI * spec.dip_width_hz / 2.0;
    let spacing = grid.max_spacing();
    if !(spacing < limit) {
        return Err(Error::GridTooCoarse { spacing, limit });
    }
    let centers = spec.active_centers_hz();
    let w = spec.dip_width_hz;
    let mut target = Vec::with_capacity(grid.len());
    let mut worst = 0.0f64;
    for f in grid.values_hz() {
        let s: f64 = centers.iter().map(|c| unit_bump((f - c) / w)).sum();
        worst = worst.max(s);
        target.push((1.0 - 2.0 * spec.dip_depth * s).clamp(-1.0, 1.0));
    }
    if worst > 1.01 {
        return Err(Error::OverlappingDips { excess: worst - 1.0 });
    }
    TargetProfile::uniform(grid.clone(), target)
}

/// Backtracking line-search parameters. Step sizes are dimensionless: a step
/// of `s` moves the largest gradient component by `s * omega_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRule {
    pub initial_step: f64,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    /// Step enlargement after an accepted iteration.
    pub growth: f64,
    pub max_step: f64,
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule { initial_step: 0.05, shrink: 0.5, sufficient_decrease: 1e-4, growth: 1.5, max_step: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrapeConfig {
    pub max_iterations: usize,
    /// Stop when the relative infidelity change of an accepted step drops
    /// below this.
    pub convergence_tol: f64,
    /// Multiplicative Rabi scales; `omega_x`, `omega_y` are scaled, `delta_z`
    /// is not.
    pub amplitude_ensemble: Vec<f64>,
    pub step_rule: StepRule,
    pub rng_seed: u64,
    /// Random perturbation of the starting pulse, as a fraction of
    /// `omega_max`. Zero disables it.
    pub initial_jitter: f64,
    pub optimize_detuning_channel: bool,
    pub direction: SearchDirection,
}

/// How each iteration picks its search direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SearchDirection {
    #[default]
    SteepestDescent,
    /// Limited-memory BFGS keeping the last `memory` curvature pairs.
    Lbfgs { memory: usize },
}

impl Default for GrapeConfig {
    fn default() -> Self {
        GrapeConfig {
            max_iterations: 500,
            convergence_tol: 1e-7,
            amplitude_ensemble: vec![1.0],
            step_rule: StepRule::default(),
            rng_seed: 0,
            initial_jitter: 0.0,
            optimize_detuning_channel: false,
            direction: SearchDirection::SteepestDescent,
        }
    }
}

impl GrapeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidConfig("convergence_tol must be positive".into()));
        }
        if self.amplitude_ensemble.is_empty() {
            return Err(Error::InvalidConfig("amplitude_ensemble must be non-empty".into()));
        }
        if self.amplitude_ensemble.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig("ensemble scales must be positive".into()));
        }
        let r = &self.step_rule;
        if !(r.initial_step > 0.0 && r.max_step >= r.initial_step) {
            return Err(Error::InvalidConfig("step sizes must be positive".into()));
        }
        if !(r.shrink > 0.0 && r.shrink < 1.0) {
            return Err(Error::InvalidConfig("shrink must lie in (0, 1)".into()));
        }
        if !(r.sufficient_decrease > 0.0 && r.sufficient_decrease < 1.0) {
            return Err(Error::InvalidConfig("sufficient_decrease must lie in (0, 1)".into()));
        }
        if !(r.growth >= 1.0) {
            return Err(Error::InvalidConfig("growth must be >= 1".into()));
        }
        if self.direction == (SearchDirection::Lbfgs { memory: 0 }) {
            return Err(Error::InvalidConfig("L-BFGS memory must be >= 1".into()));
        }
        if !(self.initial_jitter >= 0.0) {
            return Err(Error::InvalidConfig("initial_jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Partial derivatives of the infidelity with respect to one step's controls,
/// in 1/(rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepGradient {
    pub d_omega_x: f64,
    pub d_omega_y: f64,
    pub d_delta_z: f64,
}

fn weight_sum(target: &TargetProfile) -> f64 {
    target.weights.iter().sum()
}

/// Weighted mean squared `mz` error for one ensemble member.
fn member_error(pulse: &ControlPulse, target: &TargetProfile, scale: f64) -> f64 {
    let grid = target.grid.values();
    let errs = par::map_indexed(grid.len(), |i| {
        let w = target.weights[i];
        if w == 0.0 {
            return 0.0;
        }
        let mz = crate::bloch::propagate_scaled(pulse, scale, grid[i], crate::bloch::BlochState::UP).mz;
        let e = mz - target.target_mz[i];
        w * e * e
    });
    errs.iter().sum::<f64>() / weight_sum(target)
}

/// Infidelity of each ensemble member separately, in ensemble order.
pub fn member_infidelities(pulse: &ControlPulse, target: &TargetProfile, config: &GrapeConfig) -> Vec<f64> {
    config.amplitude_ensemble.iter().map(|s| member_error(pulse, target, *s)).collect()
}

/// Ensemble-averaged weighted squared error between achieved and target `mz`.
pub fn infidelity(pulse: &ControlPulse, target: &TargetProfile, config: &GrapeConfig) -> f64 {
    let m = member_infidelities(pulse, target, config);
    m.iter().sum::<f64>() / m.len() as f64
}

/// Exact gradient of [`infidelity`] with respect to every step's controls.
pub fn gradient(pulse: &ControlPulse, target: &TargetProfile, config: &GrapeConfig) -> Vec<StepGradient> {
    let grid = target.grid.values();
    let n = pulse.len();
    let dt = pulse.dt();
    let norm = 1.0 / (weight_sum(target) * config.amplitude_ensemble.len() as f64);
    let per_point = par::map_indexed(grid.len(), |i| {
        let mut acc = vec![StepGradient::default(); n];
        let w = target.weights[i];
        if w == 0.0 {
            return acc;
        }
        let mut states = Vec::with_capacity(n + 1);
        let mut rots = Vec::with_capacity(n);
        for &scale in &config.amplitude_ensemble {
            states.clear();
            rots.clear();
            let mut m = Vec3::Z;
            states.push(m);
            for step in pulse.steps() {
                let r = Rotation::new(step_vector(step, dt, scale, grid[i]));
                m = r.apply(m);
                rots.push(r);
                states.push(m);
            }
            let err = m.z - target.target_mz[i];
            let mut lambda = Vec3::new(0.0, 0.0, 2.0 * w * err * norm);
            for k in (0..n).rev() {
                let g = rots[k].grad_v(states[k], lambda);
                acc[k].d_omega_x += dt * scale * g.x;
                acc[k].d_omega_y += dt * scale * g.y;
                acc[k].d_delta_z += dt * g.z;
                lambda = rots[k].apply_inverse(lambda);
            }
        }
        acc
    });
    let mut total = vec![StepGradient::default(); n];
    for point in &per_point {
        for (t, g) in total.iter_mut().zip(point) {
            t.d_omega_x += g.d_omega_x;
            t.d_omega_y += g.d_omega_y;
            t.d_delta_z += g.d_delta_z;
        }
    }
    total
}

/// Superposition of weak frequency-shifted resonant pulses, one per target
/// dip, each of area pi, clipped radially to `omega_max`.
pub fn initial_guess(target: &TargetProfile, omega_max: f64, duration: f64, n_steps: usize) -> Result<ControlPulse> {
    if n_steps == 0 || !(duration > 0.0) || !(omega_max > 0.0) {
        return Err(Error::InvalidPulse("need positive duration, omega_max and step count".into()));
    }
    let centers = target.dip_centers();
    if centers.is_empty() {
        return Err(Error::InvalidTarget("target has no dips".into()));
    }
    let bandwidth = centers[centers.len() - 1] - centers[0];
    if duration * omega_max * omega_max < bandwidth {
        return Err(Error::InsufficientBandwidth { required_duration_s: bandwidth / (omega_max * omega_max) });
    }
    let dt = duration / n_steps as f64;
    let a = core::f64::consts::PI / duration;
    let steps = (0..n_steps)
        .map(|k| {
            let t = (k as f64 + 0.5) * dt;
            let (mut x, mut y) = (0.0, 0.0);
            for c in &centers {
                let (s, co) = math::sin_cos(c * t);
                x += a * co;
                y += a * s;
            }
            let (x, y) = clip(x, y, omega_max);
            ControlStep::new(x, y, 0.0)
        })
        .collect();
    ControlPulse::new(dt, omega_max, steps)
}

/// Radial projection onto the disc of radius `omega_max`.
#[inline]
fn clip(mut x: f64, mut y: f64, omega_max: f64) -> (f64, f64) {
    let amp = math::hypot(x, y);
    if amp > omega_max {
        let s = omega_max / amp;
        x *= s;
        y *= s;
        while math::hypot(x, y) > omega_max {
            x *= 1.0 - 1e-15;
            y *= 1.0 - 1e-15;
        }
    }
    (x, y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub infidelity: f64,
    /// Norm of the gradient the step was taken against; zero for the
    /// starting entry.
    pub grad_norm: f64,
    pub step: f64,
}

/// Record of an optimisation run. `entries[0]` is the starting point
/// (iteration 0, step 0); every later entry is an accepted iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizationTrace {
    pub entries: Vec<TraceEntry>,
    /// Line search failed to find a decrease.
    pub stalled: bool,
    pub converged: bool,
}

impl OptimizationTrace {
    pub fn accepted_iterations(&self) -> usize {
        self.entries.len().saturating_sub(1)
    }

    pub fn final_infidelity(&self) -> f64 {
        self.entries.last().map_or(f64::NAN, |e| e.infidelity)
    }
}

const MAX_BACKTRACKS: usize = 60;

/// Flattened free controls: `x, y` per step, plus `z` when the detuning
/// channel is optimised.
fn flatten_gradient(grad: &[StepGradient], use_z: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(grad.len() * 3);
    for g in grad {
        out.push(g.d_omega_x);
        out.push(g.d_omega_y);
        if use_z {
            out.push(g.d_delta_z);
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS history of `(s, y, 1 / s.y)`.
struct Memory {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl Memory {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if !(sy > 1e-12 * math::sqrt(dot(&s, &s) * dot(&y, &y))) {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion: `-H g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alpha = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alpha.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alpha.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        for qi in q.iter_mut() {
            *qi = -*qi;
        }
        q
    }
}

/// Projected descent on the infidelity with backtracking line search. Every
/// iterate satisfies the `omega_max` cap.
///
/// With [`SearchDirection::SteepestDescent`] the step moves the largest
/// gradient component by `step * omega_max`. With
/// [`SearchDirection::Lbfgs`] the quasi-Newton direction is tried at unit
/// length first and falls back to steepest descent whenever it is not a
/// descent direction.
pub fn optimize(
    initial: &ControlPulse,
    target: &TargetProfile,
    config: &GrapeConfig,
) -> Result<(ControlPulse, OptimizationTrace)> {
    config.validate()?;
    let omega_max = initial.omega_max();
    let mut pulse = initial.clone();
    if config.initial_jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let amp = config.initial_jitter * omega_max;
        for s in pulse.steps_mut() {
            let (x, y) = clip(
                s.omega_x + amp * rng.random_range(-1.0..1.0),
                s.omega_y + amp * rng.random_range(-1.0..1.0),
                omega_max,
            );
            s.omega_x = x;
            s.omega_y = y;
        }
    }
    let use_z = config.optimize_detuning_channel;
    let width = if use_z { 3 } else { 2 };
    let mut memory = match config.direction {
        SearchDirection::Lbfgs { memory } => Some(Memory { pairs: VecDeque::new(), capacity: memory }),
        SearchDirection::SteepestDescent => None,
    };
    let mut trace = OptimizationTrace::default();
    let mut current = infidelity(&pulse, target, config);
    trace.entries.push(TraceEntry { iteration: 0, infidelity: current, grad_norm: 0.0, step: 0.0 });
    if current == 0.0 {
        trace.converged = true;
        return Ok((pulse, trace));
    }
    let rule = &config.step_rule;
    let mut step = rule.initial_step;
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    for iteration in 1..=config.max_iterations {
        let g = flatten_gradient(&gradient(&pulse, target, config), use_z);
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(math::abs(*v)));
        if gmax == 0.0 {
            trace.converged = true;
            break;
        }
        let x0: Vec<f64> =
            pulse.steps().iter().flat_map(|s| [s.omega_x, s.omega_y, s.delta_z].into_iter().take(width)).collect();
        let mut quasi = None;
        if let Some(mem) = memory.as_mut() {
            if let Some((px, pg)) = previous.take() {
                let s: Vec<f64> = x0.iter().zip(&px).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g.iter().zip(&pg).map(|(a, b)| a - b).collect();
                mem.push(s, y);
            }
            if !mem.pairs.is_empty() {
                let d = mem.direction(&g);
                if dot(&d, &g) < 0.0 {
                    quasi = Some(d);
                } else {
                    mem.pairs.clear();
                }
            }
        }
        let steepest = quasi.is_none();
        let (direction, mut length) = match quasi {
            Some(d) => (d, 1.0),
            None => (g.iter().map(|v| -v * omega_max / gmax).collect(), step),
        };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial = pulse.clone();
            let mut predicted = 0.0;
            for (k, s) in trial.steps_mut().iter_mut().enumerate() {
                let o = k * width;
                let (x, y) = clip(s.omega_x + length * direction[o], s.omega_y + length * direction[o + 1], omega_max);
                predicted += g[o] * (s.omega_x - x) + g[o + 1] * (s.omega_y - y);
                s.omega_x = x;
                s.omega_y = y;
                if use_z {
                    let z = s.delta_z + length * direction[o + 2];
                    predicted += g[o + 2] * (s.delta_z - z);
                    s.delta_z = z;
                }
            }
            let value = infidelity(&trial, target, config);
            if value < current && value <= current - rule.sufficient_decrease * predicted {
                accepted = Some((trial, value));
                break;
            }
            length *= rule.shrink;
        }
        let Some((trial, value)) = accepted else {
            trace.stalled = true;
            break;
        };
        let rel = (current - value) / current;
        let grad_norm = math::sqrt(dot(&g, &g));
        trace.entries.push(TraceEntry { iteration, infidelity: value, grad_norm, step: length });
        if memory.is_some() {
            previous = Some((x0, g));
        }
        if steepest {
            step = (length * rule.growth).min(rule.max_step);
        }
        pulse = trial;
        current = value;
        if rel < config.convergence_tol || current == 0.0 {
            trace.converged = true;
            break;
        }
    }
    Ok((pulse, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> GratingSpec {
        GratingSpec {
            n_dips: n,
            spacing_hz: 1.0e6,
            dip_width_hz: 0.2e6,
            dip_depth: 1.0,
            center_offset_hz: 0.0,
            missing_dips: Vec::new(),
        }
    }

    #[test]
    fn grating_spec_validation() {
        let mut s = spec(3);
        assert!(s.validate().is_ok());
        s.missing_dips = vec![3];
        assert!(s.validate().is_err());
        let mut s = spec(3);
        s.dip_width_hz = 2e6;
        assert!(s.validate().is_err());
        let mut s = spec(3);
        s.dip_depth = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn grid_must_cover_dips_and_resolve_them() {
        let grid = DetuningGrid::linspace_hz(-0.5e6, 0.5e6, 201).unwrap();
        assert!(matches!(make_grating_target(&spec(3), &grid), Err(Error::InvalidGrid(_))));
        let coarse = DetuningGrid::linspace_hz(-2e6, 2e6, 21).unwrap();
        assert!(matches!(make_grating_target(&spec(3), &coarse), Err(Error::GridTooCoarse { .. })));
    }

    #[test]
    fn overlapping_dips_rejected() {
        let mut s = spec(3);
        s.spacing_hz = 0.21e6;
        let grid = DetuningGrid::linspace_hz(-1e6, 1e6, 401).unwrap();
        assert!(matches!(make_grating_target(&s, &grid), Err(Error::OverlappingDips { .. })));
    }

    #[test]
    fn target_validation() {
        let grid = DetuningGrid::linspace(-1.0, 1.0, 3).unwrap();
        assert!(TargetProfile::new(grid.clone(), vec![1.0; 3], vec![0.0; 3]).is_err());
        assert!(TargetProfile::new(grid.clone(), vec![1.5, 1.0, 1.0], vec![1.0; 3]).is_err());
        assert!(TargetProfile::new(grid, vec![1.0; 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn bandwidth_precondition_names_required_duration() {
        let grid = DetuningGrid::linspace_hz(-3e6, 3e6, 601).unwrap();
        let t = make_grating_target(&spec(5), &grid).unwrap();
        let omega_max = TWO_PI * 1e5;
        let err = initial_guess(&t, omega_max, 1e-7, 10).unwrap_err();
        match err {
            Error::InsufficientBandwidth { required_duration_s } => {
                let bw = TWO_PI * 4e6;
                assert!((required_duration_s - bw / (omega_max * omega_max)).abs() < 1e-3 * required_duration_s);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn clip_never_exceeds_cap() {
        for k in 0..1000 {
            let ang = k as f64 * 0.01;
            let (x, y) = clip(7.3e6 * libm::cos(ang), 7.3e6 * libm::sin(ang), 6.283185307179586e6);
            assert!(libm::hypot(x, y) <= 6.283185307179586e6);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = GrapeConfig::default();
        assert!(c.validate().is_ok());
        c.amplitude_ensemble.clear();
        assert!(c.validate().is_err());
        let c = GrapeConfig { amplitude_ensemble: vec![1.0, -0.5], ..GrapeConfig::default() };
        assert!(c.validate().is_err());
        let c = GrapeConfig { max_iterations: 0, ..GrapeConfig::default() };
        assert!(c.validate().is_err());
    }
}
