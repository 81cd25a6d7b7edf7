//! Fringe images: forward simulation from a field map and inversion back to
//! a quantitative map.
//!
//! A pixel sees detuning `delta = gamma * b - carrier` (Hz) and fluoresces at
//! `response(delta)`, normalised to 1 far from resonance. The response is
//! many-to-one, so inversion needs a branch choice per pixel: seed anchors
//! plus spatial continuity ([`assign_fringes`]), a second image with a
//! shifted grating ([`disambiguate_shifted`]), or a missing dip
//! ([`find_missing_fringe`]). [`reconstruct`] then refines the branch-correct
//! guess by damped Gauss-Newton.
//!
//! Internally everything runs in detuning (Hz); maps are converted to tesla
//! at the boundary.

use alloc::collections::BinaryHeap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::bloch::{dephase_profile, ExcitationProfile};
use crate::error::{Error, Result};
use crate::fieldmodel::{FieldMap, ScanGrid};
use crate::math;
use crate::par;
use crate::TWO_PI;

/// Response slope, as a fraction of the steepest, below which the curve
/// counts as flat for branch selection.
const FLAT_SLOPE_FRACTION: f64 = 0.05;
/// Largest misfit, as a fraction of `c0`, still consistent with a flat
/// stretch of the response.
const FLAT_MISFIT_FRACTION: f64 = 0.02;

/// Expected normalised fluorescence as a function of detuning (Hz), linearly
/// interpolated between samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseCurve {
    detuning_hz: Vec<f64>,
    fluorescence: Vec<f64>,
    /// Centred-difference derivative at each node, 1/Hz.
    slope: Vec<f64>,
    max_slope: f64,
    c0: f64,
}

impl ResponseCurve {
    pub fn new(detuning_hz: Vec<f64>, fluorescence: Vec<f64>, c0: f64) -> Result<Self> {
        if detuning_hz.len() != fluorescence.len() || detuning_hz.len() < 3 {
            return Err(Error::DimensionMismatch(
                "response needs matching detuning and fluorescence with >= 3 points".into(),
            ));
        }
        if detuning_hz.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("response detunings must be strictly increasing".into()));
        }
        if !(c0 > 0.0 && c0 <= 1.0) {
            return Err(Error::InvalidParams(format!("c0 must lie in (0, 1], got {c0}")));
        }
        let n = detuning_hz.len();
        let slope: Vec<f64> = (0..n)
            .map(|i| {
                let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
                (fluorescence[b] - fluorescence[a]) / (detuning_hz[b] - detuning_hz[a])
            })
            .collect();
        let max_slope = slope.iter().map(|s: &f64| math::abs(*s)).fold(0.0, f64::max);
        Ok(ResponseCurve { detuning_hz, fluorescence, slope, max_slope, c0 })
    }

    /// `1 - c0 (1 - mz) / 2` on the profile's grid, without dephasing.
    pub fn from_profile(profile: &ExcitationProfile, c0: f64) -> Result<Self> {
        let f = profile.mz().iter().map(|m| 1.0 - c0 * (1.0 - m) / 2.0).collect();
        ResponseCurve::new(profile.grid().values_hz(), f, c0)
    }

    pub fn detuning_hz(&self) -> &[f64] {
        &self.detuning_hz
    }

    pub fn fluorescence(&self) -> &[f64] {
        &self.fluorescence
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    /// Detuning interval (Hz) over which the response is defined.
    pub fn bandwidth(&self) -> (f64, f64) {
        (self.detuning_hz[0], self.detuning_hz[self.detuning_hz.len() - 1])
    }

    pub fn contains(&self, delta_hz: f64) -> bool {
        let (lo, hi) = self.bandwidth();
        delta_hz >= lo && delta_hz <= hi
    }

    /// Segment index `j` with `x_j <= delta <= x_{j+1}`, clamped.
    fn segment(&self, delta_hz: f64) -> usize {
        let x = &self.detuning_hz;
        x.partition_point(|v| *v <= delta_hz).clamp(1, x.len() - 1) - 1
    }

    /// Interpolated fluorescence, held constant outside the bandwidth.
    pub fn eval(&self, delta_hz: f64) -> f64 {
        let (lo, hi) = self.bandwidth();
        let d = delta_hz.clamp(lo, hi);
        let j = self.segment(d);
        let x = &self.detuning_hz;
        let t = (d - x[j]) / (x[j + 1] - x[j]);
        self.fluorescence[j] * (1.0 - t) + self.fluorescence[j + 1] * t
    }

    /// Interpolated centred-difference slope, 1/Hz.
    pub fn slope_at(&self, delta_hz: f64) -> f64 {
        let (lo, hi) = self.bandwidth();
        let d = delta_hz.clamp(lo, hi);
        let j = self.segment(d);
        let x = &self.detuning_hz;
        let t = (d - x[j]) / (x[j + 1] - x[j]);
        self.slope[j] * (1.0 - t) + self.slope[j + 1] * t
    }

    pub fn max_abs_slope(&self) -> f64 {
        self.max_slope
    }

    /// The same curve moved by `shift_hz` along the detuning axis.
    pub fn shifted(&self, shift_hz: f64) -> ResponseCurve {
        ResponseCurve {
            detuning_hz: self.detuning_hz.iter().map(|x| x + shift_hz).collect(),
            fluorescence: self.fluorescence.clone(),
            slope: self.slope.clone(),
            max_slope: self.max_slope,
            c0: self.c0,
        }
    }

    /// Every detuning at which the interpolant equals `f`.
    pub fn preimages(&self, f: f64) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_preimage(f, |d| out.push(d));
        out
    }

    fn for_each_preimage(&self, f: f64, mut visit: impl FnMut(f64)) {
        let x = &self.detuning_hz;
        let r = &self.fluorescence;
        let last = x.len() - 2;
        for j in 0..=last {
            let (a, b) = (r[j], r[j + 1]);
            // half-open segments so a value hitting a node is reported once
            if (f - a) * (f - b) > 0.0 || a == b || (f == b && j != last) {
                continue;
            }
            visit(x[j] + (f - a) / (b - a) * (x[j + 1] - x[j]));
        }
    }

    /// Local minima of the response dipping below the midpoint between the
    /// baseline and the deepest point, in Hz, parabola-refined.
    pub fn dip_centers(&self) -> Vec<f64> {
        let r = &self.fluorescence;
        let x = &self.detuning_hz;
        let deepest = r.iter().cloned().fold(f64::INFINITY, f64::min);
        let top = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let level = 0.5 * (deepest + top);
        let mut out = Vec::new();
        for i in 1..r.len() - 1 {
            if r[i] < r[i - 1] && r[i] <= r[i + 1] && r[i] < level {
                let curv = r[i - 1] - 2.0 * r[i] + r[i + 1];
                let mut c = x[i];
                if curv > 0.0 {
                    c += 0.5 * (r[i - 1] - r[i + 1]) / curv * 0.5 * (x[i + 1] - x[i - 1]);
                }
                out.push(c);
            }
        }
        out
    }

    /// Median distance between neighbouring dips, or the bandwidth when there
    /// are fewer than two.
    pub fn period_estimate(&self) -> f64 {
        let c = self.dip_centers();
        if c.len() < 2 {
            let (lo, hi) = self.bandwidth();
            return hi - lo;
        }
        let mut gaps: Vec<f64> = c.windows(2).map(|w| w[1] - w[0]).collect();
        gaps.sort_by(f64::total_cmp);
        gaps[gaps.len() / 2]
    }

    /// Preimage of `f` closest to `prediction` within `reach`. Where the
    /// response is flat at the prediction and already agrees with `f` there,
    /// the data cannot move the value, so the prediction is returned. If no
    /// preimage is in reach (noise pushed `f` past an extremum), walk
    /// downhill on `|f - response|` from the prediction, staying in reach.
    pub fn nearest_preimage(&self, f: f64, prediction: f64, reach: f64) -> f64 {
        let flat = FLAT_SLOPE_FRACTION * self.max_abs_slope();
        if self.contains(prediction)
            && math::abs(self.slope_at(prediction)) < flat
            && math::abs(f - self.eval(prediction)) <= FLAT_MISFIT_FRACTION * self.c0
        {
            return prediction;
        }
        let mut best: Option<(f64, f64)> = None;
        self.for_each_preimage(f, |d| {
            let dist = math::abs(d - prediction);
            if dist <= reach && best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, d));
            }
        });
        if let Some((_, d)) = best {
            return d;
        }
        self.downhill(f, prediction, reach)
    }

    fn downhill(&self, f: f64, start: f64, reach: f64) -> f64 {
        let x = &self.detuning_hz;
        let r = &self.fluorescence;
        let (lo, hi) = self.bandwidth();
        let mut i = self.segment(start.clamp(lo, hi));
        if math::abs(f - r[i + 1]) < math::abs(f - r[i]) {
            i += 1;
        }
        let inside = |k: usize| math::abs(x[k] - start) <= reach;
        loop {
            let here = math::abs(f - r[i]);
            let left = if i > 0 && inside(i - 1) { math::abs(f - r[i - 1]) } else { f64::INFINITY };
            let right = if i + 1 < r.len() && inside(i + 1) { math::abs(f - r[i + 1]) } else { f64::INFINITY };
            if left < here && left <= right {
                i -= 1;
            } else if right < here {
                i += 1;
            } else {
                return x[i];
            }
        }
    }
}

/// Response of a pulse after Gaussian dephasing: `1 - c0 (1 - mz_dephased) / 2`.
pub fn build_response(profile: &ExcitationProfile, t2_star: f64, c0: f64) -> Result<ResponseCurve> {
    let dephased = dephase_profile(profile, t2_star)?;
    ResponseCurve::from_profile(&dephased, c0)
}

/// Normalised fluorescence per scan pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FringeImage {
    pub grid: ScanGrid,
    pub fluorescence: Vec<f64>,
    pub mask: Vec<bool>,
}

impl FringeImage {
    pub fn new(grid: ScanGrid, fluorescence: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if fluorescence.len() != grid.len() || mask.len() != grid.len() {
            return Err(Error::DimensionMismatch("image size does not match its grid".into()));
        }
        Ok(FringeImage { grid, fluorescence, mask })
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    None,
    /// Photon counts `Poisson(s0 * dwell * F)` normalised by `s0 * dwell`.
    Poisson {
        s0_hz: f64,
        dwell_s: f64,
        seed: u64,
    },
}

/// Manually assigned field at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub px: usize,
    pub py: usize,
    pub b_tesla: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionConfig {
    /// Weight of `sum_neighbours (b_i - b_j)^2`, 1/T^2.
    pub smoothness_weight: f64,
    pub seed_anchors: Vec<Anchor>,
    pub carrier_offset_hz: f64,
    pub gamma_hz_per_t: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub noise_model: NoiseModel,
    /// Pixels whose response slope is below this fraction of the steepest
    /// slope are flagged as low-information.
    pub low_info_fraction: f64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            smoothness_weight: 0.0,
            seed_anchors: Vec::new(),
            carrier_offset_hz: 0.0,
            gamma_hz_per_t: crate::NV_GAMMA_HZ_PER_T,
            max_iterations: 100,
            convergence_tol: 1e-12,
            noise_model: NoiseModel::None,
            low_info_fraction: 0.05,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothness_weight >= 0.0) {
            return Err(Error::InvalidConfig("smoothness_weight must be >= 0".into()));
        }
        if !(self.gamma_hz_per_t > 0.0) {
            return Err(Error::InvalidConfig("gamma must be positive".into()));
        }
        if let NoiseModel::Poisson { s0_hz, dwell_s, .. } = self.noise_model {
            if !(s0_hz > 0.0 && dwell_s > 0.0) {
                return Err(Error::InvalidConfig("Poisson noise needs positive s0 and dwell".into()));
            }
        }
        Ok(())
    }

    /// Sensor detuning (Hz) for field `b` (T).
    pub fn detuning_of(&self, b: f64) -> f64 {
        self.gamma_hz_per_t * b - self.carrier_offset_hz
    }

    /// Field (T) for sensor detuning `delta` (Hz).
    pub fn field_of(&self, delta_hz: f64) -> f64 {
        (delta_hz + self.carrier_offset_hz) / self.gamma_hz_per_t
    }
}

/// Fluorescence image seen while scanning over `field`. Pixels whose detuning
/// falls outside the response bandwidth are masked.
pub fn simulate_scan(field: &FieldMap, response: &ResponseCurve, config: &ReconstructionConfig) -> Result<FringeImage> {
    config.validate()?;
    let pixels = par::map_indexed(field.grid.len(), |k| {
        if !field.mask[k] {
            return None;
        }
        let d = config.detuning_of(field.b_parallel[k]);
        if !response.contains(d) {
            return None;
        }
        let f = response.eval(d);
        Some(match config.noise_model {
            NoiseModel::None => f,
            NoiseModel::Poisson { s0_hz, dwell_s, seed } => {
                let n = s0_hz * dwell_s;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                let mean = n * f;
                let counts: f64 =
                    if mean > 0.0 { Poisson::new(mean).map(|p| p.sample(&mut rng)).unwrap_or(0.0) } else { 0.0 };
                counts / n
            }
        })
    });
    let mask = pixels.iter().map(Option::is_some).collect();
    let fluorescence = pixels.into_iter().map(|p| p.unwrap_or(f64::NAN)).collect();
    Ok(FringeImage { grid: field.grid, fluorescence, mask })
}

/// 4-neighbours of pixel `k` in row-major order (up, left, right, down),
/// each paired with its step `(di, dj)`.
fn neighbours(grid: &ScanGrid, k: usize) -> impl Iterator<Item = (usize, (isize, isize))> + '_ {
    let (i, j) = grid.coords(k);
    [(0isize, -1isize), (-1, 0), (1, 0), (0, 1)].into_iter().filter_map(move |(di, dj)| {
        let ni = i as isize + di;
        let nj = j as isize + dj;
        (ni >= 0 && nj >= 0 && (ni as usize) < grid.nx && (nj as usize) < grid.ny)
            .then(|| (grid.index(ni as usize, nj as usize), (di, dj)))
    })
}

/// Initial field guess from continuity unwrapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub map: FieldMap,
    /// Valid image pixels not connected to any anchor; masked in `map`.
    pub unassigned: Vec<usize>,
}

/// Quality-guided flood fill. Seeds are fixed; every other pixel reachable
/// through `valid` pixels gets `candidate(p, prediction)`, where the
/// prediction extrapolates the already assigned neighbourhood (see
/// [`predict`]). The frontier is a priority queue on `quality[p]`, highest
/// first and ties broken by lower pixel index, so pixels on steep fringe
/// flanks are unwrapped before flat regions can pass on their poorly
/// determined values. The result does not depend on thread count.
fn guided_fill(
    grid: &ScanGrid,
    valid: &[bool],
    seeds: &[(usize, f64)],
    candidate: impl Fn(usize, f64) -> f64,
    quality: &[f64],
) -> Vec<Option<f64>> {
    let mut delta: Vec<Option<f64>> = vec![None; grid.len()];
    let mut queued = vec![false; grid.len()];
    let mut heap = BinaryHeap::new();
    let enqueue = |heap: &mut BinaryHeap<Frontier>, queued: &mut [bool], delta: &[Option<f64>], q: usize| {
        for (p, _) in neighbours(grid, q) {
            if valid[p] && delta[p].is_none() && !queued[p] {
                queued[p] = true;
                heap.push(Frontier { quality: quality[p], pixel: p });
            }
        }
    };
    for &(k, d) in seeds {
        if valid[k] && delta[k].is_none() {
            delta[k] = Some(d);
        }
    }
    for &(k, _) in seeds {
        if valid[k] {
            enqueue(&mut heap, &mut queued, &delta, k);
        }
    }
    while let Some(f) = heap.pop() {
        let prediction = predict(grid, &delta, f.pixel);
        delta[f.pixel] = Some(candidate(f.pixel, prediction));
        enqueue(&mut heap, &mut queued, &delta, f.pixel);
    }
    delta
}

/// Value expected at pixel `p` from its assigned neighbourhood: the mean of
/// quadratic extrapolations along the four axis directions where three
/// pixels in a row are known; failing that, of linear extrapolations and
/// parallelogram (plane) completions; failing that, of the assigned
/// neighbours themselves.
fn predict(grid: &ScanGrid, delta: &[Option<f64>], p: usize) -> f64 {
    let (i, j) = grid.coords(p);
    let at = |di: isize, dj: isize| -> Option<f64> {
        let ni = i as isize + di;
        let nj = j as isize + dj;
        if ni < 0 || nj < 0 || ni as usize >= grid.nx || nj as usize >= grid.ny {
            return None;
        }
        delta[grid.index(ni as usize, nj as usize)]
    };
    let dirs = [(0isize, -1isize), (-1, 0), (1, 0), (0, 1)];
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut quad = Vec::new();
    let mut lin = Vec::new();
    let mut near = Vec::new();
    for (di, dj) in dirs {
        let a = at(di, dj);
        let b = at(2 * di, 2 * dj);
        let c = at(3 * di, 3 * dj);
        if let Some(a) = a {
            near.push(a);
            if let Some(b) = b {
                lin.push(2.0 * a - b);
                if let Some(c) = c {
                    quad.push(3.0 * a - 3.0 * b + c);
                }
            }
        }
    }
    if !quad.is_empty() {
        return mean(&quad);
    }
    for (di, dj) in [(-1isize, -1isize), (1, -1), (-1, 1), (1, 1)] {
        if let (Some(a), Some(b), Some(c)) = (at(di, 0), at(0, dj), at(di, dj)) {
            lin.push(a + b - c);
        }
    }
    if !lin.is_empty() {
        return mean(&lin);
    }
    mean(&near)
}

/// Magnitude of the fluorescence gradient per pixel from centred (or
/// one-sided) differences between valid neighbours; zero where isolated.
pub fn image_gradient(image: &FringeImage) -> Vec<f64> {
    let grid = image.grid;
    let f = |i: usize, j: usize| {
        let k = grid.index(i, j);
        image.mask[k].then(|| image.fluorescence[k])
    };
    let diff = |lo: Option<f64>, mid: Option<f64>, hi: Option<f64>| match (lo, mid, hi) {
        (Some(a), _, Some(c)) => 0.5 * (c - a),
        (None, Some(b), Some(c)) => c - b,
        (Some(a), Some(b), None) => b - a,
        _ => 0.0,
    };
    (0..grid.len())
        .map(|k| {
            if !image.mask[k] {
                return 0.0;
            }
            let (i, j) = grid.coords(k);
            let gx =
                diff((i > 0).then(|| f(i - 1, j)).flatten(), f(i, j), (i + 1 < grid.nx).then(|| f(i + 1, j)).flatten());
            let gy =
                diff((j > 0).then(|| f(i, j - 1)).flatten(), f(i, j), (j + 1 < grid.ny).then(|| f(i, j + 1)).flatten());
            math::hypot(gx, gy)
        })
        .collect()
}

struct Frontier {
    quality: f64,
    pixel: usize,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.quality.total_cmp(&other.quality).then_with(|| other.pixel.cmp(&self.pixel))
    }
}

/// Continuity unwrapping from the seed anchors. Each reached pixel takes the
/// preimage of its fluorescence closest to the value extrapolated from its
/// already assigned neighbours; see [`guided_fill`] for the visiting order.
/// Valid pixels with no anchor in their connected region are masked and
/// listed in [`Assignment::unassigned`].
pub fn assign_fringes(
    image: &FringeImage,
    response: &ResponseCurve,
    config: &ReconstructionConfig,
) -> Result<Assignment> {
    config.validate()?;
    let grid = image.grid;
    let reach = 0.5 * response.period_estimate();
    let seeds: Vec<(usize, f64)> = config
        .seed_anchors
        .iter()
        .filter(|a| a.px < grid.nx && a.py < grid.ny)
        .map(|a| grid.index(a.px, a.py))
        .zip(config.seed_anchors.iter())
        .filter(|(k, _)| image.mask[*k])
        .map(|(k, a)| (k, response.nearest_preimage(image.fluorescence[k], config.detuning_of(a.b_tesla), reach)))
        .collect();
    if seeds.is_empty() {
        return Err(Error::NoAnchor);
    }
    let delta = guided_fill(
        &grid,
        &image.mask,
        &seeds,
        |p, prediction| response.nearest_preimage(image.fluorescence[p], prediction, reach),
        &image_gradient(image),
    );
    let mut unassigned = Vec::new();
    let mut mask = vec![false; grid.len()];
    let mut b = vec![f64::NAN; grid.len()];
    for k in 0..grid.len() {
        match delta[k] {
            Some(d) => {
                mask[k] = true;
                b[k] = config.field_of(d);
            }
            None if image.mask[k] => unassigned.push(k),
            None => {}
        }
    }
    Ok(Assignment { map: FieldMap { grid, b_parallel: b, mask }, unassigned })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelStatus {
    /// Fitted on a fringe flank.
    Fitted,
    /// Fitted, but the response is nearly flat there; the value is weakly
    /// constrained by the data.
    LowInformation,
    Masked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub map: FieldMap,
    pub status: Vec<PixelStatus>,
    /// Objective after each iteration, starting value first.
    pub objective: Vec<f64>,
    pub converged: bool,
}

impl Reconstruction {
    pub fn fitted_pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.status.iter().enumerate().filter(|(_, s)| **s == PixelStatus::Fitted).map(|(k, _)| k)
    }
}

/// Refine a field guess by damped Gauss-Newton on
/// `sum (F_obs - response(gamma b - carrier))^2 + lambda sum_edges (b_i - b_j)^2`.
///
/// Without smoothing the problem separates per pixel and each pixel runs its
/// own Levenberg-Marquardt damping; with smoothing a single damping factor is
/// used and the normal equations are solved by preconditioned conjugate
/// gradients. Either way the objective never increases.
pub fn reconstruct(
    image: &FringeImage,
    response: &ResponseCurve,
    initial: &FieldMap,
    config: &ReconstructionConfig,
) -> Result<Reconstruction> {
    config.validate()?;
    if initial.grid.nx != image.grid.nx || initial.grid.ny != image.grid.ny {
        return Err(Error::DimensionMismatch("initial map and image grids differ".into()));
    }
    let grid = image.grid;
    let active: Vec<usize> = (0..grid.len()).filter(|k| image.mask[*k] && initial.mask[*k]).collect();
    let start: Vec<f64> = active.iter().map(|&k| config.detuning_of(initial.b_parallel[k])).collect();
    let observed: Vec<f64> = active.iter().map(|&k| image.fluorescence[k]).collect();
    let (solution, objective, converged) = if config.smoothness_weight == 0.0 {
        fit_separable(response, &observed, &start, config)
    } else {
        fit_smooth(&grid, &active, response, &observed, &start, config)
    };
    let threshold = config.low_info_fraction * response.max_abs_slope();
    let mut b = vec![f64::NAN; grid.len()];
    let mut mask = vec![false; grid.len()];
    let mut status = vec![PixelStatus::Masked; grid.len()];
    for (n, &k) in active.iter().enumerate() {
        b[k] = config.field_of(solution[n]);
        mask[k] = true;
        status[k] = if math::abs(response.slope_at(solution[n])) < threshold {
            PixelStatus::LowInformation
        } else {
            PixelStatus::Fitted
        };
    }
    Ok(Reconstruction { map: FieldMap { grid, b_parallel: b, mask }, status, objective, converged })
}

fn fit_separable(
    response: &ResponseCurve,
    observed: &[f64],
    start: &[f64],
    config: &ReconstructionConfig,
) -> (Vec<f64>, Vec<f64>, bool) {
    let runs = par::map_indexed(start.len(), |n| fit_pixel(response, observed[n], start[n], config));
    let longest = runs.iter().map(|r| r.1.len()).max().unwrap_or(1);
    let objective = (0..longest).map(|t| runs.iter().map(|r| r.1[t.min(r.1.len() - 1)]).sum()).collect();
    let converged = runs.iter().all(|r| r.2);
    (runs.iter().map(|r| r.0).collect(), objective, converged)
}

/// One-dimensional Levenberg-Marquardt for a single pixel. Returns the
/// solution, the squared residual after each iteration and convergence.
fn fit_pixel(response: &ResponseCurve, f: f64, start: f64, config: &ReconstructionConfig) -> (f64, Vec<f64>, bool) {
    let mut d = start;
    let mut res = f - response.eval(d);
    let mut cost = res * res;
    let mut history = vec![cost];
    let mut mu = 1e-3;
    let period = response.period_estimate();
    for _ in 0..config.max_iterations {
        if cost == 0.0 {
            return (d, history, true);
        }
        let s = response.slope_at(d);
        let h = s * s;
        let mut accepted = false;
        for _ in 0..30 {
            let denom = h * (1.0 + mu) + 1e-30;
            let step = (s * res / denom).clamp(-0.25 * period, 0.25 * period);
            let trial = d + step;
            let r = f - response.eval(trial);
            if r * r < cost {
                let rel = (cost - r * r) / cost;
                d = trial;
                res = r;
                cost = r * r;
                mu = (mu * 0.3).max(1e-12);
                accepted = true;
                history.push(cost);
                if rel < config.convergence_tol || math::abs(step) < 1e-9 {
                    return (d, history, true);
                }
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            return (d, history, true);
        }
    }
    (d, history, false)
}

fn fit_smooth(
    grid: &ScanGrid,
    active: &[usize],
    response: &ResponseCurve,
    observed: &[f64],
    start: &[f64],
    config: &ReconstructionConfig,
) -> (Vec<f64>, Vec<f64>, bool) {
    let g = config.gamma_hz_per_t;
    let lambda = config.smoothness_weight / (g * g);
    let mut slot = vec![usize::MAX; grid.len()];
    for (n, &k) in active.iter().enumerate() {
        slot[k] = n;
    }
    // each undirected edge once: right and down neighbours
    let mut edges = Vec::new();
    for (n, &k) in active.iter().enumerate() {
        let (i, j) = grid.coords(k);
        if i + 1 < grid.nx && slot[k + 1] != usize::MAX {
            edges.push((n, slot[k + 1]));
        }
        if j + 1 < grid.ny && slot[k + grid.nx] != usize::MAX {
            edges.push((n, slot[k + grid.nx]));
        }
    }
    let objective_of = |d: &[f64]| -> f64 {
        let data: f64 = d
            .iter()
            .zip(observed)
            .map(|(x, f)| {
                let r = f - response.eval(*x);
                r * r
            })
            .sum();
        let smooth: f64 = edges
            .iter()
            .map(|(a, b)| {
                let e = d[*a] - d[*b];
                e * e
            })
            .sum();
        data + lambda * smooth
    };
    let m = active.len();
    let mut d = start.to_vec();
    let mut cost = objective_of(&d);
    let mut history = vec![cost];
    let mut mu = 1e-3;
    let mut converged = false;
    for _ in 0..config.max_iterations {
        if cost == 0.0 {
            converged = true;
            break;
        }
        let slopes: Vec<f64> = d.iter().map(|x| response.slope_at(*x)).collect();
        let mut rhs: Vec<f64> = (0..m).map(|n| slopes[n] * (observed[n] - response.eval(d[n]))).collect();
        let mut degree = vec![0.0; m];
        for &(a, b) in &edges {
            let e = d[a] - d[b];
            rhs[a] -= lambda * e;
            rhs[b] += lambda * e;
            degree[a] += lambda;
            degree[b] += lambda;
        }
        let mut accepted = false;
        for _ in 0..30 {
            let diag: Vec<f64> = (0..m)
                .map(|n| {
                    let h = slopes[n] * slopes[n] + degree[n];
                    h + mu * (h + 1e-30) + 1e-30
                })
                .collect();
            let step = conjugate_gradient(&diag, &edges, lambda, &rhs, 500, 1e-12);
            let trial: Vec<f64> = d.iter().zip(&step).map(|(x, s)| x + s).collect();
            let trial_cost = objective_of(&trial);
            if trial_cost < cost {
                let rel = (cost - trial_cost) / cost;
                d = trial;
                cost = trial_cost;
                history.push(cost);
                mu = (mu * 0.3).max(1e-12);
                accepted = true;
                if rel < config.convergence_tol {
                    converged = true;
                }
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            converged = true;
        }
        if converged {
            break;
        }
    }
    (d, history, converged)
}

/// Solve `(D - lambda A_offdiag) x = b` where `D` already contains the graph
/// degree, using Jacobi-preconditioned conjugate gradients.
fn conjugate_gradient(
    diag: &[f64],
    edges: &[(usize, usize)],
    lambda: f64,
    b: &[f64],
    max_iter: usize,
    tol: f64,
) -> Vec<f64> {
    let m = diag.len();
    let apply = |x: &[f64], out: &mut [f64]| {
        for n in 0..m {
            out[n] = diag[n] * x[n];
        }
        for &(a, c) in edges {
            out[a] -= lambda * x[c];
            out[c] -= lambda * x[a];
        }
    };
    let mut x = vec![0.0; m];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let b_norm = math::sqrt(b.iter().map(|v| v * v).sum::<f64>());
    if b_norm == 0.0 {
        return x;
    }
    let mut ap = vec![0.0; m];
    for _ in 0..max_iter {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for n in 0..m {
            x[n] += alpha * p[n];
            r[n] -= alpha * ap[n];
        }
        if math::sqrt(r.iter().map(|v| v * v).sum::<f64>()) <= tol * b_norm {
            break;
        }
        for n in 0..m {
            z[n] = r[n] / diag[n];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for n in 0..m {
            p[n] = z[n] + beta * p[n];
        }
    }
    x
}

/// Shift a field map by a constant on valid pixels.
pub fn subtract_bias(map: &FieldMap, bias: f64) -> FieldMap {
    let b = map.b_parallel.iter().zip(&map.mask).map(|(v, m)| if *m { v - bias } else { *v }).collect();
    FieldMap { grid: map.grid, b_parallel: b, mask: map.mask.clone() }
}

/// Field map recovered from a pair of images taken with gratings offset by
/// `shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct Disambiguation {
    pub map: FieldMap,
    /// Pixels where the two images jointly pin the position within a grating
    /// period.
    pub interleaved: Vec<bool>,
    /// Gradient of the detuning, Hz per pixel `(d/di, d/dj)`; fringes move
    /// along it from the first image to the second.
    pub gradient_hz_per_px: Vec<[f64; 2]>,
    /// Whole grating periods added to the unwrapped map to place it inside
    /// the grating.
    pub offset_periods: i64,
    /// The period offset was not uniquely determined by the data.
    pub offset_ambiguous: bool,
}

impl Disambiguation {
    /// Unit direction in which fringes are displaced from image a to image b
    /// at pixel `k`, or `None` where the gradient vanishes.
    pub fn fringe_displacement(&self, k: usize) -> Option<[f64; 2]> {
        let [gx, gy] = self.gradient_hz_per_px[k];
        let n = math::hypot(gx, gy);
        (n > 0.0 && n.is_finite()).then(|| [gx / n, gy / n])
    }
}

/// Combine two images whose gratings differ by `shift_hz` (`response_b` is
/// `response_a` moved up by `shift_hz`). The pair of fluorescence values
/// fixes each pixel's position within one grating period including the
/// side of the fringe, which turns branch assignment into ordinary phase
/// unwrapping. The remaining whole-period offset is chosen so the map best
/// explains both images over the finite grating, or from the seed anchors
/// when any are given. Pixels where both responses are flat fall back to the
/// continuity rule of [`assign_fringes`].
#[allow(clippy::too_many_arguments)]
pub fn disambiguate_shifted(
    image_a: &FringeImage,
    image_b: &FringeImage,
    response_a: &ResponseCurve,
    response_b: &ResponseCurve,
    shift_hz: f64,
    spacing_hz: f64,
    config: &ReconstructionConfig,
) -> Result<Disambiguation> {
    config.validate()?;
    if !(shift_hz > 0.0 && shift_hz < spacing_hz) {
        return Err(Error::InvalidShift { shift: shift_hz, spacing: spacing_hz });
    }
    if image_a.grid != image_b.grid {
        return Err(Error::DimensionMismatch("images must share a scan grid".into()));
    }
    let grid = image_a.grid;
    let valid: Vec<bool> = (0..grid.len()).map(|k| image_a.mask[k] && image_b.mask[k]).collect();

    // reference period around the central dip of grating a
    let centers = response_a.dip_centers();
    if centers.is_empty() {
        return Err(Error::InvalidTarget("response has no dips".into()));
    }
    let c_ref = centers[centers.len() / 2];
    let table: Vec<(f64, f64, f64)> = response_a
        .detuning_hz()
        .iter()
        .filter(|x| **x >= c_ref - 0.5 * spacing_hz && **x < c_ref + 0.5 * spacing_hz)
        .map(|&x| (x, response_a.eval(x), response_b.eval(x)))
        .collect();
    if table.len() < 4 {
        return Err(Error::GridTooCoarse { spacing: response_a.period_estimate(), limit: spacing_hz });
    }
    let pair_slope = |x: f64| math::hypot(response_a.slope_at(x), response_b.slope_at(x));
    let max_pair = table.iter().map(|t| pair_slope(t.0)).fold(0.0, f64::max);
    let threshold = config.low_info_fraction.max(0.2) * max_pair;

    // wrapped position within the reference period
    let wrapped: Vec<Option<f64>> = par::map_indexed(grid.len(), |k| {
        if !valid[k] {
            return None;
        }
        let (fa, fb) = (image_a.fluorescence[k], image_b.fluorescence[k]);
        let mut best = (f64::INFINITY, c_ref);
        for &(x, ra, rb) in &table {
            let e = (fa - ra) * (fa - ra) + (fb - rb) * (fb - rb);
            if e < best.0 {
                best = (e, x);
            }
        }
        let x = refine_pair(response_a, response_b, fa, fb, best.1, 0.25 * spacing_hz);
        (pair_slope(x) >= threshold).then_some(x)
    });
    let interleaved: Vec<bool> = wrapped.iter().map(Option::is_some).collect();

    // unwrap from the first interleaved pixel of each region; interleaved
    // pixels are unambiguous up to whole periods and go first
    let (ga, gb) = (image_gradient(image_a), image_gradient(image_b));
    let quality: Vec<f64> =
        (0..grid.len()).map(|k| if interleaved[k] { f64::INFINITY } else { math::hypot(ga[k], gb[k]) }).collect();
    let reach = 0.5 * response_a.period_estimate();
    let mut delta: Vec<Option<f64>> = vec![None; grid.len()];
    for seed in 0..grid.len() {
        let Some(w) = wrapped[seed] else { continue };
        if delta[seed].is_some() {
            continue;
        }
        let filled = guided_fill(
            &grid,
            &valid,
            &[(seed, w)],
            |p, prediction| match wrapped[p] {
                Some(w) => w + math::round((prediction - w) / spacing_hz) * spacing_hz,
                None => response_a.nearest_preimage(image_a.fluorescence[p], prediction, reach),
            },
            &quality,
        );
        for (slot, v) in delta.iter_mut().zip(filled) {
            if slot.is_none() {
                *slot = v;
            }
        }
    }

    // whole-period offset
    let assigned: Vec<usize> = (0..grid.len()).filter(|k| delta[*k].is_some()).collect();
    let n_periods = centers.len() as i64 + 2;
    let (offset, ambiguous) = if !config.seed_anchors.is_empty() {
        let mut votes = Vec::new();
        for a in &config.seed_anchors {
            if a.px < grid.nx && a.py < grid.ny {
                if let Some(d) = delta[grid.index(a.px, a.py)] {
                    votes.push(math::round((config.detuning_of(a.b_tesla) - d) / spacing_hz) as i64);
                }
            }
        }
        votes.sort_unstable();
        match votes.first() {
            Some(v) => (*v, votes.iter().any(|x| x != v)),
            None => return Err(Error::NoAnchor),
        }
    } else {
        let mut scores: Vec<(f64, i64)> = (-n_periods..=n_periods)
            .map(|kk| {
                let shift = kk as f64 * spacing_hz;
                let s: f64 = assigned
                    .iter()
                    .map(|&k| {
                        let d = delta[k].unwrap() + shift;
                        if !response_a.contains(d) || !response_b.contains(d) {
                            return 1.0;
                        }
                        let ea = image_a.fluorescence[k] - response_a.eval(d);
                        let eb = image_b.fluorescence[k] - response_b.eval(d);
                        ea * ea + eb * eb
                    })
                    .sum();
                (s, kk)
            })
            .collect();
        scores.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let ambiguous = scores.len() > 1 && scores[1].0 <= scores[0].0 * 1.01 + 1e-300;
        (scores[0].1, ambiguous)
    };

    // final joint refinement on the chosen branch
    let shift = offset as f64 * spacing_hz;
    let refined = par::map_indexed(grid.len(), |k| {
        delta[k].map(|d| {
            refine_pair(
                response_a,
                response_b,
                image_a.fluorescence[k],
                image_b.fluorescence[k],
                d + shift,
                0.25 * spacing_hz,
            )
        })
    });
    let mut b = vec![f64::NAN; grid.len()];
    let mut mask = vec![false; grid.len()];
    for k in 0..grid.len() {
        if let Some(d) = refined[k] {
            b[k] = config.field_of(d);
            mask[k] = true;
        }
    }
    let gradient_hz_per_px = (0..grid.len())
        .map(|k| {
            if refined[k].is_none() {
                return [f64::NAN; 2];
            }
            let (i, j) = grid.coords(k);
            let at = |ii: usize, jj: usize| refined[grid.index(ii, jj)];
            let diff = |lo: Option<f64>, hi: Option<f64>, span: f64| match (lo, hi) {
                (Some(a), Some(c)) => (c - a) / span,
                _ => f64::NAN,
            };
            let gx = match (i > 0, i + 1 < grid.nx) {
                (true, true) if at(i - 1, j).is_some() && at(i + 1, j).is_some() => {
                    diff(at(i - 1, j), at(i + 1, j), 2.0)
                }
                (_, true) if at(i + 1, j).is_some() => diff(refined[k], at(i + 1, j), 1.0),
                (true, _) => diff(at(i - 1, j), refined[k], 1.0),
                _ => f64::NAN,
            };
            let gy = match (j > 0, j + 1 < grid.ny) {
                (true, true) if at(i, j - 1).is_some() && at(i, j + 1).is_some() => {
                    diff(at(i, j - 1), at(i, j + 1), 2.0)
                }
                (_, true) if at(i, j + 1).is_some() => diff(refined[k], at(i, j + 1), 1.0),
                (true, _) => diff(at(i, j - 1), refined[k], 1.0),
                _ => f64::NAN,
            };
            [gx, gy]
        })
        .collect();
    Ok(Disambiguation {
        map: FieldMap { grid, b_parallel: b, mask },
        interleaved,
        gradient_hz_per_px,
        offset_periods: offset,
        offset_ambiguous: ambiguous,
    })
}

/// Gauss-Newton on `(fa - ra(x))^2 + (fb - rb(x))^2` starting at `x`, with
/// steps limited to `max_step`.
fn refine_pair(ra: &ResponseCurve, rb: &ResponseCurve, fa: f64, fb: f64, x: f64, max_step: f64) -> f64 {
    let cost = |x: f64| {
        let ea = fa - ra.eval(x);
        let eb = fb - rb.eval(x);
        ea * ea + eb * eb
    };
    let mut x = x;
    let mut c = cost(x);
    let mut mu = 1e-3;
    for _ in 0..60 {
        if c == 0.0 {
            break;
        }
        let (sa, sb) = (ra.slope_at(x), rb.slope_at(x));
        let g = sa * (fa - ra.eval(x)) + sb * (fb - rb.eval(x));
        let h = sa * sa + sb * sb;
        let mut moved = false;
        for _ in 0..30 {
            let step = (g / (h * (1.0 + mu) + 1e-30)).clamp(-max_step, max_step);
            let t = x + step;
            let ct = cost(t);
            if ct < c {
                moved = math::abs(step) > 1e-9;
                x = t;
                c = ct;
                mu = (mu * 0.3).max(1e-12);
                break;
            }
            mu *= 4.0;
        }
        if !moved {
            break;
        }
    }
    x
}

/// Dark rings found along a straight line through an image.
#[derive(Debug, Clone, PartialEq)]
pub struct RayFringes {
    /// Ring positions along the ray, pixels from the start.
    pub positions: Vec<f64>,
    /// Distances between consecutive rings.
    pub gaps: Vec<f64>,
}

impl RayFringes {
    /// Gaps more than `ratio` times wider than expected from their
    /// neighbours (geometric mean inside, the single neighbour at the ends).
    pub fn gap_outliers(&self, ratio: f64) -> Vec<usize> {
        let g = &self.gaps;
        let n = g.len();
        if n < 3 {
            return Vec::new();
        }
        (0..n)
            .filter(|&i| {
                let expected = if i == 0 {
                    g[1]
                } else if i + 1 == n {
                    g[n - 2]
                } else {
                    math::sqrt(g[i - 1] * g[i + 1])
                };
                g[i] > ratio * expected
            })
            .collect()
    }
}

/// Sample the image from pixel `start` in steps of `(di, dj)` until leaving
/// the grid, and locate fluorescence minima deeper than `threshold`
/// (parabola-refined). Masked pixels break local-minimum detection.
pub fn fringes_along_ray(
    image: &FringeImage,
    start: (usize, usize),
    dir: (isize, isize),
    threshold: f64,
) -> RayFringes {
    let grid = image.grid;
    let mut samples: Vec<Option<f64>> = Vec::new();
    let (mut i, mut j) = (start.0 as isize, start.1 as isize);
    while i >= 0 && j >= 0 && (i as usize) < grid.nx && (j as usize) < grid.ny {
        let k = grid.index(i as usize, j as usize);
        samples.push(image.mask[k].then(|| image.fluorescence[k]));
        i += dir.0;
        j += dir.1;
    }
    let mut positions = Vec::new();
    for t in 1..samples.len().saturating_sub(1) {
        let (Some(a), Some(b), Some(c)) = (samples[t - 1], samples[t], samples[t + 1]) else { continue };
        if b < a && b <= c && b < threshold {
            let curv = a - 2.0 * b + c;
            let off = if curv > 0.0 { 0.5 * (a - c) / curv } else { 0.0 };
            positions.push(t as f64 + off);
        }
    }
    let gaps = positions.windows(2).map(|w| w[1] - w[0]).collect();
    RayFringes { positions, gaps }
}

/// Outcome of missing-fringe detection.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingFringe {
    pub fringes: RayFringes,
    /// Gap (between ring `g` and `g + 1` along the ray) that is too wide.
    pub gap: usize,
    /// Grating dip identified as missing.
    pub dip_index: usize,
}

/// Look for the double-width gap a missing grating dip leaves in the ring
/// sequence along a ray. `ascending` says whether the detuning increases
/// along the ray. Succeeds only when exactly one gap is an outlier and the
/// ray shows every other dip, which makes the ring-to-dip mapping unique.
pub fn find_missing_fringe(
    image: &FringeImage,
    start: (usize, usize),
    dir: (isize, isize),
    threshold: f64,
    n_dips: usize,
    ascending: bool,
) -> Option<MissingFringe> {
    let fringes = fringes_along_ray(image, start, dir, threshold);
    let outliers = fringes.gap_outliers(1.5);
    if outliers.len() != 1 || fringes.positions.len() + 1 != n_dips {
        return None;
    }
    let gap = outliers[0];
    let dip_index = if ascending { gap + 1 } else { n_dips - 2 - gap };
    Some(MissingFringe { fringes, gap, dip_index })
}

/// Number of 4-connected components of valid pixels darker than `threshold`.
pub fn count_dark_components(image: &FringeImage, threshold: f64) -> usize {
    let grid = image.grid;
    let dark: Vec<bool> = (0..grid.len()).map(|k| image.mask[k] && image.fluorescence[k] < threshold).collect();
    let mut seen = vec![false; grid.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for s in 0..grid.len() {
        if !dark[s] || seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        stack.push(s);
        while let Some(q) = stack.pop() {
            for (p, _) in neighbours(&grid, q) {
                if dark[p] && !seen[p] {
                    seen[p] = true;
                    stack.push(p);
                }
            }
        }
    }
    count
}

/// Rad/s to Hz.
pub fn hz(rad_per_s: f64) -> f64 {
    rad_per_s / TWO_PI
}
