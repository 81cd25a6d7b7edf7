//! Analytic tip fields for magnetic force microscopy probes.
//!
//! Both models are radial about an effective pole: the monopole field falls
//! off as `1/R^2`, the pseudopole field as `1/R`. Only the NV-axis projection
//! enters the sensor, so maps store a scalar per pixel.
//!
//! Geometry: the NV is fixed and the tip scans. For pixel `(i, j)` the pole
//! sits at `(x_i, y_j, lift_height) + tip_offset`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::par;

/// Smallest pole-to-point distance for which a field is defined, metres.
pub const DEFAULT_EPSILON_M: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TipFamily {
    Monopole,
    Pseudopole,
}

impl TipFamily {
    /// Power of `R` in the denominator of `B = s * d / R^k` (`d` unnormalised).
    fn power(self) -> i32 {
        match self {
            TipFamily::Monopole => 3,
            TipFamily::Pseudopole => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TipVariant {
    /// Effective magnetic charge, T m^2.
    Monopole { q_eff: f64 },
    /// Pseudopole strength, T m.
    Pseudopole { p_eff: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipFieldModel {
    pub variant: TipVariant,
    /// Effective pole position relative to the tip apex, metres.
    pub tip_offset: Vec3,
}

impl TipFieldModel {
    pub fn monopole(q_eff: f64, tip_offset: Vec3) -> Self {
        TipFieldModel { variant: TipVariant::Monopole { q_eff }, tip_offset }
    }

    pub fn pseudopole(p_eff: f64, tip_offset: Vec3) -> Self {
        TipFieldModel { variant: TipVariant::Pseudopole { p_eff }, tip_offset }
    }

    pub fn from_family(family: TipFamily, strength: f64, tip_offset: Vec3) -> Self {
        match family {
            TipFamily::Monopole => TipFieldModel::monopole(strength, tip_offset),
            TipFamily::Pseudopole => TipFieldModel::pseudopole(strength, tip_offset),
        }
    }

    pub fn family(&self) -> TipFamily {
        match self.variant {
            TipVariant::Monopole { .. } => TipFamily::Monopole,
            TipVariant::Pseudopole { .. } => TipFamily::Pseudopole,
        }
    }

    pub fn strength(&self) -> f64 {
        match self.variant {
            TipVariant::Monopole { q_eff } => q_eff,
            TipVariant::Pseudopole { p_eff } => p_eff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorGeometry {
    pub nv_position: Vec3,
    nv_axis: Vec3,
    /// Static field along the NV axis, tesla.
    pub bias_field: f64,
}

impl SensorGeometry {
    pub fn new(nv_position: Vec3, nv_axis: Vec3, bias_field: f64) -> Result<Self> {
        if (nv_axis.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParams(format!("nv_axis must be a unit vector, |axis| = {}", nv_axis.norm())));
        }
        Ok(SensorGeometry { nv_position, nv_axis, bias_field })
    }

    pub fn nv_axis(&self) -> Vec3 {
        self.nv_axis
    }
}

/// Rectangular raster of tip positions, row-major with `x` fastest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanGrid {
    pub x_range: f64,
    pub y_range: f64,
    pub nx: usize,
    pub ny: usize,
    pub lift_height: f64,
    pub x_center: f64,
    pub y_center: f64,
}

impl ScanGrid {
    pub fn new(x_range: f64, y_range: f64, nx: usize, ny: usize, lift_height: f64) -> Result<Self> {
        let g = ScanGrid { x_range, y_range, nx, ny, lift_height, x_center: 0.0, y_center: 0.0 };
        g.validate()?;
        Ok(g)
    }

    pub fn centered_at(mut self, x_center: f64, y_center: f64) -> Self {
        self.x_center = x_center;
        self.y_center = y_center;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::InvalidParams("scan grid needs nx, ny >= 2".into()));
        }
        if !(self.x_range > 0.0 && self.y_range > 0.0) {
            return Err(Error::InvalidParams("scan ranges must be positive".into()));
        }
        if !self.lift_height.is_finite() {
            return Err(Error::InvalidParams("lift height must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_center - 0.5 * self.x_range + self.x_range * i as f64 / (self.nx - 1) as f64
    }

    pub fn y(&self, j: usize) -> f64 {
        self.y_center - 0.5 * self.y_range + self.y_range * j as f64 / (self.ny - 1) as f64
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// `(i, j)` of a row-major index.
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    pub fn pixel_dx(&self) -> f64 {
        self.x_range / (self.nx - 1) as f64
    }

    pub fn pixel_dy(&self) -> f64 {
        self.y_range / (self.ny - 1) as f64
    }
}

/// NV-axis field projection per pixel. Masked pixels hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub grid: ScanGrid,
    pub b_parallel: Vec<f64>,
    pub mask: Vec<bool>,
}

impl FieldMap {
    pub fn new(grid: ScanGrid, b_parallel: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if b_parallel.len() != grid.len() || mask.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "map has {} values and {} mask entries for a {}x{} grid",
                b_parallel.len(),
                mask.len(),
                grid.nx,
                grid.ny
            )));
        }
        Ok(FieldMap { grid, b_parallel, mask })
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let k = self.grid.index(i, j);
        self.mask[k].then(|| self.b_parallel[k])
    }
}

/// Field of `model` with its pole at `pole_position`, evaluated at `point`.
pub fn tip_field_at(model: &TipFieldModel, pole_position: Vec3, point: Vec3) -> Result<Vec3> {
    tip_field_at_eps(model, pole_position, point, DEFAULT_EPSILON_M)
}

pub fn tip_field_at_eps(model: &TipFieldModel, pole_position: Vec3, point: Vec3, epsilon: f64) -> Result<Vec3> {
    let d = point - pole_position;
    let r = d.norm();
    if !(r >= epsilon) {
        return Err(Error::Singularity { distance: r, epsilon });
    }
    let s = model.strength();
    Ok(match model.family() {
        TipFamily::Monopole => d * (s / (r * r * r)),
        TipFamily::Pseudopole => d * (s / (r * r)),
    })
}

/// Pole position for pixel `(i, j)`.
pub fn pole_position(model: &TipFieldModel, grid: &ScanGrid, i: usize, j: usize) -> Vec3 {
    Vec3::new(grid.x(i), grid.y(j), grid.lift_height) + model.tip_offset
}

/// NV-axis projection of the tip field plus bias over the scan. Pixels where
/// the pole comes within epsilon of the NV are masked.
pub fn field_map(model: &TipFieldModel, geometry: &SensorGeometry, grid: &ScanGrid) -> FieldMap {
    let values = par::map_indexed(grid.len(), |k| {
        let (i, j) = grid.coords(k);
        tip_field_at(model, pole_position(model, grid, i, j), geometry.nv_position)
            .ok()
            .map(|b| b.dot(geometry.nv_axis) + geometry.bias_field)
    });
    let mask = values.iter().map(Option::is_some).collect();
    let b = values.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    FieldMap { grid: *grid, b_parallel: b, mask }
}

/// Parameters of a tip-model fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipFitParams {
    pub strength: f64,
    pub tip_offset: Vec3,
    pub bias: f64,
}

impl TipFitParams {
    fn to_array(self) -> [f64; 5] {
        [self.strength, self.tip_offset.x, self.tip_offset.y, self.tip_offset.z, self.bias]
    }

    fn from_array(p: &[f64; 5]) -> Self {
        TipFitParams { strength: p[0], tip_offset: Vec3::new(p[1], p[2], p[3]), bias: p[4] }
    }

    /// Rough starting point from the map itself: bias from the border mean,
    /// lateral offset from the extremal pixel, pole height from the
    /// half-maximum radius and strength from the peak. Assumes an NV axis
    /// close to the scan normal.
    pub fn estimate(observed: &FieldMap, family: TipFamily, geometry: &SensorGeometry) -> Result<Self> {
        let g = &observed.grid;
        let mut border = Vec::new();
        for k in 0..g.len() {
            let (i, j) = g.coords(k);
            if observed.mask[k] && (i == 0 || j == 0 || i + 1 == g.nx || j + 1 == g.ny) {
                border.push(observed.b_parallel[k]);
            }
        }
        if border.is_empty() {
            return Err(Error::InsufficientData("no valid border pixels".into()));
        }
        let bias = border.iter().sum::<f64>() / border.len() as f64;
        let (mut peak_k, mut peak) = (usize::MAX, 0.0f64);
        for k in 0..g.len() {
            if observed.mask[k] && math::abs(observed.b_parallel[k] - bias) > math::abs(peak) {
                peak = observed.b_parallel[k] - bias;
                peak_k = k;
            }
        }
        if peak_k == usize::MAX {
            return Err(Error::InsufficientData("map is flat".into()));
        }
        let (pi, pj) = g.coords(peak_k);
        // half-maximum radius along the peak row
        let mut half_r = g.pixel_dx();
        for i in pi..g.nx {
            let k = g.index(i, pj);
            if observed.mask[k] && math::abs(observed.b_parallel[k] - bias) < 0.5 * math::abs(peak) {
                half_r = (g.x(i) - g.x(pi)).max(g.pixel_dx());
                break;
            }
        }
        let h = match family {
            TipFamily::Monopole => half_r / 0.766,
            TipFamily::Pseudopole => half_r,
        };
        let axis_sign = if geometry.nv_axis.z >= 0.0 { 1.0 } else { -1.0 };
        // field along -z below the pole for positive strength
        let strength = match family {
            TipFamily::Monopole => -axis_sign * peak * h * h,
            TipFamily::Pseudopole => -axis_sign * peak * h,
        };
        let offset = Vec3::new(
            geometry.nv_position.x - g.x(pi),
            geometry.nv_position.y - g.y(pj),
            geometry.nv_position.z + h - g.lift_height,
        );
        Ok(TipFitParams { strength, tip_offset: offset, bias })
    }
}

/// Least-squares problem `sum_valid (b_obs - b_model(params))^2`.
pub struct TipFitProblem<'a> {
    observed: &'a FieldMap,
    family: TipFamily,
    geometry: &'a SensorGeometry,
    pixels: Vec<usize>,
}

impl<'a> TipFitProblem<'a> {
    pub fn new(observed: &'a FieldMap, family: TipFamily, geometry: &'a SensorGeometry) -> Self {
        let pixels = (0..observed.grid.len()).filter(|k| observed.mask[*k]).collect();
        TipFitProblem { observed, family, geometry, pixels }
    }

    pub fn n_residuals(&self) -> usize {
        self.pixels.len()
    }

    fn separation(&self, k: usize, p: &TipFitParams) -> Vec3 {
        let g = &self.observed.grid;
        let (i, j) = g.coords(k);
        let pole = Vec3::new(g.x(i), g.y(j), g.lift_height) + p.tip_offset;
        self.geometry.nv_position - pole
    }

    /// Model value minus observation at every valid pixel.
    pub fn residuals(&self, p: &TipFitParams) -> Vec<f64> {
        let power = self.family.power();
        let n = self.geometry.nv_axis;
        self.pixels
            .iter()
            .map(|&k| {
                let d = self.separation(k, p);
                let r = d.norm();
                p.strength * n.dot(d) / libm::pow(r, power as f64) + p.bias - self.observed.b_parallel[k]
            })
            .collect()
    }

    /// Row-major `n_residuals x 5` Jacobian with columns
    /// `(strength, offset_x, offset_y, offset_z, bias)`.
    pub fn jacobian(&self, p: &TipFitParams) -> Vec<[f64; 5]> {
        let power = self.family.power() as f64;
        let n = self.geometry.nv_axis;
        self.pixels
            .iter()
            .map(|&k| {
                let d = self.separation(k, p);
                let r2 = d.norm_sq();
                let rk = libm::pow(r2, 0.5 * power);
                let nd = n.dot(d);
                // db/dd; d depends on the offset with a minus sign
                let dbdd = (n * (1.0 / rk) - d * (power * nd / (rk * r2))) * p.strength;
                [nd / rk, -dbdd.x, -dbdd.y, -dbdd.z, 1.0]
            })
            .collect()
    }

    fn cost(&self, p: &TipFitParams) -> f64 {
        self.residuals(p).iter().map(|r| r * r).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipFit {
    pub model: TipFieldModel,
    pub bias: f64,
    /// Root-mean-square residual over valid pixels, tesla.
    pub rms_residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

const FIT_MAX_ITERATIONS: usize = 500;

/// Levenberg-Marquardt fit of strength, tip offset and bias with analytic
/// Jacobians and column scaling.
pub fn fit_tip_model(
    observed: &FieldMap,
    family: TipFamily,
    geometry: &SensorGeometry,
    init: TipFitParams,
) -> Result<TipFit> {
    let problem = TipFitProblem::new(observed, family, geometry);
    let m = problem.n_residuals();
    if m < 10 {
        return Err(Error::InsufficientData(format!("{m} valid pixels, need at least 10")));
    }
    let mut p = init.to_array();
    let mut cost = problem.cost(&init);
    if !cost.is_finite() {
        return Err(Error::InvalidParams("initial parameters give a non-finite residual".into()));
    }
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < FIT_MAX_ITERATIONS {
        iterations += 1;
        let params = TipFitParams::from_array(&p);
        let r = problem.residuals(&params);
        let jac = problem.jacobian(&params);
        let mut jtj = [0.0; 25];
        let mut jtr = [0.0; 5];
        for (row, ri) in jac.iter().zip(&r) {
            for a in 0..5 {
                jtr[a] += row[a] * ri;
                for b in 0..5 {
                    jtj[a * 5 + b] += row[a] * row[b];
                }
            }
        }
        let scale: [f64; 5] = core::array::from_fn(|a| {
            let s = math::sqrt(jtj[a * 5 + a]);
            if s > 0.0 {
                s
            } else {
                1.0
            }
        });
        let grad_inf = (0..5).map(|a| math::abs(jtr[a] / scale[a])).fold(0.0, f64::max);
        if cost == 0.0 || grad_inf <= 1e-15 * math::sqrt(cost) {
            converged = true;
            break;
        }
        let mut improved = false;
        for _ in 0..40 {
            let mut a = [0.0; 25];
            let mut b = [0.0; 5];
            for i in 0..5 {
                for j in 0..5 {
                    a[i * 5 + j] = jtj[i * 5 + j] / (scale[i] * scale[j]);
                }
                a[i * 5 + i] += mu * (1.0 + a[i * 5 + i]);
                b[i] = -jtr[i] / scale[i];
            }
            if math::cholesky_solve(&mut a, &mut b, 5).is_none() {
                mu *= 10.0;
                continue;
            }
            let trial: [f64; 5] = core::array::from_fn(|i| p[i] + b[i] / scale[i]);
            let trial_cost = problem.cost(&TipFitParams::from_array(&trial));
            if trial_cost.is_finite() && trial_cost < cost {
                let rel_step =
                    (0..5).map(|i| math::abs(b[i]) / (math::abs(p[i] * scale[i]) + 1e-300)).fold(0.0, f64::max);
                let rel_cost = (cost - trial_cost) / cost;
                p = trial;
                cost = trial_cost;
                mu = (mu * 0.3).max(1e-15);
                improved = true;
                if rel_step < 1e-14 || rel_cost < 1e-15 {
                    converged = true;
                }
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            // no decrease possible at any damping: a (numerical) minimum
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    let fitted = TipFitParams::from_array(&p);
    Ok(TipFit {
        model: TipFieldModel::from_family(family, fitted.strength, fitted.tip_offset),
        bias: fitted.bias,
        rms_residual: math::sqrt(cost / m as f64),
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn on_axis_monopole() {
        let m = TipFieldModel::monopole(2e-16, Vec3::ZERO);
        let b = tip_field_at(&m, Vec3::ZERO, Vec3::new(0.0, 0.0, 1e-7)).unwrap();
        assert!(b.x == 0.0 && b.y == 0.0);
        assert!((b.z / (2e-16 / 1e-14) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singularity_is_an_error() {
        let m = TipFieldModel::pseudopole(1e-9, Vec3::ZERO);
        let e = tip_field_at(&m, Vec3::ZERO, Vec3::new(0.0, 0.0, 1e-10));
        assert!(matches!(e, Err(Error::Singularity { .. })));
    }

    #[test]
    fn singular_pixel_is_masked_not_fatal() {
        let grid = ScanGrid::new(2e-7, 2e-7, 3, 3, 0.0).unwrap();
        let geo = SensorGeometry::new(Vec3::ZERO, Vec3::Z, 0.0).unwrap();
        let map = field_map(&TipFieldModel::monopole(1e-16, Vec3::ZERO), &geo, &grid);
        assert!(!map.mask[4]);
        assert_eq!(map.valid_count(), 8);
    }

    #[test]
    fn geometry_requires_unit_axis() {
        assert!(SensorGeometry::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 2.0), 0.0).is_err());
    }

    #[test]
    fn scan_grid_validation() {
        assert!(ScanGrid::new(1e-6, 1e-6, 1, 4, 0.0).is_err());
        assert!(ScanGrid::new(0.0, 1e-6, 4, 4, 0.0).is_err());
        let g = ScanGrid::new(2e-6, 1e-6, 5, 3, 0.0).unwrap();
        assert_eq!(g.x(0), -1e-6);
        assert_eq!(g.x(4), 1e-6);
        assert_eq!(g.coords(g.index(3, 2)), (3, 2));
    }

    #[test]
    fn fit_needs_enough_pixels() {
        let grid = ScanGrid::new(1e-6, 1e-6, 3, 3, 0.0).unwrap();
        let geo = SensorGeometry::new(Vec3::new(0.0, 0.0, -1e-7), Vec3::Z, 0.0).unwrap();
        let map = field_map(&TipFieldModel::monopole(1e-16, Vec3::ZERO), &geo, &grid);
        let init = TipFitParams { strength: 1e-16, tip_offset: Vec3::ZERO, bias: 0.0 };
        assert!(matches!(fit_tip_model(&map, TipFamily::Monopole, &geo, init), Err(Error::InsufficientData(_))));
    }
}
