//! Photon-shot-noise sensitivity of grating spectroscopy.
//!
//! Fringe contrast decays with grating spacing as
//! `c0 * exp(-1 / (2 delta^2 T2*^2))` and the field sensitivity is
//!
//! ```text
//! eta = delta / contrast(delta) / sqrt(S0 * T_readout / T_seq) / gamma
//! ```
//!
//! with `delta` in Hz and `gamma` in Hz/T, giving T/sqrt(Hz). The optimum is
//! at `delta = 1 / T2*`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grape::GratingSpec;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityParams {
    /// Maximum fringe contrast.
    pub c0: f64,
    /// Photon count rate, counts/s.
    pub s0_hz: f64,
    pub t_readout_s: f64,
    pub t_seq_s: f64,
    pub t2_star_s: f64,
    /// Gyromagnetic ratio, Hz per tesla.
    pub gamma_hz_per_t: f64,
}

impl SensitivityParams {
    /// The single-NV operating point: c0 = 0.3, S0 = 150 kHz,
    /// T_readout = 300 ns, T_seq = 4100 ns, T2* = 416 ns, gamma = 28 MHz/mT.
    pub fn reference_nv() -> Self {
        SensitivityParams {
            c0: 0.3,
            s0_hz: 150e3,
            t_readout_s: 300e-9,
            t_seq_s: 4100e-9,
            t2_star_s: 416e-9,
            gamma_hz_per_t: crate::NV_GAMMA_HZ_PER_T,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("c0", self.c0),
            ("s0", self.s0_hz),
            ("t_readout", self.t_readout_s),
            ("t_seq", self.t_seq_s),
            ("t2_star", self.t2_star_s),
            ("gamma", self.gamma_hz_per_t),
        ];
        for (name, v) in named {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if self.c0 > 1.0 {
            return Err(Error::InvalidParams(format!("c0 must lie in (0, 1], got {}", self.c0)));
        }
        if self.t_readout_s > self.t_seq_s {
            return Err(Error::InvalidParams("t_readout must not exceed t_seq".into()));
        }
        Ok(())
    }

    /// Readout duty cycle `T_readout / T_seq`.
    pub fn duty_cycle(&self) -> f64 {
        self.t_readout_s / self.t_seq_s
    }
}

/// Fringe contrast of a grating with spacing `delta_hz`.
pub fn contrast(delta_hz: f64, p: &SensitivityParams) -> f64 {
    let x = delta_hz * p.t2_star_s;
    p.c0 * math::exp(-1.0 / (2.0 * x * x))
}

/// Shot-noise-limited sensitivity in T/sqrt(Hz).
pub fn eta(delta_hz: f64, p: &SensitivityParams) -> f64 {
    delta_hz / contrast(delta_hz, p) / math::sqrt(p.s0_hz * p.duty_cycle()) / p.gamma_hz_per_t
}

/// Grating spacing that minimises [`eta`]: `1 / T2*`.
pub fn optimal_spacing(p: &SensitivityParams) -> f64 {
    1.0 / p.t2_star_s
}

/// Numerical minimiser of [`eta`] by golden-section search in `ln(delta)`
/// over `[lo_hz, hi_hz]`.
pub fn optimal_spacing_golden(p: &SensitivityParams, lo_hz: f64, hi_hz: f64, rel_tol: f64) -> f64 {
    let inv_phi = 0.5 * (math::sqrt(5.0) - 1.0);
    let f = |u: f64| eta(libm::exp(u), p);
    let (mut a, mut b) = (math::ln(lo_hz), math::ln(hi_hz));
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > rel_tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    libm::exp(0.5 * (a + b))
}

/// Free-induction-decay contrast envelope at time `t_s`.
pub fn fid_contrast(t_s: f64, p: &SensitivityParams) -> f64 {
    let x = t_s / p.t2_star_s;
    p.c0 * math::exp(-0.5 * x * x)
}

/// Field span covered by the grating: `((n - 1) spacing + dip_width) / gamma`,
/// in tesla.
pub fn dynamic_range(grating: &GratingSpec, p: &SensitivityParams) -> f64 {
    (grating.span_hz() + grating.dip_width_hz) / p.gamma_hz_per_t
}

/// `eta` sampled over a list of spacings.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityCurve {
    pub spacings_hz: Vec<f64>,
    pub contrast: Vec<f64>,
    pub eta: Vec<f64>,
}

impl SensitivityCurve {
    pub fn evaluate(spacings_hz: Vec<f64>, p: &SensitivityParams) -> Self {
        let contrast = spacings_hz.iter().map(|d| self::contrast(*d, p)).collect();
        let eta = spacings_hz.iter().map(|d| self::eta(*d, p)).collect();
        SensitivityCurve { spacings_hz, contrast, eta }
    }

    /// Index of the smallest `eta`.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, e) in self.eta.iter().enumerate() {
            if *e < self.eta[best] {
                best = i;
            }
        }
        best
    }
}

/// `n` logarithmically spaced points from `lo` to `hi` inclusive.
pub fn log_sweep(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return alloc::vec![lo];
    }
    let (a, b) = (math::ln(lo), math::ln(hi));
    (0..n).map(|i| libm::exp(a + (b - a) * i as f64 / (n - 1) as f64)).collect()
}
