use nvgrating_core::grape::GratingSpec;
use nvgrating_core::sensitivity::*;
use proptest::prelude::*;

fn reference() -> SensitivityParams {
    SensitivityParams::reference_nv()
}

#[test]
fn optimum_sensitivity_of_reference_nv() {
    let p = reference();
    let d = optimal_spacing(&p);
    assert!((d - 2.404e6).abs() / 2.404e6 < 1e-3);
    let eta_ut = eta(d, &p) * 1e6;
    assert!((eta_ut / 4.50 - 1.0).abs() < 0.01, "{eta_ut}");
}

#[test]
fn log_sweep_argmin_within_one_cell() {
    let p = reference();
    let s = log_sweep(1e5, 1e8, 10_000);
    let curve = SensitivityCurve::evaluate(s.clone(), &p);
    let i = curve.argmin();
    let d = optimal_spacing(&p);
    assert!(s[i.saturating_sub(1)] <= d && d <= s[(i + 1).min(s.len() - 1)]);
    assert!(curve.eta.iter().all(|e| *e > 0.0));
}

#[test]
fn golden_section_agrees_with_closed_form() {
    for t2 in [416e-9, 1e-6, 37e-9] {
        let p = SensitivityParams { t2_star_s: t2, ..reference() };
        let d = optimal_spacing(&p);
        let g = optimal_spacing_golden(&p, d / 10.0, d * 10.0, 1e-9);
        assert!((g / d - 1.0).abs() < 1e-6);
    }
    let p = SensitivityParams { t2_star_s: 1e-6, ..reference() };
    assert!((optimal_spacing(&p) - 1e6).abs() < 1e-6);
}

#[test]
fn doubled_spacing_costs_the_expected_factor() {
    let p = reference();
    let d = optimal_spacing(&p);
    let ratio = eta(2.0 * d, &p) / eta(d, &p);
    assert!((ratio - 2.0 * (0.125f64 - 0.5).exp()).abs() < 1e-12);
    assert!((ratio - 1.374).abs() < 1e-3);
}

#[test]
fn eta_is_convex_in_log_spacing_near_optimum() {
    let p = reference();
    let d = optimal_spacing(&p);
    let h = 0.01;
    for k in -20..=20 {
        let u = d.ln() + k as f64 * 0.02;
        let f = |v: f64| eta(v.exp(), &p);
        assert!(f(u + h) - 2.0 * f(u) + f(u - h) > 0.0);
    }
}

#[test]
fn fid_endpoints() {
    let p = reference();
    assert_eq!(fid_contrast(0.0, &p), p.c0);
    assert!((fid_contrast(p.t2_star_s, &p) - p.c0 * (-0.5f64).exp()).abs() < 1e-15);
}

fn grating(n: usize, spacing: f64, width: f64) -> GratingSpec {
    GratingSpec {
        n_dips: n,
        spacing_hz: spacing,
        dip_width_hz: width,
        dip_depth: 1.0,
        center_offset_hz: 0.0,
        missing_dips: vec![],
    }
}

#[test]
fn dynamic_range_in_millitesla() {
    let p = reference();
    // 61.6 MHz of addressable span at 28 MHz/mT
    let g = grating(23, 2.8e6, 0.0);
    let g = GratingSpec { dip_width_hz: 61.6e6 - g.span_hz(), ..g };
    assert!((dynamic_range(&g, &p) * 1e3 - 2.2).abs() < 1e-12);
    let a = grating(5, 1e6, 0.2e6);
    let b = grating(5, 2e6, 0.2e6);
    let w = 0.2e6 / p.gamma_hz_per_t;
    assert!(((dynamic_range(&b, &p) - w) / (dynamic_range(&a, &p) - w) - 2.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn contrast_equals_fid_envelope(delta in 1e4..1e9f64, t2 in 1e-8..1e-5f64) {
        let p = SensitivityParams { t2_star_s: t2, ..reference() };
        let a = contrast(delta, &p);
        let b = fid_contrast(1.0 / delta, &p);
        prop_assert!(a == b || ((a - b) / b).abs() < 1e-14);
    }

    #[test]
    fn eta_scales_with_inverse_root_count_rate(delta in 1e5..1e8f64, k in 0.1..10.0f64) {
        let p = reference();
        let q = SensitivityParams { s0_hz: p.s0_hz * k, ..p };
        prop_assert!((eta(delta, &q) * k.sqrt() / eta(delta, &p) - 1.0).abs() < 1e-12);
    }
}
