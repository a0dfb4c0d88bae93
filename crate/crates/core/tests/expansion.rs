use std::f64::consts::PI;

use floquet_core::eigen::{track_bands, EigenSettings};
use floquet_core::expansion::*;
use floquet_core::singularities::classify_singularity;
use floquet_core::{OperatorSpec, SpectralError};
use num_complex::Complex64;
use proptest::prelude::*;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn spec(text: &str) -> OperatorSpec {
    OperatorSpec::from_json_str(text).unwrap()
}

fn mathieu() -> OperatorSpec {
    spec(include_str!("../../../specs/mathieu.json"))
}

fn gasymov() -> OperatorSpec {
    spec(include_str!("../../../specs/gasymov.json"))
}

fn compact() -> ClassFlags {
    ClassFlags { compact_support: true, absolutely_continuous: true, ..Default::default() }
}

fn bump(x: f64, a: f64, b: f64) -> f64 {
    let u = (2.0 * x - a - b) / (b - a);
    if u.abs() < 1.0 {
        (-1.0 / (1.0 - u * u)).exp()
    } else {
        0.0
    }
}

fn tent(x: f64) -> f64 {
    (1.0 - (x - 1.25).abs()).max(0.0)
}

fn unit_bump() -> SampledFunction {
    SampledFunction::from_fn(-1.0, 2.0, 256, (0.05, 0.95), compact(), |x| vec![c(bump(x, 0.05, 0.95), 0.0)]).unwrap()
}

fn sup(a: &[Vec<Complex64>], b: &[Vec<Complex64>]) -> f64 {
    a.iter().zip(b).flat_map(|(u, v)| u.iter().zip(v).map(|(p, q)| (p - q).norm())).fold(0.0, f64::max)
}

fn transform_of_fibers(t: &[Complex64], fibers: Vec<Vec<Vec<Complex64>>>) -> GelfandTransform {
    GelfandTransform {
        per_unit: 256,
        fibers: t.iter().zip(fibers).map(|(&t, values)| Fiber { t, values, tail_bound: 0.0 }).collect(),
    }
}

#[test]
fn eigenfunction_fibers_pick_out_their_band() {
    let spec = mathieu();
    let t = [c(0.5, 0.0), c(1.0, 0.0), c(1.5, 0.0)];
    let bands = track_bands(&spec, &t, -3..=3, &EigenSettings::default()).unwrap();
    let target = 4;
    let fibers = bands.bands[target].records.iter().map(|r| r.psi.clone()).collect();
    let coeffs = expansion_coefficients(&bands, &transform_of_fibers(&t, fibers)).unwrap();
    for (p, band) in coeffs.iter().enumerate() {
        for a in &band.a {
            if p == target {
                assert!((a - 1.0).norm() < 1e-6, "{a}");
            } else {
                assert!(a.norm() <= 1e-6, "band {p}: {a}");
            }
        }
    }

    let zero = vec![vec![vec![c(0.0, 0.0)]; 257]; t.len()];
    let coeffs = expansion_coefficients(&bands, &transform_of_fibers(&t, zero)).unwrap();
    assert!(coeffs.iter().all(|b| b.a.iter().all(|a| *a == c(0.0, 0.0))));
}

#[test]
fn free_coefficients_are_fourier_transform_samples() {
    let free = OperatorSpec::free(2, 1).unwrap();
    let f = unit_bump();
    let t = [c(0.4, 0.0), c(1.1, 0.0), c(2.3, 0.0)];
    let bands = track_bands(&free, &t, -5..=5, &EigenSettings::default()).unwrap();
    let tr = gelfand_transform_on(&f, &t).unwrap();
    let coeffs = expansion_coefficients(&bands, &tr).unwrap();
    let h = 1.0 / 256.0;
    let fourier = |xi: f64| -> Complex64 {
        let n = f.values.len() - 1;
        (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                let x = f.x(i);
                w * f.values[i][0] * c(0.0, -xi * x).exp()
            })
            .sum::<Complex64>()
            * (h / 3.0)
    };
    for (band, b) in coeffs.iter().zip(&bands.bands) {
        for (i, &ti) in t.iter().enumerate() {
            let root = (-b.lambdas[i]).sqrt().re;
            let xi = [root, -root].into_iter().find(|xi| (((xi - ti.re) / (2.0 * PI)).round() * 2.0 * PI + ti.re - xi).abs() < 1e-6).unwrap();
            // a·Ψ(0) is independent of the eigenfunction phase
            let product = band.a[i] * b.records[i].psi[0][0];
            assert!((product - fourier(xi)).norm() < 1e-8, "ξ = {xi}: {product} vs {}", fourier(xi));
        }
    }
}

#[test]
fn free_bump_reconstructs_from_twenty_bands() {
    let free = OperatorSpec::free(2, 1).unwrap();
    let r = reconstruct(&free, &unit_bump(), -20..=20, &ExpansionSettings::default(), ExpansionMode::RealLine, &[]).unwrap();
    assert!(r.relative_l2_error <= 1e-3, "{}", r.relative_l2_error);
    assert!(r.omitted.is_empty());
    assert_eq!(r.band_count, 41);
    assert!(r.to_csv().lines().count() == r.x.len() + 1);
}

#[test]
fn three_band_element_is_reproduced() {
    let spec = mathieu();
    let t = periodic_t_grid(64, PI);
    let settings = EigenSettings { admissibility_eps: 0.04, ..Default::default() };
    let bands = track_bands(&spec, &t, -4..=4, &settings).unwrap();
    let chosen = [(1usize, c(1.0, 0.0)), (4, c(0.5, 0.0)), (7, c(0.0, 0.3))];
    let fibers: Vec<Vec<Vec<Complex64>>> = (0..t.len())
        .map(|i| {
            let mut sum = vec![vec![c(0.0, 0.0)]; 257];
            for &(p, weight) in &chosen {
                let w = weight * (c(0.0, -(p as f64)) * t[i]).exp();
                for (s, v) in sum.iter_mut().zip(&bands.bands[p].records[i].psi) {
                    s[0] += w * v[0];
                }
            }
            sum
        })
        .collect();
    let tr = transform_of_fibers(&t, fibers);
    let coeffs = expansion_coefficients(&bands, &tr).unwrap();
    let rebuilt: Vec<Vec<Vec<Complex64>>> = (0..t.len())
        .map(|i| {
            let records: Vec<_> = bands.bands.iter().map(|b| b.records[i].clone()).collect();
            let (a, sum) = fiber_expansion(&records, &tr.fibers[i].values).unwrap();
            for (p, band) in coeffs.iter().enumerate() {
                assert!((band.a[i] - a[p]).norm() < 1e-14);
            }
            sum
        })
        .collect();
    let original = inverse_gelfand(&tr, -1.0, 2.0).unwrap();
    let back = inverse_gelfand(&transform_of_fibers(&t, rebuilt), -1.0, 2.0).unwrap();
    assert!(sup(&original.values, &back.values) <= 1e-6, "{}", sup(&original.values, &back.values));
}

#[test]
fn regularization_without_flags_is_the_plain_expansion() {
    let free = OperatorSpec::free(2, 1).unwrap();
    let settings = ExpansionSettings { t_resolution: 64, ..Default::default() };
    let f = unit_bump();
    let plain = reconstruct(&free, &f, -10..=10, &settings, ExpansionMode::RealLine, &[]).unwrap();
    let reg = regularized_reconstruct(&free, &f, -10..=10, &settings, &[]).unwrap();
    assert!(sup(&plain.reconstruction, &reg.reconstruction) <= 1e-12);
    assert!(reg.correction.unwrap().iter().all(|v| v[0] == c(0.0, 0.0)));
}

#[test]
fn artificial_flag_splits_and_sums_back() {
    let spec = mathieu();
    let settings = ExpansionSettings { t_resolution: 64, ..Default::default() };
    let f = unit_bump();
    let plain = reconstruct(&spec, &f, -6..=6, &settings, ExpansionMode::RealLine, &[]).unwrap();
    // a regular point on the third band, deliberately flagged
    let lambda = plain.coefficients[2].lambda[20];
    let points = [RegularizationPoint { lambda, order: 2, delta: Some(3.0) }];
    let reg = regularized_reconstruct(&spec, &f, -6..=6, &settings, &points).unwrap();
    let correction = reg.correction.as_ref().unwrap();
    assert!(correction.iter().any(|v| v[0].norm() > 1e-6));
    let scale = plain.reconstruction.iter().map(|v| v[0].norm()).fold(0.0, f64::max);
    assert!(sup(&plain.reconstruction, &reg.reconstruction) <= 1e-9 * scale);
}

#[test]
fn flagged_band_is_rejected_on_the_real_line() {
    let spec = gasymov();
    let report = classify_singularity(&spec, c(-PI * PI, 0.0), c(PI, 0.0), &EigenSettings::default()).unwrap();
    let settings = ExpansionSettings { t_resolution: 16, ..Default::default() };
    let err = reconstruct(&spec, &unit_bump(), -3..=3, &settings, ExpansionMode::RealLine, &[report]).unwrap_err();
    assert!(matches!(err, SpectralError::SingularBandInRealLineMode(_)), "{err}");
}

#[test]
fn contour_mode_on_free_bump() {
    let free = OperatorSpec::free(2, 1).unwrap();
    let settings = ExpansionSettings { t_resolution: 128, ..Default::default() };
    let r = reconstruct(&free, &unit_bump(), -20..=20, &settings, ExpansionMode::Contour { epsilon: 0.2 }, &[]).unwrap();
    assert!(r.relative_l2_error <= 1e-3, "{}", r.relative_l2_error);
    assert!(r.richardson.unwrap() <= 1e-3, "{:?}", r.richardson);
    assert!(r.coefficients.iter().flat_map(|b| &b.t).any(|t| t.im > 0.1));
}

#[test]
fn contour_mode_rejects_slow_decay() {
    let free = OperatorSpec::free(2, 1).unwrap();
    let flags = ClassFlags { class_s: Some((1.0, 0.3)), ..Default::default() };
    let f = SampledFunction::from_fn(-8.0, 9.0, 256, (-8.0, 9.0), flags, |x| vec![c((-0.3 * x.abs()).exp(), 0.0)]).unwrap();
    let err = reconstruct(&free, &f, -2..=2, &ExpansionSettings::default(), ExpansionMode::Contour { epsilon: 0.2 }, &[]).unwrap_err();
    assert!(matches!(err, SpectralError::DivergentTransform { .. }), "{err}");
}

#[test]
fn reconstruction_is_linear() {
    let spec = mathieu();
    let settings = ExpansionSettings { t_resolution: 32, ..Default::default() };
    let f = unit_bump();
    let g = SampledFunction::from_fn(-1.0, 2.0, 256, (0.25, 1.75), compact(), |x| vec![c(0.0, tent(x + 0.25))]).unwrap();
    let (alpha, beta) = (c(2.0, -1.0), c(0.5, 3.0));
    let combo_values = f.values.iter().zip(&g.values).map(|(u, v)| vec![alpha * u[0] + beta * v[0]]).collect();
    let combo = SampledFunction::new(-1.0, 256, combo_values, (0.05, 1.75), compact()).unwrap();
    let rf = reconstruct(&spec, &f, -8..=8, &settings, ExpansionMode::RealLine, &[]).unwrap();
    let rg = reconstruct(&spec, &g, -8..=8, &settings, ExpansionMode::RealLine, &[]).unwrap();
    let rc = reconstruct(&spec, &combo, -8..=8, &settings, ExpansionMode::RealLine, &[]).unwrap();
    let expected: Vec<Vec<Complex64>> =
        rf.reconstruction.iter().zip(&rg.reconstruction).map(|(u, v)| vec![alpha * u[0] + beta * v[0]]).collect();
    assert!(sup(&rc.reconstruction, &expected) <= 1e-10);
}

#[test]
fn mathieu_error_decreases_under_doubling() {
    let spec = mathieu();
    let f = SampledFunction::from_fn(-1.0, 3.0, 256, (0.25, 2.25), compact(), |x| vec![c(tent(x), 0.0)]).unwrap();
    let mut errors = Vec::new();
    for (k, nt) in [(5i64, 16usize), (10, 32), (20, 64)] {
        let settings = ExpansionSettings { t_resolution: nt, ..Default::default() };
        let r = reconstruct(&spec, &f, -k..=k, &settings, ExpansionMode::RealLine, &[]).unwrap();
        assert!(r.omitted.is_empty(), "{:?}", r.omitted);
        errors.push(r.l2_error);
    }
    assert!(errors.windows(2).all(|w| w[1] <= w[0]), "{errors:?}");
    assert!(errors[2] < 1e-2, "{errors:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gelfand_round_trip_of_shifted_bumps(
        weights in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 3),
        t_re in 0.0f64..6.0,
    ) {
        let profile = |x: f64| bump(x, 0.1, 0.9);
        let f = SampledFunction::from_fn(-2.0, 3.0, 256, (0.1, 2.9), compact(), |x| {
            vec![weights.iter().enumerate().map(|(s, &(re, im))| c(re, im) * profile(x - s as f64)).sum()]
        })
        .unwrap();
        prop_assert!(quasiperiodicity_defect(&f, c(t_re, 0.3)) <= 1e-10);
        let tr = gelfand_transform_on(&f, &periodic_t_grid(8, 0.0)).unwrap();
        let back = inverse_gelfand(&tr, -2.0, 3.0).unwrap();
        prop_assert!(sup(&back.values, &f.values) <= 1e-12);
    }
}

#[test]
fn gasymov_flag_is_regularized() {
    let spec = gasymov();
    let report = classify_singularity(&spec, c(-PI * PI, 0.0), c(PI, 0.0), &EigenSettings::default()).unwrap();
    let point = RegularizationPoint::from_report(&report).unwrap();
    let settings = ExpansionSettings { t_resolution: 32, ..Default::default() };
    let f = unit_bump();
    let reg = regularized_reconstruct(&spec, &f, -3..=3, &settings, &[point]).unwrap();
    let principal = reg.principal.as_ref().unwrap();
    let correction = reg.correction.as_ref().unwrap();
    assert!(correction.iter().any(|v| v[0].norm() > 0.0));
    assert!(principal.iter().chain(correction).all(|v| v[0].is_finite()));
    let plain = reconstruct(&spec, &f, -3..=3, &settings, ExpansionMode::RealLine, &[]).unwrap();
    let scale = plain.reconstruction.iter().map(|v| v[0].norm()).fold(0.0, f64::max);
    assert!(sup(&plain.reconstruction, &reg.reconstruction) <= 1e-9 * scale);
}
