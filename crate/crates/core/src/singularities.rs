//! Multiple eigenvalues (zeros of the resultant `R`), the exceptional
//! quasimomenta where they occur, and classification of spectral singularities
//! by the growth of the spectral projection norm `1/|α|`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::characteristic::{self, resultant_r, t_values_for_lambda, TFiber};
use crate::eigen::{self, count_eigenvalues_in_circle, EigenSettings};
use crate::error::{Result, SpectralError};
use crate::linalg;
use crate::ode::{self, OdeTolerances};
use crate::operator::OperatorSpec;

/// Axis-aligned rectangle in the λ-plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaRect {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
}

impl LambdaRect {
    pub fn new(re_min: f64, re_max: f64, im_min: f64, im_max: f64) -> Result<Self> {
        if !(re_min < re_max && im_min <= im_max) {
            return Err(SpectralError::InvalidParameters(format!(
                "empty rectangle [{re_min}, {re_max}] x [{im_min}, {im_max}]i"
            )));
        }
        Ok(Self { re_min, re_max, im_min, im_max })
    }

    fn contains(&self, z: Complex64, margin: f64) -> bool {
        z.re >= self.re_min - margin && z.re <= self.re_max + margin && z.im >= self.im_min - margin && z.im <= self.im_max + margin
    }
}

pub const DEFAULT_SCAN_DENSITY: usize = 40;
const CIRCLE_SAMPLES: usize = 48;

/// Roots inside `|λ − center| < radius` of an entire function, from the
/// Taylor polynomial recovered by a DFT of samples on the circle. Roots
/// closer than `merge` (relative to the radius) are averaged into one
/// cluster, reported as `(mean, size)`; averaging cancels the leading
/// perturbation of a multiple root.
fn disk_roots<F: FnMut(Complex64) -> Result<Complex64>>(
    mut f: F,
    center: Complex64,
    radius: f64,
    merge: f64,
) -> Result<(Vec<(Complex64, usize)>, f64)> {
    let n = CIRCLE_SAMPLES;
    let values: Vec<Complex64> = (0..n)
        .map(|i| f(center + Complex64::from_polar(radius, 2.0 * PI * i as f64 / n as f64)))
        .collect::<Result<_>>()?;
    let peak = values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut coeffs: Vec<Complex64> = (0..n)
        .map(|q| {
            values
                .iter()
                .enumerate()
                .map(|(i, v)| v * Complex64::from_polar(1.0, -2.0 * PI * (i * q) as f64 / n as f64))
                .sum::<Complex64>()
                / n as f64
        })
        .collect();
    // discard the aliased upper half and the noise tail
    coeffs.truncate(n / 2);
    let cmax = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    while coeffs.len() > 1 && coeffs.last().unwrap().norm() <= 1e-11 * cmax {
        coeffs.pop();
    }
    if coeffs.len() < 2 {
        return Ok((Vec::new(), peak));
    }
    let roots: Vec<Complex64> = linalg::polynomial_roots(&coeffs).into_iter().filter(|w| w.norm() < 1.0).collect();
    let mut clusters: Vec<(Complex64, usize)> = Vec::new();
    for w in roots {
        match clusters.iter_mut().find(|(s, k)| (*s / *k as f64 - w).norm() <= merge) {
            Some((s, k)) => {
                *s += w;
                *k += 1;
            }
            None => clusters.push((w, 1)),
        }
    }
    Ok((clusters.into_iter().map(|(s, k)| (center + s / k as f64 * radius, k)).collect(), peak))
}

/// Scan `|R|` on a `density × density` grid over `rect`, take the local
/// minima, and locate the zeros of `R` near each from Taylor polynomials on
/// two nested circles. Returns the zeros inside the rectangle, sorted by (Re, Im).
pub fn find_multiple_eigenvalues(spec: &OperatorSpec, rect: &LambdaRect, density: usize, tol: &OdeTolerances) -> Result<Vec<Complex64>> {
    if density < 2 {
        return Err(SpectralError::InvalidParameters("scan density must be at least 2".into()));
    }
    let nx = density;
    let ny = if rect.im_max > rect.im_min { density } else { 1 };
    let dx = (rect.re_max - rect.re_min) / (nx - 1) as f64;
    let dy = if ny > 1 { (rect.im_max - rect.im_min) / (ny - 1) as f64 } else { 0.0 };
    let at = |i: usize, j: usize| Complex64::new(rect.re_min + i as f64 * dx, rect.im_min + j as f64 * dy);
    let mut grid = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            grid[j * nx + i] = resultant_r(spec, at(i, j), tol)?.norm();
        }
    }
    let mut minima = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let v = grid[j * nx + i];
            let mut is_min = true;
            for (di, dj) in [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                let (ii, jj) = (i as i64 + di, j as i64 + dj);
                if ii < 0 || jj < 0 || ii >= nx as i64 || jj >= ny as i64 {
                    continue;
                }
                if grid[jj as usize * nx + ii as usize] < v {
                    is_min = false;
                }
            }
            if is_min {
                minima.push(at(i, j));
            }
        }
    }
    let radius = 1.5 * dx.max(dy);
    let mut found: Vec<Complex64> = Vec::new();
    let r_at = |l: Complex64| resultant_r(spec, l, tol);
    for m in minima {
        let (coarse, _) = disk_roots(r_at, m, radius, 1e-2)?;
        for (guess, _) in coarse {
            let fine_r = radius / 16.0;
            let (fine, peak) = disk_roots(r_at, guess, fine_r, 0.2)?;
            for (root, _) in fine {
                if !rect.contains(root, 1e-9 * (1.0 + root.norm())) {
                    continue;
                }
                if r_at(root)?.norm() > 1e-6 * peak {
                    continue;
                }
                if !found.iter().any(|f| (f - root).norm() <= 1e-6 * (1.0 + root.norm())) {
                    found.push(root);
                }
            }
        }
    }
    found.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(found)
}

/// An exceptional quasimomentum: a multiple root `t` of `Δ(λ*, ·)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExceptionalPoint {
    pub lambda: Complex64,
    pub t: Complex64,
    pub multiplicity: usize,
}

/// Quasimomenta at which `λ*` is a multiple eigenvalue of `L_t`: fibers that
/// are multiple roots of `Δ(λ*, ·)`, and simple fibers where `∂Δ/∂λ` also
/// vanishes (judged against its size at `λ* + h`, `h = 10⁻³(1 + |λ*|)`).
pub fn exceptional_t_set(spec: &OperatorSpec, lambdas: &[Complex64], strip_offset: f64, tol: &OdeTolerances) -> Result<Vec<ExceptionalPoint>> {
    let mut out = Vec::new();
    for &lambda in lambdas {
        let h = 1e-3 * (1.0 + lambda.norm());
        let at = ode::segmented_flow(spec, lambda, true, tol)?;
        let near = ode::segmented_flow(spec, lambda + h, true, tol)?;
        for f in t_values_for_lambda(spec, lambda, strip_offset, tol)? {
            let z = (linalg::I * f.t).exp();
            let d0 = characteristic::evaluate_flow(&at, z).d_lambda.unwrap_or_default().norm();
            let d1 = characteristic::evaluate_flow(&near, z).d_lambda.unwrap_or_default().norm();
            if f.multiplicity >= 2 || d0 <= 1e-2 * d1 {
                out.push(ExceptionalPoint { lambda, t: f.t, multiplicity: f.multiplicity });
            }
        }
    }
    Ok(out)
}

/// `1/|α|`: the norm of the spectral projection onto the eigenvalue `λ` of `L_t`.
pub fn projection_norm(spec: &OperatorSpec, t: Complex64, lambda: Complex64, settings: &EigenSettings) -> Result<f64> {
    Ok(eigen::biorthogonal_pair(spec, t, lambda, settings)?.projection_norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    RegularMultiple,
    SpectralSingularity,
    Inconclusive,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Classification::RegularMultiple => "regular-multiple",
            Classification::SpectralSingularity => "spectral-singularity",
            Classification::Inconclusive => "inconclusive",
        })
    }
}

/// Growth exponent at or below which the projections count as bounded.
pub const REGULAR_EXPONENT: f64 = 0.1;
/// Growth exponent (with fit quality `R² ≥ SINGULAR_R2`) from which a singularity is flagged.
pub const SINGULAR_EXPONENT: f64 = 0.5;
pub const SINGULAR_R2: f64 = 0.9;
pub const PROFILE_START: f64 = 0.1;
/// `|Im t*|` above which an exceptional point lies off the real quasimomentum axis.
pub const REAL_AXIS_TOL: f64 = 1e-6;
pub const PROFILE_LEVELS: usize = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileSample {
    pub distance: f64,
    pub t: Complex64,
    /// Eigenvalues near `λ*` at this `t`.
    pub lambdas: Vec<Complex64>,
    /// Largest `1/|α|` among them.
    pub projection_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingularityReport {
    pub lambda: Complex64,
    pub t_values: Vec<TFiber>,
    pub t_star: Complex64,
    pub multiplicity: usize,
    pub classification: Classification,
    pub exponent: Option<f64>,
    pub r_squared: Option<f64>,
    /// Jet order `i_l` for regularization; set for singularities only.
    pub pole_order: Option<u32>,
    /// Growth exponent of `(1/|α|² − 1)^{1/2}`, the tangent of the angle
    /// between `Ψ` and `X`; it exposes blow-up whose constant is too small
    /// to move `1/|α|` visibly on the sampled ladder. Diagnostic only.
    pub excess_exponent: Option<f64>,
    pub norm_profile: Vec<ProfileSample>,
}

fn linear_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let ss_res = (syy - slope * sxy).max(0.0);
    let r2 = if syy > 1e-24 { 1.0 - ss_res / syy } else { 1.0 };
    (slope, r2)
}

/// Radius of a disk around `λ*` holding only the eigenvalues that merge at `(λ*, t*)`.
fn isolating_radius(spec: &OperatorSpec, lambda: Complex64, t_star: Complex64, settings: &EigenSettings) -> Result<(f64, usize)> {
    let n = spec.order() as f64;
    let mut rho = 0.5 * (1.0 + lambda.norm()).powf((n - 1.0) / n);
    for halving in 0..10 {
        let count = count_eigenvalues_in_circle(spec, t_star, lambda, rho, settings)?;
        if count < 2 {
            break;
        }
        if count == 2 || halving == 9 {
            return Ok((rho, count));
        }
        rho *= 0.5;
    }
    Err(SpectralError::BandResolutionFailure { t_star, distance: 0.0 })
}

/// Sample `1/|α|` on the eigenvalues that meet at `(λ*, t*)`, at distances
/// `d = 0.1·2^{−r}`, `r = 0..5`, along `t = t* + d`, and fit the growth
/// exponent of `log(1/|α|)` against `log(1/d)`.
///
/// Only real quasimomenta enter the definition of a spectral singularity, so
/// a point with `|Im t*| > REAL_AXIS_TOL` is reported regular without a profile.
pub fn classify_singularity(spec: &OperatorSpec, lambda: Complex64, t_star: Complex64, settings: &EigenSettings) -> Result<SingularityReport> {
    let t_values = t_values_for_lambda(spec, lambda, settings.strip_offset, &settings.ode)?;
    let multiplicity = t_values
        .iter()
        .filter(|f| (f.t - t_star).norm() < 1e-3 || ((f.t - t_star).re.abs() - 2.0 * PI).abs() < 1e-3)
        .map(|f| f.multiplicity)
        .max()
        .unwrap_or(1);
    if t_star.im.abs() > REAL_AXIS_TOL {
        return Ok(SingularityReport {
            lambda,
            t_values,
            t_star,
            multiplicity,
            classification: Classification::RegularMultiple,
            exponent: None,
            r_squared: None,
            pole_order: None,
            excess_exponent: None,
            norm_profile: Vec::new(),
        });
    }
    let (rho, count) = isolating_radius(spec, lambda, t_star, settings)?;
    let mut profile = Vec::new();
    let mut smallest_resolved = false;
    for r in 0..PROFILE_LEVELS {
        let d = PROFILE_START * 0.5f64.powi(r as i32);
        let t = t_star + d;
        let z = (linalg::I * t).exp();
        let sample = (|| -> Result<Option<ProfileSample>> {
            if count_eigenvalues_in_circle(spec, t, lambda, rho, settings)? != count {
                return Ok(None);
            }
            let (clusters, _) = disk_roots(
                |l| {
                    let flow = ode::segmented_flow(spec, l, false, &settings.ode)?;
                    Ok(linalg::determinant(&characteristic::cyclic_matrix(&flow, z)))
                },
                lambda,
                rho,
                1e-9,
            )?;
            let mut lambdas: Vec<Complex64> = Vec::new();
            let mut worst: f64 = 0.0;
            for (guess, _) in clusters {
                let refined = eigen::refine(spec, t, guess, settings)?;
                if lambdas.iter().any(|l| (l - refined.lambda).norm() <= 1e-8 * (1.0 + refined.lambda.norm())) {
                    return Ok(None);
                }
                let rec = eigen::record_from_flow(spec, t, &refined.flow, settings)?;
                worst = worst.max(rec.projection_norm());
                lambdas.push(refined.lambda);
            }
            if lambdas.len() != count {
                return Ok(None);
            }
            Ok(Some(ProfileSample { distance: d, t, lambdas, projection_norm: worst }))
        })();
        match sample {
            Ok(Some(s)) => {
                smallest_resolved = r == PROFILE_LEVELS - 1;
                profile.push(s);
            }
            Ok(None) | Err(SpectralError::NotSimple { .. }) | Err(SpectralError::NoConvergence { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if !smallest_resolved || profile.len() < 3 {
        return Err(SpectralError::BandResolutionFailure {
            t_star,
            distance: PROFILE_START * 0.5f64.powi(PROFILE_LEVELS as i32 - 1),
        });
    }
    let points: Vec<(f64, f64)> = profile.iter().map(|s| ((1.0 / s.distance).ln(), s.projection_norm.ln())).collect();
    let (exponent, r2) = linear_fit(&points);
    let classification = if exponent <= REGULAR_EXPONENT {
        Classification::RegularMultiple
    } else if exponent >= SINGULAR_EXPONENT && r2 >= SINGULAR_R2 {
        Classification::SpectralSingularity
    } else {
        Classification::Inconclusive
    };
    let pole_order = (classification == Classification::SpectralSingularity).then(|| exponent.ceil() as u32);
    let excess: Vec<(f64, f64)> = profile
        .iter()
        .map(|s| ((1.0 / s.distance).ln(), (s.projection_norm.powi(2) - 1.0).max(0.0).sqrt()))
        .filter(|p| p.1 > 1e-3)
        .map(|(x, y)| (x, y.ln()))
        .collect();
    let excess_exponent = (excess.len() == profile.len()).then(|| linear_fit(&excess).0);
    Ok(SingularityReport {
        lambda,
        t_values,
        t_star,
        multiplicity,
        classification,
        exponent: Some(exponent),
        r_squared: Some(r2),
        pole_order,
        excess_exponent,
        norm_profile: profile,
    })
}

/// Multiple eigenvalues in `rect`, their exceptional quasimomenta, and one
/// classification report per `(λ*, t*)`. Points whose nearby eigenvalues
/// cannot be resolved are reported as inconclusive.
pub fn analyze_singularities(spec: &OperatorSpec, rect: &LambdaRect, density: usize, settings: &EigenSettings) -> Result<Vec<SingularityReport>> {
    let lambdas = find_multiple_eigenvalues(spec, rect, density, &settings.ode)?;
    let mut reports = Vec::new();
    for point in exceptional_t_set(spec, &lambdas, settings.strip_offset, &settings.ode)? {
        match classify_singularity(spec, point.lambda, point.t, settings) {
            Ok(r) => reports.push(r),
            Err(SpectralError::BandResolutionFailure { .. }) => reports.push(SingularityReport {
                lambda: point.lambda,
                t_values: t_values_for_lambda(spec, point.lambda, settings.strip_offset, &settings.ode)?,
                t_star: point.t,
                multiplicity: point.multiplicity,
                classification: Classification::Inconclusive,
                exponent: None,
                r_squared: None,
                pole_order: None,
                excess_exponent: None,
                norm_profile: Vec::new(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(reports)
}

/// Smallest distance between two of the eigenvalues near `λ*` at `t`, by the
/// disk-root construction; used to check that bands pinch at exceptional points.
pub fn local_band_gap(spec: &OperatorSpec, lambda: Complex64, t: Complex64, radius: f64, tol: &OdeTolerances) -> Result<f64> {
    let z = (linalg::I * t).exp();
    let (clusters, _) = disk_roots(
        |l| {
            let flow = ode::segmented_flow(spec, l, false, tol)?;
            Ok(linalg::determinant(&characteristic::cyclic_matrix(&flow, z)))
        },
        lambda,
        radius,
        1e-12,
    )?;
    // a cluster of size > 1 means two roots closer than the merge distance
    if clusters.iter().any(|c| c.1 > 1) {
        return Ok(0.0);
    }
    let pts: Vec<Complex64> = clusters.iter().map(|c| c.0).collect();
    let mut gap = f64::INFINITY;
    for a in 0..pts.len() {
        for b in a + 1..pts.len() {
            gap = gap.min((pts[a] - pts[b]).norm());
        }
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::CMatrix;
    use crate::operator::FourierMatrixPotential;
    use std::collections::BTreeMap;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn gasymov() -> OperatorSpec {
        let mut h = BTreeMap::new();
        h.insert(1, CMatrix::from_element(1, 1, c(1.0, 0.0)));
        let mut p = BTreeMap::new();
        p.insert(2, FourierMatrixPotential::new(1, h).unwrap());
        OperatorSpec::new(2, 1, p).unwrap()
    }

    #[test]
    fn free_scalar_multiple_eigenvalues() {
        let free = OperatorSpec::free(2, 1).unwrap();
        let rect = LambdaRect::new(-110.0, -1.0, -1.0, 1.0).unwrap();
        let found = find_multiple_eigenvalues(&free, &rect, 40, &OdeTolerances::default()).unwrap();
        let expected = [-9.0 * PI * PI, -4.0 * PI * PI, -PI * PI];
        assert_eq!(found.len(), 3, "{found:?}");
        for (f, e) in found.iter().zip(expected) {
            assert!((f - e).norm() < 1e-6, "{f} vs {e}");
        }
        let a = exceptional_t_set(&free, &found, 0.4, &OdeTolerances::default()).unwrap();
        assert_eq!(a.len(), 3);
        for p in &a {
            assert_eq!(p.multiplicity, 2);
            assert!(p.t.norm() < 1e-4 || (p.t - PI).norm() < 1e-4, "{:?}", p);
        }
    }

    #[test]
    fn empty_rectangle_and_empty_list() {
        let free = OperatorSpec::free(2, 1).unwrap();
        let rect = LambdaRect::new(-3.0, -2.0, -1.0, 1.0).unwrap();
        assert!(find_multiple_eigenvalues(&free, &rect, 12, &OdeTolerances::default()).unwrap().is_empty());
        assert!(exceptional_t_set(&free, &[], 0.4, &OdeTolerances::default()).unwrap().is_empty());
        assert!(LambdaRect::new(1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn free_projection_norm_is_one() {
        let free = OperatorSpec::free(2, 1).unwrap();
        let t = c(1.1, 0.0);
        let l = c(-(2.0 * PI + 1.1f64).powi(2), 0.0);
        assert!((projection_norm(&free, t, l, &EigenSettings::default()).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn free_scalar_crossing_is_regular() {
        let free = OperatorSpec::free(2, 1).unwrap();
        let r = classify_singularity(&free, c(-PI * PI, 0.0), c(PI, 0.0), &EigenSettings::default()).unwrap();
        assert_eq!(r.classification, Classification::RegularMultiple);
        assert!(r.norm_profile.iter().all(|s| (s.projection_norm - 1.0).abs() < 1e-6));
    }

    #[test]
    fn gasymov_potential_has_singularity_at_pi() {
        let spec = gasymov();
        let r = classify_singularity(&spec, c(-PI * PI, 0.0), c(PI, 0.0), &EigenSettings::default()).unwrap();
        assert_eq!(r.classification, Classification::SpectralSingularity, "{:?}", r.exponent);
        assert!(r.pole_order.unwrap() >= 1);
        for w in r.norm_profile.windows(2) {
            assert!(w[1].projection_norm > w[0].projection_norm);
        }
    }

    #[test]
    fn gap_branch_points_of_mathieu_are_regular() {
        let mut h = BTreeMap::new();
        h.insert(1, CMatrix::from_element(1, 1, c(1.0, 0.0)));
        h.insert(-1, CMatrix::from_element(1, 1, c(1.0, 0.0)));
        let mut p = BTreeMap::new();
        p.insert(2, FourierMatrixPotential::new(1, h).unwrap());
        let spec = OperatorSpec::new(2, 1, p).unwrap();
        let rect = LambdaRect::new(-12.0, -8.0, -1.0, 1.0).unwrap();
        let reports = analyze_singularities(&spec, &rect, DEFAULT_SCAN_DENSITY, &EigenSettings::default()).unwrap();
        assert!(reports.iter().any(|r| r.t_star.im.abs() > 0.1));
        for r in &reports {
            assert_eq!(r.classification, Classification::RegularMultiple);
            assert!(r.t_star.im.abs() <= REAL_AXIS_TOL || r.norm_profile.is_empty());
        }
    }
}
